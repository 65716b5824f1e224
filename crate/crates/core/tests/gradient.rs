mod common;

use common::{random_binary_mask, random_tensor, relative_error, rng, FD_STEP};
use protoseg::bcma::{self, SparsePattern};
use protoseg::encoder::{self, EncoderConfig, Image};
use protoseg::fspa::{self, FspaConfig};
use protoseg::numerics::{ParamStore, Tape, Tensor, Var};
use protoseg::pipeline::{self, Mode};
use protoseg::ran;
use rand::Rng;

const TOLERANCE: f64 = 1e-3;

/// Contract `out` with fixed random weights to get a scalar.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let c = tape.constant(random_tensor(&mut rng(seed), &shape));
    let prod = tape.mul(out, c).unwrap();
    tape.sum(prod)
}

/// Largest relative error between tape and central-difference gradients
/// with respect to every entry of every input.
fn max_input_error(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs);
    let grads = tape.gradients(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.len() {
            let shifted = |delta: f64| {
                let mut xs = inputs.to_vec();
                let mut data = x.data().to_vec();
                data[i] += delta;
                xs[k] = Tensor::new(x.shape().to_vec(), data).unwrap();
                let (t, _, l) = eval(&xs);
                t.value(l).data()[0]
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

#[test]
fn resemblance_fusion_gradient() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let s = random_tensor(&mut r, &[4, 3]);
        let q = random_tensor(&mut r, &[4, 3]);
        let err = max_input_error(&[s, q], |tape, v| {
            let out = ran::fuse_on(tape, v[0], v[1]).unwrap();
            weighted_sum(tape, out, 100 + seed)
        });
        assert!(err <= TOLERANCE, "seed {seed}: {err}");
    }
}

#[test]
fn foreground_attention_gradient_with_frozen_clusters() {
    for seed in 0..5 {
        let mut r = rng(10 + seed);
        let rows = random_tensor(&mut r, &[16, 4]);
        let mut mask = random_binary_mask(&mut r, 4, 4);
        while mask.count_on() < 3 {
            mask = random_binary_mask(&mut r, 4, 4);
        }
        let cfg = FspaConfig { num_clusters: 3, ..FspaConfig::default() };
        let assignment = fspa::assign_clusters(&rows, &mask, &cfg).unwrap();
        let err = max_input_error(&[rows], |tape, v| {
            let (fused, pf) = fspa::foreground_on(tape, v[0], &mask, &assignment).unwrap();
            let a = weighted_sum(tape, fused, 200 + seed);
            let b = weighted_sum(tape, pf, 300 + seed);
            tape.add(a, b).unwrap()
        });
        assert!(err <= TOLERANCE, "seed {seed}: {err}");
    }
}

#[test]
fn refine_gradient_wrt_bank_and_prototypes() {
    for seed in 0..5 {
        let mut r = rng(20 + seed);
        let p_n = random_tensor(&mut r, &[4, 4]);
        let a = random_tensor(&mut r, &[4, 4]);
        let pattern = SparsePattern::new([0.3, 0.6, 0.3], 0.2 + seed as f64 * 0.3).unwrap();
        let err = max_input_error(&[p_n, a], |tape, v| {
            let out = bcma::refine_on(tape, v[0], v[1], &pattern).unwrap();
            weighted_sum(tape, out, 400 + seed)
        });
        assert!(err <= TOLERANCE, "seed {seed}: {err}");
    }
}

#[test]
fn encoder_first_layer_gradient() {
    let cfg = EncoderConfig { channels: 4, seed: 3 };
    let mut params = ParamStore::new();
    encoder::init_encoder_params(&mut params, &cfg).unwrap();
    let mut r = rng(30);
    let image = Image::new(8, 8, (0..64).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let loss_of = |p: &ParamStore| {
        let mut tape = Tape::new();
        let map = encoder::encode_on(&mut tape, &image, p).unwrap();
        let l = weighted_sum(&mut tape, map, 31);
        (tape, l)
    };
    let (tape, l) = loss_of(&params);
    let grads = tape.backward(l, &params).unwrap();
    for name in ["encoder.conv1.weight", "encoder.conv1.bias"] {
        let base = params.get(name).unwrap().clone();
        let analytic = grads.get(params.index_of(name).unwrap());
        for i in 0..base.len() {
            let shifted = |delta: f64| {
                let mut data = base.data().to_vec();
                data[i] += delta;
                let mut p = params.clone();
                p.set(name, Tensor::new(base.shape().to_vec(), data).unwrap()).unwrap();
                let (t, l) = loss_of(&p);
                t.value(l).data()[0]
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            let err = relative_error(analytic.data()[i], numeric);
            assert!(err <= TOLERANCE, "{name}[{i}]: {} vs {numeric}", analytic.data()[i]);
        }
    }
}

#[test]
fn total_gradient_is_sum_of_component_gradients() {
    let (cfg, ep) = common::small_episode(4);
    let params = pipeline::init_params(&cfg).unwrap();
    let grads_of = |which: usize| {
        let mut tape = Tape::new();
        let out = pipeline::forward_episode(&mut tape, &params, &cfg, &ep, Mode::Train, None).unwrap();
        let loss = [out.total_loss, out.seg_loss, out.reg_loss][which].unwrap();
        tape.backward(loss, &params).unwrap()
    };
    let (total, seg, reg) = (grads_of(0), grads_of(1), grads_of(2));
    for k in 0..params.len() {
        for i in 0..total.get(k).len() {
            let sum = seg.get(k).data()[i] + reg.get(k).data()[i];
            assert!((total.get(k).data()[i] - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
        }
    }
}

#[test]
fn bank_gradient_through_full_episode() {
    let (cfg, ep) = common::small_episode(2);
    let params = pipeline::init_params(&cfg).unwrap();
    let report = common::check_total_loss_gradient(&params, &cfg, &ep, &[bcma::ATTENTION_PARAM], TOLERANCE);
    assert_eq!(report.checked, 16);
    assert_eq!(report.failures, 0, "{report:?}");
}

#[test]
fn frozen_bank_gets_no_update() {
    let (mut cfg, ep) = common::small_episode(2);
    cfg.bcma.freeze_a = true;
    let mut params = pipeline::init_params(&cfg).unwrap();
    let before = params.get(bcma::ATTENTION_PARAM).unwrap().clone();
    let mut tape = Tape::new();
    let out = pipeline::forward_episode(&mut tape, &params, &cfg, &ep, Mode::Train, None).unwrap();
    let grads = tape.backward(out.total_loss.unwrap(), &params).unwrap();
    params.sgd_step(&grads, 0.5).unwrap();
    assert_eq!(params.get(bcma::ATTENTION_PARAM).unwrap(), &before);
    assert_ne!(params.get("encoder.conv3.bias").unwrap(), pipeline::init_params(&cfg).unwrap().get("encoder.conv3.bias").unwrap());
}
