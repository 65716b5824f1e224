//! Background channel-structural multi-head attention.
//!
//! Grid-pooled background prototypes `P_n` (G×D) are refined element by
//! element: head `j` produces element `j` of every prototype as the dot
//! product of the prototype with `r_j ⊙ a_j`, where `a_j` is row `j` of the
//! learnable bank `A` and `r_j = 1 + β·(w_c ⊙ m_j)` highlights the channels
//! in head `j`'s sparse band according to their cosine similarity with
//! channel `j` across the grid.
//!
//! Stacked over all heads this is `P_a = P_n · (R ⊙ A)ᵀ` with
//! `R = 1 + β·(softmax_rows(cos(Q_n, Q_n)) ⊙ M)` and `Q_n = P_nᵀ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{rows_to_map, FeatureMap, Mask};
use crate::numerics::{cosine, softmax, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcmaConfig {
    pub beta: f64,
    pub w_band: [f64; 3],
    pub pool_window: [usize; 2],
    pub bg_threshold: f64,
    /// Keep `A` at its initial band pattern during training.
    pub freeze_a: bool,
    /// Force β = 0.
    pub no_adjust: bool,
    /// Initialize `A` uniformly at random instead of from the band.
    pub random_init: bool,
}

impl Default for BcmaConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            w_band: [0.3, 0.6, 0.3],
            pool_window: [4, 4],
            bg_threshold: 0.5,
            freeze_a: false,
            no_adjust: false,
            random_init: false,
        }
    }
}

impl BcmaConfig {
    pub fn effective_beta(&self) -> f64 {
        if self.no_adjust {
            0.0
        } else {
            self.beta
        }
    }

    pub fn pattern(&self) -> Result<SparsePattern> {
        SparsePattern::new(self.w_band, self.effective_beta())
    }

    pub fn window(&self) -> (usize, usize) {
        (self.pool_window[0], self.pool_window[1])
    }
}

/// Band `(w1, w2, w3)` centred on each head's channel, plus the control
/// strength β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePattern {
    pub band: [f64; 3],
    pub beta: f64,
}

impl SparsePattern {
    pub fn new(band: [f64; 3], beta: f64) -> Result<Self> {
        let [w1, w2, w3] = band;
        if band.iter().any(|w| !(0.0..=1.0).contains(w)) || w1 != w3 || w2 <= w1 {
            return Err(Error::InvalidArgument(format!(
                "band {band:?} must satisfy w2 > w1 = w3 within [0, 1]"
            )));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta {beta} must be finite and >= 0")));
        }
        Ok(Self { band, beta })
    }

    /// `w_i` centred at channel `j` of `d`, clamped at both ends.
    pub fn row(&self, d: usize, j: usize) -> Vec<f64> {
        let mut row = vec![0.0; d];
        row[j] = self.band[1];
        if j > 0 {
            row[j - 1] = self.band[0];
        }
        if j + 1 < d {
            row[j + 1] = self.band[2];
        }
        row
    }

    /// `m_w` for head `j`: the nonzero positions of [`SparsePattern::row`].
    pub fn mask(&self, d: usize, j: usize) -> Vec<bool> {
        self.row(d, j).iter().map(|&w| w != 0.0).collect()
    }

    /// D×D 0/1 matrix whose row j is head j's mask.
    pub fn mask_matrix(&self, d: usize) -> Tensor {
        let data = (0..d)
            .flat_map(|j| self.mask(d, j).into_iter().map(|m| if m { 1.0 } else { 0.0 }))
            .collect();
        Tensor::new(vec![d, d], data).expect("square mask")
    }
}

/// D×D learnable matrix; row j is head j's `a_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBank(pub Tensor);

pub const ATTENTION_PARAM: &str = "bcma.attention";

pub fn init_attention_bank(pattern: &SparsePattern, d: usize) -> Result<AttentionBank> {
    if d == 0 {
        return Err(Error::InvalidArgument("attention bank needs at least one channel".into()));
    }
    let data = (0..d).flat_map(|j| pattern.row(d, j)).collect();
    Ok(AttentionBank(Tensor::new(vec![d, d], data)?))
}

/// Conventional random initialization, uniform in `[-s, s]`, `s = sqrt(1/D)`.
pub fn random_attention_bank(d: usize, seed: u64) -> AttentionBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (1.0 / d as f64).sqrt();
    let data = (0..d * d).map(|_| rng.random_range(-s..=s)).collect();
    AttentionBank(Tensor::new(vec![d, d], data).expect("square bank"))
}

/// Grid-pooled prototypes, one row per cell (row-major over the grid).
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrototypeGrid {
    /// G×D.
    pub p_n: Tensor,
    pub grid: (usize, usize),
}

impl RawPrototypeGrid {
    /// D×G channel slices; row j is `Q_n^j`.
    pub fn q_n(&self) -> Tensor {
        self.p_n.transpose().expect("matrix")
    }
}

/// Average-pool a D×H×W map on the tape and return the G×D prototype rows.
pub fn raw_prototypes_on(tape: &mut Tape, map: Var, window: (usize, usize)) -> Result<Var> {
    let pooled = tape.avg_pool2d(map, window)?;
    let (d, gh, gw) = tape.value(pooled).dims3()?;
    let flat = tape.reshape(pooled, vec![d, gh * gw])?;
    tape.transpose(flat)
}

/// Same as [`raw_prototypes_on`] but starting from N×D pixel rows.
pub fn raw_prototypes_from_rows_on(
    tape: &mut Tape,
    rows: Var,
    height: usize,
    width: usize,
    window: (usize, usize),
) -> Result<Var> {
    let map = rows_to_map(tape, rows, height, width)?;
    raw_prototypes_on(tape, map, window)
}

pub fn raw_background_prototypes(features: &FeatureMap, window: (usize, usize)) -> Result<RawPrototypeGrid> {
    let mut tape = Tape::new();
    let m = tape.constant(features.tensor().clone());
    let p = raw_prototypes_on(&mut tape, m, window)?;
    Ok(RawPrototypeGrid {
        p_n: tape.value(p).clone(),
        grid: (features.height() / window.0, features.width() / window.1),
    })
}

/// Cell means of a mask; the cells line up with [`raw_background_prototypes`].
pub fn pooled_mask(mask: &Mask, window: (usize, usize)) -> Result<Mask> {
    let t = Tensor::new(vec![mask.height(), mask.width()], mask.values().to_vec())?;
    let p = crate::numerics::avg_pool2d(&t, window)?;
    let (h, w) = p.dims2()?;
    Mask::new(h, w, p.into_data())
}

/// `w_c`: softmax over channels `i` of `cos(Q_n^i, Q_n^j)`.
pub fn channel_similarity(q_n: &Tensor, j: usize) -> Result<Vec<f64>> {
    let (d, _) = q_n.dims2()?;
    if j >= d {
        return Err(Error::InvalidArgument(format!("head {j} of {d}")));
    }
    let sims: Vec<f64> = (0..d).map(|i| cosine(q_n.row(i), q_n.row(j))).collect();
    softmax(&sims)
}

/// `r = 1 + β·(w_c ⊙ m_w)`.
pub fn regulate(w_c: &[f64], m_w: &[bool], beta: f64) -> Result<Vec<f64>> {
    if w_c.len() != m_w.len() {
        return Err(Error::Shape(format!("w_c has {} entries, m_w {}", w_c.len(), m_w.len())));
    }
    Ok(w_c
        .iter()
        .zip(m_w)
        .map(|(&w, &m)| 1.0 + beta * if m { w } else { 0.0 })
        .collect())
}

/// D×D adjustment matrix R; row j is head j's `r`.
pub fn adjustment_on(tape: &mut Tape, p_n: Var, pattern: &SparsePattern) -> Result<Var> {
    let (_, d) = tape.value(p_n).dims2()?;
    let q = tape.transpose(p_n)?;
    let qn = tape.row_normalize(q)?;
    let qt = tape.transpose(qn)?;
    let sim = tape.matmul(qn, qt)?;
    let w_c = tape.softmax_rows(sim)?;
    let m = tape.constant(pattern.mask_matrix(d));
    let masked = tape.mul(w_c, m)?;
    let scaled = tape.scale(masked, pattern.beta);
    Ok(tape.add_scalar(scaled, 1.0))
}

/// `P_a = P_n · (R ⊙ A)ᵀ`.
pub fn apply_heads_on(tape: &mut Tape, p_n: Var, bank: Var, adjustment: Var) -> Result<Var> {
    let (_, d) = tape.value(p_n).dims2()?;
    if tape.shape(bank) != [d, d] {
        return Err(Error::Shape(format!(
            "attention bank {:?} for {d} channels",
            tape.shape(bank)
        )));
    }
    let a = tape.mul(adjustment, bank)?;
    let at = tape.transpose(a)?;
    tape.matmul(p_n, at)
}

pub fn refine_on(tape: &mut Tape, p_n: Var, bank: Var, pattern: &SparsePattern) -> Result<Var> {
    let r = adjustment_on(tape, p_n, pattern)?;
    apply_heads_on(tape, p_n, bank, r)
}

pub fn refine(grid: &RawPrototypeGrid, bank: &AttentionBank, pattern: &SparsePattern) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(grid.p_n.clone());
    let a = tape.constant(bank.0.clone());
    let out = refine_on(&mut tape, p, a, pattern)?;
    tape.check_finite()?;
    Ok(tape.value(out).clone())
}

/// Rows of P_a whose pooled-mask cell is below `threshold`.
pub fn background_rows(pooled: &Mask, threshold: f64) -> Result<Vec<usize>> {
    let keep: Vec<usize> = (0..pooled.values().len())
        .filter(|&k| pooled.values()[k] < threshold)
        .collect();
    if keep.is_empty() {
        return Err(Error::NoBackground);
    }
    Ok(keep)
}

pub fn select_background(p_a: &Tensor, pooled: &Mask, threshold: f64) -> Result<Vec<Vec<f64>>> {
    let (g, _) = p_a.dims2()?;
    if pooled.values().len() != g {
        return Err(Error::Shape(format!(
            "{} mask cells for {g} prototypes",
            pooled.values().len()
        )));
    }
    Ok(background_rows(pooled, threshold)?
        .into_iter()
        .map(|k| p_a.row(k).to_vec())
        .collect())
}
