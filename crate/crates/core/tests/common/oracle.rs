//! Loop-level reference implementations, written without the tape.

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    let mut e = vec![0.0; v.len()];
    let mut s = 0.0;
    for i in 0..v.len() {
        e[i] = (v[i] - m).exp();
        s += e[i];
    }
    for x in e.iter_mut() {
        *x /= s;
    }
    e
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for i in 0..u.len() {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    uv / (uu.sqrt().max(1e-8) * vv.sqrt().max(1e-8))
}

/// Per-pixel mixture `Σ_j softmax(sim[p])_j · protos[j]`, prototype by
/// prototype.
pub fn mixture(sim: &[Vec<f64>], protos: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = protos[0].len();
    sim.iter()
        .map(|s| {
            let phi = softmax(s);
            let mut out = vec![0.0; d];
            for (j, p) in protos.iter().enumerate() {
                for c in 0..d {
                    out[c] += phi[j] * p[c];
                }
            }
            out
        })
        .collect()
}

/// Refined prototypes: element `j` of prototype `g` is the dot product of
/// `p_n[g]` with `r_j ⊙ a_j`.
pub fn refine(p_n: &[Vec<f64>], a: &[Vec<f64>], band: [f64; 3], beta: f64) -> Vec<Vec<f64>> {
    let d = a.len();
    let g = p_n.len();
    let channel = |i: usize| -> Vec<f64> { (0..g).map(|k| p_n[k][i]).collect() };
    let mut out = vec![vec![0.0; d]; g];
    for j in 0..d {
        let sims: Vec<f64> = (0..d).map(|i| cosine(&channel(i), &channel(j))).collect();
        let w_c = softmax(&sims);
        let r: Vec<f64> = (0..d)
            .map(|i| {
                let in_band = (i + 1 == j && band[0] != 0.0) || i == j || (i == j + 1 && band[2] != 0.0);
                if in_band {
                    1.0 + beta * w_c[i]
                } else {
                    1.0
                }
            })
            .collect();
        for k in 0..g {
            let mut s = 0.0;
            for i in 0..d {
                s += p_n[k][i] * r[i] * a[j][i];
            }
            out[k][j] = s;
        }
    }
    out
}

/// Mean cross-entropy over pixels of 2×H×W probabilities against a binary
/// mask (channel 0 background, channel 1 foreground).
pub fn cross_entropy(probs: &[f64], mask: &[f64], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let targets = [1.0 - mask[i], mask[i]];
            for c in 0..2 {
                if targets[c] != 0.0 {
                    total -= targets[c] * probs[c * h * w + i].max(1e-12).ln();
                }
            }
        }
    }
    total / (h * w) as f64
}

/// Masked mean of D×H×W features with fractional weights.
pub fn masked_mean(map: &[f64], d: usize, n: usize, weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    (0..d)
        .map(|c| (0..n).map(|p| map[c * n + p] * weights[p]).sum::<f64>() / total)
        .collect()
}

/// Cell means of a D×H×W map over non-overlapping windows, cells row-major.
pub fn grid_means(map: &[f64], d: usize, h: usize, w: usize, win: (usize, usize)) -> Vec<Vec<f64>> {
    let (gh, gw) = (h / win.0, w / win.1);
    let mut out = Vec::new();
    for cy in 0..gh {
        for cx in 0..gw {
            let mut v = vec![0.0; d];
            for c in 0..d {
                for y in cy * win.0..(cy + 1) * win.0 {
                    for x in cx * win.1..(cx + 1) * win.1 {
                        v[c] += map[c * h * w + y * w + x];
                    }
                }
                v[c] /= (win.0 * win.1) as f64;
            }
            out.push(v);
        }
    }
    out
}

/// Nonnegative weights `x` with `Σ x_j p_j = target` for affinely
/// independent prototypes, solved by least squares on the affine system.
pub fn convex_weights(target: &[f64], protos: &[Vec<f64>]) -> Vec<f64> {
    let k = protos.len();
    let d = target.len();
    // rows: d equations plus the sum-to-one constraint
    let mut rows: Vec<Vec<f64>> = (0..d).map(|c| (0..k).map(|j| protos[j][c]).collect()).collect();
    let mut rhs: Vec<f64> = target.to_vec();
    rows.push(vec![1.0; k]);
    rhs.push(1.0);
    // normal equations
    let mut m = vec![vec![0.0; k]; k];
    let mut b = vec![0.0; k];
    for (r, &y) in rows.iter().zip(&rhs) {
        for i in 0..k {
            b[i] += r[i] * y;
            for j in 0..k {
                m[i][j] += r[i] * r[j];
            }
        }
    }
    solve(m, b)
}

fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &c| m[a][col].abs().total_cmp(&m[c][col].abs())).unwrap();
        m.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    x
}
