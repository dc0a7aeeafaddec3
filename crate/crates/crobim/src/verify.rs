//! Independent oracles and the finite-difference gradient harness.
//!
//! Everything here is written as plain scalar loops over f64 values and
//! shares no code with the modules it checks. Oracles are deliberately slow;
//! they exist to be obviously correct, not fast.

use crate::error::{CrobimError, Result};
use crate::params::Params;
use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one finite-difference comparison for one parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub probes: usize,
}

impl GradCheckReport {
    fn from_err(name: String, max_rel_err: f64, tolerance: f64, probes: usize) -> Self {
        GradCheckReport {
            name,
            pass: max_rel_err < tolerance,
            max_rel_err,
            tolerance,
            probes,
        }
    }
}

/// Compare analytic gradients against central finite differences
/// `(f(θ+εe) − f(θ−εe)) / 2ε` on randomly probed coordinates of every
/// parameter group. Relative error uses a `max(|a|, |n|, 1e-8)` denominator.
pub fn finite_difference_check<F>(
    params: &Params,
    analytic: &IndexMap<String, ArrayD<f64>>,
    eval: F,
    eps: f64,
    tol: f64,
    probes_per_group: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&Params) -> Result<f64>,
{
    finite_difference_check_with(
        params,
        analytic,
        eval,
        eps,
        tol,
        probes_per_group,
        ProbePlan::Random(seed),
    )
}

/// How probe coordinates are drawn from each parameter group.
#[derive(Debug, Clone, Copy)]
pub enum ProbePlan {
    /// Uniformly at random with the given seed.
    Random(u64),
    /// The coordinates with the largest analytic gradient magnitude. Used
    /// for whole-model checks, where an O(1) objective puts coordinates
    /// with tiny gradients below the f64 central-difference noise floor.
    TopMagnitude,
}

pub fn finite_difference_check_with<F>(
    params: &Params,
    analytic: &IndexMap<String, ArrayD<f64>>,
    mut eval: F,
    eps: f64,
    tol: f64,
    probes_per_group: usize,
    plan: ProbePlan,
) -> Result<Vec<GradCheckReport>>
where
    F: FnMut(&Params) -> Result<f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut rng = match plan {
        ProbePlan::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        ProbePlan::TopMagnitude => None,
    };
    let mut reports = Vec::new();
    for (name, grad) in analytic {
        let n = grad.len();
        let mut coords: Vec<usize> = (0..n).collect();
        match &mut rng {
            Some(rng) => coords.shuffle(rng),
            None => coords.sort_by(|&a, &b| {
                let ga = grad.iter().nth(a).copied().unwrap().abs();
                let gb = grad.iter().nth(b).copied().unwrap().abs();
                gb.partial_cmp(&ga).unwrap_or(std::cmp::Ordering::Equal)
            }),
        }
        coords.truncate(probes_per_group.min(n));
        let mut max_rel = 0.0f64;
        for &flat in &coords {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.get_mut(name).as_slice_mut().unwrap()[flat] += eps;
            minus.get_mut(name).as_slice_mut().unwrap()[flat] -= eps;
            let fp = eval(&plus)?;
            let fm = eval(&minus)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(CrobimError::numerical(
                    format!("finite_difference_check[{name}]"),
                    "objective returned a non-finite value",
                ));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.iter().nth(flat).copied().unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        reports.push(GradCheckReport::from_err(
            name.clone(),
            max_rel,
            tol,
            coords.len(),
        ));
    }
    Ok(reports)
}

pub fn all_pass(reports: &[GradCheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

// ---- metric oracles ----

/// Naive double-loop intersection/union pixel count.
pub fn oracle_iou(pred: &Array2<u8>, gt: &Array2<u8>) -> (u64, u64) {
    assert_eq!(pred.shape(), gt.shape());
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let mut inter = 0u64;
    let mut union = 0u64;
    for i in 0..h {
        for j in 0..w {
            let p = pred[[i, j]] != 0;
            let g = gt[[i, j]] != 0;
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    (inter, union)
}

// ---- attention and loss oracles ----

/// Triple-loop scaled dot-product attention.
pub fn oracle_attention(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    scale: f64,
) -> Array2<f64> {
    let n = queries.shape()[0];
    let m = keys.shape()[0];
    let dk = queries.shape()[1];
    assert_eq!(keys.shape()[1], dk);
    assert_eq!(values.shape()[0], m);
    let dv = values.shape()[1];
    let mut out = Array2::zeros((n, dv));
    for i in 0..n {
        let mut scores = vec![0.0; m];
        for j in 0..m {
            let mut s = 0.0;
            for d in 0..dk {
                s += queries[[i, d]] * keys[[j, d]];
            }
            scores[j] = s * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        for j in 0..m {
            let a = scores[j] / z;
            for d in 0..dv {
                out[[i, d]] += a * values[[j, d]];
            }
        }
    }
    out
}

/// Plain-formula binary cross-entropy (mean over pixels).
pub fn oracle_bce(logits: &Array2<f64>, target: &Array2<f64>) -> f64 {
    assert_eq!(logits.shape(), target.shape());
    let mut acc = 0.0;
    for (&z, &y) in logits.iter().zip(target.iter()) {
        let p = 1.0 / (1.0 + (-z).exp());
        acc += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    acc / logits.len() as f64
}

/// Soft Dice loss `1 − (2Σpy + ε)/(Σp + Σy + ε)` with `p = σ(z)`.
pub fn oracle_dice(logits: &Array2<f64>, target: &Array2<f64>, eps: f64) -> f64 {
    assert_eq!(logits.shape(), target.shape());
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut ysum = 0.0;
    for (&z, &y) in logits.iter().zip(target.iter()) {
        let p = 1.0 / (1.0 + (-z).exp());
        inter += p * y;
        psum += p;
        ysum += y;
    }
    1.0 - (2.0 * inter + eps) / (psum + ysum + eps)
}

// ---- spatial helpers (independent of tape) ----

/// Scalar edge-clamped bilinear resize with half-pixel centers.
pub fn oracle_bilinear_resize(src: &Array3<f64>, h2: usize, w2: usize) -> Array3<f64> {
    let (h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let mut out = Array3::zeros((h2, w2, c));
    for i in 0..h2 {
        let v = (i as f64 + 0.5) * h as f64 / h2 as f64 - 0.5;
        for j in 0..w2 {
            let u = (j as f64 + 0.5) * w as f64 / w2 as f64 - 0.5;
            for ch in 0..c {
                out[[i, j, ch]] = sample_clamped(src, v, u, ch);
            }
        }
    }
    out
}

fn sample_clamped(src: &Array3<f64>, v: f64, u: f64, ch: usize) -> f64 {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let clamp = |x: f64, n: usize| -> (usize, usize, f64) {
        let lo = x.floor();
        let frac = if lo < 0.0 || lo as i64 + 1 > n as i64 - 1 {
            0.0
        } else {
            x - lo
        };
        let lo_i = (lo.max(0.0) as usize).min(n - 1);
        let hi_i = ((lo + 1.0).max(0.0) as usize).min(n - 1);
        (lo_i, hi_i, frac)
    };
    let (y0, y1, fy) = clamp(v, h);
    let (x0, x1, fx) = clamp(u, w);
    (1.0 - fy) * (1.0 - fx) * src[[y0, x0, ch]]
        + (1.0 - fy) * fx * src[[y0, x1, ch]]
        + fy * (1.0 - fx) * src[[y1, x0, ch]]
        + fy * fx * src[[y1, x1, ch]]
}

/// Zero-padded bilinear sample at continuous pixel coordinates.
fn sample_zero_pad(src: &Array3<f64>, v: f64, u: f64, c0: usize, c1: usize) -> Vec<f64> {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let x0 = u.floor() as i64;
    let y0 = v.floor() as i64;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let mut out = vec![0.0; c1 - c0];
    for (dy, dx, wgt) in [
        (0i64, 0i64, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ] {
        let y = y0 + dy;
        let x = x0 + dx;
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            for (k, ch) in (c0..c1).enumerate() {
                out[k] += wgt * src[[y as usize, x as usize, ch]];
            }
        }
    }
    out
}

// ---- stage fusion oracle ----

pub struct FuseOracleParams<'a> {
    pub wq: &'a Array2<f64>,
    pub bq: &'a Array1<f64>,
    pub wk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub gate_w: &'a Array2<f64>,
    pub gate_b: &'a Array1<f64>,
    pub reweight_w: &'a Array2<f64>,
    pub reweight_b: &'a Array1<f64>,
}

/// Index-by-index evaluation of one gated fusion stage. Returns the fused
/// level and the raw score matrix.
pub fn oracle_fuse_stage(
    level: &Array3<f64>,
    tokens: &Array2<f64>,
    p: &FuseOracleParams,
) -> (Array3<f64>, Array2<f64>) {
    let (h, w, c) = (level.shape()[0], level.shape()[1], level.shape()[2]);
    let (l, dl) = (tokens.shape()[0], tokens.shape()[1]);
    assert_eq!(p.wq.shape(), &[c, l]);
    assert_eq!(p.wk.shape(), &[dl, dl]);
    let hw = h * w;
    // projected and spatially expanded visual feature, pixel-major
    let mut vq = Array2::zeros((hw, l));
    for pix in 0..hw {
        let (i, j) = (pix / w, pix % w);
        for t in 0..l {
            let mut acc = p.bq[t];
            for ch in 0..c {
                acc += level[[i, j, ch]] * p.wq[[ch, t]];
            }
            vq[[pix, t]] = acc;
        }
    }
    let mut lik = Array2::zeros((l, dl));
    let mut liv = Array2::zeros((l, dl));
    for t in 0..l {
        for d in 0..dl {
            let mut ak = 0.0;
            let mut av = 0.0;
            for e in 0..dl {
                ak += tokens[[t, e]] * p.wk[[e, d]];
                av += tokens[[t, e]] * p.wv[[e, d]];
            }
            lik[[t, d]] = ak;
            liv[[t, d]] = av;
        }
    }
    let mut scores = Array2::zeros((hw, dl));
    for pix in 0..hw {
        for d in 0..dl {
            let mut acc = 0.0;
            for t in 0..l {
                acc += vq[[pix, t]] * lik[[t, d]];
            }
            scores[[pix, d]] = acc;
        }
    }
    let scale = 1.0 / (l as f64).sqrt();
    let mut fused = Array3::zeros((h, w, c));
    for pix in 0..hw {
        let (i, j) = (pix / w, pix % w);
        // softmax along the feature axis
        let mut a = vec![0.0; dl];
        let mut max = f64::NEG_INFINITY;
        for d in 0..dl {
            a[d] = scores[[pix, d]] * scale;
            max = max.max(a[d]);
        }
        let mut z = 0.0;
        for v in a.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in a.iter_mut() {
            *v /= z;
        }
        // attended token mixture, then the gate, then the reweighting
        let mut o = vec![0.0; l];
        for t in 0..l {
            let mut acc = 0.0;
            for d in 0..dl {
                acc += a[d] * liv[[t, d]];
            }
            o[t] = acc;
        }
        let mut att = vec![0.0; l];
        for t2 in 0..l {
            let mut acc = p.gate_b[t2];
            for t in 0..l {
                acc += o[t] * p.gate_w[[t, t2]];
            }
            att[t2] = crate::tape::gelu_f(acc);
        }
        for ch in 0..c {
            let mut acc = p.reweight_b[ch];
            for t in 0..l {
                acc += att[t] * p.reweight_w[[t, ch]];
            }
            fused[[i, j, ch]] = acc * level[[i, j, ch]];
        }
    }
    (fused, scores)
}

// ---- deficit map / top-k oracles ----

/// Per-pixel deficit computed with explicit loops: per-channel spatial
/// softmax of each resampled score map, channel mean, then the chained
/// absolute differences of consecutive stages.
pub fn oracle_deficit_map(
    scores: &[Array2<f64>; 4],
    level_sides: &[(usize, usize); 4],
    h4: usize,
    w4: usize,
) -> Array2<f64> {
    let mut saliency: Vec<Array2<f64>> = Vec::with_capacity(4);
    for (s, &(h, w)) in scores.iter().zip(level_sides.iter()) {
        let dl = s.shape()[1];
        assert_eq!(s.shape()[0], h * w);
        let cube = Array3::from_shape_fn((h, w, dl), |(i, j, d)| s[[i * w + j, d]]);
        let resized = oracle_bilinear_resize(&cube, h4, w4);
        let cells = h4 * w4;
        let mut sal = Array2::zeros((h4, w4));
        for d in 0..dl {
            // softmax over cells for this channel
            let mut col = Vec::with_capacity(cells);
            for i in 0..h4 {
                for j in 0..w4 {
                    col.push(resized[[i, j, d]]);
                }
            }
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in col.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for i in 0..h4 {
                for j in 0..w4 {
                    sal[[i, j]] += col[i * w4 + j] / z / dl as f64;
                }
            }
        }
        saliency.push(sal);
    }
    let mut m = Array2::zeros((h4, w4));
    for i in 0..h4 {
        for j in 0..w4 {
            for k in 0..3 {
                m[[i, j]] += (saliency[k][[i, j]] - saliency[k + 1][[i, j]]).abs();
            }
        }
    }
    m
}

/// Full sort of all cells by (value desc, row-major index asc), take `k`.
pub fn oracle_topk(m: &Array2<f64>, k: usize) -> Vec<(usize, usize)> {
    let w = m.shape()[1];
    let mut cells: Vec<(usize, f64)> = m.iter().cloned().enumerate().collect();
    cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    cells.truncate(k);
    cells
        .into_iter()
        .map(|(idx, _)| (idx / w, idx % w))
        .collect()
}

// ---- compensation oracle ----

pub struct CompOracleParams<'a> {
    /// Per level: forward projection C_i → C_v̂ and bias.
    pub fwd_w: [&'a Array2<f64>; 4],
    pub fwd_b: [&'a Array1<f64>; 4],
    /// Per level: inverse projection C_v̂ → C_i and bias.
    pub inv_w: [&'a Array2<f64>; 4],
    pub inv_b: [&'a Array1<f64>; 4],
    pub ln_gain: &'a Array1<f64>,
    pub ln_bias: &'a Array1<f64>,
    pub wq: &'a Array2<f64>,
    pub bq: &'a Array1<f64>,
    pub wk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub bv: &'a Array1<f64>,
    pub wo: &'a Array2<f64>,
    pub bo: &'a Array1<f64>,
    pub heads: usize,
}

/// Scalar-loop cross-scale compensation over the selected cells.
pub fn oracle_compensate(
    levels: &[Array3<f64>; 4],
    regions: &[(usize, usize)],
    p: &CompOracleParams,
    h4: usize,
    w4: usize,
) -> [Array3<f64>; 4] {
    let cv = p.ln_gain.shape()[0];
    let dh = cv / p.heads;
    let mut out = levels.clone();
    // gather features at the coarse grid through the same resize convention
    let resampled: Vec<Array3<f64>> = levels
        .iter()
        .map(|l| oracle_bilinear_resize(l, h4, w4))
        .collect();
    for &(r, c) in regions {
        let gathered: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..levels[i].shape()[2])
                    .map(|ch| resampled[i][[r, c, ch]])
                    .collect()
            })
            .collect();
        // forward projections -> token matrix (4, cv)
        let mut x = Array2::zeros((4, cv));
        for i in 0..4 {
            for d in 0..cv {
                let mut acc = p.fwd_b[i][d];
                for (ch, &v) in gathered[i].iter().enumerate() {
                    acc += v * p.fwd_w[i][[ch, d]];
                }
                x[[i, d]] = acc;
            }
        }
        // LN
        let mut ln = x.clone();
        for mut row in ln.rows_mut() {
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (d, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * inv * p.ln_gain[d] + p.ln_bias[d];
            }
        }
        // multi-head self-attention over the 4 scale tokens
        let proj = |m: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| -> Array2<f64> {
            let mut outp = Array2::zeros((4, cv));
            for i in 0..4 {
                for d in 0..cv {
                    let mut acc = b[d];
                    for e in 0..cv {
                        acc += m[[i, e]] * w[[e, d]];
                    }
                    outp[[i, d]] = acc;
                }
            }
            outp
        };
        let q = proj(&ln, p.wq, p.bq);
        let zero_bias = Array1::zeros(cv);
        let k = proj(&ln, p.wk, &zero_bias);
        let v = proj(&ln, p.wv, p.bv);
        let mut heads_out = Array2::zeros((4, cv));
        for h in 0..p.heads {
            let c0 = h * dh;
            for i in 0..4 {
                let mut scores = [0.0f64; 4];
                for j in 0..4 {
                    let mut s = 0.0;
                    for d in 0..dh {
                        s += q[[i, c0 + d]] * k[[j, c0 + d]];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                let mut e = [0.0f64; 4];
                for j in 0..4 {
                    e[j] = (scores[j] - max).exp();
                    z += e[j];
                }
                for j in 0..4 {
                    let a = e[j] / z;
                    for d in 0..dh {
                        heads_out[[i, c0 + d]] += a * v[[j, c0 + d]];
                    }
                }
            }
        }
        let msa = proj(&heads_out, p.wo, p.bo);
        // residual, inverse projections, delta write-back over aligned blocks
        for i in 0..4 {
            let ci = levels[i].shape()[2];
            let scale = levels[i].shape()[0] / h4;
            for ch in 0..ci {
                let mut y = p.inv_b[i][ch];
                for d in 0..cv {
                    y += (msa[[i, d]] + x[[i, d]]) * p.inv_w[i][[d, ch]];
                }
                let delta = y - gathered[i][ch];
                for di in 0..scale {
                    for dj in 0..scale {
                        out[i][[r * scale + di, c * scale + dj, ch]] += delta;
                    }
                }
            }
        }
    }
    out
}

// ---- deformable attention oracle ----

/// Scalar-loop multiscale deformable sampling, mirroring the documented
/// weighting and zero-padding conventions with independent code.
pub fn oracle_msdeform(
    values: &[Array3<f64>],
    offsets: &Array2<f64>,
    weights: &Array2<f64>,
    refs: &Array2<f64>,
    heads: usize,
    points: usize,
) -> Array2<f64> {
    let levels = values.len();
    let d = values[0].shape()[2];
    let dh = d / heads;
    let n = refs.shape()[0];
    let mut out = Array2::zeros((n, d));
    for q in 0..n {
        for h in 0..heads {
            for l in 0..levels {
                let (hl, wl) = (values[l].shape()[0], values[l].shape()[1]);
                for pt in 0..points {
                    let idx = (h * levels + l) * points + pt;
                    let u = refs[[q, 0]] * wl as f64 - 0.5 + offsets[[q, idx * 2]];
                    let v = refs[[q, 1]] * hl as f64 - 0.5 + offsets[[q, idx * 2 + 1]];
                    let sample = sample_zero_pad(&values[l], v, u, h * dh, (h + 1) * dh);
                    for (k, s) in sample.into_iter().enumerate() {
                        out[[q, h * dh + k]] += weights[[q, idx]] * s;
                    }
                }
            }
        }
    }
    out
}


// ---- aggregate verification suite ----

use crate::config::ModelConfig;
use crate::model::CroBim;
use crate::tape::{Graph, Var};

/// Outcome of one oracle-equivalence or structural check.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleCheck {
    fn new(name: &str, max_err: f64, tolerance: f64) -> Self {
        OracleCheck {
            name: name.to_string(),
            max_err,
            tolerance,
            pass: max_err < tolerance,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerificationReport {
    pub grad: Vec<GradCheckReport>,
    pub oracles: Vec<OracleCheck>,
}

impl VerificationReport {
    pub fn pass(&self) -> bool {
        self.grad.iter().all(|r| r.pass) && self.oracles.iter().all(|c| c.pass)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<44} {:>12} {:>9} {:>7} {:>6}\n",
            "check", "max_rel_err", "tol", "probes", "pass"
        ));
        for r in &self.grad {
            out.push_str(&format!(
                "{:<44} {:>12.3e} {:>9.1e} {:>7} {:>6}\n",
                r.name,
                r.max_rel_err,
                r.tolerance,
                r.probes,
                if r.pass { "ok" } else { "FAIL" }
            ));
        }
        for c in &self.oracles {
            out.push_str(&format!(
                "{:<44} {:>12.3e} {:>9.1e} {:>7} {:>6}\n",
                c.name,
                c.max_err,
                c.tolerance,
                "-",
                if c.pass { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-10;

fn rand_dyn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    use rand::Rng;
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(-scale..scale))
}

fn weighted_sum(g: &mut Graph, out: Var, weights: &ArrayD<f64>) -> Var {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w);
    g.sum_all(prod)
}

fn prefix_reports(prefix: &str, reports: Vec<GradCheckReport>) -> Vec<GradCheckReport> {
    reports
        .into_iter()
        .map(|mut r| {
            r.name = format!("{prefix}:{}", r.name);
            r
        })
        .collect()
}

/// Gradient check for an arbitrary graph builder over a parameter set:
/// analytic gradients come from one backward pass, numeric ones from
/// central differences through fresh forward evaluations.
fn grad_check_builder<F>(
    name: &str,
    params: &Params,
    build: F,
    probes: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &crate::params::BoundParams) -> Result<Var>,
{
    grad_check_builder_eps(
        name,
        params,
        build,
        probes,
        ProbePlan::Random(seed),
        GRAD_EPS,
    )
}

fn grad_check_builder_eps<F>(
    name: &str,
    params: &Params,
    build: F,
    probes: usize,
    plan: ProbePlan,
    eps: f64,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Graph, &crate::params::BoundParams) -> Result<Var>,
{
    // evaluate at a generic point: structured initializations (zeroed heads,
    // grid-aligned offsets) can zero out paths or sit on bilinear kinks,
    // where finite differences are meaningless
    let mut params = params.clone();
    let mut jitter = ChaCha8Rng::seed_from_u64(0xBEEF);
    for name in params.names().cloned().collect::<Vec<_>>() {
        use rand::Rng;
        params
            .get_mut(&name)
            .mapv_inplace(|v| v + jitter.gen_range(-0.05..0.05));
    }
    let params = &params;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let root = build(&mut g, &bound)?;
    let grads = g.backward(root);
    let analytic = bound.gradients(&g, &grads);
    let reports = finite_difference_check_with(
        params,
        &analytic,
        |p| {
            let mut g = Graph::new();
            let bound = p.bind(&mut g);
            let root = build(&mut g, &bound)?;
            Ok(g.scalar_value(root))
        },
        eps,
        GRAD_TOL,
        probes,
        plan,
    )?;
    Ok(prefix_reports(name, reports))
}

fn toy_of(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        seed: config.seed,
        ..ModelConfig::toy()
    }
}

fn init_params(config: &ModelConfig) -> Params {
    CroBim::new(config.clone()).expect("valid config").params
}

/// The full gradient + oracle verification suite. Module-level gradient
/// checks run at toy dimensions; the whole-model check runs at the given
/// config on a 2-sample synthetic batch.
pub fn run_verification(config: &ModelConfig) -> Result<VerificationReport> {
    let mut report = VerificationReport::default();
    let toy = toy_of(config);
    let probes = 3;

    // -- stub encoders --
    {
        let params = init_params(&toy);
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let image = ndarray::Array3::from_shape_fn((toy.image_size, toy.image_size, 3), |_| {
            use rand::Rng;
            rng.gen_range(0.0..1.0)
        });
        let weights: Vec<ArrayD<f64>> = (1..=4)
            .map(|i| {
                let side = toy.level_side(i);
                rand_dyn(&mut rng, &[side, side, toy.channels[i - 1]], 1.0)
            })
            .collect();
        let toy_c = toy.clone();
        report.grad.extend(grad_check_builder(
            "encoders.image",
            &params,
            move |g, bound| {
                let pyr = crate::encoders::encode_image(g, bound, &image, &toy_c)?;
                let mut acc: Option<Var> = None;
                for (level, w) in pyr.levels.iter().zip(weights.iter()) {
                    let s = weighted_sum(g, *level, w);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s),
                    });
                }
                Ok(acc.unwrap())
            },
            probes,
            11,
        )?);
    }
    {
        let params = init_params(&toy);
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let w = rand_dyn(&mut rng, &[toy.joint_tokens(), toy.text_dim], 1.0);
        let prompts = rand_dyn(&mut rng, &[toy.num_prompts, toy.text_dim], 1.0);
        let toy_c = toy.clone();
        report.grad.extend(grad_check_builder(
            "encoders.text",
            &params,
            move |g, bound| {
                let p = g.constant(prompts.clone());
                let tf = crate::encoders::encode_text(g, bound, &[3, 4, 5], Some(p), &toy_c)?;
                Ok(weighted_sum(g, tf.values, &w))
            },
            probes,
            12,
        )?);
    }
    // -- prompt modulation over pooled context --
    {
        let params = init_params(&toy);
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let levels: Vec<ArrayD<f64>> = (1..=4)
            .map(|i| {
                let side = toy.level_side(i);
                rand_dyn(&mut rng, &[side, side, toy.channels[i - 1]], 1.0)
            })
            .collect();
        let w = rand_dyn(&mut rng, &[toy.num_prompts, toy.text_dim], 1.0);
        let toy_c = toy.clone();
        report.grad.extend(grad_check_builder(
            "capm",
            &params,
            move |g, bound| {
                let vars: Vec<Var> = levels.iter().map(|l| g.constant(l.clone())).collect();
                let pyr = crate::encoders::FeaturePyramid {
                    levels: [vars[0], vars[1], vars[2], vars[3]],
                };
                let ve = crate::capm::pool_context(g, bound, &pyr, &toy_c);
                let pv = crate::capm::modulate_prompts(g, bound, ve, &toy_c)?;
                Ok(weighted_sum(g, pv, &w))
            },
            probes,
            13,
        )?);
    }
    // -- stage fusion, all four stages in one scalar --
    {
        let params = init_params(&toy);
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let tokens = rand_dyn(
            &mut rng,
            &[crate::lgfa::fusion_len(&toy), toy.text_dim],
            1.0,
        );
        let levels: Vec<ArrayD<f64>> = (1..=4)
            .map(|i| {
                let side = toy.level_side(i);
                rand_dyn(&mut rng, &[side, side, toy.channels[i - 1]], 1.0)
            })
            .collect();
        let weights: Vec<ArrayD<f64>> = levels
            .iter()
            .map(|l| rand_dyn(&mut rng, l.shape(), 1.0))
            .collect();
        let toy_c = toy.clone();
        report.grad.extend(grad_check_builder(
            "lgfa.fuse",
            &params,
            move |g, bound| {
                let t = g.constant(tokens.clone());
                let mut acc: Option<Var> = None;
                for i in 0..4 {
                    let level = g.constant(levels[i].clone());
                    let (fused, _) = crate::lgfa::fuse_stage(g, level, t, bound, i + 1, &toy_c)?;
                    let s = weighted_sum(g, fused, &weights[i]);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s),
                    });
                }
                Ok(acc.unwrap())
            },
            probes,
            14,
        )?);
    }
    // -- deficit compensation with a fixed region set --
    {
        let params = init_params(&toy);
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let levels: Vec<ArrayD<f64>> = (1..=4)
            .map(|i| {
                let side = toy.level_side(i);
                rand_dyn(&mut rng, &[side, side, toy.channels[i - 1]], 1.0)
            })
            .collect();
        let weights: Vec<ArrayD<f64>> = levels
            .iter()
            .map(|l| rand_dyn(&mut rng, l.shape(), 1.0))
            .collect();
        let toy_c = toy.clone();
        report.grad.extend(grad_check_builder(
            "lgfa.comp",
            &params,
            move |g, bound| {
                let vars: Vec<Var> = levels.iter().map(|l| g.leaf(l.clone())).collect();
                let fused = [vars[0], vars[1], vars[2], vars[3]];
                let out = crate::lgfa::compensate_regions(g, &fused, &[(0, 0)], bound, &toy_c)?;
                let mut acc: Option<Var> = None;
                for (o, w) in out.iter().zip(weights.iter()) {
                    let s = weighted_sum(g, *o, w);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => g.add(a, s),
                    });
                }
                Ok(acc.unwrap())
            },
            probes,
            15,
        )?);
    }
    // -- both decoder interactions (covers deformable attention in place) --
    {
        let params = init_params(&toy);
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let levels: Vec<ArrayD<f64>> = (1..=4)
            .map(|i| {
                let side = toy.level_side(i);
                rand_dyn(&mut rng, &[side, side, toy.channels[i - 1]], 1.0)
            })
            .collect();
        let token_values = rand_dyn(&mut rng, &[toy.joint_tokens(), toy.text_dim], 1.0);
        let wl = rand_dyn(&mut rng, &[toy.joint_tokens(), toy.hidden_dim], 1.0);
        let wv = rand_dyn(&mut rng, &[toy.num_visual_tokens(), toy.hidden_dim], 1.0);
        let toy_c = toy.clone();
        report.grad.extend(grad_check_builder(
            "mid.interact",
            &params,
            move |g, bound| {
                let vars: Vec<Var> = levels.iter().map(|l| g.constant(l.clone())).collect();
                let fused = [vars[0], vars[1], vars[2], vars[3]];
                let tf = crate::encoders::TokenFeatures {
                    values: g.constant(token_values.clone()),
                    pad_mask: vec![true; toy_c.joint_tokens()],
                    cls_index: 0,
                };
                let mut state = crate::mid::harmonize(g, &fused, &tf, bound, &toy_c)?;
                crate::mid::interact(g, &mut state, bound, &toy_c)?;
                let a = weighted_sum(g, state.l_hat, &wl);
                let b = weighted_sum(g, state.v_hat, &wv);
                Ok(g.add(a, b))
            },
            probes,
            16,
        )?);
    }
    // -- deformable attention in isolation --
    {
        let params = init_params(&toy);
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let n = toy.num_visual_tokens();
        let queries = rand_dyn(&mut rng, &[n, toy.hidden_dim], 1.0);
        let w = rand_dyn(&mut rng, &[n, toy.hidden_dim], 1.0);
        let toy_c = toy.clone();
        report.grad.extend(grad_check_builder(
            "mid.deform",
            &params,
            move |g, bound| {
                let q = g.constant(queries.clone());
                let level_dims: [(usize, usize); 4] = [
                    (toy_c.level_side(1), toy_c.level_side(1)),
                    (toy_c.level_side(2), toy_c.level_side(2)),
                    (toy_c.level_side(3), toy_c.level_side(3)),
                    (toy_c.level_side(4), toy_c.level_side(4)),
                ];
                let mut level_ranges = [(0usize, 0usize); 4];
                let mut start = 0;
                for (i, &(h, wd)) in level_dims.iter().enumerate() {
                    level_ranges[i] = (start, start + h * wd);
                    start += h * wd;
                }
                let refs = crate::mid::reference_points(&level_dims);
                let out = crate::mid::ms_deform_attn(
                    g,
                    q,
                    q,
                    &level_dims,
                    &level_ranges,
                    &refs,
                    bound,
                    &toy_c,
                )?;
                Ok(weighted_sum(g, out, &w))
            },
            probes,
            17,
        )?);
    }
    // -- losses, gradients with respect to the logits --
    {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let mut params = Params::new();
        params.insert("logits", rand_dyn(&mut rng, &[6, 6], 3.0));
        use rand::Rng;
        let target = ndarray::Array2::from_shape_fn((6, 6), |_| rng.gen_bool(0.4) as u8 as f64);
        let t1 = target.clone();
        report.grad.extend(grad_check_builder(
            "objective.ce",
            &params,
            move |g, bound| crate::objective::ce_loss(g, bound.var("logits"), &t1),
            8,
            18,
        )?);
        let t2 = target.clone();
        report.grad.extend(grad_check_builder(
            "objective.dice",
            &params,
            move |g, bound| {
                crate::objective::dice_loss(g, bound.var("logits"), &t2, crate::objective::DICE_EPS)
            },
            8,
            19,
        )?);
    }
    // -- the whole model on a 2-sample batch at the given config --
    {
        let model = CroBim::new(config.clone())?;
        let data = crate::dataio::synth_generate(2, config, config.seed.wrapping_add(77))?;
        let params = model.params.clone();
        let cfg = config.clone();
        report.grad.extend(grad_check_builder_eps(
            "model.full",
            &params,
            move |g, bound| {
                let m = CroBim {
                    config: cfg.clone(),
                    params: Params::new(), // forward reads only bound vars
                };
                let batch: Vec<&crate::encoders::Triplet> = data.iter().collect();
                let (total, _) = m.batch_loss(g, bound, &batch)?;
                Ok(total)
            },
            2,
            ProbePlan::TopMagnitude,
            GRAD_EPS,
        )?);
    }

    report.oracles.extend(oracle_equivalence_checks(&toy)?);
    report.oracles.push(normalization_check(config, 3)?);
    report.oracles.push(shape_check(config)?);
    Ok(report)
}

/// Randomized module-vs-oracle equivalences at toy dimensions.
pub fn oracle_equivalence_checks(toy: &ModelConfig) -> Result<Vec<OracleCheck>> {
    let mut checks = Vec::new();
    let params = init_params(toy);
    use rand::Rng;

    // plain attention against the triple-loop oracle
    {
        let mut rng = ChaCha8Rng::seed_from_u64(201);
        let mut max = 0.0f64;
        for _ in 0..20 {
            let q = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
            let k = Array2::from_shape_fn((7, 5), |_| rng.gen_range(-1.0..1.0));
            let v = Array2::from_shape_fn((7, 4), |_| rng.gen_range(-1.0..1.0));
            let scale = 1.0 / (5.0f64).sqrt();
            let mut g = Graph::new();
            let qv = g.constant(q.clone().into_dyn());
            let kv = g.constant(k.clone().into_dyn());
            let vv = g.constant(v.clone().into_dyn());
            let kt = g.transpose(kv);
            let s = g.matmul(qv, kt);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s, "verify.attn");
            let out = g.matmul(a, vv);
            let expect = oracle_attention(&q, &k, &v, scale);
            for (x, y) in g.value(out).iter().zip(expect.iter()) {
                max = max.max((x - y).abs());
            }
        }
        checks.push(OracleCheck::new("oracle.attention", max, ORACLE_TOL));
    }
    // stage fusion
    {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut max = 0.0f64;
        for trial in 0..8u64 {
            let stage = (trial as usize % 4) + 1;
            let side = toy.level_side(stage);
            let c = toy.channels[stage - 1];
            let level =
                ndarray::Array3::from_shape_fn((side, side, c), |_| rng.gen_range(-1.0..1.0));
            let tokens =
                Array2::from_shape_fn((crate::lgfa::fusion_len(toy), toy.text_dim), |_| {
                    rng.gen_range(-1.0..1.0)
                });
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let lv = g.constant(level.clone().into_dyn());
            let tv = g.constant(tokens.clone().into_dyn());
            let (fused, scores) = crate::lgfa::fuse_stage(&mut g, lv, tv, &bound, stage, toy)?;
            let p = format!("lgfa.stage{stage}");
            let get2 = |n: &str| {
                params
                    .get(&format!("{p}.{n}"))
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            };
            let get1 = |n: &str| {
                params
                    .get(&format!("{p}.{n}"))
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned()
            };
            let (wq, bq, wk, wv) = (get2("wq"), get1("bq"), get2("wk"), get2("wv"));
            let (gw, gb, rw, rb) = (
                get2("gate.w"),
                get1("gate.b"),
                get2("reweight.w"),
                get1("reweight.b"),
            );
            let oracle = oracle_fuse_stage(
                &level,
                &tokens,
                &FuseOracleParams {
                    wq: &wq,
                    bq: &bq,
                    wk: &wk,
                    wv: &wv,
                    gate_w: &gw,
                    gate_b: &gb,
                    reweight_w: &rw,
                    reweight_b: &rb,
                },
            );
            for (x, y) in g.value(fused).iter().zip(oracle.0.iter()) {
                max = max.max((x - y).abs());
            }
            for (x, y) in scores.iter().zip(oracle.1.iter()) {
                max = max.max((x - y).abs());
            }
        }
        checks.push(OracleCheck::new("oracle.fuse_stage", max, ORACLE_TOL));
    }
    // deficit map and top-k
    {
        let mut rng = ChaCha8Rng::seed_from_u64(203);
        let mut max = 0.0f64;
        let mut topk_err = 0.0f64;
        for _ in 0..8 {
            let dims: [(usize, usize); 4] = [
                (toy.level_side(1), toy.level_side(1)),
                (toy.level_side(2), toy.level_side(2)),
                (toy.level_side(3), toy.level_side(3)),
                (toy.level_side(4), toy.level_side(4)),
            ];
            let scores: Vec<Array2<f64>> = dims
                .iter()
                .map(|&(h, w)| {
                    Array2::from_shape_fn((h * w, toy.text_dim), |_| rng.gen_range(-2.0..2.0))
                })
                .collect();
            let set = crate::lgfa::ScoreSet {
                scores: [
                    scores[0].clone(),
                    scores[1].clone(),
                    scores[2].clone(),
                    scores[3].clone(),
                ],
                level_dims: dims,
            };
            let h4 = toy.level_side(4);
            let m = crate::lgfa::deficit_map(&set, toy);
            let oracle = oracle_deficit_map(&set.scores, &dims, h4, h4);
            for (x, y) in m.iter().zip(oracle.iter()) {
                max = max.max((x - y).abs());
            }
            let cells = h4 * h4;
            let rand_m = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
            for k in [0usize, 1, cells.min(3)] {
                if crate::lgfa::topk_regions(&rand_m, k)? != oracle_topk(&rand_m, k) {
                    topk_err = 1.0;
                }
            }
        }
        checks.push(OracleCheck::new("oracle.deficit_map", max, ORACLE_TOL));
        checks.push(OracleCheck::new("oracle.topk", topk_err, 0.5));
    }
    // compensation
    {
        let mut rng = ChaCha8Rng::seed_from_u64(204);
        let mut max = 0.0f64;
        let h4 = toy.level_side(4);
        for _ in 0..4 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let levels: Vec<ndarray::Array3<f64>> = (1..=4)
                .map(|i| {
                    let side = toy.level_side(i);
                    ndarray::Array3::from_shape_fn((side, side, toy.channels[i - 1]), |_| {
                        rng.gen_range(-1.0..1.0)
                    })
                })
                .collect();
            let vars: Vec<Var> = levels
                .iter()
                .map(|l| g.constant(l.clone().into_dyn()))
                .collect();
            let fused = [vars[0], vars[1], vars[2], vars[3]];
            let regions = vec![(0usize, 0usize)];
            let out = crate::lgfa::compensate_regions(&mut g, &fused, &regions, &bound, toy)?;
            let get2 = |n: &str| {
                params
                    .get(n)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            };
            let get1 = |n: &str| {
                params
                    .get(n)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .to_owned()
            };
            let fwd_w: Vec<Array2<f64>> = (1..=4)
                .map(|i| get2(&format!("lgfa.comp.fwd{i}.w")))
                .collect();
            let fwd_b: Vec<Array1<f64>> = (1..=4)
                .map(|i| get1(&format!("lgfa.comp.fwd{i}.b")))
                .collect();
            let inv_w: Vec<Array2<f64>> = (1..=4)
                .map(|i| get2(&format!("lgfa.comp.inv{i}.w")))
                .collect();
            let inv_b: Vec<Array1<f64>> = (1..=4)
                .map(|i| get1(&format!("lgfa.comp.inv{i}.b")))
                .collect();
            let (ln_g, ln_b) = (get1("lgfa.comp.ln.gain"), get1("lgfa.comp.ln.bias"));
            let (wq, bq) = (get2("lgfa.comp.wq"), get1("lgfa.comp.bq"));
            let wk = get2("lgfa.comp.wk");
            let (wv, bv) = (get2("lgfa.comp.wv"), get1("lgfa.comp.bv"));
            let (wo, bo) = (get2("lgfa.comp.wo"), get1("lgfa.comp.bo"));
            let oracle = oracle_compensate(
                &[
                    levels[0].clone(),
                    levels[1].clone(),
                    levels[2].clone(),
                    levels[3].clone(),
                ],
                &regions,
                &CompOracleParams {
                    fwd_w: [&fwd_w[0], &fwd_w[1], &fwd_w[2], &fwd_w[3]],
                    fwd_b: [&fwd_b[0], &fwd_b[1], &fwd_b[2], &fwd_b[3]],
                    inv_w: [&inv_w[0], &inv_w[1], &inv_w[2], &inv_w[3]],
                    inv_b: [&inv_b[0], &inv_b[1], &inv_b[2], &inv_b[3]],
                    ln_gain: &ln_g,
                    ln_bias: &ln_b,
                    wq: &wq,
                    bq: &bq,
                    wk: &wk,
                    wv: &wv,
                    bv: &bv,
                    wo: &wo,
                    bo: &bo,
                    heads: toy.comp_heads,
                },
                h4,
                h4,
            );
            for i in 0..4 {
                for (x, y) in g.value(out[i]).iter().zip(oracle[i].iter()) {
                    max = max.max((x - y).abs());
                }
            }
        }
        checks.push(OracleCheck::new("oracle.compensate", max, ORACLE_TOL));
    }
    // deformable sampling
    {
        let mut rng = ChaCha8Rng::seed_from_u64(205);
        let mut max = 0.0f64;
        let heads = 2;
        let points = 2;
        let d = 4;
        for _ in 0..8 {
            let maps = [
                ndarray::Array3::from_shape_fn((4, 4, d), |_| rng.gen_range(-1.0..1.0)),
                ndarray::Array3::from_shape_fn((2, 2, d), |_| rng.gen_range(-1.0..1.0)),
            ];
            let n = 6;
            let taps = heads * 2 * points;
            let offsets = Array2::from_shape_fn((n, taps * 2), |_| rng.gen_range(-1.0..1.0));
            let logits = Array2::from_shape_fn((n, taps), |_| rng.gen_range(-1.0..1.0));
            let refs = Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.1..0.9));
            let mut g = Graph::new();
            let mvars: Vec<Var> = maps
                .iter()
                .map(|m| g.constant(m.clone().into_dyn()))
                .collect();
            let off = g.constant(offsets.clone().into_dyn());
            let lg = g.constant(logits.clone().into_dyn());
            let grouped = g.reshape(lg, &[n * heads, 2 * points]);
            let sm = g.softmax_rows(grouped, "verify.deform");
            let w = g.reshape(sm, &[n, taps]);
            let out = g.msdeform_sample(&mvars, off, w, refs.clone(), heads, points);
            let weights = g
                .value(w)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let expect = oracle_msdeform(&maps, &offsets, &weights, &refs, heads, points);
            for (x, y) in g.value(out).iter().zip(expect.iter()) {
                max = max.max((x - y).abs());
            }
        }
        checks.push(OracleCheck::new("oracle.msdeform", max, ORACLE_TOL));
    }
    // losses
    {
        let mut rng = ChaCha8Rng::seed_from_u64(206);
        let mut max = 0.0f64;
        for _ in 0..20 {
            let z = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-4.0..4.0));
            let t = Array2::from_shape_fn((5, 5), |_| rng.gen_bool(0.4) as u8 as f64);
            let mut g = Graph::new();
            let zv = g.constant(z.clone().into_dyn());
            let ce = crate::objective::ce_loss(&mut g, zv, &t)?;
            let dice = crate::objective::dice_loss(&mut g, zv, &t, crate::objective::DICE_EPS)?;
            max = max.max((g.scalar_value(ce) - oracle_bce(&z, &t)).abs());
            max = max.max(
                (g.scalar_value(dice) - oracle_dice(&z, &t, crate::objective::DICE_EPS)).abs(),
            );
        }
        checks.push(OracleCheck::new("oracle.losses", max, ORACLE_TOL));
    }
    // metric pixel counts
    {
        let mut rng = ChaCha8Rng::seed_from_u64(207);
        let mut err = 0.0f64;
        let mut acc = crate::metrics::MetricAccumulator::new();
        let mut oi = 0u64;
        let mut ou = 0u64;
        for _ in 0..50 {
            let p = Array2::from_shape_fn((16, 16), |_| rng.gen_bool(0.3) as u8);
            let gt = Array2::from_shape_fn((16, 16), |_| rng.gen_bool(0.3) as u8);
            let (i, u) = oracle_iou(&p, &gt);
            oi += i;
            ou += u;
            acc.accumulate(&p, &gt)?;
        }
        if acc.sum_intersection != oi || acc.sum_union != ou {
            err = 1.0;
        }
        checks.push(OracleCheck::new("oracle.iou_counts", err, 0.5));
    }
    Ok(checks)
}

/// Run full forwards and confirm every softmax row sums to 1 within the
/// 32-bit tolerance.
pub fn normalization_check(config: &ModelConfig, instances: usize) -> Result<OracleCheck> {
    let model = CroBim::new(config.clone())?;
    let mut worst = 0.0f64;
    for i in 0..instances {
        let data =
            crate::dataio::synth_generate(1, config, config.seed.wrapping_add(1000 + i as u64))?;
        let (_, _, _, attn) = model.predict(&data[0].image, &data[0].expression)?;
        if attn.is_empty() {
            return Err(CrobimError::Verification(
                "no softmax nodes recorded".into(),
            ));
        }
        for (_, m) in attn {
            let m2 = m.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for row in m2.rows() {
                let sum: f32 = row.iter().map(|v| *v as f32).sum();
                worst = worst.max((1.0 - sum as f64).abs());
            }
        }
    }
    Ok(OracleCheck::new("normalization", worst, 1e-6))
}

/// Pyramid/logit shape law and the visual-token closed form.
pub fn shape_check(config: &ModelConfig) -> Result<OracleCheck> {
    let model = CroBim::new(config.clone())?;
    let data = crate::dataio::synth_generate(1, config, config.seed.wrapping_add(5))?;
    let (logits, logits_up, _, _) = model.predict(&data[0].image, &data[0].expression)?;
    let h = config.image_size;
    let mut err = 0.0f64;
    if logits.shape() != [h / 4, h / 4] || logits_up.shape() != [h, h] {
        err = 1.0;
    }
    let closed_form: usize = (1..=4).map(|i| (h >> (i + 1)) * (h >> (i + 1))).sum();
    if config.num_visual_tokens() != closed_form {
        err = 1.0;
    }
    Ok(OracleCheck::new("shapes", err, 0.5))
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn toy_verification_passes() {
        let report = run_verification(&ModelConfig::toy()).unwrap();
        assert!(report.pass(), "\n{}", report.render_table());
        // the table names every checked parameter group
        let table = report.render_table();
        assert!(table.contains("model.full:capm.prompts"));
        assert!(table.contains("lgfa.fuse:lgfa.stage3.wq"));
        assert!(table.contains("mid.deform:mid.v2l.deform.off.w"));
    }
}
