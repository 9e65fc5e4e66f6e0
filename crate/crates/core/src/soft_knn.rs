//! Soft κ-nearest-neighbour selection via entropic optimal transport.
//!
//! Cosine distances `c` between an embedding and the expert keys are
//! transported onto two anchors, "selected" (at distance 0) and "rejected"
//! (at distance 1), with marginals `μ = 1/N` per key and
//! `ν = [κ/N, (N-κ)/N]`. The selected column of the entropic plan, scaled by
//! `N`, is a soft indicator of the κ nearest keys that sums to κ.
//!
//! Everything runs in the log domain: with the usual kernel width of 5e-4 the
//! plain kernel `exp(-E/σ)` underflows for distances above roughly 0.6.
//!
//! The gradient is taken by reverse-mode differentiation through the unrolled
//! Bregman iterations. When the iterations start from the dual root (see
//! [`SinkhornInit::DualRoot`]) the root's own dependence on the distances is
//! folded in through the scalar balance equation, so the returned gradient is
//! exact for the whole forward map.

use ndarray::{Array1, Array2};

use crate::error::{DeeError, Result};
use crate::types::{EmbeddingVector, ModelConfig, SinkhornInit};

/// Row-marginal deviation (relative to `1/N`) above which a pass is flagged as non-converged.
pub const NONCONVERGENCE_TOLERANCE: f64 = 1e-3;

/// Cosine distances between one embedding and every key, each in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceVector(Array1<f64>);

impl DistanceVector {
    pub fn new(c: Array1<f64>) -> Result<Self> {
        if let Some(i) = c.iter().position(|v| !(0.0..=2.0).contains(v)) {
            return Err(DeeError::config(format!(
                "distance {i} = {} outside [0, 2]",
                c[i]
            )));
        }
        Ok(Self(c))
    }

    pub fn from_vec(c: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(c))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `c_n = 1 - cos(z, k_n)` for every key row.
pub fn cosine_distances(z: &EmbeddingVector, keys: &Array2<f64>) -> Result<DistanceVector> {
    if keys.ncols() != z.dim() {
        return Err(DeeError::shape(format!(
            "keys have dimension {}, embedding has {}",
            keys.ncols(),
            z.dim()
        )));
    }
    let z_norm = z.norm();
    if !(z_norm > 0.0) {
        return Err(DeeError::DegenerateInput(
            "embedding has zero norm".to_string(),
        ));
    }
    let mut c = Array1::zeros(keys.nrows());
    for (n, key) in keys.outer_iter().enumerate() {
        let k_norm = key.dot(&key).sqrt();
        if !(k_norm > 0.0) {
            return Err(DeeError::DegenerateInput(format!("key {n} has zero norm")));
        }
        let cos = key.dot(z.values()) / (z_norm * k_norm);
        c[n] = (1.0 - cos).clamp(0.0, 2.0);
    }
    Ok(DistanceVector(c))
}

/// Squared distances to the two anchors: `E[n] = [c_n², (c_n - 1)²]`.
pub fn distance_matrix(c: &DistanceVector) -> Array2<f64> {
    let n = c.len();
    Array2::from_shape_fn((n, 2), |(i, j)| {
        let ci = c.0[i];
        if j == 0 {
            ci * ci
        } else {
            (ci - 1.0) * (ci - 1.0)
        }
    })
}

/// Log of the Gaussian kernel, `-E/σ`. This is what the solver consumes.
pub fn log_gaussian_kernel(e: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DeeError::config(format!(
            "kernel width must be positive, got {sigma}"
        )));
    }
    Ok(e.mapv(|v| -v / sigma))
}

/// `G = exp(-E/σ)` elementwise. Entries may underflow to zero for small σ;
/// prefer [`log_gaussian_kernel`] for computation.
pub fn gaussian_kernel(e: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    Ok(log_gaussian_kernel(e, sigma)?.mapv(f64::exp))
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Root `x` of `Σ_n sigmoid(a_n + x) = κ`, the log-ratio of the column
/// scalings at the fixed point of the Bregman iterations.
fn dual_root(a: &[f64], kappa: usize) -> f64 {
    let target = kappa as f64;
    let a_max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a_min = a.iter().copied().fold(f64::INFINITY, f64::min);
    let mut lo = -a_max - 40.0;
    let mut hi = -a_min + 40.0;
    let eval = |x: f64| {
        let mut f = -target;
        let mut df = 0.0;
        for &an in a {
            let s = sigmoid(an + x);
            f += s;
            df += s * (1.0 - s);
        }
        (f, df)
    };
    let mut x = 0.5 * (lo + hi);
    for _ in 0..400 {
        let (f, df) = eval(x);
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - f / df;
        let next = if df > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let done = (next - x).abs() <= 1e-14 * (1.0 + x.abs())
            || hi - lo <= 1e-14 * (1.0 + x.abs());
        x = next;
        if done {
            break;
        }
    }
    x
}

/// `∂x/∂a_n` for the dual root, computed from log-weights so it survives saturation.
fn dual_root_sensitivity(a: &[f64], x: f64) -> Vec<f64> {
    let log_w: Vec<f64> = a
        .iter()
        .map(|&an| {
            let t = an + x;
            -softplus(t) - softplus(-t)
        })
        .collect();
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_w.iter().map(|lw| (lw - m).exp()).sum();
    log_w.iter().map(|lw| -(lw - m).exp() / total).collect()
}

/// Saved state of the Bregman iterations.
///
/// `log_q[l]` holds `log q^(l)` and `log_p[l]` holds `log p^(l+1)`. Once an
/// iteration reproduces its input bit for bit every later one does too, so
/// storage stops there and the last entries stand for the remaining rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BregmanIterates {
    pub log_p: Vec<Array1<f64>>,
    pub log_q: Vec<[f64; 2]>,
    pub log_mu: f64,
    pub log_nu: [f64; 2],
    pub init: SinkhornInit,
    /// Rounds performed, counting the stored ones and the repeated tail.
    pub rounds: usize,
    /// Dual root and its sensitivity to `a_n = logG[n,0] - logG[n,1]`; only for [`SinkhornInit::DualRoot`].
    root_sensitivity: Option<Vec<f64>>,
}

impl BregmanIterates {
    pub fn iterations(&self) -> usize {
        self.rounds
    }

    /// `log p^(l+1)` for `l < iterations()`.
    pub fn log_p_at(&self, l: usize) -> &Array1<f64> {
        &self.log_p[l.min(self.log_p.len() - 1)]
    }

    /// `log q^(l)` for `l ≤ iterations()`.
    pub fn log_q_at(&self, l: usize) -> [f64; 2] {
        self.log_q[l.min(self.log_q.len() - 1)]
    }

    pub fn final_log_p(&self) -> &Array1<f64> {
        self.log_p.last().expect("at least one iteration")
    }

    pub fn final_log_q(&self) -> [f64; 2] {
        *self.log_q.last().expect("initial q is always stored")
    }

    pub fn p(&self) -> Array1<f64> {
        self.final_log_p().mapv(f64::exp)
    }

    pub fn q(&self) -> [f64; 2] {
        let lq = self.final_log_q();
        [lq[0].exp(), lq[1].exp()]
    }
}

/// Runs `iters` rounds of `p ← μ / (G q)`, `q ← ν / (Gᵀ p)` on the log kernel.
pub fn bregman_projections(
    log_kernel: &Array2<f64>,
    kappa: usize,
    iters: usize,
    init: SinkhornInit,
) -> Result<BregmanIterates> {
    let n = log_kernel.nrows();
    if log_kernel.ncols() != 2 {
        return Err(DeeError::shape(format!(
            "kernel must have 2 columns, got {}",
            log_kernel.ncols()
        )));
    }
    if kappa == 0 || kappa >= n {
        return Err(DeeError::config(format!(
            "1 ≤ κ < N required (κ={kappa}, N={n})"
        )));
    }
    if iters == 0 {
        return Err(DeeError::config("at least one Bregman iteration required"));
    }
    if let Some(v) = log_kernel.iter().find(|v| !v.is_finite()) {
        return Err(DeeError::NumericalDegeneracy {
            iteration: 0,
            detail: format!("non-finite log-kernel entry {v}"),
        });
    }
    let lg = log_kernel
        .as_standard_layout()
        .into_owned()
        .into_raw_vec_and_offset()
        .0;
    let nf = n as f64;
    let log_mu = -nf.ln();
    let log_nu = [
        (kappa as f64 / nf).ln(),
        ((n - kappa) as f64 / nf).ln(),
    ];

    let (lq0, root_sensitivity) = match init {
        SinkhornInit::Uniform => ([-(2f64.ln()); 2], None),
        SinkhornInit::DualRoot => {
            let a: Vec<f64> = (0..n).map(|i| lg[2 * i] - lg[2 * i + 1]).collect();
            let x = dual_root(&a, kappa);
            ([0.5 * x, -0.5 * x], Some(dual_root_sensitivity(&a, x)))
        }
    };

    let mut log_p = Vec::with_capacity(iters);
    let mut log_q = Vec::with_capacity(iters + 1);
    log_q.push(lq0);
    let mut lq = lq0;
    let mut lp = vec![0.0; n];
    for l in 0..iters {
        for i in 0..n {
            let denom = lse2(lg[2 * i] + lq[0], lg[2 * i + 1] + lq[1]);
            if !denom.is_finite() {
                return Err(DeeError::NumericalDegeneracy {
                    iteration: l,
                    detail: format!("(G q)[{i}] is {}", denom.exp()),
                });
            }
            lp[i] = log_mu - denom;
        }
        for j in 0..2 {
            let m = (0..n)
                .map(|i| lg[2 * i + j] + lp[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|i| (lg[2 * i + j] + lp[i] - m).exp()).sum();
            let denom = m + s.ln();
            if !denom.is_finite() {
                return Err(DeeError::NumericalDegeneracy {
                    iteration: l,
                    detail: format!("(Gᵀ p)[{j}] is {}", denom.exp()),
                });
            }
            lq[j] = log_nu[j] - denom;
        }
        let repeated = log_q.last().is_some_and(|prev: &[f64; 2]| prev[0].to_bits() == lq[0].to_bits() && prev[1].to_bits() == lq[1].to_bits());
        log_p.push(Array1::from(lp.clone()));
        log_q.push(lq);
        if repeated {
            break;
        }
    }

    Ok(BregmanIterates {
        log_p,
        log_q,
        log_mu,
        log_nu,
        init,
        rounds: iters,
        root_sensitivity,
    })
}

/// `Γ = diag(p) · G · diag(q)` from the final iterates.
pub fn transport_plan(iterates: &BregmanIterates, log_kernel: &Array2<f64>) -> Array2<f64> {
    let lp = iterates.final_log_p();
    let lq = iterates.final_log_q();
    Array2::from_shape_fn(log_kernel.dim(), |(i, j)| {
        (lp[i] + log_kernel[[i, j]] + lq[j]).exp()
    })
}

/// Soft-KNN hyperparameters, usually taken from a [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftKnnParams {
    pub num_neighbors: usize,
    pub kernel_width: f64,
    pub iters: usize,
    pub threshold: f64,
    pub init: SinkhornInit,
}

impl From<&ModelConfig> for SoftKnnParams {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            num_neighbors: cfg.num_neighbors,
            kernel_width: cfg.kernel_width,
            iters: cfg.bregman_iters,
            threshold: cfg.gamma_threshold,
            init: cfg.sinkhorn_init,
        }
    }
}

/// Output of the soft-KNN layer with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct SoftKnnResult {
    /// Scores after thresholding.
    pub gamma: Array1<f64>,
    /// Scores before thresholding; sums to κ.
    pub gamma_raw: Array1<f64>,
    /// `true` where the raw score survived the threshold.
    pub mask: Vec<bool>,
    pub c: DistanceVector,
    pub e: Array2<f64>,
    pub log_kernel: Array2<f64>,
    pub iterates: BregmanIterates,
    pub plan: Array2<f64>,
    /// Largest `|N · rowsum_n(Γ) - 1|`.
    pub residual: f64,
    pub params: SoftKnnParams,
}

impl SoftKnnResult {
    pub fn converged(&self) -> bool {
        self.residual <= NONCONVERGENCE_TOLERANCE
    }

    pub fn mu(&self) -> f64 {
        self.iterates.log_mu.exp()
    }

    pub fn nu(&self) -> [f64; 2] {
        [self.iterates.log_nu[0].exp(), self.iterates.log_nu[1].exp()]
    }

    /// Kernel matrix `G`; may contain underflowed zeros.
    pub fn kernel(&self) -> Array2<f64> {
        self.log_kernel.mapv(f64::exp)
    }

    pub fn num_experts(&self) -> usize {
        self.c.len()
    }
}

/// Soft-KNN scores from precomputed distances.
pub fn soft_knn_from_distances(c: DistanceVector, params: &SoftKnnParams) -> Result<SoftKnnResult> {
    let e = distance_matrix(&c);
    let log_kernel = log_gaussian_kernel(&e, params.kernel_width)?;
    let iterates = bregman_projections(&log_kernel, params.num_neighbors, params.iters, params.init)?;
    let plan = transport_plan(&iterates, &log_kernel);
    let n = c.len();
    let nf = n as f64;

    // the anchor at distance 0 carries mass κ/N
    let gamma_raw: Array1<f64> = plan.column(0).mapv(|g| nf * g);
    let mask: Vec<bool> = gamma_raw.iter().map(|&g| g >= params.threshold).collect();
    let gamma = Array1::from_shape_fn(n, |i| if mask[i] { gamma_raw[i] } else { 0.0 });
    let residual = plan
        .outer_iter()
        .map(|row| (nf * row.sum() - 1.0).abs())
        .fold(0.0, f64::max);

    Ok(SoftKnnResult {
        gamma,
        gamma_raw,
        mask,
        c,
        e,
        log_kernel,
        iterates,
        plan,
        residual,
        params: *params,
    })
}

/// Full soft-KNN layer: distances, kernel, Bregman projections, plan and thresholded scores.
pub fn soft_knn_scores(
    z: &EmbeddingVector,
    keys: &Array2<f64>,
    cfg: &ModelConfig,
) -> Result<SoftKnnResult> {
    crate::types::ensure_valid(cfg)?;
    if keys.nrows() != cfg.num_experts {
        return Err(DeeError::shape(format!(
            "{} keys for {} experts",
            keys.nrows(),
            cfg.num_experts
        )));
    }
    let c = cosine_distances(z, keys)?;
    soft_knn_from_distances(c, &SoftKnnParams::from(cfg))
}

/// Indicator of the κ smallest distances; ties go to the lowest index.
pub fn hard_topk(c: &DistanceVector, kappa: usize) -> Array1<f64> {
    let n = c.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| c.0[a].total_cmp(&c.0[b]).then(a.cmp(&b)));
    let mut out = Array1::zeros(n);
    for &i in idx.iter().take(kappa.min(n)) {
        out[i] = 1.0;
    }
    out
}

/// Gradient w.r.t. `c` given the gradient w.r.t. the thresholded scores.
/// Thresholded-out entries act as a constant mask and pass no gradient.
pub fn soft_knn_backward(result: &SoftKnnResult, d_gamma: &Array1<f64>) -> Result<Array1<f64>> {
    if d_gamma.len() != result.num_experts() {
        return Err(DeeError::shape(format!(
            "gamma gradient has length {}, expected {}",
            d_gamma.len(),
            result.num_experts()
        )));
    }
    let masked = Array1::from_shape_fn(d_gamma.len(), |i| {
        if result.mask[i] {
            d_gamma[i]
        } else {
            0.0
        }
    });
    soft_knn_backward_raw(result, &masked)
}

/// Gradient w.r.t. `c` given the gradient w.r.t. the pre-threshold scores.
pub fn soft_knn_backward_raw(result: &SoftKnnResult, d_gamma_raw: &Array1<f64>) -> Result<Array1<f64>> {
    let n = result.num_experts();
    let it = &result.iterates;
    let iters = it.iterations();
    if d_gamma_raw.len() != n
        || result.log_kernel.dim() != (n, 2)
        || it.log_p.is_empty()
        || it.log_q.len() != it.log_p.len() + 1
        || it.log_p.len() > iters
        || it.log_p.iter().any(|p| p.len() != n)
    {
        return Err(DeeError::shape(
            "saved soft-KNN state does not match the gradient shape",
        ));
    }
    let lg = &result.log_kernel;

    let mut g_lg = Array2::<f64>::zeros((n, 2));
    let mut g_lp = vec![0.0; n];
    let mut g_lq = [0.0; 2];

    // γ_n = N exp(log p_n + log G_n0 + log q_0)
    for i in 0..n {
        let bar = d_gamma_raw[i] * result.gamma_raw[i];
        g_lp[i] += bar;
        g_lq[0] += bar;
        g_lg[[i, 0]] += bar;
    }

    for l in (0..iters).rev() {
        let lp = it.log_p_at(l);
        let lq_next = it.log_q_at(l + 1);
        let lq_prev = it.log_q_at(l);

        // log q^(l+1)_j = log ν_j - LSE_n(log G_nj + log p^(l+1)_n)
        for j in 0..2 {
            let bq = g_lq[j];
            if bq == 0.0 {
                continue;
            }
            let lse = it.log_nu[j] - lq_next[j];
            for i in 0..n {
                let w = (lg[[i, j]] + lp[i] - lse).exp();
                g_lp[i] -= bq * w;
                g_lg[[i, j]] -= bq * w;
            }
        }

        // log p^(l+1)_n = log μ - LSE_j(log G_nj + log q^(l)_j)
        let mut g_prev = [0.0; 2];
        for i in 0..n {
            let bp = g_lp[i];
            if bp == 0.0 {
                continue;
            }
            let lse = it.log_mu - lp[i];
            for j in 0..2 {
                let v = (lg[[i, j]] + lq_prev[j] - lse).exp();
                g_prev[j] -= bp * v;
                g_lg[[i, j]] -= bp * v;
            }
            g_lp[i] = 0.0;
        }
        g_lq = g_prev;
    }

    if let Some(sens) = &it.root_sensitivity {
        // log q^(0) = [x/2, -x/2]
        let dx = 0.5 * (g_lq[0] - g_lq[1]);
        for i in 0..n {
            let da = dx * sens[i];
            g_lg[[i, 0]] += da;
            g_lg[[i, 1]] -= da;
        }
    }

    let sigma = result.params.kernel_width;
    let c = result.c.values();
    Ok(Array1::from_shape_fn(n, |i| {
        let de0 = -g_lg[[i, 0]] / sigma;
        let de1 = -g_lg[[i, 1]] / sigma;
        de0 * 2.0 * c[i] + de1 * 2.0 * (c[i] - 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use crate::rng::{seeded_rng, uniform01};

    fn params(kappa: usize, sigma: f64, iters: usize) -> SoftKnnParams {
        SoftKnnParams {
            num_neighbors: kappa,
            kernel_width: sigma,
            iters,
            threshold: 0.3,
            init: SinkhornInit::DualRoot,
        }
    }

    fn dv(v: &[f64]) -> DistanceVector {
        DistanceVector::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_distance_examples() {
        let z = EmbeddingVector::from_vec(vec![1.0, 0.0]).unwrap();
        for (key, want) in [([1.0, 0.0], 0.0), ([0.0, 1.0], 1.0), ([-1.0, 0.0], 2.0)] {
            let keys = Array2::from_shape_vec((1, 2), key.to_vec()).unwrap();
            let c = cosine_distances(&z, &keys).unwrap();
            assert_abs_diff_eq!(c.values()[0], want, epsilon = 1e-15);
        }
    }

    #[test]
    fn cosine_distance_rejects_zero_norm() {
        let z = EmbeddingVector::from_vec(vec![0.0, 0.0]).unwrap();
        let keys = array![[1.0, 0.0]];
        assert!(matches!(cosine_distances(&z, &keys), Err(DeeError::DegenerateInput(_))));
        let z = EmbeddingVector::from_vec(vec![1.0, 0.0]).unwrap();
        let keys = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(cosine_distances(&z, &keys), Err(DeeError::DegenerateInput(_))));
    }

    #[test]
    fn distance_matrix_examples() {
        assert_eq!(distance_matrix(&dv(&[0.0, 1.0])), array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(distance_matrix(&dv(&[0.5])), array![[0.25, 0.25]]);
        assert_eq!(distance_matrix(&dv(&[2.0])), array![[4.0, 1.0]]);
    }

    #[test]
    fn kernel_examples() {
        let g = gaussian_kernel(&array![[0.0, 1.0]], 1.0).unwrap();
        assert_abs_diff_eq!(g[[0, 0]], 1.0);
        assert_abs_diff_eq!(g[[0, 1]], (-1.0f64).exp(), epsilon = 1e-15);
        let g = gaussian_kernel(&Array2::zeros((3, 2)), 0.1).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
        assert!(matches!(gaussian_kernel(&g, 0.0), Err(DeeError::Config(_))));
    }

    #[test]
    fn small_sigma_kernel_stays_finite_in_log_domain() {
        let lg = log_gaussian_kernel(&array![[0.0, 1.0]], 0.0005).unwrap();
        assert_eq!(lg[[0, 1]], -2000.0);
        assert!(lg.iter().all(|v| v.is_finite()));
        // the plain kernel would lose this row entirely
        assert_eq!(gaussian_kernel(&array![[1.0, 1.0]], 0.0005).unwrap().sum(), 0.0);
        let it = bregman_projections(&array![[-2000.0, -2000.0], [0.0, -2000.0]], 1, 10, SinkhornInit::DualRoot)
            .unwrap();
        assert!(it.final_log_p().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn symmetric_two_expert_instance() {
        let sigma = 0.05;
        let c = dv(&[0.0, 1.0]);
        for init in [SinkhornInit::Uniform, SinkhornInit::DualRoot] {
            let r = soft_knn_from_distances(c.clone(), &SoftKnnParams { init, ..params(1, sigma, 50) }).unwrap();
            let plan = &r.plan;
            // swapping rows and columns maps the instance onto itself
            assert_abs_diff_eq!(plan[[0, 0]], plan[[1, 1]], epsilon = 1e-12);
            assert_abs_diff_eq!(plan[[0, 1]], plan[[1, 0]], epsilon = 1e-12);
            assert_abs_diff_eq!(plan.column(0).sum(), 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(plan.column(1).sum(), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_kernel_plan_rows_sum_to_mu() {
        let lg = Array2::zeros((5, 2));
        let it = bregman_projections(&lg, 2, 3, SinkhornInit::Uniform).unwrap();
        let plan = transport_plan(&it, &lg);
        for row in plan.outer_iter() {
            assert_abs_diff_eq!(row.sum(), 0.2, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(plan.column(0).sum(), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn converged_instance_matches_marginals() {
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let n = 4 + (uniform01(&mut rng) * 60.0) as usize;
            let kappa = 1 + (uniform01(&mut rng) * (n - 1) as f64) as usize;
            let c: Vec<f64> = (0..n).map(|_| 2.0 * uniform01(&mut rng)).collect();
            let r = soft_knn_from_distances(dv(&c), &params(kappa, 0.0005, 400)).unwrap();
            let nu = r.nu();
            for row in r.plan.outer_iter() {
                assert!((row.sum() - 1.0 / n as f64).abs() <= 1e-6);
            }
            assert!((r.plan.column(0).sum() - nu[0]).abs() <= 1e-6);
            assert!((r.plan.column(1).sum() - nu[1]).abs() <= 1e-6);
            assert!((r.gamma_raw.sum() - kappa as f64).abs() <= 1e-6);
            assert!(r.converged());
        }
    }

    #[test]
    fn uniform_start_with_tiny_sigma_is_flagged() {
        // threshold far from the initial split at c = 0.5: 400 steps are not enough
        let c: Vec<f64> = (0..64).map(|i| 0.6 + 0.02 * i as f64).collect();
        let p = SoftKnnParams {
            init: SinkhornInit::Uniform,
            ..params(32, 0.0005, 400)
        };
        let r = soft_knn_from_distances(dv(&c), &p).unwrap();
        assert!(!r.converged(), "residual {}", r.residual);
        // the column marginal is exact after every q update regardless
        assert_abs_diff_eq!(r.gamma_raw.sum(), 32.0, epsilon = 1e-9);
    }

    #[test]
    fn nearest_key_gets_full_score() {
        let z = EmbeddingVector::from_vec(vec![1.0, 0.0]).unwrap();
        let keys = array![[1.0, 0.0], [0.0, 1.0]];
        let cfg = ModelConfig {
            num_experts: 2,
            num_neighbors: 1,
            embedding_dim: 2,
            kernel_width: 1e-3,
            ..ModelConfig::default()
        };
        let r = soft_knn_scores(&z, &keys, &cfg).unwrap();
        assert_abs_diff_eq!(r.gamma[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(r.gamma[1], 0.0, epsilon = 1e-3);
    }

    #[test]
    fn equal_distances_split_evenly() {
        let r = soft_knn_from_distances(dv(&[0.5, 0.5]), &params(1, 0.0005, 400)).unwrap();
        assert_abs_diff_eq!(r.gamma_raw[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.gamma_raw[1], 0.5, epsilon = 1e-12);
        assert_eq!(r.gamma, r.gamma_raw);
    }

    #[test]
    fn threshold_zeroes_small_scores() {
        let r = soft_knn_from_distances(dv(&[0.1, 0.2, 0.21, 0.9]), &SoftKnnParams {
            threshold: 0.3,
            ..params(1, 0.2, 200)
        })
        .unwrap();
        for i in 0..4 {
            assert_eq!(r.mask[i], r.gamma_raw[i] >= 0.3);
            assert_eq!(r.gamma[i], if r.mask[i] { r.gamma_raw[i] } else { 0.0 });
        }
        assert!(r.mask.iter().any(|m| !m));
    }

    #[test]
    fn hard_topk_examples() {
        assert_eq!(hard_topk(&dv(&[0.1, 0.9, 0.5]), 2).to_vec(), vec![1.0, 0.0, 1.0]);
        assert_eq!(hard_topk(&dv(&[0.5, 0.5]), 1).to_vec(), vec![1.0, 0.0]);
        assert_eq!(hard_topk(&dv(&[0.3, 0.2, 0.1]), 3).to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn small_sigma_support_matches_hard_topk() {
        let mut rng = seeded_rng(11);
        let mut checked = 0;
        while checked < 100 {
            let c: Vec<f64> = (0..4).map(|_| 2.0 * uniform01(&mut rng)).collect();
            let mut s = c.clone();
            s.sort_by(f64::total_cmp);
            if s.windows(2).any(|w| w[1] - w[0] < 1e-3) {
                continue;
            }
            let r = soft_knn_from_distances(dv(&c), &params(2, 1e-3, 400)).unwrap();
            let support = r.gamma_raw.mapv(|g| if g > 0.5 { 1.0 } else { 0.0 });
            assert_eq!(support, hard_topk(&dv(&c), 2), "c = {c:?}");
            checked += 1;
        }
    }

    #[test]
    fn bregman_rejects_bad_kappa() {
        let lg = Array2::zeros((3, 2));
        assert!(bregman_projections(&lg, 0, 5, SinkhornInit::Uniform).is_err());
        assert!(bregman_projections(&lg, 3, 5, SinkhornInit::Uniform).is_err());
    }

    #[test]
    fn bregman_reports_degenerate_kernel() {
        let mut lg = Array2::zeros((3, 2));
        lg[[1, 0]] = f64::NEG_INFINITY;
        lg[[1, 1]] = f64::NEG_INFINITY;
        assert!(matches!(
            bregman_projections(&lg, 1, 5, SinkhornInit::Uniform),
            Err(DeeError::NumericalDegeneracy { iteration: 0, .. })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let r = soft_knn_from_distances(dv(&[0.1, 0.4, 0.7]), &params(1, 0.05, 50)).unwrap();
        let g = soft_knn_backward(&r, &Array1::zeros(3)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_wrong_length() {
        let r = soft_knn_from_distances(dv(&[0.1, 0.4, 0.7]), &params(1, 0.05, 50)).unwrap();
        assert!(matches!(soft_knn_backward(&r, &Array1::zeros(2)), Err(DeeError::ShapeMismatch(_))));
    }

    #[test]
    fn symmetric_instance_has_symmetric_gradient() {
        for init in [SinkhornInit::Uniform, SinkhornInit::DualRoot] {
            let p = SoftKnnParams { init, ..params(1, 0.05, 50) };
            let r = soft_knn_from_distances(dv(&[0.4, 0.4]), &p).unwrap();
            let g = soft_knn_backward_raw(&r, &array![1.0, 1.0]).unwrap();
            assert_abs_diff_eq!(g[0], g[1], epsilon = 1e-12);
            let g = soft_knn_backward_raw(&r, &array![0.3, -0.7]).unwrap();
            let r2 = soft_knn_from_distances(dv(&[0.4, 0.4]), &p).unwrap();
            let g2 = soft_knn_backward_raw(&r2, &array![-0.7, 0.3]).unwrap();
            assert_abs_diff_eq!(g[0], g2[1], epsilon = 1e-12);
        }
    }

    /// Central differences of the pre-threshold scores, independent of the backward pass.
    fn fd_jacobian(c: &[f64], p: &SoftKnnParams, h: f64) -> Array2<f64> {
        let n = c.len();
        let mut jac = Array2::zeros((n, n));
        for k in 0..n {
            let mut plus = c.to_vec();
            let mut minus = c.to_vec();
            plus[k] += h;
            minus[k] -= h;
            let gp = soft_knn_from_distances(dv(&plus), p).unwrap().gamma_raw;
            let gm = soft_knn_from_distances(dv(&minus), p).unwrap().gamma_raw;
            for i in 0..n {
                jac[[i, k]] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = seeded_rng(5);
        for init in [SinkhornInit::DualRoot, SinkhornInit::Uniform] {
            for _ in 0..5 {
                let c: Vec<f64> = (0..8).map(|_| 0.2 + 1.6 * uniform01(&mut rng)).collect();
                let p = SoftKnnParams { init, ..params(3, 0.05, 50) };
                let r = soft_knn_from_distances(dv(&c), &p).unwrap();
                let fd = fd_jacobian(&c, &p, 1e-6);
                for i in 0..8 {
                    let mut e = Array1::zeros(8);
                    e[i] = 1.0;
                    let row = soft_knn_backward_raw(&r, &e).unwrap();
                    for k in 0..8 {
                        let (a, f) = (row[k], fd[[i, k]]);
                        let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-4);
                        assert!(rel <= 1e-4, "{init:?} d gamma_{i} / d c_{k}: {a} vs {f}");
                    }
                }
            }
        }
    }

    #[test]
    fn repeated_tail_matches_fully_stored_iterations() {
        let mut rng = seeded_rng(6);
        let c: Vec<f64> = (0..16).map(|_| 2.0 * uniform01(&mut rng)).collect();
        let r = soft_knn_from_distances(dv(&c), &params(4, 5e-4, 400)).unwrap();
        let it = &r.iterates;
        assert!(it.log_p.len() < 400, "expected an early fixed point");
        assert_eq!(it.iterations(), 400);
        let mut full = r.clone();
        full.iterates.log_p = (0..400).map(|l| it.log_p_at(l).clone()).collect();
        full.iterates.log_q = (0..=400).map(|l| it.log_q_at(l)).collect();
        let g = Array1::from_shape_fn(16, |i| (i as f64 - 7.5) / 8.0);
        let a = soft_knn_backward_raw(&r, &g).unwrap();
        let b = soft_knn_backward_raw(&full, &g).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
