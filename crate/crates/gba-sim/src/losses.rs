//! Pretraining objectives: image-text contrastive (ITC), cross-modal masked
//! image modeling (CMIM), cross-modal masked language modeling (CMLM), and
//! their weighted combination. Each forward pass also returns analytic
//! gradients with respect to every differentiable input.
//!
//! The ITC term is the standard symmetric InfoNCE negative log-likelihood:
//! one softmax over text candidates per image and one over image candidates
//! per text, averaged and negated so the value is non-negative and decreases
//! as pairs align.

use crate::error::{Result, SimError};
use crate::numerics::{l2_normalize_rows, log_softmax_rows, matmul, softmax_rows, Matrix};

/// Paired image/text embedding rows for one micro-batch. Row `i` of each side
/// belongs to the same pair.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub v_cls: Matrix,
    pub t_cls: Matrix,
}

impl EmbeddingBatch {
    pub fn new(v_cls: Matrix, t_cls: Matrix) -> Result<Self> {
        if v_cls.rows() != t_cls.rows() || v_cls.cols() != t_cls.cols() {
            return Err(SimError::DimensionMismatch {
                left_rows: v_cls.rows(),
                left_cols: v_cls.cols(),
                right_rows: t_cls.rows(),
                right_cols: t_cls.cols(),
            });
        }
        Ok(Self { v_cls, t_cls })
    }

    pub fn len(&self) -> usize {
        self.v_cls.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learnable softmax temperature, held in log space so gradient steps cannot
/// push it non-positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    log_tau: f64,
}

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1e2;

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(SimError::InvalidArgument {
                arg: "tau",
                reason: format!("must be positive and finite, got {tau}"),
            });
        }
        Ok(Self { log_tau: tau.ln() })
    }

    pub fn from_log(log_tau: f64) -> Self {
        Self { log_tau }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }

    /// Apply a log-space delta and clamp tau into `[TAU_MIN, TAU_MAX]`.
    pub fn updated(&self, delta_log_tau: f64) -> Temperature {
        let log_tau = (self.log_tau + delta_log_tau)
            .max(TAU_MIN.ln())
            .min(TAU_MAX.ln());
        Temperature { log_tau }
    }
}

impl Default for Temperature {
    fn default() -> Self {
        // CLIP-style init
        Temperature::new(0.07).unwrap()
    }
}

/// ITC forward value plus gradients for both embedding stacks and log tau.
#[derive(Debug, Clone)]
pub struct ItcLossResult {
    pub value: f64,
    pub grad_v: Matrix,
    pub grad_t: Matrix,
    pub grad_log_tau: f64,
}

/// Masked-patch reconstruction target: original and reconstructed pixel
/// values for the M masked patches, P pixels each.
#[derive(Debug, Clone)]
pub struct MaskedImageTarget {
    pub x: Matrix,
    pub x_hat: Matrix,
}

impl MaskedImageTarget {
    pub fn new(x: Matrix, x_hat: Matrix) -> Result<Self> {
        if x.rows() != x_hat.rows() || x.cols() != x_hat.cols() {
            return Err(SimError::DimensionMismatch {
                left_rows: x.rows(),
                left_cols: x.cols(),
                right_rows: x_hat.rows(),
                right_cols: x_hat.cols(),
            });
        }
        Ok(Self { x, x_hat })
    }
}

#[derive(Debug, Clone)]
pub struct CmimLossResult {
    pub value: f64,
    pub grad_x_hat: Matrix,
}

/// Masked-token prediction target: one logit row per masked token over a
/// vocabulary of size Q, plus the true class index per token.
#[derive(Debug, Clone)]
pub struct MaskedTextTarget {
    pub logits: Matrix,
    pub labels: Vec<usize>,
}

impl MaskedTextTarget {
    pub fn new(logits: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != logits.rows() {
            return Err(SimError::InvalidArgument {
                arg: "labels",
                reason: format!(
                    "expected {} labels for {} logit rows",
                    logits.rows(),
                    labels.len()
                ),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
            return Err(SimError::InvalidArgument {
                arg: "labels",
                reason: format!("label {bad} out of range for vocabulary {}", logits.cols()),
            });
        }
        Ok(Self { logits, labels })
    }
}

#[derive(Debug, Clone)]
pub struct CmlmLossResult {
    pub value: f64,
    pub grad_logits: Matrix,
}

/// Balance coefficients for the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 {
            return Err(SimError::InvalidArgument {
                arg: "loss weights",
                reason: format!("alpha and beta must be non-negative, got ({alpha}, {beta})"),
            });
        }
        Ok(Self { alpha, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.3,
        }
    }
}

/// Combined objective: ITC + alpha * CMIM + beta * CMLM, with the component
/// gradients rescaled by the same coefficients.
#[derive(Debug, Clone)]
pub struct OverallLossResult {
    pub value: f64,
    pub grad_v: Matrix,
    pub grad_t: Matrix,
    pub grad_log_tau: f64,
    pub grad_x_hat: Matrix,
    pub grad_logits: Matrix,
}

/// Symmetric InfoNCE over paired embeddings.
///
/// With `normalize` on, both stacks are L2-normalized row-wise before the
/// inner products; gradients are with respect to the raw (pre-normalization)
/// inputs.
pub fn itc_loss(
    batch: &EmbeddingBatch,
    temp: Temperature,
    normalize: bool,
) -> Result<ItcLossResult> {
    let n = batch.len();
    if n == 0 {
        return Err(SimError::InvalidArgument {
            arg: "batch",
            reason: "empty embedding batch".to_string(),
        });
    }
    if !batch.v_cls.is_finite() || !batch.t_cls.is_finite() {
        return Err(SimError::NonFinite {
            context: "itc_loss embeddings".to_string(),
        });
    }

    let (u, w) = if normalize {
        (
            l2_normalize_rows(&batch.v_cls)?,
            l2_normalize_rows(&batch.t_cls)?,
        )
    } else {
        (batch.v_cls.clone(), batch.t_cls.clone())
    };

    let tau = temp.tau();
    let sims = matmul(&u, &w.transpose())?;
    let logits = sims.scale(1.0 / tau);

    let ls_rows = log_softmax_rows(&logits)?;
    let ls_cols = log_softmax_rows(&logits.transpose())?;
    let mut value = 0.0;
    for i in 0..n {
        value -= ls_rows.get(i, i) + ls_cols.get(i, i);
    }
    value /= 2.0 * n as f64;

    // dLoss/dLogits = (A + B^T)/2N - I/N, with A the row softmax of the
    // logits and B the row softmax of their transpose.
    let a = softmax_rows(&logits)?;
    let b = softmax_rows(&logits.transpose())?;
    let inv_2n = 1.0 / (2.0 * n as f64);
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut v = (a.get(i, j) + b.get(j, i)) * inv_2n;
            if i == j {
                v -= 1.0 / n as f64;
            }
            g.set(i, j, v);
        }
    }

    // grad wrt log tau: logits = sims * exp(-log_tau), so
    // d/d(log_tau) = -sum_ij G_ij * logits_ij.
    let mut grad_log_tau = 0.0;
    for i in 0..n {
        for j in 0..n {
            grad_log_tau -= g.get(i, j) * logits.get(i, j);
        }
    }

    // Back to the (possibly normalized) embeddings.
    let grad_u = matmul(&g, &w)?.scale(1.0 / tau);
    let grad_w = matmul(&g.transpose(), &u)?.scale(1.0 / tau);

    let (grad_v, grad_t) = if normalize {
        (
            normalize_backward(&batch.v_cls, &u, &grad_u),
            normalize_backward(&batch.t_cls, &w, &grad_w),
        )
    } else {
        (grad_u, grad_w)
    };

    Ok(ItcLossResult {
        value,
        grad_v,
        grad_t,
        grad_log_tau,
    })
}

/// Gradient of row normalization: for u = v/|v|, maps dL/du to
/// dL/dv = (g - (g.u) u) / |v|.
fn normalize_backward(raw: &Matrix, unit: &Matrix, grad_unit: &Matrix) -> Matrix {
    let rows = raw.rows();
    let cols = raw.cols();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let norm = raw.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = grad_unit
            .row(r)
            .iter()
            .zip(unit.row(r))
            .map(|(g, u)| g * u)
            .sum();
        for c in 0..cols {
            let g = grad_unit.get(r, c) - dot * unit.get(r, c);
            out.set(r, c, g / norm);
        }
    }
    out
}

/// Mean over masked patches of the per-patch sum of squared pixel errors.
pub fn cmim_loss(target: &MaskedImageTarget) -> Result<CmimLossResult> {
    let m = target.x.rows();
    if m == 0 {
        return Err(SimError::InvalidArgument {
            arg: "target",
            reason: "no masked patches".to_string(),
        });
    }
    let m_f = m as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(m, target.x.cols());
    for r in 0..m {
        for c in 0..target.x.cols() {
            let diff = target.x_hat.get(r, c) - target.x.get(r, c);
            value += diff * diff;
            grad.set(r, c, 2.0 * diff / m_f);
        }
    }
    Ok(CmimLossResult {
        value: value / m_f,
        grad_x_hat: grad,
    })
}

/// Mean cross-entropy over masked tokens with a stable softmax.
pub fn cmlm_loss(target: &MaskedTextTarget) -> Result<CmlmLossResult> {
    let n = target.logits.rows();
    if n == 0 {
        return Err(SimError::InvalidArgument {
            arg: "target",
            reason: "no masked tokens".to_string(),
        });
    }
    let n_f = n as f64;
    let ls = log_softmax_rows(&target.logits)?;
    let probs = softmax_rows(&target.logits)?;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, target.logits.cols());
    for r in 0..n {
        value -= ls.get(r, target.labels[r]);
        for c in 0..target.logits.cols() {
            let one_hot = if c == target.labels[r] { 1.0 } else { 0.0 };
            grad.set(r, c, (probs.get(r, c) - one_hot) / n_f);
        }
    }
    Ok(CmlmLossResult {
        value: value / n_f,
        grad_logits: grad,
    })
}

/// Weighted sum of the three objectives; gradients carry the same weights.
pub fn overall_loss(
    itc: &ItcLossResult,
    cmim: &CmimLossResult,
    cmlm: &CmlmLossResult,
    w: LossWeights,
) -> Result<OverallLossResult> {
    // LossWeights::new already rejects negatives; re-check in case the struct
    // was built literally.
    if w.alpha < 0.0 || w.beta < 0.0 {
        return Err(SimError::InvalidArgument {
            arg: "loss weights",
            reason: format!(
                "alpha and beta must be non-negative, got ({}, {})",
                w.alpha, w.beta
            ),
        });
    }
    Ok(OverallLossResult {
        value: itc.value + w.alpha * cmim.value + w.beta * cmlm.value,
        grad_v: itc.grad_v.clone(),
        grad_t: itc.grad_t.clone(),
        grad_log_tau: itc.grad_log_tau,
        grad_x_hat: cmim.grad_x_hat.scale(w.alpha),
        grad_logits: cmlm.grad_logits.scale(w.beta),
    })
}


#[cfg(test)]
mod tests {
    use super::grad_check::max_rel_err;
    use super::*;
    use crate::numerics::Rng;

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> EmbeddingBatch {
        EmbeddingBatch::new(
            rng.gaussian(n, d, 1.0).unwrap(),
            rng.gaussian(n, d, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn itc_value(v: &Matrix, t: &Matrix, log_tau: f64, normalize: bool) -> f64 {
        let batch = EmbeddingBatch::new(v.clone(), t.clone()).unwrap();
        itc_loss(&batch, Temperature::from_log(log_tau), normalize)
            .unwrap()
            .value
    }

    #[test]
    fn itc_single_pair_is_zero() {
        let batch = EmbeddingBatch::new(
            Matrix::new(1, 3, vec![0.3, -0.2, 0.9]).unwrap(),
            Matrix::new(1, 3, vec![1.0, 0.5, -0.1]).unwrap(),
        )
        .unwrap();
        let res = itc_loss(&batch, Temperature::default(), true).unwrap();
        assert!(res.value.abs() < 1e-15);
        assert!(res.grad_v.data().iter().all(|g| g.abs() < 1e-15));
        assert!(res.grad_t.data().iter().all(|g| g.abs() < 1e-15));
        assert!(res.grad_log_tau.abs() < 1e-15);
    }

    #[test]
    fn itc_identity_rows_matches_hand_value() {
        // V = T = 2x2 identity, tau = 1, no normalization:
        // logits rows are [1,0] / [0,1]; each diagonal log-softmax is
        // log(e/(e+1)); four identical terms.
        let eye = Matrix::identity(2);
        let batch = EmbeddingBatch::new(eye.clone(), eye).unwrap();
        let res = itc_loss(&batch, Temperature::new(1.0).unwrap(), false).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((res.value - expect).abs() < 1e-12, "value {}", res.value);
        assert!((res.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn itc_gradients_match_finite_differences() {
        for (seed, normalize) in [(1u64, false), (2, true), (3, true), (4, false)] {
            let mut rng = Rng::from_seed(seed);
            let batch = random_batch(&mut rng, 4, 8);
            let log_tau = Temperature::default().log_tau();
            let res = itc_loss(&batch, Temperature::from_log(log_tau), normalize).unwrap();

            let v_err = max_rel_err(batch.v_cls.data(), res.grad_v.data(), |p| {
                let v = Matrix::new(4, 8, p.to_vec()).unwrap();
                itc_value(&v, &batch.t_cls, log_tau, normalize)
            });
            let t_err = max_rel_err(batch.t_cls.data(), res.grad_t.data(), |p| {
                let t = Matrix::new(4, 8, p.to_vec()).unwrap();
                itc_value(&batch.v_cls, &t, log_tau, normalize)
            });
            let tau_err = max_rel_err(&[log_tau], &[res.grad_log_tau], |p| {
                itc_value(&batch.v_cls, &batch.t_cls, p[0], normalize)
            });
            assert!(v_err < 1e-5, "seed {seed}: v err {v_err}");
            assert!(t_err < 1e-5, "seed {seed}: t err {t_err}");
            assert!(tau_err < 1e-5, "seed {seed}: tau err {tau_err}");
        }
    }

    #[test]
    fn itc_rejects_empty_and_non_finite() {
        let batch = EmbeddingBatch::new(Matrix::zeros(0, 4), Matrix::zeros(0, 4)).unwrap();
        assert!(itc_loss(&batch, Temperature::default(), false).is_err());

        let batch = EmbeddingBatch::new(
            Matrix::new(1, 2, vec![f64::INFINITY, 0.0]).unwrap(),
            Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert!(itc_loss(&batch, Temperature::default(), false).is_err());
    }

    #[test]
    fn itc_permutation_invariant() {
        let mut rng = Rng::from_seed(21);
        let batch = random_batch(&mut rng, 5, 6);
        let base = itc_loss(&batch, Temperature::default(), true)
            .unwrap()
            .value;
        let perm = [3usize, 0, 4, 1, 2];
        let v = Matrix::from_rows(&perm.map(|i| batch.v_cls.row(i).to_vec())).unwrap();
        let t = Matrix::from_rows(&perm.map(|i| batch.t_cls.row(i).to_vec())).unwrap();
        let permuted = itc_loss(
            &EmbeddingBatch::new(v, t).unwrap(),
            Temperature::default(),
            true,
        )
        .unwrap()
        .value;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn itc_scale_invariant_when_normalized() {
        let mut rng = Rng::from_seed(22);
        let batch = random_batch(&mut rng, 4, 5);
        let base = itc_loss(&batch, Temperature::default(), true)
            .unwrap()
            .value;
        let mut v = batch.v_cls.clone();
        for r in 0..v.rows() {
            let s = 0.5 + r as f64;
            for c in 0..v.cols() {
                v.set(r, c, batch.v_cls.get(r, c) * s);
            }
        }
        let scaled = itc_loss(
            &EmbeddingBatch::new(v, batch.t_cls.clone()).unwrap(),
            Temperature::default(),
            true,
        )
        .unwrap()
        .value;
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn cmim_perfect_reconstruction_is_zero() {
        let x = Rng::from_seed(1).gaussian(3, 5, 1.0).unwrap();
        let res = cmim_loss(&MaskedImageTarget::new(x.clone(), x).unwrap()).unwrap();
        assert_eq!(res.value, 0.0);
        assert!(res.grad_x_hat.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn cmim_uniform_error_hand_value() {
        let x = Matrix::zeros(1, 4);
        let x_hat = Matrix::new(1, 4, vec![0.5; 4]).unwrap();
        let res = cmim_loss(&MaskedImageTarget::new(x, x_hat).unwrap()).unwrap();
        assert!((res.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cmim_gradient_matches_finite_differences() {
        let mut rng = Rng::from_seed(31);
        let x = rng.gaussian(3, 6, 1.0).unwrap();
        let x_hat = rng.gaussian(3, 6, 1.0).unwrap();
        let res = cmim_loss(&MaskedImageTarget::new(x.clone(), x_hat.clone()).unwrap()).unwrap();
        let err = max_rel_err(x_hat.data(), res.grad_x_hat.data(), |p| {
            let xh = Matrix::new(3, 6, p.to_vec()).unwrap();
            cmim_loss(&MaskedImageTarget::new(x.clone(), xh).unwrap())
                .unwrap()
                .value
        });
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn cmim_rejects_empty() {
        let t = MaskedImageTarget::new(Matrix::zeros(0, 4), Matrix::zeros(0, 4)).unwrap();
        assert!(cmim_loss(&t).is_err());
    }

    #[test]
    fn cmlm_uniform_logits_is_ln_q() {
        let t = MaskedTextTarget::new(Matrix::zeros(3, 4), vec![0, 1, 3]).unwrap();
        let res = cmlm_loss(&t).unwrap();
        assert!((res.value - (4.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cmlm_confident_correct_approaches_zero() {
        let mut prev = f64::INFINITY;
        for margin in [5.0, 20.0, 100.0] {
            let mut logits = Matrix::zeros(2, 3);
            logits.set(0, 1, margin);
            logits.set(1, 2, margin);
            let res = cmlm_loss(&MaskedTextTarget::new(logits, vec![1, 2]).unwrap()).unwrap();
            assert!(res.value < prev);
            prev = res.value;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn cmlm_gradient_matches_finite_differences() {
        let mut rng = Rng::from_seed(41);
        let logits = rng.gaussian(5, 11, 1.5).unwrap();
        let labels: Vec<usize> = (0..5).map(|_| rng.below(11)).collect();
        let res =
            cmlm_loss(&MaskedTextTarget::new(logits.clone(), labels.clone()).unwrap()).unwrap();
        let err = max_rel_err(logits.data(), res.grad_logits.data(), |p| {
            let l = Matrix::new(5, 11, p.to_vec()).unwrap();
            cmlm_loss(&MaskedTextTarget::new(l, labels.clone()).unwrap())
                .unwrap()
                .value
        });
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn cmlm_rejects_bad_labels_and_empty() {
        assert!(MaskedTextTarget::new(Matrix::zeros(2, 3), vec![0, 3]).is_err());
        let t = MaskedTextTarget::new(Matrix::zeros(0, 3), vec![]).unwrap();
        assert!(cmlm_loss(&t).is_err());
    }

    fn dummy_components(
        itc_v: f64,
        cmim_v: f64,
        cmlm_v: f64,
    ) -> (ItcLossResult, CmimLossResult, CmlmLossResult) {
        (
            ItcLossResult {
                value: itc_v,
                grad_v: Matrix::zeros(1, 1),
                grad_t: Matrix::zeros(1, 1),
                grad_log_tau: 0.0,
            },
            CmimLossResult {
                value: cmim_v,
                grad_x_hat: Matrix::new(1, 1, vec![1.0]).unwrap(),
            },
            CmlmLossResult {
                value: cmlm_v,
                grad_logits: Matrix::new(1, 1, vec![1.0]).unwrap(),
            },
        )
    }

    #[test]
    fn overall_zero_weights_is_itc() {
        let (itc, cmim, cmlm) = dummy_components(1.7, 2.0, 3.0);
        let res = overall_loss(&itc, &cmim, &cmlm, LossWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(res.value, 1.7);
        assert_eq!(res.grad_x_hat.data(), &[0.0]);
        assert_eq!(res.grad_logits.data(), &[0.0]);
    }

    #[test]
    fn overall_default_weights_hand_value() {
        let (itc, cmim, cmlm) = dummy_components(1.0, 2.0, 3.0);
        let res = overall_loss(&itc, &cmim, &cmlm, LossWeights::default()).unwrap();
        assert!((res.value - 2.5).abs() < 1e-12);
    }

    #[test]
    fn overall_linear_in_alpha() {
        let (itc, cmim, cmlm) = dummy_components(1.0, 2.0, 3.0);
        let a = overall_loss(&itc, &cmim, &cmlm, LossWeights::new(0.2, 0.0).unwrap()).unwrap();
        let b = overall_loss(&itc, &cmim, &cmlm, LossWeights::new(0.4, 0.0).unwrap()).unwrap();
        assert!(((b.value - itc.value) - 2.0 * (a.value - itc.value)).abs() < 1e-12);
    }

    #[test]
    fn overall_rejects_negative_weights() {
        assert!(LossWeights::new(-0.1, 0.0).is_err());
        let (itc, cmim, cmlm) = dummy_components(1.0, 2.0, 3.0);
        let w = LossWeights {
            alpha: -1.0,
            beta: 0.0,
        };
        assert!(overall_loss(&itc, &cmim, &cmlm, w).is_err());
    }
}
