//! Dirichlet-evidential, uncertainty-weighted classification objective.
//!
//! Per sample with logits `z` and label `y`:
//!
//! ```text
//! e   = clip(softplus(z), 0, cap)      α = e + 1      α₀ = Σ α
//! data = ψ(α₀) − ψ(α_y)
//! kl   = KL[Dir(α) ‖ Dir(1)]
//! henn = data + λ_kl · kl
//! p    = softmax(z)                     u = 1 / (1 + Σ e)
//! ufce = −w_ufce · u · (1 − p_y)^u · log(p_y + ε)
//! ce   = −log(p_y + ε)
//! loss = henn + ufce + w_ce · ce
//! ```
//!
//! The batch loss is the mean over samples. `u` is differentiated through,
//! and the clip has zero subgradient at and above the cap.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    finite_difference_gradient, ln_gamma, psi, psi1, softplus, softplus_clipped, softplus_clipped_grad,
    stable_softmax, GradientCheckReport, Tensor, DEFAULT_STEP,
};
use crate::rng::{domain, keyed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha0: f64,
}

impl DirichletParams {
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 || alpha.iter().any(|&a| !a.is_finite() || a < 1.0) {
            return Err(Error::invalid("Dirichlet concentrations must be ≥ 1 with at least two classes"));
        }
        Ok(Self {
            evidence: alpha.iter().map(|a| a - 1.0).collect(),
            alpha0: alpha.iter().sum(),
            alpha,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y < self.num_classes() {
            Ok(())
        } else {
            Err(Error::invalid(format!("label {y} out of range for {} classes", self.num_classes())))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossHyperParams {
    pub lambda_kl: f64,
    pub w_ufce: f64,
    pub w_ce: f64,
    /// Weight on the evidential (data + KL) component; 0 turns the objective into plain CE.
    pub w_henn: f64,
    pub epsilon: f64,
    pub evidence_cap: f64,
    /// Linear warm-up length for `lambda_kl`; 0 keeps it constant.
    pub kl_anneal_epochs: usize,
}

impl Default for LossHyperParams {
    fn default() -> Self {
        Self {
            lambda_kl: 0.01,
            w_ufce: 1.0,
            w_ce: 1.0,
            w_henn: 1.0,
            epsilon: 1e-8,
            evidence_cap: 5.0,
            kl_anneal_epochs: 0,
        }
    }
}

impl LossHyperParams {
    /// Standard cross-entropy through the same code path.
    pub fn ce_only() -> Self {
        Self {
            lambda_kl: 0.0,
            w_ufce: 0.0,
            w_ce: 1.0,
            w_henn: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_kl, self.w_ufce, self.w_ce, self.w_henn, self.epsilon];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if self.evidence_cap.is_nan() || self.evidence_cap <= 0.0 {
            return Err(Error::invalid("evidence cap must be positive"));
        }
        Ok(())
    }

    /// Hyperparameters in effect during `epoch` (0-based), with the KL weight annealed.
    pub fn at_epoch(&self, epoch: usize) -> Self {
        let mut out = self.clone();
        if self.kl_anneal_epochs > 0 {
            let ramp = ((epoch + 1) as f64 / self.kl_anneal_epochs as f64).min(1.0);
            out.lambda_kl = self.lambda_kl * ramp;
        }
        out
    }
}

pub fn evidence_and_alpha(logits: &[f64], cap: f64) -> DirichletParams {
    let evidence = softplus_clipped(logits, cap);
    let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
    DirichletParams {
        alpha0: alpha.iter().sum(),
        evidence,
        alpha,
    }
}

/// `ψ(α₀) − ψ(α_y)`.
pub fn evidential_data_term(params: &DirichletParams, y: usize) -> Result<f64> {
    params.check_label(y)?;
    Ok(psi(params.alpha0) - psi(params.alpha[y]))
}

/// Closed-form `KL[Dir(α) ‖ Dir(1, …, 1)]`.
pub fn dirichlet_kl_to_uniform(params: &DirichletParams) -> f64 {
    let c = params.num_classes() as f64;
    let psi0 = psi(params.alpha0);
    let mut kl = ln_gamma(params.alpha0) - ln_gamma(c);
    for &a in &params.alpha {
        kl += (a - 1.0) * (psi(a) - psi0) - ln_gamma(a);
    }
    // the closed form can dip a few ulps below zero next to α = 1
    kl.max(0.0)
}

pub fn henn_loss(params: &DirichletParams, y: usize, lambda_kl: f64) -> Result<f64> {
    Ok(evidential_data_term(params, y)? + lambda_kl * dirichlet_kl_to_uniform(params))
}

/// `u = 1 / (1 + Σ e)`.
pub fn uncertainty_weight(params: &DirichletParams) -> f64 {
    1.0 / (1.0 + params.evidence.iter().sum::<f64>())
}

fn check_label(logits: &[f64], y: usize) -> Result<()> {
    if y < logits.len() {
        Ok(())
    } else {
        Err(Error::invalid(format!("label {y} out of range for {} classes", logits.len())))
    }
}

/// `1 − p_y` summed from the other classes, which keeps precision when `p_y → 1`.
fn complement(p: &[f64], y: usize) -> f64 {
    p.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, v)| v).sum()
}

pub fn ufce_term(logits: &[f64], y: usize, hyper: &LossHyperParams) -> Result<f64> {
    check_label(logits, y)?;
    if hyper.w_ufce == 0.0 {
        return Ok(0.0);
    }
    let u = uncertainty_weight(&evidence_and_alpha(logits, hyper.evidence_cap));
    let p = stable_softmax(logits);
    let q = complement(&p, y);
    Ok(-hyper.w_ufce * u * q.powf(u) * (p[y] + hyper.epsilon).ln())
}

pub fn ce_term(logits: &[f64], y: usize, epsilon: f64) -> Result<f64> {
    check_label(logits, y)?;
    Ok(-(stable_softmax(logits)[y] + epsilon).ln())
}

/// Per-sample loss terms, each before batch averaging.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLosses {
    pub data_term: Vec<f64>,
    pub kl_term: Vec<f64>,
    /// Weighted evidential contribution `w_henn · (data + λ·kl)`.
    pub henn: Vec<f64>,
    pub ufce: Vec<f64>,
    pub ce: Vec<f64>,
    pub total: Vec<f64>,
}

/// Batch means of every loss term, plus the per-sample values they came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_term: f64,
    pub kl_term: f64,
    pub henn: f64,
    pub ufce: f64,
    pub ce: f64,
    pub total: f64,
    pub per_sample: SampleLosses,
}

fn check_batch(batch_logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = batch_logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "combined_loss",
            left: shape.to_vec(),
            right: vec![labels.len()],
        });
    }
    if shape[1] < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", shape[1])));
    }
    Ok((shape[0], shape[1]))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn combined_loss(batch_logits: &Tensor, labels: &[usize], hyper: &LossHyperParams) -> Result<LossBreakdown> {
    let (b, _) = check_batch(batch_logits, labels)?;
    let mut s = SampleLosses::default();
    for (i, &y) in labels.iter().enumerate() {
        let z = batch_logits.row(i);
        let params = evidence_and_alpha(z, hyper.evidence_cap);
        let data = evidential_data_term(&params, y)?;
        let kl = dirichlet_kl_to_uniform(&params);
        let henn = hyper.w_henn * (data + hyper.lambda_kl * kl);
        let ufce = ufce_term(z, y, hyper)?;
        let ce = ce_term(z, y, hyper.epsilon)?;
        s.data_term.push(data);
        s.kl_term.push(kl);
        s.henn.push(henn);
        s.ufce.push(ufce);
        s.ce.push(ce);
        s.total.push(henn + ufce + hyper.w_ce * ce);
    }
    debug_assert_eq!(s.total.len(), b);
    Ok(LossBreakdown {
        data_term: mean(&s.data_term),
        kl_term: mean(&s.kl_term),
        henn: mean(&s.henn),
        ufce: mean(&s.ufce),
        ce: mean(&s.ce),
        total: mean(&s.total),
        per_sample: s,
    })
}

/// Gradient of one sample's loss, split by the route it takes to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradient {
    /// Through `e` (data, KL and the uncertainty weight).
    pub evidence_path: Vec<f64>,
    /// Through `p = softmax(z)` (UFCE and CE).
    pub softmax_path: Vec<f64>,
}

impl SampleGradient {
    pub fn total(&self) -> Vec<f64> {
        self.evidence_path.iter().zip(&self.softmax_path).map(|(a, b)| a + b).collect()
    }
}

pub fn sample_gradient(z: &[f64], y: usize, hyper: &LossHyperParams) -> Result<SampleGradient> {
    check_label(z, y)?;
    let c = z.len();
    let params = evidence_and_alpha(z, hyper.evidence_cap);
    let u = uncertainty_weight(&params);
    let p = stable_softmax(z);
    let q = complement(&p, y);
    let py_eps = p[y] + hyper.epsilon;
    let nll = -py_eps.ln();

    // F(u, p_y) = u · q^u · nll, with q = 1 − p_y
    let q_pow_u = if q > 0.0 { q.powf(u) } else { 0.0 };
    let df_du = if q > 0.0 { q_pow_u * nll * (1.0 + u * q.ln()) } else { 0.0 };
    let df_dpy = if q > 0.0 {
        -u * u * q_pow_u / q * nll - u * q_pow_u / py_eps
    } else {
        -u * q_pow_u / py_eps
    };

    let psi1_alpha0 = psi1(params.alpha0);
    let excess = params.alpha0 - c as f64;
    let mut evidence_path = vec![0.0; c];
    for (k, g) in evidence_path.iter_mut().enumerate() {
        let slope = softplus_clipped_grad(z[k], hyper.evidence_cap);
        if slope == 0.0 {
            continue;
        }
        let a = params.alpha[k];
        let mut d_data = psi1_alpha0;
        if k == y {
            d_data -= psi1(a);
        }
        let d_kl = (a - 1.0) * psi1(a) - excess * psi1_alpha0;
        let d_u = -u * u;
        let de = hyper.w_henn * (d_data + hyper.lambda_kl * d_kl) + hyper.w_ufce * df_du * d_u;
        *g = de * slope;
    }

    let dl_dpy = hyper.w_ufce * df_dpy - hyper.w_ce / py_eps;
    let softmax_path = (0..c)
        .map(|j| {
            let dpy_dzj = p[y] * (if j == y { 1.0 } else { 0.0 } - p[j]);
            dl_dpy * dpy_dzj
        })
        .collect();
    Ok(SampleGradient {
        evidence_path,
        softmax_path,
    })
}

/// Gradient of the batch-mean loss with respect to the `B × C` logits.
pub fn loss_gradient(batch_logits: &Tensor, labels: &[usize], hyper: &LossHyperParams) -> Result<Tensor> {
    let (b, c) = check_batch(batch_logits, labels)?;
    let mut grad = Tensor::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        let g = sample_gradient(batch_logits.row(i), y, hyper)?.total();
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = v / b as f64;
        }
    }
    Ok(grad)
}

/// Whether any logit sits within `margin` of the evidence cap's kink.
pub fn near_cap_boundary(logits: &[f64], cap: f64, margin: f64) -> bool {
    logits.iter().any(|&z| (softplus(z) - cap).abs() < margin)
}

/// Compares [`loss_gradient`] with central differences on random batches.
///
/// Each trial draws `C ∈ {2..6}`, a batch of 1–3 samples with `N(0, 2.5²)`
/// logits, random labels and random loss weights. Trials with a logit within
/// `10·h` of the cap kink are skipped.
pub fn run_gradcheck(trials: usize, seed: u64) -> Result<GradientCheckReport> {
    let h = DEFAULT_STEP;
    let mut report = GradientCheckReport::default();
    for trial in 0..trials {
        let mut rng = keyed(seed, &[domain::GRADCHECK, trial as u64]);
        let c = rng.gen_range(2..=6);
        let b = rng.gen_range(1..=3);
        let logits: Vec<f64> = (0..b * c).map(|_| 2.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let hyper = LossHyperParams {
            lambda_kl: rng.gen_range(0.0..1.0),
            w_ufce: rng.gen_range(0.0..2.0),
            w_ce: rng.gen_range(0.0..2.0),
            ..LossHyperParams::default()
        };
        if near_cap_boundary(&logits, hyper.evidence_cap, 10.0 * h) {
            report.skip();
            continue;
        }
        let z = Tensor::matrix(b, c, logits.clone())?;
        let analytic = loss_gradient(&z, &labels, &hyper)?;
        let numeric = finite_difference_gradient(
            |x: &[f64]| combined_loss(&Tensor::matrix(b, c, x.to_vec())?, &labels, &hyper).map(|l| l.total),
            &logits,
            h,
        )?;
        report.record(analytic.data(), &numeric);
    }
    if report.num_points_checked == 0 {
        return Err(Error::invalid("every gradient-check trial was skipped"));
    }
    Ok(report)
}
