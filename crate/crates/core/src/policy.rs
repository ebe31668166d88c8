//! Factorized Beta distribution over time-frequency masks.
//!
//! Every bin carries an independent `Beta(alpha, beta)`. Masks proposed by
//! the separator are turned into a policy with
//! `alpha = 1 + kappa p`, `beta = 1 + kappa (1 - p)`, so each marginal has its
//! mode at the proposal `p` and `kappa` sets how tightly samples concentrate
//! around it. Densities, entropies and divergences are summed over bins.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, gamma_family, ln_beta, ln_gamma, trigamma};

/// Samples are clamped to `[SAMPLE_CLAMP, 1 - SAMPLE_CLAMP]`.
pub const SAMPLE_CLAMP: f64 = 1e-5;

/// Shape of a mask tensor: frequency bins x frames x target sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub freqs: usize,
    pub frames: usize,
    pub sources: usize,
}

impl TensorShape {
    pub fn new(freqs: usize, frames: usize, sources: usize) -> Self {
        Self {
            freqs,
            frames,
            sources,
        }
    }

    pub fn len(&self) -> usize {
        self.freqs * self.frames * self.sources
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(f, t, k)`; sources vary fastest.
    pub fn index(&self, f: usize, t: usize, k: usize) -> usize {
        (f * self.frames + t) * self.sources + k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaPolicyParams {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    kappa: Option<f64>,
    shape: TensorShape,
}

impl BetaPolicyParams {
    /// General per-bin parameters; both must be positive and finite.
    pub fn from_alpha_beta(alpha: Vec<f64>, beta: Vec<f64>, shape: TensorShape) -> Result<Self> {
        if alpha.len() != shape.len() || beta.len() != shape.len() {
            return Err(Error::shape(
                shape.len(),
                format!("alpha {} / beta {}", alpha.len(), beta.len()),
            ));
        }
        if alpha
            .iter()
            .chain(&beta)
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::invalid("Beta parameters must be positive and finite"));
        }
        Ok(Self {
            alpha,
            beta,
            kappa: None,
            shape,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Concentration used to build these parameters, if they came from a proposal.
    pub fn kappa(&self) -> Option<f64> {
        self.kappa
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    /// Per-bin mode; defined where both parameters exceed one.
    pub fn mode(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| (a - 1.0) / (a + b - 2.0))
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| a / (a + b))
            .collect()
    }
}

/// `alpha = 1 + kappa p`, `beta = 1 + kappa (1 - p)`.
pub fn params_from_proposal(p: &[f64], shape: TensorShape, kappa: f64) -> Result<BetaPolicyParams> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::invalid(format!("kappa must be positive, got {kappa}")));
    }
    if p.len() != shape.len() {
        return Err(Error::shape(shape.len(), p.len()));
    }
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("proposal entry {v} outside [0, 1]")));
    }
    Ok(BetaPolicyParams {
        alpha: p.iter().map(|&p| 1.0 + kappa * p).collect(),
        beta: p.iter().map(|&p| 1.0 + kappa * (1.0 - p)).collect(),
        kappa: Some(kappa),
        shape,
    })
}

/// A mask drawn from the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub mask: Vec<f64>,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Draws one mask, bin by bin in flat order, as `X / (X + Y)` with
/// `X ~ Gamma(alpha)`, `Y ~ Gamma(beta)`, clamped to
/// `[SAMPLE_CLAMP, 1 - SAMPLE_CLAMP]`.
pub fn sample_mask<R: Rng + ?Sized>(params: &BetaPolicyParams, rng: &mut R) -> Vec<f64> {
    params
        .alpha
        .iter()
        .zip(&params.beta)
        .map(|(&a, &b)| {
            let x = Gamma::new(a, 1.0).expect("validated shape").sample(rng);
            let y = Gamma::new(b, 1.0).expect("validated shape").sample(rng);
            let m = if x + y > 0.0 { x / (x + y) } else { 0.5 };
            m.clamp(SAMPLE_CLAMP, 1.0 - SAMPLE_CLAMP)
        })
        .collect()
}

/// [`sample_mask`] plus the sample's log density and the policy entropy.
pub fn sample<R: Rng + ?Sized>(params: &BetaPolicyParams, rng: &mut R) -> PolicySample {
    let mask = sample_mask(params, rng);
    let log_prob = log_prob(params, &mask).expect("clamped sample lies inside (0, 1)");
    PolicySample {
        entropy: entropy(params),
        log_prob,
        mask,
    }
}

fn check_mask(params: &BetaPolicyParams, mask: &[f64]) -> Result<()> {
    if mask.len() != params.shape.len() {
        return Err(Error::shape(params.shape.len(), mask.len()));
    }
    if let Some(m) = mask.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
        return Err(Error::invalid(format!(
            "mask value {m} not strictly inside (0, 1); clamp before scoring"
        )));
    }
    Ok(())
}

/// Per-bin log densities.
pub fn log_prob_bins(params: &BetaPolicyParams, mask: &[f64]) -> Result<Vec<f64>> {
    check_mask(params, mask)?;
    Ok(params
        .alpha
        .iter()
        .zip(&params.beta)
        .zip(mask)
        .map(|((&a, &b), &m)| (a - 1.0) * m.ln() + (b - 1.0) * (-m).ln_1p() - ln_beta(a, b))
        .collect())
}

/// Total log density of `mask`, summed over bins.
pub fn log_prob(params: &BetaPolicyParams, mask: &[f64]) -> Result<f64> {
    Ok(log_prob_bins(params, mask)?.iter().sum())
}

fn bin_entropy(a: f64, b: f64) -> f64 {
    ln_beta(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
        + (a + b - 2.0) * digamma(a + b)
}

/// Differential entropy summed over bins.
pub fn entropy(params: &BetaPolicyParams) -> f64 {
    params
        .alpha
        .iter()
        .zip(&params.beta)
        .map(|(&a, &b)| bin_entropy(a, b))
        .sum()
}

fn bin_kl(ap: f64, bp: f64, aq: f64, bq: f64) -> f64 {
    let s = digamma(ap + bp);
    ln_beta(aq, bq) - ln_beta(ap, bp)
        + (ap - aq) * digamma(ap)
        + (bp - bq) * digamma(bp)
        + (aq - ap + bq - bp) * s
}

/// `KL(p || q)` summed over bins, closed form.
pub fn kl_divergence(p: &BetaPolicyParams, q: &BetaPolicyParams) -> Result<f64> {
    if p.shape != q.shape {
        return Err(Error::shape(format!("{:?}", p.shape), format!("{:?}", q.shape)));
    }
    let kl: f64 = (0..p.alpha.len())
        .map(|i| bin_kl(p.alpha[i], p.beta[i], q.alpha[i], q.beta[i]))
        .sum();
    // rounding can leave a tiny negative value at p == q
    Ok(kl.max(0.0))
}

/// Gradients of the per-bin log density with respect to `(alpha, beta)`.
pub fn log_prob_grad(params: &BetaPolicyParams, mask: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_mask(params, mask)?;
    let mut da = Vec::with_capacity(mask.len());
    let mut db = Vec::with_capacity(mask.len());
    for ((&a, &b), &m) in params.alpha.iter().zip(&params.beta).zip(mask) {
        let s = digamma(a + b);
        da.push(m.ln() - digamma(a) + s);
        db.push((-m).ln_1p() - digamma(b) + s);
    }
    Ok((da, db))
}

/// Gradients of the per-bin entropy with respect to `(alpha, beta)`.
pub fn entropy_grad(params: &BetaPolicyParams) -> (Vec<f64>, Vec<f64>) {
    params
        .alpha
        .iter()
        .zip(&params.beta)
        .map(|(&a, &b)| {
            let t = (a + b - 2.0) * trigamma(a + b);
            (-(a - 1.0) * trigamma(a) + t, -(b - 1.0) * trigamma(b) + t)
        })
        .unzip()
}

/// Gradients of `KL(p || q)` with respect to `p`'s `(alpha, beta)`, `q` fixed.
pub fn kl_grad(p: &BetaPolicyParams, q: &BetaPolicyParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if p.shape != q.shape {
        return Err(Error::shape(format!("{:?}", p.shape), format!("{:?}", q.shape)));
    }
    Ok((0..p.alpha.len())
        .map(|i| {
            let (ap, bp, aq, bq) = (p.alpha[i], p.beta[i], q.alpha[i], q.beta[i]);
            let t = (aq - ap + bq - bp) * trigamma(ap + bp);
            ((ap - aq) * trigamma(ap) + t, (bp - bq) * trigamma(bp) + t)
        })
        .unzip())
}

/// All per-bin quantities one policy-gradient step needs, evaluated in a
/// single pass that shares special-function work across terms.
#[derive(Debug, Clone, Default)]
pub struct SurrogateTerms {
    pub logp_new: f64,
    pub logp_old: f64,
    pub entropy: f64,
    pub kl: f64,
    pub dlogp_dalpha: Vec<f64>,
    pub dlogp_dbeta: Vec<f64>,
    pub dentropy_dalpha: Vec<f64>,
    pub dentropy_dbeta: Vec<f64>,
    pub dkl_dalpha: Vec<f64>,
    pub dkl_dbeta: Vec<f64>,
}

/// Evaluates `log pi_new(m)`, `log pi_old(m)`, `H(pi_new)`,
/// `KL(pi_new || pi_old)` and their gradients with respect to the new
/// policy's parameters. Numerically identical to calling [`log_prob`],
/// [`entropy`], [`kl_divergence`], [`log_prob_grad`], [`entropy_grad`] and
/// [`kl_grad`] separately (up to summation order).
pub fn surrogate_terms(
    new: &BetaPolicyParams,
    old: &BetaPolicyParams,
    mask: &[f64],
) -> Result<SurrogateTerms> {
    check_mask(new, mask)?;
    if new.shape != old.shape {
        return Err(Error::shape(format!("{:?}", new.shape), format!("{:?}", old.shape)));
    }
    let n = mask.len();
    let same = new.alpha == old.alpha && new.beta == old.beta;
    let mut out = SurrogateTerms {
        dlogp_dalpha: Vec::with_capacity(n),
        dlogp_dbeta: Vec::with_capacity(n),
        dentropy_dalpha: Vec::with_capacity(n),
        dentropy_dbeta: Vec::with_capacity(n),
        dkl_dalpha: Vec::with_capacity(n),
        dkl_dbeta: Vec::with_capacity(n),
        ..Default::default()
    };
    // alpha + beta is constant across bins for proposal-built parameters.
    let mut cached_sum = f64::NAN;
    let mut sum_family = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b, m) = (new.alpha[i], new.beta[i], mask[i]);
        let (lga, dga, tga) = gamma_family(a);
        let (lgb, dgb, tgb) = gamma_family(b);
        let s = a + b;
        if s != cached_sum {
            cached_sum = s;
            sum_family = gamma_family(s);
        }
        let (lgs, dgs, tgs) = sum_family;
        let lnb = lga + lgb - lgs;
        let (lnm, ln1m) = (m.ln(), (-m).ln_1p());

        out.logp_new += (a - 1.0) * lnm + (b - 1.0) * ln1m - lnb;
        out.entropy += lnb - (a - 1.0) * dga - (b - 1.0) * dgb + (s - 2.0) * dgs;
        out.dlogp_dalpha.push(lnm - dga + dgs);
        out.dlogp_dbeta.push(ln1m - dgb + dgs);
        let t = (s - 2.0) * tgs;
        out.dentropy_dalpha.push(-(a - 1.0) * tga + t);
        out.dentropy_dbeta.push(-(b - 1.0) * tgb + t);

        if same {
            out.logp_old += (a - 1.0) * lnm + (b - 1.0) * ln1m - lnb;
            out.dkl_dalpha.push(0.0);
            out.dkl_dbeta.push(0.0);
        } else {
            let (aq, bq) = (old.alpha[i], old.beta[i]);
            let lnb_q = ln_beta(aq, bq);
            out.logp_old += (aq - 1.0) * lnm + (bq - 1.0) * ln1m - lnb_q;
            out.kl += lnb_q - lnb + (a - aq) * dga + (b - bq) * dgb + (aq - a + bq - b) * dgs;
            let tk = (aq - a + bq - b) * tgs;
            out.dkl_dalpha.push((a - aq) * tga + tk);
            out.dkl_dbeta.push((b - bq) * tgb + tk);
        }
    }
    out.kl = out.kl.max(0.0);
    Ok(out)
}

/// Linear ramp of the concentration from `start` to `end` over the first
/// `ramp_fraction` of training, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_fraction: f64,
}

impl Default for KappaSchedule {
    fn default() -> Self {
        Self {
            start: 4.0,
            end: 9.0,
            ramp_fraction: 0.2,
        }
    }
}

impl KappaSchedule {
    pub fn constant(kappa: f64) -> Self {
        Self {
            start: kappa,
            end: kappa,
            ramp_fraction: 0.0,
        }
    }

    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        let ramp = self.ramp_fraction * total_steps as f64;
        if ramp <= 0.0 || step as f64 >= ramp {
            return self.end;
        }
        self.start + (self.end - self.start) * (step as f64 / ramp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0) || !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(Error::Config(format!("invalid kappa schedule {self:?}")));
        }
        Ok(())
    }
}

/// Log density of a single `Beta(a, b)` at `m`.
pub fn beta_ln_pdf(a: f64, b: f64, m: f64) -> f64 {
    (a - 1.0) * m.ln() + (b - 1.0) * (-m).ln_1p() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b))
}
