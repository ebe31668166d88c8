//! Separation metrics: SI-SDR and its improvement under the optimal
//! estimate-to-reference assignment, projection-based SDR/SIR/SAR, and
//! dataset-level aggregation with bootstrap intervals.
//!
//! Every ratio in dB is clamped to `[-SENTINEL_DB, SENTINEL_DB]`, so a
//! perfect estimate reads `+300` and an estimate with no target component
//! reads `-300`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::spectral::Waveform;

pub const SENTINEL_DB: f64 = 300.0;
/// `sum |w[n]|` at or below this marks a signal as silent.
pub const ENERGY_GUARD: f64 = 1e-5;
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

/// `10 log10(num / den)` with the sentinel convention.
fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        if num > 0.0 {
            SENTINEL_DB
        } else {
            -SENTINEL_DB
        }
    } else if num <= 0.0 {
        -SENTINEL_DB
    } else {
        (10.0 * (num / den).log10()).clamp(-SENTINEL_DB, SENTINEL_DB)
    }
}

/// SI-SDR of `est` against `reference` on raw sample slices, after cropping
/// to the shorter length and removing each mean.
pub fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    let n = est.len().min(reference.len());
    if n == 0 {
        return Err(Error::Degenerate("empty signal".into()));
    }
    let est = zero_mean(&est[..n]);
    let r = zero_mean(&reference[..n]);
    let rr = dot(&r, &r);
    if rr == 0.0 {
        return Err(Error::Degenerate("reference has zero energy".into()));
    }
    let alpha = dot(&est, &r) / rr;
    let target = alpha * alpha * rr;
    let noise: f64 = est.iter().zip(&r).map(|(e, r)| (e - alpha * r).powi(2)).sum();
    Ok(ratio_db(target, noise))
}

pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(est.samples(), reference.samples())
}

/// Permutation `pi` maximizing `sum_k s[k][pi[k]]` (Hungarian algorithm on
/// `-s`, O(n^3)).
pub fn optimal_assignment(s: &Array2<f64>) -> Result<Vec<usize>> {
    let (n, m) = s.dim();
    if n != m {
        return Err(Error::shape(format!("{n}x{n}"), format!("{n}x{m}")));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment matrix entry".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based potentials formulation; row 0 / column 0 are sentinels.
    let cost = |i: usize, j: usize| -s[[i - 1, j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssMetrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    /// The estimate has no component along the target reference.
    pub no_target: bool,
}

/// SDR/SIR/SAR of `est` for reference `target` by orthogonal projection
/// onto the span of `refs`.
pub fn bss_decompose(est: &[f64], refs: &[&[f64]], target: usize) -> Result<BssMetrics> {
    if target >= refs.len() {
        return Err(Error::invalid(format!("target index {target} out of {} references", refs.len())));
    }
    let n = refs.iter().map(|r| r.len()).chain([est.len()]).min().unwrap_or(0);
    if n == 0 {
        return Err(Error::Degenerate("empty signal".into()));
    }
    let k = refs.len();
    let est = &est[..n];
    let gram = DMatrix::from_fn(k, k, |i, j| dot(&refs[i][..n], &refs[j][..n]));
    let sv = gram.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin >= GRAM_CONDITION_LIMIT {
        return Err(Error::Degenerate(format!(
            "reference Gram matrix is ill-conditioned (condition number {:.3e})",
            smax / smin
        )));
    }
    let rhs = DVector::from_fn(k, |i, _| dot(&refs[i][..n], est));
    let coef = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("singular reference Gram matrix".into()))?;
    let rj = &refs[target][..n];
    let alpha = dot(est, rj) / dot(rj, rj);
    let mut s_target = vec![0.0; n];
    let mut e_interf = vec![0.0; n];
    let mut e_artif = vec![0.0; n];
    for t in 0..n {
        let proj: f64 = (0..k).map(|i| coef[i] * refs[i][t]).sum();
        s_target[t] = alpha * rj[t];
        e_interf[t] = proj - s_target[t];
        e_artif[t] = est[t] - proj;
    }
    let e2 = |x: &[f64]| dot(x, x);
    let st = e2(&s_target);
    let distortion: f64 = e_interf.iter().zip(&e_artif).map(|(a, b)| (a + b).powi(2)).sum();
    let signal: f64 = s_target.iter().zip(&e_interf).map(|(a, b)| (a + b).powi(2)).sum();
    Ok(BssMetrics {
        sdr: ratio_db(st, distortion),
        sir: ratio_db(st, e2(&e_interf)),
        sar: ratio_db(signal, e2(&e_artif)),
        no_target: st == 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub id: String,
    pub category: Option<String>,
    /// SI-SDR of the assigned estimate for each reference.
    pub si_sdr: Vec<f64>,
    /// SI-SDR of the mixture for each reference.
    pub baseline: Vec<f64>,
    pub si_sdri: Option<f64>,
    /// `permutation[k]` is the estimate assigned to reference `k`.
    pub permutation: Vec<usize>,
    pub skipped: Option<String>,
    /// Some per-source value hit the sentinel cap.
    pub saturated: bool,
    pub bss: Option<Vec<BssMetrics>>,
}

fn abs_sum(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// SI-SDR improvement under the optimal assignment, with the energy guard
/// applied to every reference and its matched estimate.
pub fn si_sdri(id: impl Into<String>, ests: &[Waveform], refs: &[Waveform], mix: &Waveform) -> Result<UtteranceEval> {
    let n_src = refs.len();
    if n_src == 0 {
        return Err(Error::invalid("no reference sources"));
    }
    if ests.len() != n_src {
        return Err(Error::shape(n_src, ests.len()));
    }
    let len = refs
        .iter()
        .chain(ests)
        .map(Waveform::len)
        .chain([mix.len()])
        .min()
        .unwrap_or(0);
    let crop = |w: &Waveform| zero_mean(&w.samples()[..len]);
    let refs: Vec<Vec<f64>> = refs.iter().map(crop).collect();
    let ests: Vec<Vec<f64>> = ests.iter().map(crop).collect();
    let mix = crop(mix);
    let mut out = UtteranceEval {
        id: id.into(),
        category: None,
        si_sdr: Vec::new(),
        baseline: Vec::new(),
        si_sdri: None,
        permutation: Vec::new(),
        skipped: None,
        saturated: false,
        bss: None,
    };
    if let Some(k) = refs.iter().position(|r| abs_sum(r) <= ENERGY_GUARD) {
        out.skipped = Some(format!("reference {k} is silent"));
        return Ok(out);
    }
    let mut s = Array2::zeros((n_src, n_src));
    for (k, r) in refs.iter().enumerate() {
        for (j, e) in ests.iter().enumerate() {
            s[[k, j]] = if abs_sum(e) == 0.0 {
                -SENTINEL_DB
            } else {
                si_sdr_slices(e, r)?
            };
        }
    }
    let perm = optimal_assignment(&s)?;
    if let Some(k) = (0..n_src).find(|&k| abs_sum(&ests[perm[k]]) <= ENERGY_GUARD) {
        out.permutation = perm;
        out.skipped = Some(format!("estimate matched to reference {k} is silent"));
        return Ok(out);
    }
    out.si_sdr = (0..n_src).map(|k| s[[k, perm[k]]]).collect();
    out.baseline = refs.iter().map(|r| si_sdr_slices(&mix, r)).collect::<Result<_>>()?;
    out.saturated = out.si_sdr.iter().chain(&out.baseline).any(|v| v.abs() >= SENTINEL_DB);
    out.si_sdri = Some(out.si_sdr.iter().zip(&out.baseline).map(|(a, b)| a - b).sum::<f64>() / n_src as f64);
    out.permutation = perm;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Mean, population standard deviation and a percentile bootstrap 95%
/// interval of the mean.
pub fn summarize(values: &[f64], resamples: usize, seed: u64) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty set"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut rng = rng_for(seed, &[0xB007]);
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| means[((q * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    Ok(Summary {
        mean,
        std,
        ci_low: pick(0.025),
        ci_high: pick(0.975),
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceEval>,
    pub skipped: usize,
    pub saturated: usize,
    pub si_sdri: Summary,
    pub si_sdr: Summary,
    /// Mean SI-SDRi within each category.
    pub categories: BTreeMap<String, f64>,
    /// Unweighted mean of the category means.
    pub macro_si_sdri: Option<f64>,
    pub sdr: Option<f64>,
    pub sir: Option<f64>,
    pub sar: Option<f64>,
}

/// Aggregates non-skipped utterances.
pub fn aggregate(utterances: Vec<UtteranceEval>, seed: u64) -> Result<EvalReport> {
    let kept: Vec<&UtteranceEval> = utterances.iter().filter(|u| u.skipped.is_none()).collect();
    if kept.is_empty() {
        return Err(Error::Degenerate(format!("all {} utterances were skipped", utterances.len())));
    }
    let gains: Vec<f64> = kept.iter().map(|u| u.si_sdri.expect("kept utterances carry a gain")).collect();
    let sdrs: Vec<f64> = kept
        .iter()
        .map(|u| u.si_sdr.iter().sum::<f64>() / u.si_sdr.len() as f64)
        .collect();
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (u, g) in kept.iter().zip(&gains) {
        if let Some(c) = &u.category {
            by_cat.entry(c.clone()).or_default().push(*g);
        }
    }
    let categories: BTreeMap<String, f64> = by_cat
        .into_iter()
        .map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let macro_si_sdri = (!categories.is_empty()).then(|| categories.values().sum::<f64>() / categories.len() as f64);
    let bss_mean = |f: fn(&BssMetrics) -> f64| -> Option<f64> {
        let vals: Vec<f64> = kept.iter().filter_map(|u| u.bss.as_ref()).flatten().map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(EvalReport {
        skipped: utterances.len() - kept.len(),
        saturated: kept.iter().filter(|u| u.saturated).count(),
        si_sdri: summarize(&gains, BOOTSTRAP_RESAMPLES, seed)?,
        si_sdr: summarize(&sdrs, BOOTSTRAP_RESAMPLES, seed ^ 1)?,
        categories,
        macro_si_sdri,
        sdr: bss_mean(|b| b.sdr),
        sir: bss_mean(|b| b.sir),
        sar: bss_mean(|b| b.sar),
        utterances,
    })
}

impl EvalReport {
    /// One JSON object per utterance, then a summary object.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let enc = |v: &serde_json::Value| serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()));
        for u in &self.utterances {
            let mut v = serde_json::to_value(u).map_err(|e| Error::Format(e.to_string()))?;
            v["record"] = "utterance".into();
            writeln!(f, "{}", enc(&v)?)?;
        }
        let summary = serde_json::json!({
            "record": "summary",
            "utterances": self.utterances.len(),
            "skipped": self.skipped,
            "saturated": self.saturated,
            "si_sdri": self.si_sdri,
            "si_sdr": self.si_sdr,
            "categories": self.categories,
            "macro_si_sdri": self.macro_si_sdri,
            "sdr": self.sdr,
            "sir": self.sir,
            "sar": self.sar,
        });
        writeln!(f, "{}", enc(&summary)?)?;
        f.flush()?;
        Ok(())
    }
}
