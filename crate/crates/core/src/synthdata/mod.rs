//! Seeded synthetic sources and two-source mixtures.
//!
//! Each class owns one band of a log-spaced partition of the audible range
//! and a generator family (harmonic stack, triangular chirp, band-limited
//! noise bursts, amplitude-modulated tone, cycling with the class index).
//! Generated sources stay inside their class band apart from window
//! leakage, so ideal ratio masks separate any two classes cleanly.

mod dataset;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::spectral::{ideal_ratio_mask, plan, stft, Mask, StftConfig, Waveform, IRM_FLOOR};

pub use dataset::{build_dataset, calibration_examples, class_label, Dataset, DatasetItem, Split, SynthConfig};

/// Peak amplitude of every generated source.
pub const PEAK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    /// `sum_k rolloff^(k-1) sin(2 pi k f0 t + phi_k)` for `k = 1..=harmonics`.
    Harmonic { f0: f64, harmonics: usize, rolloff: f64 },
    /// Instantaneous frequency sweeps linearly from `f_start` to `f_end` and
    /// back once per `period` seconds.
    Chirp { f_start: f64, f_end: f64, period: f64 },
    /// White noise restricted to `[band_lo, band_hi]` Hz, gated on for
    /// `burst` seconds out of every `burst + gap`.
    NoiseBurst { band_lo: f64, band_hi: f64, burst: f64, gap: f64 },
    /// `(1 + depth sin(2 pi rate t)) sin(2 pi carrier t)`.
    AmTone { carrier: f64, rate: f64, depth: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub class: usize,
    pub kind: GeneratorKind,
    pub duration: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

/// The class layout of a synthetic universe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassUniverse {
    pub classes: usize,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl Default for ClassUniverse {
    fn default() -> Self {
        Self {
            classes: 4,
            f_lo: 150.0,
            f_hi: 7500.0,
        }
    }
}

/// Multiplicative margin kept between a generator's energy and its band edges.
const GUARD: f64 = 1.08;

impl ClassUniverse {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("a synthetic universe needs at least two classes".into()));
        }
        if !(self.f_lo > 0.0 && self.f_hi > self.f_lo * GUARD * GUARD * 1.2) {
            return Err(Error::Config(format!("unusable frequency range {}..{} Hz", self.f_lo, self.f_hi)));
        }
        Ok(())
    }

    /// `(lo, hi)` edges of class `c`'s band.
    pub fn region(&self, class: usize) -> Result<(f64, f64)> {
        if class >= self.classes {
            return Err(Error::invalid(format!("unknown class {class}")));
        }
        let r = (self.f_hi / self.f_lo).powf(1.0 / self.classes as f64);
        Ok((self.f_lo * r.powi(class as i32), self.f_lo * r.powi(class as i32 + 1)))
    }

    /// A random source of class `class`, drawn deterministically from `seed`.
    pub fn random_spec(&self, class: usize, duration: usize, sample_rate: u32, seed: u64) -> Result<SourceSpec> {
        self.validate()?;
        let (lo, hi) = self.region(class)?;
        if hi / GUARD >= sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!("class band {lo:.0}..{hi:.0} Hz exceeds Nyquist")));
        }
        let (a, b) = (lo * GUARD, hi / GUARD);
        let mut rng = rng_for(seed, &[0x5EC]);
        let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, x: f64, y: f64| (x.ln() + rng.gen::<f64>() * (y.ln() - x.ln())).exp();
        let kind = match class % 4 {
            0 => {
                let harmonics = ((b / a).floor() as usize).clamp(1, 6);
                GeneratorKind::Harmonic {
                    f0: log_uniform(&mut rng, a, b / harmonics as f64),
                    harmonics,
                    rolloff: rng.gen_range(0.5..0.9),
                }
            }
            1 => {
                let mid = (a * b).sqrt();
                GeneratorKind::Chirp {
                    f_start: log_uniform(&mut rng, a, (a * mid).sqrt()),
                    f_end: log_uniform(&mut rng, (mid * b).sqrt(), b),
                    period: rng.gen_range(0.5..1.5),
                }
            }
            2 => {
                let width = (b / a).ln();
                let lo_b = (a.ln() + rng.gen::<f64>() * 0.3 * width).exp();
                let hi_b = (b.ln() - rng.gen::<f64>() * 0.3 * width).exp();
                GeneratorKind::NoiseBurst {
                    band_lo: lo_b,
                    band_hi: hi_b,
                    burst: rng.gen_range(0.3..0.8),
                    gap: rng.gen_range(0.05..0.3),
                }
            }
            _ => GeneratorKind::AmTone {
                carrier: log_uniform(&mut rng, a * 1.1, b / 1.1),
                rate: rng.gen_range(2.0..8.0),
                depth: rng.gen_range(0.3..0.9),
            },
        };
        let spec = SourceSpec {
            class,
            kind,
            duration,
            sample_rate,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration == 0 {
            return Err(Error::invalid("source duration must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let nyq = self.sample_rate as f64 / 2.0;
        let in_band = |f: f64| f > 0.0 && f < nyq;
        let ok = match self.kind {
            GeneratorKind::Harmonic { f0, harmonics, rolloff } => {
                harmonics >= 1 && in_band(f0) && in_band(f0 * harmonics as f64) && rolloff > 0.0 && rolloff <= 1.0
            }
            GeneratorKind::Chirp { f_start, f_end, period } => in_band(f_start) && in_band(f_end) && period > 0.0,
            GeneratorKind::NoiseBurst { band_lo, band_hi, burst, gap } => {
                in_band(band_lo) && in_band(band_hi) && band_lo < band_hi && burst > 0.0 && gap >= 0.0
            }
            GeneratorKind::AmTone { carrier, rate, depth } => {
                in_band(carrier) && rate >= 0.0 && (0.0..=1.0).contains(&depth)
            }
        };
        if !ok {
            return Err(Error::invalid(format!("generator parameters out of range: {:?}", self.kind)));
        }
        Ok(())
    }
}

fn bandpass_noise(n: usize, sr: f64, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect();
    plan(n, false).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    plan(n, true).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Raised-cosine gate: on for `burst` seconds, off for `gap`, 10 ms ramps.
fn burst_gate(n: usize, sr: f64, burst: f64, gap: f64, offset: f64) -> Vec<f64> {
    let period = burst + gap;
    let ramp = 0.01f64.min(burst / 2.0);
    (0..n)
        .map(|i| {
            let t = (i as f64 / sr + offset).rem_euclid(period);
            if t >= burst {
                0.0
            } else if t < ramp {
                0.5 - 0.5 * (PI * t / ramp).cos()
            } else if t > burst - ramp {
                0.5 - 0.5 * (PI * (burst - t) / ramp).cos()
            } else {
                1.0
            }
        })
        .collect()
}

/// Deterministic waveform for `spec`, peak-normalized to [`PEAK`].
pub fn generate_source(spec: &SourceSpec) -> Result<Waveform> {
    spec.validate()?;
    let n = spec.duration;
    let sr = spec.sample_rate as f64;
    let mut rng = rng_for(spec.seed, &[0x6E4]);
    let mut x: Vec<f64> = match spec.kind {
        GeneratorKind::Harmonic { f0, harmonics, rolloff } => {
            let parts: Vec<(f64, f64, f64)> = (1..=harmonics)
                .map(|k| (k as f64 * f0, rolloff.powi(k as i32 - 1), rng.gen::<f64>() * 2.0 * PI))
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    parts.iter().map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum()
                })
                .collect()
        }
        GeneratorKind::Chirp { f_start, f_end, period } => {
            let offset = rng.gen::<f64>() * period;
            let mut phase = rng.gen::<f64>() * 2.0 * PI;
            (0..n)
                .map(|i| {
                    let u = ((i as f64 / sr + offset) / period).rem_euclid(1.0);
                    let tri = 1.0 - (2.0 * u - 1.0).abs();
                    let f = f_start + (f_end - f_start) * tri;
                    let s = phase.sin();
                    phase = (phase + 2.0 * PI * f / sr).rem_euclid(2.0 * PI);
                    s
                })
                .collect()
        }
        GeneratorKind::NoiseBurst { band_lo, band_hi, burst, gap } => {
            let noise = bandpass_noise(n, sr, band_lo, band_hi, &mut rng);
            let gate = burst_gate(n, sr, burst, gap, rng.gen::<f64>() * (burst + gap));
            noise.iter().zip(&gate).map(|(a, g)| a * g).collect()
        }
        GeneratorKind::AmTone { carrier, rate, depth } => {
            let (p1, p2) = (rng.gen::<f64>() * 2.0 * PI, rng.gen::<f64>() * 2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1.0 + depth * (2.0 * PI * rate * t + p1).sin()) * (2.0 * PI * carrier * t + p2).sin()
                })
                .collect()
        }
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Degenerate(format!("generator produced silence for {:?}", spec.kind)));
    }
    x.iter_mut().for_each(|v| *v *= PEAK / peak);
    Waveform::new(x, spec.sample_rate)
}

/// Sources scaled to their prescribed levels and summed.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureItem {
    pub id: String,
    pub mixture: Waveform,
    /// Post-scaling references; their sample-wise sum is `mixture` exactly.
    pub references: Vec<Waveform>,
    pub classes: Vec<usize>,
    pub snr_offsets_db: Vec<f64>,
}

impl MixtureItem {
    pub fn ideal_masks(&self, cfg: &StftConfig) -> Result<Vec<Mask>> {
        let mix = stft(&self.mixture, cfg)?;
        self.references
            .iter()
            .map(|r| ideal_ratio_mask(&stft(r, cfg)?, &mix, IRM_FLOOR))
            .collect()
    }
}

/// Scales source `i` to energy `E_0 * 10^(snr_offsets_db[i] / 10)`, where
/// `E_0` is the energy of the first source as generated, then sums.
pub fn make_mixture(id: impl Into<String>, specs: &[SourceSpec], snr_offsets_db: &[f64]) -> Result<MixtureItem> {
    if specs.len() < 2 {
        return Err(Error::invalid("a mixture needs at least two sources"));
    }
    if specs.len() != snr_offsets_db.len() {
        return Err(Error::shape(specs.len(), snr_offsets_db.len()));
    }
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b.class == a.class) {
            return Err(Error::invalid(format!("class {} appears twice in one mixture", a.class)));
        }
    }
    let sources = specs.iter().map(generate_source).collect::<Result<Vec<_>>>()?;
    mix_sources(id, &sources, specs.iter().map(|s| s.class).collect(), snr_offsets_db)
}

/// [`make_mixture`] over already-generated sources.
pub fn mix_sources(id: impl Into<String>, sources: &[Waveform], classes: Vec<usize>, snr_offsets_db: &[f64]) -> Result<MixtureItem> {
    let n = sources[0].len();
    let sr = sources[0].sample_rate();
    if sources.iter().any(|s| s.len() != n || s.sample_rate() != sr) {
        return Err(Error::invalid("mixture sources differ in length or sample rate"));
    }
    let e0 = sources[0].energy();
    let references = sources
        .iter()
        .zip(snr_offsets_db)
        .map(|(s, db)| {
            let e = s.energy();
            let gain = if e > 0.0 { (e0 / e * 10f64.powf(db / 10.0)).sqrt() } else { 0.0 };
            s.scaled(gain)
        })
        .collect::<Vec<_>>();
    let mut mix = vec![0.0; n];
    for r in &references {
        mix.iter_mut().zip(r.samples()).for_each(|(m, v)| *m += v);
    }
    Ok(MixtureItem {
        id: id.into(),
        mixture: Waveform::new(mix, sr)?,
        references,
        classes,
        snr_offsets_db: snr_offsets_db.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GeneratorKind) -> SourceSpec {
        SourceSpec {
            class: 0,
            kind,
            duration: 16_000,
            sample_rate: 16_000,
            seed: 3,
        }
    }

    #[test]
    fn harmonic_energy_sits_on_the_harmonics() {
        let s = spec(GeneratorKind::Harmonic {
            f0: 200.0,
            harmonics: 5,
            rolloff: 0.7,
        });
        let w = generate_source(&s).unwrap();
        let p = stft(&w, &StftConfig::default()).unwrap().magnitude().mapv(|m| m * m);
        let bin_hz = 16_000.0 / 1024.0;
        let mut near = 0.0;
        for (k, row) in p.outer_iter().enumerate() {
            let f = k as f64 * bin_hz;
            let h = (f / 200.0).round();
            if h >= 1.0 && (f - h * 200.0).abs() <= bin_hz {
                near += row.sum();
            }
        }
        assert!(near / p.sum() >= 0.8, "{}", near / p.sum());
    }

    #[test]
    fn deterministic_and_peak_normalized() {
        let u = ClassUniverse::default();
        for c in 0..4 {
            let s = u.random_spec(c, 4000, 16_000, 9).unwrap();
            let a = generate_source(&s).unwrap();
            assert_eq!(a, generate_source(&s).unwrap());
            let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - PEAK).abs() < 1e-15);
        }
        let mut z = u.random_spec(0, 4000, 16_000, 9).unwrap();
        z.duration = 0;
        assert!(generate_source(&z).is_err());
    }

    #[test]
    fn mixture_identity_and_levels() {
        let u = ClassUniverse::default();
        let specs = [u.random_spec(0, 8000, 16_000, 1).unwrap(), u.random_spec(3, 8000, 16_000, 2).unwrap()];
        let m = make_mixture("x", &specs, &[0.0, 0.0]).unwrap();
        let (e0, e1) = (m.references[0].energy(), m.references[1].energy());
        assert!((e0 - e1).abs() <= 1e-9 * e0);
        for (i, x) in m.mixture.samples().iter().enumerate() {
            assert_eq!(*x, m.references[0].samples()[i] + m.references[1].samples()[i]);
        }
        let m = make_mixture("x", &specs, &[0.0, 6.0]).unwrap();
        let ratio = 10.0 * (m.references[1].energy() / m.references[0].energy()).log10();
        assert!((ratio - 6.0).abs() < 1e-9);
        assert!(make_mixture("x", &[specs[0], specs[0]], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zeroed_source_leaves_the_other() {
        let u = ClassUniverse::default();
        let a = generate_source(&u.random_spec(1, 4000, 16_000, 5).unwrap()).unwrap();
        let m = mix_sources("z", &[a.clone(), Waveform::zeros(4000, 16_000)], vec![1, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(m.mixture, a);
    }

    #[test]
    fn regions_partition_the_range() {
        let u = ClassUniverse::default();
        let (lo0, _) = u.region(0).unwrap();
        let (_, hi3) = u.region(3).unwrap();
        assert!((lo0 - 150.0).abs() < 1e-9 && (hi3 - 7500.0).abs() < 1e-9);
        assert_eq!(u.region(0).unwrap().1, u.region(1).unwrap().0);
        assert!(u.region(4).is_err());
    }
}
