//! Waveform and time-frequency representations.
//!
//! The STFT uses centered framing: the signal is reflection-padded by half a
//! window on both ends before framing, so frame `t` is centred on sample
//! `t * hop`. The inverse divides the overlap-added synthesis frames by the
//! exact squared-window envelope, which makes `istft(stft(x))` reproduce `x`
//! to rounding error.

mod wav;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use wav::{read_wav, write_wav, ResamplePolicy, WavFormat, WavOptions};

/// Default sample rate of every synthetic item and the WAV reader's accepted rate.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Floor applied to the mixture magnitude when forming ideal ratio masks.
pub const IRM_FLOOR: f64 = 1e-8;

/// A mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }
}

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    Hann,
    /// All-ones window; only overlap-adds to a constant when `hop` divides the window.
    Rectangular,
}

impl WindowKind {
    pub fn samples(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 1024-point FFT, hop 256, 1024-sample periodic Hann window.
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
            window_size: 1024,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples under centered padding.
    pub fn n_frames(&self, len: usize) -> usize {
        let pad = self.window_size / 2;
        (len + 2 * pad - self.window_size) / self.hop + 1
    }

    /// Checks the size ordering and that the analysis-times-synthesis window
    /// (`w^2`) overlap-adds to a constant at this hop.
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_size == 0 || self.fft_size == 0 {
            return Err(Error::invalid("stft sizes must be positive"));
        }
        if !(self.hop <= self.window_size && self.window_size <= self.fft_size) {
            return Err(Error::invalid(format!(
                "need hop <= window_size <= fft_size, got {} / {} / {}",
                self.hop, self.window_size, self.fft_size
            )));
        }
        let w = self.window.samples(self.window_size);
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| w.iter().skip(n).step_by(self.hop).map(|x| x * x).sum())
            .collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        if min <= 0.0 || (max - min) > 1e-9 * max {
            return Err(Error::NonCola {
                hop: self.hop,
                detail: format!("squared-window sum ranges over [{min:.6}, {max:.6}]"),
            });
        }
        Ok(())
    }
}

/// Complex STFT, `F x T` with `F = fft_size / 2 + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: Array2<Complex64>,
    config: StftConfig,
    signal_len: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn from_parts(
        bins: Array2<Complex64>,
        config: StftConfig,
        signal_len: usize,
        sample_rate: u32,
    ) -> Result<Self> {
        config.validate()?;
        if bins.nrows() != config.n_freqs() {
            return Err(Error::shape(
                format!("{} frequency rows", config.n_freqs()),
                bins.nrows(),
            ));
        }
        if bins.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram bin".into()));
        }
        Ok(Self {
            bins,
            config,
            signal_len,
            sample_rate,
        })
    }

    pub fn bins(&self) -> &Array2<Complex64> {
        &self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Length of the waveform this spectrogram was computed from.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bins.dim()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }

    pub fn phase(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.arg())
    }

    /// `ln(1 + |X|)`, the separator's input representation.
    pub fn log_magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm().ln_1p())
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            bins: self.bins.mapv(|c| c * gain),
            ..self.clone()
        }
    }
}

/// Time-frequency mask with every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Array2<f64>,
}

impl Mask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask entry {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn filled(shape: (usize, usize), value: f64) -> Result<Self> {
        Self::new(Array2::from_elem(shape, value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

pub(crate) fn plan(size: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((size, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(size)
                } else {
                    planner.plan_fft_forward(size)
                }
            })
            .clone()
    })
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

/// Short-time Fourier transform with centered, reflection-padded frames.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let len = w.len();
    // reflection needs len > pad; window_size covers that.
    if len < cfg.window_size || len < 2 {
        return Err(Error::WaveformTooShort {
            len,
            min: cfg.window_size.max(2),
        });
    }
    let pad = cfg.window_size / 2;
    let padded = reflect_pad(w.samples(), pad);
    let window = cfg.window.samples(cfg.window_size);
    let n_frames = cfg.n_frames(len);
    let n_freqs = cfg.n_freqs();
    let fft = plan(cfg.fft_size, false);

    let mut bins = Array2::<Complex64>::zeros((n_freqs, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < cfg.window_size {
                Complex64::new(padded[start + i] * window[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..n_freqs {
            bins[[f, t]] = buf[f];
        }
    }
    Ok(Spectrogram {
        bins,
        config: *cfg,
        signal_len: len,
        sample_rate: w.sample_rate(),
    })
}

/// Inverse STFT by weighted overlap-add, cropped to `target_len` samples.
pub fn istft(s: &Spectrogram, target_len: usize) -> Result<Waveform> {
    let cfg = s.config;
    cfg.validate()?;
    let (n_freqs, n_frames) = s.shape();
    if n_freqs != cfg.n_freqs() {
        return Err(Error::shape(format!("{} frequency rows", cfg.n_freqs()), n_freqs));
    }
    let pad = cfg.window_size / 2;
    let span = (n_frames.saturating_sub(1)) * cfg.hop + cfg.window_size;
    if target_len + pad > span {
        return Err(Error::invalid(format!(
            "{n_frames} frames at hop {} cannot cover {target_len} samples",
            cfg.hop
        )));
    }
    let window = cfg.window.samples(cfg.window_size);
    let ifft = plan(cfg.fft_size, true);
    let mut out = vec![0.0; span];
    let mut env = vec![0.0; span];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let norm = 1.0 / cfg.fft_size as f64;
    for t in 0..n_frames {
        for f in 0..n_freqs {
            buf[f] = s.bins[[f, t]];
        }
        // Hermitian completion of the negative frequencies.
        for f in n_freqs..cfg.fft_size {
            buf[f] = buf[cfg.fft_size - f].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for i in 0..cfg.window_size {
            out[start + i] += buf[i].re * norm * window[i];
            env[start + i] += window[i] * window[i];
        }
    }
    let samples = (pad..pad + target_len)
        .map(|i| if env[i] > 1e-10 { out[i] / env[i] } else { 0.0 })
        .collect();
    Waveform::new(samples, s.sample_rate)
}

/// Applies `mask` to the mixture magnitude, keeps the mixture phase, and
/// resynthesises a waveform of the mixture's original length.
pub fn apply_mask_reconstruct(mix: &Spectrogram, mask: &Mask) -> Result<Waveform> {
    let masked = apply_mask(mix, mask)?;
    istft(&masked, mix.signal_len)
}

/// `m |X| e^{i angle X}`, i.e. the masked spectrogram before resynthesis.
pub fn apply_mask(mix: &Spectrogram, mask: &Mask) -> Result<Spectrogram> {
    if mask.shape() != mix.shape() {
        return Err(Error::shape(format!("{:?}", mix.shape()), format!("{:?}", mask.shape())));
    }
    let mut bins = mix.bins.clone();
    // m X has magnitude m |X| and the phase of X
    Zip::from(&mut bins).and(&mask.values).for_each(|b, &m| *b *= m);
    Ok(Spectrogram { bins, ..mix.clone() })
}

/// `|target| / max(|mix|, floor)`, clipped to `[0, 1]`.
pub fn ideal_ratio_mask(target: &Spectrogram, mix: &Spectrogram, floor: f64) -> Result<Mask> {
    if target.shape() != mix.shape() {
        return Err(Error::shape(format!("{:?}", mix.shape()), format!("{:?}", target.shape())));
    }
    if target.config != mix.config {
        return Err(Error::invalid("target and mixture use different STFT configs"));
    }
    if !(floor > 0.0) {
        return Err(Error::invalid("IRM floor must be positive"));
    }
    let mut values = Array2::zeros(mix.shape());
    Zip::from(&mut values)
        .and(&target.bins)
        .and(&mix.bins)
        .for_each(|v, t, x| *v = (t.norm() / x.norm().max(floor)).clamp(0.0, 1.0));
    Ok(Mask { values })
}
