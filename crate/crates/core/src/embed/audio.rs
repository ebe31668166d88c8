//! Waveform embedder for separated audio.
//!
//! Features are the fraction of spectral energy in each of `bands`
//! log-spaced bands plus the mean and standard deviation of spectral flux
//! between consecutive unit-normalized frames. All of them are invariant to
//! the waveform's gain. A ridge-fitted affine map takes features to the
//! embedding space, followed by l2 normalization.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Modality, OracleEmbedder};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::reward::EmbeddingVector;
use crate::spectral::{stft, Spectrogram, StftConfig, Waveform};

pub const AUDIO_EMBEDDER_KIND: &str = "audio-embedder";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioFeatureConfig {
    pub bands: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        Self {
            bands: 24,
            f_min: 60.0,
            f_max: 7800.0,
        }
    }
}

impl AudioFeatureConfig {
    pub fn n_features(&self) -> usize {
        self.bands + 2
    }

    fn band_of_bin(&self, n_freqs: usize, fft_size: usize, sample_rate: u32) -> Vec<Option<usize>> {
        let lo = self.f_min.ln();
        let span = self.f_max.ln() - lo;
        (0..n_freqs)
            .map(|k| {
                let f = k as f64 * sample_rate as f64 / fft_size as f64;
                if f < self.f_min || f >= self.f_max {
                    return None;
                }
                Some((((f.ln() - lo) / span) * self.bands as f64).floor() as usize)
            })
            .map(|b| b.map(|b| b.min(self.bands - 1)))
            .collect()
    }

    /// Feature vector of a spectrogram.
    pub fn features_of(&self, s: &Spectrogram) -> Result<Vec<f64>> {
        let (n_freqs, n_frames) = s.shape();
        let band = self.band_of_bin(n_freqs, s.config().fft_size, s.sample_rate());
        let power: Array2<f64> = s.bins().mapv(|c| c.norm_sqr());
        let mut band_energy = vec![0.0; self.bands];
        for (k, b) in band.iter().enumerate() {
            if let Some(b) = b {
                band_energy[*b] += power.row(k).sum();
            }
        }
        let total: f64 = band_energy.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("zero energy in the embedder's frequency range".into()));
        }
        let mut feats: Vec<f64> = band_energy.iter().map(|e| e / total).collect();

        let mag = power.mapv(f64::sqrt);
        let mut prev: Option<Vec<f64>> = None;
        let mut flux = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let col = mag.column(t);
            let n = col.dot(&col).sqrt();
            if n == 0.0 {
                continue;
            }
            let cur: Vec<f64> = col.iter().map(|v| v / n).collect();
            if let Some(p) = &prev {
                flux.push(cur.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
            }
            prev = Some(cur);
        }
        let (mean, std) = if flux.is_empty() {
            (0.0, 0.0)
        } else {
            let m = flux.iter().sum::<f64>() / flux.len() as f64;
            let v = flux.iter().map(|f| (f - m) * (f - m)).sum::<f64>() / flux.len() as f64;
            (m, v.sqrt())
        };
        feats.push(mean);
        feats.push(std);
        Ok(feats)
    }

    pub fn features(&self, w: &Waveform) -> Result<Vec<f64>> {
        if w.energy() == 0.0 {
            return Err(Error::Degenerate("cannot embed a silent waveform".into()));
        }
        self.features_of(&stft(w, &StftConfig::default())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedder {
    features: AudioFeatureConfig,
    /// `dim x (n_features + 1)`; the last column is the bias.
    projection: Array2<f64>,
}

impl AudioEmbedder {
    pub fn new(features: AudioFeatureConfig, projection: Array2<f64>) -> Result<Self> {
        if projection.ncols() != features.n_features() + 1 {
            return Err(Error::shape(features.n_features() + 1, projection.ncols()));
        }
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio embedder projection".into()));
        }
        Ok(Self { features, projection })
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn feature_config(&self) -> &AudioFeatureConfig {
        &self.features
    }

    /// Ridge regression from features to the oracle's noise-free audio
    /// embedding of each example's class.
    pub fn calibrate(
        oracle: &OracleEmbedder,
        features: AudioFeatureConfig,
        examples: &[(usize, Waveform)],
        ridge: f64,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("calibration needs at least one example"));
        }
        let nf = features.n_features() + 1;
        let d = oracle.dim();
        let mut gram = DMatrix::<f64>::identity(nf, nf) * ridge;
        let mut cross = DMatrix::<f64>::zeros(nf, d);
        for (class, w) in examples {
            let mut x = features.features(w)?;
            x.push(1.0);
            let y = oracle.class_center(Modality::Audio, *class)?;
            let x = DVector::from_vec(x);
            gram += &x * x.transpose();
            cross += &x * DVector::from_column_slice(y.values()).transpose();
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("calibration system is not positive definite".into()))?;
        let sol = chol.solve(&cross);
        let projection = Array2::from_shape_fn((d, nf), |(i, j)| sol[(j, i)]);
        Self::new(features, projection)
    }

    fn project(&self, mut x: Vec<f64>) -> Result<EmbeddingVector> {
        x.push(1.0);
        let u = self.projection.dot(&ndarray::Array1::from_vec(x));
        EmbeddingVector::new(u.to_vec())?.normalized()
    }

    pub fn embed(&self, w: &Waveform) -> Result<EmbeddingVector> {
        self.project(self.features.features(w)?)
    }

    pub fn embed_spectrogram(&self, s: &Spectrogram) -> Result<EmbeddingVector> {
        self.project(self.features.features_of(s)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            AUDIO_EMBEDDER_KIND,
            serde_json::json!({ "features": self.features, "dim": self.dim() }),
        )
        .with_array("projection", self.projection.iter().copied().collect())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(AUDIO_EMBEDDER_KIND)?;
        let features: AudioFeatureConfig = serde_json::from_value(ck.meta["features"].clone())
            .map_err(|e| Error::Format(format!("audio embedder features: {e}")))?;
        let dim = ck.meta["dim"]
            .as_u64()
            .ok_or_else(|| Error::Format("audio embedder lacks dim".into()))? as usize;
        let flat = ck.array("projection")?.to_vec();
        let projection = Array2::from_shape_vec((dim, features.n_features() + 1), flat)
            .map_err(|e| Error::Format(format!("audio embedder projection: {e}")))?;
        Self::new(features, projection)
    }
}

/// `embedder.embed(w)`.
pub fn embed_audio_waveform(embedder: &AudioEmbedder, w: &Waveform) -> Result<EmbeddingVector> {
    embedder.embed(w)
}
