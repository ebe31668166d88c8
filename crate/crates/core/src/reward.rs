//! Embedding-space rewards for separated audio.
//!
//! Every reward is a cosine similarity between the separated audio's
//! embedding and an anchor built from the query side: a single modality,
//! a weighted query mixup, or a low-rank bilinear pooling of the
//! audio/text/video targets.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the shared multimodal embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding component {i}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::ZeroNorm("normalize"));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(e: EmbeddingVector) -> Self {
        e.values
    }
}

fn check_dims(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::shape(u.dim(), v.dim()));
    }
    Ok(())
}

/// `<u/|u|, v/|v|>`, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    check_dims(u, v)?;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity"));
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Audio-to-audio, text-to-audio and video-to-audio similarities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnimodalRewards {
    pub audio: f64,
    pub text: f64,
    pub video: f64,
}

pub fn unimodal_rewards(
    separated: &EmbeddingVector,
    audio: &EmbeddingVector,
    text: &EmbeddingVector,
    video: &EmbeddingVector,
) -> Result<UnimodalRewards> {
    Ok(UnimodalRewards {
        audio: cosine_sim(separated, audio)?,
        text: cosine_sim(separated, text)?,
        video: cosine_sim(separated, video)?,
    })
}

/// Per-modality mixup weights, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupWeights {
    pub audio: f64,
    pub video: f64,
    pub text: f64,
}

impl Default for MixupWeights {
    fn default() -> Self {
        Self {
            audio: 1.0,
            video: 1.0,
            text: 1.0,
        }
    }
}

/// `(w_a q_a + w_v q_v + w_t q_t) / (w_a + w_v + w_t)`.
pub fn query_mixup(
    audio: &EmbeddingVector,
    video: &EmbeddingVector,
    text: &EmbeddingVector,
    w: MixupWeights,
) -> Result<EmbeddingVector> {
    check_dims(audio, video)?;
    check_dims(audio, text)?;
    let ws = [w.audio, w.video, w.text];
    if ws.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::invalid(format!("mixup weights must lie in [0, 1]: {w:?}")));
    }
    let total: f64 = ws.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("mixup weights sum to zero"));
    }
    let values = (0..audio.dim())
        .map(|i| {
            (w.audio * audio.values[i] + w.video * video.values[i] + w.text * text.values[i]) / total
        })
        .collect();
    EmbeddingVector::new(values)
}

/// Multimodal low-rank bilinear pooling: per-modality projections without
/// bias, Hadamard product, then an affine output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MlbpParams {
    projections: Vec<Array2<f64>>,
    output: Array2<f64>,
    bias: Array1<f64>,
}

impl MlbpParams {
    pub fn new(projections: Vec<Array2<f64>>, output: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if projections.len() < 2 {
            return Err(Error::invalid("bilinear pooling needs at least two modalities"));
        }
        let d = output.nrows();
        if output.ncols() != d || bias.len() != d {
            return Err(Error::shape(format!("{d}x{d} output and {d} bias"), format!("{:?} / {}", output.dim(), bias.len())));
        }
        if let Some(p) = projections.iter().find(|p| p.nrows() != d) {
            return Err(Error::shape(format!("{d} projection rows"), p.nrows()));
        }
        let finite = projections.iter().flat_map(|p| p.iter()).chain(output.iter()).chain(bias.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("bilinear pooling parameter".into()));
        }
        Ok(Self {
            projections,
            output,
            bias,
        })
    }

    /// Identity projections and output, zero bias.
    pub fn identity(dim: usize, modalities: usize) -> Result<Self> {
        Self::new(
            vec![Array2::eye(dim); modalities],
            Array2::eye(dim),
            Array1::zeros(dim),
        )
    }

    pub fn dim(&self) -> usize {
        self.output.nrows()
    }

    pub fn modalities(&self) -> usize {
        self.projections.len()
    }
}

/// `z = W_o (prod_k W_k x_k) + b`.
pub fn mlbp_fuse(params: &MlbpParams, inputs: &[&EmbeddingVector]) -> Result<EmbeddingVector> {
    if inputs.len() != params.modalities() {
        return Err(Error::shape(
            format!("{} modalities", params.modalities()),
            inputs.len(),
        ));
    }
    let mut pooled = Array1::<f64>::ones(params.dim());
    for (w, x) in params.projections.iter().zip(inputs) {
        if w.ncols() != x.dim() {
            return Err(Error::shape(format!("input of dim {}", w.ncols()), x.dim()));
        }
        pooled *= &w.dot(&Array1::from_vec(x.values.clone()));
    }
    let z = params.output.dot(&pooled) + &params.bias;
    EmbeddingVector::new(z.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Audio,
    Text,
    Video,
    Mixup,
    #[default]
    Pooled,
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardMode::Audio => "audio",
            RewardMode::Text => "text",
            RewardMode::Video => "video",
            RewardMode::Mixup => "mixup",
            RewardMode::Pooled => "pooled",
        })
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "audio" => RewardMode::Audio,
            "text" => RewardMode::Text,
            "video" => RewardMode::Video,
            "mixup" => RewardMode::Mixup,
            "pooled" => RewardMode::Pooled,
            other => return Err(Error::Config(format!("unknown reward mode {other:?}"))),
        })
    }
}

/// Query-side target embeddings for one separated source.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardTargets {
    pub audio: Option<EmbeddingVector>,
    pub text: Option<EmbeddingVector>,
    pub video: Option<EmbeddingVector>,
}

impl RewardTargets {
    fn need(&self, which: &'static str) -> Result<&EmbeddingVector> {
        match which {
            "audio" => self.audio.as_ref(),
            "text" => self.text.as_ref(),
            _ => self.video.as_ref(),
        }
        .ok_or_else(|| Error::invalid(format!("reward mode needs a {which} target")))
    }

    /// The unit-norm anchor the separated embedding is compared against.
    pub fn anchor(&self, mode: RewardMode, mlbp: &MlbpParams, weights: MixupWeights) -> Result<EmbeddingVector> {
        let raw = match mode {
            RewardMode::Audio => self.need("audio")?.clone(),
            RewardMode::Text => self.need("text")?.clone(),
            RewardMode::Video => self.need("video")?.clone(),
            RewardMode::Mixup => query_mixup(self.need("audio")?, self.need("video")?, self.need("text")?, weights)?,
            RewardMode::Pooled => mlbp_fuse(mlbp, &[self.need("audio")?, self.need("text")?, self.need("video")?])?,
        };
        raw.normalized()
    }
}

/// Reward of a separated-audio embedding under `mode`.
pub fn composite_reward(
    mode: RewardMode,
    separated: &EmbeddingVector,
    targets: &RewardTargets,
    mlbp: &MlbpParams,
    weights: MixupWeights,
) -> Result<f64> {
    cosine_sim(separated, &targets.anchor(mode, mlbp, weights)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let u = ev(&[1.0, 2.0, -0.5]);
        let v = ev(&[0.3, -0.1, 4.0]);
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let a = cosine_sim(&u.scaled(3.0), &v).unwrap();
        assert!((a - cosine_sim(&u, &v).unwrap()).abs() < 1e-15);
        assert!(cosine_sim(&u, &EmbeddingVector::zeros(3)).is_err());
        assert!(cosine_sim(&u, &ev(&[1.0])).is_err());
    }

    #[test]
    fn unimodal_cases() {
        let e = ev(&[0.0, 1.0, 0.0]);
        let r = unimodal_rewards(&e, &e, &ev(&[1.0, 0.0, 0.0]), &ev(&[0.0, 0.0, 2.0])).unwrap();
        assert_eq!(r.audio, 1.0);
        assert_eq!((r.text, r.video), (0.0, 0.0));
    }

    #[test]
    fn mixup_cases() {
        let (a, v, t) = (ev(&[1.0, 0.0]), ev(&[0.0, 1.0]), ev(&[2.0, 2.0]));
        let only_a = MixupWeights { audio: 1.0, video: 0.0, text: 0.0 };
        assert_eq!(query_mixup(&a, &v, &t, only_a).unwrap(), a);
        let q = ev(&[0.3, 0.7]);
        let m = query_mixup(&q, &q, &q, MixupWeights::default()).unwrap();
        for (p, r) in m.values().iter().zip(q.values()) {
            assert!((p - r).abs() < 1e-15);
        }
        let half = MixupWeights { audio: 0.5, video: 0.5, text: 0.5 };
        let x = query_mixup(&a, &v, &t, half).unwrap();
        let y = query_mixup(&a, &v, &t, MixupWeights::default()).unwrap();
        for (p, q) in x.values().iter().zip(y.values()) {
            assert!((p - q).abs() < 1e-15);
        }
        let zero = MixupWeights { audio: 0.0, video: 0.0, text: 0.0 };
        assert!(query_mixup(&a, &v, &t, zero).is_err());
    }

    #[test]
    fn mlbp_identity_is_hadamard() {
        let p = MlbpParams::identity(3, 2).unwrap();
        let z = mlbp_fuse(&p, &[&ev(&[1.0, 2.0, 3.0]), &ev(&[-1.0, 0.5, 2.0])]).unwrap();
        assert_eq!(z.values(), &[-1.0, 1.0, 6.0]);
        let z = mlbp_fuse(&p, &[&ev(&[1.0, 2.0, 3.0]), &EmbeddingVector::zeros(3)]).unwrap();
        assert!(z.values().iter().all(|&x| x == 0.0));
        assert!(mlbp_fuse(&p, &[&ev(&[1.0, 2.0, 3.0])]).is_err());
        assert!(MlbpParams::identity(3, 1).is_err());
    }

    #[test]
    fn pooled_uniform_vector_is_one() {
        let d = 16;
        let e = ev(&vec![1.0 / (d as f64).sqrt(); d]);
        let targets = RewardTargets {
            audio: Some(e.clone()),
            text: Some(e.clone()),
            video: Some(e.clone()),
        };
        let mlbp = MlbpParams::identity(d, 3).unwrap();
        let r = composite_reward(RewardMode::Pooled, &e, &targets, &mlbp, MixupWeights::default()).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let a = composite_reward(RewardMode::Audio, &e, &targets, &mlbp, MixupWeights::default()).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_modality_errors() {
        let e = ev(&[1.0, 0.0]);
        let targets = RewardTargets {
            audio: Some(e.clone()),
            ..Default::default()
        };
        let mlbp = MlbpParams::identity(2, 3).unwrap();
        assert!(composite_reward(RewardMode::Text, &e, &targets, &mlbp, MixupWeights::default()).is_err());
        assert!(composite_reward(RewardMode::Pooled, &e, &targets, &mlbp, MixupWeights::default()).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in ["audio", "text", "video", "mixup", "pooled"] {
            assert_eq!(m.parse::<RewardMode>().unwrap().to_string(), m);
        }
        assert!("nope".parse::<RewardMode>().is_err());
    }
}
