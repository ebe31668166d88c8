//! Embedding providers: the synthetic oracle embedder, the waveform
//! embedder for separated audio, the on-disk store, and the trainable
//! projection heads with their shared temperature.

mod audio;
mod head;
mod store;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::EmbeddingVector;
use crate::seeding::rng_for;

pub use audio::{embed_audio_waveform, AudioEmbedder, AudioFeatureConfig, AUDIO_EMBEDDER_KIND};
pub use head::{ProjectCache, ProjectionHead, Temperature};
pub use store::{read_manifest, write_manifest, EmbeddingStore, ManifestRecord, StoreRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Video];

    pub fn code(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Text => 1,
            Modality::Video => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Audio),
            1 => Ok(Modality::Text),
            2 => Ok(Modality::Video),
            c => Err(Error::Format(format!("unknown modality code {c}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
            Modality::Video => "video",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            "video" => Ok(Modality::Video),
            other => Err(Error::Format(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub dim: usize,
    pub classes: usize,
    /// Per-component standard deviation of instance and window noise.
    pub sigma: f64,
    /// Norm of each modality's offset vector.
    pub offset_norm: f64,
    /// Frames averaged into one video clip embedding.
    pub video_frames: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 4,
            sigma: 0.05,
            offset_norm: 0.3,
            video_frames: 4,
            seed: 7,
        }
    }
}

/// What the oracle needs to know about one synthetic item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OracleItem {
    pub class: usize,
    pub seed: u64,
    /// Temporal alignment window. Audio and video of the same item and
    /// window share a noise component; text ignores it.
    pub window: u32,
}

impl OracleItem {
    pub fn new(class: usize, seed: u64) -> Self {
        Self {
            class,
            seed,
            window: 0,
        }
    }

    pub fn in_window(self, window: u32) -> Self {
        Self { window, ..self }
    }
}

/// Deterministic class-structured embeddings standing in for frozen encoders.
///
/// `embed = unit(anchor[c] + offset[m] + sigma * noise)`. Class anchors are
/// signed standard basis vectors picked by a seeded permutation, so they
/// are exactly orthonormal whenever `classes <= dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEmbedder {
    config: OracleConfig,
    anchors: Vec<Vec<f64>>,
    offsets: [Vec<f64>; 3],
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

const TAG_ANCHOR: u64 = 1;
const TAG_OFFSET: u64 = 2;
const TAG_INSTANCE: u64 = 3;
const TAG_WINDOW: u64 = 4;

impl OracleEmbedder {
    pub fn new(config: OracleConfig) -> Result<Self> {
        if config.dim == 0 || config.classes == 0 || config.video_frames == 0 {
            return Err(Error::Config(format!("oracle sizes must be positive: {config:?}")));
        }
        if !(config.sigma >= 0.0 && config.offset_norm >= 0.0) {
            return Err(Error::Config(format!("oracle scales must be non-negative: {config:?}")));
        }
        let mut rng = rng_for(config.seed, &[TAG_ANCHOR]);
        let anchors = if config.classes <= config.dim {
            let mut idx: Vec<usize> = (0..config.dim).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            idx[..config.classes]
                .iter()
                .map(|&i| {
                    let mut v = vec![0.0; config.dim];
                    v[i] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    v
                })
                .collect()
        } else {
            (0..config.classes)
                .map(|_| {
                    let mut v = gaussian(&mut rng, config.dim);
                    unit(&mut v);
                    v
                })
                .collect()
        };
        let offsets = Modality::ALL.map(|m| {
            let mut v = gaussian(&mut rng_for(config.seed, &[TAG_OFFSET, m.code() as u64]), config.dim);
            unit(&mut v);
            v.iter_mut().for_each(|x| *x *= config.offset_norm);
            v
        });
        Ok(Self {
            config,
            anchors,
            offsets,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn anchor(&self, class: usize) -> Result<&[f64]> {
        self.anchors
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown class {class} (have {})", self.classes())))
    }

    /// The noise-free embedding `unit(anchor[c] + offset[m])`.
    pub fn class_center(&self, modality: Modality, class: usize) -> Result<EmbeddingVector> {
        let mut v: Vec<f64> = self
            .anchor(class)?
            .iter()
            .zip(&self.offsets[modality.code() as usize])
            .map(|(a, o)| a + o)
            .collect();
        unit(&mut v);
        EmbeddingVector::new(v)
    }

    fn single(&self, modality: Modality, item: OracleItem, frame: u64) -> Result<Vec<f64>> {
        let d = self.dim();
        let sigma = self.config.sigma;
        let mut v: Vec<f64> = self
            .anchor(item.class)?
            .iter()
            .zip(&self.offsets[modality.code() as usize])
            .map(|(a, o)| a + o)
            .collect();
        if sigma > 0.0 {
            let window = if modality == Modality::Text { 0 } else { item.window as u64 };
            let inst = gaussian(
                &mut rng_for(self.config.seed, &[TAG_INSTANCE, item.seed, modality.code() as u64, window, frame]),
                d,
            );
            v.iter_mut().zip(&inst).for_each(|(x, n)| *x += sigma * n);
            if modality != Modality::Text {
                let win = gaussian(&mut rng_for(self.config.seed, &[TAG_WINDOW, item.seed, item.window as u64]), d);
                v.iter_mut().zip(&win).for_each(|(x, n)| *x += sigma * n);
            }
        }
        unit(&mut v);
        Ok(v)
    }

    /// Unit-norm embedding of `item` as seen through `modality`. Video is
    /// the normalized mean of per-frame embeddings.
    pub fn embed(&self, modality: Modality, item: OracleItem) -> Result<EmbeddingVector> {
        let v = match modality {
            Modality::Video => {
                let mut acc = vec![0.0; self.dim()];
                for frame in 0..self.config.video_frames as u64 {
                    let f = self.single(modality, item, frame)?;
                    acc.iter_mut().zip(&f).for_each(|(a, x)| *a += x);
                }
                if acc.iter().all(|&x| x == 0.0) {
                    return Err(Error::Degenerate("video frames cancel to zero".into()));
                }
                unit(&mut acc);
                acc
            }
            _ => self.single(modality, item, 0)?,
        };
        EmbeddingVector::new(v)
    }
}

/// `oracle.embed(modality, item)`.
pub fn oracle_embed(oracle: &OracleEmbedder, modality: Modality, item: OracleItem) -> Result<EmbeddingVector> {
    oracle.embed(modality, item)
}
