use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::embed::{EmbeddingStore, Modality};
use crate::error::{Error, Result};
use crate::reward::EmbeddingVector;

/// One store record taking part in a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub modality: Modality,
    pub id: String,
    pub class_label: String,
    pub vector: EmbeddingVector,
}

impl Member {
    /// Clip part of a window id (`clip#wN`), or the id itself.
    pub fn clip(&self) -> &str {
        self.id.split_once('#').map_or(self.id.as_str(), |(c, _)| c)
    }

    /// Window index of a window id, if any.
    pub fn window(&self) -> Option<u32> {
        self.id.split_once("#w").and_then(|(_, w)| w.parse().ok())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub anchor: Member,
    pub positive: Member,
    pub negative: Option<Member>,
}

/// Pairs for one curriculum stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub stage: u8,
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn members(store: &EmbeddingStore, modality: Modality) -> Vec<Member> {
    store
        .of_modality(modality)
        .map(|(id, r)| Member {
            modality,
            id: id.to_string(),
            class_label: r.class_label.clone(),
            vector: r.vector.clone(),
        })
        .collect()
}

fn pick<'a, R: Rng + ?Sized>(pool: &[&'a Member], rng: &mut R, what: &str) -> Result<&'a Member> {
    pool.choose(rng)
        .copied()
        .ok_or_else(|| Error::Degenerate(format!("no candidate for {what}")))
}

/// Builds one pair per audio record.
///
/// * stage 1: audio window with the text of its clip;
/// * stage 2: audio with same-class audio from another clip and a
///   different-class audio negative;
/// * stage 3: audio window with the video of the same window, and a video
///   negative that is either another window of the same clip or from a
///   different class.
pub fn build_pairs<R: Rng + ?Sized>(store: &EmbeddingStore, stage: u8, rng: &mut R) -> Result<PairBatch> {
    if !(1..=3).contains(&stage) {
        return Err(Error::invalid(format!("no curriculum stage {stage}")));
    }
    let audio = members(store, Modality::Audio);
    if audio.is_empty() {
        return Err(Error::Degenerate("store has no audio records".into()));
    }
    let labels = store.class_labels();
    if labels.len() < 2 {
        return Err(Error::Degenerate(format!(
            "pair construction needs at least 2 classes, store has {}",
            labels.len()
        )));
    }
    let mut pairs = Vec::with_capacity(audio.len());
    match stage {
        1 => {
            let text: BTreeMap<String, Member> = members(store, Modality::Text)
                .into_iter()
                .map(|m| (m.id.clone(), m))
                .collect();
            for a in &audio {
                let t = text
                    .get(a.clip())
                    .ok_or_else(|| Error::Degenerate(format!("no text record for clip {}", a.clip())))?;
                pairs.push(Pair {
                    anchor: a.clone(),
                    positive: t.clone(),
                    negative: None,
                });
            }
        }
        2 => {
            for a in &audio {
                let same: Vec<&Member> = audio
                    .iter()
                    .filter(|m| m.class_label == a.class_label && m.clip() != a.clip())
                    .collect();
                let other: Vec<&Member> = audio.iter().filter(|m| m.class_label != a.class_label).collect();
                pairs.push(Pair {
                    anchor: a.clone(),
                    positive: pick(&same, rng, &format!("same-class audio of {}", a.id))?.clone(),
                    negative: Some(pick(&other, rng, &format!("other-class audio of {}", a.id))?.clone()),
                });
            }
        }
        _ => {
            let video = members(store, Modality::Video);
            let by_id: BTreeMap<&str, &Member> = video.iter().map(|m| (m.id.as_str(), m)).collect();
            for a in &audio {
                let pos = by_id
                    .get(a.id.as_str())
                    .ok_or_else(|| Error::Degenerate(format!("no aligned video for {}", a.id)))?;
                let misaligned: Vec<&Member> = video
                    .iter()
                    .filter(|m| m.clip() == a.clip() && m.window() != a.window())
                    .collect();
                let other: Vec<&Member> = video.iter().filter(|m| m.class_label != a.class_label).collect();
                let neg = if !misaligned.is_empty() && (other.is_empty() || rng.gen_bool(0.5)) {
                    pick(&misaligned, rng, "misaligned video")?
                } else {
                    pick(&other, rng, &format!("other-class video of {}", a.id))?
                };
                pairs.push(Pair {
                    anchor: a.clone(),
                    positive: (*pos).clone(),
                    negative: Some(neg.clone()),
                });
            }
        }
    }
    Ok(PairBatch { stage, pairs })
}

/// Seeded shuffle, then the last `ceil(val_fraction * n)` pairs (at least 2
/// when possible) become the validation split.
pub fn split_pairs<R: Rng + ?Sized>(batch: &PairBatch, val_fraction: f64, rng: &mut R) -> (PairBatch, PairBatch) {
    let mut pairs = batch.pairs.clone();
    pairs.shuffle(rng);
    let n = pairs.len();
    let mut n_val = (val_fraction * n as f64).ceil() as usize;
    if val_fraction > 0.0 && n >= 4 {
        n_val = n_val.max(2);
    }
    let val = pairs.split_off(n - n_val.min(n));
    (
        PairBatch {
            stage: batch.stage,
            pairs,
        },
        PairBatch {
            stage: batch.stage,
            pairs: val,
        },
    )
}
