use serde::Serialize;

use super::curriculum::AlignHeads;
use crate::embed::Modality;
use crate::error::{Error, Result};
use crate::reward::{cosine_sim, EmbeddingVector};
use crate::synthdata::{Dataset, DatasetItem};

/// Embeddings of one evaluation item: the text query of the target source,
/// the clean target audio and the target-plus-interference mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GapItem {
    pub id: String,
    pub text: EmbeddingVector,
    pub target: EmbeddingVector,
    pub mixture: EmbeddingVector,
}

/// Builds one gap item per source of each dataset item, the other source
/// acting as interference. Waveforms go through the dataset's audio embedder.
pub fn gap_items(ds: &Dataset, items: &[&DatasetItem]) -> Result<Vec<GapItem>> {
    let mut out = Vec::new();
    for it in items {
        let mixture = ds.embedder().embed(&ds.mixture(it)?)?;
        for k in 0..it.n_sources() {
            let clip = it.clip_id(k);
            out.push(GapItem {
                text: ds.store().require(Modality::Text, &clip)?.vector.clone(),
                target: ds.embedder().embed(&ds.reference(it, k)?)?,
                mixture: mixture.clone(),
                id: clip,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

/// Mean and spread of `sim(text, target) - sim(text, mixture)` in the
/// projected space.
pub fn discrimination_gap(items: &[GapItem], heads: &AlignHeads) -> Result<GapStats> {
    if items.len() < 2 {
        return Err(Error::Degenerate(format!(
            "discrimination gap needs at least 2 items, got {}",
            items.len()
        )));
    }
    let mut diffs = Vec::with_capacity(items.len());
    for it in items {
        let t = heads.text.project(&it.text)?;
        let a = heads.audio.project(&it.target)?;
        let m = heads.audio.project(&it.mixture)?;
        diffs.push(cosine_sim(&t, &a)? - cosine_sim(&t, &m)?);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok(GapStats {
        mean,
        std: var.sqrt(),
        n: diffs.len(),
    })
}
