use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pairs::{build_pairs, split_pairs, Member, Pair, PairBatch};
use super::{info_nce_symmetric, stage2_loss, stage3_loss, LossGrad, Replay, Stage2Weights, Stage3Weights};
use crate::checkpoint::Checkpoint;
use crate::embed::{EmbeddingStore, Modality, ProjectCache, ProjectionHead, Temperature};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::seeding::rng_for;

pub const ALIGN_HEADS_KIND: &str = "alignment-heads";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
    pub margin: f64,
    /// Size of replay batches relative to the stage batch.
    pub replay_fraction: f64,
    pub val_fraction: f64,
    pub init_tau: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            stage3: StageConfig::default(),
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            mu1: 1.0,
            mu2: 1.0,
            mu3: 0.25,
            mu4: 0.25,
            margin: 0.2,
            replay_fraction: 0.25,
            val_fraction: 0.1,
            init_tau: 0.2,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let coefs = [self.lambda1, self.lambda2, self.lambda3, self.mu1, self.mu2, self.mu3, self.mu4];
        if coefs.iter().any(|c| !(*c >= 0.0)) || !(self.margin >= 0.0) {
            return Err(Error::Config("loss coefficients and margin must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("replay_fraction must be in [0, 1] and val_fraction in [0, 1)".into()));
        }
        if !(self.init_tau > 0.0) {
            return Err(Error::Config("init_tau must be positive".into()));
        }
        for s in [self.stage1, self.stage2, self.stage3] {
            if s.batch_size < 2 {
                return Err(Error::Config("alignment batch_size must be at least 2".into()));
            }
            AdamWConfig {
                lr: s.lr,
                weight_decay: s.weight_decay,
                ..AdamWConfig::default()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn stage(&self, stage: u8) -> StageConfig {
        match stage {
            1 => self.stage1,
            2 => self.stage2,
            _ => self.stage3,
        }
    }

    pub fn stage2_weights(&self) -> Stage2Weights {
        Stage2Weights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            margin: self.margin,
        }
    }

    pub fn stage3_weights(&self) -> Stage3Weights {
        Stage3Weights {
            mu1: self.mu1,
            mu2: self.mu2,
            mu3: self.mu3,
            mu4: self.mu4,
            margin: self.margin,
            stage2: self.stage2_weights(),
        }
    }
}

/// The trainable part of alignment: one head per modality and the shared
/// temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignHeads {
    pub audio: ProjectionHead,
    pub text: ProjectionHead,
    pub vision: ProjectionHead,
    pub temperature: Temperature,
}

impl AlignHeads {
    pub fn identity(dim: usize, tau: f64) -> Self {
        Self {
            audio: ProjectionHead::identity(dim),
            text: ProjectionHead::identity(dim),
            vision: ProjectionHead::identity(dim),
            temperature: Temperature::from_tau(tau),
        }
    }

    pub fn dim(&self) -> usize {
        self.audio.dim()
    }

    pub fn head(&self, modality: Modality) -> &ProjectionHead {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
            Modality::Video => &self.vision,
        }
    }

    fn slot(&self, modality: Modality) -> usize {
        modality.code() as usize * self.audio.n_params()
    }

    /// Audio, text and vision parameters followed by `log_tau`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.audio.flat_params();
        v.extend(self.text.flat_params());
        v.extend(self.vision.flat_params());
        v.push(self.temperature.log_tau);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.audio.n_params();
        if flat.len() != 3 * n + 1 {
            return Err(Error::shape(3 * n + 1, flat.len()));
        }
        self.audio.set_flat_params(&flat[..n])?;
        self.text.set_flat_params(&flat[n..2 * n])?;
        self.vision.set_flat_params(&flat[2 * n..3 * n])?;
        self.temperature.log_tau = flat[3 * n];
        Ok(())
    }

    /// Flat indices trained in `stage`: audio and text heads in stage 1,
    /// audio in stage 2, audio and vision in stage 3; temperature always.
    pub fn trainable(&self, stage: u8) -> Vec<usize> {
        let n = self.audio.n_params();
        let heads: &[Modality] = match stage {
            1 => &[Modality::Audio, Modality::Text],
            2 => &[Modality::Audio],
            _ => &[Modality::Audio, Modality::Video],
        };
        let mut idx: Vec<usize> = heads.iter().flat_map(|m| self.slot(*m)..self.slot(*m) + n).collect();
        idx.push(3 * n);
        idx
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut m = serde_json::json!({ "dim": self.dim() });
        if let (Some(obj), serde_json::Value::Object(extra)) = (m.as_object_mut(), meta) {
            obj.extend(extra);
        }
        Checkpoint::new(ALIGN_HEADS_KIND, m)
            .with_array("audio", self.audio.flat_params())
            .with_array("text", self.text.flat_params())
            .with_array("vision", self.vision.flat_params())
            .with_array("log_tau", vec![self.temperature.log_tau])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ALIGN_HEADS_KIND)?;
        let dim = ck.meta["dim"]
            .as_u64()
            .ok_or_else(|| Error::Format("alignment checkpoint lacks dim".into()))? as usize;
        let mut heads = Self::identity(dim, 1.0);
        heads.audio.set_flat_params(ck.array("audio")?)?;
        heads.text.set_flat_params(ck.array("text")?)?;
        heads.vision.set_flat_params(ck.array("vision")?)?;
        heads.temperature.log_tau = *ck
            .array("log_tau")?
            .first()
            .ok_or_else(|| Error::Format("empty log_tau".into()))?;
        Ok(heads)
    }
}

/// Projected members of one batch slot with their caches.
struct Projected {
    z: Array2<f64>,
    caches: Vec<(Modality, ProjectCache)>,
}

fn project(heads: &AlignHeads, members: &[&Member]) -> Result<Projected> {
    let d = heads.dim();
    let mut z = Array2::zeros((members.len(), d));
    let mut caches = Vec::with_capacity(members.len());
    for (i, m) in members.iter().enumerate() {
        let c = heads.head(m.modality).project_with_cache(&m.vector)?;
        z.row_mut(i).assign(c.output());
        caches.push((m.modality, c));
    }
    Ok(Projected { z, caches })
}

fn backprop(heads: &AlignHeads, p: &Projected, dz: &Array2<f64>, grads: &mut [f64]) -> Result<()> {
    let n = heads.audio.n_params();
    for (i, (m, cache)) in p.caches.iter().enumerate() {
        let row = dz.row(i);
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        let g = heads.head(*m).backward(cache, row.as_slice().expect("row-major"))?;
        let off = heads.slot(*m);
        for (a, b) in grads[off..off + n].iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok(())
}

fn slots<'a>(pairs: &[&'a Pair]) -> Result<[Vec<&'a Member>; 3]> {
    let a = pairs.iter().map(|p| &p.anchor).collect();
    let p = pairs.iter().map(|p| &p.positive).collect();
    let n = pairs
        .iter()
        .map(|p| p.negative.as_ref().ok_or_else(|| Error::invalid("pair without a negative")))
        .collect::<Result<_>>()?;
    Ok([a, p, n])
}

/// Loss of one stage batch (with optional replay batches) and its gradient
/// with respect to all flat head parameters.
pub fn stage_loss_and_grads(
    heads: &AlignHeads,
    stage: u8,
    batch: &[&Pair],
    replay1: &[&Pair],
    replay2: &[&Pair],
    cfg: &AlignConfig,
) -> Result<(f64, Vec<f64>)> {
    let tau = heads.temperature;
    let mut grads = vec![0.0; heads.flat_params().len()];
    let n_heads = 3 * heads.audio.n_params();
    let anchors: Vec<&Member> = batch.iter().map(|p| &p.anchor).collect();
    let positives: Vec<&Member> = batch.iter().map(|p| &p.positive).collect();
    let za = project(heads, &anchors)?;
    let zp = project(heads, &positives)?;

    let add_info_nce = |lg: LossGrad, a: &Projected, b: &Projected, w: f64, grads: &mut [f64]| -> Result<f64> {
        backprop(heads, a, &(&lg.grads[0] * w), grads)?;
        backprop(heads, b, &(&lg.grads[1] * w), grads)?;
        grads[n_heads] += w * lg.d_log_tau;
        Ok(w * lg.loss)
    };

    let mut loss = 0.0;
    match stage {
        1 => {
            let lg = info_nce_symmetric(&za.z, &zp.z, tau)?;
            loss += add_info_nce(lg, &za, &zp, 1.0, &mut grads)?;
        }
        2 => {
            let [_, _, negs] = slots(batch)?;
            let zn = project(heads, &negs)?;
            let lg = stage2_loss(&za.z, &zp.z, &zn.z, &cfg.stage2_weights(), tau)?;
            backprop(heads, &za, &lg.grads[0], &mut grads)?;
            backprop(heads, &zp, &lg.grads[1], &mut grads)?;
            backprop(heads, &zn, &lg.grads[2], &mut grads)?;
            grads[n_heads] += lg.d_log_tau;
            loss += lg.loss;
            if replay1.len() >= 2 {
                let ra = project(heads, &replay1.iter().map(|p| &p.anchor).collect::<Vec<_>>())?;
                let rt = project(heads, &replay1.iter().map(|p| &p.positive).collect::<Vec<_>>())?;
                let lg = info_nce_symmetric(&ra.z, &rt.z, tau)?;
                loss += add_info_nce(lg, &ra, &rt, 1.0, &mut grads)?;
            }
        }
        _ => {
            let [_, _, negs] = slots(batch)?;
            let zn = project(heads, &negs)?;
            let w = cfg.stage3_weights();
            let r1 = if w.mu3 != 0.0 && replay1.len() >= 2 {
                Some((
                    project(heads, &replay1.iter().map(|p| &p.anchor).collect::<Vec<_>>())?,
                    project(heads, &replay1.iter().map(|p| &p.positive).collect::<Vec<_>>())?,
                ))
            } else {
                None
            };
            let r2 = if w.mu4 != 0.0 && !replay2.is_empty() {
                let [a, p, n] = slots(replay2)?;
                Some((project(heads, &a)?, project(heads, &p)?, project(heads, &n)?))
            } else {
                None
            };
            let w = Stage3Weights {
                mu3: if r1.is_some() { w.mu3 } else { 0.0 },
                mu4: if r2.is_some() { w.mu4 } else { 0.0 },
                ..w
            };
            let replay = Replay {
                stage1: r1.as_ref().map(|(a, t)| (&a.z, &t.z)),
                stage2: r2.as_ref().map(|(a, p, n)| (&a.z, &p.z, &n.z)),
            };
            let lg = stage3_loss(&za.z, &zp.z, &zn.z, replay, &w, tau)?;
            backprop(heads, &za, &lg.grads[0], &mut grads)?;
            backprop(heads, &zp, &lg.grads[1], &mut grads)?;
            backprop(heads, &zn, &lg.grads[2], &mut grads)?;
            if let Some((a, t)) = &r1 {
                backprop(heads, a, &lg.grads[3], &mut grads)?;
                backprop(heads, t, &lg.grads[4], &mut grads)?;
            }
            if let Some((a, p, n)) = &r2 {
                backprop(heads, a, &lg.grads[5], &mut grads)?;
                backprop(heads, p, &lg.grads[6], &mut grads)?;
                backprop(heads, n, &lg.grads[7], &mut grads)?;
            }
            grads[n_heads] += lg.d_log_tau;
            loss += lg.loss;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite stage-{stage} loss")));
    }
    Ok((loss, grads))
}

/// Outcome of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub stage: u8,
    pub initial: AlignHeads,
    pub best: AlignHeads,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// 0 when no epoch improved on the initial heads.
    pub best_epoch: usize,
    pub val_history: Vec<f64>,
    pub train_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    /// Number of stages completed.
    pub stage: u8,
    pub heads: AlignHeads,
    pub stages: Vec<StageResult>,
}

fn chunks_of<'a>(pairs: &'a [Pair], size: usize) -> Vec<Vec<&'a Pair>> {
    let mut out: Vec<Vec<&Pair>> = pairs.chunks(size).map(|c| c.iter().collect()).collect();
    // a trailing singleton cannot form an in-batch contrast
    if out.len() > 1 && out.last().map_or(false, |c| c.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Mean primary-objective loss of `stage` over `pairs`, in fixed-size chunks.
fn validation_loss(heads: &AlignHeads, stage: u8, pairs: &[Pair], cfg: &AlignConfig) -> Result<f64> {
    let batches = chunks_of(pairs, cfg.stage(stage).batch_size);
    if batches.is_empty() || batches.iter().any(|b| b.len() < 2) {
        return Err(Error::Degenerate(format!("stage {stage} has fewer than 2 validation pairs")));
    }
    let mut total = 0.0;
    for b in &batches {
        total += stage_loss_and_grads(heads, stage, b, &[], &[], cfg)?.0;
    }
    Ok(total / batches.len() as f64)
}

fn replay_sample<'a>(pool: &'a [Pair], n: usize, rng: &mut impl rand::Rng) -> Vec<&'a Pair> {
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    rand::seq::index::sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| &pool[i])
        .collect()
}

/// Runs the three stages on `store`. Each stage starts from the previous
/// stage's best heads, is trained on 90% of its pairs and keeps the heads
/// with the lowest loss on the held-out rest.
pub fn run_curriculum(store: &EmbeddingStore, cfg: &AlignConfig, init: AlignHeads) -> Result<CurriculumState> {
    cfg.validate()?;
    if init.dim() != store.dim() {
        return Err(Error::shape(store.dim(), init.dim()));
    }
    let mut splits: Vec<(PairBatch, PairBatch)> = Vec::new();
    for stage in 1..=3u8 {
        let mut rng = rng_for(cfg.seed, &[0x5041, stage as u64]);
        let all = build_pairs(store, stage, &mut rng)?;
        splits.push(split_pairs(&all, cfg.val_fraction, &mut rng));
    }

    let mut heads = init;
    let mut stages = Vec::new();
    for stage in 1..=3u8 {
        let sc = cfg.stage(stage);
        let (train, val) = &splits[stage as usize - 1];
        let initial = heads.clone();
        let initial_val_loss = validation_loss(&heads, stage, &val.pairs, cfg)?;
        let mut best = (initial_val_loss, heads.clone(), 0usize);
        let trainable = heads.trainable(stage);
        let opt = AdamWConfig {
            lr: sc.lr,
            weight_decay: sc.weight_decay,
            ..AdamWConfig::default()
        };
        let mut adam = AdamState::new(trainable.len());
        let mut val_history = Vec::with_capacity(sc.epochs);
        let mut train_history = Vec::with_capacity(sc.epochs);
        let n_replay = (cfg.replay_fraction * sc.batch_size as f64).round() as usize;
        for epoch in 1..=sc.epochs {
            let mut rng = rng_for(cfg.seed, &[0x4550, stage as u64, epoch as u64]);
            let mut order = train.pairs.clone();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let batches = chunks_of(&order, sc.batch_size);
            for b in &batches {
                let r1 = if stage >= 2 { replay_sample(&splits[0].0.pairs, n_replay, &mut rng) } else { Vec::new() };
                let r2 = if stage == 3 { replay_sample(&splits[1].0.pairs, n_replay, &mut rng) } else { Vec::new() };
                let (loss, grads) = stage_loss_and_grads(&heads, stage, b, &r1, &r2, cfg)?;
                epoch_loss += loss / batches.len() as f64;
                let mut flat = heads.flat_params();
                let mut sub: Vec<f64> = trainable.iter().map(|&i| flat[i]).collect();
                let sub_grads: Vec<f64> = trainable.iter().map(|&i| grads[i]).collect();
                adamw_step(&mut sub, &sub_grads, &mut adam, &opt)?;
                for (&i, v) in trainable.iter().zip(sub) {
                    flat[i] = v;
                }
                heads.set_flat_params(&flat)?;
            }
            let v = validation_loss(&heads, stage, &val.pairs, cfg)?;
            if v < best.0 {
                best = (v, heads.clone(), epoch);
            }
            val_history.push(v);
            train_history.push(epoch_loss);
        }
        heads = best.1.clone();
        stages.push(StageResult {
            stage,
            initial,
            best: best.1,
            initial_val_loss,
            best_val_loss: best.0,
            best_epoch: best.2,
            val_history,
            train_history,
        });
    }
    Ok(CurriculumState {
        stage: 3,
        heads,
        stages,
    })
}
