use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mask_of, prepare_mixture, train_step, QuerySource, RewardSpec, RlConfig, RlExample, TrainState, TrainStepReport};
use crate::error::{Error, Result};
use crate::optim::{AdamState, AdamWConfig};
use crate::reward::RewardTargets;
use crate::seeding::{derive_seed, rng_for};
use crate::separator::{bce_loss, SeparatorModel};
use crate::spectral::{apply_mask_reconstruct, ideal_ratio_mask, stft, StftConfig, IRM_FLOOR};
use crate::synthdata::{Dataset, Split};

pub const INITIAL_CHECKPOINT: &str = "checkpoints/initial.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";
pub const TRAIN_LOG: &str = "logs/train.jsonl";
pub const VALIDATION_LOG: &str = "logs/validation.jsonl";

const TAG_INIT: u64 = 0x494e4954;
const TAG_BATCH: u64 = 0x42415443;
const TAG_WARM: u64 = 0x5741524d;

/// Training examples for one split: every source of every item becomes a
/// query. The audio reward target is the embedding of the ideal-ratio-mask
/// reconstruction of that source.
pub fn examples_from_dataset(
    ds: &Dataset,
    split: Split,
    query: QuerySource,
    reward: &RewardSpec,
) -> Result<Vec<RlExample>> {
    let stft_cfg = StftConfig::default();
    let items = ds.split(split);
    let per_item: Vec<Vec<RlExample>> = items
        .par_iter()
        .map(|item| {
            let mixture = Arc::new(ds.mixture(item)?);
            let mix_spec = stft(&mixture, &stft_cfg)?;
            (0..item.n_sources())
                .map(|k| {
                    let reference = Arc::new(ds.reference(item, k)?);
                    let irm = ideal_ratio_mask(&stft(&reference, &stft_cfg)?, &mix_spec, IRM_FLOOR)?;
                    let audio = reward.embedder.embed(&apply_mask_reconstruct(&mix_spec, &irm)?)?;
                    let text = ds.text_query(item, k)?.clone();
                    let video = ds.video_query(item, k)?.clone();
                    let q = match query {
                        QuerySource::Text => text.values().to_vec(),
                        QuerySource::Video => video.values().to_vec(),
                        QuerySource::Mixup => text.values().iter().zip(video.values()).map(|(a, b)| 0.5 * (a + b)).collect(),
                    };
                    let targets = RewardTargets {
                        audio: Some(audio),
                        text: Some(text),
                        video: Some(video),
                    };
                    RlExample::new(item.clip_id(k), mixture.clone(), Some(reference), q, targets, reward)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

/// Mean reward of the deterministic separation (proposal used as the mask).
pub fn evaluate_reward(model: &SeparatorModel, examples: &[RlExample], reward: &RewardSpec) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let scores: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let (spec, features) = prepare_mixture(&ex.mixture, model.config())?;
            let acts = model.forward_features(&features, &ex.query)?;
            let y = apply_mask_reconstruct(&spec, &mask_of(&spec, acts.proposal().to_vec())?)?;
            reward.score(&y, ex)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Supervised binary cross-entropy against ideal ratio masks. Returns the
/// per-step mean loss.
pub fn warm_start(
    model: &mut SeparatorModel,
    examples: &[RlExample],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = AdamWConfig::with_lr(lr);
    let mut adam = AdamState::new(model.params().len());
    let stft_cfg = StftConfig::default();
    let batch = batch.min(examples.len()).max(1);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rng = rng_for(seed, &[TAG_WARM, step as u64]);
        let idx = sample_indices(&mut rng, examples.len(), batch).into_vec();
        let per: Vec<(f64, Vec<f64>)> = idx
            .par_iter()
            .map(|&i| {
                let ex = &examples[i];
                let reference = ex
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("{} has no reference for warm start", ex.id)))?;
                let (spec, features) = prepare_mixture(&ex.mixture, model.config())?;
                let irm = ideal_ratio_mask(&stft(reference, &stft_cfg)?, &spec, IRM_FLOOR)?;
                let acts = model.forward_features(&features, &ex.query)?;
                let target = irm.values().as_standard_layout().iter().copied().collect::<Vec<_>>();
                let (loss, grad) = bce_loss(acts.proposal(), &target);
                Ok((loss, model.backward_features(&features, &acts, &grad)?))
            })
            .collect::<Result<_>>()?;
        let mut grads = vec![0.0; model.params().len()];
        let mut loss = 0.0;
        for (l, g) in &per {
            loss += l / per.len() as f64;
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b / per.len() as f64;
            }
        }
        model.apply_adamw_step(&grads, &mut adam, &cfg)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Optimizer steps taken when the evaluation ran.
    pub step: usize,
    pub val_reward: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SeparatorModel,
    pub best_model: SeparatorModel,
    pub initial_val_reward: f64,
    pub best_val_reward: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub reports: Vec<TrainStepReport>,
    pub validation: Vec<ValidationRecord>,
    pub elapsed_s: f64,
}

fn save_model(model: &SeparatorModel, dir: &Path, rel: &str, meta: serde_json::Value) -> Result<()> {
    model.to_checkpoint(meta).save(dir.join(rel))
}

fn jsonl_line<T: Serialize>(w: &mut impl Write, value: &T, elapsed_s: Option<f64>) -> Result<()> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    if let (Some(obj), Some(t)) = (v.as_object_mut(), elapsed_s) {
        obj.insert("elapsed_s".into(), serde_json::json!(t));
    }
    writeln!(w, "{v}")?;
    Ok(())
}

/// Initial separator for a run: seeded init, then the optional warm start.
pub fn initial_model(train: &[RlExample], cfg: &RlConfig) -> Result<SeparatorModel> {
    let mut model = SeparatorModel::init(cfg.separator, derive_seed(cfg.seed, &[TAG_INIT]))?;
    if cfg.warm_start_steps > 0 {
        warm_start(
            &mut model,
            train,
            cfg.warm_start_steps,
            cfg.mixtures_per_step(),
            cfg.warm_start_lr,
            cfg.seed,
        )?;
    }
    Ok(model)
}

/// Runs `cfg.steps` policy updates, writing checkpoints and JSONL logs
/// under `out_dir`. Validation reward is measured before training and every
/// `eval_every` steps; the best model is kept and training stops after
/// `patience` evaluations without improvement. With `steps = 0` only the
/// initial checkpoint is written.
pub fn train_loop(
    train: &[RlExample],
    val: &[RlExample],
    reward: &RewardSpec,
    cfg: &RlConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let n_mix = cfg.mixtures_per_step();
    if n_mix > train.len() {
        return Err(Error::Config(format!(
            "{n_mix} mixtures per step but only {} training examples",
            train.len()
        )));
    }
    let start = Instant::now();
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::create_dir_all(out_dir.join("logs"))?;
    let model = initial_model(train, cfg)?;
    save_model(&model, out_dir, INITIAL_CHECKPOINT, serde_json::json!({ "step": 0 }))?;
    let val = if cfg.val_examples > 0 && cfg.val_examples < val.len() {
        &val[..cfg.val_examples]
    } else {
        val
    };
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            best_model: model.clone(),
            model,
            initial_val_reward: f64::NAN,
            best_val_reward: f64::NAN,
            steps_run: 0,
            stopped_early: false,
            reports: Vec::new(),
            validation: Vec::new(),
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }

    let mut train_log = BufWriter::new(File::create(out_dir.join(TRAIN_LOG))?);
    let mut val_log = BufWriter::new(File::create(out_dir.join(VALIDATION_LOG))?);
    let mut state = TrainState::new(model);
    let initial_val_reward = evaluate_reward(&state.model, val, reward)?;
    let mut best_val_reward = initial_val_reward;
    let mut best_model = state.model.clone();
    let mut validation = vec![ValidationRecord {
        step: 0,
        val_reward: initial_val_reward,
        best: true,
    }];
    jsonl_line(&mut val_log, &validation[0], None)?;
    save_model(
        &best_model,
        out_dir,
        BEST_CHECKPOINT,
        serde_json::json!({ "step": 0, "val_reward": best_val_reward }),
    )?;

    let mut reports = Vec::with_capacity(cfg.steps);
    let mut since_best = 0;
    let mut stopped_early = false;
    for step in 0..cfg.steps {
        let mut rng = rng_for(cfg.seed, &[TAG_BATCH, step as u64]);
        let idx = sample_indices(&mut rng, train.len(), n_mix).into_vec();
        let batch: Vec<&RlExample> = idx.iter().map(|&i| &train[i]).collect();
        let report = train_step(&mut state, &batch, reward, cfg)?;
        jsonl_line(&mut train_log, &report, Some(start.elapsed().as_secs_f64()))?;
        reports.push(report);
        let done = step + 1;

        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_model(
                &state.model,
                out_dir,
                &format!("checkpoints/step-{done:06}.ckpt"),
                serde_json::json!({ "step": done }),
            )?;
        }
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let v = evaluate_reward(&state.model, val, reward)?;
            let improved = v > best_val_reward;
            if improved {
                best_val_reward = v;
                best_model = state.model.clone();
                since_best = 0;
                save_model(
                    &best_model,
                    out_dir,
                    BEST_CHECKPOINT,
                    serde_json::json!({ "step": done, "val_reward": v }),
                )?;
            } else {
                since_best += 1;
            }
            let rec = ValidationRecord {
                step: done,
                val_reward: v,
                best: improved,
            };
            jsonl_line(&mut val_log, &rec, None)?;
            validation.push(rec);
            if cfg.patience > 0 && since_best >= cfg.patience && done < cfg.steps {
                stopped_early = true;
                break;
            }
        }
    }
    train_log.flush()?;
    val_log.flush()?;
    save_model(
        &state.model,
        out_dir,
        LAST_CHECKPOINT,
        serde_json::json!({ "step": state.step }),
    )?;
    Ok(TrainOutcome {
        steps_run: state.step,
        model: state.model,
        best_model,
        initial_val_reward,
        best_val_reward,
        stopped_early,
        reports,
        validation,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
