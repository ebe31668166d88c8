//! Clipped-surrogate policy optimization of the separator.
//!
//! One training step samples masks from a frozen copy of the model, scores
//! the reconstructions with the multimodal reward, turns rewards into
//! group-normalized advantages against an EMA baseline and takes a single
//! AdamW step on
//!
//! ```text
//! J = mean_i [ min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i) + l_H H_i - l_KL KL_i ]
//! ```
//!
//! where `r_i` is the ratio of total mask log-densities under the live and
//! frozen policies. The frozen copy is refreshed after every step.

mod train;

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::AudioEmbedder;
use crate::error::{Error, Result};
use crate::optim::{AdamState, AdamWConfig};
use crate::policy::{sample_mask, KappaSchedule, TensorShape};
use crate::reward::{cosine_sim, EmbeddingVector, MixupWeights, MlbpParams, RewardMode, RewardTargets};
use crate::seeding::rng_for;
use crate::separator::{build_features, Activations, Features, ModelSnapshot, SeparatorConfig, SeparatorModel};
use crate::spectral::{apply_mask_reconstruct, stft, Mask, Spectrogram, StftConfig, Waveform};
use crate::special::gamma_family;

pub use train::{
    evaluate_reward, examples_from_dataset, initial_model, train_loop, warm_start, TrainOutcome, ValidationRecord,
    BEST_CHECKPOINT, INITIAL_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG, VALIDATION_LOG,
};

/// Differences of log-probabilities are clamped to this before `exp`.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

/// How rewards are grouped before advantage normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageGroup {
    /// Every sampled mask in the minibatch forms one group.
    #[default]
    Batch,
    /// The `mc_samples` masks drawn for the same mixture form a group.
    Mixture,
}

/// Which stored query embedding conditions the separator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Text,
    Video,
    /// Average of the text and video queries.
    #[default]
    Mixup,
}

impl std::str::FromStr for QuerySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "video" => Ok(Self::Video),
            "mixup" => Ok(Self::Mixup),
            _ => Err(Error::Config(format!("unknown query source {s:?}"))),
        }
    }
}

impl std::str::FromStr for AdvantageGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "mixture" => Ok(Self::Mixture),
            _ => Err(Error::Config(format!("unknown advantage group {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub kl_coef: f64,
    pub ema_beta: f64,
    pub grpo_enabled: bool,
    pub grpo_eps: f64,
    /// Masks sampled per mixture.
    pub mc_samples: usize,
    pub steps: usize,
    /// Sampled masks per step; `batch_size / mc_samples` mixtures.
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub kappa: KappaSchedule,
    pub reward_mode: RewardMode,
    pub mixup_weights: MixupWeights,
    pub query: QuerySource,
    pub advantage_group: AdvantageGroup,
    /// Use per-bin means of entropy and KL instead of sums over bins.
    pub per_bin_regularizers: bool,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping early; 0 disables.
    pub patience: usize,
    /// Steps between periodic checkpoints; 0 keeps only initial/best/last.
    pub checkpoint_every: usize,
    /// Cap on validation examples per evaluation; 0 uses all.
    pub val_examples: usize,
    /// Length of the random excerpt each rollout trains on; 0 uses whole
    /// clips. Validation always scores whole clips.
    pub crop_samples: usize,
    /// Supervised steps against ideal ratio masks before policy training.
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    pub separator: SeparatorConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            entropy_coef: 0.1,
            kl_coef: 0.01,
            ema_beta: 0.92,
            grpo_enabled: true,
            grpo_eps: 1e-6,
            mc_samples: 1,
            steps: 2000,
            batch_size: 16,
            seed: 0,
            lr: 2e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            kappa: KappaSchedule::default(),
            reward_mode: RewardMode::Pooled,
            mixup_weights: MixupWeights::default(),
            query: QuerySource::Mixup,
            advantage_group: AdvantageGroup::Batch,
            per_bin_regularizers: true,
            eval_every: 100,
            patience: 10,
            checkpoint_every: 0,
            val_examples: 0,
            crop_samples: 16384,
            warm_start_steps: 0,
            warm_start_lr: 1e-3,
            separator: SeparatorConfig::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip_epsilon must be in (0, 1), got {}", self.clip_epsilon));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad(format!("ema_beta must be in [0, 1), got {}", self.ema_beta));
        }
        if !(self.grpo_eps > 0.0) {
            return bad(format!("grpo_eps must be positive, got {}", self.grpo_eps));
        }
        if !(self.entropy_coef >= 0.0 && self.kl_coef >= 0.0) {
            return bad("entropy_coef and kl_coef must be non-negative".into());
        }
        if self.mc_samples == 0 || self.batch_size == 0 || self.batch_size % self.mc_samples != 0 {
            return bad(format!(
                "batch_size ({}) must be a positive multiple of mc_samples ({})",
                self.batch_size, self.mc_samples
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if self.separator.sources != 1 {
            return bad("policy training supports a single target source per query".into());
        }
        self.kappa.validate()?;
        self.separator.validate()?;
        self.optimizer().validate()?;
        AdamWConfig::with_lr(self.warm_start_lr).validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }

    pub fn mixtures_per_step(&self) -> usize {
        self.batch_size / self.mc_samples
    }
}

/// `b' = beta b + (1 - beta) mean`.
pub fn update_baseline(b: f64, batch_mean_reward: f64, ema_beta: f64) -> f64 {
    ema_beta * b + (1.0 - ema_beta) * batch_mean_reward
}

/// `(A - mean) / (std + eps)` with the population standard deviation, or
/// `A` unchanged when disabled. Exactly zero when all entries are equal.
pub fn normalize_advantages(a: &[f64], eps: f64, enabled: bool) -> Vec<f64> {
    if !enabled || a.is_empty() {
        return a.to_vec();
    }
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    if a.iter().all(|&x| x == a[0]) {
        return vec![0.0; a.len()];
    }
    let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    a.iter().map(|x| (x - mean) / (std + eps)).collect()
}

/// Normalizes `a` within consecutive groups of `group` entries.
pub fn normalize_grouped(a: &[f64], group: usize, eps: f64, enabled: bool) -> Vec<f64> {
    a.chunks(group.max(1))
        .flat_map(|g| normalize_advantages(g, eps, enabled))
        .collect()
}

/// `exp(logp_new - logp_old)` with the difference clamped to `[-20, 20]`.
pub fn importance_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Unclipped,
    Clipped,
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` and the argument attaining it;
/// ties go to the unclipped branch. The clipped branch only wins when the
/// clip binds, so its ratio-gradient is zero.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip_epsilon: f64) -> (f64, Branch) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv;
    if clipped < unclipped {
        (clipped, Branch::Clipped)
    } else {
        (unclipped, Branch::Unclipped)
    }
}

/// Per-sample inputs of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerm {
    pub ratio: f64,
    pub advantage: f64,
    pub entropy: f64,
    pub kl: f64,
}

/// `J` and its partial derivatives with respect to each sample's log
/// density, entropy and KL term.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub objective: f64,
    pub surrogate: f64,
    pub entropy: f64,
    pub kl: f64,
    pub fraction_clipped: f64,
    pub d_logp: Vec<f64>,
    pub d_entropy: f64,
    pub d_kl: f64,
}

/// `J = mean_i [surrogate_i + l_H H_i - l_KL KL_i]`. The advantage is a
/// single scalar per sample, so its weight is shared by every bin of that
/// sample's log density.
pub fn rl_objective(terms: &[ObjectiveTerm], cfg: &RlConfig) -> Result<ObjectiveValue> {
    if terms.is_empty() {
        return Err(Error::invalid("objective over an empty batch"));
    }
    let n = terms.len() as f64;
    let mut out = ObjectiveValue {
        objective: 0.0,
        surrogate: 0.0,
        entropy: 0.0,
        kl: 0.0,
        fraction_clipped: 0.0,
        d_logp: Vec::with_capacity(terms.len()),
        d_entropy: cfg.entropy_coef / n,
        d_kl: -cfg.kl_coef / n,
    };
    for t in terms {
        if ![t.ratio, t.advantage, t.entropy, t.kl].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("objective term {t:?}")));
        }
        let (surr, branch) = clipped_surrogate(t.ratio, t.advantage, cfg.clip_epsilon);
        out.surrogate += surr / n;
        out.entropy += t.entropy / n;
        out.kl += t.kl / n;
        out.objective += (surr + cfg.entropy_coef * t.entropy - cfg.kl_coef * t.kl) / n;
        // d(r A)/d logp = r A; zero when the clip binds
        out.d_logp.push(match branch {
            Branch::Unclipped => t.ratio * t.advantage / n,
            Branch::Clipped => {
                out.fraction_clipped += 1.0 / n;
                0.0
            }
        });
    }
    Ok(out)
}

/// One training query: a mixture, the conditioning vector and the reward
/// anchor it is scored against.
#[derive(Debug, Clone)]
pub struct RlExample {
    pub id: String,
    pub mixture: Arc<Waveform>,
    pub reference: Option<Arc<Waveform>>,
    pub query: Vec<f64>,
    pub targets: RewardTargets,
    /// Unit vector the separated audio embedding is compared with.
    pub anchor: EmbeddingVector,
}

impl RlExample {
    pub fn new(
        id: impl Into<String>,
        mixture: Arc<Waveform>,
        reference: Option<Arc<Waveform>>,
        query: Vec<f64>,
        targets: RewardTargets,
        reward: &RewardSpec,
    ) -> Result<Self> {
        let anchor = targets.anchor(reward.mode, &reward.mlbp, reward.mixup_weights)?;
        Ok(Self {
            id: id.into(),
            mixture,
            reference,
            query,
            targets,
            anchor,
        })
    }
}

impl RlExample {
    /// The same query restricted to `len` samples starting at `start`. The
    /// audio reward target is recomputed from the excerpt's ideal ratio mask.
    pub fn excerpt(&self, start: usize, len: usize, reward: &RewardSpec) -> Result<RlExample> {
        let n = self.mixture.len();
        if len == 0 || start + len > n {
            return Err(Error::invalid(format!("excerpt {start}+{len} outside {n} samples")));
        }
        let cut = |w: &Waveform| Waveform::new(w.samples()[start..start + len].to_vec(), w.sample_rate());
        let mixture = cut(&self.mixture)?;
        let mut targets = self.targets.clone();
        let reference = match &self.reference {
            Some(r) => {
                let r = cut(r)?;
                let cfg = StftConfig::default();
                let mix_spec = stft(&mixture, &cfg)?;
                let irm = crate::spectral::ideal_ratio_mask(&stft(&r, &cfg)?, &mix_spec, crate::spectral::IRM_FLOOR)?;
                targets.audio = Some(reward.embedder.embed(&apply_mask_reconstruct(&mix_spec, &irm)?)?);
                Some(Arc::new(r))
            }
            None => None,
        };
        RlExample::new(
            format!("{}@{start}", self.id),
            Arc::new(mixture),
            reference,
            self.query.clone(),
            targets,
            reward,
        )
    }
}

/// Everything needed to turn a separated waveform into a scalar reward.
#[derive(Debug, Clone)]
pub struct RewardSpec {
    pub mode: RewardMode,
    pub mlbp: MlbpParams,
    pub mixup_weights: MixupWeights,
    pub embedder: AudioEmbedder,
}

impl RewardSpec {
    pub fn new(mode: RewardMode, mixup_weights: MixupWeights, embedder: AudioEmbedder) -> Result<Self> {
        Ok(Self {
            mode,
            mlbp: MlbpParams::identity(embedder.dim(), 3)?,
            mixup_weights,
            embedder,
        })
    }

    /// Cosine between the embedding of `separated` and the example anchor.
    pub fn score(&self, separated: &Waveform, example: &RlExample) -> Result<f64> {
        cosine_sim(&self.embedder.embed(separated)?, &example.anchor)
    }
}

/// Per-bin Beta parameters of a proposal with the special-function values
/// the objective needs.
#[derive(Debug, Clone)]
pub struct BinTables {
    pub shape: TensorShape,
    pub kappa: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub ln_beta_fn: Vec<f64>,
    pub digamma_alpha: Vec<f64>,
    pub digamma_beta: Vec<f64>,
    pub trigamma_alpha: Vec<f64>,
    pub trigamma_beta: Vec<f64>,
    pub digamma_sum: Vec<f64>,
    pub trigamma_sum: Vec<f64>,
}

impl BinTables {
    pub fn new(proposal: &[f64], shape: TensorShape, kappa: f64) -> Result<Self> {
        let params = crate::policy::params_from_proposal(proposal, shape, kappa)?;
        let n = proposal.len();
        let mut t = Self {
            shape,
            kappa,
            alpha: params.alpha().to_vec(),
            beta: params.beta().to_vec(),
            ln_beta_fn: Vec::with_capacity(n),
            digamma_alpha: Vec::with_capacity(n),
            digamma_beta: Vec::with_capacity(n),
            trigamma_alpha: Vec::with_capacity(n),
            trigamma_beta: Vec::with_capacity(n),
            digamma_sum: Vec::with_capacity(n),
            trigamma_sum: Vec::with_capacity(n),
        };
        let mut cached = (f64::NAN, (0.0, 0.0, 0.0));
        for i in 0..n {
            let (a, b) = (t.alpha[i], t.beta[i]);
            let (lga, dga, tga) = gamma_family(a);
            let (lgb, dgb, tgb) = gamma_family(b);
            // a + b is 2 + kappa up to rounding, so this rarely recomputes
            if a + b != cached.0 {
                cached = (a + b, gamma_family(a + b));
            }
            let (lgs, dgs, tgs) = cached.1;
            t.ln_beta_fn.push(lga + lgb - lgs);
            t.digamma_alpha.push(dga);
            t.digamma_beta.push(dgb);
            t.trigamma_alpha.push(tga);
            t.trigamma_beta.push(tgb);
            t.digamma_sum.push(dgs);
            t.trigamma_sum.push(tgs);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Total log density of `mask`.
    pub fn log_prob(&self, mask: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..mask.len() {
            let m = mask[i];
            s += (self.alpha[i] - 1.0) * m.ln() + (self.beta[i] - 1.0) * (-m).ln_1p() - self.ln_beta_fn[i];
        }
        s
    }

    /// Summed entropy.
    pub fn entropy(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let (a, b) = (self.alpha[i], self.beta[i]);
                self.ln_beta_fn[i] - (a - 1.0) * self.digamma_alpha[i] - (b - 1.0) * self.digamma_beta[i]
                    + (a + b - 2.0) * self.digamma_sum[i]
            })
            .sum()
    }

    /// Summed `KL(self || old)` and its gradient with respect to the proposal.
    pub fn kl_to(&self, old: &BinTables) -> (f64, Vec<f64>) {
        let mut kl = 0.0;
        let mut grad = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let (a, b, aq, bq) = (self.alpha[i], self.beta[i], old.alpha[i], old.beta[i]);
            if a == aq && b == bq {
                grad.push(0.0);
                continue;
            }
            let d = aq - a + bq - b;
            kl += old.ln_beta_fn[i] - self.ln_beta_fn[i]
                + (a - aq) * self.digamma_alpha[i]
                + (b - bq) * self.digamma_beta[i]
                + d * self.digamma_sum[i];
            let t = d * self.trigamma_sum[i];
            let ga = (a - aq) * self.trigamma_alpha[i] + t;
            let gb = (b - bq) * self.trigamma_beta[i] + t;
            grad.push(self.kappa * (ga - gb));
        }
        (kl.max(0.0), grad)
    }

    /// Gradient of the summed entropy with respect to the proposal.
    pub fn entropy_grad(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let (a, b) = (self.alpha[i], self.beta[i]);
                let t = (a + b - 2.0) * self.trigamma_sum[i];
                let ga = -(a - 1.0) * self.trigamma_alpha[i] + t;
                let gb = -(b - 1.0) * self.trigamma_beta[i] + t;
                self.kappa * (ga - gb)
            })
            .collect()
    }
}

/// One sampled mask with its behaviour log density and reward.
#[derive(Debug, Clone)]
pub struct RolloutSample {
    pub mask: Vec<f64>,
    pub logp_old: f64,
    pub reward: f64,
}

/// Masks sampled for one mixture from the frozen policy.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub features: Features,
    pub query: Vec<f64>,
    pub old: BinTables,
    /// Snapshot activations, reused for the live policy while parameters
    /// are unchanged.
    pub activations: Option<Activations>,
    pub samples: Vec<RolloutSample>,
}

/// Log-compressed magnitude features and the spectrogram of `mixture`.
pub fn prepare_mixture(mixture: &Waveform, sep: &SeparatorConfig) -> Result<(Spectrogram, Features)> {
    let spec = stft(mixture, &StftConfig::default())?;
    let features = build_features(&spec.log_magnitude(), sep.context, sep.freq_bands);
    Ok((spec, features))
}

pub(crate) fn mask_of(spec: &Spectrogram, values: Vec<f64>) -> Result<Mask> {
    let values = ndarray::Array2::from_shape_vec(spec.shape(), values)
        .map_err(|e| Error::invalid(format!("mask shape: {e}")))?;
    Mask::new(values)
}

/// Samples `mc_samples` masks for `example` from `snapshot` and scores them.
pub fn collect_rollout<R: rand::Rng>(
    snapshot: &ModelSnapshot,
    example: &RlExample,
    kappa: f64,
    mc_samples: usize,
    reward: &RewardSpec,
    rng: &mut R,
) -> Result<Rollout> {
    let (spec, features) = prepare_mixture(&example.mixture, snapshot.model().config())?;
    let acts = snapshot.forward_features(&features, &example.query)?;
    let shape = snapshot.model().proposal_shape(&features);
    let old = BinTables::new(acts.proposal(), shape, kappa)?;
    let params = crate::policy::BetaPolicyParams::from_alpha_beta(old.alpha.clone(), old.beta.clone(), shape)?;
    let samples = (0..mc_samples)
        .map(|_| {
            let mask = sample_mask(&params, rng);
            let logp_old = old.log_prob(&mask);
            let y = apply_mask_reconstruct(&spec, &mask_of(&spec, mask.clone())?)?;
            let reward = reward.score(&y, example)?;
            Ok(RolloutSample { mask, logp_old, reward })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollout {
        features,
        query: example.query.clone(),
        old,
        activations: Some(acts),
        samples,
    })
}

/// Objective value, diagnostics and parameter gradient of `J`.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: ObjectiveValue,
    pub ratio_mean: f64,
    pub grads: Vec<f64>,
}

struct LivePass {
    tables: BinTables,
    acts: Activations,
    entropy: f64,
    kl: f64,
    kl_grad: Vec<f64>,
    logp: Vec<f64>,
}

/// Evaluates `J` for the live `model` on sampled rollouts with fixed
/// advantages (one per sample, rollout-major) and backpropagates it.
pub fn policy_objective(
    model: &SeparatorModel,
    rollouts: &[Rollout],
    advantages: &[f64],
    cfg: &RlConfig,
) -> Result<ObjectiveEval> {
    let total: usize = rollouts.iter().map(|r| r.samples.len()).sum();
    if advantages.len() != total {
        return Err(Error::shape(total, advantages.len()));
    }
    let live: Vec<LivePass> = rollouts
        .par_iter()
        .map(|r| {
            let acts = match &r.activations {
                Some(a) if model.owns(a) => a.clone(),
                _ => model.forward_features(&r.features, &r.query)?,
            };
            let tables = BinTables::new(acts.proposal(), r.old.shape, r.old.kappa)?;
            let norm = if cfg.per_bin_regularizers { tables.len() as f64 } else { 1.0 };
            let entropy = tables.entropy() / norm;
            let (kl, kl_grad) = tables.kl_to(&r.old);
            let logp = r.samples.iter().map(|s| tables.log_prob(&s.mask)).collect();
            Ok(LivePass {
                tables,
                acts,
                entropy,
                kl: kl / norm,
                kl_grad,
                logp,
            })
        })
        .collect::<Result<_>>()?;

    let mut terms = Vec::with_capacity(total);
    let mut ratio_sum = 0.0;
    for (r, pass) in rollouts.iter().zip(&live) {
        for (s, &logp) in r.samples.iter().zip(&pass.logp) {
            let ratio = importance_ratio(logp, s.logp_old);
            ratio_sum += ratio;
            terms.push(ObjectiveTerm {
                ratio,
                advantage: advantages[terms.len()],
                entropy: pass.entropy,
                kl: pass.kl,
            });
        }
    }
    let value = rl_objective(&terms, cfg)?;
    if !value.objective.is_finite() {
        return Err(Error::Divergence(format!("non-finite objective {}", value.objective)));
    }

    let mut offsets = Vec::with_capacity(rollouts.len());
    let mut acc = 0;
    for r in rollouts {
        offsets.push(acc);
        acc += r.samples.len();
    }
    let per_rollout: Vec<Vec<f64>> = rollouts
        .par_iter()
        .zip(&live)
        .zip(&offsets)
        .map(|((r, pass), &off)| {
            let t = &pass.tables;
            let n = r.samples.len() as f64;
            let norm = if cfg.per_bin_regularizers { t.len() as f64 } else { 1.0 };
            let coefs = &value.d_logp[off..off + r.samples.len()];
            let c_sum: f64 = coefs.iter().sum();
            let w_h = n * value.d_entropy / norm;
            let w_kl = n * value.d_kl / norm;
            let mut dj_dp: Vec<f64> = (0..t.len())
                .map(|i| -t.kappa * c_sum * (t.digamma_alpha[i] - t.digamma_beta[i]))
                .collect();
            for (s, &c) in r.samples.iter().zip(coefs) {
                if c == 0.0 {
                    continue;
                }
                let kc = t.kappa * c;
                for (g, &m) in dj_dp.iter_mut().zip(&s.mask) {
                    *g += kc * (m.ln() - (-m).ln_1p());
                }
            }
            if w_h != 0.0 {
                for (g, h) in dj_dp.iter_mut().zip(t.entropy_grad()) {
                    *g += w_h * h;
                }
            }
            if w_kl != 0.0 {
                for (g, k) in dj_dp.iter_mut().zip(&pass.kl_grad) {
                    *g += w_kl * k;
                }
            }
            // loss = -J
            let upstream: Vec<f64> = dj_dp.iter().map(|g| -g).collect();
            model.backward_features(&r.features, &pass.acts, &upstream)
        })
        .collect::<Result<_>>()?;

    let mut grads = vec![0.0; model.params().len()];
    for g in &per_rollout {
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(ObjectiveEval {
        ratio_mean: ratio_sum / total as f64,
        value,
        grads,
    })
}

/// Mutable state of a policy-training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: SeparatorModel,
    pub snapshot: ModelSnapshot,
    pub adam: AdamState,
    pub baseline: f64,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: SeparatorModel) -> Self {
        Self {
            snapshot: model.snapshot(0),
            adam: AdamState::new(model.params().len()),
            model,
            baseline: 0.0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    pub kappa: f64,
    pub mean_reward: f64,
    pub baseline: f64,
    pub surrogate: f64,
    pub entropy: f64,
    pub kl: f64,
    pub objective: f64,
    pub ratio_mean: f64,
    pub fraction_clipped: f64,
    pub grad_norm: f64,
    /// KL between the updated and the behaviour policy on the first
    /// mixture of the batch.
    pub kl_after: f64,
}

/// Rewards to advantages: subtract the pre-update baseline, normalize per
/// group, then advance the baseline.
pub fn advantages_for(rewards: &[f64], baseline: &mut f64, cfg: &RlConfig) -> Vec<f64> {
    let raw: Vec<f64> = rewards.iter().map(|r| r - *baseline).collect();
    let group = match cfg.advantage_group {
        AdvantageGroup::Batch => raw.len(),
        AdvantageGroup::Mixture => cfg.mc_samples,
    };
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    *baseline = update_baseline(*baseline, mean, cfg.ema_beta);
    normalize_grouped(&raw, group, cfg.grpo_eps, cfg.grpo_enabled)
}

/// One sample-score-update cycle on `batch`. Masks are drawn from the
/// snapshot held in `state`, which is refreshed afterwards.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&RlExample],
    reward: &RewardSpec,
    cfg: &RlConfig,
) -> Result<TrainStepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let step = state.step;
    let kappa = cfg.kappa.at(step, cfg.steps);
    let rollouts: Vec<Rollout> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, ex)| {
            let mut rng = rng_for(cfg.seed, &[0x524f4c4c, step as u64, slot as u64]);
            let n = ex.mixture.len();
            if cfg.crop_samples > 0 && cfg.crop_samples < n {
                let start = rng.gen_range(0..=n - cfg.crop_samples);
                let part = ex.excerpt(start, cfg.crop_samples, reward)?;
                collect_rollout(&state.snapshot, &part, kappa, cfg.mc_samples, reward, &mut rng)
            } else {
                collect_rollout(&state.snapshot, ex, kappa, cfg.mc_samples, reward, &mut rng)
            }
        })
        .collect::<Result<_>>()?;
    let rewards: Vec<f64> = rollouts.iter().flat_map(|r| r.samples.iter().map(|s| s.reward)).collect();
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let mut baseline = state.baseline;
    let adv = advantages_for(&rewards, &mut baseline, cfg);

    let eval = policy_objective(&state.model, &rollouts, &adv, cfg)?;
    if eval.grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!("non-finite gradient at step {step}")));
    }
    let info = state.model.apply_adamw_step(&eval.grads, &mut state.adam, &cfg.optimizer())?;

    let probe = &rollouts[0];
    let acts = state.model.forward_features(&probe.features, &probe.query)?;
    let after = BinTables::new(acts.proposal(), probe.old.shape, kappa)?;
    let norm = if cfg.per_bin_regularizers { after.len() as f64 } else { 1.0 };
    let kl_after = after.kl_to(&probe.old).0 / norm;

    state.baseline = baseline;
    state.step += 1;
    state.snapshot = state.model.snapshot(state.step);
    let report = TrainStepReport {
        step,
        kappa,
        mean_reward,
        baseline: state.baseline,
        surrogate: eval.value.surrogate,
        entropy: eval.value.entropy,
        kl: eval.value.kl,
        objective: eval.value.objective,
        ratio_mean: eval.ratio_mean,
        fraction_clipped: eval.value.fraction_clipped,
        grad_norm: info.grad_norm,
        kl_after,
    };
    let finite = [
        report.mean_reward,
        report.surrogate,
        report.entropy,
        report.kl,
        report.objective,
        report.ratio_mean,
        report.grad_norm,
        report.kl_after,
    ];
    if finite.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("non-finite step report {report:?}")));
    }
    Ok(report)
}
