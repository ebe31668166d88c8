//! Command-line surface. Every command reads a TOML [`RunConfig`], applies
//! flag overrides (flag > file > default), validates everything up front and
//! writes the effective configuration next to its outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::align::{discrimination_gap, gap_items, run_curriculum, AlignConfig, AlignHeads, GapStats};
use crate::checkpoint::Checkpoint;
use crate::embed::{EmbeddingStore, Modality};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, si_sdri, EvalReport};
use crate::reward::RewardMode;
use crate::rl::{examples_from_dataset, train_loop, RewardSpec, RlConfig, RlExample, BEST_CHECKPOINT};
use crate::separator::{separate, SeparatorModel};
use crate::spectral::{read_wav, write_wav, ResamplePolicy, WavFormat, WavOptions};
use crate::spectral::{apply_mask_reconstruct, ideal_ratio_mask, stft, StftConfig, Waveform, IRM_FLOOR};
use crate::synthdata::{build_dataset, Dataset, Split, SynthConfig};

pub const CONFIG_ECHO: &str = "config.toml";
pub const RL_REPORT: &str = "reports/train_rl.json";
pub const ALIGN_REPORT: &str = "reports/align.json";
pub const ALIGN_LOG: &str = "logs/align.jsonl";
pub const ALIGN_CHECKPOINT: &str = "checkpoints/align_heads.ckpt";
pub const EVAL_RECORDS: &str = "reports/eval.jsonl";
pub const EVAL_SUMMARY: &str = "reports/eval_summary.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Exit code for an error: configuration and input problems 2, numerical or
/// degenerate runtime failures 3, file system and WAV errors 4.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Wav(_) => EXIT_IO,
        Error::Divergence(_) | Error::NonFinite(_) | Error::Degenerate(_) => EXIT_RUNTIME,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Deterministic proposal of the separator checkpoint.
    #[default]
    Model,
    /// Ideal ratio masks (needs references; an upper reference point).
    Irm,
    /// The mixture itself for every source (SI-SDRi = 0).
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Separator checkpoint; defaults to the run's best checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub estimator: Estimator,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            checkpoint: None,
            estimator: Estimator::Model,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
    pub synth: SynthConfig,
    pub rl: RlConfig,
    pub align: AlignConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            synth: SynthConfig::default(),
            rl: RlConfig::default(),
            align: AlignConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.rl.validate()?;
        self.align.validate()
    }

    /// Writes the effective configuration as `<dir>/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_ECHO), self.to_toml()?)?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "masksep", version, about = "Query-conditioned mask separation: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides `dataset`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train the separator policy.
    TrainRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_reward_mode)]
        reward_mode: Option<RewardMode>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Run the three-stage alignment curriculum.
    TrainAlign {
        #[command(flatten)]
        common: Common,
        /// Epochs for every stage.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Separate a dataset split and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long, value_enum)]
        estimator: Option<Estimator>,
    },
    /// Separate one WAV file.
    Separate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        /// Store record used as the query, `<modality>:<id>` (e.g.
        /// `text:item-0003/s0`); resolved in the dataset's store.
        #[arg(long, conflicts_with = "query_file")]
        query_id: Option<String>,
        /// File holding the query vector as whitespace- or comma-separated numbers.
        #[arg(long)]
        query_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_reward_mode(s: &str) -> std::result::Result<RewardMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown reward mode {s:?}"))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown split {s:?}"))
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(d) = &common.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
        cfg.rl.seed = s;
        cfg.align.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

/// Effective configuration of a parsed command line.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let cfg = match command {
        Command::Synth {
            common,
            out,
            items,
            classes,
        } => {
            let mut cfg = base_config(common)?;
            if let Some(o) = out {
                cfg.dataset = o.clone();
            }
            if let Some(n) = items {
                cfg.synth.items = *n;
            }
            if let Some(c) = classes {
                cfg.synth.classes = *c;
            }
            cfg
        }
        Command::TrainRl {
            common,
            steps,
            reward_mode,
            batch_size,
            mc_samples,
            lr,
            eval_every,
        } => {
            let mut cfg = base_config(common)?;
            let rl = &mut cfg.rl;
            rl.steps = steps.unwrap_or(rl.steps);
            rl.reward_mode = reward_mode.unwrap_or(rl.reward_mode);
            rl.batch_size = batch_size.unwrap_or(rl.batch_size);
            rl.mc_samples = mc_samples.unwrap_or(rl.mc_samples);
            rl.lr = lr.unwrap_or(rl.lr);
            rl.eval_every = eval_every.unwrap_or(rl.eval_every);
            cfg
        }
        Command::TrainAlign { common, epochs } => {
            let mut cfg = base_config(common)?;
            if let Some(e) = epochs {
                cfg.align.stage1.epochs = *e;
                cfg.align.stage2.epochs = *e;
                cfg.align.stage3.epochs = *e;
            }
            cfg
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            estimator,
        } => {
            let mut cfg = base_config(common)?;
            if checkpoint.is_some() {
                cfg.eval.checkpoint = checkpoint.clone();
            }
            cfg.eval.split = split.unwrap_or(cfg.eval.split);
            cfg.eval.estimator = estimator.unwrap_or(cfg.eval.estimator);
            cfg
        }
        Command::Separate { common, .. } => base_config(common)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Builds the dataset; returns the path of its item manifest.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    build_dataset(&cfg.synth, &cfg.dataset)?;
    Ok(cfg.dataset.join("items.tsv"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlRunReport {
    pub steps_run: usize,
    pub stopped_early: bool,
    pub initial_val_reward: f64,
    pub best_val_reward: f64,
    pub final_val_reward: Option<f64>,
}

pub fn cmd_train_rl(cfg: &RunConfig) -> Result<RlRunReport> {
    let ds = Dataset::load(&cfg.dataset)?;
    cfg.echo(&cfg.run_dir)?;
    let reward = RewardSpec::new(cfg.rl.reward_mode, cfg.rl.mixup_weights, ds.embedder().clone())?;
    let train = examples_from_dataset(&ds, Split::Train, cfg.rl.query, &reward)?;
    let val = examples_from_dataset(&ds, Split::Val, cfg.rl.query, &reward)?;
    let out = train_loop(&train, &val, &reward, &cfg.rl, &cfg.run_dir)?;
    let report = RlRunReport {
        steps_run: out.steps_run,
        stopped_early: out.stopped_early,
        initial_val_reward: out.initial_val_reward,
        best_val_reward: out.best_val_reward,
        final_val_reward: out.validation.last().map(|v| v.val_reward),
    };
    write_json(&cfg.run_dir.join(RL_REPORT), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: u8,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub final_tau: f64,
    pub gap: GapStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignRunReport {
    pub gap_before: GapStats,
    pub gap_after: GapStats,
    pub stages: Vec<StageReport>,
}

/// Runs the curriculum on the train-split store and reports the
/// discrimination gap on held-out (validation and test) items.
pub fn cmd_train_align(cfg: &RunConfig) -> Result<AlignRunReport> {
    let ds = Dataset::load(&cfg.dataset)?;
    cfg.echo(&cfg.run_dir)?;
    let store = ds.split_store(Split::Train);
    let mut held = ds.split(Split::Val);
    held.extend(ds.split(Split::Test));
    let items = gap_items(&ds, &held)?;
    let init = AlignHeads::identity(store.dim(), cfg.align.init_tau);
    let gap_before = discrimination_gap(&items, &init)?;
    let state = run_curriculum(&store, &cfg.align, init)?;

    fs::create_dir_all(cfg.run_dir.join("logs"))?;
    fs::create_dir_all(cfg.run_dir.join("checkpoints"))?;
    let mut log = std::io::BufWriter::new(fs::File::create(cfg.run_dir.join(ALIGN_LOG))?);
    let mut stages = Vec::new();
    for s in &state.stages {
        for (e, (v, t)) in s.val_history.iter().zip(&s.train_history).enumerate() {
            let line = serde_json::json!({ "stage": s.stage, "epoch": e + 1, "train_loss": t, "val_loss": v });
            writeln!(log, "{line}")?;
        }
        s.best
            .to_checkpoint(serde_json::json!({ "stage": s.stage, "best_epoch": s.best_epoch }))
            .save(cfg.run_dir.join(format!("checkpoints/align_stage{}.ckpt", s.stage)))?;
        stages.push(StageReport {
            stage: s.stage,
            initial_val_loss: s.initial_val_loss,
            best_val_loss: s.best_val_loss,
            best_epoch: s.best_epoch,
            final_tau: s.best.temperature.tau(),
            gap: discrimination_gap(&items, &s.best)?,
        });
    }
    log.flush()?;
    state
        .heads
        .to_checkpoint(serde_json::json!({ "stage": state.stage }))
        .save(cfg.run_dir.join(ALIGN_CHECKPOINT))?;
    let report = AlignRunReport {
        gap_before,
        gap_after: discrimination_gap(&items, &state.heads)?,
        stages,
    };
    write_json(&cfg.run_dir.join(ALIGN_REPORT), &report)?;
    Ok(report)
}

fn estimates(estimator: Estimator, model: Option<&SeparatorModel>, sources: &[&RlExample]) -> Result<Vec<Waveform>> {
    let stft_cfg = StftConfig::default();
    sources
        .iter()
        .map(|ex| match estimator {
            Estimator::Model => {
                let m = model.ok_or_else(|| Error::invalid("model estimator needs a checkpoint"))?;
                Ok(separate(m, &ex.mixture, &ex.query)?.remove(0))
            }
            Estimator::Irm => {
                let r = ex
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("{} has no reference", ex.id)))?;
                let mix = stft(&ex.mixture, &stft_cfg)?;
                apply_mask_reconstruct(&mix, &ideal_ratio_mask(&stft(r, &stft_cfg)?, &mix, IRM_FLOOR)?)
            }
            Estimator::Mixture => Ok((*ex.mixture).clone()),
        })
        .collect()
}

/// Separates every source of every item in the configured split with its own
/// query and scores the estimates under the optimal assignment.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ds = Dataset::load(&cfg.dataset)?;
    cfg.echo(&cfg.run_dir)?;
    let model = match cfg.eval.estimator {
        Estimator::Model => {
            let path = cfg.eval.checkpoint.clone().unwrap_or_else(|| cfg.run_dir.join(BEST_CHECKPOINT));
            Some(SeparatorModel::from_checkpoint(&Checkpoint::load(path)?)?)
        }
        _ => None,
    };
    let reward = RewardSpec::new(cfg.rl.reward_mode, cfg.rl.mixup_weights, ds.embedder().clone())?;
    let examples = examples_from_dataset(&ds, cfg.eval.split, cfg.rl.query, &reward)?;
    let items = ds.split(cfg.eval.split);
    let mut utterances = Vec::with_capacity(items.len());
    let mut next = 0;
    for item in items {
        let sources: Vec<&RlExample> = examples[next..next + item.n_sources()].iter().collect();
        next += item.n_sources();
        let ests = estimates(cfg.eval.estimator, model.as_ref(), &sources)?;
        let refs: Vec<Waveform> = (0..item.n_sources()).map(|k| ds.reference(item, k)).collect::<Result<_>>()?;
        let mut u = si_sdri(item.id.clone(), &ests, &refs, &sources[0].mixture)?;
        u.category = Some(crate::synthdata::class_label(item.classes[0]));
        utterances.push(u);
    }
    let report = aggregate(utterances, cfg.eval.seed)?;
    fs::create_dir_all(cfg.run_dir.join("reports"))?;
    report.write_jsonl(cfg.run_dir.join(EVAL_RECORDS))?;
    write_json(
        &cfg.run_dir.join(EVAL_SUMMARY),
        &serde_json::json!({
            "split": cfg.eval.split,
            "estimator": cfg.eval.estimator,
            "utterances": report.utterances.len(),
            "skipped": report.skipped,
            "saturated": report.saturated,
            "si_sdri": report.si_sdri,
            "si_sdr": report.si_sdr,
            "categories": report.categories,
            "macro_si_sdri": report.macro_si_sdri,
        }),
    )?;
    Ok(report)
}

/// Reads a query vector from text: numbers separated by whitespace or commas,
/// optionally wrapped in brackets.
pub fn parse_query_vector(text: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',' || c == '[' || c == ']')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad query value {t:?}"))))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::invalid("query vector is empty"));
    }
    Ok(values)
}

/// Looks up `<modality>:<id>` in `store`.
pub fn query_from_store(store: &EmbeddingStore, spec: &str) -> Result<Vec<f64>> {
    let (m, id) = spec
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("query id {spec:?} is not <modality>:<id>")))?;
    let modality: Modality = m.parse()?;
    Ok(store.require(modality, id)?.vector.values().to_vec())
}

/// Deterministic separation of one file with the proposal as the mask.
pub fn cmd_separate(
    cfg: &RunConfig,
    checkpoint: &Path,
    mixture: &Path,
    query_id: Option<&str>,
    query_file: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let query = match (query_id, query_file) {
        (_, Some(f)) => parse_query_vector(&fs::read_to_string(f)?)?,
        (Some(id), None) => query_from_store(&EmbeddingStore::load(cfg.dataset.join("store.embd"))?, id)?,
        (None, None) => return Err(Error::invalid("separate needs --query-id or --query-file")),
    };
    let model = SeparatorModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let wav = read_wav(
        mixture,
        WavOptions {
            expected_rate: cfg.synth.sample_rate,
            policy: ResamplePolicy::Reject,
        },
    )?;
    let ys = separate(&model, &wav, &query)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    if ys.len() == 1 {
        write_wav(out, &ys[0], WavFormat::Float32)?;
    } else {
        let stem = out.with_extension("");
        for (k, y) in ys.iter().enumerate() {
            write_wav(format!("{}_{k}.wav", stem.display()), y, WavFormat::Float32)?;
        }
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = resolve(&cli.command).and_then(|cfg| match &cli.command {
        Command::Synth { .. } => cmd_synth(&cfg).map(|p| println!("{}", p.display())),
        Command::TrainRl { .. } => cmd_train_rl(&cfg).map(|r| {
            println!(
                "steps {}  val reward {:.4} -> best {:.4}",
                r.steps_run, r.initial_val_reward, r.best_val_reward
            )
        }),
        Command::TrainAlign { .. } => cmd_train_align(&cfg).map(|r| {
            println!(
                "discrimination gap {:.4} -> {:.4} (n = {})",
                r.gap_before.mean, r.gap_after.mean, r.gap_after.n
            )
        }),
        Command::Eval { .. } => cmd_eval(&cfg).map(|r| {
            println!(
                "SI-SDRi {:.2} dB (95% CI {:.2}..{:.2}), {} scored, {} skipped",
                r.si_sdri.mean, r.si_sdri.ci_low, r.si_sdri.ci_high, r.si_sdri.n, r.skipped
            )
        }),
        Command::Separate {
            checkpoint,
            mixture,
            query_id,
            query_file,
            out,
            ..
        } => cmd_separate(&cfg, checkpoint, mixture, query_id.as_deref(), query_file.as_deref(), out)
            .map(|_| println!("{}", out.display())),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.rl.lr = 3.5e-4;
        cfg.rl.reward_mode = RewardMode::Mixup;
        cfg.align.stage2.epochs = 3;
        cfg.eval.checkpoint = Some("x/best.ckpt".into());
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[rl]\nsteps = 7\nlr = 0.01\n").unwrap();
        let cli = Cli::try_parse_from([
            "masksep",
            "train-rl",
            "--config",
            path.to_str().unwrap(),
            "--steps",
            "3",
            "--reward-mode",
            "text",
        ])
        .unwrap();
        let cfg = resolve(&cli.command).unwrap();
        assert_eq!(cfg.rl.steps, 3);
        assert_eq!(cfg.rl.lr, 0.01);
        assert_eq!(cfg.rl.reward_mode, RewardMode::Text);
        assert_eq!(cfg.rl.batch_size, RlConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let e = RunConfig::from_toml("[rl]\nstepz = 1\n").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let cli = Cli::try_parse_from(["masksep", "train-rl", "--batch-size", "0"]).unwrap();
        assert_eq!(exit_code(&resolve(&cli.command).unwrap_err()), EXIT_CONFIG);
    }

    #[test]
    fn query_vector_formats() {
        assert_eq!(parse_query_vector("[1, 2.5,\n-3]").unwrap(), vec![1.0, 2.5, -3.0]);
        assert_eq!(parse_query_vector("0.5 0.25").unwrap(), vec![0.5, 0.25]);
        assert!(parse_query_vector("  ").is_err());
        assert!(parse_query_vector("1 x").is_err());
    }
}
