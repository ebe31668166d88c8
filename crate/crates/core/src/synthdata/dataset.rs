//! On-disk synthetic datasets.
//!
//! A dataset directory holds:
//!
//! ```text
//! dataset.json          generation settings
//! items.tsv             one mixture per line (header first)
//! embeddings.tsv        modality, id, class, source for every store entry
//! store.embd            oracle embeddings of every source clip
//! audio_embedder.ckpt   waveform embedder calibrated on held-out sources
//! wav/                  mixtures and post-scaling references
//! ```

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{generate_source, make_mixture, ClassUniverse};
use crate::embed::{
    write_manifest, AudioEmbedder, AudioFeatureConfig, EmbeddingStore, ManifestRecord, Modality, OracleConfig,
    OracleEmbedder, OracleItem,
};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::reward::EmbeddingVector;
use crate::seeding::{derive_seed, rng_for};
use crate::spectral::{read_wav, write_wav, ResamplePolicy, WavFormat, WavOptions, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub items: usize,
    pub sample_rate: u32,
    pub duration: usize,
    /// Interferer level relative to the target, uniform in `[-x, x]` dB.
    pub snr_db_range: f64,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
    /// Alignment windows per source clip.
    pub windows: u32,
    pub f_lo: f64,
    pub f_hi: f64,
    /// Held-out sources per class used to calibrate the audio embedder.
    pub calibration_per_class: usize,
    pub calibration_ridge: f64,
    /// Oracle embedding settings; its `classes` is overridden by `classes`.
    pub oracle: OracleConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            items: 200,
            sample_rate: 16_000,
            duration: 65_535,
            snr_db_range: 5.0,
            splits: [0.8, 0.1, 0.1],
            windows: 4,
            f_lo: 150.0,
            f_hi: 7500.0,
            calibration_per_class: 12,
            calibration_ridge: 1e-4,
            oracle: OracleConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn universe(&self) -> ClassUniverse {
        ClassUniverse {
            classes: self.classes,
            f_lo: self.f_lo,
            f_hi: self.f_hi,
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            classes: self.classes,
            ..self.oracle
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.universe().validate()?;
        if self.items == 0 || self.duration == 0 || self.windows == 0 {
            return Err(Error::Config("items, duration and windows must be positive".into()));
        }
        if self.splits.iter().any(|s| !(0.0..=1.0).contains(s)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be in [0, 1] and sum to 1: {:?}", self.splits)));
        }
        if !(self.snr_db_range >= 0.0) {
            return Err(Error::Config("snr_db_range must be non-negative".into()));
        }
        Ok(())
    }

    /// Item counts per split: rounded train and validation shares, the
    /// remainder to test.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.items;
        let train = ((self.splits[0] * n as f64).round() as usize).min(n);
        let val = ((self.splits[1] * n as f64).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub split: Split,
    pub classes: Vec<usize>,
    pub snr_offsets_db: Vec<f64>,
    /// Oracle instance seed of each source clip.
    pub source_seeds: Vec<u64>,
    pub mixture_wav: String,
    pub reference_wavs: Vec<String>,
}

impl DatasetItem {
    pub fn n_sources(&self) -> usize {
        self.classes.len()
    }

    pub fn clip_id(&self, source: usize) -> String {
        format!("{}/s{source}", self.id)
    }

    pub fn window_id(&self, source: usize, window: u32) -> String {
        format!("{}/s{source}#w{window}", self.id)
    }

    fn to_line(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.split,
            join(self.classes.iter().map(|c| c.to_string()).collect()),
            join(self.snr_offsets_db.iter().map(|d| format!("{d:?}")).collect()),
            join(self.source_seeds.iter().map(|s| s.to_string()).collect()),
            self.mixture_wav,
            join(self.reference_wavs.clone()),
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("items.tsv: bad {what} in {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        let [id, split, classes, snrs, seeds, mix, refs] = f[..] else {
            return Err(bad("field count"));
        };
        fn list<T: FromStr>(s: &str) -> Option<Vec<T>> {
            s.split(',').map(|x| x.parse().ok()).collect()
        }
        let item = Self {
            id: id.to_string(),
            split: split.parse()?,
            classes: list(classes).ok_or_else(|| bad("classes"))?,
            snr_offsets_db: list(snrs).ok_or_else(|| bad("snr offsets"))?,
            source_seeds: list(seeds).ok_or_else(|| bad("seeds"))?,
            mixture_wav: mix.to_string(),
            reference_wavs: refs.split(',').map(str::to_string).collect(),
        };
        let n = item.classes.len();
        if item.snr_offsets_db.len() != n || item.source_seeds.len() != n || item.reference_wavs.len() != n {
            return Err(bad("source count"));
        }
        Ok(item)
    }
}

const ITEMS_HEADER: &str = "id\tsplit\tclasses\tsnr_offsets_db\tsource_seeds\tmixture\treferences";

/// Clean held-out sources for calibrating the audio embedder, `per_class`
/// for every class.
pub fn calibration_examples(cfg: &SynthConfig, per_class: usize) -> Result<Vec<(usize, Waveform)>> {
    let u = cfg.universe();
    let mut out = Vec::with_capacity(per_class * cfg.classes);
    for c in 0..cfg.classes {
        for i in 0..per_class {
            let seed = derive_seed(cfg.seed, &[0xCA1, c as u64, i as u64]);
            out.push((c, generate_source(&u.random_spec(c, cfg.duration, cfg.sample_rate, seed)?)?));
        }
    }
    Ok(out)
}

pub fn class_label(c: usize) -> String {
    format!("class-{c}")
}

/// Generates every item, writes the dataset directory and returns it loaded.
pub fn build_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Dataset> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir.join("wav"))?;
    let universe = cfg.universe();
    let oracle = OracleEmbedder::new(cfg.oracle_config())?;

    let mut order: Vec<usize> = (0..cfg.items).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[0x5B1]));
    let [n_train, n_val, _] = cfg.split_counts();
    let mut split_of = vec![Split::Test; cfg.items];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut store = EmbeddingStore::new(oracle.dim());
    let mut embed_manifest = Vec::new();
    let mut items = Vec::with_capacity(cfg.items);
    for (i, &split) in split_of.iter().enumerate() {
        let id = format!("item-{i:04}");
        let mut rng = rng_for(cfg.seed, &[0x17E, i as u64]);
        let target = rng.gen_range(0..cfg.classes);
        let interferer = (target + rng.gen_range(1..cfg.classes)) % cfg.classes;
        let classes = vec![target, interferer];
        let snr = if cfg.snr_db_range > 0.0 {
            rng.gen_range(-cfg.snr_db_range..=cfg.snr_db_range)
        } else {
            0.0
        };
        let source_seeds: Vec<u64> = (0..2).map(|k| derive_seed(cfg.seed, &[0x5EED, i as u64, k])).collect();
        let specs = classes
            .iter()
            .zip(&source_seeds)
            .map(|(&c, &s)| universe.random_spec(c, cfg.duration, cfg.sample_rate, s))
            .collect::<Result<Vec<_>>>()?;
        let mixture = make_mixture(id.clone(), &specs, &[0.0, snr])?;

        let mixture_wav = format!("wav/{id}_mix.wav");
        write_wav(dir.join(&mixture_wav), &mixture.mixture, WavFormat::Float32)?;
        let mut reference_wavs = Vec::new();
        for (k, r) in mixture.references.iter().enumerate() {
            let path = format!("wav/{id}_s{k}.wav");
            write_wav(dir.join(&path), r, WavFormat::Float32)?;
            reference_wavs.push(path);
        }
        let item = DatasetItem {
            id,
            split,
            classes,
            snr_offsets_db: vec![0.0, snr],
            source_seeds,
            mixture_wav,
            reference_wavs,
        };
        for k in 0..item.n_sources() {
            let label = class_label(item.classes[k]);
            let base = OracleItem::new(item.classes[k], item.source_seeds[k]);
            let clip = item.clip_id(k);
            store.insert(Modality::Text, clip.clone(), label.clone(), &oracle.embed(Modality::Text, base)?)?;
            embed_manifest.push(ManifestRecord {
                modality: Modality::Text,
                id: clip.clone(),
                class_label: label.clone(),
                source: format!("descriptor:{clip}"),
            });
            for w in 0..cfg.windows {
                let wid = item.window_id(k, w);
                for m in [Modality::Audio, Modality::Video] {
                    store.insert(m, wid.clone(), label.clone(), &oracle.embed(m, base.in_window(w))?)?;
                    embed_manifest.push(ManifestRecord {
                        modality: m,
                        id: wid.clone(),
                        class_label: label.clone(),
                        source: match m {
                            Modality::Audio => item.reference_wavs[k].clone(),
                            _ => format!("descriptor:{wid}"),
                        },
                    });
                }
            }
        }
        items.push(item);
    }

    let examples = calibration_examples(cfg, cfg.calibration_per_class)?;
    let embedder = AudioEmbedder::calibrate(&oracle, AudioFeatureConfig::default(), &examples, cfg.calibration_ridge)?;
    embedder.to_checkpoint().save(dir.join("audio_embedder.ckpt"))?;
    store.save(dir.join("store.embd"))?;
    write_manifest(dir.join("embeddings.tsv"), &embed_manifest)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("items.tsv"))?);
    writeln!(f, "{ITEMS_HEADER}")?;
    for it in &items {
        writeln!(f, "{}", it.to_line())?;
    }
    f.flush()?;
    drop(f);
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("dataset.json"), json + "\n")?;

    Ok(Dataset {
        dir: dir.to_path_buf(),
        config: cfg.clone(),
        items,
        store,
        embedder,
        oracle,
    })
}

/// A loaded dataset directory. Waveforms are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    config: SynthConfig,
    items: Vec<DatasetItem>,
    store: EmbeddingStore,
    embedder: AudioEmbedder,
    oracle: OracleEmbedder,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: SynthConfig = serde_json::from_slice(&std::fs::read(dir.join("dataset.json"))?)
            .map_err(|e| Error::Format(format!("dataset.json: {e}")))?;
        let text = std::fs::read_to_string(dir.join("items.tsv"))?;
        let mut lines = text.lines();
        if lines.next() != Some(ITEMS_HEADER) {
            return Err(Error::Format("items.tsv: missing or unexpected header".into()));
        }
        let items = lines.filter(|l| !l.is_empty()).map(DatasetItem::from_line).collect::<Result<Vec<_>>>()?;
        let store = EmbeddingStore::load(dir.join("store.embd"))?;
        let embedder = AudioEmbedder::from_checkpoint(&Checkpoint::load(dir.join("audio_embedder.ckpt"))?)?;
        let oracle = OracleEmbedder::new(config.oracle_config())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            items,
            store,
            embedder,
            oracle,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    /// Store records belonging to items of `split`.
    pub fn split_store(&self, split: Split) -> EmbeddingStore {
        let ids: std::collections::BTreeSet<&str> =
            self.items.iter().filter(|it| it.split == split).map(|it| it.id.as_str()).collect();
        self.store
            .subset(|_, id| ids.contains(id.split_once('/').map_or(id, |(item, _)| item)))
    }

    pub fn embedder(&self) -> &AudioEmbedder {
        &self.embedder
    }

    pub fn oracle(&self) -> &OracleEmbedder {
        &self.oracle
    }

    fn read(&self, rel: &str) -> Result<Waveform> {
        read_wav(
            self.dir.join(rel),
            WavOptions {
                expected_rate: self.config.sample_rate,
                policy: ResamplePolicy::Reject,
            },
        )
    }

    pub fn mixture(&self, item: &DatasetItem) -> Result<Waveform> {
        self.read(&item.mixture_wav)
    }

    pub fn reference(&self, item: &DatasetItem, source: usize) -> Result<Waveform> {
        self.read(
            item.reference_wavs
                .get(source)
                .ok_or_else(|| Error::invalid(format!("{} has no source {source}", item.id)))?,
        )
    }

    pub fn text_query(&self, item: &DatasetItem, source: usize) -> Result<&EmbeddingVector> {
        Ok(&self.store.require(Modality::Text, &item.clip_id(source))?.vector)
    }

    pub fn video_query(&self, item: &DatasetItem, source: usize) -> Result<&EmbeddingVector> {
        Ok(&self.store.require(Modality::Video, &item.window_id(source, 0))?.vector)
    }
}
