//! Mask-proposal network.
//!
//! A per-bin two-layer perceptron: each time-frequency bin sees the
//! `context x context` patch of log-magnitudes around it (zero-padded at the
//! edges), a coarse encoding of its position on a log-frequency axis, and
//! the query embedding. The
//! query contributes the same hidden pre-activation to every bin, so it is
//! folded into the first-layer bias once per forward pass.
//!
//! ```text
//! h = relu(W1 [patch; band(f); q] + b1)
//! p = sigmoid(W2 h + b2)            // one output per target source
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamState, AdamWConfig, StepInfo};
use crate::policy::TensorShape;
use crate::spectral::{apply_mask_reconstruct, stft, Mask, StftConfig, Waveform};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    /// Odd side length of the log-magnitude patch.
    pub context: usize,
    pub hidden_width: usize,
    pub query_dim: usize,
    /// Number of target sources `K` per query.
    pub sources: usize,
    /// Triangular bands tiling the log-frequency axis; each bin gets its
    /// membership in every band as an input.
    pub freq_bands: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            context: 5,
            hidden_width: 32,
            query_dim: 16,
            sources: 1,
            freq_bands: 8,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context % 2 == 0
            || self.hidden_width == 0
            || self.query_dim == 0
            || self.sources == 0
            || self.freq_bands == 1
        {
            return Err(Error::Config(format!("invalid separator config {self:?}")));
        }
        Ok(())
    }

    /// Per-bin inputs that vary across bins: the patch plus band memberships.
    pub fn local_inputs(&self) -> usize {
        self.context * self.context + self.freq_bands
    }

    pub fn inputs(&self) -> usize {
        self.local_inputs() + self.query_dim
    }

    pub fn n_params(&self) -> usize {
        let h = self.hidden_width;
        h * self.inputs() + h + self.sources * h + self.sources
    }

    fn offsets(&self) -> [usize; 4] {
        let h = self.hidden_width;
        let w1 = 0;
        let b1 = w1 + h * self.inputs();
        let w2 = b1 + h;
        let b2 = w2 + self.sources * h;
        [w1, b1, w2, b2]
    }
}

#[derive(Debug, Clone)]
pub struct SeparatorModel {
    config: SeparatorConfig,
    params: Vec<f64>,
    version: u64,
}

impl PartialEq for SeparatorModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Per-bin input rows, bins ordered frequency-major.
#[derive(Debug, Clone)]
pub struct Features {
    rows: Array2<f64>,
    freqs: usize,
    frames: usize,
}

impl Features {
    pub fn n_bins(&self) -> usize {
        self.freqs * self.frames
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.freqs, self.frames)
    }

    /// One row per bin: the flattened patch, then the band memberships.
    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    hidden: Array2<f64>,
    proposal: Array2<f64>,
    query: Vec<f64>,
    version: u64,
}

impl Activations {
    /// Proposal in flat `(f, t, k)` order.
    pub fn proposal(&self) -> &[f64] {
        self.proposal.as_slice().expect("standard layout")
    }
}

/// Everything `backward` needs from a `forward` call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub features: Features,
    pub activations: Activations,
}

/// Memberships of bin `f` (of `freqs`) in `bands` triangular bands evenly
/// spaced on `u = ln(1 + f) / ln(freqs)`. They sum to one.
fn band_memberships(f: usize, freqs: usize, bands: usize, out: &mut [f64]) {
    out.fill(0.0);
    if bands == 0 {
        return;
    }
    let u = if freqs > 1 {
        (f as f64).ln_1p() / (freqs as f64).ln()
    } else {
        0.0
    };
    let x = (u * (bands - 1) as f64).clamp(0.0, (bands - 1) as f64);
    let i = (x.floor() as usize).min(bands - 2);
    let frac = x - i as f64;
    out[i] = 1.0 - frac;
    out[i + 1] = frac;
}

/// Builds per-bin features from a log-compressed magnitude `F x T`.
pub fn build_features(log_mag: &Array2<f64>, context: usize, freq_bands: usize) -> Features {
    let (freqs, frames) = log_mag.dim();
    let lm = log_mag.as_standard_layout();
    let src = lm.as_slice().expect("standard layout");
    let r = context / 2;
    let patch = context * context;
    let width = patch + freq_bands;
    let mut data = vec![0.0; freqs * frames * width];
    let mut bands = vec![0.0; freq_bands];
    for f in 0..freqs {
        band_memberships(f, freqs, freq_bands, &mut bands);
        for t in 0..frames {
            let row = &mut data[(f * frames + t) * width..(f * frames + t + 1) * width];
            for (i, ff) in (f as isize - r as isize..=(f + r) as isize).enumerate() {
                if ff < 0 || ff as usize >= freqs {
                    continue;
                }
                let line = &src[ff as usize * frames..(ff as usize + 1) * frames];
                let t_lo = t.saturating_sub(r);
                let t_hi = (t + r).min(frames - 1);
                let j0 = i * context + (t_lo + r - t);
                row[j0..j0 + t_hi + 1 - t_lo].copy_from_slice(&line[t_lo..=t_hi]);
            }
            row[patch..].copy_from_slice(&bands);
        }
    }
    Features {
        rows: Array2::from_shape_vec((freqs * frames, width), data).expect("feature shape"),
        freqs,
        frames,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl SeparatorModel {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation.
    pub fn init(config: SeparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [_, _, w2, _] = config.offsets();
        let bound1 = 1.0 / (config.inputs() as f64).sqrt();
        let bound2 = 1.0 / (config.hidden_width as f64).sqrt();
        // first layer (weights and bias) then output layer
        let params = (0..config.n_params())
            .map(|i| {
                let bound = if i < w2 { bound1 } else { bound2 };
                rng.gen_range(-bound..=bound)
            })
            .collect();
        Ok(Self {
            config,
            params,
            version: fresh_version(),
        })
    }

    pub fn zeros(config: SeparatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: vec![0.0; config.n_params()],
            version: fresh_version(),
        })
    }

    pub fn from_params(config: SeparatorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.n_params() {
            return Err(Error::shape(config.n_params(), params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("separator parameter".into()));
        }
        Ok(Self {
            config,
            params,
            version: fresh_version(),
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.params
    }

    pub fn set_output_bias(&mut self, value: f64) {
        let [_, _, _, b2] = self.config.offsets();
        let k = self.config.sources;
        self.params_mut()[b2..b2 + k].fill(value);
    }

    pub fn zero_output_weights(&mut self) {
        let [_, _, w2, b2] = self.config.offsets();
        self.params_mut()[w2..b2].fill(0.0);
    }

    fn split(&self) -> (Array2<f64>, Array2<f64>, &[f64], Array2<f64>, &[f64]) {
        let c = &self.config;
        let h = c.hidden_width;
        let [w1, b1, w2, b2] = c.offsets();
        let full = Array2::from_shape_vec((h, c.inputs()), self.params[w1..b1].to_vec())
            .expect("w1 shape");
        let local = full.slice(ndarray::s![.., ..c.local_inputs()]).to_owned();
        let query = full.slice(ndarray::s![.., c.local_inputs()..]).to_owned();
        let out = Array2::from_shape_vec((c.sources, h), self.params[w2..b2].to_vec())
            .expect("w2 shape");
        (local, query, &self.params[b1..w2], out, &self.params[b2..])
    }

    /// Forward pass on prebuilt features.
    pub fn forward_features(&self, features: &Features, query: &[f64]) -> Result<Activations> {
        let c = &self.config;
        if query.len() != c.query_dim {
            return Err(Error::shape(format!("query of dim {}", c.query_dim), query.len()));
        }
        if features.rows.ncols() != c.local_inputs() {
            return Err(Error::shape(
                format!("{} local inputs", c.local_inputs()),
                features.rows.ncols(),
            ));
        }
        let (w_local, w_query, b1, w_out, b2) = self.split();
        let bias: Vec<f64> = (0..c.hidden_width)
            .map(|j| b1[j] + w_query.row(j).iter().zip(query).map(|(w, q)| w * q).sum::<f64>())
            .collect();
        let mut hidden = features.rows.dot(&w_local.t());
        for mut row in hidden.rows_mut() {
            for (h, b) in row.iter_mut().zip(&bias) {
                *h = (*h + b).max(0.0);
            }
        }
        let mut proposal = hidden.dot(&w_out.t());
        for mut row in proposal.rows_mut() {
            for (p, b) in row.iter_mut().zip(b2) {
                *p = sigmoid(*p + b);
            }
        }
        Ok(Activations {
            hidden,
            proposal,
            query: query.to_vec(),
            version: self.version,
        })
    }

    /// Forward pass from a log-compressed magnitude spectrogram.
    pub fn forward(&self, log_mag: &Array2<f64>, query: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let features = build_features(log_mag, self.config.context, self.config.freq_bands);
        let activations = self.forward_features(&features, query)?;
        Ok((
            activations.proposal().to_vec(),
            ForwardCache {
                features,
                activations,
            },
        ))
    }

    pub fn proposal_shape(&self, features: &Features) -> TensorShape {
        TensorShape::new(features.freqs, features.frames, self.config.sources)
    }

    /// Reverse-mode gradient of a scalar loss given `d loss / d proposal`
    /// (flat `(f, t, k)` order).
    pub fn backward_features(
        &self,
        features: &Features,
        acts: &Activations,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        if acts.version != self.version {
            return Err(Error::invalid(
                "stale forward cache: model parameters changed since the forward pass",
            ));
        }
        let c = &self.config;
        let n = features.n_bins();
        if upstream.len() != n * c.sources {
            return Err(Error::shape(n * c.sources, upstream.len()));
        }
        let (_, _, _, w_out, _) = self.split();
        // d loss / d output pre-activation
        let mut dz2 = Array2::from_shape_vec((n, c.sources), upstream.to_vec()).expect("shape");
        ndarray::Zip::from(&mut dz2)
            .and(&acts.proposal)
            .for_each(|d, &p| *d *= p * (1.0 - p));
        let dw2 = dz2.t().dot(&acts.hidden);
        let db2 = dz2.sum_axis(Axis(0));
        let mut dz1 = dz2.dot(&w_out);
        ndarray::Zip::from(&mut dz1)
            .and(&acts.hidden)
            .for_each(|d, &h| {
                if h <= 0.0 {
                    *d = 0.0
                }
            });
        let dw_local = dz1.t().dot(&features.rows);
        let db1 = dz1.sum_axis(Axis(0));

        let mut grads = vec![0.0; c.n_params()];
        let [w1, b1, w2, b2] = c.offsets();
        let (li, qi) = (c.local_inputs(), c.query_dim);
        for j in 0..c.hidden_width {
            let row = &mut grads[w1 + j * c.inputs()..w1 + (j + 1) * c.inputs()];
            for i in 0..li {
                row[i] = dw_local[[j, i]];
            }
            for i in 0..qi {
                row[li + i] = db1[j] * acts.query[i];
            }
        }
        grads[b1..w2].copy_from_slice(db1.as_slice().expect("contiguous"));
        grads[w2..b2].copy_from_slice(dw2.as_slice().expect("contiguous"));
        grads[b2..].copy_from_slice(db2.as_slice().expect("contiguous"));
        Ok(grads)
    }

    /// True when `acts` came from a forward pass with the current parameters
    /// (of this model or of a snapshot taken since the last update).
    pub fn owns(&self, acts: &Activations) -> bool {
        acts.version == self.version
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backward_features(&cache.features, &cache.activations, upstream)
    }

    pub fn snapshot(&self, step: usize) -> ModelSnapshot {
        ModelSnapshot {
            model: self.clone(),
            step,
        }
    }

    pub fn apply_adamw_step(
        &mut self,
        grads: &[f64],
        state: &mut AdamState,
        cfg: &AdamWConfig,
    ) -> Result<StepInfo> {
        let info = adamw_step(&mut self.params, grads, state, cfg)?;
        self.version = fresh_version();
        Ok(info)
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut m = serde_json::json!({ "config": self.config });
        if let (Some(obj), serde_json::Value::Object(extra)) = (m.as_object_mut(), meta) {
            obj.extend(extra);
        }
        Checkpoint::new("separator", m).with_array("params", self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("separator")?;
        let config: SeparatorConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Format(format!("separator config: {e}")))?;
        Self::from_params(config, ck.array("params")?.to_vec())
    }
}

/// Frozen copy of a model, used as the behaviour policy for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    model: SeparatorModel,
    step: usize,
}

impl ModelSnapshot {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &SeparatorModel {
        &self.model
    }

    pub fn forward_features(&self, features: &Features, query: &[f64]) -> Result<Activations> {
        self.model.forward_features(features, query)
    }

    pub fn forward(&self, log_mag: &Array2<f64>, query: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.model.forward(log_mag, query)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        self.clone()
    }
}

/// Deterministic inference: the proposal itself is used as the mask for
/// each target source and the masked mixture is inverted back to a
/// waveform of the mixture's length.
pub fn separate(model: &SeparatorModel, mixture: &Waveform, query: &[f64]) -> Result<Vec<Waveform>> {
    let spec = stft(mixture, &StftConfig::default())?;
    let (proposal, _) = model.forward(&spec.log_magnitude(), query)?;
    let (freqs, frames) = spec.shape();
    let k = model.config.sources;
    (0..k)
        .map(|src| {
            let values = Array2::from_shape_fn((freqs, frames), |(f, t)| proposal[(f * frames + t) * k + src]);
            apply_mask_reconstruct(&spec, &Mask::new(values)?)
        })
        .collect()
}

/// Mean binary cross-entropy between a proposal and a target mask, with the
/// gradient with respect to the proposal. Used for optional supervised
/// warm starts.
pub fn bce_loss(proposal: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    const EPS: f64 = 1e-7;
    let n = proposal.len() as f64;
    let mut loss = 0.0;
    let grad = proposal
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            (p - y) / (p * (1.0 - p)) / n
        })
        .collect();
    (loss / n, grad)
}
