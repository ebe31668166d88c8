use ndarray::{Array1, Array2};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::reward::EmbeddingVector;

/// Affine map followed by l2 normalization: `unit(W e + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Intermediate values of one projection, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectCache {
    input: Array1<f64>,
    output: Array1<f64>,
    pre_norm: f64,
}

impl ProjectCache {
    pub fn output(&self) -> &Array1<f64> {
        &self.output
    }
}

impl ProjectionHead {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        let d = weight.nrows();
        if weight.ncols() != d || bias.len() != d {
            return Err(Error::shape(
                format!("{d}x{d} weight and {d} bias"),
                format!("{:?} / {}", weight.dim(), bias.len()),
            ));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection head parameter".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn n_params(&self) -> usize {
        self.dim() * (self.dim() + 1)
    }

    /// Row-major weight followed by bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.weight.iter().chain(self.bias.iter()).copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::shape(self.n_params(), flat.len()));
        }
        let d = self.dim();
        self.weight
            .iter_mut()
            .zip(&flat[..d * d])
            .for_each(|(w, v)| *w = *v);
        self.bias.iter_mut().zip(&flat[d * d..]).for_each(|(b, v)| *b = *v);
        Ok(())
    }

    pub fn project_with_cache(&self, e: &EmbeddingVector) -> Result<ProjectCache> {
        if e.dim() != self.dim() {
            return Err(Error::shape(self.dim(), e.dim()));
        }
        let input = Array1::from_vec(e.values().to_vec());
        let u = self.weight.dot(&input) + &self.bias;
        let pre_norm = u.dot(&u).sqrt();
        if pre_norm == 0.0 {
            return Err(Error::ZeroNorm("projection head output"));
        }
        Ok(ProjectCache {
            input,
            output: u / pre_norm,
            pre_norm,
        })
    }

    pub fn project(&self, e: &EmbeddingVector) -> Result<EmbeddingVector> {
        EmbeddingVector::new(self.project_with_cache(e)?.output.to_vec())
    }

    /// Gradient of a scalar loss with respect to the flat parameters, given
    /// its gradient `upstream` with respect to the normalized output.
    pub fn backward(&self, cache: &ProjectCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if upstream.len() != d || cache.input.len() != d {
            return Err(Error::shape(d, upstream.len()));
        }
        let z = &cache.output;
        let gz: f64 = upstream.iter().zip(z.iter()).map(|(g, z)| g * z).sum();
        let gu: Vec<f64> = upstream
            .iter()
            .zip(z.iter())
            .map(|(g, z)| (g - gz * z) / cache.pre_norm)
            .collect();
        let mut grad = Vec::with_capacity(self.n_params());
        for gi in &gu {
            grad.extend(cache.input.iter().map(|x| gi * x));
        }
        grad.extend_from_slice(&gu);
        Ok(grad)
    }

    pub fn to_checkpoint(&self, name: &str) -> Checkpoint {
        Checkpoint::new("projection-head", serde_json::json!({ "name": name, "dim": self.dim() }))
            .with_array("params", self.flat_params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("projection-head")?;
        let dim = ck.meta["dim"]
            .as_u64()
            .ok_or_else(|| Error::Format("projection head checkpoint lacks dim".into()))? as usize;
        let mut head = Self::identity(dim);
        head.set_flat_params(ck.array("params")?)?;
        Ok(head)
    }
}

pub const LOG_TAU_MIN: f64 = -6.907_755_278_982_137; // ln 1e-3
pub const LOG_TAU_MAX: f64 = 6.907_755_278_982_137;

/// Contrastive temperature, learned in log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub log_tau: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self::from_tau(0.07)
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Self {
        Self { log_tau: tau.ln() }
    }

    /// `exp(log_tau)` clamped to `[1e-3, 1e3]`.
    pub fn tau(&self) -> f64 {
        self.log_tau.clamp(LOG_TAU_MIN, LOG_TAU_MAX).exp()
    }

    /// `d tau / d log_tau`: `tau` inside the clamp range, zero outside.
    pub fn dtau_dlog(&self) -> f64 {
        if (LOG_TAU_MIN..=LOG_TAU_MAX).contains(&self.log_tau) {
            self.tau()
        } else {
            0.0
        }
    }
}
