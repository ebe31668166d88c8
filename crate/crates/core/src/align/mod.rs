//! Progressive alignment of the projection heads.
//!
//! Three stages train the audio, text and vision heads plus a shared
//! temperature on contrastive objectives built from an embedding store:
//! audio against label text, audio against same-class and other-class
//! audio, then audio against aligned and misaligned video. Later stages
//! start from the best checkpoint of the previous one and replay a share of
//! earlier pairs.

mod curriculum;
mod gap;
mod pairs;

use ndarray::{Array1, Array2, Axis};

use crate::embed::Temperature;
use crate::error::{Error, Result};

pub use curriculum::{
    run_curriculum, stage_loss_and_grads, AlignConfig, AlignHeads, CurriculumState, StageConfig, StageResult,
    ALIGN_HEADS_KIND,
};
pub use gap::{discrimination_gap, gap_items, GapItem, GapStats};
pub use pairs::{build_pairs, split_pairs, Member, Pair, PairBatch};

/// Loss value with gradients for each input batch and the log-temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// One gradient per input batch, in argument order.
    pub grads: Vec<Array2<f64>>,
    pub d_log_tau: f64,
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Symmetric InfoNCE over in-batch negatives: row `i` of `za` is paired
/// with row `i` of `zt`,
///
/// ```text
/// L = -1/(2N) sum_i [ log softmax_j(<za_i, zt_j>/tau)_i + log softmax_j(<za_j, zt_i>/tau)_i ]
/// ```
pub fn info_nce_symmetric(za: &Array2<f64>, zt: &Array2<f64>, tau: Temperature) -> Result<LossGrad> {
    check_pair(za, zt)?;
    let n = za.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("InfoNCE needs at least 2 pairs, got {n}")));
    }
    let t = tau.tau();
    let sims = za.dot(&zt.t());
    let logits = &sims / t;
    let lp_row = log_softmax_rows(&logits);
    let lp_col = log_softmax_rows(&logits.t().to_owned());
    let nf = n as f64;
    let loss = -(0..n).map(|i| lp_row[[i, i]] + lp_col[[i, i]]).sum::<f64>() / (2.0 * nf);

    // d loss / d logits
    let mut g = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let p = lp_row[[i, j]].exp();
            let q = lp_col[[j, i]].exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            g[[i, j]] = (p + q - delta) / (2.0 * nf);
        }
    }
    let ds = &g / t;
    let d_log_tau = -(&g * &sims).sum() / (t * t) * tau.dtau_dlog();
    Ok(LossGrad {
        loss,
        grads: vec![ds.dot(zt), ds.t().dot(za)],
        d_log_tau,
    })
}

fn cosine_with_grads(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity"));
    }
    let c = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv);
    let du = u.iter().zip(v).map(|(a, b)| b / (nu * nv) - c * a / (nu * nu)).collect();
    let dv = u.iter().zip(v).map(|(a, b)| a / (nu * nv) - c * b / (nv * nv)).collect();
    Ok((c, du, dv))
}

/// Batch mean of `max(0, [1 - cos(z1, z2)] - [1 - cos(z1, zn)] + margin)`.
pub fn triplet_loss(z1: &Array2<f64>, z2: &Array2<f64>, zn: &Array2<f64>, margin: f64) -> Result<LossGrad> {
    check_pair(z1, z2)?;
    check_pair(z1, zn)?;
    let n = z1.nrows();
    if n == 0 {
        return Err(Error::invalid("triplet loss over an empty batch"));
    }
    let nf = n as f64;
    let mut grads = vec![Array2::<f64>::zeros(z1.dim()); 3];
    let mut loss = 0.0;
    for i in 0..n {
        let (a, p, q) = (z1.row(i).to_vec(), z2.row(i).to_vec(), zn.row(i).to_vec());
        let (cp, da_p, dp) = cosine_with_grads(&a, &p)?;
        let (cn, da_n, dn) = cosine_with_grads(&a, &q)?;
        let h = (1.0 - cp) - (1.0 - cn) + margin;
        if h > 0.0 {
            loss += h / nf;
            for k in 0..a.len() {
                grads[0][[i, k]] = (da_n[k] - da_p[k]) / nf;
                grads[1][[i, k]] = -dp[k] / nf;
                grads[2][[i, k]] = dn[k] / nf;
            }
        }
    }
    Ok(LossGrad {
        loss,
        grads,
        d_log_tau: 0.0,
    })
}

/// Batch mean of `||z1 - z2||^2`.
pub fn consistency_loss(z1: &Array2<f64>, z2: &Array2<f64>) -> Result<LossGrad> {
    check_pair(z1, z2)?;
    let n = z1.nrows().max(1) as f64;
    let diff = z1 - z2;
    Ok(LossGrad {
        loss: diff.mapv(|d| d * d).sum() / n,
        grads: vec![&diff * (2.0 / n), &diff * (-2.0 / n)],
        d_log_tau: 0.0,
    })
}

/// Coefficients of the audio-audio stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Weights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
}

/// `l1 InfoNCE(z1, z2) + l2 Triplet(z1, z2, zn) + l3 ||z1 - z2||^2`. The
/// InfoNCE term uses in-batch negatives; `zn` only enters the triplet.
/// Gradients are for `[z1, z2, zn]`.
pub fn stage2_loss(
    z1: &Array2<f64>,
    z2: &Array2<f64>,
    zn: &Array2<f64>,
    w: &Stage2Weights,
    tau: Temperature,
) -> Result<LossGrad> {
    let mut out = LossGrad {
        loss: 0.0,
        grads: vec![Array2::zeros(z1.dim()); 3],
        d_log_tau: 0.0,
    };
    if w.lambda1 != 0.0 {
        let l = info_nce_symmetric(z1, z2, tau)?;
        out.add(&l, w.lambda1, &[0, 1]);
    }
    if w.lambda2 != 0.0 {
        let l = triplet_loss(z1, z2, zn, w.margin)?;
        out.add(&l, w.lambda2, &[0, 1, 2]);
    }
    if w.lambda3 != 0.0 {
        let l = consistency_loss(z1, z2)?;
        out.add(&l, w.lambda3, &[0, 1]);
    }
    Ok(out)
}

impl LossGrad {
    /// Adds `weight * other`, routing `other.grads[k]` to `self.grads[slots[k]]`.
    fn add(&mut self, other: &LossGrad, weight: f64, slots: &[usize]) {
        self.loss += weight * other.loss;
        self.d_log_tau += weight * other.d_log_tau;
        for (g, &s) in other.grads.iter().zip(slots) {
            self.grads[s].scaled_add(weight, g);
        }
    }
}

/// Coefficients of the audio-video stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage3Weights {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mu4: f64,
    pub margin: f64,
    pub stage2: Stage2Weights,
}

/// Replayed earlier-stage batches for the audio-video stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct Replay<'a> {
    /// Audio-text pairs.
    pub stage1: Option<(&'a Array2<f64>, &'a Array2<f64>)>,
    /// Audio triplets.
    pub stage2: Option<(&'a Array2<f64>, &'a Array2<f64>, &'a Array2<f64>)>,
}

/// `mu1 InfoNCE(za, zv+) + mu2 Triplet(za, zv+, zv-) + mu3 L1(replay) + mu4 L2(replay)`.
/// Gradients are for `[za, zv+, zv-, r1_audio, r1_text, r2_z1, r2_z2, r2_zn]`;
/// replay slots are empty matrices when the replay batch is absent.
pub fn stage3_loss(
    za: &Array2<f64>,
    zv_pos: &Array2<f64>,
    zv_neg: &Array2<f64>,
    replay: Replay<'_>,
    w: &Stage3Weights,
    tau: Temperature,
) -> Result<LossGrad> {
    let empty = Array2::<f64>::zeros((0, za.ncols()));
    let shape_of = |m: Option<&Array2<f64>>| m.map_or(empty.clone(), |m| Array2::zeros(m.dim()));
    let mut out = LossGrad {
        loss: 0.0,
        grads: vec![
            Array2::zeros(za.dim()),
            Array2::zeros(zv_pos.dim()),
            Array2::zeros(zv_neg.dim()),
            shape_of(replay.stage1.map(|r| r.0)),
            shape_of(replay.stage1.map(|r| r.1)),
            shape_of(replay.stage2.map(|r| r.0)),
            shape_of(replay.stage2.map(|r| r.1)),
            shape_of(replay.stage2.map(|r| r.2)),
        ],
        d_log_tau: 0.0,
    };
    if w.mu1 != 0.0 {
        out.add(&info_nce_symmetric(za, zv_pos, tau)?, w.mu1, &[0, 1]);
    }
    if w.mu2 != 0.0 {
        out.add(&triplet_loss(za, zv_pos, zv_neg, w.margin)?, w.mu2, &[0, 1, 2]);
    }
    if w.mu3 != 0.0 {
        let (a, t) = replay
            .stage1
            .ok_or_else(|| Error::invalid("stage-1 replay batch required when mu3 > 0"))?;
        out.add(&info_nce_symmetric(a, t, tau)?, w.mu3, &[3, 4]);
    }
    if w.mu4 != 0.0 {
        let (a, p, n) = replay
            .stage2
            .ok_or_else(|| Error::invalid("stage-2 replay batch required when mu4 > 0"))?;
        out.add(&stage2_loss(a, p, n, &w.stage2, tau)?, w.mu4, &[5, 6, 7]);
    }
    Ok(out)
}

/// Stacks vectors into the rows of a matrix.
pub fn stack(rows: &[Array1<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in m.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(src);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn info_nce_two_orthonormal_pairs() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let l = info_nce_symmetric(&e, &e, Temperature::from_tau(1.0)).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l.loss - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
        assert!(info_nce_symmetric(&e.slice(ndarray::s![..1, ..]).to_owned(), &e.slice(ndarray::s![..1, ..]).to_owned(), Temperature::default()).is_err());
    }

    #[test]
    fn stage2_examples() {
        let z1 = array![[1.0, 0.0]];
        let orth = array![[0.0, 1.0]];
        let w = |l1, l2, l3| Stage2Weights {
            lambda1: l1,
            lambda2: l2,
            lambda3: l3,
            margin: 0.2,
        };
        let tau = Temperature::default();
        let l = stage2_loss(&z1, &z1, &orth, &w(0.0, 1.0, 1.0), tau).unwrap();
        assert_eq!(l.loss, 0.0);
        let l = stage2_loss(&z1, &orth, &z1, &w(0.0, 1.0, 0.0), tau).unwrap();
        assert!((l.loss - 1.2).abs() < 1e-12);
        let half = array![[0.5, 0.75f64.sqrt()]];
        let l = stage2_loss(&z1, &half, &orth, &w(0.0, 0.0, 1.0), tau).unwrap();
        assert!((l.loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stage3_reduces_and_requires_replay() {
        let za = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let zv = array![[0.8, 0.6], [0.0, 1.0], [1.0, 0.0]];
        let s2 = Stage2Weights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            margin: 0.2,
        };
        let w = Stage3Weights {
            mu1: 1.0,
            mu2: 0.0,
            mu3: 0.0,
            mu4: 0.0,
            margin: 0.2,
            stage2: s2,
        };
        let tau = Temperature::default();
        let l = stage3_loss(&za, &zv, &zv, Replay::default(), &w, tau).unwrap();
        assert_eq!(l.loss, info_nce_symmetric(&za, &zv, tau).unwrap().loss);
        let w3 = Stage3Weights { mu3: 0.25, ..w };
        assert!(stage3_loss(&za, &zv, &zv, Replay::default(), &w3, tau).is_err());
    }
}
