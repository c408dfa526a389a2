//! Closed-form proximal maps for group penalties and the projection onto
//! scaled sign vectors.

use crate::error::{dim_err, Error, Result};
use crate::grouping::{group_l0_norm, group_lasso_norm, ChannelMask, GroupPartition};
use crate::tensor::Tensor;

/// A group penalty `P` with a closed-form proximal map
/// `argmin_y 1/2 ||y - w||^2 + lambda * P(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupPenalty {
    /// `sum_g ||w_g||_2`; prox is group soft-thresholding at `lambda`.
    #[default]
    GroupLasso,
    /// Number of nonzero groups; prox is group hard-thresholding at `sqrt(2 lambda)`.
    GroupL0,
}

impl GroupPenalty {
    pub fn value(self, w: &Tensor, part: &GroupPartition) -> Result<f64> {
        match self {
            GroupPenalty::GroupLasso => group_lasso_norm(w, part),
            GroupPenalty::GroupL0 => group_l0_norm(w, part).map(|n| n as f64),
        }
    }

    pub fn prox(self, w: &Tensor, part: &GroupPartition, lambda: f64) -> Result<Tensor> {
        match self {
            GroupPenalty::GroupLasso => prox_gl(w, part, lambda),
            GroupPenalty::GroupL0 => prox_gl0(w, part, lambda),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("prox threshold must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// Group soft-thresholding: `w_g * max(||w_g|| - lambda, 0) / ||w_g||`.
///
/// Groups with `||w_g|| <= lambda` come out exactly zero.
pub fn prox_gl(w: &Tensor, part: &GroupPartition, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    let norms = part.group_norms(w)?;
    let mut out = w.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let data = out.data_mut();
    for (idx, norm) in part.groups().zip(norms) {
        if norm > lambda {
            let factor = (norm - lambda) / norm;
            for &i in idx {
                data[i] *= factor;
            }
        } else {
            for &i in idx {
                data[i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Group hard-thresholding: keeps `w_g` verbatim iff `||w_g|| > sqrt(2 lambda)`.
pub fn prox_gl0(w: &Tensor, part: &GroupPartition, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    let threshold = (2.0 * lambda).sqrt();
    let norms = part.group_norms(w)?;
    let mut out = w.clone();
    let data = out.data_mut();
    for (idx, norm) in part.groups().zip(norms) {
        if norm <= threshold {
            for &i in idx {
                data[i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// A tensor of the form `scale * signs`, with optionally pruned coordinates
/// that reconstruct to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryWeights {
    shape: Vec<usize>,
    scale: f64,
    signs: Vec<i8>,
    keep: Vec<bool>,
}

impl BinaryWeights {
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn reconstruct(&self) -> Tensor {
        let data = self
            .signs
            .iter()
            .zip(&self.keep)
            .map(|(&s, &k)| if k { self.scale * f64::from(s) } else { 0.0 })
            .collect();
        Tensor::new(&self.shape, data).expect("shape recorded at projection")
    }
}

/// Closest point of `R_+ x {-1, +1}^D` to `w`: scale is the mean absolute
/// value, signs are `+1` for `w_j >= 0`.
pub fn binary_project(w: &Tensor) -> Result<BinaryWeights> {
    binary_project_where(w, &vec![true; w.len()])
}

/// [`binary_project`] restricted to coordinates with `keep[j]`; the mean runs
/// over kept coordinates only and the rest reconstruct to exactly zero.
pub fn binary_project_where(w: &Tensor, keep: &[bool]) -> Result<BinaryWeights> {
    if w.is_empty() {
        return dim_err("binary projection of an empty vector");
    }
    if keep.len() != w.len() {
        return dim_err(format!("keep mask of length {} for {} weights", keep.len(), w.len()));
    }
    let (sum, count) = w
        .data()
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v.abs(), c + 1));
    if count == 0 {
        return Err(Error::Degenerate("every coordinate is masked".into()));
    }
    let signs = w.data().iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    Ok(BinaryWeights {
        shape: w.shape().to_vec(),
        scale: sum / count as f64,
        signs,
        keep: keep.to_vec(),
    })
}

/// Binary projection of the channels kept by `mask`.
pub fn binary_project_masked(
    w: &Tensor,
    mask: &ChannelMask,
    part: &GroupPartition,
) -> Result<BinaryWeights> {
    part.check(w)?;
    binary_project_where(w, &mask.coordinate_keep(part)?)
}
