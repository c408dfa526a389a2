//! Group partitions of a weight tensor, group penalties and channel masks.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// A disjoint partition of a tensor's flat indices into groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    shape: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    /// One group per index of `axis`: group `g` is the slice with `index[axis] == g`.
    ///
    /// For a conv kernel `(m, r, c, n)` and `axis = 2` this gives the channel
    /// groups `W[:, :, g, :]` of size `m * r * n`.
    pub fn along_axis(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
        }
        if shape.contains(&0) {
            return dim_err(format!("shape {shape:?} has a zero dimension"));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let count = shape[axis];
        let mut groups = vec![Vec::with_capacity(outer * inner); count];
        for o in 0..outer {
            for (g, group) in groups.iter_mut().enumerate() {
                let base = (o * count + g) * inner;
                group.extend(base..base + inner);
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            groups,
        })
    }

    /// Consecutive runs of the flat index space with the given sizes.
    pub fn contiguous(shape: &[usize], sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&len| {
                let g: Vec<usize> = (start..start + len).collect();
                start += len;
                g
            })
            .collect();
        Self::from_groups(shape, groups)
    }

    /// Validates that `groups` are non-empty, disjoint, and cover the tensor.
    pub fn from_groups(shape: &[usize], groups: Vec<Vec<usize>>) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut seen = vec![false; len];
        for group in &groups {
            if group.is_empty() {
                return Err(Error::Config("empty group".into()));
            }
            for &i in group {
                if i >= len {
                    return Err(Error::Index { index: i, len });
                }
                if seen[i] {
                    return Err(Error::Config(format!("index {i} appears in two groups")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!("index {i} belongs to no group")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            groups,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn group_size(&self, g: usize) -> usize {
        self.groups[g].len()
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        self.groups.iter().map(Vec::as_slice)
    }

    pub fn check(&self, w: &Tensor) -> Result<()> {
        if w.shape() != self.shape.as_slice() {
            return dim_err(format!(
                "partition built for {:?} applied to {:?}",
                self.shape,
                w.shape()
            ));
        }
        Ok(())
    }

    /// Euclidean norm of every group.
    pub fn group_norms(&self, w: &Tensor) -> Result<Vec<f64>> {
        self.check(w)?;
        let data = w.data();
        Ok(self
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| data[i] * data[i]).sum::<f64>().sqrt())
            .collect())
    }
}

/// `sum_g ||w_g||_2`.
pub fn group_lasso_norm(w: &Tensor, part: &GroupPartition) -> Result<f64> {
    Ok(part.group_norms(w)?.into_iter().sum())
}

/// Number of groups with a nonzero entry.
pub fn group_l0_norm(w: &Tensor, part: &GroupPartition) -> Result<usize> {
    Ok(nonzero_groups(w, part)?.into_iter().filter(|&nz| nz).count())
}

/// Whether each group has an entry different from zero. Tested entrywise so
/// that tiny entries whose squares underflow still count.
pub fn nonzero_groups(w: &Tensor, part: &GroupPartition) -> Result<Vec<bool>> {
    part.check(w)?;
    let data = w.data();
    Ok(part
        .groups
        .iter()
        .map(|g| g.iter().any(|&i| data[i] != 0.0))
        .collect())
}

/// Percentage of groups that are exactly zero, rounded to one decimal.
pub fn channel_sparsity(w: &Tensor, part: &GroupPartition) -> Result<f64> {
    let nonzero = group_l0_norm(w, part)?;
    Ok(sparsity_percent(part.num_groups() - nonzero, part.num_groups()))
}

/// `100 * zeros / total` rounded to one decimal (half away from zero).
pub fn sparsity_percent(zeros: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1000.0 * zeros as f64 / total as f64).round() / 10.0
}

pub fn extract_groups(w: &Tensor, part: &GroupPartition) -> Result<Vec<Vec<f64>>> {
    part.check(w)?;
    let data = w.data();
    Ok(part
        .groups
        .iter()
        .map(|g| g.iter().map(|&i| data[i]).collect())
        .collect())
}

/// Inverse of [`extract_groups`].
pub fn scatter_groups(groups: &[Vec<f64>], part: &GroupPartition) -> Result<Tensor> {
    if groups.len() != part.num_groups() {
        return dim_err(format!(
            "{} group vectors for a partition of {} groups",
            groups.len(),
            part.num_groups()
        ));
    }
    let mut out = Tensor::zeros(&part.shape);
    let data = out.data_mut();
    for (values, idx) in groups.iter().zip(&part.groups) {
        if values.len() != idx.len() {
            return dim_err(format!("group of {} values for {} indices", values.len(), idx.len()));
        }
        for (&v, &i) in values.iter().zip(idx) {
            data[i] = v;
        }
    }
    Ok(out)
}

/// Frozen keep/prune pattern over channels: `true` keeps the channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    bits: Vec<bool>,
}

impl ChannelMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_ones(channels: usize) -> Self {
        Self::new(vec![true; channels])
    }

    /// Keeps every group whose Euclidean norm exceeds `zero_tol`.
    /// With `zero_tol = 0` only exactly-zero groups are pruned.
    pub fn from_group_norms(w: &Tensor, part: &GroupPartition, zero_tol: f64) -> Result<Self> {
        if zero_tol == 0.0 {
            return Ok(Self::new(nonzero_groups(w, part)?));
        }
        Ok(Self::new(
            part.group_norms(w)?.into_iter().map(|n| n > zero_tol).collect(),
        ))
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn keeps(&self, channel: usize) -> bool {
        self.bits[channel]
    }

    pub fn zeros(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    /// Fraction of pruned channels.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.zeros() as f64 / self.bits.len() as f64
        }
    }

    pub fn sparsity_percent(&self) -> f64 {
        sparsity_percent(self.zeros(), self.bits.len())
    }

    /// 0/1 bar data, one entry per channel.
    pub fn as_bars(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    /// Per-coordinate keep flags for a tensor partitioned into these channels.
    pub fn coordinate_keep(&self, part: &GroupPartition) -> Result<Vec<bool>> {
        if part.num_groups() != self.bits.len() {
            return dim_err(format!(
                "mask over {} channels applied to {} groups",
                self.bits.len(),
                part.num_groups()
            ));
        }
        let mut keep = vec![true; part.shape.iter().product()];
        for (g, idx) in part.groups.iter().enumerate() {
            if !self.bits[g] {
                for &i in idx {
                    keep[i] = false;
                }
            }
        }
        Ok(keep)
    }

    /// Sets the pruned groups of `w` to exactly zero.
    pub fn zero_pruned(&self, w: &mut Tensor, part: &GroupPartition) -> Result<()> {
        part.check(w)?;
        if part.num_groups() != self.bits.len() {
            return dim_err("mask length does not match group count");
        }
        let data = w.data_mut();
        for (g, idx) in part.groups.iter().enumerate() {
            if !self.bits[g] {
                for &i in idx {
                    data[i] = 0.0;
                }
            }
        }
        Ok(())
    }
}
