//! Update rules for group-sparse and binarized training, plus the
//! convergence diagnostics of the relaxed splitting scheme.
//!
//! Every rule works on an ordered list of parameter tensors. Tensors with a
//! [`GroupPartition`] are "grouped" and carry an auxiliary group-sparse copy
//! `u`; the others are updated by plain gradient steps.

use crate::error::{dim_err, Error, Result};
use crate::grouping::GroupPartition;
use crate::prox::{binary_project_where, GroupPenalty};
use crate::tensor::Tensor;

fn check_grads(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return dim_err(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            params.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        p.check_same_shape(g, "gradient")?;
    }
    Ok(())
}

/// `w <- w - eta * grad` for every tensor.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], eta: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= eta * d;
        }
    }
    Ok(())
}

/// Adds `coeff * w` to each gradient (weight decay merged into the loss).
pub fn add_weight_decay(grads: &mut [Tensor], params: &[Tensor], coeff: f64) -> Result<()> {
    check_grads(params, grads)?;
    if coeff != 0.0 {
        for (g, p) in grads.iter_mut().zip(params) {
            g.axpy(coeff, p)?;
        }
    }
    Ok(())
}

/// Subgradient step on `loss + mu * sum_g ||w_g||` over the grouped tensors.
///
/// The subgradient of a zero group is taken as 0.
pub fn gl_penalty_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    partitions: &[Option<GroupPartition>],
    mu: f64,
    eta: f64,
) -> Result<()> {
    check_grads(params, grads)?;
    if partitions.len() != params.len() {
        return dim_err("one partition slot per parameter tensor is required");
    }
    if mu.is_nan() || mu < 0.0 {
        return Err(Error::Config(format!("mu must be >= 0, got {mu}")));
    }
    for ((p, g), part) in params.iter_mut().zip(grads).zip(partitions) {
        let mut step = g.clone();
        if let Some(part) = part {
            let norms = part.group_norms(p)?;
            let (w, s) = (p.data(), step.data_mut());
            for (idx, norm) in part.groups().zip(norms) {
                if norm > 0.0 {
                    for &i in idx {
                        s[i] += mu * w[i] / norm;
                    }
                }
            }
        }
        for (w, &d) in p.data_mut().iter_mut().zip(step.data()) {
            *w -= eta * d;
        }
    }
    Ok(())
}

/// Optimizer state `(u, w)` of the relaxed group-wise splitting method and of
/// group-sparse BinaryConnect.
///
/// After construction `u = prox(w)`. A step first refreshes `u` from the
/// current `w` and then moves `w`, so between steps the state holds
/// `(u^t, w^{t+1})`.
#[derive(Debug, Clone)]
pub struct SplitState {
    w: Vec<Tensor>,
    u: Vec<Option<Tensor>>,
    partitions: Vec<Option<GroupPartition>>,
    eta: f64,
    beta: f64,
    lambda: f64,
    penalty: GroupPenalty,
}

impl SplitState {
    pub fn new(
        w: Vec<Tensor>,
        partitions: Vec<Option<GroupPartition>>,
        eta: f64,
        beta: f64,
        lambda: f64,
    ) -> Result<Self> {
        let u = vec![None; w.len()];
        let mut state = Self::from_parts(w, u, partitions, eta, beta, lambda)?;
        state.u = state.prox_of_w()?;
        Ok(state)
    }

    /// Builds a state from an arbitrary pair; `u[i]` must be `Some` exactly
    /// where `partitions[i]` is.
    pub fn from_parts(
        w: Vec<Tensor>,
        u: Vec<Option<Tensor>>,
        partitions: Vec<Option<GroupPartition>>,
        eta: f64,
        beta: f64,
        lambda: f64,
    ) -> Result<Self> {
        if eta.is_nan() || eta <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {eta}")));
        }
        if beta.is_nan() || lambda.is_nan() || beta < 0.0 || lambda < 0.0 {
            return Err(Error::Config(format!(
                "beta and lambda must be >= 0, got beta={beta}, lambda={lambda}"
            )));
        }
        if partitions.len() != w.len() || u.len() != w.len() {
            return dim_err("w, u and partitions must have one entry per tensor");
        }
        for (i, (wi, part)) in w.iter().zip(&partitions).enumerate() {
            if let Some(part) = part {
                part.check(wi)?;
                if let Some(ui) = &u[i] {
                    wi.check_same_shape(ui, "split state u")?;
                }
            } else if u[i].is_some() {
                return dim_err(format!("tensor {i} is ungrouped but has an auxiliary copy"));
            }
        }
        Ok(Self {
            w,
            u,
            partitions,
            eta,
            beta,
            lambda,
            penalty: GroupPenalty::GroupLasso,
        })
    }

    pub fn with_penalty(mut self, penalty: GroupPenalty) -> Result<Self> {
        self.penalty = penalty;
        self.u = self.prox_of_w()?;
        Ok(self)
    }

    pub fn w(&self) -> &[Tensor] {
        &self.w
    }

    pub fn u(&self) -> &[Option<Tensor>] {
        &self.u
    }

    pub fn partitions(&self) -> &[Option<GroupPartition>] {
        &self.partitions
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn set_eta(&mut self, eta: f64) {
        self.eta = eta;
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn penalty(&self) -> GroupPenalty {
        self.penalty
    }

    fn prox_of_w(&self) -> Result<Vec<Option<Tensor>>> {
        self.w
            .iter()
            .zip(&self.partitions)
            .map(|(w, part)| {
                part.as_ref()
                    .map(|p| self.penalty.prox(w, p, self.lambda))
                    .transpose()
            })
            .collect()
    }

    /// `prox(w)` on grouped tensors and `w` elsewhere: the point at which
    /// group-sparse BinaryConnect evaluates its gradient.
    pub fn prox_point(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .prox_of_w()?
            .into_iter()
            .zip(&self.w)
            .map(|(u, w)| u.unwrap_or_else(|| w.clone()))
            .collect())
    }

    /// Stored `u` on grouped tensors and `w` elsewhere.
    pub fn sparse_params(&self) -> Vec<Tensor> {
        self.u
            .iter()
            .zip(&self.w)
            .map(|(u, w)| u.clone().unwrap_or_else(|| w.clone()))
            .collect()
    }

    /// `u^t = prox(w^t)`, then `w^{t+1} = w^t - eta grad - eta beta (w^t - u^t)`.
    pub fn rgsm_step(&mut self, grad: &[Tensor]) -> Result<()> {
        check_grads(&self.w, grad)?;
        self.u = self.prox_of_w()?;
        let coupling = self.eta * self.beta;
        for ((w, u), g) in self.w.iter_mut().zip(&self.u).zip(grad) {
            match u {
                Some(u) => {
                    for ((wv, &uv), &gv) in w.data_mut().iter_mut().zip(u.data()).zip(g.data()) {
                        let gap = *wv - uv;
                        *wv = *wv - self.eta * gv - coupling * gap;
                    }
                }
                None => {
                    for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv -= self.eta * gv;
                    }
                }
            }
        }
        Ok(())
    }

    /// `u^t = prox(w^t)`, then `w^{t+1} = w^t - eta grad(u^t)`.
    ///
    /// `grad_at_u` must be evaluated at [`SplitState::prox_point`].
    pub fn gsbc_step(&mut self, grad_at_u: &[Tensor]) -> Result<()> {
        check_grads(&self.w, grad_at_u)?;
        self.u = self.prox_of_w()?;
        sgd_step(&mut self.w, grad_at_u, self.eta)
    }

    /// Zeros the coordinates with `keep[j] == false` in both `w` and `u`.
    pub fn zero_coordinates(&mut self, keep: &[Option<Vec<bool>>]) -> Result<()> {
        zero_masked(&mut self.w, keep)?;
        for (u, k) in self.u.iter_mut().zip(keep) {
            if let (Some(u), Some(k)) = (u, k) {
                for (v, &kk) in u.data_mut().iter_mut().zip(k) {
                    if !kk {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok(())
    }

    /// `L = loss(w) + lambda beta P(u) + beta/2 ||w - u||^2`.
    ///
    /// The penalty weight `mu = lambda * beta` is the one whose exact
    /// `u`-minimizer is the prox with threshold `lambda`.
    pub fn lagrangian(&self, loss_at_w: f64) -> Result<f64> {
        let mut penalty = 0.0;
        let mut gap = 0.0;
        for ((w, u), part) in self.w.iter().zip(&self.u).zip(&self.partitions) {
            if let (Some(u), Some(part)) = (u, part) {
                penalty += self.penalty.value(u, part)?;
                gap += crate::tensor::distance(w, u)?.powi(2);
            }
        }
        Ok(loss_at_w + self.lambda * self.beta * penalty + 0.5 * self.beta * gap)
    }

    /// Distance of the state from the equilibrium system
    /// `u = prox(w)`, `grad loss(w) = beta (u - w)`.
    pub fn equilibrium_residual(&self, grad_at_w: &[Tensor]) -> Result<EquilibriumResidual> {
        check_grads(&self.w, grad_at_w)?;
        let prox = self.prox_of_w()?;
        let mut r_prox = 0.0;
        let mut r_grad = 0.0;
        for (((w, u), p), g) in self.w.iter().zip(&self.u).zip(&prox).zip(grad_at_w) {
            match (u, p) {
                (Some(u), Some(p)) => {
                    r_prox += crate::tensor::distance(u, p)?.powi(2);
                    for ((&gv, &uv), &wv) in g.data().iter().zip(u.data()).zip(w.data()) {
                        r_grad += (gv - self.beta * (uv - wv)).powi(2);
                    }
                }
                _ => r_grad += g.norm_sq(),
            }
        }
        Ok(EquilibriumResidual {
            r_prox: r_prox.sqrt(),
            r_grad: r_grad.sqrt(),
        })
    }

    /// `||(u', w') - (u, w)||` between two states over the same parameters.
    pub fn iterate_distance(&self, other: &SplitState) -> Result<f64> {
        if self.w.len() != other.w.len() {
            return dim_err("states differ in tensor count");
        }
        let mut total = 0.0;
        for (a, b) in self.w.iter().zip(&other.w) {
            total += crate::tensor::distance(a, b)?.powi(2);
        }
        for (a, b) in self.u.iter().zip(&other.u) {
            if let (Some(a), Some(b)) = (a, b) {
                total += crate::tensor::distance(a, b)?.powi(2);
            }
        }
        Ok(total.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumResidual {
    /// `||u - prox(w)||`
    pub r_prox: f64,
    /// `||grad loss(w) - beta (u - w)||`
    pub r_grad: f64,
}

/// Number of steps where the Lagrangian rose by more than `tol`, or became
/// non-finite.
pub fn descent_monitor(history: &[f64], tol: f64) -> usize {
    history
        .windows(2)
        .filter(|pair| !pair[1].is_finite() && pair[0].is_finite() || pair[1] > pair[0] + tol)
        .count()
}

/// How a tensor is treated by BinaryConnect training.
#[derive(Debug, Clone, PartialEq)]
pub enum BinaryRole {
    /// Trained in float (biases).
    Float,
    /// Projected to `scale * sign` over the coordinates flagged `true`;
    /// the rest stay exactly zero.
    Binary { keep: Vec<bool> },
}

impl BinaryRole {
    pub fn binary(len: usize) -> Self {
        BinaryRole::Binary {
            keep: vec![true; len],
        }
    }
}

/// BinaryConnect state: float shadow weights `w_f` and their per-tensor
/// binary projections `w`.
#[derive(Debug, Clone)]
pub struct BinConnectState {
    w_f: Vec<Tensor>,
    w: Vec<Tensor>,
    roles: Vec<BinaryRole>,
    eta: f64,
    rho: f64,
}

impl BinConnectState {
    /// Warm-starts the float shadow from `w_f` and projects it.
    pub fn new(mut w_f: Vec<Tensor>, roles: Vec<BinaryRole>, eta: f64, rho: f64) -> Result<Self> {
        if roles.len() != w_f.len() {
            return dim_err("one binary role per tensor is required");
        }
        if eta.is_nan() || eta <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {eta}")));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("blending rho must lie in [0, 1], got {rho}")));
        }
        for (t, role) in w_f.iter_mut().zip(&roles) {
            if let BinaryRole::Binary { keep } = role {
                if keep.len() != t.len() {
                    return dim_err("keep mask length differs from tensor length");
                }
                zero_where(t, keep);
            }
        }
        let w = project_all(&w_f, &roles)?;
        Ok(Self {
            w_f,
            w,
            roles,
            eta,
            rho,
        })
    }

    pub fn float_weights(&self) -> &[Tensor] {
        &self.w_f
    }

    /// Binarized weights, at which gradients are evaluated.
    pub fn weights(&self) -> &[Tensor] {
        &self.w
    }

    pub fn roles(&self) -> &[BinaryRole] {
        &self.roles
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn set_eta(&mut self, eta: f64) {
        self.eta = eta;
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `w_f <- w_f - eta grad(w)`, `w <- proj(w_f)`.
    pub fn bc_step(&mut self, grad_at_w: &[Tensor]) -> Result<()> {
        check_grads(&self.w_f, grad_at_w)?;
        sgd_step(&mut self.w_f, grad_at_w, self.eta)?;
        self.finish_step()
    }

    /// `w_f <- (1 - rho) w_f + rho w - eta grad(w)`, `w <- proj(w_f)`.
    ///
    /// Float-role tensors take a plain gradient step.
    pub fn blended_bc_step(&mut self, grad_at_w: &[Tensor]) -> Result<()> {
        if self.rho == 0.0 {
            return self.bc_step(grad_at_w);
        }
        check_grads(&self.w_f, grad_at_w)?;
        let keep = 1.0 - self.rho;
        for (((wf, w), g), role) in self.w_f.iter_mut().zip(&self.w).zip(grad_at_w).zip(&self.roles) {
            match role {
                BinaryRole::Float => {
                    for (a, &d) in wf.data_mut().iter_mut().zip(g.data()) {
                        *a -= self.eta * d;
                    }
                }
                BinaryRole::Binary { .. } => {
                    for ((a, &b), &d) in wf.data_mut().iter_mut().zip(w.data()).zip(g.data()) {
                        *a = keep * *a + self.rho * b - self.eta * d;
                    }
                }
            }
        }
        self.finish_step()
    }

    fn finish_step(&mut self) -> Result<()> {
        for (t, role) in self.w_f.iter_mut().zip(&self.roles) {
            if let BinaryRole::Binary { keep } = role {
                zero_where(t, keep);
            }
        }
        self.w = project_all(&self.w_f, &self.roles)?;
        Ok(())
    }
}

fn project_all(w_f: &[Tensor], roles: &[BinaryRole]) -> Result<Vec<Tensor>> {
    w_f.iter()
        .zip(roles)
        .map(|(t, role)| match role {
            BinaryRole::Float => Ok(t.clone()),
            BinaryRole::Binary { keep } => Ok(binary_project_where(t, keep)?.reconstruct()),
        })
        .collect()
}

fn zero_where(t: &mut Tensor, keep: &[bool]) {
    for (v, &k) in t.data_mut().iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
}

/// Zeros the coordinates with `keep[j] == false`; `None` leaves a tensor alone.
pub fn zero_masked(params: &mut [Tensor], keep: &[Option<Vec<bool>>]) -> Result<()> {
    if keep.len() != params.len() {
        return dim_err("one keep slot per parameter tensor is required");
    }
    for (p, k) in params.iter_mut().zip(keep) {
        if let Some(k) = k {
            if k.len() != p.len() {
                return dim_err("keep mask length differs from tensor length");
            }
            zero_where(p, k);
        }
    }
    Ok(())
}
