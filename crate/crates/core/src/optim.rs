//! Update rules on the PSI manifold and their Euclidean baselines.
//!
//! PSI variants update each PSI group with the Riemannian gradient
//! `‖wⁱ‖² ∇_{wⁱ}L`, evaluated at the pre-update iterate, and retract by
//! addition. That is the Euclidean rule with a per-group learning rate
//! `η_w ‖wⁱ‖²`, and it is implemented literally that way. The scale-variant
//! block `g` always takes a plain SGD step with `η_g`.
//!
//! The GD / SGD distinction is only about which gradient the caller passes
//! (full training set or a minibatch); the arithmetic is shared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot_slice, norm2, Vector};
use crate::manifold::Rescale;
use crate::network::{BnMlp, GradBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    PsiGd,
    PsiSgd,
    PsiSgdm,
    Gd,
    Sgd,
    Sgdm,
    Adam,
}

impl OptKind {
    pub const ALL: [OptKind; 7] = [
        OptKind::PsiGd,
        OptKind::PsiSgd,
        OptKind::PsiSgdm,
        OptKind::Gd,
        OptKind::Sgd,
        OptKind::Sgdm,
        OptKind::Adam,
    ];

    pub fn is_psi(self) -> bool {
        matches!(self, OptKind::PsiGd | OptKind::PsiSgd | OptKind::PsiSgdm)
    }

    /// Whether each step consumes the full-training-set gradient.
    pub fn is_full_batch(self) -> bool {
        matches!(self, OptKind::PsiGd | OptKind::Gd)
    }

    pub fn uses_momentum(self) -> bool {
        matches!(self, OptKind::PsiSgdm | OptKind::Sgdm)
    }

    pub fn name(self) -> &'static str {
        match self {
            OptKind::PsiGd => "psi_gd",
            OptKind::PsiSgd => "psi_sgd",
            OptKind::PsiSgdm => "psi_sgdm",
            OptKind::Gd => "gd",
            OptKind::Sgd => "sgd",
            OptKind::Sgdm => "sgdm",
            OptKind::Adam => "adam",
        }
    }
}

/// From `step` onward the learning rates are multiplied by `factor`
/// (cumulatively with earlier milestones).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrMilestone {
    pub step: usize,
    pub factor: f64,
}

pub const DEFAULT_RENORM_THRESHOLD: f64 = 1e4;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_renorm() -> f64 {
    DEFAULT_RENORM_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    pub kind: OptKind,
    /// Learning rate for PSI groups.
    pub lr_w: f64,
    /// Learning rate for the scale-variant block.
    pub lr_g: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub lr_schedule: Vec<LrMilestone>,
    #[serde(default = "default_renorm")]
    pub renorm_threshold: f64,
}

impl OptConfig {
    /// Plain config with no momentum, schedule, or Adam tuning.
    pub fn new(kind: OptKind, lr_w: f64, lr_g: f64) -> Self {
        Self {
            kind,
            lr_w,
            lr_g,
            momentum: 0.0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            lr_schedule: Vec::new(),
            renorm_threshold: DEFAULT_RENORM_THRESHOLD,
        }
    }

    /// Reference hyperparameters: PSI-SGD 1.0, PSI-SGDM 0.1 with ρ = 0.9,
    /// SGD 0.1, SGDM 0.1 with ρ = 0.9, Adam 0.001 with β = (0.9, 0.999).
    /// GD variants reuse their SGD rates. `lr_g` is left to the caller since
    /// the scale-variant block is stepped by plain SGD in every method.
    pub fn reference(kind: OptKind, lr_g: f64) -> Self {
        let (lr_w, momentum) = match kind {
            OptKind::PsiGd | OptKind::PsiSgd => (1.0, 0.0),
            OptKind::PsiSgdm => (0.1, 0.9),
            OptKind::Gd | OptKind::Sgd => (0.1, 0.0),
            OptKind::Sgdm => (0.1, 0.9),
            OptKind::Adam => (0.001, 0.0),
        };
        Self {
            momentum,
            ..Self::new(kind, lr_w, lr_g)
        }
    }

    pub fn with_momentum(mut self, rho: f64) -> Self {
        self.momentum = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {x}")))
            }
        };
        pos("lr_w", self.lr_w)?;
        pos("lr_g", self.lr_g)?;
        pos("renorm_threshold", self.renorm_threshold)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.kind == OptKind::Adam {
            for (n, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::Config(format!("{n} must be in [0, 1), got {b}")));
                }
            }
            pos("adam_eps", self.adam_eps)?;
        }
        for m in &self.lr_schedule {
            pos("lr_schedule factor", m.factor)?;
        }
        Ok(())
    }

    /// Schedule multiplier at optimizer step `t` (0-based).
    pub fn lr_factor(&self, t: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|m| m.step <= t)
            .fold(1.0, |acc, m| acc * m.factor)
    }
}

/// Mutable optimizer buffers. Zero-initialized and shaped like the partition.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    /// Momentum `uⁱ` per PSI group.
    pub momentum_u: Vec<Vector>,
    /// Momentum for `g` (Euclidean SGDM only).
    pub momentum_g: Vector,
    pub adam_m: GradBundle,
    pub adam_v: GradBundle,
    /// Number of completed steps.
    pub step: usize,
}

impl OptState {
    pub fn new(net: &BnMlp) -> Self {
        let zeros = GradBundle::zeros_like(net);
        Self {
            momentum_u: zeros.psi_grads.clone(),
            momentum_g: zeros.g_grad.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
        }
    }
}

fn check_grads(net: &BnMlp, grads: &GradBundle) -> Result<()> {
    if grads.psi_grads.len() != net.num_groups() {
        return Err(Error::dim("optimizer step", net.num_groups(), grads.psi_grads.len()));
    }
    if grads.g_grad.len() != net.g_len() {
        return Err(Error::dim("optimizer step g", net.g_len(), grads.g_grad.len()));
    }
    Ok(())
}

/// `w ← w − lr·grad`.
#[inline]
fn euclidean_axpy(w: &mut [f64], grad: &[f64], lr: f64) {
    for (x, g) in w.iter_mut().zip(grad) {
        *x -= lr * g;
    }
}

fn sgd_on_g(net: &mut BnMlp, grads: &GradBundle, lr: f64) -> Result<()> {
    let mut g = net.g_vector();
    euclidean_axpy(&mut g, &grads.g_grad, lr);
    net.set_g_vector(&g)
}

/// Per-group learning rates `η_w ‖wⁱ‖²` at the current iterate.
pub fn psi_group_rates(net: &BnMlp, lr_w: f64) -> Result<Vec<f64>> {
    (0..net.num_groups())
        .map(|i| {
            let w = net.psi_weight(i);
            let n2 = dot_slice(w, w);
            if n2 > 0.0 {
                Ok(lr_w * n2)
            } else {
                Err(Error::DegeneratePoint { group: i })
            }
        })
        .collect()
}

fn psi_plain_step(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    check_grads(net, grads)?;
    let f = cfg.lr_factor(state.step);
    let rates = psi_group_rates(net, cfg.lr_w * f)?;
    for (i, lr) in rates.into_iter().enumerate() {
        euclidean_axpy(net.psi_weight_mut(i), &grads.psi_grads[i], lr);
    }
    sgd_on_g(net, grads, cfg.lr_g * f)?;
    state.step += 1;
    Ok(())
}

/// PSI-GD: `wⁱ ← wⁱ − η_w ‖wⁱ‖² ∇_{wⁱ}L`, `g ← g − η_g ∇_g L`, with the
/// full-training-set gradient.
pub fn step_psi_gd(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    psi_plain_step(net, grads, cfg, state)
}

/// PSI-SGD: as [`step_psi_gd`] with a minibatch gradient estimate.
pub fn step_psi_sgd(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    psi_plain_step(net, grads, cfg, state)
}

/// PSI-SGDM: `uⁱ ← ρuⁱ − η_w ‖wⁱ‖² Gⁱ`, then `wⁱ ← wⁱ + uⁱ`. `g` takes a
/// plain SGD step.
pub fn step_psi_sgdm(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    check_grads(net, grads)?;
    let f = cfg.lr_factor(state.step);
    let rates = psi_group_rates(net, cfg.lr_w * f)?;
    let rho = cfg.momentum;
    for (i, lr) in rates.into_iter().enumerate() {
        let u = &mut state.momentum_u[i];
        for (ui, gi) in u.iter_mut().zip(grads.psi_grads[i].iter()) {
            *ui = rho * *ui - lr * gi;
        }
        for (w, ui) in net.psi_weight_mut(i).iter_mut().zip(u.iter()) {
            *w += ui;
        }
    }
    sgd_on_g(net, grads, cfg.lr_g * f)?;
    state.step += 1;
    Ok(())
}

fn euclidean_plain_step(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    check_grads(net, grads)?;
    let f = cfg.lr_factor(state.step);
    for i in 0..net.num_groups() {
        euclidean_axpy(net.psi_weight_mut(i), &grads.psi_grads[i], cfg.lr_w * f);
    }
    sgd_on_g(net, grads, cfg.lr_g * f)?;
    state.step += 1;
    Ok(())
}

/// Euclidean GD on both blocks (full-set gradient).
pub fn step_gd(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    euclidean_plain_step(net, grads, cfg, state)
}

/// Euclidean SGD on both blocks (minibatch gradient).
pub fn step_sgd(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    euclidean_plain_step(net, grads, cfg, state)
}

/// Heavy-ball momentum on both blocks: `u ← ρu − η∇`, `θ ← θ + u`.
pub fn step_sgdm(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    check_grads(net, grads)?;
    let f = cfg.lr_factor(state.step);
    let rho = cfg.momentum;
    let lr_w = cfg.lr_w * f;
    for i in 0..net.num_groups() {
        let u = &mut state.momentum_u[i];
        for (ui, gi) in u.iter_mut().zip(grads.psi_grads[i].iter()) {
            *ui = rho * *ui - lr_w * gi;
        }
        for (w, ui) in net.psi_weight_mut(i).iter_mut().zip(u.iter()) {
            *w += ui;
        }
    }
    let lr_g = cfg.lr_g * f;
    for (ui, gi) in state.momentum_g.iter_mut().zip(grads.g_grad.iter()) {
        *ui = rho * *ui - lr_g * gi;
    }
    let mut g = net.g_vector();
    for (x, ui) in g.iter_mut().zip(state.momentum_g.iter()) {
        *x += ui;
    }
    net.set_g_vector(&g)?;
    state.step += 1;
    Ok(())
}

fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, cfg: &OptConfig, t: i32) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// Adam with bias correction on both blocks.
pub fn step_adam(net: &mut BnMlp, grads: &GradBundle, cfg: &OptConfig, state: &mut OptState) -> Result<()> {
    check_grads(net, grads)?;
    let f = cfg.lr_factor(state.step);
    let t = i32::try_from(state.step + 1).unwrap_or(i32::MAX);
    for i in 0..net.num_groups() {
        adam_update(
            net.psi_weight_mut(i),
            &grads.psi_grads[i],
            &mut state.adam_m.psi_grads[i],
            &mut state.adam_v.psi_grads[i],
            cfg.lr_w * f,
            cfg,
            t,
        );
    }
    let mut g = net.g_vector();
    adam_update(
        &mut g,
        &grads.g_grad,
        &mut state.adam_m.g_grad,
        &mut state.adam_v.g_grad,
        cfg.lr_g * f,
        cfg,
        t,
    );
    net.set_g_vector(&g)?;
    state.step += 1;
    Ok(())
}

/// Normalizes every PSI group whose norm exceeds `threshold` to unit norm and
/// rescales its momentum buffer by the same factor, so the pair `(W, U)`
/// moves jointly under `T_a`. Returns the applied rescale (identity factors
/// for untouched groups).
pub fn renormalize_overflow(net: &mut BnMlp, state: &mut OptState, threshold: f64) -> Rescale {
    let m = net.num_groups();
    let mut factors = vec![1.0; m];
    for (i, slot) in factors.iter_mut().enumerate() {
        let n = norm2(net.psi_weight(i));
        if n.is_finite() && n > threshold {
            let a = 1.0 / n;
            *slot = a;
            net.psi_weight_mut(i).iter_mut().for_each(|x| *x *= a);
            if let Some(u) = state.momentum_u.get_mut(i) {
                u.iter_mut().for_each(|x| *x *= a);
            }
        }
    }
    Rescale::new(factors.into()).expect("factors are positive")
}

/// Owns a config and its state and dispatches on [`OptKind`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptConfig,
    pub state: OptState,
}

impl Optimizer {
    pub fn new(cfg: OptConfig, net: &BnMlp) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            state: OptState::new(net),
            cfg,
        })
    }

    pub fn step(&mut self, net: &mut BnMlp, grads: &GradBundle) -> Result<()> {
        let (cfg, state) = (&self.cfg, &mut self.state);
        match cfg.kind {
            OptKind::PsiGd => step_psi_gd(net, grads, cfg, state),
            OptKind::PsiSgd => step_psi_sgd(net, grads, cfg, state),
            OptKind::PsiSgdm => step_psi_sgdm(net, grads, cfg, state),
            OptKind::Gd => step_gd(net, grads, cfg, state),
            OptKind::Sgd => step_sgd(net, grads, cfg, state),
            OptKind::Sgdm => step_sgdm(net, grads, cfg, state),
            OptKind::Adam => step_adam(net, grads, cfg, state),
        }
    }

    pub fn renormalize(&mut self, net: &mut BnMlp) -> Rescale {
        renormalize_overflow(net, &mut self.state, self.cfg.renorm_threshold)
    }
}
