//! Numerical property suite run by `psi verify`.
//!
//! Every check reports the worst value it observed next to the tolerance it
//! was held to. Checks that must stay *below* a bound use
//! [`Bound::Below`]; the negative control uses [`Bound::Above`].

use std::fmt::Write as _;

use crate::error::Result;
use crate::experiments::{epoch_batches, equivariance_audit, gen_toy_regression, trajectory_deviation, ToyRegressionSpec};
use crate::linalg::{dot_slice, norm2, Rng, Vector};
use crate::manifold::{apply_rescale, metric_inner, retract, riemannian_grad, Rescale, Tangent};
use crate::network::{self, Batch, BnMlp, GradBundle};
use crate::optim::{renormalize_overflow, OptConfig, OptKind, Optimizer};
use rayon::prelude::*;
use twofloat::TwoFloat;

pub const TOL_GRADIENT_FD: f64 = 1e-5;
pub const TOL_PSI_INVARIANCE: f64 = 1e-10;
pub const TOL_GRADIENT_SCALING: f64 = 1e-8;
pub const TOL_PERPENDICULAR: f64 = 1e-8;
pub const TOL_NORM_IDENTITY: f64 = 1e-10;
pub const TOL_EQUIVARIANCE: f64 = 1e-6;
pub const MIN_NEGATIVE_CONTROL: f64 = 1e-2;
pub const TOL_RENORM_LOSS: f64 = 1e-10;
pub const TOL_GEOMETRY: f64 = 1e-10;

/// Coordinates where both the analytic and numeric derivative are below this
/// are treated as agreeing zeros.
pub const FD_ZERO_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Below,
    Above,
    /// Passes only on an observed value of exactly zero.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub observed: f64,
    pub tolerance: f64,
    pub bound: Bound,
}

impl CheckResult {
    fn below(name: &'static str, observed: f64, tolerance: f64) -> Self {
        Self {
            name,
            observed,
            tolerance,
            bound: Bound::Below,
        }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::Below => self.observed < self.tolerance,
            Bound::Above => self.observed > self.tolerance,
            Bound::Exact => self.observed == 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Flip the sign of one batch-norm backward term before the
    /// finite-difference check. Used to confirm the suite catches bugs.
    #[doc(hidden)]
    pub inject_bn_fault: bool,
}

/// Fixed-size toy problem shared by the checks.
pub struct Fixture {
    pub net: BnMlp,
    pub data: Batch,
    rng: Rng,
}

impl Fixture {
    /// `10 → 100 (BN) → 1` ELU/MSE network on `n` toy regression samples.
    pub fn toy(seed: u64, n: usize, bn_epsilon: f64) -> Result<Self> {
        let spec = ToyRegressionSpec {
            n_samples: n,
            ..ToyRegressionSpec::with_seeds(seed, seed.wrapping_add(1), seed.wrapping_add(2))
        };
        let (data, _) = gen_toy_regression(&spec);
        let net = BnMlp::init(&spec.arch(bn_epsilon), &mut Rng::new(spec.init_seed))?;
        Ok(Self {
            net,
            data,
            rng: Rng::new(seed.wrapping_add(3)),
        })
    }

    /// Rescale with factors log-uniform in `[1e-3, 1e3]`.
    pub fn random_rescale(&mut self) -> Rescale {
        random_rescale(&mut self.rng, self.net.num_groups(), 3.0)
    }
}

/// Factors `10^u`, `u ~ U[-decades, decades]`.
pub fn random_rescale(rng: &mut Rng, m: usize, decades: f64) -> Rescale {
    Rescale::new(
        (0..m)
            .map(|_| 10f64.powf(rng.uniform_range(-decades, decades)))
            .collect(),
    )
    .expect("positive factors")
}

fn rel(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Step used by the finite-difference oracle, relative to `max(1, |θ|)`.
pub const FD_STEP: f64 = 1e-5;

/// Double-double re-evaluation of the MSE loss, used as the finite-difference
/// oracle. In plain f64 the loss itself carries about one ulp of noise, which
/// divided by the step swamps the smallest gradient components; here the
/// noise sits near 1e-30.
pub mod reference {
    use twofloat::{consts::LN_2, TwoFloat};

    use crate::error::{Error, Result};
    use crate::network::{Activation, Batch, BnMlp, LossKind};

    /// `exp(x) − 1` to double-double accuracy: range reduction by `ln 2`,
    /// then by `2^-10`, a short Taylor series, and ten doublings through
    /// `expm1(2s) = expm1(s)·(expm1(s) + 2)`.
    pub fn exp_m1(x: TwoFloat) -> TwoFloat {
        let k = (x.hi() / LN_2.hi()).round();
        let r = x - LN_2 * k;
        let s = r / 1024.0;
        let mut term = s;
        let mut sum = s;
        for n in 2..=14 {
            term = term * s / n as f64;
            sum += term;
        }
        for _ in 0..10 {
            sum = sum * (sum + 2.0);
        }
        if k == 0.0 {
            sum
        } else {
            (sum + 1.0) * 2f64.powi(k as i32) - 1.0
        }
    }

    /// `a / b` by three rounds of residual correction. The library's own
    /// double-double division forms its reciprocal error term in plain f64
    /// and is only good to about 1e-16.
    pub fn div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
        let q1 = a.hi() / b.hi();
        let r = a - b * q1;
        let q2 = r.hi() / b.hi();
        let r = r - b * q2;
        let q3 = r.hi() / b.hi();
        TwoFloat::from(q1) + q2 + q3
    }

    fn activate(act: Activation, x: TwoFloat) -> TwoFloat {
        match act {
            Activation::Elu if x.hi() <= 0.0 => exp_m1(x),
            Activation::Relu if x.hi() <= 0.0 => TwoFloat::from(0.0),
            _ => x,
        }
    }

    /// Mean MSE loss with parameters `params` laid out in the network's
    /// canonical order.
    pub fn mse_loss(net: &BnMlp, params: &[TwoFloat], batch: &Batch) -> Result<TwoFloat> {
        if net.loss_kind() != LossKind::Mse {
            return Err(Error::Domain("reference loss supports MSE only".into()));
        }
        if params.len() != net.param_count() {
            return Err(Error::dim("reference params", net.param_count(), params.len()));
        }
        let n = batch.len();
        let mut acts: Vec<Vec<TwoFloat>> = (0..n)
            .map(|r| batch.inputs.row(r).iter().map(|&x| TwoFloat::from(x)).collect())
            .collect();
        let mut off = 0;
        let last = net.layers().len() - 1;
        for (li, layer) in net.layers().iter().enumerate() {
            let (rows, cols) = (layer.weight.rows(), layer.weight.cols());
            let w = &params[off..off + rows * cols];
            off += rows * cols;
            let mut z: Vec<Vec<TwoFloat>> = acts
                .iter()
                .map(|a| {
                    (0..rows)
                        .map(|i| {
                            let mut s = TwoFloat::from(0.0);
                            for j in 0..cols {
                                s += w[i * cols + j] * a[j];
                            }
                            s
                        })
                        .collect()
                })
                .collect();
            if layer.has_bn {
                let gamma = &params[off..off + rows];
                let beta = &params[off + rows..off + 2 * rows];
                off += 2 * rows;
                for i in 0..rows {
                    let mut mean = TwoFloat::from(0.0);
                    for zr in &z {
                        mean += zr[i];
                    }
                    mean /= n as f64;
                    let mut var = TwoFloat::from(0.0);
                    for zr in &z {
                        let c = zr[i] - mean;
                        var += c * c;
                    }
                    var /= n as f64;
                    let sd = (var + net.bn_epsilon()).sqrt();
                    for zr in z.iter_mut() {
                        zr[i] = div(gamma[i] * (zr[i] - mean), sd) + beta[i];
                    }
                }
            }
            if li < last {
                for zr in z.iter_mut() {
                    for v in zr.iter_mut() {
                        *v = activate(net.activation(), *v);
                    }
                }
            }
            acts = z;
        }
        let k = net.out_dim();
        let mut total = TwoFloat::from(0.0);
        for (r, out) in acts.iter().enumerate() {
            for (o, &t) in out.iter().zip(batch.targets.row(r)) {
                let d = *o - t;
                total += d * d;
            }
        }
        Ok(total / (n * k) as f64)
    }
}

/// Central difference of the double-double loss with step
/// `FD_STEP·max(1, |θᵢ|)` for every parameter, in canonical order.
pub fn finite_difference_grad(net: &BnMlp, batch: &Batch) -> Result<Vec<f64>> {
    let base: Vec<TwoFloat> = net.flatten_params().iter().map(|&x| TwoFloat::from(x)).collect();
    (0..base.len())
        .into_par_iter()
        .map_init(
            || base.clone(),
            |p, i| {
                let h = FD_STEP * base[i].hi().abs().max(1.0);
                p[i] = base[i] + h;
                let up = reference::mse_loss(net, p, batch)?;
                p[i] = base[i] - h;
                let down = reference::mse_loss(net, p, batch)?;
                p[i] = base[i];
                Ok(((up - down) / (2.0 * h)).hi())
            },
        )
        .collect()
}

/// Worst relative error `|a − n| / max(|a|, |n|)` between the analytic
/// gradient and the finite-difference oracle on the toy network.
pub fn check_gradient_fd(seed: u64, faulty: bool) -> Result<CheckResult> {
    let fx = Fixture::toy(seed, 32, 1e-5)?;
    let (_, cache) = network::forward(&fx.net, &fx.data)?;
    let grads = if faulty {
        network::backward_with_bn_fault(&fx.net, &cache)
    } else {
        network::backward(&fx.net, &cache)
    };
    let analytic = grads.to_canonical(&fx.net);
    let numeric = finite_difference_grad(&fx.net, &fx.data)?;
    let worst = analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) >= FD_ZERO_FLOOR)
        .map(|(&a, &n)| rel(a, n))
        .fold(0.0, f64::max);
    Ok(CheckResult::below("gradient_fd_rel_err", worst, TOL_GRADIENT_FD))
}

/// Loss is unchanged by 20 random rescales (`bn_epsilon = 0`).
pub fn check_psi_invariance(seed: u64) -> Result<CheckResult> {
    let mut fx = Fixture::toy(seed, 64, 0.0)?;
    let base = network::loss(&fx.net, &fx.data)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = fx.random_rescale();
        let l = network::loss(&apply_rescale(&fx.net, &a)?, &fx.data)?;
        worst = worst.max(rel(l, base));
    }
    Ok(CheckResult::below("psi_loss_invariance", worst, TOL_PSI_INVARIANCE))
}

/// `∇_{wⁱ}L(W) = aᵢ ∇L(T_a W)` per group, measured as
/// `‖∇ᵢ − aᵢ ∇̂ᵢ‖ / ‖∇ᵢ‖`.
pub fn check_gradient_scaling(seed: u64) -> Result<CheckResult> {
    let mut fx = Fixture::toy(seed, 64, 0.0)?;
    let (_, g) = network::loss_and_grad(&fx.net, &fx.data)?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let a = fx.random_rescale();
        let (_, gh) = network::loss_and_grad(&apply_rescale(&fx.net, &a)?, &fx.data)?;
        for ((gi, ghi), &ai) in g.psi_grads.iter().zip(&gh.psi_grads).zip(a.factors()) {
            let diff: Vector = gi.iter().zip(ghi.iter()).map(|(x, y)| x - ai * y).collect();
            worst = worst.max(diff.norm2() / gi.norm2());
        }
    }
    Ok(CheckResult::below("gradient_scaling", worst, TOL_GRADIENT_SCALING))
}

/// `|cos ∠(wⁱ, ∇_{wⁱ}ℓ)|` for batch gradients and per-sample gradients over
/// several random minibatches.
pub fn check_perpendicularity(seed: u64) -> Result<CheckResult> {
    let fx = Fixture::toy(seed, 256, 0.0)?;
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for idx in epoch_batches(&mut rng, fx.data.len(), 32, 2).into_iter().take(4) {
        let batch = fx.data.select(&idx);
        let (_, cache) = network::forward(&fx.net, &batch)?;
        let mut bundles = vec![network::backward(&fx.net, &cache)];
        bundles.extend((0..4).map(|k| network::backward_sample(&fx.net, &cache, k)));
        for b in &bundles {
            worst = worst.max(max_cosine(&fx.net, b));
        }
    }
    Ok(CheckResult::below("perpendicularity_cosine", worst, TOL_PERPENDICULAR))
}

/// Largest `|⟨wⁱ, Gⁱ⟩| / (‖wⁱ‖ ‖Gⁱ‖)` over groups with nonzero gradient.
pub fn max_cosine(net: &BnMlp, grads: &GradBundle) -> f64 {
    (0..net.num_groups())
        .filter_map(|i| {
            let w = net.psi_weight(i);
            let g = &grads.psi_grads[i];
            let denom = norm2(w) * norm2(g);
            (denom > 0.0).then(|| dot_slice(w, g).abs() / denom)
        })
        .fold(0.0, f64::max)
}

/// Norm growth per step equals the squared step length, for 100 full-batch
/// steps of GD and of PSI-GD. Reported as
/// `|‖w_{t+1}‖² − ‖w_t‖² − ‖Δw‖²| / ‖w_t‖²`.
pub fn check_norm_identity(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (kind, name) in [(OptKind::Gd, "norm_identity_gd"), (OptKind::PsiGd, "norm_identity_psi_gd")] {
        let mut fx = Fixture::toy(seed, 128, 0.0)?;
        let lr = if kind.is_psi() { 0.5 } else { 0.1 };
        let mut opt = Optimizer::new(OptConfig::new(kind, lr, 0.01), &fx.net)?;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (_, g) = network::loss_and_grad(&fx.net, &fx.data)?;
            let before = fx.net.psi_weights();
            opt.step(&mut fx.net, &g)?;
            for (i, w) in before.iter().enumerate() {
                let n2 = dot_slice(w, w);
                let step_scale = if kind.is_psi() { lr * n2 } else { lr };
                let g2 = dot_slice(&g.psi_grads[i], &g.psi_grads[i]);
                let after = dot_slice(fx.net.psi_weight(i), fx.net.psi_weight(i));
                let resid = (after - n2 - step_scale * step_scale * g2).abs() / n2;
                worst = worst.max(resid);
            }
        }
        out.push(CheckResult::below(name, worst, TOL_NORM_IDENTITY));
    }
    Ok(out)
}

/// Paired PSI-SGDM trajectories from `W₀` and `T_a(W₀)` for 200 steps, and the
/// SGD negative control over 50 steps.
pub fn check_equivariance(seed: u64) -> Result<Vec<CheckResult>> {
    let mut fx = Fixture::toy(seed, 256, 0.0)?;
    let a = fx.random_rescale();
    let psi = OptConfig::reference(OptKind::PsiSgdm, 0.01);
    let dev = equivariance_audit(&fx.net, &fx.data, &psi, &a, 200, 32, seed)?;
    let sgd = OptConfig::reference(OptKind::Sgd, 0.01);
    let neg = equivariance_audit(&fx.net, &fx.data, &sgd, &a, 50, 32, seed)?;
    Ok(vec![
        CheckResult::below("equivariance_psi_sgdm", dev, TOL_EQUIVARIANCE),
        CheckResult {
            name: "equivariance_sgd_negative_control",
            observed: neg,
            tolerance: MIN_NEGATIVE_CONTROL,
            bound: Bound::Above,
        },
    ])
}

/// Forced renormalization after `k` PSI-SGDM steps: the loss is unchanged and
/// the next 100 steps track the unrenormalized run mapped by the applied
/// rescale.
pub fn check_renormalization(seed: u64) -> Result<Vec<CheckResult>> {
    let fx = Fixture::toy(seed, 256, 0.0)?;
    let cfg = OptConfig::reference(OptKind::PsiSgdm, 0.01);
    let mut rng = Rng::new(seed ^ 0xbeef);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut next_batch = |rng: &mut Rng| {
        if queue.is_empty() {
            queue = epoch_batches(rng, fx.data.len(), 32, 2);
            queue.reverse();
        }
        fx.data.select(&queue.pop().expect("batch"))
    };

    let mut plain = fx.net.clone();
    let mut opt_plain = Optimizer::new(cfg.clone(), &plain)?;
    for _ in 0..20 {
        let b = next_batch(&mut rng);
        let (_, g) = network::loss_and_grad(&plain, &b)?;
        opt_plain.step(&mut plain, &g)?;
    }
    let mut renorm = plain.clone();
    let mut opt_renorm = opt_plain.clone();
    let threshold = 0.5 * plain.group_norms().iter().cloned().fold(f64::INFINITY, f64::min);
    let applied = renormalize_overflow(&mut renorm, &mut opt_renorm.state, threshold);

    let l0 = network::loss(&plain, &fx.data)?;
    let l1 = network::loss(&renorm, &fx.data)?;
    let jump = rel(l0, l1);

    let mut worst = trajectory_deviation(&plain, &renorm, &applied);
    for _ in 0..100 {
        let b = next_batch(&mut rng);
        let (_, g) = network::loss_and_grad(&plain, &b)?;
        opt_plain.step(&mut plain, &g)?;
        let (_, g) = network::loss_and_grad(&renorm, &b)?;
        opt_renorm.step(&mut renorm, &g)?;
        worst = worst.max(trajectory_deviation(&plain, &renorm, &applied));
    }
    Ok(vec![
        CheckResult::below("renorm_loss_jump", jump, TOL_RENORM_LOSS),
        CheckResult::below("renorm_trajectory", worst, TOL_EQUIVARIANCE),
    ])
}

/// Metric duality over 100 random tangents, metric invariance under rescale,
/// and both retraction axioms.
pub fn check_geometry(seed: u64) -> Result<Vec<CheckResult>> {
    let mut fx = Fixture::toy(seed, 64, 0.0)?;
    let w = fx.net.psi_weights();
    let (_, g) = network::loss_and_grad(&fx.net, &fx.data)?;
    let rg = riemannian_grad(&w, &g)?;
    let euclid = Tangent::new(g.psi_grads.clone());

    let mut rng = Rng::new(seed ^ 0x9e0);
    let random_tangent = |rng: &mut Rng| {
        Tangent::new(
            w.iter()
                .map(|wi| (0..wi.len()).map(|_| rng.standard_normal()).collect())
                .collect(),
        )
    };

    let mut duality = 0.0f64;
    let mut invariance = 0.0f64;
    for _ in 0..100 {
        let xi = random_tangent(&mut rng);
        let lhs = metric_inner(&w, &rg, &xi)?;
        let rhs = euclid.euclidean_inner(&xi)?;
        duality = duality.max(rel(lhs, rhs));

        let eta = random_tangent(&mut rng);
        let a = fx.random_rescale();
        let wa = a.apply_groups(&w)?;
        let xa = Tangent::new(a.apply_groups(&xi.components)?);
        let ea = Tangent::new(a.apply_groups(&eta.components)?);
        invariance = invariance.max(rel(metric_inner(&wa, &xa, &ea)?, metric_inner(&w, &xi, &eta)?));
    }

    // Retraction: R_W(0) = W, and (R_W(tΞ) − W)/t = Ξ. Dyadic grids keep the
    // arithmetic exact, so any nonzero residual is a real defect.
    let mut retraction = 0.0f64;
    let zero = Tangent::zeros_like(&w);
    if retract(&w, &zero)? != w {
        retraction = f64::INFINITY;
    }
    let dyadic = |rng: &mut Rng, scale: f64| -> Vec<Vector> {
        w.iter()
            .map(|wi| (0..wi.len()).map(|_| (rng.below(256) as f64 - 128.0) * scale).collect())
            .collect()
    };
    let wd = dyadic(&mut rng, 1.0 / 16.0);
    let xi = Tangent::new(dyadic(&mut rng, 1.0 / 64.0));
    for t in [0.5f64.powi(7), 0.5f64.powi(10), 0.5f64.powi(13)] {
        let moved = retract(&wd, &xi.scaled(t))?;
        for ((m, w0), x) in moved.iter().zip(&wd).zip(&xi.components) {
            for ((p, q), r) in m.iter().zip(w0.iter()).zip(x.iter()) {
                retraction = retraction.max(((p - q) / t - r).abs());
            }
        }
    }

    Ok(vec![
        CheckResult::below("metric_duality", duality, TOL_GEOMETRY),
        CheckResult::below("metric_rescale_invariance", invariance, TOL_GEOMETRY),
        CheckResult {
            name: "retraction_axioms",
            observed: retraction,
            tolerance: 0.0,
            bound: Bound::Exact,
        },
    ])
}

pub fn run_all(opts: VerifyOptions) -> Result<Vec<CheckResult>> {
    let seed = opts.seed;
    let mut out = vec![
        check_gradient_fd(seed, opts.inject_bn_fault)?,
        check_psi_invariance(seed)?,
        check_gradient_scaling(seed)?,
        check_perpendicularity(seed)?,
    ];
    out.extend(check_norm_identity(seed)?);
    out.extend(check_equivariance(seed)?);
    out.extend(check_renormalization(seed)?);
    out.extend(check_geometry(seed)?);
    Ok(out)
}

/// Fixed-width table, one line per check, followed by a summary line.
pub fn format_report(seed: u64, results: &[CheckResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# psi verify, seed {seed}");
    let _ = writeln!(s, "{:<36} {:>12} {:>14}  result", "check", "observed", "tolerance");
    for r in results {
        let op = match r.bound {
            Bound::Below => "<",
            Bound::Above => ">",
            Bound::Exact => "==",
        };
        let _ = writeln!(
            s,
            "{:<36} {:>12.3e} {:>2} {:>11.1e}  {}",
            r.name,
            r.observed,
            op,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    let _ = writeln!(s, "{} checks, {} failed", results.len(), failed);
    s
}
