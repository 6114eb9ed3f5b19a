//! Batch-normalized multilayer perceptron with hand-written backward pass.
//!
//! Layer `l` computes `z = W_l a_{l-1}`, optionally batch-normalizes each
//! feature of `z` over the batch, and applies the activation on every layer
//! except the last. There are no bias vectors: the BN shift `β` plays that
//! role, and the output layer is linear.
//!
//! Every weight row of a BN layer is a PSI group: scaling that row by a
//! positive constant leaves the normalized output unchanged (exactly when
//! `bn_epsilon == 0`). All remaining parameters (`γ`, `β`, and weights of
//! non-BN layers) form the scale-variant block `g`.
//!
//! # Canonical parameter order
//!
//! [`BnMlp::flatten_params`] walks the layers in order and emits, per layer,
//! the weight matrix row-major, then `γ`, then `β` (the last two only for BN
//! layers). The `g` block ([`BnMlp::g_vector`], [`GradBundle::g_grad`]) uses
//! the same walk restricted to scale-variant entries: `γ, β` for BN layers,
//! the full weight matrix row-major for non-BN layers.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot_slice, Matrix, Rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// ELU with `α = 1`.
    Elu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over batch and output dimensions of `(f - y)²`.
    Mse,
    /// Mean over batch of `-Σ_j y_j log softmax(f)_j`; targets are one-hot rows.
    SoftmaxCrossEntropy,
}

/// One entry of the architecture document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(rename = "in")]
    pub in_dim: usize,
    #[serde(rename = "out")]
    pub out_dim: usize,
    pub bn: bool,
}

/// Network architecture as serialized to JSON:
/// `{"layers":[{"in":10,"out":100,"bn":true},...],"activation":"elu","bn_epsilon":1e-5,"loss":"mse"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    pub bn_epsilon: f64,
    pub loss: LossKind,
}

impl ArchSpec {
    /// `in_dim → hidden (BN) → 1`, ELU, MSE: the toy regression network.
    pub fn toy(in_dim: usize, hidden: usize, bn_epsilon: f64) -> Self {
        Self {
            layers: vec![
                LayerSpec {
                    in_dim,
                    out_dim: hidden,
                    bn: true,
                },
                LayerSpec {
                    in_dim: hidden,
                    out_dim: 1,
                    bn: false,
                },
            ],
            activation: Activation::Elu,
            bn_epsilon,
            loss: LossKind::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        if !(self.bn_epsilon >= 0.0 && self.bn_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "bn_epsilon must be finite and >= 0, got {}",
                self.bn_epsilon
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.in_dim,
                    i - 1,
                    self.layers[i - 1].out_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    /// `out_dim × in_dim`.
    pub weight: Matrix,
    /// Length `out_dim` when `has_bn`, empty otherwise.
    pub gamma: Vector,
    pub beta: Vector,
    pub has_bn: bool,
}

impl BnLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Location of one PSI weight vector: row `row` of layer `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsiGroup {
    pub layer: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnMlp {
    layers: Vec<BnLayer>,
    activation: Activation,
    bn_epsilon: f64,
    loss: LossKind,
    psi_groups: Vec<PsiGroup>,
}

/// A batch of samples. `targets` has one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::dim("Batch::new", inputs.rows(), targets.rows()));
        }
        Ok(Self { inputs, targets })
    }

    /// Single-output regression batch.
    pub fn regression(inputs: Matrix, targets: &[f64]) -> Result<Self> {
        let t = Matrix::from_vec(targets.len(), 1, targets.to_vec())?;
        Self::new(inputs, t)
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select_rows(idx),
        }
    }
}

/// Euclidean gradient split along the PSI / scale-variant partition.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    /// One entry per PSI group, in [`BnMlp::psi_groups`] order.
    pub psi_grads: Vec<Vector>,
    /// Scale-variant block, in `g` order.
    pub g_grad: Vector,
}

impl GradBundle {
    pub fn zeros_like(net: &BnMlp) -> Self {
        Self {
            psi_grads: net
                .psi_groups
                .iter()
                .map(|g| Vector::zeros(net.layers[g.layer].in_dim()))
                .collect(),
            g_grad: Vector::zeros(net.g_len()),
        }
    }

    /// Euclidean norm of the whole gradient.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.psi_grads {
            acc += dot_slice(v, v);
        }
        acc += dot_slice(&self.g_grad, &self.g_grad);
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.psi_grads.iter().all(|v| v.is_finite()) && self.g_grad.is_finite()
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &GradBundle) {
        for (a, b) in self.psi_grads.iter_mut().zip(&other.psi_grads) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += c * y;
            }
        }
        for (x, y) in self.g_grad.iter_mut().zip(other.g_grad.iter()) {
            *x += c * y;
        }
    }

    /// Reassembles the gradient in canonical flatten order.
    pub fn to_canonical(&self, net: &BnMlp) -> Vector {
        let mut out = Vec::with_capacity(net.param_count());
        let mut psi = self.psi_grads.iter();
        let mut g = self.g_grad.iter();
        for layer in &net.layers {
            if layer.has_bn {
                for _ in 0..layer.out_dim() {
                    out.extend_from_slice(psi.next().expect("psi grad count"));
                }
                out.extend(g.by_ref().take(2 * layer.out_dim()));
            } else {
                out.extend(g.by_ref().take(layer.weight.as_slice().len()));
            }
        }
        Vector::new(out)
    }
}

/// Statistics saved by [`bn_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vector,
    /// Biased (divide-by-batch) variance per feature.
    pub var: Vector,
    /// `1 / sqrt(var + eps)`.
    pub inv_std: Vector,
    /// Normalized values, `batch × dim`.
    pub normalized: Matrix,
}

/// Training-mode batch norm over the rows of `z`.
///
/// Feature `j` becomes `γ_j (z_j - mean_j) / sqrt(var_j + eps) + β_j` with the
/// biased batch variance. Fails if a feature has `var + eps == 0`; the
/// returned error's `layer` field is 0 and is rewritten by callers that know
/// the layer index.
pub fn bn_forward(z: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<(Matrix, BnCache)> {
    let (n, d) = (z.rows(), z.cols());
    if gamma.len() != d {
        return Err(Error::dim("bn_forward gamma", d, gamma.len()));
    }
    if beta.len() != d {
        return Err(Error::dim("bn_forward beta", d, beta.len()));
    }
    if n < 2 {
        return Err(Error::Domain(format!(
            "batch norm needs at least 2 samples, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(z.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);

    let mut var = vec![0.0; d];
    for r in 0..n {
        for ((v, x), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            let c = x - m;
            *v += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_n);

    let mut inv_std = Vec::with_capacity(d);
    for (j, v) in var.iter().enumerate() {
        let s = v + eps;
        if s <= 0.0 {
            return Err(Error::DegenerateVariance {
                layer: 0,
                feature: j,
            });
        }
        inv_std.push(1.0 / s.sqrt());
    }

    let mut normalized = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        let zr = z.row(r);
        let xr = normalized.row_mut(r);
        for j in 0..d {
            xr[j] = (zr[j] - mean[j]) * inv_std[j];
        }
        let yr = out.row_mut(r);
        let xr = normalized.row(r);
        for j in 0..d {
            yr[j] = gamma[j] * xr[j] + beta[j];
        }
    }
    Ok((
        out,
        BnCache {
            mean: mean.into(),
            var: var.into(),
            inv_std: inv_std.into(),
            normalized,
        },
    ))
}

/// Gradients of batch norm given the upstream gradient `dy` (`batch × dim`).
/// Returns `(dz, dγ, dβ)`.
pub fn bn_backward(dy: &Matrix, gamma: &[f64], cache: &BnCache) -> (Matrix, Vector, Vector) {
    bn_backward_inner(dy, gamma, cache, false)
}

fn bn_backward_inner(
    dy: &Matrix,
    gamma: &[f64],
    cache: &BnCache,
    flip_projection: bool,
) -> (Matrix, Vector, Vector) {
    let (n, d) = (dy.rows(), dy.cols());
    let xhat = &cache.normalized;
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    // Σ_k dx̂ and Σ_k dx̂·x̂ per feature, with dx̂ = γ dy.
    let mut sum_dx = vec![0.0; d];
    let mut sum_dx_x = vec![0.0; d];
    for r in 0..n {
        let dyr = dy.row(r);
        let xr = xhat.row(r);
        for j in 0..d {
            dgamma[j] += dyr[j] * xr[j];
            dbeta[j] += dyr[j];
            let dx = dyr[j] * gamma[j];
            sum_dx[j] += dx;
            sum_dx_x[j] += dx * xr[j];
        }
    }
    let sign = if flip_projection { -1.0 } else { 1.0 };
    let inv_n = 1.0 / n as f64;
    let mut dz = Matrix::zeros(n, d);
    for r in 0..n {
        let dyr = dy.row(r);
        let xr = xhat.row(r);
        let out = dz.row_mut(r);
        for j in 0..d {
            let dx = dyr[j] * gamma[j];
            out[j] = cache.inv_std[j]
                * (dx - inv_n * sum_dx[j] - sign * inv_n * xr[j] * sum_dx_x[j]);
        }
    }
    (dz, dgamma.into(), dbeta.into())
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    /// Post-BN (or raw, without BN) pre-activation values.
    pre_act: Matrix,
    bn: Option<BnCache>,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct FwdCache {
    layers: Vec<LayerCache>,
    output: Matrix,
    /// Gradient of each sample's own loss w.r.t. its output row (no 1/N).
    sample_output_grad: Matrix,
    loss: f64,
}

impl FwdCache {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn batch_len(&self) -> usize {
        self.output.rows()
    }
}

fn matmul_transposed(a: &Matrix, w: &Matrix) -> Matrix {
    // a: n × in, w: out × in → n × out
    let mut out = Matrix::zeros(a.rows(), w.rows());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let o = out.row_mut(r);
        for (c, slot) in o.iter_mut().enumerate() {
            *slot = dot_slice(ar, w.row(c));
        }
    }
    out
}

impl BnMlp {
    /// Builds a network from explicit layers. BN rows become PSI groups.
    pub fn from_layers(
        layers: Vec<BnLayer>,
        activation: Activation,
        bn_epsilon: f64,
        loss: LossKind,
    ) -> Result<Self> {
        let arch = ArchSpec {
            layers: layers
                .iter()
                .map(|l| LayerSpec {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    bn: l.has_bn,
                })
                .collect(),
            activation,
            bn_epsilon,
            loss,
        };
        arch.validate()?;
        for l in &layers {
            let want = if l.has_bn { l.out_dim() } else { 0 };
            if l.gamma.len() != want {
                return Err(Error::dim("BnLayer gamma", want, l.gamma.len()));
            }
            if l.beta.len() != want {
                return Err(Error::dim("BnLayer beta", want, l.beta.len()));
            }
        }
        let psi_groups = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_bn)
            .flat_map(|(li, l)| (0..l.out_dim()).map(move |row| PsiGroup { layer: li, row }))
            .collect();
        Ok(Self {
            layers,
            activation,
            bn_epsilon,
            loss,
            psi_groups,
        })
    }

    /// Seeded He initialization: weights `N(0, 2/fan_in)`, `γ = 1`, `β = 0`.
    pub fn init(arch: &ArchSpec, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layers
            .iter()
            .map(|spec| {
                let std = (2.0 / spec.in_dim as f64).sqrt();
                let data = (0..spec.in_dim * spec.out_dim)
                    .map(|_| std * rng.standard_normal())
                    .collect();
                let n = if spec.bn { spec.out_dim } else { 0 };
                BnLayer {
                    weight: Matrix::from_vec(spec.out_dim, spec.in_dim, data)
                        .expect("shape from spec"),
                    gamma: Vector::filled(n, 1.0),
                    beta: Vector::zeros(n),
                    has_bn: spec.bn,
                }
            })
            .collect();
        Self::from_layers(layers, arch.activation, arch.bn_epsilon, arch.loss)
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    bn: l.has_bn,
                })
                .collect(),
            activation: self.activation,
            bn_epsilon: self.bn_epsilon,
            loss: self.loss,
        }
    }

    pub fn layers(&self) -> &[BnLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn bn_epsilon(&self) -> f64 {
        self.bn_epsilon
    }

    pub fn set_bn_epsilon(&mut self, eps: f64) {
        assert!(eps >= 0.0, "bn_epsilon must be >= 0");
        self.bn_epsilon = eps;
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn has_bn(&self) -> bool {
        self.layers.iter().any(|l| l.has_bn)
    }

    pub fn psi_groups(&self) -> &[PsiGroup] {
        &self.psi_groups
    }

    /// Number of PSI groups `m`.
    pub fn num_groups(&self) -> usize {
        self.psi_groups.len()
    }

    pub fn psi_weight(&self, i: usize) -> &[f64] {
        let g = self.psi_groups[i];
        self.layers[g.layer].weight.row(g.row)
    }

    pub fn psi_weight_mut(&mut self, i: usize) -> &mut [f64] {
        let g = self.psi_groups[i];
        self.layers[g.layer].weight.row_mut(g.row)
    }

    pub fn psi_weights(&self) -> Vec<Vector> {
        (0..self.num_groups())
            .map(|i| Vector::from(self.psi_weight(i).to_vec()))
            .collect()
    }

    pub fn set_psi_weights(&mut self, groups: &[Vector]) -> Result<()> {
        if groups.len() != self.num_groups() {
            return Err(Error::dim("set_psi_weights", self.num_groups(), groups.len()));
        }
        for (i, w) in groups.iter().enumerate() {
            let dst = self.psi_weight_mut(i);
            if dst.len() != w.len() {
                return Err(Error::dim("set_psi_weights group", dst.len(), w.len()));
            }
            dst.copy_from_slice(w);
        }
        Ok(())
    }

    pub fn group_norms(&self) -> Vector {
        (0..self.num_groups())
            .map(|i| crate::linalg::norm2(self.psi_weight(i)))
            .collect()
    }

    pub fn g_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                if l.has_bn {
                    2 * l.out_dim()
                } else {
                    l.weight.as_slice().len()
                }
            })
            .sum()
    }

    /// Scale-variant parameters in `g` order.
    pub fn g_vector(&self) -> Vector {
        let mut out = Vec::with_capacity(self.g_len());
        for l in &self.layers {
            if l.has_bn {
                out.extend_from_slice(&l.gamma);
                out.extend_from_slice(&l.beta);
            } else {
                out.extend_from_slice(l.weight.as_slice());
            }
        }
        out.into()
    }

    pub fn set_g_vector(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.g_len() {
            return Err(Error::dim("set_g_vector", self.g_len(), g.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            if l.has_bn {
                let d = l.out_dim();
                l.gamma.copy_from_slice(&g[off..off + d]);
                l.beta.copy_from_slice(&g[off + d..off + 2 * d]);
                off += 2 * d;
            } else {
                let n = l.weight.as_slice().len();
                l.weight.as_mut_slice().copy_from_slice(&g[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.gamma.len() + l.beta.len())
            .sum()
    }

    /// All parameters in canonical order (see module docs).
    pub fn flatten_params(&self) -> Vector {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.gamma);
            out.extend_from_slice(&l.beta);
        }
        out.into()
    }

    pub fn load_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim("load_params", self.param_count(), params.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for dst in [l.weight.as_mut_slice(), &mut l.gamma, &mut l.beta] {
                let n = dst.len();
                dst.copy_from_slice(&params[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Writes a parameter snapshot: little-endian `u64` count, then that many
    /// little-endian `f64` values in canonical order.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let params = self.flatten_params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for x in params.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        let n = u64::from_le_bytes(header) as usize;
        if n != self.param_count() {
            return Err(Error::dim("read_snapshot", self.param_count(), n));
        }
        let mut params = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            params.push(f64::from_le_bytes(buf));
        }
        self.load_params(&params)
    }
}

fn check_batch(net: &BnMlp, batch: &Batch) -> Result<()> {
    if batch.inputs.cols() != net.in_dim() {
        return Err(Error::dim("forward inputs", net.in_dim(), batch.inputs.cols()));
    }
    if batch.targets.cols() != net.out_dim() {
        return Err(Error::dim("forward targets", net.out_dim(), batch.targets.cols()));
    }
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if net.has_bn() && batch.len() < 2 {
        return Err(Error::Domain(format!(
            "batch norm needs at least 2 samples, got {}",
            batch.len()
        )));
    }
    Ok(())
}

/// Forward pass returning the mean batch loss and the cache for [`backward`].
pub fn forward(net: &BnMlp, batch: &Batch) -> Result<(f64, FwdCache)> {
    check_batch(net, batch)?;
    let n_layers = net.layers.len();
    let mut caches = Vec::with_capacity(n_layers);
    let mut a = batch.inputs.clone();
    for (li, layer) in net.layers.iter().enumerate() {
        let z = matmul_transposed(&a, &layer.weight);
        let (pre_act, bn) = if layer.has_bn {
            let (y, c) = bn_forward(&z, &layer.gamma, &layer.beta, net.bn_epsilon).map_err(
                |e| match e {
                    Error::DegenerateVariance { feature, .. } => Error::DegenerateVariance {
                        layer: li,
                        feature,
                    },
                    other => other,
                },
            )?;
            (y, Some(c))
        } else {
            (z, None)
        };
        let next = if li + 1 < n_layers {
            let mut h = pre_act.clone();
            h.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = net.activation.apply(*x));
            h
        } else {
            pre_act.clone()
        };
        caches.push(LayerCache {
            input: a,
            pre_act,
            bn,
        });
        a = next;
    }
    let output = a;
    let (loss, sample_output_grad) = loss_and_output_grad(net.loss, &output, &batch.targets);
    Ok((
        loss,
        FwdCache {
            layers: caches,
            output,
            sample_output_grad,
            loss,
        },
    ))
}

/// Mean batch loss only.
pub fn loss(net: &BnMlp, batch: &Batch) -> Result<f64> {
    forward(net, batch).map(|(l, _)| l)
}

fn loss_and_output_grad(kind: LossKind, out: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    let (n, k) = (out.rows(), out.cols());
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    match kind {
        LossKind::Mse => {
            let inv_k = 1.0 / k as f64;
            for r in 0..n {
                let mut s = 0.0;
                let (o, t) = (out.row(r), targets.row(r));
                let g = grad.row_mut(r);
                for j in 0..k {
                    let d = o[j] - t[j];
                    s += d * d;
                    g[j] = 2.0 * d * inv_k;
                }
                total += s * inv_k;
            }
        }
        LossKind::SoftmaxCrossEntropy => {
            for r in 0..n {
                let (o, t) = (out.row(r), targets.row(r));
                let max = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &x in o {
                    z += (x - max).exp();
                }
                let log_z = max + z.ln();
                let t_sum: f64 = t.iter().sum();
                let g = grad.row_mut(r);
                for j in 0..k {
                    let p = (o[j] - log_z).exp();
                    total -= t[j] * (o[j] - log_z);
                    g[j] = p * t_sum - t[j];
                }
            }
        }
    }
    (total / n as f64, grad)
}

/// Exact gradient of the mean batch loss.
pub fn backward(net: &BnMlp, cache: &FwdCache) -> GradBundle {
    let inv_n = 1.0 / cache.batch_len() as f64;
    let mut dout = cache.sample_output_grad.clone();
    dout.as_mut_slice().iter_mut().for_each(|x| *x *= inv_n);
    backward_from_output(net, cache, dout, false)
}

/// Gradient of sample `k`'s own loss term, with the batch statistics still
/// treated as functions of the parameters. Averaging over all `k` gives
/// [`backward`].
pub fn backward_sample(net: &BnMlp, cache: &FwdCache, k: usize) -> GradBundle {
    let n = cache.batch_len();
    assert!(k < n, "sample index {k} out of range for batch of {n}");
    let mut dout = Matrix::zeros(n, cache.output.cols());
    dout.row_mut(k)
        .copy_from_slice(cache.sample_output_grad.row(k));
    backward_from_output(net, cache, dout, false)
}

/// Backward pass with the sign of the BN projection term flipped. Exists only
/// so the verification suite can prove it detects a broken gradient.
#[doc(hidden)]
pub fn backward_with_bn_fault(net: &BnMlp, cache: &FwdCache) -> GradBundle {
    let inv_n = 1.0 / cache.batch_len() as f64;
    let mut dout = cache.sample_output_grad.clone();
    dout.as_mut_slice().iter_mut().for_each(|x| *x *= inv_n);
    backward_from_output(net, cache, dout, true)
}

fn backward_from_output(net: &BnMlp, cache: &FwdCache, dout: Matrix, fault: bool) -> GradBundle {
    let n_layers = net.layers.len();
    let mut grads = GradBundle::zeros_like(net);
    // g offsets per layer, in g order.
    let mut g_offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in &net.layers {
        g_offsets.push(off);
        off += if l.has_bn {
            2 * l.out_dim()
        } else {
            l.weight.as_slice().len()
        };
    }
    let mut psi_base = vec![0usize; n_layers];
    let mut count = 0;
    for (li, l) in net.layers.iter().enumerate() {
        psi_base[li] = count;
        if l.has_bn {
            count += l.out_dim();
        }
    }

    let mut upstream = dout;
    for li in (0..n_layers).rev() {
        let layer = &net.layers[li];
        let lc = &cache.layers[li];
        let mut dpre = upstream;
        if li + 1 < n_layers {
            for (d, &x) in dpre.as_mut_slice().iter_mut().zip(lc.pre_act.as_slice()) {
                *d *= net.activation.derivative(x);
            }
        }
        let dz = if let Some(bn) = &lc.bn {
            let (dz, dgamma, dbeta) = bn_backward_inner(&dpre, &layer.gamma, bn, fault);
            let d = layer.out_dim();
            let o = g_offsets[li];
            grads.g_grad[o..o + d].copy_from_slice(&dgamma);
            grads.g_grad[o + d..o + 2 * d].copy_from_slice(&dbeta);
            dz
        } else {
            dpre
        };

        // dW = dzᵀ · input
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        let mut dw = vec![0.0; out_dim * in_dim];
        for r in 0..dz.rows() {
            let dzr = dz.row(r);
            let xr = lc.input.row(r);
            for (o, &g) in dzr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &mut dw[o * in_dim..(o + 1) * in_dim];
                for (slot, &x) in row.iter_mut().zip(xr) {
                    *slot += g * x;
                }
            }
        }
        if layer.has_bn {
            for o in 0..out_dim {
                grads.psi_grads[psi_base[li] + o]
                    .copy_from_slice(&dw[o * in_dim..(o + 1) * in_dim]);
            }
        } else {
            let o = g_offsets[li];
            grads.g_grad[o..o + dw.len()].copy_from_slice(&dw);
        }

        if li > 0 {
            // dA = dz · W
            let mut da = Matrix::zeros(dz.rows(), in_dim);
            for r in 0..dz.rows() {
                let dzr = dz.row(r);
                let dar = da.row_mut(r);
                for (o, &g) in dzr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (slot, &w) in dar.iter_mut().zip(layer.weight.row(o)) {
                        *slot += g * w;
                    }
                }
            }
            upstream = da;
        } else {
            upstream = Matrix::zeros(0, 0);
        }
    }
    grads
}

/// Forward then backward.
pub fn loss_and_grad(net: &BnMlp, batch: &Batch) -> Result<(f64, GradBundle)> {
    let (l, cache) = forward(net, batch)?;
    Ok((l, backward(net, &cache)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_gaussian;

    fn random_batch(rng: &mut Rng, n: usize, d_in: usize, d_out: usize) -> Batch {
        let x = sample_gaussian(rng, n * d_in, 0.0, 1.0).into_inner();
        let y = sample_gaussian(rng, n * d_out, 0.0, 1.0).into_inner();
        Batch::new(
            Matrix::from_vec(n, d_in, x).unwrap(),
            Matrix::from_vec(n, d_out, y).unwrap(),
        )
        .unwrap()
    }

    fn small_net(seed: u64, eps: f64) -> BnMlp {
        let arch = ArchSpec {
            layers: vec![
                LayerSpec { in_dim: 4, out_dim: 6, bn: true },
                LayerSpec { in_dim: 6, out_dim: 5, bn: true },
                LayerSpec { in_dim: 5, out_dim: 2, bn: false },
            ],
            activation: Activation::Elu,
            bn_epsilon: eps,
            loss: LossKind::Mse,
        };
        let mut net = BnMlp::init(&arch, &mut Rng::new(seed)).unwrap();
        // Move γ, β away from 1, 0 so their gradients are exercised.
        let mut rng = Rng::new(seed + 1000);
        let g: Vec<f64> = net
            .g_vector()
            .iter()
            .map(|x| x + 0.3 * rng.standard_normal())
            .collect();
        net.set_g_vector(&g).unwrap();
        net
    }

    #[test]
    fn bn_identical_rows_give_beta() {
        let z = Matrix::from_vec(3, 2, vec![1.0, -2.0, 1.0, -2.0, 1.0, -2.0]).unwrap();
        let (y, _) = bn_forward(&z, &[2.0, 3.0], &[0.5, -0.25], 1e-5).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[0.5, -0.25]);
        }
        assert!(matches!(
            bn_forward(&z, &[2.0, 3.0], &[0.5, -0.25], 0.0),
            Err(Error::DegenerateVariance { feature: 0, .. })
        ));
    }

    #[test]
    fn bn_output_statistics() {
        let mut rng = Rng::new(1);
        let z = Matrix::from_vec(16, 3, sample_gaussian(&mut rng, 48, 2.0, 5.0).into_inner())
            .unwrap();
        let (y, _) = bn_forward(&z, &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..16).map(|r| y[(r, j)]).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_scale_cancellation() {
        let mut rng = Rng::new(2);
        let data = sample_gaussian(&mut rng, 40, 0.0, 1.0).into_inner();
        let z = Matrix::from_vec(8, 5, data.clone()).unwrap();
        let za = Matrix::from_vec(8, 5, data.iter().map(|x| 1e3 * x).collect()).unwrap();
        let gamma = [1.5, 0.5, -1.0, 2.0, 0.1];
        let beta = [0.0, 1.0, -1.0, 0.3, 0.2];
        let (y, _) = bn_forward(&z, &gamma, &beta, 0.0).unwrap();
        let (ya, _) = bn_forward(&za, &gamma, &beta, 0.0).unwrap();
        for (a, b) in y.as_slice().iter().zip(ya.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_rejects_single_sample() {
        let z = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            bn_forward(&z, &[1.0; 2], &[0.0; 2], 1e-5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn identity_net_perfect_fit_has_zero_loss_and_gradient() {
        let layer = BnLayer {
            weight: Matrix::identity(3),
            gamma: Vector::default(),
            beta: Vector::default(),
            has_bn: false,
        };
        let net = BnMlp::from_layers(vec![layer], Activation::Identity, 0.0, LossKind::Mse).unwrap();
        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let batch = Batch::new(x.clone(), x).unwrap();
        let (l, g) = loss_and_grad(&net, &batch).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.g_grad.iter().all(|x| x.abs() < 1e-12));
        assert_eq!(net.num_groups(), 0);
    }

    #[test]
    fn partition_shapes() {
        let net = small_net(0, 1e-5);
        assert_eq!(net.num_groups(), 11);
        assert_eq!(net.psi_groups()[6], PsiGroup { layer: 1, row: 0 });
        assert_eq!(net.g_len(), 12 + 10 + 10);
        let g = GradBundle::zeros_like(&net);
        assert_eq!(g.psi_grads[0].len(), 4);
        assert_eq!(g.psi_grads[10].len(), 6);
        assert_eq!(g.to_canonical(&net).len(), net.param_count());
    }

    #[test]
    fn canonical_gradient_order_matches_flatten_order() {
        // Tag each parameter by its canonical index and check that the
        // bundle built from the partition reassembles to the same order.
        let mut net = small_net(0, 1e-5);
        let tags: Vec<f64> = (0..net.param_count()).map(|i| i as f64).collect();
        net.load_params(&tags).unwrap();
        let bundle = GradBundle {
            psi_grads: net.psi_weights(),
            g_grad: net.g_vector(),
        };
        assert_eq!(bundle.to_canonical(&net).as_slice(), tags.as_slice());
    }

    #[test]
    fn flatten_load_round_trip() {
        let net = small_net(4, 1e-5);
        let p = net.flatten_params();
        let mut fresh = small_net(99, 1e-5);
        fresh.load_params(&p).unwrap();
        assert_eq!(fresh, net);
        let batch = random_batch(&mut Rng::new(5), 8, 4, 2);
        assert_eq!(
            loss(&net, &batch).unwrap().to_bits(),
            loss(&fresh, &batch).unwrap().to_bits()
        );
        assert!(fresh.load_params(&p[1..]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let net = small_net(8, 1e-5);
        let mut buf = Vec::new();
        net.write_snapshot(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8 * net.param_count());
        assert_eq!(
            u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize,
            net.param_count()
        );
        let mut other = small_net(9, 1e-5);
        other.read_snapshot(&buf[..]).unwrap();
        assert_eq!(other, net);
    }

    #[test]
    fn arch_json_shape() {
        let arch = ArchSpec::toy(10, 100, 1e-5);
        let json = serde_json::to_value(&arch).unwrap();
        assert_eq!(json["layers"][0]["in"], 10);
        assert_eq!(json["layers"][0]["bn"], true);
        assert_eq!(json["activation"], "elu");
        assert_eq!(json["loss"], "mse");
        let back: ArchSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, arch);
        assert!(serde_json::from_str::<ArchSpec>(
            r#"{"layers":[],"activation":"elu","bn_epsilon":0,"loss":"mse","extra":1}"#
        )
        .is_err());
    }

    fn central_fd(net: &BnMlp, batch: &Batch) -> Vec<f64> {
        let base = net.flatten_params();
        let mut probe = net.clone();
        (0..base.len())
            .map(|i| {
                let h = 1e-5 * base[i].abs().max(1.0);
                let mut p = base.clone();
                p[i] = base[i] + h;
                probe.load_params(&p).unwrap();
                let up = loss(&probe, batch).unwrap();
                p[i] = base[i] - h;
                probe.load_params(&p).unwrap();
                let down = loss(&probe, batch).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(net: &BnMlp, batch: &Batch) {
        let (_, g) = loss_and_grad(net, batch).unwrap();
        let analytic = g.to_canonical(net);
        let numeric = central_fd(net, batch);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - n).abs();
            let rel = err / a.abs().max(n.abs());
            assert!(err < 1e-9 || rel < 1e-5, "param {i}: analytic {a}, numeric {n}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_mse() {
        let net = small_net(10, 1e-5);
        let batch = random_batch(&mut Rng::new(11), 7, 4, 2);
        assert_grad_close(&net, &batch);
    }

    #[test]
    fn gradient_matches_finite_differences_relu_ce() {
        let mut net = small_net(12, 1e-3);
        net.activation = Activation::Relu;
        net.loss = LossKind::SoftmaxCrossEntropy;
        let mut rng = Rng::new(13);
        let x = sample_gaussian(&mut rng, 9 * 4, 0.0, 1.0).into_inner();
        let mut y = Matrix::zeros(9, 2);
        for r in 0..9 {
            y[(r, rng.below(2))] = 1.0;
        }
        let batch = Batch::new(Matrix::from_vec(9, 4, x).unwrap(), y).unwrap();
        assert_grad_close(&net, &batch);
    }

    #[test]
    fn per_sample_gradients_average_to_batch_gradient() {
        let net = small_net(14, 0.0);
        let batch = random_batch(&mut Rng::new(15), 6, 4, 2);
        let (_, cache) = forward(&net, &batch).unwrap();
        let full = backward(&net, &cache);
        let mut avg = GradBundle::zeros_like(&net);
        for k in 0..6 {
            avg.axpy(1.0 / 6.0, &backward_sample(&net, &cache, k));
        }
        let a = avg.to_canonical(&net);
        let b = full.to_canonical(&net);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn fault_injection_changes_gradient() {
        let net = small_net(16, 1e-5);
        let batch = random_batch(&mut Rng::new(17), 8, 4, 2);
        let (_, cache) = forward(&net, &batch).unwrap();
        let good = backward(&net, &cache);
        let bad = backward_with_bn_fault(&net, &cache);
        assert_ne!(good, bad);
    }

    #[test]
    fn shape_errors() {
        let net = small_net(0, 1e-5);
        let bad = random_batch(&mut Rng::new(1), 4, 3, 2);
        assert!(matches!(forward(&net, &bad), Err(Error::Dimension { .. })));
        let one = random_batch(&mut Rng::new(1), 1, 4, 2);
        assert!(matches!(forward(&net, &one), Err(Error::Domain(_))));
    }
}
