//! Synthetic data, the training loop, and run metrics.
//!
//! Two datasets are provided: the linear toy regression `y = μᵀx + ε` used for
//! convergence comparisons, and Gaussian-blob classification used for the
//! unbalanced-initialization demo. Runs are single-threaded and fully
//! determined by their seeds.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sample_gaussian, Matrix, Rng, Vector};
use crate::manifold::{apply_rescale, Rescale};
use crate::network::{self, Activation, ArchSpec, Batch, BnMlp, LayerSpec, LossKind};
use crate::optim::{OptConfig, OptKind, Optimizer};

fn one() -> f64 {
    1.0
}
fn n_default() -> usize {
    1000
}
fn in_default() -> usize {
    10
}
fn hidden_default() -> usize {
    100
}

/// Toy regression: `n_samples` inputs `x ~ N(0, I_d)`, labels
/// `y = μᵀx + ε`, `ε ~ N(0, noise_std²)`, with `μ ~ N(0, I_d)` drawn once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRegressionSpec {
    #[serde(default = "n_default")]
    pub n_samples: usize,
    #[serde(default = "in_default")]
    pub in_dim: usize,
    #[serde(default = "hidden_default")]
    pub hidden: usize,
    #[serde(default = "one")]
    pub noise_std: f64,
    pub mu_seed: u64,
    pub data_seed: u64,
    pub init_seed: u64,
}

impl ToyRegressionSpec {
    /// 1000 samples, 10 inputs, 100 hidden units, unit noise.
    pub fn with_seeds(mu_seed: u64, data_seed: u64, init_seed: u64) -> Self {
        Self {
            n_samples: n_default(),
            in_dim: in_default(),
            hidden: hidden_default(),
            noise_std: 1.0,
            mu_seed,
            data_seed,
            init_seed,
        }
    }

    /// `in_dim → hidden (BN) → 1`, ELU, MSE.
    pub fn arch(&self, bn_epsilon: f64) -> ArchSpec {
        ArchSpec::toy(self.in_dim, self.hidden, bn_epsilon)
    }
}

/// Draws `μ` with `mu_seed`, then the dataset with `data_seed`.
pub fn gen_toy_regression(spec: &ToyRegressionSpec) -> (Batch, Vector) {
    let mu = sample_gaussian(&mut Rng::new(spec.mu_seed), spec.in_dim, 0.0, 1.0);
    let data = gen_linear_regression(&mu, spec.n_samples, spec.noise_std, spec.data_seed);
    (data, mu)
}

/// `n` samples of `y = μᵀx + ε` for a given `μ`. Per sample, the `d` input
/// coordinates are drawn before the noise term.
pub fn gen_linear_regression(mu: &[f64], n: usize, noise_std: f64, seed: u64) -> Batch {
    let d = mu.len();
    let mut rng = Rng::new(seed);
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let start = x.len();
        for _ in 0..d {
            x.push(rng.standard_normal());
        }
        let clean = crate::linalg::dot_slice(&x[start..], mu);
        y.push(clean + noise_std * rng.standard_normal());
    }
    Batch::regression(Matrix::from_vec(n, d, x).expect("shape"), &y).expect("shape")
}

fn classes_default() -> usize {
    4
}
fn sep_default() -> f64 {
    1.5
}
fn cls_in_default() -> usize {
    20
}
fn cls_hidden_default() -> usize {
    32
}

/// Gaussian blobs: `classes` centres `c_k ~ N(0, separation² I)`; each sample
/// picks a uniform class `k` and draws `x ~ N(c_k, I)`. Targets are one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSpec {
    #[serde(default = "n_default")]
    pub n_samples: usize,
    #[serde(default = "cls_in_default")]
    pub in_dim: usize,
    #[serde(default = "cls_hidden_default")]
    pub hidden: usize,
    #[serde(default = "classes_default")]
    pub classes: usize,
    #[serde(default = "sep_default")]
    pub separation: f64,
    pub data_seed: u64,
    pub init_seed: u64,
}

impl BlobsSpec {
    pub fn with_seeds(data_seed: u64, init_seed: u64) -> Self {
        Self {
            n_samples: n_default(),
            in_dim: cls_in_default(),
            hidden: cls_hidden_default(),
            classes: classes_default(),
            separation: sep_default(),
            data_seed,
            init_seed,
        }
    }

    /// Two-layer classifier `in_dim → hidden (BN) → classes`, ELU, softmax CE.
    pub fn arch(&self, bn_epsilon: f64) -> ArchSpec {
        ArchSpec {
            layers: vec![
                LayerSpec {
                    in_dim: self.in_dim,
                    out_dim: self.hidden,
                    bn: true,
                },
                LayerSpec {
                    in_dim: self.hidden,
                    out_dim: self.classes,
                    bn: false,
                },
            ],
            activation: Activation::Elu,
            bn_epsilon,
            loss: LossKind::SoftmaxCrossEntropy,
        }
    }
}

pub fn gen_blobs(spec: &BlobsSpec) -> Batch {
    let mut rng = Rng::new(spec.data_seed);
    let (d, k) = (spec.in_dim, spec.classes);
    let centres = sample_gaussian(&mut rng, k * d, 0.0, spec.separation);
    let mut x = Vec::with_capacity(spec.n_samples * d);
    let mut y = Matrix::zeros(spec.n_samples, k);
    for r in 0..spec.n_samples {
        let c = rng.below(k);
        y[(r, c)] = 1.0;
        for j in 0..d {
            x.push(centres[c * d + j] + rng.standard_normal());
        }
    }
    Batch::new(Matrix::from_vec(spec.n_samples, d, x).expect("shape"), y).expect("shape")
}

/// Dataset choice for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    ToyRegression(ToyRegressionSpec),
    Blobs(BlobsSpec),
}

impl DataSpec {
    pub fn generate(&self) -> Batch {
        match self {
            DataSpec::ToyRegression(s) => gen_toy_regression(s).0,
            DataSpec::Blobs(s) => gen_blobs(s),
        }
    }

    pub fn init_seed(&self) -> u64 {
        match self {
            DataSpec::ToyRegression(s) => s.init_seed,
            DataSpec::Blobs(s) => s.init_seed,
        }
    }

    pub fn default_arch(&self, bn_epsilon: f64) -> ArchSpec {
        match self {
            DataSpec::ToyRegression(s) => s.arch(bn_epsilon),
            DataSpec::Blobs(s) => s.arch(bn_epsilon),
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    /// Optimizer steps completed.
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
    /// Full-dataset loss.
    pub loss: f64,
    /// Euclidean norm of the full-dataset gradient.
    pub grad_norm: f64,
    pub group_norms: Vector,
    /// Milliseconds since the run started; 0 unless wall time is recorded.
    pub wall_ms: f64,
    /// Renormalizations applied so far (all groups counted).
    pub renorm_events: usize,
}

impl RunRecord {
    pub fn norm_min(&self) -> f64 {
        self.group_norms.iter().copied().fold(f64::NAN, f64::min)
    }

    pub fn norm_max(&self) -> f64 {
        self.group_norms.iter().copied().fold(f64::NAN, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Log every this many optimizer steps; the first and last steps are always logged.
    pub log_every: usize,
    pub shuffle_seed: u64,
    /// When false `wall_ms` is 0 so logs are byte-reproducible.
    pub record_wall_time: bool,
}

impl TrainOptions {
    pub fn new(epochs: usize, batch_size: usize, log_every: usize, shuffle_seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            log_every,
            shuffle_seed,
            record_wall_time: false,
        }
    }
}

/// Minibatch index lists for one epoch. The tail batch is kept when it is
/// large enough for batch norm.
pub fn epoch_batches(rng: &mut Rng, n: usize, batch_size: usize, min_batch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size)
        .filter(|c| c.len() >= min_batch)
        .map(|c| c.to_vec())
        .collect()
}

struct Logger {
    start: Instant,
    timed: bool,
    records: Vec<RunRecord>,
}

impl Logger {
    fn log(&mut self, net: &BnMlp, data: &Batch, step: usize, epoch: usize, renorm_events: usize) -> Result<()> {
        let (loss, g) = network::loss_and_grad(net, data)?;
        let rec = RunRecord {
            step,
            epoch,
            loss,
            grad_norm: g.norm(),
            group_norms: net.group_norms(),
            wall_ms: if self.timed {
                self.start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
            renorm_events,
        };
        let finite = rec.loss.is_finite() && rec.grad_norm.is_finite();
        self.records.push(rec);
        if finite {
            Ok(())
        } else {
            Err(Error::Diverged {
                step,
                records: Box::new(std::mem::take(&mut self.records)),
            })
        }
    }
}

/// Trains `net` in place.
///
/// Full-batch kinds (`psi_gd`, `gd`) take one step per epoch on the whole
/// dataset; the rest take shuffled minibatches. After every update, groups
/// above `cfg.renorm_threshold` are renormalized. The full-dataset loss and
/// gradient norm are logged at step 0, every `log_every` steps, and at the
/// final step.
pub fn run_training(net: &mut BnMlp, data: &Batch, cfg: &OptConfig, opts: &TrainOptions) -> Result<Vec<RunRecord>> {
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    if opts.batch_size == 0 || opts.log_every == 0 {
        return Err(Error::Config("batch_size and log_every must be positive".into()));
    }
    let min_batch = if net.has_bn() { 2 } else { 1 };
    if net.has_bn() && opts.batch_size < 2 && !cfg.kind.is_full_batch() {
        return Err(Error::Config("batch norm needs batch_size >= 2".into()));
    }
    if opts.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut opt = Optimizer::new(cfg.clone(), net)?;
    let mut shuffle = Rng::new(opts.shuffle_seed);
    let mut logger = Logger {
        start: Instant::now(),
        timed: opts.record_wall_time,
        records: Vec::new(),
    };
    let mut renorm_events = 0usize;
    let mut step = 0usize;
    logger.log(net, data, 0, 0, 0)?;

    for epoch in 1..=opts.epochs {
        let batches: Vec<Option<Vec<usize>>> = if cfg.kind.is_full_batch() {
            vec![None]
        } else {
            epoch_batches(&mut shuffle, data.len(), opts.batch_size, min_batch)
                .into_iter()
                .map(Some)
                .collect()
        };
        let n_batches = batches.len();
        for (bi, idx) in batches.into_iter().enumerate() {
            let (loss, grads) = match &idx {
                None => network::loss_and_grad(net, data)?,
                Some(idx) => network::loss_and_grad(net, &data.select(idx))?,
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    step,
                    records: Box::new(logger.records),
                });
            }
            opt.step(net, &grads)?;
            step += 1;
            let r = opt.renormalize(net);
            renorm_events += r.factors().iter().filter(|&&a| a != 1.0).count();

            let last = epoch == opts.epochs && bi + 1 == n_batches;
            if step.is_multiple_of(opts.log_every) || last {
                logger.log(net, data, step, epoch, renorm_events)?;
            }
        }
    }
    Ok(logger.records)
}

/// Seeded He initialization followed by `T_pattern`. The pattern must have
/// one factor per PSI group (see [`Rescale::from_pattern`]).
pub fn make_unbalanced_init(arch: &ArchSpec, init_seed: u64, pattern: &Rescale) -> Result<BnMlp> {
    let net = BnMlp::init(arch, &mut Rng::new(init_seed))?;
    apply_rescale(&net, pattern)
}

/// Runs two trajectories for `steps` minibatch steps with one shared batch
/// stream: one from `net` and one from `T_a(net)`, momentum buffers starting
/// at zero. Returns the largest deviation between `Ŵ_t` and `T_a(W_t)` over
/// all steps.
///
/// Deviation of coordinate `j` in group `i` is `|ŵ_ij − a_i w_ij| / ‖a_i w_i‖`;
/// the scale-variant block is compared as `|ĝ_j − g_j| / ‖g‖`. No
/// renormalization is applied.
pub fn equivariance_audit(
    net: &BnMlp,
    data: &Batch,
    cfg: &OptConfig,
    a: &Rescale,
    steps: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<f64> {
    let mut base = net.clone();
    let mut scaled = apply_rescale(net, a)?;
    let mut opt_base = Optimizer::new(cfg.clone(), &base)?;
    let mut opt_scaled = Optimizer::new(cfg.clone(), &scaled)?;
    let mut rng = Rng::new(shuffle_seed);
    let min_batch = if net.has_bn() { 2 } else { 1 };
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let batch = if cfg.kind.is_full_batch() {
            data.clone()
        } else {
            if queue.is_empty() {
                queue = epoch_batches(&mut rng, data.len(), batch_size, min_batch);
                queue.reverse();
            }
            data.select(&queue.pop().expect("non-empty epoch"))
        };
        let (_, g_base) = network::loss_and_grad(&base, &batch)?;
        let (_, g_scaled) = network::loss_and_grad(&scaled, &batch)?;
        opt_base.step(&mut base, &g_base)?;
        opt_scaled.step(&mut scaled, &g_scaled)?;
        worst = worst.max(trajectory_deviation(&base, &scaled, a));
    }
    Ok(worst)
}

/// Deviation between `scaled` and `T_a(base)` as defined in [`equivariance_audit`].
pub fn trajectory_deviation(base: &BnMlp, scaled: &BnMlp, a: &Rescale) -> f64 {
    let mut worst = 0.0f64;
    for (i, &f) in a.factors().iter().enumerate() {
        let w = base.psi_weight(i);
        let wh = scaled.psi_weight(i);
        let denom = f * crate::linalg::norm2(w);
        for (x, y) in w.iter().zip(wh) {
            let d = (y - f * x).abs() / denom;
            worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
        }
    }
    let g = base.g_vector();
    let gh = scaled.g_vector();
    let gn = g.norm2().max(f64::MIN_POSITIVE);
    for (x, y) in g.iter().zip(gh.iter()) {
        let d = (y - x).abs() / gn;
        worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
    }
    worst
}

pub const CSV_HEADER: &str = "step,epoch,loss,grad_norm,norm_min,norm_max,wall_ms";

/// Writes `# <metadata JSON>`, the header line, then one row per record.
/// Floats use Rust's shortest round-trip exponent form.
pub fn write_csv<W: Write>(mut w: W, metadata: &serde_json::Value, records: &[RunRecord]) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(metadata)?)?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            r.step,
            r.epoch,
            r.loss,
            r.grad_norm,
            r.norm_min(),
            r.norm_max(),
            r.wall_ms
        )?;
    }
    Ok(())
}

/// Shared learning rate for the scale-variant block in the comparison runs.
pub const COMPARISON_LR_G: f64 = 0.01;

/// Minibatch size for the comparison runs.
pub const COMPARISON_BATCH: usize = 32;

/// The `(1e4, 1e4, 1e-4, 1e-4)` pattern, cycled over PSI groups.
pub const UNBALANCED_PATTERN: [f64; 4] = [1e4, 1e4, 1e-4, 1e-4];

/// Seeds of replicate `r` for the toy regression comparison.
pub fn toy_replicate(r: u64) -> ToyRegressionSpec {
    ToyRegressionSpec::with_seeds(100 + r, 200 + r, 300 + r)
}

/// Seeds of replicate `r` for the unbalanced-initialization comparison.
pub fn blobs_replicate(r: u64) -> BlobsSpec {
    BlobsSpec::with_seeds(10 + r, 20 + r)
}

/// Shuffle seed of replicate `r`.
pub fn replicate_shuffle_seed(r: u64) -> u64 {
    400 + r
}

/// Final full-dataset loss and gradient norm of each replicate. Diverged
/// replicates count as `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub kind: OptKind,
    pub final_loss: Vec<f64>,
    pub final_grad_norm: Vec<f64>,
}

impl ReplicateSummary {
    pub fn median_loss(&self) -> f64 {
        median(&self.final_loss)
    }

    pub fn median_grad_norm(&self) -> f64 {
        median(&self.final_grad_norm)
    }
}

/// Median under `f64::total_cmp`; the upper middle element for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.get(v.len() / 2).copied().unwrap_or(f64::NAN)
}

fn replicate_runs(
    kind: OptKind,
    replicates: u64,
    epochs: usize,
    mut setup: impl FnMut(u64) -> Result<(BnMlp, Batch)>,
) -> Result<ReplicateSummary> {
    let cfg = OptConfig::reference(kind, COMPARISON_LR_G);
    let mut out = ReplicateSummary {
        kind,
        final_loss: Vec::new(),
        final_grad_norm: Vec::new(),
    };
    for r in 0..replicates {
        let (mut net, data) = setup(r)?;
        let opts = TrainOptions::new(epochs, COMPARISON_BATCH, usize::MAX, replicate_shuffle_seed(r));
        let (loss, grad) = match run_training(&mut net, &data, &cfg, &opts) {
            Ok(recs) => recs.last().map_or((f64::NAN, f64::NAN), |l| (l.loss, l.grad_norm)),
            Err(Error::Diverged { .. }) => (f64::INFINITY, f64::INFINITY),
            Err(e) => return Err(e),
        };
        out.final_loss.push(loss);
        out.final_grad_norm.push(grad);
    }
    Ok(out)
}

/// Toy regression with reference hyperparameters, one run per replicate.
pub fn toy_convergence(kind: OptKind, replicates: u64, epochs: usize) -> Result<ReplicateSummary> {
    replicate_runs(kind, replicates, epochs, |r| {
        let spec = toy_replicate(r);
        let (data, _) = gen_toy_regression(&spec);
        Ok((BnMlp::init(&spec.arch(1e-5), &mut Rng::new(spec.init_seed))?, data))
    })
}

/// Blobs classifier started from the cycled [`UNBALANCED_PATTERN`].
pub fn unbalanced_convergence(kind: OptKind, replicates: u64, epochs: usize) -> Result<ReplicateSummary> {
    replicate_runs(kind, replicates, epochs, |r| {
        let spec = blobs_replicate(r);
        let arch = spec.arch(1e-5);
        let m = arch.layers.iter().filter(|l| l.bn).map(|l| l.out_dim).sum();
        let net = make_unbalanced_init(&arch, spec.init_seed, &Rescale::from_pattern(&UNBALANCED_PATTERN, m)?)?;
        Ok((net, gen_blobs(&spec)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> ToyRegressionSpec {
        ToyRegressionSpec {
            n_samples: 96,
            in_dim: 5,
            hidden: 12,
            noise_std: 1.0,
            mu_seed: seed,
            data_seed: seed + 1,
            init_seed: seed + 2,
        }
    }

    #[test]
    fn defaults_match_toy_setup() {
        let s = ToyRegressionSpec::with_seeds(0, 1, 2);
        assert_eq!((s.n_samples, s.in_dim, s.hidden, s.noise_std), (1000, 10, 100, 1.0));
        let parsed: ToyRegressionSpec =
            serde_json::from_str(r#"{"mu_seed":0,"data_seed":1,"init_seed":2}"#).unwrap();
        assert_eq!(parsed, s);
        assert!(serde_json::from_str::<ToyRegressionSpec>(r#"{"data_seed":1,"init_seed":2}"#).is_err());
    }

    #[test]
    fn noiseless_projection() {
        let mut mu = vec![0.0; 10];
        mu[0] = 1.0;
        let b = gen_linear_regression(&mu, 50, 0.0, 3);
        for r in 0..50 {
            assert_eq!(b.targets[(r, 0)], b.inputs[(r, 0)]);
        }
    }

    #[test]
    fn residual_variance_matches_noise() {
        let spec = ToyRegressionSpec {
            n_samples: 100_000,
            ..ToyRegressionSpec::with_seeds(4, 5, 6)
        };
        let (b, mu) = gen_toy_regression(&spec);
        let res: Vec<f64> = (0..b.len())
            .map(|r| b.targets[(r, 0)] - crate::linalg::dot(b.inputs.row(r), &mu).unwrap())
            .collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / res.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn data_is_deterministic() {
        let s = small_spec(9);
        assert_eq!(gen_toy_regression(&s), gen_toy_regression(&s));
        let b = BlobsSpec::with_seeds(1, 2);
        assert_eq!(gen_blobs(&b), gen_blobs(&b));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let s = small_spec(1);
        let (data, _) = gen_toy_regression(&s);
        let mut net = BnMlp::init(&s.arch(1e-5), &mut Rng::new(s.init_seed)).unwrap();
        let before = net.clone();
        let cfg = OptConfig::reference(OptKind::PsiSgd, 0.01);
        let recs = run_training(&mut net, &data, &cfg, &TrainOptions::new(0, 16, 1, 0)).unwrap();
        assert!(recs.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn records_are_logged_on_schedule() {
        let s = small_spec(2);
        let (data, _) = gen_toy_regression(&s);
        let mut net = BnMlp::init(&s.arch(1e-5), &mut Rng::new(s.init_seed)).unwrap();
        let cfg = OptConfig::reference(OptKind::Sgd, 0.01);
        // 96 samples / 16 = 6 steps per epoch, 3 epochs = 18 steps
        let recs = run_training(&mut net, &data, &cfg, &TrainOptions::new(3, 16, 4, 0)).unwrap();
        let steps: Vec<usize> = recs.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 12, 16, 18]);
        assert_eq!(recs.last().unwrap().epoch, 3);
        assert!(recs.iter().all(|r| r.wall_ms == 0.0));
    }

    #[test]
    fn full_batch_kinds_step_once_per_epoch() {
        let s = small_spec(3);
        let (data, _) = gen_toy_regression(&s);
        let mut net = BnMlp::init(&s.arch(1e-5), &mut Rng::new(s.init_seed)).unwrap();
        let cfg = OptConfig::reference(OptKind::PsiGd, 0.01);
        let recs = run_training(&mut net, &data, &cfg, &TrainOptions::new(5, 16, 1, 0)).unwrap();
        assert_eq!(recs.last().unwrap().step, 5);
    }

    #[test]
    fn group_norms_never_shrink_without_renormalization() {
        let s = small_spec(4);
        let (data, _) = gen_toy_regression(&s);
        for kind in [OptKind::PsiSgd, OptKind::Sgd, OptKind::PsiGd, OptKind::Gd] {
            let mut net = BnMlp::init(&s.arch(0.0), &mut Rng::new(s.init_seed)).unwrap();
            let cfg = OptConfig {
                renorm_threshold: f64::MAX,
                ..OptConfig::reference(kind, 0.01)
            };
            let recs = run_training(&mut net, &data, &cfg, &TrainOptions::new(5, 16, 1, 7)).unwrap();
            for pair in recs.windows(2) {
                assert_eq!(pair[1].renorm_events, 0);
                for (a, b) in pair[0].group_norms.iter().zip(pair[1].group_norms.iter()) {
                    assert!(b - a >= -1e-12 * a, "{kind:?}: {a} -> {b}");
                }
            }
        }
    }

    #[test]
    fn divergence_returns_partial_records() {
        let s = small_spec(5);
        let (data, _) = gen_toy_regression(&s);
        let mut net = BnMlp::init(&s.arch(1e-5), &mut Rng::new(s.init_seed)).unwrap();
        let cfg = OptConfig::new(OptKind::Sgd, 1e3, 1e3);
        match run_training(&mut net, &data, &cfg, &TrainOptions::new(50, 16, 1, 0)) {
            Err(Error::Diverged { records, .. }) => assert!(!records.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn identity_audit_is_exactly_zero() {
        let s = small_spec(6);
        let (data, _) = gen_toy_regression(&s);
        let net = BnMlp::init(&s.arch(0.0), &mut Rng::new(s.init_seed)).unwrap();
        let a = Rescale::identity(net.num_groups());
        for kind in [OptKind::PsiSgdm, OptKind::Sgd] {
            let cfg = OptConfig::reference(kind, 0.01);
            assert_eq!(equivariance_audit(&net, &data, &cfg, &a, 20, 16, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn csv_layout() {
        let rec = RunRecord {
            step: 3,
            epoch: 1,
            loss: 0.5,
            grad_norm: 1.25e-3,
            group_norms: vec![2.0, 1.0, 3.0].into(),
            wall_ms: 0.0,
            renorm_events: 0,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &serde_json::json!({"seed": 1}), &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r##"# {"seed":1}"##);
        assert_eq!(lines[1], CSV_HEADER);
        assert_eq!(lines[2], "3,1,5e-1,1.25e-3,1e0,3e0,0e0");
    }

    #[test]
    fn unbalanced_init_keeps_the_function() {
        let s = small_spec(7);
        let (data, _) = gen_toy_regression(&s);
        let arch = s.arch(0.0);
        let balanced = BnMlp::init(&arch, &mut Rng::new(s.init_seed)).unwrap();
        let ones = Rescale::identity(balanced.num_groups());
        assert_eq!(make_unbalanced_init(&arch, s.init_seed, &ones).unwrap(), balanced);
        let pat = Rescale::from_pattern(&[1e4, 1e4, 1e-4, 1e-4], balanced.num_groups()).unwrap();
        let unbalanced = make_unbalanced_init(&arch, s.init_seed, &pat).unwrap();
        let l0 = network::loss(&balanced, &data).unwrap();
        let l1 = network::loss(&unbalanced, &data).unwrap();
        assert!((l0 - l1).abs() <= 1e-10 * l0.abs());
    }
}
