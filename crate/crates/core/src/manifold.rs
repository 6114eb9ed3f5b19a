//! Geometry of the PSI quotient manifold.
//!
//! A point is represented by any of its representatives `W = (w¹, …, wᵐ)`;
//! tangent vectors are stored as horizontal lifts in that representative's
//! coordinates. Under the rescaling `T_a`, a tangent `Ξ` at `W` maps to
//! `T_a(Ξ)` at `T_a(W)`.
//!
//! The metric weights each group by `1/‖wⁱ‖²`, which makes it independent of
//! the representative. The Riemannian gradient is its dual, `‖wⁱ‖² ∇_{wⁱ} L`,
//! and the retraction is plain addition.

use crate::error::{Error, Result};
use crate::linalg::{dot_slice, Vector};
use crate::network::{BnMlp, GradBundle};

/// Positive per-group rescaling factors `a = (a₁, …, a_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescale {
    factors: Vector,
}

impl Rescale {
    pub fn new(factors: Vector) -> Result<Self> {
        if let Some((i, a)) = factors
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && a.is_finite()))
        {
            return Err(Error::Domain(format!(
                "rescale factor {i} must be positive and finite, got {a}"
            )));
        }
        Ok(Self { factors })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            factors: Vector::filled(m, 1.0),
        }
    }

    /// Repeats `pattern` cyclically to length `m`.
    pub fn from_pattern(pattern: &[f64], m: usize) -> Result<Self> {
        if pattern.is_empty() && m > 0 {
            return Err(Error::Domain("empty rescale pattern".into()));
        }
        Self::new((0..m).map(|i| pattern[i % pattern.len()]).collect())
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.factors.iter().all(|&a| a == 1.0)
    }

    pub fn inverse(&self) -> Self {
        Self {
            factors: self.factors.iter().map(|a| 1.0 / a).collect(),
        }
    }

    /// Factor-wise product; applying the result equals applying `self` then `other`.
    pub fn compose(&self, other: &Rescale) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::dim("Rescale::compose", self.len(), other.len()));
        }
        Self::new(
            self.factors
                .iter()
                .zip(other.factors.iter())
                .map(|(a, b)| a * b)
                .collect(),
        )
    }

    /// `T_a` on a list of per-group vectors (weights, tangents, or momenta).
    pub fn apply_groups(&self, groups: &[Vector]) -> Result<Vec<Vector>> {
        if groups.len() != self.len() {
            return Err(Error::dim("Rescale::apply_groups", self.len(), groups.len()));
        }
        Ok(groups
            .iter()
            .zip(self.factors.iter())
            .map(|(v, &a)| v.scaled(a))
            .collect())
    }
}

/// Per-group tangent components `Ξ = (ξ¹, …, ξᵐ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub components: Vec<Vector>,
}

impl Tangent {
    pub fn new(components: Vec<Vector>) -> Self {
        Self { components }
    }

    pub fn zeros_like(groups: &[Vector]) -> Self {
        Self {
            components: groups.iter().map(|w| Vector::zeros(w.len())).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            components: self.components.iter().map(|v| v.scaled(c)).collect(),
        }
    }

    /// Plain Euclidean inner product of the stacked components.
    pub fn euclidean_inner(&self, other: &Tangent) -> Result<f64> {
        check_shapes("euclidean_inner", &self.components, &other.components)?;
        Ok(self
            .components
            .iter()
            .zip(&other.components)
            .map(|(a, b)| dot_slice(a, b))
            .sum())
    }
}

fn check_shapes(op: &'static str, a: &[Vector], b: &[Vector]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::dim(op, x.len(), y.len()));
        }
    }
    Ok(())
}

fn squared_norms(w_groups: &[Vector]) -> Result<Vec<f64>> {
    w_groups
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let n2 = dot_slice(w, w);
            if n2 > 0.0 {
                Ok(n2)
            } else {
                Err(Error::DegeneratePoint { group: i })
            }
        })
        .collect()
}

/// Returns a copy of `net` with PSI group `i` multiplied by `a_i`.
pub fn apply_rescale(net: &BnMlp, a: &Rescale) -> Result<BnMlp> {
    let mut out = net.clone();
    apply_rescale_in_place(&mut out, a)?;
    Ok(out)
}

pub fn apply_rescale_in_place(net: &mut BnMlp, a: &Rescale) -> Result<()> {
    if a.len() != net.num_groups() {
        return Err(Error::dim("apply_rescale", net.num_groups(), a.len()));
    }
    for (i, &f) in a.factors().iter().enumerate() {
        if f != 1.0 {
            net.psi_weight_mut(i).iter_mut().for_each(|x| *x *= f);
        }
    }
    Ok(())
}

/// `Σ_i ⟨ξ₁ⁱ, ξ₂ⁱ⟩ / ‖wⁱ‖²`.
pub fn metric_inner(w_groups: &[Vector], xi1: &Tangent, xi2: &Tangent) -> Result<f64> {
    check_shapes("metric_inner", w_groups, &xi1.components)?;
    check_shapes("metric_inner", w_groups, &xi2.components)?;
    let n2 = squared_norms(w_groups)?;
    Ok(xi1
        .components
        .iter()
        .zip(&xi2.components)
        .zip(&n2)
        .map(|((a, b), s)| dot_slice(a, b) / s)
        .sum())
}

/// `gradⁱ = ‖wⁱ‖² ∇_{wⁱ} L`. Only the PSI part of the bundle is used; `g`
/// stays Euclidean.
pub fn riemannian_grad(w_groups: &[Vector], euclid: &GradBundle) -> Result<Tangent> {
    check_shapes("riemannian_grad", w_groups, &euclid.psi_grads)?;
    let n2 = squared_norms(w_groups)?;
    Ok(Tangent::new(
        euclid
            .psi_grads
            .iter()
            .zip(&n2)
            .map(|(g, &s)| g.scaled(s))
            .collect(),
    ))
}

/// `R_W(Ξ) = W + Ξ`.
pub fn retract(w_groups: &[Vector], xi: &Tangent) -> Result<Vec<Vector>> {
    check_shapes("retract", w_groups, &xi.components)?;
    Ok(w_groups
        .iter()
        .zip(&xi.components)
        .map(|(w, x)| w.iter().zip(x.iter()).map(|(a, b)| a + b).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sample_gaussian, Rng};

    fn random_groups(rng: &mut Rng, m: usize, d: usize) -> Vec<Vector> {
        (0..m).map(|_| sample_gaussian(rng, d, 0.0, 1.0)).collect()
    }

    fn unit(mut v: Vector) -> Vector {
        let n = v.norm2();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn rescale_rejects_nonpositive() {
        assert!(Rescale::new(vec![1.0, 0.0].into()).is_err());
        assert!(Rescale::new(vec![1.0, -2.0].into()).is_err());
        assert!(Rescale::new(vec![1.0, f64::NAN].into()).is_err());
        assert!(Rescale::new(vec![1.0, 2.0].into()).is_ok());
    }

    #[test]
    fn pattern_cycles() {
        let r = Rescale::from_pattern(&[1e4, 1e4, 1e-4, 1e-4], 6).unwrap();
        assert_eq!(r.factors(), &[1e4, 1e4, 1e-4, 1e-4, 1e4, 1e4]);
    }

    #[test]
    fn unit_norm_metric_is_euclidean() {
        let mut rng = Rng::new(1);
        let w: Vec<Vector> = random_groups(&mut rng, 4, 3).into_iter().map(unit).collect();
        let a = Tangent::new(random_groups(&mut rng, 4, 3));
        let b = Tangent::new(random_groups(&mut rng, 4, 3));
        let m = metric_inner(&w, &a, &b).unwrap();
        let e = a.euclidean_inner(&b).unwrap();
        assert!(rel(m, e) < 1e-12);
    }

    #[test]
    fn metric_is_positive_definite_and_symmetric() {
        let mut rng = Rng::new(2);
        let w = random_groups(&mut rng, 5, 4);
        let a = Tangent::new(random_groups(&mut rng, 5, 4));
        let b = Tangent::new(random_groups(&mut rng, 5, 4));
        assert!(metric_inner(&w, &a, &a).unwrap() > 0.0);
        assert_eq!(
            metric_inner(&w, &a, &b).unwrap(),
            metric_inner(&w, &b, &a).unwrap()
        );
    }

    #[test]
    fn zero_norm_group_is_an_error() {
        let w = vec![Vector::new(vec![1.0, 0.0]), Vector::zeros(2)];
        let t = Tangent::zeros_like(&w);
        assert!(matches!(
            metric_inner(&w, &t, &t),
            Err(Error::DegeneratePoint { group: 1 })
        ));
        let g = GradBundle {
            psi_grads: t.components.clone(),
            g_grad: Vector::default(),
        };
        assert!(matches!(
            riemannian_grad(&w, &g),
            Err(Error::DegeneratePoint { group: 1 })
        ));
    }

    #[test]
    fn riemannian_grad_homogeneity_and_unit_case() {
        let mut rng = Rng::new(3);
        let w: Vec<Vector> = random_groups(&mut rng, 3, 5).into_iter().map(unit).collect();
        let g = GradBundle {
            psi_grads: random_groups(&mut rng, 3, 5),
            g_grad: Vector::default(),
        };
        let r = riemannian_grad(&w, &g).unwrap();
        for (a, b) in r.components.iter().zip(&g.psi_grads) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
        let c = 3.0;
        let wc: Vec<Vector> = w.iter().map(|v| v.scaled(c)).collect();
        let rc = riemannian_grad(&wc, &g).unwrap();
        for (a, b) in rc.components.iter().zip(&r.components) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!(rel(*x, c * c * y) < 1e-14);
            }
        }
    }

    #[test]
    fn retraction_axioms() {
        let mut rng = Rng::new(4);
        let w = random_groups(&mut rng, 3, 4);
        let zero = Tangent::zeros_like(&w);
        assert_eq!(retract(&w, &zero).unwrap(), w);
        // Difference quotient recovers Ξ. Dyadic t and entries keep it exact.
        let xi = Tangent::new(
            (0..3)
                .map(|_| (0..4).map(|_| (rng.below(64) as f64 - 32.0) / 8.0).collect())
                .collect(),
        );
        let wd: Vec<Vector> = (0..3)
            .map(|_| (0..4).map(|_| (rng.below(64) as f64 - 32.0) / 4.0).collect())
            .collect();
        for t in [0.5f64.powi(7), 0.5f64.powi(10), 0.5f64.powi(13)] {
            let moved = retract(&wd, &xi.scaled(t)).unwrap();
            for ((m, w0), x) in moved.iter().zip(&wd).zip(&xi.components) {
                for ((a, b), c) in m.iter().zip(w0.iter()).zip(x.iter()) {
                    assert_eq!((a - b) / t, *c);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let w = vec![Vector::new(vec![1.0, 2.0])];
        let bad = Tangent::new(vec![Vector::new(vec![1.0])]);
        assert!(matches!(retract(&w, &bad), Err(Error::Dimension { .. })));
        assert!(metric_inner(&w, &bad, &bad).is_err());
    }
}
