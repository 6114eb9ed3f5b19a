//! The quotient metric, Riemannian gradient and retraction on a small
//! network: the metric dual of the Riemannian gradient reproduces the
//! Euclidean directional derivative, and a Riemannian gradient step is the
//! Euclidean step with per-row rate `η ‖wⁱ‖²`.
//!
//! ```text
//! cargo run --release --example manifold_geometry
//! ```

use psi_manifold::manifold::{metric_inner, retract, riemannian_grad};
use psi_manifold::network;
use psi_manifold::optim::psi_group_rates;
use psi_manifold::verify::Fixture;
use psi_manifold::{Rng, Tangent};

fn main() -> psi_manifold::Result<()> {
    let fx = Fixture::toy(2, 64, 0.0)?;
    let w = fx.net.psi_weights();
    let (_, g) = network::loss_and_grad(&fx.net, &fx.data)?;
    let rg = riemannian_grad(&w, &g)?;

    let mut rng = Rng::new(0x5eed);
    let xi = Tangent::new(
        w.iter()
            .map(|wi| (0..wi.len()).map(|_| rng.standard_normal()).collect())
            .collect(),
    );
    let lhs = metric_inner(&w, &rg, &xi)?;
    let rhs = Tangent::new(g.psi_grads.clone()).euclidean_inner(&xi)?;
    println!("<grad L, xi>_W = {lhs:.12e}");
    println!("<dL, xi>       = {rhs:.12e}");

    let eta = 0.5;
    let moved = retract(&w, &rg.scaled(-eta))?;
    let rates = psi_group_rates(&fx.net, eta)?;
    let worst = moved
        .iter()
        .zip(&w)
        .zip(&g.psi_grads)
        .zip(&rates)
        .flat_map(|(((m, w0), gi), &lr)| {
            m.iter()
                .zip(w0.iter())
                .zip(gi.iter())
                .map(move |((a, b), c)| (a - (b - lr * c)).abs())
        })
        .fold(0.0, f64::max);
    println!("retracted step vs Euclidean step with rate eta*|w|^2: max diff {worst:e}");

    let norms = fx.net.group_norms();
    let (lo, hi) = norms.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    println!("row norms in [{lo:.3}, {hi:.3}], so per-row rates span [{:.3}, {:.3}]", eta * lo * lo, eta * hi * hi);
    Ok(())
}
