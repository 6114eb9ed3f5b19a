//! Two runs, one from `W₀` and one from a rescaled copy `T_a(W₀)`, fed the
//! same minibatches. PSI optimizers keep the second run equal to the first
//! one mapped by `T_a`; Euclidean SGD does not.
//!
//! ```text
//! cargo run --release --example equivariance_audit
//! ```

use psi_manifold::experiments::equivariance_audit;
use psi_manifold::verify::{random_rescale, Fixture};
use psi_manifold::{OptConfig, OptKind, Rng};

fn main() -> psi_manifold::Result<()> {
    let fx = Fixture::toy(5, 256, 0.0)?;
    let a = random_rescale(&mut Rng::new(11), fx.net.num_groups(), 3.0);
    println!("{:<10} {:>6} {:>14}", "optimizer", "steps", "max deviation");
    for kind in OptKind::ALL {
        let cfg = OptConfig::reference(kind, 0.01);
        let steps = if kind.is_full_batch() { 50 } else { 200 };
        let dev = equivariance_audit(&fx.net, &fx.data, &cfg, &a, steps, 32, 3)?;
        println!("{:<10} {steps:>6} {dev:>14.3e}", kind.name());
    }
    Ok(())
}
