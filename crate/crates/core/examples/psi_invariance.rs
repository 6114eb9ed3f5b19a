//! Rescaling the rows that feed batch norm leaves the loss alone and divides
//! each row's gradient by its factor.
//!
//! ```text
//! cargo run --release --example psi_invariance
//! ```

use psi_manifold::manifold::apply_rescale;
use psi_manifold::network;
use psi_manifold::verify::{random_rescale, Fixture};
use psi_manifold::Rng;

fn main() -> psi_manifold::Result<()> {
    // eps = 0 makes the invariance exact rather than approximate.
    let fx = Fixture::toy(1, 128, 0.0)?;
    let (base_loss, base_grad) = network::loss_and_grad(&fx.net, &fx.data)?;
    let mut rng = Rng::new(9);
    println!("loss at W: {base_loss:.15}");
    println!("{:>10} {:>10} {:>14} {:>14}", "min a", "max a", "loss rel diff", "grad mismatch");
    for _ in 0..8 {
        let a = random_rescale(&mut rng, fx.net.num_groups(), 3.0);
        let scaled = apply_rescale(&fx.net, &a)?;
        let (loss, grad) = network::loss_and_grad(&scaled, &fx.data)?;
        let mismatch = base_grad
            .psi_grads
            .iter()
            .zip(&grad.psi_grads)
            .zip(a.factors())
            .map(|((g, h), &ai)| {
                let d: f64 = g.iter().zip(h.iter()).map(|(x, y)| (x - ai * y).powi(2)).sum();
                d.sqrt() / g.norm2()
            })
            .fold(0.0, f64::max);
        let (lo, hi) = a
            .factors()
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
        println!(
            "{lo:>10.2e} {hi:>10.2e} {:>14.2e} {mismatch:>14.2e}",
            (loss - base_loss).abs() / base_loss
        );
    }
    Ok(())
}
