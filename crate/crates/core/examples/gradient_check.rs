//! Analytic gradients of the toy network against double-double central
//! differences, then the same comparison with a sign flipped in the
//! batch-norm backward pass.
//!
//! ```text
//! cargo run --release --example gradient_check -- [seed]
//! ```

use psi_manifold::verify::check_gradient_fd;

fn main() -> psi_manifold::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for faulty in [false, true] {
        let r = check_gradient_fd(seed, faulty)?;
        println!(
            "{:<22} worst relative error {:.3e} (tolerance {:.0e}): {}",
            if faulty { "with injected BN bug" } else { "clean backward pass" },
            r.observed,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    Ok(())
}
