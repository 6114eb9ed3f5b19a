//! Final full-dataset gradient norm after 100 epochs on the toy regression
//! problem, five replicates per optimizer, reference hyperparameters.
//!
//! ```text
//! cargo run --release --example toy_convergence -- [epochs] [replicates]
//! ```

use psi_manifold::experiments::toy_convergence;
use psi_manifold::OptKind;

fn main() -> psi_manifold::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse().ok());
    let epochs = args.next().flatten().unwrap_or(100);
    let reps = args.next().flatten().unwrap_or(5) as u64;
    println!("{:<10} {:>12} {:>12}   per-replicate grad norm", "optimizer", "median |dL|", "median loss");
    for kind in [OptKind::PsiSgd, OptKind::Sgd, OptKind::PsiSgdm, OptKind::Sgdm, OptKind::Adam] {
        let s = toy_convergence(kind, reps, epochs as usize)?;
        let each: Vec<String> = s.final_grad_norm.iter().map(|g| format!("{g:.3}")).collect();
        println!(
            "{:<10} {:>12.4} {:>12.4}   {}",
            kind.name(),
            s.median_grad_norm(),
            s.median_loss(),
            each.join(" ")
        );
    }
    Ok(())
}
