//! Start a blobs classifier from a badly unbalanced but functionally
//! identical initialization and compare PSI-SGD with plain SGD.
//!
//! ```text
//! cargo run --release --example unbalanced_init -- [epochs] [replicates]
//! ```

use psi_manifold::experiments::unbalanced_convergence;
use psi_manifold::OptKind;

fn main() -> psi_manifold::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse().ok());
    let epochs = args.next().flatten().unwrap_or(50);
    let reps = args.next().flatten().unwrap_or(5) as u64;
    for kind in [OptKind::PsiSgd, OptKind::Sgd] {
        let s = unbalanced_convergence(kind, reps, epochs as usize)?;
        let each: Vec<String> = s.final_loss.iter().map(|l| format!("{l:.4}")).collect();
        println!("{:<8} median loss {:.4}   [{}]", kind.name(), s.median_loss(), each.join(", "));
    }
    Ok(())
}
