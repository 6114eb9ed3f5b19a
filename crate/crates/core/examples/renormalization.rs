//! Long PSI-SGD runs push row norms up until they cross the overflow
//! threshold and get renormalized. The loss does not notice.
//!
//! ```text
//! cargo run --release --example renormalization
//! ```

use psi_manifold::experiments::{gen_toy_regression, run_training, toy_replicate, TrainOptions};
use psi_manifold::{BnMlp, OptConfig, OptKind, Rng};

fn main() -> psi_manifold::Result<()> {
    let spec = toy_replicate(0);
    let (data, _) = gen_toy_regression(&spec);
    let mut net = BnMlp::init(&spec.arch(0.0), &mut Rng::new(spec.init_seed))?;
    let cfg = OptConfig {
        renorm_threshold: 100.0,
        ..OptConfig::reference(OptKind::PsiSgd, 0.01)
    };
    let recs = run_training(&mut net, &data, &cfg, &TrainOptions::new(20, 32, 32, 1))?;
    println!("{:>5} {:>10} {:>10} {:>10} {:>8}", "step", "loss", "min |w|", "max |w|", "renorms");
    for r in &recs {
        println!(
            "{:>5} {:>10.5} {:>10.3} {:>10.3} {:>8}",
            r.step,
            r.loss,
            r.norm_min(),
            r.norm_max(),
            r.renorm_events
        );
    }
    Ok(())
}
