use psi_manifold::network;
use psi_manifold::verify::Fixture;

// Loss of the seed-0 toy network (batch 32, eps 1e-5), recorded once and
// confirmed against a separate numpy forward pass.
#[test]
fn seed0_toy_loss_matches_recorded_value() {
    let golden: f64 = include_str!("data/toy_loss_seed0.txt").trim().parse().unwrap();
    let fx = Fixture::toy(0, 32, 1e-5).unwrap();
    let l = network::loss(&fx.net, &fx.data).unwrap();
    assert!((l - golden).abs() <= 1e-13 * golden, "{l:e} vs {golden:e}");
}
