use shakelab_core::gradcheck::gradcheck;
use shakelab_core::{BackwardMode, ForwardMode, Level, ModelSpec, Network, RngStream, ShakeConfig, Tensor};

fn rand_images(n: usize, hw: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed);
    let numel = n * 3 * hw * hw;
    Tensor::from_vec(&[n, 3, hw, hw], (0..numel).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap()
}

#[test]
fn probe_eeb() {
    let t0 = std::time::Instant::now();
    let spec = ModelSpec::shake_resnet(8, 4, ShakeConfig::even_even_batch());
    let mut net: Network<f64> = Network::build(spec, 3).unwrap();
    let images = rand_images(2, 8, 10);
    let report = gradcheck(&mut net, &images, &[1, 7], 42, 1e-4).unwrap();
    println!("E-E-B max rel err {:.3e} over {} params in {:?}", report.max_rel_err, net.count_params(), t0.elapsed());
    for e in report.entries.iter().filter(|e| e.max_rel_err > 1e-5) {
        println!("  {}: {:.3e}", e.name, e.max_rel_err);
    }
    assert!(report.passed());
}

#[test]
fn probe_keep() {
    let t0 = std::time::Instant::now();
    let spec = ModelSpec::shake_resnet(8, 4,
        ShakeConfig::new(ForwardMode::Shake, BackwardMode::Keep, Level::Image));
    let mut net: Network<f64> = Network::build(spec, 4).unwrap();
    let images = rand_images(2, 8, 11);
    let report = gradcheck(&mut net, &images, &[0, 9], 43, 1e-4).unwrap();
    println!("S-K-I max rel err {:.3e} in {:?}", report.max_rel_err, t0.elapsed());
    assert!(report.passed());
}
