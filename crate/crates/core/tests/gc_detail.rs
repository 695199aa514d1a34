use shakelab_core::gradcheck::gradcheck;
use shakelab_core::{BackwardMode, ForwardMode, Level, ModelSpec, Network, RngStream, ShakeConfig, Tensor};

fn rand_images(n: usize, hw: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed);
    let numel = n * 3 * hw * hw;
    Tensor::from_vec(&[n, 3, hw, hw], (0..numel).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap()
}

#[test]
fn scan() {
    for seed in 1u64..=6 {
        let t0 = std::time::Instant::now();
        let spec = ModelSpec::shake_resnet(8, 4, ShakeConfig::even_even_batch());
        let mut net: Network<f64> = Network::build(spec, seed).unwrap();
        let images = rand_images(2, 8, seed + 100);
        let r1 = gradcheck(&mut net, &images, &[1, 7], 42, 1e-4).unwrap();

        let spec = ModelSpec::shake_resnet(8, 4,
            ShakeConfig::new(ForwardMode::Shake, BackwardMode::Keep, Level::Image));
        let mut net: Network<f64> = Network::build(spec, seed).unwrap();
        let r2 = gradcheck(&mut net, &images, &[0, 9], 42, 1e-4).unwrap();
        println!("seed {seed}: EEB {:.3e}  SK {:.3e}  ({:?})", r1.max_rel_err, r2.max_rel_err, t0.elapsed());
    }
}
