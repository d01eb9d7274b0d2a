use fedsim::adapters::{
    build_payloads, dequantize, lora_aggregate, lora_apply, merge_adapters, payload_norm, quantize,
    LoraAdapter, PayloadConfig,
};
use fedsim::federation::Weighted;
use fedsim::model::{forward, ModelSpec};
use fedsim::rng::SimRng;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

#[test]
fn quantization_error_is_bounded_on_random_tensors() {
    let mut rng = SimRng::seed_from_u64(1);
    for _ in 0..10_000 {
        let n = rng.random_range(1..64);
        let scale: f64 = 10f64.powf(rng.random_range(-4.0..4.0));
        let v: Vec<f64> = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let absmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let q = quantize(&v, vec![n], 4).unwrap();
        assert!(q.codes.iter().all(|c| (-7..=7).contains(c)));
        for (x, y) in v.iter().zip(dequantize(&q)) {
            assert!((x - y).abs() <= absmax / 14.0 * (1.0 + 1e-12), "{x} vs {y}");
        }
    }
}

#[test]
fn zero_initialized_adapter_preserves_model_outputs() {
    let spec = ModelSpec::mlp(6, vec![8, 5], 3);
    let mut rng = SimRng::seed_from_u64(2);
    let base = spec.init::<f64, _>(&mut rng).unwrap();
    let adapters = vec![
        LoraAdapter::init_for(&base, "hidden0.weight", 4, 8.0, 0.5, &mut rng).unwrap(),
        LoraAdapter::init_for(&base, "hidden1.weight", 2, 32.0, 0.5, &mut rng).unwrap(),
    ];
    let merged = merge_adapters(&base, &adapters).unwrap();
    assert_eq!(merged, base);
    for _ in 0..50 {
        let x: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(
            forward(&spec, &merged, &x).unwrap(),
            forward(&spec, &base, &x).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn payloads_respect_the_clip_bound(
        d_in in 1usize..10,
        d_out in 1usize..10,
        rank in 1usize..5,
        magnitude in 1e-3f64..1e3,
        clip in 0.01f64..10.0,
        bits in prop::sample::select(vec![4u32, 8, 16, 32]),
        seed in any::<u64>(),
    ) {
        let mut rng = SimRng::seed_from_u64(seed);
        let global = LoraAdapter::<f64>::init("w", d_in, d_out, rank, 16.0, 0.1, &mut rng).unwrap();
        let a: Vec<f64> = global.a().iter().map(|v| v + magnitude * rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..d_out * rank).map(|_| magnitude * rng.sample::<f64, _>(StandardNormal)).collect();
        let local = LoraAdapter::new("w", d_in, d_out, rank, 16.0, a, b).unwrap();
        let cfg = PayloadConfig { bits, clip_norm: clip, noise_multiplier: 0.0 };
        let payloads = build_payloads(&[local], &[global], &cfg, &mut rng).unwrap();
        prop_assert!(payload_norm(&payloads) <= clip * (1.0 + 1e-9));
    }
}

#[test]
fn averaging_factors_differs_from_averaging_products() {
    let a1 = LoraAdapter::new("w", 1, 1, 1, 1.0, vec![1.0], vec![1.0]).unwrap();
    let a2 = LoraAdapter::new("w", 1, 1, 1, 1.0, vec![-1.0], vec![-1.0]).unwrap();
    // each client's effective update B A is +1, so their mean is +1
    let mean_of_products = (a1.delta_weight()[0] + a2.delta_weight()[0]) / 2.0;
    assert_eq!(mean_of_products, 1.0);
    let avg = lora_aggregate(&[Weighted::new(0, a1, 1), Weighted::new(1, a2, 1)]).unwrap();
    // the averaged factors are both zero, so their product is zero
    assert_eq!(avg.delta_weight()[0], 0.0);
    assert_eq!(lora_apply(&[0.0], &avg).unwrap(), vec![0.0]);
}
