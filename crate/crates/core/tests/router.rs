use compt_core::rng::{open_unit, stream};
use compt_core::router::{relaxed_bernoulli, TemperatureSchedule};
use compt_core::{RouterState, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn low_temperature_samples_follow_the_bernoulli_probability() {
    let draws = 10_000;
    for w in [-2.0, 0.0, 2.0] {
        let mut rng = stream(4, "router-mc", &[]);
        let above = (0..draws)
            .filter(|_| relaxed_bernoulli(&[w], &[open_unit(&mut rng)], 0.01).unwrap()[0] > 0.5)
            .count();
        let frac = above as f64 / draws as f64;
        assert!((frac - sigmoid(w)).abs() <= 0.02, "w={w}: {frac} vs {}", sigmoid(w));
    }
}

#[test]
fn sampled_weights_lie_on_the_simplex() {
    let mut router = RouterState::new(2, 3, 0.5);
    router.logits = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
    let w = router.sample_weights(0, &[0.2, 0.9, 0.5]).unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w.iter().all(|&x| x > 0.0));
    assert!(router.sample_weights(0, &[0.2, 1.0, 0.5]).is_err());
    assert!(router.sample_weights(0, &[0.2, 0.5]).is_err());
}

#[test]
fn inference_weights_are_a_deterministic_softmax() {
    let mut router = RouterState::new(1, 3, 1.0);
    router.logits = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let a = router.inference_weights(0);
    assert_eq!(a, router.inference_weights(0));
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((a[i] - x.exp() / z).abs() < 1e-15);
    }
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn anneal_runs_linearly_between_exact_endpoints() {
    let s = TemperatureSchedule::new(100);
    assert_eq!(s.anneal(0), 5.0);
    assert_eq!(s.anneal(100), 1e-3);
    assert_eq!(s.anneal(250), 1e-3);
    assert!((s.anneal(50) - (5.0 + 1e-3) / 2.0).abs() < 1e-12);
    let steps: Vec<f64> = (0..=100).map(|t| s.anneal(t)).collect();
    assert!(steps.windows(2).all(|p| p[1] < p[0]));
}
