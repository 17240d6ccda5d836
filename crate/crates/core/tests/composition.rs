use compt_core::compose::compose;
use compt_core::rng::{normal_vec, stream};
use compt_core::{CompositionMethod, Tensor};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "composition-test", &[]);
    Tensor::matrix(rows, cols, normal_vec(&mut rng, rows * cols, 1.0)).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn ssum_with_zero_sources_returns_the_private_prompt() {
    let private = random(5, 4, 1);
    let zeros = vec![Tensor::zeros(&[5, 4]); 3];
    let out = compose(CompositionMethod::Ssum, &private, &zeros, &[0.2, 0.3, 0.5]).unwrap();
    assert!(max_diff(&out, &private) <= TOL);
}

#[test]
fn msum_with_unit_sources_returns_the_private_prompt() {
    let private = random(5, 4, 2);
    let ones = vec![Tensor::ones(&[5, 4]); 3];
    let out = compose(CompositionMethod::Msum, &private, &ones, &[0.1, 0.6, 0.3]).unwrap();
    assert!(max_diff(&out, &private) <= TOL);
}

#[test]
fn mcat_stacks_weighted_sources_under_the_private_mask() {
    let (m, l, d) = (3, 2, 4);
    let private = random(m * l, d, 3);
    let sources: Vec<Tensor> = (0..m).map(|j| random(l, d, 10 + j as u64)).collect();
    let w = [0.5, 0.2, 0.3];
    let out = compose(CompositionMethod::Mcat, &private, &sources, &w).unwrap();
    assert_eq!(out.shape(), [m * l, d]);
    for j in 0..m {
        for r in 0..l {
            for c in 0..d {
                let expected = private.at(j * l + r, c) * w[j] * sources[j].at(r, c);
                assert!((out.at(j * l + r, c) - expected).abs() <= TOL);
            }
        }
    }
}

#[test]
fn pt_ignores_sources_and_weights() {
    let private = random(4, 3, 4);
    let a = compose(CompositionMethod::Pt, &private, &[random(4, 3, 5)], &[1.0]).unwrap();
    let b = compose(CompositionMethod::Pt, &private, &[], &[]).unwrap();
    assert_eq!(a, private);
    assert_eq!(b, private);
}

#[test]
fn weights_off_the_simplex_are_rejected() {
    let private = random(2, 2, 6);
    let sources = vec![random(2, 2, 7), random(2, 2, 8)];
    assert!(compose(CompositionMethod::Ssum, &private, &sources, &[0.7, 0.7]).is_err());
    assert!(compose(CompositionMethod::Ssum, &private, &sources, &[1.2, -0.2]).is_err());
    assert!(compose(CompositionMethod::Ssum, &private, &sources, &[1.0]).is_err());
}

fn simplex(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sums_are_equivariant_under_source_permutation(
        seed in 0u64..1000,
        raw in prop::collection::vec(0.05f64..1.0, 4),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let w = simplex(&raw);
        let private = random(3, 5, seed);
        let sources: Vec<Tensor> = (0..4).map(|j| random(3, 5, seed + 100 + j as u64)).collect();
        let ps: Vec<Tensor> = perm.iter().map(|&j| sources[j].clone()).collect();
        let pw: Vec<f64> = perm.iter().map(|&j| w[j]).collect();
        for method in [CompositionMethod::Ssum, CompositionMethod::Msum] {
            let a = compose(method, &private, &sources, &w).unwrap();
            let b = compose(method, &private, &ps, &pw).unwrap();
            prop_assert!(max_diff(&a, &b) <= TOL);
        }
    }

    #[test]
    fn mcat_permutes_its_blocks_with_the_sources(
        seed in 0u64..1000,
        raw in prop::collection::vec(0.05f64..1.0, 3),
        perm in Just((0..3).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (l, d) = (2, 3);
        let w = simplex(&raw);
        let private = random(3 * l, d, seed);
        let sources: Vec<Tensor> = (0..3).map(|j| random(l, d, seed + 50 + j as u64)).collect();
        let block = |t: &Tensor, j: usize| t.to_rows()[j * l..(j + 1) * l].to_vec();
        let permuted_private = Tensor::from_rows(
            &perm.iter().flat_map(|&j| block(&private, j)).collect::<Vec<_>>(),
        ).unwrap();
        let ps: Vec<Tensor> = perm.iter().map(|&j| sources[j].clone()).collect();
        let pw: Vec<f64> = perm.iter().map(|&j| w[j]).collect();
        let a = compose(CompositionMethod::Mcat, &private, &sources, &w).unwrap();
        let b = compose(CompositionMethod::Mcat, &permuted_private, &ps, &pw).unwrap();
        let expected = Tensor::from_rows(&perm.iter().flat_map(|&j| block(&a, j)).collect::<Vec<_>>()).unwrap();
        prop_assert!(max_diff(&b, &expected) <= TOL);
    }
}
