use uda_core::data::{make_moons, rotate_points};
use uda_core::trainers::proxy_a_distance;
use uda_core::Tensor;

fn moons(seed: u64) -> Tensor {
    make_moons(200, 0.1, seed).unwrap().x().clone()
}

fn mean_over_seeds(f: impl Fn(u64) -> f64) -> f64 {
    (0..10).map(&f).sum::<f64>() / 10.0
}

#[test]
fn identical_samples_are_indistinguishable() {
    let same = mean_over_seeds(|s| {
        let x = moons(100 + s);
        proxy_a_distance(&x, &x, s).unwrap()
    });
    assert!(same <= 0.3, "{same}");
    let same_distribution = mean_over_seeds(|s| proxy_a_distance(&moons(100 + s), &moons(200 + s), s).unwrap());
    assert!(same_distribution <= 0.3, "{same_distribution}");
}

#[test]
fn far_apart_clusters_are_nearly_maximal() {
    let shift = Tensor::from_rows(&[[10.0, 0.0]]).unwrap();
    for s in 0..5 {
        let a = moons(s);
        let b = moons(50 + s).add_row(&shift).unwrap();
        let d = proxy_a_distance(&a, &b, s).unwrap();
        assert!(d >= 1.7, "seed {s}: {d}");
        assert!(d <= 2.0);
    }
}

#[test]
fn larger_rotation_is_farther() {
    let at = |deg: f64| mean_over_seeds(|s| proxy_a_distance(&moons(s), &rotate_points(&moons(20 + s), deg).unwrap(), s).unwrap());
    let (d30, d60) = (at(30.0), at(60.0));
    assert!(d60 > d30, "30: {d30}, 60: {d60}");
}

#[test]
fn fixed_seed_is_reproducible_and_inputs_are_checked() {
    let (a, b) = (moons(1), rotate_points(&moons(2), 45.0).unwrap());
    assert_eq!(proxy_a_distance(&a, &b, 4).unwrap(), proxy_a_distance(&a, &b, 4).unwrap());
    let tiny = Tensor::zeros(3, 2);
    assert!(proxy_a_distance(&tiny, &b, 0).is_err());
    assert!(proxy_a_distance(&a, &Tensor::zeros(10, 3), 0).is_err());
}
