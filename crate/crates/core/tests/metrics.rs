use dgmlab_core::data::make_checkerboard_target;
use dgmlab_core::metrics::{
    detection_probability, frechet_proxy, mean_sq, slerp, DetectionProbe, Embedding,
};
use dgmlab_core::models::{Gate, GeneratorModel, MultiplexerModel};
use dgmlab_core::rng;
use dgmlab_core::tensor::Tensor;

/// Column means and total variance, computed directly.
fn mean_and_trace(rows: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let trace = (0..d)
        .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0))
        .sum();
    (mean, trace)
}

#[test]
fn frechet_of_scaled_copy_matches_closed_form() {
    // b = 2a + c has covariance 4A, so the trace term is tr(A)(1 - 2)^2.
    let mut r = rng::stream(11, "test/frechet");
    let a: Vec<Vec<f64>> = (0..500).map(|_| rng::normal_vec(&mut r, 3)).collect();
    let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| 2.0 * x + 0.7).collect()).collect();
    let (ma, ta) = mean_and_trace(&a);
    let (mb, _) = mean_and_trace(&b);
    let oracle = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() + ta;
    let got = frechet_proxy(&Tensor::from_rows(&a).unwrap(), &Tensor::from_rows(&b).unwrap(), &Embedding::Identity)
        .unwrap()
        .distance;
    assert!((got - oracle).abs() < 1e-8 * oracle, "{got} vs {oracle}");
}

#[test]
fn slerp_keeps_endpoints_and_interpolates_norm() {
    let a = vec![3.0, 0.0, 0.0];
    let b = vec![0.0, 0.0, 1.0];
    let s0 = slerp(&a, &b, 0.0).unwrap();
    let s1 = slerp(&a, &b, 1.0).unwrap();
    assert!(mean_sq(&s0, &a) < 1e-24 && mean_sq(&s1, &b) < 1e-24);
    let mid = slerp(&a, &b, 0.5).unwrap();
    let norm = mid.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 2.0).abs() < 1e-12);
    assert!((mid[0] - mid[2]).abs() < 1e-12);
}

#[test]
fn orthant_spill_rate_matches_its_probability() {
    // d = 8 keeps the test fast: 2^-8 at M = 2e5 is ~780 hits.
    let x = make_checkerboard_target(8).unwrap().image;
    let base = vec![-1.0; 64];
    let spill = MultiplexerModel::new(
        GeneratorModel::constant(8, &base),
        GeneratorModel::constant(8, &x),
        Gate::PositiveOrthant,
    )
    .unwrap();
    let m = 200_000;
    let probe = DetectionProbe { separation: 1.0, samples: m, reference: vec![base] };
    let est = detection_probability(&spill, &probe, 5).unwrap();
    let p = 2f64.powi(-8);
    let sigma = (p * (1.0 - p) / m as f64).sqrt();
    assert!((est.estimate - p).abs() < 3.0 * sigma, "{} vs {p}", est.estimate);
    assert!(est.lower <= p && p <= est.upper);
}
