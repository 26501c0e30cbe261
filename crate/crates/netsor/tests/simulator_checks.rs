//! Sampling-theory checks on the simulator: variance targets, CLT scalings,
//! and finite-width agreement with the kernel engine.

use nalgebra::DMatrix;
use netsor::arch::{self, ArchConfig, ArchKind, CnnGeometry, InputPayload};
use netsor::engine::{expectation, EngineOptions, ExpectOptions};
use netsor::lang::{parse_program, typecheck};
use netsor::nonlin::{apply, arg, Prim, ScalarExpr};
use netsor::sim;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp_b11() -> (netsor::lang::TypedProgram, netsor::engine::SamplingSpec) {
    let src = "\
Input W1x :: G(n)
Input b1 :: G(n)
Input W2 :: A(n, n)
Input b2 :: G(n)
Input v :: G(n)
h1 := W1x + b1 :: G(n)
x1 := relu(h1) :: H(n)
ht2 := MatMul(W2, x1) :: G(n)
h2 := ht2 + b2 :: G(n)
x2 := relu(h2) :: H(n)
Output v * x2
";
    let tp = typecheck(&parse_program(src).unwrap()).unwrap();
    let mut spec = netsor::engine::SamplingSpec::default();
    spec.avar_variance.insert("W2".into(), 1.0);
    spec.set_sigma_in("W1x", "W1x", 1.0);
    spec.set_sigma_in("b1", "b1", 1.0);
    spec.set_sigma_in("b2", "b2", 1.0);
    spec.sigma_v.insert("v".into(), 1.0);
    (tp, spec)
}

#[test]
fn mlp_output_variance_concentrates_at_unity() {
    // the worked example's K = 1, checked by sampling
    let (tp, spec) = mlp_b11();
    let seeds = 300;
    let (cov, se) = sim::empirical_kernel(&tp, &spec, 2048, seeds, 41).unwrap();
    assert!(
        (cov[(0, 0)] - 1.0).abs() <= 3.0 * se[(0, 0)],
        "var {} +- {}",
        cov[(0, 0)],
        se[(0, 0)]
    );
}

#[test]
fn doubling_seeds_halves_standard_error() {
    let (tp, spec) = mlp_b11();
    let (_c1, se1) = sim::empirical_kernel(&tp, &spec, 256, 200, 7).unwrap();
    let (_c2, se2) = sim::empirical_kernel(&tp, &spec, 256, 400, 7).unwrap();
    let ratio = se2[(0, 0)] / se1[(0, 0)];
    let expected = (0.5_f64).sqrt();
    assert!(
        (ratio - expected).abs() / expected < 0.3,
        "se ratio {ratio} vs sqrt(1/2)"
    );
}

#[test]
fn empirical_moment_std_shrinks_with_width() {
    // std across seeds at width 2n is at most 0.8x the std at width n,
    // over five octaves
    let (tp, spec) = mlp_b11();
    let psi = netsor::nonlin::NonlinSpec::new(
        "relu_sq",
        1,
        0,
        ScalarExpr::Prod(vec![apply(Prim::Relu, arg(0)), apply(Prim::Relu, arg(0))]),
    );
    let seeds = 100;
    let mut prev_std: Option<f64> = None;
    for p in 5..=10 {
        let width = 1 << p;
        let vals: Vec<f64> = (0..seeds)
            .map(|s| {
                sim::empirical_moment(&tp, &spec, width, 9000 + s, &psi, &["h2"]).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / seeds as f64;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (seeds - 1) as f64)
            .sqrt();
        if let Some(prev) = prev_std {
            assert!(std <= 0.8 * prev, "width {width}: std {std} vs prev {prev}");
        }
        prev_std = Some(std);
    }
}

#[test]
fn empirical_moment_matches_gaussian_expectation() {
    // product of the two layer nonlinearities, against the engine's
    // expectation under the limit (mu, Sigma)
    let (tp, spec) = mlp_b11();
    let kt = netsor::engine::compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
    let i1 = kt.gvar_index("h1").unwrap();
    let i2 = kt.gvar_index("h2").unwrap();
    let coords = [i1.min(i2), i1.max(i2)];
    let mu = nalgebra::DVector::from_iterator(2, coords.iter().map(|&i| kt.mu[i]));
    let sg = DMatrix::from_fn(2, 2, |r, c| kt.sigma[(coords[r], coords[c])]);
    let exact = expectation(
        &[apply(Prim::Relu, arg(0)), apply(Prim::Relu, arg(1))],
        &mu,
        &sg,
        &ExpectOptions::default(),
    )
    .unwrap()
    .value;

    let psi = netsor::nonlin::NonlinSpec::new(
        "relu_prod",
        2,
        0,
        ScalarExpr::Prod(vec![apply(Prim::Relu, arg(0)), apply(Prim::Relu, arg(1))]),
    );
    let width = 1 << 13;
    let seeds = 24;
    let vals: Vec<f64> = (0..seeds)
        .map(|s| sim::empirical_moment(&tp, &spec, width, 500 + s, &psi, &["h1", "h2"]).unwrap())
        .collect();
    let mean = vals.iter().sum::<f64>() / seeds as f64;
    let se = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / ((seeds - 1) * seeds) as f64)
        .sqrt();
    assert!(
        (mean - exact).abs() <= 3.0 * se,
        "moment {mean} vs expectation {exact} (se {se:.2e})"
    );
}

#[test]
fn gru_convergence_slope() {
    // single 3-token sequence, erf gating: the feature kernel converges at
    // the square-root rate
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let seq: Vec<Vec<f64>> =
        (0..3).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let cfg = ArchConfig {
        kind: ArchKind::Gru,
        depth: 1,
        nonlin: "erf".into(),
        sigma_w: 0.9,
        sigma_u: 1.0,
        sigma_b: 0.1,
        sigma_v: 1.0,
        payload: InputPayload::Sequences(vec![seq]),
    };
    let built = arch::build(&cfg).unwrap();
    let theory = arch::arch_kernel(&cfg, &EngineOptions::default()).unwrap();
    let widths: Vec<usize> = (6..=11).map(|p| 1 << p).collect();
    let report =
        sim::convergence_study(&built.typed, &built.sampling, &widths, 100, &theory.k, 15838)
            .unwrap();
    assert!(
        (report.slope - (-0.5)).abs() <= 0.15,
        "gru slope {:.3} (ci {:.3})",
        report.slope,
        report.slope_ci
    );
}

#[test]
fn cnn_finite_width_simulation_agrees() {
    // two random 4x4 single-channel images, depth 2: theory within three
    // standard errors of the width-4096 feature kernel
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let geometry = CnnGeometry::square_same(4, 2, 2);
    let images: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| (0..16).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect())
        .collect();
    let cfg = ArchConfig {
        kind: ArchKind::Cnn,
        depth: 2,
        nonlin: "relu".into(),
        sigma_w: 1.0,
        sigma_u: 1.0,
        sigma_b: 0.0,
        sigma_v: 1.0,
        payload: InputPayload::Images { images, geometry },
    };
    let built = arch::build(&cfg).unwrap();
    let theory = arch::arch_kernel(&cfg, &EngineOptions::default()).unwrap();
    let width = 1 << 12;
    let seeds = 8;
    let samples: Vec<DMatrix<f64>> = (0..seeds)
        .map(|s| sim::feature_kernel(&built.typed, &built.sampling, width, 300 + s).unwrap())
        .collect();
    let mut mean = DMatrix::zeros(2, 2);
    for k in &samples {
        mean += k;
    }
    mean /= seeds as f64;
    for i in 0..2 {
        for j in 0..2 {
            let var: f64 = samples
                .iter()
                .map(|k| (k[(i, j)] - mean[(i, j)]).powi(2))
                .sum::<f64>()
                / ((seeds - 1) * seeds) as f64;
            let se = var.sqrt();
            assert!(
                (mean[(i, j)] - theory.k[(i, j)]).abs() <= 3.0 * se.max(1e-4),
                "entry ({i},{j}): sim {} vs theory {} (se {se:.2e})",
                mean[(i, j)],
                theory.k[(i, j)]
            );
        }
    }
}

#[test]
fn gru_and_transformer_relabeling_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let s1: Vec<Vec<f64>> =
        (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let s2: Vec<Vec<f64>> =
        (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let opts = EngineOptions::default();

    let gru = |seqs: Vec<Vec<Vec<f64>>>| ArchConfig {
        kind: ArchKind::Gru,
        depth: 1,
        nonlin: "erf".into(),
        sigma_w: 0.9,
        sigma_u: 1.0,
        sigma_b: 0.1,
        sigma_v: 1.0,
        payload: InputPayload::Sequences(seqs),
    };
    let k12 = arch::gru_kernel(&gru(vec![s1.clone(), s2.clone()]), &opts).unwrap();
    let k21 = arch::gru_kernel(&gru(vec![s2.clone(), s1.clone()]), &opts).unwrap();
    let perm = [2usize, 3, 0, 1];
    for i in 0..4 {
        for j in 0..4 {
            assert!(
                (k12.k[(i, j)] - k21.k[(perm[i], perm[j])]).abs() < 1e-9,
                "gru ({i},{j})"
            );
        }
    }

    let trf = |seqs: Vec<Vec<Vec<f64>>>| ArchConfig {
        kind: ArchKind::Transformer,
        depth: 1,
        nonlin: "relu".into(),
        sigma_w: 1.0,
        sigma_u: 0.9,
        sigma_b: 0.1,
        sigma_v: 1.0,
        payload: InputPayload::Sequences(seqs),
    };
    let t12 = arch::transformer_kernel(&trf(vec![s1.clone(), s2.clone()])).unwrap();
    let t21 = arch::transformer_kernel(&trf(vec![s2, s1])).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!(
                (t12.k[(i, j)] - t21.k[(perm[i], perm[j])]).abs() < 1e-12,
                "transformer ({i},{j})"
            );
        }
    }
}
