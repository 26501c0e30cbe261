//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! with its runtime (visible under `--nocapture`) and asserting both the
//! numeric tolerances and the runtime budget.
//!
//! Run with:
//!   cargo test -p netsor-cli --test acceptance -- --test-threads=1 --nocapture

use nalgebra::{DMatrix, DVector};
use netsor::arch::{self, ArchConfig, ArchKind, CnnGeometry, InputPayload};
use netsor::engine::{
    compute_mu_sigma, expectation, output_kernel, EngineOptions, ExpectOptions, ForcePath,
};
use netsor::lang::{parse_program, typecheck};
use netsor::nonlin::{apply, arg, Prim};
use netsor::sim;
use netsor::vtransform::{batchnorm_v_cross, batchnorm_v_single, v_transform_closed, ClosedKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

struct Criterion {
    name: &'static str,
    budget: Duration,
    start: Instant,
}

impl Criterion {
    fn new(name: &'static str, budget_secs: u64) -> Self {
        Criterion { name, budget: Duration::from_secs(budget_secs), start: Instant::now() }
    }

    fn finish(self) {
        let elapsed = self.start.elapsed();
        println!(
            "criterion {}: PASS in {:.2}s (budget {}s)",
            self.name,
            elapsed.as_secs_f64(),
            self.budget.as_secs()
        );
        assert!(
            elapsed <= self.budget,
            "criterion {} exceeded its runtime budget: {:.1}s > {}s",
            self.name,
            elapsed.as_secs_f64(),
            self.budget.as_secs()
        );
    }
}

fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let num = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn random_psd2(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose()
}

fn random_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn generic_kernel_of(cfg: &ArchConfig, opts: &EngineOptions) -> DMatrix<f64> {
    let built = arch::build(cfg).expect("build");
    let unwound = netsor::lang::unwind(&built.typed).expect("unwind");
    let kt = compute_mu_sigma(&unwound, &built.sampling, opts).expect("mu sigma");
    output_kernel(&kt, &unwound, &built.sigma_v, opts).expect("output kernel").k
}

const MLP_B11: &str = "\
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

const MLP_B11_SAMPLING: &str = r#"{
  "avar_variance": { "W2": 1.0 },
  "sigma_in": [["W1x", "W1x", 1.0], ["b1", "b1", 1.0], ["b2", "b2", 1.0]],
  "sigma_v": { "v": 1.0 }
}"#;

/// Criterion 1: the worked two-layer MLP example is reproduced exactly by
/// the kernel command.
#[test]
fn c1_worked_example_exactness() {
    let c = Criterion::new("1 (worked-example exactness)", 1);
    let dir = tempfile::tempdir().unwrap();
    let prog = dir.path().join("mlp.netsor");
    let samp = dir.path().join("sampling.json");
    std::fs::write(&prog, MLP_B11).unwrap();
    std::fs::write(&samp, MLP_B11_SAMPLING).unwrap();
    let out = dir.path().join("run");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_netsor"))
        .args(["kernel"])
        .arg(&prog)
        .arg("--sampling")
        .arg(&samp)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let table: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run.kernel_table.json")).unwrap(),
    )
    .unwrap();
    let gvars: Vec<String> = table["gvars"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let n = gvars.len();
    let sigma = table["sigma_row_major"].as_array().unwrap();
    let at = |a: &str, b: &str| {
        let i = gvars.iter().position(|g| g == a).unwrap();
        let j = gvars.iter().position(|g| g == b).unwrap();
        sigma[i * n + j].as_f64().unwrap()
    };
    for m in table["mu"].as_array().unwrap() {
        assert_eq!(m.as_f64().unwrap(), 0.0);
    }
    assert!((at("h1", "h1") - 2.0).abs() <= 1e-12);
    assert!((at("ht2", "ht2") - 1.0).abs() <= 1e-12);
    assert!((at("h2", "h2") - 2.0).abs() <= 1e-12);
    assert!(at("h2", "h1").abs() <= 1e-12);
    let ok: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run.output_kernel.json")).unwrap(),
    )
    .unwrap();
    let k = ok["k_row_major"][0].as_f64().unwrap();
    assert!((k - 1.0).abs() <= 1e-12, "K = {k}");
    c.finish();
}

/// Criterion 2: closed-form V-transforms agree with the forced-quadrature
/// dispatch of the generic Gaussian expectation within 1e-6 absolute on 100
/// random PSD 2x2 matrices.
#[test]
fn c2_closed_form_vs_quadrature() {
    let c = Criterion::new("2 (closed form vs quadrature)", 30);
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let quad_opts = ExpectOptions { force: ForcePath::Quadrature, ..Default::default() };
    let mu = DVector::zeros(2);
    for trial in 0..100 {
        let k = random_psd2(&mut rng);
        for kind in [ClosedKind::Relu, ClosedKind::Erf, ClosedKind::Exp { sigma: 1.0 }] {
            let closed = v_transform_closed(kind, &k).unwrap();
            let prim = match kind {
                ClosedKind::Relu => Prim::Relu,
                ClosedKind::Erf => Prim::Erf,
                ClosedKind::Exp { .. } => Prim::Exp { sigma: 1.0 },
                _ => unreachable!(),
            };
            let quad = expectation(
                &[apply(prim, arg(0)), apply(prim, arg(1))],
                &mu,
                &k,
                &quad_opts,
            )
            .unwrap();
            let diff = (quad.value - closed[(0, 1)]).abs();
            assert!(
                diff <= 1e-6,
                "trial {trial} {kind:?}: quadrature {} vs closed {} (diff {diff:.2e})",
                quad.value,
                closed[(0, 1)]
            );
        }
    }
    c.finish();
}

/// Criterion 3: specialized kernels match the generic engine on built
/// programs for every architecture, 10 random small configs each, within
/// 1e-6 (closed-form paths) or 2e-2 (quadrature/orthant-backed paths)
/// relative Frobenius.
#[test]
fn c3_specialized_vs_generic() {
    let c = Criterion::new("3 (specialized vs generic oracle)", 600);
    let opts = EngineOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3030);

    // mlp
    for t in 0..10 {
        let cfg = ArchConfig {
            kind: ArchKind::Mlp,
            depth: rng.gen_range(1..=3),
            nonlin: ["relu", "erf", "exp", "id"][t % 4].into(),
            sigma_w: rng.gen_range(0.6..1.3),
            sigma_u: 1.0,
            sigma_b: rng.gen_range(0.0..0.6),
            sigma_v: rng.gen_range(0.5..1.5),
            payload: {
                let count = rng.gen_range(1..=3);
                InputPayload::Vectors(random_vectors(&mut rng, count, 4))
            },
        };
        let fast = arch::mlp_kernel(&cfg, &opts).unwrap();
        let d = rel_frob(&fast.k, &generic_kernel_of(&cfg, &opts));
        assert!(d < 1e-6, "mlp {t}: {d:.2e}");
    }

    // rnn
    for t in 0..10 {
        let (n1, n2) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let seqs = vec![random_vectors(&mut rng, n1, 3), random_vectors(&mut rng, n2, 3)];
        let cfg = ArchConfig {
            kind: ArchKind::Rnn,
            depth: 1,
            nonlin: ["erf", "relu"][t % 2].into(),
            sigma_w: rng.gen_range(0.6..1.2),
            sigma_u: rng.gen_range(0.6..1.2),
            sigma_b: rng.gen_range(0.0..0.5),
            sigma_v: rng.gen_range(0.5..1.5),
            payload: InputPayload::Sequences(seqs),
        };
        let fast = arch::rnn_kernel(&cfg, &opts).unwrap();
        let d = rel_frob(&fast.k, &generic_kernel_of(&cfg, &opts));
        assert!(d < 1e-6, "rnn {t}: {d:.2e}");
    }

    // gru (erf gating): orthant-backed
    for t in 0..10 {
        let (n1, n2) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let seqs = vec![random_vectors(&mut rng, n1, 3), random_vectors(&mut rng, n2, 3)];
        let cfg = ArchConfig {
            kind: ArchKind::Gru,
            depth: 1,
            nonlin: "erf".into(),
            sigma_w: rng.gen_range(0.6..1.1),
            sigma_u: rng.gen_range(0.7..1.2),
            sigma_b: rng.gen_range(0.0..0.4),
            sigma_v: 1.0,
            payload: InputPayload::Sequences(seqs),
        };
        let fast = arch::gru_kernel(&cfg, &opts).unwrap();
        let d = rel_frob(&fast.k, &generic_kernel_of(&cfg, &opts));
        assert!(d < 2e-2, "gru {t}: {d:.2e}");
    }

    // cnn
    for t in 0..10 {
        let geometry = CnnGeometry::square_same(2, 2, 2);
        let images: Vec<Vec<Vec<f64>>> =
            (0..2).map(|_| random_vectors(&mut rng, 4, 2)).collect();
        let cfg = ArchConfig {
            kind: ArchKind::Cnn,
            depth: 2,
            nonlin: ["relu", "erf"][t % 2].into(),
            sigma_w: rng.gen_range(0.7..1.2),
            sigma_u: 1.0,
            sigma_b: 0.0,
            sigma_v: rng.gen_range(0.5..1.5),
            payload: InputPayload::Images { images, geometry },
        };
        let fast = arch::cnn_kernel(&cfg, &opts).unwrap();
        let d = rel_frob(&fast.k, &generic_kernel_of(&cfg, &opts));
        assert!(d < 1e-6, "cnn {t}: {d:.2e}");
    }

    // batchnorm: quadrature-backed on both sides
    for t in 0..10 {
        let b1 = rng.gen_range(2..=3);
        let batches = vec![random_vectors(&mut rng, b1, 4), random_vectors(&mut rng, 2, 4)];
        let cfg = ArchConfig {
            kind: ArchKind::BatchnormNet,
            depth: rng.gen_range(1..=2),
            nonlin: "relu".into(),
            sigma_w: 1.0,
            sigma_u: 1.0,
            sigma_b: 0.0,
            sigma_v: rng.gen_range(0.5..1.5),
            payload: InputPayload::Batches(batches),
        };
        let fast = arch::batchnorm_kernel(&cfg).unwrap();
        let d = rel_frob(&fast.k, &generic_kernel_of(&cfg, &opts));
        assert!(d < 2e-2, "batchnorm {t}: {d:.2e}");
    }

    // transformer
    for t in 0..10 {
        let (n1, n2) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
        let seqs = vec![random_vectors(&mut rng, n1, 3), random_vectors(&mut rng, n2, 3)];
        let cfg = ArchConfig {
            kind: ArchKind::Transformer,
            depth: rng.gen_range(1..=2),
            nonlin: "relu".into(),
            sigma_w: rng.gen_range(0.7..1.2),
            sigma_u: rng.gen_range(0.7..1.2),
            sigma_b: rng.gen_range(0.0..0.4),
            sigma_v: 1.0,
            payload: InputPayload::Sequences(seqs),
        };
        let fast = arch::transformer_kernel(&cfg).unwrap();
        let d = rel_frob(&fast.k, &generic_kernel_of(&cfg, &opts));
        assert!(d < 1e-6, "transformer {t}: {d:.2e}");
    }

    // layernorm network
    for t in 0..10 {
        let cfg = ArchConfig {
            kind: ArchKind::LayernormNet,
            depth: rng.gen_range(1..=3),
            nonlin: "relu".into(),
            sigma_w: rng.gen_range(0.6..1.4),
            sigma_u: 1.0,
            sigma_b: 0.0,
            sigma_v: rng.gen_range(0.5..1.5),
            payload: {
                let count = rng.gen_range(2..=3);
                InputPayload::Vectors(random_vectors(&mut rng, count, 4))
            },
        };
        let fast = arch::layernorm_kernel(&cfg).unwrap();
        let d = rel_frob(&fast.k, &generic_kernel_of(&cfg, &opts));
        assert!(d < 1e-6, "layernorm {t}: {d:.2e}");
    }

    c.finish();
}

/// Two overlapping word sequences, in the spirit of the near-duplicate
/// sentences the RNN experiments use; the heavy overlap drives the high
/// kernel correlations the concentration claim needs.
fn sentence_pair() -> Vec<Vec<Vec<f64>>> {
    let the = vec![1.0, 0.2, 0.3];
    let quick = vec![0.8, 0.6, 0.2];
    let brown = vec![0.9, 0.1, 0.5];
    let fox = vec![0.7, 0.4, 0.4];
    let jumps = vec![0.8, 0.3, 0.6];
    let over = vec![0.9, 0.4, 0.2];
    let lazy = vec![0.7, 0.2, 0.6];
    let dog = vec![0.8, 0.5, 0.3];
    vec![
        vec![the.clone(), brown.clone(), fox.clone(), jumps.clone(), over.clone(), dog.clone()],
        vec![the, quick, brown, fox, jumps, over, lazy, dog],
    ]
}

fn rnn_sentences_config() -> ArchConfig {
    ArchConfig {
        kind: ArchKind::Rnn,
        depth: 1,
        nonlin: "erf".into(),
        sigma_w: 1.0,
        sigma_u: 1.0,
        sigma_b: 0.1,
        sigma_v: 1.0,
        payload: InputPayload::Sequences(sentence_pair()),
    }
}

fn rnn_convergence_config() -> ArchConfig {
    ArchConfig {
        kind: ArchKind::Rnn,
        depth: 1,
        nonlin: "erf".into(),
        sigma_w: 1.0,
        sigma_u: 1.0,
        sigma_b: 0.1,
        sigma_v: 1.0,
        payload: InputPayload::Sequences(vec![
            vec![
                vec![1.0, 0.0, 0.5],
                vec![0.5, 0.5, -0.2],
                vec![0.1, 0.9, 0.3],
                vec![0.7, -0.2, 0.1],
                vec![0.3, 0.3, 0.8],
            ],
            vec![
                vec![0.9, 0.1, 0.4],
                vec![0.5, 0.5, -0.2],
                vec![-0.3, 0.8, 0.1],
                vec![0.2, 0.2, 0.9],
                vec![0.7, -0.2, 0.1],
                vec![0.0, 0.6, 0.6],
            ],
        ]),
    }
}

fn transformer_convergence_config() -> ArchConfig {
    ArchConfig {
        kind: ArchKind::Transformer,
        depth: 1,
        nonlin: "relu".into(),
        sigma_w: 1.0,
        sigma_u: 1.0,
        sigma_b: 0.1,
        sigma_v: 1.0,
        payload: InputPayload::Sequences(vec![
            vec![
                vec![1.0, 0.0, 0.5],
                vec![0.5, 0.5, -0.2],
                vec![0.1, 0.9, 0.3],
                vec![0.7, -0.2, 0.1],
            ],
            vec![
                vec![0.9, 0.1, 0.4],
                vec![-0.3, 0.8, 0.1],
                vec![0.2, 0.2, 0.9],
                vec![0.0, 0.6, 0.6],
            ],
        ]),
    }
}

/// Criterion 4: Master-Theorem convergence. Widths 2^6..2^12 with 100 seeds
/// give a log-log slope of -0.5 +- 0.15 and a relative Frobenius distance
/// below 0.05 at width 2^12, for an erf RNN and a transformer on two short
/// sequences.
#[test]
fn c4_convergence_studies() {
    let c = Criterion::new("4 (Master-Theorem convergence)", 900);
    let widths: Vec<usize> = (6..=12).map(|p| 1 << p).collect();
    let opts = EngineOptions::default();
    for (name, cfg, master_seed) in [
        ("rnn", rnn_convergence_config(), 15838u64),
        ("transformer", transformer_convergence_config(), 15838u64),
    ] {
        let built = arch::build(&cfg).unwrap();
        let theory = arch::arch_kernel(&cfg, &opts).unwrap();
        let report = sim::convergence_study(
            &built.typed,
            &built.sampling,
            &widths,
            100,
            &theory.k,
            master_seed,
        )
        .unwrap();
        println!(
            "  {name}: slope {:.3} +- {:.3}, dist@4096 {:.4}",
            report.slope,
            report.slope_ci,
            report.rows.last().unwrap().frob_rel
        );
        assert!(
            (report.slope - (-0.5)).abs() <= 0.15,
            "{name}: slope {:.3} outside -0.5 +- 0.15",
            report.slope
        );
        assert!(
            report.rows.last().unwrap().frob_rel < 0.05,
            "{name}: distance at 2^12 is {:.4}",
            report.rows.last().unwrap().frob_rel
        );
    }
    c.finish();
}

/// Plain-MC estimate of the GRU gate product
/// `E[sigma(z_i) prod(1-sigma(z_p))] x [...]` from the raw covariance of the
/// z-logits, with its standard error.
fn zeta_plain_mc(
    sz: &DMatrix<f64>,
    (base_a, i, t): (usize, usize, usize),
    (base_b, j, s): (usize, usize, usize),
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let coords: Vec<usize> = (i..=t).map(|p| base_a + p - 1).chain((j..=s).map(|q| base_b + q - 1)).collect();
    let d = coords.len();
    let sub = DMatrix::from_fn(d, d, |r, c| sz[(coords[r], coords[c])]);
    let l = netsor::linalg::psd_factor(&sub, 1e-12);
    let rank = l.ncols();
    let sigma_gate = |x: f64| 0.5 * (1.0 + libm::erf(x));
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    let mut u = vec![0.0; rank.max(1)];
    for smp in 0..samples {
        netsor::sim::rng::normals_into(
            netsor::sim::rng::StreamKey { master: seed, domain: 11, var: 0, block: smp as u64 },
            &mut u,
        );
        let z = |r: usize| -> f64 {
            let mut v = 0.0;
            for c in 0..rank {
                v += l[(r, c)] * u[c];
            }
            v
        };
        let na = t - i + 1;
        let mut val = sigma_gate(z(0));
        for p in 1..na {
            val *= 1.0 - sigma_gate(z(p));
        }
        val *= sigma_gate(z(na));
        for q in 1..(s - j + 1) {
            val *= 1.0 - sigma_gate(z(na + q));
        }
        acc += val;
        acc2 += val * val;
    }
    let mean = acc / samples as f64;
    let var = (acc2 / samples as f64 - mean * mean).max(0.0);
    (mean, (var / samples as f64).sqrt())
}

/// Criterion 5: every GRU gate-product expectation for t, s <= 3, computed
/// via orthant probabilities, agrees with plain Monte Carlo of the gate
/// product (1e6 samples) within 3 MC standard errors.
#[test]
fn c5_gru_erf_trick() {
    let c = Criterion::new("5 (GRU erf-trick vs MC)", 300);
    // a covariance of z-logits from an actual GRU run: two sequences of 3
    let mut rng = ChaCha8Rng::seed_from_u64(5050);
    let seqs = vec![random_vectors(&mut rng, 3, 3), random_vectors(&mut rng, 3, 3)];
    let cfg = ArchConfig {
        kind: ArchKind::Gru,
        depth: 1,
        nonlin: "erf".into(),
        sigma_w: 0.9,
        sigma_u: 1.0,
        sigma_b: 0.2,
        sigma_v: 1.0,
        payload: InputPayload::Sequences(seqs.clone()),
    };
    // reconstruct Sigma(z~, z~) through the generic engine
    let built = arch::build(&cfg).unwrap();
    let unwound = netsor::lang::unwind(&built.typed).unwrap();
    let kt = compute_mu_sigma(&unwound, &built.sampling, &EngineOptions::default()).unwrap();
    let mut sz = DMatrix::zeros(6, 6);
    for (r, (a, tt)) in (0..2).flat_map(|a| (1..=3).map(move |t| (a, t))).enumerate() {
        for (cc, (b, ss)) in (0..2).flat_map(|b| (1..=3).map(move |s| (b, s))).enumerate() {
            sz[(r, cc)] = kt
                .sigma_of(&format!("zt{tt}_{}", a + 1), &format!("zt{ss}_{}", b + 1))
                .unwrap();
        }
    }
    let mut checked = 0;
    for t in 1..=3usize {
        for s in 1..=3usize {
            for i in 1..=t {
                for j in 1..=s {
                    let (zeta, _) =
                        arch::gru_zeta(&sz, (0, i, t), (3, j, s), 1 << 14, 7, 32).unwrap();
                    let (mc, se) = zeta_plain_mc(
                        &sz,
                        (0, i, t),
                        (3, j, s),
                        1_000_000,
                        100 + (t * 64 + s * 16 + i * 4 + j) as u64,
                    );
                    assert!(
                        (zeta - mc).abs() <= 3.0 * se.max(1e-6),
                        "zeta[{i}:{t},{j}:{s}] = {zeta} vs MC {mc} (se {se:.2e})"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 36);
    c.finish();
}

/// Criterion 6: the batchnorm 1D and 2D integral reductions agree with
/// direct multivariate Gaussian Monte Carlo (1e7 samples) within 1e-2
/// relative.
#[test]
fn c6_batchnorm_integrals_vs_mc() {
    let c = Criterion::new("6 (batchnorm reductions vs MC)", 600);
    let mut rng = ChaCha8Rng::seed_from_u64(6060);

    let bn = |z: &[f64]| -> Vec<f64> {
        let b = z.len() as f64;
        let mean = z.iter().sum::<f64>() / b;
        let var = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / b;
        let std = var.sqrt();
        z.iter().map(|x| ((x - mean) / std).max(0.0)).collect()
    };

    // single batch, B = 3 and 4
    for b in [3usize, 4] {
        let a = DMatrix::from_fn(b, b, |_, _| rng.gen_range(-1.0..1.0));
        let k = &a * a.transpose() + DMatrix::identity(b, b) * 0.3;
        let reduced = batchnorm_v_single(&k).unwrap();
        let l = netsor::linalg::psd_factor(&k, 1e-12);
        let samples = 10_000_000usize;
        let mut acc = DMatrix::zeros(b, b);
        let mut u = vec![0.0; l.ncols()];
        let mut z = vec![0.0; b];
        for smp in 0..samples {
            netsor::sim::rng::normals_into(
                netsor::sim::rng::StreamKey { master: 61 + b as u64, domain: 12, var: 0, block: smp as u64 },
                &mut u,
            );
            for r in 0..b {
                let mut v = 0.0;
                for cc in 0..l.ncols() {
                    v += l[(r, cc)] * u[cc];
                }
                z[r] = v;
            }
            let phi = bn(&z);
            for r in 0..b {
                for cc in 0..b {
                    acc[(r, cc)] += phi[r] * phi[cc];
                }
            }
        }
        acc /= samples as f64;
        let d = rel_frob(&reduced, &acc);
        assert!(d < 1e-2, "single B={b}: rel err {d:.3e}");
    }

    // cross-batch block, B_a = B_b = 3
    {
        let n = 6;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let k = &a * a.transpose() + DMatrix::identity(n, n) * 0.3;
        let kaa = k.view((0, 0), (3, 3)).into_owned();
        let kab = k.view((0, 3), (3, 3)).into_owned();
        let kbb = k.view((3, 3), (3, 3)).into_owned();
        let reduced = batchnorm_v_cross(&kaa, &kab, &kbb).unwrap();
        let l = netsor::linalg::psd_factor(&k, 1e-12);
        let samples = 10_000_000usize;
        let mut acc = DMatrix::zeros(3, 3);
        let mut u = vec![0.0; l.ncols()];
        let mut z = vec![0.0; n];
        for smp in 0..samples {
            netsor::sim::rng::normals_into(
                netsor::sim::rng::StreamKey { master: 62, domain: 12, var: 0, block: smp as u64 },
                &mut u,
            );
            for r in 0..n {
                let mut v = 0.0;
                for cc in 0..l.ncols() {
                    v += l[(r, cc)] * u[cc];
                }
                z[r] = v;
            }
            let pa = bn(&z[..3]);
            let pb = bn(&z[3..]);
            for r in 0..3 {
                for cc in 0..3 {
                    acc[(r, cc)] += pa[r] * pb[cc];
                }
            }
        }
        acc /= samples as f64;
        let d = rel_frob(&reduced, &acc);
        assert!(d < 1e-2, "cross 3x3: rel err {d:.3e}");
    }
    c.finish();
}

/// Criterion 7: finite-width concentration. An erf RNN at width 1000 with
/// 100 seeds has an entrywise empirical-covariance standard deviation at
/// least 5x smaller than |K| for entries above the median |K| magnitude.
#[test]
fn c7_finite_width_concentration() {
    let c = Criterion::new("7 (finite-width concentration)", 300);
    let cfg = rnn_sentences_config();
    let built = arch::build(&cfg).unwrap();
    let theory = arch::arch_kernel(&cfg, &EngineOptions::default()).unwrap();
    let (_cov, se) = sim::empirical_kernel(&built.typed, &built.sampling, 1000, 100, 70).unwrap();
    let mut mags: Vec<f64> = theory.k.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = mags[mags.len() / 2];
    let mut above = 0;
    for i in 0..theory.k.nrows() {
        for j in 0..theory.k.ncols() {
            let mag = theory.k[(i, j)].abs();
            if mag > median {
                above += 1;
                assert!(
                    se[(i, j)] * 5.0 <= mag,
                    "entry ({i},{j}): sd {} not 5x below |K| {}",
                    se[(i, j)],
                    mag
                );
            }
        }
    }
    assert!(above > 0);
    c.finish();
}

/// Criterion 8: transform semantics on 50 fuzzed programs (bit-identical
/// forward at width 32, AST-identical round trips). The heavy lifting lives
/// in the netsor crate's `transforms` test; this re-runs it at the pinned
/// budget.
#[test]
fn c8_transform_semantics() {
    let c = Criterion::new("8 (transform semantics)", 120);
    use netsor::lang::{absorb_lincomb, print_program, random_program, unwind, FuzzOptions};
    for seed in 0..50u64 {
        let opts = match seed % 3 {
            0 => FuzzOptions::default(),
            1 => FuzzOptions { allow_circle: true, ..Default::default() },
            _ => FuzzOptions { allow_circle: true, allow_plus: true, ..Default::default() },
        };
        let p = random_program(seed, &opts);
        let reparsed = parse_program(&print_program(&p)).unwrap();
        assert_eq!(p, reparsed, "seed {seed}: round trip");
        let tp = typecheck(&p).unwrap();
        let spec = netsor::lang::random_sampling(&tp, seed);
        let run = |t: &netsor::lang::TypedProgram| -> Vec<u64> {
            let inst = sim::instantiate(t, &spec, 32, 99).unwrap();
            sim::forward(t, &inst).unwrap().outputs.iter().map(|v| v.to_bits()).collect()
        };
        let base = run(&tp);
        let unwound = unwind(&tp).unwrap();
        assert_eq!(base, run(&unwound), "seed {seed}: unwind");
        if matches!(
            tp.dialect,
            netsor::lang::Dialect::Netsor | netsor::lang::Dialect::NetsorMinus
        ) {
            let absorbed = absorb_lincomb(&tp).unwrap();
            assert_eq!(base, run(&absorbed), "seed {seed}: absorb");
        }
    }
    c.finish();
}

/// Criterion 9: randomized property suites. These live as dedicated tests in
/// the netsor crate (`properties`, `transforms`); this criterion runs their
/// core assertions at 200 cases each in one place.
#[test]
fn c9_property_suites() {
    let c = Criterion::new("9 (property suites)", 600);
    let mut rng = ChaCha8Rng::seed_from_u64(9090);

    // Sigma symmetry / PSD / Cauchy-Schwarz on random programs
    for seed in 0..200u64 {
        let p = netsor::lang::random_program(
            seed,
            &netsor::lang::FuzzOptions { body_len: 6, ..Default::default() },
        );
        let tp = typecheck(&p).unwrap();
        let spec = netsor::lang::random_sampling(&tp, seed);
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        let n = kt.sigma.nrows();
        let scale = kt.sigma.diagonal().iter().cloned().fold(0.0_f64, f64::max);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(kt.sigma[(i, j)].to_bits(), kt.sigma[(j, i)].to_bits());
                let bound = (kt.sigma[(i, i)] * kt.sigma[(j, j)]).max(0.0).sqrt();
                assert!(kt.sigma[(i, j)].abs() <= bound + 1e-9 * scale.max(1.0));
            }
        }
        assert!(netsor::linalg::is_psd(&kt.sigma, 1e-8), "seed {seed}");
    }

    // transformer diagonal = sigma_v^2
    for trial in 0..200 {
        let sv: f64 = rng.gen_range(0.3..2.0);
        let cfg = ArchConfig {
            kind: ArchKind::Transformer,
            depth: 1,
            nonlin: "relu".into(),
            sigma_w: rng.gen_range(0.5..1.5),
            sigma_u: rng.gen_range(0.5..1.5),
            sigma_b: rng.gen_range(0.0..0.5),
            sigma_v: sv,
            payload: {
                let count = rng.gen_range(1..=3);
                InputPayload::Sequences(vec![random_vectors(&mut rng, count, 3)])
            },
        };
        let k = arch::transformer_kernel(&cfg).unwrap();
        for i in 0..k.k.nrows() {
            assert!(
                (k.k[(i, i)] - sv * sv).abs() <= 1e-12 * sv * sv,
                "trial {trial}"
            );
        }
    }

    // batchnorm scale/shift invariance
    for trial in 0..200 {
        let b = rng.gen_range(2..=4);
        let a = DMatrix::from_fn(b, b, |_, _| rng.gen_range(-1.0..1.0));
        let k = &a * a.transpose() + DMatrix::identity(b, b) * 0.1;
        let v = batchnorm_v_single(&k).unwrap();
        let v4 = batchnorm_v_single(&(&k * 4.0)).unwrap();
        let vs = batchnorm_v_single(&(&k + DMatrix::from_element(b, b, 2.0))).unwrap();
        for i in 0..b {
            for j in 0..b {
                assert!((v[(i, j)] - v4[(i, j)]).abs() < 1e-9, "trial {trial} scale");
                assert!((v[(i, j)] - vs[(i, j)]).abs() < 1e-8, "trial {trial} shift");
            }
        }
    }

    // odd-T centered erf products vanish
    for trial in 0..200u64 {
        let t = [1usize, 3][trial as usize % 2];
        let a = DMatrix::from_fn(t, t, |_, _| rng.gen_range(-1.0..1.0));
        let cov = &a * a.transpose();
        let (e, se) = netsor::vtransform::erf_product_expectation(
            &DVector::zeros(t),
            &cov,
            1 << 13,
            trial,
        )
        .unwrap();
        assert!(e.abs() <= (4.0 * se).max(1e-9), "trial {trial}: {e}");
    }

    // orthant of independent standard dims
    for trial in 0..200u64 {
        let d = rng.gen_range(1..=6);
        let q = netsor::vtransform::OrthantQuery {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
            points: 1 << 13,
            seed: trial,
            dim_cap: 32,
        };
        let (p, se) = netsor::vtransform::orthant_probability(&q).unwrap();
        let exact = 0.5_f64.powi(d as i32);
        assert!((p - exact).abs() <= (4.0 * se).max(2e-4), "trial {trial}: d={d}");
    }

    c.finish();
}
