use netsor::arch::{self, ArchConfig, ArchKind, InputPayload};
use netsor::engine::EngineOptions;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let the = vec![1.0, 0.2, 0.3];
    let quick = vec![0.8, 0.6, 0.2];
    let brown = vec![0.9, 0.1, 0.5];
    let fox = vec![0.7, 0.4, 0.4];
    let jumps = vec![0.8, 0.3, 0.6];
    let over = vec![0.9, 0.4, 0.2];
    let lazy = vec![0.7, 0.2, 0.6];
    let dog = vec![0.8, 0.5, 0.3];
    let s1 = vec![the.clone(), brown.clone(), fox.clone(), jumps.clone(), over.clone(), dog.clone()];
    let s2 = vec![the, quick, brown, fox, jumps, over, lazy, dog];
    let cfg = ArchConfig {
        kind: ArchKind::Rnn,
        depth: 1,
        nonlin: "erf".into(),
        sigma_w: 1.0,
        sigma_u: 1.0,
        sigma_b: 0.1,
        sigma_v: 1.0,
        payload: InputPayload::Sequences(vec![s1, s2]),
    };
    let built = arch::build(&cfg).unwrap();
    let theory = arch::arch_kernel(&cfg, &EngineOptions::default()).unwrap();
    let widths: Vec<usize> = (6..=12).map(|p| 1 << p).collect();
    let report = netsor::sim::convergence_study(&built.typed, &built.sampling, &widths, 100, &theory.k, seed).unwrap();
    println!("seed {seed}: slope {:.3} +- {:.3} dist@4096 {:.5}", report.slope, report.slope_ci, report.rows.last().unwrap().frob_rel);
}
