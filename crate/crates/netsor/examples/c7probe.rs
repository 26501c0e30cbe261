use netsor::arch::{self, ArchConfig, ArchKind, InputPayload};
use netsor::engine::EngineOptions;

fn main() {
    // two sentences sharing most tokens, like the paper's pair
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
    let theory = arch::arch_kernel(&cfg, &EngineOptions::default()).unwrap();
    let built = arch::build(&cfg).unwrap();
    let (_cov, se) = netsor::sim::empirical_kernel(&built.typed, &built.sampling, 1000, 100, 70).unwrap();
    let mut mags: Vec<f64> = theory.k.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = mags[mags.len() / 2];
    let mut worst: f64 = 1e9;
    for i in 0..theory.k.nrows() {
        for j in 0..theory.k.ncols() {
            let mag = theory.k[(i, j)].abs();
            if mag > median {
                worst = worst.min(mag / se[(i, j)]);
            }
        }
    }
    println!("median |K| = {median:.4}, worst ratio |K|/sd = {worst:.2}");
}
