fn main() {
    let n = 1 << 22;
    let a: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 1000) as f64 / 997.0 - 0.5).collect();
    let b: Vec<f64> = (0..n).map(|i| ((i * 61 + 3) % 1000) as f64 / 991.0 - 0.5).collect();
    let t0 = std::time::Instant::now();
    let mut s = 0.0;
    for _ in 0..20 {
        s += netsor::sim::exact_dot(&a, &b);
    }
    let dt = t0.elapsed();
    println!("exact_dot: {:.2} ns/elem (sum {s})", dt.as_nanos() as f64 / (20.0 * n as f64));
    let t0 = std::time::Instant::now();
    let mut s2 = 0.0;
    for _ in 0..20 {
        s2 += a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
    }
    println!("naive dot: {:.2} ns/elem (sum {s2})", t0.elapsed().as_nanos() as f64 / (20.0 * n as f64));
}
