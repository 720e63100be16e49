//! Euclidean projection onto the probability simplex by enumerating supports.
//! On a fixed support the equality-constrained problem has a closed form; the
//! optimum is the feasible candidate of least distance.

pub fn project(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    assert!(n <= 16, "support enumeration is exponential");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let shift = (support.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / support.len() as f64;
        let mut x = vec![0.0; n];
        let mut feasible = true;
        for &i in &support {
            x[i] = v[i] - shift;
            if x[i] < -1e-15 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let dist: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, x));
        }
    }
    best.expect("the simplex is non-empty").1
}
