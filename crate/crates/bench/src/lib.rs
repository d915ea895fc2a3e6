//! Fixtures shared by the benchmarks.

use std::path::Path;

use fracbayes_core::experiment::{Experiment, ExperimentConfig};

/// Orders-only problem on an `n x n` fine grid with a `c x c` coarse partition.
pub fn orders_problem(n: usize, c: usize, basis: usize) -> Experiment {
    let text = format!(
        r#"
        name = "bench"
        [grid]
        fine = [{n}, {n}]
        coarse = [{c}, {c}]
        basis = {basis}
        [time]
        dt = 0.02
        t_end = 1.0
        [model]
        gamma = [0.2, 0.8]
        source = {{ c = 10.0 }}
        boundary = {{ c = 1.0 }}
        [truth]
        alpha = [0.3, 0.6]
        diffusion = {{ kind = "kl", rho = 1.0, l1 = 0.1, l2 = 0.1, terms = 30 }}
        [unknowns]
        orders = true
        [observations]
        sides = ["left", "right"]
        times = [0.4, 1.0]
        "#
    );
    let config = ExperimentConfig::from_toml(&text).expect("bench config parses");
    Experiment::new(config, Path::new("."), None).expect("bench experiment builds")
}

/// Deterministic pseudo-random values in `[0, 1)` (splitmix64).
pub fn uniforms(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            (z ^ (z >> 31)) as f64 / 2f64.powi(64)
        })
        .collect()
}
