//! Monte-Carlo checks of the speckle generator against its analytic moments.

use sonospeck::speckle::{sample_speckle, to_log, trigamma};

const SAMPLES: usize = 1_000_000;

struct Moments {
    mean: f64,
    var: f64,
    /// Standard error of the mean.
    se_mean: f64,
    /// Standard error of the sample variance, `sqrt((μ₄ − σ⁴)/n)`.
    se_var: f64,
}

fn moments(xs: &[f32]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in xs {
        let d = v as f64 - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    let (var, mu4) = (m2 / n, m4 / n);
    Moments { mean, var, se_mean: (var / n).sqrt(), se_var: ((mu4 - var * var) / n).sqrt() }
}

#[test]
fn speckle_mean_and_log_variance_within_three_standard_errors() {
    for (i, looks) in [1.0, 2.0, 3.0, 4.0, 9.0, 12.0, 15.0].into_iter().enumerate() {
        let n = sample_speckle([1, 1, 1000, SAMPLES / 1000], looks, 100 + i as u64).unwrap();
        let m = moments(n.data());
        assert!((m.mean - 1.0).abs() < 3.0 * m.se_mean, "L={looks}: mean {} ± {}", m.mean, m.se_mean);
        assert!((m.var - 1.0 / looks).abs() < 3.0 * m.se_var, "L={looks}: var {} vs {}", m.var, 1.0 / looks);

        let z = to_log(&n, 0.0).unwrap();
        let lm = moments(z.data());
        let tg = trigamma(looks).unwrap();
        assert!((lm.var - tg).abs() < 3.0 * lm.se_var, "L={looks}: log-var {} vs {tg} (se {})", lm.var, lm.se_var);
    }
}
