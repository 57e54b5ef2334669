//! Goodness of fit of the engine's samplers on 10^6 draws per parameter.

use backoff_core::analysis::TailLaw;
use backoff_core::RngStream;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: u64 = 1_000_000;

/// Pearson chi-square p-value with categories merged to expected count >= 5.
fn p_value(law: TailLaw, draw: impl Fn(&mut RngStream) -> u64, seed: u64) -> f64 {
    let mut s = RngStream::new(seed);
    let hi = (law.mean() + 12.0 * law.mean().sqrt() + 12.0) as usize;
    let mut obs = vec![0u64; hi + 2];
    for _ in 0..DRAWS {
        let k = draw(&mut s) as usize;
        obs[k.min(hi + 1)] += 1;
    }
    let n = DRAWS as f64;
    let mut exp: Vec<f64> = (0..=hi as u64).map(|k| law.pmf(k) * n).collect();
    exp.push(law.sf_from(hi as u64 + 1) * n);
    let (mut stat, mut cats) = (0.0, 0usize);
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, e) in obs.iter().zip(&exp) {
        o_acc += *o as f64;
        e_acc += e;
        if e_acc >= 5.0 {
            stat += (o_acc - e_acc).powi(2) / e_acc;
            cats += 1;
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        // Fold the remainder into a final category.
        stat += (o_acc - e_acc).powi(2) / e_acc.max(1e-300);
        cats += 1;
    }
    1.0 - ChiSquared::new((cats - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn poisson_sampler_fits() {
    for (i, mu) in [0.3, 2.0, 17.0, 250.0].into_iter().enumerate() {
        let p = p_value(TailLaw::Poisson { mu }, |s| s.draw_poisson(mu), 100 + i as u64);
        assert!(p >= 1e-3, "Poisson({mu}): p = {p}");
    }
}

#[test]
fn binomial_sampler_fits() {
    for (i, (n, q)) in [(5u64, 0.5), (40, 0.1), (1000, 0.02), (100_000, 0.3)].into_iter().enumerate() {
        let p = p_value(TailLaw::Binomial { n, p: q }, |s| s.draw_binomial(n, q), 200 + i as u64);
        assert!(p >= 1e-3, "Binomial({n}, {q}): p = {p}");
    }
}
