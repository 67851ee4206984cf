use lqg_prefix::codec::{CodeKind, Codebook, FinitePmf};
use lqg_prefix::sim::{gaussian_conditional_pmf, gaussian_marginal_pmf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[test]
fn mismatched_model_redundancy_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let n = rng.random_range(2..40);
        let cells: Vec<i64> = (0..n as i64).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let (ps, ms): (f64, f64) = (p.iter().sum(), m.iter().sum());
        let h: f64 = p.iter().map(|x| -(x / ps) * (x / ps).log2()).sum();
        let d: f64 = p.iter().zip(&m).map(|(x, y)| (x / ps) * ((x / ps) / (y / ms)).log2()).sum();
        let model = FinitePmf::from_weights(&cells, &m).unwrap();
        for (kind, overhead) in [(CodeKind::ShannonSorted, 1.0), (CodeKind::Fano, 2.0)] {
            let book = Codebook::build(&model, kind);
            let el: f64 = cells.iter().zip(&p).map(|(&c, x)| x / ps * book.word(c).unwrap().len as f64).sum();
            assert!(el >= h - 1e-12);
            assert!(el <= h + d + overhead + 1e-9, "{kind:?}: {el} > {h} + {d} + {overhead}");
        }
    }
}

#[test]
fn gaussian_conditional_matches_interval_masses() {
    let (sigma2, delta) = (13.0f64, 12f64.sqrt());
    let s = sigma2.sqrt();
    for &d in &[-1.7, -0.3, 0.0, 0.9, 1.73] {
        let pmf = gaussian_conditional_pmf(sigma2, d, delta);
        let total: f64 = pmf.probs().iter().sum::<f64>() + pmf.escape_mass();
        assert!((total - 1.0).abs() < 1e-12);
        // cell k collects z with (k - 1/2) delta <= z + d < (k + 1/2) delta
        for (k, p) in pmf.iter() {
            let lo = (k as f64 - 0.5) * delta - d;
            let hi = (k as f64 + 0.5) * delta - d;
            let want = phi(hi / s) - phi(lo / s);
            assert!((p - want).abs() < 1e-12 * want.max(1e-3), "d={d} k={k}: {p} vs {want}");
        }
    }
}

#[test]
fn gaussian_marginal_is_the_dither_average() {
    let (sigma2, delta) = (13.0, 12f64.sqrt());
    let marg = gaussian_marginal_pmf(sigma2, delta);
    let total: f64 = marg.probs().iter().sum::<f64>() + marg.escape_mass();
    assert!((total - 1.0).abs() < 1e-12);
    let n = 20_000;
    let mut avg = vec![0.0; 41];
    for j in 0..n {
        let d = -delta / 2.0 + (j as f64 + 0.5) * delta / n as f64;
        let c = gaussian_conditional_pmf(sigma2, d, delta);
        for (k, p) in c.iter() {
            if k.abs() <= 20 {
                avg[(k + 20) as usize] += p / n as f64;
            }
        }
    }
    for k in -6i64..=6 {
        assert!((marg.prob(k) - avg[(k + 20) as usize]).abs() < 1e-8, "k={k}");
    }
}
