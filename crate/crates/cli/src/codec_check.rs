use lqg_prefix::codec::{BitWriter, CodeKind, Codebook, FinitePmf};
use lqg_prefix::sim::{gaussian_conditional_pmf, gaussian_marginal_pmf, kind_name};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::Failure;

const STREAMS: usize = 2000;
const STREAM_LEN: usize = 16;

fn bundled() -> Result<Vec<(&'static str, FinitePmf)>, Failure> {
    let delta = 12f64.sqrt();
    let geo: Vec<f64> = (0..40).map(|k| 0.5f64.powi(k + 1)).collect();
    Ok(vec![
        ("dyadic", FinitePmf::new(vec![0, 1, 2, 3], vec![0.5, 0.25, 0.125, 0.125], 0.0)?),
        ("uniform-4", FinitePmf::new(vec![-2, -1, 0, 1], vec![0.25; 4], 0.0)?),
        ("skewed", FinitePmf::from_weights(&[0, 1, 2, 3, 4], &[0.6, 0.25, 0.1, 0.04, 0.01])?),
        ("geometric-escape", FinitePmf::new((0..40).collect(), geo, 0.5f64.powi(40))?),
        ("gaussian-conditional", gaussian_conditional_pmf(13.0, 0.37, delta)),
        ("gaussian-marginal", gaussian_marginal_pmf(13.0, delta)),
    ])
}

fn entropy(pmf: &FinitePmf) -> f64 {
    pmf.probs().iter().chain(std::iter::once(&pmf.escape_mass())).filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum()
}

fn round_trip(book: &Codebook, pmf: &FinitePmf, rng: &mut ChaCha8Rng) -> usize {
    let top = *pmf.cells().last().unwrap();
    let mut errors = 0;
    for _ in 0..STREAMS {
        let mut w = BitWriter::new();
        let mut sent = Vec::with_capacity(STREAM_LEN);
        for _ in 0..STREAM_LEN {
            let q = if book.escape_word().is_some() && rng.random_bool(0.05) {
                top + rng.random_range(1..1000)
            } else {
                pmf.cells()[rng.random_range(0..pmf.len())]
            };
            if book.encode_into(q, &mut w).is_err() {
                errors += 1;
            }
            sent.push(q);
        }
        let mut r = w.reader();
        errors += sent.iter().filter(|&&q| book.decode(&mut r).ok() != Some(q)).count();
        if r.remaining() != 0 {
            errors += 1;
        }
    }
    errors
}

/// Prefix-freeness, Kraft, length bounds and stream round trips for each
/// bundled distribution and both code constructions.
pub fn run(seed: u64) -> Result<(Value, bool), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_ok = true;
    let mut rows = Vec::new();
    for (name, pmf) in bundled()? {
        let h = entropy(&pmf);
        for (kind, slack) in [(CodeKind::ShannonSorted, 1.0), (CodeKind::Fano, 2.0)] {
            let book = Codebook::build(&pmf, kind);
            let el = book.expected_length(&pmf);
            let kraft = book.kraft_sum();
            let prefix_free = book.is_prefix_free();
            let errors = round_trip(&book, &pmf, &mut rng);
            let ok = prefix_free && kraft <= 1.0 && el >= h - 1e-12 && el <= h + slack + 1e-12 && errors == 0;
            all_ok &= ok;
            rows.push(json!({
                "pmf": name,
                "code": kind_name(kind),
                "symbols": pmf.len(),
                "escape": book.escape_word().is_some(),
                "entropy": h,
                "expected_length": el,
                "kraft": kraft,
                "prefix_free": prefix_free,
                "streams": STREAMS,
                "round_trip_errors": errors,
                "pass": ok,
            }));
        }
    }
    Ok((json!({"seed": seed, "results": rows, "pass": all_ok}), all_ok))
}
