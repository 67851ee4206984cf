//! Element-wise uniform quantizer with subtractive dither.
//!
//! Cells are half-open, `[k delta - delta/2, k delta + delta/2)`, so every
//! real number maps to exactly one integer index `k`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reserved ChaCha stream for process noise; dither uses streams `0..dim`.
pub const NOISE_STREAM: u64 = 1 << 63;

/// Largest cell index magnitude accepted before aborting.
const MAX_CELL: f64 = (1u64 << 62) as f64;

/// Integer cell indices; the symbol values are `cells[i] * delta`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantizedVector {
    pub cells: Vec<i64>,
}

impl QuantizedVector {
    pub fn values(&self, delta: f64) -> Vec<f64> {
        self.cells.iter().map(|&k| k as f64 * delta).collect()
    }
}

#[inline]
pub fn quantize_scalar(x: f64, delta: f64) -> i64 {
    let k = (x / delta + 0.5).floor();
    assert!(
        k.is_finite() && k.abs() < MAX_CELL,
        "quantizer overflow: input {x} with step {delta} is out of range"
    );
    k as i64
}

pub fn quantize(x: &[f64], delta: f64) -> QuantizedVector {
    QuantizedVector { cells: x.iter().map(|&v| quantize_scalar(v, delta)).collect() }
}

/// Quantizes `z + d`; returns the cells and the reconstruction error
/// `k delta - d - z`.
pub fn dither_quantize(z: &[f64], d: &[f64], delta: f64) -> (QuantizedVector, Vec<f64>) {
    assert_eq!(z.len(), d.len(), "dither dimension mismatch");
    let cells: Vec<i64> = z.iter().zip(d).map(|(&zi, &di)| quantize_scalar(zi + di, delta)).collect();
    let vrec = cells
        .iter()
        .zip(z.iter().zip(d))
        .map(|(&k, (&zi, &di))| k as f64 * delta - di - zi)
        .collect();
    (QuantizedVector { cells }, vrec)
}

/// Decoder-side reconstruction `k delta - d`.
pub fn reconstruct(q: &QuantizedVector, d: &[f64], delta: f64) -> Vec<f64> {
    q.cells.iter().zip(d).map(|(&k, &di)| k as f64 * delta - di).collect()
}

/// Shared dither: draw `(t, i)` is a pure function of `(seed, t, i)`,
/// uniform on `[-delta/2, delta/2)`.
///
/// Component `i` is ChaCha8 stream `i` keyed by `seed`; step `t` reads the
/// `t`-th 64-bit word pair of that stream.
#[derive(Debug, Clone)]
pub struct DitherStream {
    seed: u64,
    delta: f64,
    dim: usize,
}

impl DitherStream {
    pub fn new(seed: u64, delta: f64, dim: usize) -> Self {
        assert!(delta > 0.0 && delta.is_finite(), "dither step must be positive");
        Self { seed, delta, dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn draw(&self, t: u64, component: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(component as u64);
        rng.set_word_pos(2 * t as u128);
        to_dither(rng.next_u64(), self.delta)
    }

    pub fn draw_vector(&self, t: u64) -> Vec<f64> {
        (0..self.dim).map(|i| self.draw(t, i)).collect()
    }

    /// Sequential reader starting at step `t`; yields the same values as
    /// [`draw`](Self::draw) without re-keying per step.
    pub fn cursor(&self, t: u64) -> DitherCursor {
        let gens = (0..self.dim)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(i as u64);
                rng.set_word_pos(2 * t as u128);
                rng
            })
            .collect();
        DitherCursor { gens, delta: self.delta, t }
    }
}

pub struct DitherCursor {
    gens: Vec<ChaCha8Rng>,
    delta: f64,
    t: u64,
}

impl DitherCursor {
    /// Step index of the next draw.
    pub fn position(&self) -> u64 {
        self.t
    }

    pub fn next_into(&mut self, out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(self.gens.iter_mut()) {
            *o = to_dither(g.next_u64(), self.delta);
        }
        self.t += 1;
    }

    pub fn next_scalar(&mut self) -> f64 {
        self.t += 1;
        to_dither(self.gens[0].next_u64(), self.delta)
    }
}

#[inline]
fn to_dither(bits: u64, delta: f64) -> f64 {
    let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (u - 0.5) * delta
}

/// Process-noise generator in a stream disjoint from the dither.
pub fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    rng
}

/// Uniform draw helper used by tests and simulations.
pub fn uniform_symmetric<R: Rng>(rng: &mut R, delta: f64) -> f64 {
    to_dither(rng.next_u64(), delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_open_cells() {
        assert_eq!(quantize_scalar(0.49, 1.0), 0);
        assert_eq!(quantize_scalar(0.5, 1.0), 1);
        assert_eq!(quantize_scalar(-0.5, 1.0), 0);
        assert_eq!(quantize_scalar(-0.51, 1.0), -1);
    }

    #[test]
    fn reconstruction_example() {
        let (q, v) = dither_quantize(&[0.6], &[0.0], 1.0);
        assert_eq!(q.cells, vec![1]);
        assert_eq!(reconstruct(&q, &[0.0], 1.0), vec![1.0]);
        assert!((v[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn cursor_matches_random_access() {
        let s = DitherStream::new(42, 3.0, 3);
        let mut c = s.cursor(5);
        let mut buf = vec![0.0; 3];
        for t in 5..40 {
            c.next_into(&mut buf);
            assert_eq!(buf, s.draw_vector(t));
        }
    }

    #[test]
    fn streams_with_equal_seeds_agree() {
        let a = DitherStream::new(7, 1.0, 2);
        let b = DitherStream::new(7, 1.0, 2);
        let c = DitherStream::new(8, 1.0, 2);
        assert_eq!(a.draw_vector(123), b.draw_vector(123));
        assert_ne!(a.draw_vector(123), c.draw_vector(123));
    }

    proptest! {
        #[test]
        fn reconstruction_error_is_bounded(z in -1e6f64..1e6, t in 0u64..1_000_000, delta in 0.01f64..10.0) {
            let d = DitherStream::new(1, delta, 1).draw(t, 0);
            prop_assert!(d >= -delta / 2.0 && d < delta / 2.0);
            let (_, v) = dither_quantize(&[z], &[d], delta);
            prop_assert!(v[0].abs() <= delta / 2.0 * (1.0 + 1e-9) + 1e-9 * z.abs() * f64::EPSILON);
        }

        #[test]
        fn cell_contains_input(x in -1e6f64..1e6, delta in 0.01f64..10.0) {
            let k = quantize_scalar(x, delta) as f64;
            let tol = 1e-9 * (1.0 + x.abs());
            prop_assert!(x >= k * delta - delta / 2.0 - tol);
            prop_assert!(x < k * delta + delta / 2.0 + tol);
        }
    }
}
