//! Shannon-Fano-Elias prefix codes over quantizer cells.
//!
//! Probabilities are rounded down to 62-bit fixed point before any
//! cumulative sum, so codeword construction is exact integer arithmetic and
//! an encoder and decoder built from the same pmf agree bit for bit. The
//! rounding residual (plus any tail mass) becomes an escape pseudo-symbol;
//! unlisted cells are sent as the escape word followed by the Elias gamma
//! code of their zigzag index.

pub mod bits;
pub mod pmf;

use std::fmt;

pub use bits::{BitReader, BitWriter};
pub use pmf::FinitePmf;

use crate::error::{Error, Result};

const FRAC_BITS: u32 = 62;
const ONE: u64 = 1 << FRAC_BITS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodeKind {
    /// Mid-point cumulative in symbol order, `ceil(-log2 p) + 1` bits.
    Fano,
    /// Cumulative after sorting by decreasing probability, `ceil(-log2 p)` bits.
    ShannonSorted,
}

/// Up to 64 bits, right-aligned in `bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Codeword {
    pub bits: u64,
    pub len: u8,
}

impl Codeword {
    /// Word shifted to the top of a `u64`.
    fn left(&self) -> u64 {
        if self.len == 0 {
            0
        } else {
            self.bits << (64 - self.len as u32)
        }
    }

    pub fn is_prefix_of(&self, other: &Codeword) -> bool {
        self.len <= other.len && (self.len == 0 || (other.bits >> (other.len - self.len)) == self.bits)
    }
}

impl fmt::Display for Codeword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in (0..self.len).rev() {
            f.write_str(if (self.bits >> i) & 1 == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Symbol(i64),
    Escape,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    slot: Slot,
    word: Codeword,
    /// Fixed-point mass the word was derived from.
    mass: u64,
}

/// Immutable prefix code table.
#[derive(Debug, Clone)]
pub struct Codebook {
    kind: CodeKind,
    /// Codebook order (the order cumulative sums were taken in).
    entries: Vec<Entry>,
    /// `(symbol, word)` sorted by symbol.
    by_symbol: Vec<(i64, Codeword)>,
    escape: Option<Codeword>,
    /// `(left-aligned word, entry index)` sorted by word.
    decode_table: Vec<(u64, usize)>,
}

/// Rounds the pmf to fixed point. Cells that round to zero are dropped and
/// the residual is assigned to the escape slot.
fn fixed_point_masses(pmf: &FinitePmf) -> (Vec<(i64, u64)>, u64) {
    let total = pmf.probs().iter().sum::<f64>() + pmf.escape_mass();
    let scale = ONE as f64 / total;
    let mut masses: Vec<(i64, u64)> =
        pmf.iter().map(|(c, p)| (c, ((p * scale).floor() as u64).min(ONE))).collect();
    let dropped = masses.iter().any(|&(_, m)| m == 0);
    masses.retain(|&(_, m)| m > 0);
    let mut sum: u128 = masses.iter().map(|&(_, m)| m as u128).sum();
    while sum > ONE as u128 {
        let i = (0..masses.len()).max_by_key(|&i| masses[i].1).unwrap();
        masses[i].1 -= 1;
        sum -= 1;
    }
    let mut residual = ONE - sum as u64;
    if residual == 0 && (dropped || pmf.escape_mass() > 0.0) {
        let i = (0..masses.len()).max_by_key(|&i| masses[i].1).unwrap();
        masses[i].1 -= 1;
        residual = 1;
    }
    (masses, residual)
}

/// `ceil(-log2(m / 2^62))` for `0 < m <= 2^62`.
#[inline]
fn shannon_len(m: u64) -> u8 {
    (FRAC_BITS - m.ilog2()) as u8
}

impl Codebook {
    pub fn build(pmf: &FinitePmf, kind: CodeKind) -> Codebook {
        match kind {
            CodeKind::Fano => build_fano(pmf),
            CodeKind::ShannonSorted => build_shannon_sorted(pmf),
        }
    }

    fn from_entries(kind: CodeKind, entries: Vec<Entry>) -> Codebook {
        let mut by_symbol: Vec<(i64, Codeword)> = entries
            .iter()
            .filter_map(|e| match e.slot {
                Slot::Symbol(s) => Some((s, e.word)),
                Slot::Escape => None,
            })
            .collect();
        by_symbol.sort_by_key(|&(s, _)| s);
        let escape = entries.iter().find(|e| e.slot == Slot::Escape).map(|e| e.word);
        let mut decode_table: Vec<(u64, usize)> = entries.iter().enumerate().map(|(i, e)| (e.word.left(), i)).collect();
        decode_table.sort_by_key(|&(w, i)| (w, entries[i].word.len));
        Codebook { kind, entries, by_symbol, escape, decode_table }
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.by_symbol.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_symbol.is_empty()
    }

    pub fn word(&self, q: i64) -> Option<Codeword> {
        self.by_symbol.binary_search_by_key(&q, |&(s, _)| s).ok().map(|i| self.by_symbol[i].1)
    }

    pub fn escape_word(&self) -> Option<Codeword> {
        self.escape
    }

    /// Slots and words in codebook order.
    pub fn entries(&self) -> impl Iterator<Item = (Slot, Codeword)> + '_ {
        self.entries.iter().map(|e| (e.slot, e.word))
    }

    /// Fixed-point masses in codebook order (scale 2^62).
    pub fn fixed_masses(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.mass)
    }

    /// Bits `encode` would emit for `q`, if encodable.
    pub fn code_len(&self, q: i64) -> Option<u32> {
        match self.word(q) {
            Some(w) => Some(w.len as u32),
            None => self.escape.map(|e| e.len as u32 + bits::gamma_len(bits::zigzag(q))),
        }
    }

    /// Appends the code of `q` and returns the number of bits written.
    pub fn encode_into(&self, q: i64, out: &mut BitWriter) -> Result<u32> {
        if let Some(w) = self.word(q) {
            out.push(w.bits, w.len as u32);
            return Ok(w.len as u32);
        }
        let esc = self.escape.ok_or(Error::Unencodable(q))?;
        let before = out.len();
        out.push(esc.bits, esc.len as u32);
        bits::write_gamma(out, bits::zigzag(q));
        Ok((out.len() - before) as u32)
    }

    pub fn encode(&self, q: i64) -> Result<BitWriter> {
        let mut w = BitWriter::new();
        self.encode_into(q, &mut w)?;
        Ok(w)
    }

    /// Reads one symbol; on error the reader position is unspecified.
    pub fn decode(&self, r: &mut BitReader<'_>) -> Result<i64> {
        let start = r.position();
        let peek = r.peek64();
        let idx = self.decode_table.partition_point(|&(w, _)| w <= peek);
        if idx == 0 {
            return Err(Error::MalformedStream(start));
        }
        let entry = &self.entries[self.decode_table[idx - 1].1];
        let len = entry.word.len as u32;
        if len > 0 && (peek ^ entry.word.left()) >> (64 - len) != 0 {
            return Err(Error::MalformedStream(start));
        }
        r.advance(len as usize).map_err(|_| Error::MalformedStream(start))?;
        match entry.slot {
            Slot::Symbol(s) => Ok(s),
            Slot::Escape => {
                let z = bits::read_gamma(r).map_err(|_| Error::MalformedStream(start))?;
                let q = bits::unzigzag(z);
                // a listed symbol sent through the escape path is not a valid stream
                if self.word(q).is_some() {
                    return Err(Error::MalformedStream(start));
                }
                Ok(q)
            }
        }
    }

    /// Sum of `2^-len` over all words including the escape word.
    pub fn kraft_sum(&self) -> f64 {
        self.entries.iter().map(|e| (-(e.word.len as f64)).exp2()).sum()
    }

    /// Exhaustive pairwise prefix check over the table and escape word.
    pub fn is_prefix_free(&self) -> bool {
        let w: Vec<Codeword> = self.entries.iter().map(|e| e.word).collect();
        for i in 0..w.len() {
            for j in 0..w.len() {
                if i != j && w[i].is_prefix_of(&w[j]) {
                    return false;
                }
            }
        }
        true
    }

    /// True if fixed-point masses are non-increasing in codebook order.
    pub fn is_sorted_by_mass(&self) -> bool {
        self.entries.windows(2).all(|e| e[0].mass >= e[1].mass)
    }

    /// `sum p(q) len(q)` by enumeration of `pmf`. Listed cells missing from
    /// the book are charged the escape path; the tail mass is charged the
    /// escape word alone.
    pub fn expected_length(&self, pmf: &FinitePmf) -> f64 {
        let mut s = crate::stats::KahanSum::new();
        for (c, p) in pmf.iter() {
            let l = self.code_len(c).map(f64::from).unwrap_or(f64::INFINITY);
            s.add(p * l);
        }
        if pmf.escape_mass() > 0.0 {
            let l = self.escape.map(|e| e.len as f64).unwrap_or(f64::INFINITY);
            s.add(pmf.escape_mass() * l);
        }
        s.value()
    }
}

/// Fano variant: `F(q) = P[q' < q] + P[q]/2` in symbol order, truncated to
/// `ceil(-log2 P[q]) + 1` bits. The escape slot sits after every cell.
pub fn build_fano(pmf: &FinitePmf) -> Codebook {
    let (masses, residual) = fixed_point_masses(pmf);
    let mut slots: Vec<(Slot, u64)> = masses.into_iter().map(|(c, m)| (Slot::Symbol(c), m)).collect();
    if residual > 0 {
        slots.push((Slot::Escape, residual));
    }
    let mut cum: u64 = 0;
    let entries = slots
        .into_iter()
        .map(|(slot, m)| {
            let len = shannon_len(m) + 1;
            // 2F + m < 2^63 because F + m <= 2^62
            let mid = 2 * cum + m;
            let bits = mid >> (FRAC_BITS + 1 - len as u32);
            cum += m;
            Entry { slot, word: Codeword { bits, len }, mass: m }
        })
        .collect();
    Codebook::from_entries(CodeKind::Fano, entries)
}

/// Shannon variant: sort by decreasing mass (ties by ascending symbol, the
/// escape slot after real cells of equal mass), then truncate the
/// cumulative `F(q)` to `ceil(-log2 P[q])` bits.
pub fn build_shannon_sorted(pmf: &FinitePmf) -> Codebook {
    let (masses, residual) = fixed_point_masses(pmf);
    let mut slots: Vec<(Slot, u64)> = masses.into_iter().map(|(c, m)| (Slot::Symbol(c), m)).collect();
    if residual > 0 {
        slots.push((Slot::Escape, residual));
    }
    slots.sort_by(|a, b| {
        b.1.cmp(&a.1).then_with(|| match (a.0, b.0) {
            (Slot::Symbol(x), Slot::Symbol(y)) => x.cmp(&y),
            (Slot::Symbol(_), Slot::Escape) => std::cmp::Ordering::Less,
            (Slot::Escape, Slot::Symbol(_)) => std::cmp::Ordering::Greater,
            (Slot::Escape, Slot::Escape) => std::cmp::Ordering::Equal,
        })
    });
    let mut cum: u64 = 0;
    let entries = slots
        .into_iter()
        .map(|(slot, m)| {
            let len = shannon_len(m);
            let bits = if len == 0 { 0 } else { cum >> (FRAC_BITS - len as u32) };
            cum += m;
            Entry { slot, word: Codeword { bits, len }, mass: m }
        })
        .collect();
    Codebook::from_entries(CodeKind::ShannonSorted, entries)
}

/// A family of cell pmfs indexed by the dither realization.
pub trait ConditionalPmfModel {
    fn pmf_given(&self, d: f64) -> FinitePmf;
}

pub fn conditional_codebook<M: ConditionalPmfModel + ?Sized>(model: &M, d: f64, kind: CodeKind) -> Codebook {
    Codebook::build(&model.pmf_given(d), kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(book: &Codebook, cells: &[i64]) -> Vec<String> {
        cells.iter().map(|&c| book.word(c).unwrap().to_string()).collect()
    }

    fn abc() -> FinitePmf {
        FinitePmf::new(vec![0, 1, 2], vec![0.5, 0.25, 0.25], 0.0).unwrap()
    }

    #[test]
    fn fano_uniform_four() {
        let pmf = FinitePmf::from_weights(&[0, 1, 2, 3], &[1.0; 4]).unwrap();
        let book = build_fano(&pmf);
        assert_eq!(words(&book, &[0, 1, 2, 3]), ["001", "011", "101", "111"]);
        assert!(book.escape_word().is_none());
    }

    #[test]
    fn fano_single_symbol() {
        let pmf = FinitePmf::new(vec![5], vec![1.0], 0.0).unwrap();
        assert_eq!(words(&build_fano(&pmf), &[5]), ["1"]);
    }

    #[test]
    fn shannon_sorted_dyadic() {
        let book = build_shannon_sorted(&abc());
        assert_eq!(words(&book, &[0, 1, 2]), ["0", "10", "11"]);
        assert_eq!(book.kraft_sum(), 1.0);
        // full Kraft sum leaves no room for an escape word
        assert!(matches!(book.encode(9), Err(Error::Unencodable(9))));
    }

    #[test]
    fn shannon_uniform_two_is_optimal() {
        let pmf = FinitePmf::from_weights(&[0, 1], &[1.0, 1.0]).unwrap();
        let book = build_shannon_sorted(&pmf);
        assert_eq!(words(&book, &[0, 1]), ["0", "1"]);
        assert_eq!(book.expected_length(&pmf), 1.0);
        assert_eq!(pmf.entropy_bits(), 1.0);
    }

    #[test]
    fn sorting_tie_break_is_by_symbol() {
        let pmf = FinitePmf::from_weights(&[-1, 0, 1], &[1.0, 2.0, 1.0]).unwrap();
        let order: Vec<Slot> = build_shannon_sorted(&pmf).entries().map(|(s, _)| s).collect();
        assert_eq!(order, vec![Slot::Symbol(0), Slot::Symbol(-1), Slot::Symbol(1)]);
    }

    #[test]
    fn sequential_decode() {
        let book = build_shannon_sorted(&abc());
        let w = BitWriter::from_bit_string("01110").unwrap();
        let mut r = w.reader();
        let got: Vec<i64> = (0..3).map(|_| book.decode(&mut r).unwrap()).collect();
        assert_eq!(got, vec![0, 2, 1]);
        assert_eq!(r.position(), 5);
    }

    #[test]
    fn escape_roundtrip() {
        let pmf = FinitePmf::new(vec![0, 1, 2], vec![0.5, 0.25, 0.25 - 1e-6], 1e-6).unwrap();
        for kind in [CodeKind::Fano, CodeKind::ShannonSorted] {
            let book = Codebook::build(&pmf, kind);
            let esc = book.escape_word().unwrap();
            let w = book.encode(9).unwrap();
            let mut expect = BitWriter::new();
            expect.push(esc.bits, esc.len as u32);
            bits::write_gamma(&mut expect, 18);
            assert_eq!(w, expect);
            assert_eq!(book.decode(&mut w.reader()).unwrap(), 9);
            assert!(book.is_prefix_free());
        }
    }

    #[test]
    fn empty_stream_is_malformed() {
        let book = build_shannon_sorted(&abc());
        let w = BitWriter::new();
        assert!(matches!(book.decode(&mut w.reader()), Err(Error::MalformedStream(0))));
    }

    #[test]
    fn non_codeword_is_malformed() {
        // Fano on uniform-4 leaves 000 unused
        let pmf = FinitePmf::from_weights(&[0, 1, 2, 3], &[1.0; 4]).unwrap();
        let book = build_fano(&pmf);
        let w = BitWriter::from_bit_string("000").unwrap();
        assert!(matches!(book.decode(&mut w.reader()), Err(Error::MalformedStream(0))));
    }

    fn arb_pmf() -> impl Strategy<Value = FinitePmf> {
        (proptest::collection::vec(1e-9f64..1.0, 1..40), -50i64..50, 0.0f64..1e-6).prop_map(|(w, off, esc)| {
            let cells: Vec<i64> = (0..w.len() as i64).map(|i| i * 2 + off).collect();
            FinitePmf::from_weights_with_escape(&cells, &w, esc).unwrap()
        })
    }

    proptest! {
        #[test]
        fn books_are_prefix_free_and_bounded(pmf in arb_pmf()) {
            let h = pmf.entropy_bits();
            for (kind, slack) in [(CodeKind::Fano, 2.0), (CodeKind::ShannonSorted, 1.0)] {
                let book = Codebook::build(&pmf, kind);
                prop_assert!(book.is_prefix_free());
                prop_assert!(book.kraft_sum() <= 1.0);
                let el = book.expected_length(&pmf);
                prop_assert!(el >= h - 1e-9 && el <= h + slack + 1e-9, "{kind:?} E={el} H={h}");
            }
            prop_assert!(build_shannon_sorted(&pmf).is_sorted_by_mass());
        }

        #[test]
        fn stream_roundtrip(pmf in arb_pmf(), picks in proptest::collection::vec((0usize..1000, -200i64..200), 1..200)) {
            for kind in [CodeKind::Fano, CodeKind::ShannonSorted] {
                let book = Codebook::build(&pmf, kind);
                let mut w = BitWriter::new();
                let mut sent = Vec::new();
                for &(i, wild) in &picks {
                    let q = if i % 5 == 0 && book.escape_word().is_some() { wild } else { pmf.cells()[i % pmf.len()] };
                    book.encode_into(q, &mut w).unwrap();
                    sent.push(q);
                }
                let mut r = w.reader();
                for &q in &sent {
                    prop_assert_eq!(book.decode(&mut r).unwrap(), q);
                }
                prop_assert_eq!(r.remaining(), 0);
            }
        }
    }
}
