//! Bit-level I/O: big-endian within bytes, final byte zero-padded.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitWriter {
    bytes: Vec<u8>,
    len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `len` bits of `bits`, most significant first.
    pub fn push(&mut self, bits: u64, len: u32) {
        debug_assert!(len <= 64);
        let mut remaining = len;
        while remaining > 0 {
            let used = (self.len % 8) as u32;
            if used == 0 {
                self.bytes.push(0);
            }
            let free = 8 - used;
            let take = free.min(remaining);
            let chunk = (bits >> (remaining - take)) & ((1u64 << take) - 1);
            *self.bytes.last_mut().unwrap() |= (chunk << (free - take)) as u8;
            remaining -= take;
            self.len += take as usize;
        }
    }

    pub fn push_bit(&mut self, bit: bool) {
        self.push(bit as u64, 1);
    }

    pub fn append(&mut self, other: &BitWriter) {
        let mut r = other.reader();
        while r.remaining() > 0 {
            let n = r.remaining().min(64) as u32;
            let v = r.read(n).unwrap();
            self.push(v, n);
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader::new(&self.bytes, self.len)
    }

    /// Bits as a `0`/`1` string.
    pub fn to_bit_string(&self) -> String {
        let mut r = self.reader();
        (0..self.len).map(|_| if r.read(1).unwrap() == 1 { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Option<Self> {
        let mut w = Self::new();
        for c in s.chars() {
            match c {
                '0' => w.push_bit(false),
                '1' => w.push_bit(true),
                _ => return None,
            }
        }
        Some(w)
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    len: usize,
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8], len: usize) -> Self {
        assert!(len <= bytes.len() * 8, "bit length exceeds buffer");
        Self { bytes, len, pos: 0 }
    }

    pub fn at(bytes: &'a [u8], len: usize, pos: usize) -> Self {
        let mut r = Self::new(bytes, len);
        r.pos = pos.min(len);
        r
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.len - self.pos
    }

    /// Next 64 bits left-aligned, zero-filled past the end.
    pub fn peek64(&self) -> u64 {
        let byte = self.pos / 8;
        let mut acc: u128 = 0;
        for i in 0..9 {
            acc = (acc << 8) | *self.bytes.get(byte + i).unwrap_or(&0) as u128;
        }
        let shift = 72 - 64 - (self.pos % 8);
        let v = (acc >> shift) as u64;
        // mask bits past the logical end
        let rem = self.remaining();
        if rem >= 64 {
            v
        } else if rem == 0 {
            0
        } else {
            v & !(u64::MAX >> rem)
        }
    }

    pub fn advance(&mut self, n: usize) -> Result<()> {
        if n > self.remaining() {
            return Err(Error::MalformedStream(self.pos));
        }
        self.pos += n;
        Ok(())
    }

    pub fn read(&mut self, n: u32) -> Result<u64> {
        if n == 0 {
            return Ok(0);
        }
        let v = self.peek64() >> (64 - n);
        self.advance(n as usize)?;
        Ok(v)
    }
}

#[inline]
pub fn zigzag(q: i64) -> u64 {
    ((q << 1) ^ (q >> 63)) as u64
}

#[inline]
pub fn unzigzag(z: u64) -> i64 {
    ((z >> 1) as i64) ^ -((z & 1) as i64)
}

/// Elias gamma of `n + 1`, so zero is representable.
pub fn write_gamma(w: &mut BitWriter, n: u64) {
    assert!(n < u64::MAX, "gamma argument out of range");
    let v = n + 1;
    let nbits = 64 - v.leading_zeros();
    w.push(0, nbits - 1);
    w.push(v, nbits);
}

pub fn read_gamma(r: &mut BitReader<'_>) -> Result<u64> {
    let start = r.position();
    let zeros = r.peek64().leading_zeros();
    if zeros >= 63 {
        return Err(Error::MalformedStream(start));
    }
    r.advance(zeros as usize).map_err(|_| Error::MalformedStream(start))?;
    let v = r.read(zeros + 1).map_err(|_| Error::MalformedStream(start))?;
    Ok(v - 1)
}

pub fn gamma_len(n: u64) -> u32 {
    2 * (64 - (n + 1).leading_zeros()) - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zigzag_order() {
        let got: Vec<u64> = [0, -1, 1, -2, 2].iter().map(|&q| zigzag(q)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
        assert_eq!(zigzag(9), 18);
        assert_eq!(unzigzag(zigzag(i64::MIN)), i64::MIN);
    }

    #[test]
    fn gamma_codes() {
        let mut w = BitWriter::new();
        write_gamma(&mut w, 0);
        write_gamma(&mut w, 3);
        assert_eq!(w.to_bit_string(), "1".to_owned() + "00100");
        let mut r = w.reader();
        assert_eq!(read_gamma(&mut r).unwrap(), 0);
        assert_eq!(read_gamma(&mut r).unwrap(), 3);
        assert_eq!(gamma_len(3), 5);
    }

    #[test]
    fn byte_layout_is_big_endian() {
        let w = BitWriter::from_bit_string("1011").unwrap();
        assert_eq!(w.as_bytes(), &[0b1011_0000]);
    }

    #[test]
    fn truncated_gamma_is_malformed() {
        let w = BitWriter::from_bit_string("0001").unwrap();
        assert!(matches!(read_gamma(&mut w.reader()), Err(Error::MalformedStream(0))));
    }

    proptest! {
        #[test]
        fn mixed_width_roundtrip(items in proptest::collection::vec((any::<u64>(), 0u32..=64), 0..50)) {
            let mut w = BitWriter::new();
            for &(v, n) in &items {
                let v = if n == 64 { v } else { v & ((1u64 << n) - 1) };
                w.push(v, n);
            }
            let mut r = w.reader();
            for &(v, n) in &items {
                let v = if n == 64 { v } else { v & ((1u64 << n) - 1) };
                prop_assert_eq!(r.read(n).unwrap(), v);
            }
            prop_assert_eq!(r.remaining(), 0);
        }

        #[test]
        fn gamma_roundtrip(q in any::<i64>().prop_filter("finite range", |q| q.unsigned_abs() < 1 << 62)) {
            let mut w = BitWriter::new();
            write_gamma(&mut w, zigzag(q));
            prop_assert_eq!(w.len() as u32, gamma_len(zigzag(q)));
            prop_assert_eq!(unzigzag(read_gamma(&mut w.reader()).unwrap()), q);
        }
    }
}
