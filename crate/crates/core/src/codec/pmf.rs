use crate::error::{Error, Result};
use crate::stats::{entropy_bits, KahanSum};

/// Finitely supported model over quantizer cells plus a lumped tail.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePmf {
    cells: Vec<i64>,
    probs: Vec<f64>,
    escape_mass: f64,
}

const NORM_TOL: f64 = 1e-12;

impl FinitePmf {
    /// Cells must be strictly increasing and probabilities positive;
    /// `sum(probs) + escape_mass` must equal one within 1e-12.
    pub fn new(cells: Vec<i64>, probs: Vec<f64>, escape_mass: f64) -> Result<Self> {
        if cells.len() != probs.len() {
            return Err(Error::InvalidConfig("cells and probs differ in length".into()));
        }
        if cells.is_empty() {
            return Err(Error::InvalidConfig("empty pmf".into()));
        }
        if cells.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("cells must be strictly increasing".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::InvalidConfig("probabilities must be positive".into()));
        }
        if !(escape_mass.is_finite() && escape_mass >= 0.0) {
            return Err(Error::InvalidConfig("escape mass must be non-negative".into()));
        }
        let total: KahanSum = probs.iter().copied().chain([escape_mass]).collect();
        if (total.value() - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidConfig(format!("pmf sums to {}", total.value())));
        }
        Ok(Self { cells, probs, escape_mass })
    }

    /// Normalises non-negative weights; zero weights are dropped.
    pub fn from_weights(cells: &[i64], weights: &[f64]) -> Result<Self> {
        Self::from_weights_with_escape(cells, weights, 0.0)
    }

    /// As [`from_weights`](Self::from_weights), with `escape` expressed in
    /// the same units as the weights.
    pub fn from_weights_with_escape(cells: &[i64], weights: &[f64], escape: f64) -> Result<Self> {
        if cells.len() != weights.len() {
            return Err(Error::InvalidConfig("cells and weights differ in length".into()));
        }
        let mut pairs: Vec<(i64, f64)> =
            cells.iter().copied().zip(weights.iter().copied()).filter(|&(_, w)| w > 0.0).collect();
        pairs.sort_by_key(|&(c, _)| c);
        let total = pairs.iter().map(|&(_, w)| w).chain([escape.max(0.0)]).collect::<KahanSum>().value();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidConfig("weights must have positive finite total".into()));
        }
        let cells: Vec<i64> = pairs.iter().map(|&(c, _)| c).collect();
        let probs: Vec<f64> = pairs.iter().map(|&(_, w)| w / total).collect();
        let s: KahanSum = probs.iter().copied().collect();
        let esc = (1.0 - s.value()).max(0.0);
        Self::new(cells, probs, esc)
    }

    pub fn cells(&self) -> &[i64] {
        &self.cells
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn escape_mass(&self) -> f64 {
        self.escape_mass
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn prob(&self, cell: i64) -> f64 {
        self.cells.binary_search(&cell).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    /// Entropy in bits of the listed cells, the tail counted as one atom.
    pub fn entropy_bits(&self) -> f64 {
        entropy_bits(&self.probs) + entropy_bits(&[self.escape_mass])
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.cells.iter().copied().zip(self.probs.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(FinitePmf::new(vec![0, 1], vec![0.5, 0.5], 0.0).is_ok());
        assert!(FinitePmf::new(vec![1, 0], vec![0.5, 0.5], 0.0).is_err());
        assert!(FinitePmf::new(vec![0, 1], vec![0.5, 0.4], 0.0).is_err());
        assert!(FinitePmf::new(vec![0, 1], vec![0.5, 0.0], 0.5).is_err());
    }

    #[test]
    fn from_weights_sorts_and_drops_zeros() {
        let p = FinitePmf::from_weights(&[3, -1, 7], &[1.0, 3.0, 0.0]).unwrap();
        assert_eq!(p.cells(), &[-1, 3]);
        assert_eq!(p.prob(-1), 0.75);
        assert_eq!(p.prob(7), 0.0);
    }
}
