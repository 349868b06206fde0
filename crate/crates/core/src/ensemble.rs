use crate::error::{Error, Result};

/// N particles `(X, Y)` = (log-price, volatility factor) at one time.
///
/// Each particle carries the id of its random stream, so a permuted ensemble
/// keeps drawing the same increments per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    x1: Vec<f64>,
    x2: Vec<f64>,
    ids: Vec<u64>,
    time: f64,
    step: usize,
}

impl ParticleEnsemble {
    pub fn new(x1: Vec<f64>, x2: Vec<f64>, time: f64) -> Result<Self> {
        let ids = (0..x1.len() as u64).collect();
        Self::with_ids(x1, x2, ids, time, 0)
    }

    pub fn with_ids(x1: Vec<f64>, x2: Vec<f64>, ids: Vec<u64>, time: f64, step: usize) -> Result<Self> {
        if x1.is_empty() {
            return Err(Error::Input("ensemble must hold at least one particle".into()));
        }
        if x1.len() != x2.len() || x1.len() != ids.len() {
            return Err(Error::Input(format!(
                "ensemble arrays differ in length: x1 {}, x2 {}, ids {}",
                x1.len(),
                x2.len(),
                ids.len()
            )));
        }
        if let Some(i) = x1.iter().zip(&x2).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::Input(format!("particle {i} has a non-finite coordinate")));
        }
        if !time.is_finite() {
            return Err(Error::Input("ensemble time must be finite".into()));
        }
        Ok(Self { x1, x2, ids, time, step })
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_parts(x1: Vec<f64>, x2: Vec<f64>, ids: Vec<u64>, time: f64, step: usize) -> Self {
        debug_assert!(x1.len() == x2.len() && x1.len() == ids.len() && !x1.is_empty());
        Self { x1, x2, ids, time, step }
    }

    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    pub fn x2(&self) -> &[f64] {
        &self.x2
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Number of time steps taken to reach this state.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Reorders particles (with their stream ids) by `order[k]` = old index of new slot k.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::Input("permutation length differs from ensemble size".into()));
        }
        let mut seen = vec![false; order.len()];
        for &i in order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Input("not a permutation".into()));
            }
        }
        Ok(Self {
            x1: order.iter().map(|&i| self.x1[i]).collect(),
            x2: order.iter().map(|&i| self.x2[i]).collect(),
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            time: self.time,
            step: self.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(ParticleEnsemble::new(vec![], vec![], 0.0).is_err());
        assert!(ParticleEnsemble::new(vec![0.0], vec![0.0, 1.0], 0.0).is_err());
        assert!(ParticleEnsemble::new(vec![f64::NAN], vec![0.0], 0.0).is_err());
        assert!(ParticleEnsemble::new(vec![1.0], vec![0.0], 0.0).is_ok());
    }

    #[test]
    fn permutation_carries_ids() {
        let e = ParticleEnsemble::new(vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], 0.0).unwrap();
        let p = e.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.x1(), &[3.0, 1.0, 2.0]);
        assert_eq!(p.ids(), &[2, 0, 1]);
        assert!(e.permuted(&[0, 0, 1]).is_err());
    }
}
