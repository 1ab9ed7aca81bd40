//! Epoch-scoped memory bank of contrast keys.
//!
//! Clustered samples share one key, the renormalised mean of their features;
//! each outlier keeps its own feature as a key. Keys are plain data: they are
//! fed to the tape as detached constants, so no gradient ever reaches them.

use crate::diffcore::{ksum, l2_normalize, Tensor2};
use crate::error::{Error, Result};
use crate::pseudo::ClusterAssignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Centroid { cluster: usize },
    Outlier { sample: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankKey {
    pub id: usize,
    /// Unit-norm key vector.
    pub vector: Vec<f64>,
    pub kind: KeyKind,
    /// Sample ids this key stands for.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    keys: Vec<BankKey>,
    owner: Vec<usize>,
    momentum: f64,
}

/// Keys for one query: all bank keys, with the query's own key flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastKeys {
    /// `K × F`, one row per key.
    pub keys: Tensor2,
    pub self_key: usize,
}

/// `m·key + (1 − m)·query`, renormalised to unit length. `m = 1` returns
/// the key as is.
pub fn momentum_update(key: &[f64], query: &[f64], m: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::BadMomentum(m));
    }
    if key.len() != query.len() {
        return Err(Error::shape("momentum_update", key.len(), query.len()));
    }
    if m == 1.0 {
        return Ok(key.to_vec());
    }
    let mixed: Vec<f64> = key
        .iter()
        .zip(query)
        .map(|(k, q)| m * k + (1.0 - m) * q)
        .collect();
    l2_normalize(&mixed)
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::BadMomentum(m))
    }
}

impl MemoryBank {
    /// One centroid key per cluster, in cluster order, then one key per
    /// outlier in sample order.
    pub fn rebuild<V: AsRef<[f64]>>(
        features: &[V],
        assignment: &ClusterAssignment,
        momentum: f64,
    ) -> Result<Self> {
        check_momentum(momentum)?;
        if features.is_empty() {
            return Err(Error::EmptyInput("memory bank rebuild"));
        }
        if assignment.labels.len() != features.len() {
            return Err(Error::shape(
                "memory bank rebuild",
                features.len(),
                assignment.labels.len(),
            ));
        }
        let dim = features[0].as_ref().len();
        if let Some(f) = features.iter().find(|f| f.as_ref().len() != dim) {
            return Err(Error::shape("memory bank features", dim, f.as_ref().len()));
        }
        let mut keys = Vec::new();
        let mut owner = vec![usize::MAX; features.len()];
        for (cluster, members) in assignment.members().into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::EmptyInput("cluster without members"));
            }
            let mean: Vec<f64> = (0..dim)
                .map(|j| {
                    ksum(members.iter().map(|&i| features[i].as_ref()[j])) / members.len() as f64
                })
                .collect();
            let id = keys.len();
            for &i in &members {
                owner[i] = id;
            }
            keys.push(BankKey {
                id,
                vector: l2_normalize(&mean)?,
                kind: KeyKind::Centroid { cluster },
                members,
            });
        }
        for (sample, label) in assignment.labels.iter().enumerate() {
            if label.is_none() {
                let id = keys.len();
                owner[sample] = id;
                keys.push(BankKey {
                    id,
                    vector: l2_normalize(features[sample].as_ref())?,
                    kind: KeyKind::Outlier { sample },
                    members: vec![sample],
                });
            }
        }
        Ok(Self {
            keys,
            owner,
            momentum,
        })
    }

    pub fn keys(&self) -> &[BankKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn dim(&self) -> usize {
        self.keys.first().map_or(0, |k| k.vector.len())
    }

    /// Index of the key owning `sample`.
    pub fn key_of(&self, sample: usize) -> Result<usize> {
        self.owner
            .get(sample)
            .copied()
            .ok_or(Error::UnknownSample(sample))
    }

    /// All keys as a `K × F` matrix.
    pub fn key_matrix(&self) -> Tensor2 {
        let rows: Vec<&[f64]> = self.keys.iter().map(|k| k.vector.as_slice()).collect();
        Tensor2::from_rows(&rows).expect("keys share one width")
    }

    pub fn contrast_keys(&self, exclude: usize) -> Result<ContrastKeys> {
        if self.keys.is_empty() {
            return Err(Error::EmptyInput("contrast_keys"));
        }
        Ok(ContrastKeys {
            keys: self.key_matrix(),
            self_key: self.key_of(exclude)?,
        })
    }

    /// Moves the key owning `sample` towards `query` by the bank momentum.
    pub fn update(&mut self, sample: usize, query: &[f64]) -> Result<()> {
        let k = self.key_of(sample)?;
        let key = &mut self.keys[k];
        key.vector = momentum_update(&key.vector, query, self.momentum)?;
        Ok(())
    }
}
