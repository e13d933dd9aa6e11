//! Labeled feature vectors.
//!
//! A [`FeatureSet`] stores its vectors row-major in one contiguous `f32`
//! buffer. Storage precision is 32-bit; every consumer widens to `f64`
//! before doing arithmetic.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetRole {
    Gallery,
    Query,
    Train,
}

/// One labeled vector, detached from its set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub label: u32,
    pub subgroup: Option<u32>,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    role: SetRole,
    ids: Vec<u64>,
    labels: Vec<u32>,
    subgroups: Option<Vec<u32>>,
    data: Vec<f32>,
}

impl FeatureSet {
    /// Builds a set from column buffers, checking every invariant.
    pub fn new(
        dim: usize,
        role: SetRole,
        ids: Vec<u64>,
        labels: Vec<u32>,
        subgroups: Option<Vec<u32>>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let n = ids.len();
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "{} labels for {} records",
                labels.len(),
                n
            )));
        }
        if let Some(sg) = &subgroups {
            if sg.len() != n {
                return Err(Error::invalid(format!(
                    "{} subgroup tags for {} records",
                    sg.len(),
                    n
                )));
            }
        }
        if data.len() != n * dim {
            return Err(Error::Dimension {
                expected: n * dim,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite component in record {}",
                pos / dim
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate record id {id}")));
            }
        }
        Ok(Self {
            dim,
            role,
            ids,
            labels,
            subgroups,
            data,
        })
    }

    pub fn empty(dim: usize, role: SetRole) -> Result<Self> {
        Self::new(dim, role, Vec::new(), Vec::new(), None, Vec::new())
    }

    /// Builds a set from records. Subgroups are kept only if every record has one.
    pub fn from_records(dim: usize, role: SetRole, records: &[FeatureRecord]) -> Result<Self> {
        let mut ids = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        let tagged = records.iter().filter(|r| r.subgroup.is_some()).count();
        if tagged != 0 && tagged != records.len() {
            return Err(Error::invalid(
                "subgroup tags must be on all records or none",
            ));
        }
        let mut subgroups = (tagged > 0).then(|| Vec::with_capacity(records.len()));
        for r in records {
            if r.vector.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: r.vector.len(),
                });
            }
            ids.push(r.id);
            labels.push(r.label);
            if let (Some(sg), Some(tag)) = (subgroups.as_mut(), r.subgroup) {
                sg.push(tag);
            }
            data.extend_from_slice(&r.vector);
        }
        Self::new(dim, role, ids, labels, subgroups, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> SetRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn subgroups(&self) -> Option<&[u32]> {
        self.subgroups.as_deref()
    }

    /// Row-major `n × dim` components.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn record(&self, i: usize) -> FeatureRecord {
        FeatureRecord {
            id: self.ids[i],
            label: self.labels[i],
            subgroup: self.subgroups.as_ref().map(|s| s[i]),
            vector: self.row(i).to_vec(),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = FeatureRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    /// Widened copy of the vectors as an `n × dim` matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.dim), |(i, j)| {
            self.data[i * self.dim + j] as f64
        })
    }

    /// Same ids, labels and subgroups with new vectors (rounded to storage precision).
    pub fn with_vectors(&self, vectors: &Array2<f64>) -> Result<Self> {
        if vectors.nrows() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: vectors.nrows(),
            });
        }
        let dim = vectors.ncols();
        let data = vectors.iter().map(|&v| v as f32).collect();
        Self::new(
            dim,
            self.role,
            self.ids.clone(),
            self.labels.clone(),
            self.subgroups.clone(),
            data,
        )
    }

    /// Replaces the vector of record `i` in place with `src` (same dimension).
    pub(crate) fn set_row(&mut self, i: usize, src: &[f32]) {
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(src);
    }

    /// Subset of the records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("record index {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(
            self.dim,
            self.role,
            indices.iter().map(|&i| self.ids[i]).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.subgroups
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
            data,
        )
    }

    /// Number of distinct labels, assuming labels are `0..k`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }
}

/// Old-model and new-model features of the same items, aligned by position.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFeatureSet {
    pub old: FeatureSet,
    pub new: FeatureSet,
}

impl PairedFeatureSet {
    pub fn new(old: FeatureSet, new: FeatureSet) -> Result<Self> {
        let pair = Self { old, new };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.old.len() != self.new.len() {
            return Err(Error::invalid(format!(
                "paired sets differ in length: {} old vs {} new",
                self.old.len(),
                self.new.len()
            )));
        }
        if self.old.dim() != self.new.dim() {
            return Err(Error::Dimension {
                expected: self.new.dim(),
                got: self.old.dim(),
            });
        }
        for i in 0..self.old.len() {
            if self.old.ids[i] != self.new.ids[i] {
                return Err(Error::invalid(format!(
                    "paired sets disagree on id at position {i}"
                )));
            }
            if self.old.labels[i] != self.new.labels[i] {
                return Err(Error::invalid(format!(
                    "paired sets disagree on label of id {}",
                    self.old.ids[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureSet {
        FeatureSet::new(
            2,
            SetRole::Gallery,
            vec![10, 11, 12],
            vec![0, 1, 1],
            None,
            vec![0.0, 1.0, -1.0, 0.5, 2.0, -2.0],
        )
        .unwrap()
    }

    #[test]
    fn rows_and_records() {
        let s = tiny();
        assert_eq!(s.row(1), &[-1.0, 0.5]);
        let r = s.record(2);
        assert_eq!(r.id, 12);
        assert_eq!(r.vector, vec![2.0, -2.0]);
        let back = FeatureSet::from_records(2, SetRole::Gallery, &s.records().collect::<Vec<_>>());
        assert_eq!(back.unwrap(), s);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(FeatureSet::empty(0, SetRole::Query).is_err());
        assert!(FeatureSet::new(
            1,
            SetRole::Query,
            vec![1, 1],
            vec![0, 0],
            None,
            vec![0.0, 1.0]
        )
        .is_err());
        assert!(
            FeatureSet::new(1, SetRole::Query, vec![1], vec![0], None, vec![f32::NAN]).is_err()
        );
        assert!(FeatureSet::new(2, SetRole::Query, vec![1], vec![0], None, vec![0.0]).is_err());
    }

    #[test]
    fn paired_alignment_is_checked() {
        let a = tiny();
        let mut ids = a.ids().to_vec();
        ids.swap(0, 1);
        let b = FeatureSet::new(
            2,
            SetRole::Gallery,
            ids,
            a.labels().to_vec(),
            None,
            a.data().to_vec(),
        )
        .unwrap();
        assert!(PairedFeatureSet::new(a.clone(), b).is_err());
        assert!(PairedFeatureSet::new(a.clone(), a).is_ok());
    }
}
