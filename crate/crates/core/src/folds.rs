//! Fold plans for cross-fitting and Super Learner cross-validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Assignment of records to `k` folds. Fold indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl FoldPlan {
    /// Fold plan from an explicit assignment (zero-based fold labels `0..k`).
    pub fn from_assignment(k: usize, assignment: Vec<usize>) -> Result<FoldPlan> {
        if k < 2 {
            return Err(Error::invalid(format!("fold count must satisfy K >= 2, got {k}")));
        }
        if assignment.iter().any(|&f| f >= k) {
            return Err(Error::invalid("fold label out of range"));
        }
        for f in 0..k {
            if !assignment.contains(&f) {
                return Err(Error::invalid(format!("fold {f} is empty")));
            }
        }
        Ok(FoldPlan {
            k,
            assignment,
            seed: 0,
        })
    }

    /// Random balanced folds without stratification.
    pub fn random(n: usize, k: usize, rng: &mut RngStream) -> Result<FoldPlan> {
        if k < 2 {
            return Err(Error::invalid(format!("fold count must satisfy K >= 2, got {k}")));
        }
        if k > n {
            return Err(Error::invalid(format!("K = {k} exceeds record count {n}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let mut assignment = vec![0; n];
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = pos % k;
        }
        Ok(FoldPlan {
            k,
            assignment,
            seed: rng.root_seed(),
        })
    }

    /// Folds stratified by a binary label: within each label the fold sizes differ
    /// by at most one, and every fold holds at least one record of each label.
    pub fn stratified(labels: &[f64], k: usize, rng: &mut RngStream) -> Result<FoldPlan> {
        if k < 2 {
            return Err(Error::invalid(format!("fold count must satisfy K >= 2, got {k}")));
        }
        let ones: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1.0).collect();
        let zeros: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1.0).collect();
        let smaller = ones.len().min(zeros.len());
        if k > smaller {
            return Err(Error::invalid(format!(
                "K = {k} exceeds the smaller exposure arm ({smaller} records)"
            )));
        }
        let mut assignment = vec![0; labels.len()];
        let mut offset = 0;
        for mut arm in [ones, zeros] {
            rng.shuffle(&mut arm);
            for (pos, &i) in arm.iter().enumerate() {
                assignment[i] = (offset + pos) % k;
            }
            // continue the rotation so overall fold sizes stay balanced too
            offset = (offset + arm.len()) % k;
        }
        Ok(FoldPlan {
            k,
            assignment,
            seed: rng.root_seed(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    /// Record indices in fold `f`.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == f).collect()
    }

    /// Record indices outside fold `f` (the training complement).
    pub fn complement(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != f).collect()
    }
}

/// Stratified cross-fitting folds over an exposure vector.
pub fn make_folds(n: usize, exposure: &[f64], k: usize, rng: &mut RngStream) -> Result<FoldPlan> {
    if exposure.len() != n {
        return Err(Error::invalid("exposure length does not match n"));
    }
    FoldPlan::stratified(exposure, k, rng)
}
