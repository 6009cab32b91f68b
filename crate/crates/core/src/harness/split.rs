//! Stratified 80:10:10 splits and k-fold plans.
//!
//! Split sizes: train is `floor(0.8 n)`; the remainder is halved with any
//! odd sample going to test. Per-class quotas are apportioned by largest
//! remainder, so every split is within one sample of the global class ratio.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::Label;

const SPLIT_STREAM: u64 = 0x5350_4c54;
const FOLD_STREAM: u64 = 0x464f_4c44;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Panics-free leakage check: disjoint and covering `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        check_partition(&[&self.train, &self.val, &self.test], n)
    }
}

pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let rest = n - train;
    (train, rest / 2, rest - rest / 2)
}

/// Largest-remainder apportionment of `total` over `weights` (ties to the
/// lower index).
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let mut rema: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| (w * total % sum, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        out[i] += 1;
    }
    out
}

fn shuffled_classes(labels: &[Label], stream: &mut RngStream) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    by_class
        .into_values()
        .map(|mut v| {
            stream.shuffle(&mut v);
            v
        })
        .collect()
}

pub fn split_80_10_10(labels: &[Label], seed: u64) -> Result<SplitPlan> {
    let n = labels.len();
    if n < 10 {
        return Err(Error::Split(format!("need at least 10 rows, got {n}")));
    }
    let mut stream = RngStream::new(seed, SPLIT_STREAM);
    let classes = shuffled_classes(labels, &mut stream);
    if let Some(c) = classes.iter().find(|c| c.len() < 3) {
        return Err(Error::Split(format!("class `{}` has only {} rows", labels[c[0]], c.len())));
    }
    if classes.len() < 2 {
        return Err(Error::Split("only one class present".into()));
    }
    let (n_train, n_val, _) = split_sizes(n);
    let counts: Vec<usize> = classes.iter().map(Vec::len).collect();
    let train_q = apportion(n_train, &counts);
    let left: Vec<usize> = counts.iter().zip(&train_q).map(|(c, t)| c - t).collect();
    let val_q = apportion(n_val, &left);
    let mut plan = SplitPlan {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (k, idx) in classes.iter().enumerate() {
        plan.train.extend(&idx[..train_q[k]]);
        plan.val.extend(&idx[train_q[k]..train_q[k] + val_q[k]]);
        plan.test.extend(&idx[train_q[k] + val_q[k]..]);
    }
    for part in [&mut plan.train, &mut plan.val, &mut plan.test] {
        stream.shuffle(part);
    }
    plan.check_partition(n)?;
    Ok(plan)
}

/// Patient-disjoint variant: whole patients are assigned to splits in a
/// seeded order until each split reaches its target size.
pub fn split_by_patient(labels: &[Label], patients: &[String], seed: u64) -> Result<SplitPlan> {
    let n = labels.len();
    if n < 10 || patients.len() != n {
        return Err(Error::Split("need >= 10 rows with one patient id each".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        groups.entry(p.as_str()).or_default().push(i);
    }
    if groups.len() < 3 {
        return Err(Error::Split(format!("{} patients cannot fill three splits", groups.len())));
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    let mut stream = RngStream::new(seed, SPLIT_STREAM ^ 1);
    stream.shuffle(&mut order);
    let (n_train, n_val, _) = split_sizes(n);
    let mut plan = SplitPlan {
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let last = order.len() - 1;
    for (gi, g) in order.into_iter().enumerate() {
        let target = if plan.train.len() < n_train && gi + 2 <= last {
            &mut plan.train
        } else if (plan.val.len() < n_val || plan.val.is_empty()) && gi < last {
            &mut plan.val
        } else {
            &mut plan.test
        };
        target.extend(g);
    }
    plan.check_partition(n)?;
    Ok(plan)
}

fn check_partition(parts: &[&Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for part in parts {
        for &i in part.iter() {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Split(format!("index {i} repeated or out of range")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Split(format!("index {i} not assigned")));
    }
    Ok(())
}

/// How a k-fold plan carves up the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvMode {
    /// `k` equal folds; fold `i` validates on part `i`.
    Partition,
    /// Ten equal parts; fold `i < k` validates on part `i` and trains on the
    /// other nine (a 9:1 split per fold).
    HeldOutTenths,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub seed: u64,
    pub k: usize,
    pub mode: CvMode,
    /// Stratified parts of the pool (k of them, or ten).
    pub parts: Vec<Vec<usize>>,
    pub folds: Vec<Fold>,
}

/// Stratified k-fold plan over pool indices `0..labels.len()`.
pub fn kfold_plan(labels: &[Label], k: usize, seed: u64, mode: CvMode) -> Result<CvPlan> {
    let n = labels.len();
    let n_parts = match mode {
        CvMode::Partition => k,
        CvMode::HeldOutTenths => 10,
    };
    if k < 2 {
        return Err(Error::Split(format!("k = {k} must be >= 2")));
    }
    if k > n || n_parts > n {
        return Err(Error::Split(format!("k = {k} exceeds pool size {n}")));
    }
    if mode == CvMode::HeldOutTenths && k > 10 {
        return Err(Error::Split("held-out-tenths mode supports k <= 10".into()));
    }
    let mut stream = RngStream::new(seed, FOLD_STREAM);
    let order: Vec<usize> = shuffled_classes(labels, &mut stream).into_iter().flatten().collect();
    let mut parts = vec![Vec::new(); n_parts];
    for (j, i) in order.into_iter().enumerate() {
        parts[j % n_parts].push(i);
    }
    let folds = (0..k)
        .map(|f| Fold {
            val: parts[f].clone(),
            train: parts.iter().enumerate().filter(|(p, _)| *p != f).flat_map(|(_, v)| v.iter().copied()).collect(),
        })
        .collect();
    let refs: Vec<&Vec<usize>> = parts.iter().collect();
    check_partition(&refs, n)?;
    Ok(CvPlan {
        seed,
        k,
        mode,
        parts,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pos: usize, neg: usize) -> Vec<Label> {
        let mut v = vec![Label::Parasitized; pos];
        v.extend(vec![Label::Uninfected; neg]);
        v
    }

    #[test]
    fn nih_sizes() {
        let l = labels(13_779, 13_779);
        let p = split_80_10_10(&l, 0).unwrap();
        assert_eq!(p.sizes(), (22_046, 2_756, 2_756));
        for part in [&p.train, &p.val, &p.test] {
            let pos = part.iter().filter(|&&i| l[i].is_positive()).count() as f64;
            assert!((pos - part.len() as f64 / 2.0).abs() <= 1.0);
        }
        assert_eq!(p, split_80_10_10(&l, 0).unwrap());
        assert_ne!(p, split_80_10_10(&l, 1).unwrap());
    }

    #[test]
    fn minimal_split() {
        assert_eq!(split_80_10_10(&labels(5, 5), 3).unwrap().sizes(), (8, 1, 1));
        assert!(matches!(split_80_10_10(&labels(2, 8), 0), Err(Error::Split(_))));
        assert!(matches!(split_80_10_10(&labels(2, 2), 0), Err(Error::Split(_))));
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(8, &[5, 5]), vec![4, 4]);
        assert_eq!(apportion(1, &[1, 1]), vec![1, 0]);
        assert_eq!(apportion(7, &[3, 6]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn tenths_mode_fold_sizes() {
        let l = labels(13_779, 13_779);
        let p = kfold_plan(&l, 5, 0, CvMode::HeldOutTenths).unwrap();
        for f in &p.folds {
            assert_eq!((f.train.len(), f.val.len()), (24_802, 2_756));
        }
    }

    #[test]
    fn partition_mode() {
        let p = kfold_plan(&labels(5, 5), 5, 0, CvMode::Partition).unwrap();
        assert!(p.folds.iter().all(|f| f.val.len() == 2 && f.train.len() == 8));
        let mut all: Vec<usize> = p.folds.iter().flat_map(|f| f.val.clone()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(kfold_plan(&labels(2, 2), 5, 0, CvMode::Partition), Err(Error::Split(_))));
    }

    #[test]
    fn patient_disjoint() {
        let l = labels(50, 50);
        let patients: Vec<String> = (0..100).map(|i| format!("P{}", i / 7)).collect();
        let p = split_by_patient(&l, &patients, 0).unwrap();
        let owner = |set: &Vec<usize>| set.iter().map(|&i| patients[i].clone()).collect::<std::collections::HashSet<_>>();
        assert!(owner(&p.train).is_disjoint(&owner(&p.test)));
        assert!(owner(&p.train).is_disjoint(&owner(&p.val)));
        assert!(!p.val.is_empty() && !p.test.is_empty());
    }
}
