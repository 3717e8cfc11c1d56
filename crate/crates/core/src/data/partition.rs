//! Assignment of samples (or feature columns) to clients.
//!
//! Horizontal index lists are stored in ascending order; training reshuffles
//! each client's shard per epoch, so sample order inside a plan carries no
//! meaning. Uneven splits give the remainder to lower-indexed clients.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    Iid,
    LabelSkew,
    QuantitySkew,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assignment {
    Horizontal(Vec<Vec<usize>>),
    Vertical(Vec<Range<usize>>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub scheme: Scheme,
    pub assignment: Assignment,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn clients(&self) -> usize {
        match &self.assignment {
            Assignment::Horizontal(v) => v.len(),
            Assignment::Vertical(v) => v.len(),
        }
    }

    pub fn indices(&self, client: usize) -> Option<&[usize]> {
        match &self.assignment {
            Assignment::Horizontal(v) => v.get(client).map(|x| x.as_slice()),
            Assignment::Vertical(_) => None,
        }
    }

    pub fn feature_range(&self, client: usize) -> Option<Range<usize>> {
        match &self.assignment {
            Assignment::Vertical(v) => v.get(client).cloned(),
            Assignment::Horizontal(_) => None,
        }
    }

    /// `n_k` per client for horizontal plans.
    pub fn shard_sizes(&self) -> Vec<usize> {
        match &self.assignment {
            Assignment::Horizontal(v) => v.iter().map(Vec::len).collect(),
            Assignment::Vertical(_) => Vec::new(),
        }
    }

    /// Subsamples every horizontal shard down to `sizes[k]`, layering a
    /// quantity skew on top of any other scheme.
    pub fn truncate_to(&self, sizes: &[usize], seed: u64) -> Result<PartitionPlan> {
        let Assignment::Horizontal(lists) = &self.assignment else {
            return Err(Error::InvalidArgument("only horizontal plans can be truncated".into()));
        };
        if sizes.len() != lists.len() {
            return Err(Error::InvalidArgument(format!("{} sizes for {} clients", sizes.len(), lists.len())));
        }
        let mut out = Vec::with_capacity(lists.len());
        for (k, (list, &size)) in lists.iter().zip(sizes).enumerate() {
            if size > list.len() {
                return Err(Error::InvalidArgument(format!("client {k} has {} samples, asked for {size}", list.len())));
            }
            let mut r = rng::stream(seed, &[rng::STREAM_PARTITION, 100, k as u64]);
            let mut picked: Vec<usize> = list.choose_multiple(&mut r, size).copied().collect();
            picked.sort_unstable();
            out.push(picked);
        }
        Ok(PartitionPlan { scheme: self.scheme, assignment: Assignment::Horizontal(out), seed })
    }
}

/// Sizes of `k` near-equal parts of `total`, larger parts first.
pub fn even_sizes(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| total / k + usize::from(i < total % k)).collect()
}

/// Each client draws `floor(n / k)` indices without replacement from the
/// remaining pool.
pub fn iid_partition(n: usize, k: usize, seed: u64) -> Result<PartitionPlan> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot give {k} clients a share of {n} samples")));
    }
    let per = n / k;
    let mut r = rng::stream(seed, &[rng::STREAM_PARTITION, 0]);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut lists = Vec::with_capacity(k);
    for _ in 0..k {
        let (chosen, rest) = pool.partial_shuffle(&mut r, per);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        pool = rest.to_vec();
        lists.push(chosen);
    }
    Ok(PartitionPlan { scheme: Scheme::Iid, assignment: Assignment::Horizontal(lists), seed })
}

/// Clients see only `classes_per_client` classes. Classes are shuffled and
/// dealt round-robin so client `k` holds shuffled classes
/// `k*cpc .. k*cpc + cpc` (mod C); each class's samples are split evenly
/// among the clients holding it.
pub fn label_skew_partition(
    labels: &[usize],
    classes: usize,
    k: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if k == 0 || classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::InvalidArgument(format!(
            "need k >= 1 and 1 <= classes_per_client <= {classes}"
        )));
    }
    if classes_per_client * k < classes {
        return Err(Error::InvalidArgument(format!(
            "{k} clients x {classes_per_client} classes cannot cover {classes} classes"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        by_class[y].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("class {empty} has no samples")));
    }
    let mut r = rng::stream(seed, &[rng::STREAM_PARTITION, 1]);
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut r);
    let holders: Vec<Vec<usize>> = {
        let mut h = vec![Vec::new(); classes];
        for client in 0..k {
            for j in 0..classes_per_client {
                let class = order[(client * classes_per_client + j) % classes];
                if !h[class].contains(&client) {
                    h[class].push(client);
                }
            }
        }
        h
    };
    let mut lists = vec![Vec::new(); k];
    for (class, mut members) in by_class.into_iter().enumerate() {
        members.shuffle(&mut r);
        let owners = &holders[class];
        let mut start = 0;
        for (owner, size) in owners.iter().zip(even_sizes(members.len(), owners.len())) {
            lists[*owner].extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }
    for l in &mut lists {
        l.sort_unstable();
    }
    Ok(PartitionPlan { scheme: Scheme::LabelSkew, assignment: Assignment::Horizontal(lists), seed })
}

/// Client `k` receives exactly `sizes[k]` random indices.
pub fn quantity_skew_partition(n: usize, k: usize, sizes: &[usize], seed: u64) -> Result<PartitionPlan> {
    if sizes.len() != k {
        return Err(Error::InvalidArgument(format!("{} sizes for {k} clients", sizes.len())));
    }
    let total: usize = sizes.iter().sum();
    if total > n {
        return Err(Error::InvalidArgument(format!("sizes sum to {total}, only {n} samples")));
    }
    let mut r = rng::stream(seed, &[rng::STREAM_PARTITION, 2]);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let mut lists = Vec::with_capacity(k);
    let mut start = 0;
    for &s in sizes {
        let mut l = perm[start..start + s].to_vec();
        l.sort_unstable();
        lists.push(l);
        start += s;
    }
    Ok(PartitionPlan { scheme: Scheme::QuantitySkew, assignment: Assignment::Horizontal(lists), seed })
}

/// Contiguous feature ranges covering `[0, d)`; all clients share every sample.
pub fn vertical_partition(d: usize, k: usize, seed: u64) -> Result<PartitionPlan> {
    if k == 0 || d < k {
        return Err(Error::InvalidArgument(format!("cannot split {d} features over {k} clients")));
    }
    let mut start = 0;
    let ranges = even_sizes(d, k)
        .into_iter()
        .map(|s| {
            let r = start..start + s;
            start += s;
            r
        })
        .collect();
    Ok(PartitionPlan { scheme: Scheme::Vertical, assignment: Assignment::Vertical(ranges), seed })
}
