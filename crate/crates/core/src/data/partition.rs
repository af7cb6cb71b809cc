//! Non-IID client partitions.
//!
//! Label-restricted regimes give client `i` (1-indexed) the first
//! `max(1, round(C * i / n))` classes, so label sets are nested prefixes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::rng::{self, Purpose, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    OnlyLabelSkew,
    StepQuantity,
    StepLabelSkew,
    Dirichlet { alpha: f64 },
}

impl PartitionKind {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionKind::Iid => "iid",
            PartitionKind::OnlyLabelSkew => "only_label_skew",
            PartitionKind::StepQuantity => "step_quantity",
            PartitionKind::StepLabelSkew => "step_label_skew",
            PartitionKind::Dirichlet { .. } => "dirichlet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub n_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 {
            return Err(Error::invalid(
                "n_clients",
                format!("need at least 2 clients, got {}", self.n_clients),
            ));
        }
        if let PartitionKind::Dirichlet { alpha } = self.kind {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::invalid(
                    "partition.alpha",
                    format!("{alpha} must be positive"),
                ));
            }
        }
        Ok(())
    }
}

/// Label-prefix lengths `max(1, round(C * i / n))` for `i = 1..=n`.
pub fn label_counts_for(classes: usize, n_clients: usize) -> Vec<usize> {
    (1..=n_clients)
        .map(|i| {
            let l = (classes as f64 * i as f64 / n_clients as f64).round() as usize;
            l.clamp(1, classes)
        })
        .collect()
}

/// Splits `total` into integer parts proportional to `weights`
/// (largest remainder, ties to the lower index).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

fn shuffled_class_pools(ds: &Dataset, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut pools = ds.class_indices();
    for p in &mut pools {
        p.shuffle(rng);
    }
    pools
}

/// Per-class sample counts for a shard of `size` spread over `labels` classes.
fn per_class_demand(size: usize, labels: usize, class: usize) -> usize {
    if class >= labels {
        0
    } else {
        size / labels + usize::from(class < size % labels)
    }
}

fn exhausted_class(counts: &[usize], label_counts: &[usize], size: usize) -> Option<(usize, usize)> {
    counts.iter().enumerate().find_map(|(c, &have)| {
        let need: usize = label_counts.iter().map(|&l| per_class_demand(size, l, c)).sum();
        (need > have).then_some((c, need))
    })
}

fn draw(pools: &mut [Vec<usize>], class: usize, k: usize) -> Result<Vec<usize>> {
    let pool = &mut pools[class];
    if pool.len() < k {
        return Err(Error::ClassExhausted {
            class,
            needed: k,
            available: pool.len(),
        });
    }
    Ok(pool.split_off(pool.len() - k))
}

/// Equal-size shards where client `i` only sees the first `label_counts[i]`
/// classes. With `shard_size = None` the largest feasible size (capped at
/// `n / clients`) is used.
pub fn partition_by_label_counts(
    ds: &Dataset,
    label_counts: &[usize],
    shard_size: Option<usize>,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if let Some(&bad) = label_counts.iter().find(|&&l| l == 0 || l > ds.classes()) {
        return Err(Error::Partition(format!(
            "label count {bad} outside 1..={}",
            ds.classes()
        )));
    }
    let counts = ds.class_counts();
    let size = match shard_size {
        Some(s) => {
            if let Some((class, needed)) = exhausted_class(&counts, label_counts, s) {
                return Err(Error::ClassExhausted {
                    class,
                    needed,
                    available: counts[class],
                });
            }
            s
        }
        None => {
            let (mut lo, mut hi) = (0usize, ds.len() / label_counts.len());
            while lo < hi {
                let mid = (lo + hi).div_ceil(2);
                if exhausted_class(&counts, label_counts, mid).is_none() {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            lo
        }
    };
    if size == 0 {
        let (class, needed) = exhausted_class(&counts, label_counts, 1).unwrap_or((0, 1));
        return Err(Error::ClassExhausted {
            class,
            needed,
            available: counts[class],
        });
    }
    let mut rng = rng::stream(seed, Purpose::Partition, 0, 0);
    let mut pools = shuffled_class_pools(ds, &mut rng);
    let mut shards = Vec::with_capacity(label_counts.len());
    for &l in label_counts {
        let mut shard = Vec::with_capacity(size);
        for c in 0..l {
            shard.extend(draw(&mut pools, c, per_class_demand(size, l, c))?);
        }
        shards.push(shard);
    }
    Ok(shards)
}

fn iid(ds: &Dataset, n: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut all: Vec<usize> = (0..ds.len()).collect();
    all.shuffle(rng);
    let sizes = apportion(all.len(), &vec![1.0; n]);
    let mut out = Vec::with_capacity(n);
    let mut rest = all.as_slice();
    for s in sizes {
        let (head, tail) = rest.split_at(s);
        out.push(head.to_vec());
        rest = tail;
    }
    out
}

/// Per-class proportional split: every class is divided among the clients
/// according to `weights_for(class)`.
fn per_class_split(
    ds: &Dataset,
    n: usize,
    rng: &mut StreamRng,
    mut weights_for: impl FnMut(usize, &mut StreamRng) -> Vec<f64>,
) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); n];
    for (c, pool) in shuffled_class_pools(ds, rng).into_iter().enumerate() {
        let w = weights_for(c, rng);
        let parts = apportion(pool.len(), &w);
        let mut rest = pool.as_slice();
        for (shard, k) in shards.iter_mut().zip(parts) {
            let (head, tail) = rest.split_at(k);
            shard.extend_from_slice(head);
            rest = tail;
        }
    }
    shards
}

fn dirichlet_weights(n: usize, alpha: f64, rng: &mut StreamRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        w.iter_mut().for_each(|x| *x /= sum);
    } else {
        // every draw underflowed: all mass on one client
        w = vec![0.0; n];
        w[rng.random_range(0..n)] = 1.0;
    }
    w
}

/// Moves one sample from the largest shard into each empty shard.
fn fill_empty(shards: &mut [Vec<usize>]) -> Result<()> {
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("non-empty shard list");
        if shards[largest].len() < 2 {
            return Err(Error::Partition(
                "not enough samples to give every client at least one".into(),
            ));
        }
        let moved = shards[largest].pop().expect("largest shard non-empty");
        shards[empty].push(moved);
    }
    Ok(())
}

/// Sample indices per client.
pub fn partition_indices(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let n = spec.n_clients;
    if ds.len() < n {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {n} clients",
            ds.len()
        )));
    }
    let mut rng = rng::stream(spec.seed, Purpose::Partition, 0, 0);
    let classes = ds.classes();
    let shards = match spec.kind {
        PartitionKind::Iid => iid(ds, n, &mut rng),
        PartitionKind::OnlyLabelSkew => {
            return partition_by_label_counts(ds, &label_counts_for(classes, n), None, spec.seed)
        }
        PartitionKind::StepQuantity => {
            let w: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            per_class_split(ds, n, &mut rng, |_, _| w.clone())
        }
        PartitionKind::StepLabelSkew => {
            let labels = label_counts_for(classes, n);
            let counts = ds.class_counts();
            // each client takes `k` samples of each of its classes
            let (k, class) = (0..classes)
                .map(|c| {
                    let users = labels.iter().filter(|&&l| c < l).count();
                    (counts[c].checked_div(users).unwrap_or(usize::MAX), c)
                })
                .min()
                .expect("at least one class");
            if k == 0 {
                return Err(Error::ClassExhausted {
                    class,
                    needed: labels.iter().filter(|&&l| class < l).count(),
                    available: counts[class],
                });
            }
            let mut pools = shuffled_class_pools(ds, &mut rng);
            let mut shards = Vec::with_capacity(n);
            for &l in &labels {
                let mut shard = Vec::with_capacity(k * l);
                for c in 0..l {
                    shard.extend(draw(&mut pools, c, k)?);
                }
                shards.push(shard);
            }
            shards
        }
        PartitionKind::Dirichlet { alpha } => {
            let mut shards = per_class_split(ds, n, &mut rng, |_, r| dirichlet_weights(n, alpha, r));
            fill_empty(&mut shards)?;
            shards
        }
    };
    if shards.iter().any(Vec::is_empty) {
        return Err(Error::Partition(format!(
            "{} regime left a client without data",
            spec.kind.name()
        )));
    }
    Ok(shards)
}

/// Client shards for the given regime.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    partition_indices(ds, spec)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_blobs;

    fn spec(kind: PartitionKind, n: usize, seed: u64) -> PartitionSpec {
        PartitionSpec {
            kind,
            n_clients: n,
            seed,
        }
    }

    fn labels_of(ds: &Dataset, idx: &[usize]) -> Vec<usize> {
        let mut l: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    fn assert_disjoint(shards: &[Vec<usize>]) {
        let mut all: Vec<usize> = shards.concat();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "shards overlap");
    }

    fn assert_covers(shards: &[Vec<usize>], n: usize) {
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn label_counts_are_nested_prefix_lengths() {
        assert_eq!(label_counts_for(10, 5), vec![2, 4, 6, 8, 10]);
        assert_eq!(label_counts_for(10, 4), vec![3, 5, 8, 10]);
        assert_eq!(label_counts_for(2, 5), vec![1, 1, 1, 2, 2]);
    }

    #[test]
    fn apportion_sums_exactly() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(150, &[1.0, 2.0, 3.0, 4.0, 5.0]), vec![10, 20, 30, 40, 50]);
        assert_eq!(apportion(7, &[0.0, 1.0]), vec![0, 7]);
    }

    #[test]
    fn iid_two_clients() {
        let ds = generate_blobs(2, 2, 50, 3.0, 0).unwrap();
        let shards = partition_indices(&ds, &spec(PartitionKind::Iid, 2, 1)).unwrap();
        assert_eq!(shards[0].len(), 50);
        assert_eq!(shards[1].len(), 50);
        assert_covers(&shards, 100);
        for s in &shards {
            let ones = s.iter().filter(|&&i| ds.label(i) == 1).count() as f64 / s.len() as f64;
            assert!((ones - 0.5).abs() <= 0.1, "class share {ones}");
        }
    }

    #[test]
    fn step_quantity_sizes() {
        let ds = generate_blobs(10, 4, 150, 3.0, 0).unwrap();
        let shards = partition_indices(&ds, &spec(PartitionKind::StepQuantity, 5, 3)).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![100, 200, 300, 400, 500]);
        assert_covers(&shards, 1500);
        for s in &shards {
            let sub = ds.subset(s).unwrap();
            let counts = sub.class_counts();
            assert!(counts.iter().all(|&c| c == counts[0]));
        }
    }

    #[test]
    fn only_label_skew_nested_and_equal() {
        let ds = generate_blobs(10, 4, 100, 3.0, 0).unwrap();
        let shards = partition_indices(&ds, &spec(PartitionKind::OnlyLabelSkew, 5, 3)).unwrap();
        assert_disjoint(&shards);
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "{sizes:?}");
        let mut prev: Vec<usize> = Vec::new();
        for s in &shards {
            let l = labels_of(&ds, s);
            assert!(l.len() > prev.len() || l.len() == 10);
            assert!(prev.iter().all(|c| l.contains(c)));
            prev = l;
        }
        assert_eq!(prev.len(), 10);
    }

    #[test]
    fn explicit_label_counts_and_exhaustion() {
        let ds = generate_blobs(10, 4, 480, 3.0, 0).unwrap();
        let shards = partition_by_label_counts(&ds, &[2, 5, 10], Some(600), 0).unwrap();
        assert_eq!(shards.iter().map(Vec::len).collect::<Vec<_>>(), vec![600; 3]);
        assert_disjoint(&shards);
        let err = partition_by_label_counts(&ds, &[2, 5, 10], Some(601), 0).unwrap_err();
        assert!(matches!(err, Error::ClassExhausted { class: 0, .. }), "{err}");
    }

    #[test]
    fn step_label_skew_sizes_follow_label_counts() {
        let ds = generate_blobs(10, 4, 50, 3.0, 0).unwrap();
        let shards = partition_indices(&ds, &spec(PartitionKind::StepLabelSkew, 5, 3)).unwrap();
        assert_disjoint(&shards);
        // class 0 is shared by all five clients: k = 50 / 5
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![20, 40, 60, 80, 100]);
    }

    #[test]
    fn dirichlet_large_alpha_is_near_uniform() {
        for seed in 0..3 {
            let ds = generate_blobs(10, 4, 500, 3.0, seed).unwrap();
            let shards =
                partition_indices(&ds, &spec(PartitionKind::Dirichlet { alpha: 1000.0 }, 5, seed)).unwrap();
            assert_covers(&shards, 5000);
            for s in &shards {
                let sub = ds.subset(s).unwrap();
                for count in sub.class_counts() {
                    let share = count as f64 / 500.0;
                    assert!((share - 0.2).abs() <= 0.2 * 0.2, "share {share}");
                }
            }
        }
    }

    fn mean_max_class_share(classes: usize, clients: usize) -> f64 {
        let mut total = 0.0;
        let mut n = 0.0;
        for seed in 0..3 {
            let ds = generate_blobs(classes, 4, 100, 3.0, seed).unwrap();
            let shards =
                partition_indices(&ds, &spec(PartitionKind::Dirichlet { alpha: 0.01 }, clients, seed)).unwrap();
            assert!(shards.iter().all(|s| !s.is_empty()));
            assert_covers(&shards, classes * 100);
            for s in &shards {
                let counts = ds.subset(s).unwrap().class_counts();
                total += *counts.iter().max().unwrap() as f64 / s.len() as f64;
                n += 1.0;
            }
        }
        total / n
    }

    #[test]
    fn dirichlet_small_alpha_is_severely_skewed() {
        // Near-degenerate proportions hand each class to one client, so the
        // share only approaches 1 when clients outnumber classes.
        for (classes, clients) in [(2, 5), (3, 10), (10, 20)] {
            let share = mean_max_class_share(classes, clients);
            assert!(share >= 0.9, "{classes} classes / {clients} clients: {share}");
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let ds = generate_blobs(2, 2, 5, 3.0, 0).unwrap();
        assert!(partition(&ds, &spec(PartitionKind::Iid, 1, 0)).is_err());
        assert!(partition(&ds, &spec(PartitionKind::Dirichlet { alpha: -1.0 }, 2, 0)).is_err());
        assert!(partition(&ds, &spec(PartitionKind::Iid, 11, 0)).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = generate_blobs(5, 3, 40, 3.0, 0).unwrap();
        let s = spec(PartitionKind::Dirichlet { alpha: 0.5 }, 4, 8);
        assert_eq!(partition_indices(&ds, &s).unwrap(), partition_indices(&ds, &s).unwrap());
    }
}
