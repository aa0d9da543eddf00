use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    RandomSplit,
    ByLabel,
    ToyAligned,
}

/// Assignment of dataset indices to nodes; each point is held by `c`
/// distinct nodes and every shard has `c·S/M` points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
    c: usize,
    mode: PartitionMode,
}

impl Partition {
    /// Wraps explicit shards without checking them; see [`Partition::check`].
    pub fn from_shards(shards: Vec<Vec<usize>>, c: usize, mode: PartitionMode) -> Self {
        Partition { shards, c, mode }
    }

    pub fn m(&self) -> usize {
        self.shards.len()
    }

    pub fn replication(&self) -> usize {
        self.c
    }

    pub fn mode(&self) -> PartitionMode {
        self.mode
    }

    pub fn shard(&self, node: usize) -> &[usize] {
        &self.shards[node]
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn local_size(&self) -> usize {
        self.shards.first().map(Vec::len).unwrap_or(0)
    }

    /// Verifies equal shard sizes `C·S/M`, and that every point appears
    /// exactly `C` times, at distinct nodes.
    pub fn check(&self, s: usize) -> Result<(), String> {
        let m = self.m();
        if m == 0 || !(self.c * s).is_multiple_of(m) {
            return Err(format!("C·S = {} not divisible by M = {m}", self.c * s));
        }
        let local = self.c * s / m;
        let mut count = vec![0usize; s];
        for (j, shard) in self.shards.iter().enumerate() {
            if shard.len() != local {
                return Err(format!(
                    "node {j} holds {} points, expected {local}",
                    shard.len()
                ));
            }
            let mut sorted = shard.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(format!("node {j} holds a point twice"));
            }
            for &i in shard {
                if i >= s {
                    return Err(format!("index {i} out of range"));
                }
                count[i] += 1;
            }
        }
        if let Some(i) = count.iter().position(|&c| c != self.c) {
            return Err(format!(
                "point {i} appears {} times, expected {}",
                count[i], self.c
            ));
        }
        Ok(())
    }
}

fn check_feasible(s: usize, m: usize, c: usize) -> Result<(), DataError> {
    if m == 0 || c == 0 || c > m {
        return Err(DataError::InfeasibleReplication(format!(
            "need 1 <= C <= M, got C={c}, M={m}"
        )));
    }
    if !(c * s).is_multiple_of(m) {
        return Err(DataError::InfeasibleReplication(format!(
            "M={m} does not divide C·S={}",
            c * s
        )));
    }
    Ok(())
}

/// Random partition of `S` points over `M` nodes with replication `C`.
pub fn random_split(ds: &Dataset, m: usize, c: usize, seed: u64) -> Result<Partition, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_partition(ds.len(), m, c, &mut rng)
}

/// Draws a valid partition of `0..s`.
///
/// `C = 1` and `C = M` are sampled exactly uniformly. In between, points are
/// shuffled and laid out round-robin (copy `t` of the `i`-th point goes to
/// node `(i·C + t) mod M`, so copies always land on distinct nodes), nodes
/// are relabelled at random, and a chain of random swaps between shards
/// scrambles the layout.
pub fn random_partition<R: Rng + ?Sized>(
    s: usize,
    m: usize,
    c: usize,
    rng: &mut R,
) -> Result<Partition, DataError> {
    check_feasible(s, m, c)?;
    let mut points: Vec<usize> = (0..s).collect();
    points.shuffle(rng);
    let local = c * s / m;
    let shards: Vec<Vec<usize>> = if c == 1 {
        points.chunks(local).map(<[usize]>::to_vec).collect()
    } else if c == m {
        vec![points; m]
    } else {
        let mut shards = vec![Vec::with_capacity(local); m];
        for (i, &p) in points.iter().enumerate() {
            for t in 0..c {
                shards[(i * c + t) % m].push(p);
            }
        }
        shards.shuffle(rng);
        swap_chain(&mut shards, s, 10 * c * s, rng);
        shards
    };
    Ok(Partition::from_shards(
        shards,
        c,
        PartitionMode::RandomSplit,
    ))
}

/// Exchanges a point of shard `a` that `b` lacks with a point of `b` that `a`
/// lacks; both constraints (equal sizes, distinct holders) are preserved.
fn swap_chain<R: Rng + ?Sized>(shards: &mut [Vec<usize>], s: usize, steps: usize, rng: &mut R) {
    let m = shards.len();
    let mut holds = vec![false; m * s];
    for (j, sh) in shards.iter().enumerate() {
        for &p in sh {
            holds[j * s + p] = true;
        }
    }
    for _ in 0..steps {
        let a = rng.random_range(0..m);
        let b = rng.random_range(0..m);
        if a == b {
            continue;
        }
        let ia = rng.random_range(0..shards[a].len());
        let ib = rng.random_range(0..shards[b].len());
        let (pa, pb) = (shards[a][ia], shards[b][ib]);
        if holds[b * s + pa] || holds[a * s + pb] {
            continue;
        }
        shards[a][ia] = pb;
        shards[b][ib] = pa;
        holds[a * s + pa] = false;
        holds[b * s + pb] = false;
        holds[a * s + pb] = true;
        holds[b * s + pa] = true;
    }
}

/// Node `j` receives every point of the `j`-th smallest label. Uses the
/// dataset's class labels when present, otherwise the targets.
pub fn split_by_label(ds: &Dataset, m: usize) -> Result<Partition, DataError> {
    let keys: Vec<i64> = match ds.labels() {
        Some(l) => l.to_vec(),
        None => {
            let t = ds.targets();
            if t.iter().any(|v| v.fract() != 0.0) {
                return Err(DataError::LabelImbalance {
                    m,
                    detail: "targets are not integral class labels".into(),
                });
            }
            t.iter().map(|&v| v as i64).collect()
        }
    };
    let mut classes: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.into_iter().enumerate() {
        classes.entry(k).or_default().push(i);
    }
    if classes.len() != m {
        return Err(DataError::LabelImbalance {
            m,
            detail: format!("found {} distinct labels", classes.len()),
        });
    }
    let shards: Vec<Vec<usize>> = classes.into_values().collect();
    let size = shards[0].len();
    if shards.iter().any(|s| s.len() != size) {
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        return Err(DataError::LabelImbalance {
            m,
            detail: format!("class sizes {sizes:?}"),
        });
    }
    Ok(Partition::from_shards(shards, 1, PartitionMode::ByLabel))
}

/// Node `j` holds exactly point `j`.
pub fn toy_aligned(ds: &Dataset) -> Partition {
    Partition::from_shards(
        (0..ds.len()).map(|j| vec![j]).collect(),
        1,
        PartitionMode::ToyAligned,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(s: usize) -> Dataset {
        Dataset::from_rows((0..s).map(|i| i as f64).collect(), 1, vec![0.0; s]).unwrap()
    }

    #[test]
    fn simple_splits() {
        let d = ds(4);
        let p = random_split(&d, 2, 1, 3).unwrap();
        p.check(4).unwrap();
        let mut all: Vec<usize> = p.shards().concat();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let full = random_split(&d, 2, 2, 3).unwrap();
        for j in 0..2 {
            let mut s = full.shard(j).to_vec();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn seeds_give_different_valid_assignments() {
        let d = ds(12);
        let a = random_split(&d, 3, 1, 1).unwrap();
        let b = random_split(&d, 3, 1, 2).unwrap();
        a.check(12).unwrap();
        b.check(12).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, random_split(&d, 3, 1, 1).unwrap());
    }

    #[test]
    fn infeasible_replication() {
        let d = ds(5);
        assert!(matches!(
            random_split(&d, 2, 1, 0),
            Err(DataError::InfeasibleReplication(_))
        ));
        assert!(matches!(
            random_split(&d, 5, 6, 0),
            Err(DataError::InfeasibleReplication(_))
        ));
    }

    #[test]
    fn label_split() {
        let d = Dataset::from_rows(vec![0.0, 1.0, 2.0, 3.0], 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let p = split_by_label(&d, 2).unwrap();
        assert_eq!(p.shard(0), &[1, 3]);
        assert_eq!(p.shard(1), &[0, 2]);
        let three = Dataset::from_rows(vec![0.0; 3], 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            split_by_label(&three, 2),
            Err(DataError::LabelImbalance { .. })
        ));
    }

    #[test]
    fn middle_replication_swaps_preserve_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_partition(30, 6, 3, &mut rng).unwrap();
        p.check(30).unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn partitions_always_valid(seed in any::<u64>(), m in 1usize..7, c_raw in 1usize..7, unit in 1usize..5) {
            let c = 1 + (c_raw - 1) % m;
            let s = m * unit;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_partition(s, m, c, &mut rng).unwrap();
            prop_assert!(p.check(s).is_ok(), "{:?}", p.check(s));
        }
    }
}
