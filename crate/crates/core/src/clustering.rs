//! Bottom-up merging of usage embeddings with a neighbor-based distance.
//!
//! Every usage starts as its own cluster, centred on its embedding. While
//! the closest pair of clusters is nearer than `t_sc`, the pair is replaced
//! by one cluster whose centre is the midpoint of the two centres (or the
//! size-weighted mean). The distance between two centres is not measured
//! directly: each centre is replaced by its `k` nearest vocabulary words,
//! and the distance is the mean cosine distance of the minimum-cost
//! one-to-one matching between the two word sets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::bipartite_match_cost;
use crate::embedding::{self, knn, EmbeddingTable};
use crate::error::{Error, Result};

/// Number of nearest neighbors used when none is configured.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidUpdate {
    /// `(p_i + p_j) / 2`, regardless of cluster sizes.
    #[default]
    Midpoint,
    /// Mean of all member usage vectors.
    SizeWeighted,
}

impl FromStr for CentroidUpdate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "midpoint" => Ok(Self::Midpoint),
            "size_weighted" | "size-weighted" => Ok(Self::SizeWeighted),
            other => Err(format!("unknown centroid update `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    /// Neighbor distance between the two cluster centres.
    #[default]
    Centroid,
    /// Mean neighbor distance over all cross-cluster usage pairs.
    AverageUsage,
}

impl FromStr for Linkage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "centroid" => Ok(Self::Centroid),
            "average_usage" | "average-usage" => Ok(Self::AverageUsage),
            other => Err(format!("unknown linkage `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    /// Merge threshold: pairs strictly closer than this are merged.
    pub t_sc: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub centroid_update: CentroidUpdate,
    #[serde(default)]
    pub linkage: Linkage,
    /// Drop the target lemma itself from every neighbor list.
    #[serde(default = "default_true")]
    pub exclude_lemma: bool,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_true() -> bool {
    true
}

impl ClusterParams {
    pub fn new(t_sc: f64) -> Self {
        Self {
            t_sc,
            k: DEFAULT_K,
            centroid_update: CentroidUpdate::default(),
            linkage: Linkage::default(),
            exclude_lemma: true,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_sc.is_nan() || self.t_sc < 0.0 {
            return Err(Error::Invalid(format!(
                "t_sc must be a non-negative number, got {}",
                self.t_sc
            )));
        }
        if self.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn exclusions(&self, lemma: &str) -> HashSet<String> {
        if self.exclude_lemma {
            HashSet::from([lemma.to_string()])
        } else {
            HashSet::new()
        }
    }
}

impl fmt::Display for ClusterParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t_sc={} k={} centroid_update={:?} linkage={:?} exclude_lemma={}",
            self.t_sc, self.k, self.centroid_update, self.linkage, self.exclude_lemma
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: usize,
    /// Sorted.
    pub usage_ids: Vec<String>,
    /// Mean of the member usage embeddings.
    pub centroid: Vec<f64>,
    /// Centre maintained by the merge loop (equal to `centroid` under
    /// size-weighted updates and for singletons).
    pub merge_centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub lemma: String,
    pub params: ClusterParams,
    pub clusters: Vec<Cluster>,
    /// Number of merges performed.
    #[serde(default)]
    pub merges: usize,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster_of(&self, usage_id: &str) -> Option<&Cluster> {
        self.clusters
            .iter()
            .find(|c| c.usage_ids.binary_search_by(|u| u.as_str().cmp(usage_id)).is_ok())
    }
}

/// The `k` nearest vocabulary words of some point, with unit vectors.
#[derive(Debug, Clone)]
struct NeighborSet(Vec<(String, Vec<f64>)>);

impl NeighborSet {
    fn of(point: &[f64], vocab: &EmbeddingTable, k: usize, exclude: &HashSet<String>) -> Result<Self> {
        let list = knn(point, vocab, k, exclude)?;
        Ok(Self(
            list.words()
                .map(|w| {
                    let v = vocab.get(w).expect("neighbor comes from the vocabulary");
                    let n = embedding::norm(v);
                    let unit = if n == 0.0 {
                        vec![0.0; v.len()]
                    } else {
                        v.iter().map(|x| x / n).collect()
                    };
                    (w.to_string(), unit)
                })
                .collect(),
        ))
    }

    /// Mean matched cosine distance, in [0, 2].
    fn distance(&self, other: &NeighborSet) -> Result<f64> {
        let cost: Vec<Vec<f64>> = self
            .0
            .iter()
            .map(|(wa, a)| {
                other
                    .0
                    .iter()
                    .map(|(wb, b)| {
                        if wa == wb {
                            0.0
                        } else {
                            1.0 - embedding::dot(a, b).clamp(-1.0, 1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let matching = bipartite_match_cost(&cost)?;
        Ok(matching.total / self.0.len() as f64)
    }
}

/// Neighbor-based distance between two points: the `k` nearest words of
/// each are matched one-to-one at minimum total cosine distance, and the
/// mean matched distance is returned.
pub fn neighbor_distance(
    a: &[f64],
    b: &[f64],
    vocab: &EmbeddingTable,
    k: usize,
    exclude: &HashSet<String>,
) -> Result<f64> {
    let na = NeighborSet::of(a, vocab, k, exclude)?;
    let nb = NeighborSet::of(b, vocab, k, exclude)?;
    na.distance(&nb)
}

/// Distance between the merge centres of two clusters.
pub fn cluster_distance(
    a: &Cluster,
    b: &Cluster,
    vocab: &EmbeddingTable,
    params: &ClusterParams,
    exclude: &HashSet<String>,
) -> Result<f64> {
    neighbor_distance(&a.merge_centroid, &b.merge_centroid, vocab, params.k, exclude)
}

struct Active {
    uid: usize,
    /// Indices into the sorted usage ids; sorted, so `members[0]` is the
    /// smallest id.
    members: Vec<usize>,
    centre: Vec<f64>,
    sum: Vec<f64>,
    neighbors: NeighborSet,
}

/// Cluster the usages of one lemma.
///
/// Among pairs at the same minimal distance, the pair whose smallest usage
/// ids are lexicographically smallest is merged first. Cluster ids are
/// assigned in order of each cluster's smallest usage id.
pub fn cluster_usages(
    lemma: &str,
    usage_vecs: &BTreeMap<String, Vec<f64>>,
    vocab: &EmbeddingTable,
    params: &ClusterParams,
) -> Result<ClusterSet> {
    params.validate()?;
    if usage_vecs.is_empty() {
        return Err(Error::EmptyInput("no usages to cluster"));
    }
    for (id, v) in usage_vecs {
        if v.len() != vocab.dim() {
            return Err(Error::DimensionMismatch {
                expected: vocab.dim(),
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(id.clone()));
        }
    }
    let exclude = params.exclusions(lemma);
    let ids: Vec<&String> = usage_vecs.keys().collect();

    // BTreeMap order keeps `active` sorted by smallest usage id.
    let mut active: Vec<Active> = Vec::with_capacity(usage_vecs.len());
    let mut usage_neighbors: Vec<NeighborSet> = Vec::new();
    for (idx, v) in usage_vecs.values().enumerate() {
        let neighbors = NeighborSet::of(v, vocab, params.k, &exclude)?;
        if params.linkage == Linkage::AverageUsage {
            usage_neighbors.push(neighbors.clone());
        }
        active.push(Active {
            uid: idx,
            members: vec![idx],
            centre: v.clone(),
            sum: v.clone(),
            neighbors,
        });
    }
    let mut next_uid = active.len();
    let mut cluster_cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut usage_cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut merges = 0usize;

    while active.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..active.len() {
            for j in (i + 1)..active.len() {
                let (a, b) = (&active[i], &active[j]);
                let d = match params.linkage {
                    Linkage::Centroid => match cluster_cache.get(&(a.uid, b.uid)) {
                        Some(&d) => d,
                        None => {
                            let d = a.neighbors.distance(&b.neighbors)?;
                            cluster_cache.insert((a.uid, b.uid), d);
                            d
                        }
                    },
                    Linkage::AverageUsage => {
                        let mut total = 0.0;
                        for &x in &a.members {
                            for &y in &b.members {
                                let key = (x.min(y), x.max(y));
                                total += match usage_cache.get(&key) {
                                    Some(&d) => d,
                                    None => {
                                        let d = usage_neighbors[key.0]
                                            .distance(&usage_neighbors[key.1])?;
                                        usage_cache.insert(key, d);
                                        d
                                    }
                                };
                            }
                        }
                        total / (a.members.len() * b.members.len()) as f64
                    }
                };
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (d, i, j) = best.expect("at least one pair");
        if d >= params.t_sc {
            break;
        }
        let b = active.remove(j);
        let a = active.remove(i);
        cluster_cache.retain(|&(x, y), _| x != a.uid && x != b.uid && y != a.uid && y != b.uid);

        let mut members = a.members;
        members.extend(b.members);
        members.sort_unstable();
        let sum: Vec<f64> = a.sum.iter().zip(&b.sum).map(|(x, y)| x + y).collect();
        let centre: Vec<f64> = match params.centroid_update {
            CentroidUpdate::Midpoint => {
                a.centre.iter().zip(&b.centre).map(|(x, y)| (x + y) / 2.0).collect()
            }
            CentroidUpdate::SizeWeighted => {
                let n = members.len() as f64;
                sum.iter().map(|s| s / n).collect()
            }
        };
        let neighbors = NeighborSet::of(&centre, vocab, params.k, &exclude)?;
        let merged = Active {
            uid: next_uid,
            members,
            centre,
            sum,
            neighbors,
        };
        next_uid += 1;
        merges += 1;
        // Relative order of the surviving clusters is unchanged, so cached
        // (left, right) keys stay valid.
        let pos = active.partition_point(|c| c.members[0] < merged.members[0]);
        active.insert(pos, merged);
    }

    let clusters = active
        .into_iter()
        .enumerate()
        .map(|(cluster_id, c)| {
            let n = c.members.len() as f64;
            Cluster {
                cluster_id,
                centroid: c.sum.iter().map(|s| s / n).collect(),
                merge_centroid: c.centre,
                usage_ids: c.members.iter().map(|&m| ids[m].clone()).collect(),
            }
        })
        .collect();
    Ok(ClusterSet {
        lemma: lemma.to_string(),
        params: params.clone(),
        clusters,
        merges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingKind;

    fn basis(dim: usize, i: usize, scale: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = scale;
        v
    }

    /// Three groups of words, each group living on its own pair of axes.
    fn blob_vocab() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(EmbeddingKind::Word, 6).unwrap();
        for g in 0..3 {
            for w in 0..4 {
                let mut v = vec![0.0; 6];
                v[2 * g] = 1.0;
                v[2 * g + 1] = 0.1 * w as f64;
                t.insert(format!("g{g}w{w}"), &v).unwrap();
            }
        }
        t
    }

    #[test]
    fn single_usage_is_a_singleton() {
        let vocab = blob_vocab();
        let usages = BTreeMap::from([("u1".to_string(), basis(6, 0, 1.0))]);
        let cs = cluster_usages("x", &usages, &vocab, &ClusterParams::new(0.5).with_k(3)).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.clusters[0].usage_ids, ["u1"]);
        assert_eq!(cs.merges, 0);
    }

    #[test]
    fn identical_vectors_merge() {
        let vocab = blob_vocab();
        let usages = BTreeMap::from([
            ("a".to_string(), basis(6, 2, 1.0)),
            ("b".to_string(), basis(6, 2, 1.0)),
        ]);
        let cs =
            cluster_usages("x", &usages, &vocab, &ClusterParams::new(1e-9).with_k(3)).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.clusters[0].usage_ids, ["a", "b"]);
    }

    #[test]
    fn empty_input_rejected() {
        let vocab = blob_vocab();
        let err = cluster_usages("x", &BTreeMap::new(), &vocab, &ClusterParams::new(0.5));
        assert!(matches!(err, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn distance_of_a_cluster_to_itself_is_zero() {
        let vocab = blob_vocab();
        let c = Cluster {
            cluster_id: 0,
            usage_ids: vec!["u".into()],
            centroid: basis(6, 0, 1.0),
            merge_centroid: basis(6, 0, 1.0),
        };
        let p = ClusterParams::new(0.5).with_k(4);
        assert_eq!(cluster_distance(&c, &c, &vocab, &p, &HashSet::new()).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_neighbor_sets_are_at_distance_one() {
        let mut vocab = EmbeddingTable::new(EmbeddingKind::Word, 4).unwrap();
        for i in 0..4 {
            vocab.insert(format!("e{i}"), &basis(4, i, 1.0)).unwrap();
        }
        let d = neighbor_distance(
            &[1.0, 0.2, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 0.2],
            &vocab,
            2,
            &HashSet::new(),
        )
        .unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn within_blob_closer_than_between() {
        let vocab = blob_vocab();
        let p = ClusterParams::new(0.5).with_k(3);
        let none = HashSet::new();
        let a1 = [1.0, 0.05, 0.0, 0.0, 0.0, 0.0];
        let a2 = [1.0, 0.25, 0.0, 0.0, 0.0, 0.1];
        let b1 = [0.0, 0.0, 1.0, 0.1, 0.0, 0.0];
        let within = neighbor_distance(&a1, &a2, &vocab, p.k, &none).unwrap();
        let between = neighbor_distance(&a1, &b1, &vocab, p.k, &none).unwrap();
        assert!(within < between, "{within} vs {between}");
    }

    #[test]
    fn threshold_extremes() {
        let vocab = blob_vocab();
        let mut usages = BTreeMap::new();
        for i in 0..6 {
            let mut v = vec![0.01; 6];
            v[2 * (i % 3)] = 1.0;
            v[1] += 0.03 * i as f64;
            usages.insert(format!("u{i}"), v);
        }
        let none = cluster_usages("x", &usages, &vocab, &ClusterParams::new(0.0).with_k(3)).unwrap();
        assert_eq!(none.len(), 6);
        let all = cluster_usages("x", &usages, &vocab, &ClusterParams::new(2.0).with_k(3)).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all.merges, 5);
    }

    #[test]
    fn lemma_is_excluded_from_neighbors() {
        let mut vocab = blob_vocab();
        vocab.insert("target", &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = ClusterParams::new(0.5).with_k(2);
        let ex = p.exclusions("target");
        let list = knn(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &vocab, 2, &ex).unwrap();
        assert!(list.words().all(|w| w != "target"));
        let mut q = p.clone();
        q.exclude_lemma = false;
        let list = knn(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &vocab, 2, &q.exclusions("target")).unwrap();
        assert!(list.words().any(|w| w == "target"));
    }

    #[test]
    fn ids_follow_smallest_usage_id() {
        let vocab = blob_vocab();
        let usages = BTreeMap::from([
            ("a".to_string(), vec![0.0, 0.0, 1.0, 0.1, 0.0, 0.0]),
            ("b".to_string(), vec![1.0, 0.1, 0.0, 0.0, 0.0, 0.0]),
            ("c".to_string(), vec![0.0, 0.0, 1.0, 0.12, 0.0, 0.0]),
        ]);
        let cs = cluster_usages("x", &usages, &vocab, &ClusterParams::new(0.3).with_k(3)).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.clusters[0].usage_ids, ["a", "c"]);
        assert_eq!(cs.clusters[1].usage_ids, ["b"]);
        assert_eq!(cs.cluster_of("c").unwrap().cluster_id, 0);
    }

    #[test]
    fn midpoint_differs_from_mean_after_two_merges() {
        let vocab = blob_vocab();
        let usages = BTreeMap::from([
            ("a".to_string(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ("b".to_string(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ("c".to_string(), vec![1.0, 0.3, 0.0, 0.0, 0.0, 0.0]),
        ]);
        let cs = cluster_usages("x", &usages, &vocab, &ClusterParams::new(2.0).with_k(3)).unwrap();
        let c = &cs.clusters[0];
        // (a+b)/2 merged with c: y-component 0.15, mean is 0.1
        assert!((c.merge_centroid[1] - 0.15).abs() < 1e-12);
        assert!((c.centroid[1] - 0.1).abs() < 1e-12);

        let mut p = ClusterParams::new(2.0).with_k(3);
        p.centroid_update = CentroidUpdate::SizeWeighted;
        let cs = cluster_usages("x", &usages, &vocab, &p).unwrap();
        assert_eq!(cs.clusters[0].merge_centroid, cs.clusters[0].centroid);
    }

    #[test]
    fn average_usage_linkage_separates_blobs() {
        let vocab = blob_vocab();
        let mut usages = BTreeMap::new();
        for i in 0..8 {
            let mut v = vec![0.0; 6];
            v[2 * (i % 2)] = 1.0;
            v[2 * (i % 2) + 1] = 0.02 * i as f64;
            usages.insert(format!("u{i}"), v);
        }
        let mut p = ClusterParams::new(0.5).with_k(3);
        p.linkage = Linkage::AverageUsage;
        let cs = cluster_usages("x", &usages, &vocab, &p).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.clusters[0].usage_ids, ["u0", "u2", "u4", "u6"]);
    }

    #[test]
    fn rejects_bad_params_and_dims() {
        let vocab = blob_vocab();
        let usages = BTreeMap::from([("a".to_string(), vec![1.0; 5])]);
        assert!(cluster_usages("x", &usages, &vocab, &ClusterParams::new(0.5)).is_err());
        let usages = BTreeMap::from([("a".to_string(), vec![1.0; 6])]);
        assert!(cluster_usages("x", &usages, &vocab, &ClusterParams::new(-1.0)).is_err());
        assert!(cluster_usages("x", &usages, &vocab, &ClusterParams::new(f64::NAN)).is_err());
        assert!(matches!(
            cluster_usages("x", &usages, &vocab, &ClusterParams::new(0.5).with_k(13)),
            Err(Error::NotEnoughNeighbors { .. })
        ));
    }
}
