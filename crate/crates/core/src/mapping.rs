//! Alignment of sense clusters with dictionary glosses.
//!
//! Each cluster's centroid (the mean usage embedding) is compared with the
//! embedding of every gloss of the lemma. The best gloss is assigned to all
//! usages of the cluster when its cosine similarity reaches the threshold;
//! otherwise the cluster becomes a novel sense `<lemma>_novel_<n>`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterSet;
use crate::corpus::{Period, TargetWord};
use crate::embedding::{cosine_similarity, EmbeddingTable};
use crate::error::{Error, Result};

pub const DEFAULT_SIM_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensePrediction {
    pub usage_id: String,
    pub lemma: String,
    pub predicted_sense_id: String,
    pub is_novel: bool,
    /// Similarity to the matched gloss, or the best rejected similarity for
    /// a novel sense (NaN when the lemma has no glosses).
    pub similarity: f64,
}

/// Which usages take part in clustering. Predictions are always emitted
/// for NEW-period usages only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScope {
    NewOnly,
    #[default]
    AllUsages,
}

impl FromStr for ClusterScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "new_only" | "new-only" => Ok(Self::NewOnly),
            "all_usages" | "all-usages" | "all" => Ok(Self::AllUsages),
            other => Err(format!("unknown clustering scope `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlossAssignment {
    /// One gloss per cluster: the most similar one, if above threshold.
    #[default]
    Argmax,
    /// Every gloss at or above the threshold; a usage then gets one
    /// prediction per such gloss.
    AllAboveThreshold,
}

impl FromStr for GlossAssignment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "argmax" => Ok(Self::Argmax),
            "all_above_threshold" | "all-above-threshold" => Ok(Self::AllAboveThreshold),
            other => Err(format!("unknown gloss assignment `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingParams {
    #[serde(default = "default_threshold")]
    pub sim_threshold: f64,
    #[serde(default)]
    pub scope: ClusterScope,
    #[serde(default)]
    pub assignment: GlossAssignment,
}

fn default_threshold() -> f64 {
    DEFAULT_SIM_THRESHOLD
}

impl Default for MappingParams {
    fn default() -> Self {
        Self {
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            scope: ClusterScope::default(),
            assignment: GlossAssignment::default(),
        }
    }
}

impl MappingParams {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.sim_threshold) {
            return Err(Error::Invalid(format!(
                "sim_threshold must lie in [-1, 1], got {}",
                self.sim_threshold
            )));
        }
        Ok(())
    }
}

impl fmt::Display for MappingParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sim_threshold={} scope={:?} assignment={:?}",
            self.sim_threshold, self.scope, self.assignment
        )
    }
}

/// Audit record for one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMapping {
    pub cluster_id: usize,
    pub usage_ids: Vec<String>,
    /// Cosine similarity to each gloss, in the order of `LemmaMapping::glosses`.
    pub similarities: Vec<f64>,
    pub assigned: Vec<String>,
    pub is_novel: bool,
}

/// Audit record for one lemma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaMapping {
    pub lemma: String,
    pub glosses: Vec<String>,
    pub clusters: Vec<ClusterMapping>,
}

pub fn novel_sense_id(lemma: &str, n: usize) -> String {
    format!("{lemma}_novel_{n}")
}

/// Map the clusters of `target` to its glosses and emit predictions for the
/// NEW-period usages found in the clusters.
///
/// `glosses` may hold vectors for other lemmas as well; only the ids in the
/// target's inventory are consulted. Novel ids are numbered from 1 in
/// cluster-id order.
pub fn map_clusters(
    target: &TargetWord,
    cs: &ClusterSet,
    glosses: &EmbeddingTable,
    params: &MappingParams,
) -> Result<(Vec<SensePrediction>, LemmaMapping)> {
    params.validate()?;
    let gloss_vecs: Vec<(&str, &[f64])> = target
        .sense_inventory
        .iter()
        .map(|g| Ok((g.gloss_id.as_str(), glosses.require(&g.gloss_id)?)))
        .collect::<Result<_>>()?;
    let new_ids: HashSet<&str> = target
        .usages
        .iter()
        .filter(|u| u.period == Period::New)
        .map(|u| u.usage_id.as_str())
        .collect();

    let mut preds = Vec::new();
    let mut report = LemmaMapping {
        lemma: target.lemma.clone(),
        glosses: gloss_vecs.iter().map(|(id, _)| id.to_string()).collect(),
        clusters: Vec::with_capacity(cs.clusters.len()),
    };
    let mut novel_count = 0;

    for cluster in &cs.clusters {
        let sims: Vec<f64> = gloss_vecs
            .iter()
            .map(|(_, v)| cosine_similarity(&cluster.centroid, v))
            .collect::<Result<_>>()?;
        // Best similarity; ties go to the smallest gloss id.
        let best = sims
            .iter()
            .zip(&gloss_vecs)
            .map(|(&s, (id, _))| (s, *id))
            .reduce(|a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            });

        let matched: Vec<(f64, &str)> = match (params.assignment, best) {
            (_, None) => Vec::new(),
            (GlossAssignment::Argmax, Some(b)) if b.0 >= params.sim_threshold => vec![b],
            (GlossAssignment::Argmax, Some(_)) => Vec::new(),
            (GlossAssignment::AllAboveThreshold, Some(_)) => {
                let mut above: Vec<(f64, &str)> = sims
                    .iter()
                    .zip(&gloss_vecs)
                    .filter(|(&s, _)| s >= params.sim_threshold)
                    .map(|(&s, (id, _))| (s, *id))
                    .collect();
                above.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
                above
            }
        };

        let (assigned, is_novel): (Vec<(String, f64)>, bool) = if matched.is_empty() {
            novel_count += 1;
            let sim = best.map_or(f64::NAN, |b| b.0);
            (vec![(novel_sense_id(&target.lemma, novel_count), sim)], true)
        } else {
            (
                matched.iter().map(|(s, id)| (id.to_string(), *s)).collect(),
                false,
            )
        };

        for usage_id in &cluster.usage_ids {
            if !new_ids.contains(usage_id.as_str()) {
                continue;
            }
            for (sense, sim) in &assigned {
                preds.push(SensePrediction {
                    usage_id: usage_id.clone(),
                    lemma: target.lemma.clone(),
                    predicted_sense_id: sense.clone(),
                    is_novel,
                    similarity: *sim,
                });
            }
        }
        report.clusters.push(ClusterMapping {
            cluster_id: cluster.cluster_id,
            usage_ids: cluster.usage_ids.clone(),
            similarities: sims,
            assigned: assigned.into_iter().map(|(id, _)| id).collect(),
            is_novel,
        });
    }
    Ok((preds, report))
}

/// Usage vectors that take part in clustering for `target` under `scope`.
pub fn clustering_inputs(
    target: &TargetWord,
    usages: &EmbeddingTable,
    scope: ClusterScope,
) -> Result<BTreeMap<String, Vec<f64>>> {
    target
        .usages
        .iter()
        .filter(|u| scope == ClusterScope::AllUsages || u.period == Period::New)
        .map(|u| Ok((u.usage_id.clone(), usages.require(&u.usage_id)?.to_vec())))
        .collect()
}
