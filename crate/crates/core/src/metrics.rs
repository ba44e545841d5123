//! Evaluation metrics: adjusted Rand index (overall and restricted to gold
//! novel or gold dictionary senses), macro-F1 over dictionary senses,
//! sentence BLEU and a greedy embedding-match score for definitions.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::embedding::cosine_similarity;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub usage_id: String,
    pub gold_sense_id: String,
    pub pred_sense_id: String,
    pub gold_is_novel: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionPair {
    pub generated: String,
    pub reference: String,
}

fn choose2(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index of two labelings of the same items, computed from
/// the contingency table. When the expected and maximum index coincide
/// (both labelings are all-singletons or both a single cluster) the
/// labelings are identical and 1.0 is returned.
pub fn adjusted_rand_index<G, P>(gold: &[G], pred: &[P]) -> Result<f64>
where
    G: Eq + Hash,
    P: Eq + Hash,
{
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "label vectors differ in length ({} vs {})",
            gold.len(),
            pred.len()
        )));
    }
    if gold.len() < 2 {
        return Err(Error::TooFewItems {
            what: "ARI".into(),
            needed: 2,
            got: gold.len(),
        });
    }
    let mut cells: HashMap<(&G, &P), u64> = HashMap::new();
    let mut rows: HashMap<&G, u64> = HashMap::new();
    let mut cols: HashMap<&P, u64> = HashMap::new();
    for (g, p) in gold.iter().zip(pred) {
        *cells.entry((g, p)).or_default() += 1;
        *rows.entry(g).or_default() += 1;
        *cols.entry(p).or_default() += 1;
    }
    let index: u128 = cells.values().map(|&n| choose2(n)).sum();
    let a: u128 = rows.values().map(|&n| choose2(n)).sum();
    let b: u128 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(gold.len() as u64);

    // ARI = (index - a*b/total) / ((a+b)/2 - a*b/total), scaled by 2*total.
    let num = 2 * total as i128 * index as i128 - 2 * (a * b) as i128;
    let den = total as i128 * (a + b) as i128 - 2 * (a * b) as i128;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

pub fn ari(pairs: &[LabeledPair]) -> Result<f64> {
    let gold: Vec<&str> = pairs.iter().map(|p| p.gold_sense_id.as_str()).collect();
    let pred: Vec<&str> = pairs.iter().map(|p| p.pred_sense_id.as_str()).collect();
    adjusted_rand_index(&gold, &pred)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    /// Only usages whose gold sense is novel.
    NewSenses,
    /// Only usages whose gold sense is in the dictionary.
    OldSenses,
}

pub fn ari_restricted(pairs: &[LabeledPair], restrict: Restriction) -> Result<f64> {
    let keep_novel = restrict == Restriction::NewSenses;
    let kept: Vec<LabeledPair> = pairs
        .iter()
        .filter(|p| p.gold_is_novel == keep_novel)
        .cloned()
        .collect();
    if kept.len() < 2 {
        return Err(Error::TooFewItems {
            what: format!("ARI restricted to {restrict:?}"),
            needed: 2,
            got: kept.len(),
        });
    }
    ari(&kept)
}

/// Mean F1 over the gold dictionary senses, using only usages whose gold
/// sense is a dictionary sense. A predicted novel sense never equals a
/// dictionary sense, so it counts as a miss for the gold class.
pub fn macro_f1(pairs: &[LabeledPair]) -> Result<f64> {
    let old: Vec<&LabeledPair> = pairs.iter().filter(|p| !p.gold_is_novel).collect();
    if old.is_empty() {
        return Err(Error::TooFewItems {
            what: "macro-F1 (usages with a dictionary gold sense)".into(),
            needed: 1,
            got: 0,
        });
    }
    let mut gold_count: HashMap<&str, usize> = HashMap::new();
    let mut pred_count: HashMap<&str, usize> = HashMap::new();
    let mut hits: HashMap<&str, usize> = HashMap::new();
    for p in &old {
        *gold_count.entry(&p.gold_sense_id).or_default() += 1;
        *pred_count.entry(&p.pred_sense_id).or_default() += 1;
        if p.gold_sense_id == p.pred_sense_id {
            *hits.entry(&p.gold_sense_id).or_default() += 1;
        }
    }
    let mut classes: Vec<&str> = gold_count.keys().copied().collect();
    classes.sort_unstable();
    let sum: f64 = classes
        .iter()
        .map(|c| {
            let tp = hits.get(c).copied().unwrap_or(0) as f64;
            if tp == 0.0 {
                return 0.0;
            }
            let precision = tp / pred_count[c] as f64;
            let recall = tp / gold_count[c] as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .sum();
    Ok(sum / classes.len() as f64)
}

/// True for ASCII punctuation and symbols, Latin-1 punctuation and the
/// Unicode general, supplemental and CJK punctuation blocks.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c,
            '¡' | '§' | '«' | '¶' | '·' | '»' | '¿'
            | '\u{2010}'..='\u{2027}'
            | '\u{2030}'..='\u{205E}'
            | '\u{2E00}'..='\u{2E7F}'
            | '\u{3001}'..='\u{3003}'
            | '\u{3008}'..='\u{3011}'
            | '\u{3014}'..='\u{301F}'
            | '\u{FF01}'..='\u{FF0F}')
}

/// Lowercase, drop punctuation characters, split on Unicode whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|&c| !is_punctuation(c))
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

pub const BLEU_MAX_N: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_default() += 1;
    }
    counts
}

/// Sentence BLEU against a single reference.
///
/// Modified n-gram precisions for n = 1..=`max_n`; precisions for n >= 2
/// use add-one smoothing `(matches + 1) / (candidate n-grams + 1)`, the
/// unigram precision is unsmoothed. The brevity penalty is
/// `exp(1 - r/c)` when the candidate is shorter than the reference.
pub fn bleu(pair: &DefinitionPair, max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(Error::Invalid("BLEU order must be at least 1".into()));
    }
    let reference = tokenize(&pair.reference);
    if reference.is_empty() {
        return Err(Error::EmptyInput("BLEU reference has no tokens"));
    }
    let candidate = tokenize(&pair.generated);
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(&candidate, n);
        let refc = ngram_counts(&reference, n);
        let matches: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let total = candidate.len().saturating_sub(n - 1);
        let precision = if n == 1 {
            matches as f64 / total as f64
        } else {
            (matches as f64 + 1.0) / (total as f64 + 1.0)
        };
        if precision == 0.0 {
            return Ok(0.0);
        }
        log_sum += precision.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity = if c < r { 1.0 - r / c } else { 0.0 };
    Ok((log_sum / max_n as f64 + brevity).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn mean_best(from: &[Vec<f64>], to: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for a in from {
        let mut best = 0.0f64;
        for b in to {
            best = best.max(cosine_similarity(a, b)?);
        }
        total += best;
    }
    Ok(total / from.len() as f64)
}

/// Greedy token matching of two token-embedding sequences: precision is the
/// mean over candidate tokens of the best cosine similarity to any reference
/// token, recall the converse, F1 their harmonic mean. Similarities below
/// zero count as zero. No idf weighting and no baseline rescaling.
pub fn greedy_match_score(cand_tokens: &[Vec<f64>], ref_tokens: &[Vec<f64>]) -> Result<MatchScore> {
    if cand_tokens.is_empty() || ref_tokens.is_empty() {
        return Err(Error::EmptyInput("token embedding list"));
    }
    let precision = mean_best(cand_tokens, ref_tokens)?;
    let recall = mean_best(ref_tokens, cand_tokens)?;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MatchScore {
        precision,
        recall,
        f1,
    })
}
