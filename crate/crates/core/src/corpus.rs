//! Target words, their usages and dictionary sense inventories.
//!
//! A dataset is a flat table of usages (TSV with a header row, or JSON
//! lines) with the fields `usage_id`, `word`, `text`, `period` and the
//! optional `gloss_id`, `definition`, `span` and `language`. Rows are
//! grouped by `word` into [`TargetWord`]s; the sense inventory of a word is
//! built from the glosses attached to its OLD-period rows.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::SensePrediction;

/// Language tag used when a dataset carries no `language` column.
pub const UNDETERMINED_LANGUAGE: &str = "und";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Old,
    New,
}

impl FromStr for Period {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "old" | "earlier" | "0" => Ok(Period::Old),
            "new" | "later" | "1" => Ok(Period::New),
            other => Err(format!(
                "unknown period `{other}` (expected old/earlier/0 or new/later/1)"
            )),
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Period::Old => "old",
            Period::New => "new",
        })
    }
}

/// Character offsets of the target word inside a usage text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl FromStr for Span {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s
            .split_once([':', '-', ','])
            .ok_or_else(|| format!("span `{s}` is not of the form start:end"))?;
        let start = a.trim().parse().map_err(|_| format!("bad span start `{a}`"))?;
        let end = b.trim().parse().map_err(|_| format!("bad span end `{b}`"))?;
        Ok(Span { start, end })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub usage_id: String,
    pub text: String,
    pub period: Period,
    pub target_span: Option<Span>,
    pub gold_sense_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseGloss {
    pub gloss_id: String,
    pub definition_text: String,
    pub is_novel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetWord {
    pub lemma: String,
    pub language: String,
    /// Dictionary senses, taken from OLD-period rows. Sorted by gloss id.
    pub sense_inventory: Vec<SenseGloss>,
    /// Glosses that only occur on NEW-period rows (evaluation data only).
    /// These are the gold novel senses; `is_novel` is set on each.
    pub unrecorded_glosses: Vec<SenseGloss>,
    /// Sorted by usage id.
    pub usages: Vec<UsageRecord>,
}

impl TargetWord {
    pub fn has_gloss(&self, gloss_id: &str) -> bool {
        self.sense_inventory.iter().any(|g| g.gloss_id == gloss_id)
    }

    pub fn usage(&self, usage_id: &str) -> Option<&UsageRecord> {
        self.usages
            .binary_search_by(|u| u.usage_id.as_str().cmp(usage_id))
            .ok()
            .map(|i| &self.usages[i])
    }

    pub fn new_usages(&self) -> impl Iterator<Item = &UsageRecord> {
        self.usages.iter().filter(|u| u.period == Period::New)
    }

    /// Definition text of a gloss, looked up in the inventory first and then
    /// among the unrecorded glosses.
    pub fn definition_of(&self, gloss_id: &str) -> Option<&str> {
        self.sense_inventory
            .iter()
            .chain(&self.unrecorded_glosses)
            .find(|g| g.gloss_id == gloss_id)
            .map(|g| g.definition_text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Tsv,
    Jsonl,
}

impl DatasetFormat {
    /// Guess the format from the file extension; anything that is not
    /// `.jsonl`/`.json`/`.ndjson` is read as TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json" | "ndjson") => DatasetFormat::Jsonl,
            _ => DatasetFormat::Tsv,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "tsv" => Ok(DatasetFormat::Tsv),
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawSpan {
    Text(String),
    Pair(Vec<usize>),
}

#[derive(Debug, Deserialize)]
struct RawRow {
    usage_id: String,
    word: String,
    text: String,
    period: String,
    #[serde(default)]
    gloss_id: Option<String>,
    #[serde(default)]
    definition: Option<String>,
    #[serde(default)]
    span: Option<RawSpan>,
    #[serde(default)]
    language: Option<String>,
}

fn non_empty(field: Option<String>) -> Option<String> {
    field.filter(|s| !s.trim().is_empty())
}

struct Row {
    line: u64,
    lemma: String,
    language: Option<String>,
    usage: UsageRecord,
    definition: Option<String>,
}

fn validate_row(raw: RawRow, line: u64, path: &Path) -> Result<Row> {
    let err = |msg: String| Error::parse(path, line, msg);
    if raw.usage_id.trim().is_empty() {
        return Err(err("empty usage_id".into()));
    }
    if raw.word.trim().is_empty() {
        return Err(err("empty word".into()));
    }
    let period: Period = raw.period.parse().map_err(err)?;
    let span = match raw.span {
        None => None,
        Some(RawSpan::Text(s)) if s.trim().is_empty() => None,
        Some(RawSpan::Text(s)) => Some(s.parse::<Span>().map_err(err)?),
        Some(RawSpan::Pair(v)) if v.len() == 2 => Some(Span {
            start: v[0],
            end: v[1],
        }),
        Some(RawSpan::Pair(v)) => {
            return Err(err(format!("span must have two offsets, got {}", v.len())))
        }
    };
    if let Some(s) = span {
        let len = raw.text.chars().count();
        if s.start >= s.end || s.end > len {
            return Err(err(format!(
                "span {}:{} out of bounds for text of {len} characters",
                s.start, s.end
            )));
        }
    }
    Ok(Row {
        line,
        lemma: raw.word,
        language: non_empty(raw.language),
        usage: UsageRecord {
            usage_id: raw.usage_id,
            text: raw.text,
            period,
            target_span: span,
            gold_sense_id: non_empty(raw.gloss_id),
        },
        definition: non_empty(raw.definition),
    })
}

fn read_tsv_rows(path: &Path) -> Result<Vec<Row>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if headers.len() == 0 || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::parse(path, 1, "missing header row"));
    }
    for required in ["usage_id", "word", "text", "period"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::parse(
                path,
                1,
                format!("header lacks required column `{required}`"),
            ));
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let raw: RawRow = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        rows.push(validate_row(raw, line, path)?);
    }
    Ok(rows)
}

fn read_jsonl_rows(path: &Path) -> Result<Vec<Row>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRow = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        rows.push(validate_row(raw, line_no, path)?);
    }
    Ok(rows)
}

#[derive(Default)]
struct WordBuilder {
    language: Option<String>,
    usages: Vec<UsageRecord>,
    // gloss id -> (definition, seen on an OLD row)
    glosses: BTreeMap<String, (Option<String>, bool)>,
}

/// Load a dataset and group it into target words sorted by lemma.
///
/// Usages are sorted by usage id and glosses by gloss id, so the result does
/// not depend on row order.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<TargetWord>> {
    let rows = match format {
        DatasetFormat::Tsv => read_tsv_rows(path)?,
        DatasetFormat::Jsonl => read_jsonl_rows(path)?,
    };

    let mut seen_usages: HashSet<String> = HashSet::new();
    let mut gloss_owner: HashMap<String, String> = HashMap::new();
    let mut words: BTreeMap<String, WordBuilder> = BTreeMap::new();

    for row in rows {
        let err = |msg: String| Error::parse(path, row.line, msg);
        if !seen_usages.insert(row.usage.usage_id.clone()) {
            return Err(err(Error::DuplicateUsage(row.usage.usage_id.clone()).to_string()));
        }
        let builder = words.entry(row.lemma.clone()).or_default();
        if let Some(lang) = row.language {
            match &builder.language {
                Some(existing) if *existing != lang => {
                    return Err(err(format!(
                        "word `{}` has conflicting languages `{existing}` and `{lang}`",
                        row.lemma
                    )))
                }
                _ => builder.language = Some(lang),
            }
        }
        if let Some(gloss_id) = &row.usage.gold_sense_id {
            match gloss_owner.get(gloss_id) {
                Some(owner) if *owner != row.lemma => {
                    return Err(err(format!(
                        "gloss id `{gloss_id}` is used by both `{owner}` and `{}`",
                        row.lemma
                    )))
                }
                Some(_) => {}
                None => {
                    gloss_owner.insert(gloss_id.clone(), row.lemma.clone());
                }
            }
            let entry = builder
                .glosses
                .entry(gloss_id.clone())
                .or_insert((None, false));
            if let Some(def) = &row.definition {
                match &entry.0 {
                    Some(existing) if existing != def => {
                        return Err(err(format!(
                            "gloss `{gloss_id}` has conflicting definitions"
                        )))
                    }
                    _ => entry.0 = Some(def.clone()),
                }
            }
            entry.1 |= row.usage.period == Period::Old;
        }
        builder.usages.push(row.usage);
    }

    let mut out = Vec::with_capacity(words.len());
    for (lemma, mut builder) in words {
        builder.usages.sort_by(|a, b| a.usage_id.cmp(&b.usage_id));
        let mut sense_inventory = Vec::new();
        let mut unrecorded_glosses = Vec::new();
        for (gloss_id, (definition, on_old_row)) in builder.glosses {
            if on_old_row {
                let definition_text = definition.ok_or_else(|| {
                    Error::format(
                        path,
                        format!("dictionary gloss `{gloss_id}` of `{lemma}` has no definition"),
                    )
                })?;
                sense_inventory.push(SenseGloss {
                    gloss_id,
                    definition_text,
                    is_novel: false,
                });
            } else {
                unrecorded_glosses.push(SenseGloss {
                    gloss_id,
                    definition_text: definition.unwrap_or_default(),
                    is_novel: true,
                });
            }
        }
        out.push(TargetWord {
            lemma,
            language: builder
                .language
                .unwrap_or_else(|| UNDETERMINED_LANGUAGE.to_string()),
            sense_inventory,
            unrecorded_glosses,
            usages: builder.usages,
        });
    }
    Ok(out)
}

const PREDICTION_HEADER: [&str; 5] = [
    "usage_id",
    "lemma",
    "predicted_sense_id",
    "is_novel",
    "similarity",
];

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::Invalid(format!("prediction with empty {what}")));
    }
    if value.contains(['\t', '\n', '\r']) {
        return Err(Error::Invalid(format!(
            "{what} `{}` contains a tab or newline",
            value.escape_debug()
        )));
    }
    Ok(())
}

/// Render predictions as TSV, ordered by usage id.
pub fn predictions_to_tsv(preds: &[SensePrediction]) -> Result<String> {
    let mut sorted: Vec<&SensePrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| {
        a.usage_id
            .cmp(&b.usage_id)
            .then_with(|| a.predicted_sense_id.cmp(&b.predicted_sense_id))
    });
    let mut out = PREDICTION_HEADER.join("\t");
    out.push('\n');
    for p in sorted {
        check_field(&p.usage_id, "usage_id")?;
        check_field(&p.lemma, "lemma")?;
        check_field(&p.predicted_sense_id, "predicted_sense_id")?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.usage_id, p.lemma, p.predicted_sense_id, p.is_novel, p.similarity
        ));
    }
    Ok(out)
}

/// Write the prediction TSV. The file is written to a sibling temporary
/// path first and renamed, so a failed run leaves no partial output.
pub fn save_predictions(preds: &[SensePrediction], path: &Path) -> Result<()> {
    let body = predictions_to_tsv(preds)?;
    write_atomic(path, body.as_bytes())
}

pub fn load_predictions(path: &Path) -> Result<Vec<SensePrediction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "missing header row")),
    };
    let columns: Vec<&str> = header.split('\t').collect();
    let col = |name: &str| columns.iter().position(|c| *c == name);
    let (Some(i_usage), Some(i_lemma), Some(i_sense), Some(i_novel)) = (
        col("usage_id"),
        col("lemma"),
        col("predicted_sense_id"),
        col("is_novel"),
    ) else {
        return Err(Error::parse(
            path,
            1,
            "header must contain usage_id, lemma, predicted_sense_id, is_novel",
        ));
    };
    let i_sim = col("similarity");

    let mut preds = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx as u64 + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {} fields, found {}", columns.len(), fields.len()),
            ));
        }
        let is_novel = match fields[i_novel] {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("is_novel must be true or false, found `{other}`"),
                ))
            }
        };
        let similarity = match i_sim {
            Some(i) => fields[i].parse::<f64>().map_err(|_| {
                Error::parse(path, line_no, format!("bad similarity `{}`", fields[i]))
            })?,
            None => f64::NAN,
        };
        preds.push(SensePrediction {
            usage_id: fields[i_usage].to_string(),
            lemma: fields[i_lemma].to_string(),
            predicted_sense_id: fields[i_sense].to_string(),
            is_novel,
            similarity,
        });
    }
    Ok(preds)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?;
    let tmp = path.with_file_name(format!(".{}.partial", file_name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
