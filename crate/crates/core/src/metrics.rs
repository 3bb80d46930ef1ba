//! Token F1, HEQ and grouped reports.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AnswerType;

/// Minimum questions per turn bucket when small buckets are filtered out.
pub const MIN_TURN_BUCKET: usize = 100;

/// Lowercase, delete ASCII punctuation, split on whitespace, drop articles.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Harmonic mean of token precision and recall on normalized multisets.
pub fn token_f1(pred: &str, reference: &str) -> f64 {
    let p = normalize(pred);
    let r = normalize(reference);
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &r {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best F1 over the references.
pub fn question_f1<S: AsRef<str>>(pred: &str, references: &[S]) -> Result<f64> {
    references
        .iter()
        .map(|r| token_f1(pred, r.as_ref()))
        .reduce(f64::max)
        .ok_or_else(|| Error::Metrics("question has no reference answers".into()))
}

/// One scored question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub prediction: String,
    pub references: Vec<String>,
    pub f1: f64,
    pub human_f1: Option<f64>,
    pub domain: String,
}

impl EvalRecord {
    pub fn score(
        dialogue_id: impl Into<String>,
        turn: usize,
        prediction: impl Into<String>,
        references: Vec<String>,
        domain: impl Into<String>,
    ) -> Result<Self> {
        let prediction = prediction.into();
        let f1 = question_f1(&prediction, &references)?;
        Ok(Self {
            dialogue_id: dialogue_id.into(),
            turn,
            prediction,
            references,
            f1,
            human_f1: None,
            domain: domain.into(),
        })
    }
}

/// `(HEQ-Q, HEQ-D)` in percent: questions, and dialogues where every
/// question, on which the model F1 reaches the human F1.
pub fn heq(records: &[EvalRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Metrics("HEQ over an empty record set".into()));
    }
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.human_f1.is_none())
        .map(|r| format!("{}#{}", r.dialogue_id, r.turn))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Metrics(format!(
            "human F1 missing for {} records: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let mut passed = 0usize;
    let mut dialogues: BTreeMap<&str, bool> = BTreeMap::new();
    for r in records {
        let ok = r.f1 >= r.human_f1.expect("checked above");
        passed += ok as usize;
        let entry = dialogues.entry(&r.dialogue_id).or_insert(true);
        *entry &= ok;
    }
    let heq_q = 100.0 * passed as f64 / records.len() as f64;
    let good = dialogues.values().filter(|v| **v).count();
    let heq_d = 100.0 * good as f64 / dialogues.len() as f64;
    Ok((heq_q, heq_d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Overall,
    Domain,
    Turn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub count: usize,
    /// Mean F1 in `[0, 1]`.
    pub f1: f64,
}

/// Per-question macro-average F1 per group. Rows are ordered by domain name
/// or turn number. With `fidelity`, turn buckets under
/// [`MIN_TURN_BUCKET`] questions are dropped.
pub fn aggregate(records: &[EvalRecord], group_by: GroupBy, fidelity: bool) -> Vec<GroupRow> {
    let mut by_text: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut by_turn: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for r in records {
        let slot = match group_by {
            GroupBy::Overall => by_text.entry("overall".into()).or_default(),
            GroupBy::Domain => by_text.entry(r.domain.clone()).or_default(),
            GroupBy::Turn => by_turn.entry(r.turn).or_default(),
        };
        slot.0 += 1;
        slot.1 += r.f1;
    }
    let row = |group: String, (count, sum): (usize, f64)| GroupRow {
        group,
        count,
        f1: sum / count as f64,
    };
    match group_by {
        GroupBy::Turn => by_turn
            .into_iter()
            .filter(|(_, (n, _))| !fidelity || *n >= MIN_TURN_BUCKET)
            .map(|(t, v)| row(t.to_string(), v))
            .collect(),
        _ => by_text.into_iter().map(|(g, v)| row(g, v)).collect(),
    }
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub dialogue_id: String,
    pub turn: usize,
    pub answer: String,
    #[serde(rename = "type")]
    pub answer_type: AnswerType,
}

/// One line of a human-scores file: `{"dialogue_id", "turn", "f1"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanScore {
    pub dialogue_id: String,
    pub turn: usize,
    pub f1: f64,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("serializable row");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Attaches human F1 values by `(dialogue_id, turn)`.
pub fn attach_human_scores(records: &mut [EvalRecord], scores: &[HumanScore]) {
    let map: HashMap<(&str, usize), f64> = scores
        .iter()
        .map(|s| ((s.dialogue_id.as_str(), s.turn), s.f1))
        .collect();
    for r in records.iter_mut() {
        if let Some(f1) = map.get(&(r.dialogue_id.as_str(), r.turn)) {
            r.human_f1 = Some(*f1);
        }
    }
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: usize,
    pub overall_f1: f64,
    pub by_domain: Vec<GroupRow>,
    pub by_turn: Vec<GroupRow>,
    pub heq_q: Option<f64>,
    pub heq_d: Option<f64>,
}

impl EvalReport {
    /// HEQ is included only when every record carries a human F1.
    pub fn build(records: &[EvalRecord], fidelity: bool) -> Self {
        let overall = aggregate(records, GroupBy::Overall, fidelity);
        let heq = if records.iter().all(|r| r.human_f1.is_some()) {
            heq(records).ok()
        } else {
            None
        };
        Self {
            questions: records.len(),
            overall_f1: overall.first().map_or(0.0, |r| r.f1),
            by_domain: aggregate(records, GroupBy::Domain, fidelity),
            by_turn: aggregate(records, GroupBy::Turn, fidelity),
            heq_q: heq.map(|h| h.0),
            heq_d: heq.map(|h| h.1),
        }
    }

    /// Tab-separated `section, group, count, f1` rows; F1 in percent.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("section\tgroup\tcount\tf1\n");
        out.push_str(&format!(
            "overall\tall\t{}\t{:.2}\n",
            self.questions,
            100.0 * self.overall_f1
        ));
        for (section, rows) in [("domain", &self.by_domain), ("turn", &self.by_turn)] {
            for r in rows {
                out.push_str(&format!("{section}\t{}\t{}\t{:.2}\n", r.group, r.count, 100.0 * r.f1));
            }
        }
        if let (Some(q), Some(d)) = (self.heq_q, self.heq_d) {
            out.push_str(&format!("heq\tquestion\t{}\t{q:.2}\n", self.questions));
            out.push_str(&format!("heq\tdialogue\t-\t{d:.2}\n"));
        }
        out
    }
}
