use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six relevance levels used by TREC Web Track judgments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Grade {
    Junk,
    NRel,
    Rel,
    HRel,
    Key,
    Nav,
}

impl Grade {
    pub const ALL: [Grade; 6] = [
        Grade::Junk,
        Grade::NRel,
        Grade::Rel,
        Grade::HRel,
        Grade::Key,
        Grade::Nav,
    ];

    pub fn from_code(code: i32) -> Result<Self> {
        Ok(match code {
            -2 => Grade::Junk,
            0 => Grade::NRel,
            1 => Grade::Rel,
            2 => Grade::HRel,
            3 => Grade::Key,
            4 => Grade::Nav,
            other => return Err(Error::UnknownGrade(other)),
        })
    }

    pub fn code(self) -> i32 {
        match self {
            Grade::Junk => -2,
            Grade::NRel => 0,
            Grade::Rel => 1,
            Grade::HRel => 2,
            Grade::Key => 3,
            Grade::Nav => 4,
        }
    }

    /// Three-level view: Junk and NRel collapse to NRel, Key joins HRel, Nav
    /// is dropped.
    pub fn merged(self) -> Option<MergedGrade> {
        match self {
            Grade::Junk | Grade::NRel => Some(MergedGrade::NRel),
            Grade::Rel => Some(MergedGrade::Rel),
            Grade::HRel | Grade::Key => Some(MergedGrade::HRel),
            Grade::Nav => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MergedGrade {
    NRel = 0,
    Rel = 1,
    HRel = 2,
}

impl MergedGrade {
    pub const ALL: [MergedGrade; 3] = [MergedGrade::NRel, MergedGrade::Rel, MergedGrade::HRel];

    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn from_value(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

impl fmt::Display for MergedGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergedGrade::NRel => "NRel",
            MergedGrade::Rel => "Rel",
            MergedGrade::HRel => "HRel",
        })
    }
}

/// An ordered pair of distinct merged grades, higher first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelPair {
    HRelNRel,
    HRelRel,
    RelNRel,
}

impl LabelPair {
    pub const ALL: [LabelPair; 3] = [LabelPair::HRelNRel, LabelPair::HRelRel, LabelPair::RelNRel];

    pub fn grades(self) -> (MergedGrade, MergedGrade) {
        match self {
            LabelPair::HRelNRel => (MergedGrade::HRel, MergedGrade::NRel),
            LabelPair::HRelRel => (MergedGrade::HRel, MergedGrade::Rel),
            LabelPair::RelNRel => (MergedGrade::Rel, MergedGrade::NRel),
        }
    }

    /// The pair formed by two grades in either order; `None` when equal.
    pub fn of(a: MergedGrade, b: MergedGrade) -> Option<Self> {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        Self::ALL.into_iter().find(|p| p.grades() == (hi, lo))
    }
}

impl fmt::Display for LabelPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (hi, lo) = self.grades();
        write!(f, "{hi}-{lo}")
    }
}

impl std::str::FromStr for LabelPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown label pair `{s}`")))
    }
}

/// Maps a raw grade code to its merged level; `Ok(None)` means the judgment
/// is excluded (Nav).
pub fn merge_labels(code: i32) -> Result<Option<MergedGrade>> {
    Ok(Grade::from_code(code)?.merged())
}

/// Which grade values evaluation sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradeScale {
    /// NRel=0, Rel=1, HRel=2 with Nav excluded.
    #[default]
    Merged,
    /// Raw codes with Junk floored at 0 (maximum grade 4).
    Raw,
}

impl GradeScale {
    pub fn max_grade(self) -> u8 {
        match self {
            GradeScale::Merged => 2,
            GradeScale::Raw => 4,
        }
    }
}

/// Relevance judgments: `(query_id, doc_id) -> grade`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Judgments {
    raw: BTreeMap<String, BTreeMap<String, Grade>>,
}

impl Judgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: Grade) -> Option<Grade> {
        self.raw
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade)
    }

    pub fn raw(&self, query_id: &str, doc_id: &str) -> Option<Grade> {
        self.raw.get(query_id)?.get(doc_id).copied()
    }

    /// Merged grade, `None` if unjudged or Nav.
    pub fn merged(&self, query_id: &str, doc_id: &str) -> Option<MergedGrade> {
        self.raw(query_id, doc_id)?.merged()
    }

    /// Grade on the requested scale, `None` if unjudged or excluded.
    pub fn graded(&self, query_id: &str, doc_id: &str, scale: GradeScale) -> Option<u8> {
        let g = self.raw(query_id, doc_id)?;
        match scale {
            GradeScale::Merged => g.merged().map(MergedGrade::value),
            GradeScale::Raw => Some(g.code().max(0) as u8),
        }
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.raw.keys().map(String::as_str)
    }

    /// All raw judgments for a query, ordered by document id.
    pub fn for_query(&self, query_id: &str) -> impl Iterator<Item = (&str, Grade)> {
        self.raw
            .get(query_id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(d, g)| (d.as_str(), *g)))
    }

    /// Merged judgments for a query, Nav removed, ordered by document id.
    pub fn merged_for_query(&self, query_id: &str) -> Vec<(&str, MergedGrade)> {
        self.for_query(query_id)
            .filter_map(|(d, g)| g.merged().map(|m| (d, m)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.raw.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Parses `qid iter docid grade` lines.
pub fn parse_qrels(content: &str, path: &Path) -> Result<Judgments> {
    let mut judgments = Judgments::new();
    for (n, line) in content.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let [qid, _iter, docid, grade] = fields[..] else {
            return Err(parse_err(format!(
                "expected 4 fields `qid iter docid grade`, found {}",
                fields.len()
            )));
        };
        let code: i32 = grade
            .parse()
            .map_err(|_| parse_err(format!("grade `{grade}` is not an integer")))?;
        let grade = Grade::from_code(code).map_err(|e| parse_err(e.to_string()))?;
        if judgments.insert(qid, docid, grade).is_some() {
            log::warn!("{}:{}: duplicate judgment for ({qid}, {docid}), keeping the last", path.display(), n + 1);
        }
    }
    Ok(judgments)
}

pub fn read_qrels(path: &Path) -> Result<Judgments> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&content, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// One query's ranking, ordered by rank with non-increasing scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    entries: Vec<RunEntry>,
}

impl RankedList {
    /// Orders `(doc_id, score)` pairs by descending score, keeping input
    /// order among equal scores, and assigns ranks from 1.
    pub fn from_scored(
        query_id: impl Into<String>,
        scored: impl IntoIterator<Item = (String, f64)>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let mut scored: Vec<(String, f64)> = scored.into_iter().collect();
        let mut seen = HashSet::new();
        for (doc, score) in &scored {
            if score.is_nan() {
                return Err(Error::Numerical(format!(
                    "query {query_id}: document {doc} has a NaN score"
                )));
            }
            if !seen.insert(doc.as_str()) {
                return Err(Error::Data(format!(
                    "query {query_id}: document {doc} ranked twice"
                )));
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let entries = scored
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RunEntry {
                doc_id,
                score,
                rank: i + 1,
            })
            .collect();
        Ok(Self { query_id, entries })
    }

    pub fn entries(&self) -> &[RunEntry] {
        &self.entries
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A parsed run file plus the number of queries whose listed ranks
/// contradicted their scores and were re-sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRun {
    pub lists: Vec<RankedList>,
    pub resorted: usize,
}

/// Parses `qid Q0 docid rank score tag` lines. Queries keep the order of
/// their first appearance.
pub fn parse_run(content: &str, path: &Path) -> Result<ParsedRun> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (n, line) in content.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let [qid, _q0, docid, rank, score, _tag] = fields[..] else {
            return Err(parse_err(format!(
                "expected 6 fields `qid Q0 docid rank score tag`, found {}",
                fields.len()
            )));
        };
        let rank: usize = rank
            .parse()
            .map_err(|_| parse_err(format!("rank `{rank}` is not a non-negative integer")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| parse_err(format!("score `{score}` is not a number")))?;
        if score.is_nan() {
            return Err(parse_err("score is NaN".into()));
        }
        if !seen.insert((qid.to_string(), docid.to_string())) {
            return Err(parse_err(format!("document {docid} listed twice for query {qid}")));
        }
        if !rows.contains_key(qid) {
            order.push(qid.to_string());
        }
        rows.entry(qid.to_string())
            .or_default()
            .push((rank, docid.to_string(), score));
    }

    let mut lists = Vec::with_capacity(order.len());
    let mut resorted = 0;
    for qid in order {
        let mut entries = rows.remove(&qid).unwrap_or_default();
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[1].2 > w[0].2) {
            log::warn!(
                "{}: query {qid} has scores increasing with rank; re-sorting by score",
                path.display()
            );
            resorted += 1;
        }
        lists.push(RankedList::from_scored(
            qid,
            entries.into_iter().map(|(_, d, s)| (d, s)),
        )?);
    }
    Ok(ParsedRun { lists, resorted })
}

pub fn read_run(path: &Path) -> Result<Vec<RankedList>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_run(&content, path)?.lists)
}

/// Writes lists in TREC run format with ranks `1..n` and six-decimal scores.
pub fn write_run(lists: &[RankedList], path: &Path, tag: &str) -> Result<()> {
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(Error::Config(format!("run tag `{tag}` must be one non-empty word")));
    }
    let mut out = Vec::new();
    for list in lists {
        for (i, e) in list.entries.iter().enumerate() {
            writeln!(out, "{} Q0 {} {} {:.6} {tag}", list.query_id, e.doc_id, i + 1, e.score)
                .expect("writing to a Vec cannot fail");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
