//! Dataset ingestion and preprocessing.
//!
//! Two line-delimited JSON inputs:
//!
//! * interactions: one student per line,
//!   `{"student_id": "s1", "question_ids": [..], "concept_ids": [..], "responses": [..], "timestamps": [..]}`
//! * questions: one question per line, `{"question_id": 7, "routes": [[root, .., leaf], ..]}`
//!
//! Preprocessing drops incomplete interactions, removes short students,
//! expands each question to one entry per leaf concept, keeps the most recent
//! `max_len` entries and pads to `max_len` with `-1`.

use crate::error::{Error, Result};
use crate::model::SequenceInput;
use crate::relevance::{build_relevance_matrix, ConceptId, KCHierarchy, QuestionId, RelevanceMatrix, RouteTable};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

pub const PAD: i64 = -1;
pub const DEFAULT_MAX_LEN: usize = 200;
pub const DEFAULT_MIN_INTERACTIONS: usize = 3;
/// Concept recorded for questions that have no routes.
pub const SENTINEL_CONCEPT: ConceptId = ConceptId::MAX;
pub const FORMAT_VERSION: u32 = 1;
pub const TEST_FRACTION: f64 = 0.2;
pub const NUM_FOLDS: usize = 5;
pub const MIN_SPLIT_SEQUENCES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub question_id: QuestionId,
    pub concept_id: ConceptId,
    pub response: u8,
    pub timestamp: i64,
}

/// One student's interactions in timestamp order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub student_id: String,
    pub interactions: Vec<Interaction>,
    /// Set once entries have been expanded to concept level.
    #[serde(default)]
    pub kc_expanded: bool,
}

/// Counters and line-numbered messages from loading.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub records_read: usize,
    pub records_dropped: usize,
    pub interactions_read: usize,
    pub interactions_dropped: usize,
    pub questions_read: usize,
    pub questions_dropped: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub students: Vec<StudentRecord>,
    pub routes: RouteTable,
    pub hierarchy: KCHierarchy,
    pub report: LoadReport,
}

const ARRAY_FIELDS: [&str; 4] = ["question_ids", "concept_ids", "responses", "timestamps"];

fn as_id(v: &Value) -> Option<u32> {
    v.as_u64().and_then(|x| u32::try_from(x).ok())
}

fn student_id_of(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Parses the interactions file. JSON syntax errors are fatal; incomplete
/// records and interactions are dropped and counted.
pub fn parse_interactions<R: Read>(reader: R, label: &str) -> Result<(Vec<StudentRecord>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut students: Vec<StudentRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: label.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        report.records_read += 1;
        let Some(obj) = value.as_object() else {
            report.records_dropped += 1;
            report.diagnostics.push(format!("{label}:{lineno}: record is not an object"));
            continue;
        };
        let arrays: Vec<Option<&Vec<Value>>> =
            ARRAY_FIELDS.iter().map(|f| obj.get(*f).and_then(Value::as_array)).collect();
        let width = arrays.iter().flatten().map(|a| a.len()).max().unwrap_or(0);
        report.interactions_read += width;
        let drop_record = |why: String, report: &mut LoadReport| {
            report.records_dropped += 1;
            report.interactions_dropped += width;
            report.diagnostics.push(format!("{label}:{lineno}: {why}"));
        };
        let Some(student_id) = student_id_of(obj.get("student_id")) else {
            drop_record("missing student_id".into(), &mut report);
            continue;
        };
        if let Some(missing) = ARRAY_FIELDS.iter().zip(&arrays).find(|(_, a)| a.is_none()) {
            drop_record(format!("missing field {}", missing.0), &mut report);
            continue;
        }
        let arrays: Vec<&Vec<Value>> = arrays.into_iter().flatten().collect();
        if arrays.iter().any(|a| a.len() != width) {
            drop_record("parallel arrays differ in length".into(), &mut report);
            continue;
        }
        let mut kept = Vec::with_capacity(width);
        for i in 0..width {
            let q = as_id(&arrays[0][i]);
            let c = as_id(&arrays[1][i]);
            let r = arrays[2][i].as_u64().filter(|&r| r <= 1);
            let ts = arrays[3][i].as_i64();
            match (q, c, r, ts) {
                (Some(question_id), Some(concept_id), Some(r), Some(timestamp)) => kept.push(Interaction {
                    question_id,
                    concept_id,
                    response: r as u8,
                    timestamp,
                }),
                _ => {
                    report.interactions_dropped += 1;
                    report
                        .diagnostics
                        .push(format!("{label}:{lineno}: interaction {i} is incomplete or invalid"));
                }
            }
        }
        let slot = *index.entry(student_id.clone()).or_insert_with(|| {
            students.push(StudentRecord {
                student_id,
                interactions: Vec::new(),
                kc_expanded: false,
            });
            students.len() - 1
        });
        students[slot].interactions.extend(kept);
    }
    for s in &mut students {
        s.interactions.sort_by_key(|it| it.timestamp);
    }
    students.retain(|s| !s.interactions.is_empty());
    Ok((students, report))
}

/// Parses the questions file into root-first paths per question.
pub fn parse_questions<R: Read>(
    reader: R,
    label: &str,
    report: &mut LoadReport,
) -> Result<BTreeMap<QuestionId, Vec<Vec<ConceptId>>>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: label.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        report.questions_read += 1;
        let parsed = (|| {
            let q = value.get("question_id").and_then(as_id)?;
            let routes = match value.get("routes") {
                None | Some(Value::Null) => Vec::new(),
                Some(v) => v
                    .as_array()?
                    .iter()
                    .map(|r| {
                        let r = r.as_array()?;
                        let ids: Option<Vec<u32>> = r.iter().map(as_id).collect();
                        ids.filter(|ids| !ids.is_empty())
                    })
                    .collect::<Option<Vec<_>>>()?,
            };
            Some((q, routes))
        })();
        match parsed {
            Some((q, routes)) => {
                if out.insert(q, routes).is_some() {
                    report
                        .diagnostics
                        .push(format!("{label}:{lineno}: question {q} listed twice, keeping the last"));
                }
            }
            None => {
                report.questions_dropped += 1;
                report
                    .diagnostics
                    .push(format!("{label}:{lineno}: malformed question record"));
            }
        }
    }
    Ok(out)
}

/// Reads both input files and validates the concept routes.
pub fn load_dataset(interactions_path: &Path, questions_path: &Path) -> Result<LoadedDataset> {
    let file = std::fs::File::open(interactions_path)?;
    let (students, mut report) = parse_interactions(file, &interactions_path.display().to_string())?;
    let qfile = std::fs::File::open(questions_path)?;
    let paths = parse_questions(qfile, &questions_path.display().to_string(), &mut report)?;
    let (routes, hierarchy) = RouteTable::from_paths(&paths)?;
    for d in &report.diagnostics {
        log::warn!("{d}");
    }
    Ok(LoadedDataset {
        students,
        routes,
        hierarchy,
        report,
    })
}

/// Keeps students with at least `min_interactions` interactions.
pub fn filter_short(students: Vec<StudentRecord>, min_interactions: usize) -> Vec<StudentRecord> {
    students
        .into_iter()
        .filter(|s| s.interactions.len() >= min_interactions)
        .collect()
}

/// Repeats each interaction once per leaf concept of its question, in route
/// order. Questions without routes keep one entry with [`SENTINEL_CONCEPT`].
/// Already-expanded records are returned unchanged.
pub fn expand_to_kc(record: &StudentRecord, routes: &RouteTable) -> StudentRecord {
    if record.kc_expanded {
        return record.clone();
    }
    let mut out = Vec::with_capacity(record.interactions.len());
    for it in &record.interactions {
        let leaves = routes.leaf_concepts(it.question_id);
        if leaves.is_empty() {
            log::debug!("question {} has no concept routes", it.question_id);
            out.push(Interaction {
                concept_id: SENTINEL_CONCEPT,
                ..*it
            });
        } else {
            out.extend(leaves.into_iter().map(|concept_id| Interaction { concept_id, ..*it }));
        }
    }
    StudentRecord {
        student_id: record.student_id.clone(),
        interactions: out,
        kc_expanded: true,
    }
}

/// A preprocessed sequence: the kept interactions plus padded id arrays.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentSequence {
    pub student_id: String,
    pub interactions: Vec<Interaction>,
    pub question_ids: Vec<i64>,
    pub concept_ids: Vec<i64>,
    pub responses: Vec<i64>,
    pub valid_mask: Vec<bool>,
}

impl StudentSequence {
    pub fn valid_len(&self) -> usize {
        self.interactions.len()
    }

    pub fn padded_len(&self) -> usize {
        self.question_ids.len()
    }

    /// Question ids of the real entries.
    pub fn questions(&self) -> Vec<QuestionId> {
        self.interactions.iter().map(|i| i.question_id).collect()
    }

    pub fn responses_u8(&self) -> Vec<u8> {
        self.interactions.iter().map(|i| i.response).collect()
    }

    /// The record this sequence was cut from, marked as expanded.
    pub fn to_record(&self) -> StudentRecord {
        StudentRecord {
            student_id: self.student_id.clone(),
            interactions: self.interactions.clone(),
            kc_expanded: true,
        }
    }

    /// Embedding indices of the real entries.
    pub fn to_input(&self, vocab: &Vocab) -> SequenceInput {
        SequenceInput {
            questions: self.interactions.iter().map(|i| i.question_id as usize).collect(),
            concepts: self.interactions.iter().map(|i| vocab.concept_index(i.concept_id)).collect(),
            responses: self.responses_u8(),
        }
    }
}

/// Keeps the most recent `max_len` entries and pads with [`PAD`].
pub fn truncate_pad(record: &StudentRecord, max_len: usize) -> StudentSequence {
    let n = record.interactions.len();
    let kept = record.interactions[n.saturating_sub(max_len)..].to_vec();
    let pad = |f: &dyn Fn(&Interaction) -> i64| -> Vec<i64> {
        let mut v: Vec<i64> = kept.iter().map(f).collect();
        v.resize(max_len, PAD);
        v
    };
    let question_ids = pad(&|i| i64::from(i.question_id));
    let concept_ids = pad(&|i| i64::from(i.concept_id));
    let responses = pad(&|i| i64::from(i.response));
    let mut valid_mask = vec![true; kept.len()];
    valid_mask.resize(max_len, false);
    StudentSequence {
        student_id: record.student_id.clone(),
        interactions: kept,
        question_ids,
        concept_ids,
        responses,
        valid_mask,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub max_len: usize,
    pub min_interactions: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            max_len: DEFAULT_MAX_LEN,
            min_interactions: DEFAULT_MIN_INTERACTIONS,
        }
    }
}

/// Embedding-table sizes. The last concept row is reserved for
/// [`SENTINEL_CONCEPT`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_questions: usize,
    pub num_concepts: usize,
}

impl Vocab {
    pub fn concept_index(&self, c: ConceptId) -> usize {
        if c == SENTINEL_CONCEPT {
            self.num_concepts - 1
        } else {
            c as usize
        }
    }

    fn covering(sequences: &[StudentSequence], routes: &RouteTable) -> Vocab {
        let max_q = sequences
            .iter()
            .flat_map(|s| s.interactions.iter().map(|i| i.question_id))
            .chain(routes.questions())
            .max()
            .unwrap_or(0);
        let max_c = sequences
            .iter()
            .flat_map(|s| s.interactions.iter().map(|i| i.concept_id))
            .filter(|&c| c != SENTINEL_CONCEPT)
            .chain(routes.questions().flat_map(|q| {
                routes
                    .routes(q)
                    .iter()
                    .flat_map(|r| r.concepts().to_vec())
                    .collect::<Vec<_>>()
            }))
            .max()
            .unwrap_or(0);
        Vocab {
            num_questions: max_q as usize + 1,
            num_concepts: max_c as usize + 2,
        }
    }
}

/// Per-rule accounting of where interactions went.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub interactions_read: usize,
    pub dropped_incomplete: usize,
    pub students_filtered: usize,
    pub interactions_filtered: usize,
    /// Question-level interactions that reached expansion.
    pub interactions_kept: usize,
    pub entries_after_expansion: usize,
    pub entries_truncated: usize,
    pub entries_kept: usize,
    pub questions_without_routes: usize,
}

/// Versioned, content-hashed preprocessing output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedDataset {
    pub format_version: u32,
    pub config: PreprocessConfig,
    pub vocab: Vocab,
    pub routes: BTreeMap<QuestionId, Vec<Vec<ConceptId>>>,
    pub sequences: Vec<StudentSequence>,
    pub report: PipelineReport,
    pub input_hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub content_hash: String,
}

/// Runs filtering, expansion and truncation over loaded students.
pub fn preprocess(loaded: &LoadedDataset, config: PreprocessConfig) -> Result<ProcessedDataset> {
    if config.max_len == 0 {
        return Err(Error::Validation("max_len must be positive".into()));
    }
    let mut report = PipelineReport {
        interactions_read: loaded.report.interactions_read,
        dropped_incomplete: loaded.report.interactions_dropped,
        ..Default::default()
    };
    let before: usize = loaded.students.iter().map(|s| s.interactions.len()).sum();
    let kept = filter_short(loaded.students.clone(), config.min_interactions);
    report.students_filtered = loaded.students.len() - kept.len();
    report.interactions_kept = kept.iter().map(|s| s.interactions.len()).sum();
    report.interactions_filtered = before - report.interactions_kept;
    let mut missing: Vec<QuestionId> = kept
        .iter()
        .flat_map(|s| s.interactions.iter().map(|i| i.question_id))
        .filter(|&q| loaded.routes.leaf_concepts(q).is_empty())
        .collect();
    missing.sort_unstable();
    missing.dedup();
    report.questions_without_routes = missing.len();
    if !missing.is_empty() {
        log::warn!("{} questions have no concept routes", missing.len());
    }
    let expanded: Vec<StudentRecord> = kept.iter().map(|s| expand_to_kc(s, &loaded.routes)).collect();
    report.entries_after_expansion = expanded.iter().map(|s| s.interactions.len()).sum();
    let sequences: Vec<StudentSequence> = expanded.iter().map(|s| truncate_pad(s, config.max_len)).collect();
    report.entries_kept = sequences.iter().map(StudentSequence::valid_len).sum();
    report.entries_truncated = report.entries_after_expansion - report.entries_kept;
    let vocab = Vocab::covering(&sequences, &loaded.routes);
    let mut ds = ProcessedDataset {
        format_version: FORMAT_VERSION,
        config,
        vocab,
        routes: loaded.routes.to_paths(),
        sequences,
        report,
        input_hashes: BTreeMap::new(),
        content_hash: String::new(),
    };
    ds.content_hash = ds.compute_hash()?;
    Ok(ds)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ProcessedDataset {
    fn compute_hash(&self) -> Result<String> {
        let mut unhashed = self.clone();
        unhashed.content_hash.clear();
        let bytes = serde_json::to_vec(&unhashed)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Records input-file hashes and refreshes the content hash.
    pub fn set_input_hashes(&mut self, hashes: BTreeMap<String, String>) -> Result<()> {
        self.input_hashes = hashes;
        self.content_hash = self.compute_hash()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads and verifies version and content hash.
    pub fn load(path: &Path) -> Result<Self> {
        let ds: ProcessedDataset = serde_json::from_slice(&std::fs::read(path)?)?;
        if ds.format_version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "{} has format version {}, expected {FORMAT_VERSION}",
                path.display(),
                ds.format_version
            )));
        }
        let expect = ds.compute_hash()?;
        if expect != ds.content_hash {
            return Err(Error::Integrity(format!(
                "{} content hash mismatch (stored {}, computed {expect})",
                path.display(),
                ds.content_hash
            )));
        }
        Ok(ds)
    }

    pub fn route_table(&self) -> Result<RouteTable> {
        Ok(RouteTable::from_paths(&self.routes)?.0)
    }

    pub fn inputs(&self) -> Vec<SequenceInput> {
        self.sequences.iter().map(|s| s.to_input(&self.vocab)).collect()
    }

    /// Relevance matrix of every sequence's real entries.
    pub fn relevance_matrices(&self, table: &RouteTable) -> Vec<RelevanceMatrix> {
        self.sequences
            .iter()
            .map(|s| build_relevance_matrix(&s.questions(), table))
            .collect()
    }
}

/// Held-out test indices plus cross-validation folds over the rest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub test: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
}

impl DatasetSplit {
    /// Training and validation indices when fold `k` validates.
    pub fn fold(&self, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let val = self
            .folds
            .get(k)
            .ok_or_else(|| Error::Lookup(format!("fold {k} of {}", self.folds.len())))?
            .clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        Ok((train, val))
    }
}

/// Shuffles `0..n` by `seed`, holds out 20% for testing and deals the rest
/// into five folds whose sizes differ by at most one.
pub fn make_splits(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < MIN_SPLIT_SEQUENCES {
        return Err(Error::Validation(format!(
            "need at least {MIN_SPLIT_SEQUENCES} sequences to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let test = order[..n_test].to_vec();
    let rest = &order[n_test..];
    let base = rest.len() / NUM_FOLDS;
    let extra = rest.len() % NUM_FOLDS;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for k in 0..NUM_FOLDS {
        let size = base + usize::from(k < extra);
        folds.push(rest[start..start + size].to_vec());
        start += size;
    }
    Ok(DatasetSplit { seed, test, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relevance::KCRoute;

    fn record(id: &str, qs: &[u32]) -> StudentRecord {
        StudentRecord {
            student_id: id.into(),
            interactions: qs
                .iter()
                .enumerate()
                .map(|(t, &q)| Interaction {
                    question_id: q,
                    concept_id: 0,
                    response: (t % 2) as u8,
                    timestamp: t as i64,
                })
                .collect(),
            kc_expanded: false,
        }
    }

    #[test]
    fn missing_response_field_drops_record() {
        let text = r#"{"student_id":"a","question_ids":[1],"concept_ids":[2],"timestamps":[5]}"#;
        let (students, rep) = parse_interactions(text.as_bytes(), "x").unwrap();
        assert!(students.is_empty());
        assert_eq!(rep.records_dropped, 1);
        assert_eq!(rep.interactions_dropped, 1);
        assert!(rep.diagnostics[0].starts_with("x:1:"));
    }

    #[test]
    fn empty_file_is_empty() {
        let (students, rep) = parse_interactions("".as_bytes(), "x").unwrap();
        assert!(students.is_empty());
        assert_eq!(rep, LoadReport::default());
    }

    #[test]
    fn syntax_error_is_fatal_with_line() {
        let text = "{\"student_id\":\"a\"}\n{oops";
        match parse_interactions(text.as_bytes(), "f.jsonl") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn null_entries_drop_single_interactions() {
        let text = r#"{"student_id":"a","question_ids":[1,null,3],"concept_ids":[1,1,1],"responses":[1,0,2],"timestamps":[3,2,1]}"#;
        let (students, rep) = parse_interactions(text.as_bytes(), "x").unwrap();
        assert_eq!(rep.interactions_read, 3);
        assert_eq!(rep.interactions_dropped, 2);
        assert_eq!(students[0].interactions.len(), 1);
    }

    #[test]
    fn records_are_sorted_and_merged() {
        let text = "{\"student_id\":7,\"question_ids\":[1,2],\"concept_ids\":[0,0],\"responses\":[1,0],\"timestamps\":[9,4]}\n\
                    {\"student_id\":\"7\",\"question_ids\":[3],\"concept_ids\":[0],\"responses\":[1],\"timestamps\":[6]}";
        let (students, _) = parse_interactions(text.as_bytes(), "x").unwrap();
        assert_eq!(students.len(), 1);
        let qs: Vec<u32> = students[0].interactions.iter().map(|i| i.question_id).collect();
        assert_eq!(qs, vec![2, 3, 1]);
    }

    #[test]
    fn filter_boundary() {
        let kept = filter_short(
            vec![record("a", &[1]), record("b", &[1, 2, 3]), record("c", &[1, 2, 3, 4, 5]), record("d", &[1, 2])],
            3,
        );
        let ids: Vec<_> = kept.iter().map(|s| s.student_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c"]);
    }

    #[test]
    fn expansion_repeats_responses() {
        let mut t = RouteTable::new();
        t.insert(1, vec![KCRoute::new(1, vec![10, 11]).unwrap()]);
        t.insert(2, vec![KCRoute::new(2, vec![10, 12]).unwrap(), KCRoute::new(2, vec![20, 21]).unwrap()]);
        let rec = record("a", &[1, 2, 3]);
        let e = expand_to_kc(&rec, &t);
        let got: Vec<(u32, u32, u8)> = e.interactions.iter().map(|i| (i.question_id, i.concept_id, i.response)).collect();
        assert_eq!(
            got,
            vec![(1, 11, 0), (2, 12, 1), (2, 21, 1), (3, SENTINEL_CONCEPT, 0)]
        );
        assert_eq!(expand_to_kc(&e, &t), e);
    }

    #[test]
    fn truncate_and_pad() {
        let long = record("a", &(0..250).collect::<Vec<_>>());
        let s = truncate_pad(&long, 200);
        assert_eq!(s.valid_len(), 200);
        assert_eq!(s.interactions[0].question_id, 50);
        assert!(s.valid_mask.iter().all(|&v| v));
        let exact = truncate_pad(&record("b", &(0..200).collect::<Vec<_>>()), 200);
        assert_eq!(exact.padded_len(), 200);
        assert!(!exact.question_ids.contains(&PAD));
        let short = truncate_pad(&record("c", &[4, 5, 6, 7, 8, 9, 10]), 200);
        assert_eq!(short.valid_mask.iter().filter(|&&v| v).count(), 7);
        assert_eq!(short.question_ids[7..], vec![PAD; 193][..]);
        assert_eq!(short.responses[199], PAD);
    }

    #[test]
    fn splits() {
        let s = make_splits(100, 1).unwrap();
        assert_eq!(s.test.len(), 20);
        assert!(s.folds.iter().all(|f| f.len() == 16));
        assert_eq!(s, make_splits(100, 1).unwrap());
        assert_ne!(s, make_splits(100, 2).unwrap());
        let (train, val) = s.fold(2).unwrap();
        assert_eq!((train.len(), val.len()), (64, 16));
        assert!(make_splits(9, 0).is_err());
        let odd = make_splits(13, 0).unwrap();
        let sizes: Vec<usize> = odd.folds.iter().map(Vec::len).collect();
        assert_eq!(odd.test.len() + sizes.iter().sum::<usize>(), 13);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
