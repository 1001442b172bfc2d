//! Synthetic students with route-dependent mastery.
//!
//! A forest of concepts is built level by level and every question gets one
//! root-to-leaf route. A student's chance of answering correctly is
//!
//! ```text
//! p = guess + (1 - guess - slip) * (1 - (1 - gain)^k)
//! ```
//!
//! where `k` counts that student's earlier interactions whose route shares a
//! concept with the current question's route.

use crate::data::{Interaction, StudentRecord};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::relevance::{ConceptId, QuestionId, RouteTable};
use crate::train::PreparedData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const MASTERY_FILE: &str = "mastery.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub roots: usize,
    /// Concept levels from root to leaf, inclusive.
    pub depth: usize,
    pub branching: usize,
    pub questions_per_leaf: usize,
    pub students: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Mastery gained per related exposure, in `(0, 1)`; zero disables learning.
    pub gain: f64,
    pub guess: f64,
    pub slip: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            roots: 2,
            depth: 3,
            branching: 5,
            questions_per_leaf: 4,
            students: 500,
            min_len: 3,
            max_len: 100,
            gain: 0.25,
            guess: 0.2,
            slip: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.roots == 0 || self.branching == 0 || self.questions_per_leaf == 0 || self.students == 0 {
            return fail("roots, branching, questions per leaf and students must be positive".into());
        }
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("invalid length range [{}, {}]", self.min_len, self.max_len));
        }
        if !(0.0..1.0).contains(&self.gain) {
            return fail(format!("gain must lie in [0, 1), got {}", self.gain));
        }
        for (name, v) in [("guess", self.guess), ("slip", self.slip)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.guess + self.slip >= 1.0 {
            return fail(format!("guess + slip must be below 1, got {}", self.guess + self.slip));
        }
        let leaves = (self.roots as u128) * (self.branching as u128).pow(self.depth as u32 - 1);
        if leaves * self.questions_per_leaf as u128 > u32::MAX as u128 / 2 {
            return fail("hierarchy is too large".into());
        }
        Ok(())
    }

    /// Success probability after `k` related exposures.
    pub fn success_probability(&self, k: usize) -> f64 {
        let mastery = 1.0 - (1.0 - self.gain).powi(k as i32);
        self.guess + (1.0 - self.guess - self.slip) * mastery
    }
}

/// Hidden state behind one generated response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasteryRecord {
    pub student_id: String,
    pub step: usize,
    pub question_id: QuestionId,
    pub related_exposures: usize,
    pub p_correct: f64,
    pub response: u8,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    /// Root-first path of every question.
    pub routes: BTreeMap<QuestionId, Vec<Vec<ConceptId>>>,
    pub students: Vec<StudentRecord>,
    pub mastery: Vec<MasteryRecord>,
}

/// Concept ids level by level; returns the root-first path to every leaf.
fn build_forest(spec: &SynthSpec) -> Vec<Vec<ConceptId>> {
    let mut next: ConceptId = 0;
    let mut paths: Vec<Vec<ConceptId>> = (0..spec.roots)
        .map(|_| {
            next += 1;
            vec![next - 1]
        })
        .collect();
    for _ in 1..spec.depth {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                (0..spec.branching)
                    .map(|_| {
                        let mut child = p.clone();
                        child.push(next);
                        next += 1;
                        child
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
    }
    paths
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let leaf_paths = build_forest(spec);
    let mut routes = BTreeMap::new();
    for (l, path) in leaf_paths.iter().enumerate() {
        for j in 0..spec.questions_per_leaf {
            routes.insert((l * spec.questions_per_leaf + j) as QuestionId, vec![path.clone()]);
        }
    }
    let (table, _) = RouteTable::from_paths(&routes)?;
    let num_questions = routes.len();
    let mut students = Vec::with_capacity(spec.students);
    let mut mastery = Vec::new();
    for s in 0..spec.students {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64);
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let student_id = format!("s{s:05}");
        let mut history: Vec<QuestionId> = Vec::with_capacity(len);
        let mut interactions = Vec::with_capacity(len);
        for step in 0..len {
            let q = rng.gen_range(0..num_questions) as QuestionId;
            let k = history.iter().filter(|&&h| table.related(h, q)).count();
            let p = spec.success_probability(k);
            let response = u8::from(rng.gen::<f64>() < p);
            interactions.push(Interaction {
                question_id: q,
                concept_id: table.leaf_concepts(q)[0],
                response,
                timestamp: step as i64,
            });
            mastery.push(MasteryRecord {
                student_id: student_id.clone(),
                step,
                question_id: q,
                related_exposures: k,
                p_correct: p,
                response,
            });
            history.push(q);
        }
        students.push(StudentRecord {
            student_id,
            interactions,
            kc_expanded: false,
        });
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        routes,
        students,
        mastery,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthFiles {
    pub interactions: PathBuf,
    pub questions: PathBuf,
    pub mastery: PathBuf,
}

impl SynthDataset {
    /// Writes the interactions, questions and mastery files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<SynthFiles> {
        std::fs::create_dir_all(dir)?;
        let files = SynthFiles {
            interactions: dir.join(INTERACTIONS_FILE),
            questions: dir.join(QUESTIONS_FILE),
            mastery: dir.join(MASTERY_FILE),
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(&files.interactions)?);
        for s in &self.students {
            let line = serde_json::json!({
                "student_id": s.student_id,
                "question_ids": s.interactions.iter().map(|i| i.question_id).collect::<Vec<_>>(),
                "concept_ids": s.interactions.iter().map(|i| i.concept_id).collect::<Vec<_>>(),
                "responses": s.interactions.iter().map(|i| i.response).collect::<Vec<_>>(),
                "timestamps": s.interactions.iter().map(|i| i.timestamp).collect::<Vec<_>>(),
            });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(&files.questions)?);
        for (q, r) in &self.routes {
            writeln!(w, "{}", serde_json::json!({"question_id": q, "routes": r}))?;
        }
        w.flush()?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(&files.mastery)?);
        for m in &self.mastery {
            writeln!(w, "{}", serde_json::to_string(m)?)?;
        }
        w.flush()?;
        Ok(files)
    }
}

/// Largest prediction change caused by flipping single past responses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub sequences: usize,
    pub unrelated_pairs: usize,
    pub related_pairs: usize,
    pub max_unrelated_delta: f64,
    pub max_related_delta: f64,
}

/// Flips each past response of the listed sequences and measures how much
/// every later prediction moves.
///
/// A flip at `tau` counts as unrelated to a prediction at `t` when no
/// position `u` in `[tau, t)` is related to both: a single-block model then
/// has no path from the response at `tau` to the prediction at `t`.
pub fn leakage_probe(
    params: &ModelParams,
    data: &PreparedData,
    indices: &[usize],
    mask_enabled: bool,
) -> Result<LeakageReport> {
    let mut rep = LeakageReport::default();
    for &i in indices {
        let input = &data.inputs[i];
        let f = &data.relevance[i];
        let mask = mask_enabled.then_some(f);
        let base = forward(params, input, mask)?.probabilities;
        rep.sequences += 1;
        for tau in 0..input.len() {
            let mut flipped = input.clone();
            flipped.responses[tau] ^= 1;
            let probs = forward(params, &flipped, mask)?.probabilities;
            for t in tau + 1..input.len() {
                let linked = (tau..t).any(|u| f.get(t, u) && f.get(u, tau));
                let delta = (probs[t] - base[t]).abs();
                if linked {
                    rep.related_pairs += 1;
                    rep.max_related_delta = rep.max_related_delta.max(delta);
                } else {
                    rep.unrelated_pairs += 1;
                    rep.max_unrelated_delta = rep.max_unrelated_delta.max(delta);
                }
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            branching: 2,
            questions_per_leaf: 2,
            students: 40,
            max_len: 30,
            ..Default::default()
        }
    }

    #[test]
    fn validation() {
        small().validate().unwrap();
        for bad in [
            SynthSpec { guess: 0.6, slip: 0.4, ..small() },
            SynthSpec { depth: 1, ..small() },
            SynthSpec { gain: 1.0, ..small() },
            SynthSpec { min_len: 5, max_len: 4, ..small() },
            SynthSpec { roots: 0, ..small() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Validation(_))), "{bad:?}");
        }
    }

    #[test]
    fn forest_shape() {
        let paths = build_forest(&small());
        assert_eq!(paths.len(), 8);
        assert!(paths.iter().all(|p| p.len() == 3));
        assert_eq!(paths[0], vec![0, 2, 6]);
        assert_eq!(paths[7], vec![1, 5, 13]);
    }

    #[test]
    fn first_exposure_is_guess() {
        let s = small();
        assert_eq!(s.success_probability(0), s.guess);
        let ds = generate(&s).unwrap();
        assert!(ds
            .mastery
            .iter()
            .filter(|m| m.related_exposures == 0)
            .all(|m| m.p_correct == s.guess));
        let no_gain = SynthSpec { gain: 0.0, ..s };
        assert!(generate(&no_gain).unwrap().mastery.iter().all(|m| m.p_correct == no_gain.guess));
    }

    #[test]
    fn reproducible() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.students, b.students);
        assert_eq!(a.mastery, b.mastery);
        let c = generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.students, c.students);
    }
}
