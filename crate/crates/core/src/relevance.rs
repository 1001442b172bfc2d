//! Knowledge-concept hierarchy, per-question concept routes, and the binary
//! relevance matrix that gates attention between positions of a sequence.
//!
//! Two questions are related when any route of one shares at least one
//! concept id with any route of the other. The matrix over a sequence is
//! assembled from a pair cache keyed by the unordered question pair, so each
//! pair is evaluated once no matter how many sequences contain it.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::RwLock;

pub type ConceptId = u32;
pub type QuestionId = u32;

/// Parent links and display names of the concept forest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KCHierarchy {
    parents: BTreeMap<ConceptId, Option<ConceptId>>,
    names: BTreeMap<ConceptId, String>,
}

impl KCHierarchy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a concept. Re-registering with the same parent is a no-op;
    /// a different parent is an integrity error.
    pub fn add_concept(&mut self, id: ConceptId, parent: Option<ConceptId>) -> Result<()> {
        match self.parents.get(&id) {
            Some(existing) if *existing != parent => Err(Error::Integrity(format!(
                "concept {id} has conflicting parents {existing:?} and {parent:?}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.parents.insert(id, parent);
                Ok(())
            }
        }
    }

    pub fn set_name(&mut self, id: ConceptId, name: impl Into<String>) {
        self.names.insert(id, name.into());
    }

    /// Builds the hierarchy implied by root-first paths.
    pub fn from_paths<'a>(paths: impl IntoIterator<Item = &'a [ConceptId]>) -> Result<Self> {
        let mut h = KCHierarchy::new();
        for path in paths {
            let mut parent = None;
            for &c in path {
                h.add_concept(c, parent)?;
                parent = Some(c);
            }
        }
        Ok(h)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        self.parents.contains_key(&id)
    }

    pub fn parent(&self, id: ConceptId) -> Option<ConceptId> {
        self.parents.get(&id).copied().flatten()
    }

    pub fn name(&self, id: ConceptId) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }

    pub fn concepts(&self) -> impl Iterator<Item = ConceptId> + '_ {
        self.parents.keys().copied()
    }

    pub fn roots(&self) -> Vec<ConceptId> {
        self.parents
            .iter()
            .filter(|(_, p)| p.is_none())
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn children(&self, id: ConceptId) -> Vec<ConceptId> {
        self.parents
            .iter()
            .filter(|(_, p)| **p == Some(id))
            .map(|(&c, _)| c)
            .collect()
    }

    /// Concepts that are nobody's parent.
    pub fn leaves(&self) -> Vec<ConceptId> {
        let parents: std::collections::BTreeSet<_> =
            self.parents.values().flatten().copied().collect();
        self.concepts().filter(|c| !parents.contains(c)).collect()
    }

    /// The single root that every concept hangs from, when it branches into
    /// at least two subtrees. Such a root would make every pair of questions
    /// related, so routes leave it out.
    pub fn universal_root(&self) -> Option<ConceptId> {
        match self.roots().as_slice() {
            [root] if self.children(*root).len() >= 2 => Some(*root),
            _ => None,
        }
    }

    /// Root-first path ending at `leaf`, without the universal root.
    pub fn extract_route(&self, question_id: QuestionId, leaf: ConceptId) -> Result<KCRoute> {
        if !self.contains(leaf) {
            return Err(Error::Lookup(format!("unknown concept {leaf}")));
        }
        let mut path = vec![leaf];
        let mut cur = leaf;
        while let Some(p) = self.parent(cur) {
            if !self.contains(p) {
                return Err(Error::Integrity(format!(
                    "concept {cur} has unknown parent {p}"
                )));
            }
            if path.len() > self.parents.len() {
                return Err(Error::Integrity(format!(
                    "parent links from concept {leaf} contain a cycle"
                )));
            }
            path.push(p);
            cur = p;
        }
        path.reverse();
        if path.len() > 1 && Some(path[0]) == self.universal_root() {
            path.remove(0);
        }
        KCRoute::new(question_id, path)
    }
}

/// Ordered concept path from a hierarchy root to a leaf, owned by a question.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KCRoute {
    question_id: QuestionId,
    route: Vec<ConceptId>,
    sorted: Vec<ConceptId>,
}

impl KCRoute {
    pub fn new(question_id: QuestionId, route: Vec<ConceptId>) -> Result<Self> {
        if route.is_empty() {
            return Err(Error::Validation(format!(
                "question {question_id} has an empty route"
            )));
        }
        let mut sorted = route.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!(
                "route {route:?} of question {question_id} repeats a concept"
            )));
        }
        Ok(KCRoute {
            question_id,
            route,
            sorted,
        })
    }

    pub fn question_id(&self) -> QuestionId {
        self.question_id
    }

    pub fn concepts(&self) -> &[ConceptId] {
        &self.route
    }

    pub fn leaf(&self) -> ConceptId {
        *self.route.last().expect("routes are non-empty")
    }

    fn sorted(&self) -> &[ConceptId] {
        &self.sorted
    }
}

/// True iff the two routes share at least one concept (set semantics).
pub fn routes_related(a: &KCRoute, b: &KCRoute) -> bool {
    let (x, y) = (a.sorted(), b.sorted());
    let (mut i, mut j) = (0, 0);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Question → routes, with a shared cache of pairwise relatedness.
#[derive(Debug, Default)]
pub struct RouteTable {
    routes: HashMap<QuestionId, Vec<KCRoute>>,
    cache: RwLock<HashMap<(QuestionId, QuestionId), bool>>,
}

impl Clone for RouteTable {
    fn clone(&self) -> Self {
        RouteTable {
            routes: self.routes.clone(),
            cache: RwLock::new(HashMap::new()),
        }
    }
}

impl RouteTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the routes of `question`.
    pub fn insert(&mut self, question: QuestionId, routes: Vec<KCRoute>) {
        self.routes.insert(question, routes);
        self.cache.get_mut().expect("cache lock").clear();
    }

    /// Builds the table from raw root-first paths per question. The hierarchy
    /// is inferred from the paths and every route is re-derived from it, which
    /// validates the paths and drops a universal root.
    pub fn from_paths(
        paths: &BTreeMap<QuestionId, Vec<Vec<ConceptId>>>,
    ) -> Result<(RouteTable, KCHierarchy)> {
        let hierarchy =
            KCHierarchy::from_paths(paths.values().flatten().map(Vec::as_slice))?;
        let mut table = RouteTable::new();
        for (&q, qpaths) in paths {
            let routes = qpaths
                .iter()
                .map(|p| {
                    let leaf = *p.last().ok_or_else(|| {
                        Error::Validation(format!("question {q} has an empty route"))
                    })?;
                    hierarchy.extract_route(q, leaf)
                })
                .collect::<Result<Vec<_>>>()?;
            table.routes.insert(q, routes);
        }
        Ok((table, hierarchy))
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn contains(&self, q: QuestionId) -> bool {
        self.routes.contains_key(&q)
    }

    pub fn routes(&self, q: QuestionId) -> &[KCRoute] {
        self.routes.get(&q).map_or(&[], Vec::as_slice)
    }

    pub fn questions(&self) -> impl Iterator<Item = QuestionId> + '_ {
        self.routes.keys().copied()
    }

    /// Distinct leaf concepts of `q`, in route order.
    pub fn leaf_concepts(&self, q: QuestionId) -> Vec<ConceptId> {
        let mut out: Vec<ConceptId> = Vec::new();
        for r in self.routes(q) {
            if !out.contains(&r.leaf()) {
                out.push(r.leaf());
            }
        }
        out
    }

    /// Root-first paths per question, ordered by question id.
    pub fn to_paths(&self) -> BTreeMap<QuestionId, Vec<Vec<ConceptId>>> {
        self.routes
            .iter()
            .map(|(&q, rs)| (q, rs.iter().map(|r| r.concepts().to_vec()).collect()))
            .collect()
    }

    fn compute_related(&self, a: QuestionId, b: QuestionId) -> bool {
        if a == b {
            return true;
        }
        let (ra, rb) = (self.routes(a), self.routes(b));
        ra.iter().any(|x| rb.iter().any(|y| routes_related(x, y)))
    }

    /// Whether questions `a` and `b` share a concept on any pair of routes.
    /// A question is always related to itself.
    pub fn related(&self, a: QuestionId, b: QuestionId) -> bool {
        if a == b {
            return true;
        }
        let key = (a.min(b), a.max(b));
        if let Some(&hit) = self.cache.read().expect("cache lock").get(&key) {
            return hit;
        }
        let value = self.compute_related(a, b);
        self.cache.write().expect("cache lock").insert(key, value);
        value
    }

    pub fn cached_pairs(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }
}

/// Symmetric binary matrix over the positions of one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceMatrix {
    n: usize,
    entries: Vec<u8>,
}

impl RelevanceMatrix {
    pub fn ones(n: usize) -> Self {
        RelevanceMatrix {
            n,
            entries: vec![1; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = RelevanceMatrix {
            n,
            entries: vec![0; n * n],
        };
        for i in 0..n {
            m.entries[i * n + i] = 1;
        }
        m
    }

    /// Validates entries are 0/1 and the matrix is symmetric.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Validation("relevance matrix must be square".into()));
        }
        let entries: Vec<u8> = rows.concat();
        if entries.iter().any(|&e| e > 1) {
            return Err(Error::Validation("relevance entries must be 0 or 1".into()));
        }
        let m = RelevanceMatrix { n, entries };
        for i in 0..n {
            for j in 0..i {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::Validation(format!(
                        "relevance matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j] == 1
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    pub fn is_all_ones(&self) -> bool {
        self.entries.iter().all(|&e| e == 1)
    }

    /// Restriction to positions `0..len`.
    pub fn prefix(&self, len: usize) -> RelevanceMatrix {
        let len = len.min(self.n);
        let mut entries = Vec::with_capacity(len * len);
        for i in 0..len {
            entries.extend_from_slice(&self.entries[i * self.n..i * self.n + len]);
        }
        RelevanceMatrix { n: len, entries }
    }

    /// Rows of space-separated 0/1 digits.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.n * self.n * 2);
        for i in 0..self.n {
            for j in 0..self.n {
                if j > 0 {
                    s.push(' ');
                }
                s.push(if self.get(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

/// Relevance matrix of a question sequence.
///
/// Questions absent from the table have no routes and relate only to
/// occurrences of the same question id.
pub fn build_relevance_matrix(sequence: &[QuestionId], table: &RouteTable) -> RelevanceMatrix {
    let n = sequence.len();
    let missing = sequence.iter().filter(|q| !table.contains(**q)).count();
    if missing > 0 {
        log::debug!("{missing} positions reference questions without routes");
    }
    let mut entries = vec![0u8; n * n];
    for i in 0..n {
        entries[i * n + i] = 1;
        for j in 0..i {
            let r = u8::from(table.related(sequence[i], sequence[j]));
            entries[i * n + j] = r;
            entries[j * n + i] = r;
        }
    }
    RelevanceMatrix { n, entries }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelevanceStats {
    pub n: usize,
    /// Mean of the off-diagonal entries; 0 when `n < 2`.
    pub density: f64,
    /// Off-diagonal ones per row.
    pub degrees: Vec<usize>,
    /// Rows with no off-diagonal ones.
    pub isolated: usize,
}

pub fn relevance_stats(f: &RelevanceMatrix) -> RelevanceStats {
    let n = f.len();
    let degrees: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && f.get(i, j)).count())
        .collect();
    let off = n * n.saturating_sub(1);
    let density = if off == 0 {
        0.0
    } else {
        degrees.iter().sum::<usize>() as f64 / off as f64
    };
    let isolated = degrees.iter().filter(|&&d| d == 0).count();
    RelevanceStats {
        n,
        density,
        degrees,
        isolated,
    }
}

impl RelevanceStats {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "positions: {}", self.n);
        let _ = writeln!(s, "density: {:.6}", self.density);
        let _ = writeln!(s, "isolated: {}", self.isolated);
        let degrees: Vec<String> = self.degrees.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "degrees: {}", degrees.join(" "));
        s
    }
}
