//! Rasch-style raw embeddings.
//!
//! A question embedding is its concept embedding shifted along a per-concept
//! variation direction by the question's scalar difficulty:
//! `x = c[concept] + mu[question] * d[concept]`. Question-response pairs add a
//! response embedding and use a variation table indexed by (concept, response):
//! `y = (c[concept] + g[response]) + mu[question] * f[concept, response]`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct RaschParams {
    pub dim: usize,
    pub num_questions: usize,
    pub num_concepts: usize,
    /// `num_concepts x dim`
    pub concept_embed: ParamId,
    /// `num_concepts x dim`
    pub concept_variation: ParamId,
    /// `num_questions x 1`, initialised to zero.
    pub difficulty: ParamId,
    /// `2 x dim`, rows for incorrect and correct.
    pub response_embed: ParamId,
    /// `(num_concepts * 2) x dim`, row `concept * 2 + response`.
    pub pair_variation: ParamId,
}

impl RaschParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        num_questions: usize,
        num_concepts: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let concept_embed = store.add_uniform("rasch.concept", &[num_concepts, dim], bound, rng);
        let concept_variation =
            store.add_uniform("rasch.concept_variation", &[num_concepts, dim], bound, rng);
        let difficulty = store.add("rasch.difficulty", Tensor::zeros(&[num_questions, 1]));
        let response_embed = store.add_uniform("rasch.response", &[2, dim], bound, rng);
        let pair_variation =
            store.add_uniform("rasch.pair_variation", &[num_concepts * 2, dim], bound, rng);
        RaschParams {
            dim,
            num_questions,
            num_concepts,
            concept_embed,
            concept_variation,
            difficulty,
            response_embed,
            pair_variation,
        }
    }

    fn check_ids(&self, questions: &[usize], concepts: &[usize]) -> Result<()> {
        if questions.len() != concepts.len() {
            return Err(Error::shape(
                "rasch",
                &[questions.len()],
                &[concepts.len()],
            ));
        }
        if let Some(q) = questions.iter().find(|&&q| q >= self.num_questions) {
            return Err(Error::Lookup(format!(
                "question {q} out of range ({} questions)",
                self.num_questions
            )));
        }
        if let Some(c) = concepts.iter().find(|&&c| c >= self.num_concepts) {
            return Err(Error::Lookup(format!(
                "concept {c} out of range ({} concepts)",
                self.num_concepts
            )));
        }
        Ok(())
    }

    /// One row per position: `c[c_t] + mu[q_t] * d[c_t]`.
    pub fn question_embeddings(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        questions: &[usize],
        concepts: &[usize],
    ) -> Result<Var> {
        self.check_ids(questions, concepts)?;
        let c_tab = g.param(store, self.concept_embed);
        let d_tab = g.param(store, self.concept_variation);
        let mu_tab = g.param(store, self.difficulty);
        let base = g.gather(c_tab, concepts)?;
        let var = g.gather(d_tab, concepts)?;
        let mu = g.gather(mu_tab, questions)?;
        let shift = g.row_scale(var, mu)?;
        g.add(base, shift)
    }

    /// One row per position: `(c[c_t] + g[r_t]) + mu[q_t] * f[c_t, r_t]`.
    pub fn pair_embeddings(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        questions: &[usize],
        concepts: &[usize],
        responses: &[u8],
    ) -> Result<Var> {
        self.check_ids(questions, concepts)?;
        if responses.len() != questions.len() {
            return Err(Error::shape("rasch", &[questions.len()], &[responses.len()]));
        }
        if let Some(r) = responses.iter().find(|&&r| r > 1) {
            return Err(Error::Validation(format!("response {r} is not 0 or 1")));
        }
        let resp: Vec<usize> = responses.iter().map(|&r| r as usize).collect();
        let pair_rows: Vec<usize> = concepts
            .iter()
            .zip(&resp)
            .map(|(&c, &r)| c * 2 + r)
            .collect();
        let c_tab = g.param(store, self.concept_embed);
        let g_tab = g.param(store, self.response_embed);
        let f_tab = g.param(store, self.pair_variation);
        let mu_tab = g.param(store, self.difficulty);
        let base = g.gather(c_tab, concepts)?;
        let resp_e = g.gather(g_tab, &resp)?;
        let e = g.add(base, resp_e)?;
        let var = g.gather(f_tab, &pair_rows)?;
        let mu = g.gather(mu_tab, questions)?;
        let shift = g.row_scale(var, mu)?;
        g.add(e, shift)
    }
}

/// Embedding of a single question on a single concept, shape `1 x dim`.
pub fn question_embedding(
    g: &mut Graph,
    store: &ParamStore,
    params: &RaschParams,
    question: usize,
    concept: usize,
) -> Result<Var> {
    params.question_embeddings(g, store, &[question], &[concept])
}

/// Embedding of a single question-response pair, shape `1 x dim`.
pub fn pair_embedding(
    g: &mut Graph,
    store: &ParamStore,
    params: &RaschParams,
    question: usize,
    concept: usize,
    response: u8,
) -> Result<Var> {
    params.pair_embeddings(g, store, &[question], &[concept], &[response])
}
