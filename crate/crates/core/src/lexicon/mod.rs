//! Bilingual lexicon induction: measure how well two embedding spaces are
//! aligned by translating each evaluated token to its cosine nearest
//! neighbor in the other space and scoring against a gold dictionary.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{GroupTag, Model};
use crate::tasks::NUM_SPECIALS;

// ── embedding matrices ──────────────────────────────────────────────

/// Token-embedding rows of one vocabulary: a dense [V×d] matrix. Positional
/// embeddings and layer-norm parameters are deliberately not part of this —
/// retrieval compares token identities only.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    vocab: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(vocab: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != vocab * dim || vocab == 0 || dim == 0 {
            return Err(Error::Contract(format!(
                "embedding matrix {vocab}x{dim} needs {} values, got {}",
                vocab * dim,
                data.len()
            )));
        }
        Ok(EmbeddingMatrix { vocab, dim, data })
    }

    /// Extract one side's token embeddings from a model. `side` must be
    /// `Src` or `Tgt`.
    pub fn from_model(model: &Model, side: GroupTag) -> Result<Self> {
        let prefix = match side {
            GroupTag::Src => "src",
            GroupTag::Tgt => "tgt",
            other => {
                return Err(Error::Contract(format!(
                    "{other} is not an embedding side; use src or tgt"
                )))
            }
        };
        let name = format!("{prefix}.tok_emb");
        let idx = model
            .registry()
            .index_of(&name)
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name:?}")))?;
        let t = &model.registry().get(idx).tensor;
        EmbeddingMatrix::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab {
            return Err(Error::Index {
                op: "embedding row",
                index: id,
                bound: self.vocab,
            });
        }
        Ok(&self.data[id * self.dim..(id + 1) * self.dim])
    }

    /// All non-special type ids of this vocabulary, the default evaluation
    /// set for induction.
    pub fn surface_types(&self) -> Vec<usize> {
        (NUM_SPECIALS..self.vocab).collect()
    }
}

// ── retrieval ───────────────────────────────────────────────────────

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// The key id whose row has the highest cosine similarity to `query`.
/// Ties break toward the lowest id; all-zero key rows never match.
pub fn nearest_neighbor(query: &[f64], keys: &EmbeddingMatrix) -> Result<usize> {
    if query.len() != keys.dim {
        return Err(Error::Contract(format!(
            "query has {} dims, keys have {}",
            query.len(),
            keys.dim
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::Retrieval("query vector is all zeros".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for id in 0..keys.vocab {
        let key = keys.row(id)?;
        let kn = norm(key);
        if kn == 0.0 {
            continue;
        }
        let cos = dot(query, key) / (qn * kn);
        match best {
            Some((_, b)) if cos <= b => {}
            _ => best = Some((id, cos)),
        }
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| Error::Retrieval("every key row is all zeros".into()))
}

// ── induction ───────────────────────────────────────────────────────

/// Result of inducing a lexicon: the child→parent map, plus any evaluated
/// types that had to be skipped because their embedding row was all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedLexicon {
    pub map: BTreeMap<usize, usize>,
    pub skipped_zero: Vec<usize>,
}

/// Translate each evaluated child type to its nearest parent type by cosine
/// similarity. Special tokens are never evaluated; zero child rows are
/// skipped and reported rather than failing the run.
pub fn induce_lexicon(
    child: &EmbeddingMatrix,
    parent: &EmbeddingMatrix,
    eval_types: &[usize],
) -> Result<InducedLexicon> {
    if child.dim != parent.dim {
        return Err(Error::Contract(format!(
            "child embeddings have {} dims, parent has {}",
            child.dim, parent.dim
        )));
    }
    let mut map = BTreeMap::new();
    let mut skipped_zero = Vec::new();
    let ids: BTreeSet<usize> = eval_types.iter().copied().collect();
    for id in ids {
        if id < NUM_SPECIALS {
            continue;
        }
        let row = child.row(id)?;
        if norm(row) == 0.0 {
            skipped_zero.push(id);
            continue;
        }
        map.insert(id, nearest_neighbor(row, parent)?);
    }
    Ok(InducedLexicon { map, skipped_zero })
}

// ── scoring ─────────────────────────────────────────────────────────

/// A construction-known bilingual dictionary: a set of (child type, parent
/// type) pairs. Many-to-many entries are allowed; retrieval of any listed
/// translation counts as a match.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldDictionary {
    pairs: BTreeSet<(usize, usize)>,
    sources: BTreeSet<usize>,
}

impl GoldDictionary {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let pairs: BTreeSet<_> = pairs.into_iter().collect();
        let sources = pairs.iter().map(|&(s, _)| s).collect();
        GoldDictionary { pairs, sources }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, pair: (usize, usize)) -> bool {
        self.pairs.contains(&pair)
    }

    pub fn has_source(&self, id: usize) -> bool {
        self.sources.contains(&id)
    }
}

/// Exact-match precision of an induced lexicon over the types the gold
/// dictionary can judge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexiconScore {
    pub accuracy: f64,
    pub evaluated: usize,
}

pub fn lexicon_accuracy(induced: &InducedLexicon, gold: &GoldDictionary) -> Result<LexiconScore> {
    let mut evaluated = 0;
    let mut hits = 0;
    for (&s, &t) in &induced.map {
        if !gold.has_source(s) {
            continue;
        }
        evaluated += 1;
        if gold.contains((s, t)) {
            hits += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::Undefined(
            "no induced entry is judged by the gold dictionary".into(),
        ));
    }
    Ok(LexiconScore {
        accuracy: hits as f64 / evaluated as f64,
        evaluated,
    })
}
