//! Synthetic translation tasks.
//!
//! A *language* is a deterministic rendering of shared concept sequences: a
//! surface bijection (which token spells each concept) plus a word-order
//! rule, optionally with a positional inflection — designated concept pairs
//! that trade spellings at odd positions, a toy stand-in for agreement
//! morphology — and optional neologisms, concepts a dialect spells with
//! coined token ids no related language shares. A *task* pairs two
//! languages; translating means re-rendering the same concepts under the
//! other language's surface forms and order.
//! Because both sides are exact functions of the concepts, corpus
//! generation, gold dictionaries, and split disjointness are all checkable
//! by construction.
//!
//! Token layout: ids 0–3 are the special tokens, concepts occupy the rest.
//! Source sentences are stored raw; target sentences carry BOS and EOS.

pub mod bleu;
pub mod noise;

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

// ── languages ───────────────────────────────────────────────────────

/// Word-order rule a language applies to the canonical concept order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reorder {
    Identity,
    Reverse,
    /// A fixed random permutation per sentence length, derived from the seed.
    FixedPermutation { seed: u64 },
}

impl Reorder {
    /// Position map for a sentence of `len` concepts: output position `i`
    /// renders the concept at input position `perm[i]`.
    pub fn permutation(&self, len: usize) -> Vec<usize> {
        match *self {
            Reorder::Identity => (0..len).collect(),
            Reorder::Reverse => (0..len).rev().collect(),
            Reorder::FixedPermutation { seed } => {
                let mut perm: Vec<usize> = (0..len).collect();
                let mut rng = stream(seed, &format!("reorder/{len}"));
                // Fisher–Yates
                for i in (1..len).rev() {
                    let j = rng.random_range(0..=i);
                    perm.swap(i, j);
                }
                perm
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Reorder::Identity => "identity".into(),
            Reorder::Reverse => "reverse".into(),
            Reorder::FixedPermutation { seed } => format!("perm:{seed}"),
        }
    }

    pub fn parse(s: &str) -> Result<Reorder> {
        match s {
            "identity" => Ok(Reorder::Identity),
            "reverse" => Ok(Reorder::Reverse),
            _ => match s.strip_prefix("perm:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| Reorder::FixedPermutation { seed })
                    .map_err(|_| Error::Config(format!("bad permutation seed in {s:?}"))),
                None => Err(Error::Config(format!(
                    "unknown reorder {s:?} (want identity, reverse, or perm:SEED)"
                ))),
            },
        }
    }
}

/// Positional inflection: `pairs` consecutive concept pairs starting at
/// concept id `start` — pair i is (start+2i, start+2i+1) — swap surface
/// forms whenever they land on an odd rendered position. Everything else
/// spells identically at every position. The swap is an involution, so
/// rendering stays invertible; the base bijection (even-position forms) is
/// what dictionaries list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inflection {
    pub start: usize,
    pub pairs: usize,
}

impl Inflection {
    /// The concept whose surface form `concept` borrows at odd positions:
    /// its pair partner inside the band, itself outside.
    pub fn partner(&self, concept: usize) -> usize {
        if concept >= self.start && concept < self.start + 2 * self.pairs {
            self.start + ((concept - self.start) ^ 1)
        } else {
            concept
        }
    }

    pub fn label(inflection: &Option<Inflection>) -> String {
        match inflection {
            None => "none".into(),
            Some(i) => format!("{}:{}", i.start, i.pairs),
        }
    }

    pub fn parse(s: &str) -> Result<Option<Inflection>> {
        if s == "none" {
            return Ok(None);
        }
        let bad = || Error::Config(format!("bad inflection {s:?} (want none or START:PAIRS)"));
        let (start, pairs) = s.split_once(':').ok_or_else(bad)?;
        Ok(Some(Inflection {
            start: start.parse().map_err(|_| bad())?,
            pairs: pairs.parse().map_err(|_| bad())?,
        }))
    }
}

/// Lexical innovation: `count` consecutive concepts starting at `start`
/// spell with fresh token ids past the shared surface range instead of
/// drawing from the surface bijection. A dialect with neologisms coins
/// words no related language uses, at every position alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neologisms {
    pub start: usize,
    pub count: usize,
}

impl Neologisms {
    fn contains(&self, concept: usize) -> bool {
        concept >= self.start && concept < self.start + self.count
    }

    pub fn label(neologisms: &Option<Neologisms>) -> String {
        match neologisms {
            None => "none".into(),
            Some(n) => format!("{}:{}", n.start, n.count),
        }
    }

    pub fn parse(s: &str) -> Result<Option<Neologisms>> {
        if s == "none" {
            return Ok(None);
        }
        let bad = || Error::Config(format!("bad neologisms {s:?} (want none or START:COUNT)"));
        let (start, count) = s.split_once(':').ok_or_else(bad)?;
        Ok(Some(Neologisms {
            start: start.parse().map_err(|_| bad())?,
            count: count.parse().map_err(|_| bad())?,
        }))
    }
}

/// One synthetic language: how many concepts it covers, which surface token
/// spells each concept, its word order, and optional positional inflection
/// and neologisms.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSpec {
    pub concept_vocab: usize,
    pub surface_seed: u64,
    pub reorder: Reorder,
    pub inflection: Option<Inflection>,
    pub neologisms: Option<Neologisms>,
}

impl LanguageSpec {
    /// Token-id vocabulary size including the special tokens and any
    /// neologism ids past the shared surface range.
    pub fn vocab_size(&self) -> usize {
        let slack = self.neologisms.map_or(0, |n| n.count);
        self.concept_vocab + NUM_SPECIALS + slack
    }

    pub fn validate(&self) -> Result<()> {
        if self.concept_vocab == 0 {
            return Err(Error::Config("concept vocabulary is empty".into()));
        }
        if let Some(i) = self.inflection {
            if i.start + 2 * i.pairs > self.concept_vocab {
                return Err(Error::Config(format!(
                    "inflection band {}..{} exceeds the {} concepts",
                    i.start,
                    i.start + 2 * i.pairs,
                    self.concept_vocab
                )));
            }
        }
        if let Some(n) = self.neologisms {
            if n.start + n.count > self.concept_vocab {
                return Err(Error::Config(format!(
                    "neologism band {}..{} exceeds the {} concepts",
                    n.start,
                    n.start + n.count,
                    self.concept_vocab
                )));
            }
        }
        Ok(())
    }

    /// The concept whose base surface form is spoken at this position.
    fn spoken(&self, concept: usize, position: usize) -> usize {
        match self.inflection {
            Some(i) if position % 2 == 1 => i.partner(concept),
            _ => concept,
        }
    }

    /// The surface bijection: a seeded permutation of the concept range.
    fn surface_map(&self) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.concept_vocab).collect();
        let mut rng = stream(self.surface_seed, "surface");
        for i in (1..self.concept_vocab).rev() {
            let j = rng.random_range(0..=i);
            map.swap(i, j);
        }
        map
    }

    /// Token id spelling one concept (after any positional swap): a coined
    /// id past the surface range for neologisms, the bijection otherwise.
    fn spell(&self, concept: usize, map: &[usize]) -> usize {
        match self.neologisms {
            Some(n) if n.contains(concept) => self.concept_vocab + (concept - n.start),
            _ => map[concept],
        }
    }

    /// Base surface token id for one concept (its even-position form).
    pub fn surface_of(&self, concept: usize) -> usize {
        debug_assert!(concept < self.concept_vocab);
        self.spell(concept, &self.surface_map()) + NUM_SPECIALS
    }

    /// Render a concept sequence: apply the word order, then spell each
    /// concept with this language's surface token for its position.
    pub fn render(&self, concepts: &[usize]) -> Vec<usize> {
        let map = self.surface_map();
        self.reorder
            .permutation(concepts.len())
            .into_iter()
            .enumerate()
            .map(|(i, p)| self.spell(self.spoken(concepts[p], i), &map) + NUM_SPECIALS)
            .collect()
    }

    /// Invert a rendered sentence back to canonical-order concepts.
    /// Useful for checking corpora; fails on special tokens.
    pub fn invert(&self, surface: &[usize]) -> Result<Vec<usize>> {
        let map = self.surface_map();
        let mut inverse = vec![usize::MAX; self.concept_vocab];
        for (c, &s) in map.iter().enumerate() {
            inverse[s] = c;
        }
        let perm = self.reorder.permutation(surface.len());
        let mut concepts = vec![0; surface.len()];
        for (i, &tok) in surface.iter().enumerate() {
            let x = tok
                .checked_sub(NUM_SPECIALS)
                .filter(|&x| x + NUM_SPECIALS < self.vocab_size())
                .ok_or_else(|| Error::Contract(format!("token {tok} is not a surface form")))?;
            let c = if x < self.concept_vocab {
                let c = inverse[x];
                if self.neologisms.is_some_and(|n| n.contains(c)) {
                    return Err(Error::Contract(format!(
                        "token {tok} spells a concept this dialect coins anew"
                    )));
                }
                c
            } else {
                self.neologisms
                    .map(|n| n.start + (x - self.concept_vocab))
                    .ok_or_else(|| Error::Contract(format!("token {tok} is not a surface form")))?
            };
            // `spoken` is an involution per position, so it undoes itself.
            concepts[perm[i]] = self.spoken(c, i);
        }
        Ok(concepts)
    }
}

/// A translation task: re-render `src`-language sentences in the `tgt`
/// language. Both languages must share the concept inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub src: LanguageSpec,
    pub tgt: LanguageSpec,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.src.concept_vocab != self.tgt.concept_vocab {
            return Err(Error::Config(format!(
                "languages disagree on concept vocabulary: {} vs {}",
                self.src.concept_vocab, self.tgt.concept_vocab
            )));
        }
        self.src.validate()?;
        self.tgt.validate()
    }

    /// Smallest model vocabulary that covers both languages' token ids.
    pub fn min_vocab(&self) -> usize {
        self.src.vocab_size().max(self.tgt.vocab_size())
    }
}

/// Gold concept-aligned dictionary between two languages: one
/// (source surface, target surface) pair per concept, in concept order.
/// Dictionaries list base forms; positional inflection does not enter.
pub fn gold_dictionary(a: &LanguageSpec, b: &LanguageSpec) -> Result<Vec<(usize, usize)>> {
    if a.concept_vocab != b.concept_vocab {
        return Err(Error::Config(
            "dictionary requires languages over the same concepts".into(),
        ));
    }
    let (ma, mb) = (a.surface_map(), b.surface_map());
    Ok((0..a.concept_vocab)
        .map(|c| (ma[c] + NUM_SPECIALS, mb[c] + NUM_SPECIALS))
        .collect())
}

// ── Zipf concept sampling ───────────────────────────────────────────

/// Cumulative-table sampler for the Zipf distribution `p(r) ∝ r^(-s)` over
/// ranks 1..=n, mapped to 0-based ids. Table construction is exact summation;
/// sampling is one uniform draw plus a binary search, so it is stable across
/// library versions.
#[derive(Debug, Clone)]
pub struct ZipfTable {
    cum: Vec<f64>,
}

impl ZipfTable {
    pub fn new(n: usize, s: f64) -> Result<ZipfTable> {
        if n == 0 {
            return Err(Error::Config("Zipf table needs at least one rank".into()));
        }
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::Config(format!("Zipf exponent must be positive, got {s}")));
        }
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for r in 1..=n {
            acc += (r as f64).powf(-s);
            cum.push(acc);
        }
        let z = acc;
        for c in &mut cum {
            *c /= z;
        }
        *cum.last_mut().unwrap() = 1.0;
        Ok(ZipfTable { cum })
    }

    /// Draw a 0-based id (rank − 1).
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        self.cum.partition_point(|&c| c <= u)
    }

    #[cfg(test)]
    fn cumulative(&self) -> &[f64] {
        &self.cum
    }
}

// ── corpora ─────────────────────────────────────────────────────────

/// One parallel sentence pair. `src` is the raw rendered source; `tgt` is
/// the rendered target wrapped in BOS … EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Train/dev/test corpora with cross-split-disjoint concept sentences.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

/// Sampling knobs for corpus generation.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_s: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_pairs: 8000,
            dev_pairs: 200,
            test_pairs: 200,
            min_len: 3,
            max_len: 12,
            zipf_s: 1.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "sentence length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        if self.train_pairs == 0 {
            return Err(Error::Config("train split must be non-empty".into()));
        }
        Ok(())
    }
}

/// Sample concept sentences for all three splits. Training sentences may
/// repeat among themselves; dev and test sentences are distinct from every
/// other sampled sentence, so no evaluation sentence is ever trained on.
fn sample_concept_splits(
    concept_vocab: usize,
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<[Vec<Vec<usize>>; 3]> {
    let zipf = ZipfTable::new(concept_vocab, cfg.zipf_s)?;
    let mut rng = stream(seed, "concepts");
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        (0..len).map(|_| zipf.sample(rng)).collect()
    };

    let train: Vec<Vec<usize>> = (0..cfg.train_pairs)
        .map(|_| {
            let s = draw(&mut rng);
            seen.insert(s.clone());
            s
        })
        .collect();

    let mut fresh = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(count);
        let budget = 1000 + 200 * count;
        let mut attempts = 0;
        while out.len() < count {
            attempts += 1;
            if attempts > budget {
                return Err(Error::Generation(format!(
                    "could not sample {count} unseen sentences after {budget} attempts; \
                     the concept space is too small for disjoint splits"
                )));
            }
            let s = draw(rng);
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        Ok(out)
    };

    let dev = fresh(cfg.dev_pairs, &mut rng)?;
    let test = fresh(cfg.test_pairs, &mut rng)?;
    Ok([train, dev, test])
}

fn render_pair(task: &TaskSpec, concepts: &[usize]) -> SentencePair {
    let src = task.src.render(concepts);
    let mut tgt = Vec::with_capacity(concepts.len() + 2);
    tgt.push(BOS);
    tgt.extend(task.tgt.render(concepts));
    tgt.push(EOS);
    SentencePair { src, tgt }
}

/// Generate parallel corpora for a translation task.
pub fn gen_parallel(task: &TaskSpec, cfg: &CorpusConfig, seed: u64) -> Result<Corpora> {
    task.validate()?;
    cfg.validate()?;
    let [train, dev, test] = sample_concept_splits(task.src.concept_vocab, cfg, seed)?;
    let render = |sents: Vec<Vec<usize>>| ParallelCorpus {
        pairs: sents.iter().map(|c| render_pair(task, c)).collect(),
    };
    Ok(Corpora {
        train: render(train),
        dev: render(dev),
        test: render(test),
    })
}

/// Span-noising knobs for denoising corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Fraction of source positions to cover with masked spans.
    pub mask_ratio: f64,
    /// Mean span length (Poisson; zero-length draws are resampled).
    pub lambda: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { mask_ratio: 0.35, lambda: 3.5 }
    }
}

/// Generate denoising corpora over a single language: the source is a
/// span-noised rendering, the target reconstructs the clean sentence.
/// Source and target share the language's vocabulary.
pub fn gen_denoise(
    lang: &LanguageSpec,
    cfg: &CorpusConfig,
    noise_cfg: &NoiseConfig,
    seed: u64,
) -> Result<Corpora> {
    lang.validate()?;
    cfg.validate()?;
    noise_cfg.validate()?;
    let [train, dev, test] = sample_concept_splits(lang.concept_vocab, cfg, seed)?;
    let mut rng = stream(seed, "denoise-spans");
    let mut render = |sents: Vec<Vec<usize>>| ParallelCorpus {
        pairs: sents
            .iter()
            .map(|c| {
                let clean = lang.render(c);
                let src = noise::noise_spans(&clean, noise_cfg, &mut rng);
                let mut tgt = Vec::with_capacity(clean.len() + 2);
                tgt.push(BOS);
                tgt.extend(clean);
                tgt.push(EOS);
                SentencePair { src, tgt }
            })
            .collect(),
    };
    Ok(Corpora {
        train: render(train),
        dev: render(dev),
        test: render(test),
    })
}

// ── corpus files ────────────────────────────────────────────────────

/// Write a corpus as text: `# key=value` header lines, then one
/// tab-separated pair of space-separated token ids per line.
pub fn write_corpus(path: &Path, corpus: &ParallelCorpus, header: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in header {
        out.push_str(&format!("# {k}={v}\n"));
    }
    for pair in &corpus.pairs {
        let src: Vec<String> = pair.src.iter().map(|t| t.to_string()).collect();
        let tgt: Vec<String> = pair.tgt.iter().map(|t| t.to_string()).collect();
        out.push_str(&src.join(" "));
        out.push('\t');
        out.push_str(&tgt.join(" "));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a corpus written by [`write_corpus`]. Returns the pairs and the
/// header key–value lines in file order.
pub fn read_corpus(path: &Path) -> Result<(ParallelCorpus, Vec<(String, String)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut header = Vec::new();
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Format {
            offset: (lineno + 1) as u64,
            msg: format!("{msg} (line {})", lineno + 1),
        };
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| bad("header line is not key=value"))?;
            header.push((k.to_string(), v.to_string()));
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| bad("data line has no tab separator"))?;
        let parse = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(&format!("bad token id {t:?}"))))
                .collect()
        };
        pairs.push(SentencePair { src: parse(src)?, tgt: parse(tgt)? });
    }
    Ok((ParallelCorpus { pairs }, header))
}
