//! Bag-of-words corpora: UCI ingestion, splits, binary presence views and
//! synthetic corpora drawn from the LDA generative process.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::model::TopicModel;
use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("cannot read {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },

    #[error("split size {n_train} out of range for {m} documents")]
    SplitRange { n_train: usize, m: usize },

    #[error("token {token} outside vocabulary of size {v} in document {doc_id}")]
    TokenRange { doc_id: usize, token: u32, v: usize },

    #[error("invalid corpus parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
}

impl Vocabulary {
    pub fn new(terms: Vec<String>) -> Result<Self, CorpusError> {
        if terms.is_empty() {
            return Err(CorpusError::Parameter("vocabulary must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(terms.len());
        for t in &terms {
            if !seen.insert(t.as_str()) {
                return Err(CorpusError::Parameter(format!("duplicate term {t:?}")));
            }
        }
        Ok(Self { terms })
    }

    /// Placeholder terms `w0 .. w{v-1}` for corpora with no word strings.
    pub fn anonymous(v: usize) -> Self {
        assert!(v >= 1, "vocabulary must not be empty");
        Self {
            terms: (0..v).map(|i| format!("w{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term(&self, index: usize) -> Option<&str> {
        self.terms.get(index).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

/// A tokenized document; tokens are vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: usize,
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn new(doc_id: usize, tokens: Vec<u32>) -> Self {
        Self { doc_id, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Presence vector of a document over the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDoc {
    pub doc_id: usize,
    pub bits: Vec<bool>,
}

impl BinaryDoc {
    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// One token per set bit, in word order.
    pub fn to_document(&self) -> Document {
        let tokens = self
            .bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(t, _)| t as u32)
            .collect();
        Document::new(self.doc_id, tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    vocabulary: Vocabulary,
    documents: Vec<Document>,
}

impl Corpus {
    pub fn new(vocabulary: Vocabulary, documents: Vec<Document>) -> Result<Self, CorpusError> {
        let v = vocabulary.len();
        for d in &documents {
            if let Some(&token) = d.tokens.iter().find(|&&t| t as usize >= v) {
                return Err(CorpusError::TokenRange { doc_id: d.doc_id, token, v });
            }
        }
        Ok(Self { vocabulary, documents })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn num_docs(&self) -> usize {
        self.documents.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    /// Total occurrences of each word.
    pub fn word_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.vocab_size()];
        for d in &self.documents {
            for &t in &d.tokens {
                totals[t as usize] += 1;
            }
        }
        totals
    }

    /// Sub-corpus over the given document positions, same vocabulary.
    pub fn select(&self, positions: &[usize]) -> Corpus {
        Corpus {
            vocabulary: self.vocabulary.clone(),
            documents: positions.iter().map(|&i| self.documents[i].clone()).collect(),
        }
    }

    /// Deterministic seeded split into `n_train` training documents and the rest.
    /// Each side keeps the original relative document order.
    pub fn split(&self, n_train: usize, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
        let m = self.num_docs();
        if n_train == 0 || n_train >= m {
            return Err(CorpusError::SplitRange { n_train, m });
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng::stream(seed, "corpus.split"));
        let (train, test) = order.split_at_mut(n_train);
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select(train), self.select(test)))
    }

    pub fn binary_docs(&self) -> Vec<BinaryDoc> {
        self.documents
            .iter()
            .map(|d| to_binary(d, self.vocab_size()))
            .collect()
    }

    /// Writes the corpus as a UCI docword file (1-indexed, one triple per
    /// distinct word in first-occurrence order) plus a vocabulary file.
    pub fn write_uci(&self, docword: &Path, vocab: &Path) -> std::io::Result<()> {
        let mut triples: Vec<(usize, usize, u64)> = Vec::new();
        for (i, d) in self.documents.iter().enumerate() {
            let mut order: Vec<u32> = Vec::new();
            let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
            for &t in &d.tokens {
                let c = counts.entry(t).or_insert(0);
                if *c == 0 {
                    order.push(t);
                }
                *c += 1;
            }
            for t in order {
                triples.push((i + 1, t as usize + 1, counts[&t]));
            }
        }
        let mut out = std::io::BufWriter::new(File::create(docword)?);
        writeln!(out, "{}", self.num_docs())?;
        writeln!(out, "{}", self.vocab_size())?;
        writeln!(out, "{}", triples.len())?;
        for (d, w, c) in triples {
            writeln!(out, "{d} {w} {c}")?;
        }
        out.flush()?;
        let mut out = std::io::BufWriter::new(File::create(vocab)?);
        for t in self.vocabulary.terms() {
            writeln!(out, "{t}")?;
        }
        out.flush()
    }
}

/// Presence encoding: bit `t` is set iff word `t` occurs at least once.
pub fn to_binary(doc: &Document, v: usize) -> BinaryDoc {
    let mut bits = vec![false; v];
    for &t in &doc.tokens {
        bits[t as usize] = true;
    }
    BinaryDoc { doc_id: doc.doc_id, bits }
}

/// Loads a UCI bag-of-words corpus, keeping the `top_v` most frequent words.
pub fn load_uci(docword_path: &Path, vocab_path: &Path, top_v: usize) -> Result<Corpus, CorpusError> {
    let open = |p: &Path| {
        File::open(p).map(BufReader::new).map_err(|source| CorpusError::Io {
            file: p.display().to_string(),
            source,
        })
    };
    parse_uci(
        open(docword_path)?,
        &docword_path.display().to_string(),
        open(vocab_path)?,
        &vocab_path.display().to_string(),
        top_v,
    )
}

pub fn parse_uci(
    docword: impl BufRead,
    docword_name: &str,
    vocab: impl BufRead,
    vocab_name: &str,
    top_v: usize,
) -> Result<Corpus, CorpusError> {
    if top_v == 0 {
        return Err(CorpusError::Parameter("top_v must be at least 1".into()));
    }
    let err = |line: usize, msg: String| CorpusError::Parse {
        file: docword_name.to_string(),
        line,
        msg,
    };
    let io_err = |source| CorpusError::Io {
        file: docword_name.to_string(),
        source,
    };

    let mut header = [0usize; 3];
    let mut lines = docword.lines().enumerate();
    for (slot, name) in header.iter_mut().zip(["D", "W", "NNZ"]) {
        let (i, line) = lines
            .next()
            .ok_or_else(|| err(0, format!("missing header line {name}")))?;
        let line = line.map_err(io_err)?;
        *slot = line
            .trim()
            .parse()
            .map_err(|_| err(i + 1, format!("header {name} is not a count: {:?}", line.trim())))?;
    }
    let [n_docs, n_words, nnz] = header;
    if n_words == 0 {
        return Err(err(2, "W must be at least 1".into()));
    }

    // (doc id, word id, count) in file order.
    let mut triples: Vec<(usize, usize, u64)> = Vec::with_capacity(nnz);
    for (i, line) in lines {
        let line = line.map_err(io_err)?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(err(lineno, format!("expected `docID wordID count`, got {:?}", line)));
        }
        let parse = |s: &str, what: &str| -> Result<i64, CorpusError> {
            s.parse::<i64>()
                .map_err(|_| err(lineno, format!("{what} is not an integer: {s:?}")))
        };
        let (d, w, c) = (parse(fields[0], "docID")?, parse(fields[1], "wordID")?, parse(fields[2], "count")?);
        if d < 1 || d as usize > n_docs {
            return Err(err(lineno, format!("docID {d} outside 1..={n_docs}")));
        }
        if w < 1 || w as usize > n_words {
            return Err(err(lineno, format!("wordID {w} outside 1..={n_words}")));
        }
        if c < 1 {
            return Err(err(lineno, format!("nonpositive count {c}")));
        }
        triples.push((d as usize, w as usize - 1, c as u64));
    }
    if triples.len() != nnz {
        return Err(err(
            3,
            format!("NNZ header says {nnz} triples but file has {}", triples.len()),
        ));
    }

    let mut terms = Vec::with_capacity(n_words);
    for line in vocab.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            file: vocab_name.to_string(),
            source,
        })?;
        terms.push(line.trim_end_matches('\r').to_string());
    }
    while terms.len() > n_words && terms.last().is_some_and(|t| t.is_empty()) {
        terms.pop();
    }
    if terms.len() != n_words {
        return Err(CorpusError::Parse {
            file: vocab_name.to_string(),
            line: terms.len(),
            msg: format!("vocabulary has {} terms but docword header W is {n_words}", terms.len()),
        });
    }

    let mut totals = vec![0u64; n_words];
    for &(_, w, c) in &triples {
        totals[w] += c;
    }
    let mut ranked: Vec<usize> = (0..n_words).collect();
    ranked.sort_by(|&a, &b| totals[b].cmp(&totals[a]).then(a.cmp(&b)));
    ranked.truncate(top_v);
    ranked.sort_unstable();
    let mut remap = vec![u32::MAX; n_words];
    for (new, &old) in ranked.iter().enumerate() {
        remap[old] = new as u32;
    }
    let kept_terms: Vec<String> = ranked.iter().map(|&old| terms[old].clone()).collect();
    let vocabulary = Vocabulary::new(kept_terms).map_err(|e| CorpusError::Parse {
        file: vocab_name.to_string(),
        line: 0,
        msg: e.to_string(),
    })?;

    let mut by_doc: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (d, w, c) in triples {
        let idx = remap[w];
        if idx == u32::MAX {
            continue;
        }
        by_doc
            .entry(d)
            .or_default()
            .extend(std::iter::repeat_n(idx, c as usize));
    }
    let documents = by_doc
        .into_iter()
        .filter(|(_, tokens)| !tokens.is_empty())
        .map(|(d, tokens)| Document::new(d, tokens))
        .collect();
    Corpus::new(vocabulary, documents)
}

fn sample_dirichlet<R: Rng>(concentration: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let total: f64 = draws.iter().sum();
    for x in &mut draws {
        *x /= total;
    }
    draws
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws a corpus from the LDA generative process and returns it with the
/// generating topic-word matrix.
pub fn synth_corpus(
    k: usize,
    v: usize,
    m: usize,
    doc_len: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<(Corpus, TopicModel), CorpusError> {
    if k == 0 || v == 0 || m == 0 || doc_len == 0 {
        return Err(CorpusError::Parameter("K, V, M and doc_len must be at least 1".into()));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(CorpusError::Parameter("alpha and beta must be positive".into()));
    }
    let mut topic_rng = rng::stream(seed, "synth.topics");
    let phi: Vec<f64> = (0..k)
        .flat_map(|_| sample_dirichlet(beta, v, &mut topic_rng))
        .collect();
    let model = TopicModel::from_weights(k, v, phi).map_err(|e| CorpusError::Parameter(e.to_string()))?;

    let mut doc_rng = rng::stream(seed, "synth.documents");
    let documents = (0..m)
        .map(|doc_id| {
            let theta = sample_dirichlet(alpha, k, &mut doc_rng);
            let tokens = (0..doc_len)
                .map(|_| {
                    let topic = sample_index(&theta, &mut doc_rng);
                    sample_index(model.row(topic), &mut doc_rng) as u32
                })
                .collect();
            Document::new(doc_id, tokens)
        })
        .collect();
    let corpus = Corpus::new(Vocabulary::anonymous(v), documents)?;
    Ok((corpus, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(docword: &str, vocab: &str, top_v: usize) -> Result<Corpus, CorpusError> {
        parse_uci(docword.as_bytes(), "docword", vocab.as_bytes(), "vocab", top_v)
    }

    #[test]
    fn single_triple_expands() {
        let c = parse("1\n1\n1\n1 1 2\n", "a\n", 1).unwrap();
        assert_eq!(c.num_docs(), 1);
        assert_eq!(c.documents()[0].tokens, vec![0, 0]);
    }

    #[test]
    fn truncation_keeps_most_frequent() {
        let c = parse("2\n2\n3\n1 1 1\n1 2 3\n2 2 1\n", "a\nb\n", 1).unwrap();
        assert_eq!(c.vocabulary().terms(), &["b".to_string()]);
        assert_eq!(c.documents()[0].tokens, vec![0, 0, 0]);
        assert_eq!(c.documents()[1].tokens, vec![0]);
    }

    #[test]
    fn truncation_tie_prefers_lower_id_and_drops_empty_docs() {
        let c = parse("3\n3\n3\n1 3 2\n2 2 2\n3 1 1\n", "a\nb\nc\n", 1).unwrap();
        assert_eq!(c.vocabulary().terms(), &["b".to_string()]);
        assert_eq!(c.num_docs(), 1);
        assert_eq!(c.documents()[0].doc_id, 2);
    }

    #[test]
    fn token_order_follows_triples() {
        let c = parse("1\n3\n2\n1 3 1\n1 1 2\n", "a\nb\nc\n", 3).unwrap();
        assert_eq!(c.documents()[0].tokens, vec![2, 0, 0]);
    }

    #[test]
    fn malformed_inputs_carry_positions() {
        let bad_header = parse("x\n1\n1\n1 1 1\n", "a\n", 1).unwrap_err();
        assert!(matches!(bad_header, CorpusError::Parse { line: 1, .. }), "{bad_header}");
        let word_range = parse("1\n1\n1\n1 2 1\n", "a\n", 1).unwrap_err();
        assert!(matches!(word_range, CorpusError::Parse { line: 4, .. }), "{word_range}");
        let zero_count = parse("1\n1\n1\n1 1 0\n", "a\n", 1).unwrap_err();
        assert!(matches!(zero_count, CorpusError::Parse { line: 4, .. }), "{zero_count}");
        let nnz = parse("1\n1\n2\n1 1 1\n", "a\n", 1).unwrap_err();
        assert!(matches!(nnz, CorpusError::Parse { .. }));
        assert!(parse("1\n1\n1\n1 1 1\n", "a\n", 0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = parse("2\n1\n2\n1 1 1\n2 1 1\n", "a\n", 1).unwrap();
        let (a, b) = c.split(1, 3).unwrap();
        assert_eq!((a.num_docs(), b.num_docs()), (1, 1));
        assert!(c.split(0, 3).is_err());
        assert!(c.split(2, 3).is_err());

        let (big, _) = synth_corpus(2, 5, 40, 3, 1.0, 1.0, 9).unwrap();
        let (t1, s1) = big.split(25, 11).unwrap();
        let (t2, s2) = big.split(25, 11).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(s1, s2);
        let mut ids: Vec<usize> = t1.documents().iter().chain(s1.documents()).map(|d| d.doc_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn binary_view() {
        assert_eq!(to_binary(&Document::new(0, vec![0, 0, 2]), 3).bits, vec![true, false, true]);
        assert_eq!(to_binary(&Document::new(0, vec![]), 3).bits, vec![false; 3]);
        assert_eq!(to_binary(&Document::new(0, vec![2, 1, 0]), 3).bits, vec![true; 3]);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_corpus(2, 3, 50, 20, 0.5, 0.5, 4).unwrap();
        let b = synth_corpus(2, 3, 50, 20, 0.5, 0.5, 4).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.num_tokens(), 1000);
    }

    #[test]
    fn synth_single_topic_frequencies_track_phi() {
        let (c, model) = synth_corpus(1, 4, 400, 50, 1.0, 1.0, 5).unwrap();
        let totals = c.word_totals();
        let n = c.num_tokens() as f64;
        for t in 0..4 {
            assert!((totals[t] as f64 / n - model.get(0, t)).abs() < 0.01);
        }
    }

    #[test]
    fn synth_large_beta_is_near_uniform() {
        let (_, model) = synth_corpus(3, 10, 1, 1, 1.0, 1e6, 6).unwrap();
        for k in 0..3 {
            for t in 0..10 {
                assert!((model.get(k, t) - 0.1).abs() < 0.01);
            }
        }
    }

    #[test]
    fn uci_write_then_load_round_trips() {
        let (c, _) = synth_corpus(2, 6, 10, 8, 0.5, 0.5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (dw, vp) = (dir.path().join("docword.txt"), dir.path().join("vocab.txt"));
        c.write_uci(&dw, &vp).unwrap();
        let back = load_uci(&dw, &vp, 6).unwrap();
        assert_eq!(back.num_tokens(), c.num_tokens());
        assert_eq!(back.word_totals(), c.word_totals());
        assert_eq!(back.vocabulary(), c.vocabulary());
    }

    proptest! {
        #[test]
        fn loaded_token_total_matches_retained_counts(
            triples in proptest::collection::vec((1usize..5, 1usize..7, 1u64..4), 1..20),
            top_v in 1usize..7,
        ) {
            let mut text = format!("5\n6\n{}\n", triples.len());
            for (d, w, c) in &triples {
                text.push_str(&format!("{d} {w} {c}\n"));
            }
            let vocab = "a\nb\nc\nd\ne\nf\n";
            let corpus = parse(&text, vocab, top_v).unwrap();
            let mut totals = [0u64; 6];
            for (_, w, c) in &triples {
                totals[w - 1] += c;
            }
            let mut ranked: Vec<usize> = (0..6).collect();
            ranked.sort_by(|&a, &b| totals[b].cmp(&totals[a]).then(a.cmp(&b)));
            let kept: u64 = ranked[..top_v].iter().map(|&w| totals[w]).sum();
            prop_assert_eq!(corpus.num_tokens() as u64, kept);
            for d in corpus.documents() {
                prop_assert!(!d.is_empty());
            }
        }

        #[test]
        fn binary_is_idempotent_on_its_support(tokens in proptest::collection::vec(0u32..8, 0..30)) {
            let b = to_binary(&Document::new(0, tokens), 8);
            prop_assert_eq!(to_binary(&b.to_document(), 8), b);
        }
    }
}
