//! Multi-source corpora: ingestion, byte-level tokenization and
//! mixture-driven stream drawing.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Code,
    Math,
    Knowledge,
}

impl Capability {
    pub const ALL: [Capability; 3] = [Capability::Code, Capability::Math, Capability::Knowledge];

    /// One-letter label used in report columns (`I_C`, `I_M`, `I_K`).
    pub fn letter(self) -> &'static str {
        match self {
            Capability::Code => "C",
            Capability::Math => "M",
            Capability::Knowledge => "K",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Capability::Code => "code",
            Capability::Math => "math",
            Capability::Knowledge => "knowledge",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Capability {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "code" | "c" => Ok(Capability::Code),
            "math" | "m" => Ok(Capability::Math),
            "knowledge" | "k" => Ok(Capability::Knowledge),
            other => Err(format!("unknown domain tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u64,
    pub source_id: String,
    pub text: String,
    pub domain_tags: BTreeSet<Capability>,
    /// Scorer name to score in `[0, 1]`.
    pub quality_scores: BTreeMap<String, f64>,
}

impl Document {
    pub fn sample(&self) -> TokenizedSample {
        TokenizedSample { doc_id: self.doc_id, tokens: encode(&self.text) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSample {
    pub doc_id: u64,
    pub tokens: Vec<u32>,
}

impl TokenizedSample {
    /// Length in tokens (`s_i`).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub source_id: String,
    /// Total token count `N_g`.
    pub total_tokens: u64,
    pub row_count: usize,
}

impl DatasetStats {
    pub fn from_samples(source_id: &str, samples: &[TokenizedSample]) -> Self {
        Self {
            source_id: source_id.to_string(),
            total_tokens: samples.iter().map(|s| s.len() as u64).sum(),
            row_count: samples.len(),
        }
    }
}

/// One ingested source.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub source_id: String,
    pub documents: Vec<Document>,
    pub stats: DatasetStats,
}

impl Corpus {
    pub fn from_documents(source_id: &str, documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.doc_id) {
                return Err(Error::DuplicateDocId { doc_id: d.doc_id, source_id: source_id.to_string() });
            }
        }
        let samples: Vec<TokenizedSample> = documents.iter().map(Document::sample).collect();
        let stats = DatasetStats::from_samples(source_id, &samples);
        Ok(Self { source_id: source_id.to_string(), documents, stats })
    }

    pub fn samples(&self) -> Vec<TokenizedSample> {
        self.documents.iter().map(Document::sample).collect()
    }
}

/// Byte-level vocabulary: ids `0..256` are raw bytes, followed by specials.
pub mod vocab {
    pub const BYTES: u32 = 256;
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const SEP: u32 = 258;
    pub const PAD: u32 = 259;
    pub const DEFAULT_SIZE: usize = 260;
}

/// One token per UTF-8 byte.
pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`encode`]; special tokens are dropped and invalid byte runs
/// are replaced with U+FFFD.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < vocab::BYTES).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Tokenizes free text; the sample id is the content hash.
pub fn tokenize(text: &str) -> TokenizedSample {
    TokenizedSample { doc_id: content_id(text), tokens: encode(text) }
}

/// First eight bytes of SHA-256, big-endian.
pub fn content_id(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RecordId {
    Number(u64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default)]
    id: Option<RecordId>,
    text: String,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    scores: BTreeMap<String, f64>,
}

/// Reads line-delimited JSON records `{id, text, tags?, scores?}`. Numeric ids
/// (or ids that parse as `u64`) are used directly; other ids, and records
/// without one, are hashed.
pub fn ingest_corpus(path: &Path, source_id: &str) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRecord { path: path.to_path_buf(), line: lineno, message };
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let doc_id = match &record.id {
            Some(RecordId::Number(n)) => *n,
            Some(RecordId::Text(s)) => s.parse::<u64>().unwrap_or_else(|_| content_id(s)),
            None => content_id(&record.text),
        };
        let domain_tags = record
            .tags
            .iter()
            .map(|t| t.parse::<Capability>())
            .collect::<std::result::Result<BTreeSet<_>, _>>()
            .map_err(malformed)?;
        if let Some((name, v)) = record.scores.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(malformed(format!("score {name} = {v} outside [0, 1]")));
        }
        if !seen.insert(doc_id) {
            return Err(Error::DuplicateDocId { doc_id, source_id: source_id.to_string() });
        }
        documents.push(Document {
            doc_id,
            source_id: source_id.to_string(),
            text: record.text,
            domain_tags,
            quality_scores: record.scores,
        });
    }
    Corpus::from_documents(source_id, documents)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    weights: BTreeMap<String, f64>,
    token_budget: u64,
    seed: u64,
}

impl MixtureSpec {
    /// Weights whose sum is within this distance of 1 are renormalised.
    pub const DEFAULT_TOLERANCE: f64 = 0.005;

    pub fn new(weights: BTreeMap<String, f64>, token_budget: u64, seed: u64) -> Result<Self> {
        Self::with_tolerance(weights, token_budget, seed, Self::DEFAULT_TOLERANCE)
    }

    pub fn with_tolerance(weights: BTreeMap<String, f64>, token_budget: u64, seed: u64, tolerance: f64) -> Result<Self> {
        if token_budget == 0 {
            return Err(Error::Invalid("token budget must be positive".into()));
        }
        if weights.is_empty() {
            return Err(Error::Invalid("mixture has no sources".into()));
        }
        for (source_id, &weight) in &weights {
            if !weight.is_finite() || weight < 0.0 {
                return Err(Error::InvalidWeight { source_id: source_id.clone(), weight });
            }
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > tolerance || sum <= 0.0 {
            return Err(Error::WeightSum { sum, tolerance });
        }
        let weights = weights.into_iter().map(|(k, w)| (k, w / sum)).collect();
        Ok(Self { weights, token_budget, seed })
    }

    /// Equal weight on every named source.
    pub fn uniform<S: AsRef<str>>(sources: &[S], token_budget: u64, seed: u64) -> Result<Self> {
        let w = 1.0 / sources.len().max(1) as f64;
        Self::new(sources.iter().map(|s| (s.as_ref().to_string(), w)).collect(), token_budget, seed)
    }

    /// Weights proportional to each source's token count.
    pub fn natural(stats: &[DatasetStats], token_budget: u64, seed: u64) -> Result<Self> {
        let total: u64 = stats.iter().map(|s| s.total_tokens).sum();
        if total == 0 {
            return Err(Error::Invalid("sources hold no tokens".into()));
        }
        let weights = stats.iter().map(|s| (s.source_id.clone(), s.total_tokens as f64 / total as f64)).collect();
        Self::new(weights, token_budget, seed)
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn token_budget(&self) -> u64 {
        self.token_budget
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_budget(mut self, token_budget: u64) -> Self {
        self.token_budget = token_budget.max(1);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repetition {
    /// Resample an exhausted source with a fresh permutation.
    #[default]
    EpochWrap,
    /// Fail rather than repeat any sample.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamItem<'a> {
    pub source_id: &'a str,
    pub sample: &'a TokenizedSample,
}

/// Draws `w_g · budget` tokens (overshooting by less than one sample) from
/// every source, walking a seeded permutation of its samples, then shuffles
/// the merged stream. Each source's draw depends only on the seed and its
/// own name.
pub fn draw_stream<'a>(
    corpora: &'a BTreeMap<String, Vec<TokenizedSample>>,
    spec: &MixtureSpec,
    repetition: Repetition,
) -> Result<Vec<StreamItem<'a>>> {
    for source in spec.weights.keys() {
        if !corpora.contains_key(source) {
            return Err(Error::MissingSource(source.clone()));
        }
    }
    if let Some(extra) = corpora.keys().find(|k| !spec.weights.contains_key(*k)) {
        return Err(Error::UnweightedSource(extra.clone()));
    }
    let mut stream = Vec::new();
    for (source_id, samples) in corpora {
        let quota = spec.weights[source_id] * spec.token_budget as f64;
        if quota <= 0.0 {
            continue;
        }
        let usable: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].is_empty()).collect();
        let available: u64 = usable.iter().map(|&i| samples[i].len() as u64).sum();
        if usable.is_empty() || (repetition == Repetition::Strict && (available as f64) < quota) {
            return Err(Error::RepetitionRequired {
                source_id: source_id.clone(),
                available,
                required: quota.ceil() as u64,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("draw/{source_id}")));
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let mut pos = 0;
        let mut acc = 0u64;
        while (acc as f64) < quota {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let sample = &samples[order[pos]];
            pos += 1;
            acc += sample.len() as u64;
            stream.push(StreamItem { source_id: source_id.as_str(), sample });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "draw/merge"));
    stream.shuffle(&mut rng);
    Ok(stream)
}

/// Writes the `(position, doc_id, source_id, s_i)` manifest of a stream.
pub fn write_stream_manifest(path: &Path, stream: &[StreamItem<'_>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["position", "doc_id", "source_id", "s_i"])?;
    for (i, item) in stream.iter().enumerate() {
        w.write_record([i.to_string(), item.sample.doc_id.to_string(), item.source_id.to_string(), item.sample.len().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes documents as line-delimited JSON readable by [`ingest_corpus`].
pub fn write_corpus(path: &Path, documents: &[Document]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for d in documents {
        let tags: Vec<&str> = d.domain_tags.iter().map(|c| c.name()).collect();
        let line = serde_json::json!({ "id": d.doc_id, "text": d.text, "tags": tags, "scores": d.quality_scores });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn ingest_counts_tokens() {
        let f = write_lines(&[
            r#"{"id": "a", "text": "hello", "tags": ["math"]}"#,
            r#"{"id": 17, "text": "x+y"}"#,
            r#"{"text": "no id here"}"#,
        ]);
        let c = ingest_corpus(f.path(), "s").unwrap();
        assert_eq!(c.documents.len(), 3);
        assert_eq!(c.stats.total_tokens, 5 + 3 + 10);
        assert_eq!(c.documents[1].doc_id, 17);
        assert_eq!(c.documents[0].doc_id, content_id("a"));
        assert_eq!(c.documents[2].doc_id, content_id("no id here"));
        assert!(c.documents[0].domain_tags.contains(&Capability::Math));
    }

    #[test]
    fn single_record_stats_match_independent_count() {
        let text = "4+3=7;\n";
        let f = write_lines(&[&serde_json::json!({"id": "x", "text": text}).to_string()]);
        let c = ingest_corpus(f.path(), "s").unwrap();
        let independent = text.as_bytes().len() as u64;
        assert_eq!(independent, 7);
        assert_eq!(c.stats.total_tokens, independent);
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let f = write_lines(&[]);
        let c = ingest_corpus(f.path(), "s").unwrap();
        assert!(c.documents.is_empty());
        assert_eq!(c.stats.total_tokens, 0);
    }

    #[test]
    fn malformed_line_is_named() {
        let f = write_lines(&[r#"{"id": "a", "text": "ok"}"#, r#"{"id": "b", "txt": "bad"}"#]);
        match ingest_corpus(f.path(), "s") {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_lines(&[r#"{"id": "a", "text": "ok", "tags": ["poetry"]}"#]);
        assert!(matches!(ingest_corpus(f.path(), "s"), Err(Error::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_lines(&[r#"{"id": 5, "text": "a"}"#, r#"{"id": "5", "text": "b"}"#]);
        assert!(matches!(ingest_corpus(f.path(), "s"), Err(Error::DuplicateDocId { doc_id: 5, .. })));
    }

    #[test]
    fn tokenizer_basics() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("ab").len(), 2);
        assert_eq!(encode("héllo"), encode("héllo"));
        assert_eq!(decode(&encode("héllo")), "héllo");
    }

    fn sources(sizes: &[(&str, usize, usize)]) -> BTreeMap<String, Vec<TokenizedSample>> {
        sizes
            .iter()
            .map(|&(name, n, len)| {
                let samples = (0..n)
                    .map(|i| TokenizedSample { doc_id: (name.len() * 100_000 + i) as u64, tokens: vec![1; len] })
                    .collect();
                (name.to_string(), samples)
            })
            .collect()
    }

    fn share(stream: &[StreamItem<'_>], source: &str) -> u64 {
        stream.iter().filter(|s| s.source_id == source).map(|s| s.sample.len() as u64).sum()
    }

    #[test]
    fn equal_sources_split_budget() {
        let corpora = sources(&[("a", 50, 10), ("bb", 50, 10)]);
        let spec = MixtureSpec::uniform(&["a", "bb"], 1000, 3).unwrap();
        let stream = draw_stream(&corpora, &spec, Repetition::EpochWrap).unwrap();
        for s in ["a", "bb"] {
            assert!((share(&stream, s) as i64 - 500).abs() <= 10);
        }
    }

    #[test]
    fn zero_weight_source_contributes_nothing() {
        let corpora = sources(&[("a", 50, 10), ("bb", 50, 10)]);
        let spec = MixtureSpec::new([("a".into(), 1.0), ("bb".into(), 0.0)].into(), 300, 3).unwrap();
        let stream = draw_stream(&corpora, &spec, Repetition::EpochWrap).unwrap();
        assert_eq!(share(&stream, "bb"), 0);
        assert_eq!(share(&stream, "a"), 300);
    }

    #[test]
    fn missing_and_unweighted_sources_error() {
        let corpora = sources(&[("a", 5, 10)]);
        let spec = MixtureSpec::uniform(&["a", "zz"], 100, 0).unwrap();
        assert!(matches!(draw_stream(&corpora, &spec, Repetition::EpochWrap), Err(Error::MissingSource(s)) if s == "zz"));
        let corpora = sources(&[("a", 5, 10), ("bb", 5, 10)]);
        let spec = MixtureSpec::uniform(&["a"], 100, 0).unwrap();
        assert!(matches!(draw_stream(&corpora, &spec, Repetition::EpochWrap), Err(Error::UnweightedSource(_))));
    }

    #[test]
    fn epoch_wrap_versus_strict() {
        let corpora = sources(&[("a", 3, 10)]);
        let spec = MixtureSpec::uniform(&["a"], 95, 0).unwrap();
        let stream = draw_stream(&corpora, &spec, Repetition::EpochWrap).unwrap();
        assert_eq!(stream.len(), 10);
        // every sample appears once per epoch
        let first: HashSet<u64> = stream.iter().map(|s| s.sample.doc_id).collect();
        assert_eq!(first.len(), 3);
        assert!(matches!(draw_stream(&corpora, &spec, Repetition::Strict), Err(Error::RepetitionRequired { .. })));
        let spec = MixtureSpec::uniform(&["a"], 30, 0).unwrap();
        let stream = draw_stream(&corpora, &spec, Repetition::Strict).unwrap();
        let ids: HashSet<u64> = stream.iter().map(|s| s.sample.doc_id).collect();
        assert_eq!(ids.len(), stream.len());
    }

    #[test]
    fn published_seven_source_mix_renormalizes() {
        let published = [
            ("starcoder", 10.66),
            ("openwebmath", 6.93),
            ("fineweb_edu", 63.75),
            ("wiki", 5.03),
            ("arxiv", 6.36),
            ("stackexchange", 5.03),
            ("algebraic_stack", 2.25),
        ];
        let raw: f64 = published.iter().map(|(_, p)| p).sum();
        assert!((raw - 100.01).abs() < 1e-9, "{raw}");
        let weights = published.iter().map(|(n, p)| (n.to_string(), p / 100.0)).collect();
        let spec = MixtureSpec::new(weights, 1_000_000, 0).unwrap();
        let sum: f64 = spec.weights().values().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!((spec.weights()["fineweb_edu"] - 63.75 / raw).abs() < 1e-12);
    }

    #[test]
    fn weight_policy_errors() {
        let too_far = [("a".to_string(), 0.6), ("b".to_string(), 0.5)].into();
        assert!(matches!(MixtureSpec::new(too_far, 10, 0), Err(Error::WeightSum { .. })));
        let negative = [("a".to_string(), 1.1), ("b".to_string(), -0.1)].into();
        assert!(matches!(MixtureSpec::new(negative, 10, 0), Err(Error::InvalidWeight { .. })));
    }

    #[test]
    fn manifest_has_header_and_rows() {
        let corpora = sources(&[("a", 4, 3)]);
        let spec = MixtureSpec::uniform(&["a"], 6, 1).unwrap();
        let stream = draw_stream(&corpora, &spec, Repetition::EpochWrap).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_stream_manifest(f.path(), &stream).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "position,doc_id,source_id,s_i");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,") && lines[1].ends_with(",a,3"));
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let f = write_lines(&[r#"{"id": 3, "text": "abc", "tags": ["code"], "scores": {"q": 0.5}}"#]);
        let c = ingest_corpus(f.path(), "s").unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_corpus(out.path(), &c.documents).unwrap();
        let back = ingest_corpus(out.path(), "s").unwrap();
        assert_eq!(back.documents, c.documents);
    }
}
