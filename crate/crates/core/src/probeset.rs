//! Hierarchical rejection sampling: quality threshold, relevance
//! top-fraction, domain top-fraction and MinHash deduplication build a
//! representative set per source; capability probes are unions of them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode, Capability, Document};
use crate::error::{Error, Result};
use crate::seed::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    ThresholdClassifier,
    RelevanceJudge,
    DomainJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScorerBackend {
    /// Surface-feature stand-in chosen by the scorer kind.
    #[default]
    Heuristic,
    /// Logistic map of per-token NLL under a checkpoint:
    /// `p = 1 / (1 + exp(slope · (nll − center)))`.
    NllJudge { checkpoint: PathBuf, center: f64, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerSpec {
    pub name: String,
    pub kind: ScorerKind,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub top_fraction: Option<f64>,
    #[serde(default)]
    pub domain: Option<Capability>,
    /// Stored scores live in `[0, 1]`; thresholds compare against
    /// `score · scale`.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub backend: ScorerBackend,
}

fn one() -> f64 {
    1.0
}

impl ScorerSpec {
    pub fn threshold(name: &str, threshold: f64, scale: f64) -> Self {
        Self {
            name: name.into(),
            kind: ScorerKind::ThresholdClassifier,
            threshold: Some(threshold),
            top_fraction: None,
            domain: None,
            scale,
            backend: ScorerBackend::Heuristic,
        }
    }

    pub fn judge(name: &str, kind: ScorerKind, top_fraction: f64, domain: Option<Capability>) -> Self {
        Self { name: name.into(), kind, threshold: None, top_fraction: Some(top_fraction), domain, scale: 1.0, backend: ScorerBackend::Heuristic }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| Err(Error::Scorer { name: self.name.clone(), message: message.into() });
        match self.kind {
            ScorerKind::ThresholdClassifier => match self.threshold {
                Some(t) if t.is_finite() => {}
                _ => return bad("threshold classifiers need a finite threshold"),
            },
            ScorerKind::RelevanceJudge | ScorerKind::DomainJudge => match self.top_fraction {
                Some(f) if f > 0.0 && f <= 1.0 => {}
                _ => return bad("judges need top_fraction in (0, 1]"),
            },
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad("scale must be positive");
        }
        Ok(())
    }
}

/// Maps a document to a score in `[0, 1]`.
pub trait Scorer {
    fn score(&self, doc: &Document) -> Result<f64>;
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Fraction of whitespace-separated words that look well formed: lowercase
/// words containing a vowel, or arithmetic/bracket tokens built from digits
/// and operators.
pub struct FluencyScorer;

impl Scorer for FluencyScorer {
    fn score(&self, doc: &Document) -> Result<f64> {
        let ws = words(&doc.text);
        if ws.is_empty() {
            return Ok(0.0);
        }
        let good = ws
            .iter()
            .filter(|w| {
                let core = w.trim_end_matches(['.', ',', ';', ':']);
                let alpha = !core.is_empty() && core.bytes().all(|b| b.is_ascii_lowercase()) && core.bytes().any(|b| b"aeiou".contains(&b));
                let symbolic = !core.is_empty()
                    && core.bytes().all(|b| b.is_ascii_digit() || b"+-*=()>".contains(&b))
                    && (core.bytes().any(|b| b.is_ascii_digit()) || core == "=>" || core.bytes().all(|b| b == b')'));
                let keyword = core.trim_start_matches('(').bytes().all(|b| b.is_ascii_lowercase()) && core.starts_with('(');
                alpha || symbolic || keyword || **w == ";"
            })
            .count();
        Ok(good as f64 / ws.len() as f64)
    }
}

/// Lexical variety saturating with length.
pub struct InformativenessScorer;

impl Scorer for InformativenessScorer {
    fn score(&self, doc: &Document) -> Result<f64> {
        let ws = words(&doc.text);
        if ws.is_empty() {
            return Ok(0.0);
        }
        let distinct = ws.iter().collect::<BTreeSet<_>>().len() as f64;
        Ok(distinct / ws.len() as f64 * (1.0 - (-(ws.len() as f64) / 8.0).exp()))
    }
}

/// Density of domain-specific surface features; without a domain, the
/// maximum over all three.
pub struct DomainDensityScorer {
    pub domain: Option<Capability>,
}

pub fn domain_density(text: &str, domain: Capability) -> f64 {
    let bytes: Vec<u8> = text.bytes().filter(|b| !b.is_ascii_whitespace()).collect();
    if bytes.is_empty() {
        return 0.0;
    }
    match domain {
        Capability::Math => {
            let hits = bytes.iter().filter(|b| b.is_ascii_digit() || b"+-*=".contains(b)).count();
            hits as f64 / bytes.len() as f64
        }
        Capability::Code => {
            let brackets = bytes.iter().filter(|b| b"()>".contains(b)).count() as f64;
            let ops = ["add", "sub", "mul", "max"].iter().map(|k| text.matches(k).count()).sum::<usize>() as f64;
            ((brackets + 3.0 * ops) / bytes.len() as f64).min(1.0)
        }
        Capability::Knowledge => {
            let ws = words(text);
            let hits = ws.iter().filter(|w| ["capital", "river", "of", "is"].contains(&w.trim_end_matches('.'))).count();
            (2.0 * hits as f64 / ws.len().max(1) as f64).min(1.0)
        }
    }
}

impl Scorer for DomainDensityScorer {
    fn score(&self, doc: &Document) -> Result<f64> {
        Ok(match self.domain {
            Some(d) => domain_density(&doc.text, d),
            None => Capability::ALL.iter().map(|&d| domain_density(&doc.text, d)).fold(0.0, f64::max),
        })
    }
}

/// Relevance as a logistic map of per-token NLL under a domain checkpoint.
pub struct NllJudge {
    pub checkpoint: tinylm::Checkpoint,
    pub center: f64,
    pub slope: f64,
}

impl Scorer for NllJudge {
    fn score(&self, doc: &Document) -> Result<f64> {
        let tokens = encode(&doc.text);
        if tokens.len() < 2 {
            return Ok(0.0);
        }
        let nll = tinylm::forward_nll(&self.checkpoint, &tokens)?;
        Ok(1.0 / (1.0 + (self.slope * (nll - self.center)).exp()))
    }
}

/// Computes and stores `scorer`'s score for every document lacking one.
pub fn attach_scores(docs: &mut [Document], name: &str, scorer: &dyn Scorer) -> Result<()> {
    for d in docs.iter_mut() {
        if !d.quality_scores.contains_key(name) {
            let s = scorer.score(d)?;
            d.quality_scores.insert(name.to_string(), s.clamp(0.0, 1.0));
        }
    }
    Ok(())
}

fn score_of(doc: &Document, scorer: &str) -> Result<f64> {
    doc.quality_scores.get(scorer).copied().ok_or_else(|| Error::MissingScore { doc_id: doc.doc_id, scorer: scorer.to_string() })
}

/// Keeps documents whose `score · scale` is strictly above the threshold,
/// in their original order.
pub fn score_threshold(docs: &[Document], spec: &ScorerSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let threshold = spec.threshold.expect("validated");
    let mut out = Vec::new();
    for d in docs {
        if score_of(d, &spec.name)? * spec.scale > threshold {
            out.push(d.clone());
        }
    }
    Ok(out)
}

/// Number of documents kept by a top fraction of `n`.
pub fn top_count(fraction: f64, n: usize) -> usize {
    // guard against 0.1 · 100 evaluating to 10.000000000000002
    let raw = fraction * n as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
    k.min(n)
}

/// Keeps the `⌈fraction · n⌉` highest-probability documents, ties broken by
/// ascending doc_id; survivors keep their original order.
pub fn score_topfraction(docs: &[Document], spec: &ScorerSpec) -> Result<Vec<Document>> {
    spec.validate()?;
    let fraction = spec.top_fraction.expect("validated");
    let mut ranked = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        ranked.push((score_of(d, &spec.name)?, d.doc_id, i));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = ranked.iter().take(top_count(fraction, docs.len())).map(|r| r.2).collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| docs[i].clone()).collect())
}

pub const SHINGLE: usize = 8;
pub const NUM_HASHES: usize = 128;

/// 128-slot MinHash over token 8-grams. Sequences shorter than one shingle
/// are hashed whole.
#[derive(Debug, Clone)]
pub struct MinHasher {
    seeds: Vec<u64>,
}

impl Default for MinHasher {
    fn default() -> Self {
        Self::new(0x5eed_0f_d3d0)
    }
}

fn shingle_hash(window: &[u32]) -> u64 {
    window.iter().fold(0x51_7c_c1_b7_27_22_0a_95u64, |h, &t| splitmix64(h ^ t as u64))
}

/// Distinct shingle hashes of a token sequence.
pub fn shingles(tokens: &[u32]) -> BTreeSet<u64> {
    if tokens.len() < SHINGLE {
        return std::iter::once(shingle_hash(tokens)).collect();
    }
    tokens.windows(SHINGLE).map(shingle_hash).collect()
}

/// Exact Jaccard similarity of two token sequences' 8-gram sets.
pub fn exact_jaccard(a: &[u32], b: &[u32]) -> f64 {
    let (sa, sb) = (shingles(a), shingles(b));
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

impl MinHasher {
    pub fn new(seed: u64) -> Self {
        Self { seeds: (0..NUM_HASHES as u64).map(|k| splitmix64(seed ^ splitmix64(k))).collect() }
    }

    pub fn signature(&self, tokens: &[u32]) -> Vec<u64> {
        let mut sig = vec![u64::MAX; NUM_HASHES];
        for h in shingles(tokens) {
            for (slot, &s) in sig.iter_mut().zip(&self.seeds) {
                *slot = (*slot).min(splitmix64(h ^ s));
            }
        }
        sig
    }

    /// Fraction of equal slots.
    pub fn similarity(a: &[u64], b: &[u64]) -> f64 {
        a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
    }
}

/// Greedy scan in doc_id order that drops a document when its MinHash
/// similarity to any retained document reaches `threshold`. Output is in
/// doc_id order.
pub fn dedup_semantic(docs: &[Document], threshold: f64) -> Vec<Document> {
    let hasher = MinHasher::default();
    let mut order: Vec<&Document> = docs.iter().collect();
    order.sort_by_key(|d| d.doc_id);
    let mut index: Vec<HashMap<u64, Vec<usize>>> = vec![HashMap::new(); NUM_HASHES];
    let mut kept: Vec<&Document> = Vec::new();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for d in order {
        if threshold <= 0.0 && !kept.is_empty() {
            continue;
        }
        let sig = hasher.signature(&encode(&d.text));
        counts.clear();
        for (slot, v) in sig.iter().enumerate() {
            if let Some(hits) = index[slot].get(v) {
                for &k in hits {
                    *counts.entry(k).or_default() += 1;
                }
            }
        }
        let duplicate = counts.values().any(|&c| c as f64 / NUM_HASHES as f64 >= threshold);
        if duplicate {
            continue;
        }
        let k = kept.len();
        for (slot, v) in sig.into_iter().enumerate() {
            index[slot].entry(v).or_default().push(k);
        }
        kept.push(d);
    }
    kept.into_iter().cloned().collect()
}

/// Ordered scorer stages plus an optional dedup threshold.
pub struct ScorerChain {
    stages: Vec<(ScorerSpec, Box<dyn Scorer>)>,
    pub dedup_threshold: Option<f64>,
}

impl ScorerChain {
    /// Stages must be ordered threshold → relevance → domain.
    pub fn new(stages: Vec<(ScorerSpec, Box<dyn Scorer>)>, dedup_threshold: Option<f64>) -> Result<Self> {
        for (spec, _) in &stages {
            spec.validate()?;
        }
        if let Some(w) = stages.windows(2).find(|w| w[0].0.kind > w[1].0.kind) {
            return Err(Error::Scorer {
                name: w[1].0.name.clone(),
                message: format!("{:?} stage cannot follow {:?}", w[1].0.kind, w[0].0.kind),
            });
        }
        Ok(Self { stages, dedup_threshold })
    }

    /// Builds the scorer each spec names: the kind's heuristic, or an NLL
    /// judge loaded from its checkpoint.
    pub fn from_specs(specs: &[ScorerSpec], dedup_threshold: Option<f64>) -> Result<Self> {
        let mut stages: Vec<(ScorerSpec, Box<dyn Scorer>)> = Vec::new();
        for spec in specs {
            let scorer: Box<dyn Scorer> = match &spec.backend {
                ScorerBackend::Heuristic => match spec.kind {
                    ScorerKind::ThresholdClassifier => Box::new(FluencyScorer),
                    ScorerKind::RelevanceJudge => Box::new(InformativenessScorer),
                    ScorerKind::DomainJudge => Box::new(DomainDensityScorer { domain: spec.domain }),
                },
                ScorerBackend::NllJudge { checkpoint, center, slope } => Box::new(NllJudge {
                    checkpoint: tinylm::Checkpoint::load(checkpoint)?,
                    center: *center,
                    slope: *slope,
                }),
            };
            stages.push((spec.clone(), scorer));
        }
        Self::new(stages, dedup_threshold)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ScorerSpec> {
        self.stages.iter().map(|(s, _)| s)
    }

    /// Runs every stage (scoring documents that lack the stage's score),
    /// then dedup.
    pub fn apply(&self, docs: &[Document]) -> Result<Vec<Document>> {
        let mut current = docs.to_vec();
        for (spec, scorer) in &self.stages {
            attach_scores(&mut current, &spec.name, scorer.as_ref())?;
            current = match spec.kind {
                ScorerKind::ThresholdClassifier => score_threshold(&current, spec)?,
                _ => score_topfraction(&current, spec)?,
            };
        }
        if let Some(t) = self.dedup_threshold {
            current = dedup_semantic(&current, t);
        }
        Ok(current)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub source_id: String,
    /// Member doc_ids in ascending order.
    pub members: Vec<u64>,
    pub target_size: usize,
    /// Survivors' scores, keyed by doc_id.
    #[serde(default)]
    pub scores: BTreeMap<u64, BTreeMap<String, f64>>,
}

/// Runs the chain over one source and down-samples uniformly (with `seed`)
/// to at most `target_size` members.
pub fn build_representative(source_id: &str, docs: &[Document], chain: &ScorerChain, target_size: usize, seed: u64) -> Result<RepresentativeSet> {
    let mut survivors = chain.apply(docs)?;
    if survivors.is_empty() {
        log::warn!("representative set for {source_id} is empty after filtering {} documents", docs.len());
    }
    if survivors.len() > target_size {
        survivors.sort_by_key(|d| d.doc_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        survivors.shuffle(&mut rng);
        survivors.truncate(target_size);
    }
    survivors.sort_by_key(|d| d.doc_id);
    Ok(RepresentativeSet {
        source_id: source_id.to_string(),
        members: survivors.iter().map(|d| d.doc_id).collect(),
        target_size,
        scores: survivors.into_iter().map(|d| (d.doc_id, d.quality_scores)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProbeMember {
    pub doc_id: u64,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub capability: Capability,
    pub members: Vec<ProbeMember>,
}

/// Each capability's probe is the union of the representative sets of its
/// listed sources; a source listed under several capabilities feeds each.
pub fn build_probes(
    rep_sets: &BTreeMap<String, RepresentativeSet>,
    capability_sources: &BTreeMap<Capability, Vec<String>>,
) -> Result<BTreeMap<Capability, ProbeSet>> {
    let mut probes = BTreeMap::new();
    for (&capability, sources) in capability_sources {
        let mut members = BTreeSet::new();
        for s in sources {
            let rep = rep_sets
                .get(s)
                .ok_or_else(|| Error::UnknownSource { capability: capability.to_string(), source_id: s.clone() })?;
            members.extend(rep.members.iter().map(|&doc_id| ProbeMember { doc_id, source_id: s.clone() }));
        }
        probes.insert(capability, ProbeSet { capability, members: members.into_iter().collect() });
    }
    Ok(probes)
}

/// `(source_id, doc_id)` pairs held by any probe; these never enter a
/// training stream.
pub fn probe_members(probes: &BTreeMap<Capability, ProbeSet>) -> BTreeSet<(String, u64)> {
    probes.values().flat_map(|p| p.members.iter().map(|m| (m.source_id.clone(), m.doc_id))).collect()
}

/// Adds each probe's capability tag to its member documents.
pub fn tag_members(docs: &mut [Document], probes: &BTreeMap<Capability, ProbeSet>) {
    let mut tags: HashMap<(&str, u64), Vec<Capability>> = HashMap::new();
    for p in probes.values() {
        for m in &p.members {
            tags.entry((m.source_id.as_str(), m.doc_id)).or_default().push(p.capability);
        }
    }
    for d in docs {
        if let Some(caps) = tags.get(&(d.source_id.as_str(), d.doc_id)) {
            d.domain_tags.extend(caps.iter().copied());
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MemberRow {
    doc_id: u64,
    source_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    capability: Option<Capability>,
    scores: BTreeMap<String, f64>,
}

/// Line-delimited JSON `{doc_id, source_id, scores}` per representative member.
pub fn write_representative(path: &Path, sets: &BTreeMap<String, RepresentativeSet>) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for set in sets.values() {
        for id in &set.members {
            let row = MemberRow {
                doc_id: *id,
                source_id: set.source_id.clone(),
                capability: None,
                scores: set.scores.get(id).cloned().unwrap_or_default(),
            };
            writeln!(w, "{}", serde_json::to_string(&row)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Line-delimited JSON `{doc_id, source_id, capability, scores}` per probe member.
pub fn write_probes(path: &Path, probes: &BTreeMap<Capability, ProbeSet>, sets: &BTreeMap<String, RepresentativeSet>) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for p in probes.values() {
        for m in &p.members {
            let scores = sets.get(&m.source_id).and_then(|s| s.scores.get(&m.doc_id)).cloned().unwrap_or_default();
            let row = MemberRow { doc_id: m.doc_id, source_id: m.source_id.clone(), capability: Some(p.capability), scores };
            writeln!(w, "{}", serde_json::to_string(&row)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads [`write_probes`] output back into probe sets.
pub fn read_probes(path: &Path) -> Result<BTreeMap<Capability, ProbeSet>> {
    let text = std::fs::read_to_string(path)?;
    let mut probes: BTreeMap<Capability, ProbeSet> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: MemberRow = serde_json::from_str(line)?;
        let cap = row.capability.ok_or_else(|| Error::Invalid(format!("probe row without capability in {}", path.display())))?;
        probes
            .entry(cap)
            .or_insert_with(|| ProbeSet { capability: cap, members: Vec::new() })
            .members
            .push(ProbeMember { doc_id: row.doc_id, source_id: row.source_id });
    }
    Ok(probes)
}

/// Reads [`write_representative`] output back, keyed by source.
pub fn read_representative(path: &Path, target_size: usize) -> Result<BTreeMap<String, RepresentativeSet>> {
    let text = std::fs::read_to_string(path)?;
    let mut sets: BTreeMap<String, RepresentativeSet> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: MemberRow = serde_json::from_str(line)?;
        let set = sets.entry(row.source_id.clone()).or_insert_with(|| RepresentativeSet {
            source_id: row.source_id.clone(),
            members: Vec::new(),
            target_size,
            scores: BTreeMap::new(),
        });
        set.members.push(row.doc_id);
        set.scores.insert(row.doc_id, row.scores);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn doc(id: u64, text: &str, scores: &[(&str, f64)]) -> Document {
        Document {
            doc_id: id,
            source_id: "s".into(),
            text: text.into(),
            domain_tags: BTreeSet::new(),
            quality_scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn threshold_is_strict_on_scaled_score() {
        let docs = vec![doc(1, "a", &[("edu", 3.9 / 5.0)]), doc(2, "b", &[("edu", 4.0 / 5.0)]), doc(3, "c", &[("edu", 4.1 / 5.0)])];
        let spec = ScorerSpec::threshold("edu", 4.0, 5.0);
        let kept = score_threshold(&docs, &spec).unwrap();
        assert_eq!(kept.iter().map(|d| d.doc_id).collect::<Vec<_>>(), vec![3]);
        assert_eq!(score_threshold(&docs, &ScorerSpec::threshold("edu", 0.0, 5.0)).unwrap().len(), 3);
        assert!(score_threshold(&docs, &ScorerSpec::threshold("edu", 5.0, 5.0)).unwrap().is_empty());
    }

    #[test]
    fn missing_score_names_doc() {
        let docs = vec![doc(9, "a", &[])];
        match score_threshold(&docs, &ScorerSpec::threshold("edu", 4.0, 5.0)) {
            Err(Error::MissingScore { doc_id: 9, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let spec = ScorerSpec::judge("j", ScorerKind::RelevanceJudge, 0.5, None);
        assert!(matches!(score_topfraction(&docs, &spec), Err(Error::MissingScore { .. })));
    }

    #[test]
    fn top_fraction_counts_and_ties() {
        let docs: Vec<Document> = (0..100).map(|i| doc(1000 - i, "x", &[("j", (i % 7) as f64 / 7.0)])).collect();
        let spec = ScorerSpec::judge("j", ScorerKind::RelevanceJudge, 0.10, None);
        assert_eq!(score_topfraction(&docs, &spec).unwrap().len(), 10);
        let flat: Vec<Document> = (0..100).map(|i| doc(500 - i, "x", &[("j", 0.5)])).collect();
        let kept = score_topfraction(&flat, &spec).unwrap();
        let mut ids: Vec<u64> = kept.iter().map(|d| d.doc_id).collect();
        ids.sort();
        assert_eq!(ids, (401..=410).collect::<Vec<_>>());
        let all = ScorerSpec::judge("j", ScorerKind::RelevanceJudge, 1.0, None);
        assert_eq!(score_topfraction(&docs, &all).unwrap(), docs);
    }

    #[test]
    fn top_count_rounds_up() {
        assert_eq!(top_count(0.1, 100), 10);
        assert_eq!(top_count(0.1, 101), 11);
        assert_eq!(top_count(0.3, 10), 3);
        assert_eq!(top_count(1.0, 7), 7);
        assert_eq!(top_count(0.01, 1), 1);
    }

    #[test]
    fn identical_docs_collapse_and_disjoint_docs_survive() {
        let text = "the quick brown fox jumps over the lazy dog";
        let docs = vec![doc(2, text, &[]), doc(1, text, &[])];
        let kept = dedup_semantic(&docs, 1.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].doc_id, 1);
        let docs = vec![doc(1, "aaaaaaaaaaaaaaaa", &[]), doc(2, "bbbbbbbbbbbbbbbb", &[]), doc(3, "0123456789012345", &[])];
        assert_eq!(dedup_semantic(&docs, 0.01).len(), 3);
    }

    #[test]
    fn minhash_tracks_exact_jaccard() {
        let hasher = MinHasher::default();
        let a: Vec<u32> = (0..200).map(|i| (i * 7 % 97) as u32).collect();
        let mut b = a.clone();
        for t in &mut b[150..] {
            *t += 300;
        }
        let exact = exact_jaccard(&a, &b);
        let est = MinHasher::similarity(&hasher.signature(&a), &hasher.signature(&b));
        assert!((exact - est).abs() < 0.15, "exact {exact} est {est}");
    }

    #[test]
    fn chain_rejects_misordered_stages() {
        let specs = vec![
            ScorerSpec::judge("rel", ScorerKind::RelevanceJudge, 0.5, None),
            ScorerSpec::threshold("edu", 4.0, 5.0),
        ];
        assert!(matches!(ScorerChain::from_specs(&specs, None), Err(Error::Scorer { .. })));
    }

    #[test]
    fn fluency_separates_spam_from_prose() {
        let prose = doc(1, "the old river finds the quiet garden. we check that 3+4=7.", &[]);
        let code = doc(2, "(add 3 (mul 2 4)) => 11 ; (max 1 2) => 2", &[]);
        let spam = doc(3, "xq#4 kz!p 88$1 qwrt zzk9 %%a1 @hh 7x7x", &[]);
        let f = FluencyScorer;
        assert!(f.score(&prose).unwrap() > 0.95);
        assert!(f.score(&code).unwrap() > 0.95, "{}", f.score(&code).unwrap());
        assert!(f.score(&spam).unwrap() < 0.5);
    }

    #[test]
    fn probes_union_sources_and_reject_unknown() {
        let rep = |s: &str, ids: &[u64]| RepresentativeSet { source_id: s.into(), members: ids.to_vec(), target_size: 10, scores: BTreeMap::new() };
        let sets: BTreeMap<String, RepresentativeSet> =
            [("a".to_string(), rep("a", &[1, 2])), ("b".to_string(), rep("b", &[3])), ("e".to_string(), rep("e", &[]))].into();
        let lists: BTreeMap<Capability, Vec<String>> = [
            (Capability::Math, vec!["a".to_string(), "e".to_string()]),
            (Capability::Knowledge, vec!["a".to_string(), "b".to_string()]),
        ]
        .into();
        let probes = build_probes(&sets, &lists).unwrap();
        assert_eq!(probes[&Capability::Math].members.len(), 2);
        assert_eq!(probes[&Capability::Knowledge].members.len(), 3);
        let bad: BTreeMap<Capability, Vec<String>> = [(Capability::Code, vec!["zz".to_string()])].into();
        assert!(matches!(build_probes(&sets, &bad), Err(Error::UnknownSource { .. })));
    }
}
