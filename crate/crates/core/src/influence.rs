//! Gradient-inner-product influence of training samples on capability
//! probes, ensembled over training checkpoints.
//!
//! With the Hessian approximated by the identity, the influence of a
//! training sample on a probe batch is `g_probe · g_sample`; positive means
//! a gradient step on the sample lowers the probe loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tinylm::{Checkpoint, ModelConfig, Reduction};

use crate::corpus::{draw_stream, Capability, DatasetStats, MixtureSpec, Repetition, TokenizedSample};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, splitmix64};
use crate::training::{evenly_spaced, steps_for, stream_windows, train_windows, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Projection {
    /// Full gradients.
    #[default]
    Exact,
    /// Explicit identity map; numerically the same as `Exact`.
    Identity,
    /// Dense ±1/√d projection with hashed signs.
    SignedRandom { dim: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HessianApprox {
    #[default]
    Identity,
    /// Diagonal of the probe batch's empirical Gauss-Newton matrix plus
    /// `damping`, applied to the sample gradient before projection.
    GaussNewtonDiag { damping: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct InfluenceOptions {
    pub projection: Projection,
    pub hessian: HessianApprox,
}

/// Reproducible projection of parameter-space vectors.
pub struct Projector {
    projection: Projection,
    params: usize,
    words: usize,
    signs: Vec<u64>,
}

impl Projector {
    pub fn new(projection: Projection, params: usize) -> Self {
        let words = params.div_ceil(64);
        let signs = match projection {
            Projection::SignedRandom { dim, seed } => {
                (0..dim * words).map(|i| splitmix64(seed ^ splitmix64(i as u64))).collect()
            }
            _ => Vec::new(),
        };
        Self { projection, params, words, signs }
    }

    pub fn output_dim(&self) -> usize {
        match self.projection {
            Projection::SignedRandom { dim, .. } => dim,
            _ => self.params,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self.projection {
            Projection::SignedRandom { seed, .. } => Some(seed),
            _ => None,
        }
    }

    pub fn project(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.params, "gradient length");
        let Projection::SignedRandom { dim, .. } = self.projection else {
            return g.to_vec();
        };
        let total: f64 = g.iter().sum();
        let scale = 1.0 / (dim as f64).sqrt();
        (0..dim)
            .map(|j| {
                // sum with + for clear bits and − for set bits
                let row = &self.signs[j * self.words..(j + 1) * self.words];
                let mut negative = 0.0;
                for (w, &bits) in row.iter().enumerate() {
                    let mut bits = bits;
                    if w == self.words - 1 && self.params % 64 != 0 {
                        bits &= (1u64 << (self.params % 64)) - 1;
                    }
                    while bits != 0 {
                        let k = bits.trailing_zeros() as usize;
                        negative += g[w * 64 + k];
                        bits &= bits - 1;
                    }
                }
                scale * (total - 2.0 * negative)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientFeature {
    pub doc_id: u64,
    pub ckpt_step: usize,
    pub vector: Vec<f64>,
    pub projection_seed: Option<u64>,
}

fn check_finite(v: &[f64], what: &str, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.to_string(), step })
    }
}

/// Gradient of one sample's mean token NLL.
pub fn sample_gradient(ckpt: &Checkpoint, tokens: &[u32]) -> Result<Vec<f64>> {
    let g = tinylm::grad_nll(ckpt, tokens)?;
    check_finite(&g, "sample gradient", ckpt.step)?;
    Ok(g)
}

/// Mean over probe sequences of each sequence's mean-NLL gradient.
pub fn probe_gradient(ckpt: &Checkpoint, probe: &[Vec<u32>]) -> Result<Vec<f64>> {
    if probe.is_empty() {
        return Err(Error::Invalid("empty probe batch".into()));
    }
    let model = ckpt.model()?;
    let mut acc = vec![0.0; model.num_params()];
    for chunk in probe.chunks(32) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let (_, g) = model.loss_grad(&ckpt.params, &refs, Reduction::SequenceMean)?;
        let w = chunk.len() as f64 / probe.len() as f64;
        for (a, x) in acc.iter_mut().zip(&g) {
            *a += w * x;
        }
    }
    check_finite(&acc, "probe gradient", ckpt.step)?;
    Ok(acc)
}

fn gauss_newton_diag(ckpt: &Checkpoint, probe: &[Vec<u32>], damping: f64) -> Result<Vec<f64>> {
    let mut diag = vec![0.0; ckpt.params.len()];
    for p in probe {
        let g = sample_gradient(ckpt, p)?;
        for (d, x) in diag.iter_mut().zip(&g) {
            *d += x * x / probe.len() as f64;
        }
    }
    Ok(diag.into_iter().map(|d| d + damping).collect())
}

/// Per-checkpoint state for scoring many samples against one probe.
pub struct ProbeFeatures {
    probe: Vec<f64>,
    inverse_diag: Option<Vec<f64>>,
}

impl ProbeFeatures {
    pub fn new(ckpt: &Checkpoint, probe: &[Vec<u32>], opts: &InfluenceOptions, projector: &Projector) -> Result<Self> {
        let g = probe_gradient(ckpt, probe)?;
        let inverse_diag = match opts.hessian {
            HessianApprox::Identity => None,
            HessianApprox::GaussNewtonDiag { damping } => {
                Some(gauss_newton_diag(ckpt, probe, damping)?.into_iter().map(|d| 1.0 / d).collect())
            }
        };
        Ok(Self { probe: projector.project(&g), inverse_diag })
    }

    /// Influence of a sample given its raw (unprojected) gradient.
    pub fn score(&self, sample_grad: &[f64], projector: &Projector) -> f64 {
        let projected = match &self.inverse_diag {
            None => projector.project(sample_grad),
            Some(inv) => projector.project(&sample_grad.iter().zip(inv).map(|(g, h)| g * h).collect::<Vec<_>>()),
        };
        tinylm::dot(&self.probe, &projected)
    }

    pub fn vector(&self) -> &[f64] {
        &self.probe
    }
}

/// `g_probe · g_sample` at one checkpoint.
pub fn influence_pair(sample: &[u32], probe: &[Vec<u32>], ckpt: &Checkpoint, opts: &InfluenceOptions) -> Result<f64> {
    let projector = Projector::new(opts.projection, ckpt.params.len());
    let features = ProbeFeatures::new(ckpt, probe, opts, &projector)?;
    let g = sample_gradient(ckpt, sample)?;
    let score = features.score(&g, &projector);
    if !score.is_finite() {
        return Err(Error::NonFinite { what: "influence".into(), step: ckpt.step });
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// `α_t ∝ step_t`.
    #[default]
    Linear,
    Uniform,
    /// All weight on the last checkpoint.
    Final,
}

impl AlphaRule {
    /// Normalised weights for checkpoints at the given steps.
    pub fn weights(self, steps: &[usize]) -> Vec<f64> {
        let n = steps.len();
        if n == 0 {
            return Vec::new();
        }
        let raw: Vec<f64> = match self {
            AlphaRule::Linear => steps.iter().map(|&s| s as f64).collect(),
            AlphaRule::Uniform => vec![1.0; n],
            AlphaRule::Final => (0..n).map(|i| if i + 1 == n { 1.0 } else { 0.0 }).collect(),
        };
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return vec![1.0 / n as f64; n];
        }
        raw.into_iter().map(|r| r / total).collect()
    }
}

/// Checkpoints `θ_{c,t}` and weights `α_{c,t}` per capability.
#[derive(Debug, Clone)]
pub struct CheckpointSchedule {
    pub checkpoints: BTreeMap<Capability, Vec<Checkpoint>>,
    pub alphas: BTreeMap<Capability, Vec<f64>>,
}

impl CheckpointSchedule {
    pub fn new(checkpoints: BTreeMap<Capability, Vec<Checkpoint>>, rule: AlphaRule) -> Self {
        let alphas = checkpoints
            .iter()
            .map(|(&c, ck)| (c, rule.weights(&ck.iter().map(|k| k.step).collect::<Vec<_>>())))
            .collect();
        Self { checkpoints, alphas }
    }

    /// Explicit weights, one vector per capability matching its checkpoints.
    pub fn with_alphas(checkpoints: BTreeMap<Capability, Vec<Checkpoint>>, alphas: BTreeMap<Capability, Vec<f64>>) -> Result<Self> {
        for (c, ck) in &checkpoints {
            if alphas.get(c).map(Vec::len) != Some(ck.len()) {
                return Err(Error::Invalid(format!("alpha count for {c} does not match its checkpoints")));
            }
        }
        Ok(Self { checkpoints, alphas })
    }

    /// One shared checkpoint for every capability (`T = 1`).
    pub fn single(ckpt: &Checkpoint, capabilities: impl IntoIterator<Item = Capability>) -> Self {
        let checkpoints = capabilities.into_iter().map(|c| (c, vec![ckpt.clone()])).collect();
        Self::new(checkpoints, AlphaRule::Final)
    }

    pub fn capabilities(&self) -> impl Iterator<Item = Capability> + '_ {
        self.checkpoints.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub doc_id: u64,
    pub source_id: String,
    pub phase: usize,
    /// Length of the sample in tokens.
    pub tokens: usize,
    pub scores: BTreeMap<Capability, f64>,
    pub joint: f64,
}

/// One `(sample, capability, checkpoint)` score before weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub doc_id: u64,
    pub capability: Capability,
    pub step: usize,
    pub alpha: f64,
    pub score: f64,
}

/// Sum of per-capability scores with uniform capability weights.
pub fn joint_influence(scores: &BTreeMap<Capability, f64>) -> f64 {
    scores.values().sum()
}

#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub doc_id: u64,
    pub source_id: &'a str,
    pub tokens: &'a [u32],
}

/// Scores every sample against every capability's probe at every scheduled
/// checkpoint; `I_c = Σ_t α_{c,t} · influence`. Each distinct checkpoint
/// computes a sample's gradient once.
pub fn score_samples(
    samples: &[SampleRef<'_>],
    probes: &BTreeMap<Capability, Vec<Vec<u32>>>,
    schedule: &CheckpointSchedule,
    opts: &InfluenceOptions,
    phase: usize,
) -> Result<(Vec<InfluenceRecord>, Vec<PairScore>)> {
    for c in probes.keys() {
        if schedule.checkpoints.get(c).is_none_or(Vec::is_empty) {
            return Err(Error::MissingCapability(c.to_string()));
        }
    }
    // group (capability, index) pairs by checkpoint content
    let mut groups: BTreeMap<String, (&Checkpoint, Vec<(Capability, usize)>)> = BTreeMap::new();
    for (&c, cks) in &schedule.checkpoints {
        if !probes.contains_key(&c) {
            continue;
        }
        for (t, ck) in cks.iter().enumerate() {
            groups.entry(ck.digest()).or_insert_with(|| (ck, Vec::new())).1.push((c, t));
        }
    }
    let mut scores: Vec<BTreeMap<Capability, f64>> = vec![probes.keys().map(|&c| (c, 0.0)).collect(); samples.len()];
    let mut pairs = Vec::new();
    for (ck, members) in groups.values() {
        let projector = Projector::new(opts.projection, ck.params.len());
        let mut features = BTreeMap::new();
        for &(c, _) in members {
            if let std::collections::btree_map::Entry::Vacant(e) = features.entry(c) {
                e.insert(ProbeFeatures::new(ck, &probes[&c], opts, &projector)?);
            }
        }
        for (i, s) in samples.iter().enumerate() {
            let g = sample_gradient(ck, s.tokens)?;
            for &(c, t) in members {
                let score = features[&c].score(&g, &projector);
                if !score.is_finite() {
                    return Err(Error::NonFinite { what: "influence".into(), step: ck.step });
                }
                let alpha = schedule.alphas[&c][t];
                *scores[i].get_mut(&c).expect("capability present") += alpha * score;
                pairs.push(PairScore { doc_id: s.doc_id, capability: c, step: ck.step, alpha, score });
            }
        }
    }
    pairs.sort_by(|a, b| (a.doc_id, a.capability, a.step).cmp(&(b.doc_id, b.capability, b.step)));
    let records = samples
        .iter()
        .zip(scores)
        .map(|(s, scores)| InfluenceRecord {
            doc_id: s.doc_id,
            source_id: s.source_id.to_string(),
            phase,
            tokens: s.tokens.len(),
            joint: joint_influence(&scores),
            scores,
        })
        .collect();
    Ok((records, pairs))
}

/// Per-capability ensemble scores of one sample.
pub fn influence_ensemble(
    sample: &[u32],
    probes: &BTreeMap<Capability, Vec<Vec<u32>>>,
    schedule: &CheckpointSchedule,
    opts: &InfluenceOptions,
) -> Result<BTreeMap<Capability, f64>> {
    let r = score_samples(&[SampleRef { doc_id: 0, source_id: "", tokens: sample }], probes, schedule, opts, 0)?;
    Ok(r.0.into_iter().next().expect("one record").scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapabilityTraining {
    /// Tokens drawn per capability model.
    pub token_budget: u64,
    /// Checkpoints kept per capability.
    pub checkpoints: usize,
    pub alpha: AlphaRule,
    pub settings: TrainSettings,
}

impl Default for CapabilityTraining {
    fn default() -> Self {
        Self { token_budget: 60_000, checkpoints: 10, alpha: AlphaRule::Linear, settings: TrainSettings::default() }
    }
}

/// Trains one model per capability on the natural mixture of that
/// capability's sources, keeping `checkpoints` evenly spaced checkpoints.
/// Stream and initialisation seeds do not depend on the capability, so
/// identical source lists give identical models.
pub fn train_capability_models(
    corpora: &BTreeMap<String, Vec<TokenizedSample>>,
    capability_sources: &BTreeMap<Capability, Vec<String>>,
    model: &ModelConfig,
    plan: &CapabilityTraining,
    seed: u64,
) -> Result<CheckpointSchedule> {
    let init = Checkpoint::init(model.clone(), derive_seed(seed, "capmodels/init"))?;
    let mut checkpoints = BTreeMap::new();
    for (&cap, sources) in capability_sources {
        let mut sub = BTreeMap::new();
        let mut stats = Vec::new();
        for s in sources {
            let samples = corpora.get(s).ok_or_else(|| Error::UnknownSource { capability: cap.to_string(), source_id: s.clone() })?;
            stats.push(DatasetStats::from_samples(s, samples));
            sub.insert(s.clone(), samples.clone());
        }
        let spec = MixtureSpec::natural(&stats, plan.token_budget, derive_seed(seed, "capmodels/stream"))?;
        let stream = draw_stream(&sub, &spec, Repetition::EpochWrap)?;
        let windows = stream_windows(&stream, model.seq_len, plan.settings.separator);
        let steps = steps_for(windows.len(), plan.settings.batch_size);
        if steps < plan.checkpoints {
            return Err(Error::Invalid(format!(
                "capability {cap}: {steps} steps cannot hold {} checkpoints; raise the token budget",
                plan.checkpoints
            )));
        }
        let capture: BTreeSet<usize> = evenly_spaced(steps, plan.checkpoints).into_iter().collect();
        let out = train_windows(&init, &windows, &plan.settings, steps, &capture, None)?;
        checkpoints.insert(cap, out.checkpoints);
    }
    Ok(CheckpointSchedule::new(checkpoints, plan.alpha))
}

fn fmt_score(scores: &BTreeMap<Capability, f64>, c: Capability) -> String {
    scores.get(&c).map(|v| v.to_string()).unwrap_or_default()
}

/// `(doc_id, source_id, phase, I_C, I_M, I_K, I_joint)` rows.
pub fn write_influence_csv(path: &Path, records: &[InfluenceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["doc_id", "source_id", "phase", "I_C", "I_M", "I_K", "I_joint"])?;
    for r in records {
        w.write_record([
            r.doc_id.to_string(),
            r.source_id.clone(),
            r.phase.to_string(),
            fmt_score(&r.scores, Capability::Code),
            fmt_score(&r.scores, Capability::Math),
            fmt_score(&r.scores, Capability::Knowledge),
            r.joint.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads [`write_influence_csv`] output; token lengths come from `lengths`
/// keyed by `(source_id, doc_id)`.
pub fn read_influence_csv(path: &Path, lengths: &BTreeMap<(String, u64), usize>) -> Result<Vec<InfluenceRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let parse_f = |i: usize| -> Result<Option<f64>> {
            let s = &row[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Invalid(format!("bad number {s:?} in {}", path.display())))
            }
        };
        let doc_id: u64 = row[0].parse().map_err(|_| Error::Invalid(format!("bad doc_id {:?}", &row[0])))?;
        let source_id = row[1].to_string();
        let phase: usize = row[2].parse().map_err(|_| Error::Invalid(format!("bad phase {:?}", &row[2])))?;
        let mut scores = BTreeMap::new();
        for (i, c) in Capability::ALL.into_iter().enumerate() {
            if let Some(v) = parse_f(3 + i)? {
                scores.insert(c, v);
            }
        }
        let joint = parse_f(6)?.unwrap_or(0.0);
        let tokens = *lengths
            .get(&(source_id.clone(), doc_id))
            .ok_or_else(|| Error::Invalid(format!("no length for doc {doc_id} of {source_id}")))?;
        out.push(InfluenceRecord { doc_id, source_id, phase, tokens, scores, joint });
    }
    Ok(out)
}

/// `(doc_id, capability, step, alpha, score)` rows.
pub fn write_pair_scores(path: &Path, pairs: &[PairScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["doc_id", "capability", "step", "alpha", "score"])?;
    for p in pairs {
        w.write_record([p.doc_id.to_string(), p.capability.to_string(), p.step.to_string(), p.alpha.to_string(), p.score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Binary store of projected sample features, one file per
/// `(checkpoint digest, projection seed)`.
pub struct FeatureCache {
    dir: PathBuf,
}

const CACHE_MAGIC: &[u8; 8] = b"FEATv1\0\0";

impl FeatureCache {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, digest: &str, projection_seed: u64) -> PathBuf {
        self.dir.join(format!("{digest}-{projection_seed:016x}.bin"))
    }

    pub fn store(&self, digest: &str, projection_seed: u64, features: &[GradientFeature]) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(digest, projection_seed))?);
        w.write_all(CACHE_MAGIC)?;
        let dim = features.first().map_or(0, |f| f.vector.len());
        w.write_all(&(features.len() as u64).to_le_bytes())?;
        w.write_all(&(dim as u64).to_le_bytes())?;
        for f in features {
            if f.vector.len() != dim {
                return Err(Error::Invalid("features in one block must share a dimension".into()));
            }
            w.write_all(&f.doc_id.to_le_bytes())?;
            w.write_all(&(f.ckpt_step as u64).to_le_bytes())?;
            for x in &f.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(&self, digest: &str, projection_seed: u64) -> Result<Option<Vec<GradientFeature>>> {
        let path = self.path(digest, projection_seed);
        if !path.exists() {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        BufReader::new(File::open(&path)?).read_to_end(&mut bytes)?;
        let corrupt = || Error::Invalid(format!("corrupt feature block {}", path.display()));
        if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
            return Err(corrupt());
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let (n, dim) = (word(8) as usize, word(16) as usize);
        if bytes.len() != 24 + n * (16 + 8 * dim) {
            return Err(corrupt());
        }
        let mut out = Vec::with_capacity(n);
        let mut at = 24;
        for _ in 0..n {
            let doc_id = word(at);
            let ckpt_step = word(at + 8) as usize;
            at += 16;
            let vector = (0..dim).map(|k| f64::from_le_bytes(bytes[at + 8 * k..at + 8 * k + 8].try_into().expect("8 bytes"))).collect();
            at += 8 * dim;
            out.push(GradientFeature { doc_id, ckpt_step, vector, projection_seed: Some(projection_seed) });
        }
        Ok(Some(out))
    }
}

/// Projected gradient features of many samples at one checkpoint, served
/// from the cache when present.
pub fn gradient_features(
    samples: &[SampleRef<'_>],
    ckpt: &Checkpoint,
    projector: &Projector,
    cache: Option<&FeatureCache>,
) -> Result<Vec<GradientFeature>> {
    let digest = ckpt.digest();
    let seed = projector.seed().unwrap_or(0);
    let wanted: Vec<u64> = samples.iter().map(|s| s.doc_id).collect();
    if let Some(cache) = cache {
        if let Some(hit) = cache.load(&digest, seed)? {
            if hit.iter().map(|f| f.doc_id).collect::<Vec<_>>() == wanted {
                return Ok(hit);
            }
        }
    }
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let g = sample_gradient(ckpt, s.tokens)?;
        out.push(GradientFeature { doc_id: s.doc_id, ckpt_step: ckpt.step, vector: projector.project(&g), projection_seed: projector.seed() });
    }
    if let Some(cache) = cache {
        cache.store(&digest, seed, &out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { layers: 1, dim: 8, hidden_dim: 16, heads: 2, kv_heads: 1, vocab_size: 32, ..ModelConfig::toy() }
    }

    #[test]
    fn alpha_rules_normalise() {
        let w = AlphaRule::Linear.weights(&[10, 20, 30, 40]);
        assert_eq!(w, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(AlphaRule::Final.weights(&[1, 2, 3]), vec![0.0, 0.0, 1.0]);
        assert_eq!(AlphaRule::Linear.weights(&[0]), vec![1.0]);
        let u = AlphaRule::Uniform.weights(&[5, 9]);
        assert_eq!(u, vec![0.5, 0.5]);
    }

    #[test]
    fn joint_is_plain_sum() {
        let zero: BTreeMap<Capability, f64> = Capability::ALL.iter().map(|&c| (c, 0.0)).collect();
        assert_eq!(joint_influence(&zero), 0.0);
        let cancel: BTreeMap<Capability, f64> = [(Capability::Code, 1.0), (Capability::Math, -1.0), (Capability::Knowledge, 0.0)].into();
        assert_eq!(joint_influence(&cancel), 0.0);
    }

    #[test]
    fn self_influence_is_squared_norm() {
        let ck = Checkpoint::init(tiny(), 4).unwrap();
        let s = vec![1u32, 5, 9, 3, 7, 2];
        let g = sample_gradient(&ck, &s).unwrap();
        let norm2: f64 = g.iter().map(|x| x * x).sum();
        let inf = influence_pair(&s, &[s.clone()], &ck, &InfluenceOptions::default()).unwrap();
        assert!((inf - norm2).abs() <= 1e-12 * norm2);
        assert!(inf > 0.0);
    }

    #[test]
    fn missing_capability_is_an_error() {
        let ck = Checkpoint::init(tiny(), 4).unwrap();
        let schedule = CheckpointSchedule::single(&ck, [Capability::Code]);
        let probes: BTreeMap<Capability, Vec<Vec<u32>>> = [(Capability::Math, vec![vec![1, 2, 3]])].into();
        assert!(matches!(influence_ensemble(&[1, 2, 3], &probes, &schedule, &InfluenceOptions::default()), Err(Error::MissingCapability(_))));
    }

    #[test]
    fn projector_matches_explicit_sign_matrix() {
        let p = Projector::new(Projection::SignedRandom { dim: 5, seed: 3 }, 70);
        let g: Vec<f64> = (0..70).map(|i| (i as f64 * 0.37).sin()).collect();
        let got = p.project(&g);
        for j in 0..5 {
            let mut expect = 0.0;
            for (i, gi) in g.iter().enumerate() {
                let bits = splitmix64(3 ^ splitmix64((j * 2 + i / 64) as u64));
                let sign = if bits >> (i % 64) & 1 == 1 { -1.0 } else { 1.0 };
                expect += sign * gi;
            }
            expect /= 5f64.sqrt();
            assert!((got[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path()).unwrap();
        let ck = Checkpoint::init(tiny(), 4).unwrap();
        let projector = Projector::new(Projection::SignedRandom { dim: 16, seed: 9 }, ck.params.len());
        let a = vec![1u32, 2, 3, 4];
        let b = vec![4u32, 3, 2];
        let samples = [SampleRef { doc_id: 1, source_id: "s", tokens: &a }, SampleRef { doc_id: 2, source_id: "s", tokens: &b }];
        let first = gradient_features(&samples, &ck, &projector, Some(&cache)).unwrap();
        let again = cache.load(&ck.digest(), 9).unwrap().unwrap();
        assert_eq!(first, again);
        assert_eq!(gradient_features(&samples, &ck, &projector, Some(&cache)).unwrap(), first);
    }

    #[test]
    fn csv_round_trip() {
        let rec = InfluenceRecord {
            doc_id: 7,
            source_id: "web".into(),
            phase: 1,
            tokens: 12,
            scores: [(Capability::Code, 0.1), (Capability::Math, -2.5e-7), (Capability::Knowledge, 3.0)].into(),
            joint: 0.1 - 2.5e-7 + 3.0,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_influence_csv(f.path(), std::slice::from_ref(&rec)).unwrap();
        let lengths = [(("web".to_string(), 7u64), 12usize)].into();
        assert_eq!(read_influence_csv(f.path(), &lengths).unwrap(), vec![rec]);
    }
}
