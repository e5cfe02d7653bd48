//! Run configuration and the on-disk stage graph: each stage reads the
//! outputs recorded in its upstream manifests, writes its own artifacts
//! under `<out>/<stage>/`, and records a manifest with input and output
//! digests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tinylm::{Checkpoint, ModelConfig};

use crate::coevolve::{run_coevolution, write_histogram, write_phase_reports, CoevolveConfig};
use crate::corpus::{
    draw_stream, ingest_corpus, write_corpus, Capability, Corpus, DatasetStats, MixtureSpec, Repetition, TokenizedSample,
};
use crate::diagnostics::{lr_sweep_correlation, nll_tracker, write_nll_rows, write_sweep, SweepConfig};
use crate::error::{Error, Result};
use crate::influence::{
    read_influence_csv, score_samples, train_capability_models, write_influence_csv, write_pair_scores, CapabilityTraining,
    CheckpointSchedule, InfluenceOptions, SampleRef,
};
use crate::mixer::{
    compute_weights, normalized_nll_curves, raw_curves, read_weights, run_loo_sweep, to_mixture, write_curves, write_loo_report,
    write_weights, LooConfig, WeightPolicy,
};
use crate::probeset::{
    build_probes, build_representative, read_probes, read_representative, write_probes, write_representative, ProbeSet,
    RepresentativeSet, ScorerChain, ScorerSpec,
};
use crate::seed::derive_seed;
use crate::synth::{self, SynthSpec};
use crate::training::{stream_windows, steps_for, train_windows, TrainSettings};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Maximum representative-set size per source.
    pub target_size: usize,
    /// Share of each capability source's representative set held out as
    /// probe members; the rest is scored for influence.
    pub probe_fraction: f64,
    pub dedup_threshold: Option<f64>,
    pub chain: Vec<ScorerSpec>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { target_size: 10_000, probe_fraction: 0.5, dedup_threshold: Some(0.8), chain: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceStage {
    pub training: CapabilityTraining,
    pub options: InfluenceOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LooStage {
    /// Sources to remove one at a time; empty means every source.
    pub removals: Vec<String>,
    pub run: LooConfig,
    pub enabled: bool,
}

impl Default for LooStage {
    fn default() -> Self {
        Self { removals: Vec::new(), run: LooConfig::default(), enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Tokens drawn from the optimized mixture to produce the base model.
    pub token_budget: u64,
    pub settings: TrainSettings,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { token_budget: 100_000, settings: TrainSettings::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CoevolveStage {
    pub run: CoevolveConfig,
    /// Train each phase against a teacher's distribution instead of the data.
    pub distill: bool,
    pub teacher: Option<PathBuf>,
    /// Score at most this many documents per source in each phase.
    pub pool_per_source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagStage {
    pub sweep: SweepConfig,
    pub run_sweep: bool,
    /// Probe documents used as the fixed RankMe batch.
    pub probe_batch: usize,
}

impl Default for DiagStage {
    fn default() -> Self {
        Self { sweep: SweepConfig::default(), run_sweep: true, probe_batch: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub synth: SynthSpec,
    pub sources: Vec<SourceEntry>,
    pub model: ModelConfig,
    pub probes: ProbeConfig,
    pub capabilities: BTreeMap<Capability, Vec<String>>,
    pub influence: InfluenceStage,
    pub mixture: WeightPolicy,
    pub loo: LooStage,
    pub pretrain: PretrainConfig,
    pub coevolve: CoevolveStage,
    pub diagnostics: DiagStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            out_dir: PathBuf::from("out"),
            synth: SynthSpec::default(),
            sources: Vec::new(),
            model: ModelConfig::toy(),
            probes: ProbeConfig::default(),
            capabilities: BTreeMap::new(),
            influence: InfluenceStage::default(),
            mixture: WeightPolicy::default(),
            loo: LooStage::default(),
            pretrain: PretrainConfig::default(),
            coevolve: CoevolveStage::default(),
            diagnostics: DiagStage::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[..s.start].lines().last().unwrap_or("").to_string()).unwrap_or_default();
            Error::config(field_from_message(e.message()).unwrap_or(field.trim().trim_start_matches('[').trim_end_matches(']').to_string()), e.message())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out_dir);
        for s in &mut self.sources {
            join(&mut s.path);
        }
        if let Some(t) = &mut self.coevolve.teacher {
            join(t);
        }
    }

    /// Checks cross-references and ranges; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let declared: BTreeSet<&str> = self.sources.iter().map(|s| s.id.as_str()).collect();
        if declared.len() != self.sources.len() {
            return Err(Error::config("sources", "source ids must be unique"));
        }
        for (cap, list) in &self.capabilities {
            for s in list {
                if !declared.contains(s.as_str()) {
                    return Err(Error::config(format!("capabilities.{}", cap.name()), format!("undeclared source {s:?}")));
                }
            }
        }
        tinylm::Model::new(self.model.clone()).map_err(|e| Error::config("model", e.to_string()))?;
        for (i, spec) in self.probes.chain.iter().enumerate() {
            spec.validate().map_err(|e| Error::config(format!("probes.chain[{i}]"), e.to_string()))?;
        }
        if !(0.0..1.0).contains(&self.probes.probe_fraction) || self.probes.probe_fraction == 0.0 {
            return Err(Error::config("probes.probe_fraction", "must lie in (0, 1)"));
        }
        if self.probes.target_size == 0 {
            return Err(Error::config("probes.target_size", "must be positive"));
        }
        if !(self.mixture.floor >= 0.0) {
            return Err(Error::config("mixture.floor", "must be non-negative"));
        }
        for s in &self.loo.removals {
            if !declared.contains(s.as_str()) {
                return Err(Error::config("loo.removals", format!("undeclared source {s:?}")));
            }
        }
        if self.loo.run.seeds.is_empty() {
            return Err(Error::config("loo.run.seeds", "needs at least one seed"));
        }
        let co = &self.coevolve.run;
        if !(co.tau > 0.0 && co.tau < 1.0) {
            return Err(Error::config("coevolve.run.tau", "must lie in (0, 1)"));
        }
        if co.max_phases == 0 {
            return Err(Error::config("coevolve.run.max_phases", "must be positive"));
        }
        if co.bins == 0 || co.bins % 2 == 0 {
            return Err(Error::config("coevolve.run.bins", "must be odd so that zero has its own bin"));
        }
        if self.coevolve.distill && self.coevolve.teacher.is_none() {
            return Err(Error::config("coevolve.teacher", "distillation needs a teacher checkpoint"));
        }
        if self.diagnostics.run_sweep && self.diagnostics.sweep.learning_rates.len() < 3 {
            return Err(Error::config("diagnostics.sweep.learning_rates", "needs at least three rates"));
        }
        Ok(())
    }

    /// SHA-256 of the serialized config with the output directory blanked,
    /// so the same run in two directories hashes alike.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        for s in &mut c.sources {
            s.path = s.path.file_name().map(PathBuf::from).unwrap_or_default();
        }
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(stage.name())
    }
}

fn field_from_message(msg: &str) -> Option<String> {
    let start = msg.find('`')?;
    let end = msg[start + 1..].find('`')?;
    Some(msg[start + 1..start + 1 + end].to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Probes,
    Capmodels,
    Influence,
    Mix,
    Loo,
    Coevolve,
    Diag,
}

impl Stage {
    pub const ALL: [Stage; 9] =
        [Stage::Synth, Stage::Ingest, Stage::Probes, Stage::Capmodels, Stage::Influence, Stage::Mix, Stage::Loo, Stage::Coevolve, Stage::Diag];

    /// The stages of a full run from existing corpora.
    pub const PIPELINE: [Stage; 8] =
        [Stage::Ingest, Stage::Probes, Stage::Capmodels, Stage::Influence, Stage::Mix, Stage::Loo, Stage::Coevolve, Stage::Diag];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Probes => "probes",
            Stage::Capmodels => "capmodels",
            Stage::Influence => "influence",
            Stage::Mix => "mix",
            Stage::Loo => "loo",
            Stage::Coevolve => "coevolve",
            Stage::Diag => "diag",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Synth | Stage::Ingest => &[],
            Stage::Probes => &[Stage::Ingest],
            Stage::Capmodels => &[Stage::Ingest, Stage::Probes],
            Stage::Influence => &[Stage::Ingest, Stage::Probes, Stage::Capmodels],
            Stage::Mix => &[Stage::Ingest, Stage::Influence],
            Stage::Loo => &[Stage::Ingest, Stage::Probes],
            Stage::Coevolve => &[Stage::Ingest, Stage::Probes, Stage::Mix],
            Stage::Diag => &[Stage::Ingest, Stage::Probes, Stage::Capmodels, Stage::Coevolve],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output directory when inside it.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn display_path(cfg: &RunConfig, path: &Path) -> String {
    path.strip_prefix(&cfg.out_dir)
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|_| path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default())
}

fn digests(cfg: &RunConfig, paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| Ok(FileDigest { path: display_path(cfg, p), sha256: sha256_file(p)? })).collect()
}

fn manifest_path(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.stage_dir(stage).join("manifest.json")
}

/// Loads an upstream manifest and checks that its outputs are present and
/// unchanged.
pub fn require_stage(cfg: &RunConfig, stage: Stage) -> Result<Manifest> {
    let path = manifest_path(cfg, stage);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for out in &manifest.outputs {
        let file = cfg.out_dir.join(&out.path);
        if sha256_file(&file)? != out.sha256 {
            return Err(Error::Invalid(format!("{} changed since stage {stage} wrote it; re-run {stage}", file.display())));
        }
    }
    Ok(manifest)
}

fn write_manifest(cfg: &RunConfig, stage: Stage, inputs: Vec<FileDigest>, outputs: &[PathBuf]) -> Result<Manifest> {
    let manifest = Manifest {
        stage: stage.name().to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs,
        outputs: digests(cfg, outputs)?,
    };
    fs::write(manifest_path(cfg, stage), serde_json::to_string_pretty(&manifest)? + "\n")?;
    update_top_manifest(cfg)?;
    Ok(manifest)
}

/// `<out>/manifest.json`: the digest of every stage manifest present.
fn update_top_manifest(cfg: &RunConfig) -> Result<()> {
    let mut stages = BTreeMap::new();
    for st in Stage::ALL {
        let p = manifest_path(cfg, st);
        if p.exists() {
            stages.insert(st.name(), sha256_file(&p)?);
        }
    }
    let top = serde_json::json!({ "tool_version": TOOL_VERSION, "config_hash": cfg.hash(), "stages": stages });
    fs::write(cfg.out_dir.join("manifest.json"), serde_json::to_string_pretty(&top)? + "\n")?;
    Ok(())
}

fn upstream_inputs(cfg: &RunConfig, stage: Stage) -> Result<Vec<FileDigest>> {
    let mut inputs = Vec::new();
    for &up in stage.upstream() {
        inputs.extend(require_stage(cfg, up)?.outputs);
    }
    Ok(inputs)
}

/// Runs one stage after checking its upstream manifests.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<Manifest> {
    cfg.validate()?;
    let inputs = upstream_inputs(cfg, stage)?;
    let dir = cfg.stage_dir(stage);
    fs::create_dir_all(&dir)?;
    log::info!("stage {stage}: writing to {}", dir.display());
    let (extra_inputs, outputs) = match stage {
        Stage::Synth => (Vec::new(), synth::write(&cfg.synth, &dir)?),
        Stage::Ingest => stage_ingest(cfg, &dir)?,
        Stage::Probes => (Vec::new(), stage_probes(cfg, &dir)?),
        Stage::Capmodels => (Vec::new(), stage_capmodels(cfg, &dir)?),
        Stage::Influence => (Vec::new(), stage_influence(cfg, &dir)?),
        Stage::Mix => (Vec::new(), stage_mix(cfg, &dir)?),
        Stage::Loo => (Vec::new(), stage_loo(cfg, &dir)?),
        Stage::Coevolve => stage_coevolve(cfg, &dir)?,
        Stage::Diag => (Vec::new(), stage_diag(cfg, &dir)?),
    };
    let mut all_inputs = inputs;
    all_inputs.extend(extra_inputs);
    write_manifest(cfg, stage, all_inputs, &outputs)
}

/// Runs every pipeline stage in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<Manifest>> {
    Stage::PIPELINE.iter().map(|&s| run_stage(cfg, s)).collect()
}

fn stage_ingest(cfg: &RunConfig, dir: &Path) -> Result<(Vec<FileDigest>, Vec<PathBuf>)> {
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut stats = Vec::new();
    for s in &cfg.sources {
        inputs.push(FileDigest { path: display_path(cfg, &s.path), sha256: sha256_file(&s.path)? });
        let corpus = ingest_corpus(&s.path, &s.id)?;
        let out = dir.join(format!("{}.jsonl", s.id));
        write_corpus(&out, &corpus.documents)?;
        stats.push(corpus.stats.clone());
        outputs.push(out);
    }
    let stats_path = dir.join("stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats)? + "\n")?;
    outputs.push(stats_path);
    Ok((inputs, outputs))
}

/// Ingested corpora keyed by source id.
pub fn load_corpora(cfg: &RunConfig) -> Result<BTreeMap<String, Corpus>> {
    let dir = cfg.stage_dir(Stage::Ingest);
    cfg.sources
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.jsonl", s.id));
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            Ok((s.id.clone(), ingest_corpus(&path, &s.id)?))
        })
        .collect()
}

/// Splits each capability source's representative set into probe members
/// and a scoring remainder.
pub fn split_representative(
    sets: &BTreeMap<String, RepresentativeSet>,
    capability_sources: &BTreeMap<Capability, Vec<String>>,
    probe_fraction: f64,
    seed: u64,
) -> (BTreeMap<String, RepresentativeSet>, BTreeMap<String, Vec<u64>>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let probe_sources: BTreeSet<&String> = capability_sources.values().flatten().collect();
    let mut probe_part = BTreeMap::new();
    let mut scoring = BTreeMap::new();
    for (src, set) in sets {
        let mut ids = set.members.clone();
        let mut held = Vec::new();
        if probe_sources.contains(src) && !ids.is_empty() {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("probes/split/{src}")));
            ids.shuffle(&mut rng);
            let k = ((ids.len() as f64 * probe_fraction).round() as usize).clamp(1, ids.len());
            held = ids.drain(..k).collect();
            held.sort_unstable();
            ids.sort_unstable();
        }
        let mut p = set.clone();
        p.members = held;
        p.scores.retain(|id, _| p.members.binary_search(id).is_ok());
        probe_part.insert(src.clone(), p);
        scoring.insert(src.clone(), ids);
    }
    (probe_part, scoring)
}

fn stage_probes(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let corpora = load_corpora(cfg)?;
    let chain = ScorerChain::from_specs(&cfg.probes.chain, cfg.probes.dedup_threshold)?;
    let mut sets = BTreeMap::new();
    for (src, corpus) in &corpora {
        let rep = build_representative(src, &corpus.documents, &chain, cfg.probes.target_size, derive_seed(cfg.seed, &format!("probes/{src}")))?;
        sets.insert(src.clone(), rep);
    }
    let (probe_part, scoring) = split_representative(&sets, &cfg.capabilities, cfg.probes.probe_fraction, cfg.seed);
    let probes = build_probes(&probe_part, &cfg.capabilities)?;
    let mut scoring_sets = sets.clone();
    for (src, set) in scoring_sets.iter_mut() {
        set.members = scoring[src].clone();
        set.scores.retain(|id, _| set.members.binary_search(id).is_ok());
    }
    let rep_path = dir.join("representative.jsonl");
    let scoring_path = dir.join("scoring.jsonl");
    let probe_path = dir.join("probes.jsonl");
    write_representative(&rep_path, &sets)?;
    write_representative(&scoring_path, &scoring_sets)?;
    write_probes(&probe_path, &probes, &sets)?;
    Ok(vec![rep_path, scoring_path, probe_path])
}

/// Probe sets and their token sequences.
pub fn load_probes(cfg: &RunConfig, corpora: &BTreeMap<String, Corpus>) -> Result<(BTreeMap<Capability, ProbeSet>, BTreeMap<Capability, Vec<Vec<u32>>>)> {
    let path = cfg.stage_dir(Stage::Probes).join("probes.jsonl");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let probes = read_probes(&path)?;
    let mut tokens = BTreeMap::new();
    for (&cap, set) in &probes {
        let mut seqs = Vec::new();
        for m in &set.members {
            let doc = corpora
                .get(&m.source_id)
                .and_then(|c| c.documents.iter().find(|d| d.doc_id == m.doc_id))
                .ok_or_else(|| Error::Invalid(format!("probe member {} of {} is not in the ingested corpus", m.doc_id, m.source_id)))?;
            seqs.push(doc.sample().tokens);
        }
        tokens.insert(cap, seqs);
    }
    for c in cfg.capabilities.keys() {
        if tokens.get(c).is_none_or(Vec::is_empty) {
            return Err(Error::Invalid(format!("probe for capability {c} is empty; loosen the scorer chain")));
        }
    }
    Ok((probes, tokens))
}

/// Every ingested sample except probe members, keyed by source.
pub fn training_pool(corpora: &BTreeMap<String, Corpus>, probes: &BTreeMap<Capability, ProbeSet>) -> BTreeMap<String, Vec<TokenizedSample>> {
    let held = crate::probeset::probe_members(probes);
    corpora
        .iter()
        .map(|(src, c)| {
            let kept = c.samples().into_iter().filter(|s| !held.contains(&(src.clone(), s.doc_id))).collect();
            (src.clone(), kept)
        })
        .collect()
}

/// Keeps a seeded random subset of `n` documents per source, in original order.
pub fn subsample_pool(pool: &BTreeMap<String, Vec<TokenizedSample>>, n: usize, seed: u64) -> BTreeMap<String, Vec<TokenizedSample>> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    pool.iter()
        .map(|(src, docs)| {
            if docs.len() <= n {
                return (src.clone(), docs.clone());
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, src));
            let mut idx = sample(&mut rng, docs.len(), n).into_vec();
            idx.sort_unstable();
            (src.clone(), idx.into_iter().map(|i| docs[i].clone()).collect())
        })
        .collect()
}

fn ckpt_name(cap: Capability, step: usize) -> String {
    format!("{}_step{step:06}.ckpt", cap.name())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleEntry {
    file: String,
    step: usize,
    alpha: f64,
}

fn stage_capmodels(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let corpora = load_corpora(cfg)?;
    let (probes, _) = load_probes(cfg, &corpora)?;
    let pool = training_pool(&corpora, &probes);
    let schedule = train_capability_models(&pool, &cfg.capabilities, &cfg.model, &cfg.influence.training, cfg.seed)?;
    let mut outputs = Vec::new();
    let mut table: BTreeMap<Capability, Vec<ScheduleEntry>> = BTreeMap::new();
    for (&cap, cks) in &schedule.checkpoints {
        for (ck, &alpha) in cks.iter().zip(&schedule.alphas[&cap]) {
            let name = ckpt_name(cap, ck.step);
            let path = dir.join(&name);
            ck.save(&path)?;
            outputs.push(path);
            table.entry(cap).or_default().push(ScheduleEntry { file: name, step: ck.step, alpha });
        }
    }
    let sched_path = dir.join("schedule.json");
    fs::write(&sched_path, serde_json::to_string_pretty(&table)? + "\n")?;
    outputs.push(sched_path);
    Ok(outputs)
}

/// The capability checkpoint schedule written by the capmodels stage.
pub fn load_schedule(cfg: &RunConfig) -> Result<CheckpointSchedule> {
    let dir = cfg.stage_dir(Stage::Capmodels);
    let path = dir.join("schedule.json");
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    let table: BTreeMap<Capability, Vec<ScheduleEntry>> = serde_json::from_str(&text)?;
    let mut checkpoints = BTreeMap::new();
    let mut alphas = BTreeMap::new();
    for (cap, entries) in table {
        let cks = entries.iter().map(|e| Ok(Checkpoint::load(&dir.join(&e.file))?)).collect::<Result<Vec<_>>>()?;
        checkpoints.insert(cap, cks);
        alphas.insert(cap, entries.iter().map(|e| e.alpha).collect());
    }
    CheckpointSchedule::with_alphas(checkpoints, alphas)
}

fn stage_influence(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let corpora = load_corpora(cfg)?;
    let (_, probe_tokens) = load_probes(cfg, &corpora)?;
    let schedule = load_schedule(cfg)?;
    let scoring = read_representative(&cfg.stage_dir(Stage::Probes).join("scoring.jsonl"), cfg.probes.target_size)?;
    let mut owned: Vec<(u64, String, Vec<u32>)> = Vec::new();
    for (src, set) in &scoring {
        let corpus = &corpora[src];
        let by_id: BTreeMap<u64, &crate::corpus::Document> = corpus.documents.iter().map(|d| (d.doc_id, d)).collect();
        for id in &set.members {
            let doc = by_id.get(id).ok_or_else(|| Error::Invalid(format!("scoring member {id} of {src} not in corpus")))?;
            owned.push((*id, src.clone(), doc.sample().tokens));
        }
    }
    let samples: Vec<SampleRef<'_>> = owned
        .iter()
        .filter(|(_, _, t)| t.len() >= 2)
        .map(|(id, src, t)| SampleRef { doc_id: *id, source_id: src, tokens: t })
        .collect();
    let (records, pairs) = score_samples(&samples, &probe_tokens, &schedule, &cfg.influence.options, 0)?;
    let csv_path = dir.join("influence.csv");
    let pairs_path = dir.join("pairs.csv");
    write_influence_csv(&csv_path, &records)?;
    write_pair_scores(&pairs_path, &pairs)?;
    Ok(vec![csv_path, pairs_path])
}

/// Token lengths of every ingested document, keyed by `(source, doc_id)`.
pub fn token_lengths(corpora: &BTreeMap<String, Corpus>) -> BTreeMap<(String, u64), usize> {
    corpora
        .iter()
        .flat_map(|(src, c)| c.documents.iter().map(move |d| ((src.clone(), d.doc_id), d.sample().len())))
        .collect()
}

fn stage_mix(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let corpora = load_corpora(cfg)?;
    let records = read_influence_csv(&cfg.stage_dir(Stage::Influence).join("influence.csv"), &token_lengths(&corpora))?;
    let stats: BTreeMap<String, DatasetStats> = corpora.iter().map(|(k, c)| (k.clone(), c.stats.clone())).collect();
    let weights = compute_weights(&records, &stats, &cfg.mixture)?;
    let path = dir.join("weights.jsonl");
    write_weights(&path, &weights)?;
    Ok(vec![path])
}

fn stage_loo(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let report = dir.join("report.csv");
    let curves = dir.join("curves.csv");
    let raw = dir.join("raw_curves.csv");
    if !cfg.loo.enabled {
        let mut w = csv::Writer::from_path(&report)?;
        w.write_record(["removed_source", "capability", "delta_nll", "std"])?;
        w.flush()?;
        return Ok(vec![report]);
    }
    let corpora = load_corpora(cfg)?;
    let (probes, probe_tokens) = load_probes(cfg, &corpora)?;
    let pool = training_pool(&corpora, &probes);
    let removals: Vec<Option<String>> = if cfg.loo.removals.is_empty() {
        pool.keys().cloned().map(Some).collect()
    } else {
        cfg.loo.removals.iter().cloned().map(Some).collect()
    };
    let mut run = cfg.loo.run.clone();
    run.seeds = run.seeds.iter().map(|&s| derive_seed(cfg.seed, &format!("loo/seed{s}"))).collect();
    let results = run_loo_sweep(&pool, &removals, &probe_tokens, &cfg.model, &run)?;
    write_loo_report(&report, &results)?;
    write_curves(&curves, &normalized_nll_curves(&results)?)?;
    write_curves(&raw, &raw_curves(&results))?;
    Ok(vec![report, curves, raw])
}

/// Trains the base model on the optimized mixture over the training pool.
pub fn pretrain_base(
    pool: &BTreeMap<String, Vec<TokenizedSample>>,
    mixture: &MixtureSpec,
    model: &ModelConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<Checkpoint> {
    let stream = draw_stream(pool, mixture, Repetition::EpochWrap)?;
    let windows = stream_windows(&stream, model.seq_len, settings.separator);
    let steps = steps_for(windows.len(), settings.batch_size);
    let init = Checkpoint::init(model.clone(), derive_seed(seed, "pretrain/init"))?;
    Ok(train_windows(&init, &windows, settings, steps, &BTreeSet::new(), None)?.final_checkpoint)
}

fn stage_coevolve(cfg: &RunConfig, dir: &Path) -> Result<(Vec<FileDigest>, Vec<PathBuf>)> {
    let corpora = load_corpora(cfg)?;
    let (probes, probe_tokens) = load_probes(cfg, &corpora)?;
    let pool = training_pool(&corpora, &probes);
    let weights = read_weights(&cfg.stage_dir(Stage::Mix).join("weights.jsonl"))?;
    let mixture = to_mixture(&weights, cfg.pretrain.token_budget, derive_seed(cfg.seed, "pretrain/stream"))?;
    let base = pretrain_base(&pool, &mixture, &cfg.model, &cfg.pretrain.settings, cfg.seed)?;
    let mut inputs = Vec::new();
    let teacher = match (&cfg.coevolve.distill, &cfg.coevolve.teacher) {
        (true, Some(p)) => {
            inputs.push(FileDigest { path: display_path(cfg, p), sha256: sha256_file(p)? });
            Some(Checkpoint::load(p)?)
        }
        _ => None,
    };
    let scored_pool = match cfg.coevolve.pool_per_source {
        Some(n) => subsample_pool(&pool, n, derive_seed(cfg.seed, "coevolve/pool")),
        None => pool.clone(),
    };
    let run = run_coevolution(&base, &scored_pool, &probe_tokens, &cfg.coevolve.run, teacher.as_ref(), derive_seed(cfg.seed, "coevolve"))?;
    let mut outputs = Vec::new();
    let base_path = dir.join("base.ckpt");
    base.save(&base_path)?;
    outputs.push(base_path);
    let phases = dir.join("phases.jsonl");
    write_phase_reports(&phases, &run.reports)?;
    outputs.push(phases);
    for (state, records) in run.states.iter().zip(&run.records) {
        let t = state.phase;
        let hist = dir.join(format!("histogram_phase{t}.csv"));
        write_histogram(&hist, &state.histogram)?;
        let inf = dir.join(format!("influence_phase{t}.csv"));
        write_influence_csv(&inf, records)?;
        let retained = dir.join(format!("retained_phase{t}.txt"));
        let mut w = std::io::BufWriter::new(fs::File::create(&retained)?);
        for id in &state.retained {
            writeln!(w, "{id}")?;
        }
        w.flush()?;
        let model = dir.join(format!("model_phase{t}.ckpt"));
        state.model.save(&model)?;
        outputs.extend([hist, inf, retained, model]);
    }
    Ok((inputs, outputs))
}

/// Models saved by the coevolve stage, base first.
pub fn load_coevolve_models(cfg: &RunConfig) -> Result<Vec<Checkpoint>> {
    let dir = cfg.stage_dir(Stage::Coevolve);
    let mut out = vec![Checkpoint::load(&dir.join("base.ckpt")).map_err(|_| Error::MissingArtifact(dir.join("base.ckpt")))?];
    let mut t = 1;
    while dir.join(format!("model_phase{t}.ckpt")).exists() {
        out.push(Checkpoint::load(&dir.join(format!("model_phase{t}.ckpt")))?);
        t += 1;
    }
    Ok(out)
}

fn stage_diag(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let corpora = load_corpora(cfg)?;
    let (probes, probe_tokens) = load_probes(cfg, &corpora)?;
    let schedule = load_schedule(cfg)?;
    let mut stages: Vec<(String, Vec<Checkpoint>)> =
        schedule.checkpoints.iter().map(|(c, cks)| (format!("capmodel_{}", c.name()), cks.clone())).collect();
    let mut co = load_coevolve_models(cfg)?;
    co.dedup_by(|a, b| a.digest() == b.digest());
    stages.push(("coevolve".to_string(), co));
    let eval: BTreeMap<String, Vec<Vec<u32>>> = probe_tokens.iter().map(|(c, v)| (format!("probe_{}", c.name()), v.clone())).collect();
    let rows = nll_tracker(&stages, &eval)?;
    let nll_path = dir.join("nll.csv");
    write_nll_rows(&nll_path, &rows)?;
    let mut outputs = vec![nll_path];
    if cfg.diagnostics.run_sweep {
        let pool = training_pool(&corpora, &probes);
        let sw = &cfg.diagnostics.sweep;
        let windows_for = |sources: &BTreeMap<String, Vec<TokenizedSample>>, steps: usize, settings: &TrainSettings, tag: &str| -> Result<Vec<Vec<u32>>> {
            let stats: Vec<DatasetStats> = sources.iter().map(|(k, v)| DatasetStats::from_samples(k, v)).collect();
            let budget = (steps * settings.batch_size * (cfg.model.seq_len + 1)) as u64;
            let spec = MixtureSpec::natural(&stats, budget, derive_seed(cfg.seed, tag))?;
            let stream = draw_stream(sources, &spec, Repetition::EpochWrap)?;
            Ok(stream_windows(&stream, cfg.model.seq_len, settings.separator))
        };
        let pre = windows_for(&pool, sw.pretrain_steps, &sw.pretrain, "sweep/pretrain")?;
        let cap_sources: BTreeSet<&String> = cfg.capabilities.values().flatten().collect();
        let mid_pool: BTreeMap<String, Vec<TokenizedSample>> = pool.iter().filter(|(k, _)| cap_sources.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let mid = windows_for(&mid_pool, sw.midtrain_steps, &sw.midtrain, "sweep/midtrain")?;
        let batch: Vec<Vec<u32>> = probe_tokens.values().flatten().take(cfg.diagnostics.probe_batch).cloned().collect();
        let table = lr_sweep_correlation(&cfg.model, &pre, &mid, &batch, sw, cfg.seed)?;
        let sweep_path = dir.join("rankme_sweep.csv");
        write_sweep(&sweep_path, &table)?;
        let summary = dir.join("summary.json");
        fs::write(&summary, serde_json::to_string_pretty(&serde_json::json!({ "spearman": table.spearman }))? + "\n")?;
        outputs.extend([sweep_path, summary]);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undeclared_capability_source_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.sources = vec![SourceEntry { id: "a".into(), path: "a.jsonl".into() }];
        cfg.capabilities.insert(Capability::Knowledge, vec!["b".into()]);
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "capabilities.knowledge"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        assert!(matches!(RunConfig::from_toml("sed = 3\n"), Err(Error::Config { .. })));
    }

    #[test]
    fn split_holds_out_a_fraction() {
        let set = RepresentativeSet { source_id: "a".into(), members: (0..10).collect(), target_size: 10, scores: BTreeMap::new() };
        let sets = [("a".to_string(), set)].into();
        let caps = [(Capability::Math, vec!["a".to_string()])].into();
        let (probe, scoring) = split_representative(&sets, &caps, 0.3, 1);
        assert_eq!(probe["a"].members.len(), 3);
        assert_eq!(scoring["a"].len(), 7);
        assert!(probe["a"].members.iter().all(|id| !scoring["a"].contains(id)));
    }
}
