//! Dataset-level sampling weights from influence records, and
//! leave-one-source-out ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tinylm::{Checkpoint, ModelConfig};

use crate::corpus::{draw_stream, Capability, DatasetStats, MixtureSpec, Repetition, TokenizedSample};
use crate::error::{Error, Result};
use crate::influence::InfluenceRecord;
use crate::seed::derive_seed;
use crate::training::{mean_nll, stream_windows, train_windows, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightPolicy {
    /// Sources whose aggregate influence is not positive keep this fraction
    /// of the positive mass, so they stay minimally present.
    pub floor: f64,
    /// Give sources without any record the floor instead of failing.
    pub floor_unrepresented: bool,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        Self { floor: 1e-6, floor_unrepresented: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceWeight {
    pub source_id: String,
    /// Token-weighted influence per source token, before clamping.
    pub rho: f64,
    pub weight: f64,
}

/// `ρ_g = (1/N_g) Σ_{i∈g} I_joint(x_i) · s_i`, `w_g = ρ_g / Σ ρ`, over
/// every source in `stats`.
pub fn compute_weights(records: &[InfluenceRecord], stats: &BTreeMap<String, DatasetStats>, policy: &WeightPolicy) -> Result<Vec<SourceWeight>> {
    let mut mass: BTreeMap<&str, f64> = BTreeMap::new();
    for r in records {
        if !stats.contains_key(&r.source_id) {
            return Err(Error::MissingStats(r.source_id.clone()));
        }
        if !r.joint.is_finite() {
            return Err(Error::NonFinite { what: format!("joint influence of doc {}", r.doc_id), step: r.phase });
        }
        *mass.entry(r.source_id.as_str()).or_default() += r.joint * r.tokens as f64;
    }
    let mut rho = BTreeMap::new();
    for (source, st) in stats {
        let m = match mass.get(source.as_str()) {
            Some(&m) => m,
            None if policy.floor_unrepresented => f64::NEG_INFINITY,
            None => return Err(Error::Invalid(format!("source {source} has no influence records"))),
        };
        if st.total_tokens == 0 {
            return Err(Error::Invalid(format!("source {source} has no tokens")));
        }
        rho.insert(source.clone(), m / st.total_tokens as f64);
    }
    let positive: f64 = rho.values().filter(|&&r| r > 0.0).sum();
    if positive <= 0.0 {
        return Err(Error::NoPositiveSource);
    }
    let clamped: BTreeMap<&String, f64> = rho.iter().map(|(s, &r)| (s, if r > 0.0 { r } else { policy.floor * positive })).collect();
    let total: f64 = clamped.values().sum();
    Ok(rho
        .iter()
        .map(|(s, &r)| SourceWeight { source_id: s.clone(), rho: if r.is_finite() { r } else { 0.0 }, weight: clamped[s] / total })
        .collect())
}

pub fn to_mixture(weights: &[SourceWeight], token_budget: u64, seed: u64) -> Result<MixtureSpec> {
    MixtureSpec::new(weights.iter().map(|w| (w.source_id.clone(), w.weight)).collect(), token_budget, seed)
}

/// Line-delimited JSON `{source_id, rho, weight}`.
pub fn write_weights(path: &Path, weights: &[SourceWeight]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for sw in weights {
        writeln!(w, "{}", serde_json::to_string(sw)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<SourceWeight>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LooConfig {
    pub token_budget: u64,
    pub seeds: Vec<u64>,
    /// Probe NLL is recorded every this many steps (and at 0 and the end).
    pub eval_every: usize,
    pub settings: TrainSettings,
    /// Forbid repeating any sample within a run.
    pub strict: bool,
}

impl Default for LooConfig {
    fn default() -> Self {
        Self { token_budget: 40_000, seeds: vec![0, 1, 2], eval_every: 25, settings: TrainSettings::default(), strict: true }
    }
}

/// Probe NLL per capability at each recorded step.
pub type Trajectory = BTreeMap<Capability, Vec<(usize, f64)>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    /// `None` for the control that removes nothing.
    pub removed: Option<String>,
    /// Mean over seeds of `final NLL without the source − final NLL with all`.
    pub delta: BTreeMap<Capability, f64>,
    /// Sample standard deviation of the per-seed deltas.
    pub std: BTreeMap<Capability, f64>,
    pub per_seed: BTreeMap<Capability, Vec<f64>>,
    /// Seed-mean trajectories.
    pub nll_full: Trajectory,
    pub nll_loo: Trajectory,
}

impl LooResult {
    /// A delta is real when its magnitude exceeds three seed deviations.
    pub fn significant(&self, c: Capability) -> bool {
        self.delta[&c].abs() > 3.0 * self.std[&c]
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn loo_run(
    sources: &BTreeMap<String, Vec<TokenizedSample>>,
    removed: Option<&str>,
    probes: &BTreeMap<Capability, Vec<Vec<u32>>>,
    model: &ModelConfig,
    cfg: &LooConfig,
    seed: u64,
) -> Result<Trajectory> {
    let kept: BTreeMap<String, Vec<TokenizedSample>> =
        sources.iter().filter(|(k, _)| Some(k.as_str()) != removed).map(|(k, v)| (k.clone(), v.clone())).collect();
    if kept.is_empty() {
        return Err(Error::Invalid("leave-one-out needs at least two sources".into()));
    }
    let names: Vec<&String> = kept.keys().collect();
    let spec = MixtureSpec::uniform(&names, cfg.token_budget, derive_seed(seed, "loo/stream"))?;
    let repetition = if cfg.strict { Repetition::Strict } else { Repetition::EpochWrap };
    let stream = draw_stream(&kept, &spec, repetition)?;
    let windows = stream_windows(&stream, model.seq_len, cfg.settings.separator);
    let b = cfg.settings.batch_size.max(1);
    let steps = (cfg.token_budget as usize / ((model.seq_len + 1) * b)).max(1);
    if cfg.strict && windows.len() < steps * b {
        return Err(Error::RepetitionRequired {
            source_id: removed.unwrap_or("all").to_string(),
            available: (windows.len() * (model.seq_len + 1)) as u64,
            required: (steps * b * (model.seq_len + 1)) as u64,
        });
    }
    let every = cfg.eval_every.max(1);
    let capture: BTreeSet<usize> = (1..=steps).filter(|s| s % every == 0 || *s == steps).collect();
    let init = Checkpoint::init(model.clone(), derive_seed(seed, "loo/init"))?;
    let out = train_windows(&init, &windows, &cfg.settings, steps, &capture, None)?;
    let mut traj = Trajectory::new();
    for ck in std::iter::once(&init).chain(&out.checkpoints) {
        for (&c, docs) in probes {
            traj.entry(c).or_default().push((ck.step, mean_nll(ck, docs)?));
        }
    }
    Ok(traj)
}

fn average(trajs: &[Trajectory]) -> Trajectory {
    let mut out = Trajectory::new();
    for (&c, first) in &trajs[0] {
        let curve = (0..first.len())
            .map(|i| (first[i].0, trajs.iter().map(|t| t[&c][i].1).sum::<f64>() / trajs.len() as f64))
            .collect();
        out.insert(c, curve);
    }
    out
}

/// Trains with all sources and without each listed source (equal per-source
/// probability, same seeds and step count), sharing the full-set runs.
pub fn run_loo_sweep(
    sources: &BTreeMap<String, Vec<TokenizedSample>>,
    removals: &[Option<String>],
    probes: &BTreeMap<Capability, Vec<Vec<u32>>>,
    model: &ModelConfig,
    cfg: &LooConfig,
) -> Result<Vec<LooResult>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Invalid("leave-one-out needs at least one seed".into()));
    }
    for r in removals.iter().flatten() {
        if !sources.contains_key(r) {
            return Err(Error::MissingSource(r.clone()));
        }
    }
    let full: Vec<Trajectory> = cfg.seeds.iter().map(|&s| loo_run(sources, None, probes, model, cfg, s)).collect::<Result<_>>()?;
    let full_mean = average(&full);
    let mut results = Vec::new();
    for removed in removals {
        let runs: Vec<Trajectory> = match removed {
            None => cfg.seeds.iter().map(|&s| loo_run(sources, None, probes, model, cfg, s)).collect::<Result<_>>()?,
            Some(r) => cfg.seeds.iter().map(|&s| loo_run(sources, Some(r), probes, model, cfg, s)).collect::<Result<_>>()?,
        };
        let mut delta = BTreeMap::new();
        let mut std = BTreeMap::new();
        let mut per_seed = BTreeMap::new();
        for &c in probes.keys() {
            let d: Vec<f64> = runs
                .iter()
                .zip(&full)
                .map(|(l, f)| l[&c].last().expect("final point").1 - f[&c].last().expect("final point").1)
                .collect();
            let (m, s) = mean_std(&d);
            delta.insert(c, m);
            std.insert(c, s);
            per_seed.insert(c, d);
        }
        results.push(LooResult { removed: removed.clone(), delta, std, per_seed, nll_full: full_mean.clone(), nll_loo: average(&runs) });
    }
    Ok(results)
}

/// One removal (or, with `None`, a repeat of the full run).
pub fn run_loo(
    sources: &BTreeMap<String, Vec<TokenizedSample>>,
    removed: Option<&str>,
    probes: &BTreeMap<Capability, Vec<Vec<u32>>>,
    model: &ModelConfig,
    cfg: &LooConfig,
) -> Result<LooResult> {
    Ok(run_loo_sweep(sources, &[removed.map(str::to_string)], probes, model, cfg)?.remove(0))
}

/// Each run's trajectory divided pointwise by the full-set trajectory; the
/// full-set curve is keyed `"full"`.
pub fn normalized_nll_curves(results: &[LooResult]) -> Result<BTreeMap<String, Trajectory>> {
    let Some(first) = results.first() else {
        return Ok(BTreeMap::new());
    };
    let full = &first.nll_full;
    let divide = |t: &Trajectory| -> Result<Trajectory> {
        let mut out = Trajectory::new();
        for (c, curve) in t {
            let base = full.get(c).ok_or(Error::StepGridMismatch)?;
            if base.len() != curve.len() || base.iter().zip(curve).any(|(a, b)| a.0 != b.0) {
                return Err(Error::StepGridMismatch);
            }
            out.insert(*c, curve.iter().zip(base).map(|(p, b)| (p.0, p.1 / b.1)).collect());
        }
        Ok(out)
    };
    let mut out = BTreeMap::new();
    out.insert("full".to_string(), divide(full)?);
    for r in results {
        if r.nll_full != *full {
            return Err(Error::StepGridMismatch);
        }
        out.insert(r.removed.clone().unwrap_or_else(|| "none".to_string()), divide(&r.nll_loo)?);
    }
    Ok(out)
}

/// `(removed_source, capability, delta_nll, std)` rows.
pub fn write_loo_report(path: &Path, results: &[LooResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["removed_source", "capability", "delta_nll", "std"])?;
    for r in results {
        for (c, d) in &r.delta {
            w.write_record([r.removed.clone().unwrap_or_default(), c.to_string(), d.to_string(), r.std[c].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `(run, capability, step, value)` rows for raw or normalised curves.
pub fn write_curves(path: &Path, curves: &BTreeMap<String, Trajectory>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "capability", "step", "value"])?;
    for (run, t) in curves {
        for (c, pts) in t {
            for (step, v) in pts {
                w.write_record([run.clone(), c.to_string(), step.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw seed-mean trajectories of every run, keyed like
/// [`normalized_nll_curves`].
pub fn raw_curves(results: &[LooResult]) -> BTreeMap<String, Trajectory> {
    let mut out = BTreeMap::new();
    if let Some(first) = results.first() {
        out.insert("full".to_string(), first.nll_full.clone());
    }
    for r in results {
        out.insert(r.removed.clone().unwrap_or_else(|| "none".to_string()), r.nll_loo.clone());
    }
    out
}
