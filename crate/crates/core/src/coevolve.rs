//! Mid-training data–model co-evolution: score the retained pool with the
//! current model, keep strictly positive samples, reweight sources from
//! their influence, continue training, and stop once almost nothing is
//! left with positive influence.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tinylm::{Checkpoint, LrSchedule, OptimConfig};

use crate::corpus::{draw_stream, Capability, DatasetStats, MixtureSpec, Repetition, TokenizedSample};
use crate::error::{Error, Result};
use crate::influence::{score_samples, CheckpointSchedule, InfluenceOptions, InfluenceRecord, SampleRef};
use crate::mixer::{compute_weights, to_mixture, SourceWeight, WeightPolicy};
use crate::seed::derive_seed;
use crate::training::{mean_nll, steps_for, stream_windows, train_windows, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoevolveConfig {
    /// Converged once the positive fraction drops below this.
    pub tau: f64,
    pub max_phases: usize,
    /// Tokens drawn for each phase of continued training.
    pub phase_budget: u64,
    pub bins: usize,
    /// Disable to run the unfiltered control: every phase trains on the
    /// whole pool at its natural mixture.
    pub filter: bool,
    pub settings: TrainSettings,
    pub influence: InfluenceOptions,
    pub weights: WeightPolicy,
}

impl Default for CoevolveConfig {
    fn default() -> Self {
        let optim = OptimConfig { schedule: LrSchedule { peak_lr: 2e-3, warmup_steps: 0, final_ratio: 0.0 }, ..OptimConfig::default() };
        Self {
            tau: 0.05,
            max_phases: 4,
            phase_budget: 40_000,
            bins: 21,
            filter: true,
            settings: TrainSettings { optim, ..TrainSettings::default() },
            influence: InfluenceOptions::default(),
            weights: WeightPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convergence {
    Continue,
    Converged,
}

/// Converged when the positive fraction is below `tau` or nothing is retained.
pub fn convergence_check(positive_fraction: f64, retained: usize, tau: f64) -> Convergence {
    if retained == 0 || positive_fraction < tau {
        Convergence::Converged
    } else {
        Convergence::Continue
    }
}

/// Ids with strictly positive joint influence. Records must come from
/// `phase`.
pub fn filter_positive(records: &[InfluenceRecord], phase: usize) -> Result<BTreeSet<u64>> {
    let mut kept = BTreeSet::new();
    for r in records {
        if r.phase != phase {
            return Err(Error::PhaseMismatch { records: r.phase, model: phase });
        }
        if r.joint > 0.0 {
            kept.insert(r.doc_id);
        } else {
            log::debug!("phase {phase}: rejected doc {} of {} with joint influence {}", r.doc_id, r.source_id, r.joint);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRange {
    /// Bins cover `[-half_width, half_width]`.
    pub half_width: f64,
    pub bins: usize,
}

impl HistogramRange {
    /// Symmetric range from the largest magnitude among per-capability and
    /// joint scores.
    pub fn from_records(records: &[InfluenceRecord], bins: usize) -> Self {
        let max = records.iter().flat_map(|r| r.scores.values().copied().chain([r.joint])).fold(0.0f64, |m, v| m.max(v.abs()));
        Self { half_width: if max > 0.0 { max } else { 1.0 }, bins: bins.max(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Values outside the range land in the edge bins.
    pub fn new(values: impl IntoIterator<Item = f64>, range: HistogramRange) -> Self {
        let n = range.bins;
        let lo = -range.half_width;
        let width = 2.0 * range.half_width / n as f64;
        let edges = (0..=n).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; n];
        for v in values {
            let k = ((v - lo) / width).floor();
            let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(n - 1) };
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Histograms of each capability's scores and of the joint score.
pub fn influence_histogram(records: &[InfluenceRecord], range: HistogramRange) -> BTreeMap<String, Histogram> {
    let mut out = BTreeMap::new();
    let caps: BTreeSet<Capability> = records.iter().flat_map(|r| r.scores.keys().copied()).collect();
    for c in caps {
        out.insert(c.to_string(), Histogram::new(records.iter().filter_map(|r| r.scores.get(&c).copied()), range));
    }
    out.insert("joint".to_string(), Histogram::new(records.iter().map(|r| r.joint), range));
    out
}

/// Interquartile range with linear interpolation between order statistics.
pub fn interquartile_range(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let (i, f) = (x.floor() as usize, x - x.floor());
        if i + 1 < v.len() {
            v[i] * (1.0 - f) + v[i + 1] * f
        } else {
            v[i]
        }
    };
    q(0.75) - q(0.25)
}

/// State after a phase. `model` is the model the next phase scores with.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub phase: usize,
    pub model: Checkpoint,
    pub retained: BTreeSet<u64>,
    pub mixture: Option<MixtureSpec>,
    pub histogram: BTreeMap<String, Histogram>,
    pub positive_fraction: Option<f64>,
    pub converged: bool,
    pub range: Option<HistogramRange>,
}

impl PhaseState {
    /// Before the first phase: the whole pool is retained.
    pub fn initial(model: Checkpoint, pool: &BTreeMap<String, Vec<TokenizedSample>>) -> Self {
        Self {
            phase: 0,
            model,
            retained: pool.values().flatten().map(|s| s.doc_id).collect(),
            mixture: None,
            histogram: BTreeMap::new(),
            positive_fraction: None,
            converged: false,
            range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: usize,
    pub positive_fraction: f64,
    pub scored_count: usize,
    pub retained_count: usize,
    pub mixture: BTreeMap<String, f64>,
    pub converged: bool,
    pub tau: f64,
    /// `cross_entropy` or `distill`; empty when the phase did not train.
    pub objective: String,
    pub mean_loss: Option<f64>,
    /// Probe NLL of the scoring model, per capability.
    pub probe_nll: BTreeMap<Capability, f64>,
}

/// One phase: score the retained pool with the state's model, filter,
/// reweight, and (unless converged) train for the phase budget. The new
/// state carries the freshly trained model for the next phase's scoring.
#[allow(clippy::too_many_arguments)]
pub fn run_phase(
    state: &PhaseState,
    pool: &BTreeMap<String, Vec<TokenizedSample>>,
    probes: &BTreeMap<Capability, Vec<Vec<u32>>>,
    cfg: &CoevolveConfig,
    teacher: Option<&Checkpoint>,
    seed: u64,
) -> Result<(PhaseState, PhaseReport, Vec<InfluenceRecord>)> {
    if state.retained.is_empty() {
        return Err(Error::Invalid("retained set is empty".into()));
    }
    let phase = state.phase + 1;
    let samples: Vec<SampleRef<'_>> = pool
        .iter()
        .flat_map(|(src, v)| v.iter().map(move |s| (src, s)))
        .filter(|(_, s)| state.retained.contains(&s.doc_id))
        .map(|(src, s)| SampleRef { doc_id: s.doc_id, source_id: src, tokens: &s.tokens })
        .collect();
    let schedule = CheckpointSchedule::single(&state.model, probes.keys().copied());
    let (records, _) = score_samples(&samples, probes, &schedule, &cfg.influence, phase)?;
    let positive = filter_positive(&records, phase)?;
    let positive_fraction = positive.len() as f64 / records.len() as f64;
    let range = state.range.unwrap_or_else(|| HistogramRange::from_records(&records, cfg.bins));
    let histogram = influence_histogram(&records, range);
    let retained = if cfg.filter { positive } else { state.retained.clone() };
    let converged = cfg.filter && convergence_check(positive_fraction, retained.len(), cfg.tau) == Convergence::Converged;
    let mut probe_nll = BTreeMap::new();
    for (&c, docs) in probes {
        probe_nll.insert(c, mean_nll(&state.model, docs)?);
    }
    let mut report = PhaseReport {
        phase,
        positive_fraction,
        scored_count: records.len(),
        retained_count: retained.len(),
        mixture: BTreeMap::new(),
        converged,
        tau: cfg.tau,
        objective: String::new(),
        mean_loss: None,
        probe_nll,
    };
    let mut next = PhaseState {
        phase,
        model: state.model.clone(),
        retained: retained.clone(),
        mixture: None,
        histogram,
        positive_fraction: Some(positive_fraction),
        converged,
        range: Some(range),
    };
    if converged {
        return Ok((next, report, records));
    }
    let kept: BTreeMap<String, Vec<TokenizedSample>> = pool
        .iter()
        .map(|(src, v)| (src.clone(), v.iter().filter(|s| retained.contains(&s.doc_id)).cloned().collect::<Vec<_>>()))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    let stats: BTreeMap<String, DatasetStats> = kept.iter().map(|(k, v)| (k.clone(), DatasetStats::from_samples(k, v))).collect();
    let stream_seed = derive_seed(seed, &format!("coevolve/phase{phase}"));
    let mixture = if cfg.filter {
        let kept_records: Vec<InfluenceRecord> = records.iter().filter(|r| retained.contains(&r.doc_id)).cloned().collect();
        let weights: Vec<SourceWeight> = compute_weights(&kept_records, &stats, &cfg.weights)?;
        to_mixture(&weights, cfg.phase_budget, stream_seed)?
    } else {
        MixtureSpec::natural(&stats.values().cloned().collect::<Vec<_>>(), cfg.phase_budget, stream_seed)?
    };
    let stream = draw_stream(&kept, &mixture, Repetition::EpochWrap)?;
    let windows = stream_windows(&stream, state.model.config.seq_len, cfg.settings.separator);
    let steps = steps_for(windows.len(), cfg.settings.batch_size);
    let out = train_windows(&state.model, &windows, &cfg.settings, steps, &BTreeSet::new(), teacher)?;
    report.mixture = mixture.weights().clone();
    report.objective = if teacher.is_some() { "distill" } else { "cross_entropy" }.to_string();
    report.mean_loss = Some(out.losses.iter().sum::<f64>() / out.losses.len() as f64);
    log::info!("phase {phase}: positive fraction {positive_fraction:.4}, retained {}, {} steps", retained.len(), steps);
    next.model = out.final_checkpoint;
    next.mixture = Some(mixture);
    Ok((next, report, records))
}

#[derive(Debug, Clone)]
pub struct CoevolveRun {
    pub reports: Vec<PhaseReport>,
    /// Final state of every phase.
    pub states: Vec<PhaseState>,
    /// Influence records of every phase.
    pub records: Vec<Vec<InfluenceRecord>>,
}

impl CoevolveRun {
    pub fn converged_at(&self) -> Option<usize> {
        self.reports.iter().find(|r| r.converged).map(|r| r.phase)
    }
}

/// Runs phases until convergence or `max_phases`.
pub fn run_coevolution(
    initial: &Checkpoint,
    pool: &BTreeMap<String, Vec<TokenizedSample>>,
    probes: &BTreeMap<Capability, Vec<Vec<u32>>>,
    cfg: &CoevolveConfig,
    teacher: Option<&Checkpoint>,
    seed: u64,
) -> Result<CoevolveRun> {
    let ids: Vec<u64> = pool.values().flatten().map(|s| s.doc_id).collect();
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(Error::Invalid("pool doc_ids must be unique across sources".into()));
    }
    let mut state = PhaseState::initial(initial.clone(), pool);
    let mut run = CoevolveRun { reports: Vec::new(), states: Vec::new(), records: Vec::new() };
    for _ in 0..cfg.max_phases {
        let (next, report, records) = run_phase(&state, pool, probes, cfg, teacher, seed)?;
        let done = next.converged;
        run.reports.push(report);
        run.records.push(records);
        run.states.push(next.clone());
        state = next;
        if done {
            break;
        }
    }
    Ok(run)
}

/// Line-delimited JSON phase reports.
pub fn write_phase_reports(path: &Path, reports: &[PhaseReport]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for r in reports {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// `(capability, bin_lo, bin_hi, count)` rows.
pub fn write_histogram(path: &Path, histogram: &BTreeMap<String, Histogram>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["capability", "bin_lo", "bin_hi", "count"])?;
    for (name, h) in histogram {
        for (i, c) in h.counts.iter().enumerate() {
            w.write_record([name.clone(), h.edges[i].to_string(), h.edges[i + 1].to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, joint: f64, phase: usize) -> InfluenceRecord {
        InfluenceRecord {
            doc_id: id,
            source_id: "s".into(),
            phase,
            tokens: 4,
            scores: [(Capability::Math, joint)].into(),
            joint,
        }
    }

    #[test]
    fn filter_is_strict() {
        let recs = vec![rec(1, 0.2, 1), rec(2, 0.0, 1), rec(3, -0.1, 1)];
        assert_eq!(filter_positive(&recs, 1).unwrap(), [1].into());
        let all = vec![rec(1, 0.2, 1), rec(2, 1e-9, 1)];
        assert_eq!(filter_positive(&all, 1).unwrap().len(), 2);
        let none = vec![rec(1, -0.2, 1), rec(2, 0.0, 1)];
        let kept = filter_positive(&none, 1).unwrap();
        assert!(kept.is_empty());
        assert_eq!(convergence_check(0.0, kept.len(), 0.05), Convergence::Converged);
        assert!(matches!(filter_positive(&recs, 2), Err(Error::PhaseMismatch { .. })));
    }

    #[test]
    fn convergence_thresholds() {
        assert_eq!(convergence_check(0.0, 10, 0.05), Convergence::Converged);
        assert_eq!(convergence_check(0.5, 10, 0.05), Convergence::Continue);
        assert_eq!(convergence_check(0.049, 10, 0.05), Convergence::Converged);
    }

    #[test]
    fn histogram_conserves_mass_and_spikes_at_zero() {
        let zeros: Vec<InfluenceRecord> = (0..7).map(|i| rec(i, 0.0, 1)).collect();
        let range = HistogramRange::from_records(&zeros, 11);
        let h = influence_histogram(&zeros, range);
        let joint = &h["joint"];
        assert_eq!(joint.total(), 7);
        assert_eq!(joint.counts[5], 7);
        let mixed: Vec<InfluenceRecord> = [-3.0, -1.0, 0.5, 2.0, 9.0].iter().enumerate().map(|(i, &v)| rec(i as u64, v, 1)).collect();
        let h = influence_histogram(&mixed, HistogramRange { half_width: 3.0, bins: 6 });
        assert_eq!(h["joint"].total(), 5);
        assert_eq!(h["joint"].counts[5], 2);
        assert_eq!(h["joint"].counts[0], 1);
    }

    #[test]
    fn iqr_of_known_values() {
        assert_eq!(interquartile_range(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2.0);
        assert_eq!(interquartile_range(&[7.0]), 0.0);
    }
}
