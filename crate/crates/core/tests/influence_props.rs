//! Linearity, projection and ordering properties of influence scores.

use std::collections::BTreeMap;

use forge::corpus::{encode, Capability};
use forge::influence::{
    influence_ensemble, influence_pair, probe_gradient, sample_gradient, CheckpointSchedule, InfluenceOptions, ProbeFeatures, Projection,
    Projector,
};
use forge::synth::{generate, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinylm::{Checkpoint, ModelConfig};

fn small_model() -> Checkpoint {
    let cfg = ModelConfig { layers: 1, heads: 2, kv_heads: 1, dim: 16, hidden_dim: 32, seq_len: 32, ..ModelConfig::toy() };
    Checkpoint::init(cfg, 7).unwrap()
}

fn texts(n: usize) -> Vec<Vec<u32>> {
    let mut spec = SynthSpec::default();
    spec.sources.iter_mut().for_each(|s| s.docs = n);
    generate(&spec).values().flatten().map(|d| encode(&d.text)[..24.min(d.text.len())].to_vec()).collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn score_is_linear_in_the_sample_gradient() {
    let ckpt = small_model();
    let probe = texts(2);
    let projector = Projector::new(Projection::Exact, ckpt.params.len());
    let features = ProbeFeatures::new(&ckpt, &probe, &InfluenceOptions::default(), &projector).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_vec(&mut rng, ckpt.params.len());
    let b = random_vec(&mut rng, ckpt.params.len());
    let (la, lb) = (2.5, -0.75);
    let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| la * x + lb * y).collect();
    let lhs = features.score(&combo, &projector);
    let rhs = la * features.score(&a, &projector) + lb * features.score(&b, &projector);
    assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn score_scales_with_the_probe_gradient() {
    let ckpt = small_model();
    let docs = texts(2);
    let (probe, sample) = (&docs[..4], &docs[5]);
    let g = sample_gradient(&ckpt, sample).unwrap();
    let gp = probe_gradient(&ckpt, probe).unwrap();
    let direct = tinylm::dot(&gp, &g);
    let scaled: Vec<f64> = gp.iter().map(|x| 3.0 * x).collect();
    assert!((tinylm::dot(&scaled, &g) - 3.0 * direct).abs() <= 1e-12 * direct.abs().max(1.0));
    let pair = influence_pair(sample, probe, &ckpt, &InfluenceOptions::default()).unwrap();
    assert!((pair - direct).abs() <= 1e-12 * direct.abs().max(1.0));
}

#[test]
fn identity_projection_matches_exact() {
    let ckpt = small_model();
    let docs = texts(2);
    let exact = InfluenceOptions::default();
    let identity = InfluenceOptions { projection: Projection::Identity, ..exact };
    for sample in &docs[4..10] {
        let a = influence_pair(sample, &docs[..4], &ckpt, &exact).unwrap();
        let b = influence_pair(sample, &docs[..4], &ckpt, &identity).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn random_projection_preserves_sign_of_large_scores() {
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let projector = Projector::new(Projection::SignedRandom { dim: 1024, seed: 11 }, n);
    let shared = random_vec(&mut rng, n);
    let mut pairs = Vec::new();
    for _ in 0..200 {
        // correlated pairs so scores spread over both signs and many scales
        let mix = rng.random_range(-1.0..1.0);
        let a: Vec<f64> = random_vec(&mut rng, n).iter().zip(&shared).map(|(x, s)| x + mix * s).collect();
        let b: Vec<f64> = random_vec(&mut rng, n).iter().zip(&shared).map(|(x, s)| x + s).collect();
        let exact = tinylm::dot(&a, &b);
        let projected = tinylm::dot(&projector.project(&a), &projector.project(&b));
        pairs.push((exact, projected));
    }
    let mut mags: Vec<f64> = pairs.iter().map(|p| p.0.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let cut = mags[mags.len() / 5];
    let big: Vec<_> = pairs.iter().filter(|p| p.0.abs() > cut).collect();
    let agree = big.iter().filter(|p| (p.0 > 0.0) == (p.1 > 0.0)).count();
    assert!(agree as f64 >= 0.95 * big.len() as f64, "{agree}/{}", big.len());
}

#[test]
fn ensemble_ignores_probe_order() {
    let ckpt = small_model();
    let docs = texts(2);
    let probe: Vec<Vec<u32>> = docs[..6].to_vec();
    let mut reversed = probe.clone();
    reversed.reverse();
    let schedule = CheckpointSchedule::single(&ckpt, [Capability::Math]);
    let opts = InfluenceOptions::default();
    let a = influence_ensemble(&docs[7], &BTreeMap::from([(Capability::Math, probe)]), &schedule, &opts).unwrap();
    let b = influence_ensemble(&docs[7], &BTreeMap::from([(Capability::Math, reversed)]), &schedule, &opts).unwrap();
    let (x, y) = (a[&Capability::Math], b[&Capability::Math]);
    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
}

#[test]
fn probe_union_averages_part_scores() {
    let ckpt = small_model();
    let docs = texts(2);
    let opts = InfluenceOptions::default();
    let sample = &docs[9];
    let (p1, p2) = (&docs[..2], &docs[2..8]);
    let whole = influence_pair(sample, &docs[..8], &ckpt, &opts).unwrap();
    let parts = (2.0 * influence_pair(sample, p1, &ckpt, &opts).unwrap() + 6.0 * influence_pair(sample, p2, &ckpt, &opts).unwrap()) / 8.0;
    assert!((whole - parts).abs() <= 1e-10 * whole.abs().max(1.0), "{whole} vs {parts}");
}
