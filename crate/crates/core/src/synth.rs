//! Seeded generator for a small multi-domain benchmark: arithmetic
//! (math), bracketed expressions with their values (code), entity facts
//! (knowledge), broad prose that quotes all three, and spam. Noise rates
//! corrupt answers in a way no surface feature reveals.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{content_id, Capability, Document};
use crate::error::Result;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Prose with embedded snippets from every domain.
    Broad,
    Math,
    Code,
    Knowledge,
    /// High-entropy junk.
    Spam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSource {
    pub name: String,
    pub family: Family,
    pub docs: usize,
    /// Probability that an answer (sum, value, fact) is replaced by a wrong one.
    #[serde(default)]
    pub noise_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Entities in the fact world shared by every source.
    pub entities: usize,
    pub sources: Vec<SynthSource>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let src = |name: &str, family, docs, noise_rate| SynthSource { name: name.into(), family, docs, noise_rate };
        Self {
            seed: 17,
            entities: 16,
            sources: vec![
                src("web", Family::Broad, 1200, 0.0),
                src("math", Family::Math, 1600, 0.0),
                src("code", Family::Code, 800, 0.0),
                src("facts", Family::Knowledge, 800, 0.0),
                src("facts_noisy", Family::Knowledge, 800, 0.6),
                src("spam", Family::Spam, 800, 0.0),
            ],
        }
    }
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

const NOUNS: [&str; 12] = [
    "river", "teacher", "garden", "market", "letter", "window", "village", "story", "engine", "forest", "student", "bridge",
];
const VERBS: [&str; 10] = ["finds", "builds", "watches", "opens", "follows", "paints", "carries", "visits", "reads", "moves"];
const ADJS: [&str; 10] = ["old", "quiet", "bright", "small", "busy", "green", "early", "warm", "simple", "distant"];

/// Entity names and their two attributes, fixed by the spec seed.
#[derive(Debug, Clone)]
pub struct World {
    pub entities: Vec<String>,
    pub capitals: Vec<String>,
    pub rivers: Vec<String>,
}

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| format!("{}{}", ONSETS[rng.random_range(0..ONSETS.len())], NUCLEI[rng.random_range(0..NUCLEI.len())])).collect()
}

impl World {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth/world"));
        let mut used = BTreeSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng, syl: usize| loop {
            let w = word(rng, syl);
            if used.insert(w.clone()) {
                return w;
            }
        };
        let entities = (0..n).map(|_| fresh(&mut rng, 3)).collect();
        let capitals = (0..n).map(|_| fresh(&mut rng, 2)).collect();
        let rivers = (0..n).map(|_| fresh(&mut rng, 2)).collect();
        Self { entities, capitals, rivers }
    }

    fn fact(&self, rng: &mut ChaCha8Rng, noise: f64) -> String {
        let n = self.entities.len();
        let e = rng.random_range(0..n);
        let mut v = e;
        if rng.random_bool(noise) && n > 1 {
            v = (e + rng.random_range(1..n)) % n;
        }
        if rng.random_bool(0.5) {
            format!("the capital of {} is {}.", self.entities[e], self.capitals[v])
        } else {
            format!("the river of {} is the {}.", self.entities[e], self.rivers[v])
        }
    }
}

fn wrong(rng: &mut ChaCha8Rng, truth: i64, noise: f64) -> i64 {
    if rng.random_bool(noise) {
        let delta = rng.random_range(1..=9);
        if rng.random_bool(0.5) || truth - delta < 0 {
            truth + delta
        } else {
            truth - delta
        }
    } else {
        truth
    }
}

fn equation(rng: &mut ChaCha8Rng, noise: f64) -> String {
    let (a, b) = (rng.random_range(0..20i64), rng.random_range(0..20i64));
    let (op, truth) = match rng.random_range(0..3) {
        0 => ('+', a + b),
        1 => ('-', a.max(b) - a.min(b)),
        _ => ('*', (a % 10) * (b % 10)),
    };
    let (a, b) = match op {
        '-' => (a.max(b), a.min(b)),
        '*' => (a % 10, b % 10),
        _ => (a, b),
    };
    format!("{a}{op}{b}={}", wrong(rng, truth, noise))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(i64),
    Op(&'static str, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self) -> i64 {
        match self {
            Expr::Num(n) => *n,
            Expr::Op(op, a, b) => {
                let (a, b) = (a.eval(), b.eval());
                match *op {
                    "add" => a + b,
                    "sub" => a - b,
                    "mul" => a * b,
                    _ => a.max(b),
                }
            }
        }
    }

    fn render(&self, out: &mut String) {
        match self {
            Expr::Num(n) => out.push_str(&n.to_string()),
            Expr::Op(op, a, b) => {
                out.push('(');
                out.push_str(op);
                out.push(' ');
                a.render(out);
                out.push(' ');
                b.render(out);
                out.push(')');
            }
        }
    }

    /// Parses the bracketed form produced by the generator.
    pub fn parse(s: &str) -> Option<Expr> {
        fn go(tokens: &[&str], pos: &mut usize) -> Option<Expr> {
            let t = *tokens.get(*pos)?;
            *pos += 1;
            if t == "(" {
                let op = *tokens.get(*pos)?;
                *pos += 1;
                let op = ["add", "sub", "mul", "max"].into_iter().find(|o| *o == op)?;
                let a = go(tokens, pos)?;
                let b = go(tokens, pos)?;
                if *tokens.get(*pos)? != ")" {
                    return None;
                }
                *pos += 1;
                Some(Expr::Op(op, Box::new(a), Box::new(b)))
            } else {
                t.parse().ok().map(Expr::Num)
            }
        }
        let spaced = s.replace('(', " ( ").replace(')', " ) ");
        let tokens: Vec<&str> = spaced.split_whitespace().collect();
        let mut pos = 0;
        let e = go(&tokens, &mut pos)?;
        (pos == tokens.len()).then_some(e)
    }
}

fn expr(rng: &mut ChaCha8Rng, depth: usize) -> Expr {
    if depth == 0 || rng.random_bool(0.4) {
        return Expr::Num(rng.random_range(0..10));
    }
    let op = ["add", "sub", "mul", "max"][rng.random_range(0..4)];
    Expr::Op(op, Box::new(expr(rng, depth - 1)), Box::new(expr(rng, depth - 1)))
}

fn program(rng: &mut ChaCha8Rng, noise: f64) -> String {
    let e = Expr::Op(["add", "sub", "mul", "max"][rng.random_range(0..4)], Box::new(expr(rng, 1)), Box::new(expr(rng, 1)));
    let mut s = String::new();
    e.render(&mut s);
    let value = e.eval();
    let shown = if rng.random_bool(noise) { value + rng.random_range(1..=5) } else { value };
    format!("{s} => {shown}")
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    format!(
        "the {} {} {} the {} {}.",
        pick(rng, &ADJS),
        pick(rng, &NOUNS),
        pick(rng, &VERBS),
        pick(rng, &ADJS),
        pick(rng, &NOUNS)
    )
}

fn spam(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789$#!%&@";
    let words = rng.random_range(8..16);
    (0..words)
        .map(|_| {
            let len = rng.random_range(2..7);
            (0..len).map(|_| CHARS[rng.random_range(0..CHARS.len())] as char).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn join_parts(rng: &mut ChaCha8Rng, lo: usize, hi: usize, mut part: impl FnMut(&mut ChaCha8Rng) -> String) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| part(rng)).collect::<Vec<_>>().join(" ; ")
}

fn document(rng: &mut ChaCha8Rng, world: &World, source: &SynthSource) -> (String, BTreeSet<Capability>) {
    let noise = source.noise_rate.clamp(0.0, 1.0);
    match source.family {
        Family::Math => (join_parts(rng, 3, 5, |r| equation(r, noise)), [Capability::Math].into()),
        Family::Code => (join_parts(rng, 2, 3, |r| program(r, noise)), [Capability::Code].into()),
        Family::Knowledge => (join_parts(rng, 2, 3, |r| world.fact(r, noise)), [Capability::Knowledge].into()),
        Family::Spam => (spam(rng), BTreeSet::new()),
        Family::Broad => {
            let mut parts = vec![sentence(rng)];
            let mut tags = BTreeSet::new();
            match rng.random_range(0..3) {
                0 => {
                    parts.push(format!("we check that {}.", equation(rng, noise)));
                    tags.insert(Capability::Math);
                }
                1 => {
                    parts.push(format!("the manual says {}.", program(rng, noise)));
                    tags.insert(Capability::Code);
                }
                _ => {
                    parts.push(format!("recall that {}", world.fact(rng, noise)));
                    tags.insert(Capability::Knowledge);
                }
            }
            parts.push(sentence(rng));
            (parts.join(" "), tags)
        }
    }
}

/// Generates every source, keyed by source name.
pub fn generate(spec: &SynthSpec) -> BTreeMap<String, Vec<Document>> {
    let world = World::new(spec.seed, spec.entities.max(2));
    let mut out = BTreeMap::new();
    for source in &spec.sources {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("synth/{}", source.name)));
        let docs = (0..source.docs)
            .map(|i| {
                let (text, domain_tags) = document(&mut rng, &world, source);
                Document {
                    doc_id: content_id(&record_id(&source.name, i)),
                    source_id: source.name.clone(),
                    text,
                    domain_tags,
                    quality_scores: BTreeMap::new(),
                }
            })
            .collect();
        out.insert(source.name.clone(), docs);
    }
    out
}

fn record_id(source: &str, i: usize) -> String {
    format!("{source}-{i:06}")
}

/// Writes `<dir>/<source>.jsonl` for every source and returns the paths.
pub fn write(spec: &SynthSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, docs) in generate(spec) {
        let path = dir.join(format!("{name}.jsonl"));
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        for (i, d) in docs.iter().enumerate() {
            let tags: Vec<&str> = d.domain_tags.iter().map(|c| c.name()).collect();
            let line = serde_json::json!({ "id": record_id(&name, i), "text": d.text, "tags": tags });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expressions_round_trip_through_parser() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let e = expr(&mut rng, 3);
            let mut s = String::new();
            e.render(&mut s);
            assert_eq!(Expr::parse(&s).unwrap(), e, "{s}");
        }
        assert_eq!(Expr::parse("(add 3 (mul 2 4))").unwrap().eval(), 11);
        assert!(Expr::parse("(add 3").is_none());
    }

    #[test]
    fn world_names_are_distinct() {
        let w = World::new(3, 30);
        let all: BTreeSet<&String> = w.entities.iter().chain(&w.capitals).chain(&w.rivers).collect();
        assert_eq!(all.len(), 90);
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SynthSpec::default();
        assert_eq!(generate(&spec), generate(&spec));
        let other = SynthSpec { seed: 18, ..spec.clone() };
        assert_ne!(generate(&spec)["math"], generate(&other)["math"]);
    }
}
