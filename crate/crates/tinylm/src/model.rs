//! Forward pass, loss heads and hand-written backward pass.
//!
//! Sequences in a batch are stacked row-wise into one `N×D` activation matrix;
//! dense layers run as single GEMMs over all rows and attention runs per
//! sequence segment. Every intermediate needed by the backward pass is kept on
//! a [`Tape`].

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layout::{LayerLayout, Layout};
use crate::linalg::{gemm_strided, mm, mm_nt, mm_tn_acc};

/// How per-position losses are combined into the scalar that is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over every predicted token in the batch.
    TokenMean,
    /// Mean over sequences of each sequence's per-token mean.
    SequenceMean,
}

/// Which hidden state [`Model::hidden_states`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum HiddenTap {
    /// After the final norm, i.e. the input of the output projection.
    #[default]
    FinalNorm,
    /// Residual stream before the final norm.
    Residual,
}

/// A decoder-only transformer: RMSNorm pre-norm blocks, grouped-query
/// attention with rotary positions and optional QK-norm, SwiGLU feed-forward,
/// and an optionally tied output head.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    layout: Layout,
}

struct LayerTape {
    x_in: Vec<f64>,
    r_attn: Vec<f64>,
    a: Vec<f64>,
    q_raw: Vec<f64>,
    k_raw: Vec<f64>,
    q_r: Vec<f64>,
    k_r: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    r_ffn: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
}

struct Tape {
    tokens: Vec<u32>,
    segments: Vec<Range<usize>>,
    positions: Vec<usize>,
    /// Offset of each segment's attention block inside `LayerTape::probs`.
    prob_offsets: Vec<usize>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    layers: Vec<LayerTape>,
    x_final: Vec<f64>,
    r_final: Vec<f64>,
    f: Vec<f64>,
    /// Softmax over the vocabulary, `N×V`.
    probs: Vec<f64>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        Ok(Self { cfg, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Named parameter ranges in storage order (`embed`, `layer0.wq`, ...).
    pub fn param_groups(&self) -> Vec<(String, Range<usize>)> {
        self.layout.groups(&self.cfg)
    }

    /// Range of the input-embedding row for `token`.
    pub fn embedding_row(&self, token: u32) -> Range<usize> {
        let at = self.layout.embed + token as usize * self.cfg.dim;
        at..at + self.cfg.dim
    }

    /// Seeded initialisation. Norm gains start at one.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.layout.total];
        let d = cfg.dim;
        let fill = |p: &mut [f64], std: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in p.iter_mut() {
                *x = normal.sample(rng);
            }
        };
        let emb_std = 0.25 / (d as f64).sqrt();
        let resid_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        for (name, range) in self.layout.groups(cfg) {
            let slot = &mut p[range];
            let short = name.rsplit('.').next().unwrap_or(&name);
            match short {
                "embed" | "out" => fill(slot, emb_std, &mut rng),
                "attn_norm" | "ffn_norm" | "final_norm" | "q_norm" | "k_norm" => slot.fill(1.0),
                "wq" | "wk" | "wv" | "w1" | "w3" => fill(slot, 1.0 / (d as f64).sqrt(), &mut rng),
                "wo" => fill(slot, resid_scale / (d as f64).sqrt(), &mut rng),
                "w2" => fill(slot, resid_scale / (cfg.hidden_dim as f64).sqrt(), &mut rng),
                other => unreachable!("unknown parameter group {other}"),
            }
        }
        p
    }

    fn check(&self, params: &[f64], seqs: &[&[u32]]) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::ParamLength { got: params.len(), expected: self.layout.total });
        }
        for s in seqs {
            if s.len() < 2 {
                return Err(Error::SampleTooShort { len: s.len() });
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
                return Err(Error::TokenOutOfRange { token: t, vocab: self.cfg.vocab_size });
            }
        }
        Ok(())
    }

    /// Mean next-token negative log-likelihood of each sequence, in nats.
    pub fn nll(&self, params: &[f64], seqs: &[&[u32]]) -> Result<Vec<f64>> {
        self.check(params, seqs)?;
        let tape = self.forward(params, seqs);
        Ok(per_sequence_nll(&tape, self.cfg.vocab_size))
    }

    /// Next-token distributions, one row of `vocab_size` per position.
    pub fn next_token_probs(&self, params: &[f64], seq: &[u32]) -> Result<Vec<f64>> {
        self.check(params, &[seq])?;
        Ok(self.forward(params, &[seq]).probs)
    }

    /// Cross-entropy loss and its gradient.
    pub fn loss_grad(&self, params: &[f64], seqs: &[&[u32]], reduction: Reduction) -> Result<(f64, Vec<f64>)> {
        self.check(params, seqs)?;
        let tape = self.forward(params, seqs);
        let v = self.cfg.vocab_size;
        let weights = row_weights(&tape.segments, reduction);
        let mut loss = 0.0;
        let mut dlogits = tape.probs.clone();
        for (row, &w) in weights.iter().enumerate() {
            let slot = &mut dlogits[row * v..(row + 1) * v];
            if w == 0.0 {
                slot.fill(0.0);
                continue;
            }
            let target = tape.tokens[row + 1] as usize;
            loss -= w * slot[target].max(f64::MIN_POSITIVE).ln();
            slot[target] -= 1.0;
            for x in slot.iter_mut() {
                *x *= w;
            }
        }
        let grad = self.backward(params, &tape, &dlogits);
        Ok((loss, grad))
    }

    /// Per-token mean `KL(teacher ‖ student)` and its gradient with respect to
    /// the student parameters. `teacher_probs` holds one `vocab_size` row per
    /// position of the stacked batch, as returned by [`Model::batch_probs`].
    pub fn kl_grad(&self, params: &[f64], seqs: &[&[u32]], teacher_probs: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(params, seqs)?;
        let tape = self.forward(params, seqs);
        let v = self.cfg.vocab_size;
        if teacher_probs.len() != tape.probs.len() {
            return Err(Error::VocabMismatch { student: v, teacher: teacher_probs.len() / tape.tokens.len().max(1) });
        }
        let weights = row_weights(&tape.segments, Reduction::TokenMean);
        let mut kl = 0.0;
        let mut dlogits = vec![0.0; tape.probs.len()];
        for (row, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let ps = &tape.probs[row * v..(row + 1) * v];
            let pt = &teacher_probs[row * v..(row + 1) * v];
            let mut row_kl = 0.0;
            for j in 0..v {
                if pt[j] > 0.0 {
                    row_kl += pt[j] * (pt[j].ln() - ps[j].max(f64::MIN_POSITIVE).ln());
                }
                dlogits[row * v + j] = w * (ps[j] - pt[j]);
            }
            kl += w * row_kl;
        }
        let grad = self.backward(params, &tape, &dlogits);
        Ok((kl, grad))
    }

    /// Next-token distributions for a stacked batch (teacher side of distillation).
    pub fn batch_probs(&self, params: &[f64], seqs: &[&[u32]]) -> Result<Vec<f64>> {
        self.check(params, seqs)?;
        Ok(self.forward(params, seqs).probs)
    }

    /// Final hidden states, one row of width `dim` per token position.
    pub fn hidden_states(&self, params: &[f64], seqs: &[&[u32]], tap: HiddenTap) -> Result<Vec<f64>> {
        self.check(params, seqs)?;
        let tape = self.forward(params, seqs);
        Ok(match tap {
            HiddenTap::FinalNorm => tape.f,
            HiddenTap::Residual => tape.x_final,
        })
    }

    fn forward(&self, params: &[f64], seqs: &[&[u32]]) -> Tape {
        let cfg = &self.cfg;
        let (d, dkv, hd, f, v) = (cfg.dim, cfg.kv_dim(), cfg.head_dim(), cfg.hidden_dim, cfg.vocab_size);
        let (nh, nkv) = (cfg.heads, cfg.kv_heads);

        let mut tokens = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        let mut prob_offsets = Vec::with_capacity(seqs.len());
        let mut prob_len = 0;
        for s in seqs {
            let start = tokens.len();
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
            segments.push(start..tokens.len());
            prob_offsets.push(prob_len);
            prob_len += nh * s.len() * s.len();
        }
        let n = tokens.len();
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let (cos, sin) = rope_tables(max_len, hd, cfg.rope_base);

        let mut x = vec![0.0; n * d];
        for (row, &t) in tokens.iter().enumerate() {
            let e = self.layout.embed + t as usize * d;
            x[row * d..(row + 1) * d].copy_from_slice(&params[e..e + d]);
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let group = nh / nkv;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in &self.layout.layers {
            let x_in = x.clone();
            let (a, r_attn) = rmsnorm(&x_in, &params[l.attn_norm..l.attn_norm + d], d, cfg.norm_eps);

            let mut q_raw = vec![0.0; n * d];
            let mut k_raw = vec![0.0; n * dkv];
            let mut vv = vec![0.0; n * dkv];
            mm(n, d, d, &a, &params[l.wq..l.wq + d * d], 0.0, &mut q_raw);
            mm(n, d, dkv, &a, &params[l.wk..l.wk + d * dkv], 0.0, &mut k_raw);
            mm(n, d, dkv, &a, &params[l.wv..l.wv + d * dkv], 0.0, &mut vv);

            let (mut q, q_r) = match l.q_norm {
                Some(at) => rmsnorm(&q_raw, &params[at..at + hd], hd, cfg.norm_eps),
                None => (q_raw.clone(), Vec::new()),
            };
            let (mut k, k_r) = match l.k_norm {
                Some(at) => rmsnorm(&k_raw, &params[at..at + hd], hd, cfg.norm_eps),
                None => (k_raw.clone(), Vec::new()),
            };
            rope_apply(&mut q, &positions, nh, hd, &cos, &sin, false);
            rope_apply(&mut k, &positions, nkv, hd, &cos, &sin, false);

            let mut probs = vec![0.0; prob_len];
            let mut o = vec![0.0; n * d];
            for (seg, &poff) in segments.iter().zip(&prob_offsets) {
                let len = seg.len();
                for h in 0..nh {
                    let g = h / group;
                    let pblock = &mut probs[poff + h * len * len..poff + (h + 1) * len * len];
                    let qh = &q[seg.start * d + h * hd..];
                    let kg = &k[seg.start * dkv + g * hd..];
                    gemm_strided(len, hd, len, qh, (d, 1), kg, (1, dkv), 0.0, pblock, (len, 1));
                    for (i, prow) in pblock.chunks_mut(len).enumerate() {
                        let max = prow[..=i].iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                        let mut z = 0.0;
                        for p in prow[..=i].iter_mut() {
                            *p = (*p * scale - max).exp();
                            z += *p;
                        }
                        for p in prow[..=i].iter_mut() {
                            *p /= z;
                        }
                        prow[i + 1..].fill(0.0);
                    }
                    let vg = &vv[seg.start * dkv + g * hd..];
                    gemm_strided(len, len, hd, pblock, (len, 1), vg, (dkv, 1), 0.0, &mut o[seg.start * d + h * hd..], (d, 1));
                }
            }
            mm(n, d, d, &o, &params[l.wo..l.wo + d * d], 1.0, &mut x);
            let x_mid = x.clone();

            let (b, r_ffn) = rmsnorm(&x_mid, &params[l.ffn_norm..l.ffn_norm + d], d, cfg.norm_eps);
            let mut u = vec![0.0; n * f];
            let mut g = vec![0.0; n * f];
            mm(n, d, f, &b, &params[l.w1..l.w1 + d * f], 0.0, &mut u);
            mm(n, d, f, &b, &params[l.w3..l.w3 + d * f], 0.0, &mut g);
            let h: Vec<f64> = u.iter().zip(&g).map(|(&u, &g)| silu(u) * g).collect();
            mm(n, f, d, &h, &params[l.w2..l.w2 + f * d], 1.0, &mut x);

            layers.push(LayerTape {
                x_in, r_attn, a, q_raw, k_raw, q_r, k_r, q, k, v: vv, probs, o, x_mid, r_ffn, b, u, g, h,
            });
        }

        let x_final = x;
        let (fnorm, r_final) = rmsnorm(&x_final, &params[self.layout.final_norm..self.layout.final_norm + d], d, cfg.norm_eps);
        let mut logits = vec![0.0; n * v];
        match self.layout.out {
            None => mm_nt(n, d, v, &fnorm, &params[self.layout.embed..self.layout.embed + v * d], 0.0, &mut logits),
            Some(at) => mm(n, d, v, &fnorm, &params[at..at + d * v], 0.0, &mut logits),
        }
        for row in logits.chunks_mut(v) {
            softmax_in_place(row);
        }

        Tape {
            tokens, segments, positions, prob_offsets, cos, sin, layers, x_final, r_final, f: fnorm, probs: logits,
        }
    }

    fn backward(&self, params: &[f64], tape: &Tape, dlogits: &[f64]) -> Vec<f64> {
        let cfg = &self.cfg;
        let (d, dkv, hd, v) = (cfg.dim, cfg.kv_dim(), cfg.head_dim(), cfg.vocab_size);
        let (nh, nkv) = (cfg.heads, cfg.kv_heads);
        let n = tape.tokens.len();
        let mut grad = vec![0.0; self.layout.total];

        // output head
        let mut dfn = vec![0.0; n * d];
        let emb = self.layout.embed..self.layout.embed + v * d;
        match self.layout.out {
            None => {
                mm(n, v, d, dlogits, &params[emb.clone()], 0.0, &mut dfn);
                mm_tn_acc(n, v, d, dlogits, &tape.f, &mut grad[emb.clone()]);
            }
            Some(at) => {
                mm_nt(n, v, d, dlogits, &params[at..at + d * v], 0.0, &mut dfn);
                mm_tn_acc(n, d, v, &tape.f, dlogits, &mut grad[at..at + d * v]);
            }
        }
        let mut dx = vec![0.0; n * d];
        let fn_at = self.layout.final_norm;
        rmsnorm_backward(
            &tape.x_final, &tape.r_final, &params[fn_at..fn_at + d], &dfn, d,
            &mut dx, &mut grad[fn_at..fn_at + d],
        );

        let scale = 1.0 / (hd as f64).sqrt();
        let group = nh / nkv;
        for (l, lt) in self.layout.layers.iter().zip(&tape.layers).rev() {
            self.backward_ffn(params, l, lt, &mut dx, &mut grad, n);

            // attention output projection
            let mut d_o = vec![0.0; n * d];
            mm_nt(n, d, d, &dx, &params[l.wo..l.wo + d * d], 0.0, &mut d_o);
            mm_tn_acc(n, d, d, &lt.o, &dx, &mut grad[l.wo..l.wo + d * d]);

            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * dkv];
            let mut dv = vec![0.0; n * dkv];
            let mut dp = Vec::new();
            for (seg, &poff) in tape.segments.iter().zip(&tape.prob_offsets) {
                let len = seg.len();
                dp.resize(len * len, 0.0);
                for h in 0..nh {
                    let g = h / group;
                    let pblock = &lt.probs[poff + h * len * len..poff + (h + 1) * len * len];
                    let (qo, ko) = (seg.start * d + h * hd, seg.start * dkv + g * hd);
                    gemm_strided(len, hd, len, &d_o[qo..], (d, 1), &lt.v[ko..], (1, dkv), 0.0, &mut dp, (len, 1));
                    gemm_strided(len, len, hd, pblock, (1, len), &d_o[qo..], (d, 1), 1.0, &mut dv[ko..], (dkv, 1));
                    for (prow, dprow) in pblock.chunks(len).zip(dp.chunks_mut(len)) {
                        let dot_pp: f64 = prow.iter().zip(dprow.iter()).map(|(p, x)| p * x).sum();
                        for (x, &p) in dprow.iter_mut().zip(prow) {
                            *x = p * (*x - dot_pp) * scale;
                        }
                    }
                    gemm_strided(len, len, hd, &dp, (len, 1), &lt.k[ko..], (dkv, 1), 0.0, &mut dq[qo..], (d, 1));
                    gemm_strided(len, len, hd, &dp, (1, len), &lt.q[qo..], (d, 1), 1.0, &mut dk[ko..], (dkv, 1));
                }
            }
            rope_apply(&mut dq, &tape.positions, nh, hd, &tape.cos, &tape.sin, true);
            rope_apply(&mut dk, &tape.positions, nkv, hd, &tape.cos, &tape.sin, true);

            let dq_raw = match l.q_norm {
                Some(at) => {
                    let mut out = vec![0.0; n * d];
                    rmsnorm_backward(&lt.q_raw, &lt.q_r, &params[at..at + hd], &dq, hd, &mut out, &mut grad[at..at + hd]);
                    out
                }
                None => dq,
            };
            let dk_raw = match l.k_norm {
                Some(at) => {
                    let mut out = vec![0.0; n * dkv];
                    rmsnorm_backward(&lt.k_raw, &lt.k_r, &params[at..at + hd], &dk, hd, &mut out, &mut grad[at..at + hd]);
                    out
                }
                None => dk,
            };

            let mut da = vec![0.0; n * d];
            mm_nt(n, d, d, &dq_raw, &params[l.wq..l.wq + d * d], 0.0, &mut da);
            mm_nt(n, dkv, d, &dk_raw, &params[l.wk..l.wk + d * dkv], 1.0, &mut da);
            mm_nt(n, dkv, d, &dv, &params[l.wv..l.wv + d * dkv], 1.0, &mut da);
            mm_tn_acc(n, d, d, &lt.a, &dq_raw, &mut grad[l.wq..l.wq + d * d]);
            mm_tn_acc(n, d, dkv, &lt.a, &dk_raw, &mut grad[l.wk..l.wk + d * dkv]);
            mm_tn_acc(n, d, dkv, &lt.a, &dv, &mut grad[l.wv..l.wv + d * dkv]);
            let an = l.attn_norm;
            rmsnorm_backward(&lt.x_in, &lt.r_attn, &params[an..an + d], &da, d, &mut dx, &mut grad[an..an + d]);
        }

        for (row, &t) in tape.tokens.iter().enumerate() {
            let e = self.layout.embed + t as usize * d;
            for (acc, &x) in grad[e..e + d].iter_mut().zip(&dx[row * d..(row + 1) * d]) {
                *acc += x;
            }
        }
        grad
    }

    fn backward_ffn(&self, params: &[f64], l: &LayerLayout, lt: &LayerTape, dx: &mut [f64], grad: &mut [f64], n: usize) {
        let (d, f) = (self.cfg.dim, self.cfg.hidden_dim);
        let mut dh = vec![0.0; n * f];
        mm_nt(n, d, f, dx, &params[l.w2..l.w2 + f * d], 0.0, &mut dh);
        mm_tn_acc(n, f, d, &lt.h, dx, &mut grad[l.w2..l.w2 + f * d]);
        let mut du = vec![0.0; n * f];
        let mut dg = vec![0.0; n * f];
        for i in 0..n * f {
            let u = lt.u[i];
            let sig = 1.0 / (1.0 + (-u).exp());
            du[i] = dh[i] * lt.g[i] * sig * (1.0 + u * (1.0 - sig));
            dg[i] = dh[i] * u * sig;
        }
        let mut db = vec![0.0; n * d];
        mm_nt(n, f, d, &du, &params[l.w1..l.w1 + d * f], 0.0, &mut db);
        mm_nt(n, f, d, &dg, &params[l.w3..l.w3 + d * f], 1.0, &mut db);
        mm_tn_acc(n, d, f, &lt.b, &du, &mut grad[l.w1..l.w1 + d * f]);
        mm_tn_acc(n, d, f, &lt.b, &dg, &mut grad[l.w3..l.w3 + d * f]);
        let fnm = l.ffn_norm;
        rmsnorm_backward(&lt.x_mid, &lt.r_ffn, &params[fnm..fnm + d], &db, d, dx, &mut grad[fnm..fnm + d]);
    }
}

fn silu(u: f64) -> f64 {
    u / (1.0 + (-u).exp())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// Loss weight of each row; the final position of a segment has no target.
fn row_weights(segments: &[Range<usize>], reduction: Reduction) -> Vec<f64> {
    let n = segments.last().map_or(0, |s| s.end);
    let targets: usize = segments.iter().map(|s| s.len() - 1).sum();
    let mut w = vec![0.0; n];
    for seg in segments {
        let each = match reduction {
            Reduction::TokenMean => 1.0 / targets as f64,
            Reduction::SequenceMean => 1.0 / ((seg.len() - 1) as f64 * segments.len() as f64),
        };
        w[seg.start..seg.end - 1].fill(each);
    }
    w
}

fn per_sequence_nll(tape: &Tape, v: usize) -> Vec<f64> {
    tape.segments
        .iter()
        .map(|seg| {
            let total: f64 = (seg.start..seg.end - 1)
                .map(|row| -tape.probs[row * v + tape.tokens[row + 1] as usize].max(f64::MIN_POSITIVE).ln())
                .sum();
            total / (seg.len() - 1) as f64
        })
        .collect()
}

/// Row-wise RMSNorm over chunks of width `width`. Returns the output and the
/// inverse RMS of every chunk.
fn rmsnorm(x: &[f64], gain: &[f64], width: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut r = vec![0.0; rows];
    for i in 0..rows {
        let xi = &x[i * width..(i + 1) * width];
        let ms = xi.iter().map(|v| v * v).sum::<f64>() / width as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        r[i] = inv;
        for ((yo, &xv), &gv) in y[i * width..(i + 1) * width].iter_mut().zip(xi).zip(gain) {
            *yo = xv * inv * gv;
        }
    }
    (y, r)
}

/// Accumulates into `dx` and `dgain`.
fn rmsnorm_backward(x: &[f64], r: &[f64], gain: &[f64], dy: &[f64], width: usize, dx: &mut [f64], dgain: &mut [f64]) {
    let rows = x.len() / width;
    for i in 0..rows {
        let xi = &x[i * width..(i + 1) * width];
        let dyi = &dy[i * width..(i + 1) * width];
        let inv = r[i];
        let mut zx = 0.0;
        for j in 0..width {
            dgain[j] += dyi[j] * xi[j] * inv;
            zx += gain[j] * dyi[j] * xi[j];
        }
        let coef = inv * inv * inv * zx / width as f64;
        for j in 0..width {
            dx[i * width + j] += inv * gain[j] * dyi[j] - xi[j] * coef;
        }
    }
}

fn rope_tables(max_len: usize, hd: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = hd / 2;
    let mut cos = vec![0.0; max_len * half];
    let mut sin = vec![0.0; max_len * half];
    for p in 0..max_len {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / hd as f64);
            let angle = p as f64 * freq;
            cos[p * half + i] = angle.cos();
            sin[p * half + i] = angle.sin();
        }
    }
    (cos, sin)
}

/// Rotates each head's `(i, i + hd/2)` pairs by its position angle; the
/// inverse rotation is the backward pass.
fn rope_apply(x: &mut [f64], positions: &[usize], heads: usize, hd: usize, cos: &[f64], sin: &[f64], inverse: bool) {
    let half = hd / 2;
    let width = heads * hd;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row, &p) in positions.iter().enumerate() {
        for h in 0..heads {
            let base = row * width + h * hd;
            for i in 0..half {
                let (c, s) = (cos[p * half + i], sign * sin[p * half + i]);
                let a = x[base + i];
                let b = x[base + half + i];
                x[base + i] = a * c - b * s;
                x[base + half + i] = a * s + b * c;
            }
        }
    }
}
