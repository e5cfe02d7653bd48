use std::ops::Range;

use crate::config::ModelConfig;

/// Offsets of every parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct LayerLayout {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub q_norm: Option<usize>,
    pub k_norm: Option<usize>,
    pub ffn_norm: usize,
    pub w1: usize,
    pub w3: usize,
    pub w2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub layers: Vec<LayerLayout>,
    pub final_norm: usize,
    pub out: Option<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let dkv = cfg.kv_dim();
        let f = cfg.hidden_dim;
        let hd = cfg.head_dim();
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let at = cursor;
            cursor += n;
            at
        };
        let embed = take(cfg.vocab_size * d);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let attn_norm = take(d);
            let wq = take(d * d);
            let wk = take(d * dkv);
            let wv = take(d * dkv);
            let wo = take(d * d);
            let (q_norm, k_norm) = if cfg.qk_norm {
                (Some(take(hd)), Some(take(hd)))
            } else {
                (None, None)
            };
            let ffn_norm = take(d);
            let w1 = take(d * f);
            let w3 = take(d * f);
            let w2 = take(f * d);
            layers.push(LayerLayout { attn_norm, wq, wk, wv, wo, q_norm, k_norm, ffn_norm, w1, w3, w2 });
        }
        let final_norm = take(d);
        let out = if cfg.tied_embeddings { None } else { Some(take(d * cfg.vocab_size)) };
        Self { embed, layers, final_norm, out, total: cursor }
    }

    /// Named parameter groups, in storage order.
    pub fn groups(&self, cfg: &ModelConfig) -> Vec<(String, Range<usize>)> {
        let d = cfg.dim;
        let dkv = cfg.kv_dim();
        let f = cfg.hidden_dim;
        let hd = cfg.head_dim();
        let mut out = vec![("embed".to_string(), self.embed..self.embed + cfg.vocab_size * d)];
        for (i, l) in self.layers.iter().enumerate() {
            let mut push = |name: &str, at: usize, n: usize| out.push((format!("layer{i}.{name}"), at..at + n));
            push("attn_norm", l.attn_norm, d);
            push("wq", l.wq, d * d);
            push("wk", l.wk, d * dkv);
            push("wv", l.wv, d * dkv);
            push("wo", l.wo, d * d);
            if let Some(at) = l.q_norm {
                push("q_norm", at, hd);
            }
            if let Some(at) = l.k_norm {
                push("k_norm", at, hd);
            }
            push("ffn_norm", l.ffn_norm, d);
            push("w1", l.w1, d * f);
            push("w3", l.w3, d * f);
            push("w2", l.w2, f * d);
        }
        out.push(("final_norm".to_string(), self.final_norm..self.final_norm + d));
        if let Some(at) = self.out {
            out.push(("out".to_string(), at..at + d * cfg.vocab_size));
        }
        out
    }
}
