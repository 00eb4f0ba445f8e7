//! Tiny pre-norm decoder-only transformer with rotary attention and tied
//! input/output embeddings.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{FlrError, Result};
use crate::numerics::{Rng, Tape, Tensor, Var, MASKED};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 600,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 96,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(FlrError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(FlrError::Config(format!(
                "head dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(FlrError::Config("vocab, layers and max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    /// `vocab × d_model`; also the output projection.
    pub tok_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
}

impl BackboneParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let out_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let proj = 1.0 / (d as f64).sqrt();
            layers.push(LayerParams {
                attn_norm: Tensor::full(&[d], 1.0),
                wq: rng.gaussian(&[d, d], proj)?,
                wk: rng.gaussian(&[d, d], proj)?,
                wv: rng.gaussian(&[d, d], proj)?,
                wo: rng.gaussian(&[d, d], proj * out_scale)?,
                ffn_norm: Tensor::full(&[d], 1.0),
                w1: rng.gaussian(&[d, cfg.d_ff], proj)?,
                b1: Tensor::zeros(&[cfg.d_ff]),
                w2: rng.gaussian(&[cfg.d_ff, d], out_scale / (cfg.d_ff as f64).sqrt())?,
                b2: Tensor::zeros(&[d]),
            });
        }
        Ok(Self {
            tok_emb: rng.gaussian(&[cfg.vocab_size, d], 0.02)?,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb];
        for l in &self.layers {
            out.extend([
                &l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.push(&self.final_norm);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.push(&mut self.final_norm);
        out
    }

    /// Records the parameters on `tape`; `trainable = false` binds them as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, cfg: &ModelConfig, trainable: bool) -> Backbone<'t> {
        let mut vars = self.tensors().into_iter().map(|t| tape.leaf(t.clone(), trainable));
        let tok_emb = vars.next().expect("tok_emb");
        let layers = (0..self.layers.len())
            .map(|_| {
                let mut take = || vars.next().expect("layer param");
                BoundLayer {
                    attn_norm: take(),
                    wq: take(),
                    wk: take(),
                    wv: take(),
                    wo: take(),
                    ffn_norm: take(),
                    w1: take(),
                    b1: take(),
                    w2: take(),
                    b2: take(),
                }
            })
            .collect();
        let final_norm = vars.next().expect("final_norm");
        Backbone {
            cfg: cfg.clone(),
            tok_emb,
            layers,
            final_norm,
            passes: Cell::new(0),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundLayer<'t> {
    attn_norm: Var<'t>,
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    ffn_norm: Var<'t>,
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

/// Backbone parameters recorded on a tape.
#[derive(Debug)]
pub struct Backbone<'t> {
    pub cfg: ModelConfig,
    pub tok_emb: Var<'t>,
    layers: Vec<BoundLayer<'t>>,
    final_norm: Var<'t>,
    passes: Cell<usize>,
}

/// Causal additive mask; pad keys are excluded and pad queries see only themselves.
pub fn causal_mask(len: usize, pad: Option<&[bool]>) -> Tensor {
    let mut m = Tensor::full(&[len, len], MASKED);
    let is_pad = |j: usize| pad.is_some_and(|p| p[j]);
    for i in 0..len {
        for j in 0..=i {
            if !is_pad(j) || (is_pad(i) && i == j) {
                m.data_mut()[i * len + j] = 0.0;
            }
        }
    }
    m
}

impl<'t> Backbone<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.tok_emb];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        out.push(self.final_norm);
        out
    }

    /// Number of `encode` calls made through this binding.
    pub fn forward_passes(&self) -> usize {
        self.passes.get()
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Var<'t>> {
        self.tok_emb.gather_rows(tokens)
    }

    /// Final-layer hidden states `H = Φ(E)` for an `L × D` embedding matrix.
    pub fn encode(&self, embeddings: Var<'t>, pad_mask: Option<&[bool]>) -> Result<Var<'t>> {
        let shape = embeddings.shape();
        let len = shape[0];
        if len > self.cfg.max_seq_len {
            return Err(FlrError::Length {
                len,
                max: self.cfg.max_seq_len,
            });
        }
        if shape.len() != 2 || shape[1] != self.cfg.d_model {
            return Err(FlrError::Shape {
                op: "encode",
                lhs: shape,
                rhs: vec![len, self.cfg.d_model],
            });
        }
        if let Some(p) = pad_mask {
            if p.len() != len {
                return Err(FlrError::Contract("pad mask length mismatch".into()));
            }
        }
        self.passes.set(self.passes.get() + 1);
        let mask = causal_mask(len, pad_mask);
        let positions: Vec<usize> = (0..len).collect();
        let dh = self.cfg.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        let mut x = embeddings;
        for l in &self.layers {
            let h = x.rms_norm(l.attn_norm, NORM_EPS)?;
            let q = h.matmul(l.wq)?;
            let k = h.matmul(l.wk)?;
            let v = h.matmul(l.wv)?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for hd in 0..self.cfg.n_heads {
                let qh = q.slice_cols(hd * dh, dh)?.rope(&positions, self.cfg.rope_base)?;
                let kh = k.slice_cols(hd * dh, dh)?.rope(&positions, self.cfg.rope_base)?;
                let vh = v.slice_cols(hd * dh, dh)?;
                let p = qh.matmul_t(kh)?.scale(inv).masked_softmax(&mask)?;
                heads.push(p.matmul(vh)?);
            }
            let attn = Var::concat_cols(&heads)?.matmul(l.wo)?;
            x = x.add(attn)?;
            let h = x.rms_norm(l.ffn_norm, NORM_EPS)?;
            let f = h.matmul(l.w1)?.add_bias(l.b1)?.gelu().matmul(l.w2)?.add_bias(l.b2)?;
            x = x.add(f)?;
        }
        x.rms_norm(self.final_norm, NORM_EPS)
    }

    /// Logits through the tied output projection, `L × vocab`.
    pub fn next_token_logits(&self, hidden: Var<'t>) -> Result<Var<'t>> {
        hidden.matmul_t(self.tok_emb)
    }
}

/// Rotary embedding of an `L × d_head` matrix at the given positions.
pub fn apply_rope<'t>(x: Var<'t>, positions: &[usize], base: f64) -> Result<Var<'t>> {
    x.rope(positions, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            rope_base: 10_000.0,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.d_model = 6;
        c.n_heads = 2; // head dim 3
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn single_token_shape_and_length_limit() {
        let cfg = tiny();
        let p = BackboneParams::init(&cfg, &mut Rng::new(0)).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, &cfg, false);
        let h = b.encode(b.embed(&[3]).unwrap(), None).unwrap();
        assert_eq!(h.shape(), vec![1, 8]);
        let long: Vec<usize> = vec![1; 13];
        assert!(matches!(
            b.encode(b.embed(&long).unwrap(), None),
            Err(FlrError::Length { len: 13, max: 12 })
        ));
    }

    #[test]
    fn causality() {
        let cfg = tiny();
        let p = BackboneParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, &cfg, false);
        let a = b.encode(b.embed(&[1, 2, 3, 4, 5]).unwrap(), None).unwrap().value();
        let c = b.encode(b.embed(&[1, 2, 3, 9, 7]).unwrap(), None).unwrap().value();
        assert_eq!(&a.data()[..3 * 8], &c.data()[..3 * 8]);
        assert_ne!(&a.data()[3 * 8..], &c.data()[3 * 8..]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let cfg = tiny();
        let p = BackboneParams::init(&cfg, &mut Rng::new(2)).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, &cfg, false);
        let h = b.encode(b.embed(&[1, 2, 3]).unwrap(), None).unwrap();
        let logits = b.next_token_logits(h).unwrap();
        assert_eq!(logits.shape(), vec![3, 20]);
        let lp = logits.log_softmax().value();
        for r in 0..3 {
            let lse: f64 = lp.row(r).iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-9);
        }
    }

    #[test]
    fn untrained_cross_entropy_near_log_vocab() {
        let cfg = ModelConfig::default();
        let p = BackboneParams::init(&cfg, &mut Rng::new(3)).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, &cfg, false);
        let mut rng = Rng::new(4);
        let tokens: Vec<usize> = (0..40).map(|_| rng.below(cfg.vocab_size)).collect();
        let h = b.encode(b.embed(&tokens[..39]).unwrap(), None).unwrap();
        let lp = b.next_token_logits(h).unwrap().log_softmax();
        let ce = -lp.pick(&tokens[1..]).unwrap().mean().item();
        let target = (cfg.vocab_size as f64).ln();
        assert!((ce - target).abs() < 0.1 * target, "ce {ce} vs {target}");
    }

    #[test]
    fn rope_relative_property() {
        // score(q at p, k at p') depends only on p − p'
        let tape = Tape::new();
        let mut rng = Rng::new(5);
        let q = tape.constant(rng.gaussian(&[1, 8], 1.0).unwrap());
        let k = tape.constant(rng.gaussian(&[1, 8], 1.0).unwrap());
        let score = |pq: usize, pk: usize| {
            let qr = apply_rope(q, &[pq], 100.0).unwrap();
            let kr = apply_rope(k, &[pk], 100.0).unwrap();
            qr.matmul_t(kr).unwrap().item()
        };
        assert!((score(5, 2) - score(13, 10)).abs() < 1e-9);
        assert!((score(7, 7) - score(0, 0)).abs() < 1e-9);
    }

    #[test]
    fn rope_preserves_row_norms() {
        let tape = Tape::new();
        let x = tape.constant(Rng::new(6).gaussian(&[5, 8], 1.0).unwrap());
        let y = apply_rope(x, &[0, 1, 2, 30, 77], 10_000.0).unwrap().value();
        let xv = x.value();
        for r in 0..5 {
            let nx: f64 = xv.row(r).iter().map(|v| v * v).sum();
            let ny: f64 = y.row(r).iter().map(|v| v * v).sum();
            assert!((nx.sqrt() - ny.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = tiny();
        let run = || {
            let p = BackboneParams::init(&cfg, &mut Rng::new(9)).unwrap();
            let tape = Tape::new();
            let b = p.bind(&tape, &cfg, false);
            let h = b.encode(b.embed(&[4, 5, 6]).unwrap(), None).unwrap();
            h.value().data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
