//! Factorized latent reasoning: `K` factor prototypes attend over the
//! backbone's hidden states, a gate mixes the factor readouts into one
//! thought vector, and that vector overwrites the thought slot before the
//! next backbone pass.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ModelConfig};
use crate::error::{contract, FlrError, Result};
use crate::numerics::{Rng, Tape, Tensor, Var, MASKED};
use crate::objectives::RegWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlrConfig {
    /// Number of factors `K`.
    pub k: usize,
    /// Refinement iterations `N`.
    pub n_iters: usize,
}

impl Default for FlrConfig {
    fn default() -> Self {
        Self { k: 3, n_iters: 2 }
    }
}

impl FlrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_iters == 0 {
            return Err(FlrError::Config(format!(
                "flr.k and flr.n_iters must be >= 1 (got {} and {})",
                self.k, self.n_iters
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlrParams {
    /// Factor query prototypes, `K × D`.
    pub q_f: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Gate MLP: `K·D → 2D → K`.
    pub gate_w1: Tensor,
    pub gate_b1: Tensor,
    pub gate_w2: Tensor,
    pub gate_b2: Tensor,
    /// Initial embedding of the thought slot, length `D`.
    pub thought: Tensor,
    /// Log-variance weights of the three regularizers.
    pub reg: RegWeights,
}

impl FlrParams {
    /// Random init; the thought embedding starts at the mean token embedding.
    pub fn init(cfg: &FlrConfig, model: &ModelConfig, tok_emb: &Tensor, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (k, d) = (cfg.k, model.d_model);
        let proj = 1.0 / (d as f64).sqrt();
        let (rows, cols) = tok_emb.dims2()?;
        let mut thought = vec![0.0; cols];
        for r in 0..rows {
            thought.iter_mut().zip(tok_emb.row(r)).for_each(|(t, x)| *t += x / rows as f64);
        }
        Ok(Self {
            q_f: rng.gaussian(&[k, d], proj.sqrt())?,
            w_q: rng.gaussian(&[d, d], proj)?,
            w_k: rng.gaussian(&[d, d], proj)?,
            w_v: rng.gaussian(&[d, d], proj)?,
            gate_w1: rng.gaussian(&[k * d, 2 * d], 1.0 / ((k * d) as f64).sqrt())?,
            gate_b1: Tensor::zeros(&[2 * d]),
            gate_w2: rng.gaussian(&[2 * d, k], 1.0 / ((2 * d) as f64).sqrt())?,
            gate_b2: Tensor::zeros(&[k]),
            thought: Tensor::vector(thought),
            reg: RegWeights::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.q_f.rows()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.q_f,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.gate_w1,
            &self.gate_b1,
            &self.gate_w2,
            &self.gate_b2,
            &self.thought,
            &self.reg.s,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.q_f,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.gate_w1,
            &mut self.gate_b1,
            &mut self.gate_w2,
            &mut self.gate_b2,
            &mut self.thought,
            &mut self.reg.s,
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, rope_base: f64, trainable: bool) -> Flr<'t> {
        let v = |t: &Tensor| tape.leaf(t.clone(), trainable);
        Flr {
            q_f: v(&self.q_f),
            w_q: v(&self.w_q),
            w_k: v(&self.w_k),
            w_v: v(&self.w_v),
            gate_w1: v(&self.gate_w1),
            gate_b1: v(&self.gate_b1),
            gate_w2: v(&self.gate_w2),
            gate_b2: v(&self.gate_b2),
            thought: v(&self.thought),
            log_vars: v(&self.reg.s),
            rope_base,
        }
    }
}

/// FLR parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Flr<'t> {
    pub q_f: Var<'t>,
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub gate_w1: Var<'t>,
    pub gate_b1: Var<'t>,
    pub gate_w2: Var<'t>,
    pub gate_b2: Var<'t>,
    pub thought: Var<'t>,
    pub log_vars: Var<'t>,
    pub rope_base: f64,
}

/// Per-iteration output of factor attention and gating.
#[derive(Clone, Copy, Debug)]
pub struct FactorBundle<'t> {
    /// `K × L_in` attention maps.
    pub attention: Var<'t>,
    /// `K × D` factor representations.
    pub factors: Var<'t>,
    /// `1 × K` gate weights.
    pub alpha: Var<'t>,
    /// `1 × D` aggregated thought vector.
    pub z: Var<'t>,
}

/// Detached copy of a [`FactorBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSnapshot {
    pub attention: Tensor,
    pub factors: Tensor,
    pub alpha: Tensor,
    pub z: Tensor,
}

impl FactorBundle<'_> {
    pub fn snapshot(&self) -> FactorSnapshot {
        FactorSnapshot {
            attention: (*self.attention.value()).clone(),
            factors: (*self.factors.value()).clone(),
            alpha: (*self.alpha.value()).clone(),
            z: (*self.z.value()).clone(),
        }
    }
}

/// One row of the per-sample factor export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorExportRow {
    pub sample_id: usize,
    pub iteration: usize,
    pub alpha: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
    pub factor_norms: Vec<f64>,
}

impl FactorSnapshot {
    pub fn export_row(&self, sample_id: usize, iteration: usize) -> FactorExportRow {
        let k = self.factors.rows();
        FactorExportRow {
            sample_id,
            iteration,
            alpha: self.alpha.data().to_vec(),
            attention: (0..k).map(|i| self.attention.row(i).to_vec()).collect(),
            factor_norms: (0..k)
                .map(|i| self.factors.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
        }
    }
}

/// Prompt embeddings with the thought slot appended.
#[derive(Clone, Copy, Debug)]
pub struct Augmented<'t> {
    pub embeddings: Var<'t>,
    pub thought_position: usize,
}

/// Result of `refine`.
#[derive(Clone, Debug)]
pub struct Refinement<'t> {
    pub embeddings: Var<'t>,
    pub thought_position: usize,
    pub bundles: Vec<FactorBundle<'t>>,
}

impl<'t> Refinement<'t> {
    pub fn last(&self) -> Option<&FactorBundle<'t>> {
        self.bundles.last()
    }
}

impl<'t> Flr<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        vec![
            self.q_f,
            self.w_q,
            self.w_k,
            self.w_v,
            self.gate_w1,
            self.gate_b1,
            self.gate_w2,
            self.gate_b2,
            self.thought,
            self.log_vars,
        ]
    }

    pub fn k(&self) -> usize {
        self.q_f.shape()[0]
    }

    /// `x̃ = [x; <|Thought|>]` as embeddings. `max_prompt` is the longest
    /// prompt that leaves room for the thought slot and a title.
    pub fn augment_with_thought(&self, backbone: &Backbone<'t>, prompt: &[usize], max_prompt: usize) -> Result<Augmented<'t>> {
        if prompt.is_empty() {
            return Err(contract("prompt must be nonempty"));
        }
        if prompt.len() > max_prompt {
            return Err(FlrError::Length {
                len: prompt.len(),
                max: max_prompt,
            });
        }
        let tokens = backbone.embed(prompt)?;
        let d = self.thought.shape()[0];
        let thought = self.thought.reshape(&[1, d])?;
        Ok(Augmented {
            embeddings: Var::concat_rows(&[tokens, thought])?,
            thought_position: prompt.len(),
        })
    }

    /// Factor attention maps `A` and readouts `F = A·(H W_v)`; keys carry
    /// rotary positions `0..L`. `pad` marks positions excluded from attention.
    pub fn factor_attention(&self, hidden: Var<'t>, pad: Option<&[bool]>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = hidden.shape();
        let (len, d) = (shape[0], shape[1]);
        let k = self.k();
        let mut mask = Tensor::zeros(&[k, len]);
        if let Some(p) = pad {
            for r in 0..k {
                for (j, &is_pad) in p.iter().enumerate() {
                    if is_pad {
                        mask.data_mut()[r * len + j] = MASKED;
                    }
                }
            }
        }
        let positions: Vec<usize> = (0..len).collect();
        let queries = self.q_f.matmul(self.w_q)?;
        let keys = hidden.matmul(self.w_k)?.rope(&positions, self.rope_base)?;
        let scores = queries.matmul_t(keys)?.scale(1.0 / (d as f64).sqrt());
        let attention = scores.masked_softmax(&mask)?;
        let values = hidden.matmul(self.w_v)?;
        let factors = attention.matmul(values)?;
        Ok((attention, factors))
    }

    /// Gate weights `α = softmax(MLP(flatten(F)))` and `z = Σ α_k F_k`.
    pub fn gate_aggregate(&self, factors: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = factors.shape();
        let flat = factors.reshape(&[1, shape[0] * shape[1]])?;
        let logits = flat
            .matmul(self.gate_w1)?
            .add_bias(self.gate_b1)?
            .gelu()
            .matmul(self.gate_w2)?
            .add_bias(self.gate_b2)?;
        let alpha = logits.softmax()?;
        let z = alpha.matmul(factors)?;
        Ok((alpha, z))
    }

    /// `N` rounds of encode → factor attention → gate → in-place thought update.
    pub fn refine(&self, backbone: &Backbone<'t>, aug: Augmented<'t>, n_iters: usize) -> Result<Refinement<'t>> {
        let mut e = aug.embeddings;
        let mut bundles = Vec::with_capacity(n_iters);
        for _ in 0..n_iters {
            let hidden = backbone.encode(e, None)?;
            let (attention, factors) = self.factor_attention(hidden, None)?;
            let (alpha, z) = self.gate_aggregate(factors)?;
            e = e.replace_row(aug.thought_position, z)?;
            bundles.push(FactorBundle {
                attention,
                factors,
                alpha,
                z,
            });
        }
        Ok(Refinement {
            embeddings: e,
            thought_position: aug.thought_position,
            bundles,
        })
    }
}
