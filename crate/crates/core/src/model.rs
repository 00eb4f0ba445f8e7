//! Backbone + FLR parameters as one model, its checkpoint format, and the
//! forward paths shared by training, rollouts and decoding.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneParams, ModelConfig};
use crate::error::{FlrError, Result};
use crate::flr::{Flr, FlrConfig, FlrParams, Refinement};
use crate::numerics::{Rng, Tape, Tensor, Var};

const CHECKPOINT_FORMAT: &str = "flr-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub flr_config: FlrConfig,
    /// Longest target sequence (title plus end marker) the model must fit.
    pub title_budget: usize,
    pub backbone: BackboneParams,
    pub flr: FlrParams,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
}

impl Model {
    pub fn init(config: ModelConfig, flr_config: FlrConfig, title_budget: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        flr_config.validate()?;
        if title_budget + 2 > config.max_seq_len {
            return Err(FlrError::Config(format!(
                "max_seq_len {} leaves no room for a prompt with title budget {}",
                config.max_seq_len, title_budget
            )));
        }
        let backbone = BackboneParams::init(&config, &mut rng.fork(1))?;
        let flr = FlrParams::init(&flr_config, &config, &backbone.tok_emb, &mut rng.fork(2))?;
        Ok(Self {
            config,
            flr_config,
            title_budget,
            backbone,
            flr,
        })
    }

    /// Longest prompt that still fits the thought slot and a full title.
    pub fn max_prompt_len(&self) -> usize {
        self.config.max_seq_len - 1 - self.title_budget
    }

    pub fn bind<'t>(&self, tape: &'t Tape, train_backbone: bool, train_flr: bool) -> BoundModel<'t> {
        BoundModel {
            backbone: self.backbone.bind(tape, &self.config, train_backbone),
            flr: self.flr.bind(tape, self.config.rope_base, train_flr),
            n_iters: self.flr_config.n_iters,
            max_prompt: self.max_prompt_len(),
        }
    }

    /// SHA-256 over the bit patterns of every backbone tensor.
    pub fn backbone_checksum(&self) -> String {
        checksum(self.backbone.tensors())
    }

    pub fn flr_checksum(&self) -> String {
        checksum(self.flr.tensors())
    }

    pub fn is_finite(&self) -> bool {
        self.backbone.tensors().iter().chain(self.flr.tensors().iter()).all(|t| t.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(FlrError::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn checksum(tensors: Vec<&Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Model parameters recorded on one tape.
#[derive(Debug)]
pub struct BoundModel<'t> {
    pub backbone: Backbone<'t>,
    pub flr: Flr<'t>,
    pub n_iters: usize,
    pub max_prompt: usize,
}

impl<'t> BoundModel<'t> {
    /// Thought-augmented prompt refined for `n_iters` rounds, with an optional
    /// perturbation added to the final thought embedding. `n_iters = 0`
    /// leaves the initial thought embedding in place.
    pub fn condition(&self, prompt: &[usize], n_iters: usize, perturbation: Option<&Tensor>) -> Result<Refinement<'t>> {
        let aug = self.flr.augment_with_thought(&self.backbone, prompt, self.max_prompt)?;
        let out = self.flr.refine(&self.backbone, aug, n_iters)?;
        match perturbation {
            Some(eps) => self.perturb(&out, eps),
            None => Ok(out),
        }
    }

    /// Copy of `cond` with `eps` added to the thought embedding.
    pub fn perturb(&self, cond: &Refinement<'t>, eps: &Tensor) -> Result<Refinement<'t>> {
        let tape = cond.embeddings.tape();
        let pos = cond.thought_position;
        let d = self.backbone.cfg.d_model;
        let eps = tape.constant(eps.clone().reshape(&[1, d])?);
        let row = cond.embeddings.row(pos)?.add(eps)?;
        Ok(Refinement {
            embeddings: cond.embeddings.replace_row(pos, row)?,
            thought_position: pos,
            bundles: cond.bundles.clone(),
        })
    }

    /// Default refinement depth, no perturbation.
    pub fn condition_default(&self, prompt: &[usize]) -> Result<Refinement<'t>> {
        self.condition(prompt, self.n_iters, None)
    }

    fn extend(&self, cond: &Refinement<'t>, tokens: &[usize]) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Ok(cond.embeddings);
        }
        Var::concat_rows(&[cond.embeddings, self.backbone.embed(tokens)?])
    }

    /// Teacher-forced log-probabilities of each token of `target`
    /// (title tokens followed by the end marker), shape `[T]`.
    pub fn target_logprobs(&self, cond: &Refinement<'t>, target: &[usize]) -> Result<Var<'t>> {
        Ok(self.target_log_softmax(cond, target)?.pick(target)?)
    }

    /// Full next-token log-softmax rows for each target position, `T × V`.
    pub fn target_log_softmax(&self, cond: &Refinement<'t>, target: &[usize]) -> Result<Var<'t>> {
        Ok(self.target_logits(cond, target)?.log_softmax())
    }

    /// Logits of the rows that predict each target token, `T × V`.
    pub fn target_logits(&self, cond: &Refinement<'t>, target: &[usize]) -> Result<Var<'t>> {
        if target.is_empty() {
            return Err(crate::error::contract("empty target sequence"));
        }
        let t = target.len();
        let seq = self.extend(cond, &target[..t - 1])?;
        let hidden = self.backbone.encode(seq, None)?;
        let rows: Vec<usize> = (cond.thought_position..cond.thought_position + t).collect();
        self.backbone.next_token_logits(hidden.gather_rows(&rows)?)
    }

    /// Next-token log-probabilities after `prefix` title tokens.
    pub fn next_logprobs(&self, cond: &Refinement<'t>, prefix: &[usize]) -> Result<Vec<f64>> {
        let seq = self.extend(cond, prefix)?;
        let hidden = self.backbone.encode(seq, None)?;
        let last = hidden.row(cond.thought_position + prefix.len())?;
        let lp = self.backbone.next_token_logits(last)?.log_softmax();
        Ok(lp.value().data().to_vec())
    }

    pub fn forward_passes(&self) -> usize {
        self.backbone.forward_passes()
    }
}
