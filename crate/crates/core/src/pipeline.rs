//! End-to-end stages: data generation and preprocessing, supervised
//! warm-up, latent-perturbation policy optimization, evaluation, factor
//! analysis, the latency bench and the K sweep.
//!
//! Every stage works in memory; with `artifacts = true` it also writes its
//! outputs under the configured `out_dir`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, ingest_jsonl, read_jsonl, write_jsonl, Catalog, DatasetBundle, Example, ItemRecord,
    RawInteraction, SyntheticCorpus,
};
use crate::decoding::{write_rankings, BeamConfig, PrefixTrie, RankingRecord};
use crate::error::{contract, FlrError, Result};
use crate::eval::{
    collect_factors, disentanglement_report, evaluate_examples, latency_bench, popularity_split, write_heatmap,
    DisentanglementReport, LatencyRow, MetricsReport,
};
use crate::grpo::{grpo_step, sample_group, GrpoReport, RolloutGroup};
use crate::model::{BoundModel, Model};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::objectives::{attn_div_loss, combine, orth_loss, rec_loss, sparsity_loss, LossReport, LossToggles};
use crate::optim::{AdamW, AdamWConfig};

// ---------------------------------------------------------------------------
// Data stages

/// Synthetic corpus and its preprocessed bundle, without touching disk.
pub fn synthetic_bundle(cfg: &RunConfig) -> Result<(SyntheticCorpus, DatasetBundle)> {
    let mut syn = cfg.data.synthetic.clone();
    syn.seed = cfg.seed;
    let corpus = generate_synthetic(&syn)?;
    let bundle = DatasetBundle::prepare(&corpus.interactions, &corpus.catalog, &cfg.data.prep())?;
    Ok((corpus, bundle))
}

/// Writes the synthetic interactions JSONL plus `items.jsonl` (catalog with
/// attributes) and `profiles.jsonl` next to it.
pub fn gen_data(cfg: &RunConfig) -> Result<SyntheticCorpus> {
    let mut syn = cfg.data.synthetic.clone();
    syn.seed = cfg.seed;
    let corpus = generate_synthetic(&syn)?;
    let raw = &cfg.data.raw;
    let dir = raw.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    write_jsonl(raw, &corpus.interactions)?;
    write_jsonl(&dir.join("items.jsonl"), corpus.catalog.items())?;
    write_jsonl(&dir.join("profiles.jsonl"), &corpus.profiles)?;
    Ok(corpus)
}

/// Raw JSONL to a saved bundle. A sibling `items.jsonl` (as written by
/// [`gen_data`]) supplies catalog attributes when present.
pub fn preprocess(cfg: &RunConfig) -> Result<DatasetBundle> {
    let (interactions, mut catalog) = ingest_jsonl(&cfg.data.raw)?;
    let items_path = cfg.data.raw.parent().unwrap_or(Path::new(".")).join("items.jsonl");
    if items_path.exists() {
        let items: Vec<ItemRecord> = read_jsonl(&items_path)?;
        catalog = Catalog::new(items)?;
    }
    let bundle = DatasetBundle::prepare(&interactions, &catalog, &cfg.data.prep())?;
    bundle.save(&cfg.data.bundle)?;
    Ok(bundle)
}

pub fn load_raw(path: &Path) -> Result<Vec<RawInteraction>> {
    read_jsonl(path)
}

/// Model shape with dataset-dependent sizes filled in.
pub fn resolve_model_config(cfg: &RunConfig, bundle: &DatasetBundle) -> ModelConfig {
    let mut m = cfg.model.clone();
    if m.vocab_size == 0 {
        m.vocab_size = bundle.tokenizer.vocab_size();
    }
    if m.max_seq_len == 0 {
        m.max_seq_len = bundle.max_prompt_len() + 1 + bundle.title_budget();
    }
    m
}

pub fn init_model(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<Model> {
    let mc = resolve_model_config(cfg, bundle);
    if mc.vocab_size < bundle.tokenizer.vocab_size() {
        return Err(FlrError::Config(format!(
            "model.vocab_size {} smaller than the dataset vocabulary {}",
            mc.vocab_size,
            bundle.tokenizer.vocab_size()
        )));
    }
    Model::init(mc, cfg.flr.clone(), bundle.title_budget(), &mut Rng::new(cfg.seed).fork(10))
}

/// `limit` examples at evenly spaced positions (all when `limit` is 0 or
/// not smaller than the set).
pub fn subsample(examples: &[Example], limit: usize) -> Vec<Example> {
    if limit == 0 || limit >= examples.len() {
        return examples.to_vec();
    }
    (0..limit).map(|i| examples[i * examples.len() / limit].clone()).collect()
}

// ---------------------------------------------------------------------------
// Stage 1

/// Per-sample training loss: next-title cross-entropy plus the weighted
/// regularizers on the final refinement iteration.
pub fn sft_loss<'t>(
    bound: &BoundModel<'t>,
    prompt: &[usize],
    target: &[usize],
    toggles: &LossToggles,
) -> Result<(Var<'t>, LossReport)> {
    let cond = bound.condition_default(prompt)?;
    let last = *cond.last().ok_or_else(|| contract("no refinement iterations"))?;
    let l_rec = rec_loss(bound.target_logits(&cond, target)?, target)?;
    let regs = [
        orth_loss(&[last.factors])?,
        attn_div_loss(&[last.attention])?,
        sparsity_loss(&[last.alpha])?,
    ];
    let total = combine(l_rec, regs, bound.flr.log_vars, toggles)?;
    let s = bound.flr.log_vars.value();
    let lambdas = match toggles.fixed_lambdas {
        Some(l) => l,
        None => [0, 1, 2].map(|i| crate::objectives::lambda(s.data()[i])),
    };
    let report = LossReport {
        l_rec: l_rec.item(),
        l_orth: regs[0].item(),
        l_div: regs[1].item(),
        l_sparse: regs[2].item(),
        l_total: total.item(),
        lambdas,
        batch_size: 1,
    };
    Ok((total, report))
}

/// Averaged gradients of all parameters (backbone first, then FLR) over a
/// batch of examples.
pub fn sft_gradients(model: &Model, bundle: &DatasetBundle, batch: &[&Example], toggles: &LossToggles) -> Result<(Vec<Tensor>, LossReport)> {
    let mut grads: Vec<Tensor> = model
        .backbone
        .tensors()
        .into_iter()
        .chain(model.flr.tensors())
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut reports = Vec::with_capacity(batch.len());
    for ex in batch {
        let tape = Tape::new();
        let bound = model.bind(&tape, true, true);
        let target = bundle.target_tokens(ex.target)?;
        let (loss, report) = sft_loss(&bound, &ex.prompt, &target, toggles)?;
        let g = tape.backward(loss)?;
        let vars = bound.backbone.vars().into_iter().chain(bound.flr.vars());
        for (acc, v) in grads.iter_mut().zip(vars) {
            if let Some(gv) = g.get(v) {
                acc.data_mut()
                    .iter_mut()
                    .zip(gv.data())
                    .for_each(|(a, x)| *a += x / batch.len() as f64);
            }
        }
        reports.push(report);
    }
    Ok((grads, LossReport::average(&reports)))
}

fn all_params(model: &mut Model) -> Vec<&mut Tensor> {
    let Model { backbone, flr, .. } = model;
    backbone.tensors_mut().into_iter().chain(flr.tensors_mut()).collect()
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    /// Checkpoint with the best validation NDCG@5.
    pub model: Model,
    pub best_valid_ndcg5: f64,
    pub best_step: usize,
    pub steps: usize,
    pub losses: Vec<LossReport>,
    /// `(step, validation NDCG@5)` at each validation.
    pub valid_history: Vec<(usize, f64)>,
}

fn valid_ndcg5(model: &Model, trie: &PrefixTrie, valid: &[Example], beam: &BeamConfig) -> Result<f64> {
    Ok(evaluate_examples(model, trie, valid, beam, None, 0, "")?.0.overall.ndcg5)
}

/// Joint backbone + FLR training with early stopping on validation NDCG@5.
pub fn train_sft(cfg: &RunConfig, bundle: &DatasetBundle, artifacts: bool) -> Result<SftOutcome> {
    if artifacts {
        cfg.prepare_out_dir()?;
    }
    let trie = bundle.catalog.trie()?;
    let valid = subsample(&bundle.splits.valid, cfg.train.valid_limit);
    let mut model = init_model(cfg, bundle)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        clip_norm: cfg.train.clip_norm,
        ..Default::default()
    });
    let mut order_rng = Rng::new(cfg.seed).fork(11);
    let train = &bundle.splits.train;
    if train.is_empty() {
        return Err(FlrError::Data("empty training split".into()));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::new();
    let mut valid_history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.clone());
    let mut bad_evals = 0;
    let mut step = 0;
    let write_losses = |losses: &[LossReport]| -> Result<()> {
        if artifacts {
            let mut w = BufWriter::new(File::create(cfg.logs_dir().join("sft_loss.csv"))?);
            writeln!(w, "{}", LossReport::CSV_HEADER)?;
            for (i, r) in losses.iter().enumerate() {
                writeln!(w, "{}", r.csv_row(i + 1))?;
            }
        }
        Ok(())
    };
    while step < cfg.train.max_steps {
        if order.len() < cfg.train.batch_size {
            let mut epoch: Vec<usize> = (0..train.len()).collect();
            order_rng.shuffle(&mut epoch);
            order.extend(epoch);
        }
        let batch: Vec<&Example> = order.drain(..cfg.train.batch_size.min(order.len())).map(|i| &train[i]).collect();
        let result = sft_gradients(&model, bundle, &batch, &cfg.loss).and_then(|(grads, report)| {
            opt.step(all_params(&mut model), &grads)?;
            if !model.is_finite() {
                return Err(FlrError::Divergence("non-finite parameters after update".into()));
            }
            Ok(report)
        });
        let report = match result {
            Ok(r) => r,
            Err(e @ FlrError::Divergence(_)) => {
                if artifacts {
                    best.2.save(&cfg.checkpoints_dir().join("last_good.json"))?;
                    write_losses(&losses)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        losses.push(report);
        step += 1;
        if step % cfg.train.eval_every == 0 || step == cfg.train.max_steps {
            let score = valid_ndcg5(&model, &trie, &valid, &cfg.eval.beam)?;
            valid_history.push((step, score));
            log::info!("sft step {step}: valid ndcg@5 {score:.4}");
            if score > best.0 {
                best = (score, step, model.clone());
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= cfg.train.patience {
                    break;
                }
            }
        }
    }
    write_losses(&losses)?;
    let (best_valid_ndcg5, best_step, model) = best;
    if artifacts {
        model.save(&cfg.checkpoints_dir().join("sft.json"))?;
    }
    Ok(SftOutcome {
        model,
        best_valid_ndcg5,
        best_step,
        steps: step,
        losses,
        valid_history,
    })
}

// ---------------------------------------------------------------------------
// Stage 2

/// Resumable stage-2 state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed steps.
    pub step: usize,
}

impl GrpoState {
    pub fn fresh(sft: &Model, cfg: &RunConfig) -> Self {
        Self {
            model: sft.clone(),
            optimizer: AdamW::new(AdamWConfig {
                lr: cfg.grpo.lr,
                clip_norm: cfg.train.clip_norm,
                ..Default::default()
            }),
            step: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct GrpoOutcome {
    pub state: GrpoState,
    pub log: Vec<GrpoReport>,
    pub backbone_checksum: String,
}

/// Groups for the prompts of one step; the step index keys the random stream
/// so a resumed run replays the same trajectory.
pub fn step_groups(
    state: &GrpoState,
    reference: &Model,
    trie: &PrefixTrie,
    bundle: &DatasetBundle,
    cfg: &RunConfig,
) -> Result<Vec<RolloutGroup>> {
    let mut rng = Rng::new(cfg.seed).fork(1_000).fork(state.step as u64);
    let train = &bundle.splits.train;
    (0..cfg.grpo.batch_size)
        .map(|_| {
            let ex = &train[rng.below(train.len())];
            let target = bundle.target_tokens(ex.target)?;
            sample_group(&state.model, reference, trie, &ex.prompt, &target, &cfg.grpo, &mut rng)
        })
        .collect()
}

/// Runs stage 2 until `grpo.steps` completed steps. The reference policy is
/// the stage-1 checkpoint; the backbone stays bit-identical.
pub fn train_grpo(cfg: &RunConfig, bundle: &DatasetBundle, reference: &Model, resume: Option<GrpoState>, artifacts: bool) -> Result<GrpoOutcome> {
    if artifacts {
        cfg.prepare_out_dir()?;
    }
    let trie = bundle.catalog.trie()?;
    let mut state = resume.unwrap_or_else(|| GrpoState::fresh(reference, cfg));
    let checksum = state.model.backbone_checksum();
    let mut log = Vec::new();
    while state.step < cfg.grpo.steps {
        let groups = step_groups(&state, reference, &trie, bundle, cfg)?;
        let report = grpo_step(&mut state.model, &groups, &cfg.loss, &cfg.grpo, &mut state.optimizer)?;
        state.step += 1;
        log::debug!("grpo step {}: reward {:.4}", state.step, report.mean_reward);
        log.push(report);
    }
    if state.model.backbone_checksum() != checksum {
        return Err(contract("backbone changed during stage 2"));
    }
    if artifacts {
        let first = state.step - log.len();
        let mut w = BufWriter::new(File::create(cfg.logs_dir().join("grpo_log.csv"))?);
        writeln!(w, "{}", GrpoReport::CSV_HEADER)?;
        for (i, r) in log.iter().enumerate() {
            writeln!(w, "{}", r.csv_row(first + i + 1))?;
        }
        state.model.save(&cfg.checkpoints_dir().join("grpo.json"))?;
        state.save(&cfg.checkpoints_dir().join("grpo_state.json"))?;
    }
    Ok(GrpoOutcome {
        state,
        log,
        backbone_checksum: checksum,
    })
}

/// Mean group reward over `prompts` with a fixed perturbation stream.
pub fn probe_reward(model: &Model, reference: &Model, bundle: &DatasetBundle, examples: &[Example], cfg: &RunConfig) -> Result<f64> {
    let trie = bundle.catalog.trie()?;
    let mut rng = Rng::new(cfg.seed).fork(2_000);
    let mut total = 0.0;
    for ex in examples {
        let target = bundle.target_tokens(ex.target)?;
        total += sample_group(model, reference, &trie, &ex.prompt, &target, &cfg.grpo, &mut rng)?.mean_reward();
    }
    Ok(total / examples.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Evaluation and analyses

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub metrics: MetricsReport,
    pub rankings: Vec<RankingRecord>,
}

/// Ranking metrics on the test split (overall and by popularity group).
pub fn evaluate(cfg: &RunConfig, bundle: &DatasetBundle, model: &Model, artifacts: bool) -> Result<EvalOutcome> {
    let trie = bundle.catalog.trie()?;
    let test = subsample(&bundle.splits.test, cfg.eval.test_limit);
    let (popular, _) = popularity_split(&bundle.train_counts());
    let (metrics, ranked) = evaluate_examples(model, &trie, &test, &cfg.eval.beam, Some(&popular), cfg.seed, &cfg.hash())?;
    let rankings: Vec<RankingRecord> = ranked
        .into_iter()
        .zip(&test)
        .map(|(r, e)| RankingRecord {
            user_id: e.user,
            target_item: e.target,
            ranked: r,
        })
        .collect();
    if artifacts {
        cfg.prepare_out_dir()?;
        std::fs::write(cfg.reports_dir().join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
        let mut w = BufWriter::new(File::create(cfg.reports_dir().join("rankings.jsonl"))?);
        write_rankings(&mut w, &rankings)?;
    }
    Ok(EvalOutcome { metrics, rankings })
}

/// Factor correlation and disentanglement score on test prompts; also
/// exports per-sample gate weights and attention maps.
pub fn analyze(cfg: &RunConfig, bundle: &DatasetBundle, model: &Model, artifacts: bool) -> Result<DisentanglementReport> {
    let test = subsample(&bundle.splits.test, cfg.eval.analysis_samples);
    let prompts: Vec<&[usize]> = test.iter().map(|e| e.prompt.as_slice()).collect();
    let snapshots = collect_factors(model, &prompts)?;
    let report = disentanglement_report(&snapshots)?;
    if artifacts {
        cfg.prepare_out_dir()?;
        let dir = cfg.reports_dir();
        std::fs::write(dir.join("disentanglement.json"), serde_json::to_string_pretty(&report)?)?;
        write_heatmap(&mut BufWriter::new(File::create(dir.join("heatmap.csv"))?), &report.correlation.cosine)?;
        let n_iters = model.flr_config.n_iters;
        let rows: Vec<_> = snapshots.iter().enumerate().map(|(i, s)| s.export_row(i, n_iters)).collect();
        write_jsonl(&dir.join("factors.jsonl"), &rows)?;
    }
    Ok(report)
}

/// Decode latency for each configured refinement depth.
pub fn bench(cfg: &RunConfig, bundle: &DatasetBundle, model: &Model, artifacts: bool) -> Result<Vec<LatencyRow>> {
    let trie = bundle.catalog.trie()?;
    let test = subsample(&bundle.splits.test, cfg.bench.n_samples);
    let prompts: Vec<&[usize]> = test.iter().map(|e| e.prompt.as_slice()).collect();
    let beam = BeamConfig {
        beam_width: cfg.bench.beam,
        top_k: cfg.bench.beam.min(bundle.catalog.len()),
        norm: cfg.eval.beam.norm,
    };
    let rows = latency_bench(model, &trie, &prompts, &cfg.bench.n_iters, &beam, cfg.bench.batch, cfg.bench.repeats)?;
    if artifacts {
        cfg.prepare_out_dir()?;
        let mut w = BufWriter::new(File::create(cfg.reports_dir().join("latency.csv"))?);
        writeln!(w, "{}", LatencyRow::CSV_HEADER)?;
        for r in &rows {
            writeln!(w, "{}", r.csv_row())?;
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub valid_ndcg5: f64,
    pub test: MetricsReport,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "k,seed,dataset_hash,valid_ndcg5,hr5,hr10,ndcg5,ndcg10";

    pub fn csv_row(&self) -> String {
        let m = &self.test.overall;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.k, self.seed, self.dataset_hash, self.valid_ndcg5, m.hr5, m.hr10, m.ndcg5, m.ndcg10
        )
    }
}

/// Trains and evaluates one model per K on the same bundle and seed.
pub fn sweep_k(cfg: &RunConfig, bundle: &DatasetBundle, ks: &[usize], artifacts: bool) -> Result<Vec<SweepRow>> {
    let hash = bundle.hash();
    let mut rows = Vec::new();
    for &k in ks {
        let mut run = cfg.clone();
        run.flr.k = k;
        run.out_dir = cfg.out_dir.join(format!("k{k}"));
        run.validate()?;
        let sft = train_sft(&run, bundle, artifacts)?;
        let test = evaluate(&run, bundle, &sft.model, artifacts)?.metrics;
        rows.push(SweepRow {
            k,
            seed: cfg.seed,
            dataset_hash: hash.clone(),
            valid_ndcg5: sft.best_valid_ndcg5,
            test,
        });
    }
    if artifacts {
        std::fs::create_dir_all(&cfg.out_dir)?;
        let mut w = BufWriter::new(File::create(cfg.out_dir.join("sweep_k.csv"))?);
        writeln!(w, "{}", SweepRow::CSV_HEADER)?;
        for r in &rows {
            writeln!(w, "{}", r.csv_row())?;
        }
    }
    Ok(rows)
}
