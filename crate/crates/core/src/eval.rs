//! Ranking metrics, popularity groups, factor-correlation and
//! disentanglement analyses, and the decode latency bench.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Example, EOT};
use crate::decoding::{constrained_beam_search, BeamConfig, PrefixTrie, RankedItem};
use crate::error::{contract, FlrError, Result};
use crate::flr::FactorSnapshot;
use crate::model::Model;
use crate::numerics::{Tape, Tensor};

/// 1-based rank of `target` in `ranked`, if present.
fn rank_of(ranked: &[u32], target: u32) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn hit_rate_at_k(ranked: &[u32], target: u32, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranked: &[u32], target: u32, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub n_samples: usize,
}

impl GroupMetrics {
    /// Means over `(ranked item ids, target)` pairs.
    pub fn compute(results: &[(Vec<u32>, u32)]) -> Self {
        let col = |f: &dyn Fn(&[u32], u32) -> f64| stable_mean(results.iter().map(|(r, t)| f(r, *t)).collect());
        Self {
            hr5: col(&|r, t| hit_rate_at_k(r, t, 5)),
            hr10: col(&|r, t| hit_rate_at_k(r, t, 10)),
            ndcg5: col(&|r, t| ndcg_at_k(r, t, 5)),
            ndcg10: col(&|r, t| ndcg_at_k(r, t, 10)),
            n_samples: results.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: GroupMetrics,
    pub popular: Option<GroupMetrics>,
    pub unpopular: Option<GroupMetrics>,
    pub seed: u64,
    pub config_hash: String,
}

/// Top 20% of catalog items by training frequency (ties by ascending id)
/// form the popular group; the rest are unpopular.
pub fn popularity_split(train_counts: &BTreeMap<u32, usize>) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let mut items: Vec<(u32, usize)> = train_counts.iter().map(|(&i, &c)| (i, c)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n_pop = items.len() / 5;
    let popular = items[..n_pop].iter().map(|p| p.0).collect();
    let unpopular = items[n_pop..].iter().map(|p| p.0).collect();
    (popular, unpopular)
}

impl MetricsReport {
    pub fn compute(results: &[(Vec<u32>, u32)], popular: Option<&BTreeSet<u32>>, seed: u64, config_hash: &str) -> Self {
        let (pop, unpop) = match popular {
            Some(set) => {
                let (a, b): (Vec<_>, Vec<_>) = results.iter().cloned().partition(|(_, t)| set.contains(t));
                (Some(GroupMetrics::compute(&a)), Some(GroupMetrics::compute(&b)))
            }
            None => (None, None),
        };
        Self {
            overall: GroupMetrics::compute(results),
            popular: pop,
            unpopular: unpop,
            seed,
            config_hash: config_hash.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Factor analyses

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// `K × K` cosine similarities of the per-factor mean representations.
    pub cosine: Vec<Vec<f64>>,
    pub avg_abs_offdiag: f64,
    /// Same layout with Pearson correlation across dimensions.
    pub pearson: Vec<Vec<f64>>,
    pub avg_abs_offdiag_pearson: f64,
}

fn avg_abs_offdiag(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    if k < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v.abs();
            }
        }
    }
    s / (k * (k - 1)) as f64
}

fn similarity_matrix(vectors: &[Vec<f64>], what: &str) -> Result<Vec<Vec<f64>>> {
    let norms: Vec<f64> = vectors.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(contract(format!("factor {i} has zero {what}")));
    }
    let k = vectors.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in i + 1..k {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let c = dot / (norms[i] * norms[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Cosine (and Pearson) matrix of the factors averaged over samples; each
/// sample is a `K × D` factor matrix.
pub fn factor_correlation(samples: &[Tensor]) -> Result<CorrelationReport> {
    if samples.len() < 2 {
        return Err(contract("factor correlation needs at least 2 samples"));
    }
    let (k, d) = samples[0].dims2()?;
    let mut mean = vec![vec![0.0; d]; k];
    for s in samples {
        if s.dims2()? != (k, d) {
            return Err(FlrError::Shape {
                op: "factor_correlation",
                lhs: vec![k, d],
                rhs: s.shape().to_vec(),
            });
        }
        for (r, m) in mean.iter_mut().enumerate() {
            for (mj, x) in m.iter_mut().zip(s.row(r)) {
                *mj += x / samples.len() as f64;
            }
        }
    }
    let cosine = similarity_matrix(&mean, "norm")?;
    let centered: Vec<Vec<f64>> = mean
        .iter()
        .map(|v| {
            let mu = v.iter().sum::<f64>() / d as f64;
            v.iter().map(|x| x - mu).collect()
        })
        .collect();
    let pearson = similarity_matrix(&centered, "variance")?;
    Ok(CorrelationReport {
        avg_abs_offdiag: avg_abs_offdiag(&cosine),
        avg_abs_offdiag_pearson: avg_abs_offdiag(&pearson),
        cosine,
        pearson,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementScore {
    pub s_avg: f64,
    pub a_max: f64,
    pub ds: f64,
}

/// `DS = (1 − S_avg)·A_max` over `K × L` attention maps, one per sample.
pub fn disentanglement_score(attention_samples: &[Tensor]) -> Result<DisentanglementScore> {
    if attention_samples.is_empty() {
        return Err(contract("disentanglement score needs at least one sample"));
    }
    let mut s_avg = 0.0;
    let mut a_max = 0.0;
    for a in attention_samples {
        let (k, _) = a.dims2()?;
        if k < 2 {
            return Err(contract("disentanglement score is undefined for K = 1"));
        }
        let rows: Vec<Vec<f64>> = (0..k).map(|i| a.row(i).to_vec()).collect();
        let sim = similarity_matrix(&rows, "attention mass")?;
        s_avg += avg_abs_offdiag(&sim);
        a_max += rows.iter().map(|r| r.iter().copied().fold(f64::MIN, f64::max)).sum::<f64>() / k as f64;
    }
    let n = attention_samples.len() as f64;
    let (s_avg, a_max) = (s_avg / n, a_max / n);
    Ok(DisentanglementScore {
        s_avg,
        a_max,
        ds: (1.0 - s_avg) * a_max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub correlation: CorrelationReport,
    /// Absent for single-factor models.
    pub score: Option<DisentanglementScore>,
    pub n_samples: usize,
}

pub fn disentanglement_report(snapshots: &[FactorSnapshot]) -> Result<DisentanglementReport> {
    let factors: Vec<Tensor> = snapshots.iter().map(|s| s.factors.clone()).collect();
    let attention: Vec<Tensor> = snapshots.iter().map(|s| s.attention.clone()).collect();
    let k = factors.first().map_or(0, |f| f.rows());
    Ok(DisentanglementReport {
        correlation: factor_correlation(&factors)?,
        score: if k >= 2 { Some(disentanglement_score(&attention)?) } else { None },
        n_samples: snapshots.len(),
    })
}

/// `K × K` matrix as CSV with `f0..f{K-1}` headers.
pub fn write_heatmap<W: Write>(out: &mut W, m: &[Vec<f64>]) -> Result<()> {
    let header: Vec<String> = (0..m.len()).map(|i| format!("f{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in m {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model-driven evaluation

/// Ranks catalog items for one prompt with `n_iters` refinement rounds.
/// Returns the ranking and the number of backbone passes used.
pub fn rank_prompt(
    model: &Model,
    trie: &PrefixTrie,
    prompt: &[usize],
    n_iters: usize,
    beam: &BeamConfig,
) -> Result<(Vec<RankedItem>, usize)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false, false);
    let cond = bound.condition(prompt, n_iters, None)?;
    let mut scorer = |prefix: &[usize]| bound.next_logprobs(&cond, prefix);
    let ranked = constrained_beam_search(&mut scorer, trie, EOT, beam)?;
    Ok((ranked, bound.forward_passes()))
}

/// Rankings for every example, in order.
pub fn rank_examples(model: &Model, trie: &PrefixTrie, examples: &[Example], beam: &BeamConfig) -> Result<Vec<Vec<RankedItem>>> {
    examples
        .iter()
        .map(|e| rank_prompt(model, trie, &e.prompt, model.flr_config.n_iters, beam).map(|r| r.0))
        .collect()
}

pub fn evaluate_examples(
    model: &Model,
    trie: &PrefixTrie,
    examples: &[Example],
    beam: &BeamConfig,
    popular: Option<&BTreeSet<u32>>,
    seed: u64,
    config_hash: &str,
) -> Result<(MetricsReport, Vec<Vec<RankedItem>>)> {
    let rankings = rank_examples(model, trie, examples, beam)?;
    let results: Vec<(Vec<u32>, u32)> = rankings
        .iter()
        .zip(examples)
        .map(|(r, e)| (r.iter().map(|x| x.item_id).collect(), e.target))
        .collect();
    Ok((MetricsReport::compute(&results, popular, seed, config_hash), rankings))
}

/// Final-iteration factor bundles for each prompt.
pub fn collect_factors(model: &Model, prompts: &[&[usize]]) -> Result<Vec<FactorSnapshot>> {
    prompts
        .iter()
        .map(|p| {
            let tape = Tape::new();
            let bound = model.bind(&tape, false, false);
            let r = bound.condition_default(p)?;
            r.last()
                .map(|b| b.snapshot())
                .ok_or_else(|| contract("refinement produced no factor bundle"))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub variant: String,
    pub n_iters: usize,
    pub repeats: usize,
    /// Mean wall time per decoded sample, milliseconds.
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Backbone passes per sample before title decoding starts.
    pub refinement_passes: usize,
    /// Mean total backbone passes per sample.
    pub mean_passes: f64,
}

impl LatencyRow {
    pub const CSV_HEADER: &'static str = "variant,n_iters,repeats,mean_ms,std_ms,refinement_passes,mean_passes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variant, self.n_iters, self.repeats, self.mean_ms, self.std_ms, self.refinement_passes, self.mean_passes
        )
    }
}

/// Mean decode time per prompt for each refinement depth (`0` disables
/// reasoning), repeated `repeats` times. Prompts are processed in chunks of
/// `batch`; chunks run sequentially.
pub fn latency_bench(
    model: &Model,
    trie: &PrefixTrie,
    prompts: &[&[usize]],
    n_iters: &[usize],
    beam: &BeamConfig,
    batch: usize,
    repeats: usize,
) -> Result<Vec<LatencyRow>> {
    if prompts.is_empty() || repeats == 0 || batch == 0 {
        return Err(contract("latency bench needs prompts, batch >= 1 and repeats >= 1"));
    }
    let mut rows = Vec::new();
    for &n in n_iters {
        let mut times = Vec::with_capacity(repeats);
        let mut passes = 0usize;
        for _ in 0..repeats {
            passes = 0;
            let start = Instant::now();
            for chunk in prompts.chunks(batch) {
                for p in chunk {
                    passes += rank_prompt(model, trie, p, n, beam)?.1;
                }
            }
            times.push(start.elapsed().as_secs_f64() * 1e3 / prompts.len() as f64);
        }
        let mean = times.iter().sum::<f64>() / repeats as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repeats as f64;
        rows.push(LatencyRow {
            variant: if n == 0 { "no_reasoning".into() } else { format!("flr_n{n}") },
            n_iters: n,
            repeats,
            mean_ms: mean,
            std_ms: var.sqrt(),
            refinement_passes: n,
            mean_passes: passes as f64 / prompts.len() as f64,
        });
    }
    Ok(rows)
}
