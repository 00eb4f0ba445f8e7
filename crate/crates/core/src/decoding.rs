//! Catalog-constrained generation: a prefix trie over tokenized titles and
//! beam search that only ever expands along trie edges.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract, FlrError, Result};

/// How a finished hypothesis's token log-probs become one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNorm {
    #[default]
    Mean,
    Sum,
}

pub fn score_sequence(token_logprobs: &[f64], norm: ScoreNorm) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(contract("cannot score an empty sequence"));
    }
    let sum: f64 = token_logprobs.iter().sum();
    Ok(match norm {
        ScoreNorm::Mean => sum / token_logprobs.len() as f64,
        ScoreNorm::Sum => sum,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    item: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
}

impl PrefixTrie {
    pub const ROOT: usize = 0;

    /// Builds the trie from `(item_id, title tokens)` pairs. Identical titles
    /// are rejected with every colliding item id.
    pub fn build<'a, I>(titles: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, &'a [usize])>,
    {
        let mut trie = Self {
            nodes: vec![TrieNode::default()],
        };
        let mut collisions: HashMap<usize, Vec<u32>> = HashMap::new();
        for (item, tokens) in titles {
            if tokens.is_empty() {
                return Err(FlrError::Data(format!("item {item} has an empty title")));
            }
            let mut node = Self::ROOT;
            for &tok in tokens {
                node = match trie.nodes[node].children.get(&tok) {
                    Some(&next) => next,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let next = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(tok, next);
                        next
                    }
                };
            }
            match trie.nodes[node].item {
                Some(existing) => collisions.entry(node).or_insert_with(|| vec![existing]).push(item),
                None => trie.nodes[node].item = Some(item),
            }
        }
        if !collisions.is_empty() {
            let mut items: Vec<u32> = collisions.into_values().flatten().collect();
            items.sort_unstable();
            return Err(FlrError::DuplicateTitle { items });
        }
        Ok(trie)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn terminal_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.item.is_some()).count()
    }

    pub fn child(&self, node: usize, token: usize) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    /// Allowed next tokens from `node` in ascending token order.
    pub fn children(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &n)| (t, n))
    }

    pub fn terminal(&self, node: usize) -> Option<u32> {
        self.nodes[node].item
    }

    /// Item whose title is exactly `tokens`, if any.
    pub fn accepts(&self, tokens: &[usize]) -> Option<u32> {
        let mut node = Self::ROOT;
        for &t in tokens {
            node = self.child(node, t)?;
        }
        self.terminal(node)
    }
}

/// A partial or finished title under construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Title tokens so far (the end marker is not included).
    pub tokens: Vec<usize>,
    /// Per-token log-probs, including the end marker once finished.
    pub token_logprobs: Vec<f64>,
    pub logprob: f64,
    pub node: usize,
    pub finished: bool,
}

impl BeamHypothesis {
    fn root() -> Self {
        Self {
            tokens: Vec::new(),
            token_logprobs: Vec::new(),
            logprob: 0.0,
            node: PrefixTrie::ROOT,
            finished: false,
        }
    }

    fn extend(&self, token: Option<usize>, node: usize, lp: f64) -> Self {
        let mut h = self.clone();
        if let Some(t) = token {
            h.tokens.push(t);
        }
        h.token_logprobs.push(lp);
        h.logprob += lp;
        h.node = node;
        h.finished = token.is_none();
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub top_k: usize,
    #[serde(default)]
    pub norm: ScoreNorm,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 10,
            top_k: 10,
            norm: ScoreNorm::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: u32,
    pub score: f64,
}

/// A finished title with its per-token log-probs.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub item_id: u32,
    pub tokens: Vec<usize>,
    pub token_logprobs: Vec<f64>,
}

fn by_score_then_tokens(a: &(f64, BeamHypothesis), b: &(f64, BeamHypothesis)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.finished.cmp(&b.1.finished))
        .then_with(|| a.1.tokens.cmp(&b.1.tokens))
}

/// Beam search restricted to trie paths. `next_logprobs(prefix)` returns the
/// full-vocabulary log-probs after the given title prefix. Finished
/// hypotheses end with `eot`; they compete with open ones for beam slots.
pub fn beam_search<F>(
    next_logprobs: &mut F,
    trie: &PrefixTrie,
    eot: usize,
    beam_width: usize,
    norm: ScoreNorm,
) -> Result<Vec<BeamHypothesis>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam_width == 0 {
        return Err(contract("beam_width must be >= 1"));
    }
    let mut active = vec![BeamHypothesis::root()];
    let mut finished = Vec::new();
    while !active.is_empty() {
        let mut candidates = Vec::new();
        for h in &active {
            let lp = next_logprobs(&h.tokens)?;
            if trie.terminal(h.node).is_some() {
                candidates.push(h.extend(None, h.node, lp[eot]));
            }
            for (tok, child) in trie.children(h.node) {
                candidates.push(h.extend(Some(tok), child, lp[tok]));
            }
        }
        let mut scored: Vec<(f64, BeamHypothesis)> = candidates
            .into_iter()
            .map(|h| Ok((score_sequence(&h.token_logprobs, norm)?, h)))
            .collect::<Result<_>>()?;
        scored.sort_by(by_score_then_tokens);
        scored.truncate(beam_width);
        active.clear();
        for (_, h) in scored {
            if h.finished {
                finished.push(h);
            } else {
                active.push(h);
            }
        }
    }
    Ok(finished)
}

/// Ranks catalog items by constrained beam search. `top_k` larger than the
/// catalog is clamped.
pub fn constrained_beam_search<F>(
    next_logprobs: &mut F,
    trie: &PrefixTrie,
    eot: usize,
    cfg: &BeamConfig,
) -> Result<Vec<RankedItem>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let catalog = trie.terminal_count();
    let mut top_k = cfg.top_k;
    if top_k > catalog {
        log::warn!("top_k {top_k} exceeds catalog size {catalog}; clamping");
        top_k = catalog;
    }
    if cfg.beam_width < top_k {
        return Err(contract(format!(
            "beam_width {} is smaller than top_k {top_k}",
            cfg.beam_width
        )));
    }
    let finished = beam_search(next_logprobs, trie, eot, cfg.beam_width, cfg.norm)?;
    let mut ranked = Vec::with_capacity(finished.len());
    for h in finished {
        let item_id = trie
            .terminal(h.node)
            .ok_or_else(|| contract("finished hypothesis off the catalog"))?;
        ranked.push(RankedItem {
            item_id,
            score: score_sequence(&h.token_logprobs, cfg.norm)?,
        });
    }
    sort_ranking(&mut ranked);
    ranked.truncate(top_k);
    Ok(ranked)
}

/// Score descending, ties by ascending item id.
pub fn sort_ranking(ranked: &mut [RankedItem]) {
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
}

/// Beam-width-one decode; the result always names a catalog item.
pub fn greedy_decode<F>(next_logprobs: &mut F, trie: &PrefixTrie, eot: usize) -> Result<Decoded>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let h = beam_search(next_logprobs, trie, eot, 1, ScoreNorm::Sum)?
        .pop()
        .ok_or_else(|| contract("greedy decode produced no hypothesis"))?;
    let item_id = trie.terminal(h.node);
    assert!(item_id.is_some(), "trie-constrained decode left the catalog");
    Ok(Decoded {
        item_id: item_id.unwrap_or_default(),
        tokens: h.tokens,
        token_logprobs: h.token_logprobs,
    })
}

/// One line of the ranking dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub user_id: u32,
    pub target_item: u32,
    pub ranked: Vec<RankedItem>,
}

pub fn write_rankings<W: Write>(out: &mut W, records: &[RankingRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
