//! Dataset pipeline: window selection, 5-core filtering, sliding-window
//! examples, a global chronological split, prompt templating, and a
//! synthetic corpus whose users follow known attribute-level intents.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Months};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoding::PrefixTrie;
use crate::error::{FlrError, Result};
use crate::numerics::Rng;

pub const PAD: usize = 0;
pub const HIST: usize = 1;
pub const SEP: usize = 2;
pub const EOH: usize = 3;
pub const THOUGHT: usize = 4;
pub const EOT: usize = 5;
pub const UNK: usize = 6;
pub const SPECIAL_TOKENS: [&str; 7] = ["<pad>", "<hist>", "<sep>", "<eoh>", "<|Thought|>", "<eot>", "<unk>"];

/// Minimum interactions per user and per item.
pub const CORE: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user: u32,
    pub item: u32,
    pub ts: i64,
    pub title: String,
}

// ---------------------------------------------------------------------------
// Tokenizer

/// Word-level vocabulary: the special tokens, then words by descending
/// frequency (ties alphabetical).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: Option<usize>) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().filter(|(w, _)| !SPECIAL_TOKENS.contains(w)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(cap) = max_vocab {
            words.truncate(cap.saturating_sub(SPECIAL_TOKENS.len()));
        }
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.index.get(w).copied().unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or(SPECIAL_TOKENS[UNK], String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ---------------------------------------------------------------------------
// Catalog

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u32,
    pub title: String,
    pub tokens: Vec<usize>,
    /// Ground-truth attribute values (synthetic corpora only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    #[serde(skip)]
    index: HashMap<u32, usize>,
}

impl Catalog {
    /// Items are kept sorted by id.
    pub fn new(mut items: Vec<ItemRecord>) -> Result<Self> {
        items.sort_by_key(|i| i.item_id);
        if let Some(w) = items.windows(2).find(|w| w[0].item_id == w[1].item_id) {
            return Err(FlrError::Data(format!("item {} listed twice", w[0].item_id)));
        }
        let index = items.iter().enumerate().map(|(i, r)| (r.item_id, i)).collect();
        Ok(Self { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn get(&self, item: u32) -> Option<&ItemRecord> {
        self.index.get(&item).map(|&i| &self.items[i])
    }

    pub fn contains(&self, item: u32) -> bool {
        self.index.contains_key(&item)
    }

    pub fn trie(&self) -> Result<PrefixTrie> {
        PrefixTrie::build(self.items.iter().map(|r| (r.item_id, r.tokens.as_slice())))
    }

    /// Longest tokenized title.
    pub fn max_title_len(&self) -> usize {
        self.items.iter().map(|r| r.tokens.len()).max().unwrap_or(0)
    }

    /// Fills `tokens` for every item from its title text.
    pub fn tokenize_titles(&mut self, tok: &Tokenizer) {
        for r in &mut self.items {
            r.tokens = tok.tokenize(&r.title);
        }
    }

    fn retain(&self, keep: &BTreeSet<u32>) -> Result<Self> {
        Self::new(self.items.iter().filter(|r| keep.contains(&r.item_id)).cloned().collect())
    }
}

/// Title tokens followed by the end marker: the sequence the model generates.
pub fn target_sequence(title_tokens: &[usize]) -> Vec<usize> {
    let mut t = title_tokens.to_vec();
    t.push(EOT);
    t
}

// ---------------------------------------------------------------------------
// Pipeline steps

/// Window selection outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: i64,
    pub end: i64,
    /// Whether the item threshold was met before exhausting the history.
    pub reached: bool,
    pub interactions: Vec<RawInteraction>,
}

/// Moves the window start back by `step_months` from `init_start` until the
/// 5-core filtered window holds at least `item_threshold` unique items.
pub fn select_window(
    interactions: &[RawInteraction],
    end: i64,
    init_start: i64,
    item_threshold: usize,
    step_months: u32,
) -> Result<Window> {
    if interactions.is_empty() {
        return Err(FlrError::Data("no interactions to window".into()));
    }
    let min_ts = interactions.iter().map(|r| r.ts).min().unwrap_or(0);
    let base = DateTime::from_timestamp(init_start, 0)
        .ok_or_else(|| FlrError::Config(format!("bad start timestamp {init_start}")))?;
    let take = |start: i64| -> Vec<RawInteraction> {
        interactions.iter().filter(|r| r.ts >= start && r.ts <= end).cloned().collect()
    };
    for k in 0u32.. {
        let start = base
            .checked_sub_months(Months::new(step_months * k))
            .map(|d| d.timestamp())
            .unwrap_or(i64::MIN);
        let window = take(start);
        let items = five_core_filter(&window).map(|f| unique_items(&f)).unwrap_or(0);
        if items >= item_threshold {
            return Ok(Window {
                start,
                end,
                reached: true,
                interactions: window,
            });
        }
        if start <= min_ts || step_months == 0 {
            break;
        }
    }
    log::warn!("item threshold {item_threshold} never reached; using the full range");
    Ok(Window {
        start: min_ts,
        end,
        reached: false,
        interactions: take(min_ts),
    })
}

fn unique_items(interactions: &[RawInteraction]) -> usize {
    interactions.iter().map(|r| r.item).collect::<BTreeSet<_>>().len()
}

/// Repeatedly drops users and items with fewer than five interactions until
/// nothing changes.
pub fn five_core_filter(interactions: &[RawInteraction]) -> Result<Vec<RawInteraction>> {
    let mut cur = interactions.to_vec();
    loop {
        let mut users: HashMap<u32, usize> = HashMap::new();
        let mut items: HashMap<u32, usize> = HashMap::new();
        for r in &cur {
            *users.entry(r.user).or_default() += 1;
            *items.entry(r.item).or_default() += 1;
        }
        let before = cur.len();
        cur.retain(|r| users[&r.user] >= CORE && items[&r.item] >= CORE);
        if cur.len() == before {
            break;
        }
    }
    if cur.is_empty() {
        return Err(FlrError::Data("dataset too sparse: 5-core filter left nothing".into()));
    }
    Ok(cur)
}

/// The most recent `max_len` items, order preserved.
pub fn truncate_history<T: Clone>(sequence: &[T], max_len: usize) -> Vec<T> {
    sequence[sequence.len().saturating_sub(max_len)..].to_vec()
}

/// `HIST title_1 SEP title_2 … EOH`.
pub fn to_prompt(history: &[u32], catalog: &Catalog) -> Result<Vec<usize>> {
    let mut out = vec![HIST];
    for (i, item) in history.iter().enumerate() {
        let rec = catalog
            .get(*item)
            .ok_or_else(|| FlrError::Data(format!("history item {item} not in catalog")))?;
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(&rec.tokens);
    }
    out.push(EOH);
    Ok(out)
}

/// One next-item prediction example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: u32,
    /// Truncated history, oldest first.
    pub history: Vec<u32>,
    pub target: u32,
    /// Timestamp of the target interaction.
    pub ts: i64,
    pub prompt: Vec<usize>,
}

/// Sliding-window examples: every interaction after a user's first becomes
/// a target with the preceding (truncated) history.
pub fn build_examples(interactions: &[RawInteraction], catalog: &Catalog, max_history: usize) -> Result<Vec<Example>> {
    let mut by_user: BTreeMap<u32, Vec<&RawInteraction>> = BTreeMap::new();
    for r in interactions {
        by_user.entry(r.user).or_default().push(r);
    }
    let mut out = Vec::new();
    for (user, mut seq) in by_user {
        seq.sort_by_key(|r| (r.ts, r.item));
        let items: Vec<u32> = seq.iter().map(|r| r.item).collect();
        for t in 1..seq.len() {
            let history = truncate_history(&items[..t], max_history);
            out.push(Example {
                user,
                prompt: to_prompt(&history, catalog)?,
                history,
                target: items[t],
                ts: seq[t].ts,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Global time-ordered split; train and valid get `floor(n·r/Σr)` examples
/// and test takes the rest. Ties ordered by (timestamp, user, item).
pub fn chronological_split(mut examples: Vec<Example>, ratios: [usize; 3]) -> Result<Splits> {
    let n = examples.len();
    if n < 10 {
        return Err(FlrError::Data(format!("need at least 10 examples to split, got {n}")));
    }
    let total: usize = ratios.iter().sum();
    if total == 0 {
        return Err(FlrError::Config("split ratios sum to zero".into()));
    }
    examples.sort_by_key(|e| (e.ts, e.user, e.target));
    let n_train = n * ratios[0] / total;
    let n_valid = n * ratios[1] / total;
    let test = examples.split_off(n_train + n_valid);
    let valid = examples.split_off(n_train);
    Ok(Splits {
        train: examples,
        valid,
        test,
    })
}

// ---------------------------------------------------------------------------
// Bundle

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    pub max_history: usize,
    pub split: [usize; 3],
    /// Word-vocabulary cap for ingested titles.
    pub max_vocab: Option<usize>,
    pub window: Option<WindowConfig>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            max_history: 10,
            split: [8, 1, 1],
            max_vocab: None,
            window: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub end: i64,
    pub init_start: i64,
    pub item_threshold: usize,
    pub step_months: u32,
}

/// Everything training and evaluation read.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub splits: Splits,
    pub catalog: Catalog,
    pub tokenizer: Tokenizer,
}

impl DatasetBundle {
    /// Windowing (optional), 5-core filtering, tokenization, examples, split.
    pub fn prepare(interactions: &[RawInteraction], catalog: &Catalog, cfg: &PrepConfig) -> Result<Self> {
        let window = match &cfg.window {
            Some(w) => select_window(interactions, w.end, w.init_start, w.item_threshold, w.step_months)?.interactions,
            None => interactions.to_vec(),
        };
        let core = five_core_filter(&window)?;
        let keep: BTreeSet<u32> = core.iter().map(|r| r.item).collect();
        let mut catalog = catalog.retain(&keep)?;
        if let Some(missing) = keep.iter().find(|i| !catalog.contains(**i)) {
            return Err(FlrError::Data(format!("item {missing} has no catalog entry")));
        }
        let tokenizer = Tokenizer::build(catalog.items().iter().map(|r| r.title.as_str()), cfg.max_vocab);
        catalog.tokenize_titles(&tokenizer);
        catalog.trie()?;
        let examples = build_examples(&core, &catalog, cfg.max_history)?;
        let splits = chronological_split(examples, cfg.split)?;
        Ok(Self {
            splits,
            catalog,
            tokenizer,
        })
    }

    /// Title budget of the model: longest title plus the end marker.
    pub fn title_budget(&self) -> usize {
        self.catalog.max_title_len() + 1
    }

    pub fn max_prompt_len(&self) -> usize {
        [&self.splits.train, &self.splits.valid, &self.splits.test]
            .iter()
            .flat_map(|s| s.iter())
            .map(|e| e.prompt.len())
            .max()
            .unwrap_or(0)
    }

    pub fn target_tokens(&self, item: u32) -> Result<Vec<usize>> {
        let rec = self
            .catalog
            .get(item)
            .ok_or_else(|| FlrError::Data(format!("target {item} not in catalog")))?;
        Ok(target_sequence(&rec.tokens))
    }

    /// How often each item is a training target, over the whole catalog.
    pub fn train_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> = self.catalog.items().iter().map(|r| (r.item_id, 0)).collect();
        for e in &self.splits.train {
            *counts.entry(e.target).or_default() += 1;
        }
        counts
    }

    /// SHA-256 of the serialized bundle; equal hashes mean identical data.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            serde_json::to_vec(&self.catalog),
            serde_json::to_vec(&self.tokenizer),
            serde_json::to_vec(&self.splits),
        ] {
            h.update(part.expect("bundle types serialize"));
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("catalog.jsonl"), self.catalog.items())?;
        write_jsonl(&dir.join("train.jsonl"), &self.splits.train)?;
        write_jsonl(&dir.join("valid.jsonl"), &self.splits.valid)?;
        write_jsonl(&dir.join("test.jsonl"), &self.splits.test)?;
        std::fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(self.tokenizer.tokens())?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let catalog = Catalog::new(read_jsonl(&dir.join("catalog.jsonl"))?)?;
        let tokens: Vec<String> = serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
        let bundle = Self {
            splits: Splits {
                train: read_jsonl(&dir.join("train.jsonl"))?,
                valid: read_jsonl(&dir.join("valid.jsonl"))?,
                test: read_jsonl(&dir.join("test.jsonl"))?,
            },
            catalog,
            tokenizer: Tokenizer::from_tokens(tokens),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Every target and history item exists in the catalog.
    pub fn validate(&self) -> Result<()> {
        for e in self.splits.train.iter().chain(&self.splits.valid).chain(&self.splits.test) {
            for item in e.history.iter().chain(std::iter::once(&e.target)) {
                if !self.catalog.contains(*item) {
                    return Err(FlrError::Data(format!("item {item} missing from catalog")));
                }
            }
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Reads `{user, item, ts, title}` lines. When every id is a non-negative
/// integer the ids are kept; otherwise users and items are mapped to dense
/// ids in order of first appearance.
/// Each item keeps the title of its earliest interaction.
pub fn ingest_jsonl(path: &Path) -> Result<(Vec<RawInteraction>, Catalog)> {
    #[derive(Deserialize)]
    struct Line {
        user: serde_json::Value,
        item: serde_json::Value,
        ts: i64,
        title: String,
    }
    fn key(v: &serde_json::Value) -> String {
        match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
    let lines: Vec<Line> = read_jsonl(path)?;
    let numeric = |v: &serde_json::Value| v.as_u64().is_some_and(|x| x <= u32::MAX as u64);
    let verbatim = lines.iter().all(|l| numeric(&l.user) && numeric(&l.item));
    let mut users: HashMap<String, u32> = HashMap::new();
    let mut items: HashMap<String, u32> = HashMap::new();
    let intern = |map: &mut HashMap<String, u32>, v: &serde_json::Value| -> u32 {
        if verbatim {
            return v.as_u64().unwrap_or_default() as u32;
        }
        let next = map.len() as u32;
        *map.entry(key(v)).or_insert(next)
    };
    let mut titles: BTreeMap<u32, (i64, String)> = BTreeMap::new();
    let mut out = Vec::with_capacity(lines.len());
    for (n, l) in lines.into_iter().enumerate() {
        let title = l.title.split_whitespace().collect::<Vec<_>>().join(" ");
        if l.ts < 0 || title.is_empty() {
            return Err(FlrError::Data(format!("line {}: negative timestamp or empty title", n + 1)));
        }
        let user = intern(&mut users, &l.user);
        let item = intern(&mut items, &l.item);
        let slot = titles.entry(item).or_insert((l.ts, title.clone()));
        if l.ts < slot.0 {
            *slot = (l.ts, title.clone());
        }
        out.push(RawInteraction {
            user,
            item,
            ts: l.ts,
            title,
        });
    }
    let catalog = Catalog::new(
        titles
            .into_iter()
            .map(|(item_id, (_, title))| ItemRecord {
                item_id,
                title,
                tokens: Vec::new(),
                attributes: None,
            })
            .collect(),
    )?;
    Ok((out, catalog))
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub n_users: usize,
    /// Number of values of each latent attribute; its length is `K_true`.
    pub attribute_sizes: Vec<usize>,
    /// Symmetric Dirichlet concentration of each user's intent mixture.
    pub concentration: f64,
    /// Probability that a non-active attribute still takes the user's preferred value.
    pub secondary_match: f64,
    /// Zipf exponent of item popularity inside an attribute tuple.
    pub popularity_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_items: 300,
            n_users: 500,
            attribute_sizes: vec![5, 4, 3],
            concentration: 0.5,
            secondary_match: 0.6,
            popularity_exponent: 0.5,
            min_len: 8,
            max_len: 20,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlrError::Config(format!("synthetic: {m}")));
        if self.attribute_sizes.is_empty() || self.attribute_sizes.contains(&0) {
            return bad("need at least one attribute with at least one value");
        }
        if self.n_items == 0 || self.n_users == 0 {
            return bad("n_items and n_users must be positive");
        }
        if !(self.concentration > 0.0) || !(0.0..=1.0).contains(&self.secondary_match) {
            return bad("concentration must be > 0 and secondary_match in [0, 1]");
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad("need 2 <= min_len <= max_len");
        }
        Ok(())
    }

    pub fn k_true(&self) -> usize {
        self.attribute_sizes.len()
    }
}

/// A synthetic user's ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user: u32,
    /// Intent weights over attributes (on the simplex).
    pub mixture: Vec<f64>,
    /// Preferred value per attribute.
    pub preferred: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub interactions: Vec<RawInteraction>,
    /// Titles and attributes; tokens are filled in by [`DatasetBundle::prepare`].
    pub catalog: Catalog,
    pub profiles: Vec<UserProfile>,
    /// Unnormalized item popularity, indexed by item id.
    pub popularity: Vec<f64>,
}

const ATTRIBUTE_PREFIXES: [&str; 3] = ["cat", "sty", "prc"];

fn attribute_word(attr: usize, value: usize) -> String {
    match ATTRIBUTE_PREFIXES.get(attr) {
        Some(p) => format!("{p}{value}"),
        None => format!("a{attr}v{value}"),
    }
}

/// Probability that a user picks each item next (indexed by item id).
///
/// An active attribute `k` is drawn from the mixture; the item must carry
/// the preferred value of `k`, every other attribute carries the preferred
/// value with extra probability `secondary_match`, and the item inside its
/// attribute tuple is chosen by popularity.
pub fn user_item_distribution(profile: &UserProfile, corpus: &SyntheticCorpus) -> Vec<f64> {
    let cfg = &corpus.config;
    let items = corpus.catalog.items();
    let attrs: Vec<&Vec<usize>> = items.iter().map(|r| r.attributes.as_ref().expect("synthetic attributes")).collect();
    let mut tuple_weight: BTreeMap<&Vec<usize>, f64> = BTreeMap::new();
    for (r, a) in items.iter().zip(&attrs) {
        *tuple_weight.entry(a).or_default() += corpus.popularity[r.item_id as usize];
    }
    let mut probs = vec![0.0; items.len()];
    for (k, &pi) in profile.mixture.iter().enumerate() {
        let tuple_prob = |t: &[usize]| -> f64 {
            t.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let hit = v == profile.preferred[j];
                    if j == k {
                        f64::from(u8::from(hit))
                    } else {
                        let q = cfg.secondary_match;
                        (1.0 - q) / cfg.attribute_sizes[j] as f64 + if hit { q } else { 0.0 }
                    }
                })
                .product()
        };
        let z: f64 = tuple_weight.keys().map(|t| tuple_prob(t)).sum();
        if z == 0.0 {
            continue;
        }
        for (i, (r, a)) in items.iter().zip(&attrs).enumerate() {
            let within = corpus.popularity[r.item_id as usize] / tuple_weight[a];
            probs[i] += pi * tuple_prob(a) / z * within;
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter().map(|p| p / total).collect()
}

/// Draws a corpus; identical config and seed give an identical corpus.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let rng = Rng::new(cfg.seed);
    let k_true = cfg.k_true();

    // attribute tuples assigned round-robin over a shuffled item order
    let tuples: Vec<Vec<usize>> = cfg.attribute_sizes.iter().fold(vec![vec![]], |acc, &size| {
        acc.into_iter()
            .flat_map(|t| {
                (0..size).map(move |v| {
                    let mut t = t.clone();
                    t.push(v);
                    t
                })
            })
            .collect()
    });
    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    let mut item_rng = rng.fork(1);
    item_rng.shuffle(&mut order);
    let mut items = Vec::with_capacity(cfg.n_items);
    for (slot, &item) in order.iter().enumerate() {
        let attributes = tuples[slot % tuples.len()].clone();
        let mut words: Vec<String> = attributes.iter().enumerate().map(|(a, &v)| attribute_word(a, v)).collect();
        words.push(format!("id{item}"));
        items.push(ItemRecord {
            item_id: item as u32,
            title: words.join(" "),
            tokens: Vec::new(),
            attributes: Some(attributes),
        });
    }
    let catalog = Catalog::new(items)?;
    let mut ranks: Vec<usize> = (0..cfg.n_items).collect();
    item_rng.shuffle(&mut ranks);
    let popularity: Vec<f64> = ranks
        .iter()
        .map(|&r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent))
        .collect();

    let mut corpus = SyntheticCorpus {
        config: cfg.clone(),
        interactions: Vec::new(),
        catalog,
        profiles: Vec::new(),
        popularity,
    };
    let gamma = Gamma::new(cfg.concentration, 1.0).map_err(|e| FlrError::Config(e.to_string()))?;
    let mut user_rng = rng.fork(2);
    let epoch = 1_600_000_000i64;
    for u in 0..cfg.n_users {
        let mut g: Vec<f64> = (0..k_true).map(|_| gamma.sample(&mut user_rng).max(1e-300)).collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|x| *x /= s);
        let profile = UserProfile {
            user: u as u32,
            mixture: g,
            preferred: cfg.attribute_sizes.iter().map(|&n| user_rng.below(n)).collect(),
        };
        let probs = user_item_distribution(&profile, &corpus);
        let len = cfg.min_len + user_rng.below(cfg.max_len - cfg.min_len + 1);
        let mut ts = epoch + user_rng.below(180 * 86_400) as i64;
        for _ in 0..len {
            ts += 3_600 + user_rng.below(3 * 86_400) as i64;
            let idx = user_rng.categorical(&probs);
            let rec = &corpus.catalog.items()[idx];
            corpus.interactions.push(RawInteraction {
                user: profile.user,
                item: rec.item_id,
                ts,
                title: rec.title.clone(),
            });
        }
        corpus.profiles.push(profile);
    }
    Ok(corpus)
}
