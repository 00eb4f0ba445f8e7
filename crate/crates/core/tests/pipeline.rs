use std::collections::BTreeMap;

use flr_core::config::RunConfig;
use flr_core::data::{generate_synthetic, user_item_distribution, SyntheticConfig, SyntheticCorpus};
use flr_core::eval::{ndcg_at_k, popularity_split};
use flr_core::grpo::grpo_step;
use flr_core::model::Model;
use flr_core::numerics::{Rng, Tape};
use flr_core::objectives::LossToggles;
use flr_core::pipeline::{self, GrpoState};

fn small(seed: u64) -> RunConfig {
    RunConfig::from_toml(
        "",
        &[
            format!("seed={seed}"),
            "data.synthetic.n_items=60".into(),
            "data.synthetic.n_users=120".into(),
            "train.lr=0.003".into(),
            "train.valid_limit=20".into(),
            "eval.beam.beam_width=5".into(),
            "eval.beam.top_k=5".into(),
        ],
    )
    .unwrap()
}

/// Item probabilities estimated by replaying the generative story.
fn simulated_distribution(corpus: &SyntheticCorpus, user: usize, draws: usize, rng: &mut Rng) -> Vec<f64> {
    let cfg = &corpus.config;
    let profile = &corpus.profiles[user];
    let items = corpus.catalog.items();
    let mut by_tuple: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_tuple.entry(it.attributes.clone().unwrap()).or_default().push(i);
    }
    let mut counts = vec![0.0; items.len()];
    for _ in 0..draws {
        let k = rng.categorical(&profile.mixture);
        // Tuples absent from the catalog are redrawn under the same intent.
        let members = loop {
            let tuple: Vec<usize> = cfg
                .attribute_sizes
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    if j == k || rng.uniform() < cfg.secondary_match {
                        profile.preferred[j]
                    } else {
                        rng.below(n)
                    }
                })
                .collect();
            if let Some(m) = by_tuple.get(&tuple) {
                break m;
            }
        };
        let weights: Vec<f64> = members.iter().map(|&i| corpus.popularity[items[i].item_id as usize]).collect();
        counts[members[rng.categorical(&weights)]] += 1.0;
    }
    counts.iter().map(|c| c / draws as f64).collect()
}

#[test]
fn generator_distribution_matches_simulation() {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_items: 50,
        n_users: 6,
        ..Default::default()
    })
    .unwrap();
    let mut rng = Rng::new(123);
    for user in 0..corpus.profiles.len() {
        let exact = user_item_distribution(&corpus.profiles[user], &corpus);
        let sim = simulated_distribution(&corpus, user, 100_000, &mut rng);
        for (i, (a, b)) in exact.iter().zip(&sim).enumerate() {
            assert!((a - b).abs() < 5e-3, "user {user} item {i}: {a} vs {b}");
        }
    }
}

#[test]
fn oracle_recommender_doubles_popularity() {
    let cfg = RunConfig::from_toml("", &[]).unwrap();
    let (corpus, bundle) = pipeline::synthetic_bundle(&cfg).unwrap();
    let items = corpus.catalog.items();
    let counts = bundle.train_counts();
    let mut by_pop: Vec<u32> = counts.keys().copied().collect();
    by_pop.sort_by(|a, b| counts[b].cmp(&counts[a]).then(a.cmp(b)));
    let mut oracle = 0.0;
    let mut popular = 0.0;
    for ex in &bundle.splits.test {
        let probs = simulated_distribution(&corpus, ex.user as usize, 4_000, &mut Rng::new(ex.user as u64));
        let mut ranked: Vec<usize> = (0..items.len()).collect();
        ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let ranked: Vec<u32> = ranked.into_iter().map(|i| items[i].item_id).filter(|i| bundle.catalog.contains(*i)).collect();
        oracle += ndcg_at_k(&ranked, ex.target, 5);
        popular += ndcg_at_k(&by_pop, ex.target, 5);
    }
    let n = bundle.splits.test.len() as f64;
    let (oracle, popular) = (oracle / n, popular / n);
    assert!(oracle >= 2.0 * popular, "oracle {oracle} vs popularity {popular}");
    let (pop, unpop) = popularity_split(&counts);
    assert_eq!(pop.len() + unpop.len(), bundle.catalog.len());
}

#[test]
fn training_loss_falls_over_the_first_200_steps() {
    let mut cfg = small(1);
    cfg.train.max_steps = 200;
    cfg.train.eval_every = 1_000;
    let (_, bundle) = pipeline::synthetic_bundle(&cfg).unwrap();
    let out = pipeline::train_sft(&cfg, &bundle, false).unwrap();
    assert_eq!(out.losses.len(), 200);
    let mean = |r: &[flr_core::objectives::LossReport]| r.iter().map(|l| l.l_rec).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&out.losses[..20]), mean(&out.losses[180..]));
    assert!(tail < 0.8 * head, "l_rec {head} -> {tail}");
}

#[test]
fn disabled_regularizers_leave_only_the_recommendation_loss() {
    let cfg = small(2);
    let (_, bundle) = pipeline::synthetic_bundle(&cfg).unwrap();
    let model = pipeline::init_model(&cfg, &bundle).unwrap();
    let ex = &bundle.splits.train[0];
    let target = bundle.target_tokens(ex.target).unwrap();
    let tape = Tape::new();
    let bound = model.bind(&tape, true, true);
    let (loss, report) = pipeline::sft_loss(&bound, &ex.prompt, &target, &LossToggles::none()).unwrap();
    assert_eq!(loss.item(), report.l_rec);
    let grads = tape.backward(loss).unwrap();
    assert!(!grads.is_populated(bound.flr.log_vars));
}

fn warm_model(cfg: &RunConfig) -> (flr_core::data::DatasetBundle, Model) {
    let (_, bundle) = pipeline::synthetic_bundle(cfg).unwrap();
    let mut warm = cfg.clone();
    warm.train.max_steps = 30;
    warm.train.eval_every = 1_000;
    let model = pipeline::train_sft(&warm, &bundle, false).unwrap().model;
    (bundle, model)
}

#[test]
fn stage_two_freezes_the_backbone_and_resumes_exactly() {
    let mut cfg = small(3);
    cfg.grpo.steps = 4;
    cfg.grpo.batch_size = 2;
    cfg.grpo.group_size = 4;
    let (bundle, sft) = warm_model(&cfg);

    let full = pipeline::train_grpo(&cfg, &bundle, &sft, None, false).unwrap();
    assert_eq!(full.state.step, 4);
    assert_eq!(full.state.model.backbone_checksum(), sft.backbone_checksum());
    assert_ne!(full.state.model.flr_checksum(), sft.flr_checksum());

    let mut half = cfg.clone();
    half.grpo.steps = 2;
    let first = pipeline::train_grpo(&half, &bundle, &sft, None, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    first.state.save(&path).unwrap();
    let resumed = pipeline::train_grpo(&cfg, &bundle, &sft, Some(GrpoState::load(&path).unwrap()), false).unwrap();

    assert_eq!(resumed.state, full.state);
    let logs: Vec<_> = first.log.iter().chain(&resumed.log).collect();
    assert_eq!(logs, full.log.iter().collect::<Vec<_>>());
}

#[test]
fn single_inner_epoch_sees_unit_ratios() {
    let mut cfg = small(4);
    cfg.grpo.inner_epochs = 1;
    cfg.grpo.group_size = 4;
    cfg.grpo.batch_size = 2;
    let (bundle, sft) = warm_model(&cfg);
    let state = GrpoState::fresh(&sft, &cfg);
    let trie = bundle.catalog.trie().unwrap();
    let groups = pipeline::step_groups(&state, &sft, &trie, &bundle, &cfg).unwrap();
    let mut model = sft.clone();
    let mut opt = state.optimizer.clone();
    let report = grpo_step(&mut model, &groups, &cfg.loss, &cfg.grpo, &mut opt).unwrap();
    assert_eq!(report.rho_mean.len(), 1);
    assert!((report.rho_mean[0] - 1.0).abs() < 1e-12);
    assert_eq!(report.clip_fraction, 0.0);
    assert!(report.kl_mean.abs() < 1e-12);
}
