use mcrpl::data::{make_synthetic, peaked_transition, Corpus, DomainId, PaddedBatch, SequenceRecord, SyntheticDomain, SyntheticSpec};
use mcrpl::model::{Group, Model, PromptMode};
use mcrpl::training::{
    finetune, loss_breakdown, prepare, pretrain, run_variant, FreezeStrategy, GroupMask, RunConfig, Stage, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SyntheticSpec {
        genres: 3,
        transition: peaked_transition(3, 0.8, &mut rng),
        domains: vec![
            SyntheticDomain { name: "target".into(), items: 18, sequences: 60, min_len: 8, max_len: 12 },
            SyntheticDomain { name: "books".into(), items: 24, sequences: 40, min_len: 10, max_len: 14 },
            SyntheticDomain { name: "films".into(), items: 21, sequences: 30, min_len: 10, max_len: 14 },
        ],
        sparsify: (5, 8),
        seed,
    };
    make_synthetic(&spec).unwrap().corpus
}

fn config(seed: u64) -> RunConfig {
    RunConfig {
        d: 8,
        d_ff: 8,
        l_p: 2,
        lr: 0.01,
        batch_size: 16,
        pretrain_epochs: 2,
        finetune_epochs: 3,
        patience: 0,
        warmup_epochs: 2,
        source_len: 12,
        seed,
        ..RunConfig::default()
    }
}

fn pretrained(c: &Corpus, cfg: &RunConfig) -> Model {
    let data = prepare(c, cfg).unwrap();
    let mut model = Model::init(cfg.model_config(data.vocab_size, PromptMode::Attention), cfg.seed).unwrap();
    let out = pretrain(&mut model, &data, cfg, &mut |_| {}).unwrap();
    model.params = out.best;
    model
}

#[test]
fn frozen_groups_stay_bit_identical_for_every_strategy() {
    let c = corpus(1);
    let cfg = config(1);
    let base = pretrained(&c, &cfg);
    let data = prepare(&c, &cfg).unwrap();
    for id in 1..=4 {
        for tie_strict in [false, true] {
            let strategy = FreezeStrategy::new(id, tie_strict).unwrap();
            let mask = strategy.mask();
            let mut model = base.clone();
            let out = finetune(&mut model, &data, &cfg, mask, false, 3, &mut |_| {}).unwrap();
            for (before, after) in base.params.iter().zip(out.best.iter()) {
                if mask.contains(before.group) {
                    assert_ne!(before.tensor, after.tensor, "strategy {id}: {} did not move", before.name);
                } else {
                    assert_eq!(before.tensor, after.tensor, "strategy {id}: {} moved", before.name);
                }
            }
        }
    }
}

#[test]
fn strategy_masks() {
    use Group::*;
    let trained = |id, strict| {
        let m = FreezeStrategy::new(id, strict).unwrap().mask();
        Group::ALL.into_iter().filter(|&g| m.contains(g)).collect::<Vec<_>>()
    };
    assert_eq!(trained(1, false), vec![PromptSpecific, OutBias]);
    assert_eq!(trained(1, true), vec![PromptSpecific]);
    assert_eq!(trained(2, false), vec![PromptAgnostic, PromptSpecific, OutBias]);
    assert_eq!(trained(3, false), vec![PromptSpecific, PromptAttn, Encoder]);
    assert_eq!(trained(4, false), Group::ALL.to_vec());
    assert_eq!(trained(5, false), trained(1, false));
    assert!(FreezeStrategy::new(5, false).unwrap().alternates());
    assert!(FreezeStrategy::new(0, false).is_err());
    assert!(FreezeStrategy::new(6, false).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let c = corpus(2);
    let cfg = RunConfig { lr: 0.0, ..config(2) };
    let data = prepare(&c, &cfg).unwrap();
    let mut model = Model::init(cfg.model_config(data.vocab_size, PromptMode::Attention), 2).unwrap();
    let init = model.params.clone();
    let out = pretrain(&mut model, &data, &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.best, init);
    assert_eq!(model.params, init);
}

#[test]
fn identical_seeds_replay_bit_identically() {
    let c = corpus(3);
    let cfg = config(3);
    let a = run_variant(&c, &cfg, &Variant::Full, &mut |_| {}).unwrap();
    let b = run_variant(&c, &cfg, &Variant::Full, &mut |_| {}).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.test, b.test);
    let other = run_variant(&c, &config(4), &Variant::Full, &mut |_| {}).unwrap();
    assert_ne!(a.model.params, other.model.params);
}

#[test]
fn logged_total_is_task_plus_weighted_orth() {
    let c = corpus(5);
    let cfg = config(5);
    let out = run_variant(&c, &cfg, &Variant::Full, &mut |_| {}).unwrap();
    for log in &out.logs {
        let l = &log.losses;
        match log.stage {
            Stage::Pretrain => {
                assert_eq!(l.orth, None);
                assert_eq!(l.total, l.task);
            }
            Stage::Finetune => {
                let orth = l.orth.expect("prompt banks present");
                assert!((l.total - (l.task + cfg.lambda * orth)).abs() < 1e-6, "{l:?}");
            }
        }
    }
}

#[test]
fn zero_lambda_total_equals_task_exactly() {
    let c = corpus(6);
    let cfg = RunConfig { lambda: 0.0, ..config(6) };
    let out = run_variant(&c, &cfg, &Variant::Full, &mut |_| {}).unwrap();
    for log in out.logs.iter().filter(|l| l.stage == Stage::Finetune) {
        assert_eq!(log.losses.total, log.losses.task);
        assert!(log.losses.orth.unwrap() > 0.0);
    }
    let no_orth = run_variant(&c, &config(6), &Variant::NoOrth, &mut |_| {}).unwrap();
    assert_eq!(no_orth.logs, out.logs);
}

#[test]
fn loss_breakdown_decomposes_exactly() {
    let c = corpus(7);
    let cfg = config(7);
    let data = prepare(&c, &cfg).unwrap();
    let model = pretrained(&c, &cfg);
    let recs: Vec<&SequenceRecord> = data.target_train.iter().take(8).collect();
    let batch = PaddedBatch::from_records(&recs, cfg.target_len);
    let ft = loss_breakdown(&model, &batch, Stage::Finetune, 0.05, &data).unwrap();
    assert_eq!(ft.orth, Some(model.orthogonal_loss()));
    assert_eq!(ft.total, ft.task + 0.05 * model.orthogonal_loss());
    let zero = loss_breakdown(&model, &batch, Stage::Finetune, 0.0, &data).unwrap();
    assert_eq!(zero.total, zero.task);
    let pre = loss_breakdown(&model, &batch, Stage::Pretrain, 0.05, &data).unwrap();
    assert_eq!(pre.orth, None);
    assert_eq!(pre.total, pre.task);
}

#[test]
fn warmup_learning_rate_is_logged_per_epoch() {
    let c = corpus(8);
    let cfg = RunConfig { finetune_epochs: 4, warmup_epochs: 3, ..config(8) };
    let out = run_variant(&c, &cfg, &Variant::Full, &mut |_| {}).unwrap();
    let lrs: Vec<f64> = out.logs.iter().filter(|l| l.stage == Stage::Finetune).map(|l| l.lr).collect();
    let want: Vec<f64> = (1..=4).map(|e| cfg.lr * (e as f64 / 3.0).min(1.0)).collect();
    assert_eq!(lrs, want);
    assert!(out.logs.iter().filter(|l| l.stage == Stage::Pretrain).all(|l| l.lr == cfg.lr));
}

#[test]
fn strategy_four_on_one_domain_matches_no_source() {
    let c = corpus(9);
    let cfg = RunConfig { lambda: 0.0, strategy: 4, ..config(9) };
    let reference = run_variant(&c, &cfg, &Variant::NoSource, &mut |_| {}).unwrap();
    let data = prepare(&c, &cfg).unwrap().without_sources();
    let mut model = Model::init(cfg.model_config(data.vocab_size, PromptMode::Attention), cfg.seed).unwrap();
    let epochs = cfg.pretrain_epochs + cfg.finetune_epochs;
    let out = finetune(&mut model, &data, &cfg, cfg.strategy().mask(), false, epochs, &mut |_| {}).unwrap();
    assert_eq!(out.logs, reference.logs);
    assert_eq!(out.best, reference.model.params);
}

#[test]
fn no_source_never_touches_source_item_rows() {
    let c = corpus(10);
    let cfg = config(10);
    let out = run_variant(&c, &cfg, &Variant::NoSource, &mut |_| {}).unwrap();
    let d = cfg.d;
    let before = out.init.get("item_emb.table").unwrap();
    let after = out.model.params.get("item_emb.table").unwrap();
    let target = c.vocab.target_range();
    for id in 1..c.vocab.size() {
        let same = before.row(id) == after.row(id);
        assert_eq!(same, !target.contains(&(id as u32)), "item {id}");
    }
    assert_eq!(before.values().len(), c.vocab.size() * d);
    assert!(out.pretrained.is_none());
}

#[test]
fn prompt_free_init_differs_only_in_prompt_groups() {
    let c = corpus(11);
    let cfg = config(11);
    let full = run_variant(&c, &RunConfig { pretrain_epochs: 0, finetune_epochs: 0, ..cfg.clone() }, &Variant::Full, &mut |_| {});
    let full = full.unwrap().init;
    let bare = run_variant(&c, &RunConfig { pretrain_epochs: 0, finetune_epochs: 0, ..cfg }, &Variant::NoPrompt, &mut |_| {});
    let bare = bare.unwrap().init;
    for p in full.iter() {
        match bare.get(&p.name) {
            Some(t) => assert_eq!(t, &p.tensor, "{}", p.name),
            None => assert!(p.group.is_prompt(), "{} missing", p.name),
        }
    }
    assert!(bare.iter().all(|p| !p.group.is_prompt()));
}

#[test]
fn one_epoch_lowers_the_training_loss_on_a_toy_corpus() {
    let mut wins = 0;
    for seed in 0..5 {
        let c = corpus(20 + seed);
        let recs: Vec<SequenceRecord> = c.records_in(DomainId::TARGET).take(10).cloned().collect();
        assert_eq!(recs.len(), 10);
        let toy = Corpus { vocab: c.vocab.clone(), records: recs };
        let cfg = RunConfig { batch_size: 4, pretrain_epochs: 1, split: (1.0, 0.0, 0.0), ..config(seed) };
        let data = prepare(&toy, &cfg).unwrap();
        let mut model = Model::init(cfg.model_config(data.vocab_size, PromptMode::Attention), seed).unwrap();
        let batch = PaddedBatch::from_records(&data.target_train.iter().collect::<Vec<_>>(), cfg.target_len);
        let before = loss_breakdown(&model, &batch, Stage::Pretrain, 0.0, &data).unwrap().task;
        pretrain(&mut model, &data, &cfg, &mut |_| {}).unwrap();
        let after = loss_breakdown(&model, &batch, Stage::Pretrain, 0.0, &data).unwrap().task;
        if after < before {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{wins} of 5");
}

#[test]
fn alternating_strategy_interleaves_pretrain_epochs() {
    let c = corpus(12);
    let cfg = RunConfig { strategy: 5, ..config(12) };
    let out = run_variant(&c, &cfg, &Variant::Full, &mut |_| {}).unwrap();
    let stages: Vec<Stage> = out.logs.iter().skip(cfg.pretrain_epochs).map(|l| l.stage).collect();
    let want: Vec<Stage> = (0..cfg.finetune_epochs).flat_map(|_| [Stage::Pretrain, Stage::Finetune]).collect();
    assert_eq!(stages, want);
}

#[test]
fn dropping_a_source_keeps_the_vocabulary() {
    let c = corpus(13);
    let cfg = config(13);
    let out = run_variant(&c, &cfg, &"drop_source:books".parse().unwrap(), &mut |_| {}).unwrap();
    assert_eq!(out.model.cfg.vocab_size, c.vocab.size());
    let books = c.vocab.range(c.vocab.domain_by_name("books").unwrap());
    let before = out.init.get("item_emb.table").unwrap();
    let after = out.pretrained.as_ref().unwrap().get("item_emb.table").unwrap();
    // dropped items only move through the all-items softmax, never as inputs
    assert!(books.clone().any(|id| before.row(id as usize) != after.row(id as usize)));
    assert!(run_variant(&c, &cfg, &"drop_source:target".parse().unwrap(), &mut |_| {}).is_err());
    assert!(run_variant(&c, &cfg, &"drop_source:nope".parse().unwrap(), &mut |_| {}).is_err());
}

#[test]
fn variant_names_round_trip() {
    for name in ["full", "no_orth", "no_source", "no_prompt", "no_two_stage", "no_prompt_attention", "drop_source:films"] {
        let v: Variant = name.parse().unwrap();
        assert_eq!(v.to_string(), name);
    }
    assert!("drop_source:".parse::<Variant>().is_err());
    assert!("everything".parse::<Variant>().is_err());
}

#[test]
fn config_validation_rejects_bad_values() {
    assert!(RunConfig { lambda: 1.5, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig { strategy: 9, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig { batch_size: 0, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig { lr: f64::NAN, ..RunConfig::default() }.validate().is_err());
    assert!(RunConfig::default().validate().is_ok());
    assert!(GroupMask::none().with(Group::Encoder, true).contains(Group::Encoder));
}
