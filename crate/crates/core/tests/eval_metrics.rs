use mcrpl::data::{DomainId, SequenceRecord};
use mcrpl::eval::{mrr_at_k, pop_baseline, popularity, rank, rank_contiguous, rank_records, recall_at_k, EvalError, Metrics, RankedResult, RunMeta};
use mcrpl::model::{Model, ModelConfig, SeqInput};
use proptest::prelude::*;

/// Sort-based oracle: order by score descending, then id ascending.
fn sorted_rank(cands: &[(u32, i64)], truth: u32) -> usize {
    let mut v = cands.to_vec();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.iter().position(|c| c.0 == truth).unwrap() + 1
}

fn permutations(n: usize) -> Vec<Vec<i64>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, (n - 1) as i64);
            out.push(q);
        }
    }
    out
}

#[test]
fn ranks_match_sorting_for_all_orderings_up_to_six() {
    for n in 1..=6 {
        let ids: Vec<u32> = (0..n as u32).map(|i| 10 + 3 * i).collect();
        for scores in permutations(n) {
            let cands: Vec<(u32, i64)> = ids.iter().copied().zip(scores).collect();
            for &t in &ids {
                let got = rank(&cands, t).unwrap();
                assert_eq!(got.rank, sorted_rank(&cands, t));
                assert_eq!(got.candidates, n);
            }
        }
    }
}

#[test]
fn ties_break_toward_smaller_ids() {
    let cands = [(4, 1.0), (2, 1.0), (9, 2.0), (7, 1.0)];
    assert_eq!(rank(&cands, 9).unwrap().rank, 1);
    assert_eq!(rank(&cands, 2).unwrap().rank, 2);
    assert_eq!(rank(&cands, 4).unwrap().rank, 3);
    assert_eq!(rank(&cands, 7).unwrap().rank, 4);
    assert_eq!(rank_contiguous(&[0.5, 0.5, 0.5], 3..6, 5).unwrap().rank, 3);
    assert_eq!(rank(&cands, 3), Err(EvalError::NotCandidate(3)));
    assert_eq!(rank_contiguous(&[0.5, 0.5], 3..5, 5), Err(EvalError::NotCandidate(5)));
}

#[test]
fn metric_grid_fields() {
    let rs: Vec<RankedResult> = [1, 3, 4, 12, 25]
        .iter()
        .map(|&rank| RankedResult { truth: 1, rank, candidates: 30 })
        .collect();
    let m = Metrics::from_results(&rs).unwrap();
    assert_eq!(m.recall_3, 0.4);
    assert_eq!(m.recall_5, 0.6);
    assert_eq!(m.recall_10, 0.6);
    assert!((m.mrr_5 - (1.0 + 1.0 / 3.0 + 0.25) / 5.0).abs() < 1e-15);
    assert!((m.mrr_20 - (1.0 + 1.0 / 3.0 + 0.25 + 1.0 / 12.0) / 5.0).abs() < 1e-15);
    assert_eq!((m.count, m.candidates), (5, 30));
}

#[test]
fn popularity_baseline_ranks_by_training_counts() {
    let rec = |items: &[u32]| SequenceRecord::from_sequence(DomainId(0), "u".into(), items).unwrap();
    let train = [rec(&[1, 2, 2, 3]), rec(&[2, 4, 3]), rec(&[9, 2])];
    let refs: Vec<&SequenceRecord> = train.iter().collect();
    // 9 is outside the candidate range and ignored
    assert_eq!(popularity(&refs, 1..5), vec![1, 4, 2, 1]);
    let eval = [rec(&[1, 2]), rec(&[1, 3]), rec(&[1, 4])];
    let erefs: Vec<&SequenceRecord> = eval.iter().collect();
    let report = pop_baseline(&refs, &erefs, 1..5, RunMeta::default()).unwrap();
    // ranks 1, 2 and 4 (id 4 ties with id 1, which is smaller)
    assert_eq!(report.metrics.recall_3, 2.0 / 3.0);
    assert!((report.metrics.mrr_5 - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-15);
    assert_eq!(pop_baseline(&[], &erefs, 1..5, RunMeta::default()).unwrap_err(), EvalError::Empty);
}

#[test]
fn model_ranking_agrees_with_its_target_distribution() {
    let m = Model::<f32>::init(ModelConfig::new(30, 6, 2, 4), 5).unwrap();
    let recs: Vec<SequenceRecord> = (0..20u32)
        .map(|i| SequenceRecord::from_sequence(DomainId(0), format!("u{i}"), &[1 + i % 7, 3 + i % 5, 2 + i % 11, 10 + i % 9]).unwrap())
        .collect();
    let refs: Vec<&SequenceRecord> = recs.iter().collect();
    let results = rank_records(&m, &refs, 4, 1..21).unwrap();
    for (r, res) in recs.iter().zip(&results) {
        let mut ids = vec![0u32; 4 - r.items.len()];
        ids.extend(&r.items);
        let probs = m.predict_target(&SeqInput { ids: &ids, rows: 1, len: 4 }, 1..21).unwrap();
        let cands: Vec<(u32, f32)> = (1..21).map(|i| (i, probs[0][i as usize])).collect();
        assert_eq!(rank(&cands, r.target).unwrap().rank, res.rank);
    }
}

proptest! {
    #[test]
    fn ranking_ignores_candidate_order(scores in prop::collection::vec(-3i64..3, 1..9), rot in 0usize..8) {
        let cands: Vec<(u32, i64)> = scores.iter().enumerate().map(|(i, &s)| (i as u32 * 2 + 1, s)).collect();
        let mut shuffled = cands.clone();
        shuffled.rotate_left(rot % cands.len());
        shuffled.reverse();
        for &(t, _) in &cands {
            prop_assert_eq!(rank(&cands, t).unwrap(), rank(&shuffled, t).unwrap());
            prop_assert_eq!(rank(&cands, t).unwrap().rank, sorted_rank(&cands, t));
        }
        let contiguous: Vec<i64> = scores.clone();
        let n = scores.len() as u32;
        for t in 0..n {
            let plain: Vec<(u32, i64)> = contiguous.iter().enumerate().map(|(i, &s)| (i as u32 + 5, s)).collect();
            prop_assert_eq!(rank_contiguous(&contiguous, 5..5 + n, t + 5).unwrap(), rank(&plain, t + 5).unwrap());
        }
    }

    #[test]
    fn metrics_are_monotone_and_bounded(ranks in prop::collection::vec(1usize..40, 1..50)) {
        let rs: Vec<RankedResult> = ranks.iter().map(|&rank| RankedResult { truth: 1, rank, candidates: 40 }).collect();
        let mut prev = (0.0, 0.0);
        for k in 1..=40 {
            let (r, m) = (recall_at_k(&rs, k).unwrap(), mrr_at_k(&rs, k).unwrap());
            prop_assert!(r >= prev.0 && m >= prev.1);
            prop_assert!(m <= r && r <= 1.0);
            prev = (r, m);
        }
        prop_assert_eq!(prev.0, 1.0);
    }
}
