use super::common::pair_count_auc;
use dfar::evaluation::{auc, bucket_by_length, gauc, mrr_at_k, ndcg_at_k, single_hit_ranking, DEFAULT_EDGES};
use dfar::rng::Rng;

pub fn auc_equals_pair_counting_for_every_labeling_up_to_twelve() {
    let mut rng = Rng::new(3);
    for n in 1..=12usize {
        // a few score vectors per size, drawn from a small set so ties occur
        for _ in 0..3 {
            let scores: Vec<f32> = (0..n).map(|_| rng.below(5) as f32 * 0.25).collect();
            for mask in 0u32..(1 << n) {
                let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
                assert_eq!(auc(&scores, &labels), pair_count_auc(&scores, &labels), "{scores:?} {labels:?}");
            }
        }
    }
}

pub fn auc_small_cases() {
    assert_eq!(auc(&[0.9, 0.2], &[1, 0]), Some(1.0));
    assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]), Some(0.5));
    assert_eq!(auc(&[0.1, 0.2], &[1, 1]), None);
    let mut rng = Rng::new(8);
    let s: Vec<f32> = (0..20).map(|_| rng.uniform() as f32).collect();
    let y: Vec<u8> = (0..20).map(|_| rng.below(2) as u8).collect();
    assert_eq!(auc(&s, &y), pair_count_auc(&s, &y));
}

pub fn gauc_is_count_weighted_mean() {
    let users = [0, 0, 1, 1];
    let scores = [0.9, 0.1, 0.5, 0.5];
    let labels = [1, 0, 1, 0];
    assert_eq!(gauc(&users, &scores, &labels), Some(0.75));
    // a single-class user is excluded from both sums
    let users = [0, 0, 0, 1, 1, 2];
    let scores = [0.9, 0.1, 0.2, 0.3, 0.4, 0.7];
    let labels = [1, 0, 0, 1, 1, 0];
    assert_eq!(gauc(&users, &scores, &labels), auc(&scores[..3], &labels[..3]));
    assert_eq!(gauc(&[4, 4], &[0.1, 0.2], &[1, 1]), None);

    let mut rng = Rng::new(21);
    let n = 300;
    let users: Vec<usize> = (0..n).map(|_| rng.below(12)).collect();
    let scores: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for u in 0..12 {
        let idx: Vec<usize> = (0..n).filter(|&i| users[i] == u).collect();
        let s: Vec<f32> = idx.iter().map(|&i| scores[i]).collect();
        let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        if let Some(a) = pair_count_auc(&s, &y) {
            num += a * idx.len() as f64;
            den += idx.len() as f64;
        }
    }
    let got = gauc(&users, &scores, &labels).unwrap();
    assert!((got - num / den).abs() < 1e-12);
}

pub fn gauc_of_one_user_is_auc() {
    let mut rng = Rng::new(22);
    let s: Vec<f32> = (0..40).map(|_| rng.uniform() as f32).collect();
    let y: Vec<u8> = (0..40).map(|_| rng.below(2) as u8).collect();
    assert_eq!(gauc(&[9; 40], &s, &y), auc(&s, &y));
}

fn direct_ndcg(rank: usize, k: usize) -> f64 {
    if rank > k {
        0.0
    } else {
        1.0 / ((rank + 1) as f64).log2()
    }
}

pub fn single_hit_ranking_metrics() {
    let at = |rank: usize| {
        let mut q = vec![false; 20];
        q[rank - 1] = true;
        q
    };
    assert!((ndcg_at_k(&[at(2)], 10).unwrap() - 0.6309).abs() < 1e-4);
    assert!((mrr_at_k(&[at(3)], 10).unwrap() - 0.3333).abs() < 1e-4);
    assert_eq!(ndcg_at_k(&[at(1)], 10).unwrap(), 1.0);
    assert_eq!(mrr_at_k(&[at(1)], 10).unwrap(), 1.0);
    for rank in 1..=20 {
        let q = [at(rank)];
        assert!((ndcg_at_k(&q, 10).unwrap() - direct_ndcg(rank, 10)).abs() < 1e-12);
        let mrr = if rank <= 10 { 1.0 / rank as f64 } else { 0.0 };
        assert!((mrr_at_k(&q, 10).unwrap() - mrr).abs() < 1e-12);
    }
    // averaged over queries
    let qs = [at(1), at(2), at(11)];
    let want = (1.0 + direct_ndcg(2, 10)) / 3.0;
    assert!((ndcg_at_k(&qs, 10).unwrap() - want).abs() < 1e-12);
    assert!(ndcg_at_k(&[], 10).is_err());
    assert!(mrr_at_k(&[vec![]], 10).is_err());
}

pub fn ties_rank_the_hit_last() {
    assert_eq!(single_hit_ranking(0.5, &[0.9, 0.5, 0.1]), vec![false, false, true, false]);
}

pub fn multi_hit_ndcg() {
    let q = vec![true, false, true];
    let dcg = 1.0 + 1.0 / 4f64.log2();
    let idcg = 1.0 + 1.0 / 3f64.log2();
    assert!((ndcg_at_k(&[q], 10).unwrap() - dcg / idcg).abs() < 1e-12);
    assert_eq!(ndcg_at_k(&[vec![true, true, false]], 10).unwrap(), 1.0);
}

pub fn buckets_partition_examples() {
    let mut rng = Rng::new(5);
    let lengths: Vec<usize> = (0..500).map(|_| rng.below(150)).collect();
    let scores: Vec<f32> = (0..500).map(|_| rng.uniform() as f32).collect();
    let labels: Vec<u8> = (0..500).map(|_| rng.below(2) as u8).collect();
    let buckets = bucket_by_length(&lengths, &scores, &labels, &DEFAULT_EDGES).unwrap();
    assert_eq!(buckets.len(), DEFAULT_EDGES.len() + 1);
    assert_eq!(buckets.iter().map(|b| b.count).sum::<usize>(), 500);
    let same = bucket_by_length(&[7; 10], &[0.5; 10], &[1, 0, 1, 0, 1, 0, 1, 0, 1, 0], &DEFAULT_EDGES).unwrap();
    assert_eq!(same.iter().filter(|b| b.count > 0).count(), 1);
    assert!(bucket_by_length(&[1], &[0.1], &[1], &[5, 5]).is_err());
}
