mod common;

use common::*;
use ndarray::{concatenate, Array1, Array2, Axis};
use ptdnn::discovery::GranularityConfig;
use ptdnn::hmm::{
    baum_welch_update, force_align, forward_log_likelihood, init_flat_start, token_loop_decode, viterbi_decode,
    GaussianState, TokenHmm, TokenHmmSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn decoders_match_enumeration() {
    let (mismatches, worst) = decoder_oracle_run(60, 11);
    assert_eq!(mismatches, 0, "worst score error {worst:e}");
}

#[test]
fn three_state_seven_frame_viterbi_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let h = random_token(&mut rng, 0, 3, 2);
        let frames = random_frames(&mut rng, 7, 2);
        let oracle = brute_force_single(&h, &frames).unwrap();
        let got = viterbi_decode(&h, frames.view()).unwrap();
        let states: Vec<usize> = got.frames.iter().map(|&(_, k)| k).collect();
        assert_eq!(states, oracle.best_path);
        assert!((got.total_log_prob - oracle.best_score).abs() < 1e-9);
        assert!(states.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn forward_is_log_sum_over_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let m = rng.random_range(1..=3);
        let h = random_token(&mut rng, 0, m, 2);
        let t_len = rng.random_range(m..=6);
        let frames = random_frames(&mut rng, t_len, 2);
        let oracle = brute_force_single(&h, &frames).unwrap();
        let fwd = forward_log_likelihood(&h, frames.view()).unwrap();
        assert!((fwd - oracle.log_total).abs() < 1e-9, "{fwd} vs {}", oracle.log_total);
        let vit = viterbi_decode(&h, frames.view()).unwrap().total_log_prob;
        assert!(fwd >= vit - 1e-12);
    }
}

#[test]
fn forced_alignment_never_beats_the_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let set = random_set(&mut rng, 3, 2, 2);
        let t_len = rng.random_range(4..=12);
        let frames = random_frames(&mut rng, t_len, 2);
        let max_tokens = t_len / 2;
        let n_seq = rng.random_range(1..=max_tokens.min(4));
        let seq: Vec<usize> = (0..n_seq).map(|_| rng.random_range(0..3)).collect();
        let aligned = force_align(&set, frames.view(), &seq).unwrap();
        let free = token_loop_decode(&set, frames.view(), 0.0).unwrap();
        assert!(aligned.total_log_prob <= free.total_log_prob + 1e-9);
        assert_eq!(aligned.token_sequence(), seq);
        assert_eq!(aligned.len(), t_len);
    }
}

#[test]
fn single_token_alignment_is_viterbi_plus_entry_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..30 {
        let set = random_set(&mut rng, 3, 3, 2);
        let frames = random_frames(&mut rng, 9, 2);
        let a = force_align(&set, frames.view(), &[1]).unwrap();
        let v = viterbi_decode(&set.models[1], frames.view()).unwrap();
        let states_a: Vec<usize> = a.frames.iter().map(|&(_, k)| k).collect();
        let states_v: Vec<usize> = v.frames.iter().map(|&(_, k)| k).collect();
        assert_eq!(states_a, states_v);
        assert!((a.total_log_prob - (v.total_log_prob - 3f64.ln())).abs() < 1e-9);
    }
}

#[test]
fn em_never_decreases_likelihood() {
    let worst = em_monotonicity_run(30, 12);
    assert!(worst <= 1e-8, "largest decrease {worst:e}");
}

#[test]
fn transition_rows_stay_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let truth = random_token(&mut rng, 0, 3, 2);
        let segs: Vec<Array2<f64>> = (0..5).map(|_| sample_segment(&mut rng, &truth)).collect();
        let views: Vec<_> = segs.iter().map(|s| s.view()).collect();
        let mut h = init_flat_start(&views, 3, 1e-3).unwrap();
        for _ in 0..4 {
            h = baum_welch_update(&h, &views, 1e-3).unwrap();
            for row in h.log_transition_matrix().iter().take(3) {
                let s: f64 = row.iter().map(|x| x.exp()).sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }
}

fn known_three_state() -> TokenHmm {
    let means = [[-3.0, 1.0], [0.0, -2.0], [3.0, 1.5]];
    let states = means
        .iter()
        .map(|m| GaussianState::new(Array1::from(m.to_vec()), Array1::from(vec![0.5, 0.8])))
        .collect();
    TokenHmm::new(0, states, &[0.7, 0.6, 0.75])
}

#[test]
fn baum_welch_recovers_generating_means() {
    let truth = known_three_state();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let segs: Vec<Array2<f64>> = (0..500).map(|_| sample_segment(&mut rng, &truth)).collect();
    let views: Vec<_> = segs.iter().map(|s| s.view()).collect();
    let mut h = init_flat_start(&views, 3, 1e-3).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..10 {
        h = baum_welch_update(&h, &views, 1e-3).unwrap();
        let ll: f64 = views.iter().map(|v| forward_log_likelihood(&h, *v).unwrap()).sum();
        assert!(ll >= prev - 1e-8);
        prev = ll;
    }
    for (got, want) in h.states.iter().zip(&truth.states) {
        let err = (&got.mean - &want.mean).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 0.2, "mean error {err}");
    }
}

#[test]
fn forced_alignment_finds_generator_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let models: Vec<TokenHmm> = (0..4)
        .map(|id| {
            let states = (0..3)
                .map(|_| {
                    GaussianState::new(
                        Array1::from_shape_fn(4, |_| rng.random_range(-3.0..3.0)),
                        Array1::from_elem(4, 0.6),
                    )
                })
                .collect();
            TokenHmm::new(id, states, &[0.6, 0.6, 0.6])
        })
        .collect();
    let set = TokenHmmSet::new(GranularityConfig { m: 3, n: 4 }, models, 1e-3).unwrap();
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..40 {
        let seq: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let parts: Vec<Array2<f64>> = seq.iter().map(|&t| sample_segment(&mut rng, &set.models[t])).collect();
        let mut bounds = Vec::new();
        let mut acc = 0;
        for p in &parts[..parts.len() - 1] {
            acc += p.nrows();
            bounds.push(acc);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let frames = concatenate(Axis(0), &views).unwrap();
        let path = force_align(&set, frames.view(), &seq).unwrap();
        for (o, &b) in path.occupancies[1..].iter().zip(&bounds) {
            total += 1;
            if o.start.abs_diff(b) <= 2 {
                hits += 1;
            }
        }
    }
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}

#[test]
fn two_means_matches_exhaustive_partition() {
    use ptdnn::discovery::kmeans;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 14;
    let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let pts = Array2::from_shape_fn((n, 3), |(i, _)| truth[i] as f64 * 10.0 + rng.random_range(-0.5..0.5));
    let r = kmeans(&pts, 2, 3).unwrap();
    // exhaustive 2-means: minimum inertia over every bipartition
    let inertia = |assign: &[usize]| -> f64 {
        let mut s = 0.0;
        for c in 0..2 {
            let idx: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if idx.is_empty() {
                return f64::INFINITY;
            }
            let sel = pts.select(Axis(0), &idx);
            let mean = sel.mean_axis(Axis(0)).unwrap();
            s += sel.rows().into_iter().map(|row| (&row - &mean).mapv(|x| x * x).sum()).sum::<f64>();
        }
        s
    };
    let mut best = (f64::INFINITY, vec![]);
    for mask in 1u32..(1 << (n - 1)) {
        let a: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let v = inertia(&a);
        if v < best.0 {
            best = (v, a);
        }
    }
    assert_eq!(best_matching_agreement(&r.assignments, &best.1, 2), 1.0);
    assert_eq!(best_matching_agreement(&r.assignments, &truth, 2), 1.0);
    assert!((r.inertia - best.0).abs() < 1e-9);
}
