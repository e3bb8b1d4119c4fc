//! Independent oracles shared by the integration and acceptance suites.
//!
//! Nothing here calls the decoders or trainers under test: paths are
//! enumerated exhaustively and scored directly from model parameters.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use ptdnn::adapt::{prepare_targets, AdaptationConfig, AdaptationData, StageReport, TargetSet, TokenSource};
use ptdnn::discovery::{discover, DiscoveryConfig, DiscoveryReport, GranularityConfig};
use ptdnn::frontend::{CorpusPartition, LabeledUtterance};
use ptdnn::harness::{build_si_system, split_adaptation_pool, synthesize_corpus, SiConfig, SiSystem, SyntheticLanguageSpec};
use ptdnn::network::{NetConfig, PtdnnModel};
use ptdnn::hmm::{GaussianState, TokenHmm, TokenHmmSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + xs.iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
}

pub fn gauss_logpdf(mean: &Array1<f64>, var: &Array1<f64>, x: ndarray::ArrayView1<f64>) -> f64 {
    let mut s = 0.0;
    for d in 0..mean.len() {
        let diff = x[d] - mean[d];
        s += -0.5 * ((2.0 * std::f64::consts::PI * var[d]).ln() + diff * diff / var[d]);
    }
    s
}

pub fn random_token(rng: &mut ChaCha8Rng, id: usize, m: usize, dim: usize) -> TokenHmm {
    let states = (0..m)
        .map(|_| {
            GaussianState::new(
                Array1::from_shape_fn(dim, |_| rng.random_range(-2.0..2.0)),
                Array1::from_shape_fn(dim, |_| rng.random_range(0.3..2.0)),
            )
        })
        .collect();
    let probs: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
    TokenHmm::new(id, states, &probs)
}

pub fn random_frames(rng: &mut ChaCha8Rng, t_len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((t_len, dim), |_| rng.random_range(-2.5..2.5))
}

pub fn random_set(rng: &mut ChaCha8Rng, n_tokens: usize, m: usize, dim: usize) -> TokenHmmSet {
    let models = (0..n_tokens).map(|i| random_token(rng, i, m, dim)).collect();
    TokenHmmSet::new(GranularityConfig { m, n: n_tokens.max(2) }, models, 1e-3).unwrap()
}

/// Every monotone state sequence of length `t_len` through `m` states that
/// starts in 0 and ends in `m - 1`.
pub fn monotone_paths(m: usize, t_len: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, t_len: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == t_len {
            if *cur.last().unwrap() == m - 1 {
                out.push(cur.clone());
            }
            return;
        }
        let k = *cur.last().unwrap();
        cur.push(k);
        rec(m, t_len, cur, out);
        cur.pop();
        if k + 1 < m {
            cur.push(k + 1);
            rec(m, t_len, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if t_len == 0 || m == 0 {
        return out;
    }
    rec(m, t_len, &mut vec![0], &mut out);
    out
}

/// Scores a single-model state sequence straight from the parameters,
/// including the final exit arc.
pub fn score_single(h: &TokenHmm, frames: &Array2<f64>, path: &[usize]) -> f64 {
    let trans = h.log_transition_matrix();
    let mut s = 0.0;
    for (t, &k) in path.iter().enumerate() {
        s += gauss_logpdf(&h.states[k].mean, &h.states[k].variance, frames.row(t));
        if t > 0 {
            s += trans[path[t - 1]][k];
        }
    }
    s + trans[h.num_states() - 1][h.num_states()]
}

pub struct SingleOracle {
    pub best_path: Vec<usize>,
    pub best_score: f64,
    pub log_total: f64,
}

pub fn brute_force_single(h: &TokenHmm, frames: &Array2<f64>) -> Option<SingleOracle> {
    let paths = monotone_paths(h.num_states(), frames.nrows());
    if paths.is_empty() {
        return None;
    }
    let scores: Vec<f64> = paths.iter().map(|p| score_single(h, frames, p)).collect();
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Some(SingleOracle {
        best_path: paths[best].clone(),
        best_score: scores[best],
        log_total: log_sum_exp(&scores),
    })
}

/// Exhaustive free-loop search: every sequence of token occupancies and every
/// state alignment within them. Returns the best per-frame `(token, state)`
/// path, its occupancy starts, and its score.
pub fn brute_force_loop(set: &TokenHmmSet, frames: &Array2<f64>, entry: f64) -> Option<(Vec<(usize, usize)>, Vec<usize>, f64)> {
    struct Ctx<'a> {
        set: &'a TokenHmmSet,
        frames: &'a Array2<f64>,
        entry: f64,
        best: Option<(Vec<(usize, usize)>, Vec<usize>, f64)>,
    }
    fn emit(ctx: &Ctx, tok: usize, k: usize, t: usize) -> f64 {
        let st = &ctx.set.models[tok].states[k];
        gauss_logpdf(&st.mean, &st.variance, ctx.frames.row(t))
    }
    fn rec(ctx: &mut Ctx, path: &mut Vec<(usize, usize)>, starts: &mut Vec<usize>, score: f64) {
        let t = path.len();
        let (tok, k) = *path.last().unwrap();
        let h = &ctx.set.models[tok];
        let m = h.num_states();
        if t == ctx.frames.nrows() {
            if k == m - 1 {
                let total = score + h.log_next[k];
                if ctx.best.as_ref().is_none_or(|b| total > b.2) {
                    let ids = path.iter().map(|&(i, s)| (ctx.set.models[i].token_id, s)).collect();
                    ctx.best = Some((ids, starts.clone(), total));
                }
            }
            return;
        }
        // stay
        path.push((tok, k));
        let s = score + h.log_self[k] + emit(ctx, tok, k, t);
        rec(ctx, path, starts, s);
        path.pop();
        if k + 1 < m {
            path.push((tok, k + 1));
            let s = score + h.log_next[k] + emit(ctx, tok, k + 1, t);
            rec(ctx, path, starts, s);
            path.pop();
        } else {
            for j in 0..ctx.set.models.len() {
                path.push((j, 0));
                starts.push(t);
                let s = score + h.log_next[k] + ctx.entry + emit(ctx, j, 0, t);
                rec(ctx, path, starts, s);
                starts.pop();
                path.pop();
            }
        }
    }
    let mut ctx = Ctx {
        set,
        frames,
        entry,
        best: None,
    };
    for j in 0..set.models.len() {
        let s = entry + emit(&ctx, j, 0, 0);
        let mut path = vec![(j, 0)];
        let mut starts = vec![0];
        rec(&mut ctx, &mut path, &mut starts, s);
    }
    ctx.best
}

/// Samples a segment from a left-to-right HMM.
pub fn sample_segment(rng: &mut ChaCha8Rng, h: &TokenHmm) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let mut rows: Vec<f64> = Vec::new();
    let dim = h.dim();
    let mut t_len = 0;
    for (k, st) in h.states.iter().enumerate() {
        loop {
            for d in 0..dim {
                let n = Normal::new(st.mean[d], st.variance[d].sqrt()).unwrap();
                rows.push(n.sample(rng));
            }
            t_len += 1;
            if rng.random::<f64>() >= h.log_self[k].exp() {
                break;
            }
        }
    }
    Array2::from_shape_vec((t_len, dim), rows).unwrap()
}

/// Normalized mutual information `I / sqrt(H(a) H(b))` of two labelings.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::HashMap;
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut ca: HashMap<usize, f64> = HashMap::new();
    let mut cb: HashMap<usize, f64> = HashMap::new();
    let mut cab: HashMap<(usize, usize), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
        *cab.entry((x, y)).or_default() += 1.0;
    }
    let h = |c: &HashMap<usize, f64>| -c.values().map(|v| (v / n) * (v / n).ln()).sum::<f64>();
    let mut mi = 0.0;
    for (&(x, y), &v) in &cab {
        mi += (v / n) * ((v * n) / (ca[&x] * cb[&y])).ln();
    }
    let (ha, hb) = (h(&ca), h(&cb));
    if ha <= 0.0 || hb <= 0.0 {
        return 0.0;
    }
    mi / (ha * hb).sqrt()
}

/// Best one-to-one matching agreement between two labelings by exhaustive
/// search over permutations (small label sets only).
pub fn best_matching_agreement(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p % k][t % k] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let s: usize = (0..k).map(|i| counts[i][p[i]]).sum();
        best = best.max(s);
    });
    best as f64 / pred.len() as f64
}

fn permute(v: &mut Vec<usize>, i: usize, f: &mut dyn FnMut(&[usize])) {
    if i == v.len() {
        f(v);
        return;
    }
    for j in i..v.len() {
        v.swap(i, j);
        permute(v, i + 1, f);
        v.swap(i, j);
    }
}

/// Runs `cases` random decoder instances (up to 3 tokens, 3 states, 8 frames)
/// against exhaustive enumeration. Returns the number of mismatches and the
/// largest absolute score error seen.
pub fn decoder_oracle_run(cases: usize, seed: u64) -> (usize, f64) {
    use ptdnn::hmm::{token_loop_decode, viterbi_decode};
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n_tok = rng.random_range(1..=3);
        let m = rng.random_range(1..=3);
        let dim = rng.random_range(1..=3);
        let t_len = rng.random_range(m..=8);
        let set = random_set(&mut rng, n_tok, m, dim);
        let frames = random_frames(&mut rng, t_len, dim);

        let h = &set.models[0];
        let oracle = brute_force_single(h, &frames).unwrap();
        let got = viterbi_decode(h, frames.view()).unwrap();
        let states: Vec<usize> = got.frames.iter().map(|&(_, k)| k).collect();
        worst = worst.max((got.total_log_prob - oracle.best_score).abs());
        if states != oracle.best_path || (got.total_log_prob - oracle.best_score).abs() > 1e-9 {
            mismatches += 1;
        }

        let penalty = rng.random_range(0.0..2.0);
        let entry = -(set.len() as f64).ln() - penalty;
        let (path, starts, score) = brute_force_loop(&set, &frames, entry).unwrap();
        let got = token_loop_decode(&set, frames.view(), penalty).unwrap();
        let got_starts: Vec<usize> = got.occupancies.iter().map(|o| o.start).collect();
        worst = worst.max((got.total_log_prob - score).abs());
        if got.frames != path || got_starts != starts || (got.total_log_prob - score).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    (mismatches, worst)
}

/// Runs `runs` random Baum-Welch updates and returns the largest decrease in
/// total forward log-likelihood (negative when every run improved).
pub fn em_monotonicity_run(runs: usize, seed: u64) -> f64 {
    use ptdnn::hmm::{baum_welch_update, forward_log_likelihood};
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..runs {
        let m = rng.random_range(1..=4);
        let dim = rng.random_range(1..=3);
        let truth = random_token(&mut rng, 0, m, dim);
        let start = random_token(&mut rng, 0, m, dim);
        let n_seg = rng.random_range(2..=8);
        let segs: Vec<Array2<f64>> = (0..n_seg).map(|_| sample_segment(&mut rng, &truth)).collect();
        let views: Vec<_> = segs.iter().map(|s| s.view()).collect();
        let ll = |h: &TokenHmm| -> f64 { views.iter().map(|v| forward_log_likelihood(h, *v).unwrap()).sum() };
        let mut h = start;
        for _ in 0..3 {
            let before = ll(&h);
            h = baum_welch_update(&h, &views, 1e-8).unwrap();
            let after = ll(&h);
            worst = worst.max(before - after);
        }
    }
    worst
}

/// Frame accuracy of the Bayes classifier built from the generator's own
/// parameters: undo the speaker's CMVN and affine map, then pick the state
/// whose Gaussian scores highest.
pub fn bayes_frame_accuracy(c: &ptdnn::harness::SyntheticCorpus, speaker: &ptdnn::harness::SpeakerCorpus) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let d = c.spec.dim;
    let a = DMatrix::from_fn(d, d, |i, j| speaker.transform.a[[i, j]]);
    let a_inv = a.try_inverse().expect("speaker transform must be invertible");
    let (mut hit, mut n) = (0usize, 0usize);
    for u in &speaker.utterances {
        for (t, &s) in u.states.iter().enumerate() {
            let x = DVector::from_fn(d, |j, _| {
                u.features.frames[[t, j]] * speaker.cmvn.variance[j].sqrt() + speaker.cmvn.mean[j] - speaker.transform.b[j]
            });
            let y = &a_inv * x;
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for k in 0..c.language.means.nrows() {
                let ll: f64 = (0..d)
                    .map(|j| {
                        let v = c.language.variances[[k, j]];
                        let z = y[j] - c.language.means[[k, j]];
                        -0.5 * (z * z / v + v.ln())
                    })
                    .sum();
                if ll > best.0 {
                    best = (ll, k);
                }
            }
            hit += usize::from(best.1 == s);
            n += 1;
        }
    }
    hit as f64 / n as f64
}

/// Frame indices where the phone changes, from per-frame phone labels.
pub fn phone_boundaries(phones: &[usize]) -> Vec<usize> {
    (1..phones.len()).filter(|&t| phones[t] != phones[t - 1]).collect()
}

pub struct AdaptFixture {
    pub si: SiSystem,
    pub tokens: DiscoveryReport,
    pub targets: TargetSet,
    pub data: AdaptationData,
}

/// One synthetic speaker with a tiny SI system, (3,4) tokens, 6 labeled and
/// 18 unlabeled utterances.
pub fn adaptation_fixture() -> AdaptFixture {
    let spec = SyntheticLanguageSpec {
        n_si_speakers: 2,
        si_utterances: 30,
        n_adapt_speakers: 1,
        adapt_utterances: 24,
        dev_utterances: 2,
        test_utterances: 2,
        ..Default::default()
    };
    let corpus = synthesize_corpus(&spec, 5).unwrap();
    let utts: Vec<LabeledUtterance> = corpus
        .si_speakers
        .iter()
        .flat_map(|s| &s.utterances)
        .map(|u| LabeledUtterance {
            features: u.features.clone(),
            transcript: u.transcript.clone(),
        })
        .collect();
    let si_cfg = SiConfig {
        net: NetConfig {
            hidden: vec![16, 16],
            ..NetConfig::desk_scale()
        },
        epochs: 3,
        ..Default::default()
    };
    let si = build_si_system(&utts, spec.n_phones, &si_cfg).unwrap();
    let (labeled, unlabeled) = split_adaptation_pool(&corpus.adapt_speakers[0], 24, 6, 18, 1).unwrap();
    let partition = CorpusPartition {
        labeled,
        unlabeled,
        ..Default::default()
    };
    let features = partition.adaptation_features();
    let tokens = discover(&features, &DiscoveryConfig::new(GranularityConfig { m: 3, n: 4 }, 2)).unwrap();
    let sources = [TokenSource {
        set: &tokens.models,
        labels: Some(&tokens.labels),
    }];
    let targets = prepare_targets(&si.phone_hmms, &sources, &partition).unwrap();
    let data = AdaptationData::assemble(&features, &targets, 4, 4).unwrap();
    AdaptFixture {
        si,
        tokens,
        targets,
        data,
    }
}

pub fn small_adaptation_config() -> AdaptationConfig {
    AdaptationConfig {
        stage1_epochs: 2,
        stage1_lr: 0.05,
        stage2_epochs: 2,
        stage2_lr: 0.01,
        stage3_epochs: 2,
        stage3_lr: 0.01,
        baseline_epochs: 2,
        baseline_lr: 0.01,
        batch_size: 4,
        code_dim: 5,
        ..Default::default()
    }
}

/// Frozen groups are byte-identical, trainable ones moved.
pub fn assert_freeze_ledger(before: &PtdnnModel, after: &PtdnnModel, report: &StageReport) {
    let b = before.snapshot();
    let a = after.snapshot();
    for (g, bytes) in &a {
        let trainable = report.trainable.contains(g);
        match b.get(g) {
            Some(old) if !trainable => assert_eq!(old, bytes, "{}: frozen group {g} changed", report.stage),
            Some(old) => assert_ne!(old, bytes, "{}: trainable group {g} did not move", report.stage),
            None => assert!(trainable, "{}: new group {g} is frozen", report.stage),
        }
        let norm = report.change_norms.get(g).copied().unwrap_or(0.0);
        assert_eq!(norm > 0.0, trainable, "{}: change norm for {g}", report.stage);
    }
}

