//! Left-to-right token HMMs: sample a token sequence, decode it with the free
//! token loop, force-align it, and re-estimate one model with Baum-Welch.
//!
//! cargo run --example token_hmm

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ptdnn::discovery::GranularityConfig;
use ptdnn::hmm::{
    baum_welch_update, force_align, forward_log_likelihood, token_loop_decode, viterbi_decode, GaussianState, TokenHmm,
    TokenHmmSet,
};

const DIM: usize = 2;

fn token(id: usize, centres: &[[f64; DIM]]) -> TokenHmm {
    let states = centres
        .iter()
        .map(|c| GaussianState::new(Array1::from(c.to_vec()), Array1::from_elem(DIM, 0.3)))
        .collect();
    TokenHmm::new(id, states, &vec![0.6; centres.len()])
}

/// Four frames per state, jittered around each state mean.
fn render(h: &TokenHmm, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let noise = Normal::new(0.0, 0.3f64.sqrt()).unwrap();
    let mut rows = Vec::new();
    for s in &h.states {
        for _ in 0..4 {
            rows.extend(s.mean.iter().map(|m| m + noise.sample(rng)));
        }
    }
    Array2::from_shape_vec((rows.len() / DIM, DIM), rows).unwrap()
}

fn main() -> ptdnn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let set = TokenHmmSet::new(
        GranularityConfig { m: 3, n: 3 },
        vec![
            token(0, &[[-3.0, 0.0], [-2.0, 1.0], [-1.0, 2.0]]),
            token(1, &[[3.0, 0.0], [2.0, -1.0], [1.0, -2.0]]),
            token(2, &[[0.0, 3.0], [0.0, 0.0], [0.0, -3.0]]),
        ],
        1e-3,
    )?;

    let truth = [2, 0, 1, 2, 1];
    let pieces: Vec<Array2<f64>> = truth.iter().map(|&t| render(&set.models[t], &mut rng)).collect();
    let views: Vec<ArrayView2<f64>> = pieces.iter().map(|p| p.view()).collect();
    let frames = concatenate(Axis(0), &views).unwrap();

    let decoded = token_loop_decode(&set, frames.view(), 0.0)?;
    println!("truth   {truth:?}");
    println!("decoded {:?}  (score {:.2})", decoded.token_sequence(), decoded.total_log_prob);
    for o in &decoded.occupancies {
        println!("  token {} frames {}..{}", o.token_id, o.start, o.end);
    }

    let forced = force_align(&set, frames.view(), &truth)?;
    println!("forced alignment score {:.2}, states {:?}", forced.total_log_prob, &forced.state_targets(3)[..12]);

    let single = viterbi_decode(&set.models[2], pieces[0].view())?;
    println!("single-model viterbi on the first segment: {:?}", single.frames.iter().map(|f| f.1).collect::<Vec<_>>());

    // one model, re-estimated from its own segments starting from a bad guess
    let segs: Vec<ArrayView2<f64>> = truth.iter().zip(&pieces).filter(|(t, _)| **t == 2).map(|(_, p)| p.view()).collect();
    let mut h = token(2, &[[1.0, 1.0], [1.0, 1.0], [1.0, -1.0]]);
    for it in 0..4 {
        let ll: f64 = segs.iter().map(|s| forward_log_likelihood(&h, *s).unwrap()).sum();
        println!("baum-welch iter {it}: log-likelihood {ll:.3}");
        h = baum_welch_update(&h, &segs, 1e-3)?;
    }
    Ok(())
}
