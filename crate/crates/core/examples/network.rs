//! A two-head network on a toy problem: phoneme-state and token-state heads
//! over a shared stack, trained jointly, then written to and read back from
//! a PTDN file.
//!
//! cargo run --release --example network

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptdnn::network::{
    argmax_rows, backprop, load_model, save_model, token_head_name, HeadTargets, LossMode, LossWeights, NetConfig,
    PtdnnModel, Sgd, PHONEME_HEAD,
};

fn main() -> ptdnn::Result<()> {
    // 3 frames of context, 4 dims per frame; 6 phone states, 4 token states
    let cfg = NetConfig {
        input_dim: 12,
        block_dim: 4,
        hidden: vec![24, 24],
        ..NetConfig::default()
    };
    let mut model = PtdnnModel::new(cfg, 6)?;
    let token = token_head_name(2, 2);
    model.add_head(&token, 4, 1)?;
    println!("groups: {:?}", model.group_names());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames = 400;
    let phone: Vec<usize> = (0..frames).map(|_| rng.random_range(0..6)).collect();
    let x = Array2::from_shape_fn((frames, 12), |(t, j)| {
        let centre = if j % 4 == phone[t] % 4 { 1.5 } else { 0.0 } + if phone[t] >= 4 && j % 4 == 3 { 1.0 } else { 0.0 };
        centre + rng.random_range(-0.5..0.5)
    });
    // the token head sees a coarser clustering of the same frames
    let mut targets = HeadTargets::new();
    targets.insert(PHONEME_HEAD.into(), phone.clone());
    targets.insert(token.clone(), phone.iter().map(|p| p % 4).collect());

    let weights = LossWeights::new(4.0, 1.0);
    let mut sgd = Sgd::new(0.9);
    for epoch in 0..=60 {
        let mode = if epoch % 2 == 0 { LossMode::Labeled } else { LossMode::Unlabeled };
        let (loss, grads) = backprop(&model, x.view(), &targets, &weights, mode)?;
        if epoch % 10 == 0 {
            println!("epoch {epoch:>2} {mode:?}: total {:.4} {:?}", loss.total, loss.components);
        }
        sgd.step(&mut model, &grads, 0.2)?;
    }

    let post = model.forward_head(x.view(), PHONEME_HEAD)?;
    let acc = argmax_rows(&post).iter().zip(&phone).filter(|(a, b)| a == b).count() as f64 / frames as f64;
    println!("training frame accuracy {acc:.3}");

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.ptdn");
    save_model(&path, &model)?;
    let back = load_model(&path)?;
    println!("{}: {} bytes, heads {:?}", path.display(), std::fs::metadata(&path)?.len(), back.head_names());
    // the file stores f32 parameters
    let diff = (&back.forward_head(x.view(), PHONEME_HEAD)? - &post).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    println!("largest posterior change after the f32 round trip: {diff:.2e}");
    Ok(())
}
