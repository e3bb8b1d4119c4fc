//! Stage runner shared by the PTDNN schedule and the baselines.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{hybrid_phone_decode, AdaptationConfig, AdaptationData, TargetSet, TrainUtterance};
use crate::error::{Error, Result};
use crate::hmm::TokenHmmSet;
use crate::network::{
    backprop, backprop_from_top, head_group, HeadTargets, LossMode, LossWeights, PtdnnModel, Sgd, FDLR_GROUP,
    PHONEME_HEAD, SHARED_GROUP, SPKCODE_GROUP,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub labeled: bool,
    pub frames: usize,
    pub total: f64,
    /// Mean cross-entropy per active head; no phoneme entry on unlabeled
    /// batches.
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Frame-weighted mean of the batch objectives.
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub trainable: Vec<String>,
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
    /// L2 norm of the parameter change per group.
    pub change_norms: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

struct StagePlan {
    name: &'static str,
    trainable: Vec<String>,
    include_unlabeled: bool,
    labeled_mode: LossMode,
    weights: LossWeights,
    epochs: usize,
    lr: f64,
    alternating: bool,
    seed: u64,
}

fn group_values(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(8)
        .map(|b| f64::from_bits(u64::from_le_bytes(b.try_into().expect("8 bytes"))))
}

fn concat_rows(parts: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Targets for the heads every utterance in the batch carries.
fn concat_targets(utts: &[&TrainUtterance]) -> HeadTargets {
    let mut out = HeadTargets::new();
    let Some(first) = utts.first() else {
        return out;
    };
    for h in first.targets.keys() {
        if utts.iter().all(|u| u.targets.contains_key(h)) {
            out.insert(h.clone(), utts.iter().flat_map(|u| u.targets[h].iter().copied()).collect());
        }
    }
    out
}

fn trunk_frozen(model: &PtdnnModel) -> bool {
    [FDLR_GROUP, SHARED_GROUP, SPKCODE_GROUP].iter().all(|g| model.is_frozen(g))
}

fn train_stage(
    model: &mut PtdnnModel,
    data: &AdaptationData,
    batch_size: usize,
    momentum: f64,
    plan: StagePlan,
) -> Result<StageReport> {
    let started = Instant::now();
    let names: Vec<&str> = plan.trainable.iter().map(String::as_str).collect();
    model.train_only(&names)?;
    let before = model.snapshot();

    let mut labeled: Vec<usize> = Vec::new();
    let mut unlabeled: Vec<usize> = Vec::new();
    for (i, u) in data.utterances.iter().enumerate() {
        if u.labeled {
            labeled.push(i);
        } else if plan.include_unlabeled {
            unlabeled.push(i);
        }
    }

    // with the trunk frozen, top activations never change
    let cached: Option<Vec<Array2<f64>>> = if trunk_frozen(model) && plan.epochs > 0 {
        let mut tops = Vec::with_capacity(data.utterances.len());
        for u in &data.utterances {
            tops.push(model.trunk(u.x.view())?.hidden.pop().expect("stack has layers"));
        }
        Some(tops)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut sgd = Sgd::new(momentum);
    let mut epochs = Vec::with_capacity(plan.epochs);
    let mut batches_log = Vec::new();
    for epoch in 0..plan.epochs {
        labeled.shuffle(&mut rng);
        unlabeled.shuffle(&mut rng);
        let mut batches: Vec<(bool, &[usize])> = labeled
            .chunks(batch_size)
            .map(|c| (true, c))
            .chain(unlabeled.chunks(batch_size).map(|c| (false, c)))
            .collect();
        if !plan.alternating {
            batches.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        let mut comp_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut frames_seen = 0usize;
        for (is_labeled, idx) in batches {
            let utts: Vec<&TrainUtterance> = idx.iter().map(|&i| &data.utterances[i]).collect();
            let targets = concat_targets(&utts);
            let mode = if is_labeled { plan.labeled_mode } else { LossMode::Unlabeled };
            let (loss, grads) = match &cached {
                Some(tops) => {
                    let parts: Vec<&Array2<f64>> = idx.iter().map(|&i| &tops[i]).collect();
                    let top = concat_rows(&parts)?;
                    backprop_from_top(model, top.view(), &targets, &plan.weights, mode)?
                }
                None => {
                    let parts: Vec<&Array2<f64>> = utts.iter().map(|u| &u.x).collect();
                    let x = concat_rows(&parts)?;
                    backprop(model, x.view(), &targets, &plan.weights, mode)?
                }
            };
            sgd.step(model, &grads, plan.lr)
                .map_err(|e| Error::NonFinite(format!("{} epoch {epoch}: {e}", plan.name)))?;
            let frames = targets.values().next().map_or(0, Vec::len);
            frames_seen += frames;
            sum += loss.total * frames as f64;
            for (h, c) in &loss.components {
                let e = comp_sum.entry(h.clone()).or_default();
                e.0 += c * frames as f64;
                e.1 += frames;
            }
            batches_log.push(BatchLog {
                epoch,
                labeled: is_labeled,
                frames,
                total: loss.total,
                components: loss.components,
            });
        }
        epochs.push(EpochLog {
            epoch,
            total: if frames_seen > 0 { sum / frames_seen as f64 } else { 0.0 },
            components: comp_sum.into_iter().map(|(h, (s, n))| (h, s / n.max(1) as f64)).collect(),
        });
        log::debug!("{} epoch {epoch}: loss {:.5}", plan.name, epochs.last().unwrap().total);
    }

    let after = model.snapshot();
    let change_norms = before
        .iter()
        .map(|(g, b)| {
            let a = &after[g];
            let n: f64 = group_values(b).zip(group_values(a)).map(|(x, y)| (x - y) * (x - y)).sum();
            (g.clone(), n.sqrt())
        })
        .collect();
    Ok(StageReport {
        stage: plan.name.to_string(),
        trainable: plan.trainable,
        epochs,
        batches: batches_log,
        change_norms,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn run(model: &mut PtdnnModel, data: &AdaptationData, cfg: &AdaptationConfig, plan: StagePlan) -> Result<StageReport> {
    cfg.validate()?;
    train_stage(model, data, cfg.batch_size, cfg.momentum, plan)
}

fn stage_seed(cfg: &AdaptationConfig, stage: u64) -> u64 {
    cfg.shuffle_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
}

fn phoneme_only(cfg: &AdaptationConfig) -> LossWeights {
    LossWeights::new(cfg.weights.phoneme, 0.0)
}

/// Copies the SI model and adds a freshly initialized head per token set.
pub fn with_token_heads(si_model: &PtdnnModel, targets: &TargetSet, seed: u64) -> Result<PtdnnModel> {
    let mut m = si_model.clone();
    for (i, (name, states)) in targets.token_heads.iter().enumerate() {
        if m.head(name).is_none() {
            m.add_head(name, *states, seed.wrapping_add(i as u64 + 1))?;
        }
    }
    Ok(m)
}

/// Trains the token heads only, on every utterance's token targets, with
/// the fDLR transform, shared stack and phoneme head frozen.
pub fn stage1_initialize(model: &PtdnnModel, data: &AdaptationData, cfg: &AdaptationConfig) -> Result<(PtdnnModel, StageReport)> {
    let heads = model.token_head_names();
    if heads.is_empty() || data.utterances.iter().all(|u| heads.iter().all(|h| !u.targets.contains_key(h))) {
        return Err(Error::Config("stage 1 needs token heads and token targets".into()));
    }
    if !model.fdlr.is_identity() {
        return Err(Error::Config("stage 1 expects an identity fDLR transform".into()));
    }
    let mut m = model.clone();
    let plan = StagePlan {
        name: "stage1",
        trainable: heads.iter().map(|h| head_group(h)).collect(),
        include_unlabeled: true,
        labeled_mode: LossMode::Unlabeled,
        weights: cfg.weights.clone(),
        epochs: cfg.stage1_epochs,
        lr: cfg.stage1_lr,
        alternating: false,
        seed: stage_seed(cfg, 1),
    };
    let report = run(&mut m, data, cfg, plan)?;
    Ok((m, report))
}

/// Joint optimization of the fDLR transform and every head. Labeled batches
/// use the phoneme-plus-token objective, unlabeled batches the token terms.
pub fn stage2_joint_optimize(model: &PtdnnModel, data: &AdaptationData, cfg: &AdaptationConfig) -> Result<(PtdnnModel, StageReport)> {
    if data.labeled_count() == 0 {
        log::warn!("stage 2 has no labeled utterances; training on token targets only");
    }
    let mut m = model.clone();
    let mut trainable = vec![FDLR_GROUP.to_string()];
    trainable.extend(m.head_names().iter().map(|h| head_group(h)));
    let plan = StagePlan {
        name: "stage2",
        trainable,
        include_unlabeled: true,
        labeled_mode: LossMode::Labeled,
        weights: cfg.weights.clone(),
        epochs: cfg.stage2_epochs,
        lr: cfg.stage2_lr,
        alternating: cfg.alternating,
        seed: stage_seed(cfg, 2),
    };
    let report = run(&mut m, data, cfg, plan)?;
    Ok((m, report))
}

/// Trains the phoneme head alone on the labeled utterances.
pub fn stage3_transfer_back(model: &PtdnnModel, data: &AdaptationData, cfg: &AdaptationConfig) -> Result<(PtdnnModel, StageReport)> {
    let mut m = model.clone();
    let mut trainable = vec![head_group(PHONEME_HEAD)];
    if cfg.stage3_train_fdlr {
        trainable.push(FDLR_GROUP.to_string());
    }
    let plan = StagePlan {
        name: "stage3",
        trainable,
        include_unlabeled: false,
        labeled_mode: LossMode::Labeled,
        weights: phoneme_only(cfg),
        epochs: cfg.stage3_epochs,
        lr: cfg.stage3_lr,
        alternating: false,
        seed: stage_seed(cfg, 3),
    };
    let report = run(&mut m, data, cfg, plan)?;
    Ok((m, report))
}

/// The full schedule from an SI model: fresh token heads, then stages 1–3.
pub fn run_ptdnn(
    si_model: &PtdnnModel,
    data: &AdaptationData,
    targets: &TargetSet,
    cfg: &AdaptationConfig,
) -> Result<(PtdnnModel, Vec<StageReport>)> {
    let m0 = with_token_heads(si_model, targets, cfg.init_seed)?;
    let (m1, r1) = stage1_initialize(&m0, data, cfg)?;
    let (m2, r2) = stage2_joint_optimize(&m1, data, cfg)?;
    let (m3, r3) = stage3_transfer_back(&m2, data, cfg)?;
    Ok((m3, vec![r1, r2, r3]))
}

/// Supervised training of the shared stack and phoneme head on labeled
/// utterances, with the fDLR transform held at its current value. Used to
/// build speaker-independent models.
pub fn train_phoneme_network(
    model: &PtdnnModel,
    data: &AdaptationData,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    momentum: f64,
    seed: u64,
) -> Result<(PtdnnModel, StageReport)> {
    if !(lr.is_finite() && lr > 0.0) || batch_size == 0 {
        return Err(Error::Config("need a positive learning rate and batch size".into()));
    }
    let mut m = model.clone();
    let weights = LossWeights::new(1.0, 0.0);
    let plan = StagePlan {
        name: "si",
        trainable: vec![SHARED_GROUP.to_string(), head_group(PHONEME_HEAD)],
        include_unlabeled: false,
        labeled_mode: LossMode::Labeled,
        weights,
        epochs,
        lr,
        alternating: false,
        seed,
    };
    let report = train_stage(&mut m, data, batch_size, momentum, plan)?;
    Ok((m, report))
}

/// Identity-initialized fDLR trained on the labeled utterances; everything
/// else frozen.
pub fn adapt_fdlr_baseline(si_model: &PtdnnModel, data: &AdaptationData, cfg: &AdaptationConfig) -> Result<(PtdnnModel, StageReport)> {
    let mut m = si_model.clone();
    let plan = StagePlan {
        name: "fdlr",
        trainable: vec![FDLR_GROUP.to_string()],
        include_unlabeled: false,
        labeled_mode: LossMode::Labeled,
        weights: phoneme_only(cfg),
        epochs: cfg.baseline_epochs,
        lr: cfg.baseline_lr,
        alternating: false,
        seed: stage_seed(cfg, 11),
    };
    let report = run(&mut m, data, cfg, plan)?;
    Ok((m, report))
}

/// A zero-initialized speaker code fed to the first hidden layer through a
/// small random projection; code and projection train on labeled data with
/// the SI parameters frozen.
pub fn adapt_speaker_code_baseline(
    si_model: &PtdnnModel,
    data: &AdaptationData,
    cfg: &AdaptationConfig,
) -> Result<(PtdnnModel, StageReport)> {
    let mut m = si_model.clone();
    m.attach_speaker_code(cfg.code_dim, cfg.init_seed.wrapping_add(101));
    let plan = StagePlan {
        name: "spkcode",
        trainable: vec![SPKCODE_GROUP.to_string()],
        include_unlabeled: false,
        labeled_mode: LossMode::Labeled,
        weights: phoneme_only(cfg),
        epochs: cfg.baseline_epochs,
        lr: cfg.baseline_lr,
        alternating: false,
        seed: stage_seed(cfg, 12),
    };
    let report = run(&mut m, data, cfg, plan)?;
    Ok((m, report))
}

/// Pseudo-labels the unlabeled utterances with the SI system, then runs the
/// fDLR procedure on the union. Undecodable utterances are dropped. Returns
/// the model, its report, and the number of pseudo-labeled utterances used.
pub fn adapt_lightly_supervised(
    si_model: &PtdnnModel,
    phone_hmms: &TokenHmmSet,
    log_priors: &Array1<f64>,
    data: &AdaptationData,
    cfg: &AdaptationConfig,
) -> Result<(PtdnnModel, StageReport, usize)> {
    let mut union = AdaptationData::default();
    let mut pseudo = 0;
    for u in &data.utterances {
        if u.labeled {
            union.utterances.push(u.clone());
            continue;
        }
        let post = si_model.forward_head(u.x.view(), PHONEME_HEAD)?;
        match hybrid_phone_decode(&post, log_priors, phone_hmms, 0.0) {
            Ok(path) => {
                let mut targets = HeadTargets::new();
                targets.insert(PHONEME_HEAD.to_string(), path.state_targets(phone_hmms.granularity.m));
                union.utterances.push(TrainUtterance {
                    utterance_id: u.utterance_id.clone(),
                    x: u.x.clone(),
                    labeled: true,
                    targets,
                });
                pseudo += 1;
            }
            Err(Error::NoPath(e)) => log::warn!("dropping {}: {e}", u.utterance_id),
            Err(e) => return Err(e),
        }
    }
    let (m, mut report) = adapt_fdlr_baseline(si_model, &union, cfg)?;
    report.stage = "lightly".into();
    Ok((m, report, pseudo))
}
