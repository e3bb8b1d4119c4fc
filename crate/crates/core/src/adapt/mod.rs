//! Personalized adaptation: target preparation, the three-stage PTDNN
//! schedule, and the fDLR, speaker-code and lightly supervised baselines.

mod stages;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::discovery::TokenLabeling;
use crate::error::{Error, Result};
use crate::frontend::{splice_matrix, CorpusPartition, FeatureSequence, Stage};
use crate::hmm::{force_align, loop_decode_scores, token_loop_decode, EmissionTable, TokenHmmSet};
use crate::kv::KvConfig;
use crate::network::{token_head_name, HeadTargets, LossWeights, PtdnnModel, PHONEME_HEAD};

pub use stages::{
    adapt_fdlr_baseline, adapt_lightly_supervised, adapt_speaker_code_baseline, run_ptdnn, stage1_initialize,
    stage2_joint_optimize, stage3_transfer_back, train_phoneme_network, with_token_heads, BatchLog, EpochLog, StageReport,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub stage3_epochs: usize,
    pub stage3_lr: f64,
    pub weights: LossWeights,
    /// Utterances per mini-batch.
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub momentum: f64,
    /// Let the fDLR transform move during stage 3.
    pub stage3_train_fdlr: bool,
    /// Stage 2 runs all labeled batches, then all unlabeled batches, each
    /// epoch instead of shuffling them together.
    pub alternating: bool,
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    pub code_dim: usize,
    /// Seed for fresh token heads and the speaker-code projection.
    pub init_seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 100,
            stage1_lr: 0.01,
            stage2_epochs: 50,
            stage2_lr: 1e-3,
            stage3_epochs: 50,
            stage3_lr: 1e-4,
            weights: LossWeights::default(),
            batch_size: 16,
            shuffle_seed: 0,
            momentum: 0.9,
            stage3_train_fdlr: false,
            alternating: false,
            baseline_epochs: 50,
            baseline_lr: 1e-3,
            code_dim: 50,
            init_seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.stage1_lr, self.stage2_lr, self.stage3_lr, self.baseline_lr];
        if rates.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        self.weights.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("stage1_epochs", self.stage1_epochs);
        kv.set("stage1_lr", self.stage1_lr);
        kv.set("stage2_epochs", self.stage2_epochs);
        kv.set("stage2_lr", self.stage2_lr);
        kv.set("stage3_epochs", self.stage3_epochs);
        kv.set("stage3_lr", self.stage3_lr);
        kv.set("batch_size", self.batch_size);
        kv.set("shuffle_seed", self.shuffle_seed);
        kv.set("momentum", self.momentum);
        kv.set("stage3_train_fdlr", self.stage3_train_fdlr);
        kv.set("alternating", self.alternating);
        kv.set("baseline_epochs", self.baseline_epochs);
        kv.set("baseline_lr", self.baseline_lr);
        kv.set("code_dim", self.code_dim);
        kv.set("init_seed", self.init_seed);
        kv.merge(&self.weights.to_kv());
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            stage1_epochs: kv.get_or("stage1_epochs", d.stage1_epochs)?,
            stage1_lr: kv.get_or("stage1_lr", d.stage1_lr)?,
            stage2_epochs: kv.get_or("stage2_epochs", d.stage2_epochs)?,
            stage2_lr: kv.get_or("stage2_lr", d.stage2_lr)?,
            stage3_epochs: kv.get_or("stage3_epochs", d.stage3_epochs)?,
            stage3_lr: kv.get_or("stage3_lr", d.stage3_lr)?,
            weights: LossWeights::from_kv(kv)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            shuffle_seed: kv.get_or("shuffle_seed", d.shuffle_seed)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            stage3_train_fdlr: kv.get_or("stage3_train_fdlr", d.stage3_train_fdlr)?,
            alternating: kv.get_or("alternating", d.alternating)?,
            baseline_epochs: kv.get_or("baseline_epochs", d.baseline_epochs)?,
            baseline_lr: kv.get_or("baseline_lr", d.baseline_lr)?,
            code_dim: kv.get_or("code_dim", d.code_dim)?,
            init_seed: kv.get_or("init_seed", d.init_seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A discovered token inventory and, optionally, the labels it converged on.
#[derive(Debug, Clone, Copy)]
pub struct TokenSource<'a> {
    pub set: &'a TokenHmmSet,
    pub labels: Option<&'a TokenLabeling>,
}

impl TokenSource<'_> {
    pub fn head_name(&self) -> String {
        token_head_name(self.set.granularity.m, self.set.granularity.n)
    }

    pub fn inventory(&self) -> usize {
        self.set.state_inventory()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceTargets {
    pub utterance_id: String,
    pub labeled: bool,
    pub heads: HeadTargets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub phoneme_states: usize,
    /// Token head names with their state inventories.
    pub token_heads: Vec<(String, usize)>,
    pub utterances: Vec<UtteranceTargets>,
    /// Utterances that could not be aligned or decoded.
    pub excluded: Vec<String>,
}

impl TargetSet {
    pub fn labeled_count(&self) -> usize {
        self.utterances.iter().filter(|u| u.labeled).count()
    }

    /// Checks target ranges, and that exactly the labeled utterances carry
    /// phoneme targets.
    pub fn validate(&self) -> Result<()> {
        let mut inventories: BTreeMap<&str, usize> =
            self.token_heads.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        inventories.insert(PHONEME_HEAD, self.phoneme_states);
        for u in &self.utterances {
            if u.labeled != u.heads.contains_key(PHONEME_HEAD) {
                return Err(Error::Target(format!("utterance {}: phoneme targets do not match its partition", u.utterance_id)));
            }
            for (h, tg) in &u.heads {
                let inv = inventories
                    .get(h.as_str())
                    .ok_or_else(|| Error::Target(format!("unknown head {h}")))?;
                if tg.iter().any(|&s| s >= *inv) {
                    return Err(Error::Target(format!("utterance {}: target outside head {h}", u.utterance_id)));
                }
            }
            for (h, _) in &self.token_heads {
                if !u.heads.contains_key(h) {
                    return Err(Error::Target(format!("utterance {} lacks targets for {h}", u.utterance_id)));
                }
            }
        }
        Ok(())
    }

    /// Keeps only the named token heads.
    pub fn restrict_token_heads(&self, keep: &[String]) -> TargetSet {
        let mut out = self.clone();
        out.token_heads.retain(|(n, _)| keep.contains(n));
        for u in &mut out.utterances {
            u.heads.retain(|h, _| h == PHONEME_HEAD || keep.contains(h));
        }
        out
    }
}

fn token_targets(src: &TokenSource, f: &FeatureSequence) -> Result<Vec<usize>> {
    let m = src.set.granularity.m;
    if let Some(seq) = src.labels.and_then(|l| l.get(&f.utterance_id)).map(|u| u.token_sequence()) {
        match force_align(src.set, f.frames.view(), &seq) {
            Ok(p) => return Ok(p.state_targets(m)),
            Err(e) => log::debug!("{}: label alignment failed ({e}); decoding instead", f.utterance_id),
        }
    }
    Ok(token_loop_decode(src.set, f.frames.view(), 0.0)?.state_targets(m))
}

/// Phoneme-state targets by forced alignment of transcripts (labeled only)
/// and token-state targets for every adaptation utterance from each token
/// set. Utterances that cannot be aligned are excluded and logged.
pub fn prepare_targets(
    phone_hmms: &TokenHmmSet,
    token_sources: &[TokenSource],
    partition: &CorpusPartition,
) -> Result<TargetSet> {
    partition.validate()?;
    let m_phone = phone_hmms.granularity.m;
    let phoneme_states = phone_hmms.state_inventory();
    let mut utterances = Vec::new();
    let mut excluded = Vec::new();
    let items = partition
        .labeled
        .iter()
        .map(|u| (&u.features, Some(&u.transcript)))
        .chain(partition.unlabeled.iter().map(|f| (f, None)));
    for (f, transcript) in items {
        if f.stage != Stage::Normalized {
            return Err(Error::Stage {
                expected: Stage::Normalized.name(),
                found: f.stage.name(),
            });
        }
        let mut heads = HeadTargets::new();
        let result: Result<()> = (|| {
            if let Some(tr) = transcript {
                let path = force_align(phone_hmms, f.frames.view(), tr)?;
                heads.insert(PHONEME_HEAD.to_string(), path.state_targets(m_phone));
            }
            for src in token_sources {
                heads.insert(src.head_name(), token_targets(src, f)?);
            }
            Ok(())
        })();
        match result {
            Ok(()) => utterances.push(UtteranceTargets {
                utterance_id: f.utterance_id.clone(),
                labeled: transcript.is_some(),
                heads,
            }),
            Err(e @ (Error::NoPath(_) | Error::Config(_))) => {
                log::warn!("excluding {}: {e}", f.utterance_id);
                excluded.push(f.utterance_id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    let targets = TargetSet {
        phoneme_states,
        token_heads: token_sources.iter().map(|s| (s.head_name(), s.inventory())).collect(),
        utterances,
        excluded,
    };
    targets.validate()?;
    Ok(targets)
}

/// One utterance ready for training: spliced input plus its targets.
#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub utterance_id: String,
    pub x: Array2<f64>,
    pub labeled: bool,
    pub targets: HeadTargets,
}

#[derive(Debug, Clone, Default)]
pub struct AdaptationData {
    pub utterances: Vec<TrainUtterance>,
}

impl AdaptationData {
    /// Splices the normalized features of every utterance that has targets.
    pub fn assemble(features: &[FeatureSequence], targets: &TargetSet, left: usize, right: usize) -> Result<Self> {
        let by_id: BTreeMap<&str, &FeatureSequence> = features.iter().map(|f| (f.utterance_id.as_str(), f)).collect();
        let mut utterances = Vec::with_capacity(targets.utterances.len());
        for t in &targets.utterances {
            let f = by_id
                .get(t.utterance_id.as_str())
                .ok_or_else(|| Error::Missing(format!("features for {}", t.utterance_id)))?;
            if f.stage != Stage::Normalized {
                return Err(Error::Stage {
                    expected: Stage::Normalized.name(),
                    found: f.stage.name(),
                });
            }
            for (h, tg) in &t.heads {
                if tg.len() != f.num_frames() {
                    return Err(Error::Target(format!(
                        "{}: head {h} has {} targets for {} frames",
                        t.utterance_id,
                        tg.len(),
                        f.num_frames()
                    )));
                }
            }
            utterances.push(TrainUtterance {
                utterance_id: t.utterance_id.clone(),
                x: splice_matrix(&f.frames, left, right),
                labeled: t.labeled,
                targets: t.heads.clone(),
            });
        }
        Ok(Self { utterances })
    }

    pub fn labeled_count(&self) -> usize {
        self.utterances.iter().filter(|u| u.labeled).count()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.utterances.len() - self.labeled_count()
    }

    pub fn labeled_only(&self) -> Self {
        Self {
            utterances: self.utterances.iter().filter(|u| u.labeled).cloned().collect(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.x.nrows()).sum()
    }
}

/// Hybrid phone-loop decoding: scaled log-likelihoods
/// `log p(s|x) − log p(s)` searched with the phone HMM transitions.
/// Column `p·m + k` of `posteriors` is state `k` of phone `p`.
pub fn hybrid_phone_decode(
    posteriors: &Array2<f64>,
    log_priors: &Array1<f64>,
    phone_hmms: &TokenHmmSet,
    insertion_penalty: f64,
) -> Result<crate::hmm::StatePath> {
    let m = phone_hmms.granularity.m;
    for (i, h) in phone_hmms.models.iter().enumerate() {
        if h.token_id != i || h.num_states() != m {
            return Err(Error::Config("phone models must be numbered 0..N with m states each".into()));
        }
    }
    if posteriors.ncols() != phone_hmms.state_inventory() || log_priors.len() != posteriors.ncols() {
        return Err(Error::Shape(format!(
            "{} posterior columns, {} priors, {} phone states",
            posteriors.ncols(),
            log_priors.len(),
            phone_hmms.state_inventory()
        )));
    }
    let mut scores = posteriors.mapv(|p| p.max(1e-300).ln());
    scores -= log_priors;
    let table = EmissionTable::from_scores(&phone_hmms.models, scores)?;
    let entry = -(phone_hmms.len() as f64).ln() - insertion_penalty;
    loop_decode_scores(&phone_hmms.models, &table, entry)
}

/// Per-frame phone-state pseudo-targets from the SI network and phone HMMs.
pub fn generate_pseudo_labels(
    si_model: &PtdnnModel,
    phone_hmms: &TokenHmmSet,
    log_priors: &Array1<f64>,
    spliced: &FeatureSequence,
) -> Result<Vec<usize>> {
    if spliced.stage != Stage::Spliced {
        return Err(Error::Stage {
            expected: Stage::Spliced.name(),
            found: spliced.stage.name(),
        });
    }
    let post = si_model.forward_head(spliced.frames.view(), PHONEME_HEAD)?;
    let path = hybrid_phone_decode(&post, log_priors, phone_hmms, 0.0)?;
    Ok(path.state_targets(phone_hmms.granularity.m))
}

/// Log state priors from a collection of target sequences, with add-one
/// smoothing.
pub fn log_state_priors<'a>(targets: impl IntoIterator<Item = &'a [usize]>, states: usize) -> Array1<f64> {
    let mut counts = Array1::<f64>::from_elem(states, 1.0);
    for tg in targets {
        for &s in tg {
            if s < states {
                counts[s] += 1.0;
            }
        }
    }
    let total = counts.sum();
    counts.mapv(|c| (c / total).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_follow_the_schedule() {
        let c = AdaptationConfig::default();
        assert_eq!((c.stage1_epochs, c.stage1_lr), (100, 0.01));
        assert_eq!((c.stage2_epochs, c.stage2_lr), (50, 1e-3));
        assert_eq!((c.stage3_epochs, c.stage3_lr), (50, 1e-4));
        assert_eq!((c.weights.phoneme, c.weights.token), (4.0, 1.0));
        assert_eq!(AdaptationConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn invalid_rates_rejected() {
        let mut kv = AdaptationConfig::default().to_kv();
        kv.set("stage2_lr", 0.0);
        assert!(AdaptationConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn priors_are_normalized() {
        let a = vec![0usize, 0, 1];
        let p = log_state_priors([a.as_slice()], 3);
        assert!((p.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
