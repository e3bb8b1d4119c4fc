//! Speaker-independent system: phone HMMs from flat start plus realignment,
//! and a network trained on the resulting state alignments.

use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayView2};

use crate::adapt::{log_state_priors, train_phoneme_network, AdaptationData, StageReport, TrainUtterance};
use crate::discovery::{variance_floor_for, GranularityConfig};
use crate::error::{Error, Result};
use crate::frontend::{splice_matrix, FeatureSequence, LabeledUtterance, Stage};
use crate::hmm::{baum_welch_update, force_align, init_flat_start, load_hmm_set, save_hmm_set, TokenHmmSet};
use crate::kv::KvConfig;
use crate::network::{load_model, save_model, HeadTargets, NetConfig, PtdnnModel, PHONEME_HEAD};

#[derive(Debug, Clone, PartialEq)]
pub struct SiConfig {
    pub net: NetConfig,
    pub states_per_phone: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Realignment rounds after the flat start.
    pub hmm_rounds: usize,
    /// Baum-Welch updates per round.
    pub bw_iters: usize,
    pub variance_floor_scale: f64,
    pub seed: u64,
}

impl Default for SiConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::desk_scale(),
            states_per_phone: 3,
            epochs: 12,
            lr: 0.1,
            batch_size: 16,
            momentum: 0.9,
            hmm_rounds: 3,
            bw_iters: 2,
            variance_floor_scale: 1e-3,
            seed: 0,
        }
    }
}

impl SiConfig {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.nest("net", &self.net.to_kv());
        kv.set("states_per_phone", self.states_per_phone);
        kv.set("epochs", self.epochs);
        kv.set("lr", self.lr);
        kv.set("batch_size", self.batch_size);
        kv.set("momentum", self.momentum);
        kv.set("hmm_rounds", self.hmm_rounds);
        kv.set("bw_iters", self.bw_iters);
        kv.set("variance_floor_scale", self.variance_floor_scale);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            net: NetConfig::from_kv(&kv.section("net"))?,
            states_per_phone: kv.get_or("states_per_phone", d.states_per_phone)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            lr: kv.get_or("lr", d.lr)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            hmm_rounds: kv.get_or("hmm_rounds", d.hmm_rounds)?,
            bw_iters: kv.get_or("bw_iters", d.bw_iters)?,
            variance_floor_scale: kv.get_or("variance_floor_scale", d.variance_floor_scale)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }

    /// Frames of left and right context implied by the input width.
    pub fn context(&self) -> Result<(usize, usize)> {
        splice_context(&self.net)
    }
}

pub fn splice_context(net: &NetConfig) -> Result<(usize, usize)> {
    let ctx = net.input_dim / net.block_dim;
    if ctx % 2 == 0 || ctx * net.block_dim != net.input_dim {
        return Err(Error::Config(format!(
            "input_dim {} is not an odd number of {}-dimensional frames",
            net.input_dim, net.block_dim
        )));
    }
    Ok((ctx / 2, ctx / 2))
}

#[derive(Debug, Clone)]
pub struct SiSystem {
    pub phone_hmms: TokenHmmSet,
    pub model: PtdnnModel,
    pub log_priors: Array1<f64>,
    pub report: StageReport,
    /// Phone-state alignments used as training targets, by utterance id.
    pub alignments: Vec<(String, Vec<usize>)>,
}

impl SiSystem {
    pub fn states_per_phone(&self) -> usize {
        self.phone_hmms.granularity.m
    }
}

fn check_inputs(utts: &[LabeledUtterance], n_phones: usize) -> Result<()> {
    if utts.is_empty() {
        return Err(Error::Config("no training utterances for the SI system".into()));
    }
    for u in utts {
        if u.features.stage != Stage::Normalized {
            return Err(Error::Stage {
                expected: Stage::Normalized.name(),
                found: u.features.stage.name(),
            });
        }
        if u.transcript.is_empty() {
            return Err(Error::Target(format!("{}: empty transcript", u.features.utterance_id)));
        }
        if let Some(&p) = u.transcript.iter().find(|&&p| p >= n_phones) {
            return Err(Error::Target(format!("{}: phone {p} outside 0..{n_phones}", u.features.utterance_id)));
        }
    }
    Ok(())
}

/// Context-independent phone HMMs: uniform segmentation by transcript, then
/// rounds of forced alignment and Baum-Welch on the aligned segments.
pub fn train_phone_hmms(utts: &[LabeledUtterance], n_phones: usize, cfg: &SiConfig) -> Result<TokenHmmSet> {
    check_inputs(utts, n_phones)?;
    let m = cfg.states_per_phone;
    let feats: Vec<FeatureSequence> = utts.iter().map(|u| u.features.clone()).collect();
    let floor = variance_floor_for(&feats, cfg.variance_floor_scale)?;
    let granularity = GranularityConfig::new(m, n_phones)?;

    // uniform segmentation
    let mut segments: Vec<Vec<ArrayView2<f64>>> = vec![Vec::new(); n_phones];
    for u in utts {
        let t = u.features.num_frames();
        let k = u.transcript.len();
        for (i, &p) in u.transcript.iter().enumerate() {
            let (a, b) = (i * t / k, (i + 1) * t / k);
            if b > a {
                segments[p].push(u.features.frames.slice(ndarray::s![a..b, ..]));
            }
        }
    }
    let mut models = Vec::with_capacity(n_phones);
    for (p, segs) in segments.iter().enumerate() {
        let mut h = init_flat_start(segs, m, floor)
            .map_err(|e| Error::Init(format!("phone {p}: {e}")))?;
        h.token_id = p;
        models.push(h);
    }
    let mut set = TokenHmmSet::new(granularity, models, floor)?;

    for round in 0..cfg.hmm_rounds {
        let mut segments: Vec<Vec<ArrayView2<f64>>> = vec![Vec::new(); n_phones];
        let mut dropped = 0;
        for u in utts {
            match force_align(&set, u.features.frames.view(), &u.transcript) {
                Ok(path) => {
                    for o in &path.occupancies {
                        segments[o.token_id].push(u.features.frames.slice(ndarray::s![o.start..o.end, ..]));
                    }
                }
                Err(Error::NoPath(_)) => dropped += 1,
                Err(e) => return Err(e),
            }
        }
        log::debug!("phone HMM round {round}: {dropped} utterances without an alignment");
        let mut models = Vec::with_capacity(n_phones);
        for (p, segs) in segments.iter().enumerate() {
            let mut h = set.models[p].clone();
            if !segs.is_empty() {
                for _ in 0..cfg.bw_iters {
                    h = baum_welch_update(&h, segs, floor)?;
                }
            }
            h.token_id = p;
            models.push(h);
        }
        set = TokenHmmSet::new(granularity, models, floor)?;
    }
    Ok(set)
}

/// Builds the complete SI system from transcribed, normalized utterances.
pub fn build_si_system(utts: &[LabeledUtterance], n_phones: usize, cfg: &SiConfig) -> Result<SiSystem> {
    cfg.net.validate()?;
    let (left, right) = cfg.context()?;
    let phone_hmms = train_phone_hmms(utts, n_phones, cfg)?;
    let m = cfg.states_per_phone;
    let mut data = AdaptationData::default();
    let mut alignments = Vec::with_capacity(utts.len());
    for u in utts {
        let path = match force_align(&phone_hmms, u.features.frames.view(), &u.transcript) {
            Ok(p) => p,
            Err(Error::NoPath(e)) => {
                log::warn!("SI training skips {}: {e}", u.features.utterance_id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let targets = path.state_targets(m);
        let mut heads = HeadTargets::new();
        heads.insert(PHONEME_HEAD.to_string(), targets.clone());
        data.utterances.push(TrainUtterance {
            utterance_id: u.features.utterance_id.clone(),
            x: splice_matrix(&u.features.frames, left, right),
            labeled: true,
            targets: heads,
        });
        alignments.push((u.features.utterance_id.clone(), targets));
    }
    if data.utterances.is_empty() {
        return Err(Error::NoPath("no SI utterance could be aligned".into()));
    }
    let states = n_phones * m;
    let log_priors = log_state_priors(alignments.iter().map(|(_, a)| a.as_slice()), states);
    let init = PtdnnModel::new(cfg.net.clone(), states)?;
    let (model, report) =
        train_phoneme_network(&init, &data, cfg.epochs, cfg.lr, cfg.batch_size, cfg.momentum, cfg.seed)?;
    Ok(SiSystem {
        phone_hmms,
        model,
        log_priors,
        report,
        alignments,
    })
}

pub const SI_MODEL_FILE: &str = "si.ptdn";
pub const PHONE_HMM_FILE: &str = "phones.tkhm";
pub const PRIORS_FILE: &str = "priors.txt";

/// The deployable part of an SI system.
#[derive(Debug, Clone)]
pub struct SiBundle {
    pub model: PtdnnModel,
    pub phone_hmms: TokenHmmSet,
    pub log_priors: Array1<f64>,
}

impl From<&SiSystem> for SiBundle {
    fn from(s: &SiSystem) -> Self {
        Self {
            model: s.model.clone(),
            phone_hmms: s.phone_hmms.clone(),
            log_priors: s.log_priors.clone(),
        }
    }
}

pub fn save_si_bundle(dir: &Path, bundle: &SiBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_model(&dir.join(SI_MODEL_FILE), &bundle.model)?;
    save_hmm_set(&dir.join(PHONE_HMM_FILE), &bundle.phone_hmms)?;
    let text: String = bundle.log_priors.iter().map(|p| format!("{p:e}\n")).collect();
    std::fs::write(dir.join(PRIORS_FILE), text)?;
    Ok(())
}

fn missing(what: &str, path: &Path) -> Error {
    Error::Missing(format!(
        "{what} not found at {}; run `ptdnn train-si` to build the SI system first",
        path.display()
    ))
}

/// Loads a bundle from its directory, or from the path of its model file
/// with the companion files alongside.
pub fn load_si_bundle(path: &Path) -> Result<SiBundle> {
    let dir: PathBuf = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let model_path = if path.is_dir() { dir.join(SI_MODEL_FILE) } else { path.to_path_buf() };
    for (what, p) in [
        ("SI model", model_path.clone()),
        ("phone HMM set", dir.join(PHONE_HMM_FILE)),
        ("state priors", dir.join(PRIORS_FILE)),
    ] {
        if !p.is_file() {
            return Err(missing(what, &p));
        }
    }
    let model = load_model(&model_path)?;
    let phone_hmms = load_hmm_set(&dir.join(PHONE_HMM_FILE))?;
    let log_priors: Array1<f64> = std::fs::read_to_string(dir.join(PRIORS_FILE))?
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad prior {v:?}"))))
        .collect::<Result<Vec<_>>>()?
        .into();
    if log_priors.len() != phone_hmms.state_inventory() {
        return Err(Error::Shape(format!(
            "{} priors for {} phone states",
            log_priors.len(),
            phone_hmms.state_inventory()
        )));
    }
    Ok(SiBundle {
        model,
        phone_hmms,
        log_priors,
    })
}
