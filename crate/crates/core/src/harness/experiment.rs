//! End-to-end comparison of the SI model, the baselines, and PTDNN on the
//! adaptation speakers of a synthetic corpus.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{corpus_unit_error_rate, frame_accuracy, normalized_mutual_information, unit_accuracy};
use super::si::{splice_context, SiSystem};
use super::synth::{SpeakerCorpus, SyntheticCorpus};
use crate::adapt::{
    adapt_fdlr_baseline, adapt_lightly_supervised, adapt_speaker_code_baseline, hybrid_phone_decode,
    prepare_targets, run_ptdnn, AdaptationConfig, AdaptationData, TokenSource,
};
use crate::discovery::{discover, DiscoveryConfig, DiscoveryReport, GranularityConfig};
use crate::error::{Error, Result};
use crate::frontend::{splice_matrix, CorpusPartition, FeatureSequence, LabeledUtterance};
use crate::kv::KvConfig;
use crate::network::{argmax_rows, fuse_posteriors, token_head_name, PtdnnModel, PHONEME_HEAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "si")]
    Si,
    #[serde(rename = "fdlr")]
    Fdlr,
    #[serde(rename = "spkcode")]
    SpeakerCode,
    #[serde(rename = "lightly")]
    Lightly,
    #[serde(rename = "ptdnn")]
    Ptdnn,
    #[serde(rename = "ptdnn-multi")]
    PtdnnMulti,
    #[serde(rename = "fusion")]
    Fusion,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Si,
        Method::Fdlr,
        Method::SpeakerCode,
        Method::Lightly,
        Method::Ptdnn,
        Method::PtdnnMulti,
        Method::Fusion,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Method::Si => "si",
            Method::Fdlr => "fdlr",
            Method::SpeakerCode => "spkcode",
            Method::Lightly => "lightly",
            Method::Ptdnn => "ptdnn",
            Method::PtdnnMulti => "ptdnn-multi",
            Method::Fusion => "fusion",
        }
    }

    /// Row label in the emitted tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Si => "SI",
            Method::Fdlr => "fDLR",
            Method::SpeakerCode => "speaker code (stand-in)",
            Method::Lightly => "lightly supervised",
            Method::Ptdnn => "PTDNN",
            Method::PtdnnMulti => "PTDNN multi-token",
            Method::Fusion => "PTDNN+fDLR fusion",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Transcribed utterances per run; one set of runs per budget.
    pub labeled_budgets: Vec<usize>,
    /// Untranscribed utterances; `None` takes the rest of the adaptation pool.
    pub unlabeled_budget: Option<usize>,
    /// Token granularities. PTDNN runs once per entry; the first is the
    /// primary one used for fusion; PTDNN multi-token uses all of them.
    pub granularities: Vec<GranularityConfig>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub fusion_alpha_grid: Vec<f64>,
    pub adaptation: AdaptationConfig,
    /// Discovery settings; granularity and seed are set per run.
    pub discovery: DiscoveryConfig,
    pub decode_penalty: f64,
    /// Adaptation speakers to evaluate (indices); empty means all.
    pub speakers: Vec<usize>,
    /// Worker threads for independent seeds; 0 uses the available cores.
    pub threads: usize,
}

/// Adaptation schedule sized for a desk machine and the synthetic corpus.
pub fn desk_adaptation_config() -> AdaptationConfig {
    AdaptationConfig {
        stage1_epochs: 8,
        stage1_lr: 0.05,
        stage2_epochs: 10,
        stage2_lr: 0.02,
        stage3_epochs: 8,
        stage3_lr: 0.02,
        baseline_epochs: 30,
        baseline_lr: 0.02,
        ..AdaptationConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            labeled_budgets: vec![50],
            unlabeled_budget: None,
            granularities: vec![GranularityConfig { m: 3, n: 8 }],
            methods: vec![Method::Si, Method::Fdlr, Method::Ptdnn, Method::Fusion],
            seeds: (0..5).collect(),
            fusion_alpha_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            adaptation: desk_adaptation_config(),
            discovery: DiscoveryConfig::new(GranularityConfig { m: 3, n: 8 }, 0),
            decode_penalty: 0.0,
            speakers: Vec::new(),
            threads: 0,
        }
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn validate(&self, corpus: &SyntheticCorpus) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.methods.is_empty() || self.labeled_budgets.is_empty() {
            return Err(Error::Config("methods and labeled_budgets must be non-empty".into()));
        }
        let pool = corpus.spec.adapt_utterances;
        for &l in &self.labeled_budgets {
            let u = self.unlabeled_budget.unwrap_or(pool.saturating_sub(l));
            if l == 0 || l + u > pool {
                return Err(Error::Config(format!(
                    "labeled {l} + unlabeled {u} exceeds the adaptation pool of {pool} utterances"
                )));
            }
        }
        let needs_tokens = self.methods.iter().any(|m| matches!(m, Method::Ptdnn | Method::PtdnnMulti | Method::Fusion));
        if needs_tokens && self.granularities.is_empty() {
            return Err(Error::Config("PTDNN methods need at least one granularity".into()));
        }
        if self.methods.contains(&Method::Fusion) && self.fusion_alpha_grid.is_empty() {
            return Err(Error::Config("fusion needs a non-empty alpha grid".into()));
        }
        if self.fusion_alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("fusion alphas must lie in [0, 1]".into()));
        }
        if let Some(&s) = self.speakers.iter().find(|&&s| s >= corpus.adapt_speakers.len()) {
            return Err(Error::Config(format!("speaker index {s} out of range")));
        }
        self.adaptation.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set_list("labeled_budgets", &self.labeled_budgets);
        if let Some(u) = self.unlabeled_budget {
            kv.set("unlabeled_budget", u);
        }
        kv.set("granularities", self.granularities.iter().map(|g| format!("{}x{}", g.m, g.n)).collect::<Vec<_>>().join(","));
        kv.set_list("methods", &self.methods);
        kv.set_list("seeds", &self.seeds);
        kv.set_list("fusion_alpha_grid", &self.fusion_alpha_grid);
        kv.set("decode_penalty", self.decode_penalty);
        kv.set("speakers", join(&self.speakers));
        kv.set("threads", self.threads);
        kv.nest("adapt", &self.adaptation.to_kv());
        kv.nest("discovery", &self.discovery.to_kv());
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let unlabeled_budget = match kv.raw("unlabeled_budget") {
            None | Some("") | Some("rest") => None,
            Some(_) => Some(kv.get_or("unlabeled_budget", 0usize)?),
        };
        let adapt_kv = kv.section("adapt");
        let mut adaptation = d.adaptation.to_kv();
        adaptation.merge(&adapt_kv);
        let mut discovery = d.discovery.to_kv();
        discovery.merge(&kv.section("discovery"));
        Ok(Self {
            labeled_budgets: kv.get_list_or("labeled_budgets", d.labeled_budgets)?,
            unlabeled_budget,
            granularities: kv.get_list_or("granularities", d.granularities)?,
            methods: kv.get_list_or("methods", d.methods)?,
            seeds: kv.get_list_or("seeds", d.seeds)?,
            fusion_alpha_grid: kv.get_list_or("fusion_alpha_grid", d.fusion_alpha_grid)?,
            adaptation: AdaptationConfig::from_kv(&adaptation)?,
            discovery: DiscoveryConfig::from_kv(&discovery)?,
            decode_penalty: kv.get_or("decode_penalty", d.decode_penalty)?,
            speakers: kv.get_list_or("speakers", d.speakers)?,
            threads: kv.get_or("threads", d.threads)?,
        })
    }
}

/// One (method, speaker, seed, budget) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub method: Method,
    pub speaker: String,
    pub seed: u64,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Token granularity for PTDNN runs (`m x n`, or `multi`).
    pub granularity: Option<String>,
    pub frame_accuracy: f64,
    pub unit_accuracy: f64,
    pub unit_error_rate: f64,
    pub fusion_alpha: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryDiagnostics {
    pub speaker: String,
    pub seed: u64,
    pub granularity: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_changed_fraction: Option<f64>,
    /// NMI between discovered tokens and true phones, frame level.
    pub nmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// The experiment configuration as key=value pairs.
    pub config: BTreeMap<String, String>,
    pub granularities: Vec<String>,
    pub cells: Vec<MetricCell>,
    pub discovery: Vec<DiscoveryDiagnostics>,
    pub checks: Vec<OrderingCheck>,
    pub wall_time_s: f64,
}

pub fn granularity_key(g: GranularityConfig) -> String {
    format!("{}x{}", g.m, g.n)
}

pub const MULTI_KEY: &str = "multi";

impl MetricsReport {
    fn select<'a>(
        &'a self,
        method: Method,
        labeled: Option<usize>,
        granularity: Option<&'a str>,
    ) -> impl Iterator<Item = &'a MetricCell> + 'a {
        self.cells.iter().filter(move |c| {
            c.method == method
                && labeled.is_none_or(|l| c.labeled == l)
                && (granularity.is_none() || c.granularity.as_deref() == granularity)
        })
    }

    /// Median frame accuracy over seeds and speakers. PTDNN cells are
    /// restricted to the primary granularity unless one is given.
    pub fn median_frame_accuracy(&self, method: Method, labeled: usize) -> Option<f64> {
        let g = self.default_granularity(method);
        let v: Vec<f64> = self.select(method, Some(labeled), g).map(|c| c.frame_accuracy).collect();
        super::metrics::median(&v)
    }

    pub fn median_unit_accuracy(&self, method: Method, labeled: usize) -> Option<f64> {
        let g = self.default_granularity(method);
        let v: Vec<f64> = self.select(method, Some(labeled), g).map(|c| c.unit_accuracy).collect();
        super::metrics::median(&v)
    }

    pub fn median_for_granularity(&self, granularity: &str, labeled: usize) -> Option<(f64, f64)> {
        let cells: Vec<&MetricCell> = self.select(Method::Ptdnn, Some(labeled), Some(granularity)).collect();
        let fa: Vec<f64> = cells.iter().map(|c| c.frame_accuracy).collect();
        let ua: Vec<f64> = cells.iter().map(|c| c.unit_accuracy).collect();
        Some((super::metrics::median(&fa)?, super::metrics::median(&ua)?))
    }

    fn default_granularity(&self, method: Method) -> Option<&str> {
        match method {
            Method::Ptdnn => self.granularities.first().map(String::as_str),
            _ => None,
        }
    }

    pub fn labeled_budgets(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.cells.iter().map(|c| c.labeled).collect();
        b.sort_unstable();
        b.dedup();
        b
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.cells.iter().map(|c| c.method).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Fraction of discovery runs at `granularity` that converged.
    pub fn converged_fraction(&self, granularity: &str) -> Option<f64> {
        let runs: Vec<bool> = self.discovery.iter().filter(|d| d.granularity == granularity).map(|d| d.converged).collect();
        (!runs.is_empty()).then(|| runs.iter().filter(|&&c| c).count() as f64 / runs.len() as f64)
    }

    /// A granularity counts as converged when most of its runs converged.
    pub fn granularity_converged(&self, granularity: &str) -> bool {
        self.converged_fraction(granularity).is_some_and(|f| f >= 0.5)
    }
}

/// Directional checks that can be evaluated from whatever cells exist.
pub fn ordering_checks(report: &MetricsReport) -> Vec<OrderingCheck> {
    let mut out = Vec::new();
    let fa = |m, l| report.median_frame_accuracy(m, l);
    for l in report.labeled_budgets() {
        if let (Some(p), Some(f), Some(s)) = (fa(Method::Ptdnn, l), fa(Method::Fdlr, l), fa(Method::Si, l)) {
            out.push(OrderingCheck {
                name: format!("frame accuracy PTDNN > fDLR > SI ({l} labeled)"),
                passed: p > f && f > s,
                detail: format!("PTDNN {p:.4}, fDLR {f:.4}, SI {s:.4}"),
            });
        }
        if let (Some(u), Some(p)) = (fa(Method::Fusion, l), fa(Method::Ptdnn, l)) {
            out.push(OrderingCheck {
                name: format!("frame accuracy fusion >= PTDNN ({l} labeled)"),
                passed: u >= p,
                detail: format!("fusion {u:.4}, PTDNN {p:.4}"),
            });
        }
    }
    let margins: Vec<(usize, f64)> = report
        .labeled_budgets()
        .into_iter()
        .filter_map(|l| Some((l, fa(Method::Ptdnn, l)? - fa(Method::Fdlr, l)?)))
        .collect();
    if margins.len() >= 2 {
        let ok = margins.windows(2).all(|w| w[1].1 <= w[0].1);
        out.push(OrderingCheck {
            name: "PTDNN margin over fDLR non-increasing in labeled budget".into(),
            passed: ok,
            detail: margins.iter().map(|(l, m)| format!("{l}: {m:+.4}")).collect::<Vec<_>>().join(", "),
        });
    }
    if let Some(l) = super::report::primary_budget(report) {
        if let Some(base) = report.median_unit_accuracy(Method::Fdlr, l) {
            let mut converged = 0;
            let mut below = Vec::new();
            let mut ties = 0;
            for g in &report.granularities {
                if !report.granularity_converged(g) {
                    continue;
                }
                if let Some((_, ua)) = report.median_for_granularity(g, l) {
                    converged += 1;
                    if ua < base {
                        below.push(g.clone());
                    } else if ua == base {
                        ties += 1;
                    }
                }
            }
            if converged > 0 {
                out.push(OrderingCheck {
                    name: format!("PTDNN unit accuracy >= fDLR for every converged granularity ({l} labeled)"),
                    passed: converged >= 4 && below.is_empty() && ties <= 1,
                    detail: format!("{converged} converged, below baseline: [{}], ties: {ties}", below.join(" ")),
                });
            }
        }
    }
    out
}

/// Test or dev utterance with spliced input and ground truth.
struct EvalUtterance {
    x: Array2<f64>,
    states: Vec<usize>,
    transcript: Vec<usize>,
}

struct EvalSet {
    utterances: Vec<EvalUtterance>,
}

fn eval_set(utts: &[super::synth::SyntheticUtterance], left: usize, right: usize) -> EvalSet {
    EvalSet {
        utterances: utts
            .iter()
            .map(|u| EvalUtterance {
                x: splice_matrix(&u.features.frames, left, right),
                states: u.states.clone(),
                transcript: u.transcript.clone(),
            })
            .collect(),
    }
}

fn phoneme_posteriors(model: &PtdnnModel, set: &EvalSet) -> Result<Vec<Array2<f64>>> {
    set.utterances.iter().map(|u| model.forward_head(u.x.view(), PHONEME_HEAD)).collect()
}

/// Frame accuracy and unit error rate of per-utterance phoneme posteriors.
fn score(posteriors: &[Array2<f64>], set: &EvalSet, si: &SiSystem, penalty: f64) -> Result<(f64, f64)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut hyps = Vec::with_capacity(posteriors.len());
    for (p, u) in posteriors.iter().zip(&set.utterances) {
        pred.extend(argmax_rows(p));
        truth.extend_from_slice(&u.states);
        let hyp = match hybrid_phone_decode(p, &si.log_priors, &si.phone_hmms, penalty) {
            Ok(path) => path.token_sequence(),
            Err(Error::NoPath(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        hyps.push(hyp);
    }
    let fa = frame_accuracy(&pred, &truth)?;
    let uer = corpus_unit_error_rate(hyps.iter().zip(&set.utterances).map(|(h, u)| (h.as_slice(), u.transcript.as_slice())))?;
    Ok((fa, uer))
}

/// Fixed per-speaker inputs shared by every seed.
struct SpeakerContext<'a> {
    corpus: &'a SyntheticCorpus,
    speaker: &'a SpeakerCorpus,
    si: &'a SiSystem,
    dev: EvalSet,
    test: EvalSet,
    si_score: (f64, f64),
    left: usize,
    right: usize,
}

fn labeled(u: &super::synth::SyntheticUtterance) -> LabeledUtterance {
    LabeledUtterance {
        features: u.features.clone(),
        transcript: u.transcript.clone(),
    }
}

/// Splits the adaptation pool for one seed: a seeded permutation whose
/// first `labeled` entries are transcribed and the next `unlabeled` are not.
pub fn split_adaptation_pool(
    speaker: &SpeakerCorpus,
    pool: usize,
    labeled_count: usize,
    unlabeled_count: usize,
    seed: u64,
) -> Result<(Vec<LabeledUtterance>, Vec<FeatureSequence>)> {
    if labeled_count + unlabeled_count > pool || pool > speaker.utterances.len() {
        return Err(Error::Config(format!(
            "{}: cannot take {labeled_count} + {unlabeled_count} from a pool of {pool}",
            speaker.speaker_id
        )));
    }
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let labeled_set = order[..labeled_count].iter().map(|&i| labeled(&speaker.utterances[i])).collect();
    let unlabeled_set = order[labeled_count..labeled_count + unlabeled_count]
        .iter()
        .map(|&i| speaker.utterances[i].features.clone())
        .collect();
    Ok((labeled_set, unlabeled_set))
}

fn restrict_data(data: &AdaptationData, keep: &[String]) -> AdaptationData {
    let mut out = data.clone();
    for u in &mut out.utterances {
        u.targets.retain(|h, _| h == PHONEME_HEAD || keep.contains(h));
    }
    out
}

struct SeedOutput {
    cells: Vec<MetricCell>,
    diagnostics: Vec<DiscoveryDiagnostics>,
}

fn run_seed(ctx: &SpeakerContext, cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let spec = &ctx.corpus.spec;
    let pool = spec.adapt_utterances;
    let sid = &ctx.speaker.speaker_id;
    let mut adapt_cfg = cfg.adaptation.clone();
    adapt_cfg.shuffle_seed = seed;
    adapt_cfg.init_seed = seed;
    let has = |m: Method| cfg.methods.contains(&m);
    let need_ptdnn = has(Method::Ptdnn) || has(Method::Fusion);
    let need_tokens = need_ptdnn || has(Method::PtdnnMulti);
    let need_fdlr = has(Method::Fdlr) || has(Method::Fusion);
    let token_grid: Vec<GranularityConfig> = if has(Method::PtdnnMulti) || has(Method::Ptdnn) {
        cfg.granularities.clone()
    } else {
        cfg.granularities.iter().take(1).copied().collect()
    };

    let mut cells = Vec::new();
    let mut diagnostics = Vec::new();
    let mut discovered: BTreeMap<Vec<String>, Vec<DiscoveryReport>> = BTreeMap::new();
    let split_seed = seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ ctx.speaker.speaker_id.len() as u64;

    for &l in &cfg.labeled_budgets {
        let u = cfg.unlabeled_budget.unwrap_or(pool - l);
        let (lab, unlab) = split_adaptation_pool(ctx.speaker, pool, l, u, split_seed)?;
        let partition = CorpusPartition {
            labeled: lab,
            unlabeled: unlab,
            dev: Vec::new(),
            test: Vec::new(),
        };
        let features = partition.adaptation_features();
        let cell = |method: Method, granularity: Option<String>, (fa, uer): (f64, f64), alpha, t: f64| MetricCell {
            method,
            speaker: sid.clone(),
            seed,
            labeled: l,
            unlabeled: u,
            granularity,
            frame_accuracy: fa,
            unit_accuracy: unit_accuracy(uer),
            unit_error_rate: uer,
            fusion_alpha: alpha,
            wall_time_s: t,
        };

        if has(Method::Si) {
            cells.push(cell(Method::Si, None, ctx.si_score, None, 0.0));
        }

        // token discovery depends only on the adaptation features
        let mut ids: Vec<String> = features.iter().map(|f| f.utterance_id.clone()).collect();
        ids.sort();
        if need_tokens && !discovered.contains_key(&ids) {
            let mut reports = Vec::new();
            let truth: Vec<usize> = features
                .iter()
                .flat_map(|f| {
                    let utt = ctx.speaker.utterances.iter().find(|s| s.features.utterance_id == f.utterance_id);
                    utt.map(|s| s.phones(spec.states_per_phone)).unwrap_or_default()
                })
                .collect();
            for &g in &token_grid {
                let dcfg = DiscoveryConfig {
                    granularity: g,
                    seed,
                    ..cfg.discovery.clone()
                };
                let rep = discover(&features, &dcfg)?;
                let toks: Vec<usize> = features
                    .iter()
                    .flat_map(|f| rep.labels.get(&f.utterance_id).map(|u| u.frame_tokens()).unwrap_or_default())
                    .collect();
                diagnostics.push(DiscoveryDiagnostics {
                    speaker: sid.clone(),
                    seed,
                    granularity: granularity_key(g),
                    converged: rep.converged,
                    iterations: rep.iterations_run,
                    final_changed_fraction: rep.final_changed_fraction(),
                    nmi: normalized_mutual_information(&toks, &truth)?,
                });
                reports.push(rep);
            }
            discovered.insert(ids.clone(), reports);
        }

        let (targets, data) = if need_tokens {
            let reports = &discovered[&ids];
            let sources: Vec<TokenSource> = reports
                .iter()
                .map(|r| TokenSource {
                    set: &r.models,
                    labels: Some(&r.labels),
                })
                .collect();
            let t = prepare_targets(&ctx.si.phone_hmms, &sources, &partition)?;
            let d = AdaptationData::assemble(&features, &t, ctx.left, ctx.right)?;
            (t, d)
        } else {
            let t = prepare_targets(&ctx.si.phone_hmms, &[], &partition)?;
            let d = AdaptationData::assemble(&features, &t, ctx.left, ctx.right)?;
            (t, d)
        };

        let mut fdlr_post: Option<(Vec<Array2<f64>>, Vec<Array2<f64>>)> = None;
        if need_fdlr {
            let t0 = Instant::now();
            let (m, _) = adapt_fdlr_baseline(&ctx.si.model, &data, &adapt_cfg)?;
            let test_post = phoneme_posteriors(&m, &ctx.test)?;
            if has(Method::Fdlr) {
                let s = score(&test_post, &ctx.test, ctx.si, cfg.decode_penalty)?;
                cells.push(cell(Method::Fdlr, None, s, None, t0.elapsed().as_secs_f64()));
            }
            fdlr_post = Some((phoneme_posteriors(&m, &ctx.dev)?, test_post));
        }
        if has(Method::SpeakerCode) {
            let t0 = Instant::now();
            let (m, _) = adapt_speaker_code_baseline(&ctx.si.model, &data, &adapt_cfg)?;
            let s = score(&phoneme_posteriors(&m, &ctx.test)?, &ctx.test, ctx.si, cfg.decode_penalty)?;
            cells.push(cell(Method::SpeakerCode, None, s, None, t0.elapsed().as_secs_f64()));
        }
        if has(Method::Lightly) {
            let t0 = Instant::now();
            let (m, _, _) =
                adapt_lightly_supervised(&ctx.si.model, &ctx.si.phone_hmms, &ctx.si.log_priors, &data, &adapt_cfg)?;
            let s = score(&phoneme_posteriors(&m, &ctx.test)?, &ctx.test, ctx.si, cfg.decode_penalty)?;
            cells.push(cell(Method::Lightly, None, s, None, t0.elapsed().as_secs_f64()));
        }

        let mut primary_post: Option<(Vec<Array2<f64>>, Vec<Array2<f64>>)> = None;
        if need_ptdnn {
            let grid: Vec<GranularityConfig> =
                if has(Method::Ptdnn) { cfg.granularities.clone() } else { cfg.granularities[..1].to_vec() };
            for (i, g) in grid.iter().enumerate() {
                let t0 = Instant::now();
                let head = token_head_name(g.m, g.n);
                let (m, _) = run_ptdnn(
                    &ctx.si.model,
                    &restrict_data(&data, std::slice::from_ref(&head)),
                    &targets.restrict_token_heads(std::slice::from_ref(&head)),
                    &adapt_cfg,
                )?;
                let test_post = phoneme_posteriors(&m, &ctx.test)?;
                if has(Method::Ptdnn) {
                    let s = score(&test_post, &ctx.test, ctx.si, cfg.decode_penalty)?;
                    cells.push(cell(Method::Ptdnn, Some(granularity_key(*g)), s, None, t0.elapsed().as_secs_f64()));
                }
                if i == 0 {
                    primary_post = Some((phoneme_posteriors(&m, &ctx.dev)?, test_post));
                }
            }
        }
        if has(Method::PtdnnMulti) {
            let t0 = Instant::now();
            let (m, _) = run_ptdnn(&ctx.si.model, &data, &targets, &adapt_cfg)?;
            let s = score(&phoneme_posteriors(&m, &ctx.test)?, &ctx.test, ctx.si, cfg.decode_penalty)?;
            cells.push(cell(Method::PtdnnMulti, Some(MULTI_KEY.into()), s, None, t0.elapsed().as_secs_f64()));
        }
        if has(Method::Fusion) {
            let (p_dev, p_test) = primary_post.as_ref().expect("PTDNN ran");
            let (f_dev, f_test) = fdlr_post.as_ref().expect("fDLR ran");
            let alpha = select_fusion_alpha(p_dev, f_dev, &ctx.dev, &cfg.fusion_alpha_grid)?;
            let fused: Vec<Array2<f64>> =
                p_test.iter().zip(f_test).map(|(a, b)| fuse_posteriors(a, b, alpha)).collect::<Result<_>>()?;
            let s = score(&fused, &ctx.test, ctx.si, cfg.decode_penalty)?;
            cells.push(cell(Method::Fusion, Some(granularity_key(cfg.granularities[0])), s, Some(alpha), 0.0));
        }
    }
    Ok(SeedOutput { cells, diagnostics })
}

/// Picks the alpha whose fusion `alpha·a + (1−alpha)·b` has the lowest dev
/// cross-entropy against the reference states; ties go to the earlier grid
/// entry.
fn select_fusion_alpha(a: &[Array2<f64>], b: &[Array2<f64>], dev: &EvalSet, grid: &[f64]) -> Result<f64> {
    let mut best = (f64::INFINITY, grid[0]);
    for &alpha in grid {
        let fused: Vec<Array2<f64>> = a.iter().zip(b).map(|(x, y)| fuse_posteriors(x, y, alpha)).collect::<Result<_>>()?;
        let ce = cross_entropy_of(&fused, dev);
        if ce < best.0 {
            best = (ce, alpha);
        }
    }
    Ok(best.1)
}

fn cross_entropy_of(posteriors: &[Array2<f64>], set: &EvalSet) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, u) in posteriors.iter().zip(&set.utterances) {
        for (row, &s) in p.rows().into_iter().zip(&u.states) {
            sum -= row[s].max(1e-300).ln();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

fn dev_range(corpus: &SyntheticCorpus) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let s = &corpus.spec;
    let dev = s.adapt_utterances..s.adapt_utterances + s.dev_utterances;
    let test = dev.end..dev.end + s.test_utterances;
    (dev, test)
}

/// Runs every configured (method, speaker, seed, budget) cell.
pub fn run_experiment(cfg: &ExperimentConfig, corpus: &SyntheticCorpus, si: &SiSystem) -> Result<MetricsReport> {
    cfg.validate(corpus)?;
    if si.phone_hmms.len() != corpus.spec.n_phones || si.states_per_phone() != corpus.spec.states_per_phone {
        return Err(Error::Config("SI system does not match the corpus phone inventory".into()));
    }
    let started = Instant::now();
    let (left, right) = splice_context(&si.model.config)?;
    let speakers: Vec<usize> =
        if cfg.speakers.is_empty() { (0..corpus.adapt_speakers.len()).collect() } else { cfg.speakers.clone() };
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let (dev_r, test_r) = dev_range(corpus);
    let mut cells = Vec::new();
    let mut discovery = Vec::new();
    for &s in &speakers {
        let speaker = &corpus.adapt_speakers[s];
        if speaker.utterances.len() < test_r.end {
            return Err(Error::Config(format!("{} has too few utterances", speaker.speaker_id)));
        }
        let dev = eval_set(&speaker.utterances[dev_r.clone()], left, right);
        let test = eval_set(&speaker.utterances[test_r.clone()], left, right);
        let si_score = score(&phoneme_posteriors(&si.model, &test)?, &test, si, cfg.decode_penalty)?;
        let ctx = SpeakerContext {
            corpus,
            speaker,
            si,
            dev,
            test,
            si_score,
            left,
            right,
        };
        let outputs: Vec<Result<SeedOutput>> = if threads <= 1 || cfg.seeds.len() == 1 {
            cfg.seeds.iter().map(|&seed| run_seed(&ctx, cfg, seed)).collect()
        } else {
            let mut results = Vec::with_capacity(cfg.seeds.len());
            for chunk in cfg.seeds.chunks(threads) {
                std::thread::scope(|scope| {
                    let handles: Vec<_> =
                        chunk.iter().map(|&seed| {
                            let ctx = &ctx;
                            scope.spawn(move || run_seed(ctx, cfg, seed))
                        }).collect();
                    for h in handles {
                        results.push(h.join().unwrap_or_else(|_| Err(Error::Config("worker panicked".into()))));
                    }
                });
            }
            results
        };
        for o in outputs {
            let o = o?;
            cells.extend(o.cells);
            discovery.extend(o.diagnostics);
        }
        log::info!("{}: {} cells after {:.1}s", speaker.speaker_id, cells.len(), started.elapsed().as_secs_f64());
    }
    let mut report = MetricsReport {
        config: cfg.to_kv().iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        granularities: cfg.granularities.iter().map(|&g| granularity_key(g)).collect(),
        cells,
        discovery,
        checks: Vec::new(),
        wall_time_s: 0.0,
    };
    report.checks = ordering_checks(&report);
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}
