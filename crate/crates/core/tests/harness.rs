mod common;

use std::sync::OnceLock;

use ptdnn::discovery::GranularityConfig;
use ptdnn::frontend::{splice_matrix, LabeledUtterance};
use ptdnn::harness::report::{read_csv, table1, NA};
use ptdnn::harness::{
    build_si_system, emit_report, frame_accuracy, load_si_bundle, run_experiment, synthesize_corpus, ExperimentConfig,
    Method, ReportFormat, SiConfig, SiSystem, SyntheticCorpus, SyntheticLanguageSpec,
};
use ptdnn::network::{argmax_rows, NetConfig, PHONEME_HEAD};

fn labeled(utts: &[ptdnn::harness::SyntheticUtterance]) -> Vec<LabeledUtterance> {
    utts.iter()
        .map(|u| LabeledUtterance {
            features: u.features.clone(),
            transcript: u.transcript.clone(),
        })
        .collect()
}

/// Default separation and speaker shift with fewer utterances.
fn spec() -> SyntheticLanguageSpec {
    SyntheticLanguageSpec {
        si_utterances: 80,
        adapt_utterances: 40,
        dev_utterances: 10,
        test_utterances: 10,
        ..Default::default()
    }
}

/// SI system trained on the first 60 utterances of each SI speaker; the
/// remaining 20 are held out.
fn si_fixture() -> &'static (SyntheticCorpus, SiSystem) {
    static F: OnceLock<(SyntheticCorpus, SiSystem)> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = synthesize_corpus(&spec(), 21).unwrap();
        let train: Vec<LabeledUtterance> = corpus.si_speakers.iter().flat_map(|s| labeled(&s.utterances[..60])).collect();
        let si = build_si_system(&train, corpus.spec.n_phones, &SiConfig::default()).unwrap();
        (corpus, si)
    })
}

#[test]
fn bayes_classifier_on_generator_parameters_reaches_95_percent() {
    let corpus = synthesize_corpus(&spec(), 3).unwrap();
    for s in corpus.si_speakers.iter().chain(&corpus.adapt_speakers) {
        let acc = common::bayes_frame_accuracy(&corpus, s);
        assert!(acc >= 0.95, "{}: Bayes accuracy {acc:.4}", s.speaker_id);
    }
}

#[test]
fn speaker_transforms_are_well_conditioned() {
    let corpus = synthesize_corpus(&spec(), 4).unwrap();
    let d = corpus.spec.dim;
    for s in corpus.si_speakers.iter().chain(&corpus.adapt_speakers) {
        let a = nalgebra::DMatrix::from_fn(d, d, |i, j| s.transform.a[[i, j]]);
        let sv = a.singular_values();
        let lo = sv.min();
        let hi = sv.max();
        // A = I + E with |E| < 1 keeps every singular value in (0, 2)
        assert!(lo > 0.05 && hi < 1.95, "{}: singular values in [{lo:.3}, {hi:.3}]", s.speaker_id);
        let e = &a - nalgebra::DMatrix::<f64>::identity(d, d);
        let rms = e.norm() / (d as f64).sqrt();
        assert!((rms - corpus.spec.epsilon).abs() < 1e-9 || e.singular_values().max() <= 0.9 + 1e-9);
    }
}

#[test]
fn si_network_beats_chance_fivefold_on_held_out_si_data() {
    let (corpus, si) = si_fixture();
    let (left, right) = SiConfig::default().context().unwrap();
    let (mut hyp, mut truth) = (Vec::new(), Vec::new());
    for s in &corpus.si_speakers {
        for u in &s.utterances[60..] {
            let x = splice_matrix(&u.features.frames, left, right);
            hyp.extend(argmax_rows(&si.model.forward_head(x.view(), PHONEME_HEAD).unwrap()));
            truth.extend(&u.states);
        }
    }
    let acc = frame_accuracy(&hyp, &truth).unwrap();
    let chance = 1.0 / corpus.spec.num_states() as f64;
    assert!(acc >= 5.0 * chance, "held-out accuracy {acc:.3} vs chance {chance:.3}");
}

#[test]
fn forced_alignment_boundaries_track_the_generator() {
    let (corpus, si) = si_fixture();
    let m = corpus.spec.states_per_phone;
    let truth: std::collections::HashMap<&str, &Vec<usize>> = corpus
        .si_speakers
        .iter()
        .flat_map(|s| &s.utterances)
        .map(|u| (u.features.utterance_id.as_str(), &u.states))
        .collect();
    let (mut close, mut total) = (0usize, 0usize);
    for (id, aligned) in &si.alignments {
        let ours = common::phone_boundaries(&aligned.iter().map(|s| s / m).collect::<Vec<_>>());
        let gold = common::phone_boundaries(&truth[id.as_str()].iter().map(|s| s / m).collect::<Vec<_>>());
        assert_eq!(ours.len(), gold.len(), "{id}: transcript length differs");
        total += gold.len();
        close += ours.iter().zip(&gold).filter(|(a, b)| a.abs_diff(**b) <= 2).count();
    }
    let frac = close as f64 / total as f64;
    assert!(frac >= 0.9, "{close}/{total} boundaries within 2 frames");
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let a = synthesize_corpus(&spec(), 8).unwrap();
    let b = synthesize_corpus(&spec(), 8).unwrap();
    let c = synthesize_corpus(&spec(), 9).unwrap();
    let frames = |x: &SyntheticCorpus| x.adapt_speakers[0].utterances[0].features.frames.clone();
    assert_eq!(frames(&a), frames(&b));
    assert_eq!(a.language.means, b.language.means);
    assert_ne!(frames(&a), frames(&c));
}

fn tiny() -> (SyntheticCorpus, SiSystem) {
    let spec = SyntheticLanguageSpec {
        n_si_speakers: 2,
        si_utterances: 30,
        n_adapt_speakers: 1,
        adapt_utterances: 30,
        dev_utterances: 6,
        test_utterances: 6,
        ..Default::default()
    };
    let corpus = synthesize_corpus(&spec, 2).unwrap();
    let train: Vec<LabeledUtterance> = corpus.si_speakers.iter().flat_map(|s| labeled(&s.utterances)).collect();
    let cfg = SiConfig {
        net: NetConfig {
            hidden: vec![16, 16],
            ..NetConfig::desk_scale()
        },
        epochs: 2,
        ..Default::default()
    };
    let si = build_si_system(&train, spec.n_phones, &cfg).unwrap();
    (corpus, si)
}

fn quick_experiment(methods: Vec<Method>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        labeled_budgets: vec![10, 5],
        granularities: vec![GranularityConfig { m: 3, n: 4 }, GranularityConfig { m: 3, n: 6 }],
        methods,
        seeds: vec![0, 1],
        fusion_alpha_grid: vec![0.0, 0.5, 1.0],
        ..Default::default()
    };
    let a = &mut cfg.adaptation;
    (a.stage1_epochs, a.stage2_epochs, a.stage3_epochs, a.baseline_epochs) = (1, 1, 1, 1);
    cfg
}

#[test]
fn si_only_run_reports_si_rows_only() {
    let (corpus, si) = tiny();
    let report = run_experiment(&quick_experiment(vec![Method::Si]), &corpus, &si).unwrap();
    assert_eq!(report.methods(), vec![Method::Si]);
    assert_eq!(report.cells.len(), 2 * 2);
    assert!(report.discovery.is_empty());
    let t1 = table1(&report);
    assert_eq!(t1.len(), 2);
    assert_eq!(t1[1][0], "SI");
}

#[test]
fn every_configured_cell_is_present_or_na() {
    let (corpus, si) = tiny();
    let methods = vec![Method::Si, Method::Fdlr, Method::SpeakerCode, Method::Lightly, Method::Ptdnn, Method::PtdnnMulti, Method::Fusion];
    let cfg = quick_experiment(methods.clone());
    let report = run_experiment(&cfg, &corpus, &si).unwrap();
    for &l in &cfg.labeled_budgets {
        for &seed in &cfg.seeds {
            for &m in &methods {
                let n = report.cells.iter().filter(|c| c.method == m && c.labeled == l && c.seed == seed).count();
                let want = if m == Method::Ptdnn { cfg.granularities.len() } else { 1 };
                assert_eq!(n, want, "{m:?} at {l} labeled, seed {seed}");
            }
        }
    }
    for c in &report.cells {
        assert!((0.0..=1.0).contains(&c.frame_accuracy) && (0.0..=1.0).contains(&c.unit_accuracy));
        assert_eq!(c.fusion_alpha.is_some(), c.method == Method::Fusion);
    }
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path(), &[ReportFormat::Csv]).unwrap();
    let t2 = read_csv(&dir.path().join("table2.csv")).unwrap();
    assert_eq!(t2.len(), 1 + methods.len());
    let fig2 = read_csv(&dir.path().join("fig2.csv")).unwrap();
    assert_eq!(fig2.len(), 1 + cfg.granularities.len());
    for row in fig2.iter().skip(1) {
        let converged = report.granularity_converged(&row[0]);
        assert_eq!(row[4] == NA, !converged, "{row:?}");
    }
    assert!(!report.checks.is_empty());
}

#[test]
fn experiment_is_deterministic() {
    let (corpus, si) = tiny();
    let cfg = ExperimentConfig {
        labeled_budgets: vec![10],
        granularities: vec![GranularityConfig { m: 3, n: 4 }],
        seeds: vec![3],
        ..quick_experiment(vec![Method::Fdlr, Method::Ptdnn])
    };
    let a = run_experiment(&cfg, &corpus, &si).unwrap();
    let b = run_experiment(&cfg, &corpus, &si).unwrap();
    let key = |r: &ptdnn::harness::MetricsReport| -> Vec<(f64, f64)> { r.cells.iter().map(|c| (c.frame_accuracy, c.unit_accuracy)).collect() };
    assert_eq!(key(&a), key(&b));
}

#[test]
fn missing_si_bundle_names_the_step_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_si_bundle(dir.path()).unwrap_err().to_string();
    assert!(err.contains("train-si"), "{err}");
}
