use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ptdnn::adapt::{
    adapt_fdlr_baseline, adapt_lightly_supervised, adapt_speaker_code_baseline, prepare_targets, run_ptdnn,
    AdaptationConfig, AdaptationData, TokenSource,
};
use ptdnn::discovery::{
    discover, read_labels, write_labels, DiscoveryConfig, DiscoveryReport, GranularityConfig, LabelsHeader,
};
use ptdnn::frontend::{
    load_archive, process_wav_dir, read_id_list, read_transcripts, render_transcripts, save_archive, CorpusPartition,
    FeatureSequence, FrontendConfig, LabeledUtterance,
};
use ptdnn::harness::{
    build_si_system, emit_report, load_si_bundle, run_experiment, save_si_bundle, splice_context, synthesize_corpus,
    ExperimentConfig, ReportFormat, SiBundle, SiConfig, SyntheticLanguageSpec,
};
use ptdnn::hmm::{load_hmm_set, save_hmm_set};
use ptdnn::kv::KvConfig;
use ptdnn::network::save_model;
use ptdnn::{Error, Result};

#[derive(Parser)]
#[command(name = "ptdnn", version, about = "Personalized acoustic-model adaptation with discovered acoustic tokens")]
struct Cli {
    /// Print every configuration key with its default value and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdaptMethod {
    Ptdnn,
    Fdlr,
    Spkcode,
    Lightly,
}

#[derive(Subcommand)]
enum Command {
    /// MFCC + deltas + CMVN for a directory of WAV files.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Acoustic token discovery at one granularity.
    Discover {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Discovery over a grid of granularities described in a config file.
    DiscoverGrid {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Adapt an SI model to one speaker.
    Adapt {
        #[arg(long, value_enum)]
        method: AdaptMethod,
        /// SI bundle directory (or its si.ptdn file).
        #[arg(long)]
        si: PathBuf,
        /// Feature archive holding the listed utterances.
        #[arg(long)]
        features: PathBuf,
        /// Discovery output directories, comma separated.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<PathBuf>,
        /// `utt_id phone phone ...` lines.
        #[arg(long)]
        labeled: PathBuf,
        /// Utterance ids, one per line.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with ground truth.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train phone HMMs and the SI network from transcribed features.
    TrainSi {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        n_phones: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the synthetic comparison and write the report tables.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::load(p),
        None => Ok(KvConfig::new()),
    }
}

fn default_config() -> KvConfig {
    let mut kv = KvConfig::new();
    kv.nest("frontend", &FrontendConfig::default().to_kv());
    kv.nest("discovery", &DiscoveryConfig::new(GranularityConfig { m: 3, n: 50 }, 0).to_kv());
    kv.nest("si", &SiConfig::default().to_kv());
    kv.nest("adapt", &ptdnn::harness::desk_adaptation_config().to_kv());
    kv.nest("spec", &SyntheticLanguageSpec::default().to_kv());
    kv.nest("exp", &ExperimentConfig::default().to_kv());
    kv.set("corpus_seed", 0);
    kv.set("formats", "csv,json");
    kv
}

/// Merges the `discovery.*` section over defaults.
fn discovery_config(kv: &KvConfig, g: GranularityConfig, seed: u64) -> Result<DiscoveryConfig> {
    let mut base = DiscoveryConfig::new(g, seed).to_kv();
    base.merge(&kv.section("discovery"));
    let mut cfg = DiscoveryConfig::from_kv(&base)?;
    cfg.granularity = g;
    cfg.seed = seed;
    Ok(cfg)
}

fn write_discovery(dir: &Path, report: &DiscoveryReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = LabelsHeader {
        granularity: report.granularity,
        seed: report.seed,
        iteration: report.iterations_run,
    };
    write_labels(&dir.join("labels.txt"), &header, &report.labels)?;
    save_hmm_set(&dir.join("tokens.tkhm"), &report.models)?;
    let summary = serde_json::json!({
        "m": report.granularity.m,
        "n": report.granularity.n,
        "seed": report.seed,
        "iterations": report.iterations_run,
        "changed_fractions": report.changed_fractions,
        "converged": report.converged,
        "variance_floor": report.variance_floor,
        "flagged_utterances": report.flagged_utterances,
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{}: {} iterations, converged={}, {} tokens in use",
        report.granularity,
        report.iterations_run,
        report.converged,
        report.models.len()
    );
    Ok(())
}

fn labeled_from(features: &[FeatureSequence], transcripts: &[(String, Vec<usize>)]) -> Result<Vec<LabeledUtterance>> {
    Ok(CorpusPartition::from_lists(features, transcripts, &[])?.labeled)
}

fn run(cli: Cli) -> Result<()> {
    if cli.dump_defaults {
        print!("{}", default_config());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given; see --help".into()));
    };
    match command {
        Command::Features { input, out, config } => {
            let cfg = FrontendConfig::from_kv(&load_config(config.as_deref())?.section("frontend"))?;
            let feats = process_wav_dir(&input, &cfg)?;
            save_archive(&out, &feats)?;
            println!("{} utterances -> {}", feats.len(), out.display());
        }
        Command::Discover {
            features,
            m,
            n,
            seed,
            out,
            config,
        } => {
            let kv = load_config(config.as_deref())?;
            let corpus = load_archive(&features)?;
            let cfg = discovery_config(&kv, GranularityConfig::new(m, n)?, seed)?;
            write_discovery(&out, &discover(&corpus, &cfg)?)?;
        }
        Command::DiscoverGrid { grid } => {
            let kv = KvConfig::load(&grid)?;
            let features = kv
                .raw("features")
                .ok_or_else(|| Error::Config("grid file needs `features = <archive>`".into()))?;
            let out = PathBuf::from(kv.raw("out").unwrap_or("tokens"));
            let seed: u64 = kv.get_or("seed", 0)?;
            let grid: Vec<GranularityConfig> = kv.get_list_or("granularities", ptdnn::discovery::full_scale_grid())?;
            let corpus = load_archive(Path::new(features))?;
            for g in grid {
                let cfg = discovery_config(&kv, g, seed)?;
                write_discovery(&out.join(format!("{}x{}", g.m, g.n)), &discover(&corpus, &cfg)?)?;
            }
        }
        Command::Adapt {
            method,
            si,
            features,
            tokens,
            labeled,
            unlabeled,
            config,
            out,
        } => {
            let kv = load_config(config.as_deref())?;
            let mut base = ptdnn::harness::desk_adaptation_config().to_kv();
            base.merge(&kv.section("adapt"));
            let cfg = AdaptationConfig::from_kv(&base)?;
            let bundle = load_si_bundle(&si)?;
            let archive = load_archive(&features)?;
            let lab = read_transcripts(&labeled)?;
            let unlab = match &unlabeled {
                Some(p) => read_id_list(p)?,
                None => Vec::new(),
            };
            let partition = CorpusPartition::from_lists(&archive, &lab, &unlab)?;
            let mut token_sets = Vec::new();
            for dir in &tokens {
                let set_path = dir.join("tokens.tkhm");
                if !set_path.is_file() {
                    return Err(Error::Missing(format!(
                        "{} not found; run `ptdnn discover` for this granularity first",
                        set_path.display()
                    )));
                }
                let labels = read_labels(&dir.join("labels.txt")).ok().map(|(_, l)| l);
                token_sets.push((load_hmm_set(&set_path)?, labels));
            }
            if matches!(method, AdaptMethod::Ptdnn) && token_sets.is_empty() {
                return Err(Error::Missing("PTDNN needs --tokens; run `ptdnn discover` first".into()));
            }
            let sources: Vec<TokenSource> = token_sets
                .iter()
                .map(|(set, labels)| TokenSource {
                    set,
                    labels: labels.as_ref(),
                })
                .collect();
            let targets = prepare_targets(&bundle.phone_hmms, &sources, &partition)?;
            let (left, right) = splice_context(&bundle.model.config)?;
            let data = AdaptationData::assemble(&partition.adaptation_features(), &targets, left, right)?;
            let (model, reports) = match method {
                AdaptMethod::Ptdnn => run_ptdnn(&bundle.model, &data, &targets, &cfg)?,
                AdaptMethod::Fdlr => {
                    let (m, r) = adapt_fdlr_baseline(&bundle.model, &data, &cfg)?;
                    (m, vec![r])
                }
                AdaptMethod::Spkcode => {
                    let (m, r) = adapt_speaker_code_baseline(&bundle.model, &data, &cfg)?;
                    (m, vec![r])
                }
                AdaptMethod::Lightly => {
                    let (m, r, n) =
                        adapt_lightly_supervised(&bundle.model, &bundle.phone_hmms, &bundle.log_priors, &data, &cfg)?;
                    println!("{n} pseudo-labeled utterances");
                    (m, vec![r])
                }
            };
            save_model(&out, &model)?;
            let log_path = out.with_extension("log.json");
            fs::write(&log_path, serde_json::to_string_pretty(&reports)?)?;
            for r in &reports {
                let last = r.epochs.last().map_or(f64::NAN, |e| e.total);
                println!("{}: {} epochs, final loss {last:.4}, {:.1}s", r.stage, r.epochs.len(), r.wall_time_s);
            }
            if !targets.excluded.is_empty() {
                println!("excluded {} utterances without an alignment", targets.excluded.len());
            }
        }
        Command::Synth { spec, seed, out } => {
            let kv = load_config(spec.as_deref())?;
            let spec = SyntheticLanguageSpec::from_kv(&kv.section("spec"))?;
            let corpus = synthesize_corpus(&spec, seed)?;
            fs::create_dir_all(&out)?;
            let mut cfg = KvConfig::new();
            cfg.nest("spec", &spec.to_kv());
            cfg.set("corpus_seed", seed);
            fs::write(out.join("spec.cfg"), cfg.to_string())?;
            for (name, speakers) in [("si", &corpus.si_speakers), ("adapt", &corpus.adapt_speakers)] {
                for s in speakers.iter() {
                    let feats: Vec<FeatureSequence> = s.utterances.iter().map(|u| u.features.clone()).collect();
                    save_archive(&out.join(format!("{}.tkfa", s.speaker_id)), &feats)?;
                    let tr = render_transcripts(
                        s.utterances.iter().map(|u| (u.features.utterance_id.as_str(), u.transcript.as_slice())),
                    );
                    fs::write(out.join(format!("{}.transcripts", s.speaker_id)), tr)?;
                    let al = render_transcripts(
                        s.utterances.iter().map(|u| (u.features.utterance_id.as_str(), u.states.as_slice())),
                    );
                    fs::write(out.join(format!("{}.states", s.speaker_id)), al)?;
                }
                println!("{} {name} speakers", speakers.len());
            }
            // pooled SI training set for `train-si`
            let si: Vec<FeatureSequence> =
                corpus.si_speakers.iter().flat_map(|s| s.utterances.iter().map(|u| u.features.clone())).collect();
            save_archive(&out.join("si_all.tkfa"), &si)?;
            let tr = render_transcripts(corpus.si_speakers.iter().flat_map(|s| {
                s.utterances.iter().map(|u| (u.features.utterance_id.as_str(), u.transcript.as_slice()))
            }));
            fs::write(out.join("si_all.transcripts"), tr)?;
            println!("wrote {}", out.display());
        }
        Command::TrainSi {
            features,
            transcripts,
            n_phones,
            config,
            out,
        } => {
            let kv = load_config(config.as_deref())?;
            let cfg = SiConfig::from_kv(&kv.section("si"))?;
            let archive = load_archive(&features)?;
            let tr = read_transcripts(&transcripts)?;
            let n = n_phones.unwrap_or_else(|| tr.iter().flat_map(|(_, p)| p.iter()).max().map_or(0, |m| m + 1));
            let utts = labeled_from(&archive, &tr)?;
            let si = build_si_system(&utts, n, &cfg)?;
            save_si_bundle(&out, &SiBundle::from(&si))?;
            let last = si.report.epochs.last().map_or(f64::NAN, |e| e.total);
            println!(
                "{} phones x {} states, {} utterances, final loss {last:.4} -> {}",
                n,
                cfg.states_per_phone,
                si.alignments.len(),
                out.display()
            );
        }
        Command::Evaluate { config, out } => {
            let kv = load_config(config.as_deref())?;
            let spec = SyntheticLanguageSpec::from_kv(&kv.section("spec"))?;
            let exp = ExperimentConfig::from_kv(&kv.section("exp"))?;
            let si_cfg = SiConfig::from_kv(&kv.section("si"))?;
            let corpus = synthesize_corpus(&spec, kv.get_or("corpus_seed", 0)?)?;
            let si = {
                let utts: Vec<LabeledUtterance> = corpus
                    .si_speakers
                    .iter()
                    .flat_map(|s| &s.utterances)
                    .map(|u| LabeledUtterance {
                        features: u.features.clone(),
                        transcript: u.transcript.clone(),
                    })
                    .collect();
                build_si_system(&utts, spec.n_phones, &si_cfg)?
            };
            let report = run_experiment(&exp, &corpus, &si)?;
            let formats: Vec<ReportFormat> = kv.get_list_or("formats", vec![ReportFormat::Csv, ReportFormat::Json])?;
            for p in emit_report(&report, &out, &formats)? {
                println!("wrote {}", p.display());
            }
            for c in &report.checks {
                println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
