//! A reduced run of the full comparison, written out as the CSV tables and
//! JSON report, with the ordering checks it evaluates.
//!
//! cargo run --release --example experiment [seeds]

use ptdnn::discovery::GranularityConfig;
use ptdnn::frontend::LabeledUtterance;
use ptdnn::harness::report::table1;
use ptdnn::harness::{
    build_si_system, emit_report, run_experiment, synthesize_corpus, ExperimentConfig, Method, ReportFormat, SiConfig,
    SyntheticLanguageSpec,
};

fn main() -> ptdnn::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let spec = SyntheticLanguageSpec {
        n_adapt_speakers: 1,
        ..Default::default()
    };
    let corpus = synthesize_corpus(&spec, 0)?;
    let train: Vec<LabeledUtterance> = corpus
        .si_speakers
        .iter()
        .flat_map(|s| &s.utterances)
        .map(|u| LabeledUtterance {
            features: u.features.clone(),
            transcript: u.transcript.clone(),
        })
        .collect();
    let si = build_si_system(&train, spec.n_phones, &SiConfig::default())?;

    let cfg = ExperimentConfig {
        labeled_budgets: vec![50, 10],
        granularities: vec![GranularityConfig { m: 3, n: 8 }, GranularityConfig { m: 3, n: 16 }],
        methods: vec![Method::Si, Method::Fdlr, Method::Lightly, Method::Ptdnn, Method::Fusion],
        seeds: (0..seeds).collect(),
        ..Default::default()
    };
    let report = run_experiment(&cfg, &corpus, &si)?;

    for row in table1(&report) {
        println!("{}", row.join(" | "));
    }
    for c in &report.checks {
        println!("[{}] {} ({})", if c.passed { "pass" } else { "fail" }, c.name, c.detail);
    }
    let out = std::env::temp_dir().join("ptdnn-experiment");
    for p in emit_report(&report, &out, &[ReportFormat::Csv, ReportFormat::Json])? {
        println!("wrote {}", p.display());
    }
    println!("{:.0}s total", report.wall_time_s);
    Ok(())
}
