//! Synthetic-language experiments: corpus generation with ground truth,
//! the speaker-independent system, method comparison, metrics and reports.

pub mod experiment;
pub mod metrics;
pub mod report;
pub mod si;
pub mod synth;

pub use experiment::{
    desk_adaptation_config, ordering_checks, run_experiment, split_adaptation_pool, DiscoveryDiagnostics,
    ExperimentConfig, Method, MetricCell, MetricsReport, OrderingCheck,
};
pub use metrics::{edit_distance, frame_accuracy, median, normalized_mutual_information, unit_accuracy, unit_error_rate};
pub use report::{emit_report, load_report, read_csv, ReportFormat};
pub use si::{
    build_si_system, load_si_bundle, save_si_bundle, splice_context, train_phone_hmms, SiBundle, SiConfig, SiSystem,
};
pub use synth::{synthesize_corpus, SpeakerCorpus, SynthMode, SyntheticCorpus, SyntheticLanguageSpec, SyntheticUtterance};
