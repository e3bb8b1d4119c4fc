//! Acoustic token discovery on one synthetic speaker, compared with the
//! generator's phone labels.
//!
//! cargo run --release --example discover_tokens [m] [n]

use ptdnn::discovery::{discover, DiscoveryConfig, GranularityConfig};
use ptdnn::frontend::FeatureSequence;
use ptdnn::harness::{normalized_mutual_information, synthesize_corpus, SyntheticLanguageSpec};

fn main() -> ptdnn::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let g = GranularityConfig::new(*args.first().unwrap_or(&3), *args.get(1).unwrap_or(&8))?;

    let spec = SyntheticLanguageSpec {
        n_si_speakers: 1,
        si_utterances: 1,
        n_adapt_speakers: 1,
        adapt_utterances: 200,
        dev_utterances: 1,
        test_utterances: 1,
        ..Default::default()
    };
    let corpus = synthesize_corpus(&spec, 0)?;
    let speaker = &corpus.adapt_speakers[0];
    let utts = &speaker.utterances[..spec.adapt_utterances];
    let feats: Vec<FeatureSequence> = utts.iter().map(|u| u.features.clone()).collect();
    let frames: usize = feats.iter().map(|f| f.num_frames()).sum();
    println!("{}: {} utterances, {frames} frames, {} true phones", speaker.speaker_id, feats.len(), spec.n_phones);

    let report = discover(&feats, &DiscoveryConfig::new(g, 0))?;
    for (i, f) in report.changed_fractions.iter().enumerate() {
        println!("  iteration {:>2}: {:>6.2}% of frames changed token", i + 1, 100.0 * f);
    }
    println!("{g}: converged={} after {} iterations", report.converged, report.iterations_run);

    let truth: Vec<usize> = utts.iter().flat_map(|u| u.phones(spec.states_per_phone)).collect();
    let tokens = report.labels.frame_tokens_concat();
    let initial = report.initial_labels.frame_tokens_concat();
    println!("NMI with true phones: initial {:.3}, final {:.3}", normalized_mutual_information(&initial, &truth)?, normalized_mutual_information(&tokens, &truth)?);

    let first = &report.labels.utterances[0];
    let phones: Vec<usize> = utts[0].transcript.clone();
    println!("{}: phones {phones:?}", first.utterance_id);
    println!("{}: tokens {:?}", first.utterance_id, first.occupancies.iter().map(|o| o.token_id).collect::<Vec<_>>());
    Ok(())
}
