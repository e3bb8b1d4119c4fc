//! Synthetic corpus plus speaker-independent system: phone HMMs from a flat
//! start, forced alignments checked against the generator, and the SI
//! network saved as a bundle.
//!
//! cargo run --release --example synth_si

use ptdnn::frontend::LabeledUtterance;
use ptdnn::harness::{
    build_si_system, frame_accuracy, load_si_bundle, save_si_bundle, synthesize_corpus, SiBundle, SiConfig,
    SyntheticLanguageSpec,
};
use ptdnn::network::{argmax_rows, PHONEME_HEAD};

fn main() -> ptdnn::Result<()> {
    let spec = SyntheticLanguageSpec {
        si_utterances: 60,
        n_adapt_speakers: 1,
        adapt_utterances: 10,
        dev_utterances: 10,
        test_utterances: 40,
        ..Default::default()
    };
    let corpus = synthesize_corpus(&spec, 7)?;
    for s in corpus.si_speakers.iter().chain(&corpus.adapt_speakers) {
        let frames: usize = s.utterances.iter().map(|u| u.features.num_frames()).sum();
        println!("{}: {} utterances, {frames} frames", s.speaker_id, s.utterances.len());
    }

    let train: Vec<LabeledUtterance> = corpus
        .si_speakers
        .iter()
        .flat_map(|s| &s.utterances)
        .map(|u| LabeledUtterance {
            features: u.features.clone(),
            transcript: u.transcript.clone(),
        })
        .collect();
    let cfg = SiConfig::default();
    let si = build_si_system(&train, spec.n_phones, &cfg)?;
    let losses: Vec<String> = si.report.epochs.iter().map(|e| format!("{:.3}", e.total)).collect();
    println!("SI training loss by epoch: {}", losses.join(" "));

    // alignment quality against the generator's states
    let truth: Vec<usize> = corpus.si_speakers.iter().flat_map(|s| &s.utterances).flat_map(|u| u.states.clone()).collect();
    let aligned: Vec<usize> = si.alignments.iter().flat_map(|(_, a)| a.clone()).collect();
    println!("forced alignment agrees with the generator on {:.1}% of frames", 100.0 * frame_accuracy(&aligned, &truth)?);

    // the SI model on a new speaker, before any adaptation
    let (left, right) = cfg.context()?;
    let speaker = &corpus.adapt_speakers[0];
    let (mut hyp, mut refs) = (Vec::new(), Vec::new());
    for u in speaker.utterances.iter().rev().take(spec.test_utterances) {
        let x = ptdnn::frontend::splice_matrix(&u.features.frames, left, right);
        hyp.extend(argmax_rows(&si.model.forward_head(x.view(), PHONEME_HEAD)?));
        refs.extend(&u.states);
    }
    println!("SI frame accuracy on unseen speaker {}: {:.3}", speaker.speaker_id, frame_accuracy(&hyp, &refs)?);

    let dir = tempfile::tempdir()?;
    save_si_bundle(dir.path(), &SiBundle::from(&si))?;
    let bundle = load_si_bundle(dir.path())?;
    println!("bundle: {} phone models, {} state priors", bundle.phone_hmms.len(), bundle.log_priors.len());
    Ok(())
}
