//! Weakly supervised adaptation of an SI model to one synthetic speaker:
//! 50 transcribed utterances plus the rest of the pool untranscribed, with
//! discovered tokens as the auxiliary targets. Compares PTDNN with fDLR.
//!
//! cargo run --release --example adapt_speaker

use ndarray::Array2;

use ptdnn::adapt::{adapt_fdlr_baseline, prepare_targets, run_ptdnn, AdaptationData, TokenSource};
use ptdnn::discovery::{discover, DiscoveryConfig, GranularityConfig};
use ptdnn::frontend::{splice_matrix, CorpusPartition, LabeledUtterance};
use ptdnn::harness::{
    build_si_system, desk_adaptation_config, frame_accuracy, split_adaptation_pool, synthesize_corpus, SiConfig,
    SyntheticLanguageSpec, SyntheticUtterance,
};
use ptdnn::network::{argmax_rows, PtdnnModel, PHONEME_HEAD};

fn accuracy(model: &PtdnnModel, test: &[SyntheticUtterance], ctx: usize) -> ptdnn::Result<f64> {
    let (mut hyp, mut refs) = (Vec::new(), Vec::new());
    for u in test {
        let x: Array2<f64> = splice_matrix(&u.features.frames, ctx, ctx);
        hyp.extend(argmax_rows(&model.forward_head(x.view(), PHONEME_HEAD)?));
        refs.extend(&u.states);
    }
    frame_accuracy(&hyp, &refs)
}

fn main() -> ptdnn::Result<()> {
    let spec = SyntheticLanguageSpec {
        n_adapt_speakers: 1,
        ..Default::default()
    };
    let corpus = synthesize_corpus(&spec, 1)?;
    let si_cfg = SiConfig::default();
    let train: Vec<LabeledUtterance> = corpus
        .si_speakers
        .iter()
        .flat_map(|s| &s.utterances)
        .map(|u| LabeledUtterance {
            features: u.features.clone(),
            transcript: u.transcript.clone(),
        })
        .collect();
    let si = build_si_system(&train, spec.n_phones, &si_cfg)?;
    let (ctx, _) = si_cfg.context()?;

    let speaker = &corpus.adapt_speakers[0];
    let pool = spec.adapt_utterances;
    let test = &speaker.utterances[pool + spec.dev_utterances..];
    let (labeled, unlabeled) = split_adaptation_pool(speaker, pool, 50, pool - 50, 0)?;
    let partition = CorpusPartition {
        labeled,
        unlabeled,
        ..Default::default()
    };
    println!("{}: {} labeled, {} unlabeled, {} test utterances", speaker.speaker_id, partition.labeled.len(), partition.unlabeled.len(), test.len());

    let features = partition.adaptation_features();
    let tokens = discover(&features, &DiscoveryConfig::new(GranularityConfig { m: 3, n: 8 }, 0))?;
    println!("discovered {} tokens in {} iterations", tokens.models.len(), tokens.iterations_run);
    let sources = [TokenSource {
        set: &tokens.models,
        labels: Some(&tokens.labels),
    }];
    let targets = prepare_targets(&si.phone_hmms, &sources, &partition)?;
    let data = AdaptationData::assemble(&features, &targets, ctx, ctx)?;

    let cfg = desk_adaptation_config();
    let (fdlr, _) = adapt_fdlr_baseline(&si.model, &data.labeled_only(), &cfg)?;
    let (ptdnn, stages) = run_ptdnn(&si.model, &data, &targets, &cfg)?;
    for s in &stages {
        let last = s.epochs.last().map_or(f64::NAN, |e| e.total);
        println!("  {:<7} trains {:?}, final loss {last:.3}", s.stage, s.trainable);
    }
    println!("frame accuracy on {} test data:", speaker.speaker_id);
    println!("  SI     {:.3}", accuracy(&si.model, test, ctx)?);
    println!("  fDLR   {:.3}", accuracy(&fdlr, test, ctx)?);
    println!("  PTDNN  {:.3}", accuracy(&ptdnn, test, ctx)?);
    Ok(())
}
