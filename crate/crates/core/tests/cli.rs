use std::path::Path;
use std::process::Command;

use ptdnn::discovery::read_labels;
use ptdnn::frontend::{encode_wav, load_archive, AudioUtterance};
use ptdnn::kv::KvConfig;
use ptdnn::network::load_model;

fn ptdnn(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_ptdnn")).current_dir(dir).args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        out.status.success(),
        "ptdnn {args:?} failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

const SMALL: &str = "\
spec.n_si_speakers = 2
spec.si_utterances = 24
spec.n_adapt_speakers = 1
spec.adapt_utterances = 20
spec.dev_utterances = 4
spec.test_utterances = 4
si.net.hidden = 12,12
si.epochs = 2
adapt.stage1_epochs = 1
adapt.stage2_epochs = 1
adapt.stage3_epochs = 1
adapt.baseline_epochs = 1
exp.labeled_budgets = 6
exp.granularities = 3x4
exp.seeds = 0
exp.methods = si,fdlr,ptdnn,fusion
";

#[test]
fn dump_defaults_is_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = ptdnn(dir.path(), &["--dump-defaults"]);
    let kv = KvConfig::parse(&text).unwrap();
    for key in ["frontend.n_mels", "discovery.max_iters", "si.net.hidden", "adapt.w_phoneme", "spec.epsilon", "exp.seeds"] {
        assert!(kv.raw(key).is_some(), "{key} missing from --dump-defaults");
    }
    assert_eq!(kv.raw("adapt.w_phoneme"), Some("4"));
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.cfg"), SMALL).unwrap();

    ptdnn(d, &["synth", "--spec", "small.cfg", "--seed", "1", "--out", "syn"]);
    assert_eq!(load_archive(&d.join("syn/ad00.tkfa")).unwrap().len(), 28);

    ptdnn(d, &["train-si", "--features", "syn/si_all.tkfa", "--transcripts", "syn/si_all.transcripts", "--config", "small.cfg", "--out", "si"]);
    assert!(d.join("si/si.ptdn").is_file() && d.join("si/phones.tkhm").is_file());

    ptdnn(d, &["discover", "--features", "syn/ad00.tkfa", "--m", "3", "--n", "4", "--out", "tok"]);
    let (header, labels) = read_labels(&d.join("tok/labels.txt")).unwrap();
    assert_eq!((header.granularity.m, header.granularity.n), (3, 4));
    assert_eq!(labels.utterances.len(), 28);

    let transcripts = std::fs::read_to_string(d.join("syn/ad00.transcripts")).unwrap();
    let lines: Vec<&str> = transcripts.lines().filter(|l| !l.starts_with('#')).collect();
    std::fs::write(d.join("lab.txt"), lines[..5].join("\n")).unwrap();
    let ids: Vec<&str> = lines[5..20].iter().map(|l| l.split_whitespace().next().unwrap()).collect();
    std::fs::write(d.join("unlab.txt"), ids.join("\n")).unwrap();
    for method in ["ptdnn", "fdlr", "spkcode", "lightly"] {
        let out = format!("{method}.ptdn");
        ptdnn(d, &[
            "adapt", "--method", method, "--si", "si", "--features", "syn/ad00.tkfa", "--tokens", "tok", "--labeled", "lab.txt",
            "--unlabeled", "unlab.txt", "--config", "small.cfg", "--out", &out,
        ]);
        let model = load_model(&d.join(&out)).unwrap();
        assert_eq!(model.token_head_names().len(), usize::from(method == "ptdnn"), "{method}");
    }

    let stdout = ptdnn(d, &["evaluate", "--config", "small.cfg", "--out", "report"]);
    assert!(stdout.contains("table1.csv"));
    for f in ["table1.csv", "table2.csv", "fig2.csv", "report.json"] {
        assert!(d.join("report").join(f).is_file(), "{f}");
    }
}

#[test]
fn discover_grid_writes_one_directory_per_granularity() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.cfg"), SMALL).unwrap();
    ptdnn(d, &["synth", "--spec", "small.cfg", "--out", "syn"]);
    std::fs::write(d.join("grid.cfg"), "features = syn/ad00.tkfa\nout = grid\ngranularities = 3x4,5x4\ndiscovery.max_iters = 5\n").unwrap();
    ptdnn(d, &["discover-grid", "--grid", "grid.cfg"]);
    for g in ["3x4", "5x4"] {
        assert!(d.join("grid").join(g).join("tokens.tkhm").is_file(), "{g}");
    }
}

#[test]
fn features_command_reads_a_wav_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::create_dir(d.join("wav")).unwrap();
    for (k, id) in ["b", "a"].iter().enumerate() {
        let samples = (0..8000).map(|i| ((i as f64 * 0.05 * (k + 1) as f64).sin() * 8000.0) as i16).collect();
        let u = AudioUtterance {
            id: id.to_string(),
            samples,
            sample_rate_hz: 16_000,
        };
        encode_wav(&d.join("wav").join(format!("{id}.wav")), &u).unwrap();
    }
    ptdnn(d, &["features", "--in", "wav", "--out", "feats.tkfa"]);
    let feats = load_archive(&d.join("feats.tkfa")).unwrap();
    let ids: Vec<&str> = feats.iter().map(|f| f.utterance_id.as_str()).collect();
    assert_eq!(ids, ["a", "b"]);
    assert!(feats.iter().all(|f| f.dim() == 39 && f.num_frames() == 48));
}

#[test]
fn adapt_without_si_bundle_points_at_train_si() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ptdnn"))
        .current_dir(tmp.path())
        .args(["adapt", "--method", "fdlr", "--si", "nope", "--features", "x.tkfa", "--labeled", "l.txt", "--out", "m.ptdn"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-si"));
}
