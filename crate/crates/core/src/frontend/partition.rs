//! Per-speaker split of utterances into labeled, unlabeled, dev and test sets.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};

/// Features with a phone transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance {
    pub features: FeatureSequence,
    pub transcript: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusPartition {
    pub labeled: Vec<LabeledUtterance>,
    pub unlabeled: Vec<FeatureSequence>,
    pub dev: Vec<LabeledUtterance>,
    pub test: Vec<LabeledUtterance>,
}

impl CorpusPartition {
    /// Checks that the four sets share no utterance id.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let ids = self
            .labeled
            .iter()
            .map(|u| &u.features.utterance_id)
            .chain(self.unlabeled.iter().map(|f| &f.utterance_id))
            .chain(self.dev.iter().map(|u| &u.features.utterance_id))
            .chain(self.test.iter().map(|u| &u.features.utterance_id));
        for id in ids {
            if !seen.insert(id) {
                return Err(Error::Config(format!("utterance {id} appears in more than one set")));
            }
        }
        Ok(())
    }

    /// Labeled followed by unlabeled features: the adaptation corpus.
    pub fn adaptation_features(&self) -> Vec<FeatureSequence> {
        self.labeled
            .iter()
            .map(|u| u.features.clone())
            .chain(self.unlabeled.iter().cloned())
            .collect()
    }
}

/// Parses `utt_id phone phone ...` lines; `#` starts a comment line.
pub fn parse_transcripts(text: &str) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("non-empty line").to_string();
        let phones = fields
            .map(|f| {
                f.parse()
                    .map_err(|_| Error::Format(format!("transcript line {}: bad phone id {f:?}", lineno + 1)))
            })
            .collect::<Result<Vec<usize>>>()?;
        out.push((id, phones));
    }
    Ok(out)
}

pub fn render_transcripts<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut out = String::new();
    for (id, phones) in entries {
        out.push_str(id);
        for p in phones {
            out.push(' ');
            out.push_str(&p.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_transcripts(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    parse_transcripts(&std::fs::read_to_string(path)?)
}

/// Utterance ids, one per line (extra fields ignored).
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    Ok(parse_transcripts(&std::fs::read_to_string(path)?)
        .map_err(|_| Error::Format(format!("{}: bad id list", path.display())))?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

impl CorpusPartition {
    /// Adaptation partition drawn from a feature archive by utterance id.
    pub fn from_lists(
        features: &[FeatureSequence],
        labeled: &[(String, Vec<usize>)],
        unlabeled: &[String],
    ) -> Result<Self> {
        let by_id: BTreeMap<&str, &FeatureSequence> = features.iter().map(|f| (f.utterance_id.as_str(), f)).collect();
        let find = |id: &str| -> Result<FeatureSequence> {
            by_id
                .get(id)
                .map(|f| (*f).clone())
                .ok_or_else(|| Error::Missing(format!("utterance {id} is not in the feature archive")))
        };
        let p = Self {
            labeled: labeled
                .iter()
                .map(|(id, tr)| {
                    Ok(LabeledUtterance {
                        features: find(id)?,
                        transcript: tr.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            unlabeled: unlabeled.iter().map(|id| find(id)).collect::<Result<_>>()?,
            dev: Vec::new(),
            test: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Stage;
    use ndarray::Array2;

    fn f(id: &str) -> FeatureSequence {
        FeatureSequence::new(id, Array2::zeros((2, 3)), Stage::Normalized)
    }

    #[test]
    fn overlapping_ids_rejected() {
        let mut p = CorpusPartition {
            labeled: vec![LabeledUtterance {
                features: f("a"),
                transcript: vec![0],
            }],
            unlabeled: vec![f("b")],
            ..Default::default()
        };
        p.validate().unwrap();
        assert_eq!(p.adaptation_features().len(), 2);
        p.unlabeled.push(f("a"));
        assert!(p.validate().is_err());
    }

    #[test]
    fn transcripts_round_trip() {
        let entries = vec![("u1".to_string(), vec![3, 1, 4]), ("u2".to_string(), vec![])];
        let text = render_transcripts(entries.iter().map(|(i, p)| (i.as_str(), p.as_slice())));
        assert_eq!(parse_transcripts(&format!("# comment\n{text}")).unwrap(), entries);
        assert!(parse_transcripts("u1 x").is_err());
    }

    #[test]
    fn lists_select_from_the_archive() {
        let feats = vec![f("a"), f("b"), f("c")];
        let p = CorpusPartition::from_lists(&feats, &[("b".into(), vec![1])], &["c".into()]).unwrap();
        assert_eq!(p.labeled[0].features.utterance_id, "b");
        assert!(matches!(
            CorpusPartition::from_lists(&feats, &[], &["zz".into()]),
            Err(Error::Missing(_))
        ));
    }
}
