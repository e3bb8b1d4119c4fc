//! Line-oriented label files.
//!
//! ```text
//! # m=3 n=8 seed=1 iteration=6
//! utt_0001 4 0 7
//! utt_0001 2 7 15
//! ```
//!
//! One `utt_id token_id start_frame end_frame` line per occupancy (`end`
//! exclusive), utterances in corpus order.

use std::path::Path;

use super::{GranularityConfig, TokenLabeling, UtteranceLabels};
use crate::error::{Error, Result};
use crate::hmm::Occupancy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelsHeader {
    pub granularity: GranularityConfig,
    pub seed: u64,
    pub iteration: usize,
}

pub fn render_labels(header: &LabelsHeader, labels: &TokenLabeling) -> String {
    let mut out = format!(
        "# m={} n={} seed={} iteration={}\n",
        header.granularity.m, header.granularity.n, header.seed, header.iteration
    );
    for u in &labels.utterances {
        for o in &u.occupancies {
            out.push_str(&format!("{} {} {} {}\n", u.utterance_id, o.token_id, o.start, o.end));
        }
    }
    out
}

pub fn parse_labels(text: &str) -> Result<(LabelsHeader, TokenLabeling)> {
    let mut header: Option<LabelsHeader> = None;
    let mut utterances: Vec<UtteranceLabels> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if header.is_none() {
                header = Some(parse_header(rest)?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("labels line {}: expected 4 fields", lineno + 1)));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("labels line {}: bad number {s:?}", lineno + 1)))
        };
        let occ = Occupancy {
            token_id: num(fields[1])?,
            start: num(fields[2])?,
            end: num(fields[3])?,
        };
        match utterances.last_mut() {
            Some(u) if u.utterance_id == fields[0] => u.occupancies.push(occ),
            _ => utterances.push(UtteranceLabels {
                utterance_id: fields[0].to_string(),
                occupancies: vec![occ],
                states: None,
            }),
        }
    }
    let header = header.ok_or_else(|| Error::Format("labels file has no header".into()))?;
    Ok((
        header,
        TokenLabeling {
            utterances,
            iteration_index: header.iteration,
        },
    ))
}

fn parse_header(rest: &str) -> Result<LabelsHeader> {
    let mut m = None;
    let mut n = None;
    let mut seed = 0;
    let mut iteration = 0;
    for kv in rest.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {kv:?}")))?;
        let bad = || Error::Format(format!("bad header value {kv:?}"));
        match k {
            "m" => m = Some(v.parse().map_err(|_| bad())?),
            "n" => n = Some(v.parse().map_err(|_| bad())?),
            "seed" => seed = v.parse().map_err(|_| bad())?,
            "iteration" => iteration = v.parse().map_err(|_| bad())?,
            _ => {}
        }
    }
    let (Some(m), Some(n)) = (m, n) else {
        return Err(Error::Format("header lacks m or n".into()));
    };
    Ok(LabelsHeader {
        granularity: GranularityConfig { m, n },
        seed,
        iteration,
    })
}

pub fn write_labels(path: &Path, header: &LabelsHeader, labels: &TokenLabeling) -> Result<()> {
    std::fs::write(path, render_labels(header, labels))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(LabelsHeader, TokenLabeling)> {
    parse_labels(&std::fs::read_to_string(path)?)
}
