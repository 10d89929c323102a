//! Tab-separated trial lists, score files, EER reports and training logs.

use std::fmt::Write as _;
use std::path::Path;

use editnet_core::eval::{EvalReport, SameDiff, Trial, TrialList};
use editnet_core::train::TrainLogRecord;

use crate::error::{Error, Result};

fn label_str(l: SameDiff) -> &'static str {
    match l {
        SameDiff::Same => "1",
        SameDiff::Different => "0",
    }
}

/// One trial per line: `label<TAB>enroll<TAB>test`, label 1 for same speaker.
pub fn format_trials(trials: &TrialList) -> String {
    let mut out = String::new();
    for t in &trials.trials {
        writeln!(out, "{}\t{}\t{}", label_str(t.label), t.enroll, t.test).expect("write to String");
    }
    out
}

pub fn parse_trials(text: &str, file: &str) -> Result<TrialList> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |what: String| Error::Text {
            file: file.to_string(),
            line: i + 1,
            what,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [label, enroll, test] = cols[..] else {
            return Err(err(format!("expected 3 tab-separated columns, found {}", cols.len())));
        };
        let label = match label {
            "1" => SameDiff::Same,
            "0" => SameDiff::Different,
            other => return Err(err(format!("label must be 0 or 1, found `{other}`"))),
        };
        if enroll.is_empty() || test.is_empty() {
            return Err(err("empty utterance id".into()));
        }
        trials.push(Trial {
            enroll: enroll.to_string(),
            test: test.to_string(),
            label,
        });
    }
    Ok(TrialList::new(trials))
}

pub fn load_trials(path: &Path) -> Result<TrialList> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_trials(&text, &path.display().to_string())
}

/// The trial columns followed by the score.
pub fn format_scores(trials: &TrialList, scores: &[f64]) -> String {
    let mut out = String::new();
    for (t, s) in trials.trials.iter().zip(scores) {
        writeln!(out, "{}\t{}\t{}\t{s:?}", label_str(t.label), t.enroll, t.test).expect("write to String");
    }
    out
}

/// `key=value` lines.
pub fn format_report(r: &EvalReport) -> String {
    format!(
        "eer={:?}\nthreshold={:?}\nn_trials={}\nn_same={}\nn_diff={}\n",
        r.eer, r.threshold, r.n_trials, r.n_same, r.n_diff
    )
}

pub const LOG_HEADER: &str = "step\tepoch\tlr\trec\tkl\tcos\ttotal";

pub fn format_log_record(r: &TrainLogRecord) -> String {
    format!(
        "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
        r.step, r.epoch, r.lr, r.loss.loss_rec, r.loss.loss_kl, r.loss.loss_cos, r.loss.total
    )
}

pub fn format_log(log: &[TrainLogRecord]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format_log_record(r));
        out.push('\n');
    }
    out
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}
