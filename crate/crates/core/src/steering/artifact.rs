use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SteeringState;
use crate::corpus::TutorId;
use crate::error::{Error, Result};
use crate::records::{self, FORMAT_VERSION};

/// On-disk form. `delta` is deliberately absent: it is always recomputed
/// from `u`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SteeringFile {
    format_version: u32,
    d_model: usize,
    u: BTreeMap<TutorId, f64>,
    v: Vec<f64>,
    beta: f64,
    seed: u64,
    loss_history: Vec<f64>,
    steps: usize,
    diverged: bool,
}

pub fn steering_json(state: &SteeringState) -> Result<String> {
    let file = SteeringFile {
        format_version: FORMAT_VERSION,
        d_model: state.v.len(),
        u: state.tutor_ids.iter().copied().zip(state.u.iter().copied()).collect(),
        v: state.v.clone(),
        beta: state.beta,
        seed: state.seed,
        loss_history: state.loss_history.clone(),
        steps: state.steps,
        diverged: state.diverged,
    };
    serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Invalid(format!("cannot serialize steering state: {e}")))
}

pub fn write_steering(state: &SteeringState, path: &Path) -> Result<()> {
    let mut text = steering_json(state)?;
    text.push('\n');
    records::write_file(path, text.as_bytes())
}

pub fn read_steering(path: &Path) -> Result<SteeringState> {
    let text = records::read_file(path)?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let file: SteeringFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(parse_err(format!(
            "unsupported format_version {}, expected {FORMAT_VERSION}",
            file.format_version
        )));
    }
    if file.v.len() != file.d_model {
        return Err(parse_err(format!(
            "v has {} entries but d_model is {}",
            file.v.len(),
            file.d_model
        )));
    }
    let state = SteeringState {
        tutor_ids: file.u.keys().copied().collect(),
        u: file.u.values().copied().collect(),
        v: file.v,
        beta: file.beta,
        seed: file.seed,
        steps: file.steps,
        loss_history: file.loss_history,
        diverged: file.diverged,
    };
    state.validate()?;
    Ok(state)
}
