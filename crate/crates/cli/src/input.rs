//! Flag values that may be a short name, inline JSON or a path to a JSON file.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use stalestep::distributions::StalenessModel;
use stalestep::engine::DelaySource;
use stalestep::problems::ProblemSpec;
use stalestep::steppolicy::{PolicySpec, StepPolicy};
use stalestep::{Error, Result};

fn json_or_file<T: DeserializeOwned>(s: &str) -> Option<Result<T>> {
    let t = s.trim_start();
    if t.starts_with('{') {
        return Some(serde_json::from_str(t).map_err(Error::from));
    }
    if s.ends_with(".json") || Path::new(s).is_file() {
        return Some(read_json(s));
    }
    None
}

pub fn read_json<T: DeserializeOwned>(path: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {path}: {e}")))?;
    Ok(serde_json::from_str(&text)?)
}

/// Preset name, inline JSON or JSON file.
pub fn problem(s: &str) -> Result<ProblemSpec> {
    json_or_file(s).unwrap_or_else(|| ProblemSpec::preset(s))
}

/// `kind:params` string, inline JSON or JSON file.
pub fn policy(s: &str, model: Option<&StalenessModel>) -> Result<PolicySpec> {
    json_or_file(s).unwrap_or_else(|| StepPolicy::parse(s, model).map(PolicySpec::plain))
}

/// `fixed:τ`, `event[:apply_time]` or a staleness model such as `geom:0.5`.
pub fn delay(s: &str, default_apply: f64) -> Result<DelaySource> {
    if let Some(r) = json_or_file(s) {
        return r;
    }
    match s.split_once(':') {
        Some(("fixed", t)) => t
            .trim()
            .parse()
            .map(|tau| DelaySource::Fixed { tau })
            .map_err(|_| Error::Input(format!("bad staleness in '{s}'"))),
        Some(("event", a)) => a
            .trim()
            .parse()
            .map(DelaySource::event_driven)
            .map_err(|_| Error::Input(format!("bad apply time in '{s}'"))),
        None if s == "event" => Ok(DelaySource::event_driven(default_apply)),
        _ => s.parse().map(|model| DelaySource::Model { model }),
    }
}

pub fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Input(format!("bad {what} '{v}' in '{s}'"))))
        .collect()
}
