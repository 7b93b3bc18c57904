//! Long-format CSV ingestion and JSON model specs / fit reports.
//!
//! Dataset CSV: header `id,from,to,duration,<covariates…>`, one row per
//! sojourn. The last row of each subject either names an absorbing state or
//! uses the marker `cens` with the residual time as duration. Instead of
//! `duration` a file may carry `entry,exit` columns; durations are then
//! differenced and consecutive rows must be contiguous.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{Distribution, FamilyId, ParamVector};
use crate::inference::{FitResult, FitSpec, TransitionSpec};
use crate::likelihood::{Approach, Dataset, SubjectHistory, TransitionRecord};
use crate::model::{EmbeddedChain, IntensityModelII, SojournModelI, StateSpace, TransitionKey, TransitionLaw};

pub const CENSORED: &str = "cens";
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Handling of zero durations on transition rows.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ZeroPolicy {
    #[default]
    Reject,
    /// Replace exact zeros by this positive duration.
    Jitter(f64),
}

pub const DEFAULT_JITTER: f64 = 1e-6;

struct Row {
    line: usize,
    from: String,
    to: String,
    duration: f64,
    entry: Option<(f64, f64)>,
    covariates: Vec<f64>,
}

/// Reads a dataset file against `space`. With `covariates = Some(names)`
/// exactly those columns are used, in that order; otherwise every extra
/// column is a covariate.
pub fn read_dataset(
    path: &Path,
    space: &StateSpace,
    covariates: Option<&[String]>,
    policy: ZeroPolicy,
) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(file, &path.display().to_string(), space, covariates, policy)
}

/// As [`read_dataset`] from any reader; `source` names it in diagnostics.
pub fn parse_dataset<R: Read>(
    input: R,
    source: &str,
    space: &StateSpace,
    covariates: Option<&[String]>,
    policy: ZeroPolicy,
) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Ingestion {
        path: source.to_string(),
        row: line,
        message,
    };
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        err(line, e.to_string())
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| err(1, format!("missing column '{name}'")));
    let (id_c, from_c, to_c) = (need("id")?, need("from")?, need("to")?);
    let timing = match (col("duration"), col("entry"), col("exit")) {
        (Some(d), _, _) => Timing::Duration(d),
        (None, Some(a), Some(b)) => Timing::EntryExit(a, b),
        _ => return Err(err(1, "need a 'duration' column or 'entry' and 'exit' columns".into())),
    };
    let reserved: Vec<usize> = [Some(id_c), Some(from_c), Some(to_c)]
        .into_iter()
        .flatten()
        .chain(timing.columns())
        .collect();
    let (names, cov_cols): (Vec<String>, Vec<usize>) = match covariates {
        Some(wanted) => {
            let mut cols = Vec::new();
            for name in wanted {
                cols.push(col(name).ok_or_else(|| err(1, format!("missing covariate column '{name}'")))?);
            }
            (wanted.to_vec(), cols)
        }
        None => header
            .iter()
            .enumerate()
            .filter(|(k, _)| !reserved.contains(k))
            .map(|(k, h)| (h.clone(), k))
            .unzip(),
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: usize| record.get(c).unwrap_or("");
        let number = |c: usize, what: &str| -> Result<f64> {
            let raw = field(c);
            let v: f64 = raw
                .parse()
                .map_err(|_| err(line, format!("{what} '{raw}' is not a number")))?;
            if !v.is_finite() {
                return Err(err(line, format!("{what} '{raw}' is not finite")));
            }
            Ok(v)
        };
        let (duration, entry) = match timing {
            Timing::Duration(d) => (number(d, "duration")?, None),
            Timing::EntryExit(a, b) => {
                let (s, e) = (number(a, "entry")?, number(b, "exit")?);
                (e - s, Some((s, e)))
            }
        };
        let covs = cov_cols
            .iter()
            .zip(&names)
            .map(|(&c, n)| number(c, &format!("covariate {n}")))
            .collect::<Result<Vec<_>>>()?;
        let id = field(id_c).to_string();
        if id.is_empty() {
            return Err(err(line, "empty subject id".into()));
        }
        let row = Row {
            line,
            from: field(from_c).to_string(),
            to: field(to_c).to_string(),
            duration,
            entry,
            covariates: covs,
        };
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(row);
    }

    let state = |label: &str, line: usize| {
        space
            .index_of(label)
            .ok_or_else(|| err(line, format!("unknown state '{label}'")))
    };
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let rows = &groups[&id];
        let first = &rows[0];
        let initial = state(&first.from, first.line)?;
        let mut h = SubjectHistory {
            id: id.clone(),
            initial_state: initial,
            states: vec![],
            sojourns: vec![],
            censored_tail: None,
            covariates: first.covariates.clone(),
        };
        let mut current = initial;
        let mut terminated = false;
        for (k, row) in rows.iter().enumerate() {
            let at = |m: String| err(row.line, format!("subject '{id}': {m}"));
            if terminated {
                return Err(at("rows continue after the terminal row".into()));
            }
            if row.covariates != first.covariates {
                return Err(at("covariates change within the subject".into()));
            }
            let from = state(&row.from, row.line)?;
            if from != current {
                return Err(at(format!(
                    "from state '{}' does not continue the previous row (expected '{}')",
                    row.from,
                    space.label(current)
                )));
            }
            if let (Some((entry, _)), Some(prev)) = (row.entry, k.checked_sub(1).and_then(|p| rows[p].entry)) {
                if entry > prev.1 {
                    return Err(at(format!("gap between exit {} and entry {entry}", prev.1)));
                }
                if entry < prev.1 {
                    return Err(at(format!("overlap between exit {} and entry {entry}", prev.1)));
                }
            }
            if row.to == CENSORED {
                if !(row.duration >= 0.0) {
                    return Err(at(format!("censored duration {} is negative", row.duration)));
                }
                if space.is_absorbing(current) {
                    return Err(at(format!("censored in absorbing state '{}'", space.label(current))));
                }
                h.censored_tail = Some(row.duration);
                terminated = true;
                continue;
            }
            let to = state(&row.to, row.line)?;
            if to == from {
                return Err(at(format!("self transition in state '{}'", row.from)));
            }
            if space.is_absorbing(from) {
                return Err(at(format!("transition out of absorbing state '{}'", row.from)));
            }
            let mut duration = row.duration;
            if duration == 0.0 {
                match policy {
                    ZeroPolicy::Reject => return Err(at("zero duration".into())),
                    ZeroPolicy::Jitter(eps) => duration = eps,
                }
            }
            if !(duration > 0.0) {
                return Err(at(format!("nonpositive duration {duration}")));
            }
            h.states.push(to);
            h.sojourns.push(duration);
            current = to;
            if space.is_absorbing(to) {
                terminated = true;
            }
        }
        if !terminated {
            let last = rows.last().expect("nonempty group");
            return Err(err(
                last.line,
                format!(
                    "subject '{id}' ends in non-absorbing state '{}' without a '{CENSORED}' row",
                    space.label(current)
                ),
            ));
        }
        subjects.push(h);
    }
    Dataset::new(space.clone(), names, subjects)
}

#[derive(Clone, Copy)]
enum Timing {
    Duration(usize),
    EntryExit(usize, usize),
}

impl Timing {
    fn columns(self) -> Vec<usize> {
        match self {
            Timing::Duration(d) => vec![d],
            Timing::EntryExit(a, b) => vec![a, b],
        }
    }
}

/// Writes the long-format CSV. Reals use the shortest representation that
/// parses back to the same value, so reading the file reproduces `dataset`.
pub fn write_dataset_to<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let space = dataset.space();
    let mut header = vec!["id".to_string(), "from".into(), "to".into(), "duration".into()];
    header.extend(dataset.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for h in dataset.subjects() {
        let covs: Vec<String> = h.covariates.iter().map(|z| z.to_string()).collect();
        for k in 0..h.n_transitions() {
            let mut row = vec![
                h.id.clone(),
                space.label(h.state_before(k)).to_string(),
                space.label(h.states[k]).to_string(),
                h.sojourns[k].to_string(),
            ];
            row.extend(covs.iter().cloned());
            w.write_record(&row)?;
        }
        if let Some(u) = h.censored_tail {
            let mut row = vec![
                h.id.clone(),
                space.label(h.final_state()).to_string(),
                CENSORED.to_string(),
                u.to_string(),
            ];
            row.extend(covs.iter().cloned());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_to(dataset, BufWriter::new(file)).map_err(|e| with_path(e, path))
}

/// Decoupled records as CSV: `from,to_or_cens,duration,<covariates…>`.
pub fn write_records_to<W: Write>(
    records: &[TransitionRecord],
    space: &StateSpace,
    covariate_names: &[String],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["from".to_string(), "to_or_cens".into(), "duration".into()];
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            space.label(r.from).to_string(),
            r.to.map(|j| space.label(j).to_string())
                .unwrap_or_else(|| CENSORED.into()),
            r.duration.to_string(),
        ];
        row.extend(r.covariates.iter().map(|z| z.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// One transition entry of a model spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub from: String,
    pub to: String,
    pub family: FamilyId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

/// Model specification file (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub schema_version: u32,
    pub approach: Approach,
    pub states: Vec<String>,
    /// Derived from the transitions when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absorbing: Option<Vec<String>>,
    #[serde(default)]
    pub covariates: Vec<String>,
    pub transitions: Vec<TransitionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedded_chain: Option<Vec<Vec<f64>>>,
}

impl ModelSpec {
    fn invalid(&self, msg: String) -> Error {
        Error::InvalidModel(msg)
    }

    pub fn state_space(&self) -> Result<StateSpace> {
        let index = |label: &str| {
            self.states
                .iter()
                .position(|s| s == label)
                .ok_or_else(|| self.invalid(format!("unknown state '{label}'")))
        };
        let absorbing = match &self.absorbing {
            Some(list) => list.iter().map(|a| index(a)).collect::<Result<Vec<_>>>()?,
            None => {
                let mut sources = vec![false; self.states.len()];
                for t in &self.transitions {
                    sources[index(&t.from)?] = true;
                }
                (0..self.states.len()).filter(|&i| !sources[i]).collect()
            }
        };
        StateSpace::new(self.states.clone(), absorbing)
    }

    fn key(&self, space: &StateSpace, t: &TransitionEntry) -> Result<TransitionKey> {
        let idx = |label: &str| {
            space
                .index_of(label)
                .ok_or_else(|| self.invalid(format!("transition uses unknown state '{label}'")))
        };
        TransitionKey::new(idx(&t.from)?, idx(&t.to)?)
    }

    fn mask(&self, t: &TransitionEntry) -> Result<Vec<usize>> {
        t.covariates
            .iter()
            .map(|c| {
                self.covariates.iter().position(|n| n == c).ok_or_else(|| {
                    self.invalid(format!(
                        "transition {}->{} uses undeclared covariate '{c}'",
                        t.from, t.to
                    ))
                })
            })
            .collect()
    }

    /// Fitting specification; any `params` become starting values.
    pub fn fit_spec(&self) -> Result<FitSpec> {
        let space = self.state_space()?;
        let transitions = self
            .transitions
            .iter()
            .map(|t| {
                let mut ts = TransitionSpec::new(self.key(&space, t)?, t.family, self.mask(t)?);
                ts.start = t.params.clone().map(ParamVector::new);
                Ok(ts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FitSpec::new(transitions))
    }

    fn laws(&self, space: &StateSpace) -> Result<Vec<TransitionLaw>> {
        self.transitions
            .iter()
            .map(|t| {
                let key = self.key(space, t)?;
                let params = t
                    .params
                    .clone()
                    .ok_or_else(|| self.invalid(format!("transition {}->{} has no parameters", t.from, t.to)))?;
                let mask = self.mask(t)?;
                let beta = t.beta.clone().unwrap_or_else(|| vec![0.0; mask.len()]);
                TransitionLaw::new(key, Distribution::new(t.family, params)?, mask, beta)
            })
            .collect()
    }

    pub fn model_ii(&self) -> Result<IntensityModelII> {
        if self.approach != Approach::II {
            return Err(self.invalid("model spec is not an Approach II model".into()));
        }
        let space = self.state_space()?;
        let laws = self.laws(&space)?;
        IntensityModelII::new(space, laws, self.covariates.len())
    }

    pub fn model_i(&self) -> Result<SojournModelI> {
        if self.approach != Approach::I {
            return Err(self.invalid("model spec is not an Approach I model".into()));
        }
        let space = self.state_space()?;
        let chain = self
            .embedded_chain
            .clone()
            .ok_or_else(|| self.invalid("Approach I model needs 'embedded_chain'".into()))?;
        let laws = self.laws(&space)?;
        SojournModelI::new(space, EmbeddedChain::new(chain)?, laws, self.covariates.len())
    }

    fn entries<'a>(
        space: &StateSpace,
        names: &[String],
        laws: impl Iterator<Item = &'a TransitionLaw>,
    ) -> Vec<TransitionEntry> {
        laws.map(|l| TransitionEntry {
            from: space.label(l.key.from).to_string(),
            to: space.label(l.key.to).to_string(),
            family: l.baseline.family(),
            params: Some(l.baseline.params().as_slice().to_vec()),
            covariates: l.covariates.iter().map(|&c| names[c].clone()).collect(),
            beta: Some(l.beta.clone()),
        })
        .collect()
    }

    pub fn from_model_ii(model: &IntensityModelII, covariate_names: &[String]) -> Self {
        let space = model.space();
        ModelSpec {
            schema_version: MODEL_SCHEMA_VERSION,
            approach: Approach::II,
            states: space.labels().to_vec(),
            absorbing: Some(space.absorbing().map(|a| space.label(a).to_string()).collect()),
            covariates: covariate_names.to_vec(),
            transitions: Self::entries(space, covariate_names, model.laws()),
            embedded_chain: None,
        }
    }

    pub fn from_model_i(model: &SojournModelI, covariate_names: &[String]) -> Self {
        let space = model.space();
        ModelSpec {
            schema_version: MODEL_SCHEMA_VERSION,
            approach: Approach::I,
            states: space.labels().to_vec(),
            absorbing: Some(space.absorbing().map(|a| space.label(a).to_string()).collect()),
            covariates: covariate_names.to_vec(),
            transitions: Self::entries(space, covariate_names, model.laws()),
            embedded_chain: Some(model.chain().rows().to_vec()),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_model_spec(path: &Path) -> Result<ModelSpec> {
    let spec: ModelSpec = read_json(path)?;
    if spec.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::InvalidModel(format!(
            "{}: unsupported schema_version {}",
            path.display(),
            spec.schema_version
        )));
    }
    Ok(spec)
}

pub fn write_model_spec(spec: &ModelSpec, path: &Path) -> Result<()> {
    write_json(spec, path)
}

pub fn write_fit(fit: &FitResult, path: &Path) -> Result<()> {
    write_json(fit, path)
}

pub fn read_fit(path: &Path) -> Result<FitResult> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> StateSpace {
        StateSpace::numbered(3, [2]).unwrap()
    }

    fn parse(text: &str) -> Result<Dataset> {
        parse_dataset(text.as_bytes(), "test.csv", &space(), None, ZeroPolicy::Reject)
    }

    #[test]
    fn censored_subject() {
        let ds = parse("id,from,to,duration\ns1,1,2,1.0\ns1,2,cens,2.0\n").unwrap();
        let h = &ds.subjects()[0];
        assert_eq!(h.initial_state, 0);
        assert_eq!(h.states, vec![1]);
        assert_eq!(h.sojourns, vec![1.0]);
        assert_eq!(h.censored_tail, Some(2.0));
        assert!(!h.delta());
    }

    #[test]
    fn absorbed_subject() {
        let ds = parse("id,from,to,duration\ns1,1,2,1.0\ns1,2,3,2.0\n").unwrap();
        let h = &ds.subjects()[0];
        assert!(h.delta());
        assert_eq!(h.censored_tail, None);
    }

    #[test]
    fn chain_inconsistency_names_subject_and_row() {
        match parse("id,from,to,duration\ns1,1,2,1.0\ns1,3,1,0.5\n") {
            Err(Error::Ingestion { row, message, .. }) => {
                assert_eq!(row, 3);
                assert!(message.contains("s1"), "{message}");
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn zero_policy() {
        let text = "id,from,to,duration\ns1,1,2,0\ns1,2,cens,1\n";
        assert!(parse(text).is_err());
        let ds = parse_dataset(text.as_bytes(), "t", &space(), None, ZeroPolicy::Jitter(DEFAULT_JITTER)).unwrap();
        assert_eq!(ds.subjects()[0].sojourns, vec![DEFAULT_JITTER]);
    }

    #[test]
    fn other_ingestion_errors() {
        assert!(parse("id,from,to,duration\ns1,1,9,1\n").is_err());
        assert!(parse("id,from,to,duration\ns1,1,2,1\n").is_err());
        assert!(parse("id,from,to,duration\ns1,1,cens,1\ns1,1,2,1\n").is_err());
        assert!(parse("id,from,to\ns1,1,2\n").is_err());
        assert!(parse("id,from,to,duration,x\ns1,1,2,1,0\ns1,2,cens,1,1\n").is_err());
        let missing = parse_dataset(
            "id,from,to,duration\ns1,1,cens,1\n".as_bytes(),
            "t",
            &space(),
            Some(&["age".to_string()]),
            ZeroPolicy::Reject,
        );
        assert!(matches!(missing, Err(Error::Ingestion { .. })));
    }

    #[test]
    fn entry_exit_mode() {
        let ds = parse("id,from,to,entry,exit\ns1,1,2,0,1.5\ns1,2,cens,1.5,4\n").unwrap();
        assert_eq!(ds.subjects()[0].sojourns, vec![1.5]);
        assert_eq!(ds.subjects()[0].censored_tail, Some(2.5));
        assert!(parse("id,from,to,entry,exit\ns1,1,2,0,1.5\ns1,2,cens,1.7,4\n").is_err());
        assert!(parse("id,from,to,entry,exit\ns1,1,2,0,1.5\ns1,2,cens,1.2,4\n").is_err());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text =
            "id,from,to,duration,x\na,1,2,0.1,0.3\na,2,cens,2.0000000000000004,0.3\nb,1,3,1e-7,-1\nc,1,cens,0,2\n";
        let ds = parse(text).unwrap();
        let mut first = Vec::new();
        write_dataset_to(&ds, &mut first).unwrap();
        let again = parse(std::str::from_utf8(&first).unwrap()).unwrap();
        assert_eq!(again, ds);
        let mut second = Vec::new();
        write_dataset_to(&again, &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = Dataset::new(space(), vec!["x".into()], vec![]).unwrap();
        let mut out = Vec::new();
        write_dataset_to(&ds, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "id,from,to,duration,x\n");
    }

    #[test]
    fn model_spec_round_trip() {
        let json = r#"{
            "schema_version": 1,
            "approach": "II",
            "states": ["H", "I", "D"],
            "covariates": ["age"],
            "transitions": [
                {"from": "H", "to": "I", "family": "weibull", "params": [1.5, 2.0], "covariates": ["age"], "beta": [0.3]},
                {"from": "H", "to": "D", "family": "exponential", "params": [0.1]},
                {"from": "I", "to": "D", "family": "gamma", "params": [2.0, 1.0]}
            ]
        }"#;
        let spec: ModelSpec = serde_json::from_str(json).unwrap();
        let model = spec.model_ii().unwrap();
        assert!(model.space().is_absorbing(2));
        let back = ModelSpec::from_model_ii(&model, &spec.covariates);
        assert_eq!(back.model_ii().unwrap(), model);
        let text = serde_json::to_string(&back).unwrap();
        let again: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(again, back);
        let fs = spec.fit_spec().unwrap();
        assert_eq!(fs.transitions[0].covariates, vec![0]);
    }
}
