//! Cohort CSV format.
//!
//! Header: `patient_id,t,<feature names...>,iv_dose,vp_dose,reward,terminal,survived`,
//! one row per timestep, rows of one patient contiguous and ordered by `t`.
//! `terminal` and `survived` are `0`/`1`; `survived` may be empty for
//! censored episodes.

use std::fs::File;
use std::path::Path;

use super::action::{ActionBins, Doses};
use super::schema::FeatureSchema;
use super::trajectory::{Observation, Step, Trajectory};
use crate::error::{Error, Result};

const TRAILING: [&str; 5] = ["iv_dose", "vp_dose", "reward", "terminal", "survived"];

pub fn header(schema: &FeatureSchema) -> Vec<String> {
    let mut h = vec!["patient_id".to_string(), "t".to_string()];
    h.extend(schema.names().iter().cloned());
    h.extend(TRAILING.iter().map(|s| s.to_string()));
    h
}

struct Row {
    line: usize,
    patient_id: String,
    t: usize,
    obs: Observation,
    doses: Doses,
    reward: f64,
    terminal: bool,
    survived: Option<bool>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        row: line,
        message: message.into(),
    }
}

fn read_rows(path: &Path, schema: &FeatureSchema) -> Result<Vec<Row>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let found = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if found.is_empty() || (found.len() == 1 && found[0].trim().is_empty()) {
        return Ok(Vec::new());
    }
    let expected = header(schema);
    for (i, name) in found.iter().enumerate() {
        match expected.get(i) {
            Some(e) if e == name => {}
            Some(e) => {
                return Err(parse_err(
                    1,
                    format!("column {i}: expected `{e}`, found unknown column `{name}`"),
                ))
            }
            None => return Err(parse_err(1, format!("unknown column `{name}`"))),
        }
    }
    if found.len() != expected.len() {
        return Err(parse_err(
            1,
            format!("missing column `{}`", expected[found.len()]),
        ));
    }

    let d = schema.d_raw();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != expected.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", expected.len(), record.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = record[i]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("`{}` is not a number in column `{}`", &record[i], expected[i])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value in column `{}`", expected[i])));
            }
            Ok(v)
        };
        let flag = |i: usize| -> Result<Option<bool>> {
            match record[i].trim() {
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                "" => Ok(None),
                other => Err(parse_err(line, format!("`{other}` is not 0/1 in column `{}`", expected[i]))),
            }
        };
        let t: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("`{}` is not a timestep index", &record[1])))?;
        let obs = Observation((0..d).map(|j| num(2 + j)).collect::<Result<_>>()?);
        obs.validate(schema).map_err(|e| parse_err(line, e.to_string()))?;
        let doses = Doses {
            iv: num(2 + d)?,
            vp: num(3 + d)?,
        };
        if doses.iv < 0.0 || doses.vp < 0.0 {
            return Err(parse_err(line, "negative dose"));
        }
        let terminal = flag(5 + d)?.ok_or_else(|| parse_err(line, "empty `terminal`"))?;
        rows.push(Row {
            line,
            patient_id: record[0].to_string(),
            t,
            obs,
            doses,
            reward: num(4 + d)?,
            terminal,
            survived: flag(6 + d)?,
        });
    }
    Ok(rows)
}

/// All doses in the file, for fitting action bins before discretizing.
pub fn read_doses(path: &Path, schema: &FeatureSchema) -> Result<Vec<Doses>> {
    Ok(read_rows(path, schema)?.into_iter().map(|r| r.doses).collect())
}

pub fn read_cohort_csv(
    path: &Path,
    schema: &FeatureSchema,
    bins: &ActionBins,
) -> Result<Vec<Trajectory>> {
    let rows = read_rows(path, schema)?;
    let mut cohort: Vec<Trajectory> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in rows {
        let action = bins
            .discretize(row.doses)
            .map_err(|e| parse_err(row.line, e.to_string()))?;
        let continues = cohort
            .last()
            .is_some_and(|tr| tr.patient_id == row.patient_id);
        if !continues {
            if let Some(prev) = cohort.last() {
                if !prev.steps.last().is_some_and(|s| s.terminal) {
                    return Err(parse_err(row.line, format!("patient `{}` has no terminal row", prev.patient_id)));
                }
            }
            if !seen.insert(row.patient_id.clone()) {
                return Err(parse_err(row.line, format!("rows of patient `{}` are not contiguous", row.patient_id)));
            }
            cohort.push(Trajectory {
                patient_id: row.patient_id.clone(),
                steps: Vec::new(),
                survived: None,
            });
        }
        let tr = cohort.last_mut().unwrap();
        if row.t != tr.steps.len() {
            return Err(parse_err(row.line, format!("expected t = {}, found {}", tr.steps.len(), row.t)));
        }
        if tr.steps.last().is_some_and(|s| s.terminal) {
            return Err(parse_err(row.line, "row after the terminal step"));
        }
        if row.terminal {
            tr.survived = row.survived;
        }
        tr.steps.push(Step {
            obs: row.obs,
            doses: row.doses,
            action,
            reward: row.reward,
            terminal: row.terminal,
        });
    }
    if let Some(last) = cohort.last() {
        if !last.steps.last().is_some_and(|s| s.terminal) {
            return Err(parse_err(0, format!("patient `{}` has no terminal row", last.patient_id)));
        }
    }
    Ok(cohort)
}

pub fn write_cohort_csv(cohort: &[Trajectory], schema: &FeatureSchema, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(header(schema)).map_err(csv_err)?;
    for tr in cohort {
        let survived = match tr.survived {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        for (t, step) in tr.steps.iter().enumerate() {
            let mut rec = Vec::with_capacity(schema.d_raw() + 7);
            rec.push(tr.patient_id.clone());
            rec.push(t.to_string());
            rec.extend(step.obs.values().iter().map(|v| v.to_string()));
            rec.push(step.doses.iv.to_string());
            rec.push(step.doses.vp.to_string());
            rec.push(step.reward.to_string());
            rec.push(if step.terminal { "1" } else { "0" }.to_string());
            rec.push(survived.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
