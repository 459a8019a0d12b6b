// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON files: banks, expert banks, head selections, samples, expert
//! datasets and model configs.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{check_finite, ContrastiveSample, ExpertDataset};
use crate::adaseka::{Expert, ExpertBank, ExpertEntry};
use crate::error::{Result, SekaError};
use crate::linalg::Matrix;
use crate::model::ModelConfig;
use crate::steering::{BankEntry, HeadSelection, ProjectionBank};

/// Version written to and accepted from versioned files.
pub const FORMAT_VERSION: i64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    format_version: i64,
    fingerprint: u64,
    gamma: f64,
    entries: Vec<BankEntryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankEntryFile {
    layer: usize,
    kv_head: usize,
    k_pos: usize,
    k_neg: usize,
    head_distance: f64,
    #[serde(rename = "U_pos")]
    u_pos: Vec<Vec<f64>>,
    #[serde(rename = "S_pos")]
    s_pos: Vec<f64>,
    #[serde(rename = "U_neg")]
    u_neg: Vec<Vec<f64>>,
    #[serde(rename = "S_neg")]
    s_neg: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertBankFile {
    format_version: i64,
    fingerprint: u64,
    #[serde(rename = "K")]
    k: usize,
    experts: Vec<ExpertFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertFile {
    name: String,
    entries: Vec<ExpertEntryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertEntryFile {
    layer: usize,
    kv_head: usize,
    #[serde(rename = "U")]
    u: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    s: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionFile {
    format_version: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<u64>,
    delta_min: f64,
    selected: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplesFile {
    samples: Vec<ContrastiveSample>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SekaError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| SekaError::io(path, e))
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> SekaError {
    SekaError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn parse_value(text: &str) -> Result<serde_json::Value> {
    serde_json::from_str(text).map_err(|e| schema(".", e.to_string()))
}

/// Typed decode with the JSON path of the first offending value. A missing
/// field is reported at the field itself, e.g. `samples[0].answer1`.
fn decode<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|err| {
        let mut path = err.path().to_string();
        let message = err.inner().to_string();
        if let Some(field) = message
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
        }
        schema(path, message)
    })
}

fn check_version(value: &serde_json::Value) -> Result<()> {
    match value.get("format_version") {
        None => Err(schema("format_version", "missing field `format_version`")),
        Some(v) => match v.as_i64() {
            Some(FORMAT_VERSION) => Ok(()),
            Some(found) => Err(SekaError::UnsupportedVersion {
                found,
                expected: FORMAT_VERSION,
            }),
            None => Err(schema("format_version", "expected an integer")),
        },
    }
}

fn load_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let value = parse_value(&read(path)?)?;
    check_version(&value)?;
    decode(value)
}

fn matrix(rows: &[Vec<f64>], path: String) -> Result<Matrix> {
    Matrix::from_rows(rows).map_err(|e| schema(path, e.to_string()))
}

pub fn save_bank(bank: &ProjectionBank, path: &Path) -> Result<()> {
    check_finite(std::iter::once(bank.gamma), "bank")?;
    for e in &bank.entries {
        check_finite(
            e.u_pos
                .data()
                .iter()
                .chain(e.u_neg.data())
                .chain(&e.s_pos)
                .chain(&e.s_neg)
                .copied()
                .chain([e.head_distance]),
            "bank",
        )?;
    }
    let file = BankFile {
        format_version: FORMAT_VERSION,
        fingerprint: bank.fingerprint,
        gamma: bank.gamma,
        entries: bank
            .entries
            .iter()
            .map(|e| BankEntryFile {
                layer: e.layer,
                kv_head: e.kv_head,
                k_pos: e.k_pos,
                k_neg: e.k_neg,
                head_distance: e.head_distance,
                u_pos: e.u_pos.to_rows(),
                s_pos: e.s_pos.clone(),
                u_neg: e.u_neg.to_rows(),
                s_neg: e.s_neg.clone(),
            })
            .collect(),
    };
    write_json(path, &file)
}

pub fn load_bank(path: &Path) -> Result<ProjectionBank> {
    let file: BankFile = load_versioned(path)?;
    let entries = file
        .entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(BankEntry {
                layer: e.layer,
                kv_head: e.kv_head,
                k_pos: e.k_pos,
                k_neg: e.k_neg,
                head_distance: e.head_distance,
                u_pos: matrix(&e.u_pos, format!("entries[{i}].U_pos"))?,
                s_pos: e.s_pos,
                u_neg: matrix(&e.u_neg, format!("entries[{i}].U_neg"))?,
                s_neg: e.s_neg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ProjectionBank::from_entries(file.fingerprint, file.gamma, entries)
        .map_err(|e| schema("entries", e.to_string()))
}

pub fn save_expert_bank(bank: &ExpertBank, path: &Path) -> Result<()> {
    for e in bank.experts.iter().flat_map(|x| &x.entries) {
        check_finite(e.u.data().iter().chain(&e.s).copied(), "expert bank")?;
    }
    let file = ExpertBankFile {
        format_version: FORMAT_VERSION,
        fingerprint: bank.fingerprint,
        k: bank.k,
        experts: bank
            .experts
            .iter()
            .map(|x| ExpertFile {
                name: x.name.clone(),
                entries: x
                    .entries
                    .iter()
                    .map(|e| ExpertEntryFile {
                        layer: e.layer,
                        kv_head: e.kv_head,
                        u: e.u.to_rows(),
                        s: e.s.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json(path, &file)
}

pub fn load_expert_bank(path: &Path) -> Result<ExpertBank> {
    let file: ExpertBankFile = load_versioned(path)?;
    let experts = file
        .experts
        .into_iter()
        .enumerate()
        .map(|(m, x)| {
            let entries = x
                .entries
                .into_iter()
                .enumerate()
                .map(|(i, e)| {
                    Ok(ExpertEntry {
                        layer: e.layer,
                        kv_head: e.kv_head,
                        u: matrix(&e.u, format!("experts[{m}].entries[{i}].U"))?,
                        s: e.s,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Expert {
                name: x.name,
                entries,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ExpertBank::new(file.k, file.fingerprint, experts).map_err(|e| schema("experts", e.to_string()))
}

pub fn save_selection(selection: &HeadSelection, path: &Path) -> Result<()> {
    check_finite([selection.delta_min], "head selection")?;
    let file = SelectionFile {
        format_version: FORMAT_VERSION,
        fingerprint: selection.fingerprint,
        delta_min: selection.delta_min,
        selected: selection.selected.iter().copied().collect(),
    };
    write_json(path, &file)
}

pub fn load_selection(path: &Path) -> Result<HeadSelection> {
    let file: SelectionFile = load_versioned(path)?;
    Ok(HeadSelection {
        fingerprint: file.fingerprint,
        delta_min: file.delta_min,
        selected: file.selected.into_iter().collect::<BTreeSet<_>>(),
    })
}

pub fn save_samples(samples: &[ContrastiveSample], path: &Path) -> Result<()> {
    write_json(
        path,
        &SamplesFile {
            samples: samples.to_vec(),
        },
    )
}

pub fn load_samples(path: &Path) -> Result<Vec<ContrastiveSample>> {
    let file: SamplesFile = decode(parse_value(&read(path)?)?)?;
    Ok(file.samples)
}

pub fn save_expert_dataset(dataset: &ExpertDataset, path: &Path) -> Result<()> {
    write_json(path, dataset)
}

pub fn load_expert_dataset(path: &Path) -> Result<ExpertDataset> {
    decode(parse_value(&read(path)?)?)
}

pub fn save_model_config(config: &ModelConfig, path: &Path) -> Result<()> {
    write_json(path, config)
}

pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let config: ModelConfig = decode(parse_value(&read(path)?)?)?;
    config.validate()?;
    Ok(config)
}
