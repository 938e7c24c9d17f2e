//! Parameter-count audit against the embedded reference counts.

use std::collections::BTreeMap;
use std::fmt::Write;

use anyhow::{Context, Result};
use dyadformer::model::{count_parameters, ModelConfig, ModelVariant};
use dyadformer::transformer::SaLayerWeights;
use serde::Deserialize;

const REFERENCE: &str = include_str!("../fixtures/param_reference.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct Reference {
    pub tolerance: f64,
    pub variants: BTreeMap<String, f64>,
    pub layers: BTreeMap<String, f64>,
}

pub fn reference() -> Result<Reference> {
    toml::from_str(REFERENCE).context("embedded parameter reference is malformed")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub name: String,
    pub count: usize,
    pub reference: Option<f64>,
}

impl CountRow {
    pub fn deviation(&self) -> Option<f64> {
        self.reference.map(|r| (self.count as f64 - r) / r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub rows: Vec<CountRow>,
    pub tolerance: f64,
}

impl Audit {
    pub fn failures(&self) -> Vec<&CountRow> {
        self.rows
            .iter()
            .filter(|r| r.deviation().is_some_and(|d| d.abs() > self.tolerance))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>10} {:>8} {:>8} {:>9}", "model", "params", "", "ref", "dev");
        for r in &self.rows {
            let _ = write!(out, "{:<18} {:>10} {:>7.2}M", r.name, r.count, r.count as f64 / 1e6);
            match (r.reference, r.deviation()) {
                (Some(re), Some(d)) => {
                    let flag = if d.abs() > self.tolerance { "  FAIL" } else { "" };
                    let _ = writeln!(out, " {:>7.1}M {:>+8.2}%{flag}", re / 1e6, 100.0 * d);
                }
                _ => out.push('\n'),
            }
        }
        out
    }
}

/// Counts for every variant built by `config_for`, plus single-layer
/// figures. Reference values are attached only when `compare` is set.
pub fn audit(config_for: impl Fn(ModelVariant) -> Result<ModelConfig>, compare: bool) -> Result<Audit> {
    let refs = reference()?;
    let mut rows = Vec::new();
    for v in ModelVariant::ALL {
        let c = config_for(v)?;
        c.validate()?;
        rows.push(CountRow {
            name: v.key().to_string(),
            count: count_parameters(&c),
            reference: compare.then(|| refs.variants.get(v.key()).copied()).flatten(),
        });
    }
    let base = config_for(ModelVariant::TfV)?;
    let layer = SaLayerWeights::num_scalars(base.d_w, base.heads);
    for (name, count) in [("shared_1", layer), ("unshared_8", 8 * layer)] {
        rows.push(CountRow {
            name: format!("layers:{name}"),
            count,
            reference: compare.then(|| refs.layers.get(name).copied()).flatten(),
        });
    }
    Ok(Audit {
        rows,
        tolerance: refs.tolerance,
    })
}
