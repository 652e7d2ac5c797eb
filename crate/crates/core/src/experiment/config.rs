//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generators::{CompletionParams, SparseParams, Toy2dParams};
use crate::error::{Error, Result};
use crate::fisher::WeightingKind;
use crate::flow::{ObjectiveKind, Optimizer, RunConfig};
use crate::model::{ModelKind, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Toy2d,
    SparseClassification,
    MatrixCompletion,
    NtkPanels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkParams {
    /// Zero-based probe entry.
    #[serde(default = "default_probe")]
    pub probe: (usize, usize),
    /// Step size of the one-step panels.
    #[serde(default = "default_onestep")]
    pub step_size: f64,
}

fn default_probe() -> (usize, usize) {
    (5, 5)
}

fn default_onestep() -> f64 {
    1e-3
}

impl Default for NtkParams {
    fn default() -> Self {
        NtkParams {
            probe: default_probe(),
            step_size: default_onestep(),
        }
    }
}

/// Generator parameters, one table named after the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataParams {
    Toy2d(Toy2dParams),
    Sparse(SparseParams),
    Completion(CompletionParams),
    Ntk(NtkParams),
}

/// One model in the grid, optionally overriding parts of the shared run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher_weighting: Option<WeightingKind>,
    /// Initialize by multiplying groups of factors of a deeper factorization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse_from_depth: Option<usize>,
}

impl GridEntry {
    pub fn run_config(&self, base: &RunConfig) -> RunConfig {
        let mut run = base.clone();
        if let Some(o) = self.optimizer {
            run.optimizer = o;
        }
        if let Some(s) = self.step_size {
            run.step_size = s;
        }
        if let Some(m) = self.max_steps {
            run.max_steps = m;
            run.record_every = run.record_every.min(m);
        }
        if let Some(r) = self.record_every {
            run.record_every = r;
        }
        if let Some(w) = self.fisher_weighting {
            run.fisher_weighting = w;
        }
        run
    }

    pub fn label(&self, base: &RunConfig, index: usize) -> String {
        match &self.label {
            Some(l) => l.clone(),
            None => {
                let run = self.run_config(base);
                let opt = match run.optimizer {
                    Optimizer::Egd => "egd",
                    Optimizer::Ngd => "ngd",
                };
                let kind = match self.model.kind {
                    ModelKind::DirectVector => "direct",
                    ModelKind::Diagonal => "diag",
                    ModelKind::Matfac => "matfac",
                };
                format!("{index:02}_{opt}_{kind}_L{}", self.model.depth)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub run: RunConfig,
    pub data: DataParams,
    pub grid: Vec<GridEntry>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid.is_empty() {
            return fail("grid must not be empty".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        self.run.validate().map_err(|e| Error::Config(format!("run: {e}")))?;
        let (objective, dim, kinds): (ObjectiveKind, Option<usize>, &[ModelKind]) = match (&self.experiment, &self.data) {
            (ExperimentKind::Toy2d, DataParams::Toy2d(_)) => {
                (ObjectiveKind::Logistic, Some(2), &[ModelKind::DirectVector, ModelKind::Diagonal])
            }
            (ExperimentKind::SparseClassification, DataParams::Sparse(p)) => {
                (ObjectiveKind::Logistic, Some(p.dim), &[ModelKind::DirectVector, ModelKind::Diagonal])
            }
            (ExperimentKind::MatrixCompletion, DataParams::Completion(p)) => {
                (ObjectiveKind::Completion, Some(p.dim), &[ModelKind::Matfac])
            }
            (ExperimentKind::NtkPanels, DataParams::Ntk(_)) => (ObjectiveKind::Completion, None, &[ModelKind::Matfac]),
            (e, _) => return fail(format!("data section does not match experiment {e:?}")),
        };
        if self.run.objective != objective {
            return fail(format!("experiment {:?} needs objective {objective:?}", self.experiment));
        }
        for (i, g) in self.grid.iter().enumerate() {
            g.model.validate().map_err(|e| Error::Config(format!("grid[{i}]: {e}")))?;
            g.run_config(&self.run)
                .validate()
                .map_err(|e| Error::Config(format!("grid[{i}]: {e}")))?;
            if g.run_config(&self.run).fisher_weighting == WeightingKind::Population
                && self.experiment != ExperimentKind::SparseClassification
            {
                return fail(format!("grid[{i}]: population Fisher needs sparse_classification data"));
            }
            if !kinds.contains(&g.model.kind) {
                return fail(format!("grid[{i}]: model kind {:?} not allowed here", g.model.kind));
            }
            if let Some(d) = dim {
                if g.model.dim != d {
                    return fail(format!("grid[{i}]: model dim {} but data dim {d}", g.model.dim));
                }
            }
            if let Some(from) = g.collapse_from_depth {
                if g.model.kind != ModelKind::Matfac || from < g.model.depth {
                    return fail(format!("grid[{i}]: collapse_from_depth needs matfac with depth <= {from}"));
                }
            }
        }
        if let DataParams::Ntk(p) = &self.data {
            for (i, g) in self.grid.iter().enumerate() {
                if p.probe.0 >= g.model.dim || p.probe.1 >= g.model.dim {
                    return fail(format!("grid[{i}]: probe outside the matrix"));
                }
            }
        }
        let mut labels: Vec<String> = self.grid.iter().enumerate().map(|(i, g)| g.label(&self.run, i)).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.grid.len() {
            return fail("grid labels must be unique".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Apply a `dotted.key=value` override; the value is parsed as TOML and
    /// falls back to a string. Types are checked here, cross-field rules only
    /// by [`ExperimentConfig::validate`], so a sequence of overrides may pass
    /// through intermediate states that would not validate.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let last = depth + 1 == parts.len();
            node = match node {
                toml::Value::Table(t) => {
                    if last {
                        t.insert(part.to_string(), value);
                        break;
                    }
                    t.get_mut(*part)
                        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?
                }
                toml::Value::Array(a) => {
                    let i: usize = part
                        .parse()
                        .map_err(|_| Error::Config(format!("`{part}` in `{key}` is not an index")))?;
                    let len = a.len();
                    let slot = a
                        .get_mut(i)
                        .ok_or_else(|| Error::Config(format!("index {i} out of range ({len}) in `{key}`")))?;
                    if last {
                        *slot = value;
                        break;
                    }
                    slot
                }
                _ => return Err(Error::Config(format!("`{key}` does not name a section"))),
            };
        }
        let updated: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        *self = updated;
        Ok(())
    }
}
