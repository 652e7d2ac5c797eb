//! Grid execution, result files and the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataParams, ExperimentConfig, ExperimentKind, GridEntry, NtkParams};
use super::generators::{gen_completion, gen_sparse, gen_toy2d};
use crate::error::{Error, Result};
use crate::fisher::WeightingKind;
use crate::flow::{run, write_trajectory, Outcome, Problem, RunConfig, Trajectory};
use crate::gaussian::CompletionTask;
use crate::logistic::ClassificationDataset;
use crate::model::{collapsed_init, init, ModelParams, ModelSpec};
use crate::ntk::{kernel_slice, KernelMode};
use crate::reference::{max_margin_l2, max_margin_lp, ols};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub id: String,
    pub label: String,
    pub grid_index: usize,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_step: Option<usize>,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
    /// Final metrics of the cell.
    pub summary: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub experiment: ExperimentKind,
    pub cells: Vec<CellEntry>,
    /// Every file in the output directory, including this manifest.
    pub files: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn n_failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Error).count()
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub computed: usize,
    pub skipped: usize,
}

impl ExperimentReport {
    pub fn n_failed(&self) -> usize {
        self.manifest.n_failed()
    }
}

/// Seed of a cell's initialization, mixing the model seed with the data seed.
pub fn cell_seed(model_seed: u64, seed: u64) -> u64 {
    model_seed ^ seed.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Parameters a grid cell starts from.
pub fn cell_init(entry: &GridEntry, seed: u64) -> Result<ModelParams> {
    let spec = ModelSpec {
        seed: cell_seed(entry.model.seed, seed),
        ..entry.model.clone()
    };
    match entry.collapse_from_depth {
        Some(from) => collapsed_init(&ModelSpec { depth: from, ..spec }, entry.model.depth),
        None => init(&spec),
    }
}

/// Data of one seed.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratedData {
    Classification {
        train: ClassificationDataset,
        #[serde(skip_serializing_if = "Option::is_none")]
        test: Option<ClassificationDataset>,
        #[serde(skip_serializing_if = "Option::is_none")]
        population: Option<ClassificationDataset>,
        #[serde(skip_serializing_if = "Option::is_none")]
        ground_truth: Option<DVector<f64>>,
    },
    Completion(CompletionTask),
    Ntk(NtkParams),
}

pub fn generate(config: &ExperimentConfig, seed: u64) -> Result<GeneratedData> {
    Ok(match &config.data {
        DataParams::Toy2d(p) => GeneratedData::Classification {
            train: gen_toy2d(p, seed)?,
            test: None,
            population: None,
            ground_truth: None,
        },
        DataParams::Sparse(p) => {
            let s = gen_sparse(p, seed)?;
            GeneratedData::Classification {
                train: s.train,
                test: Some(s.test),
                population: Some(s.population),
                ground_truth: Some(s.ground_truth),
            }
        }
        DataParams::Completion(p) => GeneratedData::Completion(gen_completion(p, seed)?),
        DataParams::Ntk(p) => GeneratedData::Ntk(p.clone()),
    })
}

/// Reference directions reported as cosine metrics.
fn references(config: &ExperimentConfig, data: &GeneratedData) -> Vec<(String, DVector<f64>)> {
    let GeneratedData::Classification { train, ground_truth, .. } = data else {
        return Vec::new();
    };
    let mut refs = Vec::new();
    if let Some(t) = ground_truth {
        refs.push(("truth".to_string(), t.clone()));
    }
    refs.push(("ols".to_string(), ols(train).beta));
    match max_margin_l2(train) {
        Ok(s) => refs.push(("l2_margin".to_string(), s.beta)),
        Err(e) => log::debug!("no l2 margin reference: {e}"),
    }
    if config.experiment == ExperimentKind::Toy2d {
        match max_margin_lp(train, 0.5) {
            Ok(s) => refs.push(("lhalf_margin".to_string(), s.beta)),
            Err(e) => log::debug!("no l1/2 margin reference: {e}"),
        }
    }
    refs
}

struct CellJob<'a> {
    id: String,
    label: String,
    grid_index: usize,
    seed: u64,
    entry: &'a GridEntry,
}

fn cell_jobs(config: &ExperimentConfig) -> Vec<CellJob<'_>> {
    let mut jobs = Vec::new();
    for &seed in &config.seeds {
        for (gi, entry) in config.grid.iter().enumerate() {
            let label = entry.label(&config.run, gi);
            jobs.push(CellJob {
                id: format!("{label}_s{seed}"),
                label,
                grid_index: gi,
                seed,
                entry,
            });
        }
    }
    jobs
}

fn summarize(traj: &Trajectory) -> BTreeMap<String, f64> {
    let last = traj.last();
    let mut s = last.metrics.clone();
    s.insert("loss".into(), last.loss);
    s.insert("step".into(), last.step as f64);
    s.insert("t".into(), last.t);
    s
}

#[derive(Serialize)]
struct Panel {
    mode: KernelMode,
    depth: usize,
    probe: (usize, usize),
    rank_deficient: bool,
    /// Row-major response matrix.
    response: Vec<Vec<f64>>,
}

fn run_cell(config: &ExperimentConfig, job: &CellJob<'_>, dir: &Path) -> Result<(Option<Outcome>, Vec<String>, BTreeMap<String, f64>)> {
    let params = cell_init(job.entry, job.seed)?;
    let data = generate(config, job.seed)?;
    let run_cfg: RunConfig = job.entry.run_config(&config.run);
    let refs = references(config, &data);
    let problem = match &data {
        GeneratedData::Classification {
            train, test, population, ..
        } => Problem::Logistic {
            train,
            population: match run_cfg.fisher_weighting {
                WeightingKind::Population => population.as_ref(),
                WeightingKind::Sample => None,
            },
            test: test.as_ref(),
            references: &refs,
        },
        GeneratedData::Completion(task) => Problem::Completion(task),
        GeneratedData::Ntk(p) => return run_ntk_cell(p, &params, job, dir),
    };
    let traj = run(&problem, params, &run_cfg)?;
    let records = format!("cells/{}.jsonl", job.id);
    let header = format!("cells/{}.header.json", job.id);
    write_trajectory(&traj, &run_cfg, &dir.join(&records), &dir.join(&header))?;
    Ok((Some(traj.outcome.clone()), vec![records, header], summarize(&traj)))
}

fn run_ntk_cell(
    p: &NtkParams,
    params: &ModelParams,
    job: &CellJob<'_>,
    dir: &Path,
) -> Result<(Option<Outcome>, Vec<String>, BTreeMap<String, f64>)> {
    let slices = KernelMode::ALL
        .iter()
        .map(|&m| kernel_slice(params, p.probe, m, p.step_size))
        .collect::<Result<Vec<_>>>()?;
    let panels: Vec<Panel> = slices
        .iter()
        .map(|s| Panel {
            mode: s.mode,
            depth: params.depth(),
            probe: s.probe,
            rank_deficient: s.rank_deficient,
            response: s.response.row_iter().map(|r| r.iter().copied().collect()).collect(),
        })
        .collect();
    let file = format!("cells/{}.panels.json", job.id);
    std::fs::write(dir.join(&file), serde_json::to_string_pretty(&panels)? + "\n")?;
    let mut summary = BTreeMap::new();
    for s in &slices {
        summary.insert(format!("{}_probe", s.mode.name()), s.response[s.probe]);
        summary.insert(format!("{}_off_probe", s.mode.name()), s.off_probe_max());
        summary.insert(format!("{}_off_cross", s.mode.name()), s.off_cross_max());
    }
    Ok((None, vec![file], summary))
}

fn write_summary(dir: &Path, cells: &[CellEntry]) -> Result<()> {
    let keys: BTreeSet<&String> = cells.iter().flat_map(|c| c.summary.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["id".to_string(), "label".into(), "seed".into(), "status".into()];
    head.extend(keys.iter().map(|k| k.to_string()));
    w.write_record(&head)?;
    for c in cells {
        let mut row = vec![
            c.id.clone(),
            c.label.clone(),
            c.seed.to_string(),
            match c.status {
                CellStatus::Ok => "ok".into(),
                CellStatus::Error => "error".into(),
            },
        ];
        row.extend(keys.iter().map(|k| c.summary.get(*k).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&dir.join(SUMMARY_FILE), &bytes)
}

fn data_record(config: &ExperimentConfig, seed: u64) -> Result<serde_json::Value> {
    let mut v = serde_json::json!({
        "experiment": config.experiment,
        "seed": seed,
        "params": config.data,
    });
    // small datasets are stored in full so plots can show the points
    if let GeneratedData::Classification { train, .. } = generate(config, seed)? {
        if config.experiment == ExperimentKind::Toy2d {
            v["train"] = serde_json::to_value(&train)?;
        }
    }
    Ok(v)
}

fn collect_files(manifest: &Manifest, extra: &[String]) -> Vec<String> {
    let mut files: BTreeSet<String> = extra.iter().cloned().collect();
    for c in &manifest.cells {
        files.extend(c.files.iter().cloned());
    }
    files.insert(MANIFEST_FILE.to_string());
    files.into_iter().collect()
}

/// Run every `(seed, grid entry)` cell of `config` into `config.output_dir`.
///
/// Cells already completed under the same config hash are skipped unless
/// `opts.force` is set. A failing cell is recorded with status `error` and
/// does not stop the others.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(dir.join("cells"))?;
    std::fs::create_dir_all(dir.join("data"))?;
    let hash = config.hash();

    let previous = if dir.join(MANIFEST_FILE).exists() {
        Some(Manifest::load(&dir)?)
    } else {
        None
    };
    let mut done: BTreeMap<String, CellEntry> = BTreeMap::new();
    if let Some(prev) = &previous {
        if prev.config_hash != hash {
            if !opts.force {
                return Err(Error::Config(format!(
                    "{} holds results of another config; use --force to replace them",
                    dir.display()
                )));
            }
            for f in &prev.files {
                let _ = std::fs::remove_file(dir.join(f));
            }
        } else if !opts.force {
            for c in &prev.cells {
                if c.status == CellStatus::Ok && c.files.iter().all(|f| dir.join(f).exists()) {
                    done.insert(c.id.clone(), c.clone());
                }
            }
        }
    }

    let jobs = cell_jobs(config);
    let todo: Vec<&CellJob<'_>> = jobs.iter().filter(|j| !done.contains_key(&j.id)).collect();
    let skipped = jobs.len() - todo.len();
    if todo.is_empty() {
        if let Some(prev) = previous {
            return Ok(ExperimentReport {
                manifest: prev,
                computed: 0,
                skipped,
            });
        }
    }

    let order: BTreeMap<&str, usize> = jobs.iter().enumerate().map(|(i, j)| (j.id.as_str(), i)).collect();
    let state = Mutex::new(Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        config_hash: hash,
        experiment: config.experiment,
        cells: done.into_values().collect(),
        files: Vec::new(),
    });
    let record = |entry: CellEntry| -> Result<()> {
        let mut m = state.lock().expect("manifest lock");
        m.cells.retain(|c| c.id != entry.id);
        m.cells.push(entry);
        m.cells.sort_by_key(|c| order.get(c.id.as_str()).copied().unwrap_or(usize::MAX));
        m.files = collect_files(&m, &[]);
        m.save(&dir)
    };

    let work = || {
        todo.par_iter()
            .map(|job| {
                let entry = match run_cell(config, job, &dir) {
                    Ok((outcome, files, summary)) => CellEntry {
                        id: job.id.clone(),
                        label: job.label.clone(),
                        grid_index: job.grid_index,
                        seed: job.seed,
                        status: CellStatus::Ok,
                        outcome,
                        error: None,
                        error_step: None,
                        files,
                        summary,
                    },
                    Err(e) => {
                        log::warn!("cell {} failed: {e}", job.id);
                        CellEntry {
                            id: job.id.clone(),
                            label: job.label.clone(),
                            grid_index: job.grid_index,
                            seed: job.seed,
                            status: CellStatus::Error,
                            outcome: None,
                            error: Some(e.to_string()),
                            error_step: e.step(),
                            files: Vec::new(),
                            summary: BTreeMap::new(),
                        }
                    }
                };
                record(entry)
            })
            .collect::<Result<Vec<()>>>()
    };
    match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work)?,
        None => work()?,
    };

    let mut manifest = state.into_inner().expect("manifest lock");
    let mut extra = vec![SUMMARY_FILE.to_string(), CONFIG_FILE.to_string()];
    for &seed in &config.seeds {
        let name = format!("data/seed_{seed}.json");
        std::fs::write(dir.join(&name), serde_json::to_string_pretty(&data_record(config, seed)?)? + "\n")?;
        extra.push(name);
    }
    let mut stored = config.clone();
    stored.output_dir = PathBuf::from(".");
    write_atomic(&dir.join(CONFIG_FILE), stored.to_toml_string()?.as_bytes())?;
    write_summary(&dir, &manifest.cells)?;
    manifest.files = collect_files(&manifest, &extra);
    manifest.save(&dir)?;
    Ok(ExperimentReport {
        manifest,
        computed: todo.len(),
        skipped,
    })
}

/// Write the generated data of each seed to `dir/data_seed_<s>.json`.
pub fn write_generated(config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    config
        .seeds
        .iter()
        .map(|&seed| {
            let path = dir.join(format!("data_seed_{seed}.json"));
            std::fs::write(&path, serde_json::to_string(&generate(config, seed)?)? + "\n")?;
            Ok(path)
        })
        .collect()
}

/// Plain-text table of a finished experiment; fails if listed files are missing.
pub fn report(dir: &Path) -> Result<String> {
    let m = Manifest::load(dir)?;
    let missing: Vec<&String> = m.files.iter().filter(|f| !dir.join(f).exists()).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("manifest lists missing files: {missing:?}")));
    }
    let mut out = format!(
        "experiment {:?}  config {}  cells {}  failed {}\n",
        m.experiment,
        &m.config_hash[..12],
        m.cells.len(),
        m.n_failed()
    );
    for c in &m.cells {
        let status = match (&c.status, &c.error) {
            (CellStatus::Ok, _) => "ok".to_string(),
            (CellStatus::Error, Some(e)) => format!("error: {e}"),
            (CellStatus::Error, None) => "error".to_string(),
        };
        let metrics: Vec<String> = c.summary.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
        out.push_str(&format!("{:<28} {}  {}\n", c.id, status, metrics.join(" ")));
    }
    Ok(out)
}

/// Kernel-panel matrices read back from a finished `ntk_panels` run,
/// keyed by `(mode, depth)`.
pub fn load_panels(dir: &Path) -> Result<BTreeMap<(KernelMode, usize), DMatrix<f64>>> {
    #[derive(Deserialize)]
    struct PanelIn {
        mode: KernelMode,
        depth: usize,
        response: Vec<Vec<f64>>,
    }
    let m = Manifest::load(dir)?;
    let mut out = BTreeMap::new();
    for f in m.files.iter().filter(|f| f.ends_with(".panels.json")) {
        let panels: Vec<PanelIn> = serde_json::from_str(&std::fs::read_to_string(dir.join(f))?)?;
        for p in panels {
            let rows = p.response.len();
            let cols = p.response.first().map_or(0, |r| r.len());
            let mat = DMatrix::from_fn(rows, cols, |i, j| p.response[i][j]);
            out.insert((p.mode, p.depth), mat);
        }
    }
    Ok(out)
}
