//! Explicit-Euler discretizations of Euclidean and natural gradient flow.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::WeightingKind;
use crate::gaussian::{mc_grad, mc_loss, natural_grad_beta, CompletionTask};
use crate::linalg::{cosine, effective_rank, nuclear_norm};
use crate::logistic::{grad_beta, ClassificationDataset, FisherWeighting, LogitState};
use crate::model::{Hypothesis, ModelKind, ModelParams, ModelSpec};
use crate::natgrad::{natgrad_diagonal_logistic, natgrad_direct_logistic, natgrad_matfac, SolverOptions};
use crate::stable::softplus;

/// Version of the trajectory file layout written by [`write_trajectory`].
pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

/// Hypotheses with at most this many rows are stored in every record.
pub const SNAPSHOT_MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Egd,
    Ngd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Logistic,
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    pub loss_below: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub optimizer: Optimizer,
    pub objective: ObjectiveKind,
    pub step_size: f64,
    pub max_steps: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub fisher_weighting: WeightingKind,
    #[serde(default)]
    pub stop: StopRule,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn default_record_every() -> usize {
    1
}

impl RunConfig {
    pub fn new(optimizer: Optimizer, objective: ObjectiveKind, step_size: f64, max_steps: usize) -> Self {
        RunConfig {
            optimizer,
            objective,
            step_size,
            max_steps,
            record_every: 1,
            fisher_weighting: WeightingKind::Sample,
            stop: StopRule::default(),
            solver: SolverOptions::default(),
        }
    }

    pub fn with_record_every(mut self, every: usize) -> Self {
        self.record_every = every;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::argument("step_size must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::argument("max_steps must be positive"));
        }
        if self.record_every == 0 || self.record_every > self.max_steps {
            return Err(Error::argument("record_every must lie in 1..=max_steps"));
        }
        Ok(())
    }

    /// Pseudo-time of a step, `step · η`.
    pub fn time_of(&self, step: usize) -> f64 {
        step as f64 * self.step_size
    }
}

/// What is being minimized, plus data used only for reporting.
#[derive(Debug, Clone, Copy)]
pub enum Problem<'a> {
    Logistic {
        train: &'a ClassificationDataset,
        /// Outer-expectation data for population-weighted Fisher.
        population: Option<&'a ClassificationDataset>,
        test: Option<&'a ClassificationDataset>,
        /// Named directions to report cosine similarity against.
        references: &'a [(String, DVector<f64>)],
    },
    Completion(&'a CompletionTask),
}

impl<'a> Problem<'a> {
    pub fn logistic(train: &'a ClassificationDataset) -> Self {
        Problem::Logistic {
            train,
            population: None,
            test: None,
            references: &[],
        }
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Problem::Logistic { .. } => ObjectiveKind::Logistic,
            Problem::Completion(_) => ObjectiveKind::Completion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
    pub metrics: BTreeMap<String, f64>,
    /// Column-major hypothesis, present when the dimension is small enough.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<Vec<f64>>,
    /// Training logits `X β` for classification runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    /// The stop rule fired at this step.
    Stopped { step: usize },
    /// Loss or parameters became non-finite at this step.
    Diverged { step: usize },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub final_params: ModelParams,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn final_hypothesis(&self) -> Hypothesis {
        self.final_params.collapse()
    }

    pub fn last(&self) -> &Record {
        self.records.last().expect("trajectories hold at least one record")
    }
}

fn check_compatible(params: &ModelParams, problem: &Problem<'_>, config: &RunConfig) -> Result<()> {
    if problem.kind() != config.objective {
        return Err(Error::argument("objective in config does not match the problem"));
    }
    let spec = params.spec();
    match problem {
        Problem::Logistic { train, population, .. } => {
            if !spec.kind.is_vector() {
                return Err(Error::argument("logistic objective needs a vector-valued model"));
            }
            if spec.dim != train.dim() {
                return Err(Error::shape("model and data dimensions differ"));
            }
            if config.fisher_weighting == WeightingKind::Population && population.is_none() {
                return Err(Error::argument("population weighting needs population data"));
            }
        }
        Problem::Completion(task) => {
            if spec.kind != ModelKind::Matfac {
                return Err(Error::argument("completion objective needs a matfac model"));
            }
            if spec.dim != task.dim() {
                return Err(Error::shape("model and task dimensions differ"));
            }
        }
    }
    Ok(())
}

fn objective_loss(problem: &Problem<'_>, beta: &Hypothesis) -> Result<f64> {
    match problem {
        Problem::Logistic { train, .. } => {
            let state = LogitState::new(train, &beta.to_vector())?;
            Ok(state.u.iter().map(|&u| softplus(-u)).sum())
        }
        Problem::Completion(task) => mc_loss(task, beta.matrix()),
    }
}

/// Per-layer update direction `d` such that the step is `θ ← θ − η d`.
fn update_direction(params: &ModelParams, problem: &Problem<'_>, config: &RunConfig) -> Result<Vec<DMatrix<f64>>> {
    let beta = params.collapse();
    match config.optimizer {
        Optimizer::Egd => {
            let g = match problem {
                Problem::Logistic { train, .. } => {
                    let g = grad_beta(train, &beta.to_vector())?;
                    DMatrix::from_column_slice(g.len(), 1, g.as_slice())
                }
                Problem::Completion(task) => mc_grad(task, beta.matrix())?,
            };
            let jac = params.jacobian();
            Ok((0..params.depth()).map(|l| jac.transpose_apply_layer(l, &g)).collect())
        }
        Optimizer::Ngd => match problem {
            Problem::Logistic { train, population, .. } => {
                let weighting = match (config.fisher_weighting, population) {
                    (WeightingKind::Population, Some(p)) => FisherWeighting::Population(p),
                    _ => FisherWeighting::Sample,
                };
                let dir = match params.kind() {
                    ModelKind::DirectVector => {
                        natgrad_direct_logistic(train, &beta.to_vector(), weighting, &config.solver)?
                    }
                    ModelKind::Diagonal => natgrad_diagonal_logistic(train, params, weighting, &config.solver)?,
                    ModelKind::Matfac => unreachable!("rejected by check_compatible"),
                };
                Ok(dir.blocks)
            }
            Problem::Completion(task) => {
                let g = natural_grad_beta(task, beta.matrix())?;
                let dir = natgrad_matfac(params, &g, &config.solver)?;
                if dir.rank_deficient {
                    log::debug!("rank-deficient factor, condition {:.3e}", dir.condition);
                }
                Ok(dir.blocks)
            }
        },
    }
}

fn make_record(
    step: usize,
    config: &RunConfig,
    loss: f64,
    params: &ModelParams,
    problem: &Problem<'_>,
) -> Record {
    let beta = params.collapse();
    let hypothesis = (params.spec().dim <= SNAPSHOT_MAX_DIM).then(|| beta.as_slice().to_vec());
    let logits = match problem {
        Problem::Logistic { train, .. } => Some((train.x() * beta.to_vector()).as_slice().to_vec()),
        Problem::Completion(_) => None,
    };
    let mut metrics = if beta.is_finite() {
        metrics(&beta, problem)
    } else {
        BTreeMap::new()
    };
    metrics.insert("loss".into(), loss);
    Record {
        step,
        t: config.time_of(step),
        loss,
        metrics,
        hypothesis,
        logits,
    }
}

/// Iterate the configured update from `params`, recording every
/// `record_every` steps as well as the first and last step.
///
/// Solver failures abort with [`Error::Run`] carrying the step index. A
/// non-finite loss ends the run early with [`Outcome::Diverged`] and a final
/// record describing the failing state.
pub fn run(problem: &Problem<'_>, params: ModelParams, config: &RunConfig) -> Result<Trajectory> {
    config.validate()?;
    check_compatible(&params, problem, config)?;
    let mut params = params;
    let mut records = Vec::new();
    let mut outcome = Outcome::Completed;
    for step in 0..=config.max_steps {
        let loss = objective_loss(problem, &params.collapse()).map_err(|e| e.at_step(step))?;
        if !loss.is_finite() || !params.is_finite() {
            records.push(make_record(step, config, loss, &params, problem));
            outcome = Outcome::Diverged { step };
            break;
        }
        let stop = config.stop.loss_below.is_some_and(|b| loss < b);
        if step % config.record_every == 0 || step == config.max_steps || stop {
            records.push(make_record(step, config, loss, &params, problem));
        }
        if stop {
            outcome = Outcome::Stopped { step };
            break;
        }
        if step == config.max_steps {
            break;
        }
        let dir = update_direction(&params, problem, config).map_err(|e| e.at_step(step))?;
        params.axpy(-config.step_size, &dir)?;
    }
    Ok(Trajectory {
        records,
        final_params: params,
        outcome,
    })
}

/// A direct parametrization starting from the same hypothesis as `params`.
pub fn matched_direct(params: &ModelParams) -> ModelParams {
    ModelParams::direct_from(&params.collapse(), params.spec().seed)
}

/// Summary metrics of a hypothesis for the given problem.
pub fn metrics(beta: &Hypothesis, problem: &Problem<'_>) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    match problem {
        Problem::Logistic {
            train, test, references, ..
        } => {
            let b = beta.to_vector();
            m.insert("train_accuracy".into(), train.accuracy(&b));
            if let Some(test) = test {
                m.insert("test_accuracy".into(), test.accuracy(&b));
            }
            let l2 = b.norm();
            let u = train.signed_design() * &b;
            m.insert("min_margin".into(), if l2 > 0.0 { u.min() / l2 } else { 0.0 });
            m.insert("l1_norm".into(), b.lp_norm(1));
            m.insert("l2_norm".into(), l2);
            for (name, r) in references.iter() {
                m.insert(format!("cos_{name}"), cosine(b.as_slice(), r.as_slice()));
            }
        }
        Problem::Completion(task) => {
            let b = beta.matrix();
            m.insert("mse_observed".into(), task.mse(b, true));
            m.insert("mse_unobserved".into(), task.mse(b, false));
            m.insert("nuclear_norm".into(), nuclear_norm(b));
            m.insert("effective_rank".into(), effective_rank(b));
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionLimit {
    /// Normalized fitted slope; `None` when the logits do not grow.
    pub direction: Option<DVector<f64>>,
    /// Per-coordinate slope of the logits against pseudo-time.
    pub slopes: DVector<f64>,
    pub intercepts: DVector<f64>,
    /// `β / ‖β‖` at the final snapshot, when the hypothesis is non-zero.
    pub final_direction: Option<DVector<f64>>,
    pub degenerate: bool,
}

/// Least-squares fit `s_t ≈ t·a + c` over the later half of a trajectory's logits.
pub fn direction_limit(traj: &Trajectory) -> Result<DirectionLimit> {
    let mut times = Vec::new();
    let mut logits = Vec::new();
    for r in &traj.records {
        let s = r
            .logits
            .as_ref()
            .ok_or_else(|| Error::argument("trajectory has no logits"))?;
        times.push(r.t);
        logits.push(DVector::from_column_slice(s));
    }
    let mut fit = fit_linear_growth(&times, &logits)?;
    let beta = traj.final_hypothesis().to_vector();
    let n = beta.norm();
    fit.final_direction = (n > 0.0 && n.is_finite()).then(|| beta / n);
    Ok(fit)
}

/// Fit `s(t) ≈ t·a + c` per coordinate over the last half of the samples.
pub fn fit_linear_growth(times: &[f64], logits: &[DVector<f64>]) -> Result<DirectionLimit> {
    if times.len() != logits.len() {
        return Err(Error::shape("times and logits differ in length"));
    }
    if times.len() < 10 {
        return Err(Error::argument("need at least 10 snapshots"));
    }
    let start = times.len() / 2;
    let ts = &times[start..];
    let ss = &logits[start..];
    let dim = ss[0].len();
    let k = ts.len() as f64;
    let t_mean = ts.iter().sum::<f64>() / k;
    let t_var: f64 = ts.iter().map(|t| (t - t_mean).powi(2)).sum();
    if t_var <= 0.0 {
        return Err(Error::argument("snapshots share one pseudo-time"));
    }
    let mut slopes = DVector::zeros(dim);
    let mut intercepts = DVector::zeros(dim);
    for i in 0..dim {
        let s_mean = ss.iter().map(|s| s[i]).sum::<f64>() / k;
        let cov: f64 = ts.iter().zip(ss).map(|(t, s)| (t - t_mean) * (s[i] - s_mean)).sum();
        slopes[i] = cov / t_var;
        intercepts[i] = s_mean - slopes[i] * t_mean;
    }
    let scale = ss.iter().map(|s| s.amax()).fold(1.0, f64::max);
    let degenerate = slopes.amax() <= 1e-12 * scale;
    let direction = (!degenerate).then(|| slopes.normalize());
    Ok(DirectionLimit {
        direction,
        slopes,
        intercepts,
        final_direction: None,
        degenerate,
    })
}

/// Sidecar describing a trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryHeader {
    pub format_version: u32,
    pub run: RunConfig,
    pub model: ModelSpec,
    pub outcome: Outcome,
    pub n_records: usize,
    /// Final parameter blocks, each column-major.
    pub final_layers: Vec<Vec<f64>>,
    /// Final hypothesis, column-major.
    pub final_hypothesis: Vec<f64>,
}

impl TrajectoryHeader {
    pub fn new(traj: &Trajectory, run: &RunConfig) -> Self {
        TrajectoryHeader {
            format_version: TRAJECTORY_FORMAT_VERSION,
            run: run.clone(),
            model: traj.final_params.spec().clone(),
            outcome: traj.outcome.clone(),
            n_records: traj.records.len(),
            final_layers: traj
                .final_params
                .layers()
                .iter()
                .map(|l| l.as_slice().to_vec())
                .collect(),
            final_hypothesis: traj.final_hypothesis().as_slice().to_vec(),
        }
    }
}

/// Write one JSON record per line to `records_path` and the header to `header_path`.
pub fn write_trajectory(traj: &Trajectory, run: &RunConfig, records_path: &Path, header_path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(records_path)?);
    for r in &traj.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let header = TrajectoryHeader::new(traj, run);
    std::fs::write(header_path, serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_header(path: &Path) -> Result<TrajectoryHeader> {
    let header: TrajectoryHeader = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if header.format_version != TRAJECTORY_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported trajectory format version {}",
            header.format_version
        )));
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelSpec};
    use crate::reference::{analytic_ngf_logits, ngf_constant};

    #[test]
    fn config_validation() {
        let c = RunConfig::new(Optimizer::Egd, ObjectiveKind::Logistic, 0.1, 10);
        assert!(c.validate().is_ok());
        assert!(RunConfig::new(Optimizer::Egd, ObjectiveKind::Logistic, 0.0, 10).validate().is_err());
        assert!(c.clone().with_record_every(11).validate().is_err());
        assert_eq!(c.time_of(7), 7.0 * 0.1);
    }

    #[test]
    fn egd_direct_completion_leaves_unobserved_entries() {
        let task = CompletionTask::single_observation(3, (1, 1), 2.0).unwrap();
        let spec = ModelSpec::new(ModelKind::Matfac, 1, 3, 0.5, 4).unwrap();
        let p0 = init(&spec).unwrap();
        let cfg = RunConfig::new(Optimizer::Egd, ObjectiveKind::Completion, 0.1, 50);
        let traj = run(&Problem::Completion(&task), p0.clone(), &cfg).unwrap();
        let b0 = p0.collapse();
        let b1 = traj.final_hypothesis();
        for i in 0..3 {
            for j in 0..3 {
                if (i, j) != (1, 1) {
                    assert_eq!(b0.matrix()[(i, j)], b1.matrix()[(i, j)]);
                }
            }
        }
        // residual contracts by (1 − η) per step
        let r0 = b0.matrix()[(1, 1)] - 2.0;
        let r1 = b1.matrix()[(1, 1)] - 2.0;
        assert!((r1 - r0 * 0.9f64.powi(50)).abs() < 1e-12);
        assert_eq!(traj.records.len(), 51);
    }

    #[test]
    fn ngd_single_point_follows_analytic_curve() {
        let ds = ClassificationDataset::new(DMatrix::from_element(1, 1, -1.0), DVector::from_element(1, -1.0)).unwrap();
        let p0 = ModelParams::direct_from(&Hypothesis::from_vector(DVector::from_element(1, 0.0)), 0);
        let c = ngf_constant(0.0);
        let err = |eta: f64| {
            let steps = (2.0 / eta).round() as usize;
            let cfg = RunConfig::new(Optimizer::Ngd, ObjectiveKind::Logistic, eta, steps);
            let traj = run(&Problem::logistic(&ds), p0.clone(), &cfg).unwrap();
            let r = traj.last();
            // the label is −1, so the signed logit follows the curve
            (-r.logits.as_ref().unwrap()[0] - analytic_ngf_logits(r.t, c).unwrap()).abs()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        assert!(e1 < 0.05, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.3, "{e1} {e2}");
    }

    #[test]
    fn incompatible_model_is_rejected() {
        let task = CompletionTask::single_observation(2, (0, 0), 1.0).unwrap();
        let p = init(&ModelSpec::direct(2, 0.1, 0)).unwrap();
        let cfg = RunConfig::new(Optimizer::Egd, ObjectiveKind::Completion, 0.1, 2);
        assert!(run(&Problem::Completion(&task), p, &cfg).is_err());
    }

    #[test]
    fn stop_rule_ends_run() {
        let task = CompletionTask::single_observation(2, (0, 0), 1.0).unwrap();
        let p = init(&ModelSpec::new(ModelKind::Matfac, 1, 2, 0.0, 0).unwrap()).unwrap();
        let mut cfg = RunConfig::new(Optimizer::Egd, ObjectiveKind::Completion, 0.5, 100);
        cfg.stop.loss_below = Some(1e-6);
        let traj = run(&Problem::Completion(&task), p, &cfg).unwrap();
        assert!(matches!(traj.outcome, Outcome::Stopped { .. }));
        assert!(traj.last().loss < 1e-6);
    }

    #[test]
    fn divergence_is_recorded() {
        let task = CompletionTask::single_observation(2, (0, 0), 1.0).unwrap();
        let p = init(&ModelSpec::new(ModelKind::Matfac, 1, 2, 1.0, 0).unwrap()).unwrap();
        let cfg = RunConfig::new(Optimizer::Egd, ObjectiveKind::Completion, 5.0, 2000).with_record_every(100);
        let traj = run(&Problem::Completion(&task), p, &cfg).unwrap();
        assert!(matches!(traj.outcome, Outcome::Diverged { .. }));
        assert!(!traj.last().loss.is_finite());
    }

    #[test]
    fn completion_metrics() {
        let task = CompletionTask::single_observation(3, (0, 0), 1.0).unwrap();
        let m = metrics(&Hypothesis(DMatrix::identity(3, 3)), &Problem::Completion(&task));
        assert!((m["nuclear_norm"] - 3.0).abs() < 1e-12);
        assert!((m["effective_rank"] - 3.0).abs() < 1e-12);
        let r1 = DMatrix::from_fn(3, 3, |i, j| (i + 1) as f64 * (j as f64 - 0.5));
        let m = metrics(&Hypothesis(r1), &Problem::Completion(&task));
        assert!((m["effective_rank"] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_growth_fit() {
        let y = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let times: Vec<f64> = (0..40).map(|k| k as f64 * 0.5).collect();
        let logits: Vec<_> = times.iter().map(|t| &y * *t + DVector::from_element(3, 0.3)).collect();
        let fit = fit_linear_growth(&times, &logits).unwrap();
        assert!((fit.direction.unwrap() - y.normalize()).amax() < 1e-12);

        let times: Vec<f64> = (0..=40).map(|k| 10.0 + k as f64 * 0.25).collect();
        let logits: Vec<_> = times
            .iter()
            .map(|&t| &y * analytic_ngf_logits(t, 0.0).unwrap())
            .collect();
        let fit = fit_linear_growth(&times, &logits).unwrap();
        for (s, yi) in fit.slopes.iter().zip(y.iter()) {
            assert!((s / yi - 1.0).abs() < 0.02);
        }

        let flat = vec![DVector::from_element(3, 2.0); 12];
        let fit = fit_linear_growth(&(0..12).map(|k| k as f64).collect::<Vec<_>>(), &flat).unwrap();
        assert!(fit.degenerate && fit.direction.is_none());
    }

    #[test]
    fn trajectory_roundtrip() {
        let task = CompletionTask::single_observation(2, (0, 0), 1.0).unwrap();
        let p = init(&ModelSpec::new(ModelKind::Matfac, 2, 2, 0.5, 1).unwrap()).unwrap();
        let cfg = RunConfig::new(Optimizer::Ngd, ObjectiveKind::Completion, 0.1, 10).with_record_every(5);
        let traj = run(&Problem::Completion(&task), p, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (rp, hp) = (dir.path().join("r.jsonl"), dir.path().join("h.json"));
        write_trajectory(&traj, &cfg, &rp, &hp).unwrap();
        assert_eq!(read_records(&rp).unwrap(), traj.records);
        let h = read_header(&hp).unwrap();
        assert_eq!(h.n_records, 3);
        assert_eq!(h.run, cfg);
    }
}
