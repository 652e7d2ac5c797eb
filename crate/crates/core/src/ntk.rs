//! Tangent-kernel slices of deep matrix factorizations.
//!
//! A slice fixes a probe entry `(k, l)` and reports, for every entry
//! `(i, j)`, how much `β_ij` moves when the loss pushes on `β_kl`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{run, ObjectiveKind, Optimizer, Problem, RunConfig};
use crate::gaussian::CompletionTask;
use crate::model::{JacobianView, ModelKind, ModelParams};
use crate::natgrad::{natgrad_matfac, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    EgfNtk,
    EgdOnestep,
    NgfNtk,
    NgdOnestep,
}

impl KernelMode {
    pub const ALL: [KernelMode; 4] = [
        KernelMode::EgfNtk,
        KernelMode::EgdOnestep,
        KernelMode::NgfNtk,
        KernelMode::NgdOnestep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelMode::EgfNtk => "egf_ntk",
            KernelMode::EgdOnestep => "egd_onestep",
            KernelMode::NgfNtk => "ngf_ntk",
            KernelMode::NgdOnestep => "ngd_onestep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSlice {
    pub probe: (usize, usize),
    pub response: DMatrix<f64>,
    pub mode: KernelMode,
    /// Some factor product was rank-deficient when it was pseudo-inverted.
    pub rank_deficient: bool,
}

impl KernelSlice {
    /// Largest absolute response outside the probe entry.
    pub fn off_probe_max(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.response.nrows() {
            for j in 0..self.response.ncols() {
                if (i, j) != self.probe {
                    m = m.max(self.response[(i, j)].abs());
                }
            }
        }
        m
    }

    /// Largest absolute response outside the probe's row and column.
    pub fn off_cross_max(&self) -> f64 {
        let (k, l) = self.probe;
        let mut m = 0.0f64;
        for i in 0..self.response.nrows() {
            for j in 0..self.response.ncols() {
                if i != k && j != l {
                    m = m.max(self.response[(i, j)].abs());
                }
            }
        }
        m
    }
}

fn check(params: &ModelParams, probe: (usize, usize)) -> Result<()> {
    if params.kind() != ModelKind::Matfac {
        return Err(Error::argument("kernel slices need a matfac model"));
    }
    let d = params.spec().dim;
    if probe.0 >= d || probe.1 >= d {
        return Err(Error::argument(format!("probe {probe:?} outside a {d}x{d} matrix")));
    }
    Ok(())
}

/// `k_{ij,kl} = Σ_layers (A A^T)_{ik} (B^T B)_{jl}`, the Euclidean tangent kernel.
pub fn ntk_slice(params: &ModelParams, probe: (usize, usize)) -> Result<KernelSlice> {
    check(params, probe)?;
    let d = params.spec().dim;
    let JacobianView::Matfac { pairs } = params.jacobian() else {
        unreachable!()
    };
    let (k, l) = probe;
    let mut response = DMatrix::zeros(d, d);
    for (a, b) in &pairs {
        // column k of A Aᵀ and column l of Bᵀ B
        let left = a * a.row(k).transpose();
        let right = b.transpose() * b.column(l);
        response.ger(1.0, &left, &right, 1.0);
    }
    Ok(KernelSlice {
        probe,
        response,
        mode: KernelMode::EgfNtk,
        rank_deficient: false,
    })
}

/// Hypothesis-space response `J ∇̃` to a unit natural-gradient push at the probe.
pub fn natural_ntk_slice(params: &ModelParams, probe: (usize, usize)) -> Result<KernelSlice> {
    check(params, probe)?;
    let d = params.spec().dim;
    let mut g = DMatrix::zeros(d, d);
    g[probe] = 1.0;
    let dir = natgrad_matfac(params, &g, &SolverOptions::default())?;
    let response = params.jacobian().apply(&dir.blocks);
    if dir.rank_deficient {
        log::warn!("natural kernel slice with rank-deficient factors");
    }
    Ok(KernelSlice {
        probe,
        response,
        mode: KernelMode::NgfNtk,
        rank_deficient: dir.rank_deficient,
    })
}

/// `(β_after − β_before) / η` after one step on the squared error of the
/// probe entry against a target one unit above its current value.
pub fn onestep_slice(
    params: &ModelParams,
    probe: (usize, usize),
    optimizer: Optimizer,
    step_size: f64,
) -> Result<KernelSlice> {
    check(params, probe)?;
    let d = params.spec().dim;
    let before = params.collapse();
    let task = CompletionTask::single_observation(d, probe, before.matrix()[probe] + 1.0)?;
    let config = RunConfig::new(optimizer, ObjectiveKind::Completion, step_size, 1);
    let traj = run(&Problem::Completion(&task), params.clone(), &config)?;
    let after = traj.final_hypothesis();
    let response = (after.matrix() - before.matrix()) / step_size;
    if !response.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("one-step response".into()));
    }
    let rank_deficient = match optimizer {
        Optimizer::Egd => false,
        Optimizer::Ngd => {
            let mut g = DMatrix::zeros(d, d);
            g[probe] = 1.0;
            natgrad_matfac(params, &g, &SolverOptions::default())?.rank_deficient
        }
    };
    Ok(KernelSlice {
        probe,
        response,
        mode: match optimizer {
            Optimizer::Egd => KernelMode::EgdOnestep,
            Optimizer::Ngd => KernelMode::NgdOnestep,
        },
        rank_deficient,
    })
}

/// Slice for any mode; `step_size` is used by the one-step modes only.
pub fn kernel_slice(params: &ModelParams, probe: (usize, usize), mode: KernelMode, step_size: f64) -> Result<KernelSlice> {
    match mode {
        KernelMode::EgfNtk => ntk_slice(params, probe),
        KernelMode::NgfNtk => natural_ntk_slice(params, probe),
        KernelMode::EgdOnestep => onestep_slice(params, probe, Optimizer::Egd, step_size),
        KernelMode::NgdOnestep => onestep_slice(params, probe, Optimizer::Ngd, step_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelSpec};

    fn matfac(depth: usize, dim: usize, scale: f64, seed: u64) -> ModelParams {
        init(&ModelSpec::new(ModelKind::Matfac, depth, dim, scale, seed).unwrap()).unwrap()
    }

    fn identity_stack(depth: usize, dim: usize) -> ModelParams {
        let spec = ModelSpec::new(ModelKind::Matfac, depth, dim, 1.0, 0).unwrap();
        ModelParams::new(spec, vec![DMatrix::identity(dim, dim); depth]).unwrap()
    }

    #[test]
    fn direct_kernel_is_one_hot() {
        let s = ntk_slice(&matfac(1, 11, 0.3, 0), (5, 5)).unwrap();
        assert_eq!(s.response[(5, 5)], 1.0);
        assert_eq!(s.off_probe_max(), 0.0);
    }

    #[test]
    fn depth_two_gives_cross() {
        // identity factors: both layers respond only at the probe itself
        let s = ntk_slice(&identity_stack(2, 11), (5, 5)).unwrap();
        assert_eq!(s.off_cross_max(), 0.0);
        assert_eq!(s.response[(5, 5)], 2.0);
        let s = ntk_slice(&matfac(2, 11, 0.5, 4), (5, 5)).unwrap();
        assert_eq!(s.off_cross_max(), 0.0);
        for t in 0..11 {
            assert!(s.response[(5, t)] != 0.0 && s.response[(t, 5)] != 0.0);
        }
    }

    #[test]
    fn kernel_is_symmetric() {
        let p = matfac(3, 4, 0.7, 9);
        let a = ntk_slice(&p, (1, 2)).unwrap();
        let b = ntk_slice(&p, (3, 0)).unwrap();
        assert!((a.response[(3, 0)] - b.response[(1, 2)]).abs() < 1e-12);
    }

    #[test]
    fn natural_kernel_is_one_hot_for_full_rank() {
        for depth in 1..=4 {
            let s = natural_ntk_slice(&matfac(depth, 6, 0.8, depth as u64), (2, 3)).unwrap();
            assert!((s.response[(2, 3)] - 1.0).abs() < 1e-8);
            assert!(s.off_probe_max() < 1e-8);
            assert!(!s.rank_deficient);
        }
    }

    #[test]
    fn rank_one_factor_breaks_natural_kernel() {
        let spec = ModelSpec::new(ModelKind::Matfac, 2, 4, 1.0, 0).unwrap();
        let u = DMatrix::from_fn(4, 1, |i, _| 1.0 + i as f64);
        let v = DMatrix::from_fn(1, 4, |_, j| 1.0 - 0.3 * j as f64);
        let w2 = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.1 * (i + j) as f64 });
        let p = ModelParams::new(spec, vec![&u * &v, w2]).unwrap();
        let s = natural_ntk_slice(&p, (1, 1)).unwrap();
        assert!(s.rank_deficient);
        assert!(s.off_probe_max() > 1e-3 || (s.response[(1, 1)] - 1.0).abs() > 1e-3);
    }

    #[test]
    fn egd_one_step_direct_is_one_hot() {
        let s = onestep_slice(&matfac(1, 5, 0.5, 1), (2, 2), Optimizer::Egd, 1e-3).unwrap();
        assert!((s.response[(2, 2)] - 1.0).abs() < 1e-10);
        assert!(s.off_probe_max() < 1e-12);
    }

    #[test]
    fn ngd_one_step_is_nearly_one_hot() {
        let p = matfac(3, 5, 0.8, 2);
        let coarse = onestep_slice(&p, (2, 2), Optimizer::Ngd, 1e-3).unwrap();
        let fine = onestep_slice(&p, (2, 2), Optimizer::Ngd, 5e-4).unwrap();
        for s in [&coarse, &fine] {
            assert!(s.off_probe_max() < 1e-8 * s.response.amax());
        }
        let (ec, ef) = ((coarse.response[(2, 2)] - 1.0).abs(), (fine.response[(2, 2)] - 1.0).abs());
        assert!(ec < 1e-1 && ef < ec);
    }

    #[test]
    fn egd_one_step_depth_two_concentrates_on_cross() {
        let p = matfac(2, 5, 0.8, 3);
        let s = onestep_slice(&p, (2, 2), Optimizer::Egd, 1e-4).unwrap();
        assert!(s.off_cross_max() <= 1e-3 * s.response.amax());
    }
}
