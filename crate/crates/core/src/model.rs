//! Parametrizations of a linear predictor and their maps into hypothesis space.
//!
//! Three model families share one representation: an ordered stack of
//! parameter blocks stored as `DMatrix<f64>`. Vector-valued blocks (direct and
//! diagonal models) are `D x 1` columns; matrix-factor blocks are `D x D`.
//!
//! * direct vector: `beta = w`
//! * diagonal network: `beta = w_1 ⊙ w_2 ⊙ … ⊙ w_L`
//! * deep matrix factorization: `beta = W_1 W_2 ⋯ W_L`

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::chain_product;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    DirectVector,
    Diagonal,
    Matfac,
}

impl ModelKind {
    pub fn is_vector(self) -> bool {
        !matches!(self, ModelKind::Matfac)
    }
}

fn default_init_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub depth: usize,
    /// Vector length for direct/diagonal models, matrix side for factorizations.
    pub dim: usize,
    /// Standard deviation of the i.i.d. Gaussian entries at initialization.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, depth: usize, dim: usize, init_scale: f64, seed: u64) -> Result<Self> {
        let spec = ModelSpec {
            kind,
            depth,
            dim,
            init_scale,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn direct(dim: usize, init_scale: f64, seed: u64) -> Self {
        ModelSpec {
            kind: ModelKind::DirectVector,
            depth: 1,
            dim,
            init_scale,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::argument("depth must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::argument("dim must be at least 1"));
        }
        if self.kind == ModelKind::DirectVector && self.depth != 1 {
            return Err(Error::argument("direct_vector models have depth 1"));
        }
        // zero is accepted as a degenerate scale, see ModelParams::is_degenerate
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::argument(format!(
                "init_scale must be finite and non-negative, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// Shape `(rows, cols)` of every parameter block.
    pub fn block_shape(&self) -> (usize, usize) {
        if self.kind.is_vector() {
            (self.dim, 1)
        } else {
            (self.dim, self.dim)
        }
    }
}

/// The collapsed predictor `beta`: a `D x 1` column or a `D x D` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis(pub DMatrix<f64>);

impl Hypothesis {
    pub fn from_vector(v: DVector<f64>) -> Self {
        let n = v.len();
        Hypothesis(DMatrix::from_column_slice(n, 1, v.as_slice()))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// The hypothesis as a flat column (column-major for matrices).
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(self.0.as_slice())
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    layers: Vec<DMatrix<f64>>,
}

impl ModelParams {
    pub fn new(spec: ModelSpec, layers: Vec<DMatrix<f64>>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.depth {
            return Err(Error::shape(format!(
                "expected {} layers, got {}",
                spec.depth,
                layers.len()
            )));
        }
        let shape = spec.block_shape();
        if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.shape() != shape) {
            return Err(Error::shape(format!(
                "layer {i} has shape {:?}, expected {:?}",
                l.shape(),
                shape
            )));
        }
        Ok(ModelParams { spec, layers })
    }

    /// Convenience constructor for vector-valued models.
    pub fn from_vectors(spec: ModelSpec, layers: Vec<DVector<f64>>) -> Result<Self> {
        let layers = layers
            .into_iter()
            .map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
            .collect();
        Self::new(spec, layers)
    }

    /// Direct parametrization whose parameter is a given hypothesis.
    pub fn direct_from(h: &Hypothesis, seed: u64) -> Self {
        let m = h.matrix();
        let (kind, dim) = if m.ncols() == 1 {
            (ModelKind::DirectVector, m.nrows())
        } else {
            // depth-1 factorization is the direct parametrization for matrices
            (ModelKind::Matfac, m.nrows())
        };
        ModelParams {
            spec: ModelSpec {
                kind,
                depth: 1,
                dim,
                init_scale: 0.0,
                seed,
            },
            layers: vec![m.clone()],
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// All parameters zero, e.g. after initialization with scale 0.
    pub fn is_degenerate(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }

    /// `layers[l] += scale * blocks[l]` for every layer.
    pub fn axpy(&mut self, scale: f64, blocks: &[DMatrix<f64>]) -> Result<()> {
        if blocks.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "update has {} blocks for {} layers",
                blocks.len(),
                self.layers.len()
            )));
        }
        for (layer, b) in self.layers.iter_mut().zip(blocks) {
            if layer.shape() != b.shape() {
                return Err(Error::shape("update block shape differs from layer"));
            }
            *layer += b * scale;
        }
        Ok(())
    }

    /// Map parameters to the hypothesis they represent.
    pub fn collapse(&self) -> Hypothesis {
        match self.spec.kind {
            ModelKind::DirectVector => Hypothesis(self.layers[0].clone()),
            ModelKind::Diagonal => {
                let mut beta = self.layers[0].clone();
                for l in &self.layers[1..] {
                    beta.component_mul_assign(l);
                }
                Hypothesis(beta)
            }
            ModelKind::Matfac => Hypothesis(chain_product(&self.layers, self.spec.dim)),
        }
    }

    /// Structured Jacobian of [`collapse`](Self::collapse).
    pub fn jacobian(&self) -> JacobianView {
        let depth = self.layers.len();
        match self.spec.kind {
            ModelKind::DirectVector => JacobianView::Identity { dim: self.spec.dim },
            ModelKind::Diagonal => {
                let d = self.spec.dim;
                // prefix[l] = w_1 ⊙ … ⊙ w_{l-1}, suffix[l] = w_{l+1} ⊙ … ⊙ w_L
                let mut prefix = vec![DVector::from_element(d, 1.0); depth];
                for l in 1..depth {
                    prefix[l] = prefix[l - 1].component_mul(&self.layers[l - 1].column(0));
                }
                let mut suffix = vec![DVector::from_element(d, 1.0); depth];
                for l in (0..depth.saturating_sub(1)).rev() {
                    suffix[l] = suffix[l + 1].component_mul(&self.layers[l + 1].column(0));
                }
                let factors = prefix
                    .into_iter()
                    .zip(suffix)
                    .map(|(a, b)| a.component_mul(&b))
                    .collect();
                JacobianView::Diagonal { factors }
            }
            ModelKind::Matfac => {
                let d = self.spec.dim;
                let pairs = (0..depth)
                    .map(|l| {
                        (
                            chain_product(&self.layers[..l], d),
                            chain_product(&self.layers[l + 1..], d),
                        )
                    })
                    .collect();
                JacobianView::Matfac { pairs }
            }
        }
    }
}

/// Per-layer Jacobian blocks of the collapse map, never materialized densely.
#[derive(Debug, Clone)]
pub enum JacobianView {
    Identity {
        dim: usize,
    },
    /// `J_l = diag(factors[l])` with `factors[l] = a_l ⊙ b_l`.
    Diagonal { factors: Vec<DVector<f64>> },
    /// `J_l = B_l^T ⊗ A_l`, stored as the pair `(A_l, B_l)`.
    Matfac {
        pairs: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    },
}

impl JacobianView {
    pub fn depth(&self) -> usize {
        match self {
            JacobianView::Identity { .. } => 1,
            JacobianView::Diagonal { factors } => factors.len(),
            JacobianView::Matfac { pairs } => pairs.len(),
        }
    }

    /// `J_l · block` in hypothesis-space shape.
    pub fn apply_layer(&self, layer: usize, block: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            JacobianView::Identity { .. } => block.clone(),
            JacobianView::Diagonal { factors } => {
                let f = &factors[layer];
                DMatrix::from_fn(block.nrows(), 1, |i, _| f[i] * block[(i, 0)])
            }
            JacobianView::Matfac { pairs } => {
                let (a, b) = &pairs[layer];
                a * block * b
            }
        }
    }

    /// `Σ_l J_l · blocks[l]`: first-order change of the hypothesis.
    pub fn apply(&self, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut out = self.apply_layer(0, &blocks[0]);
        for (l, b) in blocks.iter().enumerate().skip(1) {
            out += self.apply_layer(l, b);
        }
        out
    }

    /// `J_l^T · g` for a hypothesis-space cotangent `g`.
    pub fn transpose_apply_layer(&self, layer: usize, g: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            JacobianView::Identity { .. } => g.clone(),
            JacobianView::Diagonal { factors } => {
                let f = &factors[layer];
                DMatrix::from_fn(g.nrows(), 1, |i, _| f[i] * g[(i, 0)])
            }
            JacobianView::Matfac { pairs } => {
                let (a, b) = &pairs[layer];
                a.transpose() * g * b.transpose()
            }
        }
    }
}

/// Draw every layer i.i.d. Gaussian with standard deviation `spec.init_scale`
/// from a stream seeded by `spec.seed`.
pub fn init(spec: &ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (r, c) = spec.block_shape();
    let layers = (0..spec.depth)
        .map(|_| {
            DMatrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                spec.init_scale * z
            })
        })
        .collect();
    ModelParams::new(spec.clone(), layers)
}

/// Sizes of `groups` contiguous groups covering `total` items, as equal as
/// possible with earlier groups taking the remainder.
pub fn group_sizes(total: usize, groups: usize) -> Vec<usize> {
    let base = total / groups;
    let extra = total % groups;
    (0..groups).map(|g| base + usize::from(g < extra)).collect()
}

/// Initialize a `target_depth` factorization by drawing a `deep_spec.depth`
/// factorization and multiplying contiguous groups of its factors.
pub fn collapsed_init(deep_spec: &ModelSpec, target_depth: usize) -> Result<ModelParams> {
    if deep_spec.kind != ModelKind::Matfac {
        return Err(Error::argument("collapsed_init requires a matfac spec"));
    }
    if target_depth == 0 || target_depth > deep_spec.depth {
        return Err(Error::argument(format!(
            "target depth {target_depth} must lie in 1..={}",
            deep_spec.depth
        )));
    }
    let deep = init(deep_spec)?;
    let mut layers = Vec::with_capacity(target_depth);
    let mut start = 0;
    for size in group_sizes(deep_spec.depth, target_depth) {
        layers.push(chain_product(&deep.layers[start..start + size], deep_spec.dim));
        start += size;
    }
    let spec = ModelSpec {
        depth: target_depth,
        ..deep_spec.clone()
    };
    ModelParams::new(spec, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag2(w1: &[f64], w2: &[f64]) -> ModelParams {
        let spec = ModelSpec::new(ModelKind::Diagonal, 2, w1.len(), 0.1, 0).unwrap();
        ModelParams::from_vectors(
            spec,
            vec![DVector::from_row_slice(w1), DVector::from_row_slice(w2)],
        )
        .unwrap()
    }

    #[test]
    fn diagonal_collapse_is_elementwise() {
        let p = diag2(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(p.collapse().as_slice(), &[3.0, 8.0]);
    }

    #[test]
    fn matfac_identity_cases() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let one = ModelParams::new(
            ModelSpec::new(ModelKind::Matfac, 1, 2, 0.1, 0).unwrap(),
            vec![m.clone()],
        )
        .unwrap();
        assert_eq!(one.collapse().0, m);
        let two = ModelParams::new(
            ModelSpec::new(ModelKind::Matfac, 2, 2, 0.1, 0).unwrap(),
            vec![DMatrix::identity(2, 2), m.clone()],
        )
        .unwrap();
        assert_eq!(two.collapse().0, m);
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let spec = ModelSpec::new(ModelKind::Matfac, 2, 3, 0.1, 0).unwrap();
        let err = ModelParams::new(spec.clone(), vec![DMatrix::zeros(3, 3)]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = ModelParams::new(spec, vec![DMatrix::zeros(3, 3), DMatrix::zeros(2, 3)]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(ModelKind::DirectVector, 2, 3, 0.1, 0).is_err());
        assert!(ModelSpec::new(ModelKind::Diagonal, 0, 3, 0.1, 0).is_err());
        assert!(ModelSpec::new(ModelKind::Diagonal, 2, 0, 0.1, 0).is_err());
        assert!(ModelSpec::new(ModelKind::Diagonal, 2, 3, -1.0, 0).is_err());
        assert!(ModelSpec::new(ModelKind::Diagonal, 2, 3, f64::NAN, 0).is_err());
    }

    #[test]
    fn diagonal_jacobian_factors() {
        let p = diag2(&[1.0, 2.0], &[3.0, 4.0]);
        match p.jacobian() {
            JacobianView::Diagonal { factors } => {
                assert_eq!(factors[0].as_slice(), &[3.0, 4.0]);
                assert_eq!(factors[1].as_slice(), &[1.0, 2.0]);
            }
            other => panic!("unexpected view {other:?}"),
        }
    }

    #[test]
    fn zero_entry_kills_other_layers_column() {
        let spec = ModelSpec::new(ModelKind::Diagonal, 3, 3, 0.1, 0).unwrap();
        let p = ModelParams::from_vectors(
            spec,
            vec![
                DVector::from_row_slice(&[1.0, 0.0, 2.0]),
                DVector::from_row_slice(&[3.0, 4.0, 5.0]),
                DVector::from_row_slice(&[6.0, 7.0, 8.0]),
            ],
        )
        .unwrap();
        let JacobianView::Diagonal { factors } = p.jacobian() else {
            panic!()
        };
        assert_eq!(factors[1][1], 0.0);
        assert_eq!(factors[2][1], 0.0);
        assert_eq!(factors[0][1], 28.0);
    }

    #[test]
    fn matfac_jacobian_empty_products() {
        let spec = ModelSpec::new(ModelKind::Matfac, 2, 3, 0.5, 9).unwrap();
        let p = init(&spec).unwrap();
        let JacobianView::Matfac { pairs } = p.jacobian() else {
            panic!()
        };
        assert_eq!(pairs[0].0, DMatrix::identity(3, 3));
        assert_eq!(pairs[0].1, p.layers()[1]);
        assert_eq!(pairs[1].0, p.layers()[0]);
        assert_eq!(pairs[1].1, DMatrix::identity(3, 3));
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::new(ModelKind::Matfac, 3, 4, 0.3, 42).unwrap();
        assert_eq!(init(&spec).unwrap(), init(&spec).unwrap());
        let other = ModelSpec { seed: 43, ..spec.clone() };
        assert_ne!(init(&spec).unwrap().layers(), init(&other).unwrap().layers());
    }

    #[test]
    fn zero_scale_is_degenerate() {
        let spec = ModelSpec::new(ModelKind::Diagonal, 2, 5, 0.0, 1).unwrap();
        let p = init(&spec).unwrap();
        assert!(p.is_degenerate());
        assert!(p.collapse().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grouping_rule() {
        assert_eq!(group_sizes(6, 2), vec![3, 3]);
        assert_eq!(group_sizes(6, 3), vec![2, 2, 2]);
        assert_eq!(group_sizes(7, 3), vec![3, 2, 2]);
        assert_eq!(group_sizes(5, 5), vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn collapsed_init_groups_contiguous_factors() {
        let deep = ModelSpec::new(ModelKind::Matfac, 6, 4, 0.7, 5).unwrap();
        let draw = init(&deep).unwrap();
        let w = draw.layers();
        let two = collapsed_init(&deep, 2).unwrap();
        assert_eq!(two.layers()[0], &w[0] * &w[1] * &w[2]);
        assert_eq!(two.layers()[1], &w[3] * &w[4] * &w[5]);
        let three = collapsed_init(&deep, 3).unwrap();
        assert_eq!(three.layers()[1], &w[2] * &w[3]);
        let same = collapsed_init(&deep, 6).unwrap();
        assert_eq!(same.layers(), draw.layers());
        let full = draw.collapse().0;
        for t in 1..=6 {
            let c = collapsed_init(&deep, t).unwrap().collapse().0;
            assert!((c - &full).amax() <= 1e-14 * full.amax().max(1.0));
        }
        assert!(collapsed_init(&deep, 7).is_err());
    }
}
