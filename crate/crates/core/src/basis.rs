//! Fixed basis systems.
//!
//! Two families are provided: random features localized by a partition of
//! unity ([`RfmBasis`]) and 1D piecewise-linear hat functions
//! ([`FemBasis1D`]). [`VectorBasis`] stacks several scalar families that
//! share one coefficient vector.
//!
//! Points are always passed as an `n x d` matrix, one point per row. Design
//! matrices are `n x m` with entry `(i, j) = phi_j(x_i)`.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Characteristic,
    #[default]
    Smooth,
}

/// Argument of the random features inside partition `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureCoordinates {
    /// `sigma(k . x + b)` on the raw point.
    Global,
    /// `sigma(k . x~ + b)` with `x~ = (x - x_n) / r_n`.
    #[default]
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sin,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sin => z.sin(),
        }
    }
}

/// One window of a partition of unity.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    center: Vec<f64>,
    radius: Vec<f64>,
    kind: WindowKind,
    // Outward sides of edge windows are held at 1 so the windows still sum
    // to one up to (and past) the boundary of the tiled box.
    clamp_below: Vec<bool>,
    clamp_above: Vec<bool>,
}

impl Partition {
    pub fn new(center: Vec<f64>, radius: Vec<f64>, kind: WindowKind) -> Result<Self> {
        if center.is_empty() || center.len() != radius.len() {
            return Err(Error::config(
                "partition.radius",
                format!(
                    "center has {} coordinates but radius has {}",
                    center.len(),
                    radius.len()
                ),
            ));
        }
        if let Some(r) = radius.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::config(
                "partition.radius",
                format!("radius must be positive and finite, got {r}"),
            ));
        }
        let d = center.len();
        Ok(Self {
            center,
            radius,
            kind,
            clamp_below: vec![false; d],
            clamp_above: vec![false; d],
        })
    }

    pub fn with_edge_clamps(mut self, below: Vec<bool>, above: Vec<bool>) -> Self {
        assert_eq!(below.len(), self.dim());
        assert_eq!(above.len(), self.dim());
        self.clamp_below = below;
        self.clamp_above = above;
        self
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> &[f64] {
        &self.radius
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    /// Rescaled coordinate `(x - center) / radius`, per dimension.
    pub fn rescale(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .zip(&self.radius)
            .map(|((x, c), r)| (x - c) / r)
            .collect()
    }

    /// Window value at `x`: the product of the 1D windows over dimensions.
    pub fn window(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let mut w = 1.0;
        for k in 0..self.dim() {
            let t = (x[k] - self.center[k]) / self.radius[k];
            w *= window_1d(self.kind, t, self.clamp_below[k], self.clamp_above[k]);
            if w == 0.0 {
                break;
            }
        }
        w
    }
}

fn window_1d(kind: WindowKind, t: f64, clamp_below: bool, clamp_above: bool) -> f64 {
    use std::f64::consts::PI;
    match kind {
        WindowKind::Characteristic => {
            if (clamp_below && t < -1.0) || (clamp_above && t >= 1.0) || (-1.0..1.0).contains(&t) {
                1.0
            } else {
                0.0
            }
        }
        WindowKind::Smooth => {
            if clamp_below && t < -0.75 || clamp_above && t >= 0.75 {
                1.0
            } else if (-1.25..-0.75).contains(&t) {
                0.5 * (1.0 + (2.0 * PI * t).sin())
            } else if (-0.75..0.75).contains(&t) {
                1.0
            } else if (0.75..1.25).contains(&t) {
                0.5 * (1.0 - (2.0 * PI * t).sin())
            } else {
                0.0
            }
        }
    }
}

/// Structural description of a random-feature basis. Together with the seed
/// this reproduces every weight bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfmSpec {
    /// Partition counts per dimension.
    pub partitions: Vec<usize>,
    /// Random features per partition.
    pub features: usize,
    /// Features draw weights and biases from `[-range, range]`.
    pub range: f64,
    #[serde(default)]
    pub window: WindowKind,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub coordinates: FeatureCoordinates,
    #[serde(default)]
    pub seed: u64,
    /// Box tiled by the partitions, `[lo, hi]` per dimension. Defaults to
    /// `[-1, 1]^d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
}

impl RfmSpec {
    pub fn new(partitions: Vec<usize>, features: usize, range: f64, seed: u64) -> Self {
        Self {
            partitions,
            features,
            range,
            window: WindowKind::Smooth,
            activation: Activation::Tanh,
            coordinates: FeatureCoordinates::Local,
            seed,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<[f64; 2]>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn with_window(mut self, window: WindowKind) -> Self {
        self.window = window;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_coordinates(mut self, coordinates: FeatureCoordinates) -> Self {
        self.coordinates = coordinates;
        self
    }

    pub fn basis_count(&self) -> usize {
        self.partitions.iter().product::<usize>() * self.features
    }
}

/// Random features `omega_n(x) * sigma(k_nj . x + b_nj)`, partition-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RfmBasis {
    spec: RfmSpec,
    component: u32,
    partitions: Vec<Partition>,
    // len = m * dim, row j holds k_j
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl RfmBasis {
    pub fn new(dim: usize, spec: &RfmSpec) -> Result<Self> {
        Self::for_component(dim, spec, 0)
    }

    /// Builds the feature family of one vector component. Component 0 is the
    /// scalar basis; other components draw from their own streams.
    pub fn for_component(dim: usize, spec: &RfmSpec, component: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("basis.partitions", "dimension must be at least 1"));
        }
        if spec.partitions.len() != dim {
            return Err(Error::config(
                "basis.partitions",
                format!(
                    "expected {dim} partition counts, got {}",
                    spec.partitions.len()
                ),
            ));
        }
        if spec.partitions.iter().any(|&p| p == 0) {
            return Err(Error::config("basis.partitions", "partition counts must be >= 1"));
        }
        if spec.features == 0 {
            return Err(Error::config("basis.features", "features per partition must be >= 1"));
        }
        if !(spec.range > 0.0) || !spec.range.is_finite() {
            return Err(Error::config(
                "basis.range",
                format!("range must be positive, got {}", spec.range),
            ));
        }
        let bounds = match &spec.bounds {
            Some(b) if b.len() != dim => {
                return Err(Error::config(
                    "basis.bounds",
                    format!("expected {dim} bounds, got {}", b.len()),
                ))
            }
            Some(b) => {
                if let Some(bad) = b.iter().find(|[lo, hi]| !(hi > lo)) {
                    return Err(Error::config(
                        "basis.bounds",
                        format!("empty interval [{}, {}]", bad[0], bad[1]),
                    ));
                }
                b.clone()
            }
            None => vec![[-1.0, 1.0]; dim],
        };

        let partitions = tile(&spec.partitions, &bounds, spec.window)?;
        let m = partitions.len() * spec.features;
        let mut weights = Vec::with_capacity(m * dim);
        let mut biases = Vec::with_capacity(m);
        for n in 0..partitions.len() {
            let mut rng = rng::stream(spec.seed, rng::stream_id(component, n as u32));
            for _ in 0..spec.features {
                for _ in 0..dim {
                    weights.push(rng.random_range(-spec.range..=spec.range));
                }
                biases.push(rng.random_range(-spec.range..=spec.range));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            component,
            partitions,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &RfmSpec {
        &self.spec
    }

    pub fn component(&self) -> u32 {
        self.component
    }

    pub fn dim(&self) -> usize {
        self.spec.partitions.len()
    }

    pub fn len(&self) -> usize {
        self.biases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.biases.is_empty()
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn weight(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.weights[j * d..(j + 1) * d]
    }

    pub fn bias(&self, j: usize) -> f64 {
        self.biases[j]
    }

    /// Overwrites the weight and bias of feature `j`.
    pub fn set_feature(&mut self, j: usize, weight: &[f64], bias: f64) {
        let d = self.dim();
        assert_eq!(weight.len(), d);
        self.weights[j * d..(j + 1) * d].copy_from_slice(weight);
        self.biases[j] = bias;
    }

    pub fn design_matrix(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        check_point_dim(points, d)?;
        let n = points.nrows();
        let per = self.spec.features;
        let act = self.spec.activation;
        let mut out = DMatrix::zeros(n, self.len());
        let local = self.spec.coordinates == FeatureCoordinates::Local;
        let mut x = vec![0.0; d];
        let mut arg = vec![0.0; d];
        for i in 0..n {
            for (k, xk) in x.iter_mut().enumerate() {
                *xk = points[(i, k)];
            }
            for (p, part) in self.partitions.iter().enumerate() {
                let w = part.window(&x);
                if w == 0.0 {
                    continue;
                }
                for k in 0..d {
                    arg[k] = if local { (x[k] - part.center()[k]) / part.radius()[k] } else { x[k] };
                }
                for j in p * per..(p + 1) * per {
                    let z = self.weight(j).iter().zip(&arg).map(|(a, b)| a * b).sum::<f64>()
                        + self.biases[j];
                    out[(i, j)] = w * act.apply(z);
                }
            }
        }
        Ok(out)
    }
}

/// Uniform tensor grid of windows over `bounds`, radius half the spacing.
fn tile(counts: &[usize], bounds: &[[f64; 2]], kind: WindowKind) -> Result<Vec<Partition>> {
    let d = counts.len();
    let total: usize = counts.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let mut center = Vec::with_capacity(d);
        let mut radius = Vec::with_capacity(d);
        let mut below = Vec::with_capacity(d);
        let mut above = Vec::with_capacity(d);
        for k in 0..d {
            let [lo, hi] = bounds[k];
            let h = (hi - lo) / counts[k] as f64;
            center.push(lo + (idx[k] as f64 + 0.5) * h);
            radius.push(0.5 * h);
            below.push(idx[k] == 0);
            above.push(idx[k] + 1 == counts[k]);
        }
        out.push(Partition::new(center, radius, kind)?.with_edge_clamps(below, above));
        // last dimension varies fastest
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < counts[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(out)
}

fn check_point_dim(points: &DMatrix<f64>, d: usize) -> Result<()> {
    if points.ncols() != d {
        return Err(Error::config(
            "points",
            format!("basis has dimension {d}, points have {}", points.ncols()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FemSpec {
    /// Uniform mesh with this many elements over `bounds`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements: Option<usize>,
    /// Explicit node list; overrides `elements`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<f64>>,
    #[serde(default = "unit_interval")]
    pub bounds: [f64; 2],
}

fn unit_interval() -> [f64; 2] {
    [0.0, 1.0]
}

impl FemSpec {
    pub fn uniform(elements: usize) -> Self {
        Self {
            elements: Some(elements),
            nodes: None,
            bounds: unit_interval(),
        }
    }
}

/// P1 hat functions on a 1D mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct FemBasis1D {
    nodes: Vec<f64>,
}

impl FemBasis1D {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::config("basis.nodes", "need at least two nodes"));
        }
        if nodes.iter().any(|x| !x.is_finite()) || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("basis.nodes", "nodes must be finite and strictly increasing"));
        }
        Ok(Self { nodes })
    }

    pub fn uniform(lo: f64, hi: f64, elements: usize) -> Result<Self> {
        if elements == 0 {
            return Err(Error::config("basis.elements", "need at least one element"));
        }
        let h = (hi - lo) / elements as f64;
        let mut nodes: Vec<f64> = (0..=elements).map(|i| lo + i as f64 * h).collect();
        nodes[elements] = hi;
        Self::new(nodes)
    }

    pub fn from_spec(spec: &FemSpec) -> Result<Self> {
        match (&spec.nodes, spec.elements) {
            (Some(nodes), _) => Self::new(nodes.clone()),
            (None, Some(e)) => Self::uniform(spec.bounds[0], spec.bounds[1], e),
            (None, None) => Err(Error::config("basis", "fem basis needs `elements` or `nodes`")),
        }
    }

    pub fn spec(&self) -> FemSpec {
        FemSpec {
            elements: None,
            nodes: Some(self.nodes.clone()),
            bounds: [self.nodes[0], *self.nodes.last().unwrap()],
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Element index `k` with `x` in `[x_k, x_{k+1}]`.
    fn locate(&self, x: f64) -> Result<usize> {
        let first = self.nodes[0];
        let last = *self.nodes.last().unwrap();
        if !(x >= first && x <= last) {
            return Err(Error::Domain(format!(
                "point {x} lies outside the mesh [{first}, {last}]"
            )));
        }
        let k = self.nodes.partition_point(|&node| node <= x);
        Ok(k.saturating_sub(1).min(self.nodes.len() - 2))
    }

    /// Value of hat function `j` at `x`.
    pub fn eval(&self, j: usize, x: f64) -> Result<f64> {
        let k = self.locate(x)?;
        let (l, r) = (self.nodes[k], self.nodes[k + 1]);
        Ok(if j == k {
            (r - x) / (r - l)
        } else if j == k + 1 {
            (x - l) / (r - l)
        } else {
            0.0
        })
    }

    pub fn design_matrix(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_point_dim(points, 1)?;
        let mut out = DMatrix::zeros(points.nrows(), self.len());
        for i in 0..points.nrows() {
            let x = points[(i, 0)];
            let k = self.locate(x)?;
            let (l, r) = (self.nodes[k], self.nodes[k + 1]);
            out[(i, k)] = (r - x) / (r - l);
            out[(i, k + 1)] = (x - l) / (r - l);
        }
        Ok(out)
    }
}

/// Serializable description of a scalar basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BasisSpec {
    Rfm(RfmSpec),
    Fem(FemSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasisSystem {
    Rfm(RfmBasis),
    Fem(FemBasis1D),
}

impl BasisSystem {
    pub fn build(dim: usize, spec: &BasisSpec) -> Result<Self> {
        Self::build_component(dim, spec, 0)
    }

    pub fn build_component(dim: usize, spec: &BasisSpec, component: u32) -> Result<Self> {
        match spec {
            BasisSpec::Rfm(s) => Ok(Self::Rfm(RfmBasis::for_component(dim, s, component)?)),
            BasisSpec::Fem(s) => {
                if dim != 1 {
                    return Err(Error::config(
                        "basis.kind",
                        format!("fem bases are one-dimensional, data has dimension {dim}"),
                    ));
                }
                Ok(Self::Fem(FemBasis1D::from_spec(s)?))
            }
        }
    }

    pub fn spec(&self) -> BasisSpec {
        match self {
            Self::Rfm(b) => BasisSpec::Rfm(b.spec().clone()),
            Self::Fem(b) => BasisSpec::Fem(b.spec()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Rfm(b) => b.len(),
            Self::Fem(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Rfm(b) => b.dim(),
            Self::Fem(_) => 1,
        }
    }

    pub fn design_matrix(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::Rfm(b) => b.design_matrix(points),
            Self::Fem(b) => b.design_matrix(points),
        }
    }
}

/// Vector-valued basis: `phi_j(x) = [phi_j^(1)(x), ..., phi_j^(C)(x)]`, one
/// coefficient per index `j` shared by all components.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorBasis {
    components: Vec<BasisSystem>,
}

impl VectorBasis {
    /// Independent draws per component (RFM); FEM components repeat the mesh.
    pub fn build(dim: usize, spec: &BasisSpec, components: usize) -> Result<Self> {
        if components == 0 {
            return Err(Error::config("components", "need at least one component"));
        }
        let components = (0..components)
            .map(|c| BasisSystem::build_component(dim, spec, c as u32))
            .collect::<Result<Vec<_>>>()?;
        Self::from_components(components)
    }

    pub fn from_components(components: Vec<BasisSystem>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::config("components", "need at least one component"));
        };
        let (m, d) = (first.len(), first.dim());
        if components.iter().any(|c| c.len() != m || c.dim() != d) {
            return Err(Error::config(
                "components",
                "all components need the same size and dimension",
            ));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[BasisSystem] {
        &self.components
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn len(&self) -> usize {
        self.components[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `(C n) x m` matrix, component blocks stacked in order.
    pub fn design_matrix(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = points.nrows();
        let mut out = DMatrix::zeros(n * self.components.len(), self.len());
        for (c, comp) in self.components.iter().enumerate() {
            let block = comp.design_matrix(points)?;
            out.view_mut((c * n, 0), (n, block.ncols())).copy_from(&block);
        }
        Ok(out)
    }
}

/// `n` uniformly spaced points on `[lo, hi]` as an `n x 1` matrix.
pub fn uniform_grid_1d(lo: f64, hi: f64, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |i, _| {
        if n == 1 {
            lo
        } else if i + 1 == n {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    })
}

/// Tensor grid of `n^d` points on `[lo, hi]^d`, last coordinate fastest.
pub fn uniform_grid(lo: f64, hi: f64, n: usize, d: usize) -> DMatrix<f64> {
    let line = uniform_grid_1d(lo, hi, n);
    let total = n.pow(d as u32);
    DMatrix::from_fn(total, d, |i, k| {
        let stride = n.pow((d - 1 - k) as u32);
        line[((i / stride) % n, 0)]
    })
}
