//! Model flows with explicit vector fields, flow maps and derivative cocycles.
//!
//! Two kinds are provided:
//!
//! * [`MappingTorusModel`]: the suspension of a hyperbolic toral automorphism `A` with constant
//!   roof `c`. Points are `(u, h)` with `u` in the unit torus and `h` in `[0, c)`, and the
//!   identification is `(u, c) ~ (A u mod 1, 0)`. The metric at height `h` is the pull-back of
//!   the flat metric by `A^{h/c}`, so it glues continuously across the identification and the
//!   derivative of the flow is exact in the flat product frame.
//! * [`OdeModel`]: a user vector field on `R^n`, integrated by fixed-step RK4 together with its
//!   variational equation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::linalg::{block_diag, spectral_norm};
use crate::{Error, Result};

pub type Point = DVector<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowKind {
    MappingTorus,
    NumericOde,
}

/// Common interface of model flows.
pub trait FlowModel: Send + Sync {
    /// Dimension of the ambient manifold (`d + 1`).
    fn ambient_dim(&self) -> usize;
    fn flow_kind(&self) -> FlowKind;
    /// Time rescaling applied to the raw vector field.
    fn speed_scale(&self) -> f64;
    /// Hölder exponent of the derivative of the vector field.
    fn beta(&self) -> f64 {
        1.0
    }
    fn vector_field(&self, x: &Point) -> DVector<f64>;
    fn flow_at(&self, x: &Point, t: f64) -> Result<Point>;
    /// `dφ^t_x` in the local frames at `x` and `φ^t(x)`.
    fn derivative_cocycle(&self, x: &Point, t: f64) -> Result<DMatrix<f64>>;
    /// A square root `R` of the metric Gram matrix at `x`: `<v, w>_x = (R v)·(R w)`.
    fn metric_sqrt(&self, x: &Point) -> DMatrix<f64>;

    fn metric(&self, x: &Point) -> DMatrix<f64> {
        let r = self.metric_sqrt(x);
        r.transpose() * r
    }

    fn inner(&self, x: &Point, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let r = self.metric_sqrt(x);
        (&r * v).dot(&(&r * w))
    }

    fn norm(&self, x: &Point, v: &DVector<f64>) -> f64 {
        (self.metric_sqrt(x) * v).norm()
    }

    /// Operator norm of a linear map `T_x M -> T_y M` given in local frames.
    fn operator_norm(&self, x: &Point, y: &Point, m: &DMatrix<f64>) -> f64 {
        let rx = self.metric_sqrt(x);
        let ry = self.metric_sqrt(y);
        let rx_inv = rx.try_inverse().expect("metric square root is invertible");
        spectral_norm(&(ry * m * rx_inv))
    }
}

/// How the time rescaling of a model is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeedScale {
    /// `min(1, 1/‖∇X‖)` with `‖∇X‖` estimated by finite differences.
    Auto,
    Fixed(f64),
}

/// Suspension of a hyperbolic toral automorphism with constant roof.
#[derive(Clone, Debug)]
pub struct MappingTorusModel {
    base: Vec<Vec<i64>>,
    base_f: DMatrix<f64>,
    base_inv_f: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    roof: f64,
    speed: f64,
    beta: f64,
}

impl MappingTorusModel {
    /// Builds the suspension of `base` with roof `roof`.
    ///
    /// The base matrix must be integer, unimodular, symmetric and have positive eigenvalues
    /// off the unit circle; these make `A^{h/c}` real and the metric well defined.
    pub fn new(base: Vec<Vec<i64>>, roof: f64, speed: SpeedScale) -> Result<Self> {
        let d = base.len();
        if d < 2 || base.iter().any(|r| r.len() != d) {
            return Err(Error::Input("base matrix must be square of size at least 2".into()));
        }
        if !(roof.is_finite() && roof > 0.0) {
            return Err(Error::Input(format!("roof constant must be positive, got {roof}")));
        }
        let base_f = DMatrix::from_fn(d, d, |i, j| base[i][j] as f64);
        if (&base_f - base_f.transpose()).amax() > 0.0 {
            return Err(Error::Input("base matrix must be symmetric".into()));
        }
        let det = base_f.determinant();
        if (det.abs() - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("base matrix must be unimodular, det = {det}")));
        }
        let eig = SymmetricEigen::new(base_f.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::Input("base matrix must have positive eigenvalues".into()));
        }
        if eig.eigenvalues.iter().any(|&l| (l.ln()).abs() < 1e-9) {
            return Err(Error::Input("base matrix has an eigenvalue on the unit circle".into()));
        }
        let base_inv_f = base_f
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Input("base matrix is singular".into()))?
            .map(f64::round);
        // Sort eigenpairs by increasing eigenvalue and fix eigenvector signs.
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues = DVector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut cols = Vec::with_capacity(d);
        for &i in &order {
            let mut v = eig.eigenvectors.column(i).into_owned();
            crate::linalg::fix_sign(&mut v, 1e-12);
            cols.push(v);
        }
        let eigenvectors = DMatrix::from_columns(&cols);
        let mut model = Self {
            base,
            base_f,
            base_inv_f,
            eigenvalues,
            eigenvectors,
            roof,
            speed: 1.0,
            beta: 1.0,
        };
        model.speed = match speed {
            SpeedScale::Fixed(s) if s.is_finite() && s > 0.0 => s,
            SpeedScale::Fixed(s) => {
                return Err(Error::Input(format!("speed scale must be positive, got {s}")))
            }
            SpeedScale::Auto => {
                let g = estimate_gradient_norm(&model, 64);
                if g > 1.0 {
                    1.0 / g
                } else {
                    1.0
                }
            }
        };
        Ok(model)
    }

    /// Suspension of `[[2,1],[1,1]]` on the 2-torus.
    pub fn cat(roof: f64, speed: SpeedScale) -> Result<Self> {
        Self::new(vec![vec![2, 1], vec![1, 1]], roof, speed)
    }

    /// Suspension of `[[2,1],[1,1]] ⊕ [[2,1],[1,1]]` on the 4-torus.
    pub fn cat_product(roof: f64, speed: SpeedScale) -> Result<Self> {
        Self::new(
            vec![vec![2, 1, 0, 0], vec![1, 1, 0, 0], vec![0, 0, 2, 1], vec![0, 0, 1, 1]],
            roof,
            speed,
        )
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn torus_dim(&self) -> usize {
        self.base.len()
    }

    pub fn roof(&self) -> f64 {
        self.roof
    }

    pub fn base_matrix(&self) -> &[Vec<i64>] {
        &self.base
    }

    pub fn base_f64(&self) -> &DMatrix<f64> {
        &self.base_f
    }

    /// Eigenvalues of the base matrix in increasing order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Unit eigenvectors (columns) in the order of [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Flat eigenvectors with eigenvalue below 1.
    pub fn stable_eigenvectors(&self) -> Vec<DVector<f64>> {
        (0..self.torus_dim())
            .filter(|&i| self.eigenvalues[i] < 1.0)
            .map(|i| self.eigenvectors.column(i).into_owned())
            .collect()
    }

    /// Flat eigenvectors with eigenvalue above 1.
    pub fn unstable_eigenvectors(&self) -> Vec<DVector<f64>> {
        (0..self.torus_dim())
            .filter(|&i| self.eigenvalues[i] > 1.0)
            .map(|i| self.eigenvectors.column(i).into_owned())
            .collect()
    }

    /// Lyapunov exponents of the flow on the normal bundle, in increasing order.
    pub fn exponents(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| self.speed * l.ln() / self.roof).collect()
    }

    /// Real power `A^p`.
    pub fn base_power(&self, p: f64) -> DMatrix<f64> {
        let diag = DMatrix::from_diagonal(&self.eigenvalues.map(|l| l.powf(p)));
        &self.eigenvectors * diag * self.eigenvectors.transpose()
    }

    /// Integer power `A^n` as a float matrix.
    pub fn base_int_power(&self, n: i64) -> DMatrix<f64> {
        let d = self.torus_dim();
        let step = if n >= 0 { &self.base_f } else { &self.base_inv_f };
        let mut m = DMatrix::identity(d, d);
        for _ in 0..n.unsigned_abs() {
            m = step * m;
        }
        m
    }

    /// Applies `A^n` to `u` and reduces modulo 1.
    pub fn apply_base(&self, u: &DVector<f64>, n: i64) -> DVector<f64> {
        let step = if n >= 0 { &self.base_f } else { &self.base_inv_f };
        let mut v = u.map(|x| x.rem_euclid(1.0));
        for _ in 0..n.unsigned_abs() {
            v = (step * v).map(|x| x.rem_euclid(1.0));
        }
        v.map(wrap_unit)
    }

    /// Splits `h + s t` into the number of roof crossings and the new height.
    pub fn advance_height(&self, h: f64, t: f64) -> (i64, f64) {
        let y = h + self.speed * t;
        let mut n = (y / self.roof).floor();
        let mut hh = y - n * self.roof;
        if hh >= self.roof {
            hh -= self.roof;
            n += 1.0;
        }
        if hh < 0.0 {
            hh += self.roof;
            n -= 1.0;
        }
        (n as i64, hh)
    }

    /// Normalises a point to `u ∈ [0,1)^d`, `h ∈ [0,c)`.
    pub fn normalize(&self, x: &Point) -> Result<Point> {
        self.check_point(x)?;
        let d = self.torus_dim();
        let (n, h) = self.advance_height(x[d], 0.0);
        let u = self.apply_base(&x.rows(0, d).into_owned(), n);
        Ok(join(&u, h))
    }

    fn check_point(&self, x: &Point) -> Result<()> {
        if x.len() != self.torus_dim() + 1 {
            return Err(Error::Domain(format!(
                "point has dimension {}, expected {}",
                x.len(),
                self.torus_dim() + 1
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("point has non-finite coordinates".into()));
        }
        Ok(())
    }

    fn max_crossings(&self) -> i64 {
        10_000
    }
}

fn wrap_unit(x: f64) -> f64 {
    if x >= 1.0 {
        x - 1.0
    } else {
        x
    }
}

/// Concatenates torus coordinates and a height.
pub fn join(u: &DVector<f64>, h: f64) -> Point {
    let d = u.len();
    DVector::from_fn(d + 1, |i, _| if i < d { u[i] } else { h })
}

impl FlowModel for MappingTorusModel {
    fn ambient_dim(&self) -> usize {
        self.torus_dim() + 1
    }

    fn flow_kind(&self) -> FlowKind {
        FlowKind::MappingTorus
    }

    fn speed_scale(&self) -> f64 {
        self.speed
    }

    fn beta(&self) -> f64 {
        self.beta
    }

    fn vector_field(&self, _x: &Point) -> DVector<f64> {
        let d = self.torus_dim();
        DVector::from_fn(d + 1, |i, _| if i == d { self.speed } else { 0.0 })
    }

    fn flow_at(&self, x: &Point, t: f64) -> Result<Point> {
        self.check_point(x)?;
        let d = self.torus_dim();
        let (n, h) = self.advance_height(x[d], t);
        if n.abs() > self.max_crossings() {
            return Err(Error::Domain(format!("time {t} crosses the roof {n} times")));
        }
        let u = self.apply_base(&x.rows(0, d).into_owned(), n);
        Ok(join(&u, h))
    }

    fn derivative_cocycle(&self, x: &Point, t: f64) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let d = self.torus_dim();
        let (n, _) = self.advance_height(x[d], t);
        if n.abs() > self.max_crossings() {
            return Err(Error::Domain(format!("time {t} crosses the roof {n} times")));
        }
        let an = self.base_int_power(n);
        Ok(block_diag(&[&an, &DMatrix::identity(1, 1)]))
    }

    fn metric_sqrt(&self, x: &Point) -> DMatrix<f64> {
        let d = self.torus_dim();
        let (_, h) = self.advance_height(x[d], 0.0);
        let p = self.base_power(h / self.roof);
        block_diag(&[&p, &DMatrix::identity(1, 1)])
    }
}

type Field = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type Jacobian = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A vector field on `R^n`, integrated numerically.
#[derive(Clone)]
pub struct OdeModel {
    dim: usize,
    field: Field,
    jacobian: Option<Jacobian>,
    step: f64,
    horizon: f64,
    speed: f64,
    beta: f64,
}

impl std::fmt::Debug for OdeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OdeModel")
            .field("dim", &self.dim)
            .field("step", &self.step)
            .field("horizon", &self.horizon)
            .field("speed", &self.speed)
            .finish()
    }
}

pub const RK4_STEP: f64 = 1e-3;

impl OdeModel {
    pub fn new(
        dim: usize,
        field: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            field: Arc::new(field),
            jacobian: None,
            step: RK4_STEP,
            horizon: 100.0,
            speed: 1.0,
            beta: 1.0,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    /// Rescales time so that the estimated `‖∇X‖` on `samples` is at most 1.
    pub fn with_speed_scale(mut self, speed: SpeedScale, samples: &[Point]) -> Result<Self> {
        self.speed = match speed {
            SpeedScale::Fixed(s) if s > 0.0 => s,
            SpeedScale::Fixed(s) => {
                return Err(Error::Input(format!("speed scale must be positive, got {s}")))
            }
            SpeedScale::Auto => {
                self.speed = 1.0;
                let g = samples
                    .iter()
                    .map(|x| spectral_norm(&self.jac(x)))
                    .fold(0.0, f64::max);
                if g > 1.0 {
                    1.0 / g
                } else {
                    1.0
                }
            }
        };
        Ok(self)
    }

    fn field_at(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.field)(x) * self.speed
    }

    fn jac(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.jacobian {
            Some(j) => j(x) * self.speed,
            None => {
                let h = 1e-6;
                let mut m = DMatrix::zeros(self.dim, self.dim);
                for k in 0..self.dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let col = (self.field_at(&xp) - self.field_at(&xm)) / (2.0 * h);
                    m.set_column(k, &col);
                }
                m
            }
        }
    }

    fn check(&self, x: &Point, t: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Domain(format!(
                "point has dimension {}, expected {}",
                x.len(),
                self.dim
            )));
        }
        if t.abs() > self.horizon {
            return Err(Error::Domain(format!(
                "|t| = {} exceeds the integration horizon {}",
                t.abs(),
                self.horizon
            )));
        }
        Ok(())
    }

    fn steps(&self, t: f64) -> (usize, f64) {
        let n = (t.abs() / self.step).ceil().max(1.0) as usize;
        (n, t / n as f64)
    }

    /// Integrates the flow and, optionally, the variational equation.
    fn integrate(&self, x: &Point, t: f64, with_derivative: bool) -> Result<(Point, DMatrix<f64>)> {
        self.check(x, t)?;
        let mut y = x.clone();
        let mut m = DMatrix::identity(self.dim, self.dim);
        if t == 0.0 {
            return Ok((y, m));
        }
        let (n, h) = self.steps(t);
        if h.abs() < f64::EPSILON * (1.0 + y.amax()) {
            return Err(Error::Integration(format!("step {h} underflows")));
        }
        for _ in 0..n {
            if with_derivative {
                let f = |p: &DVector<f64>, q: &DMatrix<f64>| (self.field_at(p), self.jac(p) * q);
                let (k1, l1) = f(&y, &m);
                let (k2, l2) = f(&(&y + &k1 * (h / 2.0)), &(&m + &l1 * (h / 2.0)));
                let (k3, l3) = f(&(&y + &k2 * (h / 2.0)), &(&m + &l2 * (h / 2.0)));
                let (k4, l4) = f(&(&y + &k3 * h), &(&m + &l3 * h));
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                m += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
            } else {
                let k1 = self.field_at(&y);
                let k2 = self.field_at(&(&y + &k1 * (h / 2.0)));
                let k3 = self.field_at(&(&y + &k2 * (h / 2.0)));
                let k4 = self.field_at(&(&y + &k3 * h));
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integration("state became non-finite".into()));
            }
        }
        Ok((y, m))
    }
}

impl FlowModel for OdeModel {
    fn ambient_dim(&self) -> usize {
        self.dim
    }

    fn flow_kind(&self) -> FlowKind {
        FlowKind::NumericOde
    }

    fn speed_scale(&self) -> f64 {
        self.speed
    }

    fn beta(&self) -> f64 {
        self.beta
    }

    fn vector_field(&self, x: &Point) -> DVector<f64> {
        self.field_at(x)
    }

    fn flow_at(&self, x: &Point, t: f64) -> Result<Point> {
        Ok(self.integrate(x, t, false)?.0)
    }

    fn derivative_cocycle(&self, x: &Point, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.integrate(x, t, true)?.1)
    }

    fn metric_sqrt(&self, _x: &Point) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim)
    }
}

/// Finite-difference estimate of `‖∇X‖` for a mapping torus: the largest infinitesimal growth
/// rate `log‖dφ^δ‖/δ` over a grid of `samples` heights.
pub fn estimate_gradient_norm(model: &MappingTorusModel, samples: usize) -> f64 {
    let d = model.torus_dim();
    let delta = 1e-4 * model.roof();
    let mut best: f64 = 0.0;
    for i in 0..samples.max(1) {
        let h = model.roof() * (i as f64 + 0.5) / samples.max(1) as f64;
        let u = DVector::from_fn(d, |j, _| ((i * (j + 3)) as f64 * 0.137).fract());
        let x = join(&u, h);
        // The raw field is ∂_h; use the unscaled flow by converting time.
        let t = delta / model.speed;
        let y = model.flow_at(&x, t).expect("grid points are valid");
        let m = model.derivative_cocycle(&x, t).expect("grid points are valid");
        let n = model.operator_norm(&x, &y, &m);
        best = best.max(n.ln() / delta);
    }
    best
}

/// Minimum Euclidean norm of the vector field over `samples`.
pub fn min_field_norm(model: &dyn FlowModel, samples: &[Point]) -> f64 {
    samples
        .iter()
        .map(|x| model.vector_field(x).norm())
        .fold(f64::INFINITY, f64::min)
}
