//! Proper sections, flow-box coordinates, return maps, holonomies and the linear Poincaré flow.
//!
//! For a mapping torus the section is a stack of `k` horizontal torus slices at heights
//! `j c / k`. Each slice plays the role of one transverse disc; slices are orthogonal to the
//! vector field, so the 1-form `θ(v) = <v, X>/‖X‖²` and the orthogonal projection onto
//! `X^⊥` realise the normal bundle exactly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{from_columns, gram_schmidt, torus_diff};
use crate::models::{join, FlowModel, MappingTorusModel, Point};
use crate::{Error, Result};

/// Bisection tolerance for flow-box times.
pub const BISECTION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SectionRole {
    Reference,
    Security,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransverseDisc {
    pub center: Point,
    /// Orthonormal (for the metric at `center`) tangent vectors spanning the disc.
    pub basis: Vec<DVector<f64>>,
    pub radius: f64,
    pub parent_slice: usize,
    pub height: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProperSection {
    pub discs: Vec<TransverseDisc>,
    /// Nominal size `ρ/2`.
    pub size: f64,
    pub role: SectionRole,
    pub rho: f64,
    /// Constant return time between consecutive slices.
    pub return_time: f64,
    /// Distance from the reference section to the boundary of the security section.
    pub margin: f64,
    /// Whether the partial-order condition holds between all pairs of slices.
    pub partial_order: bool,
    #[serde(skip)]
    model: Option<MappingTorusModel>,
}

/// Number of slices for roof `c`, speed `s` and size `ρ`.
pub fn slice_count(roof: f64, speed: f64, rho: f64) -> usize {
    (2.0 * roof / (speed * rho)).ceil().max(1.0) as usize
}

/// Builds the reference section `Λ` and the security section `Λ̂`.
pub fn build_proper_section(
    model: &MappingTorusModel,
    rho: f64,
) -> Result<(ProperSection, ProperSection)> {
    if !(rho > 0.0 && rho < 0.25) {
        return Err(Error::Input(format!("ρ must lie in (0, 0.25), got {rho}")));
    }
    let c = model.roof();
    let s = model.speed_scale();
    let k = slice_count(c, s, rho);
    let spacing = c / k as f64;
    let return_time = spacing / s;
    if return_time > rho / 2.0 + 1e-15 {
        return Err(Error::Section(format!(
            "return time {return_time} exceeds ρ/2 = {}",
            rho / 2.0
        )));
    }
    let d = model.torus_dim();
    let make = |role: SectionRole, radius: f64| {
        let discs = (0..k)
            .map(|j| {
                let h = j as f64 * spacing;
                let center = join(&DVector::zeros(d), h);
                let basis = normal_frame(model, &center);
                TransverseDisc { center, basis, radius, parent_slice: j, height: h }
            })
            .collect();
        ProperSection {
            discs,
            size: rho / 2.0,
            role,
            rho,
            return_time,
            margin: f64::INFINITY,
            partial_order: true,
            model: Some(model.clone()),
        }
    };
    let radius = 0.5 * (4.0 * rho * 0.9).min(spacing);
    let mut lambda = make(SectionRole::Reference, radius);
    let mut lambda_hat = make(SectionRole::Security, 1.25 * radius);
    lambda.verify_cover(64)?;
    lambda_hat.verify_cover(64)?;
    lambda.partial_order = lambda.check_partial_order();
    lambda_hat.partial_order = lambda_hat.check_partial_order();
    Ok((lambda, lambda_hat))
}

impl ProperSection {
    pub fn model(&self) -> &MappingTorusModel {
        self.model.as_ref().expect("section carries its model")
    }

    pub fn slice_count(&self) -> usize {
        self.discs.len()
    }

    pub fn spacing(&self) -> f64 {
        self.model().roof() / self.discs.len() as f64
    }

    /// Forward flow time from slice `i` to slice `j` (`0` when equal).
    pub fn gap_time(&self, i: usize, j: usize) -> f64 {
        let k = self.discs.len();
        ((j + k - i) % k) as f64 * self.return_time
    }

    /// Index of the slice containing `x`, if any.
    pub fn disc_of(&self, x: &Point) -> Option<usize> {
        let m = self.model();
        let d = m.torus_dim();
        let (_, h) = m.advance_height(x[d], 0.0);
        let sp = self.spacing();
        let j = (h / sp).round();
        let k = self.discs.len() as f64;
        if (h - j * sp).abs() < 1e-9 * m.roof() {
            Some((j as usize) % k as usize)
        } else {
            None
        }
    }

    /// Checks that every height on a grid of `n` samples reaches a slice backwards within `ρ`.
    pub fn verify_cover(&self, n: usize) -> Result<()> {
        let m = self.model();
        let d = m.torus_dim();
        for i in 0..n {
            let h = m.roof() * i as f64 / n as f64;
            let x = join(&DVector::from_element(d, 0.5), h);
            let back = (0..self.discs.len()).any(|j| {
                let (_, hh) = m.advance_height(h - self.discs[j].height, 0.0);
                hh / m.speed_scale() < self.rho
            });
            if !back {
                return Err(Error::Section(format!("sample {x:?} is not covered")));
            }
        }
        Ok(())
    }

    /// For every pair of distinct slices, at least one of the two flow-overlap sets within
    /// time `4ρ` is empty.
    pub fn check_partial_order(&self) -> bool {
        let reach = 4.0 * self.rho;
        let k = self.discs.len();
        (0..k).all(|i| {
            (0..k).all(|j| i == j || self.gap_time(i, j) > reach || self.gap_time(j, i) > reach)
        })
    }

    /// Flow-box coordinates `(q, t)` with `x = φ^t(q)` and `q` on `disc`.
    ///
    /// The time is found by bisection on the signed height offset along the orbit, bracketed on
    /// the integrator step grid over `[-4ρ, 4ρ]`.
    pub fn flow_box_coords(&self, disc: usize, x: &Point) -> Result<(Point, f64)> {
        let m = self.model();
        let dsc = self
            .discs
            .get(disc)
            .ok_or_else(|| Error::Domain(format!("no disc {disc}")))?;
        let d = m.torus_dim();
        let c = m.roof();
        let offset = |t: f64| -> f64 {
            let (_, h) = m.advance_height(x[d], -t);
            let diff = h - dsc.height;
            diff - c * (diff / c).round()
        };
        let reach = 4.0 * self.rho;
        let step = crate::models::RK4_STEP;
        let n = (2.0 * reach / step).ceil() as usize;
        let mut best: Option<(f64, f64)> = None;
        let mut a = -reach;
        let mut fa = offset(a);
        for i in 1..=n {
            let b = (-reach + i as f64 * step).min(reach);
            let fb = offset(b);
            if fa == 0.0 {
                best = pick(best, (a, a));
            } else if fa * fb < 0.0 && (fa - fb).abs() < 0.5 * c {
                best = pick(best, (a, b));
            }
            a = b;
            fa = fb;
        }
        if fa == 0.0 {
            best = pick(best, (a, a));
        }
        let (mut lo, mut hi) = best.ok_or_else(|| {
            Error::Domain(format!("point is outside the flow box of disc {disc}"))
        })?;
        let mut flo = offset(lo);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            let fm = offset(mid);
            if fm == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if flo * fm < 0.0 {
                hi = mid;
            } else {
                lo = mid;
                flo = fm;
            }
        }
        let t = 0.5 * (lo + hi);
        let q = m.flow_at(x, -t)?;
        Ok((snap_height(m, &q, dsc.height), t))
    }

    /// `(f(x), r(x))`, or `(f^{-1}(x), r(f^{-1}x))` backwards.
    pub fn poincare_return(&self, x: &Point, direction: Direction) -> Result<(Point, f64)> {
        let j = self
            .disc_of(x)
            .ok_or_else(|| Error::Section("point is not on the section".into()))?;
        let k = self.discs.len();
        let target = match direction {
            Direction::Forward => (j + 1) % k,
            Direction::Backward => (j + k - 1) % k,
        };
        let m = self.model();
        let d = m.torus_dim();
        let x = join(&x.rows(0, d).into_owned(), self.discs[j].height);
        let y = m.flow_at(&x, direction.sign() * self.return_time)?;
        Ok((snap_height(m, &y, self.discs[target].height), self.return_time))
    }

    /// Holonomy `g^±_x(y) = φ^s(y)` onto the disc of `f^{±1}(x)`.
    pub fn holonomy(&self, x: &Point, direction: Direction, y: &Point) -> Result<(Point, f64)> {
        let j = self
            .disc_of(x)
            .ok_or_else(|| Error::Section("point is not on the section".into()))?;
        let k = self.discs.len();
        let target = match direction {
            Direction::Forward => (j + 1) % k,
            Direction::Backward => (j + k - 1) % k,
        };
        let chart_radius = 2.0 * self.chart_radius();
        if self.local_distance(x, y) >= chart_radius {
            return Err(Error::Domain("point is outside the holonomy domain".into()));
        }
        let (z, t) = self.flow_box_coords(target, y)?;
        let s = -t;
        if s.abs() >= self.rho {
            return Err(Error::Domain(format!("holonomy time {s} is not below ρ")));
        }
        Ok((z, s))
    }

    /// The chart radius `𝔯 = ρ/4`.
    pub fn chart_radius(&self) -> f64 {
        self.rho / 4.0
    }

    pub fn local_distance(&self, x: &Point, y: &Point) -> f64 {
        local_distance(self.model(), x, y)
    }
}

/// Moves `q` onto height `h` of the same orbit point, applying the gluing when
/// `q` sits on the other side of the roof.
fn snap_height(m: &MappingTorusModel, q: &Point, h: f64) -> Point {
    let d = m.torus_dim();
    let n = ((q[d] - h) / m.roof()).round() as i64;
    let u = q.rows(0, d).into_owned();
    let u = if n == 0 { u } else { m.apply_base(&u, n) };
    join(&u, h)
}

fn pick(cur: Option<(f64, f64)>, cand: (f64, f64)) -> Option<(f64, f64)> {
    match cur {
        Some(c) if c.0.abs().min(c.1.abs()) <= cand.0.abs().min(cand.1.abs()) => Some(c),
        _ => Some(cand),
    }
}

/// Riemannian distance between nearby points, using the metric at the mid height.
pub fn local_distance(model: &MappingTorusModel, x: &Point, y: &Point) -> f64 {
    let d = model.torus_dim();
    let c = model.roof();
    let (_, hx) = model.advance_height(x[d], 0.0);
    let (_, hy0) = model.advance_height(y[d], 0.0);
    let mut uy = y.rows(0, d).into_owned();
    let mut hy = hy0;
    if hy - hx > c / 2.0 {
        uy = model.apply_base(&uy, 1);
        hy -= c;
    } else if hx - hy > c / 2.0 {
        uy = model.apply_base(&uy, -1);
        hy += c;
    }
    let du = torus_diff(uy.as_slice(), &x.as_slice()[..d]);
    let p = model.base_power(0.5 * (hx + hy) / c);
    let v = p * du;
    (v.norm_squared() + (hy - hx).powi(2)).sqrt()
}

/// Orthonormal frame of `Ker θ_x`: Gram–Schmidt of the projected coordinate frame.
pub fn normal_frame(model: &dyn FlowModel, x: &Point) -> Vec<DVector<f64>> {
    let n = model.ambient_dim();
    let g = model.metric(x);
    let vs: Vec<DVector<f64>> = (0..n)
        .map(|i| project(model, x, &DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 })))
        .collect();
    gram_schmidt(&vs, Some(&g), 1e-9)
}

fn project(model: &dyn FlowModel, x: &Point, v: &DVector<f64>) -> DVector<f64> {
    let xf = model.vector_field(x);
    let th = model.inner(x, v, &xf) / model.inner(x, &xf, &xf);
    v - xf * th
}

/// The linear Poincaré flow of a model, with the 1-form `θ` and projection `𝔭`.
#[derive(Clone)]
pub struct LinearPoincareCocycle {
    model: Arc<dyn FlowModel>,
}

impl std::fmt::Debug for LinearPoincareCocycle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearPoincareCocycle")
            .field("ambient_dim", &self.model.ambient_dim())
            .finish()
    }
}

impl LinearPoincareCocycle {
    pub fn new(model: Arc<dyn FlowModel>) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &dyn FlowModel {
        self.model.as_ref()
    }

    /// Dimension `d` of the normal bundle.
    pub fn normal_dim(&self) -> usize {
        self.model.ambient_dim() - 1
    }

    /// `θ_x` as a covector: `θ_x(v) = theta(x)·v`.
    pub fn theta(&self, x: &Point) -> DVector<f64> {
        let xf = self.model.vector_field(x);
        let g = self.model.metric(x);
        (&g * &xf) / self.model.inner(x, &xf, &xf)
    }

    /// Projection to `N_x` parallel to `X(x)`.
    pub fn project_to_normal(&self, x: &Point, v: &DVector<f64>) -> DVector<f64> {
        project(self.model.as_ref(), x, v)
    }

    /// Orthonormal basis of `N_x` as columns of an `(d+1) × d` matrix.
    pub fn frame(&self, x: &Point) -> DMatrix<f64> {
        let n = self.model.ambient_dim();
        from_columns(&normal_frame(self.model.as_ref(), x), n)
    }

    /// Frame coordinates of a normal vector.
    pub fn normal_coords(&self, x: &Point, v: &DVector<f64>) -> DVector<f64> {
        let b = self.frame(x);
        b.transpose() * self.model.metric(x) * v
    }

    /// Matrix of `Φ^t_x` in the frames at `x` and `φ^t(x)`.
    pub fn linear_poincare(&self, x: &Point, t: f64) -> Result<DMatrix<f64>> {
        let y = self.model.flow_at(x, t)?;
        let dphi = self.model.derivative_cocycle(x, t)?;
        let bx = self.frame(x);
        let by = self.frame(&y);
        let gy = self.model.metric(&y);
        let img = dphi * bx;
        let mut cols = Vec::with_capacity(img.ncols());
        for c in img.column_iter() {
            cols.push(self.project_to_normal(&y, &c.into_owned()));
        }
        let proj = from_columns(&cols, self.model.ambient_dim());
        Ok(by.transpose() * gy * proj)
    }

    /// Operator norm of `𝔭_x` for the metric at `x`.
    pub fn projection_norm(&self, x: &Point) -> f64 {
        let n = self.model.ambient_dim();
        let cols: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                self.project_to_normal(x, &DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }))
            })
            .collect();
        let p = DMatrix::from_columns(&cols);
        self.model.operator_norm(x, x, &p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_norm;
    use crate::models::SpeedScale;
    use proptest::prelude::*;

    fn setup(rho: f64) -> (MappingTorusModel, ProperSection) {
        let m = MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap();
        let (l, _) = build_proper_section(&m, rho).unwrap();
        (m, l)
    }

    #[test]
    fn holonomy_onto_the_zero_slice_keeps_coordinates() {
        let (m, l) = setup(0.1);
        let h = l.discs[1].height;
        for u in [[0.3, 0.7], [0.91, 0.05]] {
            let y = join(&DVector::from_vec(u.to_vec()), h);
            let (w, t) = l.holonomy(&y, Direction::Backward, &y).unwrap();
            assert!((t + l.return_time).abs() < 1e-9);
            assert_eq!(w[2], 0.0);
            assert!(local_distance(&m, &w, &join(&DVector::from_vec(u.to_vec()), 0.0)) < 1e-9);
            let (z, _) = l.poincare_return(&y, Direction::Backward).unwrap();
            assert!(local_distance(&m, &z, &w) < 1e-9);
        }
    }

    #[test]
    fn slice_count_matches_return_time_oracle() {
        let (_, l) = setup(0.2);
        assert_eq!(l.slice_count(), 10);
        assert!(!l.partial_order);
        // Oracle: slice spacing c/k.
        assert!((l.return_time - 0.1).abs() < 1e-15);
        assert!(l.return_time <= 0.1 && l.return_time > 0.0);
    }

    #[test]
    fn default_rho_gives_twenty_slices() {
        let (_, l) = setup(0.1);
        assert_eq!(l.slice_count(), 20);
        assert!(l.partial_order);
        assert!(l.return_time > 0.0 && l.return_time < l.rho);
    }

    #[test]
    fn partial_order_fails_for_short_roofs() {
        let m = MappingTorusModel::cat(0.3, SpeedScale::Fixed(1.0)).unwrap();
        let (l, _) = build_proper_section(&m, 0.1).unwrap();
        assert!(!l.partial_order);
    }

    #[test]
    fn flow_box_recovers_time() {
        let (m, l) = setup(0.1);
        let x = DVector::from_vec(vec![0.3, 0.6, l.discs[3].height]);
        let (q0, t0) = l.flow_box_coords(3, &x).unwrap();
        assert!(t0.abs() < 1e-12 && (q0 - &x).norm() < 1e-12);
        for s in [-0.35, -0.1, 0.02, 0.2, 0.39] {
            let y = m.flow_at(&x, s).unwrap();
            let (q, t) = l.flow_box_coords(3, &y).unwrap();
            assert!((t - s).abs() < 1e-9, "{t} vs {s}");
            assert!(l.local_distance(&q, &x) < 1e-9);
        }
    }

    #[test]
    fn flow_box_rejects_far_points() {
        let m = MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap();
        let (l, _) = build_proper_section(&m, 0.05).unwrap();
        let x = DVector::from_vec(vec![0.3, 0.6, 0.5 + l.discs[0].height]);
        assert!(l.flow_box_coords(0, &x).is_err());
    }

    #[test]
    fn return_and_inverse() {
        let (_, l) = setup(0.1);
        let x = DVector::from_vec(vec![0.123, 0.456, l.discs[19].height]);
        let (y, r) = l.poincare_return(&x, Direction::Forward).unwrap();
        assert!((r - 0.05).abs() < 1e-15);
        assert_eq!(l.disc_of(&y), Some(0));
        let (z, _) = l.poincare_return(&y, Direction::Backward).unwrap();
        assert!(l.local_distance(&z, &x) < 1e-9);
    }

    #[test]
    fn holonomy_center_and_inverse() {
        let (_, l) = setup(0.1);
        let x = DVector::from_vec(vec![0.2, 0.7, l.discs[5].height]);
        let (fx, r) = l.poincare_return(&x, Direction::Forward).unwrap();
        let (z, s) = l.holonomy(&x, Direction::Forward, &x).unwrap();
        assert!((s - r).abs() < 1e-9 && l.local_distance(&z, &fx) < 1e-9);
        let y = DVector::from_vec(vec![0.205, 0.697, l.discs[5].height]);
        let (gy, _) = l.holonomy(&x, Direction::Forward, &y).unwrap();
        let (back, _) = l.holonomy(&fx, Direction::Backward, &gy).unwrap();
        assert!(l.local_distance(&back, &y) < 1e-9);
    }

    #[test]
    fn theta_of_field_is_one_and_kernel_is_tangent() {
        let m = Arc::new(MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap());
        let coc = LinearPoincareCocycle::new(m.clone());
        let x = DVector::from_vec(vec![0.2, 0.3, 0.4]);
        let th = coc.theta(&x);
        assert!((th.dot(&m.vector_field(&x)) - 1.0).abs() < 1e-14);
        for b in normal_frame(m.as_ref(), &x) {
            assert!(th.dot(&b).abs() < 1e-14);
        }
        assert!(coc.projection_norm(&x) < 1.0 + 0.1);
        let xf = m.vector_field(&x);
        assert!(coc.project_to_normal(&x, &xf).norm() < 1e-14);
        let b0 = normal_frame(m.as_ref(), &x)[0].clone();
        assert!((coc.project_to_normal(&x, &b0) - &b0).norm() < 1e-14);
    }

    #[test]
    fn disc_projection_derivative_is_parallel_projection() {
        let (m, l) = setup(0.1);
        let coc = LinearPoincareCocycle::new(Arc::new(m.clone()));
        let x = DVector::from_vec(vec![0.31, 0.47, l.discs[4].height]);
        let v = DVector::from_vec(vec![0.3, -0.8, 0.5]);
        let h = 1e-7;
        let (q, _) = l.flow_box_coords(4, &(&x + &v * h)).unwrap();
        let fd = DVector::from_vec(vec![
            torus_diff(&[q[0]], &[x[0]])[0] / h,
            torus_diff(&[q[1]], &[x[1]])[0] / h,
            (q[2] - x[2]) / h,
        ]);
        assert!((fd - coc.project_to_normal(&x, &v)).norm() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn poincare_flow_cocycle_and_bounds(u1 in 0.0..1.0f64, u2 in 0.0..1.0f64, h in 0.0..1.0f64,
                                            s in -2.5..2.5f64, t in -2.5..2.5f64) {
            let m = Arc::new(MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap());
            let coc = LinearPoincareCocycle::new(m.clone());
            let x = DVector::from_vec(vec![u1, u2, h]);
            let y = m.flow_at(&x, t).unwrap();
            let lhs = coc.linear_poincare(&x, s + t).unwrap();
            let rhs = coc.linear_poincare(&y, s).unwrap() * coc.linear_poincare(&x, t).unwrap();
            prop_assert!((lhs - rhs).amax() < 1e-7);
            let p = coc.linear_poincare(&x, t).unwrap();
            let rho: f64 = 0.1;
            prop_assert!(spectral_norm(&p) <= (rho + t.abs()).exp());
            prop_assert!(spectral_norm(&p) >= (-(rho + t.abs())).exp());
        }

        #[test]
        fn disc_projection_is_two_lipschitz(a1 in 0.0..1.0f64, a2 in 0.0..1.0f64,
                                            d1 in -0.01..0.01f64, d2 in -0.01..0.01f64,
                                            s in -0.39..0.39f64, ds in -0.01..0.01f64) {
            let m = MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap();
            let (l, _) = build_proper_section(&m, 0.1).unwrap();
            let h = l.discs[7].height;
            let x = m.flow_at(&DVector::from_vec(vec![a1, a2, h]), s).unwrap();
            let y = m.flow_at(&DVector::from_vec(vec![a1 + d1, a2 + d2, h]), s + ds).unwrap();
            let (qx, tx) = l.flow_box_coords(7, &x).unwrap();
            let (qy, ty) = l.flow_box_coords(7, &y).unwrap();
            let dxy = l.local_distance(&x, &y);
            prop_assume!(dxy > 1e-6);
            prop_assert!(l.local_distance(&qx, &qy) < 2.0 * dxy);
            prop_assert!((tx - ty).abs() <= dxy * 1.0 / m.speed_scale() + 1e-9);
        }

        #[test]
        fn holonomy_is_two_bi_lipschitz(a1 in 0.0..1.0f64, a2 in 0.0..1.0f64,
                                        d1 in -0.005..0.005f64, d2 in -0.005..0.005f64,
                                        e1 in -0.005..0.005f64, e2 in -0.005..0.005f64) {
            let m = MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap();
            let (l, _) = build_proper_section(&m, 0.1).unwrap();
            let h = l.discs[19].height;
            let x = DVector::from_vec(vec![a1, a2, h]);
            let y1 = DVector::from_vec(vec![a1 + d1, a2 + d2, h]);
            let y2 = DVector::from_vec(vec![a1 + e1, a2 + e2, h]);
            let (z1, s1) = l.holonomy(&x, Direction::Forward, &y1).unwrap();
            let (z2, _) = l.holonomy(&x, Direction::Forward, &y2).unwrap();
            let r = l.local_distance(&z1, &z2) / l.local_distance(&y1, &y2);
            prop_assert!((0.5..=2.0).contains(&r));
            prop_assert!(s1.abs() < l.rho);
        }
    }
}
