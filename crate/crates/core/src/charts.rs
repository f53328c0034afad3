//! Pesin charts `Ψ_x = exp_x ∘ C(x)`, double charts, the overlap predicate and chart
//! transitions.
//!
//! Charts live on the slices of a mapping-torus section. The metric is flat on each slice, so
//! `exp_x` is affine and a chart is an affine map from `R^d` to a lift of the slice. Chart
//! arguments that leave the fundamental domain are kept lifted; [`PesinChart::inverse`]
//! recovers them through the nearest lift.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::hyperbolicity::{estimate_splitting, lyapunov_frame, HyperbolicityParams, PesinFrame};
use crate::linalg::{spectral_norm, torus_diff};
use crate::models::{join, FlowModel, MappingTorusModel, Point};
use crate::sections::{local_distance, Direction, LinearPoincareCocycle, ProperSection};
use crate::{Error, Result};

/// Size regime of charts and overlaps.
///
/// `Paper` uses `Q(x) = ε^{6/β}‖C^{-1}‖^{-48/β}` and the overlap threshold `(η1η2)^4`. `Desk`
/// rescales `Q` to `q_scale/(ε‖C(x)^{-1}‖)` so that chart boxes have size comparable with
/// the torus, and replaces `(η1η2)^4` by a fixed metric tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScaleProfile {
    Paper,
    Desk { q_scale: f64, overlap: f64, am1: f64 },
}

impl ScaleProfile {
    /// `Q(x)` for the frame at `x`.
    pub fn big_q(&self, frame: &PesinFrame, eps: f64) -> f64 {
        match self {
            ScaleProfile::Paper => frame.big_q,
            ScaleProfile::Desk { q_scale, .. } => q_scale / (eps * frame.c_inv_norm),
        }
    }

    pub fn overlap_threshold(&self, eta1: f64, eta2: f64) -> f64 {
        match self {
            ScaleProfile::Paper => (eta1 * eta2).powi(4),
            ScaleProfile::Desk { overlap, .. } => *overlap,
        }
    }

    /// Constant in (AM1): `‖F(0)‖ ≤ am1·(p^s∧p^u)`.
    pub fn am1(&self) -> f64 {
        match self {
            ScaleProfile::Paper => 1e-3,
            ScaleProfile::Desk { am1, .. } => *am1,
        }
    }

    /// Chart domain radius: `𝔯 = ρ/4` for `Paper` charts, `20εQ` for desk charts.
    pub fn chart_radius(&self, rho: f64, eps: f64, big_q: f64) -> f64 {
        match self {
            ScaleProfile::Paper => rho / 4.0,
            ScaleProfile::Desk { .. } => 20.0 * eps * big_q,
        }
    }

    /// Half side of the cube on which transitions are sampled: `10Q`, resp. `10εQ`.
    pub fn transition_radius(&self, eps: f64, big_q: f64) -> f64 {
        match self {
            ScaleProfile::Paper => 10.0 * big_q,
            ScaleProfile::Desk { .. } => 10.0 * eps * big_q,
        }
    }
}

/// One Pesin frame per slice. For a mapping torus `C(x)` depends only on the height.
#[derive(Clone, Debug)]
pub struct SliceFrames {
    pub section: ProperSection,
    pub params: HyperbolicityParams,
    pub frames: Vec<Arc<PesinFrame>>,
    /// Normal frames (ambient coordinates, `(d+1) × d`) at the slice heights.
    pub bases: Vec<DMatrix<f64>>,
}

impl SliceFrames {
    pub fn build(section: &ProperSection, params: &HyperbolicityParams) -> Result<Self> {
        let model = section.model().clone();
        let d = model.torus_dim();
        let coc = LinearPoincareCocycle::new(Arc::new(model.clone()));
        let mut frames = Vec::with_capacity(section.slice_count());
        let mut bases = Vec::with_capacity(section.slice_count());
        for disc in &section.discs {
            let x = join(&DVector::zeros(d), disc.height);
            let sp = estimate_splitting(&coc, &x, params.horizon, params.chi)?;
            frames.push(Arc::new(lyapunov_frame(&coc, &x, &sp, params)?));
            bases.push(coc.frame(&x));
        }
        Ok(Self { section: section.clone(), params: *params, frames, bases })
    }

    pub fn model(&self) -> &MappingTorusModel {
        self.section.model()
    }

    pub fn slice_count(&self) -> usize {
        self.frames.len()
    }

    /// Pesin chart centred at `x`, which must lie on a slice.
    pub fn chart(&self, x: &Point, profile: &ScaleProfile) -> Result<PesinChart> {
        let slice = self
            .section
            .disc_of(x)
            .ok_or_else(|| Error::Domain("chart centre is not on the section".into()))?;
        self.chart_on(slice, x, profile)
    }

    /// Pesin chart centred at torus coordinates `u` of slice `slice`.
    pub fn chart_on(&self, slice: usize, x: &Point, profile: &ScaleProfile) -> Result<PesinChart> {
        let model = self.model();
        let d = model.torus_dim();
        let frame = self
            .frames
            .get(slice)
            .ok_or_else(|| Error::Domain(format!("no slice {slice}")))?;
        let h = self.section.discs[slice].height;
        let u = model.normalize(&join(&x.rows(0, d).into_owned(), h))?.rows(0, d).into_owned();
        let center = join(&u, h);
        let b_u = self.bases[slice].rows(0, d).into_owned();
        let g = model.metric(&center).view((0, 0), (d, d)).into_owned();
        let to_chart = &frame.c_inv * b_u.transpose() * g;
        let from_chart = &b_u * &frame.c;
        let big_q = profile.big_q(frame, self.params.eps);
        Ok(PesinChart {
            center,
            slice,
            d_s: frame.d_s(),
            c_inv_norm: frame.c_inv_norm,
            c: frame.c.clone(),
            c_inv: frame.c_inv.clone(),
            to_chart,
            from_chart,
            big_q,
            radius: profile.chart_radius(self.params.rho, self.params.eps, big_q),
            grid_radius: profile.transition_radius(self.params.eps, big_q),
        })
    }
}

/// `Ψ_x`, stored through its affine action on torus coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PesinChart {
    pub center: Point,
    pub slice: usize,
    pub d_s: usize,
    pub c: DMatrix<f64>,
    pub c_inv: DMatrix<f64>,
    pub c_inv_norm: f64,
    /// Torus displacement → chart coordinates.
    pub to_chart: DMatrix<f64>,
    /// Chart coordinates → torus displacement.
    pub from_chart: DMatrix<f64>,
    pub big_q: f64,
    /// Domain radius of the chart.
    pub radius: f64,
    /// Half side of the cube sampled by [`chart_transition`].
    pub grid_radius: f64,
}

/// `max(‖v_s‖, ‖v_u‖)`: `v ∈ R[η]` iff `box_norm(v) ≤ η`.
pub fn box_norm(v: &DVector<f64>, d_s: usize) -> f64 {
    let n = v.len();
    v.rows(0, d_s).norm().max(v.rows(d_s, n - d_s).norm())
}

impl PesinChart {
    pub fn dim(&self) -> usize {
        self.to_chart.nrows()
    }

    pub fn d_u(&self) -> usize {
        self.dim() - self.d_s
    }

    pub fn height(&self) -> f64 {
        self.center[self.dim()]
    }

    pub fn center_u(&self) -> DVector<f64> {
        self.center.rows(0, self.dim()).into_owned()
    }

    fn check_domain(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Domain(format!("chart argument has dimension {}", v.len())));
        }
        if box_norm(v, self.d_s) > self.radius * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "chart argument of size {:.3e} outside R[{:.3e}]",
                box_norm(v, self.d_s),
                self.radius
            )));
        }
        Ok(())
    }

    /// `Ψ_x(v)` as a lifted point (torus coordinates are not reduced).
    pub fn apply(&self, v: &DVector<f64>) -> Result<Point> {
        self.check_domain(v)?;
        Ok(join(&(self.center_u() + &self.from_chart * v), self.height()))
    }

    /// `Ψ_x^{-1}(y)` through the lift of `y` nearest to the centre.
    pub fn inverse(&self, y: &Point) -> Result<DVector<f64>> {
        let d = self.dim();
        self.check_slice(y)?;
        let diff = torus_diff(&y.as_slice()[..d], &self.center.as_slice()[..d]);
        let v = &self.to_chart * diff;
        self.check_domain(&v)?;
        Ok(v)
    }

    /// `Ψ_x^{-1}(y)` for a lifted `y`, without wrapping.
    pub fn inverse_lifted(&self, y: &Point) -> Result<DVector<f64>> {
        let d = self.dim();
        self.check_slice(y)?;
        let diff = y.rows(0, d) - self.center.rows(0, d);
        let v = &self.to_chart * diff;
        self.check_domain(&v)?;
        Ok(v)
    }

    fn check_slice(&self, y: &Point) -> Result<()> {
        let d = self.dim();
        if y.len() != d + 1 {
            return Err(Error::Domain(format!("point has dimension {}", y.len())));
        }
        if (y[d] - self.height()).abs() > 1e-9 {
            return Err(Error::Domain("point is not on the chart's slice".into()));
        }
        Ok(())
    }
}

/// `Ψ_x^{p^s,p^u}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleChart {
    pub chart: PesinChart,
    pub p_s: f64,
    pub p_u: f64,
}

impl DoubleChart {
    /// Checks `0 < p^s, p^u ≤ εQ(x)`.
    pub fn new(chart: PesinChart, p_s: f64, p_u: f64, eps: f64) -> Result<Self> {
        let top = eps * chart.big_q * (1.0 + 1e-12);
        for p in [p_s, p_u] {
            if !(p > 0.0 && p <= top) {
                return Err(Error::Input(format!("window {p:.3e} outside (0, εQ = {:.3e}]", top)));
            }
        }
        Ok(Self { chart, p_s, p_u })
    }

    pub fn eta(&self) -> f64 {
        self.p_s.min(self.p_u)
    }
}

/// Outcome of the ε-overlap test with the measured quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub holds: bool,
    pub ratio_ok: bool,
    pub dims_ok: bool,
    pub same_disc: bool,
    pub distance: f64,
    pub c_diff: f64,
    pub threshold: f64,
}

/// `Ψ_{x1}^{η1} ≈ Ψ_{x2}^{η2}`. `C̃` is compared through `from_chart`, the flat-frame
/// transport of `C`.
/// Gaps at or below this are round-off and count as coincident charts.
pub const ROUNDOFF: f64 = 1e-14;

pub fn overlaps(
    c1: &PesinChart,
    eta1: f64,
    c2: &PesinChart,
    eta2: f64,
    eps: f64,
    profile: &ScaleProfile,
    model: &MappingTorusModel,
) -> OverlapReport {
    let ratio_ok = (eta1 / eta2).ln().abs() <= eps * (1.0 + 1e-12);
    let dims_ok = c1.d_s == c2.d_s && c1.dim() == c2.dim();
    let same_disc = c1.slice == c2.slice;
    let threshold = profile.overlap_threshold(eta1, eta2);
    let (distance, c_diff) = if dims_ok && same_disc {
        (local_distance(model, &c1.center, &c2.center), spectral_norm(&(&c1.from_chart - &c2.from_chart)))
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let gap = distance + c_diff;
    let holds = ratio_ok && dims_ok && same_disc && (gap < threshold || gap <= ROUNDOFF);
    OverlapReport { holds, ratio_ok, dims_ok, same_disc, distance, c_diff, threshold }
}

/// Measured quantities of the overlap consequences for a pair of overlapping charts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapConsequences {
    pub c_inv_diff: f64,
    pub c_inv_log_ratio: f64,
    pub q_log_ratio: f64,
    /// Grid `C¹` norm of `Ψ_{x_i}^{-1}∘Ψ_{x_j} − O` on `R[𝔯]`, maximised over `i ≠ j`, where `O`
    /// is the orthogonal polar factor of the linear part.
    pub coords_err: f64,
    /// `Ψ_{x_i}(R[e^{-2ε}η_i]) ⊂ Ψ_{x_j}(R[η_j])` on box corners.
    pub nested: bool,
    /// Measured orthogonal parts, one per ordered pair.
    pub orthogonal: Vec<DMatrix<f64>>,
    pub bound_c: f64,
    pub bound_q: f64,
    pub bound_coords: f64,
}

impl OverlapConsequences {
    pub fn holds(&self) -> bool {
        self.c_inv_diff < self.bound_c
            && self.c_inv_log_ratio <= self.bound_c
            && self.q_log_ratio <= self.bound_q
            && self.coords_err < self.bound_coords
            && self.nested
    }
}

pub fn overlap_consequences(
    c1: &PesinChart,
    eta1: f64,
    c2: &PesinChart,
    eta2: f64,
    eps: f64,
    rho: f64,
) -> OverlapConsequences {
    let e = eta1 * eta2;
    let c_inv_diff = spectral_norm(&(&c1.c_inv - &c2.c_inv));
    let c_inv_log_ratio = (c1.c_inv_norm / c2.c_inv_norm).ln().abs();
    let q_log_ratio = (c1.big_q / c2.big_q).ln().abs();
    let r = rho / 4.0;
    let mut coords_err: f64 = 0.0;
    let mut nested = true;
    let mut orthogonal = Vec::with_capacity(2);
    for (a, b, ea, eb) in [(c1, c2, eta1, eta2), (c2, c1, eta2, eta1)] {
        let d = a.dim();
        let offset = torus_diff(&b.center.as_slice()[..d], &a.center.as_slice()[..d]);
        let lin = &a.to_chart * &b.from_chart;
        let o = polar_orthogonal(&lin);
        let map = |v: &DVector<f64>| &a.to_chart * &offset + &lin * v;
        let mut c0: f64 = 0.0;
        for v in cube_grid(d, r, 5) {
            c0 = c0.max((map(&v) - &o * &v).norm());
        }
        coords_err = coords_err.max(c0 + spectral_norm(&(&lin - &o)));
        orthogonal.push(o);
        let shrink = (-2.0 * eps).exp() * eb;
        let widest = b.d_s.max(d - b.d_s) as f64;
        for v in cube_grid(d, shrink / widest.sqrt(), 2) {
            let w = map_inverse(a, b, &v);
            if box_norm(&w, a.d_s) > ea * (1.0 + 1e-12) {
                nested = false;
            }
        }
    }
    OverlapConsequences {
        c_inv_diff,
        c_inv_log_ratio,
        q_log_ratio,
        coords_err,
        nested,
        orthogonal,
        bound_c: e.powi(3),
        bound_q: e.powi(2),
        bound_coords: eps * e.powi(2),
    }
}

/// Orthogonal factor `U Vᵀ` of the polar decomposition.
pub fn polar_orthogonal(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

/// `Ψ_a^{-1}(Ψ_b(v))` with the nearest lift.
fn map_inverse(a: &PesinChart, b: &PesinChart, v: &DVector<f64>) -> DVector<f64> {
    let d = a.dim();
    let offset = torus_diff(&b.center.as_slice()[..d], &a.center.as_slice()[..d]);
    &a.to_chart * (offset + &b.from_chart * v)
}

/// Tensor grid with `n` nodes per axis on `[-r, r]^d`.
pub fn cube_grid(d: usize, r: f64, n: usize) -> Vec<DVector<f64>> {
    let axis: Vec<f64> = if n == 1 {
        vec![0.0]
    } else {
        (0..n).map(|i| -r + 2.0 * r * i as f64 / (n - 1) as f64).collect()
    };
    let mut out = vec![DVector::zeros(d)];
    for k in 0..d {
        let mut next = Vec::with_capacity(out.len() * n);
        for v in &out {
            for a in &axis {
                let mut w = v.clone();
                w[k] = *a;
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// An affine chart transition `v ↦ linear·v + offset` between consecutive slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartTransition {
    pub from_slice: usize,
    pub to_slice: usize,
    pub d_s: usize,
    pub linear: DMatrix<f64>,
    pub offset: DVector<f64>,
    /// Holonomy time.
    pub time: f64,
}

impl ChartTransition {
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.linear * v + &self.offset
    }

    pub fn inverse(&self) -> Result<ChartTransition> {
        let inv = self
            .linear
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Domain("singular chart transition".into()))?;
        Ok(ChartTransition {
            from_slice: self.to_slice,
            to_slice: self.from_slice,
            d_s: self.d_s,
            offset: -(&inv * &self.offset),
            linear: inv,
            time: -self.time,
        })
    }

    pub fn d_s_block(&self) -> DMatrix<f64> {
        self.linear.view((0, 0), (self.d_s, self.d_s)).into_owned()
    }

    pub fn d_u_block(&self) -> DMatrix<f64> {
        let n = self.linear.nrows();
        self.linear.view((self.d_s, self.d_s), (n - self.d_s, n - self.d_s)).into_owned()
    }
}

/// Lifted flow on a mapping torus: torus coordinates are multiplied by `A^n` without reduction.
pub fn lifted_flow(model: &MappingTorusModel, x: &Point, t: f64) -> Point {
    let d = model.torus_dim();
    let (n, h) = model.advance_height(x[d], t);
    let u = model.base_int_power(n) * x.rows(0, d);
    join(&u, h)
}

/// `Ψ_to^{-1} ∘ g^± ∘ Ψ_from` on lifted coordinates, where `g^±` is the holonomy to the next
/// (resp. previous) slice and the lift of the target centre nearest to `g^±(x)` is used.
pub fn transition(
    from: &PesinChart,
    to: &PesinChart,
    section: &ProperSection,
    direction: Direction,
) -> Result<ChartTransition> {
    let k = section.slice_count();
    let expected = match direction {
        Direction::Forward => (from.slice + 1) % k,
        Direction::Backward => (from.slice + k - 1) % k,
    };
    if to.slice != expected {
        return Err(Error::Input(format!(
            "target slice {} is not adjacent to slice {}",
            to.slice, from.slice
        )));
    }
    let model = section.model();
    let d = model.torus_dim();
    let t = direction.sign() * section.return_time;
    let (n, _) = model.advance_height(from.height(), t);
    let an = model.base_int_power(n);
    let image = an.clone() * from.center_u();
    let lift = &image + torus_diff(to.center_u().as_slice(), image.as_slice());
    let linear = &to.to_chart * &an * &from.from_chart;
    let offset = &to.to_chart * (image - lift);
    debug_assert_eq!(linear.nrows(), d);
    Ok(ChartTransition { from_slice: from.slice, to_slice: to.slice, d_s: from.d_s, linear, offset, time: t })
}

/// Block part and sampled residual of a chart transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub d_s: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub off_block: f64,
    /// Half side of the sampled cube.
    pub grid_radius: f64,
    pub nodes: Vec<DVector<f64>>,
    pub h_values: Vec<DVector<f64>>,
    pub h0_norm: f64,
    pub dh0_norm: f64,
    /// `max‖H‖ + max‖dH‖` over the grid.
    pub h_grid_norm: f64,
    /// `max ‖dH_v − dH_w‖/‖v − w‖^{β/3}` over grid pairs.
    pub holder: f64,
}

/// Evaluates `H = transition − (D_s ⊕ D_u)` on a `5^d` grid of `R[grid_radius]`.
///
/// The transition is evaluated pointwise through the flow of the model, independently of the
/// affine form returned by [`transition`].
pub fn chart_transition(
    from: &PesinChart,
    to: &PesinChart,
    section: &ProperSection,
    direction: Direction,
    beta: f64,
) -> Result<TransitionRecord> {
    let tr = transition(from, to, section, direction)?;
    let model = section.model();
    let d = from.dim();
    let ds = from.d_s;
    let mut blocks = DMatrix::zeros(d, d);
    blocks.view_mut((0, 0), (ds, ds)).copy_from(&tr.d_s_block());
    blocks.view_mut((ds, ds), (d - ds, d - ds)).copy_from(&tr.d_u_block());
    let off = &tr.linear - &blocks;
    let off_block = spectral_norm(&off);
    let t = tr.time;
    let base = lifted_flow(model, &from.center, t);
    let target = {
        let img = base.rows(0, d).into_owned();
        img.clone() + torus_diff(to.center_u().as_slice(), img.as_slice())
    };
    // The torus action is linear, so the image of `centre + w` is split as image(centre) plus
    // image(w); this keeps tiny chart boxes free of cancellation.
    let centre_term = &to.to_chart * (base.rows(0, d) - &target);
    let eval = |v: &DVector<f64>| -> Result<DVector<f64>> {
        from.apply(v)?;
        let w = join(&(&from.from_chart * v), from.height());
        let y = lifted_flow(model, &w, t);
        let image = &centre_term + &to.to_chart * y.rows(0, d);
        if box_norm(&image, to.d_s) > to.radius {
            return Err(Error::Domain("transition image escapes the target chart".into()));
        }
        Ok(image - &blocks * v)
    };
    let radius = from.grid_radius.min(from.radius);
    let nodes = cube_grid(d, radius, 5);
    let mut h_values = Vec::with_capacity(nodes.len());
    for v in &nodes {
        h_values.push(eval(v)?);
    }
    let step = radius * 1e-3;
    let jac = |v: &DVector<f64>| -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(d, d);
        for k in 0..d {
            let mut a = v.clone();
            let mut b = v.clone();
            a[k] += step;
            b[k] -= step;
            let col = (eval(&a)? - eval(&b)?) / (2.0 * step);
            j.set_column(k, &col);
        }
        Ok(j)
    };
    let zero = DVector::zeros(d);
    let h0_norm = eval(&zero)?.norm();
    let dh0_norm = spectral_norm(&jac(&zero)?);
    let inner = cube_grid(d, radius - step, 5);
    let jacs = inner.iter().map(|v| jac(v)).collect::<Result<Vec<_>>>()?;
    let mut holder: f64 = 0.0;
    let mut dmax: f64 = 0.0;
    for i in 0..inner.len() {
        dmax = dmax.max(spectral_norm(&jacs[i]));
        for j in 0..i {
            let dist = (&inner[i] - &inner[j]).norm();
            holder = holder.max(spectral_norm(&(&jacs[i] - &jacs[j])) / dist.powf(beta / 3.0));
        }
    }
    let hmax = h_values.iter().map(|h| h.norm()).fold(0.0, f64::max);
    Ok(TransitionRecord {
        d_s: tr.d_s_block(),
        d_u: tr.d_u_block(),
        off_block,
        grid_radius: radius,
        nodes,
        h_values,
        h0_norm,
        dh0_norm,
        h_grid_norm: hmax + dmax,
        holder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SpeedScale;
    use crate::sections::build_proper_section;
    use std::sync::OnceLock;

    fn frames() -> &'static SliceFrames {
        static F: OnceLock<SliceFrames> = OnceLock::new();
        F.get_or_init(|| {
            let model = MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap();
            let (sec, _) = build_proper_section(&model, 0.1).unwrap();
            let params = HyperbolicityParams { simpson_step: 5e-3, ..Default::default() };
            SliceFrames::build(&sec, &params).unwrap()
        })
    }

    fn desk() -> ScaleProfile {
        ScaleProfile::Desk { q_scale: 1.5, overlap: 0.2, am1: 0.5 }
    }

    fn pt(u: [f64; 2], h: f64) -> Point {
        DVector::from_vec(vec![u[0], u[1], h])
    }

    #[test]
    fn apply_zero_is_centre_and_round_trip() {
        let f = frames();
        for slice in [0, 7, 19] {
            let h = f.section.discs[slice].height;
            let c = f.chart(&pt([0.3, 0.8], h), &desk()).unwrap();
            let x = c.apply(&DVector::zeros(2)).unwrap();
            assert!((x - &c.center).norm() < 1e-15);
            for v in cube_grid(2, 0.5, 7) {
                let y = c.apply(&v).unwrap();
                let w = c.inverse_lifted(&y).unwrap();
                assert!((w - &v).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn apply_is_two_lipschitz() {
        let f = frames();
        let model = f.model();
        for slice in [0, 10, 19] {
            let h = f.section.discs[slice].height;
            let c = f.chart(&pt([0.1, 0.2], h), &desk()).unwrap();
            let g = model.metric(&c.center).view((0, 0), (2, 2)).into_owned();
            let r = g.cholesky().unwrap().l().transpose();
            let lip = spectral_norm(&(&r * &c.from_chart));
            assert!(lip <= 2.0 + 1e-6, "{lip}");
            let inv = spectral_norm(&(&c.to_chart * r.try_inverse().unwrap()));
            assert!(inv <= 2.0 * c.c_inv_norm + 1e-9);
        }
    }

    #[test]
    fn domain_errors() {
        let f = frames();
        let c = f.chart(&pt([0.3, 0.8], 0.0), &ScaleProfile::Paper).unwrap();
        assert!(matches!(c.apply(&DVector::from_vec(vec![0.1, 0.0])), Err(Error::Domain(_))));
        assert!(matches!(c.inverse(&pt([0.3, 0.8], 0.5)), Err(Error::Domain(_))));
    }

    #[test]
    fn self_overlap_and_failures() {
        let f = frames();
        let model = f.model();
        let a = f.chart(&pt([0.3, 0.8], 0.0), &desk()).unwrap();
        assert!(overlaps(&a, 0.3, &a, 0.3, 1e-3, &desk(), model).holds);
        let far = f.chart(&pt([0.6, 0.8], 0.0), &desk()).unwrap();
        let r = overlaps(&a, 0.3, &far, 0.3, 1e-3, &desk(), model);
        assert!(!r.holds && r.distance > 0.2);
        let other = f.chart(&pt([0.3, 0.8], f.section.discs[1].height), &desk()).unwrap();
        assert!(!overlaps(&a, 0.3, &other, 0.3, 1e-3, &desk(), model).same_disc);
        let mut bad = a.clone();
        bad.d_s = 0;
        assert!(!overlaps(&a, 0.3, &bad, 0.3, 1e-3, &desk(), model).dims_ok);
        assert!(!overlaps(&a, 0.3, &a, 0.31, 1e-3, &desk(), model).ratio_ok);
    }

    #[test]
    fn paper_overlap_threshold() {
        let f = frames();
        let model = f.model();
        let a = f.chart(&pt([0.3, 0.8], 0.0), &ScaleProfile::Paper).unwrap();
        let eta: f64 = 0.1;
        let shift = 0.5 * eta.powi(8);
        let b = f.chart(&pt([0.3 + shift, 0.8], 0.0), &ScaleProfile::Paper).unwrap();
        assert!(overlaps(&a, eta, &b, eta, 1e-3, &ScaleProfile::Paper, model).holds);
        let c = f.chart(&pt([0.3 + 2.0 * eta.powi(8), 0.8], 0.0), &ScaleProfile::Paper).unwrap();
        assert!(!overlaps(&a, eta, &c, eta, 1e-3, &ScaleProfile::Paper, model).holds);
        let cons = overlap_consequences(&a, eta, &b, eta, 1e-3, 0.1);
        assert!(cons.holds(), "{cons:?}");
    }

    #[test]
    fn exact_return_transition_has_no_residual() {
        let f = frames();
        let sec = &f.section;
        for slice in [0, 5, 19] {
            let h = sec.discs[slice].height;
            let x = pt([0.21, 0.67], h);
            let from = f.chart(&x, &desk()).unwrap();
            let (fx, _) = sec.poincare_return(&from.center, Direction::Forward).unwrap();
            let to = f.chart(&fx, &desk()).unwrap();
            let rec = chart_transition(&from, &to, sec, Direction::Forward, 1.0).unwrap();
            assert!(rec.h0_norm < 1e-9, "{}", rec.h0_norm);
            assert!(rec.dh0_norm <= 1e-6);
            assert!(rec.off_block < 1e-6);
            let ds = spectral_norm(&rec.d_s);
            let du_inv = spectral_norm(&rec.d_u.clone().try_inverse().unwrap());
            let chi = f.params.chi;
            let r = sec.return_time;
            for v in [ds, du_inv] {
                assert!(v > (-4.0 * 0.1f64).exp() && v < (-chi * r).exp(), "{v}");
            }
        }
    }

    #[test]
    fn paper_transition_residual_below_eps() {
        let f = frames();
        let sec = &f.section;
        let x = pt([0.4, 0.1], sec.discs[3].height);
        let from = f.chart(&x, &ScaleProfile::Paper).unwrap();
        let (fx, _) = sec.poincare_return(&from.center, Direction::Forward).unwrap();
        let to = f.chart(&fx, &ScaleProfile::Paper).unwrap();
        let rec = chart_transition(&from, &to, sec, Direction::Forward, 1.0).unwrap();
        assert!(rec.h_grid_norm < 1e-3);
    }

    #[test]
    fn overlap_variant_offset() {
        let f = frames();
        let sec = &f.section;
        let eps = f.params.eps;
        let x = pt([0.4, 0.1], sec.discs[19].height);
        let from = f.chart(&x, &ScaleProfile::Paper).unwrap();
        let (fx, _) = sec.poincare_return(&from.center, Direction::Forward).unwrap();
        let eta: f64 = 0.1;
        let shift = 0.1 * eta.powi(8);
        let y = pt([fx[0] + shift, fx[1]], fx[2]);
        let to = f.chart(&y, &ScaleProfile::Paper).unwrap();
        let model = f.model();
        let fchart = f.chart(&fx, &ScaleProfile::Paper).unwrap();
        assert!(overlaps(&fchart, eta, &to, eta, eps, &ScaleProfile::Paper, model).holds);
        let rec = chart_transition(&from, &to, sec, Direction::Forward, 1.0).unwrap();
        assert!(rec.h0_norm < eps * eta);
    }

    #[test]
    fn affine_transition_matches_pointwise_flow() {
        let f = frames();
        let sec = &f.section;
        let x = pt([0.9, 0.05], sec.discs[19].height);
        let from = f.chart(&x, &desk()).unwrap();
        let to = f.chart(&pt([0.2, 0.3], 0.0), &desk()).unwrap();
        let tr = transition(&from, &to, sec, Direction::Forward).unwrap();
        let rec = chart_transition(&from, &to, sec, Direction::Forward, 1.0).unwrap();
        for (v, h) in rec.nodes.iter().zip(&rec.h_values) {
            let blocks = tr.apply(v) - &tr.offset;
            let lin_err = (&tr.linear * v - blocks).norm();
            assert!(lin_err < 1e-9);
            assert!((h - &tr.offset).norm() < 1e-6 * (1.0 + v.norm()));
        }
        let back = tr.inverse().unwrap();
        let v = DVector::from_vec(vec![0.1, -0.2]);
        assert!((back.apply(&tr.apply(&v)) - v).norm() < 1e-12);
    }
}
