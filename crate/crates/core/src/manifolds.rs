//! Admissible manifolds, graph transforms, invariant manifolds of gpo rays, shadowing and
//! Smale brackets.
//!
//! A manifold is the graph of its representing function over the stable (or unstable) axis of
//! a chart box, stored by values on a tensor grid and evaluated by multilinear interpolation.
//! Outside the box the interpolant continues linearly, which is exact for affine functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::charts::{box_norm, cube_grid, transition, ChartTransition, DoubleChart, ScaleProfile};
use crate::linalg::spectral_norm;
use crate::models::Point;
use crate::sections::{Direction, ProperSection};
use crate::{Error, Result};

pub const DEFAULT_NODES: usize = 9;
const NEWTON_TOL: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Stable,
    Unstable,
}

/// Graph of `F : B[r] ⊂ R^{base} → R^{fibre}` in the coordinates of `chart`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleManifold {
    pub chart: DoubleChart,
    pub kind: Kind,
    pub nodes: usize,
    pub radius: f64,
    /// Values at the grid nodes, first axis slowest.
    pub values: Vec<DVector<f64>>,
}

/// Grid norms of an admissible manifold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Admissibility {
    pub f0: f64,
    pub df0: f64,
    pub df_max: f64,
    pub holder: f64,
    pub am1: bool,
    pub am2: bool,
    pub am3: bool,
}

impl Admissibility {
    pub fn holds(&self) -> bool {
        self.am1 && self.am2 && self.am3
    }
}

impl AdmissibleManifold {
    pub fn base_dim(&self) -> usize {
        match self.kind {
            Kind::Stable => self.chart.chart.d_s,
            Kind::Unstable => self.chart.chart.d_u(),
        }
    }

    pub fn fibre_dim(&self) -> usize {
        self.chart.chart.dim() - self.base_dim()
    }

    /// `F` sampled from a closure on a grid with `nodes` points per axis.
    pub fn from_fn(chart: DoubleChart, kind: Kind, nodes: usize, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> Self {
        let radius = match kind {
            Kind::Stable => chart.p_s,
            Kind::Unstable => chart.p_u,
        };
        let base = match kind {
            Kind::Stable => chart.chart.d_s,
            Kind::Unstable => chart.chart.d_u(),
        };
        let values = cube_grid(base, radius, nodes).iter().map(f).collect();
        Self { chart, kind, nodes, radius, values }
    }

    /// `F ≡ 0`.
    pub fn flat(chart: DoubleChart, kind: Kind) -> Self {
        let fibre = match kind {
            Kind::Stable => chart.chart.d_u(),
            Kind::Unstable => chart.chart.d_s,
        };
        Self::from_fn(chart, kind, DEFAULT_NODES, |_| DVector::zeros(fibre))
    }

    pub fn grid(&self) -> Vec<DVector<f64>> {
        cube_grid(self.base_dim(), self.radius, self.nodes)
    }

    fn cell(&self, t: &DVector<f64>) -> (Vec<usize>, Vec<f64>) {
        let h = 2.0 * self.radius / (self.nodes - 1) as f64;
        let mut idx = Vec::with_capacity(t.len());
        let mut loc = Vec::with_capacity(t.len());
        for &x in t.iter() {
            let s = (x + self.radius) / h;
            let i = (s.floor().max(0.0) as usize).min(self.nodes - 2);
            idx.push(i);
            loc.push(s - i as f64);
        }
        (idx, loc)
    }

    fn node(&self, idx: &[usize]) -> &DVector<f64> {
        let mut k = 0;
        for &i in idx {
            k = k * self.nodes + i;
        }
        &self.values[k]
    }

    /// Multilinear interpolation, continued linearly outside the box.
    pub fn eval(&self, t: &DVector<f64>) -> DVector<f64> {
        let b = self.base_dim();
        let (idx, loc) = self.cell(t);
        let mut out = DVector::zeros(self.fibre_dim());
        let mut corner = vec![0usize; b];
        for mask in 0..(1usize << b) {
            let mut w = 1.0;
            for a in 0..b {
                let bit = (mask >> a) & 1;
                corner[a] = idx[a] + bit;
                w *= if bit == 1 { loc[a] } else { 1.0 - loc[a] };
            }
            out += self.node(&corner) * w;
        }
        out
    }

    /// Derivative of the interpolant at `t`.
    pub fn derivative(&self, t: &DVector<f64>) -> DMatrix<f64> {
        let b = self.base_dim();
        let h = 2.0 * self.radius / (self.nodes - 1) as f64;
        let (idx, loc) = self.cell(t);
        let mut out = DMatrix::zeros(self.fibre_dim(), b);
        let mut corner = vec![0usize; b];
        for axis in 0..b {
            let mut col = DVector::zeros(self.fibre_dim());
            for mask in 0..(1usize << b) {
                let mut w = 1.0;
                for a in 0..b {
                    let bit = (mask >> a) & 1;
                    corner[a] = idx[a] + bit;
                    if a == axis {
                        w *= if bit == 1 { 1.0 } else { -1.0 } / h;
                    } else {
                        w *= if bit == 1 { loc[a] } else { 1.0 - loc[a] };
                    }
                }
                col += self.node(&corner) * w;
            }
            out.set_column(axis, &col);
        }
        out
    }

    /// Chart coordinates of the graph point over `t`.
    pub fn point(&self, t: &DVector<f64>) -> DVector<f64> {
        let f = self.eval(t);
        match self.kind {
            Kind::Stable => stack(t, &f),
            Kind::Unstable => stack(&f, t),
        }
    }

    fn cell_centres(&self) -> Vec<DVector<f64>> {
        let h = 2.0 * self.radius / (self.nodes - 1) as f64;
        cube_grid(self.base_dim(), self.radius - h / 2.0, self.nodes - 1)
    }

    /// `(AM1)–(AM3)` on grid norms.
    pub fn admissibility(&self, profile: &ScaleProfile, beta: f64) -> Admissibility {
        let eta = self.chart.eta();
        let zero = DVector::zeros(self.base_dim());
        let f0 = self.eval(&zero).norm();
        let df0 = spectral_norm(&self.derivative(&zero));
        let centres = self.cell_centres();
        let ders: Vec<DMatrix<f64>> = centres.iter().map(|c| self.derivative(c)).collect();
        let df_max = ders.iter().map(spectral_norm).fold(0.0, f64::max);
        let mut holder: f64 = 0.0;
        for i in 0..ders.len() {
            for j in 0..i {
                let dist = (&centres[i] - &centres[j]).norm();
                holder = holder.max(spectral_norm(&(&ders[i] - &ders[j])) / dist.powf(beta / 3.0));
            }
        }
        Admissibility {
            f0,
            df0,
            df_max,
            holder,
            am1: f0 <= profile.am1() * eta,
            am2: df0 <= 0.5 * eta.powf(beta / 3.0),
            am3: df_max + holder <= 0.5,
        }
    }

    /// `sup |F1 − F2|` on the grid.
    pub fn d_c0(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// `d_{C⁰} + sup ‖dF1 − dF2‖` with derivatives at cell centres.
    pub fn d_c1(&self, other: &Self) -> f64 {
        let d1 = self
            .cell_centres()
            .iter()
            .map(|c| spectral_norm(&(self.derivative(c) - other.derivative(c))))
            .fold(0.0, f64::max);
        self.d_c0(other) + d1
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

/// Solves `g(z) = 0` by Newton's method with a finite-difference Jacobian.
fn newton(
    mut z: DVector<f64>,
    scale: f64,
    g: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> Option<DVector<f64>> {
    let n = z.len();
    let tol = NEWTON_TOL * scale.max(f64::MIN_POSITIVE);
    for _ in 0..50 {
        let r = g(&z);
        if r.norm() <= tol {
            return Some(z);
        }
        let step = scale.max(f64::MIN_POSITIVE) * 1e-6;
        let mut j = DMatrix::zeros(r.len(), n);
        for k in 0..n {
            let mut a = z.clone();
            a[k] += step;
            j.set_column(k, &((g(&a) - &r) / step));
        }
        let dz = j.lu().solve(&r)?;
        z -= dz;
    }
    let r = g(&z);
    (r.norm() <= tol).then_some(z)
}

/// `ℱ^s` (from `w` back to `v`) or `ℱ^u` (from `v` forward to `w`) along the transition
/// `tr = Ψ_w^{-1} ∘ g^+ ∘ Ψ_v`. `target` is `v` for the stable and `w` for the unstable case.
pub fn graph_transform(
    tr: &ChartTransition,
    m: &AdmissibleManifold,
    target: &DoubleChart,
    profile: &ScaleProfile,
    beta: f64,
) -> Result<AdmissibleManifold> {
    let mut nodes = m.nodes;
    loop {
        let out = transform_on(tr, m, target, nodes)?;
        let adm = out.admissibility(profile, beta);
        if adm.df_max + adm.holder <= 0.45 || nodes >= 33 {
            return Ok(out);
        }
        nodes = 2 * nodes - 1;
    }
}

fn transform_on(tr: &ChartTransition, m: &AdmissibleManifold, target: &DoubleChart, nodes: usize) -> Result<AdmissibleManifold> {
    let d = tr.linear.nrows();
    let ds = tr.d_s;
    let scale = target.eta().max(m.chart.eta());
    match m.kind {
        Kind::Stable => {
            let base = ds;
            let radius = target.p_s;
            let mut values = Vec::new();
            for t in cube_grid(base, radius, nodes) {
                let seed = DVector::zeros(d - ds);
                let g = |u: &DVector<f64>| {
                    let y = tr.apply(&stack(&t, u));
                    y.rows(ds, d - ds) - m.eval(&y.rows(0, ds).into_owned())
                };
                let u = newton(seed, scale, g).ok_or_else(|| {
                    Error::Transform(format!("stable graph transform failed at node {:?}", t.as_slice()))
                })?;
                values.push(u);
            }
            Ok(AdmissibleManifold { chart: target.clone(), kind: Kind::Stable, nodes, radius, values })
        }
        Kind::Unstable => {
            let base = d - ds;
            let radius = target.p_u;
            let mut values = Vec::new();
            for t in cube_grid(base, radius, nodes) {
                let seed = DVector::zeros(base);
                let g = |s: &DVector<f64>| {
                    let y = tr.apply(&stack(&m.eval(s), s));
                    y.rows(ds, base) - &t
                };
                let s = newton(seed, scale, g).ok_or_else(|| {
                    Error::Transform(format!("unstable graph transform failed at node {:?}", t.as_slice()))
                })?;
                let y = tr.apply(&stack(&m.eval(&s), &s));
                values.push(y.rows(0, ds).into_owned());
            }
            Ok(AdmissibleManifold { chart: target.clone(), kind: Kind::Unstable, nodes, radius, values })
        }
    }
}

/// Chart transitions along a path of double charts.
pub fn path_transitions(section: &ProperSection, path: &[DoubleChart]) -> Result<Vec<ChartTransition>> {
    path.windows(2)
        .map(|w| transition(&w[0].chart, &w[1].chart, section, Direction::Forward))
        .collect()
}

/// `V^s` of a forward path `v_0 → … → v_N` from a seed at `v_N`.
pub fn stable_manifold(
    transitions: &[ChartTransition],
    path: &[DoubleChart],
    seed: AdmissibleManifold,
    profile: &ScaleProfile,
    beta: f64,
) -> Result<AdmissibleManifold> {
    if path.len() != transitions.len() + 1 {
        return Err(Error::Input("path and transitions are misaligned".into()));
    }
    let mut m = seed;
    for i in (0..transitions.len()).rev() {
        m = graph_transform(&transitions[i], &m, &path[i], profile, beta)?;
    }
    Ok(m)
}

/// `V^u` of a backward path `v_{-N} → … → v_0` from a seed at `v_{-N}`.
pub fn unstable_manifold(
    transitions: &[ChartTransition],
    path: &[DoubleChart],
    seed: AdmissibleManifold,
    profile: &ScaleProfile,
    beta: f64,
) -> Result<AdmissibleManifold> {
    if path.len() != transitions.len() + 1 {
        return Err(Error::Input("path and transitions are misaligned".into()));
    }
    let mut m = seed;
    for i in 0..transitions.len() {
        m = graph_transform(&transitions[i], &m, &path[i + 1], profile, beta)?;
    }
    Ok(m)
}

/// `d_{C⁰}(ℱ^n(a), ℱ^n(b))` at `v_0` for `n = 1…N`, where the seeds `a`, `b` are placed at `v_n`.
pub fn seed_gaps(
    transitions: &[ChartTransition],
    path: &[DoubleChart],
    seed_a: impl Fn(&DoubleChart) -> AdmissibleManifold,
    seed_b: impl Fn(&DoubleChart) -> AdmissibleManifold,
    profile: &ScaleProfile,
    beta: f64,
) -> Result<Vec<f64>> {
    (1..=transitions.len())
        .map(|n| {
            let a = stable_manifold(&transitions[..n], &path[..=n], seed_a(&path[n]), profile, beta)?;
            let b = stable_manifold(&transitions[..n], &path[..=n], seed_b(&path[n]), profile, beta)?;
            Ok(a.d_c0(&b))
        })
        .collect()
}

/// Admissible seed: an affine graph with `F(0) = perturb·am1·η/2` and slope
/// `0.4·perturb·η^{β/3}`, so `|perturb| ≤ 1` keeps (AM1)–(AM3).
pub fn seed(chart: &DoubleChart, kind: Kind, perturb: f64, profile: &ScaleProfile, beta: f64) -> AdmissibleManifold {
    let eta = chart.eta();
    let fibre = match kind {
        Kind::Stable => chart.chart.d_u(),
        Kind::Unstable => chart.chart.d_s,
    };
    let height = 0.5 * perturb * profile.am1() * eta;
    let slope = 0.4 * perturb * eta.powf(beta / 3.0) / (fibre.max(1) as f64).sqrt();
    AdmissibleManifold::from_fn(chart.clone(), kind, DEFAULT_NODES, |t| {
        DVector::from_fn(fibre, |i, _| height + slope * t.get(i).copied().unwrap_or(0.0))
    })
}

/// `V^s ∩ V^u` in the chart of both manifolds, by iterating `t ↦ F^u(F^s(t))`.
pub fn intersect(s: &AdmissibleManifold, u: &AdmissibleManifold) -> Result<DVector<f64>> {
    let ds = s.base_dim();
    let scale = s.chart.eta();
    let tol = NEWTON_TOL * scale;
    let mut a = DVector::zeros(ds);
    for _ in 0..500 {
        let next = u.eval(&s.eval(&a));
        let delta = (&next - &a).norm();
        a = next;
        if delta <= tol {
            return Ok(stack(&a, &s.eval(&a)));
        }
    }
    Err(Error::Shadowing("V^s ∩ V^u iteration did not converge".into()))
}

/// Shadowed point of a window `v_{-N} … v_N` with its residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shadow {
    pub point: Point,
    /// Chart coordinates at `v_0`.
    pub coords: DVector<f64>,
    /// `‖z_n‖_box − (p^s_n ∧ p^u_n)` for `n = -N … N`.
    pub residuals: Vec<f64>,
    pub stable: AdmissibleManifold,
    pub unstable: AdmissibleManifold,
}

impl Shadow {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Seeds for [`shadow`], see [`seed`]; `perturb = 0` gives flat graphs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Seeds {
    pub perturb: f64,
}

/// Shadows the window `path` (odd length, centre `v_0`).
pub fn shadow(
    section: &ProperSection,
    path: &[DoubleChart],
    seeds: Seeds,
    profile: &ScaleProfile,
    beta: f64,
) -> Result<Shadow> {
    if path.len() % 2 == 0 || path.len() < 3 {
        return Err(Error::Input("shadowing needs a window v_{-N} … v_N".into()));
    }
    let n = path.len() / 2;
    let trs = path_transitions(section, path)?;
    shadow_with(section, path, &trs, seeds, profile, beta, n)
}

/// [`shadow`] with precomputed transitions and an arbitrary centre index.
pub fn shadow_with(
    section: &ProperSection,
    path: &[DoubleChart],
    trs: &[ChartTransition],
    seeds: Seeds,
    profile: &ScaleProfile,
    beta: f64,
    centre: usize,
) -> Result<Shadow> {
    let last = path.len() - 1;
    let s = stable_manifold(
        &trs[centre..],
        &path[centre..],
        seed(&path[last], Kind::Stable, seeds.perturb, profile, beta),
        profile,
        beta,
    )?;
    let u = unstable_manifold(
        &trs[..centre],
        &path[..=centre],
        seed(&path[0], Kind::Unstable, -seeds.perturb, profile, beta),
        profile,
        beta,
    )?;
    let z0 = intersect(&s, &u)?;
    let mut residuals = vec![0.0; path.len()];
    let mut z = z0.clone();
    residuals[centre] = box_norm(&z, path[centre].chart.d_s) - path[centre].eta();
    for i in centre..last {
        z = trs[i].apply(&z);
        residuals[i + 1] = box_norm(&z, path[i + 1].chart.d_s) - path[i + 1].eta();
    }
    let mut z = z0.clone();
    for i in (0..centre).rev() {
        z = trs[i].inverse()?.apply(&z);
        residuals[i] = box_norm(&z, path[i].chart.d_s) - path[i].eta();
    }
    let point = section.model().normalize(&path[centre].chart.apply(&z0)?)?;
    Ok(Shadow { point, coords: z0, residuals, stable: s, unstable: u })
}

/// `[x, y]` at a common symbol: `V^s` of the forward path of `x` meets `V^u` of the backward
/// path of `y`. Both paths start (resp. end) at the shared symbol.
pub fn smale_bracket(
    section: &ProperSection,
    forward_x: &[DoubleChart],
    backward_y: &[DoubleChart],
    profile: &ScaleProfile,
    beta: f64,
) -> Result<(Point, DVector<f64>)> {
    let fx = path_transitions(section, forward_x)?;
    let by = path_transitions(section, backward_y)?;
    let s = stable_manifold(&fx, forward_x, seed(forward_x.last().unwrap(), Kind::Stable, 0.0, profile, beta), profile, beta)?;
    let u = unstable_manifold(&by, backward_y, seed(&backward_y[0], Kind::Unstable, 0.0, profile, beta), profile, beta)?;
    let z = intersect(&s, &u)?;
    let p = section.model().normalize(&forward_x[0].chart.apply(&z)?)?;
    Ok((p, z))
}

/// Forward images `z_n` of `z` along the transitions, in chart coordinates.
pub fn forward_images(trs: &[ChartTransition], z: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut out = vec![z.clone()];
    for t in trs {
        let next = t.apply(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Rate `r` in `d(φ^t y, φ^t z) ≈ C e^{-r t}` fitted from chart displacements of two points of
/// `V^s` pushed along the ray; `times[n]` is the flow time after `n` steps.
pub fn contraction_rate(trs: &[ChartTransition], y: &DVector<f64>, z: &DVector<f64>, times: &[f64]) -> f64 {
    let a = forward_images(trs, y);
    let b = forward_images(trs, z);
    let d0 = (&a[0] - &b[0]).norm();
    let n = trs.len();
    let dn = (&a[n] - &b[n]).norm();
    -(dn / d0).ln() / (times[n] - times[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{PesinChart, SliceFrames};
    use crate::gpo::{coarse_grain, sample_orbit, GpoContext, NetDesign, Snapper};
    use crate::hyperbolicity::HyperbolicityParams;
    use crate::models::{MappingTorusModel, SpeedScale};
    use crate::sections::build_proper_section;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::{Arc, OnceLock};

    fn frames() -> Arc<SliceFrames> {
        static F: OnceLock<Arc<SliceFrames>> = OnceLock::new();
        F.get_or_init(|| {
            let model = MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap();
            let (sec, _) = build_proper_section(&model, 0.1).unwrap();
            let params = HyperbolicityParams { simpson_step: 5e-3, ..Default::default() };
            Arc::new(SliceFrames::build(&sec, &params).unwrap())
        })
        .clone()
    }

    fn desk() -> ScaleProfile {
        ScaleProfile::Desk { q_scale: 1.5, overlap: 0.2, am1: 0.7 }
    }

    fn block_chart(d_s: usize, d: usize, eta: f64) -> DoubleChart {
        let id = DMatrix::identity(d, d);
        let chart = PesinChart {
            center: DVector::zeros(d + 1),
            slice: 0,
            d_s,
            c: id.clone(),
            c_inv: id.clone(),
            c_inv_norm: 1.0,
            to_chart: id.clone(),
            from_chart: id,
            big_q: eta / 1e-3,
            radius: 1.0,
            grid_radius: 1.0,
        };
        DoubleChart { chart, p_s: eta, p_u: eta }
    }

    fn block_transition(d_s: usize, d: usize) -> ChartTransition {
        let mut l = DMatrix::zeros(d, d);
        for i in 0..d {
            l[(i, i)] = if i < d_s { 0.6 } else { 1.7 };
        }
        ChartTransition { from_slice: 0, to_slice: 0, d_s, linear: l, offset: DVector::zeros(d), time: 0.05 }
    }

    #[test]
    fn flat_graph_is_invariant_under_block_maps() {
        for (ds, d) in [(1, 2), (2, 4)] {
            let c = block_chart(ds, d, 0.1);
            let tr = block_transition(ds, d);
            for kind in [Kind::Stable, Kind::Unstable] {
                let m = AdmissibleManifold::flat(c.clone(), kind);
                let out = graph_transform(&tr, &m, &c, &desk(), 1.0).unwrap();
                assert!(out.values.iter().all(|v| v.norm() < 1e-12));
            }
        }
    }

    #[test]
    fn interpolation_is_exact_for_affine_functions() {
        let c = block_chart(2, 4, 0.1);
        let f = |t: &DVector<f64>| DVector::from_vec(vec![0.01 + 0.2 * t[0] - 0.1 * t[1], 0.3 * t[1]]);
        let m = AdmissibleManifold::from_fn(c, Kind::Stable, 9, f);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = DVector::from_vec(vec![rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
            assert!((m.eval(&t) - f(&t)).norm() < 1e-14);
            let d = m.derivative(&t);
            assert!((d[(0, 0)] - 0.2).abs() < 1e-12 && (d[(1, 1)] - 0.3).abs() < 1e-12);
        }
    }

    fn random_manifold(c: &DoubleChart, rng: &mut ChaCha8Rng) -> AdmissibleManifold {
        let eta = c.eta();
        let a = rng.gen_range(-1e-4..1e-4) * eta;
        let b = rng.gen_range(-0.05..0.05);
        let k = rng.gen_range(-0.05..0.05) / eta;
        AdmissibleManifold::from_fn(c.clone(), Kind::Stable, 9, |t| DVector::from_element(1, a + b * t[0] + k * t[0] * t[0] * 0.5))
    }

    #[test]
    fn graph_transform_contracts() {
        let c = block_chart(1, 2, 0.1);
        let tr = block_transition(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chi_r: f64 = 0.25 * 0.05;
        for _ in 0..100 {
            let v1 = random_manifold(&c, &mut rng);
            let v2 = random_manifold(&c, &mut rng);
            assert!(v1.admissibility(&ScaleProfile::Paper, 1.0).holds());
            let f1 = graph_transform(&tr, &v1, &c, &ScaleProfile::Paper, 1.0).unwrap();
            let f2 = graph_transform(&tr, &v2, &c, &ScaleProfile::Paper, 1.0).unwrap();
            assert!(f1.d_c0(&f2) <= (-chi_r / 2.0).exp() * v1.d_c0(&v2) + 1e-15);
            let bound = (-chi_r / 2.0).exp() * (v1.d_c1(&v2) + v1.d_c0(&v2).powf(1.0 / 3.0));
            assert!(f1.d_c1(&f2) <= bound);
        }
    }

    fn desk_gpo(seed: u64, back: usize, fwd: usize) -> (GpoContext, Vec<DoubleChart>, Point) {
        let ctx = GpoContext::new(frames(), desk());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_vec(vec![rng.gen::<f64>(), rng.gen::<f64>(), ctx.section().discs[7].height]);
        let orbit = sample_orbit(ctx.section(), &x, back, fwd, 0).unwrap();
        let net = NetDesign::new(ctx.model(), 4).unwrap();
        let alphabet = coarse_grain(&ctx, &[orbit.clone()], &Snapper::Net(net), back.max(fwd)).unwrap();
        let coding = &alphabet.codings[0];
        let start = (orbit.origin as i64 + coding.first) as usize;
        let path: Vec<DoubleChart> = coding.symbols.iter().map(|&i| alphabet.symbols[i].chart.clone()).collect();
        let centre = orbit.origin - start;
        let half = centre.min(path.len() - 1 - centre);
        let window = path[centre - half..=centre + half].to_vec();
        (ctx, window, orbit.points[orbit.origin].clone())
    }

    #[test]
    fn desk_shadow_recovers_the_orbit() {
        let (ctx, path, x) = desk_gpo(4, 460, 460);
        assert!(path.len() >= 801);
        let sh = shadow(ctx.section(), &path, Seeds { perturb: 0.0 }, &ctx.profile, 1.0).unwrap();
        let eta = path[path.len() / 2].eta();
        let d = crate::sections::local_distance(ctx.model(), &sh.point, &x);
        assert!(d < eta / 50.0, "{d}");
        assert!(sh.max_residual() <= 0.0);
        let sh2 = shadow(ctx.section(), &path, Seeds { perturb: 1.0 }, &ctx.profile, 1.0).unwrap();
        assert!((&sh.coords - &sh2.coords).norm() < 1e-8);
        let adm = sh.stable.admissibility(&ctx.profile, 1.0);
        assert!(adm.holds(), "{adm:?}");
    }

    #[test]
    fn stable_direction_and_invariance() {
        let (ctx, path, _) = desk_gpo(8, 40, 60);
        let n = path.len() / 2;
        let ray = &path[n..];
        let trs = path_transitions(ctx.section(), ray).unwrap();
        let s = stable_manifold(&trs, ray, AdmissibleManifold::flat(ray[ray.len() - 1].clone(), Kind::Stable), &ctx.profile, 1.0)
            .unwrap();
        // Tangent at 0 against the contracting eigendirection.
        let chart = &ray[0].chart;
        let mut tangent = DVector::zeros(2);
        tangent[0] = 1.0;
        tangent[1] = s.derivative(&DVector::zeros(1))[(0, 0)];
        let flat = &chart.from_chart * tangent;
        let es = ctx.model().eigenvectors().column(0).into_owned();
        let cos = (flat.dot(&es) / flat.norm()).abs();
        assert!((1.0 - cos * cos).sqrt() < 1e-4);
        // Invariance: images of V^s[v_0…] lie on V^s[v_1…].
        let s1 = stable_manifold(&trs[1..], &ray[1..], AdmissibleManifold::flat(ray[ray.len() - 1].clone(), Kind::Stable), &ctx.profile, 1.0)
            .unwrap();
        for t in s.grid() {
            let y = trs[0].apply(&s.point(&t));
            let on = s1.eval(&y.rows(0, 1).into_owned());
            assert!((on[0] - y[1]).abs() < 1e-6);
        }
        // Successive iterates decay geometrically.
        let gaps = seed_gaps(
            &trs[..30],
            &ray[..=30],
            |c| seed(c, Kind::Stable, 0.9, &ctx.profile, 1.0),
            |c| seed(c, Kind::Stable, -0.9, &ctx.profile, 1.0),
            &ctx.profile,
            1.0,
        )
        .unwrap();
        let bound = (-ctx.frames.params.chi * ctx.section().return_time / 2.0).exp();
        for w in gaps.windows(2) {
            assert!(w[1] <= bound * w[0] + 1e-14, "{w:?}");
        }
    }

    fn paper_gpo(seed: u64, n: usize) -> (GpoContext, Vec<DoubleChart>, Point) {
        let ctx = GpoContext::new(frames(), ScaleProfile::Paper);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_vec(vec![rng.gen::<f64>(), rng.gen::<f64>(), ctx.section().discs[2].height]);
        let orbit = sample_orbit(ctx.section(), &x, n + 2, n + 2, 0).unwrap();
        let alphabet = coarse_grain(&ctx, &[orbit.clone()], &Snapper::Grid { cell_floor: 0.0 }, n).unwrap();
        let coding = &alphabet.codings[0];
        assert_eq!(coding.first, -(n as i64));
        let path: Vec<DoubleChart> = coding.symbols.iter().map(|&i| alphabet.symbols[i].chart.clone()).collect();
        (ctx, path, orbit.points[orbit.origin].clone())
    }

    #[test]
    fn paper_scale_stable_manifolds() {
        let (ctx, path, _) = paper_gpo(31, 25);
        let n = path.len() / 2;
        let ray = &path[n..];
        assert_eq!(ray.len(), 26);
        let trs = path_transitions(ctx.section(), ray).unwrap();
        let last = &ray[ray.len() - 1];
        let a = stable_manifold(&trs, ray, seed(last, Kind::Stable, 1.0, &ctx.profile, 1.0), &ctx.profile, 1.0).unwrap();
        let b = stable_manifold(&trs, ray, seed(last, Kind::Stable, -1.0, &ctx.profile, 1.0), &ctx.profile, 1.0).unwrap();
        assert!(a.d_c1(&b) < 1e-8);
        for m in [&a, &b] {
            let adm = m.admissibility(&ctx.profile, 1.0);
            assert!(adm.holds(), "{adm:?}");
        }
        assert!(seed(last, Kind::Stable, 1.0, &ctx.profile, 1.0).admissibility(&ctx.profile, 1.0).holds());
    }

    #[test]
    fn paper_scale_intersection_is_central() {
        let (ctx, path, x) = paper_gpo(32, 30);
        let sh = shadow(ctx.section(), &path, Seeds { perturb: 1.0 }, &ctx.profile, 1.0).unwrap();
        let centre = &path[path.len() / 2];
        assert!(box_norm(&sh.coords, centre.chart.d_s) <= centre.eta() / 500.0);
        assert!(sh.max_residual() <= 0.0);
        assert!(crate::sections::local_distance(ctx.model(), &sh.point, &x) < 1e-12);
    }

    #[test]
    fn bracket_of_a_point_with_itself() {
        let (ctx, path, _) = desk_gpo(12, 300, 300);
        let n = path.len() / 2;
        let (p, _) = smale_bracket(ctx.section(), &path[n..], &path[..=n], &ctx.profile, 1.0).unwrap();
        let sh = shadow(ctx.section(), &path, Seeds { perturb: 0.0 }, &ctx.profile, 1.0).unwrap();
        assert!(crate::sections::local_distance(ctx.model(), &p, &sh.point) < 1e-9);
    }

    #[test]
    fn forward_contraction_on_stable_manifolds() {
        let (ctx, path, _) = desk_gpo(21, 30, 80);
        let n = path.len() / 2;
        let ray = &path[n..];
        let trs = path_transitions(ctx.section(), ray).unwrap();
        let s = stable_manifold(&trs, ray, AdmissibleManifold::flat(ray[ray.len() - 1].clone(), Kind::Stable), &ctx.profile, 1.0)
            .unwrap();
        let chi = ctx.frames.params.chi;
        let r = ctx.section().return_time;
        let grid = s.grid();
        for (a, b) in grid.iter().zip(grid.iter().skip(3)) {
            let ya = forward_images(&trs, &s.point(a));
            let yb = forward_images(&trs, &s.point(b));
            let d0 = (&ya[0] - &yb[0]).norm();
            for (k, (p, q)) in ya.iter().zip(&yb).enumerate() {
                assert!((p - q).norm() <= 2.0 * d0 * (-(2.0 * chi / 3.0) * r * k as f64).exp() + 1e-12);
            }
        }
    }
}
