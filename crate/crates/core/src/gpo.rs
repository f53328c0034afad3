//! ε-double-chart alphabets, the edge relation `v → w`, transition times and ε-gpo graphs.
//!
//! Two position grids feed the coarse graining. [`Snapper::Grid`] is the uniform grid of
//! cell `¼q⁸`, which under the `Paper` profile leaves orbit points essentially where they are.
//! [`Snapper::Net`] tracks orbits of the cat suspension on a coset net `δ(Z² + b)` with
//! `A·P = P + (δ/2, δ/2)`, so that every crossing lands on one of four neighbouring net points.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charts::{box_norm, cube_grid, overlaps, DoubleChart, OverlapReport, PesinChart, ScaleProfile, SliceFrames};
use crate::hyperbolicity::{frak_h, q_parameters};
use crate::linalg::torus_diff;
use crate::models::{join, MappingTorusModel, Point};
use crate::sections::{Direction, ProperSection};
use crate::{Error, Result};

/// Shared data for chart construction and edge tests.
#[derive(Clone, Debug)]
pub struct GpoContext {
    pub frames: Arc<SliceFrames>,
    pub profile: ScaleProfile,
    pub eps: f64,
}

impl GpoContext {
    pub fn new(frames: Arc<SliceFrames>, profile: ScaleProfile) -> Self {
        let eps = frames.params.eps;
        Self { frames, profile, eps }
    }

    pub fn section(&self) -> &ProperSection {
        &self.frames.section
    }

    pub fn model(&self) -> &MappingTorusModel {
        self.frames.model()
    }

    pub fn chart(&self, x: &Point) -> Result<PesinChart> {
        self.frames.chart(x, &self.profile)
    }

    /// `Q` at a point of slice `slice`.
    pub fn big_q(&self, slice: usize) -> f64 {
        self.profile.big_q(&self.frames.frames[slice], self.eps)
    }
}

/// Orbit of the return map sampled on the section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitSample {
    pub id: usize,
    /// `f^n(x)` for `n = -back, …, fwd`, torus coordinates reduced.
    pub points: Vec<Point>,
    pub slices: Vec<usize>,
    /// Flow times with `t_0 = 0`.
    pub times: Vec<f64>,
    /// Position of `n = 0` in the vectors.
    pub origin: usize,
}

impl OrbitSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, n: i64) -> Option<usize> {
        let i = self.origin as i64 + n;
        (i >= 0 && (i as usize) < self.points.len()).then_some(i as usize)
    }
}

pub fn sample_orbit(section: &ProperSection, x0: &Point, back: usize, fwd: usize, id: usize) -> Result<OrbitSample> {
    let slice0 = section
        .disc_of(x0)
        .ok_or_else(|| Error::Section("orbit seed is not on the section".into()))?;
    let model = section.model();
    let x0 = model.normalize(x0)?;
    let mut before = Vec::with_capacity(back);
    let mut x = x0.clone();
    let mut t = 0.0;
    for _ in 0..back {
        let (y, dt) = section.poincare_return(&x, Direction::Backward)?;
        t -= dt.abs();
        before.push((y.clone(), t));
        x = y;
    }
    before.reverse();
    let mut points: Vec<Point> = before.iter().map(|(p, _)| p.clone()).collect();
    let mut times: Vec<f64> = before.iter().map(|(_, t)| *t).collect();
    points.push(x0.clone());
    times.push(0.0);
    let mut x = x0;
    let mut t = 0.0;
    for _ in 0..fwd {
        let (y, dt) = section.poincare_return(&x, Direction::Forward)?;
        t += dt;
        points.push(y.clone());
        times.push(t);
        x = y;
    }
    let slices = points
        .iter()
        .map(|p| section.disc_of(p).ok_or_else(|| Error::Section("orbit left the section".into())))
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(slices[back], slice0);
    Ok(OrbitSample { id, points, slices, times, origin: back })
}

/// Coset net `δ(Z² + b)` on the 2-torus with its crossing digits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetDesign {
    pub m: usize,
    pub delta: f64,
    pub offset: DVector<f64>,
    pub points: Vec<DVector<f64>>,
    /// Flat offsets `(±δ/2, ±δ/2)` from `A·p` to the four neighbouring net points.
    pub digits: Vec<DVector<f64>>,
    pub lambda: f64,
    pub stable: DVector<f64>,
    pub unstable: DVector<f64>,
    /// Rectangle half widths along the stable and unstable eigenlines.
    pub s_half: f64,
    pub u_half: f64,
}

impl NetDesign {
    pub fn new(model: &MappingTorusModel, m: usize) -> Result<Self> {
        if model.torus_dim() != 2 {
            return Err(Error::Config("the net design is defined on the 2-torus".into()));
        }
        if m < 2 {
            return Err(Error::Config("net resolution must be at least 2".into()));
        }
        let a = model.base_f64();
        let b = DVector::from_vec(vec![0.5, 0.0]);
        let drift = a * &b - &b - DVector::from_element(2, 0.5);
        if drift.iter().any(|v| (v - v.round()).abs() > 1e-12) {
            return Err(Error::Config("base matrix does not map the coset net to its cell centres".into()));
        }
        let delta = 1.0 / m as f64;
        let mut points = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                points.push(DVector::from_vec(vec![(i as f64 + b[0]) * delta, (j as f64 + b[1]) * delta]));
            }
        }
        let digits: Vec<DVector<f64>> = [[0.5, 0.5], [0.5, -0.5], [-0.5, 0.5], [-0.5, -0.5]]
            .iter()
            .map(|e| DVector::from_vec(vec![e[0] * delta, e[1] * delta]))
            .collect();
        let lambda = model.eigenvalues()[1];
        let stable = model.eigenvectors().column(0).into_owned();
        let unstable = model.eigenvectors().column(1).into_owned();
        let es = digits.iter().map(|e| stable.dot(e).abs()).fold(0.0, f64::max);
        let eu = digits.iter().map(|e| unstable.dot(e).abs()).fold(0.0, f64::max);
        Ok(Self {
            m,
            delta,
            offset: b,
            points,
            digits,
            lambda,
            stable,
            unstable,
            s_half: es * lambda / (lambda - 1.0),
            u_half: eu / (lambda - 1.0),
        })
    }

    /// `(s, u)` eigen-coordinates of a flat displacement.
    pub fn eig(&self, w: &DVector<f64>) -> (f64, f64) {
        (self.stable.dot(w), self.unstable.dot(w))
    }

    pub fn index_of(&self, u: &DVector<f64>) -> Option<usize> {
        let i = (u[0] / self.delta - self.offset[0]).round();
        let j = (u[1] / self.delta - self.offset[1]).round();
        let g = (i as i64).rem_euclid(self.m as i64) as usize * self.m + (j as i64).rem_euclid(self.m as i64) as usize;
        let d = torus_diff(u.as_slice(), self.points[g].as_slice());
        (d.norm() < 1e-9).then_some(g)
    }

    /// Net point whose rectangle contains `u`, with the lifted displacement `u − p`.
    pub fn locate(&self, u: &DVector<f64>) -> Option<(usize, DVector<f64>)> {
        let mut best: Option<(f64, usize, DVector<f64>)> = None;
        for (g, p) in self.points.iter().enumerate() {
            let base = torus_diff(u.as_slice(), p.as_slice());
            for i in -1..=1 {
                for j in -1..=1 {
                    let w = &base + DVector::from_vec(vec![i as f64, j as f64]);
                    let (s, uu) = self.eig(&w);
                    let slack = (s.abs() / self.s_half).max(uu.abs() / self.u_half);
                    if slack <= 1.0 && best.as_ref().map_or(true, |b| slack < b.0) {
                        best = Some((slack, g, w));
                    }
                }
            }
        }
        best.map(|(_, g, w)| (g, w))
    }

    /// Digit keeping the unstable deviation inside the rectangle after a crossing.
    pub fn crossing_digit(&self, w: &DVector<f64>) -> usize {
        let (_, u) = self.eig(w);
        let mut best = (f64::INFINITY, 0);
        for (i, e) in self.digits.iter().enumerate() {
            let r = (self.lambda * u - self.unstable.dot(e)).abs();
            if r < best.0 - 1e-15 {
                best = (r, i);
            }
        }
        best.1
    }
}

/// Position snapping used by the coarse graining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Snapper {
    /// Uniform grid with cell `¼(min q)⁸`, floored at `cell_floor`. Cells below
    /// [`POSITION_RESOLUTION`] snap every point to itself.
    Grid { cell_floor: f64 },
    Net(NetDesign),
}

/// Identifier of a symbol up to its window parameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SymbolKey {
    Net { slice: usize, net: usize, p_s: u64, p_u: u64 },
    Grid { slice: usize, cell: Vec<i64>, p_s: u64, p_u: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Symbol {
    pub key: SymbolKey,
    pub slice: usize,
    pub net: Option<usize>,
    pub chart: DoubleChart,
    /// `q(x)` used for the `I_{ε,q}` grid.
    pub q: f64,
}

impl Symbol {
    pub fn center(&self) -> &Point {
        &self.chart.chart.center
    }

    pub fn eta(&self) -> f64 {
        self.chart.eta()
    }

    pub fn label(&self) -> String {
        match &self.key {
            SymbolKey::Net { slice, net, .. } => format!("s{slice}n{net}"),
            SymbolKey::Grid { slice, cell, .. } => {
                let c: Vec<String> = cell.iter().map(|v| v.to_string()).collect();
                format!("s{slice}g{}", c.join("_"))
            }
        }
    }
}

/// Where a symbol came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub orbit: usize,
    pub index: i64,
    pub point: Point,
}

/// Coded window of one sampled orbit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitCoding {
    pub orbit: usize,
    /// Orbit index `n` of the first symbol.
    pub first: i64,
    pub symbols: Vec<usize>,
    /// Flow times `t_n` of the coded indices.
    pub times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub snapper: String,
    /// Position cell (grid) or net spacing δ.
    pub cell: f64,
    /// `λ = exp(ε^{1.5})`.
    pub lambda: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alphabet {
    pub symbols: Vec<Symbol>,
    pub provenance: Vec<Provenance>,
    pub codings: Vec<OrbitCoding>,
    pub grids: GridInfo,
}

impl Alphabet {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// `#{v : p^s, p^u > t}`.
    pub fn count_above(&self, t: f64) -> usize {
        self.symbols.iter().filter(|s| s.chart.p_s > t && s.chart.p_u > t).count()
    }
}

/// `(CG2)`: `0 < p ≤ εQ` and `p ∈ I_{ε,q}`.
pub fn cg2_holds(sym: &Symbol, eps: f64) -> bool {
    let top = eps * sym.chart.chart.big_q * (1.0 + 1e-12);
    [sym.chart.p_s, sym.chart.p_u].iter().all(|&p| p > 0.0 && p <= top && in_i_grid(p, eps, sym.q))
}

/// `(CG3)` with slack: `e^{-𝔥-slack} ≤ (p^s∧p^u)/q ≤ e^{𝔥+slack}`.
pub fn cg3_holds(sym: &Symbol, h: f64, slack: f64) -> bool {
    let r = (sym.eta() / sym.q).ln();
    r.abs() <= h + slack
}

/// Largest element of `I_{ε,η} = {e^{-ε²η i} : i ≥ 0}` that is `≤ v`.
pub fn snap_down(v: f64, eps: f64, eta: f64) -> Option<f64> {
    if !(v > 0.0) {
        return None;
    }
    let step = eps * eps * eta;
    if step <= v.ln().abs() * 1e-14 {
        // The grid is finer than the floating-point spacing near `v`.
        return Some(v.min(1.0));
    }
    let i = (-v.ln() / step).ceil().max(0.0);
    let mut out = (-step * i).exp();
    if out > v {
        out = (-step * (i + 1.0)).exp();
    }
    (out <= v).then_some(out)
}

pub fn in_i_grid(p: f64, eps: f64, eta: f64) -> bool {
    let step = eps * eps * eta;
    if step <= p.ln().abs() * 1e-14 {
        return p > 0.0 && p <= 1.0;
    }
    let i = -p.ln() / step;
    i >= -1e-6 && (i - i.round()).abs() < 1e-6 * i.abs().max(1.0)
}

/// `λ = exp(ε^{1.5})` classification and multipliers `a_n` for one side.
///
/// `big_p` is `P^s` (resp. `P^u` reversed). Returns `a_n` for the indices where the backward
/// induction from a maximal index reaches, `None` elsewhere.
fn multipliers(big_p: &[f64], q: &[f64], eps: f64) -> Result<Vec<Option<f64>>> {
    let n = big_p.len();
    let lambda = eps.powf(1.5).exp();
    let mut maximal = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        maximal[i] = big_p[i] < lambda * big_p[i + 1];
    }
    let last = match (0..n).rev().find(|&i| maximal[i]) {
        Some(i) => i,
        None => return Err(Error::Window("orbit window contains no maximal index".into())),
    };
    let mut a = vec![None; n];
    let mut next: Option<f64> = None;
    for k in (0..=last).rev() {
        let value = if maximal[k] {
            snap_down(big_p[k], eps, q[k])
                .ok_or_else(|| Error::Input(format!("window {:.3e} above the I grid", big_p[k])))?
        } else {
            let a_next = next.expect("induction starts at a maximal index");
            let upper = (-eps * big_p[k] / 4.0).exp() * a_next * big_p[k];
            let lower = (-eps * big_p[k] / 2.0).exp() * a_next * big_p[k];
            let v = snap_down(upper, eps, q[k])
                .ok_or_else(|| Error::Input("multiplier outside the I grid".into()))?;
            if v < lower * (1.0 - 1e-12) {
                return Err(Error::Config(format!(
                    "I grid too coarse for the multiplier window at index {k}"
                )));
            }
            v
        };
        let ak = value / big_p[k];
        a[k] = Some(ak);
        next = Some(ak);
    }
    Ok(a)
}

/// Grid cells below this size leave positions unchanged.
pub const POSITION_RESOLUTION: f64 = 1e-15;

/// Snapped centres along an orbit: `(slice, centre, net index, cell key)`.
type Snapped = (usize, Point, Option<usize>, Vec<i64>);

fn snap_orbit(ctx: &GpoContext, orbit: &OrbitSample, snapper: &Snapper, cell: f64) -> Result<Vec<Option<Snapped>>> {
    let model = ctx.model();
    let d = model.torus_dim();
    match snapper {
        Snapper::Grid { .. } => Ok(orbit
            .points
            .iter()
            .zip(&orbit.slices)
            .map(|(p, &s)| {
                if cell < POSITION_RESOLUTION {
                    // Below f64 resolution the grid cell of a point is the point itself.
                    let key: Vec<i64> = (0..d).map(|i| p[i].to_bits() as i64).collect();
                    return Some((s, p.clone(), None, key));
                }
                let key: Vec<i64> = (0..d).map(|i| (p[i] / cell).round() as i64).collect();
                let u = DVector::from_iterator(d, key.iter().map(|&c| (c as f64 * cell).rem_euclid(1.0)));
                Some((s, join(&u, p[d]), None, key))
            })
            .collect()),
        Snapper::Net(net) => {
            let k = ctx.section().slice_count();
            let mut out = Vec::with_capacity(orbit.len());
            let u0 = orbit.points[0].rows(0, d).into_owned();
            let (mut g, mut w) = net
                .locate(&u0)
                .ok_or_else(|| Error::Cover("orbit point outside every net rectangle".into()))?;
            let a = model.base_f64();
            for (i, (p, &s)) in orbit.points.iter().zip(&orbit.slices).enumerate() {
                if i > 0 && orbit.slices[i - 1] == k - 1 && s == 0 {
                    let dig = net.crossing_digit(&w);
                    let image = a * &net.points[g] + &net.digits[dig];
                    let u = image.map(|v| v.rem_euclid(1.0));
                    g = net
                        .index_of(&u)
                        .ok_or_else(|| Error::Shadowing("crossing left the net".into()))?;
                    w = a * &w - &net.digits[dig];
                }
                let actual = torus_diff(&p.as_slice()[..d], net.points[g].as_slice());
                let lift = (&w - &actual).map(|v| v.round());
                w = actual + lift;
                let (ss, uu) = net.eig(&w);
                let inside = ss.abs() <= net.s_half * (1.0 + 1e-9) && uu.abs() <= net.u_half * (1.0 + 1e-9);
                let h = ctx.section().discs[s].height;
                out.push(inside.then(|| (s, join(&net.points[g], h), Some(g), vec![g as i64])));
            }
            Ok(out)
        }
    }
}

/// Builds the alphabet from sampled orbits by the coarse-graining construction.
///
/// `window` restricts emission to indices `|n| ≤ window`.
pub fn coarse_grain(ctx: &GpoContext, orbits: &[OrbitSample], snapper: &Snapper, window: usize) -> Result<Alphabet> {
    let eps = ctx.eps;
    let section = ctx.section();
    let mut symbols: Vec<Symbol> = Vec::new();
    let mut provenance = Vec::new();
    let mut index: HashMap<SymbolKey, usize> = HashMap::new();
    let mut codings = Vec::new();
    let mut min_q = f64::INFINITY;
    let mut data = Vec::with_capacity(orbits.len());
    for orbit in orbits {
        let big_q: Vec<f64> = orbit.slices.iter().map(|&s| ctx.big_q(s)).collect();
        let qp = q_parameters(&orbit.times, &big_q, eps)?;
        min_q = min_q.min(qp.q.iter().cloned().fold(f64::INFINITY, f64::min));
        data.push(qp);
    }
    let cell = match snapper {
        Snapper::Grid { cell_floor } => (0.25 * min_q.powi(8)).max(*cell_floor),
        Snapper::Net(net) => net.delta,
    };
    for (orbit, qp) in orbits.iter().zip(&data) {
        let snapped = snap_orbit(ctx, orbit, snapper, cell)?;
        let n = orbit.len();
        // Q(x_n) at the snapped centres; the frames depend on the slice only.
        let q_centres: Vec<f64> = orbit.slices.iter().map(|&s| ctx.big_q(s)).collect();
        let big = q_parameters(&orbit.times, &q_centres, eps)?;
        let a_s = multipliers(&big.p_s, &qp.q, eps)?;
        let rev_p: Vec<f64> = big.p_u.iter().rev().cloned().collect();
        let rev_q: Vec<f64> = qp.q.iter().rev().cloned().collect();
        let mut a_u = multipliers(&rev_p, &rev_q, eps)?;
        a_u.reverse();
        let mut run: Option<OrbitCoding> = None;
        for i in 0..n {
            let nn = i as i64 - orbit.origin as i64;
            let emit = nn.unsigned_abs() as usize <= window;
            let entry = match (emit, &snapped[i], a_s[i], a_u[i]) {
                (true, Some(sn), Some(as_), Some(au)) => Some((sn, as_ * big.p_s[i], au * big.p_u[i])),
                _ => None,
            };
            let Some(((slice, centre, net, cellkey), p_s, p_u)) = entry else {
                if let Some(c) = run.take() {
                    codings.push(c);
                }
                continue;
            };
            let key = match net {
                Some(g) => SymbolKey::Net { slice: *slice, net: *g, p_s: p_s.to_bits(), p_u: p_u.to_bits() },
                None => SymbolKey::Grid { slice: *slice, cell: cellkey.clone(), p_s: p_s.to_bits(), p_u: p_u.to_bits() },
            };
            let id = match index.get(&key) {
                Some(&id) => id,
                None => {
                    let chart = ctx.frames.chart_on(*slice, centre, &ctx.profile)?;
                    let chart = DoubleChart::new(chart, p_s, p_u, eps)?;
                    symbols.push(Symbol { key: key.clone(), slice: *slice, net: *net, chart, q: qp.q[i] });
                    provenance.push(Provenance { orbit: orbit.id, index: nn, point: orbit.points[i].clone() });
                    index.insert(key, symbols.len() - 1);
                    symbols.len() - 1
                }
            };
            let c = run.get_or_insert_with(|| OrbitCoding { orbit: orbit.id, first: nn, symbols: vec![], times: vec![] });
            c.symbols.push(id);
            c.times.push(orbit.times[i]);
        }
        if let Some(c) = run.take() {
            codings.push(c);
        }
    }
    let _ = section;
    Ok(Alphabet {
        symbols,
        provenance,
        codings,
        grids: GridInfo {
            snapper: match snapper {
                Snapper::Grid { .. } => "grid".into(),
                Snapper::Net(_) => "net".into(),
            },
            cell,
            lambda: eps.powf(1.5).exp(),
            eps,
        },
    })
}

/// Checks `(CG2)` and `(CG3)` (with `𝔥 + 2ε` slack) on every symbol.
pub fn alphabet_violations(alphabet: &Alphabet, eps: f64, rho: f64, beta: f64) -> (usize, usize) {
    let h = frak_h(eps, rho, beta);
    let cg2 = alphabet.symbols.iter().filter(|s| !cg2_holds(s, eps)).count();
    let cg3 = alphabet.symbols.iter().filter(|s| !cg3_holds(s, h, 2.0 * eps)).count();
    (cg2, cg3)
}

/// The two sides of one GPO2 inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

impl Bracket {
    pub fn holds(&self) -> bool {
        self.lower <= self.value * (1.0 + 1e-12) && self.value <= self.upper * (1.0 + 1e-12)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub forward: OverlapReport,
    pub backward: OverlapReport,
    pub time: Option<f64>,
    pub gpo2_s: Option<Bracket>,
    pub gpo2_u: Option<Bracket>,
    pub holds: bool,
    pub failure: Option<String>,
}

fn overlap_pair(ctx: &GpoContext, x: &Point, dir: Direction, y: &PesinChart, eta: f64) -> Result<OverlapReport> {
    let (fx, _) = ctx.section().poincare_return(x, dir)?;
    let cf = ctx.chart(&fx)?;
    Ok(overlaps(&cf, eta, y, eta, ctx.eps, &ctx.profile, ctx.model()))
}

/// GPO1 for `v → w`.
pub fn gpo1(ctx: &GpoContext, v: &DoubleChart, w: &DoubleChart) -> Result<(OverlapReport, OverlapReport)> {
    let fwd = overlap_pair(ctx, &v.chart.center, Direction::Forward, &w.chart, w.eta())?;
    let bwd = overlap_pair(ctx, &w.chart.center, Direction::Backward, &v.chart, v.eta())?;
    Ok((fwd, bwd))
}

/// `T(v,w)`: minimum holonomy time from `Ψ_x(R[η_v/20])` forward and from `Ψ_y(R[η_w/20])`
/// backward.
pub fn transition_time(ctx: &GpoContext, v: &DoubleChart, w: &DoubleChart) -> Result<f64> {
    let (fwd, bwd) = gpo1(ctx, v, w)?;
    if !(fwd.holds && bwd.holds) {
        return Err(Error::Input("transition time needs the GPO1 overlaps".into()));
    }
    let sec = ctx.section();
    let mut t = f64::INFINITY;
    for (chart, eta, dir) in [(&v.chart, v.eta(), Direction::Forward), (&w.chart, w.eta(), Direction::Backward)] {
        let side = eta / 20.0 / (chart.d_s.max(chart.d_u()) as f64).sqrt();
        for z in cube_grid(chart.dim(), side, 3) {
            let p = ctx.model().normalize(&chart.apply(&z)?)?;
            let (_, tz) = sec.holonomy(&chart.center, dir, &p)?;
            t = t.min(tz.abs());
        }
    }
    Ok(t)
}

/// GPO1 and GPO2 for `v → w` with diagnostics.
pub fn is_edge(ctx: &GpoContext, v: &DoubleChart, w: &DoubleChart) -> Result<EdgeReport> {
    let (forward, backward) = gpo1(ctx, v, w)?;
    if !(forward.holds && backward.holds) {
        let failure = Some(format!(
            "GPO1 {} overlap: distance {:.3e} + C difference {:.3e} vs threshold {:.3e}",
            if forward.holds { "backward" } else { "forward" },
            if forward.holds { backward.distance } else { forward.distance },
            if forward.holds { backward.c_diff } else { forward.c_diff },
            forward.threshold
        ));
        return Ok(EdgeReport { forward, backward, time: None, gpo2_s: None, gpo2_u: None, holds: false, failure });
    }
    let t = transition_time(ctx, v, w)?;
    let eps = ctx.eps;
    let (s, u) = gpo2(v, w, t, eps);
    let holds = s.holds() && u.holds();
    let failure = (!holds).then(|| {
        let (name, b) = if s.holds() { ("(4.2)", u) } else { ("(4.1)", s) };
        format!("GPO2 {name}: {:.6e} not in [{:.6e}, {:.6e}]", b.value, b.lower, b.upper)
    });
    Ok(EdgeReport { forward, backward, time: Some(t), gpo2_s: Some(s), gpo2_u: Some(u), holds, failure })
}

/// Both GPO2 brackets for given transition time.
pub fn gpo2(v: &DoubleChart, w: &DoubleChart, t: f64, eps: f64) -> (Bracket, Bracket) {
    let qx = v.chart.big_q;
    let qy = w.chart.big_q;
    let e = (eps * t).exp();
    let s = Bracket {
        lower: (-eps * v.p_s).exp() * (e * w.p_s).min((-eps).exp() * eps * qx),
        value: v.p_s,
        upper: (e * w.p_s).min(eps * qx),
    };
    let u = Bracket {
        lower: (-eps * w.p_u).exp() * (e * v.p_u).min((-eps).exp() * eps * qy),
        value: w.p_u,
        upper: (e * v.p_u).min(eps * qy),
    };
    (s, u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpoGraph {
    pub alphabet: Alphabet,
    /// Ids (into the alphabet) of the surviving vertices.
    pub vertices: Vec<usize>,
    /// Adjacency by position in `vertices`.
    pub edges: Vec<Vec<usize>>,
    pub transition_times: Vec<Vec<f64>>,
    pub pruned: usize,
}

impl GpoGraph {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(|e| e.len()).sum()
    }

    pub fn symbol(&self, v: usize) -> &Symbol {
        &self.alphabet.symbols[self.vertices[v]]
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.vertices.binary_search(&id).ok()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges[a].contains(&b)
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.vertices.len()];
        for out in &self.edges {
            for &b in out {
                d[b] += 1;
            }
        }
        d
    }

    pub fn time(&self, a: usize, b: usize) -> Option<f64> {
        self.edges[a].iter().position(|&x| x == b).map(|i| self.transition_times[a][i])
    }
}

/// All-pairs edge test with the `e^{±2ε}` η-ratio and next-slice pre-filters, followed by
/// relevance pruning.
pub fn build_gpo_graph(ctx: &GpoContext, alphabet: Alphabet) -> Result<GpoGraph> {
    let eps = ctx.eps;
    let k = ctx.section().slice_count();
    let mut by_slice: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in alphabet.symbols.iter().enumerate() {
        by_slice.entry(s.slice).or_default().push(i);
    }
    let n = alphabet.len();
    let rows: Vec<Result<Vec<(usize, f64)>>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let va = &alphabet.symbols[a];
            let next = (va.slice + 1) % k;
            let mut out = Vec::new();
            for &b in by_slice.get(&next).map(|v| v.as_slice()).unwrap_or(&[]) {
                let vb = &alphabet.symbols[b];
                if (va.eta() / vb.eta()).ln().abs() > 2.0 * eps * (1.0 + 1e-12) {
                    continue;
                }
                let rep = is_edge(ctx, &va.chart, &vb.chart)?;
                if rep.holds {
                    out.push((b, rep.time.unwrap_or(0.0)));
                }
            }
            Ok(out)
        })
        .collect();
    let mut adj = Vec::with_capacity(n);
    for r in rows {
        adj.push(r?);
    }
    let mut alive = vec![true; n];
    loop {
        let mut indeg = vec![0usize; n];
        let mut outdeg = vec![0usize; n];
        for a in 0..n {
            if !alive[a] {
                continue;
            }
            for &(b, _) in &adj[a] {
                if alive[b] {
                    outdeg[a] += 1;
                    indeg[b] += 1;
                }
            }
        }
        let mut changed = false;
        for a in 0..n {
            if alive[a] && (indeg[a] == 0 || outdeg[a] == 0) {
                alive[a] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let vertices: Vec<usize> = (0..n).filter(|&a| alive[a]).collect();
    if vertices.is_empty() {
        return Err(Error::Config("ε-gpo graph is empty after pruning".into()));
    }
    let pos: HashMap<usize, usize> = vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut edges = Vec::with_capacity(vertices.len());
    let mut times = Vec::with_capacity(vertices.len());
    for &a in &vertices {
        let mut e: Vec<(usize, f64)> =
            adj[a].iter().filter_map(|&(b, t)| pos.get(&b).map(|&p| (p, t))).collect();
        e.sort_by_key(|x| x.0);
        edges.push(e.iter().map(|x| x.0).collect());
        times.push(e.iter().map(|x| x.1).collect());
    }
    Ok(GpoGraph { pruned: n - vertices.len(), alphabet, vertices, edges, transition_times: times })
}

/// Sup of chart-box deviations `‖Ψ_{x_n}^{-1}(f^n x)‖ / (p^s_n ∧ p^u_n)` along a coding.
pub fn tracking_ratio(alphabet: &Alphabet, coding: &OrbitCoding, orbit: &OrbitSample) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (j, &id) in coding.symbols.iter().enumerate() {
        let i = orbit
            .index(coding.first + j as i64)
            .ok_or_else(|| Error::Input("coding outside the orbit window".into()))?;
        let sym = &alphabet.symbols[id];
        let v = sym.chart.chart.to_chart.clone()
            * torus_diff(&orbit.points[i].as_slice()[..sym.chart.chart.dim()], &sym.center().as_slice()[..sym.chart.chart.dim()]);
        worst = worst.max(box_norm(&v, sym.chart.chart.d_s) / sym.eta());
    }
    Ok(worst)
}
