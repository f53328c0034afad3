//! Markov cover, Bowen–Sinai refinement and the second coding on the 2-torus suspension.
//!
//! Rectangles `Z(v)` are the shadowed sets of the net-design gpo graph. In eigen coordinates
//! around the net point of `v` the shadow of a path is an explicit digit sum, so every
//! rectangle is contained in an eigen box whose sides are obtained by value iteration over
//! the graph. Partition cells are classes of points with equal signatures: the rectangles
//! containing `H^k(x)`, `|k| ≤ N`, together with the intersection pattern of their fibres
//! with every rectangle in the `ρ`-neighbourhood.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gpo::{GpoGraph, NetDesign};
use crate::models::{join, FlowModel};
use crate::sections::{Direction, ProperSection};
use crate::symbolic::{scc_decompose, suspension_entropy, SymbolicShift};
use crate::{Error, Result};

pub type Flat = [f64; 2];

fn wrap(x: f64) -> f64 {
    x - (x + 0.5).floor()
}

/// Eigen-geometry of the base automorphism and of the slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub k: usize,
    pub lambda: f64,
    pub stable: Flat,
    pub unstable: Flat,
    pub base: [[i64; 2]; 2],
    pub base_inv: [[i64; 2]; 2],
    pub heights: Vec<f64>,
    /// Flow time between consecutive slices.
    pub spacing: f64,
    /// Number of slices within flow time `ρ`.
    pub reach: i64,
}

impl Geometry {
    pub fn new(net: &NetDesign, section: &ProperSection) -> Result<Self> {
        let model = section.model();
        if model.torus_dim() != 2 {
            return Err(Error::Config("the Markov construction is defined on the 2-torus".into()));
        }
        let b = model.base_matrix();
        let a = [[b[0][0], b[0][1]], [b[1][0], b[1][1]]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let base_inv = [[a[1][1] * det, -a[0][1] * det], [-a[1][0] * det, a[0][0] * det]];
        let reach = ((section.rho / section.return_time) * (1.0 + 1e-12)).floor() as i64;
        Ok(Self {
            k: section.slice_count(),
            lambda: net.lambda,
            stable: [net.stable[0], net.stable[1]],
            unstable: [net.unstable[0], net.unstable[1]],
            base: a,
            base_inv,
            heights: section.discs.iter().map(|d| d.height).collect(),
            spacing: section.return_time,
            reach: reach.max(1),
        })
    }

    /// `(s, u)` coordinates of a flat displacement.
    pub fn eig(&self, w: Flat) -> Flat {
        [
            w[0] * self.stable[0] + w[1] * self.stable[1],
            w[0] * self.unstable[0] + w[1] * self.unstable[1],
        ]
    }

    pub fn flat(&self, e: Flat) -> Flat {
        [
            e[0] * self.stable[0] + e[1] * self.unstable[0],
            e[0] * self.stable[1] + e[1] * self.unstable[1],
        ]
    }

    /// `A^n u` reduced modulo 1.
    pub fn apply(&self, u: Flat, n: i64) -> Flat {
        let m = if n >= 0 { self.base } else { self.base_inv };
        let mut v = u;
        for _ in 0..n.unsigned_abs() {
            v = [
                (m[0][0] as f64 * v[0] + m[0][1] as f64 * v[1]).rem_euclid(1.0),
                (m[1][0] as f64 * v[0] + m[1][1] as f64 * v[1]).rem_euclid(1.0),
            ];
        }
        v
    }

    pub fn crossings(&self, s: usize, d: i64) -> i64 {
        (s as i64 + d).div_euclid(self.k as i64)
    }

    pub fn slice_at(&self, s: usize, d: i64) -> usize {
        (s as i64 + d).rem_euclid(self.k as i64) as usize
    }

    /// `H^d` on slice coordinates.
    pub fn step(&self, s: usize, p: Flat, d: i64) -> (usize, Flat) {
        (self.slice_at(s, d), self.apply(p, self.crossings(s, d)))
    }

    /// Nearest-lift eigen coordinates of `p − c`.
    pub fn rel(&self, p: Flat, c: Flat) -> Flat {
        self.eig([wrap(p[0] - c[0]), wrap(p[1] - c[1])])
    }

    pub fn point(&self, s: usize, p: Flat) -> DVector<f64> {
        join(&DVector::from_vec(p.to_vec()), self.heights[s])
    }

    /// Point at eigen offset `e` from `c`.
    pub fn offset(&self, c: Flat, e: Flat) -> Flat {
        let w = self.flat(e);
        [(c[0] + w[0]).rem_euclid(1.0), (c[1] + w[1]).rem_euclid(1.0)]
    }
}

/// Eigen box around a net point on one slice: the hull of one or more rectangles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub slice: usize,
    pub net: usize,
    pub centre: Flat,
    pub s_range: [f64; 2],
    pub u_range: [f64; 2],
    /// Graph vertices whose rectangle has this hull.
    pub vertices: Vec<usize>,
}

/// A host seen from another slice: offset `d`, centre relative to the viewing host.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbour {
    pub d: i64,
    pub host: usize,
    pub centre: Flat,
    pub s_range: [f64; 2],
    pub u_range: [f64; 2],
}

/// Shadowed point `π(v̲)` with its gpo window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub point: Flat,
    /// Eigen coordinates relative to the net point of `v_0`.
    pub eig: Flat,
    pub path: Vec<usize>,
    pub zero: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub vertex: usize,
    pub host: usize,
    pub samples: Vec<Sample>,
}

/// Per-edge digit data of the net graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDigit {
    pub crossing: bool,
    /// Eigen coordinates of the digit `p_w − A·p_v` (zero off crossings).
    pub eig: Flat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverReport {
    pub rectangles: usize,
    pub hosts: usize,
    pub samples: usize,
    /// Samples outside their rectangle's hull (must be 0).
    pub hull_escapes: usize,
    pub orbit_points: usize,
    pub uncovered: usize,
    pub min_return: f64,
    pub max_return: f64,
    pub bracket_checks: usize,
    pub bracket_error: f64,
    pub bracket_escapes: usize,
    pub symbolic_checks: usize,
    pub symbolic_error: f64,
    pub symbolic_violations: usize,
    /// Largest `#{Z' : ⋃_{|n|≤1} H^n(Z) ∩ Z' ≠ ∅}`.
    pub local_finiteness: usize,
    /// Largest number of candidates allowed by the η-ratio window.
    pub local_finiteness_bound: usize,
    /// `[z, z']_Z` against `[z, φ^t z']_Z` for `z'` in a rectangle one slice ahead.
    pub holonomy_checks: usize,
    pub holonomy_error: f64,
}

#[serde_with::serde_as]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovCover {
    pub geometry: Geometry,
    pub hosts: Vec<Host>,
    pub by_slice: Vec<Vec<usize>>,
    pub neighbours: Vec<Vec<Neighbour>>,
    pub rectangles: Vec<Rectangle>,
    /// Graph successors and digits, by vertex position.
    pub successors: Vec<Vec<usize>>,
    pub predecessors: Vec<Vec<usize>>,
    #[serde_as(as = "Vec<(_, _)>")]
    pub digits: BTreeMap<(usize, usize), EdgeDigit>,
    pub vertex_host: Vec<usize>,
    pub rho: f64,
    pub report: CoverReport,
}

const LIFTS: i64 = 3;

fn in_range(x: f64, r: [f64; 2]) -> bool {
    x >= r[0] && x <= r[1]
}

/// Signed distance of `x` to the boundary of `r` (positive inside).
fn margin(x: f64, r: [f64; 2]) -> f64 {
    (x - r[0]).min(r[1] - x)
}

fn scale(r: [f64; 2], f: f64) -> [f64; 2] {
    [r[0] * f, r[1] * f]
}

fn overlap(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] <= b[1] && b[0] <= a[1]
}

/// Digits of every graph edge; off-crossing edges must keep the net point.
pub fn edge_digits(graph: &GpoGraph, net: &NetDesign, geo: &Geometry) -> Result<BTreeMap<(usize, usize), EdgeDigit>> {
    let mut out = BTreeMap::new();
    for a in 0..graph.vertex_count() {
        let va = graph.symbol(a);
        let ga = va.net.ok_or_else(|| Error::Config("cover needs a net alphabet".into()))?;
        for &b in &graph.edges[a] {
            let vb = graph.symbol(b);
            let gb = vb.net.ok_or_else(|| Error::Config("cover needs a net alphabet".into()))?;
            let crossing = va.slice + 1 == geo.k && vb.slice == 0;
            let pa = [net.points[ga][0], net.points[ga][1]];
            let pb = [net.points[gb][0], net.points[gb][1]];
            let image = if crossing { geo.apply(pa, 1) } else { pa };
            let e = [wrap(pb[0] - image[0]), wrap(pb[1] - image[1])];
            let ok = if crossing {
                net.digits.iter().any(|d| (d[0] - e[0]).abs() < 1e-9 && (d[1] - e[1]).abs() < 1e-9)
            } else {
                e[0].abs() < 1e-9 && e[1].abs() < 1e-9
            };
            if !ok {
                return Err(Error::Cover(format!("edge {a}->{b} is not a net transition")));
            }
            out.insert((a, b), EdgeDigit { crossing, eig: if crossing { geo.eig(e) } else { [0.0, 0.0] } });
        }
    }
    Ok(out)
}

/// Hulls `(s_range, u_range)` of `Z(v)` by value iteration of the digit sums over the graph.
pub fn rectangle_hulls(
    n: usize,
    successors: &[Vec<usize>],
    predecessors: &[Vec<usize>],
    digits: &BTreeMap<(usize, usize), EdgeDigit>,
    lambda: f64,
) -> Result<Vec<([f64; 2], [f64; 2])>> {
    let mut u = vec![[0.0f64, 0.0]; n];
    let mut s = vec![[0.0f64, 0.0]; n];
    for _ in 0..100_000 {
        let mut change = 0.0f64;
        let mut nu = vec![[f64::INFINITY, f64::NEG_INFINITY]; n];
        let mut ns = vec![[f64::INFINITY, f64::NEG_INFINITY]; n];
        for v in 0..n {
            for &w in &successors[v] {
                let d = &digits[&(v, w)];
                let r = if d.crossing { [(u[w][0] + d.eig[1]) / lambda, (u[w][1] + d.eig[1]) / lambda] } else { u[w] };
                nu[v] = [nu[v][0].min(r[0]), nu[v][1].max(r[1])];
            }
            for &p in &predecessors[v] {
                let d = &digits[&(p, v)];
                let r = if d.crossing { [s[p][0] / lambda - d.eig[0], s[p][1] / lambda - d.eig[0]] } else { s[p] };
                ns[v] = [ns[v][0].min(r[0]), ns[v][1].max(r[1])];
            }
        }
        for v in 0..n {
            if !nu[v][0].is_finite() || !ns[v][0].is_finite() {
                return Err(Error::Cover(format!("vertex {v} has no successor or predecessor")));
            }
            change = change.max((nu[v][0] - u[v][0]).abs()).max((nu[v][1] - u[v][1]).abs());
            change = change.max((ns[v][0] - s[v][0]).abs()).max((ns[v][1] - s[v][1]).abs());
        }
        u = nu;
        s = ns;
        if change == 0.0 {
            return Ok(s.into_iter().zip(u).collect());
        }
    }
    Err(Error::Cover("rectangle hulls did not converge".into()))
}

/// Closed-form shadow of a graph path: stable part from past crossings, unstable part from
/// future crossings (both truncated at the window ends).
pub fn path_shadow(path: &[usize], zero: usize, digits: &BTreeMap<(usize, usize), EdgeDigit>, lambda: f64) -> Result<Flat> {
    let mut u = 0.0;
    let mut f = 1.0;
    for i in zero..path.len() - 1 {
        let d = digits
            .get(&(path[i], path[i + 1]))
            .ok_or_else(|| Error::Input(format!("{}->{} is not an edge", path[i], path[i + 1])))?;
        if d.crossing {
            f /= lambda;
            u += d.eig[1] * f;
        }
    }
    let mut s = 0.0;
    let mut f = 1.0;
    for i in (0..zero).rev() {
        let d = digits
            .get(&(path[i], path[i + 1]))
            .ok_or_else(|| Error::Input(format!("{}->{} is not an edge", path[i], path[i + 1])))?;
        if d.crossing {
            s -= d.eig[0] * f;
            f /= lambda;
        }
    }
    Ok([s, u])
}

/// Random windows through each vertex, shadowed in closed form.
pub fn shadow_samples(
    graph: &GpoGraph,
    net: &NetDesign,
    section: &ProperSection,
    per_vertex: usize,
    depth: usize,
    seed: u64,
) -> Result<Vec<Vec<Sample>>> {
    let geo = Geometry::new(net, section)?;
    let digits = edge_digits(graph, net, &geo)?;
    let preds = predecessor_lists(graph);
    (0..graph.vertex_count())
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let g = graph.symbol(v).net.ok_or_else(|| Error::Config("cover needs a net alphabet".into()))?;
            let c = [net.points[g][0], net.points[g][1]];
            (0..per_vertex)
                .map(|_| {
                    let mut back = vec![v];
                    for _ in 0..depth {
                        let p = &preds[*back.last().unwrap()];
                        back.push(p[rng.gen_range(0..p.len())]);
                    }
                    back.reverse();
                    let mut path = back;
                    for _ in 0..depth {
                        let s = &graph.edges[*path.last().unwrap()];
                        path.push(s[rng.gen_range(0..s.len())]);
                    }
                    let e = path_shadow(&path, depth, &digits, geo.lambda)?;
                    Ok(Sample { point: geo.offset(c, e), eig: e, path, zero: depth })
                })
                .collect()
        })
        .collect()
}

fn predecessor_lists(graph: &GpoGraph) -> Vec<Vec<usize>> {
    let mut p = vec![Vec::new(); graph.vertex_count()];
    for (a, out) in graph.edges.iter().enumerate() {
        for &b in out {
            p[b].push(a);
        }
    }
    p
}

impl MarkovCover {
    /// Locates `p` (on the host's slice) in host `h`, returning eigen coordinates relative to
    /// the centre and the signed margin.
    pub fn locate_in(&self, h: usize, p: Flat) -> (Option<Flat>, f64) {
        let host = &self.hosts[h];
        let base = [wrap(p[0] - host.centre[0]), wrap(p[1] - host.centre[1])];
        let mut best: Option<Flat> = None;
        let mut best_margin = f64::NEG_INFINITY;
        for i in -1..=1 {
            for j in -1..=1 {
                let e = self.geometry.eig([base[0] + i as f64, base[1] + j as f64]);
                let m = margin(e[0], host.s_range).min(margin(e[1], host.u_range));
                if m > best_margin {
                    best_margin = m;
                    best = (m >= 0.0).then_some(e);
                }
            }
        }
        (best, best_margin)
    }

    /// Hosts on slice `s` containing `p`.
    pub fn hosts_at(&self, s: usize, p: Flat) -> Vec<(usize, Flat)> {
        self.by_slice[s].iter().filter_map(|&h| self.locate_in(h, p).0.map(|e| (h, e))).collect()
    }

    /// Flows a point to its next hit of the cover.
    pub fn next_hit(&self, section: &ProperSection, s: usize, p: Flat) -> Result<(usize, Flat, f64)> {
        let mut x = self.geometry.point(s, p);
        let mut t = 0.0;
        loop {
            let (y, dt) = section.poincare_return(&x, Direction::Forward)?;
            t += dt;
            let s2 = section.disc_of(&y).ok_or_else(|| Error::Section("return left the section".into()))?;
            let q = [y[0].rem_euclid(1.0), y[1].rem_euclid(1.0)];
            if !self.hosts_at(s2, q).is_empty() {
                return Ok((s2, q, t));
            }
            if t >= self.rho {
                return Err(Error::Cover(format!("orbit escapes the cover for time {t}")));
            }
            x = y;
        }
    }

    pub fn host_of_vertex(&self, v: usize) -> &Host {
        &self.hosts[self.vertex_host[v]]
    }
}

/// Builds the cover from shadowed samples and checks covering, local finiteness, the
/// Smale bracket and the symbolic Markov property on them.
pub fn build_cover(
    graph: &GpoGraph,
    net: &NetDesign,
    section: &ProperSection,
    samples: Vec<Vec<Sample>>,
    orbit_points: &[(usize, Flat)],
) -> Result<MarkovCover> {
    let geo = Geometry::new(net, section)?;
    let n = graph.vertex_count();
    if samples.len() != n || samples.iter().any(|s| s.is_empty()) {
        return Err(Error::Cover("every vertex needs at least one shadowed sample".into()));
    }
    let digits = edge_digits(graph, net, &geo)?;
    let successors = graph.edges.clone();
    let predecessors = predecessor_lists(graph);
    let hulls = rectangle_hulls(n, &successors, &predecessors, &digits, geo.lambda)?;

    let mut hosts: Vec<Host> = Vec::new();
    let mut host_index: HashMap<(usize, usize, [u64; 4]), usize> = HashMap::new();
    let mut vertex_host = Vec::with_capacity(n);
    for v in 0..n {
        let sym = graph.symbol(v);
        let g = sym.net.expect("checked by edge_digits");
        let (sr, ur) = hulls[v];
        let key = (sym.slice, g, [sr[0].to_bits(), sr[1].to_bits(), ur[0].to_bits(), ur[1].to_bits()]);
        let h = *host_index.entry(key).or_insert_with(|| {
            hosts.push(Host {
                slice: sym.slice,
                net: g,
                centre: [net.points[g][0], net.points[g][1]],
                s_range: sr,
                u_range: ur,
                vertices: vec![],
            });
            hosts.len() - 1
        });
        hosts[h].vertices.push(v);
        vertex_host.push(h);
    }
    let mut by_slice = vec![Vec::new(); geo.k];
    for (h, host) in hosts.iter().enumerate() {
        by_slice[host.slice].push(h);
    }

    // Neighbours within flow time ρ, all lifts whose boxes meet.
    let neighbours: Vec<Vec<Neighbour>> = hosts
        .iter()
        .map(|host| {
            let mut out = Vec::new();
            let s = host.slice;
            for d in -geo.reach..=geo.reach {
                let s2 = geo.slice_at(s, d);
                let c = geo.crossings(s, d);
                let f = geo.lambda.powi(c as i32);
                for &h2 in &by_slice[s2] {
                    let other = &hosts[h2];
                    let centre = geo.apply(other.centre, -c);
                    let sr = scale(other.s_range, f);
                    let ur = scale(other.u_range, 1.0 / f);
                    let base = [wrap(centre[0] - host.centre[0]), wrap(centre[1] - host.centre[1])];
                    for i in -LIFTS..=LIFTS {
                        for j in -LIFTS..=LIFTS {
                            let r = geo.eig([base[0] + i as f64, base[1] + j as f64]);
                            if overlap([r[0] + sr[0], r[0] + sr[1]], host.s_range)
                                && overlap([r[1] + ur[0], r[1] + ur[1]], host.u_range)
                            {
                                out.push(Neighbour { d, host: h2, centre: r, s_range: sr, u_range: ur });
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();

    let rectangles: Vec<Rectangle> =
        samples.into_iter().enumerate().map(|(v, s)| Rectangle { vertex: v, host: vertex_host[v], samples: s }).collect();
    let mut cover = MarkovCover {
        geometry: geo,
        hosts,
        by_slice,
        neighbours,
        rectangles,
        successors,
        predecessors,
        digits,
        vertex_host,
        rho: section.rho,
        report: CoverReport::default(),
    };
    cover.report = cover_checks(&cover, graph, section, orbit_points)?;
    Ok(cover)
}

fn cover_checks(cover: &MarkovCover, graph: &GpoGraph, section: &ProperSection, orbit_points: &[(usize, Flat)]) -> Result<CoverReport> {
    let geo = &cover.geometry;
    let mut rep = CoverReport {
        rectangles: cover.rectangles.len(),
        hosts: cover.hosts.len(),
        orbit_points: orbit_points.len(),
        min_return: f64::INFINITY,
        max_return: 0.0,
        ..Default::default()
    };
    let tol = 1e-9;
    for r in &cover.rectangles {
        let host = &cover.hosts[r.host];
        for x in &r.samples {
            rep.samples += 1;
            let inside = x.eig[0] >= host.s_range[0] - tol
                && x.eig[0] <= host.s_range[1] + tol
                && x.eig[1] >= host.u_range[0] - tol
                && x.eig[1] <= host.u_range[1] + tol;
            if !inside {
                rep.hull_escapes += 1;
            }
        }
    }
    for &(s, p) in orbit_points {
        if cover.hosts_at(s, p).is_empty() {
            rep.uncovered += 1;
            continue;
        }
        let (_, _, t) = cover.next_hit(section, s, p)?;
        rep.min_return = rep.min_return.min(t);
        rep.max_return = rep.max_return.max(t);
    }

    // Smale bracket: the window with the future of x and the past of y is a path through v,
    // and its shadow is the meeting point of the stable line of x and the unstable line of y.
    for r in &cover.rectangles {
        let host = &cover.hosts[r.host];
        for (x, y) in r.samples.iter().zip(r.samples.iter().cycle().skip(1)) {
            let mut path = y.path[..y.zero].to_vec();
            path.extend_from_slice(&x.path[x.zero..]);
            let z = path_shadow(&path, y.zero, &cover.digits, geo.lambda)?;
            let expected = [y.eig[0], x.eig[1]];
            rep.bracket_checks += 1;
            rep.bracket_error = rep.bracket_error.max((z[0] - expected[0]).abs().max((z[1] - expected[1]).abs()));
            if !(in_range(z[0], host.s_range) && in_range(z[1], host.u_range)) {
                rep.bracket_escapes += 1;
            }
        }
    }

    // Symbolic Markov property: a point sharing the future of x lies on W^s(x, Z(v_0)); its
    // first return must lie on W^s(H(x), Z(v_1)).
    for r in &cover.rectangles {
        let samples = &r.samples;
        for (x, y) in samples.iter().zip(samples.iter().cycle().skip(1)) {
            if x.zero + 1 >= x.path.len() {
                continue;
            }
            let mut path = y.path[..y.zero].to_vec();
            path.extend_from_slice(&x.path[x.zero..]);
            let w = path_shadow(&path, y.zero, &cover.digits, geo.lambda)?;
            let host0 = cover.host_of_vertex(r.vertex);
            let pw = geo.offset(host0.centre, w);
            let v1 = x.path[x.zero + 1];
            let host1 = cover.host_of_vertex(v1);
            let image = |p: Flat| -> Result<Flat> {
                let (q, _) = section.poincare_return(&geo.point(host0.slice, p), Direction::Forward)?;
                Ok([q[0].rem_euclid(1.0), q[1].rem_euclid(1.0)])
            };
            let hx = image(x.point)?;
            let hw = image(pw)?;
            let ex = geo.rel(hx, host1.centre);
            let ew = geo.rel(hw, host1.centre);
            rep.symbolic_checks += 1;
            let err = (ex[1] - ew[1]).abs();
            rep.symbolic_error = rep.symbolic_error.max(err);
            let inside = in_range(ew[0], host1.s_range) && in_range(ew[1], host1.u_range);
            if err > 1e-6 || !inside {
                rep.symbolic_violations += 1;
            }
        }
    }

    // Brackets with points of the next slice, moved back by the flow holonomy.
    for r in &cover.rectangles {
        let host = &cover.hosts[r.host];
        let z = &r.samples[0];
        for nb in cover.neighbours[r.host].iter().filter(|nb| nb.d == 1).take(2) {
            let other = &cover.rectangles[cover.hosts[nb.host].vertices[0]];
            let y = &other.samples[0];
            let s1 = geo.slice_at(host.slice, 1);
            let y3 = geo.point(s1, y.point);
            let (w, t) = section.holonomy(&y3, Direction::Backward, &y3)?;
            if t.abs() >= section.rho {
                continue;
            }
            let w = [w[0].rem_euclid(1.0), w[1].rem_euclid(1.0)];
            let (_, lin) = geo.step(s1, y.point, -1);
            let a = geo.rel(w, host.centre);
            let b = geo.rel(lin, host.centre);
            let ez = geo.rel(z.point, host.centre);
            let via_flow = geo.offset(host.centre, [a[0], ez[1]]);
            let direct = geo.offset(host.centre, [b[0], ez[1]]);
            let d = geo.rel(via_flow, direct);
            rep.holonomy_checks += 1;
            rep.holonomy_error = rep.holonomy_error.max(d[0].hypot(d[1]));
        }
    }

    // Local finiteness against the η-ratio window.
    let eps = graph.alphabet.grids.eps;
    let rho = section.rho;
    let window = 2.0 * (eps.cbrt() + eps + crate::hyperbolicity::frak_h(eps, rho, FlowModel::beta(section.model())));
    for (h, host) in cover.hosts.iter().enumerate() {
        let mut touched = BTreeSet::new();
        for n in -1i64..=1 {
            let s2 = geo.slice_at(host.slice, n);
            let c = geo.crossings(host.slice, n);
            let f = geo.lambda.powi(c as i32);
            let centre = geo.apply(host.centre, c);
            let sr = scale(host.s_range, 1.0 / f);
            let ur = scale(host.u_range, f);
            for &h2 in &cover.by_slice[s2] {
                let other = &cover.hosts[h2];
                let base = [wrap(centre[0] - other.centre[0]), wrap(centre[1] - other.centre[1])];
                'lift: for i in -LIFTS..=LIFTS {
                    for j in -LIFTS..=LIFTS {
                        let r = geo.eig([base[0] + i as f64, base[1] + j as f64]);
                        if overlap([r[0] + sr[0], r[0] + sr[1]], other.s_range)
                            && overlap([r[1] + ur[0], r[1] + ur[1]], other.u_range)
                        {
                            touched.insert(h2);
                            break 'lift;
                        }
                    }
                }
            }
        }
        let eta = graph.symbol(host.vertices[0]).eta();
        let bound = (0..graph.vertex_count())
            .filter(|&w| {
                let sw = graph.symbol(w);
                let ds = (sw.slice as i64 - host.slice as i64).rem_euclid(geo.k as i64);
                (ds <= 1 || ds == geo.k as i64 - 1) && (sw.eta() / eta).ln().abs() <= window
            })
            .map(|w| cover.vertex_host[w])
            .collect::<BTreeSet<_>>()
            .len();
        let _ = h;
        rep.local_finiteness = rep.local_finiteness.max(touched.len());
        rep.local_finiteness_bound = rep.local_finiteness_bound.max(bound);
    }
    if rep.min_return == f64::INFINITY {
        rep.min_return = 0.0;
    }
    Ok(rep)
}

/// Smallest `N` realising `g^+` along the sampled windows: the number of returns between the
/// slices of `v_0` and `v_1`.
pub fn measured_depth(cover: &MarkovCover) -> usize {
    let k = cover.geometry.k;
    cover
        .rectangles
        .iter()
        .flat_map(|r| r.samples.iter())
        .filter(|x| x.zero + 1 < x.path.len())
        .map(|x| {
            let a = cover.host_of_vertex(x.path[x.zero]).slice;
            let b = cover.host_of_vertex(x.path[x.zero + 1]).slice;
            let d = (b + k - a) % k;
            if d == 0 {
                k
            } else {
                d
            }
        })
        .max()
        .unwrap_or(1)
}

/// Result of classifying one point.
#[derive(Clone, Debug, PartialEq)]
pub enum Membership {
    Cell(usize),
    /// Some fibre test fell inside the exclusion band.
    Ambiguous,
    /// Not covered, or a signature without an enumerated cell.
    Outside,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub slice: usize,
    pub hosts: Vec<usize>,
    pub representative: Flat,
    pub signature: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub representatives: usize,
    pub cells: usize,
    /// Representatives whose image has no enumerated cell.
    pub missing_images: usize,
    /// Largest `#{R ⊂ Z}` and the logarithm of its bound `Σ_{Z'∈𝔍_Z} 4^{#𝔍_{Z'}}`.
    pub max_cells_per_host: usize,
    pub log_cell_bound: f64,
    pub cell_bound_violations: usize,
    /// Samples flagged as ambiguous and excluded.
    pub excluded: usize,
    pub classified: usize,
    /// Samples whose `E^{su}` bits disagree with membership in the projected rectangle.
    pub esu_mismatches: usize,
    pub max_degree: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovPartition {
    pub depth: usize,
    pub tol: f64,
    pub cells: Vec<Cell>,
    pub edges: Vec<(usize, usize)>,
    /// Return time `r̂` of each cell.
    pub roof: Vec<f64>,
    /// Cell of every cover sample, by rectangle.
    pub sample_cells: Vec<Vec<Option<usize>>>,
    pub report: RefineReport,
    #[serde(skip)]
    index: Vec<HashMap<Vec<u64>, usize>>,
}

const MARK: u64 = 1 << 63;

fn marker(kk: i64, h: usize) -> u64 {
    MARK | (((kk + 1024) as u64) << 32) | h as u64
}

fn bits_token(d: i64, h2: usize, b: u64) -> u64 {
    (((d + 64) as u64) << 40) | ((h2 as u64) << 2) | b
}

impl MarkovCover {
    /// Signature of `p` on slice `s` over `H^k`, `|k| ≤ depth`, and its smallest fibre-test margin.
    pub fn signature(&self, s: usize, p: Flat, depth: usize) -> (Vec<u64>, f64) {
        let geo = &self.geometry;
        let mut sig = Vec::new();
        let mut min_margin = f64::INFINITY;
        let n = depth as i64;
        for kk in -n..=n {
            let (s2, p2) = geo.step(s, p, kk);
            for &h in &self.by_slice[s2] {
                let (found, m) = self.locate_in(h, p2);
                min_margin = min_margin.min(m.abs());
                let Some(r) = found else { continue };
                sig.push(marker(kk, h));
                // Neighbours are stored grouped by (d, host), so OR-ing runs is enough.
                let mut last: Option<u64> = None;
                for nb in &self.neighbours[h] {
                    let du = r[1] - nb.centre[1];
                    let ds = r[0] - nb.centre[0];
                    let b = (in_range(du, nb.u_range) as u64) * 2 + in_range(ds, nb.s_range) as u64;
                    min_margin = min_margin.min(margin(du, nb.u_range).abs()).min(margin(ds, nb.s_range).abs());
                    let t = bits_token(nb.d, nb.host, 0);
                    match last {
                        Some(prev) if prev & !3 == t => last = Some(prev | b),
                        _ => {
                            sig.extend(last);
                            last = Some(t | b);
                        }
                    }
                }
                sig.extend(last);
            }
        }
        (sig, min_margin)
    }

    /// Hosts recorded at `k = 0` in a signature.
    pub fn signature_hosts(sig: &[u64]) -> Vec<usize> {
        sig.iter()
            .filter(|&&t| t & MARK != 0 && ((t >> 32) & 0x7fff_ffff) == 1024)
            .map(|&t| (t & 0xffff_ffff) as usize)
            .collect()
    }
}

impl MarkovPartition {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn rebuild_index(&mut self, k: usize) {
        let mut index = vec![HashMap::new(); k];
        for (i, c) in self.cells.iter().enumerate() {
            index[c.slice].insert(c.signature.clone(), i);
        }
        self.index = index;
    }

    /// Cell containing `p`; within the exclusion band `[0, 10·tol]` the point is ambiguous.
    pub fn classify(&self, cover: &MarkovCover, s: usize, p: Flat) -> Membership {
        let (sig, m) = cover.signature(s, p, self.depth);
        if m <= 10.0 * self.tol {
            return Membership::Ambiguous;
        }
        match self.lookup(s, &sig) {
            Some(c) => Membership::Cell(c),
            None => Membership::Outside,
        }
    }

    /// Cell with exactly this signature, rebuilding the index after deserialisation.
    pub fn lookup(&self, s: usize, sig: &[u64]) -> Option<usize> {
        if self.index.is_empty() {
            return self.cells.iter().position(|c| c.slice == s && c.signature == sig);
        }
        self.index[s].get(sig).copied()
    }

    pub fn shift(&self) -> SymbolicShift {
        SymbolicShift::new((0..self.cells.len()).map(|i| format!("R{i}")).collect(), self.edges.iter().copied())
            .expect("edges index cells")
    }

    /// Restores the lookup index after deserialisation.
    pub fn reindex(&mut self, cover: &MarkovCover) {
        self.rebuild_index(cover.geometry.k);
    }
}

/// Bowen–Sinai refinement at depth `N`, with cells enumerated from the breakpoint grid of
/// every host and every cover sample classified.
pub fn refine(cover: &MarkovCover, section: &ProperSection, depth: usize, tol: f64) -> Result<MarkovPartition> {
    let needed = measured_depth(cover);
    if depth < needed {
        return Err(Error::Input(format!("refinement depth {depth} is below the measured bound {needed}")));
    }
    let geo = &cover.geometry;
    let reach = depth as i64 + geo.reach;
    // Representatives per host, computed in parallel; merged slice by slice.
    let reps: Vec<(usize, Flat, Vec<u64>)> = (0..cover.hosts.len())
        .into_par_iter()
        .flat_map_iter(|h| {
            let host = &cover.hosts[h];
            let s = host.slice;
            let mut sb = vec![host.s_range[0], host.s_range[1]];
            let mut ub = vec![host.u_range[0], host.u_range[1]];
            for d in -reach..=reach {
                let s2 = geo.slice_at(s, d);
                let c = geo.crossings(s, d);
                let f = geo.lambda.powi(c as i32);
                for &h2 in &cover.by_slice[s2] {
                    let other = &cover.hosts[h2];
                    let centre = geo.apply(other.centre, -c);
                    let sr = scale(other.s_range, f);
                    let ur = scale(other.u_range, 1.0 / f);
                    let base = [wrap(centre[0] - host.centre[0]), wrap(centre[1] - host.centre[1])];
                    for i in -LIFTS..=LIFTS {
                        for j in -LIFTS..=LIFTS {
                            let r = geo.eig([base[0] + i as f64, base[1] + j as f64]);
                            let span_s = host.s_range[1] - host.s_range[0] + sr[1] - sr[0];
                            let span_u = host.u_range[1] - host.u_range[0] + ur[1] - ur[0];
                            if r[0].abs() > 4.0 * span_s || r[1].abs() > 4.0 * span_u {
                                continue;
                            }
                            for x in [r[0] + sr[0], r[0] + sr[1]] {
                                if x > host.s_range[0] && x < host.s_range[1] {
                                    sb.push(x);
                                }
                            }
                            for x in [r[1] + ur[0], r[1] + ur[1]] {
                                if x > host.u_range[0] && x < host.u_range[1] {
                                    ub.push(x);
                                }
                            }
                        }
                    }
                }
            }
            for v in [&mut sb, &mut ub] {
                v.sort_by(|a, b| a.total_cmp(b));
                v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            }
            let mut out = Vec::new();
            for i in 0..sb.len() - 1 {
                for j in 0..ub.len() - 1 {
                    let e = [0.5 * (sb[i] + sb[i + 1]), 0.5 * (ub[j] + ub[j + 1])];
                    let p = geo.offset(host.centre, e);
                    let (sig, _) = cover.signature(s, p, depth);
                    out.push((s, p, sig));
                }
            }
            out.into_iter()
        })
        .collect();

    let mut report = RefineReport { representatives: reps.len(), ..Default::default() };
    let mut cells: Vec<Cell> = Vec::new();
    let mut index: Vec<HashMap<Vec<u64>, usize>> = vec![HashMap::new(); geo.k];
    let mut rep_cell = Vec::with_capacity(reps.len());
    for (s, p, sig) in &reps {
        let id = match index[*s].get(sig) {
            Some(&id) => id,
            None => {
                cells.push(Cell {
                    slice: *s,
                    hosts: MarkovCover::signature_hosts(sig),
                    representative: *p,
                    signature: sig.clone(),
                });
                index[*s].insert(sig.clone(), cells.len() - 1);
                cells.len() - 1
            }
        };
        rep_cell.push(id);
    }
    report.cells = cells.len();

    let images: Vec<Option<usize>> = reps
        .par_iter()
        .map(|(s, p, _)| {
            let (s2, q) = geo.step(*s, *p, 1);
            let (sig, _) = cover.signature(s2, q, depth);
            index[s2].get(&sig).copied()
        })
        .collect();
    let mut edges = BTreeSet::new();
    for (a, img) in rep_cell.iter().zip(&images) {
        match img {
            Some(b) => {
                edges.insert((*a, *b));
            }
            None => report.missing_images += 1,
        }
    }

    let roof = cells
        .iter()
        .map(|c| {
            let (_, t) = section.poincare_return(&geo.point(c.slice, c.representative), Direction::Forward)?;
            Ok(t)
        })
        .collect::<Result<Vec<f64>>>()?;

    // Cell counts per host against Σ_{Z'∈𝔍_Z} 4^{#𝔍_{Z'}}.
    let mut per_host = vec![0usize; cover.hosts.len()];
    for c in &cells {
        for &h in &c.hosts {
            per_host[h] += 1;
        }
    }
    let j_size: Vec<usize> = cover
        .neighbours
        .iter()
        .map(|nb| nb.iter().map(|n| (n.d, n.host)).collect::<BTreeSet<_>>().len())
        .collect();
    for (h, &count) in per_host.iter().enumerate() {
        let js: BTreeSet<usize> = cover.neighbours[h].iter().map(|n| n.host).collect();
        let terms: Vec<f64> = js.iter().map(|&h2| j_size[h2] as f64 * 4f64.ln()).collect();
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_bound = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
        if (count as f64).ln() > log_bound {
            report.cell_bound_violations += 1;
        }
        if count > report.max_cells_per_host {
            report.max_cells_per_host = count;
            report.log_cell_bound = log_bound;
        }
    }

    let mut partition = MarkovPartition {
        depth,
        tol,
        cells,
        edges: edges.into_iter().collect(),
        roof,
        sample_cells: vec![],
        report,
        index,
    };
    let shift = partition.shift();
    partition.report.max_degree = shift.max_degree();

    // Classify the shadowed samples; check E^{su} against the projected rectangles.
    let classified: Vec<(Vec<Option<usize>>, usize, usize)> = cover
        .rectangles
        .par_iter()
        .map(|r| {
            let host = &cover.hosts[r.host];
            let mut out = Vec::with_capacity(r.samples.len());
            let mut excluded = 0;
            let mut mismatches = 0;
            for x in &r.samples {
                match partition.classify(cover, host.slice, x.point) {
                    Membership::Cell(c) => out.push(Some(c)),
                    _ => {
                        excluded += 1;
                        out.push(None);
                        continue;
                    }
                }
                if let Some(e) = cover.locate_in(r.host, x.point).0 {
                    let mut su: BTreeMap<(i64, usize), bool> = BTreeMap::new();
                    let mut inside: BTreeMap<(i64, usize), bool> = BTreeMap::new();
                    for nb in &cover.neighbours[r.host] {
                        let du = e[1] - nb.centre[1];
                        let ds = e[0] - nb.centre[0];
                        *su.entry((nb.d, nb.host)).or_default() |= in_range(du, nb.u_range) && in_range(ds, nb.s_range);
                        *inside.entry((nb.d, nb.host)).or_default() |= {
                            let (s2, p2) = geo.step(host.slice, x.point, nb.d);
                            let _ = s2;
                            cover.locate_in(nb.host, p2).0.is_some()
                        };
                    }
                    if su != inside {
                        mismatches += 1;
                    }
                }
            }
            (out, excluded, mismatches)
        })
        .collect();
    for (cells, excluded, mismatches) in classified {
        partition.report.excluded += excluded;
        partition.report.classified += cells.iter().filter(|c| c.is_some()).count();
        partition.report.esu_mismatches += mismatches;
        partition.sample_cells.push(cells);
    }
    Ok(partition)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub fibre_points: usize,
    pub stable_violations: usize,
    pub unstable_violations: usize,
    pub excluded: usize,
    /// Largest transverse drift of a fibre image, in flat eigen coordinates.
    pub max_drift: f64,
    /// Largest disagreement between the flow return and the linear model.
    pub flow_error: f64,
    pub product_checks: usize,
    pub product_violations: usize,
    pub bracket_identity_error: f64,
    /// Per-return contraction ratio of stable fibres (and of unstable fibres backwards).
    pub stable_rate: f64,
    pub unstable_rate: f64,
}

impl MarkovReport {
    pub fn violations(&self) -> usize {
        self.stable_violations + self.unstable_violations + self.product_violations
    }
}

fn flow_step(section: &ProperSection, geo: &Geometry, s: usize, p: Flat, dir: Direction) -> Result<(usize, Flat)> {
    let (q, _) = section.poincare_return(&geo.point(s, p), dir)?;
    let s2 = section.disc_of(&q).ok_or_else(|| Error::Section("return left the section".into()))?;
    Ok((s2, [q[0].rem_euclid(1.0), q[1].rem_euclid(1.0)]))
}

/// Geometrical Markov property on fibre points: `H(W^s(x,R₀)) ⊂ W^s(H(x),R₁)` and
/// `H^{-1}(W^u(H(x),R₁)) ⊂ W^u(x,R₀)` at tolerance `tol`, plus the product structure and the
/// contraction of fibres.
pub fn check_markov(
    cover: &MarkovCover,
    partition: &MarkovPartition,
    section: &ProperSection,
    per_sample: usize,
    seed: u64,
) -> Result<MarkovReport> {
    let geo = &cover.geometry;
    let tol = partition.tol.max(1e-6);
    let jobs: Vec<(usize, &Sample, usize)> = cover
        .rectangles
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| r.samples.iter().enumerate().map(move |(i, x)| (ri, x, i)))
        .collect();
    let partial: Vec<Result<MarkovReport>> = jobs
        .par_iter()
        .map(|&(ri, x, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ri as u64) << 20) ^ i as u64);
            let mut rep = MarkovReport { stable_rate: 0.0, unstable_rate: 0.0, ..Default::default() };
            let h0 = cover.rectangles[ri].host;
            let host0 = &cover.hosts[h0];
            let s0 = host0.slice;
            let Membership::Cell(r0) = partition.classify(cover, s0, x.point) else {
                rep.excluded += 1;
                return Ok(rep);
            };
            let (s1, hx) = flow_step(section, geo, s0, x.point, Direction::Forward)?;
            let (_, lin) = geo.step(s0, x.point, 1);
            rep.flow_error = rep.flow_error.max(geo.rel(hx, lin)[0].abs().max(geo.rel(hx, lin)[1].abs()));
            let Membership::Cell(r1) = partition.classify(cover, s1, hx) else {
                rep.excluded += 1;
                return Ok(rep);
            };
            let ex = cover.locate_in(h0, x.point).0.expect("sample in its host");
            let rate_steps = 2 * geo.k as i64;

            // Stable fibre of x in R₀.
            let mut fibre = Vec::new();
            for _ in 0..per_sample {
                let t = rng.gen_range(host0.s_range[0]..=host0.s_range[1]);
                let y = geo.offset(host0.centre, [t, ex[1]]);
                match partition.classify(cover, s0, y) {
                    Membership::Cell(c) if c == r0 => fibre.push(y),
                    Membership::Ambiguous => rep.excluded += 1,
                    _ => {}
                }
            }
            for &y in &fibre {
                rep.fibre_points += 1;
                let (_, hy) = flow_step(section, geo, s0, y, Direction::Forward)?;
                let drift = geo.rel(hy, hx)[1].abs();
                rep.max_drift = rep.max_drift.max(drift);
                let same = matches!(partition.classify(cover, s1, hy), Membership::Cell(c) if c == r1);
                if !same || drift > tol {
                    rep.stable_violations += 1;
                }
                let d0 = geo.rel(y, x.point)[0].abs();
                if d0 > 1e-6 {
                    let (_, a) = geo.step(s0, y, rate_steps);
                    let (_, b) = geo.step(s0, x.point, rate_steps);
                    let dn = geo.rel(a, b)[0].abs();
                    rep.stable_rate = rep.stable_rate.max((dn / d0).powf(1.0 / rate_steps as f64));
                }
            }

            // Unstable fibre of H(x) in R₁, pulled back.
            let hosts1 = MarkovCover::signature_hosts(&partition.cells[r1].signature);
            let h1 = hosts1[0];
            let host1 = &cover.hosts[h1];
            let e1 = cover.locate_in(h1, hx).0.expect("image in its host");
            let mut fibre = Vec::new();
            for _ in 0..per_sample {
                let t = rng.gen_range(host1.u_range[0]..=host1.u_range[1]);
                let y = geo.offset(host1.centre, [e1[0], t]);
                match partition.classify(cover, s1, y) {
                    Membership::Cell(c) if c == r1 => fibre.push(y),
                    Membership::Ambiguous => rep.excluded += 1,
                    _ => {}
                }
            }
            for &y in &fibre {
                rep.fibre_points += 1;
                let (_, gy) = flow_step(section, geo, s1, y, Direction::Backward)?;
                let drift = geo.rel(gy, x.point)[0].abs();
                rep.max_drift = rep.max_drift.max(drift);
                let same = matches!(partition.classify(cover, s0, gy), Membership::Cell(c) if c == r0);
                if !same || drift > tol {
                    rep.unstable_violations += 1;
                }
                let d0 = geo.rel(y, hx)[1].abs();
                if d0 > 1e-6 {
                    let (_, a) = geo.step(s1, y, -rate_steps);
                    let (_, b) = geo.step(s1, hx, -rate_steps);
                    let dn = geo.rel(a, b)[1].abs();
                    rep.unstable_rate = rep.unstable_rate.max((dn / d0).powf(1.0 / rate_steps as f64));
                }
            }

            // Product structure: [x, y] for y in R₀ on the same host stays in R₀.
            let other = &cover.rectangles[ri].samples;
            for y in other.iter().take(4) {
                if !matches!(partition.classify(cover, s0, y.point), Membership::Cell(c) if c == r0) {
                    continue;
                }
                let ey = cover.locate_in(h0, y.point).0.expect("sample in its host");
                let z = geo.offset(host0.centre, [ey[0], ex[1]]);
                match partition.classify(cover, s0, z) {
                    Membership::Cell(c) => {
                        rep.product_checks += 1;
                        if c != r0 {
                            rep.product_violations += 1;
                        }
                    }
                    Membership::Ambiguous => rep.excluded += 1,
                    Membership::Outside => {
                        rep.product_checks += 1;
                        rep.product_violations += 1;
                    }
                }
            }
            let xx = geo.offset(host0.centre, [ex[0], ex[1]]);
            rep.bracket_identity_error = geo.rel(xx, x.point)[0].abs().max(geo.rel(xx, x.point)[1].abs());
            Ok(rep)
        })
        .collect();
    let mut total = MarkovReport::default();
    for r in partial {
        let r = r?;
        total.fibre_points += r.fibre_points;
        total.stable_violations += r.stable_violations;
        total.unstable_violations += r.unstable_violations;
        total.excluded += r.excluded;
        total.max_drift = total.max_drift.max(r.max_drift);
        total.flow_error = total.flow_error.max(r.flow_error);
        total.product_checks += r.product_checks;
        total.product_violations += r.product_violations;
        total.bracket_identity_error = total.bracket_identity_error.max(r.bracket_identity_error);
        total.stable_rate = total.stable_rate.max(r.stable_rate);
        total.unstable_rate = total.unstable_rate.max(r.unstable_rate);
    }
    Ok(total)
}

/// Affiliation data: `R ∼ S` iff some `Z ⊃ R`, `Z' ⊃ S` have `Z' ∈ 𝔍_Z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affiliation {
    /// `𝔍_Z` per host (including `Z`).
    pub j: Vec<BTreeSet<usize>>,
    /// `N(R)` per cell.
    pub n: Vec<usize>,
    /// Affiliated cells per cell.
    pub related: Vec<Vec<usize>>,
}

impl Affiliation {
    pub fn affiliated(&self, r: usize, s: usize) -> bool {
        self.related[r].binary_search(&s).is_ok()
    }
}

pub fn affiliation(cover: &MarkovCover, partition: &MarkovPartition) -> Affiliation {
    let j: Vec<BTreeSet<usize>> = (0..cover.hosts.len())
        .map(|h| {
            let mut s: BTreeSet<usize> = cover.neighbours[h].iter().map(|n| n.host).collect();
            s.insert(h);
            s
        })
        .collect();
    let mut host_cells = vec![Vec::new(); cover.hosts.len()];
    for (i, c) in partition.cells.iter().enumerate() {
        for &h in &c.hosts {
            host_cells[h].push(i);
        }
    }
    let rows: Vec<(Vec<usize>, usize)> = partition
        .cells
        .par_iter()
        .map(|c| {
            let targets: BTreeSet<usize> = c.hosts.iter().flat_map(|&h| j[h].iter().copied()).collect();
            let mut related = BTreeSet::new();
            for &h in &targets {
                related.extend(host_cells[h].iter().copied());
            }
            let n = related.iter().map(|&s| partition.cells[s].hosts.len()).sum();
            (related.into_iter().collect(), n)
        })
        .collect();
    let (related, n) = rows.into_iter().unzip();
    Affiliation { j, n, related }
}

/// Itinerary of `p` under `H` with return times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondCoding {
    pub slice: usize,
    pub point: Flat,
    pub window: usize,
    pub word: Vec<usize>,
    pub roof: Vec<f64>,
    /// `π̂` of the word: centre of the cylinder through `p`.
    pub reconstruction: Flat,
    pub error: f64,
    pub diameter: f64,
}

/// Cells of `H^n(p)`, `|n| ≤ window`, by the linear model; `None` if any is not a cell.
pub fn itinerary(cover: &MarkovCover, partition: &MarkovPartition, s: usize, p: Flat, window: usize) -> Option<Vec<usize>> {
    let n = window as i64;
    (-n..=n)
        .map(|j| {
            let (s2, q) = cover.geometry.step(s, p, j);
            let (sig, _) = cover.signature(s2, q, partition.depth);
            partition.lookup(s2, &sig)
        })
        .collect()
}

fn matches_word(cover: &MarkovCover, partition: &MarkovPartition, s: usize, p: Flat, word: &[usize]) -> bool {
    let n = (word.len() / 2) as i64;
    // Centre outwards, so points outside fail early.
    let order = (0..=n).flat_map(|j| if j == 0 { vec![0] } else { vec![j, -j] });
    for j in order {
        let (s2, q) = cover.geometry.step(s, p, j);
        let (sig, _) = cover.signature(s2, q, partition.depth);
        if partition.lookup(s2, &sig) != Some(word[(j + n) as usize]) {
            return false;
        }
    }
    true
}

/// Extent of the cylinder along direction `dir` (0 stable, 1 unstable) from `p`.
fn extent(cover: &MarkovCover, partition: &MarkovPartition, s: usize, p: Flat, word: &[usize], dir: usize, sign: f64) -> f64 {
    let geo = &cover.geometry;
    let at = |t: f64| {
        let mut e = [0.0, 0.0];
        e[dir] = sign * t;
        geo.offset(p, e)
    };
    let mut lo = 0.0;
    let mut hi = 1e-13;
    while hi < 1.0 && matches_word(cover, partition, s, at(hi), word) {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if matches_word(cover, partition, s, at(mid), word) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    lo
}

/// Second coding of `p` on slice `s`: itinerary, return times and the reconstruction `π̂`
/// from the depth-`window` cylinder.
pub fn second_coding(
    cover: &MarkovCover,
    partition: &MarkovPartition,
    section: &ProperSection,
    s: usize,
    p: Flat,
    window: usize,
) -> Result<SecondCoding> {
    let word = itinerary(cover, partition, s, p, window)
        .ok_or_else(|| Error::Cover("itinerary leaves the cover".into()))?;
    let geo = &cover.geometry;
    let mut roof = Vec::with_capacity(word.len());
    let n = window as i64;
    for j in -n..=n {
        let (s2, q) = geo.step(s, p, j);
        let (_, t) = section.poincare_return(&geo.point(s2, q), Direction::Forward)?;
        roof.push(t);
    }
    let sp = extent(cover, partition, s, p, &word, 0, 1.0);
    let sm = extent(cover, partition, s, p, &word, 0, -1.0);
    let up = extent(cover, partition, s, p, &word, 1, 1.0);
    let um = extent(cover, partition, s, p, &word, 1, -1.0);
    let shift = [0.5 * (sp - sm), 0.5 * (up - um)];
    let reconstruction = geo.offset(p, shift);
    Ok(SecondCoding {
        slice: s,
        point: p,
        window,
        roof,
        reconstruction,
        error: shift[0].hypot(shift[1]),
        diameter: (sp + sm).hypot(up + um),
        word,
    })
}

/// `|π̂(σ̂ w) − φ^{r̂}(π̂(w))|` for the window of `p`.
pub fn equivariance_error(
    cover: &MarkovCover,
    partition: &MarkovPartition,
    section: &ProperSection,
    s: usize,
    p: Flat,
    window: usize,
) -> Result<f64> {
    let here = second_coding(cover, partition, section, s, p, window)?;
    let (s1, hp) = flow_step(section, &cover.geometry, s, p, Direction::Forward)?;
    let there = second_coding(cover, partition, section, s1, hp, window)?;
    let (_, image) = flow_step(section, &cover.geometry, s, here.reconstruction, Direction::Forward)?;
    let d = cover.geometry.rel(image, there.reconstruction);
    Ok(d[0].hypot(d[1]))
}

/// Preimage multiplicity of one point against `N(R)·N(S)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multiplicity {
    pub words: usize,
    pub bound: usize,
    /// Pairs of words with coinciding projections whose zeroth cells are not affiliated.
    pub bowen_failures: usize,
}

/// Distinct itineraries realised within `radius` of `p` (a `3×3` stencil in eigen coordinates),
/// checked against `N(R)N(S)` with `R`, `S` cells recurring forwards and backwards.
pub fn preimage_multiplicity(
    cover: &MarkovCover,
    partition: &MarkovPartition,
    aff: &Affiliation,
    s: usize,
    p: Flat,
    window: usize,
    radius: f64,
) -> Option<Multiplicity> {
    let geo = &cover.geometry;
    let mut words = BTreeSet::new();
    for i in -1..=1 {
        for j in -1..=1 {
            let q = geo.offset(p, [i as f64 * radius, j as f64 * radius]);
            if let Some(w) = itinerary(cover, partition, s, q, window) {
                words.insert(w);
            }
        }
    }
    let recurring = |w: &[usize]| -> Option<usize> {
        let mut seen = BTreeSet::new();
        w.iter().find(|c| !seen.insert(**c)).copied()
    };
    let mut bound = 0;
    for w in &words {
        let r = recurring(&w[window..])?;
        let mut back = w[..=window].to_vec();
        back.reverse();
        let s = recurring(&back)?;
        bound = bound.max(aff.n[r] * aff.n[s]);
    }
    let zeros: Vec<usize> = words.iter().map(|w| w[window]).collect();
    let mut bowen_failures = 0;
    for a in &zeros {
        for b in &zeros {
            if !aff.affiliated(*a, *b) {
                bowen_failures += 1;
            }
        }
    }
    Some(Multiplicity { words: words.len(), bound, bowen_failures })
}

/// Suspension entropy of the largest irreducible component of the partition shift.
pub fn coding_entropy(partition: &MarkovPartition) -> Result<(usize, f64)> {
    let shift = partition.shift();
    let comps = scc_decompose(&shift);
    let c = comps.first().ok_or_else(|| Error::Cover("partition graph has no cycle".into()))?;
    let roof: Vec<f64> = c.vertices.iter().map(|&v| partition.roof[v]).collect();
    Ok((c.vertices.len(), suspension_entropy(&c.shift, &roof)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{ScaleProfile, SliceFrames};
    use crate::gpo::{build_gpo_graph, coarse_grain, sample_orbit, GpoContext, Snapper};
    use crate::hyperbolicity::HyperbolicityParams;
    use crate::manifolds::{shadow, Seeds};
    use crate::models::{MappingTorusModel, SpeedScale};
    use crate::sections::{build_proper_section, local_distance};
    use std::sync::{Arc, OnceLock};

    struct Fixture {
        ctx: GpoContext,
        net: NetDesign,
        graph: GpoGraph,
        cover: MarkovCover,
        partition: MarkovPartition,
    }

    fn graph(ctx: &GpoContext, net: &NetDesign, orbits: usize) -> GpoGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let orbits: Vec<_> = (0..orbits)
            .map(|i| {
                let x = DVector::from_vec(vec![rng.gen::<f64>(), rng.gen::<f64>(), 0.0]);
                sample_orbit(ctx.section(), &x, 70, 70, i).unwrap()
            })
            .collect();
        let alphabet = coarse_grain(ctx, &orbits, &Snapper::Net(net.clone()), 60).unwrap();
        build_gpo_graph(ctx, alphabet).unwrap()
    }

    fn orbit_points(n: usize, k: usize) -> Vec<(usize, Flat)> {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        (0..n).map(|_| (rng.gen_range(0..k), [rng.gen(), rng.gen()])).collect()
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let model = MappingTorusModel::cat(1.0, SpeedScale::Auto).unwrap();
            let (sec, _) = build_proper_section(&model, 0.1).unwrap();
            let params = HyperbolicityParams { simpson_step: 5e-3, ..Default::default() };
            let frames = Arc::new(SliceFrames::build(&sec, &params).unwrap());
            let ctx = GpoContext::new(frames, ScaleProfile::Desk { q_scale: 1.5, overlap: 0.2, am1: 0.7 });
            let net = NetDesign::new(ctx.model(), 4).unwrap();
            let graph = graph(&ctx, &net, 24);
            let samples = shadow_samples(&graph, &net, ctx.section(), 4, 400, 5).unwrap();
            let pts = orbit_points(300, ctx.section().slice_count());
            let cover = build_cover(&graph, &net, ctx.section(), samples, &pts).unwrap();
            let partition = refine(&cover, ctx.section(), 1, 1e-7).unwrap();
            Fixture { ctx, net, graph, cover, partition }
        })
    }

    #[test]
    fn geometry_round_trips() {
        let f = fixture();
        let geo = &f.cover.geometry;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = [rng.gen::<f64>(), rng.gen::<f64>()];
            let q = geo.apply(geo.apply(p, 3), -3);
            let d = geo.rel(q, p);
            assert!(d[0].abs() < 1e-12 && d[1].abs() < 1e-12);
            let e = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let back = geo.eig(geo.flat(e));
            assert!((back[0] - e[0]).abs() < 1e-15 && (back[1] - e[1]).abs() < 1e-15);
        }
        // A acts as diag(1/λ, λ) in eigen coordinates.
        let e = geo.eig(geo.flat([0.01, 0.002]));
        let img = geo.rel(geo.apply(geo.offset([0.3, 0.3], e), 1), geo.apply([0.3, 0.3], 1));
        assert!((img[0] - 0.01 / geo.lambda).abs() < 1e-12);
        assert!((img[1] - 0.002 * geo.lambda).abs() < 1e-12);
        assert_eq!(geo.reach, 2);
    }

    #[test]
    fn full_graph_hulls_are_the_net_boxes() {
        let f = fixture();
        assert_eq!(f.cover.hosts.len(), f.cover.geometry.k * f.net.m * f.net.m);
        for h in &f.cover.hosts {
            assert!((h.s_range[0] + f.net.s_half).abs() < 1e-12 && (h.s_range[1] - f.net.s_half).abs() < 1e-12);
            assert!((h.u_range[0] + f.net.u_half).abs() < 1e-12 && (h.u_range[1] - f.net.u_half).abs() < 1e-12);
        }
    }

    #[test]
    fn shadows_follow_their_windows() {
        let f = fixture();
        let geo = &f.cover.geometry;
        for r in f.cover.rectangles.iter().step_by(7) {
            let x = &r.samples[0];
            for j in -200i64..=200 {
                let v = x.path[(x.zero as i64 + j) as usize];
                let host = f.cover.host_of_vertex(v);
                let (s, q) = geo.step(f.cover.host_of_vertex(r.vertex).slice, x.point, j);
                assert_eq!(s, host.slice);
                let e = geo.rel(q, host.centre);
                assert!(e[0].abs() <= host.s_range[1] + 1e-9 && e[1].abs() <= host.u_range[1] + 1e-9);
            }
        }
    }

    #[test]
    fn closed_form_matches_chart_shadowing() {
        let f = fixture();
        for r in f.cover.rectangles.iter().step_by(97).take(2) {
            let x = &r.samples[0];
            let path: Vec<_> = x.path.iter().map(|&v| f.graph.symbol(v).chart.clone()).collect();
            let sh = shadow(f.ctx.section(), &path, Seeds { perturb: 0.0 }, &f.ctx.profile, 1.0).unwrap();
            let p = f.cover.geometry.point(f.cover.host_of_vertex(r.vertex).slice, x.point);
            assert!(local_distance(f.ctx.model(), &sh.point, &p) < 1e-8);
        }
    }

    #[test]
    fn cover_properties() {
        let f = fixture();
        let r = &f.cover.report;
        assert_eq!(r.hull_escapes, 0);
        assert_eq!(r.uncovered, 0);
        assert!(r.min_return > 0.0 && r.max_return < 0.1);
        assert!(r.bracket_checks > 1000 && r.bracket_error < 1e-12 && r.bracket_escapes == 0);
        assert!(r.symbolic_checks > 1000 && r.symbolic_violations == 0 && r.symbolic_error < 1e-6);
        assert!(r.local_finiteness <= r.local_finiteness_bound);
        assert!(r.holonomy_checks > 0 && r.holonomy_error < 1e-6, "{r:?}");
    }

    #[test]
    fn refinement_partitions_the_samples() {
        let f = fixture();
        let p = &f.partition;
        let rep = &p.report;
        assert_eq!(rep.missing_images, 0);
        assert_eq!(rep.cell_bound_violations, 0);
        assert_eq!(rep.esu_mismatches, 0);
        assert!(rep.max_degree > 0 && rep.max_degree < 10);
        assert_eq!(rep.classified + rep.excluded, f.cover.report.samples);
        // Every representative classifies to its own cell, and no two cells share a signature.
        let mut seen = BTreeSet::new();
        for (i, c) in p.cells.iter().enumerate() {
            assert!(seen.insert((c.slice, c.signature.clone())));
            assert_eq!(p.classify(&f.cover, c.slice, c.representative), Membership::Cell(i));
            assert!(!c.hosts.is_empty());
        }
        // Samples lie in a cell whose hosts include their rectangle's host.
        for (r, cells) in f.cover.rectangles.iter().zip(&p.sample_cells) {
            for c in cells.iter().flatten() {
                assert!(p.cells[*c].hosts.contains(&r.host));
            }
        }
        assert!(matches!(refine(&f.cover, f.ctx.section(), 0, 1e-7), Err(Error::Input(_))));
        assert_eq!(measured_depth(&f.cover), 1);
    }

    #[test]
    fn geometrical_markov_property() {
        let f = fixture();
        let rep = check_markov(&f.cover, &f.partition, f.ctx.section(), 4, 3).unwrap();
        assert!(rep.fibre_points >= 1000, "{rep:?}");
        assert_eq!(rep.violations(), 0, "{rep:?}");
        assert!(rep.product_checks > 100);
        assert!(rep.bracket_identity_error < 1e-12);
        assert!(rep.stable_rate < 1.0 && rep.unstable_rate < 1.0);
        assert!(rep.flow_error < 1e-9);
    }

    #[test]
    fn coding_entropy_matches_the_model() {
        let f = fixture();
        let (size, h) = coding_entropy(&f.partition).unwrap();
        assert!(size > 0);
        let target = ((3.0 + 5f64.sqrt()) / 2.0).ln();
        assert!((h - target).abs() < 1e-6, "{h}");
    }

    #[test]
    fn affiliation_and_finite_to_one() {
        let f = fixture();
        let aff = affiliation(&f.cover, &f.partition);
        for r in 0..f.partition.len() {
            assert!(aff.affiliated(r, r));
            assert!(aff.n[r] > 0);
        }
        for n in [3usize, 4] {
            for i in 0..n {
                for j in 0..n {
                    let p = [i as f64 / n as f64, j as f64 / n as f64];
                    let m = preimage_multiplicity(&f.cover, &f.partition, &aff, 5, p, 100, 1e-7).unwrap();
                    assert!(m.words >= 1 && m.words <= m.bound);
                    assert_eq!(m.bowen_failures, 0);
                }
            }
        }
    }

    #[test]
    fn second_coding_reconstructs() {
        let f = fixture();
        let spacing = f.ctx.section().return_time;
        let oracle = 1.0 / f.cover.geometry.k as f64;
        assert!((spacing - oracle).abs() < 1e-12);
        for &(s, p) in orbit_points(3, f.cover.geometry.k).iter() {
            let mut last = f64::INFINITY;
            for w in [10usize, 60, 200] {
                let c = second_coding(&f.cover, &f.partition, f.ctx.section(), s, p, w).unwrap();
                assert!(c.roof.iter().all(|r| (r - oracle).abs() < 1e-12 && *r < 0.1));
                assert!(c.error <= c.diameter);
                assert!(c.diameter < last);
                last = c.diameter;
            }
            let e = equivariance_error(&f.cover, &f.partition, f.ctx.section(), s, p, 300).unwrap();
            assert!(e < 1e-6, "{e}");
        }
    }

    #[test]
    fn entropy_grows_with_the_alphabet() {
        let f = fixture();
        let mut last = 0.0;
        for orbits in [1usize, 2, 6] {
            let g = graph(&f.ctx, &f.net, orbits);
            let samples = shadow_samples(&g, &f.net, f.ctx.section(), 2, 200, 5).unwrap();
            let cover = build_cover(&g, &f.net, f.ctx.section(), samples, &[]).unwrap();
            let part = refine(&cover, f.ctx.section(), 1, 1e-7).unwrap();
            let (_, h) = coding_entropy(&part).unwrap();
            assert!(h >= last - 1e-12, "{h} < {last}");
            last = h;
        }
        assert!(last <= coding_entropy(&f.partition).unwrap().1 + 1e-12);
    }
}
