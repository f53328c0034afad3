//! Invariant suites, one per acceptance criterion.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use symflow_core::charts::{DoubleChart, ScaleProfile};
use symflow_core::gpo::{coarse_grain, sample_orbit, OrbitSample, Snapper};
use symflow_core::hyperbolicity::{
    estimate_splitting, finite_time_exponents, greedy_p, lyapunov_frame, q_parameters, reduction_blocks, PesinFrame,
};
use symflow_core::linalg::spectral_norm;
use symflow_core::manifolds::{graph_transform, path_transitions, shadow, AdmissibleManifold, Kind, Seeds, DEFAULT_NODES};
use symflow_core::markov::{affiliation, check_markov, preimage_multiplicity};
use symflow_core::models::{join, FlowModel, MappingTorusModel, Point};
use symflow_core::sections::{build_proper_section, local_distance, LinearPoincareCocycle};
use symflow_core::symbolic::scc_decompose;
use symflow_core::Result;

use crate::pipeline::{alphabet_of, cover_stage, entropy_stage, graph_stage, refine_stage, rng, shadow_stage, GraphStage, State};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub samples: usize,
    pub violations: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl SuiteResult {
    fn new(id: u8, name: &str) -> Self {
        Self { id, name: name.into(), passed: false, samples: 0, violations: 0, metrics: BTreeMap::new() }
    }

    fn metric(&mut self, key: &str, v: f64) {
        self.metrics.insert(key.into(), v);
    }

    /// One line for tables: `PASS`/`FAIL`, id, name and metrics.
    pub fn line(&self) -> String {
        let m: Vec<String> = self.metrics.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
        format!(
            "{} {} {} samples={} violations={} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.samples,
            self.violations,
            m.join(" ")
        )
    }
}

pub const NAMES: [&str; 9] = [
    "exponent-recovery",
    "reduction-bounds",
    "greedy-equivalence",
    "graph-transform-contraction",
    "shadowing-fidelity",
    "markov-property",
    "entropy",
    "finite-to-one",
    "sanity-identities",
];

/// Runs the enabled suites in order.
pub fn run_suites(state: &State) -> Result<Vec<SuiteResult>> {
    let enabled = &state.config.suites.enabled;
    let frames = if enabled.contains(&2) || enabled.contains(&9) { Some(FrameSamples::build(state)?) } else { None };
    let mut out = Vec::new();
    for id in 1..=9u8 {
        if !enabled.contains(&id) {
            continue;
        }
        let r = match id {
            1 => exponents(state)?,
            2 => reductions(state, frames.as_ref().expect("frames sampled"))?,
            3 => greedy(state)?,
            4 => contraction(state)?,
            5 => shadowing(state)?,
            6 => markov(state)?,
            7 => entropy(state)?,
            8 => finite_to_one(state)?,
            _ => sanity(state, frames.as_ref().expect("frames sampled"))?,
        };
        out.push(r);
    }
    Ok(out)
}

/// Eigenvalue moduli of an integer matrix, as the oracle for exponents.
fn log_spectrum(matrix: &[Vec<i64>]) -> Vec<f64> {
    let n = matrix.len();
    let m = DMatrix::from_fn(n, n, |i, j| matrix[i][j] as f64);
    let mut ev: Vec<f64> = m.complex_eigenvalues().iter().map(|z| z.norm().ln()).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn block_sum(a: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let n = a.len();
    (0..2 * n)
        .map(|i| (0..2 * n).map(|j| if i / n == j / n { a[i % n][j % n] } else { 0 }).collect())
        .collect()
}

fn exponents(state: &State) -> Result<SuiteResult> {
    let cfg = state.config;
    let mut r = SuiteResult::new(1, NAMES[0]);
    let mut rnd = rng(cfg, 11);
    let tol = cfg.tolerances.exponents;
    let mut worst: f64 = 0.0;
    for (label, matrix) in [("base", cfg.model.matrix.clone()), ("product", block_sum(&cfg.model.matrix))] {
        let model = MappingTorusModel::new(matrix.clone(), cfg.model.roof, cfg.model.speed)?;
        let (section, _) = build_proper_section(&model, cfg.hyperbolicity.rho)?;
        let horizon = 50.0 * section.return_time;
        let scale = model.speed_scale() / model.roof();
        let oracle: Vec<f64> = log_spectrum(&matrix).iter().map(|l| scale * l).collect();
        let coc = LinearPoincareCocycle::new(Arc::new(model.clone()));
        let mut dev: f64 = 0.0;
        for _ in 0..10 {
            let d = model.torus_dim();
            let x = join(&DVector::from_fn(d, |_, _| rnd.gen::<f64>()), rnd.gen::<f64>() * model.roof());
            let ex = finite_time_exponents(&coc, &x, horizon)?;
            let e = ex.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            dev = dev.max(e);
            r.samples += 1;
            if e >= tol || ex.len() != oracle.len() {
                r.violations += 1;
            }
        }
        r.metric(&format!("{label}_deviation"), dev);
        worst = worst.max(dev);
    }
    r.metric("tolerance", tol);
    r.passed = r.violations == 0 && worst < tol;
    Ok(r)
}

/// Frames at orbit points `x` and at `φ^t x` for shared random times, cached by height since the
/// frame of a mapping torus depends on the height only.
pub struct FrameSamples {
    pub points: Vec<(Point, usize)>,
    pub times: Vec<f64>,
    pub frames: BTreeMap<u64, Arc<PesinFrame>>,
}

impl FrameSamples {
    fn build(state: &State) -> Result<Self> {
        let cfg = state.config;
        let mut rnd = rng(cfg, 12);
        let orbits = &state.orbit.orbits;
        let section = &state.rt.section;
        let points: Vec<(Point, usize)> = (0..100)
            .map(|_| {
                let o = &orbits[rnd.gen_range(0..orbits.len())];
                let p = o.points[rnd.gen_range(0..o.len())].clone();
                let s = section.disc_of(&p).expect("orbit points lie on the section");
                (p, s)
            })
            .collect();
        let rho = cfg.hyperbolicity.rho;
        let times: Vec<f64> = (0..20).map(|_| rnd.gen_range(0.0..2.0 * rho)).collect();
        let model = &state.rt.model;
        let d = model.torus_dim();
        let mut heights = BTreeMap::new();
        for (p, _) in &points {
            for &t in &times {
                let y = model.flow_at(p, t)?;
                heights.entry(y[d].to_bits()).or_insert(y);
            }
        }
        let coc = LinearPoincareCocycle::new(Arc::new(model.clone()));
        let params = cfg.params();
        let computed: Vec<(u64, Arc<PesinFrame>)> = heights
            .into_par_iter()
            .map(|(k, y)| {
                let sp = estimate_splitting(&coc, &y, params.horizon, params.chi)?;
                Ok((k, Arc::new(lyapunov_frame(&coc, &y, &sp, &params)?)))
            })
            .collect::<Result<_>>()?;
        let mut frames: BTreeMap<u64, Arc<PesinFrame>> = computed.into_iter().collect();
        for (p, s) in &points {
            frames.insert(p[d].to_bits(), state.rt.ctx.frames.frames[*s].clone());
        }
        Ok(Self { points, times, frames })
    }

    fn at(&self, x: &Point) -> &PesinFrame {
        &self.frames[&x[x.len() - 1].to_bits()]
    }
}

fn unit(rnd: &mut impl Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rnd.gen_range(-1.0..1.0));
        let norm = v.norm();
        if norm > 1e-3 && norm <= 1.0 {
            return v / norm;
        }
    }
}

fn reductions(state: &State, fs: &FrameSamples) -> Result<SuiteResult> {
    let cfg = state.config;
    let mut r = SuiteResult::new(2, NAMES[1]);
    let (chi, rho) = (cfg.hyperbolicity.chi, cfg.hyperbolicity.rho);
    let model = &state.rt.model;
    let coc = LinearPoincareCocycle::new(Arc::new(model.clone()));
    let mut rnd = rng(cfg, 13);
    let mut off: f64 = 0.0;
    for (x, _) in &fs.points {
        for &t in &fs.times {
            let y = model.flow_at(x, t)?;
            let phi = coc.linear_poincare(x, t)?;
            let red = reduction_blocks(fs.at(x), fs.at(&y), &phi);
            off = off.max(red.off_block);
            let mut bad = red.off_block >= 1e-6;
            for _ in 0..20 {
                if red.d_s.ncols() > 0 {
                    let n = (&red.d_s * unit(&mut rnd, red.d_s.ncols())).norm();
                    bad |= !((-4.0 * rho).exp() < n && n < (-chi * t).exp());
                }
                if red.d_u.ncols() > 0 {
                    let n = (&red.d_u * unit(&mut rnd, red.d_u.ncols())).norm();
                    bad |= !((chi * t).exp() < n && n < (4.0 * rho).exp());
                }
            }
            r.samples += 1;
            r.violations += bad as usize;
        }
    }
    r.metric("max_off_block", off);
    r.metric("frames", fs.frames.len() as f64);
    r.passed = r.violations == 0 && r.samples >= 2000;
    Ok(r)
}

fn greedy(state: &State) -> Result<SuiteResult> {
    let cfg = state.config;
    let mut r = SuiteResult::new(3, NAMES[2]);
    let mut rnd = rng(cfg, 14);
    let eps = cfg.hyperbolicity.eps;
    let rt = state.rt.section.return_time;
    let orbits: Vec<&OrbitSample> = state.orbit.orbits.iter().filter(|o| o.len() >= 50).collect();
    let mut dev: f64 = 0.0;
    for _ in 0..100 {
        let o = orbits[rnd.gen_range(0..orbits.len())];
        let start = rnd.gen_range(0..=o.len() - 50);
        let times = &o.times[start..start + 50];
        let q: Vec<f64> = (start..start + 50).map(|i| state.rt.ctx.big_q(o.slices[i])).collect();
        let (ps, pu) = greedy_p(times, &q, eps, rt, rt)?;
        for n in 0..50 {
            let bs = (n..50).map(|m| (eps * (times[m] - times[n])).exp() * eps * q[m]).fold(f64::INFINITY, f64::min);
            let bu = (0..=n).map(|m| (eps * (times[n] - times[m])).exp() * eps * q[m]).fold(f64::INFINITY, f64::min);
            dev = dev.max((ps[n] - bs).abs()).max((pu[n] - bu).abs());
        }
        r.samples += 1;
    }
    r.violations = (dev >= 1e-12) as usize;
    r.metric("max_deviation", dev);
    r.passed = r.violations == 0;
    Ok(r)
}

/// A random admissible graph: offset, slope and curvature drawn inside (AM1)–(AM3).
fn random_admissible(chart: &DoubleChart, profile: &ScaleProfile, beta: f64, rnd: &mut impl Rng) -> AdmissibleManifold {
    let eta = chart.eta();
    let fibre = chart.chart.d_u();
    let base = chart.chart.d_s;
    loop {
        let a = rnd.gen_range(-0.5..0.5) * profile.am1() * eta;
        let b = rnd.gen_range(-0.4..0.4) * eta.powf(beta / 3.0) / (base as f64).sqrt();
        let k = rnd.gen_range(-0.1..0.1);
        let m = AdmissibleManifold::from_fn(chart.clone(), Kind::Stable, DEFAULT_NODES, |t| {
            let s: f64 = t.iter().sum();
            DVector::from_element(fibre, a + b * s + 0.5 * k * s * s)
        });
        if m.admissibility(profile, beta).holds() {
            return m;
        }
    }
}

fn contraction(state: &State) -> Result<SuiteResult> {
    let cfg = state.config;
    let mut r = SuiteResult::new(4, NAMES[3]);
    let mut rnd = rng(cfg, 15);
    let g = &state.graph.graph;
    let profile = &state.rt.ctx.profile;
    let beta = cfg.model.beta;
    let edges: Vec<(usize, usize)> = (0..g.vertex_count()).flat_map(|a| g.edges[a].iter().map(move |&b| (a, b))).collect();
    let bound = (-cfg.hyperbolicity.chi * state.rt.section.return_time / 2.0).exp() + 1e-6;
    let mut worst: f64 = 0.0;
    let mut escaped = 0usize;
    for _ in 0..100 {
        let (a, b) = edges[rnd.gen_range(0..edges.len())];
        let (v, w) = (&g.symbol(a).chart, &g.symbol(b).chart);
        let tr = path_transitions(&state.rt.section, &[v.clone(), w.clone()])?;
        let m1 = random_admissible(w, profile, beta, &mut rnd);
        let m2 = random_admissible(w, profile, beta, &mut rnd);
        let f1 = graph_transform(&tr[0], &m1, v, profile, beta)?;
        let f2 = graph_transform(&tr[0], &m2, v, profile, beta)?;
        // Stable coordinates at which the transform read the input graphs.
        let ds = v.chart.d_s;
        let mut read = Vec::new();
        for f in [&f1, &f2] {
            for (t, u) in f.grid().iter().zip(&f.values) {
                let mut z = DVector::zeros(t.len() + u.len());
                z.rows_mut(0, ds).copy_from(t);
                z.rows_mut(ds, u.len()).copy_from(u);
                read.push(tr[0].apply(&z).rows(0, ds).into_owned());
            }
        }
        let outside = read.iter().filter(|y| y.amax() > m1.radius).count();
        escaped += (outside > 0) as usize;
        let d0 = read.iter().map(|y| (m1.eval(y) - m2.eval(y)).norm()).fold(m1.d_c0(&m2), f64::max);
        if d0 == 0.0 {
            continue;
        }
        let factor = f1.d_c0(&f2) / d0;
        worst = worst.max(factor);
        r.samples += 1;
        r.violations += (factor > bound) as usize;
    }
    r.metric("max_factor", worst);
    r.metric("pairs_reading_outside_box", escaped as f64);
    r.metric("bound", bound);
    r.passed = r.violations == 0 && r.samples >= 100;
    Ok(r)
}

fn shadowing(state: &State) -> Result<SuiteResult> {
    let cfg = state.config;
    let mut r = SuiteResult::new(5, NAMES[4]);
    let rt = state.rt;
    let n = cfg.suites.shadow_window;
    let mut rnd = rng(cfg, 16);
    let d = rt.model.torus_dim();
    let orbits = (0..cfg.suites.shadow_orbits)
        .map(|i| {
            let mut x: Vec<f64> = (0..d).map(|_| rnd.gen::<f64>()).collect();
            x.push(rt.section.discs[rnd.gen_range(0..rt.section.slice_count())].height);
            sample_orbit(&rt.section, &DVector::from_vec(x), n + 20, n + 20, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let net = symflow_core::gpo::NetDesign::new(&rt.model, cfg.sampling.net)?;
    let alphabet = coarse_grain(&rt.ctx, &orbits, &Snapper::Net(net), n)?;
    let results: Vec<Result<(f64, f64, f64)>> = alphabet
        .codings
        .par_iter()
        .map(|coding| {
            let orbit = &orbits[coding.orbit];
            let start = orbit.origin as i64 + coding.first;
            let centre = orbit.origin as i64 - start;
            let path: Vec<DoubleChart> = coding.symbols.iter().map(|&i| alphabet.symbols[i].chart.clone()).collect();
            let half = centre.min(path.len() as i64 - 1 - centre).min(n as i64) as usize;
            let c = centre as usize;
            let window = &path[c - half..=c + half];
            let eta = window[half].eta();
            let a = shadow(&rt.section, window, Seeds { perturb: 0.0 }, &rt.ctx.profile, cfg.model.beta)?;
            let b = shadow(&rt.section, window, Seeds { perturb: 1.0 }, &rt.ctx.profile, cfg.model.beta)?;
            let dist = local_distance(&rt.model, &a.point, &orbit.points[orbit.origin]);
            Ok((dist / eta, local_distance(&rt.model, &a.point, &b.point), half as f64))
        })
        .collect();
    let (mut ratio, mut seed_gap, mut min_half): (f64, f64, f64) = (0.0, 0.0, f64::INFINITY);
    for res in results {
        let (q, gap, half) = res?;
        ratio = ratio.max(q);
        seed_gap = seed_gap.max(gap);
        min_half = min_half.min(half);
        r.samples += 1;
        r.violations += (q >= 1.0 / 50.0 || gap >= 1e-8) as usize;
    }
    r.metric("max_distance_over_eta", ratio);
    r.metric("max_seed_change", seed_gap);
    r.metric("min_half_window", min_half);
    r.passed = r.violations == 0 && r.samples == cfg.suites.shadow_orbits;
    Ok(r)
}

fn markov(state: &State) -> Result<SuiteResult> {
    let cfg = state.config;
    let mut r = SuiteResult::new(6, NAMES[5]);
    let rep = check_markov(
        &state.cover.cover,
        &state.refine.partition,
        &state.rt.section,
        cfg.sampling.fibre_samples,
        cfg.seed,
    )?;
    r.samples = rep.fibre_points;
    r.violations = rep.violations();
    r.metric("max_drift", rep.max_drift);
    r.metric("flow_error", rep.flow_error);
    r.metric("stable_rate", rep.stable_rate);
    r.metric("unstable_rate", rep.unstable_rate);
    r.metric("tolerance", cfg.tolerances.markov);
    r.passed = r.violations == 0 && r.samples >= 1000 && rep.max_drift <= cfg.tolerances.markov;
    Ok(r)
}

/// Coding entropy of the pipeline run on the first `n` orbits.
pub fn truncated_entropy(state: &State, n: usize) -> Result<f64> {
    let cfg = state.config;
    let alphabet = alphabet_of(cfg, state.rt, &state.orbit.orbits[..n])?;
    let graph: GraphStage = graph_stage(state.rt, &alphabet)?;
    let mut sh = shadow_stage(cfg, state.rt, &alphabet, &graph)?;
    sh.orbit_points.clear();
    let cover = cover_stage(state.rt, &alphabet, &graph, &sh)?;
    let refine = refine_stage(cfg, state.rt, &cover)?;
    // A shift without cycles carries no entropy.
    if scc_decompose(&refine.partition.shift()).is_empty() {
        return Ok(0.0);
    }
    Ok(entropy_stage(state.rt, &refine)?.entropy)
}

fn entropy(state: &State) -> Result<SuiteResult> {
    let cfg = state.config;
    let mut r = SuiteResult::new(7, NAMES[6]);
    let e = state.entropy;
    let mut series: Vec<f64> = Vec::new();
    for &n in &cfg.suites.truncations {
        series.push(truncated_entropy(state, n)?);
    }
    series.push(e.entropy);
    let drops = series.windows(2).filter(|w| w[1] < w[0] - 1e-12).count();
    r.samples = series.len();
    r.violations = drops + (e.relative_error > cfg.tolerances.entropy) as usize;
    for (i, h) in series.iter().enumerate() {
        r.metric(&format!("entropy_{i:02}"), *h);
    }
    r.metric("target", e.target);
    r.metric("relative_error", e.relative_error);
    r.passed = r.violations == 0;
    Ok(r)
}

fn finite_to_one(state: &State) -> Result<SuiteResult> {
    let mut r = SuiteResult::new(8, NAMES[7]);
    let cover = &state.cover.cover;
    let part = &state.refine.partition;
    let aff = affiliation(cover, part);
    let k = cover.geometry.k;
    let mut points = Vec::new();
    for n in [3usize, 4] {
        for i in 0..n {
            for j in 0..n {
                points.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
    }
    let mut skipped = 0;
    let (mut max_words, mut min_bound) = (0usize, usize::MAX);
    for s in [0, k / 4, k / 2] {
        for p in &points {
            match preimage_multiplicity(cover, part, &aff, s, *p, 100, 1e-7) {
                Some(m) => {
                    r.samples += 1;
                    r.violations += (m.words > m.bound || m.bowen_failures > 0 || m.words == 0) as usize;
                    max_words = max_words.max(m.words);
                    min_bound = min_bound.min(m.bound);
                }
                None => skipped += 1,
            }
        }
    }
    r.metric("max_words", max_words as f64);
    r.metric("min_bound", min_bound as f64);
    r.metric("skipped", skipped as f64);
    r.passed = r.violations == 0 && r.samples > 0;
    Ok(r)
}

fn sanity(state: &State, fs: &FrameSamples) -> Result<SuiteResult> {
    let cfg = state.config;
    let mut r = SuiteResult::new(9, NAMES[8]);
    let model = &state.rt.model;
    let coc = LinearPoincareCocycle::new(Arc::new(model.clone()));
    let rho = cfg.hyperbolicity.rho;
    let eps = cfg.hyperbolicity.eps;
    let d = model.torus_dim();
    let mut rnd = rng(cfg, 17);
    let (mut cocycle, mut norm_bad, mut cocycle_n) = (0.0f64, 0usize, 0usize);
    for _ in 0..1000 {
        let x = join(&DVector::from_fn(d, |_, _| rnd.gen::<f64>()), rnd.gen::<f64>() * model.roof());
        let t = rnd.gen_range(-2.0..2.0);
        let s = rnd.gen_range(-2.0..2.0);
        let y = model.flow_at(&x, t)?;
        let lhs = coc.linear_poincare(&x, s + t)?;
        let pt = coc.linear_poincare(&x, t)?;
        let rhs = coc.linear_poincare(&y, s)? * &pt;
        let e = (&lhs - rhs).amax() / lhs.amax();
        cocycle = cocycle.max(e);
        cocycle_n += 1;
        let n = spectral_norm(&pt);
        let b = (rho + t.abs()).exp();
        norm_bad += (n > b || n < 1.0 / b) as usize;
    }
    let cocycle_bad = (cocycle >= 1e-9) as usize;
    // q slow variation along the sampled orbits.
    let (mut q_n, mut q_bad) = (0usize, 0usize);
    for o in &state.orbit.orbits {
        let big_q: Vec<f64> = o.slices.iter().map(|&s| state.rt.ctx.big_q(s)).collect();
        let qp = q_parameters(&o.times, &big_q, eps)?;
        for i in 1..o.len() {
            let dt = (o.times[i] - o.times[i - 1]).abs();
            let bound = (eps * dt).exp() * (1.0 + 1e-12);
            for q in [&qp.q, &qp.q_s, &qp.q_u] {
                let ratio = q[i] / q[i - 1];
                q_bad += (ratio > bound || ratio < 1.0 / bound) as usize;
            }
            q_n += 1;
        }
    }
    // s(x), u(x) ≥ √2 at the sampled frames.
    let mut s_n = 0usize;
    let mut s_bad = 0usize;
    let mut s_min = f64::INFINITY;
    for (x, _) in &fs.points {
        for &t in &fs.times {
            let y = model.flow_at(x, t)?;
            let f = fs.at(&y);
            s_min = s_min.min(f.s_x).min(f.u_x);
            s_bad += (f.s_x < 2f64.sqrt() || f.u_x < 2f64.sqrt()) as usize;
            s_n += 1;
        }
    }
    r.samples = cocycle_n.min(q_n).min(s_n);
    r.violations = cocycle_bad + norm_bad + q_bad + s_bad;
    r.metric("cocycle_error", cocycle);
    r.metric("cocycle_samples", cocycle_n as f64);
    r.metric("norm_violations", norm_bad as f64);
    r.metric("q_samples", q_n as f64);
    r.metric("q_violations", q_bad as f64);
    r.metric("s_samples", s_n as f64);
    r.metric("s_min", s_min);
    r.passed = r.violations == 0 && r.samples >= 1000;
    Ok(r)
}
