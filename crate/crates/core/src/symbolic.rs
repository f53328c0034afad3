//! Topological Markov shifts and flows over finite graphs.
//!
//! Irreducible components, Perron–Frobenius data (Parry measure and entropy), finite
//! windows of sequences with their Birkhoff roof sums, and the Bowen–Walters distance on
//! the suspension.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Directed graph whose bi-infinite paths form the shift space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicShift {
    pub labels: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
}

impl SymbolicShift {
    /// Duplicate edges are merged.
    pub fn new(labels: Vec<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let n = labels.len();
        let set: BTreeSet<(usize, usize)> = edges.into_iter().collect();
        if let Some(&(a, b)) = set.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::Input(format!("edge {a}->{b} outside {n} vertices")));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut successors = vec![Vec::new(); n];
        let mut predecessors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            successors[a].push(b);
            predecessors[b].push(a);
        }
        Ok(Self { labels, edges, successors, predecessors })
    }

    /// Vertices labelled by their index.
    pub fn from_adjacency(a: &DMatrix<u8>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Input("adjacency matrix must be square".into()));
        }
        let n = a.nrows();
        let edges = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| a[(i, j)] != 0);
        Self::new((0..n).map(|i| i.to_string()).collect(), edges.collect::<Vec<_>>())
    }

    pub fn full(k: usize) -> Self {
        Self::from_adjacency(&DMatrix::from_element(k, k, 1)).expect("square")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn successors(&self, v: usize) -> &[usize] {
        &self.successors[v]
    }

    pub fn predecessors(&self, v: usize) -> &[usize] {
        &self.predecessors[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.successors[a].binary_search(&b).is_ok()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.len()).map(|v| self.successors[v].len().max(self.predecessors[v].len())).max().unwrap_or(0)
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.len(), self.len());
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
        }
        a
    }

    /// Induced subgraph; vertex `i` of the result is `vertices[i]`.
    pub fn restrict(&self, vertices: &[usize]) -> Self {
        let index: BTreeMap<usize, usize> = vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|(a, b)| Some((*index.get(a)?, *index.get(b)?)))
            .collect::<Vec<_>>();
        Self::new(vertices.iter().map(|&v| self.labels[v].clone()).collect(), edges).expect("restricted edges")
    }

    /// Is the finite word a path in the graph?
    pub fn admits(&self, word: &[usize]) -> bool {
        word.iter().all(|&v| v < self.len()) && word.windows(2).all(|w| self.has_edge(w[0], w[1]))
    }

    pub fn is_irreducible(&self) -> bool {
        let comps = scc_decompose(self);
        comps.len() == 1 && comps[0].vertices.len() == self.len()
    }

    /// Number of paths with `n` edges, counted by dynamic programming.
    pub fn path_count(&self, n: usize) -> f64 {
        let mut counts = vec![1.0; self.len()];
        for _ in 0..n {
            let mut next = vec![0.0; self.len()];
            for &(a, b) in &self.edges {
                next[b] += counts[a];
            }
            counts = next;
        }
        counts.iter().sum()
    }
}

/// An irreducible component with its vertex indices in the parent graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub vertices: Vec<usize>,
    pub shift: SymbolicShift,
}

/// Strongly connected components that carry at least one internal edge, largest first.
pub fn scc_decompose(shift: &SymbolicShift) -> Vec<Component> {
    let mut g = DiGraph::<(), ()>::with_capacity(shift.len(), shift.edge_count());
    let nodes: Vec<_> = (0..shift.len()).map(|_| g.add_node(())).collect();
    for &(a, b) in &shift.edges {
        g.add_edge(nodes[a], nodes[b], ());
    }
    let mut comps: Vec<Component> = petgraph::algo::tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut v: Vec<usize> = c.into_iter().map(|n| n.index()).collect();
            v.sort_unstable();
            v
        })
        .filter(|v| v.len() > 1 || shift.has_edge(v[0], v[0]))
        .map(|vertices| Component { shift: shift.restrict(&vertices), vertices })
        .collect();
    comps.sort_by(|a, b| b.vertices.len().cmp(&a.vertices.len()).then(a.vertices.cmp(&b.vertices)));
    comps
}

/// Perron data of an irreducible graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParryMeasure {
    pub spectral_radius: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    /// Vertex weights `left_i·right_i`, normalised to sum 1.
    pub weights: Vec<f64>,
    pub iterations: usize,
}

impl ParryMeasure {
    pub fn entropy(&self) -> f64 {
        self.spectral_radius.ln()
    }

    /// Transition probability `right_j/(λ·right_i)` along the edge `i -> j`.
    pub fn transition(&self, i: usize, j: usize) -> f64 {
        self.right[j] / (self.spectral_radius * self.right[i])
    }

    /// Measure of the cylinder spelled by a path.
    pub fn cylinder(&self, word: &[usize]) -> f64 {
        match word {
            [] => 1.0,
            [first, ..] => {
                self.weights[*first] * word.windows(2).map(|w| self.transition(w[0], w[1])).product::<f64>()
            }
        }
    }
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 1_000_000;

/// Power iteration on `A + I` (primitive whenever `A` is irreducible). Stops when the
/// Collatz–Wielandt bounds agree to `POWER_TOL` relative.
fn perron_vector(n: usize, edges: &[(usize, usize)], transpose: bool) -> Result<(f64, Vec<f64>, usize)> {
    let mut x = vec![1.0 / n as f64; n];
    for it in 1..=POWER_MAX_ITER {
        let mut y = x.clone();
        for &(a, b) in edges {
            let (from, to) = if transpose { (a, b) } else { (b, a) };
            y[to] += x[from];
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for (yi, xi) in y.iter().zip(&x) {
            let r = yi / xi;
            lo = lo.min(r);
            hi = hi.max(r);
        }
        let s: f64 = y.iter().sum();
        x = y.into_iter().map(|v| v / s).collect();
        if hi - lo <= POWER_TOL * hi {
            return Ok((0.5 * (lo + hi) - 1.0, x, it));
        }
    }
    Err(Error::Input("power iteration did not converge".into()))
}

pub fn parry_measure(component: &SymbolicShift) -> Result<ParryMeasure> {
    if component.is_empty() || !component.is_irreducible() {
        return Err(Error::Input("Parry measure needs an irreducible graph".into()));
    }
    let n = component.len();
    let (lambda, right, it_r) = perron_vector(n, &component.edges, false)?;
    let (_, left, it_l) = perron_vector(n, &component.edges, true)?;
    let mut weights: Vec<f64> = left.iter().zip(&right).map(|(u, v)| u * v).collect();
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    Ok(ParryMeasure { spectral_radius: lambda, left, right, weights, iterations: it_r.max(it_l) })
}

/// `log` of the spectral radius of an irreducible graph.
pub fn parry_entropy(component: &SymbolicShift) -> Result<f64> {
    Ok(parry_measure(component)?.entropy())
}

/// Abramov quotient `h(μ)/∫r dμ` for the Parry measure and a roof constant on vertices.
pub fn suspension_entropy(component: &SymbolicShift, roof: &[f64]) -> Result<f64> {
    if roof.len() != component.len() {
        return Err(Error::Input(format!("roof has {} values for {} vertices", roof.len(), component.len())));
    }
    if roof.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Input("roof values must be positive".into()));
    }
    let mu = parry_measure(component)?;
    let mean: f64 = mu.weights.iter().zip(roof).map(|(w, r)| w * r).sum();
    Ok(mu.entropy() / mean)
}

/// Finite window `(v_{-zero}, …, v_{len-1-zero})` of a two-sided sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Word {
    pub symbols: Vec<usize>,
    pub zero: usize,
}

impl Word {
    pub fn new(symbols: Vec<usize>, zero: usize) -> Result<Self> {
        if zero >= symbols.len() {
            return Err(Error::Input(format!("zero index {zero} outside word of length {}", symbols.len())));
        }
        Ok(Self { symbols, zero })
    }

    /// Window of radius `n` around `zero`.
    pub fn centred(symbols: Vec<usize>) -> Result<Self> {
        if symbols.len() % 2 == 0 {
            return Err(Error::Input("centred words have odd length".into()));
        }
        let zero = symbols.len() / 2;
        Self::new(symbols, zero)
    }

    pub fn get(&self, n: i64) -> Option<usize> {
        let i = self.zero as i64 + n;
        (i >= 0).then(|| self.symbols.get(i as usize).copied()).flatten()
    }

    pub fn first(&self) -> i64 {
        -(self.zero as i64)
    }

    pub fn last(&self) -> i64 {
        (self.symbols.len() - 1 - self.zero) as i64
    }

    /// `σ^n` of the window; fails once the zeroth symbol falls outside.
    pub fn shift(&self, n: i64) -> Result<Self> {
        if n < self.first() || n > self.last() {
            return Err(Error::Input(format!("shift by {n} leaves the window")));
        }
        Ok(Self { symbols: self.symbols.clone(), zero: (self.zero as i64 + n) as usize })
    }

    /// Forward cylinder `v_0 … v_{depth-1}`.
    pub fn forward(&self, depth: usize) -> Option<&[usize]> {
        self.symbols.get(self.zero..self.zero + depth)
    }

    /// Some symbol repeats among `v_0, v_1, …` and some among `…, v_{-1}, v_0`.
    pub fn is_regular(&self) -> bool {
        let repeats = |s: &[usize]| {
            let mut seen = BTreeSet::new();
            s.iter().any(|v| !seen.insert(*v))
        };
        repeats(&self.symbols[self.zero..]) && repeats(&self.symbols[..=self.zero])
    }
}

/// Roof function depending on a forward cylinder of fixed depth.
pub trait Roof {
    fn depth(&self) -> usize;
    fn value(&self, cylinder: &[usize]) -> Result<f64>;

    fn at(&self, word: &Word) -> Result<f64> {
        let cyl = word
            .forward(self.depth())
            .ok_or_else(|| Error::Input(format!("word too short for a depth {} roof", self.depth())))?;
        self.value(cyl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantRoof(pub f64);

impl Roof for ConstantRoof {
    fn depth(&self) -> usize {
        1
    }
    fn value(&self, _: &[usize]) -> Result<f64> {
        Ok(self.0)
    }
}

/// Roof given per zeroth symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexRoof(pub Vec<f64>);

impl Roof for VertexRoof {
    fn depth(&self) -> usize {
        1
    }
    fn value(&self, cylinder: &[usize]) -> Result<f64> {
        self.0.get(cylinder[0]).copied().ok_or_else(|| Error::Input(format!("no roof for vertex {}", cylinder[0])))
    }
}

/// Cylinder averages of measured return times.
#[serde_with::serde_as]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylinderRoof {
    pub depth: usize,
    #[serde_as(as = "Vec<(_, _)>")]
    pub values: BTreeMap<Vec<usize>, f64>,
    /// Largest spread (max − min) of the samples behind one cylinder value.
    pub spread: f64,
}

impl CylinderRoof {
    pub fn from_samples<'a>(depth: usize, samples: impl IntoIterator<Item = (&'a [usize], f64)>) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Input("roof depth must be positive".into()));
        }
        let mut acc: BTreeMap<Vec<usize>, (f64, usize, f64, f64)> = BTreeMap::new();
        for (cyl, t) in samples {
            if cyl.len() < depth {
                return Err(Error::Input("sample cylinder shorter than roof depth".into()));
            }
            let e = acc.entry(cyl[..depth].to_vec()).or_insert((0.0, 0, f64::INFINITY, f64::NEG_INFINITY));
            e.0 += t;
            e.1 += 1;
            e.2 = e.2.min(t);
            e.3 = e.3.max(t);
        }
        let spread = acc.values().map(|e| e.3 - e.2).fold(0.0, f64::max);
        let values = acc.into_iter().map(|(k, e)| (k, e.0 / e.1 as f64)).collect();
        Ok(Self { depth, values, spread })
    }

    pub fn min(&self) -> f64 {
        self.values.values().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.values().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Roof for CylinderRoof {
    fn depth(&self) -> usize {
        self.depth
    }
    fn value(&self, cylinder: &[usize]) -> Result<f64> {
        self.values.get(cylinder).copied().ok_or_else(|| Error::Input(format!("no roof sample for cylinder {cylinder:?}")))
    }
}

/// Shift together with a roof bounded away from 0 and below `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspensionFlow {
    pub shift: SymbolicShift,
    pub roof: CylinderRoof,
    pub rho: f64,
}

impl SuspensionFlow {
    pub fn new(shift: SymbolicShift, roof: CylinderRoof, rho: f64) -> Result<Self> {
        if roof.values.is_empty() {
            return Err(Error::Input("empty roof".into()));
        }
        if !(roof.min() > 0.0) || !(roof.max() < rho) {
            return Err(Error::Input(format!("roof range [{}, {}] not inside (0, {rho})", roof.min(), roof.max())));
        }
        if let Some(c) = roof.values.keys().find(|c| !shift.admits(c)) {
            return Err(Error::Input(format!("roof cylinder {c:?} is not a path")));
        }
        Ok(Self { shift, roof, rho })
    }

    /// Roof averaged onto zeroth symbols (weighted by sample cylinders equally).
    pub fn vertex_roof(&self) -> Vec<f64> {
        let mut acc = vec![(0.0, 0usize); self.shift.len()];
        for (c, v) in &self.roof.values {
            acc[c[0]].0 += v;
            acc[c[0]].1 += 1;
        }
        let mean = self.roof.values.values().sum::<f64>() / self.roof.values.len() as f64;
        acc.into_iter().map(|(s, n)| if n == 0 { mean } else { s / n as f64 }).collect()
    }
}

/// `r_n` along the window: `Σ_{i<n} r(σ^i v)` for `n ≥ 0` and `−r_{-n}(σ^n v)` for `n < 0`.
pub fn birkhoff_roof(word: &Word, roof: &impl Roof, n: i64) -> Result<f64> {
    let (from, to, sign) = if n >= 0 { (0, n, 1.0) } else { (n, 0, -1.0) };
    let mut sum = 0.0;
    for i in from..to {
        sum += roof.at(&word.shift(i)?)?;
    }
    Ok(sign * sum)
}

/// `d(v, w) = exp(−min{|n| : v_n ≠ w_n})` over the indices both windows cover; 0 if none differ.
pub fn cylinder_distance(v: &Word, w: &Word) -> f64 {
    let lo = v.first().max(w.first());
    let hi = v.last().min(w.last());
    let reach = (-lo).max(hi).max(0);
    (0..=reach)
        .find(|&n| [n, -n].iter().any(|&m| m >= lo && m <= hi && v.get(m) != w.get(m)))
        .map_or(0.0, |n| (-(n as f64)).exp())
}

/// Point `(v̲, t)` of the suspension with `0 ≤ t < r(v̲)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPoint {
    pub word: Word,
    pub height: f64,
}

fn normalised(z: &FlowPoint, roof: &impl Roof) -> Result<f64> {
    let r = roof.at(&z.word)?;
    if !(z.height >= 0.0 && z.height < r) {
        return Err(Error::Input(format!("height {} outside [0, {r})", z.height)));
    }
    Ok(z.height / r)
}

/// Bowen–Walters distance, built on the unit-roof model through `t ↦ t/r(v̲)`.
///
/// Horizontal segments at level `u` cost `(1−u)·d(v,w) + u·d(σv,σw)`, vertical ones their
/// length; the value is the cheapest of the direct path and the two paths through the top
/// of one fibre.
pub fn bowen_walters_distance(z1: &FlowPoint, z2: &FlowPoint, roof: &impl Roof) -> Result<f64> {
    if z1.word.symbols.len() != z2.word.symbols.len() || z1.word.zero != z2.word.zero {
        return Err(Error::Input("words must have equal depth".into()));
    }
    let u1 = normalised(z1, roof)?;
    let u2 = normalised(z2, roof)?;
    let horizontal = |v: &Word, w: &Word, u: f64| -> f64 {
        let d1 = match (v.shift(1), w.shift(1)) {
            (Ok(a), Ok(b)) => cylinder_distance(&a, &b),
            _ => 0.0,
        };
        (1.0 - u) * cylinder_distance(v, w) + u * d1
    };
    let direct = horizontal(&z1.word, &z2.word, 0.5 * (u1 + u2)) + (u1 - u2).abs();
    let over = |a: &FlowPoint, ua: f64, b: &FlowPoint, ub: f64| -> f64 {
        match a.word.shift(1) {
            Ok(next) => (1.0 - ua) + ub + cylinder_distance(&next, &b.word),
            Err(_) => f64::INFINITY,
        }
    };
    Ok(direct.min(over(z1, u1, z2, u2)).min(over(z2, u2, z1, u1)))
}

/// `σ_r^t` on a window: raise the height and pass to `σv̲` at each roof crossing.
pub fn flow(z: &FlowPoint, t: f64, roof: &impl Roof) -> Result<FlowPoint> {
    let mut word = z.word.clone();
    let mut h = z.height + t;
    loop {
        let r = roof.at(&word)?;
        if h >= r {
            h -= r;
            word = word.shift(1)?;
        } else if h < 0.0 {
            word = word.shift(-1)?;
            h += roof.at(&word)?;
        } else {
            return Ok(FlowPoint { word, height: h });
        }
    }
}

/// Least-squares fit of `after ≈ C·before^κ` in log-log coordinates; `C` is then raised to
/// the smallest constant bounding every pair.
pub fn fit_holder(pairs: &[(f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = pairs.iter().filter(|(a, b)| *a > 0.0 && *b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let kappa = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let c = pts.iter().map(|p| (p.1 - kappa * p.0).exp()).fold(0.0, f64::max);
    Some((c, kappa))
}

/// Entropy row for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub component: usize,
    pub size: usize,
    pub parry_entropy: f64,
    pub suspension_entropy: f64,
}

/// Parry and Abramov entropies of every irreducible component, with a roof per vertex.
pub fn entropy_report(shift: &SymbolicShift, roof: &[f64]) -> Result<Vec<EntropyReport>> {
    scc_decompose(shift)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let r: Vec<f64> = c.vertices.iter().map(|&v| roof[v]).collect();
            Ok(EntropyReport {
                component: i,
                size: c.vertices.len(),
                parry_entropy: parry_entropy(&c.shift)?,
                suspension_entropy: suspension_entropy(&c.shift, &r)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn cycle(n: usize, offset: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (offset + i, offset + (i + 1) % n)).collect()
    }

    fn reachable(s: &SymbolicShift, from: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<usize> = s.successors(from).iter().copied().collect();
        while let Some(v) = queue.pop_front() {
            if seen.insert(v) {
                queue.extend(s.successors(v));
            }
        }
        seen
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> SymbolicShift {
        let mut edges = vec![];
        for i in 0..n {
            for j in 0..n {
                if rng.gen::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        SymbolicShift::new((0..n).map(|i| i.to_string()).collect(), edges).unwrap()
    }

    #[test]
    fn components_of_small_graphs() {
        let full = SymbolicShift::full(2);
        let c = scc_decompose(&full);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].vertices, vec![0, 1]);

        let mut e = cycle(3, 0);
        e.extend(cycle(3, 3));
        let two = SymbolicShift::new((0..6).map(|i| i.to_string()).collect(), e).unwrap();
        assert_eq!(scc_decompose(&two).len(), 2);

        // An isolated vertex and a vertex without a self-loop carry no component.
        let chain = SymbolicShift::new(vec!["a".into(), "b".into(), "c".into()], [(0, 1), (2, 2)]).unwrap();
        let c = scc_decompose(&chain);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].vertices, vec![2]);
    }

    #[test]
    fn components_are_mutually_reachable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let g = random_graph(&mut rng, 40, 0.04);
            let comps = scc_decompose(&g);
            let mut covered = BTreeSet::new();
            for c in &comps {
                for &v in &c.vertices {
                    assert!(covered.insert(v));
                    let r = reachable(&g, v);
                    assert!(c.vertices.iter().all(|w| r.contains(w)));
                }
                assert!(c.shift.is_irreducible());
            }
            // Maximality: a vertex outside every component cannot return to itself.
            for v in 0..g.len() {
                if !covered.contains(&v) {
                    assert!(!reachable(&g, v).contains(&v));
                }
            }
        }
    }

    #[test]
    fn entropy_of_standard_shifts() {
        for k in 1..6 {
            let h = parry_entropy(&SymbolicShift::full(k)).unwrap();
            assert!((h - (k as f64).ln()).abs() < 1e-9);
        }
        let golden = SymbolicShift::from_adjacency(&DMatrix::from_row_slice(2, 2, &[1, 1, 1, 0])).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((parry_entropy(&golden).unwrap() - phi.ln()).abs() < 1e-9);
        assert!((parry_entropy(&golden).unwrap() - 0.481212).abs() < 1e-6);
        for n in 1..7 {
            let c = SymbolicShift::new((0..n).map(|i| i.to_string()).collect(), cycle(n, 0)).unwrap();
            assert!(parry_entropy(&c).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn reducible_input_is_rejected() {
        let g = SymbolicShift::new(vec!["a".into(), "b".into()], [(0, 0), (0, 1), (1, 1)]).unwrap();
        assert!(matches!(parry_entropy(&g), Err(Error::Input(_))));
        let empty = SymbolicShift::new(vec![], []).unwrap();
        assert!(parry_entropy(&empty).is_err());
    }

    #[test]
    fn parry_matches_eigenvalue_and_path_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 25 {
            let n = rng.gen_range(2..=50);
            let p = rng.gen_range(0.05..0.5);
            let g = random_graph(&mut rng, n, p);
            let Some(c) = scc_decompose(&g).into_iter().next() else { continue };
            if !c.shift.edges.iter().any(|(a, b)| a == b) {
                continue;
            }
            let h = parry_entropy(&c.shift).unwrap();
            let eig = c.shift.adjacency().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!((h - eig.ln()).abs() < 1e-8, "{h} vs {}", eig.ln());
            let growth = (c.shift.path_count(40) / c.shift.path_count(20)).ln() / 20.0;
            assert!((h - growth).abs() < 1e-3, "{h} vs {growth}");
            checked += 1;
        }
    }

    #[test]
    fn parry_measure_is_stationary() {
        let g = SymbolicShift::from_adjacency(&DMatrix::from_row_slice(3, 3, &[1, 1, 0, 0, 1, 1, 1, 1, 1])).unwrap();
        let mu = parry_measure(&g).unwrap();
        for j in 0..3 {
            let inflow: f64 = g.predecessors(j).iter().map(|&i| mu.weights[i] * mu.transition(i, j)).sum();
            assert!((inflow - mu.weights[j]).abs() < 1e-9);
        }
        for i in 0..3 {
            let out: f64 = g.successors(i).iter().map(|&j| mu.transition(i, j)).sum();
            assert!((out - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn abramov_quotient() {
        let full = SymbolicShift::full(2);
        assert!((suspension_entropy(&full, &[1.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-9);
        let golden = SymbolicShift::from_adjacency(&DMatrix::from_row_slice(2, 2, &[1, 1, 1, 0])).unwrap();
        let h = parry_entropy(&golden).unwrap();
        assert!((suspension_entropy(&golden, &[0.3, 0.3]).unwrap() - h / 0.3).abs() < 1e-9);
        // Non-constant roof: the Parry weights of the golden mean shift are (φ², 1)/(φ²+1).
        let phi: f64 = (1.0 + 5f64.sqrt()) / 2.0;
        let w0 = phi * phi / (phi * phi + 1.0);
        let mean = w0 * 1.0 + (1.0 - w0) * 2.0;
        assert!((suspension_entropy(&golden, &[1.0, 2.0]).unwrap() - h / mean).abs() < 1e-9);
        assert!(suspension_entropy(&golden, &[1.0]).is_err());
    }

    #[test]
    fn birkhoff_sums() {
        let w = Word::centred(vec![0, 1, 1, 0, 1, 0, 0]).unwrap();
        let c = ConstantRoof(0.25);
        assert_eq!(birkhoff_roof(&w, &c, 0).unwrap(), 0.0);
        for n in -3..=3 {
            assert!((birkhoff_roof(&w, &c, n).unwrap() - 0.25 * n as f64).abs() < 1e-15);
        }
        assert!(birkhoff_roof(&w, &c, 5).is_err());
        let v = VertexRoof(vec![0.1, 0.2]);
        assert!((birkhoff_roof(&w, &v, 2).unwrap() - 0.3).abs() < 1e-15);
        assert!((birkhoff_roof(&w, &v, -2).unwrap() + 0.4).abs() < 1e-15);
    }

    #[test]
    fn cylinder_roof_from_samples() {
        let a = [0usize, 1];
        let b = [1usize, 0];
        let roof = CylinderRoof::from_samples(2, [(&a[..], 0.1), (&a[..], 0.12), (&b[..], 0.2)]).unwrap();
        assert!((roof.value(&a).unwrap() - 0.11).abs() < 1e-15);
        assert!((roof.spread - 0.02).abs() < 1e-15);
        let g = SymbolicShift::full(2);
        assert!(SuspensionFlow::new(g.clone(), roof.clone(), 0.25).is_ok());
        assert!(SuspensionFlow::new(g, roof, 0.15).is_err());
    }

    #[test]
    fn regular_flag() {
        assert!(Word::centred(vec![1, 2, 1, 3, 4, 3, 5]).unwrap().is_regular());
        assert!(!Word::centred(vec![1, 2, 1, 3, 4, 5, 6]).unwrap().is_regular());
        assert!(!Word::centred(vec![7, 2, 1, 3, 4, 3, 5]).unwrap().is_regular());
    }

    #[test]
    fn bowen_walters_basics() {
        let roof = VertexRoof(vec![0.5, 1.0]);
        let z = FlowPoint { word: Word::centred(vec![0, 1, 0, 1, 1]).unwrap(), height: 0.2 };
        assert_eq!(bowen_walters_distance(&z, &z, &roof).unwrap(), 0.0);
        let bad = FlowPoint { height: 0.7, ..z.clone() };
        assert!(matches!(bowen_walters_distance(&z, &bad, &roof), Err(Error::Input(_))));
        let other = FlowPoint { word: Word::centred(vec![0, 1, 0, 1, 0]).unwrap(), height: 0.2 };
        let d = bowen_walters_distance(&z, &other, &roof).unwrap();
        assert!(d > 0.0 && d < 0.4);
        // The top of a fibre is glued to the base of the next one.
        let top = FlowPoint { height: 0.5 - 1e-9, ..z.clone() };
        let next = flow(&z, 0.3, &roof).unwrap();
        assert_eq!(next.word.zero, 3);
        let d = bowen_walters_distance(&FlowPoint { word: z.word.shift(1).unwrap(), height: 0.0 }, &flow(&top, 1e-9, &roof).unwrap(), &roof).unwrap();
        assert!(d < 1e-8);
    }

    #[test]
    fn flow_hoelder_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let roof = VertexRoof(vec![0.6, 0.8, 1.0]);
        let mut pairs = vec![];
        for _ in 0..300 {
            let base: Vec<usize> = (0..41).map(|_| rng.gen_range(0..3)).collect();
            let mut other = base.clone();
            let k = rng.gen_range(1..15);
            for (i, s) in other.iter_mut().enumerate() {
                if (i as i64 - 20).abs() >= k {
                    *s = rng.gen_range(0..3);
                }
            }
            let h = rng.gen::<f64>() * 0.6;
            let z1 = FlowPoint { word: Word::centred(base).unwrap(), height: h };
            let z2 = FlowPoint { word: Word::centred(other).unwrap(), height: h * rng.gen_range(0.99..1.0) };
            let t = rng.gen_range(-1.0..1.0);
            let d0 = bowen_walters_distance(&z1, &z2, &roof).unwrap();
            let (a, b) = (flow(&z1, t, &roof).unwrap(), flow(&z2, t, &roof).unwrap());
            if a.word.zero == b.word.zero {
                pairs.push((d0, bowen_walters_distance(&a, &b, &roof).unwrap()));
            }
        }
        let (c, kappa) = fit_holder(&pairs).unwrap();
        assert!(c.is_finite() && kappa > 0.0);
        assert!(pairs.iter().all(|(a, b)| *b <= c * a.powf(kappa) * (1.0 + 1e-12)));
    }

    fn word_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, f64, f64)> {
        (prop::collection::vec(0usize..3, 9), prop::collection::vec(0usize..3, 9), 0.0..1.0f64, 0.0..1.0f64)
    }

    proptest! {
        #[test]
        fn bowen_walters_is_symmetric((a, b, s, t) in word_strategy()) {
            let roof = VertexRoof(vec![0.3, 0.5, 0.9]);
            let z1 = FlowPoint { height: s * roof.0[a[4]], word: Word::centred(a).unwrap() };
            let z2 = FlowPoint { height: t * roof.0[b[4]], word: Word::centred(b).unwrap() };
            let d12 = bowen_walters_distance(&z1, &z2, &roof).unwrap();
            let d21 = bowen_walters_distance(&z2, &z1, &roof).unwrap();
            prop_assert_eq!(d12, d21);
            prop_assert_eq!(d12 == 0.0, z1 == z2);
        }

        #[test]
        fn cocycle_identity(symbols in prop::collection::vec(0usize..4, 21), m in -5i64..=5, n in -5i64..=5) {
            let roof = VertexRoof(vec![0.125, 0.25, 0.5, 0.375]);
            let w = Word::centred(symbols).unwrap();
            let lhs = birkhoff_roof(&w, &roof, m + n).unwrap();
            let rhs = birkhoff_roof(&w, &roof, m).unwrap() + birkhoff_roof(&w.shift(m).unwrap(), &roof, n).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
