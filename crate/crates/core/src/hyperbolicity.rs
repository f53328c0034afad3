//! Invariant splittings, Lyapunov inner products, the Oseledets–Pesin reduction and the
//! parameters `Q`, `q`, `q^{s/u}`, `p^{s/u}` along orbits.
//!
//! All vectors of the normal bundle are expressed in the orthonormal frames produced by
//! [`LinearPoincareCocycle::frame`], so `C(x)` is a `d × d` matrix.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::linalg::{fix_sign, from_columns, gram_schmidt, min_singular, spectral_norm};
use crate::models::Point;
use crate::sections::LinearPoincareCocycle;
use crate::{Error, Result};

/// Numerical constants of the hyperbolicity package.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityParams {
    pub chi: f64,
    pub rho: f64,
    pub eps: f64,
    pub beta: f64,
    /// Horizon used to estimate the splitting.
    pub horizon: f64,
    /// Truncation time of the Lyapunov integrals.
    pub integral_horizon: f64,
    /// Simpson step of the Lyapunov integrals.
    pub simpson_step: f64,
    /// Accepted ratio of the tail bound to the truncated integral.
    pub tail_tolerance: f64,
}

impl Default for HyperbolicityParams {
    fn default() -> Self {
        Self {
            chi: 0.25 * ((3.0 + 5f64.sqrt()) / 2.0).ln(),
            rho: 0.1,
            eps: 1e-3,
            beta: 1.0,
            horizon: 2.5,
            integral_horizon: 20.0,
            simpson_step: 1e-3,
            tail_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splitting {
    pub stable_basis: Vec<DVector<f64>>,
    pub unstable_basis: Vec<DVector<f64>>,
    pub d_s: usize,
    pub d_u: usize,
    /// Finite-time exponents in increasing order.
    pub exponents: Vec<f64>,
}

impl Splitting {
    pub fn stable_matrix(&self) -> DMatrix<f64> {
        from_columns(&self.stable_basis, self.dim())
    }

    pub fn unstable_matrix(&self) -> DMatrix<f64> {
        from_columns(&self.unstable_basis, self.dim())
    }

    pub fn dim(&self) -> usize {
        self.d_s + self.d_u
    }
}

/// Finite-time exponents `log σ_i(Φ^T_x)/T` in increasing order.
pub fn finite_time_exponents(coc: &LinearPoincareCocycle, x: &Point, horizon: f64) -> Result<Vec<f64>> {
    let phi = coc.linear_poincare(x, horizon)?;
    let mut ex: Vec<f64> = phi
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s.ln() / horizon)
        .collect();
    ex.sort_by(f64::total_cmp);
    Ok(ex)
}

/// Canonical orthonormal basis of the span of `basis`: Gram–Schmidt of the projections of the
/// coordinate vectors, with sign fixing.
fn canonical_basis(basis: &[DVector<f64>], d: usize) -> Vec<DVector<f64>> {
    if basis.is_empty() {
        return Vec::new();
    }
    let b = from_columns(basis, d);
    let proj = &b * b.transpose();
    let mut cands: Vec<DVector<f64>> = (0..d).map(|i| proj.column(i).into_owned()).collect();
    // Largest projections first keeps the choice well conditioned.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| cands[j].norm().total_cmp(&cands[i].norm()).then(i.cmp(&j)));
    let ordered: Vec<DVector<f64>> = order.iter().map(|&i| cands[i].clone()).collect();
    cands = gram_schmidt(&ordered, None, 1e-8);
    cands.truncate(basis.len());
    cands
}

/// Estimates `N^s ⊕ N^u` at `x` from the singular vectors of `Φ^{±T}_x`.
pub fn estimate_splitting(
    coc: &LinearPoincareCocycle,
    x: &Point,
    horizon: f64,
    chi: f64,
) -> Result<Splitting> {
    if !(horizon > 0.0) {
        return Err(Error::Input(format!("horizon must be positive, got {horizon}")));
    }
    let d = coc.normal_dim();
    let fwd = coc.linear_poincare(x, horizon)?.svd(false, true);
    let bwd = coc.linear_poincare(x, -horizon)?.svd(false, true);
    let vt_f = fwd.v_t.expect("requested");
    let vt_b = bwd.v_t.expect("requested");
    let mut exponents = Vec::with_capacity(d);
    let mut stable = Vec::new();
    for (i, s) in fwd.singular_values.iter().enumerate() {
        let e = s.ln() / horizon;
        exponents.push(e);
        if e > -chi && e < chi {
            return Err(Error::NonHyperbolic(format!(
                "finite-time exponent {e:.6} lies within ±χ = {chi:.6}"
            )));
        }
        if e <= -chi {
            stable.push(vt_f.row(i).transpose().into_owned());
        }
    }
    let mut unstable = Vec::new();
    for (i, s) in bwd.singular_values.iter().enumerate() {
        if s.ln() / horizon <= -chi {
            unstable.push(vt_b.row(i).transpose().into_owned());
        }
    }
    exponents.sort_by(f64::total_cmp);
    if stable.len() + unstable.len() != d {
        return Err(Error::NonHyperbolic(format!(
            "forward and backward dimension counts disagree ({} + {} != {d})",
            stable.len(),
            unstable.len()
        )));
    }
    let stable_basis = canonical_basis(&stable, d);
    let unstable_basis = canonical_basis(&unstable, d);
    Ok(Splitting {
        d_s: stable_basis.len(),
        d_u: unstable_basis.len(),
        stable_basis,
        unstable_basis,
        exponents,
    })
}

/// Result of a truncated Lyapunov Gram integral.
#[derive(Clone, Debug, PartialEq)]
pub struct GramIntegral {
    pub gram: DMatrix<f64>,
    /// Tail bound beyond the truncation horizon.
    pub tail: f64,
}

/// `4e^{2ρ}∫₀^T e^{2χt}<A(t) e_i, A(t) e_j> dt` by composite Simpson, where `cocycle(t)`
/// returns the images of the basis vectors as columns.
///
/// The tail beyond `T` is bounded by `4e^{2ρ}e^{2(χ-a)T}/(2(a-χ))`, with `a` the contraction
/// rate `-log‖A(T/2)‖/(T/2)` (for `a = 1` this is `4e^{2ρ}e^{2(χ-1)T}/(2(1-χ))`). The rate is
/// read at `T/2` because products along the contracting direction lose relative precision
/// like `e^{2at}·ulp`.
pub fn lyapunov_gram(
    cocycle: impl Fn(f64) -> Result<DMatrix<f64>>,
    chi: f64,
    rho: f64,
    horizon: f64,
    step: f64,
) -> Result<GramIntegral> {
    let mut n = (horizon / step).ceil() as usize;
    if n % 2 == 1 {
        n += 1;
    }
    let h = horizon / n as f64;
    let first = cocycle(0.0)?;
    let k = first.ncols();
    let mut acc = DMatrix::zeros(k, k);
    let mid = n / 2;
    let mut at_mid = first.clone();
    for i in 0..=n {
        let t = i as f64 * h;
        let a = if i == 0 { first.clone() } else { cocycle(t)? };
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += (a.transpose() * &a) * (w * (2.0 * chi * t).exp());
        if i == mid {
            at_mid = a;
        }
    }
    let gram = acc * (h / 3.0) * 4.0 * (2.0 * rho).exp();
    let rate = -spectral_norm(&at_mid).ln() / (mid as f64 * h);
    let tail = if rate > chi {
        4.0 * (2.0 * rho).exp() * (2.0 * (chi - rate) * horizon).exp() / (2.0 * (rate - chi))
    } else {
        f64::INFINITY
    };
    Ok(GramIntegral { gram, tail })
}

/// Per-point hyperbolicity package.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PesinFrame {
    pub point: Point,
    pub splitting: Splitting,
    pub gram_s: DMatrix<f64>,
    pub gram_u: DMatrix<f64>,
    /// `C(x)`: Euclidean coordinates → frame coordinates of `N_x`.
    pub c: DMatrix<f64>,
    pub c_inv: DMatrix<f64>,
    pub c_inv_norm: f64,
    /// `Q(x) = ε^{6/β}‖C(x)^{-1}‖^{-48/β}`.
    pub big_q: f64,
    pub s_x: f64,
    pub u_x: f64,
    /// Relative tail error of the truncated integrals.
    pub tail_error: f64,
}

impl PesinFrame {
    pub fn d_s(&self) -> usize {
        self.splitting.d_s
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }
}

/// `Q` under the `Paper` profile for a given `‖C^{-1}‖`.
pub fn q_formula(c_inv_norm: f64, eps: f64, beta: f64) -> f64 {
    eps.powf(6.0 / beta) * c_inv_norm.powf(-48.0 / beta)
}

/// Computes the Lyapunov Grams, `C(x)` and `Q(x)`.
pub fn lyapunov_frame(
    coc: &LinearPoincareCocycle,
    x: &Point,
    splitting: &Splitting,
    params: &HyperbolicityParams,
) -> Result<PesinFrame> {
    let d = coc.normal_dim();
    let es = splitting.stable_matrix();
    let eu = splitting.unstable_matrix();
    let step = params.simpson_step;
    let gs = lyapunov_gram(
        |t| Ok(coc.linear_poincare(x, t)? * &es),
        params.chi,
        params.rho,
        params.integral_horizon,
        step,
    )?;
    let gu = lyapunov_gram(
        |t| Ok(coc.linear_poincare(x, -t)? * &eu),
        params.chi,
        params.rho,
        params.integral_horizon,
        step,
    )?;
    if splitting.dim() != d {
        return Err(Error::Input("splitting dimension does not match the cocycle".into()));
    }
    frame_from_grams(x, splitting, gs, gu, params)
}

/// Assembles a [`PesinFrame`] from precomputed Gram integrals.
pub fn frame_from_grams(
    x: &Point,
    splitting: &Splitting,
    gs: GramIntegral,
    gu: GramIntegral,
    params: &HyperbolicityParams,
) -> Result<PesinFrame> {
    let d = splitting.dim();
    let rel = |g: &GramIntegral| {
        if g.gram.is_empty() {
            0.0
        } else {
            g.tail / g.gram.diagonal().min()
        }
    };
    let tail_error = rel(&gs).max(rel(&gu));
    if !(tail_error < params.tail_tolerance) {
        return Err(Error::Horizon(format!(
            "tail estimate {tail_error:.3e} exceeds {:.1e}; increase the integral horizon",
            params.tail_tolerance
        )));
    }
    let block = |g: &DMatrix<f64>, basis: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        if g.is_empty() {
            return Ok(DMatrix::zeros(d, 0));
        }
        let ch = Cholesky::new(g.clone())
            .ok_or_else(|| Error::NonHyperbolic("Lyapunov Gram is not positive definite".into()))?;
        let l_inv_t = ch
            .l()
            .try_inverse()
            .ok_or_else(|| Error::NonHyperbolic("singular Cholesky factor".into()))?
            .transpose();
        Ok(basis * l_inv_t)
    };
    let cs = block(&gs.gram, &splitting.stable_matrix())?;
    let cu = block(&gu.gram, &splitting.unstable_matrix())?;
    let mut c = DMatrix::zeros(d, d);
    c.view_mut((0, 0), (d, cs.ncols())).copy_from(&cs);
    c.view_mut((0, cs.ncols()), (d, cu.ncols())).copy_from(&cu);
    let c_inv = c
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NonHyperbolic("C(x) is singular".into()))?;
    let c_inv_norm = spectral_norm(&c_inv);
    let top = |g: &DMatrix<f64>| {
        if g.is_empty() {
            f64::INFINITY
        } else {
            SymmetricEigen::new(g.clone()).eigenvalues.max().sqrt()
        }
    };
    let (s_x, u_x) = (top(&gs.gram), top(&gu.gram));
    Ok(PesinFrame {
        point: x.clone(),
        splitting: splitting.clone(),
        gram_s: gs.gram,
        gram_u: gu.gram,
        c,
        c_inv,
        c_inv_norm,
        big_q: q_formula(c_inv_norm, params.eps, params.beta),
        s_x,
        u_x,
        tail_error,
    })
}

/// Lyapunov inner product `⟪v, w⟫` of two frame vectors at a point with the given package.
pub fn lyapunov_inner(frame: &PesinFrame, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    // ⟪v, w⟫ = <C^{-1} v, C^{-1} w> since C is an isometry onto the Lyapunov product.
    (&frame.c_inv * v).dot(&(&frame.c_inv * w))
}

/// Block form of `D(x,t) = C(φ^t x)^{-1}Φ^t C(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reduction {
    pub d: DMatrix<f64>,
    pub d_s: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub off_block: f64,
}

pub const OFF_BLOCK_TOL: f64 = 1e-6;

/// Computes `D(x,t)` and checks its block structure and bounds.
pub fn reduction(
    frame_x: &PesinFrame,
    frame_y: &PesinFrame,
    phi_t: &DMatrix<f64>,
    t: f64,
    params: &HyperbolicityParams,
) -> Result<Reduction> {
    let red = reduction_blocks(frame_x, frame_y, phi_t);
    if red.off_block >= OFF_BLOCK_TOL {
        return Err(Error::Reduction(format!("off-block norm {:.3e}", red.off_block)));
    }
    let (chi, rho) = (params.chi, params.rho);
    let slack = 1e-12;
    if red.d_s.ncols() > 0 {
        let (lo, hi) = (min_singular(&red.d_s), spectral_norm(&red.d_s));
        if lo <= (-4.0 * rho).exp() || hi > (-chi * t).exp() * (1.0 + slack) {
            return Err(Error::Reduction(format!("stable block norms [{lo}, {hi}] at t = {t}")));
        }
    }
    if red.d_u.ncols() > 0 {
        let (lo, hi) = (min_singular(&red.d_u), spectral_norm(&red.d_u));
        if hi >= (4.0 * rho).exp() || lo < (chi * t).exp() * (1.0 - slack) {
            return Err(Error::Reduction(format!("unstable block norms [{lo}, {hi}] at t = {t}")));
        }
    }
    Ok(red)
}

/// `D(x,t)` split into blocks without checking bounds.
pub fn reduction_blocks(frame_x: &PesinFrame, frame_y: &PesinFrame, phi_t: &DMatrix<f64>) -> Reduction {
    let d = &frame_y.c_inv * phi_t * &frame_x.c;
    let ds = frame_x.d_s();
    let n = d.nrows();
    let d_s = d.view((0, 0), (ds, ds)).into_owned();
    let d_u = d.view((ds, ds), (n - ds, n - ds)).into_owned();
    let a = d.view((0, ds), (ds, n - ds)).into_owned();
    let b = d.view((ds, 0), (n - ds, ds)).into_owned();
    let off_block = spectral_norm(&a).max(spectral_norm(&b));
    Reduction { d, d_s, d_u, off_block }
}

/// Per-orbit hyperbolicity parameters on a return-time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QParameters {
    pub times: Vec<f64>,
    pub big_q: Vec<f64>,
    pub q: Vec<f64>,
    pub q_s: Vec<f64>,
    pub q_u: Vec<f64>,
    pub p_s: Vec<f64>,
    pub p_u: Vec<f64>,
}

/// `q^s(x_n) = ε inf_{m≥n} e^{ε(t_m-t_n)}Q(x_m)`, `q^u` backwards, `q = q^s ∧ q^u`,
/// together with the greedy `p^{s/u}`.
pub fn q_parameters(times: &[f64], big_q: &[f64], eps: f64) -> Result<QParameters> {
    if times.len() != big_q.len() || times.is_empty() {
        return Err(Error::Input("times and Q values must be non-empty and aligned".into()));
    }
    let n = times.len();
    let mut q_s = vec![0.0; n];
    let mut q_u = vec![0.0; n];
    for i in 0..n {
        q_s[i] = (i..n)
            .map(|m| (eps * (times[m] - times[i])).exp() * big_q[m])
            .fold(f64::INFINITY, f64::min)
            * eps;
        q_u[i] = (0..=i)
            .map(|m| (eps * (times[i] - times[m])).exp() * big_q[m])
            .fold(f64::INFINITY, f64::min)
            * eps;
    }
    let q = q_s.iter().zip(&q_u).map(|(a, b)| a.min(*b)).collect();
    let (p_s, p_u) = greedy_unchecked(times, big_q, eps);
    Ok(QParameters { times: times.to_vec(), big_q: big_q.to_vec(), q, q_s, q_u, p_s, p_u })
}

/// Greedy recursion for `p^{s/u}` after validating the grid spacing against
/// `[½ inf r, 2 sup r]`.
pub fn greedy_p(
    times: &[f64],
    big_q: &[f64],
    eps: f64,
    r_inf: f64,
    r_sup: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if times.len() != big_q.len() {
        return Err(Error::Input("times and Q values must be aligned".into()));
    }
    for w in times.windows(2) {
        let dt = w[1] - w[0];
        if dt < 0.5 * r_inf * (1.0 - 1e-12) || dt > 2.0 * r_sup * (1.0 + 1e-12) {
            return Err(Error::Input(format!("grid spacing {dt} outside [{}, {}]", 0.5 * r_inf, 2.0 * r_sup)));
        }
    }
    Ok(greedy_unchecked(times, big_q, eps))
}

fn greedy_unchecked(times: &[f64], big_q: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = times.len();
    let mut p_s = vec![0.0; n];
    let mut p_u = vec![0.0; n];
    if n == 0 {
        return (p_s, p_u);
    }
    p_s[n - 1] = eps * big_q[n - 1];
    for i in (0..n - 1).rev() {
        p_s[i] = ((eps * (times[i + 1] - times[i])).exp() * p_s[i + 1]).min(eps * big_q[i]);
    }
    p_u[0] = eps * big_q[0];
    for i in 1..n {
        p_u[i] = ((eps * (times[i] - times[i - 1])).exp() * p_u[i - 1]).min(eps * big_q[i]);
    }
    (p_s, p_u)
}

/// `𝔥 = ερ + 288ρ/β`.
pub fn frak_h(eps: f64, rho: f64, beta: f64) -> f64 {
    eps * rho + 288.0 * rho / beta
}

/// Sign-fixed copy of a frame vector list, used when exporting.
pub fn normalized(vs: &[DVector<f64>]) -> Vec<DVector<f64>> {
    vs.iter()
        .map(|v| {
            let mut w = v / v.norm();
            fix_sign(&mut w, 1e-12);
            w
        })
        .collect()
}
