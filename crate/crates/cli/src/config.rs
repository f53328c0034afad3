//! Pipeline configuration, read from TOML.

use serde::{Deserialize, Serialize};
use symflow_core::charts::ScaleProfile;
use symflow_core::hyperbolicity::HyperbolicityParams;
use symflow_core::models::{MappingTorusModel, SpeedScale};
use symflow_core::{Error, Result};

/// The flow to code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Integer base matrix of the mapping torus.
    pub matrix: Vec<Vec<i64>>,
    pub roof: f64,
    pub speed: SpeedScale,
    pub beta: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { matrix: vec![vec![2, 1], vec![1, 1]], roof: 1.0, speed: SpeedScale::Auto, beta: 1.0 }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<MappingTorusModel> {
        Ok(MappingTorusModel::new(self.matrix.clone(), self.roof, self.speed)?.with_beta(self.beta))
    }
}

/// Constants of the hyperbolicity package.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperbolicity {
    pub rho: f64,
    pub chi: f64,
    pub eps: f64,
    /// Horizon of the splitting estimate.
    pub horizon: f64,
    pub integral_horizon: f64,
    pub simpson_step: f64,
    pub tail_tolerance: f64,
}

impl Default for Hyperbolicity {
    fn default() -> Self {
        let p = HyperbolicityParams::default();
        Self {
            rho: p.rho,
            chi: p.chi,
            eps: p.eps,
            horizon: p.horizon,
            integral_horizon: p.integral_horizon,
            simpson_step: 5e-3,
            tail_tolerance: p.tail_tolerance,
        }
    }
}

/// Orbit sampling, alphabet and cover sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    pub orbits: usize,
    pub back: usize,
    pub forward: usize,
    /// Coarse-graining window `N_w`.
    pub window: usize,
    /// Net points per side.
    pub net: usize,
    pub samples_per_vertex: usize,
    pub shadow_depth: usize,
    pub orbit_points: usize,
    pub fibre_samples: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            orbits: 24,
            back: 70,
            forward: 70,
            window: 60,
            net: 4,
            samples_per_vertex: 4,
            shadow_depth: 400,
            orbit_points: 300,
            fibre_samples: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Classification tolerance of the refinement.
    pub refine: f64,
    /// Markov property tolerance.
    pub markov: f64,
    /// Relative entropy tolerance.
    pub entropy: f64,
    pub exponents: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { refine: 1e-7, markov: 1e-6, entropy: 0.05, exponents: 1e-3 }
    }
}

/// Which invariant suites run in `check`, numbered as the acceptance criteria.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suites {
    pub enabled: Vec<u8>,
    /// Orbit counts of the nested truncations used for entropy monotonicity.
    pub truncations: Vec<usize>,
    pub shadow_orbits: usize,
    pub shadow_window: usize,
}

impl Default for Suites {
    fn default() -> Self {
        Self { enabled: (1..=9).collect(), truncations: vec![1, 2, 6, 12], shadow_orbits: 50, shadow_window: 400 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub hyperbolicity: Hyperbolicity,
    pub profile: Profile,
    pub sampling: Sampling,
    pub tolerances: Tolerances,
    pub suites: Suites,
}

/// Chart scale profile; see [`ScaleProfile`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Profile(pub ScaleProfile);

impl Default for Profile {
    fn default() -> Self {
        Profile(ScaleProfile::Desk { q_scale: 1.5, overlap: 0.2, am1: 0.7 })
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    pub fn params(&self) -> HyperbolicityParams {
        let h = &self.hyperbolicity;
        HyperbolicityParams {
            chi: h.chi,
            rho: h.rho,
            eps: h.eps,
            beta: self.model.beta,
            horizon: h.horizon,
            integral_horizon: h.integral_horizon,
            simpson_step: h.simpson_step,
            tail_tolerance: h.tail_tolerance,
        }
    }

    /// Checks the ranges every stage relies on.
    pub fn validate(&self) -> Result<()> {
        let h = &self.hyperbolicity;
        let bad = |m: String| Err(Error::Config(m));
        if !(h.chi > 0.0 && h.chi < 1.0) {
            return bad(format!("χ must lie in (0, 1), got {}", h.chi));
        }
        if !(h.rho > 0.0 && h.rho < 0.25) {
            return bad(format!("ρ must lie in (0, 0.25), got {}", h.rho));
        }
        if !(h.eps > 0.0 && h.eps <= 0.1 * h.rho) {
            return bad(format!("ε must satisfy 0 < ε ≤ ρ/10, got {}", h.eps));
        }
        if !(self.model.beta > 0.0 && self.model.beta <= 1.0) {
            return bad(format!("β must lie in (0, 1], got {}", self.model.beta));
        }
        if !(self.model.roof > 0.0) {
            return bad(format!("roof must be positive, got {}", self.model.roof));
        }
        for (name, v) in [
            ("horizon", h.horizon),
            ("integral_horizon", h.integral_horizon),
            ("simpson_step", h.simpson_step),
            ("tail_tolerance", h.tail_tolerance),
            ("refine tolerance", self.tolerances.refine),
            ("markov tolerance", self.tolerances.markov),
            ("entropy tolerance", self.tolerances.entropy),
            ("exponent tolerance", self.tolerances.exponents),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let s = &self.sampling;
        if s.orbits == 0 || s.net < 2 || s.samples_per_vertex == 0 || s.fibre_samples == 0 {
            return bad("orbits, samples and fibre samples must be positive and the net at least 2".into());
        }
        if s.window == 0 || s.window > s.back.min(s.forward) {
            return bad(format!("window {} must lie in 1..=min(back, forward)", s.window));
        }
        if s.shadow_depth < 2 {
            return bad("shadow depth must be at least 2".into());
        }
        if let Some(c) = self.suites.enabled.iter().find(|&&c| !(1..=9).contains(&c)) {
            return bad(format!("unknown suite {c}"));
        }
        if self.suites.truncations.iter().any(|&n| n == 0 || n > s.orbits) {
            return bad("truncations must lie in 1..=orbits".into());
        }
        Ok(())
    }
}
