//! Staged execution. Every stage reads only the serialised artifacts of earlier stages.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use symflow_core::charts::SliceFrames;
use symflow_core::gpo::{
    alphabet_violations, build_gpo_graph, coarse_grain, sample_orbit, Alphabet, GpoContext, GpoGraph, NetDesign,
    OrbitSample, Snapper,
};
use symflow_core::hyperbolicity::{HyperbolicityParams, PesinFrame};
use symflow_core::markov::{
    build_cover, coding_entropy, refine, shadow_samples, MarkovCover, MarkovPartition, Sample,
};
use symflow_core::models::MappingTorusModel;
use symflow_core::sections::{build_proper_section, ProperSection};
use symflow_core::symbolic::entropy_report;
use symflow_core::{Error, Result};

use crate::config::PipelineConfig;
use crate::suites::{run_suites, SuiteResult};

/// Schema string carried by every artifact.
pub const SCHEMA: &str = "symflow/1";

/// Stage names in execution order.
pub const STAGES: [&str; 9] = ["orbit", "frames", "alphabet", "graph", "shadow", "cover", "refine", "entropy", "check"];

/// A stage output with its provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub schema: String,
    pub stage: String,
    pub config: PipelineConfig,
    pub data: T,
}

impl<T: Serialize + DeserializeOwned> Artifact<T> {
    pub fn new(stage: &str, config: &PipelineConfig, data: T) -> Self {
        Self { schema: SCHEMA.into(), stage: stage.into(), config: config.clone(), data }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("artifacts serialise")
    }

    pub fn from_json(text: &str, stage: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::Input(format!("{stage} artifact: {e}")))?;
        if a.schema != SCHEMA || a.stage != stage {
            return Err(Error::Input(format!(
                "expected a {stage} artifact of schema {SCHEMA}, found {} / {}",
                a.stage, a.schema
            )));
        }
        Ok(a)
    }
}

/// A stage failure, tagged with the stage name.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {source}")]
pub struct StageError {
    pub stage: String,
    #[source]
    pub source: Error,
}

fn at<T>(stage: &str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage: stage.into(), source })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitStage {
    pub slices: usize,
    pub return_time: f64,
    pub partial_order: bool,
    pub exponents: Vec<f64>,
    pub orbits: Vec<OrbitSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FramesStage {
    pub params: HyperbolicityParams,
    pub frames: Vec<PesinFrame>,
    pub bases: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlphabetStage {
    pub net: NetDesign,
    pub alphabet: Alphabet,
    /// Symbols violating the coarse-graining conditions on `p` and on the windows.
    pub violations: (usize, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphStage {
    pub graph: GpoGraph,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShadowStage {
    pub samples: Vec<Vec<Sample>>,
    /// Random section points used to test the covering property.
    pub orbit_points: Vec<(usize, [f64; 2])>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverStage {
    pub cover: MarkovCover,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefineStage {
    pub partition: MarkovPartition,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyStage {
    pub component_size: usize,
    pub entropy: f64,
    /// Sum of the positive exponents of the model.
    pub target: f64,
    pub relative_error: f64,
    pub parry_entropy: f64,
    pub components: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckStage {
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

/// Every stage output of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Bundle {
    pub orbit: Artifact<OrbitStage>,
    pub frames: Artifact<FramesStage>,
    pub alphabet: Artifact<AlphabetStage>,
    pub graph: Artifact<GraphStage>,
    pub shadow: Artifact<ShadowStage>,
    pub cover: Artifact<CoverStage>,
    pub refine: Artifact<RefineStage>,
    pub entropy: Artifact<EntropyStage>,
    pub check: Artifact<CheckStage>,
}

impl Bundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bundles serialise")
    }

    /// Artifacts as `(stage, json)` pairs in stage order.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("orbit", self.orbit.to_json()),
            ("frames", self.frames.to_json()),
            ("alphabet", self.alphabet.to_json()),
            ("graph", self.graph.to_json()),
            ("shadow", self.shadow.to_json()),
            ("cover", self.cover.to_json()),
            ("refine", self.refine.to_json()),
            ("entropy", self.entropy.to_json()),
            ("check", self.check.to_json()),
        ]
    }
}

/// Model, section, frames and chart context rebuilt from configuration and the frames artifact.
#[derive(Clone, Debug)]
pub struct Runtime {
    pub model: MappingTorusModel,
    pub section: ProperSection,
    pub ctx: GpoContext,
}

impl Runtime {
    pub fn new(config: &PipelineConfig, frames: &FramesStage) -> Result<Self> {
        let (model, section) = section_of(config)?;
        if frames.frames.len() != section.slice_count() {
            return Err(Error::Input("frames artifact does not match the section".into()));
        }
        let sf = SliceFrames {
            section: section.clone(),
            params: frames.params,
            frames: frames.frames.iter().cloned().map(Arc::new).collect(),
            bases: frames.bases.clone(),
        };
        let ctx = GpoContext::new(Arc::new(sf), config.profile.0);
        Ok(Self { model, section, ctx })
    }
}

fn section_of(config: &PipelineConfig) -> Result<(MappingTorusModel, ProperSection)> {
    let model = config.model.build()?;
    let (section, _) = build_proper_section(&model, config.hyperbolicity.rho)?;
    Ok((model, section))
}

/// Independent random streams per stage.
pub fn rng(config: &PipelineConfig, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(config.seed);
    r.set_stream(stream);
    r
}

pub fn orbit_stage(config: &PipelineConfig) -> Result<OrbitStage> {
    config.validate()?;
    let (model, section) = section_of(config)?;
    let d = model.torus_dim();
    let mut r = rng(config, 1);
    let s = &config.sampling;
    let orbits = (0..s.orbits)
        .map(|i| {
            let mut x: Vec<f64> = (0..d).map(|_| r.gen::<f64>()).collect();
            x.push(0.0);
            sample_orbit(&section, &DVector::from_vec(x), s.back, s.forward, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OrbitStage {
        slices: section.slice_count(),
        return_time: section.return_time,
        partial_order: section.partial_order,
        exponents: model.exponents(),
        orbits,
    })
}

pub fn frames_stage(config: &PipelineConfig) -> Result<FramesStage> {
    let (_, section) = section_of(config)?;
    let sf = SliceFrames::build(&section, &config.params())?;
    Ok(FramesStage {
        params: sf.params,
        frames: sf.frames.iter().map(|f| (**f).clone()).collect(),
        bases: sf.bases,
    })
}

pub fn alphabet_stage(config: &PipelineConfig, rt: &Runtime, orbit: &OrbitStage) -> Result<AlphabetStage> {
    alphabet_of(config, rt, &orbit.orbits)
}

/// Coarse graining of the given orbits onto the configured net.
pub fn alphabet_of(config: &PipelineConfig, rt: &Runtime, orbits: &[OrbitSample]) -> Result<AlphabetStage> {
    let net = NetDesign::new(&rt.model, config.sampling.net)?;
    let alphabet = coarse_grain(&rt.ctx, orbits, &Snapper::Net(net.clone()), config.sampling.window)?;
    let violations = alphabet_violations(&alphabet, rt.ctx.eps, config.hyperbolicity.rho, config.model.beta);
    Ok(AlphabetStage { net, alphabet, violations })
}

pub fn graph_stage(rt: &Runtime, alphabet: &AlphabetStage) -> Result<GraphStage> {
    Ok(GraphStage { graph: build_gpo_graph(&rt.ctx, alphabet.alphabet.clone())? })
}

pub fn shadow_stage(config: &PipelineConfig, rt: &Runtime, alphabet: &AlphabetStage, graph: &GraphStage) -> Result<ShadowStage> {
    let s = &config.sampling;
    let samples = shadow_samples(&graph.graph, &alphabet.net, &rt.section, s.samples_per_vertex, s.shadow_depth, config.seed)?;
    let mut r = rng(config, 2);
    let k = rt.section.slice_count();
    let orbit_points = (0..s.orbit_points).map(|_| (r.gen_range(0..k), [r.gen(), r.gen()])).collect();
    Ok(ShadowStage { samples, orbit_points })
}

pub fn cover_stage(rt: &Runtime, alphabet: &AlphabetStage, graph: &GraphStage, shadow: &ShadowStage) -> Result<CoverStage> {
    let cover = build_cover(&graph.graph, &alphabet.net, &rt.section, shadow.samples.clone(), &shadow.orbit_points)?;
    Ok(CoverStage { cover })
}

/// Refinement at the measured depth.
pub fn refine_stage(config: &PipelineConfig, rt: &Runtime, cover: &CoverStage) -> Result<RefineStage> {
    let depth = symflow_core::markov::measured_depth(&cover.cover);
    Ok(RefineStage { partition: refine(&cover.cover, &rt.section, depth, config.tolerances.refine)? })
}

pub fn entropy_stage(rt: &Runtime, refine: &RefineStage) -> Result<EntropyStage> {
    let p = &refine.partition;
    let (component_size, entropy) = coding_entropy(p)?;
    let comps = entropy_report(&p.shift(), &p.roof)?;
    let target: f64 = rt.model.exponents().iter().filter(|&&e| e > 0.0).sum();
    Ok(EntropyStage {
        component_size,
        entropy,
        target,
        relative_error: (entropy - target).abs() / target,
        parry_entropy: comps.first().map(|c| c.parry_entropy).unwrap_or(0.0),
        components: comps.len(),
    })
}

/// Runs every stage in order and the enabled invariant suites.
pub fn run_pipeline(config: &PipelineConfig) -> std::result::Result<Bundle, StageError> {
    at("config", config.validate())?;
    let orbit = at("orbit", orbit_stage(config))?;
    let frames = at("frames", frames_stage(config))?;
    let rt = at("frames", Runtime::new(config, &frames))?;
    let alphabet = at("alphabet", alphabet_stage(config, &rt, &orbit))?;
    let graph = at("graph", graph_stage(&rt, &alphabet))?;
    let shadow = at("shadow", shadow_stage(config, &rt, &alphabet, &graph))?;
    let cover = at("cover", cover_stage(&rt, &alphabet, &graph, &shadow))?;
    let refine = at("refine", refine_stage(config, &rt, &cover))?;
    let entropy = at("entropy", entropy_stage(&rt, &refine))?;
    let state = State { config, rt: &rt, orbit: &orbit, alphabet: &alphabet, graph: &graph, cover: &cover, refine: &refine, entropy: &entropy };
    let check = at("check", check_stage(&state))?;
    Ok(Bundle {
        orbit: Artifact::new("orbit", config, orbit),
        frames: Artifact::new("frames", config, frames),
        alphabet: Artifact::new("alphabet", config, alphabet),
        graph: Artifact::new("graph", config, graph),
        shadow: Artifact::new("shadow", config, shadow),
        cover: Artifact::new("cover", config, cover),
        refine: Artifact::new("refine", config, refine),
        entropy: Artifact::new("entropy", config, entropy),
        check: Artifact::new("check", config, check),
    })
}

/// Everything the invariant suites read.
pub struct State<'a> {
    pub config: &'a PipelineConfig,
    pub rt: &'a Runtime,
    pub orbit: &'a OrbitStage,
    pub alphabet: &'a AlphabetStage,
    pub graph: &'a GraphStage,
    pub cover: &'a CoverStage,
    pub refine: &'a RefineStage,
    pub entropy: &'a EntropyStage,
}

pub fn check_stage(state: &State) -> Result<CheckStage> {
    let suites = run_suites(state)?;
    let passed = suites.iter().all(|s| s.passed);
    Ok(CheckStage { suites, passed })
}
