use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use symflow::config::PipelineConfig;
use symflow::dot::{gpo_dot, shift_dot};
use symflow::pipeline::{self, Artifact, Runtime, State};
use symflow::run_pipeline;

#[derive(Parser)]
#[command(name = "symflow", version, about = "Symbolic coding pipeline for model hyperbolic flows")]
struct Cli {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "artifacts")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model, section and sampled orbits.
    Orbit,
    /// Pesin frames on every slice.
    Frames,
    /// Coarse graining into an alphabet of double charts.
    Alphabet,
    /// The gpo graph.
    Graph,
    /// Shadowed samples of graph paths.
    Shadow,
    /// The Markov cover.
    Cover,
    /// The refined partition.
    Refine,
    /// Entropy of the coding.
    Entropy,
    /// Invariant suites; exits non-zero if any fails.
    Check,
    /// Writes graph.dot and, when refined, coding.dot.
    ExportDot,
    /// Every stage in order, then the suites.
    Run,
    /// Prints the effective configuration as TOML.
    Config,
}

type Fallible<T> = Result<T, String>;

fn load<T: Serialize + DeserializeOwned>(out: &Path, stage: &str, config: &PipelineConfig) -> Fallible<T> {
    let path = out.join(format!("{stage}.json"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e}; run `symflow {stage}` first", path.display()))?;
    let a: Artifact<T> = Artifact::from_json(&text, stage).map_err(|e| e.to_string())?;
    if &a.config != config {
        return Err(format!("{} was produced with a different configuration; rerun `symflow {stage}`", path.display()));
    }
    Ok(a.data)
}

fn save<T: Serialize + DeserializeOwned>(out: &Path, stage: &str, config: &PipelineConfig, data: T) -> Fallible<()> {
    write(out, &format!("{stage}.json"), &Artifact::new(stage, config, data).to_json())
}

fn write(out: &Path, name: &str, text: &str) -> Fallible<()> {
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let path = out.join(name);
    std::fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn stage<T>(name: &str, r: symflow_core::Result<T>) -> Fallible<T> {
    r.map_err(|e| format!("stage {name}: {e}"))
}

fn runtime(out: &Path, cfg: &PipelineConfig) -> Fallible<Runtime> {
    let frames: pipeline::FramesStage = load(out, "frames", cfg)?;
    stage("frames", Runtime::new(cfg, &frames))
}

fn execute(cli: &Cli, cfg: &PipelineConfig) -> Fallible<bool> {
    let out = cli.out.as_path();
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Orbit => {
            let o = stage("orbit", pipeline::orbit_stage(cfg))?;
            println!("slices {} return time {} orbits {}", o.slices, o.return_time, o.orbits.len());
            save(out, "orbit", cfg, o)?;
        }
        Command::Frames => save(out, "frames", cfg, stage("frames", pipeline::frames_stage(cfg))?)?,
        Command::Alphabet => {
            let rt = runtime(out, cfg)?;
            let orbit = load(out, "orbit", cfg)?;
            let a = stage("alphabet", pipeline::alphabet_stage(cfg, &rt, &orbit))?;
            println!("symbols {} violations {:?}", a.alphabet.len(), a.violations);
            save(out, "alphabet", cfg, a)?;
        }
        Command::Graph => {
            let rt = runtime(out, cfg)?;
            let g = stage("graph", pipeline::graph_stage(&rt, &load(out, "alphabet", cfg)?))?;
            println!("vertices {} edges {}", g.graph.vertex_count(), g.graph.edge_count());
            save(out, "graph", cfg, g)?;
        }
        Command::Shadow => {
            let rt = runtime(out, cfg)?;
            let s = stage("shadow", pipeline::shadow_stage(cfg, &rt, &load(out, "alphabet", cfg)?, &load(out, "graph", cfg)?))?;
            save(out, "shadow", cfg, s)?;
        }
        Command::Cover => {
            let rt = runtime(out, cfg)?;
            let c = stage(
                "cover",
                pipeline::cover_stage(&rt, &load(out, "alphabet", cfg)?, &load(out, "graph", cfg)?, &load(out, "shadow", cfg)?),
            )?;
            println!("{:?}", c.cover.report);
            save(out, "cover", cfg, c)?;
        }
        Command::Refine => {
            let rt = runtime(out, cfg)?;
            let r = stage("refine", pipeline::refine_stage(cfg, &rt, &load(out, "cover", cfg)?))?;
            println!("cells {} {:?}", r.partition.len(), r.partition.report);
            save(out, "refine", cfg, r)?;
        }
        Command::Entropy => {
            let rt = runtime(out, cfg)?;
            let e = stage("entropy", pipeline::entropy_stage(&rt, &load(out, "refine", cfg)?))?;
            println!("entropy {} target {} relative error {:.3e}", e.entropy, e.target, e.relative_error);
            save(out, "entropy", cfg, e)?;
        }
        Command::Check => {
            let rt = runtime(out, cfg)?;
            let orbit = load(out, "orbit", cfg)?;
            let alphabet = load(out, "alphabet", cfg)?;
            let graph = load(out, "graph", cfg)?;
            let cover: pipeline::CoverStage = load(out, "cover", cfg)?;
            let mut refine: pipeline::RefineStage = load(out, "refine", cfg)?;
            refine.partition.reindex(&cover.cover);
            let entropy = load(out, "entropy", cfg)?;
            let state = State {
                config: cfg,
                rt: &rt,
                orbit: &orbit,
                alphabet: &alphabet,
                graph: &graph,
                cover: &cover,
                refine: &refine,
                entropy: &entropy,
            };
            let check = stage("check", pipeline::check_stage(&state))?;
            for s in &check.suites {
                println!("{}", s.line());
            }
            let passed = check.passed;
            save(out, "check", cfg, check)?;
            return Ok(passed);
        }
        Command::ExportDot => {
            let g: pipeline::GraphStage = load(out, "graph", cfg)?;
            write(out, "graph.dot", &gpo_dot(&g.graph))?;
            if out.join("refine.json").exists() {
                let r: pipeline::RefineStage = load(out, "refine", cfg)?;
                write(out, "coding.dot", &shift_dot(&r.partition))?;
            }
        }
        Command::Run => {
            let bundle = run_pipeline(cfg).map_err(|e| e.to_string())?;
            for (name, text) in bundle.files() {
                write(out, &format!("{name}.json"), &text)?;
            }
            write(out, "graph.dot", &gpo_dot(&bundle.graph.data.graph))?;
            write(out, "coding.dot", &shift_dot(&bundle.refine.data.partition))?;
            for s in &bundle.check.data.suites {
                println!("{}", s.line());
            }
            return Ok(bundle.check.data.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| format!("cannot read {}: {e}", p.display()))
            .and_then(|t| PipelineConfig::from_toml(&t).map_err(|e| e.to_string())),
        None => Ok(PipelineConfig::default()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
