use symflow::config::PipelineConfig;

/// A reduced run: few orbits, short windows, one cheap suite.
#[allow(dead_code)]
pub fn small_config(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig { seed, ..Default::default() };
    c.sampling.orbits = 6;
    c.sampling.back = 50;
    c.sampling.forward = 50;
    c.sampling.window = 40;
    c.sampling.samples_per_vertex = 2;
    c.sampling.shadow_depth = 200;
    c.sampling.orbit_points = 50;
    c.sampling.fibre_samples = 4;
    c.suites.enabled = vec![3, 6];
    c.suites.truncations = vec![1];
    c
}
