mod common;

use symflow::pipeline::{
    self, Artifact, CoverStage, FramesStage, GraphStage, OrbitStage, RefineStage, Runtime, ShadowStage, SCHEMA,
};
use symflow::run_pipeline;

#[test]
fn equal_seeds_give_identical_bundles() {
    let c = common::small_config(5);
    let a = run_pipeline(&c).unwrap().to_json();
    let b = run_pipeline(&c).unwrap().to_json();
    assert!(a == b, "bundles differ");
    let other = run_pipeline(&common::small_config(6)).unwrap().to_json();
    assert!(other != a);
}

#[test]
fn stages_rerun_from_serialised_artifacts() {
    let c = common::small_config(5);
    let bundle = run_pipeline(&c).unwrap();
    for (stage, json) in bundle.files() {
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["schema"], SCHEMA);
        assert_eq!(v["stage"], stage);
    }
    // Reload each artifact and recompute the later stages from it alone.
    let frames = Artifact::<FramesStage>::from_json(&bundle.frames.to_json(), "frames").unwrap().data;
    let rt = Runtime::new(&c, &frames).unwrap();
    let orbit = Artifact::<OrbitStage>::from_json(&bundle.orbit.to_json(), "orbit").unwrap().data;
    let alphabet = pipeline::alphabet_stage(&c, &rt, &orbit).unwrap();
    assert_eq!(alphabet.alphabet, bundle.alphabet.data.alphabet);
    let graph = Artifact::<GraphStage>::from_json(&bundle.graph.to_json(), "graph").unwrap().data;
    let shadow = Artifact::<ShadowStage>::from_json(&bundle.shadow.to_json(), "shadow").unwrap().data;
    let cover = pipeline::cover_stage(&rt, &alphabet, &graph, &shadow).unwrap();
    assert_eq!(cover.cover, bundle.cover.data.cover);
    let cover2 = Artifact::<CoverStage>::from_json(&bundle.cover.to_json(), "cover").unwrap().data;
    let refine = pipeline::refine_stage(&c, &rt, &cover2).unwrap();
    let mut loaded = Artifact::<RefineStage>::from_json(&bundle.refine.to_json(), "refine").unwrap().data;
    loaded.partition.reindex(&cover2.cover);
    assert_eq!(refine.partition, loaded.partition);
    let e = pipeline::entropy_stage(&rt, &loaded).unwrap();
    assert_eq!(e.entropy, bundle.entropy.data.entropy);
}

#[test]
fn wrong_stage_or_schema_is_rejected() {
    let c = common::small_config(1);
    let o = pipeline::orbit_stage(&c).unwrap();
    let json = Artifact::new("orbit", &c, o).to_json();
    assert!(Artifact::<OrbitStage>::from_json(&json, "frames").is_err());
    let bad = json.replacen(SCHEMA, "symflow/0", 1);
    assert!(Artifact::<OrbitStage>::from_json(&bad, "orbit").is_err());
}
