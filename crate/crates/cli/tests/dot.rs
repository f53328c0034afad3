mod common;

use std::collections::BTreeMap;

use regex::Regex;
use symflow::dot::{export_dot, gpo_dot, shift_dot};
use symflow::run_pipeline;
use symflow_core::gpo::{Alphabet, GpoGraph, GridInfo};

struct Parsed {
    name: String,
    labels: Vec<String>,
    edges: Vec<(usize, usize, f64)>,
}

fn parse(text: &str) -> Parsed {
    let header = Regex::new(r"^digraph (\w+) \{$").unwrap();
    let node = Regex::new(r#"^\s*v(\d+) \[label="((?:[^"\\]|\\.)*)"\];$"#).unwrap();
    let edge = Regex::new(r#"^\s*v(\d+) -> v(\d+) \[label="([-0-9.eE+]+)"\];$"#).unwrap();
    let mut lines = text.lines();
    let name = header.captures(lines.next().unwrap()).expect("header")[1].to_string();
    let mut nodes = BTreeMap::new();
    let mut edges = Vec::new();
    let mut closed = false;
    for l in lines {
        assert!(!closed, "content after closing brace");
        if l == "}" {
            closed = true;
        } else if let Some(c) = node.captures(l) {
            nodes.insert(c[1].parse::<usize>().unwrap(), c[2].to_string());
        } else if let Some(c) = edge.captures(l) {
            edges.push((c[1].parse().unwrap(), c[2].parse().unwrap(), c[3].parse().unwrap()));
        } else {
            panic!("unparsed line {l:?}");
        }
    }
    assert!(closed);
    assert!(nodes.keys().copied().eq(0..nodes.len()), "vertex ids are not contiguous");
    Parsed { name, labels: nodes.into_values().collect(), edges }
}

#[test]
fn empty_graph_is_header_only() {
    let alphabet = Alphabet {
        symbols: vec![],
        provenance: vec![],
        codings: vec![],
        grids: GridInfo { snapper: "net".into(), cell: 0.1, lambda: 1.0, eps: 1e-3 },
    };
    let g = GpoGraph { alphabet, vertices: vec![], edges: vec![], transition_times: vec![], pruned: 0 };
    assert_eq!(gpo_dot(&g), "digraph gpo {\n}\n");
    let p = parse(&gpo_dot(&g));
    assert!(p.labels.is_empty() && p.edges.is_empty());
}

#[test]
fn exported_graphs_parse_back() {
    let bundle = run_pipeline(&common::small_config(5)).unwrap();
    let g = &bundle.graph.data.graph;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gpo.dot");
    export_dot(g, &path).unwrap();
    let p = parse(&std::fs::read_to_string(&path).unwrap());
    assert_eq!(p.name, "gpo");
    assert_eq!(p.labels.len(), g.vertex_count());
    assert_eq!(p.edges.len(), g.edge_count());
    for (v, l) in p.labels.iter().enumerate() {
        assert_eq!(*l, g.symbol(v).label());
    }
    let mut k = 0;
    for a in 0..g.vertex_count() {
        for (&b, &t) in g.edges[a].iter().zip(&g.transition_times[a]) {
            let (pa, pb, pt) = p.edges[k];
            assert_eq!((pa, pb), (a, b));
            assert!((pt - t).abs() <= 5e-7);
            k += 1;
        }
    }

    let mut part = bundle.refine.data.partition.clone();
    part.reindex(&bundle.cover.data.cover);
    let s = parse(&shift_dot(&part));
    assert_eq!(s.name, "coding");
    assert_eq!(s.labels.len(), part.len());
    assert_eq!(s.edges.len(), part.edges.len());
}
