//! Graphviz export of the gpo graph and of the coding shift.

use std::fmt::Write as _;
use std::path::Path;

use symflow_core::gpo::GpoGraph;
use symflow_core::markov::MarkovPartition;

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn digraph<'a>(
    name: &str,
    labels: impl Iterator<Item = String>,
    edges: impl Iterator<Item = (usize, usize, f64)> + 'a,
) -> String {
    let mut out = String::new();
    let mut body = String::new();
    for (i, l) in labels.enumerate() {
        writeln!(body, "  v{i} [label={}];", quote(&l)).unwrap();
    }
    for (a, b, t) in edges {
        writeln!(body, "  v{a} -> v{b} [label=\"{t:.6}\"];").unwrap();
    }
    writeln!(out, "digraph {name} {{").unwrap();
    out.push_str(&body);
    out.push_str("}\n");
    out
}

/// Vertices labelled by symbol, edges by transition time.
pub fn gpo_dot(graph: &GpoGraph) -> String {
    digraph(
        "gpo",
        (0..graph.vertex_count()).map(|v| graph.symbol(v).label()),
        (0..graph.vertex_count()).flat_map(move |a| {
            graph.edges[a].iter().zip(&graph.transition_times[a]).map(move |(&b, &t)| (a, b, t))
        }),
    )
}

/// Cells of the partition, edges labelled by the roof of their source cell.
pub fn shift_dot(partition: &MarkovPartition) -> String {
    digraph(
        "coding",
        (0..partition.len()).map(|i| format!("R{i}")),
        partition.edges.iter().map(|&(a, b)| (a, b, partition.roof[a])),
    )
}

pub fn export_dot(graph: &GpoGraph, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, gpo_dot(graph))
}
