//! Edge-based keypoint grouping.
//!
//! Candidates become vertices of a graph whose edges link candidates of
//! different identities that share an edge prototype. Each edge is scored by
//! comparing its segment descriptors on the query map with the prototype's.
//! Weak edges are dropped, then each vertex keeps at most one edge per
//! neighbor identity; the connected components that remain are instances.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{CellFeatures, GridIndex};
use crate::matching::{cosine_or_min, CandidateKeypoint};
use crate::prototype::{edge_descriptor, PrototypeStore};

pub const DEFAULT_TAU_E: f32 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupConfig {
    /// Edges scoring below this are rejected before conflict pruning.
    pub tau_e: f32,
    pub min_keypoints_override: Option<usize>,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            tau_e: DEFAULT_TAU_E,
            min_keypoints_override: None,
        }
    }
}

impl GroupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau_e) {
            return Err(Error::InvalidConfig(format!(
                "tau_e {} outside [-1, 1]",
                self.tau_e
            )));
        }
        Ok(())
    }

    pub fn min_keypoints(&self, n_kp: usize) -> usize {
        self.min_keypoints_override
            .unwrap_or_else(|| min_keypoints(n_kp))
    }
}

/// Fewest keypoints a reliable instance must keep: `max(2, N_KP - 1)` for
/// small keypoint sets, otherwise 4.
pub fn min_keypoints(n_kp: usize) -> usize {
    if n_kp <= 4 {
        n_kp.saturating_sub(1).max(2)
    } else {
        4
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    pub a: usize,
    pub b: usize,
    pub similarity: f32,
}

impl GraphEdge {
    pub fn other(&self, v: usize) -> usize {
        if self.a == v {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGraph {
    pub vertices: Vec<CandidateKeypoint>,
    pub edges: Vec<GraphEdge>,
}

impl InstanceGraph {
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            adj[edge.a].push(e);
            adj[edge.b].push(e);
        }
        adj
    }
}

/// Mean per-segment cosine; degenerate segments count as -1.
pub fn edge_similarity(candidate: &[Vec<f32>], prototype: &[Vec<f32>]) -> Result<f32> {
    if candidate.len() != prototype.len() || candidate.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} candidate segments vs {} prototype segments",
            candidate.len(),
            prototype.len()
        )));
    }
    let mut sum = 0f64;
    for (c, p) in candidate.iter().zip(prototype) {
        if c.len() != p.len() {
            return Err(Error::ShapeMismatch(format!(
                "segment width {} vs {}",
                c.len(),
                p.len()
            )));
        }
        sum += cosine_or_min(c, p) as f64;
    }
    Ok((sum / candidate.len() as f64) as f32)
}

/// Links every candidate pair of distinct identities backed by an edge
/// prototype; descriptors run from the lower identity to the higher one.
pub fn build_initial_graph<M: CellFeatures + Sync + ?Sized>(
    cands: &[CandidateKeypoint],
    store: &PrototypeStore,
    query: &M,
) -> Result<InstanceGraph> {
    if query.channels() != store.binned_channels() {
        return Err(Error::ChannelMismatch {
            left: store.binned_channels(),
            right: query.channels(),
        });
    }
    let mut pairs = Vec::new();
    for a in 0..cands.len() {
        for b in a + 1..cands.len() {
            let (ka, kb) = (cands[a].identity, cands[b].identity);
            if ka != kb && store.edge(ka, kb).is_some() {
                pairs.push((a, b));
            }
        }
    }
    let edges = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (lo, hi) = if cands[a].identity < cands[b].identity {
                (a, b)
            } else {
                (b, a)
            };
            let proto = store.edge(cands[a].identity, cands[b].identity).unwrap();
            let desc = edge_descriptor(query, cands[lo].cell, cands[hi].cell, store.n_seg())?;
            Ok(GraphEdge {
                a,
                b,
                similarity: edge_similarity(&desc, &proto.segments)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InstanceGraph {
        vertices: cands.to_vec(),
        edges,
    })
}

/// Drops edges below `tau_e`, then keeps, for every vertex and neighbor
/// identity, only the strongest edge (ties: the neighbor in the smaller flat
/// cell). An edge survives only if it is the keeper at both ends.
pub fn prune(graph: &InstanceGraph, cfg: &GroupConfig) -> InstanceGraph {
    let strong = InstanceGraph {
        vertices: graph.vertices.clone(),
        edges: graph
            .edges
            .iter()
            .copied()
            .filter(|e| e.similarity >= cfg.tau_e)
            .collect(),
    };
    let adj = strong.adjacency();
    let mut keep = vec![true; strong.edges.len()];
    for (v, incident) in adj.iter().enumerate() {
        let mut best: BTreeMap<u32, usize> = BTreeMap::new();
        for &e in incident {
            let w = strong.edges[e].other(v);
            let identity = strong.vertices[w].identity;
            match best.get(&identity) {
                Some(&cur) if !beats(&strong, v, e, cur) => {}
                _ => {
                    best.insert(identity, e);
                }
            }
        }
        for &e in incident {
            let identity = strong.vertices[strong.edges[e].other(v)].identity;
            if best[&identity] != e {
                keep[e] = false;
            }
        }
    }
    let edges = strong
        .edges
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| *e)
        .collect();
    InstanceGraph {
        vertices: strong.vertices,
        edges,
    }
}

/// Whether edge `e` should replace `cur` as `v`'s keeper for one identity.
fn beats(g: &InstanceGraph, v: usize, e: usize, cur: usize) -> bool {
    let (se, sc) = (g.edges[e].similarity, g.edges[cur].similarity);
    if se != sc {
        return se > sc;
    }
    let flat = |edge: usize| g.vertices[g.edges[edge].other(v)].cell.flat;
    (flat(e), g.edges[e].other(v)) < (flat(cur), g.edges[cur].other(v))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    /// Vertex indices, ascending.
    pub vertices: Vec<usize>,
    /// Edge indices into the pruned graph, ascending.
    pub edges: Vec<usize>,
}

/// Undirected components, ordered by their smallest flat cell index (ties by
/// smallest vertex index).
pub fn connected_components(graph: &InstanceGraph) -> Vec<Subgraph> {
    let adj = graph.adjacency();
    let n = graph.vertices.len();
    let mut label = vec![usize::MAX; n];
    let mut comps: Vec<Subgraph> = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut verts = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(v) = queue.pop_front() {
            verts.push(v);
            for &e in &adj[v] {
                let w = graph.edges[e].other(v);
                if label[w] == usize::MAX {
                    label[w] = id;
                    queue.push_back(w);
                }
            }
        }
        verts.sort_unstable();
        comps.push(Subgraph {
            vertices: verts,
            edges: Vec::new(),
        });
    }
    for (e, edge) in graph.edges.iter().enumerate() {
        comps[label[edge.a]].edges.push(e);
    }
    let key = |c: &Subgraph| {
        let min_flat = c
            .vertices
            .iter()
            .map(|&v| graph.vertices[v].cell.flat)
            .min()
            .unwrap();
        (min_flat, c.vertices[0])
    };
    comps.sort_by_key(key);
    comps
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceKeypoint {
    pub cell: GridIndex,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub keypoints: BTreeMap<u32, InstanceKeypoint>,
    /// Mean similarity of the surviving edges among the kept keypoints; 0
    /// when there are none.
    pub cohesion: f32,
}

/// Resolves duplicate identities inside each component and applies the
/// minimum-keypoint filter.
pub fn assemble_instances(
    graph: &InstanceGraph,
    components: &[Subgraph],
    store: &PrototypeStore,
    cfg: &GroupConfig,
) -> Vec<Instance> {
    let min_kp = cfg.min_keypoints(store.n_kp());
    let mut out = Vec::new();
    for comp in components {
        let mut total = vec![0f64; graph.vertices.len()];
        for &e in &comp.edges {
            let edge = graph.edges[e];
            total[edge.a] += edge.similarity as f64;
            total[edge.b] += edge.similarity as f64;
        }
        let mut chosen: BTreeMap<u32, usize> = BTreeMap::new();
        for &v in &comp.vertices {
            let identity = graph.vertices[v].identity;
            let better = match chosen.get(&identity) {
                None => true,
                Some(&cur) => {
                    let (a, b) = (&graph.vertices[v], &graph.vertices[cur]);
                    total[v]
                        .total_cmp(&total[cur])
                        .then(a.score.total_cmp(&b.score))
                        .then(b.cell.flat.cmp(&a.cell.flat))
                        .is_gt()
                }
            };
            if better {
                chosen.insert(identity, v);
            }
        }
        if chosen.len() < min_kp {
            continue;
        }
        let kept: Vec<usize> = chosen.values().copied().collect();
        let internal: Vec<f64> = comp
            .edges
            .iter()
            .map(|&e| graph.edges[e])
            .filter(|e| kept.contains(&e.a) && kept.contains(&e.b))
            .map(|e| e.similarity as f64)
            .collect();
        let cohesion = if internal.is_empty() {
            0.0
        } else {
            (internal.iter().sum::<f64>() / internal.len() as f64) as f32
        };
        let keypoints = chosen
            .into_iter()
            .map(|(k, v)| {
                let c = &graph.vertices[v];
                (
                    k,
                    InstanceKeypoint {
                        cell: c.cell,
                        score: c.score,
                    },
                )
            })
            .collect();
        out.push(Instance {
            keypoints,
            cohesion,
        });
    }
    out
}

/// Graph construction, pruning, components and instance assembly.
pub fn group_candidates<M: CellFeatures + Sync + ?Sized>(
    cands: &[CandidateKeypoint],
    store: &PrototypeStore,
    query: &M,
    cfg: &GroupConfig,
) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let graph = build_initial_graph(cands, store, query)?;
    let pruned = prune(&graph, cfg);
    let comps = connected_components(&pruned);
    Ok(assemble_instances(&pruned, &comps, store, cfg))
}
