//! Community detection over embedded nodes: k-nearest-neighbor similarity
//! graphs and a deterministic, seedable Leiden implementation
//! (local moving, refinement, aggregation).
//!
//! Node processing order is derived from the sorted node ids plus the seed,
//! never from input order, so the partition is a pure function of
//! (graph, seed, resolution) and survives any permutation of the input.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::vector::{cosine_similarity, top_k_by_similarity, Embedding};
use crate::Real;

/// Undirected similarity graph. Each pair is stored once (`i < j`), weights
/// are positive, self-loops excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph<S = Real> {
    pub node_ids: Vec<String>,
    pub edges: Vec<(usize, usize, S)>,
    pub knn_k: usize,
    pub min_sim: S,
}

/// A partition of graph nodes into clusters indexed `0..num_clusters`,
/// relabeled so that cluster 0 contains the smallest node id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub assignment: BTreeMap<String, usize>,
    pub num_clusters: usize,
}

impl Clustering {
    /// Member ids per cluster, each list sorted.
    pub fn groups(&self) -> Vec<Vec<String>> {
        let mut groups = vec![Vec::new(); self.num_clusters];
        for (id, &c) in &self.assignment {
            groups[c].push(id.clone());
        }
        groups
    }
}

/// Connect each node to its `knn_k` nearest neighbors by cosine similarity,
/// keep edges at or above `min_sim` (non-positive weights always drop), and
/// symmetrize.
pub fn build_similarity_graph<S: Scalar>(
    vectors: &[(String, Embedding<S>)],
    knn_k: usize,
    min_sim: S,
) -> Result<SimilarityGraph<S>> {
    let n = vectors.len();
    let mut weights: BTreeMap<(usize, usize), S> = BTreeMap::new();
    for i in 0..n {
        let others: Vec<(String, Embedding<S>)> = vectors
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (id, v))| (id.clone(), v.clone()))
            .collect();
        let neighbors = top_k_by_similarity(&vectors[i].1, &others, knn_k)?;
        for nbr_id in neighbors {
            let j = vectors
                .iter()
                .position(|(id, _)| *id == nbr_id)
                .expect("neighbor id from the same input");
            let sim = cosine_similarity(&vectors[i].1, &vectors[j].1)?;
            if sim >= min_sim && sim > S::zero() {
                weights.insert((i.min(j), i.max(j)), sim);
            }
        }
    }
    Ok(SimilarityGraph {
        node_ids: vectors.iter().map(|(id, _)| id.clone()).collect(),
        edges: weights.into_iter().map(|((i, j), w)| (i, j, w)).collect(),
        knn_k,
        min_sim,
    })
}

/// Working graph in canonical (sorted-id) index space.
struct WorkGraph<S> {
    n: usize,
    /// Sorted adjacency per node; self-loops allowed after aggregation.
    adj: Vec<Vec<(usize, S)>>,
    /// Weighted degree; a self-loop counts twice.
    degree: Vec<S>,
    /// Sum of all degrees (2m). Zero means no edges.
    total: S,
}

impl<S: Scalar> WorkGraph<S> {
    fn from_edges(n: usize, edges: &[(usize, usize, S)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i == j {
                adj[i].push((i, w));
            } else {
                adj[i].push((j, w));
                adj[j].push((i, w));
            }
        }
        for list in &mut adj {
            list.sort_by_key(|&(nbr, _)| nbr);
        }
        let degree: Vec<S> = adj
            .iter()
            .enumerate()
            .map(|(v, list)| {
                list.iter().fold(
                    S::zero(),
                    |acc, &(nbr, w)| {
                        if nbr == v {
                            acc + w + w
                        } else {
                            acc + w
                        }
                    },
                )
            })
            .collect();
        let total = degree.iter().fold(S::zero(), |acc, d| acc + *d);
        Self {
            n,
            adj,
            degree,
            total,
        }
    }
}

/// Weight from `v` to each community among its neighbors (self-loops
/// excluded). Returned sorted by community index.
fn neighbor_comm_weights<S: Scalar>(
    graph: &WorkGraph<S>,
    v: usize,
    comm: &[usize],
) -> Vec<(usize, S)> {
    let mut weights: BTreeMap<usize, S> = BTreeMap::new();
    for &(nbr, w) in &graph.adj[v] {
        if nbr == v {
            continue;
        }
        let entry = weights.entry(comm[nbr]).or_insert_with(S::zero);
        *entry = *entry + w;
    }
    weights.into_iter().collect()
}

/// Gain (scaled by m) of placing isolated `v` into a community with total
/// degree `comm_tot` and `k_in` edge weight to `v`.
fn move_gain<S: Scalar>(graph: &WorkGraph<S>, v: usize, k_in: S, comm_tot: S, resolution: S) -> S {
    k_in - resolution * graph.degree[v] * comm_tot / graph.total
}

/// Local moving phase: repeatedly move nodes to the neighbor community with
/// the highest positive modularity gain. Ties break toward the smallest
/// community index. Visit order is a seeded shuffle of canonical order.
fn local_move<S: Scalar>(
    graph: &WorkGraph<S>,
    init: &[usize],
    resolution: S,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut comm = init.to_vec();
    let mut comm_tot = vec![S::zero(); graph.n];
    for v in 0..graph.n {
        comm_tot[comm[v]] = comm_tot[comm[v]] + graph.degree[v];
    }
    let mut order: Vec<usize> = (0..graph.n).collect();
    order.shuffle(rng);

    for _sweep in 0..32 {
        let mut moved = false;
        for &v in &order {
            let old = comm[v];
            comm_tot[old] = comm_tot[old] - graph.degree[v];
            let neighbor_weights = neighbor_comm_weights(graph, v, &comm);
            let k_old = neighbor_weights
                .iter()
                .find(|(c, _)| *c == old)
                .map_or(S::zero(), |(_, w)| *w);
            let mut best_comm = old;
            let mut best_gain = move_gain(graph, v, k_old, comm_tot[old], resolution);
            for (c, k_in) in neighbor_weights {
                if c == old {
                    continue;
                }
                let gain = move_gain(graph, v, k_in, comm_tot[c], resolution);
                if gain > best_gain || (gain == best_gain && c < best_comm) {
                    best_gain = gain;
                    best_comm = c;
                }
            }
            comm_tot[best_comm] = comm_tot[best_comm] + graph.degree[v];
            if best_comm != old {
                comm[v] = best_comm;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    comm
}

/// Refinement phase: inside each community from the local move, re-grow
/// communities from singletons by merging only along edges (which keeps
/// every refined community connected).
fn refine<S: Scalar>(
    graph: &WorkGraph<S>,
    comm: &[usize],
    resolution: S,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut refined: Vec<usize> = (0..graph.n).collect();
    let mut ref_tot: Vec<S> = graph.degree.clone();
    let mut ref_size = vec![1usize; graph.n];
    let mut order: Vec<usize> = (0..graph.n).collect();
    order.shuffle(rng);

    for &v in &order {
        if ref_size[refined[v]] > 1 {
            continue; // only singletons merge, as in Leiden's refinement
        }
        let old = refined[v];
        ref_tot[old] = ref_tot[old] - graph.degree[v];
        let mut candidates: BTreeMap<usize, S> = BTreeMap::new();
        for &(nbr, w) in &graph.adj[v] {
            if nbr == v || comm[nbr] != comm[v] {
                continue;
            }
            let entry = candidates.entry(refined[nbr]).or_insert_with(S::zero);
            *entry = *entry + w;
        }
        let mut best: Option<(usize, S)> = None;
        for (c, k_in) in candidates {
            if c == old {
                continue;
            }
            let gain = move_gain(graph, v, k_in, ref_tot[c], resolution);
            if gain > S::zero() && best.is_none_or(|(_, g)| gain > g) {
                best = Some((c, gain));
            }
        }
        match best {
            Some((c, _)) => {
                ref_tot[c] = ref_tot[c] + graph.degree[v];
                ref_size[c] += 1;
                ref_size[old] -= 1;
                refined[v] = c;
            }
            None => {
                ref_tot[old] = ref_tot[old] + graph.degree[v];
            }
        }
    }
    refined
}

/// Renumber a partition to contiguous indices `0..k` by first appearance.
fn compact(partition: &[usize]) -> (Vec<usize>, usize) {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(partition.len());
    for &p in partition {
        let next = map.len();
        out.push(*map.entry(p).or_insert(next));
    }
    (out, map.len())
}

/// Collapse the refined partition into a supergraph.
fn aggregate<S: Scalar>(graph: &WorkGraph<S>, refined: &[usize]) -> (WorkGraph<S>, Vec<usize>) {
    let (node_to_super, n_super) = compact(refined);
    let mut weights: BTreeMap<(usize, usize), S> = BTreeMap::new();
    for v in 0..graph.n {
        for &(nbr, w) in &graph.adj[v] {
            if nbr < v {
                continue; // visit each undirected edge once (and self-loops)
            }
            let a = node_to_super[v];
            let b = node_to_super[nbr];
            let key = (a.min(b), a.max(b));
            let entry = weights.entry(key).or_insert_with(S::zero);
            *entry = *entry + w;
        }
    }
    let edges: Vec<(usize, usize, S)> = weights.into_iter().map(|((a, b), w)| (a, b, w)).collect();
    (WorkGraph::from_edges(n_super, &edges), node_to_super)
}

/// Partition a similarity graph with the Leiden algorithm.
///
/// Deterministic for a fixed `(graph, seed, resolution)`; clusters are
/// relabeled by their smallest contained node id. Layers of at most two
/// nodes collapse into a single cluster so the aggregation loop cannot
/// oscillate on degenerate layers.
pub fn cluster<S: Scalar>(graph: &SimilarityGraph<S>, seed: u64, resolution: S) -> Clustering {
    let n = graph.node_ids.len();
    if n == 0 {
        return Clustering {
            assignment: BTreeMap::new(),
            num_clusters: 0,
        };
    }
    if n <= 2 {
        let assignment = graph.node_ids.iter().map(|id| (id.clone(), 0)).collect();
        return Clustering {
            assignment,
            num_clusters: 1,
        };
    }

    // Canonical index space: node ids sorted.
    let mut sorted_ids: Vec<&String> = graph.node_ids.iter().collect();
    sorted_ids.sort();
    let canon_of: BTreeMap<&String, usize> = sorted_ids
        .iter()
        .enumerate()
        .map(|(idx, id)| (*id, idx))
        .collect();
    let canon_edges: Vec<(usize, usize, S)> = graph
        .edges
        .iter()
        .map(|(i, j, w)| {
            let a = canon_of[&graph.node_ids[*i]];
            let b = canon_of[&graph.node_ids[*j]];
            (a.min(b), a.max(b), *w)
        })
        .collect();
    let base = WorkGraph::from_edges(n, &canon_edges);

    let membership = if base.total == S::zero() {
        (0..n).collect() // no edges: all singletons
    } else {
        leiden(&base, seed, resolution)
    };

    // Split any cluster that is not connected in the base graph; splitting a
    // disconnected cluster never lowers modularity.
    let membership = split_disconnected(&base, &membership);

    // Relabel by smallest contained node id (canonical index order).
    let (membership, num_clusters) = compact(&membership);
    let assignment = sorted_ids
        .iter()
        .enumerate()
        .map(|(idx, id)| ((*id).clone(), membership[idx]))
        .collect();
    Clustering {
        assignment,
        num_clusters,
    }
}

fn leiden<S: Scalar>(base: &WorkGraph<S>, seed: u64, resolution: S) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orig_to_level: Vec<usize> = (0..base.n).collect();
    let mut level = WorkGraph::from_edges(base.n, &{
        let mut edges = Vec::new();
        for v in 0..base.n {
            for &(nbr, w) in &base.adj[v] {
                if nbr >= v {
                    edges.push((v, nbr, w));
                }
            }
        }
        edges
    });
    let mut init: Vec<usize> = (0..level.n).collect();

    for _depth in 0..64 {
        let comm = local_move(&level, &init, resolution, &mut rng);
        let refined = refine(&level, &comm, resolution, &mut rng);
        let (refined_compact, n_super) = compact(&refined);
        if n_super == level.n {
            // Nothing merged: the local-move partition is final.
            return orig_to_level.iter().map(|&l| comm[l]).collect();
        }
        let (next, node_to_super) = aggregate(&level, &refined_compact);
        // Seed the next level with the local-move communities projected
        // onto supernodes.
        let mut super_init = vec![0usize; n_super];
        for v in 0..level.n {
            super_init[node_to_super[v]] = comm[v];
        }
        let (super_init, _) = compact(&super_init);
        for l in orig_to_level.iter_mut() {
            *l = node_to_super[*l];
        }
        level = next;
        init = super_init;
    }
    orig_to_level.iter().map(|&l| init[l]).collect()
}

/// Split disconnected clusters into their connected components.
fn split_disconnected<S: Scalar>(graph: &WorkGraph<S>, membership: &[usize]) -> Vec<usize> {
    let mut out = vec![usize::MAX; graph.n];
    let mut next = 0usize;
    for start in 0..graph.n {
        if out[start] != usize::MAX {
            continue;
        }
        let label = next;
        next += 1;
        let mut stack = vec![start];
        out[start] = label;
        while let Some(v) = stack.pop() {
            for &(nbr, _) in &graph.adj[v] {
                if nbr != v && membership[nbr] == membership[v] && out[nbr] == usize::MAX {
                    out[nbr] = label;
                    stack.push(nbr);
                }
            }
        }
    }
    out
}

/// Modularity of a partition of the graph, at the given resolution.
pub fn modularity<S: Scalar>(
    graph: &SimilarityGraph<S>,
    clustering: &Clustering,
    resolution: S,
) -> S {
    let comm: Vec<usize> = graph
        .node_ids
        .iter()
        .map(|id| clustering.assignment[id])
        .collect();
    let n_comms = clustering.num_clusters.max(1);
    let mut intra = vec![S::zero(); n_comms];
    let mut degree = vec![S::zero(); graph.node_ids.len()];
    let mut m = S::zero();
    for &(i, j, w) in &graph.edges {
        degree[i] = degree[i] + w;
        degree[j] = degree[j] + w;
        m = m + w;
        if comm[i] == comm[j] {
            intra[comm[i]] = intra[comm[i]] + w;
        }
    }
    if m == S::zero() {
        return S::zero();
    }
    let two_m = m + m;
    let mut tot = vec![S::zero(); n_comms];
    for (v, d) in degree.iter().enumerate() {
        tot[comm[v]] = tot[comm[v]] + *d;
    }
    let mut q = S::zero();
    for c in 0..n_comms {
        let frac_tot = tot[c] / two_m;
        q = q + intra[c] / m - resolution * frac_tot * frac_tot;
    }
    q
}

/// All-singleton partition of a graph, for quality-floor comparisons.
pub fn singleton_clustering<S: Scalar>(graph: &SimilarityGraph<S>) -> Clustering {
    let mut sorted: Vec<&String> = graph.node_ids.iter().collect();
    sorted.sort();
    Clustering {
        assignment: sorted
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect(),
        num_clusters: graph.node_ids.len(),
    }
}
