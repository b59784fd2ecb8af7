//! Per-sample structured graphs, attack-node implantation and graph convolution.
//!
//! Two layouts are supported. The per-graph functions ([`gcn_forward`] and
//! friends) take one `N x D` node matrix. Training works node-major instead:
//! slot `l` of a `&[Var]` holds node `l` of every sample in the batch as an
//! `n x D` matrix, so one convolution layer is `sigmoid((sum_k A[l][k] X_k) W)`
//! per slot. Both layouts compute the same thing; see the tests.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::Modality;

/// Default number of graph-convolution layers.
pub const DEFAULT_GCN_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraph {
    nodes: Tensor,
    adjacency: Tensor,
    modality: Modality,
    identity: u32,
}

impl FeatureGraph {
    pub fn new(nodes: Tensor, adjacency: Tensor, modality: Modality, identity: u32) -> Result<Self> {
        let n = nodes.rows();
        if adjacency.shape() != (n, n) {
            return Err(Error::dim("feature graph", nodes.shape(), adjacency.shape()));
        }
        for i in 0..n {
            for j in 0..n {
                let a = adjacency.get(i, j);
                if a < 0.0 || (a - adjacency.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Contract(
                        "adjacency must be symmetric and nonnegative".into(),
                    ));
                }
            }
        }
        Ok(Self {
            nodes,
            adjacency,
            modality,
            identity,
        })
    }

    /// Graph over `nodes` with the default complete adjacency.
    pub fn complete(nodes: Tensor, modality: Modality, identity: u32) -> Result<Self> {
        let adjacency = build_adjacency(nodes.rows())?;
        Self::new(nodes, adjacency, modality, identity)
    }

    pub fn nodes(&self) -> &Tensor {
        &self.nodes
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn identity(&self) -> u32 {
        self.identity
    }

    /// Text dump: a `N D modality identity` header, then adjacency rows, then
    /// node rows, 17 significant digits each.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.nodes.rows(),
            self.nodes.cols(),
            self.modality.name(),
            self.identity
        );
        for t in [&self.adjacency, &self.nodes] {
            for r in 0..t.rows() {
                let line: Vec<String> = t.row(r).iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }
}

/// A graph with the attack node appended as its last node.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGraph {
    pub adjacency: Tensor,
    pub nodes: Tensor,
    pub attack_row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    layers: Vec<Tensor>,
}

impl GcnParams {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Contract("graph convolution needs at least one layer".into()))?;
        let d = first.rows();
        for w in &layers {
            if w.shape() != (d, d) {
                return Err(Error::dim("gcn weights", (d, d), w.shape()));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform in `[-sqrt(6/(2D)), sqrt(6/(2D))]`.
    pub fn init(dim: usize, layer_count: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (6.0 / (2.0 * dim as f64)).sqrt();
        let layers = (0..layer_count)
            .map(|_| Tensor::from_fn(dim, dim, |_, _| rng.random_range(-bound..=bound)))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor] {
        &mut self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackNode {
    pub modality: Modality,
    pub vector: Tensor,
}

impl AttackNode {
    pub fn new(modality: Modality, vector: Tensor) -> Result<Self> {
        if vector.rows() != 1 {
            return Err(Error::dim("attack node", (1, vector.cols()), vector.shape()));
        }
        if !vector.is_finite() {
            return Err(Error::Contract("attack node must be finite".into()));
        }
        Ok(Self { modality, vector })
    }
}

/// Complete graph with self-loops, every entry `1/N`.
pub fn build_adjacency(n_nodes: usize) -> Result<Tensor> {
    if n_nodes == 0 {
        return Err(Error::Contract("a graph needs at least one node".into()));
    }
    Ok(Tensor::filled(n_nodes, n_nodes, 1.0 / n_nodes as f64))
}

/// `[[A, 1], [1^T, 0]]`: the attack node links to every node, not to itself.
pub fn augment_adjacency(adjacency: &Tensor) -> Tensor {
    let n = adjacency.rows();
    Tensor::from_fn(n + 1, n + 1, |r, c| match (r < n, c < n) {
        (true, true) => adjacency.get(r, c),
        (false, false) => 0.0,
        _ => 1.0,
    })
}

pub fn implant_attack_node(g: &FeatureGraph, x: &AttackNode) -> Result<AugmentedGraph> {
    if x.modality != g.modality {
        return Err(Error::Contract(format!(
            "cannot implant a {} attack node into a {} graph",
            x.modality.name(),
            g.modality.name()
        )));
    }
    if x.vector.cols() != g.nodes.cols() {
        return Err(Error::dim("implant_attack_node", g.nodes.shape(), x.vector.shape()));
    }
    Ok(AugmentedGraph {
        adjacency: augment_adjacency(&g.adjacency),
        nodes: Tensor::concat_rows(&[&g.nodes, &x.vector])?,
        attack_row: g.nodes.rows(),
    })
}

/// `V <- sigmoid(A V W)` once per layer.
pub fn gcn_forward(nodes: &Tensor, adjacency: &Tensor, params: &GcnParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(nodes.clone());
    let weights: Vec<Var> = params.layers.iter().map(|w| tape.constant(w.clone())).collect();
    let out = gcn_forward_tape(&mut tape, v, adjacency, &weights)?;
    Ok(tape.value(out).clone())
}

pub fn gcn_forward_tape(tape: &mut Tape, nodes: Var, adjacency: &Tensor, weights: &[Var]) -> Result<Var> {
    let n = tape.shape(nodes).0;
    if adjacency.shape() != (n, n) {
        return Err(Error::dim("gcn_forward", adjacency.shape(), tape.shape(nodes)));
    }
    let a = tape.constant(adjacency.clone());
    let mut v = nodes;
    for &w in weights {
        let av = tape.matmul(a, v)?;
        let avw = tape.matmul(av, w)?;
        v = tape.sigmoid(avw);
    }
    Ok(v)
}

/// Node-major graph convolution over a batch sharing one adjacency.
pub fn gcn_forward_node_major(
    tape: &mut Tape,
    node_batches: &[Var],
    adjacency: &Tensor,
    weights: &[Var],
) -> Result<Vec<Var>> {
    let n = node_batches.len();
    if adjacency.shape() != (n, n) {
        return Err(Error::dim("gcn_forward_node_major", adjacency.shape(), (n, n)));
    }
    let mut current = node_batches.to_vec();
    for &w in weights {
        let mut next = Vec::with_capacity(n);
        for l in 0..n {
            let mut agg: Option<Var> = None;
            for (k, &x) in current.iter().enumerate() {
                let coeff = adjacency.get(l, k);
                if coeff == 0.0 {
                    continue;
                }
                let term = if coeff == 1.0 { x } else { tape.scale(x, coeff) };
                agg = Some(match agg {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            let agg = match agg {
                Some(v) => v,
                None => tape.scale(current[l], 0.0),
            };
            let z = tape.matmul(agg, w)?;
            next.push(tape.sigmoid(z));
        }
        current = next;
    }
    Ok(current)
}

/// Node-major convolution on attacked graphs: the attack vector joins every
/// sample's graph as node `N` through the augmented adjacency, and its output
/// slot is dropped.
pub fn attacked_gcn_node_major(
    tape: &mut Tape,
    node_batches: &[Var],
    attack: Var,
    adjacency: &Tensor,
    weights: &[Var],
) -> Result<Vec<Var>> {
    let n = node_batches
        .first()
        .map(|&v| tape.shape(v).0)
        .ok_or_else(|| Error::Contract("empty node set".into()))?;
    let repeated = tape.repeat_rows(attack, n)?;
    let mut slots = node_batches.to_vec();
    slots.push(repeated);
    let augmented = augment_adjacency(adjacency);
    let mut out = gcn_forward_node_major(tape, &slots, &augmented, weights)?;
    out.pop();
    Ok(out)
}

/// Drops the last (attack) row of a convolved augmented node matrix.
pub fn strip_attack_node(out: &Tensor) -> Result<Tensor> {
    if out.rows() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 rows to strip an attack node, got {}",
            out.rows()
        )));
    }
    out.slice_rows(0, out.rows() - 1)
}

/// Row-major flattening of `N x D` node features into one `1 x N*D` vector,
/// in ascending node order.
pub fn concat_semantic_global(nodes: &Tensor) -> Tensor {
    Tensor::new(1, nodes.len(), nodes.data().to_vec()).expect("nonempty tensor")
}
