//! Scalar-loop transcriptions of the matching losses and graph ops, written
//! independently of the tape so tests can compare against them.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xag_core::Tensor;

pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Identity labels for `n` pairs drawn from `ids` identities.
pub fn random_ids(n: usize, ids: u32, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..ids)).collect()
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `(1/n) sum_{i,j} p log(p / (q + eps))` with `p = softmax_j(a_i . b_j/|b_j|)`
/// and `q` the row-normalised identity-match matrix.
pub fn cmpm_direction(a: &Tensor, b: &Tensor, a_ids: &[u32], b_ids: &[u32], eps: f64) -> f64 {
    let n = a.rows();
    let a = to_rows(a);
    let b = to_rows(b);
    let mut total = 0.0;
    for i in 0..n {
        let mut logits = Vec::new();
        for bj in &b {
            let norm = bj.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = a[i].iter().zip(bj).map(|(x, y)| x * y).sum();
            logits.push(dot / norm);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let positives = b_ids.iter().filter(|&&id| id == a_ids[i]).count() as f64;
        for (j, l) in logits.iter().enumerate() {
            let p = (l - m).exp() / z;
            let q = if b_ids[j] == a_ids[i] { 1.0 / positives } else { 0.0 };
            total += p * (p / (q + eps)).ln();
        }
    }
    total / n as f64
}

pub fn cmpm_bidirectional(v: &Tensor, t: &Tensor, ids: &[u32], eps: f64) -> f64 {
    cmpm_direction(v, t, ids, ids, eps) + cmpm_direction(t, v, ids, ids, eps)
}

/// Node-level matching loss: the bidirectional term summed over node slots.
pub fn cmpm_node(v: &[Tensor], t: &[Tensor], ids: &[u32], eps: f64) -> f64 {
    v.iter().zip(t).map(|(a, b)| cmpm_bidirectional(a, b, ids, eps)).sum()
}

/// Adversarial loss on concatenated features: both directions, divided by `n^2`.
pub fn adversarial_cmpm(pv: &Tensor, pt: &Tensor, ids: &[u32], eps: f64) -> f64 {
    let n = pv.rows() as f64;
    (cmpm_direction(pv, pt, ids, ids, eps) + cmpm_direction(pt, pv, ids, ids, eps)) * n / (n * n)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `V <- sigmoid(A V W)` per layer, by explicit index loops.
pub fn gcn(nodes: &Tensor, adjacency: &Tensor, weights: &[Tensor]) -> Tensor {
    let mut v = to_rows(nodes);
    for w in weights {
        let rows = v.len();
        let d_in = v[0].len();
        let d_out = w.cols();
        let mut next = vec![vec![0.0; d_out]; rows];
        for r in 0..rows {
            for c in 0..d_out {
                let mut acc = 0.0;
                for k in 0..rows {
                    for m in 0..d_in {
                        acc += adjacency.get(r, k) * v[k][m] * w.get(m, c);
                    }
                }
                next[r][c] = sigmoid(acc);
            }
        }
        v = next;
    }
    Tensor::from_rows(&v).unwrap()
}

/// Attacked convolution for one graph: append `x`, border the adjacency with
/// ones and a zero corner, convolve, drop the attack row.
pub fn attacked_gcn(nodes: &Tensor, x: &Tensor, adjacency: &Tensor, weights: &[Tensor]) -> Tensor {
    let n = nodes.rows();
    let mut rows = to_rows(nodes);
    rows.push(x.row(0).to_vec());
    let aug = Tensor::from_fn(n + 1, n + 1, |r, c| {
        if r < n && c < n {
            adjacency.get(r, c)
        } else if r == n && c == n {
            0.0
        } else {
            1.0
        }
    });
    let out = gcn(&Tensor::from_rows(&rows).unwrap(), &aug, weights);
    out.slice_rows(0, n).unwrap()
}

/// Batch-major node slots to per-sample concatenations `[f^1 | ... | f^N]`.
pub fn concat_slots(slots: &[Tensor]) -> Tensor {
    let n = slots[0].rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| slots.iter().flat_map(|s| s.row(i).to_vec()).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Per-sample graphs `N x D` from node-major slots `n x D`.
pub fn sample_graph(slots: &[Tensor], i: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = slots.iter().map(|s| s.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Node-major slots from per-sample graphs.
pub fn to_slots(graphs: &[Tensor]) -> Vec<Tensor> {
    let n_nodes = graphs[0].rows();
    (0..n_nodes)
        .map(|l| {
            let rows: Vec<Vec<f64>> = graphs.iter().map(|g| g.row(l).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        })
        .collect()
}

/// Every ordering of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}
