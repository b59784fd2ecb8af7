//! Finite-difference checks of every differentiable operation, from single
//! tape ops up to the full adversarial loss, on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{encode_images_batch, ft_batch, project_texts_batch, FtVars, SyntheticImageSample, SyntheticTextSample, FT_DEPTH};
use crate::error::Result;
use crate::graph::{attacked_gcn_node_major, build_adjacency, gcn_forward_tape};
use crate::losses::{
    adversarial_cmpm_tape, attack_objective_tape, cmpm_bidirectional_tape, cmpm_direction_tape, cmpm_global_tape,
    cmpm_node_tape, total_adversarial_loss_tape, LossWeights, MatchLabels,
};
use crate::numcore::gradcheck::{check_gradients, GradCheck, DEFAULT_STEP};
use crate::numcore::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub check: GradCheck,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Uniform entries kept at least `gap` away from zero.
fn away_from_zero(rows: usize, cols: usize, gap: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let m: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values per column so every group maximum is separated from the
/// runner-up by at least `gap`.
fn separated(rows: usize, cols: usize, gap: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for c in 0..cols {
        let mut ranks: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            ranks.swap(i, rng.random_range(0..=i));
        }
        for (r, rank) in ranks.into_iter().enumerate() {
            t.set(r, c, rank as f64 * gap + rng.random_range(0.0..gap / 4.0));
        }
    }
    t
}

/// `sum(r * out)` for a fixed random `r`, so every output entry matters.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rc = tape.constant(r.clone());
    let h = tape.hadamard(out, rc)?;
    Ok(tape.sum(h))
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<OpCheck>,
}

impl Suite {
    fn run<F>(&mut self, name: &'static str, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let check = check_gradients(inputs, DEFAULT_STEP, f)?;
        self.out.push(OpCheck { name, check });
        Ok(())
    }

    fn weights(&mut self, rows: usize, cols: usize) -> Tensor {
        uniform(rows, cols, 1.0, &mut self.rng)
    }

    /// One elementwise-or-reshaping op of a single `rows x cols` input.
    fn unary(&mut self, name: &'static str, x: Tensor, out_shape: (usize, usize), op: fn(&mut Tape, Var) -> Result<Var>) -> Result<()> {
        let r = self.weights(out_shape.0, out_shape.1);
        self.run(name, &[x], move |t, v| {
            let o = op(t, v[0])?;
            project(t, o, &r)
        })
    }
}

fn labels_for(n: usize, rng: &mut impl Rng) -> Result<MatchLabels> {
    let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..(n as u32).max(2))).collect();
    MatchLabels::from_identities(&ids, &ids)
}

/// Runs every check for one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    let (n, d) = (3, 4);

    let a = s.weights(n, d);
    let b = s.weights(d, 2);
    let r = s.weights(n, 2);
    s.run("matmul", &[a, b], move |t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, &r)
    })?;
    for (name, op) in [
        ("add", Tape::add as fn(&mut Tape, Var, Var) -> Result<Var>),
        ("sub", Tape::sub),
        ("hadamard", Tape::hadamard),
    ] {
        let (x, y, r) = (s.weights(n, d), s.weights(n, d), s.weights(n, d));
        s.run(name, &[x, y], move |t, v| {
            let o = op(t, v[0], v[1])?;
            project(t, o, &r)
        })?;
    }
    let x = s.weights(n, d);
    s.unary("scale", x, (n, d), |t, v| Ok(t.scale(v, -1.7)))?;
    let (x, row, r) = (s.weights(n, d), s.weights(1, d), s.weights(n, d));
    s.run("add_row_broadcast", &[x, row], move |t, v| {
        let o = t.add_row_broadcast(v[0], v[1])?;
        project(t, o, &r)
    })?;
    let x = s.weights(1, d);
    s.unary("repeat_rows", x, (n, d), |t, v| t.repeat_rows(v, 3))?;
    let x = s.weights(n, d);
    s.unary("sigmoid", x, (n, d), |t, v| Ok(t.sigmoid(v)))?;
    let x = away_from_zero(n, d, 0.05, &mut s.rng);
    s.unary("relu", x, (n, d), |t, v| Ok(t.relu(v)))?;
    let x = Tensor::from_fn(n, d, |_, _| s.rng.random_range(0.2..2.0));
    s.unary("log", x, (n, d), |t, v| Ok(t.log(v)))?;
    let x = s.weights(n, d);
    s.unary("exp", x, (n, d), |t, v| Ok(t.exp(v)))?;
    let x = s.weights(n, d);
    s.run("sum", &[x], |t, v| {
        let sq = t.hadamard(v[0], v[0])?;
        Ok(t.sum(sq))
    })?;
    let x = s.weights(n, d);
    s.run("mean", &[x], |t, v| {
        let sq = t.hadamard(v[0], v[0])?;
        Ok(t.mean(sq))
    })?;
    let (x, y, r) = (s.weights(n, d), s.weights(2, d), s.weights(n + 2, d));
    s.run("concat_rows", &[x, y], move |t, v| {
        let o = t.concat_rows(&[v[0], v[1]])?;
        project(t, o, &r)
    })?;
    let (x, y, r) = (s.weights(n, d), s.weights(n, 2), s.weights(n, d + 2));
    s.run("concat_cols", &[x, y], move |t, v| {
        let o = t.concat_cols(&[v[0], v[1]])?;
        project(t, o, &r)
    })?;
    let x = s.weights(n, d);
    s.unary("transpose", x, (d, n), |t, v| Ok(t.transpose(v)))?;
    let x = s.weights(4, d);
    s.unary("slice_rows", x, (2, d), |t, v| t.slice_rows(v, 1, 2))?;
    let x = s.weights(n, d);
    s.unary("row_softmax", x, (n, d), |t, v| Ok(t.row_softmax(v)))?;
    let x = s.weights(n, d);
    s.unary("row_log_softmax", x, (n, d), |t, v| Ok(t.row_log_softmax(v)))?;
    let x = away_from_zero(n, d, 0.1, &mut s.rng);
    s.unary("l2_normalize_rows", x, (n, d), |t, v| Ok(t.l2_normalize_rows(v)))?;
    let x = separated(6, d, 0.1, &mut s.rng);
    s.unary("group_max_rows", x, (2, d), |t, v| t.group_max_rows(v, 3))?;
    let (x, w, bias, r) = (s.weights(n, d), s.weights(d, d), s.weights(1, d), s.weights(n, d));
    s.run("linear", &[x, w, bias], move |t, v| {
        let o = t.linear(v[0], v[1], v[2])?;
        project(t, o, &r)
    })?;

    let n_nodes = 3;
    let adjacency = build_adjacency(n_nodes)?;
    let (nodes, w0, w1, r) = (s.weights(n_nodes, d), s.weights(d, d), s.weights(d, d), s.weights(n_nodes, d));
    let adj = adjacency.clone();
    s.run("gcn_forward", &[nodes, w0, w1], move |t, v| {
        let o = gcn_forward_tape(t, v[0], &adj, &v[1..])?;
        project(t, o, &r)
    })?;

    let slots: Vec<Tensor> = (0..n_nodes).map(|_| s.weights(n, d)).collect();
    let (x, w0, w1) = (s.weights(1, d), s.weights(d, d), s.weights(d, d));
    let rs: Vec<Tensor> = (0..n_nodes).map(|_| s.weights(n, d)).collect();
    let mut inputs = slots.clone();
    inputs.extend([x, w0, w1]);
    let adj = adjacency.clone();
    s.run("attacked_gcn", &inputs, move |t, v| {
        let out = attacked_gcn_node_major(t, &v[..n_nodes], v[n_nodes], &adj, &v[n_nodes + 1..])?;
        let mut total = None;
        for (o, r) in out.into_iter().zip(&rs) {
            let p = project(t, o, r)?;
            total = Some(match total {
                Some(acc) => t.add(acc, p)?,
                None => p,
            });
        }
        Ok(total.expect("nodes"))
    })?;

    let tokens = s.weights(2 * n, d);
    let mut inputs = vec![tokens];
    for _ in 0..FT_DEPTH {
        let w = uniform(d, d, 0.8, &mut s.rng);
        inputs.push(w);
        inputs.push(uniform(1, d, 0.3, &mut s.rng));
    }
    let rs: Vec<Tensor> = (0..2).map(|_| s.weights(n, d)).collect();
    s.run("ft_transform", &inputs, move |t, v| {
        let ft = vec![FtVars {
            weights: (0..FT_DEPTH).map(|k| v[1 + 2 * k]).collect(),
            biases: (0..FT_DEPTH).map(|k| v[2 + 2 * k]).collect(),
        }];
        let out = ft_batch(t, &ft, v[0], 2)?;
        project(t, out[0], &rs[0])
    })?;

    let labels = labels_for(n, &mut s.rng)?;
    let eps = 1e-8;
    let (fa, fb) = (s.weights(n, d), s.weights(n, d));
    let l = labels.clone();
    s.run("cmpm_direction", &[fa, fb], move |t, v| cmpm_direction_tape(t, v[0], v[1], &l, eps))?;

    let node_inputs: Vec<Tensor> = (0..2 * n_nodes).map(|_| s.weights(n, d)).collect();
    let l = labels.clone();
    s.run("cmpm_node", &node_inputs, move |t, v| cmpm_node_tape(t, &v[..n_nodes], &v[n_nodes..], &l, eps))?;

    let (gv, gt) = (s.weights(n, n_nodes * d), s.weights(n, n_nodes * d));
    let l = labels.clone();
    s.run("cmpm_global", &[gv, gt], move |t, v| cmpm_global_tape(t, v[0], v[1], &l, eps))?;

    let fixed: Vec<Tensor> = (0..2 * n_nodes).map(|_| s.weights(n, d)).collect();
    let gcn_w: Vec<Tensor> = (0..2).map(|_| s.weights(d, d)).collect();
    let (xv, xt) = (s.weights(1, d), s.weights(1, d));
    let l = labels.clone();
    let adj = adjacency.clone();
    s.run("attack_objective", &[xv, xt], move |t, v| {
        let consts: Vec<Var> = fixed.iter().map(|f| t.constant(f.clone())).collect();
        let w: Vec<Var> = gcn_w.iter().map(|f| t.constant(f.clone())).collect();
        let av = attacked_gcn_node_major(t, &consts[..n_nodes], v[0], &adj, &w)?;
        let at = attacked_gcn_node_major(t, &consts[n_nodes..], v[1], &adj, &w)?;
        attack_objective_tape(t, &av, &at, &l, eps)
    })?;

    let (pv, pt) = (s.weights(n, n_nodes * d), s.weights(n, n_nodes * d));
    let l = labels.clone();
    s.run("adversarial_cmpm", &[pv, pt], move |t, v| adversarial_cmpm_tape(t, v[0], v[1], &l, eps))?;

    // Full adversarial objective through the encoders, FT bank and attacked
    // convolution, differentiated with respect to every trainable tensor.
    let (k, m, d_in) = (2, 3, 5);
    let images: Vec<SyntheticImageSample> = (0..n)
        .map(|i| SyntheticImageSample {
            patches: (0..n_nodes).map(|_| uniform(k, d_in, 1.0, &mut s.rng)).collect(),
            stage: uniform(1, d_in, 1.0, &mut s.rng),
            identity: i as u32,
        })
        .collect();
    let texts: Vec<SyntheticTextSample> = (0..n)
        .map(|i| SyntheticTextSample {
            tokens: uniform(m, d_in, 1.0, &mut s.rng),
            identity: i as u32,
        })
        .collect();
    let labels = MatchLabels::from_identities(&[0, 1, 2], &[0, 1, 2])?;
    let mut inputs = vec![
        uniform(d_in, d, 0.8, &mut s.rng),
        uniform(d_in, d, 0.8, &mut s.rng),
        uniform(d_in, d, 0.8, &mut s.rng),
    ];
    for _ in 0..n_nodes {
        for _ in 0..FT_DEPTH {
            inputs.push(uniform(d, d, 0.8, &mut s.rng));
            inputs.push(uniform(1, d, 0.3, &mut s.rng));
        }
    }
    inputs.push(s.weights(d, d));
    inputs.push(s.weights(d, d));
    let (xv, xt) = (s.weights(1, d), s.weights(1, d));
    let weights = LossWeights {
        lambda1: 0.7,
        lambda2: 1.3,
        epsilon: eps,
    };
    s.run("total_adversarial_loss", &inputs, move |t, v| {
        let ft: Vec<FtVars> = (0..n_nodes)
            .map(|l| {
                let base = 3 + l * 2 * FT_DEPTH;
                FtVars {
                    weights: (0..FT_DEPTH).map(|k| v[base + 2 * k]).collect(),
                    biases: (0..FT_DEPTH).map(|k| v[base + 2 * k + 1]).collect(),
                }
            })
            .collect();
        let vars = crate::encoders::EncoderVars {
            image_projection: v[0],
            stage_projection: v[1],
            text_projection: v[2],
            ft,
        };
        let gcn = &v[v.len() - 2..];
        let img_refs: Vec<&SyntheticImageSample> = images.iter().collect();
        let txt_refs: Vec<&SyntheticTextSample> = texts.iter().collect();
        let (image_nodes, image_stage) = encode_images_batch(t, &vars, &img_refs)?;
        let (tokens, m) = project_texts_batch(t, &vars, &txt_refs)?;
        let pooled = t.group_max_rows(tokens, m)?;
        let text_nodes = ft_batch(t, &vars.ft, tokens, m)?;
        let stage = cmpm_bidirectional_tape(t, image_stage, pooled, &labels, eps)?;
        let node = cmpm_node_tape(t, &image_nodes, &text_nodes, &labels, eps)?;
        let xv = t.constant(xv.clone());
        let xt = t.constant(xt.clone());
        let pv = attacked_gcn_node_major(t, &image_nodes, xv, &adjacency, gcn)?;
        let pt = attacked_gcn_node_major(t, &text_nodes, xt, &adjacency, gcn)?;
        let pv = t.concat_cols(&pv)?;
        let pt = t.concat_cols(&pt)?;
        let adv = adversarial_cmpm_tape(t, pv, pt, &labels, eps)?;
        total_adversarial_loss_tape(t, stage, node, adv, &weights)
    })?;

    Ok(s.out)
}
