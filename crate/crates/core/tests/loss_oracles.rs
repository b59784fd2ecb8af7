mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xag_core::encoders::{encode_image, ft_transform, EncoderParams, FtBank, ModelDims, SyntheticImageSample, FT_DEPTH};
use xag_core::graph::{attacked_gcn_node_major, build_adjacency, gcn_forward, GcnParams};
use xag_core::losses::{
    adversarial_cmpm, attack_objective, cmpm_directional, cmpm_global, cmpm_node, match_prob, total_adversarial_loss,
    LossWeights, MatchLabels, DEFAULT_EPSILON,
};
use xag_core::{Tape, Tensor};

const TOL: f64 = 1e-10;
const EPS: f64 = DEFAULT_EPSILON;
const TRIALS: u64 = 200;

struct Instance {
    n: usize,
    nodes: usize,
    dim: usize,
    ids: Vec<u32>,
    v: Vec<Tensor>,
    t: Vec<Tensor>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let nodes = rng.random_range(1..=3);
    let dim = rng.random_range(1..=5);
    let ids = common::random_ids(n, 3, &mut rng);
    let v = (0..nodes).map(|_| common::random(n, dim, 2.0, &mut rng)).collect();
    let t = (0..nodes).map(|_| common::random(n, dim, 2.0, &mut rng)).collect();
    Instance { n, nodes, dim, ids, v, t }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + b.abs())
}

#[test]
fn directional_matches_scalar_loop() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let na = rng.random_range(1..=4);
        let nb = rng.random_range(1..=4);
        let dim = rng.random_range(1..=5);
        let a = common::random(na, dim, 2.0, &mut rng);
        let b = common::random(nb, dim, 2.0, &mut rng);
        let b_ids = common::random_ids(nb, 3, &mut rng);
        let a_ids: Vec<u32> = (0..na).map(|_| b_ids[rng.random_range(0..nb)]).collect();
        let labels = MatchLabels::from_identities(&a_ids, &b_ids).unwrap();
        let got = cmpm_directional(&match_prob(&a, &b).unwrap(), &labels, EPS).unwrap();
        let want = common::cmpm_direction(&a, &b, &a_ids, &b_ids, EPS);
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn node_loss_matches_scalar_loop() {
    for seed in 0..TRIALS {
        let x = instance(seed);
        let labels = MatchLabels::from_identities(&x.ids, &x.ids).unwrap();
        let got = cmpm_node(&x.v, &x.t, &labels, EPS).unwrap();
        let want = common::cmpm_node(&x.v, &x.t, &x.ids, EPS);
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn global_loss_matches_scalar_loop() {
    for seed in 0..TRIALS {
        let x = instance(seed);
        let labels = MatchLabels::from_identities(&x.ids, &x.ids).unwrap();
        let gv = common::concat_slots(&x.v);
        let gt = common::concat_slots(&x.t);
        let got = cmpm_global(&gv, &gt, &labels, EPS).unwrap();
        let want = common::cmpm_bidirectional(&gv, &gt, &x.ids, EPS);
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn attack_objective_matches_scalar_loop_on_attacked_graphs() {
    for seed in 0..TRIALS {
        let x = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10_000);
        let weights: Vec<Tensor> = (0..2).map(|_| common::random(x.dim, x.dim, 1.0, &mut rng)).collect();
        let xv = common::random(1, x.dim, 1.0, &mut rng);
        let xt = common::random(1, x.dim, 1.0, &mut rng);
        let adjacency = build_adjacency(x.nodes).unwrap();

        let oracle_side = |slots: &[Tensor], attack: &Tensor| {
            let graphs: Vec<Tensor> = (0..x.n)
                .map(|i| common::attacked_gcn(&common::sample_graph(slots, i), attack, &adjacency, &weights))
                .collect();
            common::to_slots(&graphs)
        };
        let ov = oracle_side(&x.v, &xv);
        let ot = oracle_side(&x.t, &xt);
        let want = common::cmpm_node(&ov, &ot, &x.ids, EPS);

        let mut tape = Tape::new();
        let w: Vec<_> = weights.iter().map(|m| tape.constant(m.clone())).collect();
        let side = |tape: &mut Tape, slots: &[Tensor], attack: &Tensor| {
            let vars: Vec<_> = slots.iter().map(|s| tape.constant(s.clone())).collect();
            let a = tape.constant(attack.clone());
            let out = attacked_gcn_node_major(tape, &vars, a, &adjacency, &w).unwrap();
            out.iter().map(|&o| tape.value(o).clone()).collect::<Vec<_>>()
        };
        let av = side(&mut tape, &x.v, &xv);
        let at = side(&mut tape, &x.t, &xt);
        for (a, o) in av.iter().zip(&ov) {
            assert!(a.max_abs_diff(o) <= TOL, "seed {seed}: attacked GCN differs");
        }
        let labels = MatchLabels::from_identities(&x.ids, &x.ids).unwrap();
        let got = attack_objective(&av, &at, &labels, EPS).unwrap();
        assert!(got > -1e-6);
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn adversarial_loss_matches_scalar_loop() {
    for seed in 0..TRIALS {
        let x = instance(seed);
        let labels = MatchLabels::from_identities(&x.ids, &x.ids).unwrap();
        let pv = common::concat_slots(&x.v);
        let pt = common::concat_slots(&x.t);
        let got = adversarial_cmpm(&pv, &pt, &labels, EPS).unwrap();
        let want = common::adversarial_cmpm(&pv, &pt, &x.ids, EPS);
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn adversarial_loss_is_global_loss_over_n() {
    for seed in 0..50 {
        let x = instance(seed);
        let labels = MatchLabels::from_identities(&x.ids, &x.ids).unwrap();
        let pv = common::concat_slots(&x.v);
        let pt = common::concat_slots(&x.t);
        let adv = adversarial_cmpm(&pv, &pt, &labels, EPS).unwrap();
        let global = cmpm_global(&pv, &pt, &labels, EPS).unwrap();
        assert!(close(adv * x.n as f64, global));
    }
}

#[test]
fn total_loss_is_weighted_sum() {
    let w = LossWeights {
        lambda1: 0.5,
        lambda2: 2.0,
        epsilon: EPS,
    };
    assert_eq!(total_adversarial_loss(1.0, 2.0, 3.0, &w), 1.0 + 1.0 + 6.0);
}

#[test]
fn gcn_matches_scalar_loop() {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=5);
        let d = rng.random_range(1..=5);
        let nodes = common::random(n, d, 2.0, &mut rng);
        let layers: Vec<Tensor> = (0..rng.random_range(1..=3)).map(|_| common::random(d, d, 1.0, &mut rng)).collect();
        let adjacency = common::random(n, n, 1.0, &mut rng);
        let got = gcn_forward(&nodes, &adjacency, &GcnParams::new(layers.clone()).unwrap()).unwrap();
        let want = common::gcn(&nodes, &adjacency, &layers);
        assert!(got.max_abs_diff(&want) <= TOL, "seed {seed}");
    }
}

fn ft_oracle(row: &[f64], w: &[Tensor], b: &[Tensor]) -> Vec<f64> {
    let mut h = row.to_vec();
    for k in 0..FT_DEPTH {
        let mut next = vec![0.0; w[k].cols()];
        for (c, out) in next.iter_mut().enumerate() {
            *out = b[k].get(0, c) + h.iter().enumerate().map(|(r, x)| x * w[k].get(r, c)).sum::<f64>();
            if k + 1 < FT_DEPTH {
                *out = out.max(0.0);
            }
        }
        h = next;
    }
    h.iter().zip(row).map(|(a, x)| a + x).collect()
}

#[test]
fn ft_transform_matches_scalar_loop() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=5);
        let n_nodes = rng.random_range(1..=3);
        let m = rng.random_range(1..=4);
        let bank = FtBank::init(n_nodes, d, &mut rng);
        let tokens = common::random(m, d, 2.0, &mut rng);
        let got = ft_transform(&tokens, &bank).unwrap();
        for (l, t) in bank.transforms.iter().enumerate() {
            let mut best = vec![f64::NEG_INFINITY; d];
            for r in 0..m {
                for (b, v) in best.iter_mut().zip(ft_oracle(tokens.row(r), &t.weights, &t.biases)) {
                    *b = b.max(v);
                }
            }
            for c in 0..d {
                assert!((got.get(l, c) - best[c]).abs() <= TOL, "seed {seed}");
            }
        }
    }
}

#[test]
fn image_encoder_max_pools_each_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = ModelDims {
        n_nodes: 3,
        dim: 4,
        dim_in: 5,
        patch_rows: 2,
        tokens: 3,
    };
    let params = EncoderParams::init(&dims, &mut rng);
    let sample = SyntheticImageSample {
        patches: (0..3).map(|_| common::random(2, 5, 1.0, &mut rng)).collect(),
        stage: common::random(1, 5, 1.0, &mut rng),
        identity: 0,
    };
    let (nodes, stage) = encode_image(&sample, &params).unwrap();
    for (l, patch) in sample.patches.iter().enumerate() {
        for c in 0..dims.dim {
            let mut best = f64::NEG_INFINITY;
            for r in 0..patch.rows() {
                let v: f64 = (0..dims.dim_in).map(|k| patch.get(r, k) * params.image_projection.get(k, c)).sum();
                best = best.max(v);
            }
            assert!((nodes.get(l, c) - best).abs() <= TOL);
        }
    }
    for c in 0..dims.dim {
        let v: f64 = (0..dims.dim_in).map(|k| sample.stage.get(0, k) * params.stage_projection.get(k, c)).sum();
        assert!((stage.get(0, c) - v).abs() <= TOL);
    }
}
