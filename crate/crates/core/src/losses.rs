//! Cross-modal projection matching (CMPM) losses.
//!
//! Every variant is a KL divergence between a softmax matching distribution
//! and the identity label distribution `q`:
//!
//! ```text
//! p[i][j] = softmax_j( a_i . b_j / |b_j| )
//! loss    = sum_{i,j} p[i][j] * log(p[i][j] / (q[i][j] + eps))
//! ```
//!
//! Only the second argument is normalized. The image-to-text direction passes
//! (image, text); the text-to-image direction passes (text, image) with the
//! transposed labels. Node-level losses sum the per-node terms over the `N`
//! nodes and divide by the batch size `n`; the adversarial loss divides by
//! `n^2` instead.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Identity-match labels for one batch; `y[i][j] = 1` iff image `i` and text
/// `j` share an identity.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchLabels {
    y: Tensor,
    q: Tensor,
}

impl MatchLabels {
    pub fn from_matrix(y: Tensor) -> Result<Self> {
        let mut q = y.clone();
        for r in 0..y.rows() {
            let total: f64 = y.row(r).iter().sum();
            if total <= 0.0 {
                return Err(Error::Contract(format!("label row {r} has no positive")));
            }
            for v in q.row_mut(r) {
                *v /= total;
            }
        }
        Ok(Self { y, q })
    }

    pub fn from_identities(image_ids: &[u32], text_ids: &[u32]) -> Result<Self> {
        if image_ids.is_empty() || text_ids.is_empty() {
            return Err(Error::Contract("labels need a nonempty batch".into()));
        }
        let y = Tensor::from_fn(image_ids.len(), text_ids.len(), |i, j| {
            if image_ids[i] == text_ids[j] {
                1.0
            } else {
                0.0
            }
        });
        Self::from_matrix(y)
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Labels for the text-to-image direction.
    pub fn transposed(&self) -> Result<Self> {
        Self::from_matrix(self.y.transpose())
    }

    fn log_target(&self, eps: f64) -> Tensor {
        self.q.map(|v| (v + eps).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchDirection {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmpmTerms {
    pub p: Tensor,
    pub loss: f64,
    pub direction: MatchDirection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        Ok(())
    }
}

fn check_pair(tape: &Tape, a: Var, b: Var, labels: &MatchLabels, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.1 != sb.1 {
        return Err(Error::dim(op, sa, sb));
    }
    if labels.y.shape() != (sa.0, sb.0) {
        return Err(Error::dim(op, labels.y.shape(), (sa.0, sb.0)));
    }
    Ok(())
}

/// `a_i . normalize(b_j)` for all pairs.
pub fn match_logits_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let bn = tape.l2_normalize_rows(b);
    let bt = tape.transpose(bn);
    tape.matmul(a, bt)
}

/// Unscaled `sum_{i,j} p log(p / (q + eps))` for one direction.
fn kl_sum_tape(tape: &mut Tape, a: Var, b: Var, labels: &MatchLabels, eps: f64) -> Result<Var> {
    check_pair(tape, a, b, labels, "cmpm")?;
    let logits = match_logits_tape(tape, a, b)?;
    let log_p = tape.row_log_softmax(logits);
    let p = tape.exp(log_p);
    let log_q = tape.constant(labels.log_target(eps));
    let ratio = tape.sub(log_p, log_q)?;
    let terms = tape.hadamard(p, ratio)?;
    Ok(tape.sum(terms))
}

/// One direction of CMPM, `(1/n) sum_{i,j} p log(p / (q + eps))`.
pub fn cmpm_direction_tape(tape: &mut Tape, a: Var, b: Var, labels: &MatchLabels, eps: f64) -> Result<Var> {
    let n = tape.shape(a).0 as f64;
    let s = kl_sum_tape(tape, a, b, labels, eps)?;
    Ok(tape.scale(s, 1.0 / n))
}

/// Image-to-text plus text-to-image CMPM.
pub fn cmpm_bidirectional_tape(
    tape: &mut Tape,
    image: Var,
    text: Var,
    labels: &MatchLabels,
    eps: f64,
) -> Result<Var> {
    let v2t = cmpm_direction_tape(tape, image, text, labels, eps)?;
    let t2v = cmpm_direction_tape(tape, text, image, &labels.transposed()?, eps)?;
    tape.add(v2t, t2v)
}

/// Node-level CMPM: bidirectional CMPM summed over the `N` node slots.
pub fn cmpm_node_tape(
    tape: &mut Tape,
    image_nodes: &[Var],
    text_nodes: &[Var],
    labels: &MatchLabels,
    eps: f64,
) -> Result<Var> {
    if image_nodes.len() != text_nodes.len() || image_nodes.is_empty() {
        return Err(Error::Contract(format!(
            "node counts differ between modalities: {} vs {}",
            image_nodes.len(),
            text_nodes.len()
        )));
    }
    let transposed = labels.transposed()?;
    let mut total: Option<Var> = None;
    for (&v, &t) in image_nodes.iter().zip(text_nodes) {
        let v2t = cmpm_direction_tape(tape, v, t, labels, eps)?;
        let t2v = cmpm_direction_tape(tape, t, v, &transposed, eps)?;
        let both = tape.add(v2t, t2v)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, both)?,
            None => both,
        });
    }
    Ok(total.expect("at least one node"))
}

/// Global-feature CMPM on concatenated node features.
pub fn cmpm_global_tape(tape: &mut Tape, global_v: Var, global_t: Var, labels: &MatchLabels, eps: f64) -> Result<Var> {
    cmpm_bidirectional_tape(tape, global_v, global_t, labels, eps)
}

/// Positive KL divergence on attacked node features. The attack learner
/// maximizes this value.
pub fn attack_objective_tape(
    tape: &mut Tape,
    image_attacked: &[Var],
    text_attacked: &[Var],
    labels: &MatchLabels,
    eps: f64,
) -> Result<Var> {
    cmpm_node_tape(tape, image_attacked, text_attacked, labels, eps)
}

/// Adversarial CMPM on concatenated perturbed features, scaled by `1/n^2`.
pub fn adversarial_cmpm_tape(tape: &mut Tape, pv: Var, pt: Var, labels: &MatchLabels, eps: f64) -> Result<Var> {
    let n = tape.shape(pv).0 as f64;
    let v2t = kl_sum_tape(tape, pv, pt, labels, eps)?;
    let t2v = kl_sum_tape(tape, pt, pv, &labels.transposed()?, eps)?;
    let both = tape.add(v2t, t2v)?;
    Ok(tape.scale(both, 1.0 / (n * n)))
}

/// `stage + lambda1 * node + lambda2 * attack`.
pub fn total_adversarial_loss_tape(
    tape: &mut Tape,
    stage: Var,
    node: Var,
    attack: Var,
    w: &LossWeights,
) -> Result<Var> {
    let node = tape.scale(node, w.lambda1);
    let attack = tape.scale(attack, w.lambda2);
    let partial = tape.add(stage, node)?;
    tape.add(partial, attack)
}

pub fn total_adversarial_loss(stage: f64, node: f64, attack: f64, w: &LossWeights) -> f64 {
    stage + w.lambda1 * node + w.lambda2 * attack
}

/// Matching probabilities `softmax_j(fv_i . normalize(ft_j))`.
pub fn match_prob(fv: &Tensor, ft: &Tensor) -> Result<Tensor> {
    if fv.cols() != ft.cols() {
        return Err(Error::dim("match_prob", fv.shape(), ft.shape()));
    }
    let normalized = ft.l2_normalize_rows().tensor;
    Ok(fv.matmul(&normalized.transpose())?.row_softmax())
}

/// `(1/n) sum_{i,j} p log(p / (q + eps))` on a given probability matrix,
/// with `0 log 0 = 0`.
pub fn cmpm_directional(p: &Tensor, labels: &MatchLabels, eps: f64) -> Result<f64> {
    if p.shape() != labels.y.shape() {
        return Err(Error::dim("cmpm_directional", p.shape(), labels.y.shape()));
    }
    let mut total = 0.0;
    for (&pv, &qv) in p.data().iter().zip(labels.q.data()) {
        if pv > 0.0 {
            total += pv * (pv / (qv + eps)).ln();
        }
    }
    Ok(total / p.rows() as f64)
}

pub fn cmpm_terms(a: &Tensor, b: &Tensor, labels: &MatchLabels, eps: f64, direction: MatchDirection) -> Result<CmpmTerms> {
    let p = match_prob(a, b)?;
    let loss = cmpm_directional(&p, labels, eps)?;
    Ok(CmpmTerms { p, loss, direction })
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let root = build(&mut tape)?;
    Ok(tape.value(root).item())
}

fn constants(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

/// Node-level CMPM; slot `l` holds the `n x D` features of node `l`.
pub fn cmpm_node(image_nodes: &[Tensor], text_nodes: &[Tensor], labels: &MatchLabels, eps: f64) -> Result<f64> {
    eval_scalar(|tape| {
        let v = constants(tape, image_nodes);
        let t = constants(tape, text_nodes);
        cmpm_node_tape(tape, &v, &t, labels, eps)
    })
}

pub fn cmpm_global(global_v: &Tensor, global_t: &Tensor, labels: &MatchLabels, eps: f64) -> Result<f64> {
    eval_scalar(|tape| {
        let v = tape.constant(global_v.clone());
        let t = tape.constant(global_t.clone());
        cmpm_global_tape(tape, v, t, labels, eps)
    })
}

pub fn attack_objective(image_attacked: &[Tensor], text_attacked: &[Tensor], labels: &MatchLabels, eps: f64) -> Result<f64> {
    eval_scalar(|tape| {
        let v = constants(tape, image_attacked);
        let t = constants(tape, text_attacked);
        attack_objective_tape(tape, &v, &t, labels, eps)
    })
}

pub fn adversarial_cmpm(pv: &Tensor, pt: &Tensor, labels: &MatchLabels, eps: f64) -> Result<f64> {
    eval_scalar(|tape| {
        let v = tape.constant(pv.clone());
        let t = tape.constant(pt.clone());
        adversarial_cmpm_tape(tape, v, t, labels, eps)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = DEFAULT_EPSILON;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn labels_from_identities() {
        let l = MatchLabels::from_identities(&[1, 2, 1, 3], &[1, 2, 1, 3]).unwrap();
        assert_eq!(l.y().row(0), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(l.q().row(0), &[0.5, 0.0, 0.5, 0.0]);
        assert_eq!(l.q().row(1), &[0.0, 1.0, 0.0, 0.0]);
        assert!(MatchLabels::from_identities(&[1], &[2]).is_err());
    }

    #[test]
    fn match_prob_examples() {
        let one = match_prob(&Tensor::row_vector(vec![0.3, -2.0]).unwrap(), &Tensor::row_vector(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(one, Tensor::ones(1, 1));

        let e = Tensor::identity(2);
        let p = match_prob(&e, &e).unwrap();
        let expected = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((p.get(0, 0) - expected).abs() < 1e-15);
        assert!((expected - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn scaling_a_row_sharpens_without_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let fv = random(3, 4, &mut rng);
            let ft = random(3, 4, &mut rng);
            let c = rng.random_range(1.1..4.0);
            let p = match_prob(&fv, &ft).unwrap();
            let mut scaled = fv.clone();
            for v in scaled.row_mut(0) {
                *v *= c;
            }
            let ps = match_prob(&scaled, &ft).unwrap();
            for j in 0..3 {
                for k in 0..3 {
                    if p.get(0, j) > p.get(0, k) {
                        assert!(ps.get(0, j) > ps.get(0, k));
                    }
                }
            }
            let top = (0..3).max_by(|&a, &b| p.get(0, a).total_cmp(&p.get(0, b))).unwrap();
            assert!(ps.get(0, top) >= p.get(0, top));
        }
    }

    #[test]
    fn directional_examples() {
        let labels = MatchLabels::from_identities(&[0, 1, 0], &[0, 1, 0]).unwrap();
        let loss = cmpm_directional(labels.q(), &labels, EPS).unwrap();
        assert!(loss.abs() < 1e-6);

        // p puts all mass on the wrong candidate: each row contributes log(1/eps).
        let anti = MatchLabels::from_matrix(Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
        let loss = cmpm_directional(&Tensor::identity(2), &anti, EPS).unwrap();
        let expected = (2.0 * (1.0f64 / EPS).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-9);
    }

    #[test]
    fn node_loss_reduces_to_bidirectional_for_one_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fv = random(4, 3, &mut rng);
        let ft = random(4, 3, &mut rng);
        let labels = MatchLabels::from_identities(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        let node = cmpm_node(std::slice::from_ref(&fv), std::slice::from_ref(&ft), &labels, EPS).unwrap();
        let global = cmpm_global(&fv, &ft, &labels, EPS).unwrap();
        assert_eq!(node, global);

        let v2t = cmpm_directional(&match_prob(&fv, &ft).unwrap(), &labels, EPS).unwrap();
        let t2v = cmpm_directional(&match_prob(&ft, &fv).unwrap(), &labels.transposed().unwrap(), EPS).unwrap();
        assert!((node - (v2t + t2v)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_inputs_give_equal_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(3, 4, &mut rng);
        let labels = MatchLabels::from_identities(&[5, 6, 5], &[5, 6, 5]).unwrap();
        let v2t = cmpm_terms(&f, &f, &labels, EPS, MatchDirection::ImageToText).unwrap();
        let t2v = cmpm_terms(&f, &f, &labels.transposed().unwrap(), EPS, MatchDirection::TextToImage).unwrap();
        assert!((v2t.loss - t2v.loss).abs() < 1e-12);
        for s in v2t.p.row_sums() {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn node_count_mismatch_is_contract_error() {
        let labels = MatchLabels::from_identities(&[0], &[0]).unwrap();
        let t = Tensor::ones(1, 2);
        assert!(matches!(
            cmpm_node(&[t.clone(), t.clone()], &[t], &labels, EPS),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adversarial_single_pair() {
        let labels = MatchLabels::from_identities(&[0], &[0]).unwrap();
        let v = Tensor::row_vector(vec![0.2, 0.9]).unwrap();
        let loss = adversarial_cmpm(&v, &v, &labels, EPS).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!((loss - 2.0 * (1.0 / (1.0 + EPS)).ln()).abs() < 1e-15);
    }

    #[test]
    fn adversarial_is_bidirectional_over_n_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pv = random(3, 6, &mut rng);
        let pt = random(3, 6, &mut rng);
        let labels = MatchLabels::from_identities(&[0, 1, 0], &[0, 1, 0]).unwrap();
        let adv = adversarial_cmpm(&pv, &pt, &labels, EPS).unwrap();
        let bidir = cmpm_global(&pv, &pt, &labels, EPS).unwrap();
        assert!((adv - bidir / 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let w0 = LossWeights { lambda1: 0.0, lambda2: 0.0, epsilon: EPS };
        assert_eq!(total_adversarial_loss(1.5, 2.0, 3.0, &w0), 1.5);
        assert_eq!(total_adversarial_loss(1.5, 2.0, 3.0, &LossWeights::default()), 6.5);
        let at = |l2: f64| total_adversarial_loss(1.5, 2.0, 3.0, &LossWeights { lambda2: l2, ..Default::default() });
        assert!(((at(2.0) - at(1.0)) - (at(1.0) - at(0.0))).abs() < 1e-12);
        assert!(LossWeights { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }
}
