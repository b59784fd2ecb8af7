use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Whether a step moves against the gradient (minimize) or along it (maximize).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

/// Per-parameter Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: (usize, usize), lr: f64) -> Self {
        Self {
            first_moment: Tensor::zeros(shape.0, shape.1),
            second_moment: Tensor::zeros(shape.0, shape.1),
            step: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    direction: Direction,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("adam_step", param.shape(), grad.shape()));
    }
    if state.first_moment.shape() != param.shape() {
        return Err(Error::dim("adam_step", param.shape(), state.first_moment.shape()));
    }
    state.step += 1;
    let sign = match direction {
        Direction::Descend => 1.0,
        Direction::Ascend => -1.0,
    };
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(state.step as i32);
    let bias2 = 1.0 - b2.powi(state.step as i32);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        let g = sign * g;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::from_fn(2, 2, |r, c| r as f64 - c as f64 * 0.5);
        let before = p.clone();
        let mut st = AdamState::new(p.shape(), 1e-3);
        adam_step(&mut p, &Tensor::zeros(2, 2), &mut st, Direction::Descend).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // After one step m_hat = g and v_hat = g^2, so the update is lr * g / (|g| + eps).
        let lr = 0.01;
        let g = Tensor::row_vector(vec![3.0, -0.2, 1e-3]).unwrap();
        let mut p = Tensor::zeros(1, 3);
        let mut st = AdamState::new(p.shape(), lr);
        adam_step(&mut p, &g, &mut st, Direction::Descend).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expected = -lr * gv / (gv.abs() + DEFAULT_EPS);
            assert!((pv - expected).abs() < 1e-15, "{pv} vs {expected}");
            assert!((pv.abs() - lr).abs() < 1e-7);
        }

        let mut q = Tensor::zeros(1, 3);
        let mut st = AdamState::new(q.shape(), lr);
        adam_step(&mut q, &g, &mut st, Direction::Ascend).unwrap();
        assert_eq!(q, p.scale(-1.0));
    }

    #[test]
    fn identical_states_give_identical_results() {
        let g = Tensor::from_fn(3, 2, |r, c| (r as f64 + 0.3) * (c as f64 - 0.7));
        let p0 = Tensor::from_fn(3, 2, |r, c| (r * c) as f64 * 0.1);
        let run = || {
            let mut p = p0.clone();
            let mut st = AdamState::new(p.shape(), 1e-2);
            for _ in 0..5 {
                adam_step(&mut p, &g, &mut st, Direction::Descend).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(sa, sb);
        assert!(sa.second_moment.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = Tensor::zeros(2, 2);
        let mut st = AdamState::new((2, 2), 1e-3);
        let err = adam_step(&mut p, &Tensor::zeros(1, 2), &mut st, Direction::Descend);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
