use std::collections::BTreeMap;

use crate::numcore::{adam_step, AdamState, Direction, Gradients, Tape, Tensor, Var};
use crate::error::Result;

/// Records which named parameters were put on a tape as trainable leaves.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    vars: BTreeMap<String, Var>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Puts `value` on the tape, tracked only when `trainable`.
    pub fn param(&mut self, tape: &mut Tape, name: &str, value: &Tensor, trainable: bool) -> Var {
        if trainable {
            let v = tape.leaf(value.clone());
            self.vars.insert(name.to_string(), v);
            v
        } else {
            tape.constant(value.clone())
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}

/// Adam over a named parameter set; one state per parameter name.
#[derive(Debug, Clone)]
pub struct NamedAdam {
    lr: f64,
    direction: Direction,
    states: BTreeMap<String, AdamState>,
}

impl NamedAdam {
    pub fn new(lr: f64, direction: Direction) -> Self {
        Self {
            lr,
            direction,
            states: BTreeMap::new(),
        }
    }

    /// Updates `param` if it was registered; untouched otherwise.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor,
        registry: &ParamRegistry,
        grads: &Gradients,
    ) -> Result<()> {
        let Some(var) = registry.get(name) else {
            return Ok(());
        };
        let grad = grads.get_or_zeros(var, param);
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(param.shape(), self.lr));
        adam_step(param, &grad, state, self.direction)
    }
}
