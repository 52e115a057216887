//! Named parameter groups and the Adam optimizer.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected Adam update of `params` with step count `t + 1`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + EPSILON);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<f64>,
    pub lr: f64,
    pub trainable: bool,
    pub adam: AdamState,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Adds a group and returns its index; names must be unique.
    pub fn add_group(&mut self, name: &str, values: Vec<f64>, lr: f64, trainable: bool) -> Result<usize> {
        if self.groups.iter().any(|g| g.name == name) {
            return Err(Error::Config(format!("duplicate parameter group `{name}`")));
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("group `{name}`: learning rate must be finite and >= 0")));
        }
        let n = values.len();
        self.groups.push(ParamGroup { name: name.to_string(), values, lr, trainable, adam: AdamState::new(n) });
        Ok(self.groups.len() - 1)
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{name}`")))
    }

    pub fn group(&self, idx: usize) -> &ParamGroup {
        &self.groups[idx]
    }

    pub fn values(&self, idx: usize) -> &[f64] {
        &self.groups[idx].values
    }

    pub fn values_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.groups[idx].values
    }

    pub fn set_trainable(&mut self, idx: usize, trainable: bool) {
        self.groups[idx].trainable = trainable;
    }

    /// Zero gradients shaped like every group.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.groups.iter().map(|g| vec![0.0; g.values.len()]).collect()
    }

    /// Adam step on every trainable group; frozen groups are left untouched.
    pub fn adam_step(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.groups.len() {
            return Err(Error::InvalidInput("gradient list does not match parameter groups".into()));
        }
        for (g, gr) in self.groups.iter_mut().zip(grads) {
            if gr.len() != g.values.len() {
                return Err(Error::InvalidInput(format!("group `{}`: gradient length mismatch", g.name)));
            }
            if let Some(k) = gr.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric("adam_step", format!("group `{}` gradient[{k}] is not finite", g.name)));
            }
            if g.trainable {
                let lr = g.lr;
                g.adam.step(&mut g.values, gr, lr);
            }
        }
        Ok(())
    }
}
