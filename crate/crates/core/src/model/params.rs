use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

/// Which factor of the joint model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Prior transform.
    Alpha,
    /// Sequence decoder.
    Beta,
    /// Property predictor heads.
    Gamma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    /// Whether decoupled weight decay applies. Off for biases and norm gains.
    pub decay: bool,
    pub value: Mat,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: Group, decay: bool, value: Mat) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            decay,
            value,
        });
        self.params.len() - 1
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. Untouched entries stay `None`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: usize, g: &Mat) {
        match &mut self.grads[id] {
            Some(m) => m.add_assign(g),
            none => *none = Some(g.clone()),
        }
    }

    /// `self += k · other`
    pub fn add_scaled(&mut self, k: f64, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.axpy(k, t),
                    none => {
                        let mut m = t.clone();
                        m.scale_assign(k);
                        *none = Some(m);
                    }
                }
            }
        }
    }

    pub fn get(&self, id: usize) -> Option<&Mat> {
        self.grads[id].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|m| m.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|m| m.is_finite())
    }

    /// Sum of squared entries restricted to one parameter group.
    pub fn group_sq_norm(&self, store: &ParamStore, group: Group) -> f64 {
        self.grads
            .iter()
            .zip(store.iter())
            .filter(|(_, p)| p.group == group)
            .filter_map(|(g, _)| g.as_ref())
            .map(|m| m.sq_norm())
            .sum()
    }
}
