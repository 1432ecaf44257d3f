//! Named parameter storage, parameter groups, and the per-pass [`Session`]
//! that binds stored parameters onto a [`Tape`].

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Coarse ownership groups used by the stage schedule to decide what trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisionEncoder,
    SegDecoder,
    ClsHead,
    ImageProjector,
    Prompt,
    SegProjector,
    LmBase,
    LoraExpert,
    Router,
    FusionHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::VisionEncoder,
        ParamGroup::SegDecoder,
        ParamGroup::ClsHead,
        ParamGroup::ImageProjector,
        ParamGroup::Prompt,
        ParamGroup::SegProjector,
        ParamGroup::LmBase,
        ParamGroup::LoraExpert,
        ParamGroup::Router,
        ParamGroup::FusionHead,
    ];
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Arc<Matrix>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Matrix,
    ) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` already exists")));
        }
        self.params.insert(
            name,
            Param {
                value: Arc::new(value),
                group,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        Ok(self.get(name)?.value.as_ref())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))?;
        Ok(Arc::make_mut(&mut p.value))
    }

    pub fn set(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self.value_mut(name)?;
        if slot.dim() != value.dim() {
            return Err(Error::shape(
                format!("{:?}", slot.dim()),
                format!("{:?}", value.dim()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.params.len();
        self.params.retain(|k, _| !k.starts_with(prefix));
        before - self.params.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names_in(&self, groups: &BTreeSet<ParamGroup>) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Names grouped by [`ParamGroup`].
    pub fn manifest(&self) -> BTreeMap<ParamGroup, Vec<String>> {
        let mut out: BTreeMap<ParamGroup, Vec<String>> = BTreeMap::new();
        for (name, p) in &self.params {
            out.entry(p.group).or_default().push(name.clone());
        }
        out
    }

    /// Names of parameters whose bits differ between `self` and `other`
    /// (including parameters present in only one of them).
    pub fn changed_params(&self, other: &ParamStore) -> Vec<String> {
        let names: BTreeSet<&String> = self.params.keys().chain(other.params.keys()).collect();
        names
            .into_iter()
            .filter(
                |name| match (self.params.get(*name), other.params.get(*name)) {
                    (Some(a), Some(b)) => !bit_identical(&a.value, &b.value) || a.group != b.group,
                    _ => true,
                },
            )
            .cloned()
            .collect()
    }
}

pub fn bit_identical(a: &Matrix, b: &Matrix) -> bool {
    a.dim() == b.dim()
        && a.iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Scaled normal for a `fan_in × fan_out` weight.
    pub fn fan_in(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
        normal(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix::zeros((rows, cols))
    }

    pub fn ones(rows: usize, cols: usize) -> Matrix {
        Matrix::ones((rows, cols))
    }
}

/// Binds parameters of a [`ParamStore`] onto a [`Tape`] for one pass.
///
/// Each parameter enters the tape at most once. Only parameters whose group
/// is in the trainable set become gradient-requiring leaves.
pub struct Session<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    trainable: BTreeSet<ParamGroup>,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'t> Session<'t> {
    /// Evaluation-mode session with nothing trainable.
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            trainable: BTreeSet::new(),
            bound: RefCell::new(BTreeMap::new()),
            training: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn with_trainable(mut self, groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        self.trainable = groups.into_iter().collect();
        self
    }

    pub fn all_trainable(self) -> Self {
        self.with_trainable(ParamGroup::ALL)
    }

    /// Switches on training-time behavior (dropout) with a seeded generator.
    pub fn training(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = RefCell::new(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let p = self.store.get(name)?;
        let var = self
            .tape
            .leaf_shared(Arc::clone(&p.value), self.trainable.contains(&p.group));
        self.bound.borrow_mut().insert(name.to_owned(), var);
        Ok(var)
    }

    /// Inverted dropout; identity outside training or for `p == 0`.
    pub fn dropout(&self, x: Var<'t>, p: f64) -> Var<'t> {
        if !self.training || p <= 0.0 {
            return x;
        }
        let (r, c) = x.shape();
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.rng.borrow_mut();
        let mask =
            Matrix::from_shape_simple_fn(
                (r, c),
                || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                },
            );
        x.mul_const(Arc::new(mask))
    }

    /// Gradients of every bound, trainable parameter.
    pub fn param_gradients(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", ParamGroup::Prompt, init::zeros(1, 2))
            .unwrap();
        assert!(s
            .insert("a", ParamGroup::Prompt, init::zeros(1, 2))
            .is_err());
    }

    #[test]
    fn frozen_groups_bind_as_constants() {
        let mut s = ParamStore::new();
        s.insert("w", ParamGroup::LmBase, init::ones(1, 2)).unwrap();
        s.insert("v", ParamGroup::Prompt, init::ones(1, 2)).unwrap();
        let tape = Tape::new();
        let sess = Session::new(&tape, &s).with_trainable([ParamGroup::Prompt]);
        let w = sess.param("w").unwrap();
        let v = sess.param("v").unwrap();
        assert!(!w.requires_grad());
        assert!(v.requires_grad());
        assert_eq!(sess.param("v").unwrap().id(), v.id());
        let grads = tape.backward((w * v).sum());
        let g = sess.param_gradients(&grads);
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["v"]);
    }

    #[test]
    fn changed_params_detects_bit_flips() {
        let mut a = ParamStore::new();
        a.insert("x", ParamGroup::Prompt, init::zeros(2, 2))
            .unwrap();
        let mut b = a.clone();
        assert!(a.changed_params(&b).is_empty());
        b.value_mut("x").unwrap()[[0, 0]] = -0.0;
        assert_eq!(a.changed_params(&b), vec!["x".to_string()]);
    }
}
