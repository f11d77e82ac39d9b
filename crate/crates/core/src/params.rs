//! Named parameter storage and its binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// All trainable tensors of a model, keyed by name.
///
/// Iteration is in lexicographic name order, which fixes the summation order
/// of every reduction over parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Fails unless both sets hold the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(contract!("tensor `{name}` missing from one parameter set")),
                Some(o) if o.shape() != t.shape() => {
                    return Err(contract!("tensor `{name}` has shape {:?} vs {:?}", t.shape(), o.shape()))
                }
                _ => {}
            }
        }
        if let Some(name) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(contract!("tensor `{name}` missing from one parameter set"));
        }
        Ok(())
    }
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator dedicated to one tensor: depends only on the run seed and the
/// tensor name, so a tensor's initial value is the same in every model
/// configuration that contains it.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}

/// Tensor of `shape` with entries uniform in `[-scale, scale]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform: positive shape")
}

/// Parameters registered on a tape on first use.
pub struct Bound<'t, 'p> {
    tape: &'t Tape<'p>,
    params: &'p ParamSet,
    vars: RefCell<BTreeMap<&'p str, Var>>,
}

impl<'t, 'p> Bound<'t, 'p> {
    pub fn new(tape: &'t Tape<'p>, params: &'p ParamSet) -> Self {
        Self { tape, params, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape<'p> {
        self.tape
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// Tape node of parameter `name`.
    ///
    /// Panics when the parameter does not exist; model code only asks for
    /// names it created.
    pub fn get(&self, name: &str) -> Var {
        if let Some(&v) = self.vars.borrow().get(name) {
            return v;
        }
        let (key, t) = self.params.tensors.get_key_value(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = self.tape.param(t);
        self.vars.borrow_mut().insert(key.as_str(), v);
        v
    }

    /// Gradients of every bound parameter; parameters never touched are absent.
    pub fn gradients(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, &v) in self.vars.borrow().iter() {
            out.insert(name.to_string(), grads.wrt(v));
        }
        out
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.vars.borrow().keys().map(|k| k.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn tensor_rng_depends_on_name_and_seed() {
        let a = uniform(&mut tensor_rng(7, "x"), &[4], 0.1);
        let b = uniform(&mut tensor_rng(7, "x"), &[4], 0.1);
        let c = uniform(&mut tensor_rng(7, "y"), &[4], 0.1);
        let d = uniform(&mut tensor_rng(8, "x"), &[4], 0.1);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert!(a.data().iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn compatibility_names_the_tensor() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::zeros(&[2]));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::zeros(&[3]));
        let err = a.check_compatible(&b).unwrap_err();
        assert!(alloc::format!("{err}").contains("`w`"));
        b.insert("w", Tensor::zeros(&[2]));
        b.insert("v", Tensor::zeros(&[1]));
        assert!(a.check_compatible(&b).is_err());
    }

    #[test]
    fn bound_registers_once() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let tape = Tape::new();
        let b = Bound::new(&tape, &p);
        let v1 = b.get("w");
        let v2 = b.get("w");
        assert_eq!(v1, v2);
        assert_eq!(tape.len(), 1);
        let s = tape.sum(v1);
        let g = tape.backward(s).unwrap();
        assert_eq!(b.gradients(&g).get("w").unwrap().data(), &[1.0, 1.0]);
    }
}
