use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    pub fn encoder_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| n.starts_with(ENCODER_PREFIX))
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Little-endian bytes of every value in name order; used for
    /// fingerprints and byte-level comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for (name, t) in &self.params {
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Adds every parameter to the graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Binding { vars }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        for (name, t) in &self.params {
            match other.params.get(name) {
                None => {
                    return Err(Error::Splice {
                        name: name.clone(),
                        reason: "missing from the other parameter set".into(),
                    })
                }
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Splice {
                        name: name.clone(),
                        reason: format!("shape {:?} vs {:?}", t.shape(), o.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = other.params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Splice {
                name: extra.clone(),
                reason: "not present in the reference parameter set".into(),
            });
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamSet`].
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("network parameter `{name}` is missing")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Merges another binding; names must not collide.
    pub fn extend(&mut self, other: Binding) -> Result<()> {
        for (k, v) in other.vars {
            if self.vars.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("parameter `{k}` bound twice")));
            }
        }
        Ok(())
    }
}

/// Deterministic weight initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal conv weight `[co, ci, k, k]` scaled by `gain`.
    pub fn conv(&mut self, co: usize, ci: usize, k: usize, gain: f32) -> Tensor<f32> {
        let std = gain * (2.0 / (ci * k * k) as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn([co, ci, k, k], |_| normal.sample(&mut self.rng))
    }

    /// Transposed 2x2 weight `[ci, co, 2, 2]`.
    pub fn deconv(&mut self, ci: usize, co: usize) -> Tensor<f32> {
        let std = (2.0 / ci as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn([ci, co, 2, 2], |_| normal.sample(&mut self.rng))
    }
}

/// Adds `{name}.weight` and `{name}.bias` for a conv layer.
pub(crate) fn add_conv(
    p: &mut ParamSet,
    init: &mut Init,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    gain: f32,
) -> Result<()> {
    let w = if gain == 0.0 {
        Tensor::zeros([co, ci, k, k])
    } else {
        init.conv(co, ci, k, gain)
    };
    p.insert(format!("{name}.weight"), w)?;
    p.insert(format!("{name}.bias"), Tensor::zeros([co]))
}

/// `conv -> optional relu` using `{name}.weight` / `{name}.bias`.
pub(crate) fn conv(
    g: &mut Graph<f32>,
    b: &Binding,
    name: &str,
    x: Var,
    stride: usize,
    relu: bool,
) -> Result<Var> {
    let w = b.var(&format!("{name}.weight"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    let k = g.value(w).shape()[2];
    let y = g.conv2d(x, w, Some(bias), stride, k / 2)?;
    Ok(if relu { g.relu(y) } else { y })
}

/// Residual block `relu(x + conv2(relu(conv1(x))))`.
pub(crate) fn residual(g: &mut Graph<f32>, b: &Binding, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, b, &format!("{name}.conv1"), x, 1, true)?;
    let h = conv(g, b, &format!("{name}.conv2"), h, 1, false)?;
    let s = g.add(x, h)?;
    Ok(g.relu(s))
}

pub(crate) fn add_residual(p: &mut ParamSet, init: &mut Init, name: &str, ch: usize) -> Result<()> {
    add_conv(p, init, &format!("{name}.conv1"), ch, ch, 3, 1.0)?;
    add_conv(p, init, &format!("{name}.conv2"), ch, ch, 3, 0.25)
}
