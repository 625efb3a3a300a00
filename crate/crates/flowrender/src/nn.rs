//! Parameter storage, initialization, and the AdaIN building block shared by
//! every network in the model bundle.

use crate::error::{FlowError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// How a parameter tensor is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
    Zeros,
    /// Bias of an AdaIN affine head: ones for the scale half, zeros for the
    /// bias half, so a freshly initialized AdaIN is plain instance norm.
    AdainBias { channels: usize },
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init }
    }
}

/// Named parameter tensors, ordered by name so that iteration, hashing, and
/// serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

/// FNV-1a; used to derive a per-parameter init stream from its name so the
/// initialization of one network never depends on which others exist.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl ParamStore {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        use rand::{RngExt, SeedableRng};
        let mut map = BTreeMap::new();
        for spec in specs {
            if map.contains_key(&spec.name) {
                return Err(FlowError::config(format!("duplicate parameter {}", spec.name)));
            }
            let n: usize = spec.shape.iter().product();
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::AdainBias { channels } => {
                    let mut data = vec![0.0; n];
                    for v in data.iter_mut().take(channels) {
                        *v = 1.0;
                    }
                    Tensor::from_vec(&spec.shape, data)
                }
                Init::FanInUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                        seed ^ name_hash(&spec.name),
                    );
                    Tensor::from_vec(
                        &spec.shape,
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                    )
                }
            };
            map.insert(spec.name.clone(), tensor);
        }
        Ok(ParamStore { map })
    }

    /// Overwrite every tensor with uniform noise; for tests that need
    /// non-degenerate AdaIN affine maps.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        use rand::{RngExt, SeedableRng};
        for (name, t) in self.map.iter_mut() {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| FlowError::config(format!("missing parameter {name}")))
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != t.shape() {
                    return Err(FlowError::shape(
                        format!("parameter {name}"),
                        format!("{:?}", slot.shape()),
                        format!("{:?}", t.shape()),
                    ));
                }
                *slot = t;
                Ok(())
            }
            None => Err(FlowError::config(format!("unknown parameter {name}"))),
        }
    }

    pub fn insert_raw(&mut self, name: String, t: Tensor) {
        self.map.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Byte-stable digest of a group of parameters (prefix match); used by
    /// tests to prove a phase left weights untouched.
    pub fn digest(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.map {
            if !name.starts_with(prefix) {
                continue;
            }
            h ^= name_hash(name);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    /// Verify the store holds exactly the given inventory (names and shapes).
    pub fn check_inventory(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.map.len() {
            return Err(FlowError::Checkpoint(format!(
                "parameter count mismatch: store has {}, model wants {}",
                self.map.len(),
                specs.len()
            )));
        }
        for spec in specs {
            let t = self
                .map
                .get(&spec.name)
                .ok_or_else(|| FlowError::Checkpoint(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(FlowError::Checkpoint(format!(
                    "parameter {} has shape {:?}, model wants {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Tape bindings of a [`ParamStore`]: trainable names become gradient leaves,
/// the rest are constants.
pub struct BoundParams {
    ids: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let mut ids = BTreeMap::new();
        let mut trainable_names = Vec::new();
        for (name, tensor) in store.iter() {
            let var = if trainable(name) {
                trainable_names.push(name.clone());
                tape.param(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            ids.insert(name.clone(), var);
        }
        BoundParams { ids, trainable: trainable_names }
    }

    pub fn bind_all_constant(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::bind(tape, store, |_| false)
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn trainable_names(&self) -> &[String] {
        &self.trainable
    }
}

/// Adaptive instance normalization. Works for any `[C, ...]` tensor: the
/// statistics are taken per channel over all trailing axes, which covers both
/// the 2D (`[C, H, W]`) and the 3D (`[C, D, H, W]`) variants.
///
/// `affine_w`/`affine_b` map the motion vector to `[2C]`: scale then bias.
pub fn adain(tape: &mut Tape, x: Var, motion: Var, affine_w: Var, affine_b: Var) -> Var {
    let c = tape.value(x).shape()[0];
    let style = tape.linear(motion, affine_w, affine_b);
    assert_eq!(tape.value(style).numel(), 2 * c, "AdaIN affine output must be 2C");
    let gamma = tape.slice_first(style, 0, c);
    let beta = tape.slice_first(style, c, 2 * c);
    let normalized = instance_norm(tape, x);
    let scaled = tape.bc_mul(normalized, gamma);
    tape.bc_add(scaled, beta)
}

/// Per-channel normalization to zero mean and (nearly) unit variance.
pub fn instance_norm(tape: &mut Tape, x: Var) -> Var {
    let mu = tape.channel_mean(x);
    let centered = tape.bc_sub(x, mu);
    let sq = tape.square(centered);
    let var = tape.channel_mean(sq);
    let inv_std = tape.rsqrt_eps(var, 1e-5);
    tape.bc_mul(centered, inv_std)
}

/// Spec for one AdaIN site's affine head.
pub fn adain_specs(prefix: &str, channels: usize, motion_dim: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}/ada/w"), &[2 * channels, motion_dim], Init::Zeros),
        ParamSpec::new(
            format!("{prefix}/ada/b"),
            &[2 * channels],
            Init::AdainBias { channels },
        ),
    ]
}

/// Specs for a convolution (any rank): weight plus zero bias.
pub fn conv_specs(prefix: &str, shape: &[usize]) -> [ParamSpec; 2] {
    let fan_in: usize = shape[1..].iter().product();
    [
        ParamSpec::new(format!("{prefix}/w"), shape, Init::FanInUniform { fan_in }),
        ParamSpec::new(format!("{prefix}/b"), &[shape[0]], Init::Zeros),
    ]
}

/// Specs for a transposed convolution, whose weight layout is `[C_in, C_out, k...]`.
pub fn tconv_specs(prefix: &str, shape: &[usize]) -> [ParamSpec; 2] {
    let fan_in: usize = std::iter::once(shape[0]).chain(shape[2..].iter().copied()).product();
    [
        ParamSpec::new(format!("{prefix}/w"), shape, Init::FanInUniform { fan_in }),
        ParamSpec::new(format!("{prefix}/b"), &[shape[1]], Init::Zeros),
    ]
}
