//! Named parameter store, MLP definitions and tape binding.
//!
//! Parameters live in an ordered list so optimizer updates and weight
//! files are deterministic. Each training step binds the whole set onto
//! a fresh tape and looks tensors up by name.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Leaky-rectifier slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activate_last: bool,
}

#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    mlps: HashMap<String, MlpSpec>,
    convs: HashMap<String, ConvSpec>,
}

fn glorot_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

impl ParamSet {
    pub fn new() -> Self {
        Default::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Register an MLP: layers dims[0]→dims[1]→…, rectifier between
    /// layers (and after the last when `activate_last`).
    pub fn init_mlp(
        &mut self,
        prefix: &str,
        dims: &[usize],
        activate_last: bool,
        rng: &mut ChaCha8Rng,
    ) {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        for l in 0..dims.len() - 1 {
            let (cin, cout) = (dims[l], dims[l + 1]);
            self.insert(
                &format!("{prefix}.{l}.w"),
                glorot_uniform(rng, &[cin, cout], cin, cout),
            );
            self.insert(&format!("{prefix}.{l}.b"), Tensor::zeros(&[cout]));
        }
        self.mlps.insert(
            prefix.to_string(),
            MlpSpec {
                dims: dims.to_vec(),
                activate_last,
            },
        );
    }

    /// Same, but with the last layer's weights and bias zeroed (used for
    /// flow heads so an untrained net predicts exactly zero flow).
    pub fn init_mlp_zero_head(
        &mut self,
        prefix: &str,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) {
        self.init_mlp(prefix, dims, false, rng);
        let last = dims.len() - 2;
        let name = format!("{prefix}.{last}.w");
        let i = self.index[&name];
        let shape = self.entries[i].1.shape().to_vec();
        self.entries[i].1 = Tensor::zeros(&shape);
    }

    pub fn init_conv(
        &mut self,
        prefix: &str,
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) {
        self.insert(
            &format!("{prefix}.w"),
            glorot_uniform(rng, &[kh, kw, cin, cout], kh * kw * cin, cout),
        );
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[cout]));
        self.convs.insert(
            prefix.to_string(),
            ConvSpec {
                kh,
                kw,
                cin,
                cout,
                stride,
            },
        );
    }

    pub fn mlp_spec(&self, prefix: &str) -> &MlpSpec {
        &self.mlps[prefix]
    }

    /// Overwrite tensor values by name, e.g. after loading a weights file.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in values {
            let i = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if self.entries[i].1.shape() != t.shape() {
                return Err(Error::Shape(format!("parameter {name} shape mismatch")));
            }
            self.entries[i].1 = t;
        }
        Ok(())
    }
}

/// Per-tape handles for a bound [`ParamSet`].
pub struct Bound {
    ids: Vec<Var>,
    index: HashMap<String, usize>,
    mlps: HashMap<String, MlpSpec>,
    convs: HashMap<String, ConvSpec>,
}

impl Bound {
    pub fn bind(params: &ParamSet, tape: &mut Tape) -> Self {
        let ids = params
            .entries
            .iter()
            .map(|(_, t)| tape.var(t.clone()))
            .collect();
        Bound {
            ids,
            index: params.index.clone(),
            mlps: params.mlps.clone(),
            convs: params.convs.clone(),
        }
    }

    /// Bind from an explicit list of vars aligned with the entry order
    /// (used by grad_check, which owns the input registration).
    pub fn bind_vars(params: &ParamSet, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.entries.len());
        Bound {
            ids: vars,
            index: params.index.clone(),
            mlps: params.mlps.clone(),
            convs: params.convs.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.ids
    }

    pub fn mlp(&self, prefix: &str) -> MlpVars {
        let spec = self
            .mlps
            .get(prefix)
            .unwrap_or_else(|| panic!("unknown mlp {prefix}"));
        let layers = (0..spec.dims.len() - 1)
            .map(|l| {
                (
                    self.var(&format!("{prefix}.{l}.w")),
                    self.var(&format!("{prefix}.{l}.b")),
                )
            })
            .collect();
        MlpVars {
            layers,
            activate_last: spec.activate_last,
        }
    }

    pub fn conv(&self, prefix: &str) -> ConvVars {
        let spec = self
            .convs
            .get(prefix)
            .unwrap_or_else(|| panic!("unknown conv {prefix}"));
        ConvVars {
            w: self.var(&format!("{prefix}.w")),
            b: self.var(&format!("{prefix}.b")),
            stride: spec.stride,
        }
    }
}

/// Tape handles for one shared MLP.
#[derive(Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub activate_last: bool,
}

#[derive(Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
}

/// Affine chain with a leaky rectifier between layers. Leading dims of
/// `x` broadcast; the trailing dim must match the first layer.
pub fn mlp_forward(tape: &mut Tape, w: &MlpVars, x: Var) -> Var {
    let n = w.layers.len();
    let mut h = x;
    for (l, &(wv, bv)) in w.layers.iter().enumerate() {
        h = tape.linear(h, wv, bv);
        if l + 1 < n || w.activate_last {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    h
}
