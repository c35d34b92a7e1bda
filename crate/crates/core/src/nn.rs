//! Parameter storage, layers, initialization, and the SGD optimizer.

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, name-addressed storage of all trainable tensors.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    values: Vec<ArrayD<f64>>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name '{name}'"
        );
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn to_entries(&self) -> Vec<ParamEntry> {
        self.values
            .iter()
            .zip(&self.names)
            .map(|(v, n)| ParamEntry {
                name: n.clone(),
                shape: v.shape().to_vec(),
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrite values from serialized entries; names and shapes must match.
    pub fn load_entries(&mut self, entries: &[ParamEntry]) -> Result<(), String> {
        if entries.len() != self.values.len() {
            return Err(format!(
                "parameter count mismatch: checkpoint has {}, model has {}",
                entries.len(),
                self.values.len()
            ));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.name != self.names[i] {
                return Err(format!(
                    "parameter name mismatch at {i}: '{}' vs '{}'",
                    e.name, self.names[i]
                ));
            }
            if e.shape != self.values[i].shape() {
                return Err(format!("parameter shape mismatch for '{}'", e.name));
            }
            self.values[i] = ArrayD::from_shape_vec(IxDyn(&e.shape), e.data.clone())
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

/// He-normal initialization for a conv weight (cout,cin,kh,kw).
pub fn init_conv_weight<R: Rng>(
    rng: &mut R,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<f64> {
    let fan_in = (cin * kh * kw) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    Array4::from_shape_fn((cout, cin, kh, kw), |_| dist.sample(rng)).into_dyn()
}

/// He-normal initialization for a linear weight (out,inp).
pub fn init_linear_weight<R: Rng>(rng: &mut R, out: usize, inp: usize) -> ArrayD<f64> {
    let dist = Normal::new(0.0, (2.0 / inp as f64).sqrt()).unwrap();
    ndarray::Array2::from_shape_fn((out, inp), |_| dist.sample(rng)).into_dyn()
}

/// Fixed-std normal initialization (prediction heads start near zero).
pub fn init_weight_std<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// 3x3 (or kxk) convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), init_conv_weight(rng, cout, cin, k, k));
        let b = store.register(format!("{name}.b"), zeros(&[cout]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        tape.bias_nchw(y, b)
    }

    /// Conv layer whose weights start at a fixed small std (prediction
    /// outputs).
    #[allow(clippy::too_many_arguments)]
    pub fn new_scaled<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            init_weight_std(rng, &[cout, cin, k, k], std),
        );
        let b = store.register(format!("{name}.b"), zeros(&[cout]));
        Conv2d { w, b, stride, pad }
    }
}

/// Fully connected layer with bias.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), init_linear_weight(rng, out, inp));
        let b = store.register(format!("{name}.b"), zeros(&[out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul_nt(x, w);
        tape.bias_rows(y, b)
    }

    /// Linear layer whose weights start at a fixed small std.
    pub fn new_scaled<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        inp: usize,
        out: usize,
        std: f64,
    ) -> Self {
        let w = store.register(format!("{name}.w"), init_weight_std(rng, &[out, inp], std));
        let b = store.register(format!("{name}.b"), zeros(&[out]));
        Linear { w, b }
    }
}

/// Stochastic gradient descent with momentum and weight decay
/// (v = mu*v + g + wd*w; w -= lr*v).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: store
                .ids()
                .map(|id| ArrayD::zeros(store.value(id).raw_dim()))
                .collect(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &crate::autograd::Gradients,
        lr: f64,
        clip_norm: Option<f64>,
    ) {
        let ids: Vec<ParamId> = store.ids().collect();
        let collected: Vec<(ParamId, ndarray::ArrayD<f64>)> = ids
            .iter()
            .filter_map(|&id| grads.param_grad(id).map(|g| (id, g)))
            .collect();
        let mut scale = 1.0;
        if let Some(clip) = clip_norm {
            let norm: f64 = collected
                .iter()
                .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        for (id, g) in collected {
            let buf = &mut self.buffers[id.index()];
            let w = store.value_mut(id);
            ndarray::Zip::from(&mut *buf)
                .and(&g)
                .and(&*w)
                .for_each(|v, &gv, &wv| {
                    *v = self.momentum * *v + gv * scale + self.weight_decay * wv;
                });
            ndarray::Zip::from(w).and(&*buf).for_each(|wv, &v| {
                *wv -= lr * v;
            });
        }
    }

    pub fn buffers(&self) -> &[ArrayD<f64>] {
        &self.buffers
    }

    pub fn load_buffers(&mut self, bufs: Vec<ArrayD<f64>>) -> Result<(), String> {
        if bufs.len() != self.buffers.len() {
            return Err("optimizer buffer count mismatch".into());
        }
        for (have, want) in self.buffers.iter().zip(&bufs) {
            if have.shape() != want.shape() {
                return Err("optimizer buffer shape mismatch".into());
            }
        }
        self.buffers = bufs;
        Ok(())
    }
}

/// Per-channel bias vector as an Array1 helper.
pub fn bias_array(v: &[f64]) -> Array1<f64> {
    Array1::from_vec(v.to_vec())
}
