//! Named parameter sets, the layers built on them, and Adam.

use rand::Rng;

use crate::tensor::{shape_err, CheckpointFile, Gradients, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.values[id.0].shape());
        self.values[id.0] = value;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Uses caller-made variables, one per parameter in order, in place of
    /// the stored values.
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> Result<Bound<'t>> {
        if vars.len() != self.values.len() {
            return Err(shape_err(
                "bind_vars",
                format!("{} variables for {} parameters", vars.len(), self.values.len()),
            ));
        }
        for ((name, value), var) in self.iter().zip(&vars) {
            if var.shape() != value.shape() {
                return Err(shape_err(
                    "bind_vars",
                    format!("{name} expects {:?}, got {:?}", value.shape(), var.shape()),
                ));
            }
        }
        Ok(Bound { vars })
    }

    /// Appends all parameters to a checkpoint under `prefix`.
    pub fn export(&self, prefix: &str, file: &mut CheckpointFile) {
        for (name, value) in self.iter() {
            file.push(format!("{prefix}{name}"), value.clone());
        }
    }

    /// Replaces every parameter with the checkpoint tensor of the same name
    /// and shape.
    pub fn import(&mut self, prefix: &str, file: &CheckpointFile) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let key = format!("{prefix}{name}");
            let stored = file
                .tensor(&key)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor {key}")))?;
            if stored.shape() != value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{key}: stored shape {:?}, model expects {:?}",
                    stored.shape(),
                    value.shape()
                )));
            }
            *value = stored.clone();
        }
        Ok(())
    }
}

/// A [`ParamSet`] placed on a tape for one forward pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient per parameter, zeros where the loss did not reach.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }

    /// Euclidean norm of the concatenated parameter gradient.
    pub fn grad_norm(&self, grads: &Gradients) -> f64 {
        self.vars
            .iter()
            .filter_map(|v| grads.get(v))
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// 2-D convolution with per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// He-initialised `k x k` convolution with "same" padding.
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = set.add(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
        let bias = set.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Convolution whose weights and bias start at exactly zero.
    pub fn zeros(set: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = set.add(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
        let bias = set.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.var(self.weight), self.stride, self.pad)?
            .bias_add(p.var(self.bias))
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}

/// Affine map `x W + b` on `[B, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self::with_init(
            set,
            name,
            Tensor::randn(&[fan_in, fan_out], std, rng),
            Tensor::zeros(&[1, fan_out]),
        )
    }

    pub fn with_init(set: &mut ParamSet, name: &str, weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight: set.add(format!("{name}.w"), weight),
            bias: set.add(format!("{name}.b"), bias),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.var(self.weight))?.add(p.var(self.bias))
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

/// Adaptive moment estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = &params.values[i];
            let mut m = self.m[i].to_vec();
            let mut v = self.v[i].to_vec();
            let mut out = p.to_vec();
            for j in 0..out.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                out[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            let shape = p.shape().to_vec();
            self.m[i] = Tensor::from_parts(shape.clone(), m);
            self.v[i] = Tensor::from_parts(shape.clone(), v);
            params.values[i] = Tensor::from_parts(shape, out);
        }
    }

    pub fn export(&self, prefix: &str, params: &ParamSet, file: &mut CheckpointFile) {
        file.push(format!("{prefix}step"), Tensor::scalar(self.step as f64));
        for ((name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            file.push(format!("{prefix}m.{name}"), m.clone());
            file.push(format!("{prefix}v.{name}"), v.clone());
        }
    }

    pub fn import(&mut self, prefix: &str, params: &ParamSet, file: &CheckpointFile) -> Result<()> {
        let fetch = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = file
                .tensor(&key)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != like.shape() {
                return Err(TensorError::Checkpoint(format!("{key}: shape mismatch")));
            }
            Ok(t.clone())
        };
        self.step = fetch(format!("{prefix}step"), &Tensor::scalar(0.0))?.item() as u64;
        for (i, (name, p)) in params.iter().enumerate() {
            self.m[i] = fetch(format!("{prefix}m.{name}"), p)?;
            self.v[i] = fetch(format!("{prefix}v.{name}"), p)?;
        }
        Ok(())
    }
}

/// Frozen stack of three stride-2 3x3 convolutions with ReLU, drawn from a
/// seeded generator. Used as a fixed feature extractor.
#[derive(Clone, Debug)]
pub struct RandomConvStack {
    params: ParamSet,
    stages: [Conv2d; 3],
}

impl RandomConvStack {
    pub fn new(seed: u64, channels: [usize; 4]) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let [c0, c1, c2, c3] = channels;
        let stages = [
            Conv2d::new(&mut params, "f1", c0, c1, 3, 2, &mut rng),
            Conv2d::new(&mut params, "f2", c1, c2, 3, 2, &mut rng),
            Conv2d::new(&mut params, "f3", c2, c3, 3, 2, &mut rng),
        ];
        Self { params, stages }
    }

    /// Activations after each stage. Parameters enter the tape as constants.
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<[Var<'t>; 3]> {
        let p = self.params.bind(x.tape(), false);
        let a = self.stages[0].forward(&p, x)?.relu();
        let b = self.stages[1].forward(&p, a)?.relu();
        let c = self.stages[2].forward(&p, b)?.relu();
        Ok([a, b, c])
    }
}
