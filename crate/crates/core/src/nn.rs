//! Dueling Q-network with input batch normalization, exact reverse-mode
//! gradients and Adam.
//!
//! All trainable parameters live in one flat vector, in this order:
//!
//! 1. batch-norm scale, then shift (`input_dim` each);
//! 2. each trunk layer: weight (`out x in`, row-major), then bias;
//! 3. value head: hidden weight and bias, then output weight (`1 x head`) and bias;
//! 4. advantage head: hidden weight and bias, then output weight (`|A| x head`) and bias.
//!
//! Running batch-norm statistics are stored separately and are not trained.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;
const MAGIC: &[u8; 4] = b"GTQN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    #[default]
    FanInUniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub trunk: Vec<usize>,
    pub head_hidden: usize,
    pub n_actions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitScheme,
}

impl NetConfig {
    /// Reference sizes: trunk 512, 256 and heads of 128.
    pub fn reference(input_dim: usize, n_actions: usize) -> Self {
        NetConfig {
            input_dim,
            trunk: vec![512, 256],
            head_hidden: 128,
            n_actions,
            seed: 0,
            init: InitScheme::FanInUniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.head_hidden == 0 || self.n_actions == 0 || self.trunk.contains(&0) {
            return Err(Error::Config("network sizes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn weight<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.n_out, self.n_in), &theta[self.w..self.w + self.n_out * self.n_in]).unwrap()
    }

    fn bias<'a>(&self, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&theta[self.b..self.b + self.n_out])
    }

    fn apply(&self, theta: &[f64], x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight(theta).t()) + &self.bias(theta)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, theta: &[f64], x: &Array2<f64>, dy: &Array2<f64>, grad: &mut [f64], need_dx: bool) -> Option<Array2<f64>> {
        let mut dw = ArrayViewMut2::from_shape((self.n_out, self.n_in), &mut grad[self.w..self.w + self.n_out * self.n_in]).unwrap();
        dw += &dy.t().dot(x);
        for (g, d) in grad[self.b..self.b + self.n_out].iter_mut().zip(dy.sum_axis(Axis(0))) {
            *g += d;
        }
        need_dx.then(|| dy.dot(&self.weight(theta)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    bn_scale: usize,
    bn_shift: usize,
    trunk: Vec<Dense>,
    v1: Dense,
    v2: Dense,
    a1: Dense,
    a2: Dense,
    len: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let mut off = 2 * cfg.input_dim;
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense {
                w: off,
                b: off + n_in * n_out,
                n_in,
                n_out,
            };
            off += n_in * n_out + n_out;
            d
        };
        let bn_scale = 0;
        let bn_shift = cfg.input_dim;
        let mut trunk = Vec::new();
        let mut width = cfg.input_dim;
        for &h in &cfg.trunk {
            trunk.push(dense(width, h));
            width = h;
        }
        let v1 = dense(width, cfg.head_hidden);
        let v2 = dense(cfg.head_hidden, 1);
        let a1 = dense(width, cfg.head_hidden);
        let a2 = dense(cfg.head_hidden, cfg.n_actions);
        Layout {
            bn_scale,
            bn_shift,
            trunk,
            v1,
            v2,
            a1,
            a2,
            len: off,
        }
    }

    fn all_dense(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.v1, &self.v2, &self.a1, &self.a2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics (running statistics for a batch of one).
    Train,
    /// Running statistics only.
    Infer,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub xhat: Array2<f64>,
    /// Input to each trunk layer followed by the trunk output.
    pub trunk: Vec<Array2<f64>>,
    pub hv: Array2<f64>,
    pub ha: Array2<f64>,
    pub v: Array1<f64>,
    pub a: Array2<f64>,
    pub q: Array2<f64>,
    /// Batch mean and biased variance when batch statistics were used.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    layout: Layout,
    pub theta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn relu(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

fn relu_backward(dy: &mut Array2<f64>, y: &Array2<f64>) {
    Zip::from(dy).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

impl Network {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut theta = vec![0.0; layout.len];
        theta[layout.bn_scale..layout.bn_scale + config.input_dim].fill(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for d in layout.all_dense() {
            let bound = 1.0 / (d.n_in as f64).sqrt();
            for w in &mut theta[d.w..d.b] {
                *w = rng.random_range(-bound..bound);
            }
        }
        let n = config.input_dim;
        Ok(Network {
            config,
            layout,
            theta,
            running_mean: vec![0.0; n],
            running_var: vec![1.0; n],
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    /// Set the running statistics to the moments of `states`.
    pub fn calibrate_input_stats(&mut self, states: ArrayView2<f64>) {
        if states.nrows() == 0 {
            return;
        }
        let mean = states.mean_axis(Axis(0)).unwrap();
        let var = states.var_axis(Axis(0), 0.0);
        self.running_mean = mean.to_vec();
        self.running_var = var.iter().map(|v| v.max(1e-12)).collect();
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!("state width {} != input dim {}", x.ncols(), self.config.input_dim)));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<Forward> {
        self.check_input(&x)?;
        let n = self.config.input_dim;
        let l = &self.layout;
        let theta = &self.theta;
        let (mean, var, batch_stats) = if mode == Mode::Train && x.nrows() > 1 {
            let mean = x.mean_axis(Axis(0)).unwrap();
            let var = x.var_axis(Axis(0), 0.0);
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            (Array1::from(self.running_mean.clone()), Array1::from(self.running_var.clone()), None)
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (&x - &mean) * &inv_std;
        let scale = ArrayView1::from(&theta[l.bn_scale..l.bn_scale + n]);
        let shift = ArrayView1::from(&theta[l.bn_shift..l.bn_shift + n]);
        let mut h = &xhat * &scale + &shift;
        let mut trunk = Vec::with_capacity(l.trunk.len() + 1);
        for d in &l.trunk {
            let next = relu(d.apply(theta, &h));
            trunk.push(h);
            h = next;
        }
        trunk.push(h);
        let top = trunk.last().unwrap();
        let hv = relu(l.v1.apply(theta, top));
        let v = l.v2.apply(theta, &hv).column(0).to_owned();
        let ha = relu(l.a1.apply(theta, top));
        let a = l.a2.apply(theta, &ha);
        let a_mean = a.mean_axis(Axis(1)).unwrap();
        let mut q = a.clone();
        for ((mut row, &vi), &mi) in q.rows_mut().into_iter().zip(&v).zip(&a_mean) {
            row.mapv_inplace(|ai| vi + (ai - mi));
        }
        Ok(Forward {
            xhat,
            trunk,
            hv,
            ha,
            v,
            a,
            q,
            batch_stats,
        })
    }

    /// Q-values in inference mode.
    pub fn q_values(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, Mode::Infer)?.q)
    }

    /// Q-values of a single state.
    pub fn q_single(&self, state: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.q_values(x)?.row(0).to_vec())
    }

    /// Blend batch statistics from a train-mode pass into the running ones.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        if let Some((mean, var)) = &fwd.batch_stats {
            for i in 0..self.running_mean.len() {
                self.running_mean[i] = BN_MOMENTUM * self.running_mean[i] + (1.0 - BN_MOMENTUM) * mean[i];
                self.running_var[i] = BN_MOMENTUM * self.running_var[i] + (1.0 - BN_MOMENTUM) * var[i];
            }
        }
    }

    /// Parameter gradient given the upstream gradient of the Q-matrix.
    pub fn backward(&self, fwd: &Forward, dq: ArrayView2<f64>) -> Vec<f64> {
        let l = &self.layout;
        let theta = &self.theta;
        let n_act = self.config.n_actions as f64;
        let mut grad = vec![0.0; theta.len()];

        let dv = dq.sum_axis(Axis(1));
        let mut da = dq.to_owned();
        for mut row in da.rows_mut() {
            let m = row.sum() / n_act;
            row.mapv_inplace(|x| x - m);
        }
        let dv2 = dv.insert_axis(Axis(1));
        let mut dhv = l.v2.backward(theta, &fwd.hv, &dv2, &mut grad, true).unwrap();
        relu_backward(&mut dhv, &fwd.hv);
        let mut dha = l.a2.backward(theta, &fwd.ha, &da, &mut grad, true).unwrap();
        relu_backward(&mut dha, &fwd.ha);
        let top = fwd.trunk.last().unwrap();
        let mut dh = l.v1.backward(theta, top, &dhv, &mut grad, true).unwrap();
        dh += &l.a1.backward(theta, top, &dha, &mut grad, true).unwrap();
        for (i, d) in l.trunk.iter().enumerate().rev() {
            relu_backward(&mut dh, &fwd.trunk[i + 1]);
            dh = d.backward(theta, &fwd.trunk[i], &dh, &mut grad, true).unwrap();
        }
        // The normalized input does not depend on any parameter.
        let n = self.config.input_dim;
        let dscale = (&dh * &fwd.xhat).sum_axis(Axis(0));
        let dshift = dh.sum_axis(Axis(0));
        for i in 0..n {
            grad[l.bn_scale + i] = dscale[i];
            grad[l.bn_shift + i] = dshift[i];
        }
        grad
    }

    /// Loss `(1/B) sum w_i (y_i - Q(s_i, a_i))^2` in train mode, its gradient
    /// and the forward pass it came from.
    pub fn td_loss_grad(&self, x: ArrayView2<f64>, actions: &[usize], y: &[f64], w: &[f64]) -> Result<(f64, Vec<f64>, Forward)> {
        let b = x.nrows();
        if actions.len() != b || y.len() != b || w.len() != b {
            return Err(Error::Shape("batch sizes disagree".into()));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= self.config.n_actions) {
            return Err(Error::Shape(format!("action {a} out of range")));
        }
        let fwd = self.forward(x, Mode::Train)?;
        let mut dq = Array2::zeros(fwd.q.raw_dim());
        let mut loss = 0.0;
        for i in 0..b {
            let err = y[i] - fwd.q[(i, actions[i])];
            loss += w[i] * err * err;
            dq[(i, actions[i])] = -2.0 * w[i] * err / b as f64;
        }
        let grad = self.backward(&fwd, dq.view());
        Ok((loss / b as f64, grad, fwd))
    }

    /// Hard copy of all parameters and running statistics.
    pub fn copy_weights_to(&self, target: &mut Network) -> Result<()> {
        if target.config != self.config {
            return Err(Error::Incompatible("network configs differ".into()));
        }
        target.theta.copy_from_slice(&self.theta);
        target.running_mean.copy_from_slice(&self.running_mean);
        target.running_var.copy_from_slice(&self.running_var);
        Ok(())
    }

    /// Serialize to the versioned weight format.
    pub fn to_bytes(&self, manifest_hash: &[u8; 32]) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(64 + cfg.len() + 8 * (self.theta.len() + 2 * self.running_mean.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(manifest_hash);
        for arr in [&self.theta, &self.running_mean, &self.running_var] {
            out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse the weight format. Returns the network and its stored manifest hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Network, [u8; 32])> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Incompatible("not a weight file".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!("weight format version {version}, expected {FORMAT_VERSION}")));
        }
        let cfg_len = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if cfg_len > r.len() {
            return Err(Error::Incompatible("truncated weight file".into()));
        }
        let config: NetConfig = serde_json::from_slice(&r[..cfg_len])?;
        r = &r[cfg_len..];
        let hash: [u8; 32] = read_array(&mut r)?;
        let mut net = Network::new(config)?;
        for arr in [&mut net.theta, &mut net.running_mean, &mut net.running_var] {
            let len = u64::from_le_bytes(read_array(&mut r)?) as usize;
            if len != arr.len() {
                return Err(Error::Incompatible(format!("array length {len}, expected {}", arr.len())));
            }
            for v in arr.iter_mut() {
                *v = f64::from_le_bytes(read_array(&mut r)?);
            }
        }
        if !r.is_empty() {
            return Err(Error::Incompatible("trailing bytes in weight file".into()));
        }
        Ok((net, hash))
    }

    pub fn save(&self, path: &Path, manifest_hash: &[u8; 32]) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes(manifest_hash)).map_err(|e| Error::io(path, e))
    }

    /// Load weights; when `expected_hash` is given the stored manifest hash must match.
    pub fn load(path: &Path, expected_hash: Option<&[u8; 32]>) -> Result<(Network, [u8; 32])> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let (net, hash) = Network::from_bytes(&bytes)?;
        if let Some(expected) = expected_hash {
            if &hash != expected {
                return Err(Error::Incompatible(format!(
                    "weights were trained for action space {}, live manifest is {}",
                    hex::encode(hash),
                    hex::encode(expected)
                )));
            }
        }
        Ok((net, hash))
    }

    /// Row-slice helper used by training code.
    pub fn rows(states: &[Vec<f64>]) -> Array2<f64> {
        let d = states.first().map_or(0, Vec::len);
        let mut x = Array2::zeros((states.len(), d));
        for (i, s) in states.iter().enumerate() {
            x.slice_mut(s![i, ..]).assign(&ArrayView1::from(s.as_slice()));
        }
        x
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Incompatible("truncated weight file".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), self.m.len(), "optimizer shape mismatch");
        assert_eq!(grad.len(), self.m.len(), "gradient shape mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
