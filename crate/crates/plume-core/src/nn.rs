//! Minimal fully-connected networks with Adam, enough for the return
//! predictor and the Q-learner. f32 throughout; batches are row-major
//! `(batch, dim)` arrays.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    /// `(input, output)`
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub dw: Array2<f32>,
    pub db: Array1<f32>,
}

impl Dense {
    /// He-initialized layer.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Dense {
        let std = (2.0 / input as f32).sqrt();
        let normal = Normal::new(0.0f32, std).unwrap();
        Dense {
            w: Array2::from_shape_fn((input, output), |_| normal.sample(rng)),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.w) + &self.b
    }

    /// Returns (input gradient, parameter gradients).
    pub fn backward(&self, x: &Array2<f32>, grad_out: &Array2<f32>) -> (Array2<f32>, DenseGrad) {
        let dw = x.t().dot(grad_out);
        let db = grad_out.sum_axis(Axis(0));
        let dx = grad_out.dot(&self.w.t());
        (dx, DenseGrad { dw, db })
    }
}

fn relu(x: &mut Array2<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn relu_grad(activated: &Array2<f32>, grad: &mut Array2<f32>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Plain feed-forward net: ReLU after every layer except (optionally) the
/// last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Apply ReLU after the final layer too (used for trunk networks).
    pub relu_out: bool,
}

/// Post-activation outputs of every layer, preceded by the input.
pub struct MlpCache {
    activations: Vec<Array2<f32>>,
}

impl Mlp {
    pub fn new(sizes: &[usize], relu_out: bool, rng: &mut impl Rng) -> Mlp {
        assert!(sizes.len() >= 2);
        let layers = sizes
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Mlp { layers, relu_out }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() || self.relu_out {
                relu(&mut h);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f32>) -> (MlpCache, Array2<f32>) {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i + 1 < self.layers.len() || self.relu_out {
                relu(&mut h);
            }
            activations.push(h.clone());
        }
        let out = h;
        (MlpCache { activations }, out)
    }

    /// Backprop `grad_out` (d loss / d output); returns input grad and
    /// per-layer parameter grads aligned to `layers`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &Array2<f32>,
    ) -> (Array2<f32>, Vec<DenseGrad>) {
        let mut grads = vec![None; self.layers.len()];
        let mut grad = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() || self.relu_out {
                relu_grad(&cache.activations[i + 1], &mut grad);
            }
            let (dx, g) = layer.backward(&cache.activations[i], &grad);
            grads[i] = Some(g);
            grad = dx;
        }
        (grad, grads.into_iter().map(Option::unwrap).collect())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Adam over a flat list of dense layers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<DenseGrad>,
    v: Vec<DenseGrad>,
}

impl Adam {
    pub fn new(layers: &[Dense], lr: f32) -> Adam {
        let zero = |l: &Dense| DenseGrad {
            dw: Array2::zeros(l.w.raw_dim()),
            db: Array1::zeros(l.b.raw_dim()),
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: layers.iter().map(zero).collect(),
            v: layers.iter().map(zero).collect(),
        }
    }

    pub fn step(&mut self, layers: &mut [Dense], grads: &[DenseGrad]) {
        assert_eq!(layers.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((layer, grad), (m, v)) in layers
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut m.dw)
                .and(&grad.dw)
                .for_each(|m, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                });
            ndarray::Zip::from(&mut v.dw)
                .and(&grad.dw)
                .for_each(|v, &g| {
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                });
            ndarray::Zip::from(&mut layer.w)
                .and(&m.dw)
                .and(&v.dw)
                .for_each(|w, &m, &v| {
                    *w -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
            ndarray::Zip::from(&mut m.db)
                .and(&grad.db)
                .for_each(|m, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                });
            ndarray::Zip::from(&mut v.db)
                .and(&grad.db)
                .for_each(|v, &g| {
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                });
            ndarray::Zip::from(&mut layer.b)
                .and(&m.db)
                .and(&v.db)
                .for_each(|b, &m, &v| {
                    *b -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
        }
    }
}

/// One squared-error regression step; returns the batch loss.
pub fn mse_step(net: &mut Mlp, opt: &mut Adam, x: &Array2<f32>, y: &[f32]) -> f32 {
    assert_eq!(x.nrows(), y.len());
    let (cache, out) = net.forward_cached(x);
    debug_assert_eq!(out.ncols(), 1);
    let n = y.len() as f32;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(out.raw_dim());
    for (i, &target) in y.iter().enumerate() {
        let diff = out[(i, 0)] - target;
        loss += diff * diff;
        grad[(i, 0)] = 2.0 * diff / n;
    }
    let (_, grads) = net.backward(&cache, &grad);
    opt.step(&mut net.layers, &grads);
    loss / n
}

/// Q-network: shared ReLU trunk with a single linear head, or dueling
/// value/advantage heads combined as `Q = V + A - mean(A)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QNetwork {
    pub trunk: Mlp,
    pub head: QHead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum QHead {
    Single(Dense),
    Dueling { value: Dense, advantage: Dense },
}

pub struct QCache {
    trunk: MlpCache,
    features: Array2<f32>,
}

impl QNetwork {
    pub fn new(
        input: usize,
        hidden: &[usize],
        actions: usize,
        dueling: bool,
        rng: &mut impl Rng,
    ) -> QNetwork {
        assert!(!hidden.is_empty());
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        let trunk = Mlp::new(&sizes, true, rng);
        let last = *hidden.last().unwrap();
        let head = if dueling {
            QHead::Dueling {
                value: Dense::new(last, 1, rng),
                advantage: Dense::new(last, actions, rng),
            }
        } else {
            QHead::Single(Dense::new(last, actions, rng))
        };
        QNetwork { trunk, head }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let f = self.trunk.forward(x);
        self.head_forward(&f)
    }

    fn head_forward(&self, f: &Array2<f32>) -> Array2<f32> {
        match &self.head {
            QHead::Single(out) => out.forward(f),
            QHead::Dueling { value, advantage } => {
                let v = value.forward(f);
                let a = advantage.forward(f);
                let mean = a.mean_axis(Axis(1)).unwrap();
                let mut q = a;
                for (mut row, (&vv, &mm)) in q
                    .rows_mut()
                    .into_iter()
                    .zip(v.column(0).iter().zip(mean.iter()))
                {
                    row.mapv_inplace(|adv| vv + adv - mm);
                }
                q
            }
        }
    }

    pub fn forward_cached(&self, x: &Array2<f32>) -> (QCache, Array2<f32>) {
        let (trunk, f) = self.trunk.forward_cached(x);
        let q = self.head_forward(&f);
        (QCache { trunk, features: f }, q)
    }

    /// Apply one Adam step for `d loss / d Q` in `grad_q`.
    pub fn apply_grad(&mut self, opt: &mut Adam, cache: &QCache, grad_q: &Array2<f32>) {
        let (grad_f, mut head_grads) = match &self.head {
            QHead::Single(out) => {
                let (df, g) = out.backward(&cache.features, grad_q);
                (df, vec![g])
            }
            QHead::Dueling { value, advantage } => {
                let dv = grad_q
                    .sum_axis(Axis(1))
                    .into_shape_with_order((grad_q.nrows(), 1))
                    .unwrap();
                let row_mean = grad_q.mean_axis(Axis(1)).unwrap();
                let mut da = grad_q.clone();
                for (mut row, &m) in da.rows_mut().into_iter().zip(row_mean.iter()) {
                    row.mapv_inplace(|g| g - m);
                }
                let (df_v, gv) = value.backward(&cache.features, &dv);
                let (df_a, ga) = advantage.backward(&cache.features, &da);
                (df_v + df_a, vec![gv, ga])
            }
        };
        let (_, trunk_grads) = self.trunk.backward(&cache.trunk, &grad_f);
        let mut all_grads = trunk_grads;
        all_grads.append(&mut head_grads);
        let mut layers: Vec<&mut Dense> = self.trunk.layers.iter_mut().collect();
        match &mut self.head {
            QHead::Single(out) => layers.push(out),
            QHead::Dueling { value, advantage } => {
                layers.push(value);
                layers.push(advantage);
            }
        }
        debug_assert_eq!(layers.len(), all_grads.len());
        // Adam moments are aligned to this flattened layer order.
        opt.step_refs(&mut layers, &all_grads);
    }

    pub fn all_layers(&self) -> Vec<&Dense> {
        let mut layers: Vec<&Dense> = self.trunk.layers.iter().collect();
        match &self.head {
            QHead::Single(out) => layers.push(out),
            QHead::Dueling { value, advantage } => {
                layers.push(value);
                layers.push(advantage);
            }
        }
        layers
    }
}

impl Adam {
    pub fn for_qnet(net: &QNetwork, lr: f32) -> Adam {
        let layers: Vec<Dense> = net.all_layers().into_iter().cloned().collect();
        Adam::new(&layers, lr)
    }

    fn step_refs(&mut self, layers: &mut [&mut Dense], grads: &[DenseGrad]) {
        assert_eq!(layers.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((layer, grad), (m, v)) in layers
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut m.dw)
                .and(&grad.dw)
                .for_each(|m, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                });
            ndarray::Zip::from(&mut v.dw)
                .and(&grad.dw)
                .for_each(|v, &g| {
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                });
            ndarray::Zip::from(&mut layer.w)
                .and(&m.dw)
                .and(&v.dw)
                .for_each(|w, &m, &v| {
                    *w -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
            ndarray::Zip::from(&mut m.db)
                .and(&grad.db)
                .for_each(|m, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                });
            ndarray::Zip::from(&mut v.db)
                .and(&grad.db)
                .for_each(|v, &g| {
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                });
            ndarray::Zip::from(&mut layer.b)
                .and(&m.db)
                .and(&v.db)
                .for_each(|b, &m, &v| {
                    *b -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
        }
    }
}
