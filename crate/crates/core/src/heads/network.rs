use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fully connected layer, weights stored row-major as `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        let rows = input.len() / self.n_in;
        out.clear();
        out.reserve(rows * self.n_out);
        for x in input.chunks_exact(self.n_in) {
            for o in 0..self.n_out {
                let w = &self.w[o * self.n_in..(o + 1) * self.n_in];
                out.push(self.b[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
            }
        }
    }
}

/// A linear map, or linear -> ReLU -> linear when a hidden width is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Dense>,
}

pub struct ForwardCache {
    /// Input to each layer; the last entry holds the logits.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("non-empty cache")
    }
}

impl Network {
    pub fn random<R: Rng>(n_in: usize, hidden: Option<usize>, n_out: usize, std: f64, rng: &mut R) -> Self {
        let dims: Vec<usize> = match hidden {
            Some(h) => vec![n_in, h, n_out],
            None => vec![n_in, n_out],
        };
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                // The hidden layer needs a He-scaled start or ReLU units die.
                let s = if i + 2 < dims.len() { (2.0 / d[0] as f64).sqrt() } else { std };
                let normal = Normal::new(0.0, s).expect("finite std");
                Dense {
                    n_in: d[0],
                    n_out: d[1],
                    w: (0..d[0] * d[1]).map(|_| normal.sample(rng)).collect(),
                    b: vec![0.0; d[1]],
                }
            })
            .collect();
        Network { layers }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    n_in: l.n_in,
                    n_out: l.n_out,
                    w: l.w.iter().map(|&v| f(v)).collect(),
                    b: l.b.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn hidden(&self) -> Option<usize> {
        (self.layers.len() > 1).then(|| self.layers[0].n_out)
    }

    pub fn forward_cached(&self, input: &[f64]) -> ForwardCache {
        let mut activations = vec![input.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.apply(activations.last().unwrap(), &mut out);
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(out);
        }
        ForwardCache { activations }
    }

    pub fn logits(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).activations.pop().unwrap()
    }

    pub fn probabilities(&self, input: &[f64], temperature: f64) -> Vec<f64> {
        let mut out = self.logits(input);
        for row in out.chunks_exact_mut(self.n_out()) {
            crate::linalg::softmax_inplace(row, temperature);
        }
        out
    }

    /// Gradient of a scalar loss given its gradient with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Network {
        let mut grads = self.zeros_like();
        let mut upstream = dlogits.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.activations[li];
            let g = &mut grads.layers[li];
            let mut down = vec![0f64; input.len()];
            for (r, x) in input.chunks_exact(layer.n_in).enumerate() {
                let d = &upstream[r * layer.n_out..(r + 1) * layer.n_out];
                let dx = &mut down[r * layer.n_in..(r + 1) * layer.n_in];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.b[o] += dv;
                    let w = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                    let gw = &mut g.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for i in 0..layer.n_in {
                        gw[i] += dv * x[i];
                        dx[i] += dv * w[i];
                    }
                }
            }
            if li > 0 {
                // ReLU mask from the stored post-activation values.
                for (v, &a) in down.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            upstream = down;
        }
        grads
    }

    fn zip_mut(&mut self, other: &Network, f: impl Fn(&mut f64, f64, bool)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, &y)| f(x, y, true));
            a.b.iter_mut().zip(&b.b).for_each(|(x, &y)| f(x, y, false));
        }
    }

    /// `self += wd * params` on weights only.
    pub fn add_weight_decay(&mut self, params: &Network, wd: f64) {
        if wd != 0.0 {
            self.zip_mut(params, |g, p, is_w| {
                if is_w {
                    *g += wd * p
                }
            });
        }
    }

    /// `self = mu * self + scale * other`.
    pub fn scale_add(&mut self, mu: f64, other: &Network, scale: f64) {
        self.zip_mut(other, |a, b, _| *a = mu * *a + scale * b);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Network) {
        self.zip_mut(other, |x, y, _| *x += a * y);
    }

    /// `self = m * self + (1 - m) * source`.
    pub fn ema_toward(&mut self, source: &Network, m: f64) {
        self.zip_mut(source, |x, y, _| *x = m * *x + (1.0 - m) * y);
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameter view in layer order, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&values[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&values[at..at + nb]);
            at += nb;
        }
    }
}
