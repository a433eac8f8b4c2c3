use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Matrix, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Uniform fan-in initialisation, `U(-bound, bound)` with `bound = 1/sqrt(fan_in)`
    /// unless `bound` is given explicitly.
    pub fn new(fan_in: usize, fan_out: usize, bound: Option<f64>, rng: &mut impl Rng) -> Self {
        let b = bound.unwrap_or(1.0 / (fan_in.max(1) as f64).sqrt());
        let weight = Matrix::from_vec(
            fan_in,
            fan_out,
            (0..fan_in * fan_out).map(|_| rng.gen_range(-b..=b)).collect(),
        );
        let bias = Matrix::from_vec(1, fan_out, (0..fan_out).map(|_| rng.gen_range(-b..=b)).collect());
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Matrix::zeros(fan_in, fan_out), bias: Matrix::zeros(1, fan_out) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Feed-forward network: hidden layers use `activation`, the last layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output, e.g. `[in, 64, 64, out]`.
    /// `final_bound` overrides the initialisation range of the last layer.
    pub fn new(sizes: &[usize], activation: Activation, final_bound: Option<f64>, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let bound = if i + 1 == n { final_bound } else { None };
                Linear::new(sizes[i], sizes[i + 1], bound, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Forward pass outside any graph.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.matmul(&layer.weight);
            let bias = layer.bias.data();
            for r in 0..next.rows() {
                for (o, b) in next.row_mut(r).iter_mut().zip(bias) {
                    *o += b;
                    if i != last {
                        *o = self.activation.apply(*o);
                    }
                }
            }
            h = next;
        }
        h
    }

    /// Places the parameters on `g` as gradient-receiving leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        self.bind_with(g, true)
    }

    /// Places the parameters on `g` as constants (frozen network).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundMlp {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, train: bool) -> BoundMlp {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if train {
                weights.push(g.param(l.weight.clone()));
                biases.push(g.param(l.bias.clone()));
            } else {
                weights.push(g.constant(l.weight.clone()));
                biases.push(g.constant(l.bias.clone()));
            }
        }
        BoundMlp { weights, biases, activation: self.activation }
    }
}

/// Optional inverted dropout on hidden activations.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// An [`Mlp`] whose parameters live on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub activation: Activation,
}

impl BoundMlp {
    /// Parameter vars in the same order as [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        match self.activation {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_trace(g, x).0
    }

    pub fn forward_dropout<R: Rng>(&self, g: &mut Graph, x: Var, dropout: Option<Dropout<'_, R>>) -> Var {
        let Some(d) = dropout else { return self.forward(g, x) };
        let keep = 1.0 - d.rate;
        let mut h = x;
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            let z = g.matmul(h, self.weights[i]);
            let z = g.add_row(z, self.biases[i]);
            h = if i == last {
                z
            } else {
                let a = self.act(g, z);
                let (r, c) = g.value(a).shape();
                let mask: Vec<f64> =
                    (0..r * c).map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                let m = g.constant(Matrix::from_vec(r, c, mask));
                g.mul(a, m)
            };
        }
        h
    }

    /// Output together with the pre-activations of every hidden layer.
    fn forward_trace(&self, g: &mut Graph, x: Var) -> (Var, Vec<(Var, Var)>) {
        let mut h = x;
        let mut trace = Vec::new();
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            let z = g.matmul(h, self.weights[i]);
            let z = g.add_row(z, self.biases[i]);
            if i == last {
                h = z;
            } else {
                let a = self.act(g, z);
                trace.push((z, a));
                h = a;
            }
        }
        (h, trace)
    }

    /// Row-wise gradient of a single-output network with respect to its
    /// input, `∂f(x_r)/∂x_r` for every row `r`, built from differentiable ops
    /// so it can itself be differentiated with respect to the parameters.
    pub fn input_gradient(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let (out, trace) = self.forward_trace(g, x);
        assert_eq!(g.value(out).cols(), 1, "input_gradient needs a scalar-output network");
        let rows = g.value(out).rows();
        let mut delta = g.constant(Matrix::filled(rows, 1, 1.0));
        for i in (0..self.weights.len()).rev() {
            let dh = g.matmul_nt(delta, self.weights[i]);
            if i == 0 {
                return (out, dh);
            }
            let (pre, post) = trace[i - 1];
            let deriv = match self.activation {
                Activation::Tanh => {
                    let sq = g.square(post);
                    let neg = g.neg(sq);
                    g.add_scalar(neg, 1.0)
                }
                Activation::Relu => g.relu_mask(pre),
            };
            delta = g.mul(dh, deriv);
        }
        unreachable!("loop returns at the input layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn graph_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Relu, Activation::Tanh] {
            let net = Mlp::new(&[3, 5, 4, 2], act, None, &mut rng);
            let x = Matrix::from_vec(2, 3, vec![0.1, -0.4, 0.9, 1.5, 0.2, -0.7]);
            let mut g = Graph::new();
            let b = net.bind(&mut g);
            let xv = g.constant(x.clone());
            let y = b.forward(&mut g, xv);
            let plain = net.forward(&x);
            for (a, c) in g.value(y).data().iter().zip(plain.data()) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for act in [Activation::Relu, Activation::Tanh] {
            let net = Mlp::new(&[3, 6, 6, 1], act, None, &mut rng);
            let x = Matrix::from_vec(2, 3, vec![0.3, -0.2, 0.5, -1.1, 0.4, 0.8]);
            let mut g = Graph::new();
            let b = net.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            let (_, dx) = b.input_gradient(&mut g, xv);
            let h = 1e-6;
            for r in 0..2 {
                for c in 0..3 {
                    let mut xp = x.clone();
                    xp.set(r, c, x.get(r, c) + h);
                    let mut xm = x.clone();
                    xm.set(r, c, x.get(r, c) - h);
                    let fd = (net.forward(&xp).get(r, 0) - net.forward(&xm).get(r, 0)) / (2.0 * h);
                    assert!((fd - g.value(dx).get(r, c)).abs() < 1e-7, "{act:?} r{r} c{c}");
                }
            }
        }
    }
}
