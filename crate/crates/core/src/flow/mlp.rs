use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

pub(crate) const LEAK: f64 = 0.01;

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAK * v
    }
}

fn leaky_slope(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAK
    }
}

/// A dense layer `y = x W + b` whose parameters live at fixed offsets of a
/// flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    fn new(offset: &mut usize, n_in: usize, n_out: usize) -> Self {
        let w = *offset;
        let b = w + n_in * n_out;
        *offset = b + n_out;
        Self { w, b, n_in, n_out }
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.w..self.w + self.n_in * self.n_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.b..self.b + self.n_out
    }

    fn weights<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.n_in, self.n_out), &p[self.weight_range()]).expect("layout")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.bias_range()])
    }

    fn apply(&self, p: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weights(p));
        y += &self.bias(p);
        y
    }

    /// Accumulates parameter gradients into `grads` (if given) and returns
    /// the gradient with respect to the input.
    fn backward(&self, p: &[f64], x: &ArrayView2<f64>, gy: &ArrayView2<f64>, grads: Option<&mut [f64]>) -> Array2<f64> {
        if let Some(g) = grads {
            let mut gw = ArrayViewMut2::from_shape((self.n_in, self.n_out), &mut g[self.weight_range()]).expect("layout");
            general_mat_mul(1.0, &x.t(), gy, 1.0, &mut gw);
            let mut gb = ArrayViewMut1::from(&mut g[self.bias_range()]);
            gb += &gy.sum_axis(Axis(0));
        }
        gy.dot(&self.weights(p).t())
    }
}

/// Fully connected network with leaky-ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    pub layers: Vec<Dense>,
}

pub(crate) struct MlpTape {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(offset: &mut usize, widths: &[usize]) -> Self {
        let layers = widths.windows(2).map(|w| Dense::new(offset, w[0], w[1])).collect();
        Self { layers }
    }

    pub fn last(&self) -> &Dense {
        self.layers.last().expect("non-empty mlp")
    }

    pub fn forward_tape(&self, p: &[f64], x: Array2<f64>) -> (Array2<f64>, MlpTape) {
        let mut inputs = vec![x];
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = self.layers[0].apply(p, &inputs[0].view());
        for layer in &self.layers[1..] {
            let a = h.mapv(leaky);
            pre.push(h);
            h = layer.apply(p, &a.view());
            inputs.push(a);
        }
        (h, MlpTape { inputs, pre })
    }

    pub fn backward(&self, p: &[f64], tape: &MlpTape, gout: Array2<f64>, mut grads: Option<&mut [f64]>) -> Array2<f64> {
        let mut g = gout;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(p, &tape.inputs[k].view(), &g.view(), grads.as_deref_mut());
            if k > 0 {
                g.zip_mut_with(&tape.pre[k - 1], |gv, &z| *gv *= leaky_slope(z));
            }
        }
        g
    }
}
