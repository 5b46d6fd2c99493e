//! Conditional normalizing flows built from affine coupling layers.
//!
//! A flow maps a parameter vector `x` and a condition `c` to a latent `z`.
//! Each block splits `x` by a fixed seeded shuffle into two halves, leaves the
//! first half unchanged and transforms the second as `x_b ⊙ exp(s) + t`, where
//! `(s, t)` come from a small network fed with the first half and an
//! embedding of `c`. Log-scales are bounded by `|s| < 2` through
//! `s = 2 tanh(raw / 2)`.
//!
//! All trainable weights live in one flat vector so that optimizers,
//! checkpoints and gradient checks can treat them uniformly.

mod mlp;
mod train;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::random::{permutation, seeded};
use mlp::{Mlp, MlpTape};

pub use train::{nll_objective, objective_gradient, train, Adam, EpochRecord, FlowData, TrainConfig, TrainHistory};

pub const FLOW_FORMAT_VERSION: u32 = 1;

/// Shape of a flow: dimensions, depth and widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowArch {
    pub dim_x: usize,
    pub dim_cond: usize,
    pub n_couplings: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl FlowArch {
    pub fn new(dim_x: usize, dim_cond: usize) -> Self {
        Self {
            dim_x,
            dim_cond,
            n_couplings: 4,
            hidden: 64,
            embed: 128,
        }
    }

    fn embed_width(&self) -> usize {
        if self.dim_cond == 0 {
            0
        } else {
            self.embed
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_x < 2 {
            return Err(Error::Config(format!("flow needs dim_x >= 2, got {}", self.dim_x)));
        }
        if self.n_couplings > 0 && self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.dim_cond > 0 && self.embed == 0 {
            return Err(Error::Config("embedding width must be positive for a conditional flow".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a flow bit-exactly from its weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDescriptor {
    pub format_version: u32,
    pub arch: FlowArch,
    pub perm_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Coupling {
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFlow {
    descriptor: FlowDescriptor,
    params: Vec<f64>,
    embedder: Option<Mlp>,
    couplings: Vec<Coupling>,
    d1: usize,
}

struct CouplingTape {
    xb: Array2<f64>,
    log_scale: Array2<f64>,
    net: MlpTape,
}

/// Intermediate values of a batched pass, kept for backpropagation.
pub struct FlowTape {
    emb: Option<(Array2<f64>, MlpTape)>,
    layers: Vec<CouplingTape>,
    /// Output of the pass: `z` for forward tapes, `x` for inverse tapes.
    pub out: Array2<f64>,
    /// Per-sample log-determinant of `∂z/∂x`.
    pub logdet: Array1<f64>,
}

/// Gradients produced by [`ConditionalFlow::backward`].
pub struct FlowGrads {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

fn ensure_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}

fn bounded_scale(raw: f64) -> f64 {
    2.0 * (0.5 * raw).tanh()
}

/// Zero-initialized final layers make a fresh flow the identity map.
pub fn init_flow<R: Rng + ?Sized>(arch: FlowArch, rng: &mut R) -> Result<ConditionalFlow> {
    let perm_seed = rng.random::<u64>();
    let mut flow = ConditionalFlow::from_parts(
        FlowDescriptor {
            format_version: FLOW_FORMAT_VERSION,
            arch,
            perm_seed,
        },
        Vec::new(),
    )?;
    let mut params = vec![0.0; flow.param_count()];
    let nets = flow.embedder.iter().chain(flow.couplings.iter().map(|c| &c.net));
    for (k, net) in nets.enumerate() {
        let is_embedder = flow.embedder.is_some() && k == 0;
        for (i, layer) in net.layers.iter().enumerate() {
            if !is_embedder && i + 1 == net.layers.len() {
                continue;
            }
            let scale = (1.0 / layer.n_in as f64).sqrt();
            for w in &mut params[layer.weight_range()] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    flow.params = params;
    Ok(flow)
}

impl ConditionalFlow {
    /// Rebuilds a flow from its descriptor and flat weights. An empty weight
    /// vector is accepted and zero-filled.
    pub fn from_parts(descriptor: FlowDescriptor, params: Vec<f64>) -> Result<Self> {
        if descriptor.format_version != FLOW_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported flow format version {}", descriptor.format_version)));
        }
        let arch = descriptor.arch;
        arch.validate()?;
        let d1 = arch.dim_x / 2;
        let d2 = arch.dim_x - d1;
        let e = arch.embed_width();
        let mut offset = 0;
        let embedder = (e > 0).then(|| Mlp::new(&mut offset, &[arch.dim_cond, e, e]));
        let mut rng = seeded(descriptor.perm_seed);
        let mut previous: Vec<usize> = Vec::new();
        let couplings = (0..arch.n_couplings)
            .map(|l| {
                // odd blocks transform the half their predecessor left untouched
                let perm = if l % 2 == 0 {
                    permutation(&mut rng, arch.dim_x)
                } else {
                    let mut p = previous.clone();
                    p.rotate_left(d1);
                    p
                };
                previous = perm.clone();
                let mut inv_perm = vec![0; arch.dim_x];
                for (i, &p) in perm.iter().enumerate() {
                    inv_perm[p] = i;
                }
                let net = Mlp::new(&mut offset, &[d1 + e, arch.hidden, arch.hidden, 2 * d2]);
                Coupling { perm, inv_perm, net }
            })
            .collect();
        let params = if params.is_empty() { vec![0.0; offset] } else { params };
        check_len("flow parameters", offset, params.len())?;
        Ok(Self {
            descriptor,
            params,
            embedder,
            couplings,
            d1,
        })
    }

    pub fn descriptor(&self) -> FlowDescriptor {
        self.descriptor
    }

    pub fn arch(&self) -> FlowArch {
        self.descriptor.arch
    }

    pub fn dim_x(&self) -> usize {
        self.descriptor.arch.dim_x
    }

    pub fn dim_cond(&self) -> usize {
        self.descriptor.arch.dim_cond
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        let last = self.couplings.last().map(|c| &c.net).or(self.embedder.as_ref());
        last.map_or(0, |m| m.last().bias_range().end)
    }

    /// Flat-vector ranges of the zero-initialized output layers.
    pub fn final_layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.couplings
            .iter()
            .flat_map(|c| [c.net.last().weight_range(), c.net.last().bias_range()])
            .collect()
    }

    fn check_batch(&self, x: &ArrayView2<f64>, cond: &ArrayView2<f64>) -> Result<()> {
        check_len("flow input width", self.dim_x(), x.ncols())?;
        check_len("flow condition width", self.dim_cond(), cond.ncols())?;
        check_len("flow condition rows", x.nrows(), cond.nrows())
    }

    fn embed(&self, cond: &Array2<f64>) -> Option<(Array2<f64>, MlpTape)> {
        self.embedder.as_ref().map(|m| m.forward_tape(&self.params, cond.clone()))
    }

    fn net_input(&self, a: ArrayView2<f64>, emb: Option<&Array2<f64>>) -> Array2<f64> {
        match emb {
            Some(e) => concatenate![Axis(1), a, e.view()],
            None => a.to_owned(),
        }
    }

    /// Batched forward pass `z = f(x; c)` (rows are samples).
    pub fn forward_tape(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<FlowTape> {
        self.check_batch(&x, &cond)?;
        let d1 = self.d1;
        let cond = cond.to_owned();
        let emb = self.embed(&cond);
        let mut h = x.to_owned();
        let mut logdet = Array1::zeros(x.nrows());
        let mut layers = Vec::with_capacity(self.couplings.len());
        for (l, c) in self.couplings.iter().enumerate() {
            let xp = h.select(Axis(1), &c.perm);
            let input = self.net_input(xp.slice(s![.., ..d1]), emb.as_ref().map(|e| &e.0));
            let (out, net) = c.net.forward_tape(&self.params, input);
            let d2 = self.dim_x() - d1;
            let log_scale = out.slice(s![.., ..d2]).mapv(bounded_scale);
            let xb = xp.slice(s![.., d1..]).to_owned();
            let zb = &xb * &log_scale.mapv(f64::exp) + &out.slice(s![.., d2..]);
            logdet += &log_scale.sum_axis(Axis(1));
            h = concatenate![Axis(1), xp.slice(s![.., ..d1]), zb].select(Axis(1), &c.inv_perm);
            ensure_finite(&h, &format!("coupling {l} output"))?;
            layers.push(CouplingTape { xb, log_scale, net });
        }
        Ok(FlowTape {
            emb,
            layers,
            out: h,
            logdet,
        })
    }

    /// Backpropagates `∂L/∂z` and `∂L/∂logdet` through a forward tape.
    /// Returns gradients with respect to the weights and to `x`.
    pub fn backward(&self, tape: &FlowTape, gz: Array2<f64>, glogdet: &Array1<f64>) -> FlowGrads {
        let d1 = self.d1;
        let mut grads = vec![0.0; self.params.len()];
        let mut gemb = tape.emb.as_ref().map(|(e, _)| Array2::<f64>::zeros(e.raw_dim()));
        let mut g = gz;
        let glog = glogdet.view().insert_axis(Axis(1));
        for (c, t) in self.couplings.iter().zip(&tape.layers).rev() {
            let gp = g.select(Axis(1), &c.perm);
            let gza = gp.slice(s![.., ..d1]);
            let gzb = gp.slice(s![.., d1..]);
            let e = t.log_scale.mapv(f64::exp);
            let gxb = &gzb * &e;
            let mut graw = &(&gzb * &t.xb) * &e + &glog;
            graw.zip_mut_with(&t.log_scale, |gv, &s| *gv *= 1.0 - 0.25 * s * s);
            let gout = concatenate![Axis(1), graw, gzb];
            let gin = c.net.backward(&self.params, &t.net, gout, Some(&mut grads));
            let gxa = &gza + &gin.slice(s![.., ..d1]);
            if let Some(ge) = gemb.as_mut() {
                *ge += &gin.slice(s![.., d1..]);
            }
            let gxp = concatenate![Axis(1), gxa, gxb];
            g = gxp.select(Axis(1), &c.inv_perm);
        }
        if let (Some(m), Some((_, et)), Some(ge)) = (&self.embedder, &tape.emb, gemb) {
            m.backward(&self.params, et, ge, Some(&mut grads));
        }
        FlowGrads { params: grads, input: g }
    }

    /// Batched inverse `x = f⁻¹(z; c)`; `logdet` holds `log|det ∂z/∂x|` at
    /// the returned `x`.
    pub fn inverse_tape(&self, z: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<FlowTape> {
        self.check_batch(&z, &cond)?;
        let d1 = self.d1;
        let d2 = self.dim_x() - d1;
        let cond = cond.to_owned();
        let emb = self.embed(&cond);
        let mut h = z.to_owned();
        let mut logdet = Array1::zeros(z.nrows());
        let mut layers = Vec::with_capacity(self.couplings.len());
        for (l, c) in self.couplings.iter().enumerate().rev() {
            let hp = h.select(Axis(1), &c.perm);
            let input = self.net_input(hp.slice(s![.., ..d1]), emb.as_ref().map(|e| &e.0));
            let (out, net) = c.net.forward_tape(&self.params, input);
            let log_scale = out.slice(s![.., ..d2]).mapv(bounded_scale);
            let xb = (&hp.slice(s![.., d1..]) - &out.slice(s![.., d2..])) * &log_scale.mapv(|s| (-s).exp());
            logdet += &log_scale.sum_axis(Axis(1));
            let xp = concatenate![Axis(1), hp.slice(s![.., ..d1]), xb];
            h = xp.select(Axis(1), &c.inv_perm);
            ensure_finite(&h, &format!("inverse coupling {l} output"))?;
            layers.push(CouplingTape { xb, log_scale, net });
        }
        layers.reverse();
        Ok(FlowTape {
            emb,
            layers,
            out: h,
            logdet,
        })
    }

    /// Vector-Jacobian product of the inverse map with respect to `z`.
    pub fn inverse_backward(&self, tape: &FlowTape, gx: Array2<f64>) -> Array2<f64> {
        let d1 = self.d1;
        let mut g = gx;
        for (c, t) in self.couplings.iter().zip(&tape.layers) {
            let gxp = g.select(Axis(1), &c.perm);
            let gxa = gxp.slice(s![.., ..d1]);
            let gxb = gxp.slice(s![.., d1..]);
            let gzb = &gxb * &t.log_scale.mapv(|s| (-s).exp());
            let mut graw = -(&gxb * &t.xb);
            graw.zip_mut_with(&t.log_scale, |gv, &s| *gv *= 1.0 - 0.25 * s * s);
            let gout = concatenate![Axis(1), graw, -&gzb];
            let gin = c.net.backward(&self.params, &t.net, gout, None);
            let gza = &gxa + &gin.slice(s![.., ..d1]);
            g = concatenate![Axis(1), gza, gzb].select(Axis(1), &c.inv_perm);
        }
        g
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let t = self.forward_tape(x, cond)?;
        Ok((t.out, t.logdet))
    }

    pub fn inverse_batch(&self, z: ArrayView2<f64>, cond: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.inverse_tape(z, cond)?.out)
    }

    /// Single-sample `(z, log|det ∂z/∂x|)`.
    pub fn forward(&self, x: &[f64], cond: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.forward_batch(row(x), row(cond))?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn inverse(&self, z: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_batch(row(z), row(cond))?.into_raw_vec_and_offset().0)
    }

    /// `log p(x | c)` under a standard-normal latent.
    pub fn log_density(&self, x: &[f64], cond: &[f64]) -> Result<f64> {
        let (z, ld) = self.forward(x, cond)?;
        let n = z.len() as f64;
        Ok(-0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * n * (2.0 * std::f64::consts::PI).ln() + ld)
    }

    /// `count` draws `f⁻¹(z; c)` with `z ~ N(0, I)`, one row per sample.
    pub fn sample_posterior<R: Rng + ?Sized>(&self, cond: &[f64], count: usize, rng: &mut R) -> Result<Array2<f64>> {
        check_len("sample_posterior condition", self.dim_cond(), cond.len())?;
        if count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let z = Array2::from_shape_simple_fn((count, self.dim_x()), || rng.sample::<f64, _>(StandardNormal));
        let c = row(cond).broadcast((count, self.dim_cond())).expect("broadcast").to_owned();
        self.inverse_batch(z.view(), c.view())
    }
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row view")
}
