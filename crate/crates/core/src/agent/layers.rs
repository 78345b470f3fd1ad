//! Dense layers, MLPs and the gated recurrent cell, built on [`Graph`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Shape, Tensor};

type Result<T> = core::result::Result<T, AutodiffError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Uniform Glorot initialisation.
pub(crate) fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

/// Looks up `name` and checks its shape.
pub(crate) fn lookup(store: &ParamStore, name: &str, shape: Shape) -> Result<ParamId> {
    let id = store.find(name).ok_or(AutodiffError::StoreLayout)?;
    let found = store.get(id).shape();
    if found != shape {
        return Err(AutodiffError::ParamShape {
            name: String::from(name),
            expected: shape,
            found,
        });
    }
    Ok(id)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let w = if zero {
            Tensor::zeros(Shape::matrix(outputs, inputs))
        } else {
            Tensor::matrix(outputs, inputs, glorot(rng, inputs, outputs, inputs * outputs))
        };
        let w = store.add(format!("{name}.w"), w, true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(Shape::vector(outputs)), true);
        Linear { w, b, inputs, outputs }
    }

    pub fn bind(store: &ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Linear {
            w: lookup(store, &format!("{name}.w"), Shape::matrix(outputs, inputs))?,
            b: lookup(store, &format!("{name}.b"), Shape::vector(outputs))?,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(w, x)?;
        g.add(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Stack of linear layers, each followed by its own activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// `dims` lists input width then every layer's output width.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        acts: &[Activation],
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dims.len(), acts.len() + 1, "one activation per layer");
        let n = acts.len();
        let layers = (0..n)
            .map(|i| {
                let lin = Linear::init(store, &format!("{name}.{i}"), dims[i], dims[i + 1], zero_last && i + 1 == n, rng);
                (lin, acts[i])
            })
            .collect();
        Mlp { layers }
    }

    pub fn bind(store: &ParamStore, name: &str, dims: &[usize], acts: &[Activation]) -> Result<Self> {
        let layers = (0..acts.len())
            .map(|i| Ok((Linear::bind(store, &format!("{name}.{i}"), dims[i], dims[i + 1])?, acts[i])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (lin, act) in &self.layers {
            let y = lin.forward(g, h)?;
            h = act.apply(g, y);
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|(l, _)| l.params()).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|(l, _)| l.outputs).unwrap_or(0)
    }
}

/// Gated recurrent unit:
/// `z = σ(W_z x + U_z h)`, `r = σ(W_r x + U_r h)`,
/// `n = tanh(W_n x + r ⊙ U_n h)`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: ParamId,
    pub bx: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
    pub inputs: usize,
    pub state: usize,
}

impl Gru {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, state: usize, rng: &mut R) -> Self {
        let s3 = 3 * state;
        let wx = store.add(
            format!("{name}.wx"),
            Tensor::matrix(s3, inputs, glorot(rng, inputs, state, s3 * inputs)),
            true,
        );
        let bx = store.add(format!("{name}.bx"), Tensor::zeros(Shape::vector(s3)), true);
        let wh = store.add(
            format!("{name}.wh"),
            Tensor::matrix(s3, state, glorot(rng, state, state, s3 * state)),
            true,
        );
        let bh = store.add(format!("{name}.bh"), Tensor::zeros(Shape::vector(s3)), true);
        Gru {
            wx,
            bx,
            wh,
            bh,
            inputs,
            state,
        }
    }

    pub fn bind(store: &ParamStore, name: &str, inputs: usize, state: usize) -> Result<Self> {
        let s3 = 3 * state;
        Ok(Gru {
            wx: lookup(store, &format!("{name}.wx"), Shape::matrix(s3, inputs))?,
            bx: lookup(store, &format!("{name}.bx"), Shape::vector(s3))?,
            wh: lookup(store, &format!("{name}.wh"), Shape::matrix(s3, state))?,
            bh: lookup(store, &format!("{name}.bh"), Shape::vector(s3))?,
            inputs,
            state,
        })
    }

    pub fn step(&self, g: &mut Graph<'_>, x: NodeId, h: NodeId) -> Result<NodeId> {
        let s = self.state;
        let (wx, bx, wh, bh) = (g.param(self.wx), g.param(self.bx), g.param(self.wh), g.param(self.bh));
        let gx = g.matmul(wx, x)?;
        let gx = g.add(gx, bx)?;
        let gh = g.matmul(wh, h)?;
        let gh = g.add(gh, bh)?;
        let (xz, xr, xn) = (g.slice(gx, 0, s)?, g.slice(gx, s, s)?, g.slice(gx, 2 * s, s)?);
        let (hz, hr, hn) = (g.slice(gh, 0, s)?, g.slice(gh, s, s)?, g.slice(gh, 2 * s, s)?);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rn = g.hadamard(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        let d = g.sub(h, n)?;
        let zd = g.hadamard(z, d)?;
        g.add(n, zd)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.wx, self.bx, self.wh, self.bh]
    }
}
