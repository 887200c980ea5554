//! Parameterized layers built on [`Graph`].

use alloc::format;
use alloc::string::String;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::{rng_from, DetRng};

/// Registers parameters under hierarchical names with a seeded generator.
pub struct ParamBuilder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: DetRng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: rng_from(seed, &[0x1417]), prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the current prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        if self.prefix.is_empty() {
            self.prefix = String::from(name);
        } else {
            self.prefix = format!("{}.{}", self.prefix, name);
        }
        let r = f(self);
        self.prefix = saved;
        r
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = self.full(name);
        self.store.normal(n, shape, std, &mut self.rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full(name);
        self.store.zeros(n, shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full(name);
        self.store.ones(n, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n = self.full(name);
        self.store.constant(n, shape, v)
    }
}

fn fan_in_std(fan_in: usize) -> f64 {
    libm::sqrt(1.0 / fan_in.max(1) as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        Self::with_std(pb, name, din, dout, bias, fan_in_std(din))
    }

    pub fn with_std<T: Real>(pb: &mut ParamBuilder<T>, name: &str, din: usize, dout: usize, bias: bool, std: f64) -> Self {
        pb.scope(name, |pb| {
            let w = pb.normal("w", &[dout, din], std);
            let b = bias.then(|| pb.zeros("b", &[dout]));
            Self { w, b, din, dout }
        })
    }

    /// Applies to the last axis of `x`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, n: usize) -> Self {
        pb.scope(name, |pb| Self { gamma: pb.ones("gamma", &[n]), beta: pb.zeros("beta", &[n]) })
    }

    /// Normalizes the last axis.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }

    /// Normalizes the channel axis of `[c, h, w]`.
    pub fn forward_channels<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm_channels(x, ga, be)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::with_std(pb, name, cin, cout, k, stride, pad, fan_in_std(cin * k * k))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
    ) -> Self {
        pb.scope(name, |pb| Self {
            w: pb.normal("w", &[cout, cin, k, k], std),
            b: pb.zeros("b", &[cout]),
            stride,
            pad,
            cout,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d_bias(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DwConv3 {
    pub w: ParamId,
    pub b: ParamId,
    pub c: usize,
}

impl DwConv3 {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, c: usize) -> Self {
        pb.scope(name, |pb| Self { w: pb.normal("w", &[c, 3, 3], 1.0 / 3.0), b: pb.zeros("b", &[c]), c })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.dwconv3(x, w);
        let b3 = g.reshape(b, &[self.c, 1, 1]);
        g.add_b(y, b3)
    }
}
