//! Parameterised building blocks with Kaiming-uniform initialisation.

use crate::error::Result;
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::params::{ParamId, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.uniform_f32(-bound, bound))
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            kaiming_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            spec: Conv2dSpec { stride, pad },
        }
    }

    /// `k x k` convolution with "same" padding at stride 1.
    pub fn same(params: &mut Params, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut Rng) -> Self {
        Self::new(params, name, cin, cout, kernel, 1, kernel / 2, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight)?;
        let b = g.param(p, self.bias)?;
        g.conv2d(x, w, b, self.spec)
    }

    pub fn forward_relu(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        g.relu(y)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let weight = params.add(format!("{name}.weight"), kaiming_uniform(&[dout, din], din, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight)?;
        let b = g.param(p, self.bias)?;
        g.linear(x, w, b)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Two-layer perceptron `[din, hidden, dout]` with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp2 {
    pub fn new(params: &mut Params, name: &str, din: usize, hidden: usize, dout: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(params, &format!("{name}.0"), din, hidden, rng),
            out: Linear::new(params, &format!("{name}.1"), hidden, dout, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Params, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, p, h)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        let [a, b] = self.hidden.param_ids();
        let [c, d] = self.out.param_ids();
        [a, b, c, d]
    }
}
