//! Central finite-difference checks of every differentiable op.
//!
//! Each case is written twice: once on the f32 [`Graph`] under test and
//! once as a plain f64 reference forward defined here. The loss is
//! `sum(r * y)` for fixed random `r`. Analytic gradients from the graph are
//! compared with `(L(p + eps) - L(p - eps)) / (2 eps)`, `eps = 1e-3`,
//! evaluated on the f64 reference, so f32 rounding does not swamp the
//! difference quotient. Samples whose one-sided quotients disagree have
//! crossed a ReLU/max-pool kink and are redrawn.

use crate::{Conv2d, Graph, Linear, ParamId, Params, Rng, Stream, Tensor, Var};

pub const EPS: f64 = 1e-3;
/// Largest accepted relative gradient error.
pub const TOL: f64 = 1e-3;

/// Plain f64 tensor used by the reference forwards.
#[derive(Clone, Debug)]
pub struct R {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl R {
    pub fn from(t: &Tensor) -> Self {
        R {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
    pub fn map(&self, f: impl Fn(f64) -> f64) -> R {
        R {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
    pub fn zip(&self, o: &R, f: impl Fn(f64, f64) -> f64) -> R {
        assert_eq!(self.shape, o.shape);
        R {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

pub mod reference {
    use super::R;

    pub fn conv(x: &R, w: &R, b: &R, stride: usize, pad: usize) -> R {
        let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (o, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data[oc];
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data[((oc * c + ic) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        R {
            shape: vec![n, o, ho, wo],
            data: out,
        }
    }

    pub fn maxpool(x: &R, k: usize) -> R {
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (ho, wo) = (h / k, w / k);
        let mut out = Vec::new();
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..k {
                        for j in 0..k {
                            m = m.max(x.data[(p * h + oy * k + i) * w + ox * k + j]);
                        }
                    }
                    out.push(m);
                }
            }
        }
        R {
            shape: vec![n, c, ho, wo],
            data: out,
        }
    }

    pub fn upsample(x: &R, f: usize) -> R {
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let mut out = Vec::new();
        for p in 0..n * c {
            for y in 0..h * f {
                for xx in 0..w * f {
                    out.push(x.data[(p * h + y / f) * w + xx / f]);
                }
            }
        }
        R {
            shape: vec![n, c, h * f, w * f],
            data: out,
        }
    }

    pub fn relu(x: &R) -> R {
        x.map(|v| v.max(0.0))
    }

    pub fn sigmoid(x: &R) -> R {
        x.map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn softmax(x: &R) -> R {
        let last = *x.shape.last().unwrap();
        let mut out = Vec::new();
        for row in x.data.chunks(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out.extend(row.iter().map(|v| (v - m).exp() / z));
        }
        R {
            shape: x.shape.clone(),
            data: out,
        }
    }

    pub fn linear(x: &R, w: &R, b: &R) -> R {
        let (n, din, dout) = (x.shape[0], x.shape[1], w.shape[0]);
        let mut out = Vec::new();
        for s in 0..n {
            for o in 0..dout {
                let mut acc = b.data[o];
                for i in 0..din {
                    acc += x.data[s * din + i] * w.data[o * din + i];
                }
                out.push(acc);
            }
        }
        R {
            shape: vec![n, dout],
            data: out,
        }
    }

    pub fn concat(a: &R, b: &R) -> R {
        let inner: usize = a.shape[2..].iter().product();
        let (ca, cb) = (a.shape[1] * inner, b.shape[1] * inner);
        let mut out = Vec::new();
        for s in 0..a.shape[0] {
            out.extend_from_slice(&a.data[s * ca..(s + 1) * ca]);
            out.extend_from_slice(&b.data[s * cb..(s + 1) * cb]);
        }
        let mut shape = a.shape.clone();
        shape[1] += b.shape[1];
        R { shape, data: out }
    }

    pub fn gap(x: &R) -> R {
        let hw = x.shape[2] * x.shape[3];
        R {
            shape: vec![x.shape[0], x.shape[1]],
            data: x.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect(),
        }
    }

    pub fn scalar(v: f64) -> R {
        R {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn mse(x: &R, t: &R) -> R {
        scalar(x.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.data.len() as f64)
    }

    pub fn bce(x: &R, t: &R) -> R {
        scalar(
            x.data
                .iter()
                .zip(&t.data)
                .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
                .sum::<f64>()
                / x.data.len() as f64,
        )
    }

    pub fn mean(x: &R) -> R {
        scalar(x.data.iter().sum::<f64>() / x.data.len() as f64)
    }
}

use reference as rf;

pub type BuildGraph = dyn Fn(&mut Graph, &Params) -> Var;
pub type BuildRef = dyn Fn(&[R]) -> R;

fn project(y: &R, r: &[f64]) -> f64 {
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Copy, Debug)]
pub struct Report {
    /// Worst relative error between analytic and numeric gradients.
    pub worst: f64,
    /// Samples redrawn because they straddled a kink.
    pub skipped: usize,
    /// Largest gap between the f32 forward and the f64 reference.
    pub forward_gap: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.forward_gap < 1e-4 && self.skipped < 10 && self.worst < TOL
    }
}

/// Compares graph gradients of `sum(r * y)` with central differences of
/// the reference on `samples` randomly chosen parameter entries.
pub fn check(params: &Params, graph: &BuildGraph, reference: &BuildRef, samples: usize, seed: u64) -> Report {
    let mut rng = Rng::new(seed, Stream::Custom(77));
    let mut refp: Vec<R> = params.ids().map(|id| R::from(params.get(id))).collect();

    let mut g = Graph::new();
    let y = graph(&mut g, params);
    let y_ref = reference(&refp);
    assert_eq!(g.shape(y), y_ref.shape.as_slice());
    let forward_gap = g
        .value(y)
        .data()
        .iter()
        .zip(&y_ref.data)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);

    let r: Vec<f64> = (0..y_ref.data.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let r32 = Tensor::new(g.shape(y), r.iter().map(|&v| v as f32).collect()).unwrap();
    let loss = g.custom_loss(y, project(&R::from(g.value(y)), &r), r32).unwrap();
    let grads = g.backward(loss).unwrap();

    let slots: Vec<(usize, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).numel()).map(move |k| (id.index(), k)))
        .collect();
    let ids: Vec<ParamId> = params.ids().collect();
    let (mut worst, mut skipped, mut done) = (0.0f64, 0usize, 0usize);
    while done < samples.min(slots.len()) && skipped < samples {
        let (pi, k) = slots[rng.below(slots.len())];
        let analytic = grads.param(ids[pi]).map(|t| t.data()[k] as f64).unwrap_or(0.0);
        let orig = refp[pi].data[k];
        let l0 = project(&reference(&refp), &r);
        refp[pi].data[k] = orig + EPS;
        let lp = project(&reference(&refp), &r);
        refp[pi].data[k] = orig - EPS;
        let lm = project(&reference(&refp), &r);
        refp[pi].data[k] = orig;
        let (fwd, bwd) = ((lp - l0) / EPS, (l0 - lm) / EPS);
        if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()).max(1e-3) {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * EPS);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        done += 1;
    }
    Report {
        worst,
        skipped,
        forward_gap,
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed, Stream::Custom(5));
    Tensor::from_fn(shape, |_| rng.uniform_f32(-1.0, 1.0))
}

pub fn conv2d_strided_and_padded() -> Vec<(String, Report)> {
    let mut out = Vec::new();
    for (seed, (stride, pad, k)) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)].into_iter().enumerate() {
        let mut rng = Rng::new(seed as u64, Stream::Weights);
        let mut params = Params::new();
        let x = params.add("x", random(&[2, 3, 7, 6], seed as u64));
        let conv = Conv2d::new(&mut params, "c", 3, 4, k, stride, pad, &mut rng);
        let graph = move |g: &mut Graph, p: &Params| {
            let xv = g.param(p, x).unwrap();
            conv.forward(g, p, xv).unwrap()
        };
        let reference = move |p: &[R]| rf::conv(&p[0], &p[1], &p[2], stride, pad);
        let rep = check(&params, &graph, &reference, 100, 11);
        out.push((format!("conv s{stride} p{pad} k{k}"), rep));
    }
    out
}

pub fn maxpool_relu_upsample() -> Vec<(String, Report)> {
    let mut out = Vec::new();
    let mut params = Params::new();
    params.add("x", random(&[2, 3, 6, 6], 3));
    let graph = |g: &mut Graph, p: &Params| {
        let xv = g.param(p, p.id_of("x").unwrap()).unwrap();
        let r = g.relu(xv).unwrap();
        let m = g.maxpool(r, 2).unwrap();
        g.upsample_nearest(m, 2).unwrap()
    };
    let reference = |p: &[R]| rf::upsample(&rf::maxpool(&rf::relu(&p[0]), 2), 2);
    out.push(("pool".to_string(), check(&params, &graph, &reference, 100, 2)));
    out
}

pub fn linear_sigmoid_softmax() -> Vec<(String, Report)> {
    let mut out = Vec::new();
    let mut rng = Rng::new(4, Stream::Weights);
    let mut params = Params::new();
    let x = params.add("x", random(&[3, 5], 4));
    let l1 = Linear::new(&mut params, "l1", 5, 6, &mut rng);
    let graph = move |g: &mut Graph, p: &Params| {
        let xv = g.param(p, x).unwrap();
        let h = l1.forward(g, p, xv).unwrap();
        let s = g.sigmoid(h).unwrap();
        g.softmax(s).unwrap()
    };
    let reference = |p: &[R]| rf::softmax(&rf::sigmoid(&rf::linear(&p[0], &p[1], &p[2])));
    out.push(("linear".to_string(), check(&params, &graph, &reference, 100, 3)));
    out
}

pub fn concat_hadamard_gap_reshape_add_scale() -> Vec<(String, Report)> {
    let mut out = Vec::new();
    let mut params = Params::new();
    let a = params.add("a", random(&[2, 2, 3, 3], 5));
    let b = params.add("b", random(&[2, 3, 3, 3], 6));
    let c = params.add("c", random(&[2, 5, 3, 3], 7));
    let graph = move |g: &mut Graph, p: &Params| {
        let (av, bv, cv) = (g.param(p, a).unwrap(), g.param(p, b).unwrap(), g.param(p, c).unwrap());
        let cat = g.concat_channels(av, bv).unwrap();
        let h = g.hadamard(cat, cv).unwrap();
        let s = g.scale(h, 0.7).unwrap();
        let sum = g.add(s, cv).unwrap();
        let pooled = g.global_avg_pool(sum).unwrap();
        g.reshape(pooled, &[10]).unwrap()
    };
    let reference = |p: &[R]| {
        let h = rf::concat(&p[0], &p[1]).zip(&p[2], |x, y| x * y);
        let s = h.map(|v| v * 0.7).zip(&p[2], |x, y| x + y);
        let mut pooled = rf::gap(&s);
        pooled.shape = vec![10];
        pooled
    };
    out.push(("concat".to_string(), check(&params, &graph, &reference, 100, 4)));
    out
}

pub fn mse_bce_mean_losses() -> Vec<(String, Report)> {
    let mut out = Vec::new();
    let mut params = Params::new();
    let x = params.add("x", random(&[4, 3], 8));
    let target = Tensor::from_fn(&[4, 3], |i| (i % 2) as f32);
    let t_ref = R::from(&target);
    let graph = move |g: &mut Graph, p: &Params| {
        let xv = g.param(p, x).unwrap();
        let a = g.mse(xv, target.clone()).unwrap();
        let b = g.bce_with_logits(xv, target.clone()).unwrap();
        let m = g.mean(xv).unwrap();
        let ab = g.add(a, b).unwrap();
        g.add(ab, m).unwrap()
    };
    let reference = move |p: &[R]| {
        let v = rf::mse(&p[0], &t_ref).data[0] + rf::bce(&p[0], &t_ref).data[0] + rf::mean(&p[0]).data[0];
        rf::scalar(v)
    };
    out.push(("losses".to_string(), check(&params, &graph, &reference, 12, 5)));
    out
}

/// Value/gate fusion: concat -> two 1x1 conv branches -> sigmoid gate ->
/// Hadamard product, followed by a small head.
pub fn hadamard_fusion_block() -> Vec<(String, Report)> {
    let mut out = Vec::new();
    let mut rng = Rng::new(9, Stream::Weights);
    let mut params = Params::new();
    let xr = params.add("xr", random(&[2, 3, 4, 4], 10));
    let xl = params.add("xl", random(&[2, 3, 4, 4], 11));
    let v0 = Conv2d::new(&mut params, "v0", 6, 3, 1, 1, 0, &mut rng);
    let v1 = Conv2d::new(&mut params, "v1", 3, 3, 1, 1, 0, &mut rng);
    let w0 = Conv2d::new(&mut params, "w0", 6, 3, 1, 1, 0, &mut rng);
    let w1 = Conv2d::new(&mut params, "w1", 3, 3, 1, 1, 0, &mut rng);
    let head = Linear::new(&mut params, "head", 3, 2, &mut rng);
    let graph = move |g: &mut Graph, p: &Params| {
        let (a, b) = (g.param(p, xr).unwrap(), g.param(p, xl).unwrap());
        let cat = g.concat_channels(a, b).unwrap();
        let v = v0.forward_relu(g, p, cat).unwrap();
        let v = v1.forward(g, p, v).unwrap();
        let w = w0.forward_relu(g, p, cat).unwrap();
        let w = w1.forward(g, p, w).unwrap();
        let w = g.sigmoid(w).unwrap();
        let fused = g.hadamard(v, w).unwrap();
        let pooled = g.global_avg_pool(fused).unwrap();
        head.forward(g, p, pooled).unwrap()
    };
    let reference = |p: &[R]| {
        let cat = rf::concat(&p[0], &p[1]);
        let v = rf::conv(&rf::relu(&rf::conv(&cat, &p[2], &p[3], 1, 0)), &p[4], &p[5], 1, 0);
        let w = rf::conv(&rf::relu(&rf::conv(&cat, &p[6], &p[7], 1, 0)), &p[8], &p[9], 1, 0);
        let fused = v.zip(&rf::sigmoid(&w), |a, b| a * b);
        rf::linear(&rf::gap(&fused), &p[10], &p[11])
    };
    out.push(("fusion".to_string(), check(&params, &graph, &reference, 100, 6)));
    out
}

pub fn composed_conv_net() -> Vec<(String, Report)> {
    let mut out = Vec::new();
    let mut rng = Rng::new(12, Stream::Weights);
    let mut params = Params::new();
    let x = params.add("x", random(&[2, 3, 8, 8], 12));
    let c1 = Conv2d::new(&mut params, "c1", 3, 4, 3, 2, 1, &mut rng);
    let c2 = Conv2d::same(&mut params, "c2", 4, 4, 3, &mut rng);
    let l = Linear::new(&mut params, "l", 4, 3, &mut rng);
    // Zero biases put dead-region ReLU inputs exactly on the kink.
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let shape = params.get(id).shape().to_vec();
        *params.get_mut(id) = random(&shape, 100 + i as u64);
    }
    let graph = move |g: &mut Graph, p: &Params| {
        let xv = g.param(p, x).unwrap();
        let h = c1.forward_relu(g, p, xv).unwrap();
        let h = c2.forward_relu(g, p, h).unwrap();
        let h = g.maxpool(h, 2).unwrap();
        let h = g.global_avg_pool(h).unwrap();
        l.forward(g, p, h).unwrap()
    };
    let reference = |p: &[R]| {
        let h = rf::relu(&rf::conv(&p[0], &p[1], &p[2], 2, 1));
        let h = rf::relu(&rf::conv(&h, &p[3], &p[4], 1, 1));
        rf::linear(&rf::gap(&rf::maxpool(&h, 2)), &p[5], &p[6])
    };
    out.push(("composed".to_string(), check(&params, &graph, &reference, 100, 7)));
    out
}

/// Every case above, in order.
pub fn suite() -> Vec<(String, Report)> {
    [conv2d_strided_and_padded, maxpool_relu_upsample, linear_sigmoid_softmax, concat_hadamard_gap_reshape_add_scale, mse_bce_mean_losses, hadamard_fusion_block, composed_conv_net].iter().flat_map(|case| case()).collect()
}
