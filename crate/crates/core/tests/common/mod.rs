//! Helpers shared by the integration tests: naive oracles and a
//! finite-difference gradient checker.
#![allow(dead_code)]

use detcam::graph::{BackwardOptions, GraphBuilder, ModelGraph, Source};
use detcam::layers::{ForwardCtx, LayerConfig, Padding};
use detcam::real::Real;
use detcam::{DetRng, Tensor};

pub fn random_vec(rng: &mut DetRng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.next_range(lo, hi)).collect()
}

pub fn random_tensor(rng: &mut DetRng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), random_vec(rng, n, lo, hi)).unwrap()
}

/// Leading padding and output size, computed from first principles.
pub fn pad_and_size(input: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = (input + stride - 1) / stride;
        let needed = (out - 1) * stride + k;
        let total = if needed > input { needed - input } else { 0 };
        (total / 2, out)
    } else {
        (0, (input - k) / stride + 1)
    }
}

/// Scalar-loop NHWC convolution with an HWIO kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f32],
    [n, h, w, ci]: [usize; 4],
    k: &[f32],
    [kh, kw, _, co]: [usize; 4],
    bias: Option<&[f32]>,
    stride: usize,
    same: bool,
) -> (Vec<f32>, [usize; 4]) {
    let (pt, oh) = pad_and_size(h, kh, stride, same);
    let (pl, ow) = pad_and_size(w, kw, stride, same);
    let mut out = vec![0f32; n * oh * ow * co];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for o in 0..co {
                    let mut acc = 0f32;
                    for a in 0..kh {
                        for c in 0..kw {
                            let yy = (i * stride + a) as isize - pt as isize;
                            let xx = (j * stride + c) as isize - pl as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let (yy, xx) = (yy as usize, xx as usize);
                            for q in 0..ci {
                                acc += x[((b * h + yy) * w + xx) * ci + q] * k[((a * kw + c) * ci + q) * co + o];
                            }
                        }
                    }
                    if let Some(bv) = bias {
                        acc += bv[o];
                    }
                    out[((b * oh + i) * ow + j) * co + o] = acc;
                }
            }
        }
    }
    (out, [n, oh, ow, co])
}

/// Scalar-loop depthwise convolution (multiplier 1, stride 1).
pub fn depthwise_oracle(x: &[f32], [n, h, w, ch]: [usize; 4], k: &[f32], kh: usize, kw: usize, same: bool) -> (Vec<f32>, [usize; 4]) {
    let (pt, oh) = pad_and_size(h, kh, 1, same);
    let (pl, ow) = pad_and_size(w, kw, 1, same);
    let mut out = vec![0f32; n * oh * ow * ch];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for q in 0..ch {
                    let mut acc = 0f32;
                    for a in 0..kh {
                        for c in 0..kw {
                            let yy = (i + a) as isize - pt as isize;
                            let xx = (j + c) as isize - pl as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += x[((b * h + yy as usize) * w + xx as usize) * ch + q] * k[(a * kw + c) * ch + q];
                        }
                    }
                    out[((b * oh + i) * ow + j) * ch + q] = acc;
                }
            }
        }
    }
    (out, [n, oh, ow, ch])
}

/// Depthwise then 1x1 pointwise, each a scalar loop.
#[allow(clippy::too_many_arguments)]
pub fn separable_oracle(
    x: &[f32],
    xd: [usize; 4],
    dw: &[f32],
    kh: usize,
    kw: usize,
    pw: &[f32],
    co: usize,
    bias: Option<&[f32]>,
    same: bool,
) -> (Vec<f32>, [usize; 4]) {
    let (mid, md) = depthwise_oracle(x, xd, dw, kh, kw, same);
    conv_oracle(&mid, md, pw, [1, 1, xd[3], co], bias, 1, false)
}

/// One small graph exercising a single layer kind.
pub struct GradCase {
    pub name: &'static str,
    pub graph: ModelGraph,
    pub batch: usize,
    pub ctx: ForwardCtx,
}

fn single(name: &'static str, dims: &[usize], cfg: LayerConfig, train: bool) -> GradCase {
    let mut b = GraphBuilder::new(name, dims.to_vec());
    let y = b.add(cfg, &["input"]);
    GradCase {
        name,
        graph: b.build(&y).unwrap(),
        batch: 2,
        ctx: if train { ForwardCtx::train(5, 1, 0) } else { ForwardCtx::infer() },
    }
}

/// Every layer kind, with BatchNorm in both modes and Conv2d in two
/// geometries.
pub fn grad_cases() -> Vec<GradCase> {
    let mut cases = vec![
        single("rescale", &[3, 3, 2], LayerConfig::Rescale { scale: 0.5, offset: -0.25 }, false),
        single("random_flip_h", &[3, 4, 2], LayerConfig::RandomFlipH { seed: 3 }, true),
        single("random_rotation", &[5, 5, 2], LayerConfig::RandomRotation { factor: 0.2, seed: 3 }, true),
        single("random_zoom", &[5, 5, 2], LayerConfig::RandomZoom { factor: 0.2, seed: 3 }, true),
        single("conv2d_valid", &[5, 5, 2], LayerConfig::conv2d(3, 3, 4), false),
        single(
            "conv2d_same_stride2",
            &[5, 6, 3],
            LayerConfig::Conv2d {
                filters: 2,
                kernel_size: 3,
                stride: 2,
                padding: Padding::Same,
                use_bias: true,
                init_seed: 4,
            },
            false,
        ),
        single(
            "separable_conv2d",
            &[5, 5, 3],
            LayerConfig::SeparableConv2d {
                filters: 4,
                kernel_size: 3,
                padding: Padding::Same,
                use_bias: true,
                depthwise_seed: 1,
                pointwise_seed: 2,
            },
            false,
        ),
        single(
            "maxpool2d",
            &[5, 5, 2],
            LayerConfig::MaxPool2d {
                pool_size: 3,
                stride: 2,
                padding: Padding::Same,
            },
            false,
        ),
        single("batchnorm_train", &[3, 3, 2], LayerConfig::batchnorm(), true),
        single("batchnorm_infer", &[3, 3, 2], LayerConfig::batchnorm(), false),
        single("relu", &[3, 3, 2], LayerConfig::Relu, false),
        single("sigmoid", &[3, 3, 2], LayerConfig::Sigmoid, false),
        single(
            "dense",
            &[6],
            LayerConfig::Dense {
                units: 3,
                use_bias: true,
                init_seed: 9,
            },
            false,
        ),
        single("flatten", &[2, 3, 2], LayerConfig::Flatten, false),
        single("dropout", &[3, 3, 2], LayerConfig::Dropout { rate: 0.5, seed: 7 }, true),
        single("global_avg_pool", &[3, 4, 2], LayerConfig::GlobalAvgPool, false),
    ];
    let mut b = GraphBuilder::new("residual_add", vec![4, 4, 2]);
    let c = b.add(
        LayerConfig::Conv2d {
            filters: 2,
            kernel_size: 3,
            stride: 1,
            padding: Padding::Same,
            use_bias: false,
            init_seed: 5,
        },
        &["input"],
    );
    let y = b.add(LayerConfig::ResidualAdd, &["input", &c]);
    cases.push(GradCase {
        name: "residual_add",
        graph: b.build(&y).unwrap(),
        batch: 2,
        ctx: ForwardCtx::infer(),
    });
    // non-trivial statistics and affine terms for the inference path
    for case in cases.iter_mut().filter(|c| c.name.starts_with("batchnorm")) {
        let mut rng = DetRng::new(11, "bn");
        for e in case.graph.registry() {
            let t = case.graph.tensor_mut(&e);
            let lo = if e.name == "moving_variance" || e.name == "gamma" { 0.5 } else { -0.5 };
            *t = random_tensor(&mut rng, t.dims(), lo, lo + 1.0);
        }
    }
    cases
}

fn output_index<T: Real>(g: &ModelGraph<T>) -> usize {
    match g.output() {
        Source::Node(i) => i,
        Source::Input => panic!("graph output is its input"),
    }
}

/// `sum(r * f(x))` in the graph's precision.
fn weighted_loss<T: Real>(g: &ModelGraph<T>, x: &Tensor<T>, r: &Tensor<T>, ctx: &ForwardCtx) -> f64 {
    let (y, _) = g.forward(x, ctx).unwrap();
    y.data().iter().zip(r.data()).map(|(&a, &b)| a.to_f64() * b.to_f64()).sum()
}

/// Analytic gradients of `sum(r * f(x))`: every trainable tensor, then the input.
fn analytic<T: Real>(g: &ModelGraph<T>, x: &Tensor<T>, r: &Tensor<T>, ctx: &ForwardCtx) -> Vec<(String, Vec<f64>)> {
    let (_, cache) = g.forward(x, ctx).unwrap();
    let grads = g
        .backward(
            &cache,
            output_index(g),
            r.clone(),
            BackwardOptions {
                params: true,
                input: true,
                target: None,
            },
        )
        .unwrap();
    let mut out = Vec::new();
    for e in g.registry().iter().filter(|e| e.trainable) {
        let t = &grads.params[e.node][&e.name];
        out.push((e.key(), t.data().iter().map(|v| v.to_f64()).collect()));
    }
    let dx = grads.input.expect("input gradient requested");
    out.push(("input".into(), dx.data().iter().map(|v| v.to_f64()).collect()));
    out
}

/// Central differences in float64 with step `h`.
fn numeric(g: &ModelGraph<f64>, x: &Tensor<f64>, r: &Tensor<f64>, ctx: &ForwardCtx, h: f64) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for e in g.registry().iter().filter(|e| e.trainable) {
        let n = g.tensor(e).len();
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let mut gp = g.clone();
            gp.tensor_mut(e).data_mut()[i] += h;
            let mut gm = g.clone();
            gm.tensor_mut(e).data_mut()[i] -= h;
            grad.push((weighted_loss(&gp, x, r, ctx) - weighted_loss(&gm, x, r, ctx)) / (2.0 * h));
        }
        out.push((e.key(), grad));
    }
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        grad.push((weighted_loss(g, &xp, r, ctx) - weighted_loss(g, &xm, r, ctx)) / (2.0 * h));
    }
    out.push(("input".into(), grad));
    out
}

/// `|a - b|_2 / (|a|_2 + |b|_2)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb == 0.0 {
        0.0
    } else {
        diff / (na + nb)
    }
}

/// Largest per-tensor relative error of the float64 and float32 analytic
/// gradients against float64 central differences.
pub fn gradient_errors(case: &GradCase) -> (f64, f64) {
    let mut rng = DetRng::new(2024, format!("gradcheck/{}", case.name));
    let mut dims = vec![case.batch];
    dims.extend_from_slice(case.graph.input_dims());
    let x32 = random_tensor(&mut rng, &dims, -1.0, 1.0);
    let r32 = random_tensor(&mut rng, &{
        let mut d = vec![case.batch];
        d.extend_from_slice(case.graph.output_dims());
        d
    }, -1.0, 1.0);
    let g64 = case.graph.cast::<f64>();
    let (x64, r64) = (x32.cast::<f64>(), r32.cast::<f64>());
    let reference = numeric(&g64, &x64, &r64, &case.ctx, 1e-6);
    let a64 = analytic(&g64, &x64, &r64, &case.ctx);
    let a32 = analytic(&case.graph, &x32, &r32, &case.ctx);
    let worst = |a: &[(String, Vec<f64>)]| {
        a.iter()
            .zip(&reference)
            .map(|((ka, va), (kr, vr))| {
                assert_eq!(ka, kr);
                relative_error(va, vr)
            })
            .fold(0.0, f64::max)
    };
    (worst(&a64), worst(&a32))
}
