//! Model construction, forward evaluation and the training objective.
//!
//! Six fixed architectures are supported: three fully-connected nets, a
//! four-conv CNN with 2x2 pooling, and the 20/32-layer CIFAR-style residual
//! nets with parameter-free downsampling shortcuts. All take NHWC image
//! batches scaled to `[0, 1]` and produce one logit per class.

pub mod hvp;
pub mod layers;
pub mod optim;
pub mod train;

use ndarray::{Array, Array2, Ix2, IxDyn};

pub use hvp::{dataset_loss_grad, hvp_fd, model_hvp, SWEEP_BATCH};
pub use layers::{Mode, Op, Shortcut};
pub use optim::{OptimizerKind, OptimizerState};
pub use train::{train, EpochRecord, TrainConfig, TrainHistory};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamSet, Scalar, Tensor};

/// The fixed architecture family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ArchKind {
    SmallMlp,
    Mlp,
    LargeMlp,
    SmallCnn,
    ResNet20,
    ResNet32,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] = [
        ArchKind::SmallMlp,
        ArchKind::Mlp,
        ArchKind::LargeMlp,
        ArchKind::SmallCnn,
        ArchKind::ResNet20,
        ArchKind::ResNet32,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::SmallMlp => "small_mlp",
            ArchKind::Mlp => "mlp",
            ArchKind::LargeMlp => "large_mlp",
            ArchKind::SmallCnn => "small_cnn",
            ArchKind::ResNet20 => "resnet20",
            ArchKind::ResNet32 => "resnet32",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An architecture bound to a concrete input shape and class count.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn new(kind: ArchKind, input_shape: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        let (h, w, c) = input_shape;
        if h == 0 || w == 0 || c == 0 || num_classes == 0 {
            return Err(Error::Unsupported("input shape and class count must be nonzero".into()));
        }
        match kind {
            ArchKind::SmallMlp | ArchKind::Mlp | ArchKind::LargeMlp => {}
            ArchKind::SmallCnn => {
                // two valid 3x3 pairs with 2x2 pools must leave a nonzero map
                let shrink = |d: usize| -> usize { ((d.saturating_sub(4)) / 2).saturating_sub(4) / 2 };
                if shrink(h) == 0 || shrink(w) == 0 {
                    return Err(Error::Unsupported(format!(
                        "small_cnn needs at least 16x16 inputs, got {h}x{w}"
                    )));
                }
            }
            ArchKind::ResNet20 | ArchKind::ResNet32 => {
                if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Unsupported(format!(
                        "residual nets need inputs with sides >= 8 and divisible by 4, got {h}x{w}"
                    )));
                }
            }
        }
        Ok(ArchSpec { kind, input_shape, num_classes })
    }

    /// Flat input dimension.
    pub fn input_dim(&self) -> usize {
        let (h, w, c) = self.input_shape;
        h * w * c
    }

    fn mlp_dims(&self) -> Option<Vec<usize>> {
        let hidden: &[usize] = match self.kind {
            ArchKind::SmallMlp => &[256],
            ArchKind::Mlp => &[256, 256, 256],
            ArchKind::LargeMlp => &[512, 512, 512],
            _ => return None,
        };
        let mut dims = vec![self.input_dim()];
        dims.extend_from_slice(hidden);
        dims.push(self.num_classes);
        Some(dims)
    }

    /// The op sequence realizing this architecture.
    pub fn ops(&self) -> Vec<Op> {
        if let Some(dims) = self.mlp_dims() {
            let mut ops = vec![Op::Flatten];
            for i in 0..dims.len() - 1 {
                ops.push(Op::Dense {
                    name: format!("fc{}", i + 1),
                    in_dim: dims[i],
                    out_dim: dims[i + 1],
                });
                if i + 2 < dims.len() {
                    ops.push(Op::Relu);
                }
            }
            return ops;
        }
        let (h, w, c) = self.input_shape;
        match self.kind {
            ArchKind::SmallCnn => {
                let conv = |name: &str, ic: usize, oc: usize| Op::Conv3x3 {
                    name: name.into(),
                    in_c: ic,
                    out_c: oc,
                    stride: 1,
                    pad: 0,
                    bias: true,
                };
                let shrink = |d: usize| ((d - 4) / 2 - 4) / 2;
                let flat = shrink(h) * shrink(w) * 64;
                vec![
                    conv("conv1", c, 32),
                    Op::Relu,
                    conv("conv2", 32, 32),
                    Op::Relu,
                    Op::MaxPool2,
                    conv("conv3", 32, 64),
                    Op::Relu,
                    conv("conv4", 64, 64),
                    Op::Relu,
                    Op::MaxPool2,
                    Op::Flatten,
                    Op::Dense { name: "fc1".into(), in_dim: flat, out_dim: 200 },
                    Op::Relu,
                    Op::Dense { name: "fc2".into(), in_dim: 200, out_dim: 200 },
                    Op::Relu,
                    Op::Dense { name: "fc3".into(), in_dim: 200, out_dim: self.num_classes },
                ]
            }
            ArchKind::ResNet20 | ArchKind::ResNet32 => {
                let blocks = if self.kind == ArchKind::ResNet20 { 3 } else { 5 };
                let widths = [16usize, 32, 64];
                let mut ops = vec![
                    Op::Conv3x3 { name: "conv0".into(), in_c: c, out_c: 16, stride: 1, pad: 1, bias: false },
                    Op::BatchNorm { name: "bn0".into(), channels: 16 },
                    Op::Relu,
                ];
                for (si, &width) in widths.iter().enumerate() {
                    for bi in 0..blocks {
                        let (in_c, stride) =
                            if bi == 0 && si > 0 { (widths[si - 1], 2) } else { (width, 1) };
                        let p = format!("s{}b{}", si + 1, bi);
                        let shortcut = if in_c == width {
                            Shortcut::Identity
                        } else {
                            Shortcut::DownsamplePad { in_c, out_c: width }
                        };
                        ops.push(Op::Residual {
                            body: vec![
                                Op::Conv3x3 {
                                    name: format!("{p}.conv1"),
                                    in_c,
                                    out_c: width,
                                    stride,
                                    pad: 1,
                                    bias: false,
                                },
                                Op::BatchNorm { name: format!("{p}.bn1"), channels: width },
                                Op::Relu,
                                Op::Conv3x3 {
                                    name: format!("{p}.conv2"),
                                    in_c: width,
                                    out_c: width,
                                    stride: 1,
                                    pad: 1,
                                    bias: false,
                                },
                                Op::BatchNorm { name: format!("{p}.bn2"), channels: width },
                            ],
                            shortcut,
                        });
                        ops.push(Op::Relu);
                    }
                }
                ops.push(Op::GlobalAvgPool);
                ops.push(Op::Dense { name: "fc".into(), in_dim: 64, out_dim: self.num_classes });
                ops
            }
            _ => unreachable!("mlp kinds handled above"),
        }
    }
}

enum InitKind {
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` — the convention the
    /// mainstream frameworks apply to dense and conv layers. The scale
    /// matters beyond convergence: larger inits leave trained MLPs far more
    /// confident on off-distribution inputs, which inflates the clean-model
    /// spurious score.
    FanInUniform(usize),
    Zeros,
    Ones,
}

fn collect_param_inits(ops: &[Op], out: &mut Vec<(String, Vec<usize>, InitKind)>) {
    for op in ops {
        match op {
            Op::Dense { name, in_dim, out_dim } => {
                out.push((format!("{name}.w"), vec![*in_dim, *out_dim], InitKind::FanInUniform(*in_dim)));
                out.push((format!("{name}.b"), vec![*out_dim], InitKind::FanInUniform(*in_dim)));
            }
            Op::Conv3x3 { name, in_c, out_c, bias, .. } => {
                out.push((
                    format!("{name}.w"),
                    vec![3, 3, *in_c, *out_c],
                    InitKind::FanInUniform(9 * in_c),
                ));
                if *bias {
                    out.push((format!("{name}.b"), vec![*out_c], InitKind::FanInUniform(9 * in_c)));
                }
            }
            Op::BatchNorm { name, channels } => {
                out.push((format!("{name}.gamma"), vec![*channels], InitKind::Ones));
                out.push((format!("{name}.beta"), vec![*channels], InitKind::Zeros));
            }
            Op::Residual { body, .. } => collect_param_inits(body, out),
            _ => {}
        }
    }
}

fn collect_buffer_inits(ops: &[Op], out: &mut Vec<(String, usize)>) {
    for op in ops {
        match op {
            Op::BatchNorm { name, channels } => out.push((name.clone(), *channels)),
            Op::Residual { body, .. } => collect_buffer_inits(body, out),
            _ => {}
        }
    }
}

/// A built network: spec, trainable parameters and (for batch-norm nets)
/// running-statistic buffers.
#[derive(Clone, Debug)]
pub struct Model<F = f32> {
    pub spec: ArchSpec,
    pub params: ParamSet<F>,
    pub buffers: ParamSet<F>,
    /// Seed the parameters were drawn from; recorded in checkpoints.
    pub seed: u64,
}

/// Draws fresh parameters for `spec` from the seeded init stream.
///
/// Weights and biases are uniform on `±1/sqrt(fan_in)`; batch-norm
/// scale/shift start at one/zero, running stats at zero-mean unit-var.
pub fn build_model<F: Scalar>(spec: &ArchSpec, seed: u64) -> Result<Model<F>> {
    let ops = spec.ops();
    let mut inits = Vec::new();
    collect_param_inits(&ops, &mut inits);
    let mut rng = rng::stream(seed, "model-init");
    let mut params = ParamSet::new();
    for (name, shape, kind) in inits {
        let t = match kind {
            InitKind::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Array::from_shape_simple_fn(IxDyn(&shape), || {
                    F::from_f64(rng::uniform(&mut rng, -bound, bound))
                })
            }
            InitKind::Zeros => Array::zeros(IxDyn(&shape)),
            InitKind::Ones => Array::ones(IxDyn(&shape)),
        };
        params.insert(name, t)?;
    }
    let mut buffer_specs = Vec::new();
    collect_buffer_inits(&ops, &mut buffer_specs);
    let mut buffers = ParamSet::new();
    for (name, channels) in buffer_specs {
        buffers.insert(format!("{name}.mean"), Array::zeros(IxDyn(&[channels])))?;
        buffers.insert(format!("{name}.var"), Array::ones(IxDyn(&[channels])))?;
    }
    Ok(Model { spec: spec.clone(), params, buffers, seed })
}

/// Number of trainable parameters (running statistics excluded).
pub fn count_params<F: Scalar>(model: &Model<F>) -> usize {
    model.params.num_scalars()
}

fn check_batch<F: Scalar>(spec: &ArchSpec, batch: &Tensor<F>) -> Result<()> {
    let (h, w, c) = spec.input_shape;
    let s = batch.shape();
    if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
        return Err(Error::Shape(format!(
            "batch shape {s:?} does not match model input (batch, {h}, {w}, {c})"
        )));
    }
    if s[0] == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Eval-mode logits for a batch.
pub fn logits<F: Scalar>(model: &Model<F>, batch: &Tensor<F>) -> Result<Array2<F>> {
    check_batch(&model.spec, batch)?;
    let y = layers::forward_ops(
        &model.spec.ops(),
        &model.params,
        &model.buffers,
        batch.clone(),
        Mode::Eval,
        None,
    )?;
    y.into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape("network output is not a (batch, classes) matrix".into()))
}

/// Eval-mode softmax probabilities for a batch.
pub fn forward<F: Scalar>(model: &Model<F>, batch: &Tensor<F>) -> Result<Array2<F>> {
    Ok(softmax_rows(&logits(model, batch)?))
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<F: Scalar>(z: &Array2<F>) -> Array2<F> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = 0.0f64;
        for v in row.iter_mut() {
            let e = (v.into_f64() - max.into_f64()).exp();
            *v = F::from_f64(e);
            denom += e;
        }
        for v in row.iter_mut() {
            *v = F::from_f64(v.into_f64() / denom);
        }
    }
    p
}

/// Mean cross-entropy of `logits` against integer labels, with its gradient
/// w.r.t. the logits (already divided by the batch size).
pub fn cross_entropy<F: Scalar>(z: &Array2<F>, labels: &[u8]) -> Result<(f64, Array2<F>)> {
    let (b, k) = z.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let mut dz = softmax_rows(z);
    let mut loss = 0.0f64;
    let inv_b = 1.0 / b as f64;
    for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
        let y = labels[i] as usize;
        let p = row[y].into_f64();
        loss -= p.max(f64::MIN_POSITIVE).ln();
        row[y] = F::from_f64(p - 1.0);
        for v in row.iter_mut() {
            *v = F::from_f64(v.into_f64() * inv_b);
        }
    }
    Ok((loss * inv_b, dz))
}

/// Mean training loss on a batch and its gradient for every parameter.
///
/// Networks with batch norm are evaluated with their running statistics, so
/// the objective is a deterministic sum over examples — the form the
/// influence and deletion machinery differentiates.
pub fn loss_grad<F: Scalar>(
    model: &Model<F>,
    batch: &Tensor<F>,
    labels: &[u8],
) -> Result<(f64, ParamSet<F>)> {
    let (loss, grads, _) = loss_grad_mode(model, batch, labels, Mode::Eval)?;
    Ok((loss, grads))
}

/// Blended running-statistic update produced by one train-mode batch-norm op.
pub(crate) struct BnUpdate {
    pub name: String,
    pub mean: ndarray::Array1<f64>,
    pub var: ndarray::Array1<f64>,
}

fn collect_bn_updates<F: Scalar>(ops: &[Op], caches: &[layers::OpCache<F>], out: &mut Vec<BnUpdate>) {
    for (op, cache) in ops.iter().zip(caches) {
        match (op, cache) {
            (
                Op::BatchNorm { name, .. },
                layers::OpCache::BatchNorm { batch_mean: Some(m), batch_var: Some(v), .. },
            ) => out.push(BnUpdate { name: name.clone(), mean: m.clone(), var: v.clone() }),
            (Op::Residual { body, .. }, layers::OpCache::Residual { body: bc, .. }) => {
                collect_bn_updates(body, bc, out)
            }
            _ => {}
        }
    }
}

/// Forward/backward pass in the given mode. Returns the mean loss, gradients
/// laid out like `model.params`, and (train mode) per-batch-norm running-stat
/// contributions for the caller to blend into the model's buffers.
pub(crate) fn loss_grad_mode<F: Scalar>(
    model: &Model<F>,
    batch: &Tensor<F>,
    labels: &[u8],
    mode: Mode,
) -> Result<(f64, ParamSet<F>, Vec<BnUpdate>)> {
    check_batch(&model.spec, batch)?;
    let ops = model.spec.ops();
    let mut caches = Vec::new();
    let out = layers::forward_ops(
        &ops,
        &model.params,
        &model.buffers,
        batch.clone(),
        mode,
        Some(&mut caches),
    )?;
    let z = out
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape("network output is not a (batch, classes) matrix".into()))?;
    let (loss, dz) = cross_entropy(&z, labels)?;
    let mut bn_updates = Vec::new();
    collect_bn_updates(&ops, &caches, &mut bn_updates);
    let mut grads = model.params.zeros_like();
    layers::backward_ops(&ops, &model.params, &mut caches, dz.into_dyn(), &mut grads)?;
    Ok((loss, grads, bn_updates))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ArchKind, shape: (usize, usize, usize)) -> ArchSpec {
        ArchSpec::new(kind, shape, 10).unwrap()
    }

    #[test]
    fn parameter_counts_match_hand_calculation() {
        // Fully-connected: (in+1)*out per layer.
        // small_cnn: 320 + 9248 + 18496 + 36928 + 205000 + 40200 + 2010.
        // resnet20/32: 3x3 convs without bias + affine batch norm + final fc.
        let cases = [
            (ArchKind::SmallMlp, (28, 28, 1), 203_530),
            (ArchKind::Mlp, (28, 28, 1), 335_114),
            (ArchKind::LargeMlp, (28, 28, 1), 932_362),
            (ArchKind::SmallCnn, (28, 28, 1), 312_202),
            (ArchKind::ResNet20, (32, 32, 3), 269_722),
            (ArchKind::ResNet32, (32, 32, 3), 464_154),
        ];
        for (kind, shape, want) in cases {
            let model = build_model::<f32>(&spec(kind, shape), 0).unwrap();
            assert_eq!(count_params(&model), want, "{kind}");
        }
    }

    #[test]
    fn same_seed_same_params_different_seed_different() {
        let s = spec(ArchKind::SmallMlp, (28, 28, 1));
        let a = build_model::<f32>(&s, 3).unwrap();
        let b = build_model::<f32>(&s, 3).unwrap();
        let c = build_model::<f32>(&s, 4).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.params.dot(&c.params) != a.params.dot(&b.params));
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let s = spec(ArchKind::SmallMlp, (28, 28, 1));
        let m = build_model::<f64>(&s, 9).unwrap();
        let bound = 1.0f64 / (784.0f64).sqrt();
        for name in ["fc1.w", "fc1.b"] {
            let t = m.params.get(name).unwrap();
            assert!(t.iter().all(|&v| v.abs() <= bound), "{name}");
            assert!(t.iter().any(|&v| v != 0.0), "{name} should not be all zero");
        }
        // with 200k draws the max should come close to the bound
        let w = m.params.get("fc1.w").unwrap();
        let max = w.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max > 0.95 * bound, "max |w| = {max}, bound = {bound}");
        // the second layer sees 256 inputs, so its bound is wider
        let w2 = m.params.get("fc2.w").unwrap();
        let bound2 = 1.0f64 / (256.0f64).sqrt();
        assert!(w2.iter().all(|&v| v.abs() <= bound2));
        let max2 = w2.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max2 > bound, "fc2 draws should exceed the fc1 bound");
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let z = ndarray::array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        let p = softmax_rows(&z);
        for row in p.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!((p[(1, 0)] - 0.5).abs() < 1e-12, "extreme logits must not overflow");
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let z = ndarray::array![[0.0f64, 0.0], [2.0, 0.0]];
        let (loss, dz) = cross_entropy(&z, &[0, 1]).unwrap();
        let want = (-(0.5f64).ln() - (1.0 / (1.0 + (2.0f64).exp())).ln()) / 2.0;
        assert!((loss - want).abs() < 1e-12);
        // gradient rows sum to zero (softmax minus one-hot)
        for row in dz.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn unsupported_input_shapes_are_rejected() {
        assert!(ArchSpec::new(ArchKind::SmallCnn, (14, 14, 1), 10).is_err());
        assert!(ArchSpec::new(ArchKind::ResNet20, (30, 30, 3), 10).is_err());
        assert!(ArchSpec::new(ArchKind::Mlp, (0, 28, 1), 10).is_err());
        assert!(ArchSpec::new(ArchKind::SmallCnn, (16, 16, 3), 10).is_ok());
    }
}
