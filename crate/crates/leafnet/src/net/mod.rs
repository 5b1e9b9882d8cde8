//! The embedding backbone: a nine-block convolutional network mapping a
//! 3x128x128 image to a 32-component embedding, with full parameter
//! accounting and analytic gradients.

pub mod ops;

use crate::error::{Error, Result};
use crate::image::PixelImage;
use ndarray::{Array1, Array2, Array3, Array4};
use rand::{distributions::Uniform, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ops::Element;

/// Embedding width produced by the final fully connected layer.
pub const EMBEDDING_DIM: usize = 32;

/// A 32-component embedding with all components finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Array1<f32>);

impl Embedding {
    pub fn new(values: Array1<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Structural {
                layer: "embedding".into(),
                reason: format!("expected {EMBEDDING_DIM} components, got {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Structural {
                layer: "embedding".into(),
                reason: "non-finite component".into(),
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array1<f32> {
        &self.0
    }
}

/// One layer of the network, by role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Lrn {
        size: usize,
        alpha: f64,
        beta: f64,
        k: f64,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

/// Full network layout: input shape plus the ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// (channels, height, width)
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// The nine-block backbone: six convolutions with LRN, pooling and
    /// dropout interleaved, then three fully connected layers down to 32.
    pub fn backbone() -> Self {
        use LayerSpec::*;
        NetworkSpec {
            input: (3, 128, 128),
            layers: vec![
                // block 1
                Conv {
                    in_channels: 3,
                    out_channels: 64,
                    kernel: 5,
                    stride: 1,
                    pad: 1,
                },
                Relu,
                Lrn {
                    size: 5,
                    alpha: 0.0001,
                    beta: 0.75,
                    k: 2.0,
                },
                MaxPool {
                    kernel: 3,
                    stride: 2,
                },
                // block 2
                Conv {
                    in_channels: 64,
                    out_channels: 96,
                    kernel: 3,
                    stride: 1,
                    pad: 2,
                },
                Relu,
                // block 3
                Conv {
                    in_channels: 96,
                    out_channels: 128,
                    kernel: 3,
                    stride: 1,
                    pad: 2,
                },
                Relu,
                // block 4
                Conv {
                    in_channels: 128,
                    out_channels: 96,
                    kernel: 3,
                    stride: 1,
                    pad: 2,
                },
                Relu,
                Lrn {
                    size: 5,
                    alpha: 0.0001,
                    beta: 0.75,
                    k: 2.0,
                },
                MaxPool {
                    kernel: 3,
                    stride: 2,
                },
                Dropout { p: 0.2 },
                // block 5
                Conv {
                    in_channels: 96,
                    out_channels: 64,
                    kernel: 1,
                    stride: 1,
                    pad: 1,
                },
                Relu,
                Dropout { p: 0.2 },
                // block 6
                Conv {
                    in_channels: 64,
                    out_channels: 32,
                    kernel: 1,
                    stride: 1,
                    pad: 1,
                },
                Relu,
                MaxPool {
                    kernel: 3,
                    stride: 2,
                },
                Dropout { p: 0.2 },
                // blocks 7-9
                Flatten,
                Fc {
                    inputs: 10_368,
                    outputs: 256,
                },
                Relu,
                Dropout { p: 0.5 },
                Fc {
                    inputs: 256,
                    outputs: 64,
                },
                Relu,
                Fc {
                    inputs: 64,
                    outputs: 32,
                },
            ],
        }
    }

    /// Number of scalar trainable values the spec implies.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => in_channels * out_channels * kernel * kernel + out_channels,
                LayerSpec::Fc { inputs, outputs } => inputs * outputs + outputs,
                _ => 0,
            })
            .sum()
    }
}

/// Trainable tensors for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParam<F: Element> {
    Conv { weight: Array4<F>, bias: Array1<F> },
    Fc { weight: Array2<F>, bias: Array1<F> },
}

impl<F: Element> LayerParam<F> {
    pub fn len(&self) -> usize {
        match self {
            LayerParam::Conv { weight, bias } => weight.len() + bias.len(),
            LayerParam::Fc { weight, bias } => weight.len() + bias.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Visits every scalar in a fixed order (weights, then bias).
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut F)) {
        match self {
            LayerParam::Conv { weight, bias } => {
                weight.iter_mut().for_each(&mut f);
                bias.iter_mut().for_each(&mut f);
            }
            LayerParam::Fc { weight, bias } => {
                weight.iter_mut().for_each(&mut f);
                bias.iter_mut().for_each(&mut f);
            }
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            LayerParam::Conv { weight, bias } => LayerParam::Conv {
                weight: Array4::zeros(weight.dim()),
                bias: Array1::zeros(bias.len()),
            },
            LayerParam::Fc { weight, bias } => LayerParam::Fc {
                weight: Array2::zeros(weight.dim()),
                bias: Array1::zeros(bias.len()),
            },
        }
    }
}

/// Per-layer parameter slots aligned with a [`NetworkSpec`]'s layer list;
/// `None` for parameterless layers. Also used for gradients and optimizer
/// moments.
pub type ParamSet<F> = Vec<Option<LayerParam<F>>>;

/// All trainable weights and biases of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<F: Element> {
    pub spec: NetworkSpec,
    pub layers: ParamSet<F>,
}

impl<F: Element> NetworkParams<F> {
    /// Fan-in-scaled uniform initialization (bound = sqrt(6/fan_in)),
    /// biases zero. Deterministic per seed.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|layer| match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let weight = Array4::from_shape_fn(
                        (*out_channels, *in_channels, *kernel, *kernel),
                        |_| F::from(rng.sample(dist)).unwrap(),
                    );
                    Some(LayerParam::Conv {
                        weight,
                        bias: Array1::zeros(*out_channels),
                    })
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let bound = (6.0 / *inputs as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let weight = Array2::from_shape_fn((*outputs, *inputs), |_| {
                        F::from(rng.sample(dist)).unwrap()
                    });
                    Some(LayerParam::Fc {
                        weight,
                        bias: Array1::zeros(*outputs),
                    })
                }
                _ => None,
            })
            .collect();
        NetworkParams {
            spec: spec.clone(),
            layers,
        }
    }

    /// Exact count of scalar trainable values.
    pub fn param_count(&self) -> usize {
        self.layers.iter().flatten().map(|p| p.len()).sum()
    }

    /// A gradient/moment accumulator with the same shapes, all zero.
    pub fn zeros_like(&self) -> ParamSet<F> {
        self.layers
            .iter()
            .map(|slot| slot.as_ref().map(|p| p.zeros_like()))
            .collect()
    }
}

/// A value flowing through the network: a feature map before flattening,
/// a flat vector after.
#[derive(Debug, Clone)]
pub enum Value<F: Element> {
    Map(Array3<F>),
    Flat(Array1<F>),
}

impl<F: Element> Value<F> {
    fn shape(&self) -> Shape {
        match self {
            Value::Map(m) => {
                let (c, h, w) = m.dim();
                Shape::Map(c, h, w)
            }
            Value::Flat(v) => Shape::Flat(v.len()),
        }
    }
}

/// Recorded shape of a value after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

/// Dropout behaviour selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum TraceStep<F: Element> {
    Conv {
        input: Array3<F>,
    },
    Relu {
        input: Value<F>,
    },
    Lrn {
        input: Array3<F>,
    },
    MaxPool {
        input_dim: (usize, usize, usize),
        argmax: Array3<usize>,
    },
    Dropout {
        mask: Option<Value<F>>,
    },
    Flatten {
        input_dim: (usize, usize, usize),
    },
    Fc {
        input: Array1<F>,
    },
}

/// Per-layer activations retained for gradient computation and shape audits.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F: Element> {
    steps: Vec<TraceStep<F>>,
    shapes: Vec<Shape>,
    output: Array1<F>,
}

impl<F: Element> ForwardTrace<F> {
    pub fn output(&self) -> &Array1<F> {
        &self.output
    }

    /// Shape after each layer, in layer order.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Spatial side lengths after each conv and pool layer (the audit chain).
    pub fn spatial_chain(&self, spec: &NetworkSpec) -> Vec<usize> {
        spec.layers
            .iter()
            .zip(self.shapes.iter())
            .filter_map(|(layer, shape)| match (layer, shape) {
                (LayerSpec::Conv { .. }, Shape::Map(_, h, _))
                | (LayerSpec::MaxPool { .. }, Shape::Map(_, h, _)) => Some(*h),
                _ => None,
            })
            .collect()
    }

    /// Flat vector length right after the flatten layer, if present.
    pub fn flatten_size(&self, spec: &NetworkSpec) -> Option<usize> {
        spec.layers
            .iter()
            .zip(self.shapes.iter())
            .find_map(|(layer, shape)| match (layer, shape) {
                (LayerSpec::Flatten, Shape::Flat(n)) => Some(*n),
                _ => None,
            })
    }
}

fn layer_name(index: usize, layer: &LayerSpec) -> String {
    let kind = match layer {
        LayerSpec::Conv { .. } => "conv",
        LayerSpec::Relu => "relu",
        LayerSpec::Lrn { .. } => "lrn",
        LayerSpec::MaxPool { .. } => "maxpool",
        LayerSpec::Dropout { .. } => "dropout",
        LayerSpec::Flatten => "flatten",
        LayerSpec::Fc { .. } => "fc",
    };
    format!("{kind}#{index}")
}

fn structural<F2>(index: usize, layer: &LayerSpec, reason: String) -> Result<F2> {
    Err(Error::Structural {
        layer: layer_name(index, layer),
        reason,
    })
}

/// Runs the network on one input. In train mode dropout layers zero
/// elements with their stated probability and scale survivors by 1/(1-p),
/// drawing masks from `dropout_seed`; in eval mode dropout is the identity.
pub fn forward<F: Element>(
    params: &NetworkParams<F>,
    input: &Array3<F>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(Array1<F>, ForwardTrace<F>)> {
    let spec = &params.spec;
    if input.dim() != spec.input {
        return Err(Error::Structural {
            layer: "input".into(),
            reason: format!("expected {:?}, got {:?}", spec.input, input.dim()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut value = Value::Map(input.clone());
    let mut steps = Vec::with_capacity(spec.layers.len());
    let mut shapes = Vec::with_capacity(spec.layers.len());

    for (index, (layer, param)) in spec.layers.iter().zip(params.layers.iter()).enumerate() {
        value = match (layer, &value) {
            (
                LayerSpec::Conv {
                    in_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                },
                Value::Map(map),
            ) => {
                let (c, h, w) = map.dim();
                if c != *in_channels {
                    return structural(
                        index,
                        layer,
                        format!("expected {in_channels} input channels, got {c}"),
                    );
                }
                if ops::conv_output_size(h, *kernel, *stride, *pad).is_none()
                    || ops::conv_output_size(w, *kernel, *stride, *pad).is_none()
                {
                    return structural(index, layer, format!("kernel does not fit {h}x{w} input"));
                }
                let Some(LayerParam::Conv { weight, bias }) = param else {
                    return structural(index, layer, "missing conv parameters".into());
                };
                let out = ops::conv2d_forward(map, weight, bias, *stride, *pad);
                steps.push(TraceStep::Conv { input: map.clone() });
                Value::Map(out)
            }
            (LayerSpec::Relu, v) => {
                steps.push(TraceStep::Relu { input: v.clone() });
                match v {
                    Value::Map(m) => Value::Map(ops::relu_forward(m)),
                    Value::Flat(x) => Value::Flat(x.mapv(|v| v.max(F::zero()))),
                }
            }
            (
                LayerSpec::Lrn {
                    size,
                    alpha,
                    beta,
                    k,
                },
                Value::Map(map),
            ) => {
                let out = ops::lrn_forward(map, *size, *alpha, *beta, *k);
                steps.push(TraceStep::Lrn { input: map.clone() });
                Value::Map(out)
            }
            (LayerSpec::MaxPool { kernel, stride }, Value::Map(map)) => {
                let (_, h, w) = map.dim();
                if h < *kernel || w < *kernel {
                    return structural(index, layer, format!("kernel does not fit {h}x{w} input"));
                }
                let (out, argmax) = ops::maxpool_forward(map, *kernel, *stride);
                steps.push(TraceStep::MaxPool {
                    input_dim: map.dim(),
                    argmax,
                });
                Value::Map(out)
            }
            (LayerSpec::Dropout { p }, v) => match mode {
                Mode::Eval => {
                    steps.push(TraceStep::Dropout { mask: None });
                    v.clone()
                }
                Mode::Train => match v {
                    Value::Map(m) => {
                        let mask = ops::dropout_mask::<F>(m.len(), *p, &mut rng);
                        let mask = Array3::from_shape_vec(m.dim(), mask).expect("mask shape");
                        let out = m * &mask;
                        steps.push(TraceStep::Dropout {
                            mask: Some(Value::Map(mask)),
                        });
                        Value::Map(out)
                    }
                    Value::Flat(x) => {
                        let mask = ops::dropout_mask::<F>(x.len(), *p, &mut rng);
                        let mask = Array1::from_vec(mask);
                        let out = x * &mask;
                        steps.push(TraceStep::Dropout {
                            mask: Some(Value::Flat(mask)),
                        });
                        Value::Flat(out)
                    }
                },
            },
            (LayerSpec::Flatten, Value::Map(map)) => {
                let dim = map.dim();
                let flat = map
                    .clone()
                    .into_shape(dim.0 * dim.1 * dim.2)
                    .expect("contiguous map");
                steps.push(TraceStep::Flatten { input_dim: dim });
                Value::Flat(flat)
            }
            (LayerSpec::Fc { inputs, .. }, Value::Flat(x)) => {
                if x.len() != *inputs {
                    return structural(
                        index,
                        layer,
                        format!("expected {inputs} inputs, got {}", x.len()),
                    );
                }
                let Some(LayerParam::Fc { weight, bias }) = param else {
                    return structural(index, layer, "missing fc parameters".into());
                };
                let out = ops::fc_forward(x, weight, bias);
                steps.push(TraceStep::Fc { input: x.clone() });
                Value::Flat(out)
            }
            (_, v) => {
                return structural(
                    index,
                    layer,
                    format!("layer cannot consume a {:?} value", v.shape()),
                )
            }
        };
        shapes.push(value.shape());
    }

    let output = match value {
        Value::Flat(x) => x,
        Value::Map(_) => {
            return Err(Error::Structural {
                layer: "output".into(),
                reason: "network does not end in a flat vector".into(),
            })
        }
    };
    let trace = ForwardTrace {
        steps,
        shapes,
        output: output.clone(),
    };
    Ok((output, trace))
}

/// Gradient of `dot(embedding, output_grad)` with respect to every
/// parameter, walking the trace in reverse. Dropout masks recorded during
/// the forward pass are reused exactly.
pub fn backward<F: Element>(
    params: &NetworkParams<F>,
    trace: &ForwardTrace<F>,
    output_grad: &Array1<F>,
) -> Result<ParamSet<F>> {
    let spec = &params.spec;
    if trace.steps.len() != spec.layers.len() {
        return Err(Error::Structural {
            layer: "trace".into(),
            reason: format!(
                "trace has {} steps for {} layers",
                trace.steps.len(),
                spec.layers.len()
            ),
        });
    }
    if output_grad.len() != trace.output.len() {
        return Err(Error::Structural {
            layer: "output".into(),
            reason: format!(
                "output gradient has {} components, embedding has {}",
                output_grad.len(),
                trace.output.len()
            ),
        });
    }
    let mut grads = params.zeros_like();
    let mut grad = Value::Flat(output_grad.clone());

    for (index, (layer, step)) in spec.layers.iter().zip(trace.steps.iter()).enumerate().rev() {
        grad = match (layer, step, &grad) {
            (LayerSpec::Conv { stride, pad, .. }, TraceStep::Conv { input }, Value::Map(gout)) => {
                let Some(LayerParam::Conv { weight, .. }) = &params.layers[index] else {
                    return structural(index, layer, "missing conv parameters".into());
                };
                let (gin, gw, gb) =
                    ops::conv2d_backward(input, weight, gout, *stride, *pad, index > 0);
                grads[index] = Some(LayerParam::Conv {
                    weight: gw,
                    bias: gb,
                });
                match gin {
                    Some(g) => Value::Map(g),
                    // first layer: the input needs no gradient
                    None => Value::Map(Array3::zeros(input.dim())),
                }
            }
            (LayerSpec::Relu, TraceStep::Relu { input }, g) => match (input, g) {
                (Value::Map(x), Value::Map(gout)) => Value::Map(ops::relu_backward(x, gout)),
                (Value::Flat(x), Value::Flat(gout)) => {
                    Value::Flat(ndarray::Zip::from(x).and(gout).map_collect(|&x, &g| {
                        if x > F::zero() {
                            g
                        } else {
                            F::zero()
                        }
                    }))
                }
                _ => return structural(index, layer, "trace/gradient stage mismatch".into()),
            },
            (
                LayerSpec::Lrn {
                    size,
                    alpha,
                    beta,
                    k,
                },
                TraceStep::Lrn { input },
                Value::Map(gout),
            ) => Value::Map(ops::lrn_backward(input, gout, *size, *alpha, *beta, *k)),
            (
                LayerSpec::MaxPool { .. },
                TraceStep::MaxPool { input_dim, argmax },
                Value::Map(gout),
            ) => Value::Map(ops::maxpool_backward(*input_dim, argmax, gout)),
            (LayerSpec::Dropout { .. }, TraceStep::Dropout { mask }, g) => match (mask, g) {
                (None, g) => g.clone(),
                (Some(Value::Map(mask)), Value::Map(gout)) => Value::Map(gout * mask),
                (Some(Value::Flat(mask)), Value::Flat(gout)) => Value::Flat(gout * mask),
                _ => return structural(index, layer, "trace/gradient stage mismatch".into()),
            },
            (LayerSpec::Flatten, TraceStep::Flatten { input_dim }, Value::Flat(gout)) => {
                Value::Map(
                    gout.clone()
                        .into_shape(*input_dim)
                        .expect("flatten gradient shape"),
                )
            }
            (LayerSpec::Fc { .. }, TraceStep::Fc { input }, Value::Flat(gout)) => {
                let Some(LayerParam::Fc { weight, .. }) = &params.layers[index] else {
                    return structural(index, layer, "missing fc parameters".into());
                };
                let (gin, gw, gb) = ops::fc_backward(input, weight, gout);
                grads[index] = Some(LayerParam::Fc {
                    weight: gw,
                    bias: gb,
                });
                Value::Flat(gin)
            }
            _ => return structural(index, layer, "trace does not match layer".into()),
        };
    }
    Ok(grads)
}

/// Eval-mode embedding of one image through the f32 backbone.
pub fn embed(params: &NetworkParams<f32>, image: &PixelImage) -> Result<Embedding> {
    let (out, _) = forward(params, image.data(), Mode::Eval, 0)?;
    Embedding::new(out)
}
