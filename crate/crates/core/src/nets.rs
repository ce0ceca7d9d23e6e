//! Generator and critic architectures.
//!
//! Both networks share one trunk:
//!
//! ```text
//! conv3x3 dil 2 -> ReLU -> conv3x3 /2 -> ReLU -> conv3x3 /2 -> ReLU
//!   -> residual(conv -> ReLU -> conv -> ReLU -> conv, + skip) -> ReLU
//!   -> conv1x1 to bottleneck -> ReLU -> flatten -> FC(hidden) -> ReLU
//!   -> FC(n_outputs) [-> sigmoid]
//! ```
//!
//! Every 3x3 conv uses same-style padding `dilation * (k - 1) / 2`, so only
//! the two stride-2 layers change the spatial size. The generator head has
//! no activation; the critic head is a single sigmoid unit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::RigidParams2D;
use crate::rng::seeded;
use crate::tensor::{self, Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    None,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Channels of the concatenated fixed+moving input.
    pub in_channels: usize,
    pub n_outputs: usize,
    pub base_filters: usize,
    pub bottleneck_channels: usize,
    pub hidden_units: usize,
    pub final_activation: FinalActivation,
    /// Square input side length; fixes the width of the first FC layer.
    pub input_size: usize,
}

impl NetworkSpec {
    /// Generator regressing `n_outputs` transform parameters.
    pub fn generator(in_channels: usize, n_outputs: usize) -> Self {
        Self {
            in_channels,
            n_outputs,
            base_filters: 128,
            bottleneck_channels: 8,
            hidden_units: 256,
            final_activation: FinalActivation::None,
            input_size: 64,
        }
    }

    /// Critic with a single sigmoid output.
    pub fn critic(in_channels: usize) -> Self {
        Self {
            n_outputs: 1,
            final_activation: FinalActivation::Sigmoid,
            ..Self::generator(in_channels, 1)
        }
    }

    pub fn with_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn with_widths(mut self, base_filters: usize, bottleneck: usize, hidden: usize) -> Self {
        self.base_filters = base_filters;
        self.bottleneck_channels = bottleneck;
        self.hidden_units = hidden;
        self
    }

    /// Spatial side after the two stride-2 convs.
    pub fn reduced_size(&self) -> usize {
        let half = |s: usize| (s - 1) / 2 + 1;
        half(half(self.input_size))
    }

    pub fn flatten_len(&self) -> usize {
        self.bottleneck_channels * self.reduced_size() * self.reduced_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| {
            Err(TensorError::Argument {
                op: "build_network",
                detail,
            })
        };
        if self.in_channels < 2 {
            return bad(format!(
                "in_channels must cover a concatenated pair (>= 2), got {}",
                self.in_channels
            ));
        }
        if self.n_outputs == 0 {
            return bad("n_outputs must be at least 1".into());
        }
        if self.base_filters == 0 || self.bottleneck_channels == 0 || self.hidden_units == 0 {
            return bad(format!(
                "layer widths must be positive: filters {}, bottleneck {}, hidden {}",
                self.base_filters, self.bottleneck_channels, self.hidden_units
            ));
        }
        if self.input_size < 4 {
            return bad(format!(
                "input_size must be at least 4, got {}",
                self.input_size
            ));
        }
        Ok(())
    }
}

/// Layer table: name, output channels, input channels, kernel side.
fn layer_table(spec: &NetworkSpec) -> Vec<(&'static str, [usize; 4])> {
    let f = spec.base_filters;
    vec![
        ("conv1", [f, spec.in_channels, 3, 3]),
        ("conv2", [f, f, 3, 3]),
        ("conv3", [f, f, 3, 3]),
        ("res1", [f, f, 3, 3]),
        ("res2", [f, f, 3, 3]),
        ("res3", [f, f, 3, 3]),
        ("bottleneck", [spec.bottleneck_channels, f, 1, 1]),
        ("fc1", [spec.hidden_units, spec.flatten_len(), 0, 0]),
        ("fc2", [spec.n_outputs, spec.hidden_units, 0, 0]),
    ]
}

const HEAD: &str = "fc2";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Weights of one network, in layer order (`<layer>.weight`, `<layer>.bias`).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<NamedParam>,
}

/// Builds a network with fan-in scaled uniform weights. The output layer
/// starts at zero, so an untrained generator predicts the identity and an
/// untrained critic scores every pair 0.5.
pub fn build_network(spec: NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let mut params = Vec::new();
    for (name, dims) in layer_table(&spec) {
        let [out, inp, kh, kw] = dims;
        let weight_shape: Vec<usize> = if kh == 0 {
            vec![out, inp]
        } else {
            vec![out, inp, kh, kw]
        };
        let fan_in = inp * kh.max(1) * kw.max(1);
        let bound = (1.0 / fan_in as f64).sqrt() as f32;
        let mut draw = |shape: Vec<usize>| {
            if name == HEAD {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
            }
        };
        let weight = draw(weight_shape);
        let bias = draw(vec![out]);
        params.push(NamedParam {
            name: format!("{name}.weight"),
            value: weight,
        });
        params.push(NamedParam {
            name: format!("{name}.bias"),
            value: bias,
        });
    }
    Ok(Network { spec, params })
}

impl Network {
    /// Rebuilds a network from previously stored tensors, checking every
    /// name and shape against the spec.
    pub fn from_params(spec: NetworkSpec, params: Vec<NamedParam>) -> Result<Self> {
        let template = build_network(spec.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(TensorError::Argument {
                op: "Network::from_params",
                detail: format!(
                    "expected {} tensors, got {}",
                    template.params.len(),
                    params.len()
                ),
            });
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(TensorError::Argument {
                    op: "Network::from_params",
                    detail: format!(
                        "expected {} {:?}, got {} {:?}",
                        want.name,
                        want.value.shape(),
                        got.name,
                        got.value.shape()
                    ),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn max_abs_param(&self) -> f32 {
        self.params
            .iter()
            .fold(0.0, |m, p| m.max(p.value.max_abs()))
    }

    /// Clamps every parameter element into `[-c, c]`.
    pub fn clip_weights(&mut self, c: f32) {
        assert!(c > 0.0, "clip value must be positive, got {c}");
        for t in self.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
    }

    /// Registers the weights on `graph`, as gradient-collecting leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundNetwork<'g, '_> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        BoundNetwork { net: self, vars }
    }
}

/// A network whose weights live on a graph.
pub struct BoundNetwork<'g, 'n> {
    net: &'n Network,
    vars: Vec<Var<'g>>,
}

impl<'g> BoundNetwork<'g, '_> {
    /// Parameter handles in the same order as [`Network::params`].
    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    fn layer(&self, index: usize) -> (Var<'g>, Var<'g>) {
        (self.vars[2 * index], self.vars[2 * index + 1])
    }

    fn conv(&self, index: usize, x: Var<'g>, stride: usize, dilation: usize) -> Result<Var<'g>> {
        let (w, b) = self.layer(index);
        let k = w.shape()[2];
        let padding = dilation * (k - 1) / 2;
        tensor::conv2d(x, w, Some(b), stride, padding, dilation)
    }

    /// `[N, in_channels, S, S]` to `[N, n_outputs]`.
    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.forward_impl(x, true)
    }

    pub(crate) fn forward_impl(&self, x: Var<'g>, residual_skip: bool) -> Result<Var<'g>> {
        let spec = &self.net.spec;
        let s = x.shape();
        if s.len() != 4
            || s[1] != spec.in_channels
            || s[2] != spec.input_size
            || s[3] != spec.input_size
        {
            return Err(tensor::shape_err(
                "network forward",
                format!(
                    "expected [N,{},{},{}], got {s:?}",
                    spec.in_channels, spec.input_size, spec.input_size
                ),
            ));
        }
        let n = s[0];
        let h = tensor::relu(self.conv(0, x, 1, 2)?);
        let h = tensor::relu(self.conv(1, h, 2, 1)?);
        let h = tensor::relu(self.conv(2, h, 2, 1)?);

        let r = tensor::relu(self.conv(3, h, 1, 1)?);
        let r = tensor::relu(self.conv(4, r, 1, 1)?);
        let r = self.conv(5, r, 1, 1)?;
        let h = if residual_skip {
            tensor::relu(tensor::add(r, h)?)
        } else {
            tensor::relu(r)
        };

        let h = tensor::relu(self.conv(6, h, 1, 1)?);
        let h = tensor::reshape(h, &[n, spec.flatten_len()])?;
        let (w1, b1) = self.layer(7);
        let h = tensor::relu(tensor::linear(h, w1, b1)?);
        let (w2, b2) = self.layer(8);
        let y = tensor::linear(h, w2, b2)?;
        Ok(match spec.final_activation {
            FinalActivation::None => y,
            FinalActivation::Sigmoid => tensor::sigmoid(y),
        })
    }
}

/// Channel-concatenates `fixed` and `moving` (`[C,H,W]` or `[N,C,H,W]`) into
/// a network input `[N, 2C, H, W]`.
pub fn pair_input<'g>(graph: &'g Graph, fixed: &Tensor, moving: Var<'g>) -> Result<Var<'g>> {
    let fixed = graph.constant(as_batch(fixed)?);
    tensor::concat_channels(fixed, moving)
}

/// Adds a leading batch axis to `[C,H,W]`; passes `[N,C,H,W]` through.
pub fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.ndim() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.clone().reshaped(shape)
        }
        4 => Ok(t.clone()),
        _ => Err(tensor::shape_err(
            "pair_input",
            format!("expected [C,H,W] or [N,C,H,W], got {:?}", t.shape()),
        )),
    }
}

fn forward_pair(net: &Network, fixed: &Tensor, moving: &Tensor) -> Result<Tensor> {
    if fixed.shape() != moving.shape() {
        return Err(tensor::shape_err(
            "forward",
            format!("fixed {:?} vs moving {:?}", fixed.shape(), moving.shape()),
        ));
    }
    let graph = Graph::new();
    let bound = net.bind(&graph, false);
    let moving = graph.constant(as_batch(moving)?);
    let x = pair_input(&graph, fixed, moving)?;
    let y = bound.forward(x)?;
    let out = y.value();
    Ok((*out).clone())
}

/// Generator output for one `[C,H,W]` pair, as `[n_outputs]`.
pub fn forward_g(net: &Network, fixed: &Tensor, moving: &Tensor) -> Result<Tensor> {
    let y = forward_pair(net, fixed, moving)?;
    let n = y.len();
    y.reshaped([n])
}

/// Generator output read as a rigid correction.
pub fn estimate_rigid(net: &Network, fixed: &Tensor, moving: &Tensor) -> Result<RigidParams2D> {
    if net.spec.n_outputs != 3 {
        return Err(TensorError::Argument {
            op: "estimate_rigid",
            detail: format!("generator has {} outputs, need 3", net.spec.n_outputs),
        });
    }
    let y = forward_g(net, fixed, moving)?;
    let d = y.data();
    Ok(RigidParams2D::from_f32([d[0], d[1], d[2]]))
}

/// Critic score in `(0, 1)` for one `[C,H,W]` pair.
pub fn forward_d(net: &Network, fixed: &Tensor, moving: &Tensor) -> Result<f32> {
    Ok(forward_pair(net, fixed, moving)?.data()[0])
}

/// Free-function form of [`Network::clip_weights`].
pub fn clip_weights(net: &mut Network, c: f32) {
    net.clip_weights(c);
}
