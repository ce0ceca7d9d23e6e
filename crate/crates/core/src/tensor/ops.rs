//! Differentiable ops recorded on a [`Graph`].

use super::conv::{self, matmul_nn, matmul_nt, matmul_tn, ConvGeometry};
use super::{shape_err, Backward, Result, Tensor, TensorError, Var};

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

// ---------------------------------------------------------------------------
// conv2d

struct Conv2d {
    geo: ConvGeometry,
    has_bias: bool,
}

impl Backward for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let need_bias = self.has_bias && needs[2];
        let (dx, dw, db) = conv::backward(
            &self.geo,
            inputs[0].data(),
            inputs[1].data(),
            grad.data(),
            [needs[0], needs[1], need_bias],
        );
        let mut out = vec![
            dx.map(|d| Tensor::new(inputs[0].shape().to_vec(), d).expect("dx")),
            dw.map(|d| Tensor::new(inputs[1].shape().to_vec(), d).expect("dw")),
        ];
        if self.has_bias {
            out.push(db.map(|d| Tensor::new(inputs[2].shape().to_vec(), d).expect("db")));
        }
        out
    }
}

/// 2D cross-correlation of `input [N,Cin,H,W]` with `weight [Cout,Cin,k,k]`.
///
/// Output extent is `floor((H + 2p - d(k-1) - 1)/s) + 1` per spatial axis.
pub fn conv2d<'g>(
    input: Var<'g>,
    weight: Var<'g>,
    bias: Option<Var<'g>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Var<'g>> {
    let bias_shape = bias.map(|b| b.shape());
    let geo = ConvGeometry::resolve(
        &input.shape(),
        &weight.shape(),
        bias_shape.as_deref(),
        stride,
        padding,
        dilation,
    )?;
    let x = input.value();
    let w = weight.value();
    let b = bias.map(|b| b.value());
    let out = conv::forward(&geo, x.data(), w.data(), b.as_ref().map(|b| b.data()));
    let mut inputs = vec![input, weight];
    inputs.extend(bias);
    Ok(input.graph().apply(
        &inputs,
        out,
        Conv2d {
            geo,
            has_bias: bias.is_some(),
        },
    ))
}

// ---------------------------------------------------------------------------
// linear

struct Linear {
    batch: usize,
    in_features: usize,
    out_features: usize,
}

impl Backward for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, f, g) = (self.batch, self.in_features, self.out_features);
        let dy = grad.data();
        let dx = needs[0].then(|| {
            let mut d = vec![0.0; n * f];
            matmul_nn(dy, n, g, inputs[1].data(), f, &mut d);
            Tensor::new([n, f], d).expect("dx")
        });
        let dw = needs[1].then(|| {
            let mut d = vec![0.0; g * f];
            matmul_tn(dy, g, n, inputs[0].data(), f, &mut d);
            Tensor::new([g, f], d).expect("dw")
        });
        let db = needs[2].then(|| {
            let mut d = vec![0.0; g];
            for row in dy.chunks(g) {
                d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            Tensor::new([g], d).expect("db")
        });
        vec![dx, dw, db]
    }
}

/// `input [N,F] * weight[G,F]^T + bias[G]`.
pub fn linear<'g>(input: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
    const OP: &str = "linear";
    let (xs, ws, bs) = (input.shape(), weight.shape(), bias.shape());
    if xs.len() != 2 || ws.len() != 2 {
        return Err(shape_err(OP, format!("input {xs:?}, weight {ws:?}")));
    }
    if xs[1] != ws[1] {
        return Err(shape_err(
            OP,
            format!("input has {} features, weight expects {}", xs[1], ws[1]),
        ));
    }
    if bs != [ws[0]] {
        return Err(shape_err(OP, format!("bias {bs:?} for weight {ws:?}")));
    }
    let (n, f, g) = (xs[0], xs[1], ws[0]);
    let x = input.value();
    let w = weight.value();
    let b = bias.value();
    let mut out = vec![0.0; n * g];
    matmul_nt(x.data(), n, f, w.data(), g, &mut out);
    for row in out.chunks_mut(g) {
        row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
    }
    let out = Tensor::new([n, g], out)?;
    Ok(input.graph().apply(
        &[input, weight, bias],
        out,
        Linear {
            batch: n,
            in_features: f,
            out_features: g,
        },
    ))
}

// ---------------------------------------------------------------------------
// elementwise

struct Relu;

impl Backward for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        // Subgradient at exactly zero is zero.
        vec![Some(zip_map(inputs[0], grad, |x, g| {
            if x > 0.0 {
                g
            } else {
                0.0
            }
        }))]
    }
}

pub fn relu(x: Var<'_>) -> Var<'_> {
    let out = x.value().map(|v| v.max(0.0));
    x.graph().apply(&[x], out, Relu)
}

struct Sigmoid;

impl Backward for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(zip_map(output, grad, |s, g| g * s * (1.0 - s)))]
    }
}

pub(crate) fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: Var<'_>) -> Var<'_> {
    let out = x.value().map(sigmoid_scalar);
    x.graph().apply(&[x], out, Sigmoid)
}

struct Add;

impl Backward for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ]
    }
}

pub fn add<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    same_shape("add", &a, &b)?;
    let out = zip_map(&a.value(), &b.value(), |x, y| x + y);
    Ok(a.graph().apply(&[a, b], out, Add))
}

struct Sub;

impl Backward for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.map(|g| -g)),
        ]
    }
}

pub fn sub<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    same_shape("sub", &a, &b)?;
    let out = zip_map(&a.value(), &b.value(), |x, y| x - y);
    Ok(a.graph().apply(&[a, b], out, Sub))
}

struct Mul;

impl Backward for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| zip_map(grad, inputs[1], |g, y| g * y)),
            needs[1].then(|| zip_map(grad, inputs[0], |g, x| g * x)),
        ]
    }
}

pub fn mul<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    same_shape("mul", &a, &b)?;
    let out = zip_map(&a.value(), &b.value(), |x, y| x * y);
    Ok(a.graph().apply(&[a, b], out, Mul))
}

struct Scale(f32);

impl Backward for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let c = self.0;
        vec![Some(grad.map(|g| g * c))]
    }
}

pub fn scale(x: Var<'_>, factor: f32) -> Var<'_> {
    let out = x.value().map(|v| v * factor);
    x.graph().apply(&[x], out, Scale(factor))
}

struct AddScalar;

impl Backward for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone())]
    }
}

pub fn add_scalar(x: Var<'_>, c: f32) -> Var<'_> {
    let out = x.value().map(|v| v + c);
    x.graph().apply(&[x], out, AddScalar)
}

// ---------------------------------------------------------------------------
// reductions

struct Mean {
    count: usize,
}

impl Backward for Mean {
    fn name(&self) -> &'static str {
        "reduce_mean"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        let g = grad.item() / self.count as f32;
        vec![Some(Tensor::full(inputs[0].shape().to_vec(), g))]
    }
}

/// Mean over all elements, as a scalar.
pub fn reduce_mean(x: Var<'_>) -> Result<Var<'_>> {
    let v = x.value();
    if v.is_empty() {
        return Err(TensorError::Empty { op: "reduce_mean" });
    }
    let sum: f64 = v.data().iter().map(|&x| x as f64).sum();
    let out = Tensor::scalar((sum / v.len() as f64) as f32);
    Ok(x.graph().apply(&[x], out, Mean { count: v.len() }))
}

struct SquaredL2;

impl Backward for SquaredL2 {
    fn name(&self) -> &'static str {
        "squared_l2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let diff = zip_map(inputs[0], inputs[1], |a, b| 2.0 * g * (a - b));
        vec![
            needs[0].then(|| diff.clone()),
            needs[1].then(|| diff.map(|d| -d)),
        ]
    }
}

/// Sum of squared elementwise differences, as a scalar.
pub fn squared_l2<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    same_shape("squared_l2", &a, &b)?;
    let (va, vb) = (a.value(), b.value());
    if va.is_empty() {
        return Err(TensorError::Empty { op: "squared_l2" });
    }
    let sum: f64 = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok(a.graph()
        .apply(&[a, b], Tensor::scalar(sum as f32), SquaredL2))
}

// ---------------------------------------------------------------------------
// shape ops

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(
            grad.clone()
                .reshaped(inputs[0].shape().to_vec())
                .expect("reshape grad"),
        )]
    }
}

pub fn reshape<'g>(x: Var<'g>, shape: &[usize]) -> Result<Var<'g>> {
    let out = (*x.value()).clone().reshaped(shape.to_vec())?;
    Ok(x.graph().apply(&[x], out, Reshape))
}

struct ConcatChannels {
    batch: usize,
    a_block: usize,
    b_block: usize,
}

impl Backward for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (ab, bb) = (self.a_block, self.b_block);
        let g = grad.data();
        let split = |offset: usize, len: usize, shape: &[usize]| {
            let mut d = Vec::with_capacity(self.batch * len);
            for n in 0..self.batch {
                let start = n * (ab + bb) + offset;
                d.extend_from_slice(&g[start..start + len]);
            }
            Tensor::new(shape.to_vec(), d).expect("concat grad")
        };
        vec![
            needs[0].then(|| split(0, ab, inputs[0].shape())),
            needs[1].then(|| split(ab, bb, inputs[1].shape())),
        ]
    }
}

/// Concatenates `[N,Ca,H,W]` and `[N,Cb,H,W]` into `[N,Ca+Cb,H,W]`.
pub fn concat_channels<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(shape_err("concat_channels", format!("{sa:?} vs {sb:?}")));
    }
    let plane = sa[2] * sa[3];
    let (a_block, b_block) = (sa[1] * plane, sb[1] * plane);
    let (va, vb) = (a.value(), b.value());
    let mut data = Vec::with_capacity(va.len() + vb.len());
    for n in 0..sa[0] {
        data.extend_from_slice(&va.data()[n * a_block..(n + 1) * a_block]);
        data.extend_from_slice(&vb.data()[n * b_block..(n + 1) * b_block]);
    }
    let out = Tensor::new([sa[0], sa[1] + sb[1], sa[2], sa[3]], data)?;
    Ok(a.graph().apply(
        &[a, b],
        out,
        ConcatChannels {
            batch: sa[0],
            a_block,
            b_block,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_full_support_sum_is_nine() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones([1, 1, 4, 4]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros([1]));
        let y = conv2d(x, w, Some(b), 1, 1, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data()[5], 9.0);
    }

    #[test]
    fn dilated_conv_keeps_shape_with_padding_two() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones([1, 1, 4, 4]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros([1]));
        let y = conv2d(x, w, Some(b), 1, 2, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
    }

    #[test]
    fn pointwise_identity_kernel_reproduces_input() {
        let g = Graph::new();
        let input = Tensor::from_fn([2, 1, 5, 3], |i| (i as f32 * 0.37).sin());
        let x = g.constant(input.clone());
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let y = conv2d(x, w, None, 1, 0, 1).unwrap().value();
        assert_eq!(*y, input);
    }

    #[test]
    fn conv_shape_errors_are_descriptive() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones([1, 2, 4, 4]));
        let w = g.constant(Tensor::ones([1, 3, 3, 3]));
        assert!(conv2d(x, w, None, 1, 1, 1).is_err());
        let w = g.constant(Tensor::ones([1, 2, 3, 3]));
        let b = g.constant(Tensor::ones([2]));
        assert!(conv2d(x, w, Some(b), 1, 1, 1).is_err());
        assert!(conv2d(x, w, None, 0, 1, 1).is_err());
    }

    #[test]
    fn linear_examples() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(linear(x, w, b).unwrap().value().data(), &[1.0, 2.0]);

        let x = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = g.constant(t(&[1, 2], &[2.0, 3.0]));
        let b = g.constant(t(&[1], &[1.0]));
        let y = linear(x, w, b).unwrap().value();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[6.0]);

        let bad = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        assert!(linear(bad, w, b).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(relu(x).value().data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        assert_eq!(sigmoid(z).value().item(), 0.5);
        let xs = Tensor::from_fn([64], |i| (i as f32 - 32.0) * 0.7);
        let pos = sigmoid(g.constant(xs.clone())).value();
        let neg = sigmoid(g.constant(xs.map(|v| -v))).value();
        for (p, n) in pos.data().iter().zip(neg.data()) {
            assert!((p + n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn add_examples_and_gradient() {
        let g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let zeros = g.constant(Tensor::zeros([2]));
        assert_eq!(add(a, zeros).unwrap().value().data(), &[1.0, 2.0]);
        let s = add(a, b).unwrap();
        assert_eq!(s.value().data(), &[4.0, 6.0]);
        let total = scale(reduce_mean(s).unwrap(), 2.0);
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        let c = g.constant(Tensor::zeros([3]));
        assert!(add(a, c).is_err());
    }

    #[test]
    fn reductions() {
        let g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(reduce_mean(x).unwrap().value().item(), 2.0);
        assert_eq!(squared_l2(x, x).unwrap().value().item(), 0.0);
        let a = g.constant(t(&[3], &[1.0, 0.0, 0.0]));
        let z = g.constant(Tensor::zeros([3]));
        assert_eq!(squared_l2(a, z).unwrap().value().item(), 1.0);
        let empty = g.constant(Tensor::zeros([0]));
        assert!(matches!(reduce_mean(empty), Err(TensorError::Empty { .. })));
        assert!(squared_l2(empty, empty).is_err());
    }

    #[test]
    fn backward_scalar_examples() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);

        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = relu(scale(x, -1.0));
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = relu(x);
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros([2]));
        let y = relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let unused = g.param(Tensor::zeros([2, 3]));
        let y = mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        let gu = grads.get(unused).unwrap();
        assert_eq!(gu.shape(), &[2, 3]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1.0, -2.0]));
        let y = add(x, x).unwrap();
        let y = add(y, x).unwrap();
        let root = scale(reduce_mean(y).unwrap(), 2.0);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let g = Graph::new();
        let a = g.param(Tensor::from_fn([2, 1, 2, 2], |i| i as f32));
        let b = g.param(Tensor::from_fn([2, 2, 2, 2], |i| -(i as f32)));
        let c = concat_channels(a, b).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2, 2]);
        let cv = c.value();
        assert_eq!(&cv.data()[0..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&cv.data()[4..8], &[0.0, -1.0, -2.0, -3.0]);
        assert_eq!(&cv.data()[12..16], &[4.0, 5.0, 6.0, 7.0]);
        let weights = g.constant(Tensor::from_fn([2, 3, 2, 2], |i| i as f32));
        let root = reduce_mean(mul(c, weights).unwrap()).unwrap();
        let grads = g.backward(root).unwrap();
        let ga = grads.get(a).unwrap();
        assert_eq!(ga.data()[4] * 24.0, 12.0);
        let gb = grads.get(b).unwrap();
        assert_eq!(gb.data()[0] * 24.0, 4.0);
    }
}
