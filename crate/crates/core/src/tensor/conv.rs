//! im2col convolution kernels on top of a blocked sgemm.

use super::{shape_err, Result, Tensor, TensorError};

/// Row-major matrix operand: `(data, rows, cols, transposed)`. When
/// `transposed` is set the buffer holds the `cols x rows` matrix.
struct Mat<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Mat<'a> {
    fn plain(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    fn t(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` for row-major `c` of shape `a.rows x b.cols`.
fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f32], beta: f32) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), a.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above pin every operand length to the dimensions
    // handed to sgemm, so all strided accesses stay inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

pub(crate) fn matmul_nt(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    // a [m,k] * b[n,k]^T
    gemm(Mat::plain(a, m, k), Mat::t(b, k, n), out, 0.0);
}

pub(crate) fn matmul_nn(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    gemm(Mat::plain(a, m, k), Mat::plain(b, k, n), out, 0.0);
}

pub(crate) fn matmul_tn(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    // a[k,m]^T * b[k,n]
    gemm(Mat::t(a, m, k), Mat::plain(b, k, n), out, 0.0);
}

/// Output extent along one axis.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let extent = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || dilation == 0 || padded < extent {
        return None;
    }
    Some((padded - extent) / stride + 1)
}

/// Fully resolved shape bookkeeping for one conv2d call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        if input.len() != 4 {
            return Err(shape_err(
                OP,
                format!("input must be [N,C,H,W], got {input:?}"),
            ));
        }
        if weight.len() != 4 || weight[2] != weight[3] {
            return Err(shape_err(
                OP,
                format!("weight must be [Cout,Cin,k,k], got {weight:?}"),
            ));
        }
        if weight[1] != input[1] {
            return Err(shape_err(
                OP,
                format!(
                    "input has {} channels but weight expects {}",
                    input[1], weight[1]
                ),
            ));
        }
        if let Some(b) = bias {
            if b != [weight[0]] {
                return Err(shape_err(
                    OP,
                    format!("bias must be [{}], got {b:?}", weight[0]),
                ));
            }
        }
        if weight[2] == 0 || stride == 0 || dilation == 0 {
            return Err(TensorError::Argument {
                op: OP,
                detail: format!("kernel {}, stride {stride}, dilation {dilation}", weight[2]),
            });
        }
        let k = weight[2];
        let too_small = || {
            shape_err(
                OP,
                format!(
                    "input {:?} smaller than dilated kernel extent {}",
                    input,
                    dilation * (k - 1) + 1
                ),
            )
        };
        let out_height =
            conv_output_size(input[2], k, stride, padding, dilation).ok_or_else(too_small)?;
        let out_width =
            conv_output_size(input[3], k, stride, padding, dilation).ok_or_else(too_small)?;
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel: k,
            stride,
            padding,
            dilation,
            out_height,
            out_width,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_channels,
            self.out_height,
            self.out_width,
        ]
    }

    /// Source coordinate for output index `o` and kernel tap `t`, or `None`
    /// in the padding.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, input: &[f32], col: &mut [f32]) {
        let k = self.kernel;
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let src = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_height {
                        let line = &mut dst[oy * self.out_width..(oy + 1) * self.out_width];
                        match self.source(oy, ki, self.height) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let src_row = &src[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kj, self.width) {
                                        Some(ix) => src_row[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], out: &mut [f32]) {
        let k = self.kernel;
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let dst = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_height {
                        let Some(iy) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        let line = &src[oy * self.out_width..(oy + 1) * self.out_width];
                        let dst_row = &mut dst[iy * self.width..(iy + 1) * self.width];
                        for (ox, &g) in line.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kj, self.width) {
                                dst_row[ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `bias` may be omitted.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let geo = ConvGeometry::resolve(
        input.shape(),
        weight.shape(),
        bias.map(|b| b.shape()),
        stride,
        padding,
        dilation,
    )?;
    Ok(forward(
        &geo,
        input.data(),
        weight.data(),
        bias.map(|b| b.data()),
    ))
}

pub(crate) fn forward(
    geo: &ConvGeometry,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> Tensor {
    let plane = geo.out_plane();
    let mut out = vec![0.0f32; geo.batch * geo.out_sample()];
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; geo.patch_len() * plane]
    };
    for n in 0..geo.batch {
        let x = &input[n * geo.in_sample()..(n + 1) * geo.in_sample()];
        let y = &mut out[n * geo.out_sample()..(n + 1) * geo.out_sample()];
        let cols: &[f32] = if geo.is_pointwise() {
            x
        } else {
            geo.im2col(x, &mut col);
            &col
        };
        matmul_nn(weight, geo.out_channels, geo.patch_len(), cols, plane, y);
        if let Some(b) = bias {
            for (chan, &bv) in y.chunks_mut(plane).zip(b) {
                chan.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(geo.output_shape(), out).expect("conv output shape")
}

/// Gradients `(d_input, d_weight, d_bias)`; each is computed only when asked.
pub(crate) fn backward(
    geo: &ConvGeometry,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    need: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let plane = geo.out_plane();
    let patch = geo.patch_len();
    let mut d_input = need[0].then(|| vec![0.0f32; geo.batch * geo.in_sample()]);
    let mut d_weight = need[1].then(|| vec![0.0f32; geo.out_channels * patch]);
    let d_bias = need[2].then(|| {
        let mut db = vec![0.0f32; geo.out_channels];
        for n in 0..geo.batch {
            let dy = &grad_out[n * geo.out_sample()..(n + 1) * geo.out_sample()];
            for (acc, chan) in db.iter_mut().zip(dy.chunks(plane)) {
                *acc += chan.iter().sum::<f32>();
            }
        }
        db
    });

    let pointwise = geo.is_pointwise();
    let mut col = vec![0.0f32; if pointwise { 0 } else { patch * plane }];
    let mut dcol = vec![
        0.0f32;
        if need[0] && !pointwise {
            patch * plane
        } else {
            0
        }
    ];
    for n in 0..geo.batch {
        let dy = &grad_out[n * geo.out_sample()..(n + 1) * geo.out_sample()];
        if let Some(dw) = d_weight.as_mut() {
            let x = &input[n * geo.in_sample()..(n + 1) * geo.in_sample()];
            let cols: &[f32] = if pointwise {
                x
            } else {
                geo.im2col(x, &mut col);
                &col
            };
            // dW += dY[Cout, P] * col[patch, P]^T
            gemm(
                Mat::plain(dy, geo.out_channels, plane),
                Mat::t(cols, plane, patch),
                dw,
                1.0,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            let dx = &mut dx[n * geo.in_sample()..(n + 1) * geo.in_sample()];
            if pointwise {
                matmul_tn(weight, patch, geo.out_channels, dy, plane, dx);
            } else {
                matmul_tn(weight, patch, geo.out_channels, dy, plane, &mut dcol);
                geo.col2im(&dcol, dx);
            }
        }
    }
    (d_input, d_weight, d_bias)
}
