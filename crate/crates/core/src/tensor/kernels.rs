// Convolution kernels lowered to im2col + gemm, one image at a time.
//
// Three primitives cover both layer kinds:
//   forward          y = conv(x, w)
//   backward_input   x' = conv^T(y', w)   (also the transposed-conv forward)
//   backward_kernel  w' = sum_n y'[n] . cols(x[n])^T
// Batch reductions run sequentially in batch order, so results do not depend
// on scheduling.

use super::{Real, Result, Tensor, TensorError};

pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

pub fn transposed_conv2d_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> usize {
    ((input.saturating_sub(1)) * stride + kernel + output_padding).saturating_sub(2 * padding)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Real>(image: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.out_h * g.out_w;
    let k = g.kernel;
    for c in 0..g.channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, image: &mut [T]) {
    let plane = g.out_h * g.out_w;
    let k = g.kernel;
    for c in 0..g.channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn kernel_dims<T: Real>(op: &'static str, kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *kernel.shape() {
        [o, i, kh, kw] if kh == kw && kh > 0 => Ok((o, i, kh)),
        _ => Err(TensorError::InvalidArgument {
            op,
            reason: format!("kernel must be OxIxKxK, got {:?}", kernel.shape()),
        }),
    }
}

fn input_dims<T: Real>(op: &'static str, input: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    input.dims4().ok_or_else(|| TensorError::InvalidArgument {
        op,
        reason: format!("input must be NCHW, got {:?}", input.shape()),
    })
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: "stride must be positive".into(),
        });
    }
    Ok(())
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    check_stride(OP, stride)?;
    let (n, c, h, w) = input_dims(OP, input)?;
    let (o, i, k) = kernel_dims(OP, kernel)?;
    if c != i {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let out_h = conv2d_output_extent(h, k, stride, padding);
    let out_w = conv2d_output_extent(w, k, stride, padding);
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::ZeroSizeOutput {
            op: OP,
            input: input.shape().to_vec(),
            kernel: kernel.shape().to_vec(),
        });
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h,
        out_w,
    };
    let mut out = Tensor::zeros(vec![n, o, out_h, out_w]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let in_stride = c * h * w;
    let out_stride = o * out_h * out_w;
    for b in 0..n {
        im2col(&input.data()[b * in_stride..(b + 1) * in_stride], &g, &mut cols);
        T::gemm(
            o,
            g.col_rows(),
            g.col_cols(),
            kernel.data(),
            false,
            &cols,
            false,
            &mut out.data_mut()[b * out_stride..(b + 1) * out_stride],
            false,
        );
    }
    Ok(out)
}

/// Adjoint of the conv2d forward map with respect to its input, producing a
/// tensor of `input_shape`.
pub(crate) fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_backward_input";
    let (n, o, out_h, out_w) = input_dims(OP, grad_out)?;
    let (ko, ki, k) = kernel_dims(OP, kernel)?;
    let (bn, c, h, w) = match *input_shape {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(TensorError::InvalidArgument {
                op: OP,
                reason: format!("bad input shape {input_shape:?}"),
            })
        }
    };
    if ko != o || ki != c || bn != n {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            lhs: grad_out.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if conv2d_output_extent(h, k, stride, padding) != out_h
        || conv2d_output_extent(w, k, stride, padding) != out_w
    {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            lhs: grad_out.shape().to_vec(),
            rhs: input_shape.to_vec(),
        });
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h,
        out_w,
    };
    let mut out = Tensor::zeros(input_shape.to_vec());
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let in_stride = c * h * w;
    let out_stride = o * out_h * out_w;
    for b in 0..n {
        T::gemm(
            g.col_rows(),
            o,
            g.col_cols(),
            kernel.data(),
            true,
            &grad_out.data()[b * out_stride..(b + 1) * out_stride],
            false,
            &mut cols,
            false,
        );
        col2im(&cols, &g, &mut out.data_mut()[b * in_stride..(b + 1) * in_stride]);
    }
    Ok(out)
}

/// Gradient of `<conv2d(input, w), grad_out>` with respect to `w`.
pub(crate) fn conv2d_backward_kernel<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_size: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_backward_kernel";
    let (n, c, h, w) = input_dims(OP, input)?;
    let (gn, o, out_h, out_w) = input_dims(OP, grad_out)?;
    if gn != n
        || conv2d_output_extent(h, kernel_size, stride, padding) != out_h
        || conv2d_output_extent(w, kernel_size, stride, padding) != out_w
    {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            lhs: input.shape().to_vec(),
            rhs: grad_out.shape().to_vec(),
        });
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: kernel_size,
        stride,
        padding,
        out_h,
        out_w,
    };
    let mut dk = Tensor::zeros(vec![o, c, kernel_size, kernel_size]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let in_stride = c * h * w;
    let out_stride = o * out_h * out_w;
    for b in 0..n {
        im2col(&input.data()[b * in_stride..(b + 1) * in_stride], &g, &mut cols);
        T::gemm(
            o,
            g.col_cols(),
            g.col_rows(),
            &grad_out.data()[b * out_stride..(b + 1) * out_stride],
            false,
            &cols,
            true,
            dk.data_mut(),
            b > 0,
        );
    }
    Ok(dk)
}

pub(crate) fn transposed_conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "transposed_conv2d";
    check_stride(OP, stride)?;
    if output_padding >= stride {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: format!("output_padding {output_padding} must be smaller than stride {stride}"),
        });
    }
    let (n, o, h, w) = input_dims(OP, input)?;
    let (ko, ki, k) = kernel_dims(OP, kernel)?;
    if ko != o {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let out_h = transposed_conv2d_output_extent(h, k, stride, padding, output_padding);
    let out_w = transposed_conv2d_output_extent(w, k, stride, padding, output_padding);
    if out_h == 0
        || out_w == 0
        || conv2d_output_extent(out_h, k, stride, padding) != h
        || conv2d_output_extent(out_w, k, stride, padding) != w
    {
        return Err(TensorError::ZeroSizeOutput {
            op: OP,
            input: input.shape().to_vec(),
            kernel: kernel.shape().to_vec(),
        });
    }
    conv2d_backward_input(input, kernel, &[n, ki, out_h, out_w], stride, padding)
}
