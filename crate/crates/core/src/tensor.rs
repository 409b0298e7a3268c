//! Dense `C × H × W` float blocks and the handful of kernels the toy
//! networks need: 3×3 same-padding convolution (im2col + sgemm), nearest
//! 2× upsampling, 2× average pooling, pointwise activations and bilinear
//! resampling of single planes.
//!
//! Everything here is single-threaded and allocation-order deterministic, so
//! repeated calls on identical inputs are bit-identical.

use crate::error::{ensure, Result};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == channels * height * width,
            InvalidInput,
            "buffer of {} values does not fit {channels}x{height}x{width}",
            data.len()
        );
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }
}

pub fn leaky_relu(x: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(pre: f32) -> f32 {
    if pre >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n) and
    // the row-major `c` (m×n); callers size the buffers accordingly.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3×3 neighbourhoods into a `(C·9) × (H·W)` matrix with zero padding.
fn im2col(input: &Tensor3) -> Vec<f32> {
    let (c, h, w) = (input.channels, input.height, input.width);
    let hw = h * w;
    let mut cols = vec![0.0f32; c * 9 * hw];
    for ch in 0..c {
        let plane = input.channel(ch);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for x in x0..x1 {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f32], grad: &mut Tensor3) {
    let (c, h, w) = (grad.channels, grad.height, grad.width);
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let plane = grad.channel_mut(ch);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    for x in x0..x1 {
                        dst[(x as isize + dx) as usize] += src[x];
                    }
                }
            }
        }
    }
}

/// 3×3 convolution with stride 1 and zero padding 1.
///
/// `weight` is laid out `[out][in][ky][kx]`.
pub fn conv3x3(input: &Tensor3, weight: &[f32], bias: &[f32]) -> Tensor3 {
    let out_ch = bias.len();
    let k = input.channels * 9;
    debug_assert_eq!(weight.len(), out_ch * k);
    let hw = input.plane_len();
    let mut out = Tensor3::zeros(out_ch, input.height, input.width);
    for (o, b) in bias.iter().enumerate() {
        out.channel_mut(o).fill(*b);
    }
    let cols = im2col(input);
    sgemm(out_ch, k, hw, weight, (k, 1), &cols, (hw, 1), 1.0, &mut out.data);
    out
}

/// Backward pass of [`conv3x3`]. Parameter gradients are accumulated into
/// `grad_weight`/`grad_bias` when given; the input gradient is returned when
/// `want_input` is set.
pub fn conv3x3_backward(
    input: &Tensor3,
    weight: &[f32],
    grad_out: &Tensor3,
    params: Option<(&mut [f32], &mut [f32])>,
    want_input: bool,
) -> Option<Tensor3> {
    let out_ch = grad_out.channels;
    let k = input.channels * 9;
    let hw = input.plane_len();
    let cols = im2col(input);
    if let Some((gw, gb)) = params {
        // gw (out×k) += grad_out (out×hw) · colsᵀ (hw×k)
        sgemm(out_ch, hw, k, &grad_out.data, (hw, 1), &cols, (1, hw), 1.0, gw);
        for (o, g) in gb.iter_mut().enumerate() {
            *g += grad_out.channel(o).iter().sum::<f32>();
        }
    }
    if !want_input {
        return None;
    }
    // grad_cols (k×hw) = weightᵀ (k×out) · grad_out (out×hw)
    let mut grad_cols = vec![0.0f32; k * hw];
    sgemm(k, out_ch, hw, weight, (1, k), &grad_out.data, (hw, 1), 0.0, &mut grad_cols);
    let mut grad_in = Tensor3::zeros(input.channels, input.height, input.width);
    col2im_add(&grad_cols, &mut grad_in);
    Some(grad_in)
}

/// `out = W·x + b` with `W` row-major `[out][in]`.
pub fn dense(x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let n_in = x.len();
    debug_assert_eq!(weight.len(), bias.len() * n_in);
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            let row = &weight[o * n_in..][..n_in];
            row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v)
        })
        .collect()
}

pub fn dense_backward(
    x: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    params: Option<(&mut [f32], &mut [f32])>,
    want_input: bool,
) -> Option<Vec<f32>> {
    let n_in = x.len();
    if let Some((gw, gb)) = params {
        for (o, g) in grad_out.iter().enumerate() {
            gb[o] += g;
            let row = &mut gw[o * n_in..][..n_in];
            for (r, v) in row.iter_mut().zip(x) {
                *r += g * v;
            }
        }
    }
    if !want_input {
        return None;
    }
    let mut grad_in = vec![0.0f32; n_in];
    for (o, g) in grad_out.iter().enumerate() {
        let row = &weight[o * n_in..][..n_in];
        for (gi, w) in grad_in.iter_mut().zip(row) {
            *gi += g * w;
        }
    }
    Some(grad_in)
}

pub fn upsample2x(input: &Tensor3) -> Tensor3 {
    let (h, w) = (input.height, input.width);
    let mut out = Tensor3::zeros(input.channels, 2 * h, 2 * w);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(grad_out: &Tensor3) -> Tensor3 {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut out = Tensor3::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
            }
        }
    }
    out
}

pub fn avgpool2(input: &Tensor3) -> Tensor3 {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor3::zeros(input.channels, h, w);
    let iw = input.width;
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * iw + 2 * x;
                dst[y * w + x] = 0.25 * (src[i] + src[i + 1] + src[i + iw] + src[i + iw + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (h, w) = (grad_out.height, grad_out.width);
    let ow = 2 * w;
    let mut out = Tensor3::zeros(grad_out.channels, 2 * h, ow);
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let g = 0.25 * src[y * w + x];
                let i = 2 * y * ow + 2 * x;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + ow] = g;
                dst[i + ow + 1] = g;
            }
        }
    }
    out
}

/// Bilinear resampling of one `h × w` plane with half-pixel centres
/// (the `align_corners = false` convention), edges clamped.
pub fn bilinear_resize(plane: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    debug_assert_eq!(plane.len(), h * w);
    if h == out_h && w == out_w {
        return plane.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let frac = (src - i0 as f64) as f32;
                (i0, i1, frac)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
