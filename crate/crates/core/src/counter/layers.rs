//! Dense layers with explicit backward passes. Activations are channel-major
//! `[C, H, W]` buffers; token matrices are row-major `[M, D]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }
}

/// Convolution weights `[c_out, c_in, k, k]` and bias `[c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn init(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        Self {
            weight: Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

pub fn conv_out_dims(conv: &Conv, input: Dims, stride: usize, pad: usize) -> Dims {
    let k = conv.kernel();
    Dims::new(
        conv.c_out(),
        (input.h + 2 * pad - k) / stride + 1,
        (input.w + 2 * pad - k) / stride + 1,
    )
}

/// Output positions `o` with `0 <= o*stride + offset - pad < len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // o*stride + offset - pad <= in_len - 1
    let hi_excl = if in_len + pad > offset {
        ((in_len - 1 + pad - offset) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

pub fn conv2d(x: &[f64], input: Dims, conv: &Conv, stride: usize, pad: usize) -> (Vec<f64>, Dims) {
    let out = conv_out_dims(conv, input, stride, pad);
    let k = conv.kernel();
    let mut y = vec![0.0; out.len()];
    let plane = out.h * out.w;
    for co in 0..out.c {
        let b = conv.bias.data[co];
        y[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = b);
    }
    for co in 0..out.c {
        let y_plane = &mut y[co * plane..(co + 1) * plane];
        for ci in 0..input.c {
            let x_plane = &x[ci * input.h * input.w..(ci + 1) * input.h * input.w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(out.h, input.h, stride, ky, pad);
                for kx in 0..k {
                    let wv = conv.weight.data[((co * input.c + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(out.w, input.w, stride, kx, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let x_row = &x_plane[iy * input.w..(iy + 1) * input.w];
                        let y_row = &mut y_plane[oy * out.w..(oy + 1) * out.w];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            for (yv, xv) in y_row[ox0..ox1].iter_mut().zip(&x_row[ix0..ix0 + (ox1 - ox0)]) {
                                *yv += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                y_row[ox] += wv * x_row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    (y, out)
}

/// Accumulates parameter gradients into `grad`; returns the input gradient
/// when `need_dx`.
pub fn conv2d_backward(
    x: &[f64],
    input: Dims,
    conv: &Conv,
    stride: usize,
    pad: usize,
    dy: &[f64],
    grad: &mut Conv,
    need_dx: bool,
) -> Option<Vec<f64>> {
    let out = conv_out_dims(conv, input, stride, pad);
    let k = conv.kernel();
    let plane = out.h * out.w;
    let mut dx = need_dx.then(|| vec![0.0; input.len()]);
    for co in 0..out.c {
        let dy_plane = &dy[co * plane..(co + 1) * plane];
        grad.bias.data[co] += dy_plane.iter().sum::<f64>();
        for ci in 0..input.c {
            let in_plane = input.h * input.w;
            let x_plane = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(out.h, input.h, stride, ky, pad);
                for kx in 0..k {
                    let widx = ((co * input.c + ci) * k + ky) * k + kx;
                    let wv = conv.weight.data[widx];
                    let (ox0, ox1) = valid_range(out.w, input.w, stride, kx, pad);
                    let mut gw = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let dy_row = &dy_plane[oy * out.w..(oy + 1) * out.w];
                        let x_row = &x_plane[iy * input.w..(iy + 1) * input.w];
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            let n = ox1 - ox0;
                            for (d, xv) in dy_row[ox0..ox1].iter().zip(&x_row[ix0..ix0 + n]) {
                                gw += d * xv;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dx_row = &mut dx[ci * in_plane + iy * input.w..ci * in_plane + (iy + 1) * input.w];
                                for (dxv, d) in dx_row[ix0..ix0 + n].iter_mut().zip(&dy_row[ox0..ox1]) {
                                    *dxv += wv * d;
                                }
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                gw += dy_row[ox] * x_row[ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx[ci * in_plane + iy * input.w + ix] += wv * dy_row[ox];
                                }
                            }
                        }
                    }
                    grad.weight.data[widx] += gw;
                }
            }
        }
    }
    dx
}

/// Two-tap interpolation weights for a 2x bilinear upsample (half-pixel
/// centers, edge-clamped).
fn upsample_taps(in_len: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * in_len)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                let prev = i.saturating_sub(1);
                [(prev, 0.25), (i, 0.75)]
            } else {
                let next = (i + 1).min(in_len - 1);
                [(i, 0.75), (next, 0.25)]
            }
        })
        .collect()
}

pub fn upsample2x(x: &[f64], input: Dims) -> (Vec<f64>, Dims) {
    let out = Dims::new(input.c, 2 * input.h, 2 * input.w);
    let (ty, tx) = (upsample_taps(input.h), upsample_taps(input.w));
    let mut y = vec![0.0; out.len()];
    for c in 0..input.c {
        let xp = &x[c * input.h * input.w..];
        let yp = &mut y[c * out.h * out.w..(c + 1) * out.h * out.w];
        for (oy, tyy) in ty.iter().enumerate() {
            for (ox, txx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, wy) in tyy {
                    for &(ix, wx) in txx {
                        acc += wy * wx * xp[iy * input.w + ix];
                    }
                }
                yp[oy * out.w + ox] = acc;
            }
        }
    }
    (y, out)
}

pub fn upsample2x_backward(dy: &[f64], input: Dims) -> Vec<f64> {
    let out = Dims::new(input.c, 2 * input.h, 2 * input.w);
    let (ty, tx) = (upsample_taps(input.h), upsample_taps(input.w));
    let mut dx = vec![0.0; input.len()];
    for c in 0..input.c {
        let dxp = &mut dx[c * input.h * input.w..(c + 1) * input.h * input.w];
        let dyp = &dy[c * out.h * out.w..];
        for (oy, tyy) in ty.iter().enumerate() {
            for (ox, txx) in tx.iter().enumerate() {
                let g = dyp[oy * out.w + ox];
                for &(iy, wy) in tyy {
                    for &(ix, wx) in txx {
                        dxp[iy * input.w + ix] += wy * wx * g;
                    }
                }
            }
        }
    }
    dx
}

pub fn silu(x: f64) -> f64 {
    x * crate::losses::sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = crate::losses::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softplus(x: f64) -> f64 {
    crate::losses::softplus(x)
}

/// `a [m, k] · b [n, k]^T -> [m, n]`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = ar.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a [m, k] · b [k, n] -> [m, n]`
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [k, m]^T · b [k, n] -> [m, n]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        for (i, av) in ar.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct definition of a padded strided convolution.
    fn conv_naive(x: &[f64], d: Dims, conv: &Conv, stride: usize, pad: usize) -> Vec<f64> {
        let out = conv_out_dims(conv, d, stride, pad);
        let k = conv.kernel();
        let mut y = vec![0.0; out.len()];
        for co in 0..out.c {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut acc = conv.bias.data[co];
                    for ci in 0..d.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                acc += conv.weight.data[((co * d.c + ci) * k + ky) * k + kx]
                                    * x[(ci * d.h + iy as usize) * d.w + ix as usize];
                            }
                        }
                    }
                    y[(co * out.h + oy) * out.w + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (k, stride, pad, h, w) in [(3, 1, 1, 7, 9), (3, 2, 1, 8, 8), (4, 4, 0, 8, 12), (1, 1, 0, 5, 5)] {
            let d = Dims::new(2, h, w);
            let conv = Conv::init(3, 2, k, &mut rng);
            let x = Tensor::randn(&[d.len()], 1.0, &mut rng).data;
            let (y, _) = conv2d(&x, d, &conv, stride, pad);
            let expect = conv_naive(&x, d, &conv, stride, pad);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x) - b> == <dx, x> for the linear part
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (4, 4, 0)] {
            let d = Dims::new(2, 8, 8);
            let mut conv = Conv::init(3, 2, k, &mut rng);
            conv.bias = conv.bias.zeros_like();
            let x = Tensor::randn(&[d.len()], 1.0, &mut rng).data;
            let (y, out) = conv2d(&x, d, &conv, stride, pad);
            let dy = Tensor::randn(&[out.len()], 1.0, &mut rng).data;
            let mut g = conv.zeros_like();
            let dx = conv2d_backward(&x, d, &conv, stride, pad, &dy, &mut g, true).unwrap();
            let lhs: f64 = dy.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
            let rhs_w: f64 = g.weight.data.iter().zip(&conv.weight.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn upsample_preserves_constants_and_is_adjoint() {
        let d = Dims::new(2, 3, 4);
        let (y, out) = upsample2x(&vec![2.5; d.len()], d);
        assert_eq!(out, Dims::new(2, 6, 8));
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[d.len()], 1.0, &mut rng).data;
        let dy = Tensor::randn(&[out.len()], 1.0, &mut rng).data;
        let (y, _) = upsample2x(&x, d);
        let dx = upsample2x_backward(&dy, d);
        let lhs: f64 = dy.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5]; // 2x3
        let nt = matmul_nt(&a, &b, 2, 3, 2);
        assert_eq!(nt, vec![-2.0, 5.5, -2.0, 16.0]);
        let bt = [1.0, 2.0, 0.0, 1.0, -1.0, 0.5]; // 3x2 = b^T
        assert_eq!(matmul_nn(&a, &bt, 2, 3, 2), nt);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 = a^T
        assert_eq!(matmul_tn(&at, &bt, 3, 2, 2), nt);
    }
}
