//! Dense 4-D tensors and the handful of kernels the toolkit needs: 2-D
//! cross-correlation, 2x2 max pooling, ReLU, elementwise addition, and the
//! analytic backward pass of each.
//!
//! Conventions, fixed once for the whole crate:
//! - layout (n, c, h, w), row-major, w fastest;
//! - storage is f32, every reduction accumulates in f64 in a fixed order;
//! - convolution is cross-correlation (no kernel flip), zero padding only;
//! - max pooling breaks ties toward the first element in row-major window
//!   order so the gradient scatter is deterministic.

use crate::error::{Error, Result};

/// Dense (n, c, h, w) array of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: [usize; 4]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "tensor data length {} does not match dims {:?} (expect {})",
                data.len(),
                dims,
                expect
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        self.data[((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x] = v;
    }

    /// Borrow one (n, c) spatial plane as a contiguous h*w slice.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate tensors along the batch axis; all must share (c, h, w).
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::param("cannot stack an empty tensor list"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        for t in parts {
            if t.c() != c || t.h() != h || t.w() != w {
                return Err(Error::shape(format!(
                    "stack expects uniform (c,h,w), got {:?} vs {:?}",
                    t.dims, first.dims
                )));
            }
            n += t.n();
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: [n, c, h, w],
            data,
        })
    }
}

/// Convolution weights, bias and geometry.
///
/// Weights are laid out (c_out, c_in, kh, kw); padding is zero-fill.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Vec<f32>, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::param("conv stride must be positive"));
        }
        if bias.len() != weights.n() {
            return Err(Error::shape(format!(
                "bias length {} does not match output channels {}",
                bias.len(),
                weights.n()
            )));
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weights.n()
    }

    pub fn c_in(&self) -> usize {
        self.weights.c()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let [n, c_in, h, w] = input.dims();
    let [c_out, k_cin, kh, kw] = p.weights.dims();
    if c_in != k_cin {
        return Err(Error::shape(format!(
            "conv input has {c_in} channels but kernel expects {k_cin}"
        )));
    }
    let oh = conv_output_extent(h, kh, p.stride, p.padding)?;
    let ow = conv_output_extent(w, kw, p.stride, p.padding)?;

    let mut out = vec![0.0f32; n * c_out * oh * ow];
    let mut acc = vec![0.0f64; oh * ow];
    let pad = p.padding as isize;

    for b in 0..n {
        for co in 0..c_out {
            let bias = f64::from(p.bias[co]);
            acc.iter_mut().for_each(|a| *a = bias);
            for ci in 0..c_in {
                let in_plane = input.plane(b, ci);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = f64::from(p.weights.at(co, ci, ky, kx));
                        accumulate_tap(
                            &mut acc,
                            in_plane,
                            wgt,
                            (h, w),
                            (oh, ow),
                            (ky as isize - pad, kx as isize - pad),
                            p.stride,
                        );
                    }
                }
            }
            let dst = &mut out[(b * c_out + co) * oh * ow..][..oh * ow];
            for (d, a) in dst.iter_mut().zip(acc.iter()) {
                *d = *a as f32;
            }
        }
    }

    Tensor::from_vec([n, c_out, oh, ow], out)
}

/// out[oy][ox] += wgt * in[oy*stride+dy][ox*stride+dx] over the valid range.
#[inline]
fn accumulate_tap(
    acc: &mut [f64],
    in_plane: &[f32],
    wgt: f64,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    (dy, dx): (isize, isize),
    stride: usize,
) {
    for oy in 0..oh {
        let iy = oy as isize * stride as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let in_row = &in_plane[iy as usize * w..][..w];
        let acc_row = &mut acc[oy * ow..][..ow];
        if stride == 1 {
            let ox_lo = (-dx).max(0) as usize;
            let ox_hi = ow.min((w as isize - dx).max(0) as usize);
            if ox_lo >= ox_hi {
                continue;
            }
            let src = &in_row[(ox_lo as isize + dx) as usize..][..ox_hi - ox_lo];
            for (a, &v) in acc_row[ox_lo..ox_hi].iter_mut().zip(src) {
                *a += wgt * f64::from(v);
            }
        } else {
            for (ox, a) in acc_row.iter_mut().enumerate() {
                let ix = ox as isize * stride as isize + dx;
                if ix >= 0 && ix < w as isize {
                    *a += wgt * f64::from(in_row[ix as usize]);
                }
            }
        }
    }
}

/// Gradients of `sum(grad_out * conv2d(input, p))` with respect to the input,
/// the kernel weights, and the bias.
pub fn conv2d_grad(
    input: &Tensor,
    p: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let [n, c_in, h, w] = input.dims();
    let [c_out, k_cin, kh, kw] = p.weights.dims();
    if c_in != k_cin {
        return Err(Error::shape(format!(
            "conv input has {c_in} channels but kernel expects {k_cin}"
        )));
    }
    let oh = conv_output_extent(h, kh, p.stride, p.padding)?;
    let ow = conv_output_extent(w, kw, p.stride, p.padding)?;
    if grad_out.dims() != [n, c_out, oh, ow] {
        return Err(Error::shape(format!(
            "grad_out dims {:?} do not match conv output ({n}, {c_out}, {oh}, {ow})",
            grad_out.dims()
        )));
    }

    let mut g_input = vec![0.0f64; n * c_in * h * w];
    let mut g_weights = vec![0.0f64; c_out * c_in * kh * kw];
    let mut g_bias = vec![0.0f64; c_out];
    let pad = p.padding as isize;

    for b in 0..n {
        for co in 0..c_out {
            let g_plane = grad_out.plane(b, co);
            for &g in g_plane {
                g_bias[co] += f64::from(g);
            }
            for ci in 0..c_in {
                let in_plane = input.plane(b, ci);
                let gi_plane = &mut g_input[(b * c_in + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dy = ky as isize - pad;
                        let dx = kx as isize - pad;
                        let wgt = f64::from(p.weights.at(co, ci, ky, kx));
                        let gw = &mut g_weights[((co * c_in + ci) * kh + ky) * kw + kx];
                        scatter_tap(
                            gi_plane, gw, in_plane, g_plane, wgt, (h, w), (oh, ow), (dy, dx),
                            p.stride,
                        );
                    }
                }
            }
        }
    }

    let grad_input = Tensor::from_vec(
        [n, c_in, h, w],
        g_input.iter().map(|v| *v as f32).collect(),
    )?;
    let grad_weights = Tensor::from_vec(
        [c_out, c_in, kh, kw],
        g_weights.iter().map(|v| *v as f32).collect(),
    )?;
    let grad_bias = g_bias.iter().map(|v| *v as f32).collect();
    Ok((grad_input, grad_weights, grad_bias))
}

/// For one kernel tap: accumulate the weight gradient and scatter the input
/// gradient for every output position that reads through it.
#[inline]
#[allow(clippy::too_many_arguments)]
fn scatter_tap(
    gi_plane: &mut [f64],
    gw: &mut f64,
    in_plane: &[f32],
    g_plane: &[f32],
    wgt: f64,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    (dy, dx): (isize, isize),
    stride: usize,
) {
    for oy in 0..oh {
        let iy = oy as isize * stride as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let in_row = &in_plane[iy as usize * w..][..w];
        let gi_row = &mut gi_plane[iy as usize * w..][..w];
        let g_row = &g_plane[oy * ow..][..ow];
        if stride == 1 {
            let ox_lo = (-dx).max(0) as usize;
            let ox_hi = ow.min((w as isize - dx).max(0) as usize);
            if ox_lo >= ox_hi {
                continue;
            }
            let shift = dx;
            let src = &in_row[(ox_lo as isize + shift) as usize..][..ox_hi - ox_lo];
            let dst = &mut gi_row[(ox_lo as isize + shift) as usize..][..ox_hi - ox_lo];
            for ((&g, &v), d) in g_row[ox_lo..ox_hi].iter().zip(src).zip(dst) {
                *gw += f64::from(g) * f64::from(v);
                *d += wgt * f64::from(g);
            }
        } else {
            for (ox, &g) in g_row.iter().enumerate() {
                let ix = ox as isize * stride as isize + dx;
                if ix >= 0 && ix < w as isize {
                    *gw += f64::from(g) * f64::from(in_row[ix as usize]);
                    gi_row[ix as usize] += wgt * f64::from(g);
                }
            }
        }
    }
}

/// Winning positions recorded by [`maxpool2`], consumed by [`maxpool2_grad`].
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_dims: [usize; 4],
    winners: Vec<usize>,
}

impl PoolIndices {
    pub fn input_dims(&self) -> [usize; 4] {
        self.input_dims
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }
}

/// 2x2 max pooling with stride 2. Spatial extents must be even; ties go to
/// the first element in row-major window order.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut winners = vec![0usize; n * c * oh * ow];

    for b in 0..n {
        for ci in 0..c {
            let plane = input.plane(b, ci);
            let base = (b * c + ci) * h * w;
            let out_plane = &mut out[(b * c + ci) * oh * ow..][..oh * ow];
            let win_plane = &mut winners[(b * c + ci) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = 2 * oy;
                    let x0 = 2 * ox;
                    let mut best = plane[y0 * w + x0];
                    let mut best_at = y0 * w + x0;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (y0 + dy) * w + (x0 + dx);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_at = idx;
                        }
                    }
                    out_plane[oy * ow + ox] = best;
                    win_plane[oy * ow + ox] = base + best_at;
                }
            }
        }
    }

    let output = Tensor::from_vec([n, c, oh, ow], out)?;
    Ok((
        output,
        PoolIndices {
            input_dims: [n, c, h, w],
            winners,
        },
    ))
}

/// Scatter `grad_out` back to the positions that won their pooling window.
pub fn maxpool2_grad(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = indices.input_dims;
    if grad_out.dims() != [n, c, h / 2, w / 2] {
        return Err(Error::shape(format!(
            "grad_out dims {:?} do not match pooled dims ({n}, {c}, {}, {})",
            grad_out.dims(),
            h / 2,
            w / 2
        )));
    }
    let mut data = vec![0.0f32; n * c * h * w];
    for (&winner, &g) in indices.winners.iter().zip(grad_out.data()) {
        data[winner] += g;
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Elementwise max(x, 0).
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        dims: input.dims(),
        data,
    }
}

/// ReLU backward: passes gradient where the forward input was strictly
/// positive, zero elsewhere (subgradient 0 at exactly 0).
pub fn relu_grad(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.dims() != grad_out.dims() {
        return Err(Error::shape(format!(
            "relu_grad dims {:?} vs {:?}",
            input.dims(),
            grad_out.dims()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        dims: input.dims(),
        data,
    })
}

/// Elementwise sum of two tensors of identical dims.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "add dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor {
        dims: a.dims(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, scalar_probe};
    use crate::util::seeded_rng;
    use rand::Rng;

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let len = dims.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    /// Independent sliding-window oracle: per-output gather, no slice tricks.
    fn conv2d_oracle(input: &Tensor, p: &ConvParams) -> Tensor {
        let [n, c_in, h, w] = input.dims();
        let [c_out, _, kh, kw] = p.weights.dims();
        let oh = (h + 2 * p.padding - kh) / p.stride + 1;
        let ow = (w + 2 * p.padding - kw) / p.stride + 1;
        let mut out = Tensor::zeros([n, c_out, oh, ow]);
        for b in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = f64::from(p.bias[co]);
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += f64::from(
                                            input.at(b, ci, iy as usize, ix as usize),
                                        ) * f64::from(p.weights.at(co, ci, ky, kx));
                                    }
                                }
                            }
                        }
                        out.set(b, co, oy, ox, acc as f32);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_sums_input() {
        let input = Tensor::from_vec(
            [1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let p = ConvParams::new(
            Tensor::from_vec([1, 1, 3, 3], vec![1.0; 9]).unwrap(),
            vec![0.0],
            1,
            0,
        )
        .unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.dims(), [1, 1, 1, 1]);
        assert_eq!(out.data()[0], 45.0);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let input = random_tensor([2, 3, 5, 7], 3);
        let mut weights = Tensor::zeros([3, 3, 3, 3]);
        for c in 0..3 {
            weights.set(c, c, 1, 1, 1.0);
        }
        let p = ConvParams::new(weights, vec![0.0; 3], 1, 1).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let input = random_tensor([2, 3, 8, 8], 101);
        let weights = random_tensor([4, 3, 3, 3], 102);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (3, 0)] {
            let p = ConvParams::new(weights.clone(), vec![0.1, -0.2, 0.3, 0.0], stride, padding)
                .unwrap();
            let got = conv2d(&input, &p).unwrap();
            let want = conv2d_oracle(&input, &p);
            assert_eq!(got.dims(), want.dims());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() <= 1e-6, "stride {stride} pad {padding}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let input = random_tensor([1, 2, 4, 4], 5);
        let p = ConvParams::new(
            Tensor::zeros([1, 3, 3, 3]),
            vec![0.0],
            1,
            0,
        )
        .unwrap();
        assert!(matches!(conv2d(&input, &p), Err(Error::Shape(_))));

        let p = ConvParams::new(Tensor::zeros([1, 2, 5, 5]), vec![0.0], 1, 0).unwrap();
        assert!(matches!(conv2d(&input, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_grad_zero_upstream_gives_zero() {
        let input = random_tensor([1, 2, 6, 6], 7);
        let p = ConvParams::new(random_tensor([3, 2, 3, 3], 8), vec![0.0; 3], 1, 1).unwrap();
        let grad_out = Tensor::zeros([1, 3, 6, 6]);
        let (gi, gw, gb) = conv2d_grad(&input, &p, &grad_out).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_grad_scalar_chain_rule() {
        let input = Tensor::from_vec([1, 1, 1, 1], vec![2.5]).unwrap();
        let p = ConvParams::new(
            Tensor::from_vec([1, 1, 1, 1], vec![-1.5]).unwrap(),
            vec![0.75],
            1,
            0,
        )
        .unwrap();
        let grad_out = Tensor::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let (gi, gw, gb) = conv2d_grad(&input, &p, &grad_out).unwrap();
        assert_eq!(gi.data()[0], 3.0 * -1.5);
        assert_eq!(gw.data()[0], 3.0 * 2.5);
        assert_eq!(gb[0], 3.0);
    }

    #[test]
    fn conv_grad_matches_finite_differences() {
        let input = random_tensor([2, 2, 5, 5], 21);
        let p = ConvParams::new(random_tensor([3, 2, 3, 3], 22), vec![0.2, -0.1, 0.0], 1, 1)
            .unwrap();
        let grad_out = random_tensor([2, 3, 5, 5], 23);

        let (gi, gw, gb) = conv2d_grad(&input, &p, &grad_out).unwrap();

        let fd_in = gradcheck::fd_gradient(
            |x| scalar_probe(&conv2d(x, &p).unwrap(), &grad_out),
            &input,
            1e-3,
        );
        let worst = gradcheck::max_relative_error(gi.data(), &fd_in);
        assert!(worst < 1e-3, "input grad rel err {worst}");

        let fd_w = gradcheck::fd_gradient(
            |wt| {
                let probe = ConvParams::new(wt.clone(), p.bias.clone(), 1, 1).unwrap();
                scalar_probe(&conv2d(&input, &probe).unwrap(), &grad_out)
            },
            &p.weights,
            1e-3,
        );
        let worst = gradcheck::max_relative_error(gw.data(), &fd_w);
        assert!(worst < 1e-3, "weight grad rel err {worst}");

        for (co, &g) in gb.iter().enumerate() {
            let mut bias_hi = p.bias.clone();
            let mut bias_lo = p.bias.clone();
            bias_hi[co] += 1e-3;
            bias_lo[co] -= 1e-3;
            let hi = scalar_probe(
                &conv2d(&input, &ConvParams::new(p.weights.clone(), bias_hi, 1, 1).unwrap())
                    .unwrap(),
                &grad_out,
            );
            let lo = scalar_probe(
                &conv2d(&input, &ConvParams::new(p.weights.clone(), bias_lo, 1, 1).unwrap())
                    .unwrap(),
                &grad_out,
            );
            let fd = (hi - lo) / 2e-3;
            let denom = f64::from(g).abs().max(fd.abs()).max(1.0);
            assert!(
                (f64::from(g) - fd).abs() / denom < 1e-3,
                "bias grad channel {co}"
            );
        }
    }

    #[test]
    fn maxpool_basics_and_tie_rule() {
        let input = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, idx) = maxpool2(&input).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.winners(), &[3]);

        let constant = Tensor::from_vec([1, 1, 2, 2], vec![7.0; 4]).unwrap();
        let (out, idx) = maxpool2(&constant).unwrap();
        assert_eq!(out.data(), &[7.0]);
        assert_eq!(idx.winners(), &[0], "ties go to the first window element");

        let odd = Tensor::zeros([1, 1, 3, 4]);
        assert!(matches!(maxpool2(&odd), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_matches_window_scan_oracle() {
        let input = random_tensor([1, 2, 6, 6], 31);
        let (out, _) = maxpool2(&input).unwrap();
        for b in 0..1 {
            for c in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut want = f32::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                want = want.max(input.at(b, c, 2 * oy + dy, 2 * ox + dx));
                            }
                        }
                        assert_eq!(out.at(b, c, oy, ox), want);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_grad_scatters_to_winner() {
        let input = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, idx) = maxpool2(&input).unwrap();
        let grad_out = Tensor::from_vec([1, 1, 1, 1], vec![5.0]).unwrap();
        let grad = maxpool2_grad(&idx, &grad_out).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 0.0, 5.0]);

        let zeros = Tensor::zeros([1, 1, 1, 1]);
        let grad = maxpool2_grad(&idx, &zeros).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));

        let bad = Tensor::zeros([1, 1, 2, 2]);
        assert!(matches!(maxpool2_grad(&idx, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_grad_matches_finite_differences_away_from_ties() {
        let input = random_tensor([1, 2, 4, 4], 41);
        let grad_out = random_tensor([1, 2, 2, 2], 42);
        let (_, idx) = maxpool2(&input).unwrap();
        let analytic = maxpool2_grad(&idx, &grad_out).unwrap();
        let fd = gradcheck::fd_gradient(
            |x| scalar_probe(&maxpool2(x).unwrap().0, &grad_out),
            &input,
            1e-4,
        );
        let worst = gradcheck::max_relative_error(analytic.data(), &fd);
        assert!(worst < 1e-3, "pool grad rel err {worst}");
    }

    #[test]
    fn relu_and_grad() {
        let input = Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&input).data(), &[0.0, 0.0, 2.0]);

        let grad_out = Tensor::from_vec([1, 1, 1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let g = relu_grad(&input, &grad_out).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);

        let positive = Tensor::from_vec([1, 1, 1, 3], vec![0.5, 1.0, 2.0]).unwrap();
        assert_eq!(relu(&positive), positive);
        assert_eq!(relu_grad(&positive, &grad_out).unwrap().data(), grad_out.data());
    }

    #[test]
    fn relu_grad_matches_finite_differences_away_from_zero() {
        let mut input = random_tensor([1, 2, 4, 4], 51);
        // Push values away from the kink so central differences are clean.
        for v in input.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1_f32.copysign(*v + 0.01);
            }
        }
        let grad_out = random_tensor([1, 2, 4, 4], 52);
        let analytic = relu_grad(&input, &grad_out).unwrap();
        let fd = gradcheck::fd_gradient(|x| scalar_probe(&relu(x), &grad_out), &input, 1e-3);
        let worst = gradcheck::max_relative_error(analytic.data(), &fd);
        assert!(worst < 1e-3, "relu grad rel err {worst}");
    }

    #[test]
    fn add_basics() {
        let a = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(add(&a, &Tensor::zeros([1, 1, 1, 2])).unwrap(), a);
        assert!(matches!(
            add(&a, &Tensor::zeros([1, 1, 2, 1])),
            Err(Error::Shape(_))
        ));

        let x = random_tensor([2, 3, 4, 4], 61);
        let y = random_tensor([2, 3, 4, 4], 62);
        assert_eq!(add(&x, &y).unwrap(), add(&y, &x).unwrap());
    }

    #[test]
    fn operations_are_pure() {
        let input = random_tensor([1, 2, 6, 6], 71);
        let p = ConvParams::new(random_tensor([2, 2, 3, 3], 72), vec![0.1, 0.2], 1, 1).unwrap();
        let a = conv2d(&input, &p).unwrap();
        let b = conv2d(&input, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn pool_output_within_window_bounds(seed in 0u64..1000) {
                let input = random_tensor([1, 2, 6, 6], seed);
                let (out, _) = maxpool2(&input).unwrap();
                for b in 0..1 {
                    for c in 0..2 {
                        for oy in 0..3 {
                            for ox in 0..3 {
                                let mut lo = f32::INFINITY;
                                let mut hi = f32::NEG_INFINITY;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let v = input.at(b, c, 2 * oy + dy, 2 * ox + dx);
                                        lo = lo.min(v);
                                        hi = hi.max(v);
                                    }
                                }
                                let v = out.at(b, c, oy, ox);
                                prop_assert!(v >= lo && v <= hi);
                            }
                        }
                    }
                }
            }

            #[test]
            fn conv_identity_kernel_property(seed in 0u64..1000) {
                let input = random_tensor([1, 2, 4, 6], seed);
                let mut weights = Tensor::zeros([2, 2, 3, 3]);
                for c in 0..2 {
                    weights.set(c, c, 1, 1, 1.0);
                }
                let p = ConvParams::new(weights, vec![0.0; 2], 1, 1).unwrap();
                prop_assert_eq!(conv2d(&input, &p).unwrap(), input);
            }
        }
    }
}
