//! Dense `f32` kernels with explicit backward passes.
//!
//! Feature tensors are standard-layout `(N, C, H, W)` arrays. Convolutions
//! are lowered to one GEMM over an im2col buffer which the forward pass
//! hands back so the backward pass does not recompute it.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::mask::BBox;

/// What the backward pass of a convolution needs from its forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f32>,
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
}

pub struct ConvGrads {
    pub input: Option<Array4<f32>>,
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

fn im2col(x: ArrayView4<f32>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let ncols = n * ho * wo;
    let mut cols = Array2::<f32>::zeros((c * k * k, ncols));
    let xs = x.as_slice().expect("conv input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let base = ((ci * k + ky) * k + kx) * ncols;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = base + (ni * ho + oy) * wo;
                        let src = ((ni * c + ci) * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f32>, dim: (usize, usize, usize, usize), k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array4<f32> {
    let (n, c, h, w) = dim;
    let ncols = n * ho * wo;
    let mut x = Array4::<f32>::zeros(dim);
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let base = ((ci * k + ky) * k + kx) * ncols;
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = base + (ni * ho + oy) * wo;
                        let dst = ((ni * c + ci) * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[dst + ix as usize] += cs[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix(weight: ArrayView4<f32>) -> ArrayView2<f32> {
    let (o, c, kh, kw) = weight.dim();
    weight
        .into_shape_with_order((o, c * kh * kw))
        .expect("conv weight must be standard layout")
}

/// Square-kernel 2-D convolution, `weight` shaped `(out, in, k, k)`.
pub fn conv2d(input: ArrayView4<f32>, weight: ArrayView4<f32>, bias: ArrayView1<f32>, stride: usize, pad: usize) -> (Array4<f32>, ConvCache) {
    let (n, c, h, w) = input.dim();
    let (o, wc, k, _) = weight.dim();
    assert_eq!(c, wc, "conv input has {c} channels, weight expects {wc}");
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let input = input.as_standard_layout();
    let cols = im2col(input.view(), k, stride, pad, ho, wo);
    let prod = weight_matrix(weight).dot(&cols);
    let mut out = Array4::<f32>::zeros((n, o, ho, wo));
    let hw = ho * wo;
    {
        let ps = prod.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for oc in 0..o {
            let b = bias[oc];
            for ni in 0..n {
                let src = &ps[oc * n * hw + ni * hw..][..hw];
                let dst = &mut os[(ni * o + oc) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    let cache = ConvCache {
        cols,
        input_dim: (n, c, h, w),
        out_hw: (ho, wo),
        kernel: k,
        stride,
        pad,
    };
    (out, cache)
}

pub fn conv2d_backward(grad_out: ArrayView4<f32>, weight: ArrayView4<f32>, cache: &ConvCache, need_input: bool) -> ConvGrads {
    let (n, o, ho, wo) = grad_out.dim();
    debug_assert_eq!((ho, wo), cache.out_hw);
    let hw = ho * wo;
    let grad_out = grad_out.as_standard_layout();
    let gs = grad_out.as_slice().unwrap();
    let mut g2 = Array2::<f32>::zeros((o, n * hw));
    {
        let ds = g2.as_slice_mut().unwrap();
        for ni in 0..n {
            for oc in 0..o {
                ds[oc * n * hw + ni * hw..][..hw].copy_from_slice(&gs[(ni * o + oc) * hw..][..hw]);
            }
        }
    }
    let gw = g2.dot(&cache.cols.t());
    let gb = g2.sum_axis(Axis(1));
    let input = need_input.then(|| {
        let gcols = weight_matrix(weight).t().dot(&g2);
        col2im(&gcols, cache.input_dim, cache.kernel, cache.stride, cache.pad, ho, wo)
    });
    ConvGrads {
        input,
        weight: gw.into_shape_with_order(weight.dim()).unwrap(),
        bias: gb,
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward<D: ndarray::Dimension>(grad: &mut ndarray::Array<f32, D>, output: &ndarray::Array<f32, D>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// `x · weightᵀ + bias` with `weight` shaped `(out, in)`.
pub fn linear(x: ArrayView2<f32>, weight: ArrayView2<f32>, bias: ArrayView1<f32>) -> Array2<f32> {
    let mut y = x.dot(&weight.t());
    y += &bias;
    y
}

pub struct LinearGrads {
    pub input: Array2<f32>,
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

pub fn linear_backward(grad: ArrayView2<f32>, x: ArrayView2<f32>, weight: ArrayView2<f32>) -> LinearGrads {
    LinearGrads {
        input: grad.dot(&weight),
        weight: grad.t().dot(&x),
        bias: grad.sum_axis(Axis(0)),
    }
}

/// Bilinear taps `(flat index, weight)` of every output bin of one RoI.
fn roi_taps(b: &BBox, scale: f32, h: usize, w: usize, out: usize, samples: usize) -> Vec<Vec<(usize, f32)>> {
    let x_start = b.x0 * scale - 0.5;
    let y_start = b.y0 * scale - 0.5;
    let bin_w = (b.width() * scale).max(1e-3) / out as f32;
    let bin_h = (b.height() * scale).max(1e-3) / out as f32;
    let norm = 1.0 / (samples * samples) as f32;
    let mut bins = Vec::with_capacity(out * out);
    for py in 0..out {
        for px in 0..out {
            let mut taps = Vec::with_capacity(4 * samples * samples);
            for iy in 0..samples {
                let y = y_start + py as f32 * bin_h + (iy as f32 + 0.5) * bin_h / samples as f32;
                for ix in 0..samples {
                    let x = x_start + px as f32 * bin_w + (ix as f32 + 0.5) * bin_w / samples as f32;
                    bilinear_taps(y, x, h, w, norm, &mut taps);
                }
            }
            bins.push(taps);
        }
    }
    bins
}

fn bilinear_taps(y: f32, x: f32, h: usize, w: usize, scale: f32, taps: &mut Vec<(usize, f32)>) {
    if y < -1.0 || y > h as f32 || x < -1.0 || x > w as f32 {
        return;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y_lo = y as usize;
    let mut x_lo = x as usize;
    let y_hi;
    let x_hi;
    if y_lo >= h - 1 {
        y_lo = h - 1;
        y_hi = h - 1;
        y = y_lo as f32;
    } else {
        y_hi = y_lo + 1;
    }
    if x_lo >= w - 1 {
        x_lo = w - 1;
        x_hi = w - 1;
        x = x_lo as f32;
    } else {
        x_hi = x_lo + 1;
    }
    let (ly, lx) = (y - y_lo as f32, x - x_lo as f32);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push((y_lo * w + x_lo, hy * hx * scale));
    taps.push((y_lo * w + x_hi, hy * lx * scale));
    taps.push((y_hi * w + x_lo, ly * hx * scale));
    taps.push((y_hi * w + x_hi, ly * lx * scale));
}

/// RoIAlign over one feature map `(C, H, W)`; boxes are in image pixels
/// and `scale` maps them to feature cells. Returns `(R, C, out, out)`.
pub fn roi_align(feat: ArrayView3<f32>, rois: &[BBox], scale: f32, out: usize, samples: usize) -> Array4<f32> {
    let (c, h, w) = feat.dim();
    let feat = feat.as_standard_layout();
    let fs = feat.as_slice().unwrap();
    let hw = h * w;
    let bins = out * out;
    let mut res = Array4::<f32>::zeros((rois.len(), c, out, out));
    let rs = res.as_slice_mut().unwrap();
    for (r, b) in rois.iter().enumerate() {
        let taps = roi_taps(b, scale, h, w, out, samples);
        for ch in 0..c {
            let plane = &fs[ch * hw..][..hw];
            let dst = &mut rs[(r * c + ch) * bins..][..bins];
            for (d, bin) in dst.iter_mut().zip(&taps) {
                *d = bin.iter().map(|&(i, wt)| plane[i] * wt).sum();
            }
        }
    }
    res
}

pub fn roi_align_backward(grad: ArrayView4<f32>, rois: &[BBox], scale: f32, feat_dim: (usize, usize, usize), samples: usize) -> Array3<f32> {
    let (c, h, w) = feat_dim;
    let out = grad.dim().2;
    let grad = grad.as_standard_layout();
    let gs = grad.as_slice().unwrap();
    let hw = h * w;
    let bins = out * out;
    let mut res = Array3::<f32>::zeros(feat_dim);
    let fs = res.as_slice_mut().unwrap();
    for (r, b) in rois.iter().enumerate() {
        let taps = roi_taps(b, scale, h, w, out, samples);
        for ch in 0..c {
            let plane = &mut fs[ch * hw..][..hw];
            let src = &gs[(r * c + ch) * bins..][..bins];
            for (&g, bin) in src.iter().zip(&taps) {
                if g != 0.0 {
                    for &(i, wt) in bin {
                        plane[i] += g * wt;
                    }
                }
            }
        }
    }
    res
}

/// Nearest-neighbour 2x upsampling of `(N, C, H, W)`.
pub fn upsample2x(x: ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.slice(s![ni, ci, .., ..]);
            let mut dst = out.slice_mut(s![ni, ci, .., ..]);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[[y, xx]] = src[[y / 2, xx / 2]];
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward(grad: ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = grad.dim();
    let mut out = Array4::<f32>::zeros((n, c, h2 / 2, w2 / 2));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[[ni, ci, y / 2, x / 2]] += grad[[ni, ci, y, x]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array<D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(rng: &mut ChaCha8Rng, shape: Sh) -> Array<f32, D> {
        Array::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
    }

    fn dot<D: ndarray::Dimension>(a: &Array<f32, D>, b: &Array<f32, D>) -> f64 {
        a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    /// Naive direct convolution used as the reference.
    fn conv_reference(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>, stride: usize, pad: usize) -> Array4<f32> {
        let (n, c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let mut out = Array4::zeros((n, o, ho, wo));
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[oc];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[ni, ci, iy as usize, ix as usize]] * w[[oc, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[ni, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, k) in &[(1, 3), (2, 3), (1, 1)] {
            let x = rand_array(&mut rng, (2, 3, 9, 7));
            let w = rand_array(&mut rng, (4, 3, k, k));
            let b = rand_array(&mut rng, 4);
            let (y, _) = conv2d(x.view(), w.view(), b.view(), stride, k / 2);
            let r = conv_reference(&x, &w, &b, stride, k / 2);
            assert_eq!(y.dim(), r.dim());
            for (a, b) in y.iter().zip(r.iter()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dL/dx, dx> from the backward pass equals the change in <g, y>
        // under the linear map x -> conv(x) (bias excluded).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_array(&mut rng, (2, 3, 8, 8));
        let w = rand_array(&mut rng, (5, 3, 3, 3));
        let zero_b = Array1::zeros(5);
        let (y, cache) = conv2d(x.view(), w.view(), zero_b.view(), 2, 1);
        let g = rand_array(&mut rng, y.dim());
        let grads = conv2d_backward(g.view(), w.view(), &cache, true);
        let lhs = dot(&g, &y);
        assert!((lhs - dot(&grads.input.unwrap(), &x)).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - dot(&grads.weight, &w)).abs() < 1e-3 * lhs.abs().max(1.0));
        let gb_expected: Array1<f32> = g.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
        for (a, b) in grads.bias.iter().zip(gb_expected.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_array(&mut rng, (4, 6));
        let w = rand_array(&mut rng, (3, 6));
        let y = linear(x.view(), w.view(), Array1::zeros(3).view());
        let g = rand_array(&mut rng, y.dim());
        let grads = linear_backward(g.view(), x.view(), w.view());
        let lhs = dot(&g, &y);
        assert!((lhs - dot(&grads.input, &x)).abs() < 1e-4);
        assert!((lhs - dot(&grads.weight, &w)).abs() < 1e-4);
    }

    #[test]
    fn roi_align_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feat = rand_array(&mut rng, (3, 10, 12));
        let rois = [BBox::new(2.0, 3.0, 30.0, 25.0), BBox::new(-4.0, 0.0, 10.0, 50.0), BBox::new(40.0, 30.0, 47.5, 39.0)];
        let y = roi_align(feat.view(), &rois, 0.25, 5, 2);
        let g = rand_array(&mut rng, y.dim());
        let gx = roi_align_backward(g.view(), &rois, 0.25, feat.dim(), 2);
        assert!((dot(&g, &y) - dot(&gx, &feat)).abs() < 1e-3);
    }

    #[test]
    fn roi_align_of_constant_map_is_constant() {
        let feat = Array3::from_elem((2, 8, 8), 1.5f32);
        let y = roi_align(feat.view(), &[BBox::new(4.0, 4.0, 20.0, 28.0)], 0.25, 7, 2);
        assert!(y.iter().all(|&v| (v - 1.5).abs() < 1e-5));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_array(&mut rng, (2, 3, 4, 5));
        let y = upsample2x(x.view());
        let g = rand_array(&mut rng, y.dim());
        let gx = upsample2x_backward(g.view());
        assert!((dot(&g, &y) - dot(&gx, &x)).abs() < 1e-4);
    }
}
