//! Raw numeric kernels behind the differentiable primitives.
//!
//! Everything here works on plain slices; shape validation happens in the
//! tape layer before these are called.

use alloc::vec;
use alloc::vec::Vec;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]`, `b` as `[k×n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` stored as `[m×k]`, `b` as `[n×k]`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.cin_g() == 1 && self.cout_g() == 1
    }
    /// Output positions along one axis whose input index `o·stride + t − pad`
    /// lies inside `[0, len)`.
    fn valid_range(&self, t: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if t >= self.pad { 0 } else { (self.pad - t).div_ceil(self.stride) };
        let hi = if len + self.pad > t { ((len - 1 + self.pad - t) / self.stride + 1).min(out_len) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Direct depthwise convolution: one `k×k` filter per channel.
fn depthwise_forward(g: &ConvGeom, input: &[f64], weight: &[f64], out: &mut [f64]) {
    let (plane, p, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    for bc in 0..g.n * g.cin {
        let c = bc % g.cin;
        let src = &input[bc * plane..(bc + 1) * plane];
        let dst = &mut out[bc * p..(bc + 1) * p];
        for ky in 0..g.k {
            let (y0, y1) = g.valid_range(ky, g.h, g.oh);
            for kx in 0..g.k {
                let wv = weight[c * kk + ky * g.k + kx];
                let (x0, x1) = g.valid_range(kx, g.w, g.ow);
                if x0 == x1 {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let row = &src[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let seg = &row[x0 + kx - g.pad..x1 + kx - g.pad];
                        for (o, v) in orow[x0..x1].iter_mut().zip(seg) {
                            *o += wv * v;
                        }
                    } else {
                        for ox in x0..x1 {
                            orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut gi: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let (plane, p, kk) = (g.h * g.w, g.oh * g.ow, g.k * g.k);
    for bc in 0..g.n * g.cin {
        let c = bc % g.cin;
        let src = &input[bc * plane..(bc + 1) * plane];
        let go = &grad_out[bc * p..(bc + 1) * p];
        for ky in 0..g.k {
            let (y0, y1) = g.valid_range(ky, g.h, g.oh);
            for kx in 0..g.k {
                let wi = c * kk + ky * g.k + kx;
                let (x0, x1) = g.valid_range(kx, g.w, g.ow);
                if x0 == x1 {
                    continue;
                }
                let mut acc = 0.0;
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                    if gw.is_some() {
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let seg = &row[x0 + kx - g.pad..x1 + kx - g.pad];
                            acc += grow[x0..x1].iter().zip(seg).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for ox in x0..x1 {
                                acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                    if let Some(gi) = gi.as_deref_mut() {
                        let wv = weight[wi];
                        let irow = &mut gi[bc * plane + iy * g.w..bc * plane + (iy + 1) * g.w];
                        if g.stride == 1 {
                            let seg = &mut irow[x0 + kx - g.pad..x1 + kx - g.pad];
                            for (o, v) in seg.iter_mut().zip(&grow[x0..x1]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[wi] += acc;
                }
            }
        }
    }
}

/// Unfolds the channels `[c0, c0 + cin_g)` of one image into a
/// `[cin_g·k·k, oh·ow]` column matrix.
fn im2col(g: &ConvGeom, img: &[f64], c0: usize, cols: &mut [f64]) {
    let plane = g.h * g.w;
    let p = g.oh * g.ow;
    for ci in 0..g.cin_g() {
        let src = &img[(c0 + ci) * plane..(c0 + ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
fn col2im(g: &ConvGeom, cols: &[f64], c0: usize, img: &mut [f64]) {
    let plane = g.h * g.w;
    let p = g.oh * g.ow;
    for ci in 0..g.cin_g() {
        let dst = &mut img[(c0 + ci) * plane..(c0 + ci + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let rows = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut out = vec![0.0; g.n * g.cout * p];
    if g.is_depthwise() {
        depthwise_forward(g, input, weight, &mut out);
        return out;
    }
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * p]
    };
    for b in 0..g.n {
        let img = &input[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let out_b = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        for grp in 0..g.groups {
            let w_g = &weight[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let o_g = &mut out_b[grp * cout_g * p..(grp + 1) * cout_g * p];
            if g.is_pointwise() {
                let x = &img[grp * cin_g * p..(grp + 1) * cin_g * p];
                gemm_nn(cout_g, rows, p, w_g, x, o_g);
            } else {
                im2col(g, img, grp * cin_g, &mut cols);
                gemm_nn(cout_g, rows, p, w_g, &cols, o_g);
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight)`; either may be skipped.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p = g.oh * g.ow;
    let rows = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let plane_in = g.cin * g.h * g.w;
    let mut gi = need_input.then(|| vec![0.0; input.len()]);
    let mut gw = need_weight.then(|| vec![0.0; weight.len()]);
    if g.is_depthwise() {
        depthwise_backward(g, input, weight, grad_out, gi.as_deref_mut(), gw.as_deref_mut());
        return (gi, gw);
    }
    let (mut cols, mut gcols) = if g.is_pointwise() {
        (Vec::new(), Vec::new())
    } else {
        (vec![0.0; rows * p], vec![0.0; rows * p])
    };
    for b in 0..g.n {
        let img = &input[b * plane_in..(b + 1) * plane_in];
        let go_b = &grad_out[b * g.cout * p..(b + 1) * g.cout * p];
        for grp in 0..g.groups {
            let go_g = &go_b[grp * cout_g * p..(grp + 1) * cout_g * p];
            let w_g = &weight[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            if let Some(gw) = gw.as_mut() {
                let gw_g = &mut gw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                if g.is_pointwise() {
                    let x = &img[grp * cin_g * p..(grp + 1) * cin_g * p];
                    gemm_nt(cout_g, p, rows, go_g, x, gw_g);
                } else {
                    im2col(g, img, grp * cin_g, &mut cols);
                    gemm_nt(cout_g, p, rows, go_g, &cols, gw_g);
                }
            }
            if let Some(gi) = gi.as_mut() {
                let gi_b = &mut gi[b * plane_in..(b + 1) * plane_in];
                if g.is_pointwise() {
                    let dst = &mut gi_b[grp * cin_g * p..(grp + 1) * cin_g * p];
                    gemm_tn(rows, cout_g, p, w_g, go_g, dst);
                } else {
                    gcols.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn(rows, cout_g, p, w_g, go_g, &mut gcols);
                    col2im(g, &gcols, grp * cin_g, gi_b);
                }
            }
        }
    }
    (gi, gw)
}

/// Linear interpolation taps for resampling `in_len` samples to `out_len`
/// with the half-pixel (align-corners = false) convention.
///
/// Each entry is `(i0, i1, w0, w1)`.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Separable bilinear resampling of `planes` images of size `h×w` to `oh×ow`.
pub fn bilinear_resize(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`].
pub(crate) fn bilinear_resize_backward(
    grad_out: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gi = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let src = &grad_out[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut gi[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * g;
                dst[y0 * w + x1] += wy0 * wx1 * g;
                dst[y1 * w + x0] += wy1 * wx0 * g;
                dst[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
    gi
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c2);
        assert_eq!(c, c2);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c3 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn taps_identity_at_unit_scale() {
        for (o, &(i0, _, w0, w1)) in linear_taps(5, 5).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!((w0, w1), (1.0, 0.0));
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - core::f64::consts::LN_2).abs() < 1e-15);
    }
}
