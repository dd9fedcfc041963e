//! Slice-level numeric kernels shared by the autodiff graph and the
//! allocation-light inference paths. All buffers are row-major.

use crate::error::{Error, Result};

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = x · W + b` for a single row.
pub fn affine_row(x: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let n = out.len();
    match b {
        Some(b) => out.copy_from_slice(b),
        None => out.fill(0.0),
    }
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[p * n..(p + 1) * n]) {
            *o += xv * wv;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Numerically stable `ln(e^a + e^b)`.
#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        or.iter_mut().for_each(|o| *o /= s);
    }
}

pub fn log_softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let lse = logsumexp(xr);
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// Normalizes each row to zero mean and unit variance, then applies the
/// affine transform. Returns per-row `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let denom = (var + eps).sqrt();
        let rstd = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
            *o = (v - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

pub fn check_odd_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "kernel size {k} must be odd for same padding"
        )));
    }
    Ok(())
}

/// Depthwise 1-D cross-correlation over time with same padding.
/// `x: [t×d]`, `w: [k×d]`.
pub fn depthwise_conv1d(x: &[f64], w: &[f64], t: usize, d: usize, k: usize, out: &mut [f64]) {
    let pad = (k - 1) / 2;
    out.fill(0.0);
    for ti in 0..t {
        let orow = &mut out[ti * d..(ti + 1) * d];
        for ki in 0..k {
            let src = ti as isize + ki as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let xrow = &x[src as usize * d..(src as usize + 1) * d];
            let wrow = &w[ki * d..(ki + 1) * d];
            for ((o, xv), wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                *o += xv * wv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: vec![input],
                    rhs: vec![kernel],
                });
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dGeom {
    pub fn new(
        input: [usize; 4],
        kernel: [usize; 4],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [n, h, w, cin] = input;
        let [kh, kw, kcin, cout] = kernel;
        if kcin != cin {
            return Err(Error::shape("conv2d", &input, &kernel));
        }
        let (oh, pad_h) = conv_extent(h, kh, stride, padding)?;
        let (ow, pad_w) = conv_extent(w, kw, stride, padding)?;
        Ok(Conv2dGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh,
            ow,
            pad_h,
            pad_w,
        })
    }

    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let s = (o * self.stride + k) as isize - pad as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }

    pub fn forward(&self, x: &[f64], k: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let (cin, cout) = (self.cin, self.cout);
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let obase = ((b * self.oh + oy) * self.ow + ox) * cout;
                    let orow = &mut out[obase..obase + cout];
                    for ky in 0..self.kh {
                        let Some(iy) = self.src(oy, ky, self.pad_h, self.h) else { continue };
                        for kx in 0..self.kw {
                            let Some(ix) = self.src(ox, kx, self.pad_w, self.w) else { continue };
                            let xbase = ((b * self.h + iy) * self.w + ix) * cin;
                            let kbase = (ky * self.kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = x[xbase + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                                for (o, kv) in orow.iter_mut().zip(krow) {
                                    *o += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates input and kernel gradients from the output gradient.
    pub fn backward(&self, x: &[f64], k: &[f64], gy: &[f64], gx: &mut [f64], gk: &mut [f64]) {
        let (cin, cout) = (self.cin, self.cout);
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let obase = ((b * self.oh + oy) * self.ow + ox) * cout;
                    let grow = &gy[obase..obase + cout];
                    for ky in 0..self.kh {
                        let Some(iy) = self.src(oy, ky, self.pad_h, self.h) else { continue };
                        for kx in 0..self.kw {
                            let Some(ix) = self.src(ox, kx, self.pad_w, self.w) else { continue };
                            let xbase = ((b * self.h + iy) * self.w + ix) * cin;
                            let kbase = (ky * self.kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let kr = kbase + ci * cout;
                                gx[xbase + ci] += dot(&k[kr..kr + cout], grow);
                                let xv = x[xbase + ci];
                                for (g, gv) in gk[kr..kr + cout].iter_mut().zip(grow) {
                                    *g += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extent() {
        assert_eq!(conv_extent(5, 3, 1, Padding::Same).unwrap(), (5, 1));
        assert_eq!(conv_extent(5, 3, 2, Padding::Same).unwrap(), (3, 1));
        assert_eq!(conv_extent(4, 3, 2, Padding::Same).unwrap(), (2, 0));
        assert_eq!(conv_extent(5, 3, 1, Padding::Valid).unwrap(), (3, 0));
        assert!(conv_extent(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn logaddexp_handles_neg_inf() {
        assert_eq!(logaddexp(f64::NEG_INFINITY, 1.5), 1.5);
        assert!((logaddexp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
