//! Raw numeric kernels over row-major slices. No shape validation here; the
//! graph layer checks shapes before calling in.

/// `c = alpha · op(a) · op(b) + beta · c` where `op(a)` is `[m × k]` and
/// `op(b)` is `[k × n]`. With `a_t` set, `a` is stored as `[k × m]`; likewise
/// for `b_t` and `[n × k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n extents of
    // the three slices, whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log Σ exp(xs)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))` with `-inf` as the identity.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - m).exp();
            s += *y;
        }
        for y in yr.iter_mut() {
            *y /= s;
        }
    }
}

pub fn log_softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let lse = log_sum_exp(xr);
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = v - lse;
        }
    }
}

/// Depthwise 1-D convolution over time with same padding.
/// `x: [t × c]`, `w: [c × k]` (k odd), `b: [c]`.
pub fn depthwise_conv1d(x: &[f64], t: usize, c: usize, w: &[f64], k: usize, b: Option<&[f64]>) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut y = vec![0.0; t * c];
    for ti in 0..t {
        let yr = &mut y[ti * c..(ti + 1) * c];
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        for j in 0..k {
            let src = ti as isize + j as isize - half;
            if src < 0 || src >= t as isize {
                continue;
            }
            let xr = &x[src as usize * c..(src as usize + 1) * c];
            for ch in 0..c {
                yr[ch] += w[ch * k + j] * xr[ch];
            }
        }
    }
    y
}

/// Geometry of a strided, unpadded 2-D convolution in time-major layout:
/// input `[h × c_in × w]`, kernel `[c_out × c_in × kh × kw]`, output
/// `[h_out × c_out × w_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl Conv2dGeom {
    pub fn h_out(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Patch matrix `[h_out·w_out × c_in·kh·kw]`.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo, p) = (self.h_out(), self.w_out(), self.patch());
        let mut cols = vec![0.0; ho * wo * p];
        for oh in 0..ho {
            for ow in 0..wo {
                let row = &mut cols[(oh * wo + ow) * p..(oh * wo + ow + 1) * p];
                let mut idx = 0;
                for ci in 0..self.c_in {
                    for ph in 0..self.kh {
                        let ih = oh * self.stride + ph;
                        let base = (ih * self.c_in + ci) * self.w + ow * self.stride;
                        row[idx..idx + self.kw].copy_from_slice(&x[base..base + self.kw]);
                        idx += self.kw;
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col), accumulating into `dx`.
    pub fn col2im_add(&self, dcols: &[f64], dx: &mut [f64]) {
        let (ho, wo, p) = (self.h_out(), self.w_out(), self.patch());
        for oh in 0..ho {
            for ow in 0..wo {
                let row = &dcols[(oh * wo + ow) * p..(oh * wo + ow + 1) * p];
                let mut idx = 0;
                for ci in 0..self.c_in {
                    for ph in 0..self.kh {
                        let ih = oh * self.stride + ph;
                        let base = (ih * self.c_in + ci) * self.w + ow * self.stride;
                        for q in 0..self.kw {
                            dx[base + q] += row[idx + q];
                        }
                        idx += self.kw;
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
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn log_add_identity() {
        assert_eq!(log_add(f64::NEG_INFINITY, 1.5), 1.5);
        assert!((log_add(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
