use crate::error::{shape_err, Error, Result};

/// Padding mode for the depthwise 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output at `t` only sees inputs at `t` and earlier.
    Causal,
    /// Kernel centred on `t`; for even widths the extra tap looks back.
    Same,
}

impl Padding {
    fn lead(self, width: usize) -> usize {
        match self {
            Padding::Causal => 0,
            Padding::Same => (width - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dDims {
    pub fn new(x: &[usize], k: &[usize]) -> Result<Self> {
        if x.len() != 3 || k.len() != 4 || k[1] != x[0] {
            return Err(shape_err("conv2d", format!("input {x:?}, kernels {k:?}")));
        }
        if k[2] % 2 == 0 || k[3] % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel {}x{} must have odd extents", k[2], k[3])));
        }
        Ok(Self { c_in: x[0], c_out: k[0], h: x[1], w: x[2], kh: k[2], kw: k[3] })
    }
}

/// Visit every (output row, input row, column overlap) triple of one kernel tap.
#[inline]
fn tap_rows(d: &Conv2dDims, dy: usize, dx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (ph, pw) = (d.kh / 2, d.kw / 2);
    // output column range whose input column (w + dx - pw) is in bounds
    let w_lo = pw.saturating_sub(dx);
    let w_hi = (d.w + pw).saturating_sub(dx).min(d.w);
    if w_lo >= w_hi {
        return;
    }
    for h in 0..d.h {
        let src = h + dy;
        if src < ph || src - ph >= d.h {
            continue;
        }
        f(h, src - ph, w_lo, w_hi, w_lo + dx - pw);
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.c_out * plane];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let kv = k[((co * d.c_in + ci) * d.kh + dy) * d.kw + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    let o = &mut out[co * plane..(co + 1) * plane];
                    tap_rows(d, dy, dx, |h, hs, w0, w1, ws| {
                        let dst = &mut o[h * d.w + w0..h * d.w + w1];
                        let src = &xin[hs * d.w + ws..hs * d.w + ws + (w1 - w0)];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += kv * b;
                        }
                    });
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input(g: &[f64], k: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut dx_buf = vec![0.0; d.c_in * plane];
    for co in 0..d.c_out {
        let go = &g[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let dst_plane = &mut dx_buf[ci * plane..(ci + 1) * plane];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let kv = k[((co * d.c_in + ci) * d.kh + dy) * d.kw + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    tap_rows(d, dy, dx, |h, hs, w0, w1, ws| {
                        let dst = &mut dst_plane[hs * d.w + ws..hs * d.w + ws + (w1 - w0)];
                        for (a, b) in dst.iter_mut().zip(&go[h * d.w + w0..h * d.w + w1]) {
                            *a += kv * b;
                        }
                    });
                }
            }
        }
    }
    dx_buf
}

pub(crate) fn conv2d_grad_kernel(g: &[f64], x: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut dk = vec![0.0; d.c_out * d.c_in * d.kh * d.kw];
    for co in 0..d.c_out {
        let go = &g[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let mut acc = 0.0;
                    tap_rows(d, dy, dx, |h, hs, w0, w1, ws| {
                        acc += go[h * d.w + w0..h * d.w + w1]
                            .iter()
                            .zip(&xin[hs * d.w + ws..hs * d.w + ws + (w1 - w0)])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    });
                    dk[((co * d.c_in + ci) * d.kh + dy) * d.kw + dx] = acc;
                }
            }
        }
    }
    dk
}

pub(crate) fn conv1d_forward(
    x: &[f64],
    k: &[f64],
    channels: usize,
    len: usize,
    width: usize,
    padding: Padding,
) -> Vec<f64> {
    let lead = padding.lead(width);
    let mut out = vec![0.0; channels * len];
    for c in 0..channels {
        for t in 0..len {
            let mut acc = 0.0;
            for j in 0..width {
                // source index t - j + lead
                let src = t + lead;
                if src < j || src - j >= len {
                    continue;
                }
                acc += k[c * width + j] * x[c * len + src - j];
            }
            out[c * len + t] = acc;
        }
    }
    out
}

pub(crate) fn conv1d_backward(
    g: &[f64],
    x: &[f64],
    k: &[f64],
    channels: usize,
    len: usize,
    width: usize,
    padding: Padding,
) -> (Vec<f64>, Vec<f64>) {
    let lead = padding.lead(width);
    let mut dx = vec![0.0; channels * len];
    let mut dk = vec![0.0; channels * width];
    for c in 0..channels {
        for t in 0..len {
            let gv = g[c * len + t];
            for j in 0..width {
                let src = t + lead;
                if src < j || src - j >= len {
                    continue;
                }
                let s = src - j;
                dx[c * len + s] += k[c * width + j] * gv;
                dk[c * width + j] += x[c * len + s] * gv;
            }
        }
    }
    (dx, dk)
}
