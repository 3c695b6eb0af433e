//! Digital Butterworth band-stop filter, applied forward and backward.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section in transposed direct form II.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// Denominator without the leading 1: `[a1, a2]`.
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// State reached after a long run of unit input.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }

    /// Squared pole radius (a2 for a conjugate pair).
    pub fn pole_radius_sq(&self) -> f64 {
        self.a[1]
    }
}

/// Cascade of biquads implementing a Butterworth band-stop.
#[derive(Clone, Debug)]
pub struct BandStop {
    sections: Vec<Biquad>,
}

/// Linear-prediction edge extension: order, fit window and length.
const LP_ORDER: usize = 16;
const LP_FIT: usize = 256;
const LP_PAD: usize = 400;

impl BandStop {
    /// Design an order-`order` band-stop between `low_hz` and `high_hz`
    /// via bilinear transform with pre-warped edges.
    pub fn design(low_hz: f64, high_hz: f64, order: usize, sample_rate: f64) -> Result<Self> {
        let nyquist = sample_rate / 2.0;
        if order == 0 {
            return Err(Error::Config("band-stop order must be at least 1".into()));
        }
        if !(low_hz > 0.0 && low_hz < high_hz) {
            return Err(Error::Config(format!("band-stop edges {low_hz}..{high_hz} Hz are not increasing")));
        }
        if high_hz >= nyquist {
            return Err(Error::Config(format!("band-stop edge {high_hz} Hz is at or above Nyquist {nyquist} Hz")));
        }
        // bilinear transform s = 2 (z - 1) / (z + 1), edges pre-warped
        let warp = |f: f64| 2.0 * (std::f64::consts::PI * f / sample_rate).tan();
        let (w1, w2) = (warp(low_hz), warp(high_hz));
        let bw = w2 - w1;
        let w0 = (w1 * w2).sqrt();
        let to_z = |s: Complex64| (Complex64::new(2.0, 0.0) + s) / (Complex64::new(2.0, 0.0) - s);

        let mut poles = Vec::with_capacity(2 * order);
        for k in 0..order {
            let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta);
            // each prototype pole splits into the roots of s² - (bw/p) s + w0² = 0
            let half = Complex64::new(bw, 0.0) / (p * 2.0);
            let disc = (half * half - w0 * w0).sqrt();
            poles.push(to_z(half + disc));
            poles.push(to_z(half - disc));
        }
        let zero = to_z(Complex64::new(0.0, w0));

        let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > 1e-12).collect();
        let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= 1e-12).map(|p| p.re).collect();
        upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        real.sort_by(f64::total_cmp);

        let numerator = [1.0, -2.0 * zero.re, zero.norm_sqr()];
        let mut sections: Vec<Biquad> = upper
            .iter()
            .map(|p| Biquad { b: numerator, a: [-2.0 * p.re, p.norm_sqr()] })
            .collect();
        for pair in real.chunks(2) {
            let (r1, r2) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
            sections.push(Biquad { b: numerator, a: [-(r1 + r2), r1 * r2] });
        }
        for s in &mut sections {
            let g = s.dc_gain();
            s.b.iter_mut().for_each(|b| *b /= g);
        }
        Ok(Self { sections })
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    /// Single causal pass, starting from the steady state for a constant
    /// input equal to `x[0]`.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let first = x.first().copied().unwrap_or(0.0);
        let mut level = first;
        for s in &self.sections {
            let zi = s.step_state();
            let (mut z1, mut z2) = (zi[0] * level, zi[1] * level);
            for v in y.iter_mut() {
                let input = *v;
                let out = s.b[0] * input + z1;
                z1 = s.b[1] * input - s.a[0] * out + z2;
                z2 = s.b[2] * input - s.a[1] * out;
                *v = out;
            }
            level *= s.dc_gain();
        }
        y
    }

    /// Zero-phase application: the signal is extended at both ends by
    /// linear prediction, filtered forward, then backward, and trimmed.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let fit = n.min(LP_FIT);
        let right = extrapolate(&x[n - fit..], LP_PAD);
        let reversed: Vec<f64> = x[..fit].iter().rev().copied().collect();
        let left = extrapolate(&reversed, LP_PAD);

        let mut ext = Vec::with_capacity(n + 2 * LP_PAD);
        ext.extend(left.iter().rev());
        ext.extend_from_slice(x);
        ext.extend_from_slice(&right);

        let mut y = self.filter(&ext);
        y.reverse();
        let mut y = self.filter(&y);
        y.reverse();
        y[LP_PAD..LP_PAD + n].to_vec()
    }
}

/// Burg estimate of AR coefficients `a[1..=order]` (with `a[0] = 1`) for a
/// zero-mean sequence. The model is minimum-phase, so extrapolation never
/// grows without bound.
fn burg(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    let mut a = vec![1.0];
    let mut f = x.to_vec();
    let mut b = x.to_vec();
    for m in 0..order.min(n.saturating_sub(1)) {
        let (mut num, mut den) = (0.0, 0.0);
        for i in m + 1..n {
            num += f[i] * b[i - 1];
            den += f[i] * f[i] + b[i - 1] * b[i - 1];
        }
        let k = if den > 0.0 { -2.0 * num / den } else { 0.0 };
        let prev = a.clone();
        a.push(0.0);
        for i in 1..a.len() {
            a[i] += k * prev.get(a.len() - 1 - i).copied().unwrap_or(0.0);
        }
        for i in (m + 1..n).rev() {
            let (fi, bi) = (f[i], b[i - 1]);
            f[i] = fi + k * bi;
            b[i] = bi + k * fi;
        }
    }
    a
}

/// Continue `x` by `len` samples using an AR model fitted around its mean.
fn extrapolate(x: &[f64], len: usize) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let centred: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let order = LP_ORDER.min(x.len() / 2);
    let a = burg(&centred, order);
    let p = a.len() - 1;
    let mut buf = centred;
    for _ in 0..len {
        let t = buf.len();
        let pred: f64 = (1..=p).map(|j| -a[j] * buf[t - j]).sum();
        buf.push(pred);
    }
    buf[x.len()..].iter().map(|v| v + mean).collect()
}
