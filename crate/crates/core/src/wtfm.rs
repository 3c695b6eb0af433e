//! Wavelet transform feature modulation.
//!
//! A patch `P[L×V]` goes through a 3×3 and a 7×7 convolution. The fine-scale
//! map is split by a one-level Haar DWT into approximation and three detail
//! bands; each band is upsampled back to `L×V` (bicubic), re-weighted per
//! channel by attention, and the bands are summed into a modulation map that
//! multiplies the coarse-scale map. The modulated map, the fine-scale map and
//! a per-electrode value embedding of the raw patch are stacked channel-wise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Backward, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WtfmConfig {
    /// Channels of each convolution path (E).
    pub channels: usize,
    /// Channels of the value embedding (E_chan).
    pub value_channels: usize,
    /// Hidden width of the attention bottleneck (r); must divide E.
    pub reduction: usize,
    /// Electrode count (V).
    pub electrodes: usize,
    /// Apply channel attention; when off every band gets weight 1.
    pub attention: bool,
    /// Include the detail bands in the modulation map; when off only cA is used.
    pub detail_bands: bool,
}

impl WtfmConfig {
    pub fn new(channels: usize, value_channels: usize, electrodes: usize) -> Self {
        Self {
            channels,
            value_channels,
            reduction: (channels / 2).max(1),
            electrodes,
            attention: true,
            detail_bands: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.value_channels == 0 || self.electrodes == 0 {
            return Err(Error::Config("WTFM channel counts must be positive".into()));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::Config(format!(
                "attention width {} must divide the {} WTFM channels",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }

    /// Channels in the fused output: modulated + fine-scale + value embedding.
    pub fn output_channels(&self) -> usize {
        2 * self.channels + self.value_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WtfmParams {
    pub small_kernels: Tensor,
    pub large_kernels: Tensor,
    /// `[r×E]`
    pub attn_w1: Tensor,
    /// `[E×r]`
    pub attn_w2: Tensor,
    /// Per-electrode weights `[E_chan×V]` of the width-1 value embedding.
    pub value_embed: Tensor,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl WtfmParams {
    pub fn init(cfg: &WtfmConfig, rng: &mut ChaCha8Rng) -> Self {
        let (e, r) = (cfg.channels, cfg.reduction);
        Self {
            small_kernels: uniform(&[e, 1, 3, 3], 1.0 / 3.0, rng),
            large_kernels: uniform(&[e, 1, 7, 7], 1.0 / 7.0, rng),
            attn_w1: uniform(&[r, e], 1.0 / (e as f64).sqrt(), rng),
            attn_w2: uniform(&[e, r], 1.0 / (r as f64).sqrt(), rng),
            value_embed: uniform(&[cfg.value_channels, cfg.electrodes], 1.0, rng),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("small_kernels", &self.small_kernels),
            ("large_kernels", &self.large_kernels),
            ("attn_w1", &self.attn_w1),
            ("attn_w2", &self.attn_w2),
            ("value_embed", &self.value_embed),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("small_kernels", &mut self.small_kernels),
            ("large_kernels", &mut self.large_kernels),
            ("attn_w1", &mut self.attn_w1),
            ("attn_w2", &mut self.attn_w2),
            ("value_embed", &mut self.value_embed),
        ]
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> WtfmVars {
        WtfmVars {
            small_kernels: tape.param(&self.small_kernels),
            large_kernels: tape.param(&self.large_kernels),
            attn_w1: tape.param(&self.attn_w1),
            attn_w2: tape.param(&self.attn_w2),
            value_embed: tape.param(&self.value_embed),
        }
    }
}

/// Tape handles of [`WtfmParams`].
#[derive(Clone, Copy, Debug)]
pub struct WtfmVars {
    pub small_kernels: Var,
    pub large_kernels: Var,
    pub attn_w1: Var,
    pub attn_w2: Var,
    pub value_embed: Var,
}

/// The four Haar sub-bands, each `[E×⌈L/2⌉×⌈V/2⌉]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletComponents {
    pub ca: Tensor,
    pub ch: Tensor,
    pub cv: Tensor,
    pub cd: Tensor,
}

impl WaveletComponents {
    pub fn bands(&self) -> [(&'static str, &Tensor); 4] {
        [("cA", &self.ca), ("cH", &self.ch), ("cV", &self.cv), ("cD", &self.cd)]
    }

    /// `band,channel,row,col,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,channel,row,col,value\n");
        for (name, t) in self.bands() {
            let (e, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            for c in 0..e {
                for i in 0..h {
                    for j in 0..w {
                        out.push_str(&format!("{name},{c},{i},{j},{}\n", t.data()[(c * h + i) * w + j]));
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Haar DWT

#[derive(Clone, Copy)]
struct DwtDims {
    e: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl DwtDims {
    fn new(shape: &[usize]) -> Result<Self> {
        match *shape {
            [e, h, w] if h > 0 && w > 0 => Ok(Self { e, h, w, oh: h.div_ceil(2), ow: w.div_ceil(2) }),
            _ => Err(shape_err("dwt2_haar", format!("expected non-empty [E,H,W], got {shape:?}"))),
        }
    }

    /// Row/column index of the second sample of a pair, reflecting past the edge.
    fn partner(i: usize, n: usize) -> usize {
        if i < n {
            i
        } else if n >= 2 {
            n - 2
        } else {
            n - 1
        }
    }

    /// Source offsets of the 2×2 block behind output (c, i, j).
    fn block(&self, c: usize, i: usize, j: usize) -> [usize; 4] {
        let (r0, r1) = (2 * i, Self::partner(2 * i + 1, self.h));
        let (c0, c1) = (2 * j, Self::partner(2 * j + 1, self.w));
        let base = c * self.h * self.w;
        [base + r0 * self.w + c0, base + r0 * self.w + c1, base + r1 * self.w + c0, base + r1 * self.w + c1]
    }
}

/// Sign pattern of (a, b, c, d) for cA, cH, cV, cD.
const HAAR_SIGNS: [[f64; 4]; 4] = [[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0], [1.0, -1.0, -1.0, 1.0]];

fn dwt_forward(x: &[f64], d: &DwtDims) -> Vec<f64> {
    let band = d.e * d.oh * d.ow;
    let mut out = vec![0.0; 4 * band];
    for c in 0..d.e {
        for i in 0..d.oh {
            for j in 0..d.ow {
                let idx = d.block(c, i, j);
                let v = idx.map(|k| x[k]);
                let o = (c * d.oh + i) * d.ow + j;
                for (b, signs) in HAAR_SIGNS.iter().enumerate() {
                    out[b * band + o] = 0.5 * (0..4).map(|k| signs[k] * v[k]).sum::<f64>();
                }
            }
        }
    }
    out
}

struct DwtBackward {
    dims: DwtDims,
}

impl Backward for DwtBackward {
    fn name(&self) -> &'static str {
        "dwt2_haar"
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let d = &self.dims;
        let band = d.e * d.oh * d.ow;
        let mut dx = vec![0.0; d.e * d.h * d.w];
        for c in 0..d.e {
            for i in 0..d.oh {
                for j in 0..d.ow {
                    let idx = d.block(c, i, j);
                    let o = (c * d.oh + i) * d.ow + j;
                    for (b, signs) in HAAR_SIGNS.iter().enumerate() {
                        let g = 0.5 * grad[b * band + o];
                        for k in 0..4 {
                            dx[idx[k]] += signs[k] * g;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Single-level orthonormal Haar analysis of each channel of `f[E×L×V]`.
/// Odd extents are reflect-padded by one row/column.
pub fn dwt2_haar(f: &Tensor) -> Result<WaveletComponents> {
    let d = DwtDims::new(f.shape())?;
    let out = dwt_forward(f.data(), &d);
    let band = d.e * d.oh * d.ow;
    let shape = [d.e, d.oh, d.ow];
    let part = |b: usize| Tensor::new(&shape, out[b * band..(b + 1) * band].to_vec());
    Ok(WaveletComponents { ca: part(0)?, ch: part(1)?, cv: part(2)?, cd: part(3)? })
}

/// Tape version of [`dwt2_haar`]; returns `[cA, cH, cV, cD]`.
pub fn dwt2_haar_op(tape: &mut Tape, x: Var) -> Result<[Var; 4]> {
    let d = DwtDims::new(tape.shape(x))?;
    let out = dwt_forward(tape.value(x), &d);
    let stacked = tape.custom(&[x], out, vec![4, d.e, d.oh, d.ow], Box::new(DwtBackward { dims: d }))?;
    let mut bands = [stacked; 4];
    for (b, slot) in bands.iter_mut().enumerate() {
        let one = tape.narrow(stacked, 0, b, 1)?;
        *slot = tape.reshape(one, &[d.e, d.oh, d.ow])?;
    }
    Ok(bands)
}

// ---------------------------------------------------------------------------
// Bicubic upsampling

/// Cubic convolution kernel with a = -0.5.
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x.powi(3) - (A + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        A * x.powi(3) - 5.0 * A * x.powi(2) + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps for one output coordinate: half-pixel aligned, edge-clamped.
fn taps_1d(out_len: usize, in_len: usize, factor: f64) -> Vec<([usize; 4], [f64; 4])> {
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) / factor - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let pos = base as isize - 1 + k as isize;
                idx[k] = pos.clamp(0, in_len as isize - 1) as usize;
                w[k] = cubic_weight(t - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

struct Upsampler {
    e: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<([usize; 4], [f64; 4])>,
    cols: Vec<([usize; 4], [f64; 4])>,
}

impl Upsampler {
    fn new(shape: &[usize], out_h: usize, out_w: usize) -> Result<Self> {
        let &[e, h, w] = shape else {
            return Err(shape_err("upsample_bicubic", format!("expected [E,H,W], got {shape:?}")));
        };
        if h == 0 || w == 0 || out_h > 2 * h || out_w > 2 * w {
            return Err(shape_err("upsample_bicubic", format!("{h}x{w} cannot be upsampled 2x to {out_h}x{out_w}")));
        }
        Ok(Self { e, h, w, out_h, out_w, rows: taps_1d(out_h, h, 2.0), cols: taps_1d(out_w, w, 2.0) })
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut tmp = vec![0.0; self.e * self.h * self.out_w];
        for c in 0..self.e {
            for r in 0..self.h {
                let src = &x[(c * self.h + r) * self.w..(c * self.h + r + 1) * self.w];
                let dst = &mut tmp[(c * self.h + r) * self.out_w..(c * self.h + r + 1) * self.out_w];
                for (o, (idx, w)) in dst.iter_mut().zip(&self.cols) {
                    *o = (0..4).map(|k| w[k] * src[idx[k]]).sum();
                }
            }
        }
        let mut out = vec![0.0; self.e * self.out_h * self.out_w];
        for c in 0..self.e {
            for (i, (idx, w)) in self.rows.iter().enumerate() {
                let dst = &mut out[(c * self.out_h + i) * self.out_w..(c * self.out_h + i + 1) * self.out_w];
                for k in 0..4 {
                    let src = &tmp[(c * self.h + idx[k]) * self.out_w..(c * self.h + idx[k] + 1) * self.out_w];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += w[k] * s;
                    }
                }
            }
        }
        out
    }
}

impl Backward for Upsampler {
    fn name(&self) -> &'static str {
        "upsample_bicubic"
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut tmp = vec![0.0; self.e * self.h * self.out_w];
        for c in 0..self.e {
            for (i, (idx, w)) in self.rows.iter().enumerate() {
                let g = &grad[(c * self.out_h + i) * self.out_w..(c * self.out_h + i + 1) * self.out_w];
                for k in 0..4 {
                    let dst = &mut tmp[(c * self.h + idx[k]) * self.out_w..(c * self.h + idx[k] + 1) * self.out_w];
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += w[k] * gv;
                    }
                }
            }
        }
        let mut dx = vec![0.0; self.e * self.h * self.w];
        for c in 0..self.e {
            for r in 0..self.h {
                let g = &tmp[(c * self.h + r) * self.out_w..(c * self.h + r + 1) * self.out_w];
                let dst = &mut dx[(c * self.h + r) * self.w..(c * self.h + r + 1) * self.w];
                for (gv, (idx, w)) in g.iter().zip(&self.cols) {
                    for k in 0..4 {
                        dst[idx[k]] += w[k] * gv;
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Factor-2 bicubic upsampling of `c[E×h×w]` to `[E×out_h×out_w]`
/// (`out_h ≤ 2h`, `out_w ≤ 2w`; the excess row/column is cropped).
pub fn upsample_bicubic(c: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let up = Upsampler::new(c.shape(), out_h, out_w)?;
    Tensor::new(&[up.e, out_h, out_w], up.forward(c.data()))
}

pub fn upsample_bicubic_op(tape: &mut Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let up = Upsampler::new(tape.shape(x), out_h, out_w)?;
    let out = up.forward(tape.value(x));
    let shape = vec![up.e, out_h, out_w];
    tape.custom(&[x], out, shape, Box::new(up))
}

// ---------------------------------------------------------------------------
// Attention and the full block

/// `α = sigmoid(W2 · relu(W1 · maxpool(c)))`, one weight per channel of `c[E×H×W]`.
pub fn channel_attention(tape: &mut Tape, c: Var, w1: Var, w2: Var) -> Result<Var> {
    let e = tape.shape(c)[0];
    let pooled = tape.global_max_pool(c)?;
    let col = tape.reshape(pooled, &[e, 1])?;
    let hidden = tape.matmul(w1, col)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.matmul(w2, hidden)?;
    let alpha = tape.sigmoid(logits)?;
    tape.reshape(alpha, &[e])
}

struct ChannelScale {
    plane: usize,
}

impl Backward for ChannelScale {
    fn name(&self) -> &'static str {
        "scale_channels"
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, alpha) = (inputs[0], inputs[1]);
        let planes = || grad.chunks(self.plane).zip(x.chunks(self.plane));
        let gx = needs[0].then(|| {
            grad.chunks(self.plane).zip(alpha).flat_map(|(g, &a)| g.iter().map(move |v| v * a)).collect()
        });
        let galpha = needs[1].then(|| planes().map(|(g, xs)| g.iter().zip(xs).map(|(a, b)| a * b).sum()).collect());
        vec![gx, galpha]
    }
}

/// Scale each channel of `x[E×H×W]` by `alpha[E]`.
pub fn scale_channels(tape: &mut Tape, x: Var, alpha: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || tape.shape(alpha) != [shape[0]] {
        return Err(shape_err("scale_channels", format!("x {shape:?}, alpha {:?}", tape.shape(alpha))));
    }
    let plane = shape[1] * shape[2];
    let out = tape.value(x).chunks(plane).zip(tape.value(alpha)).flat_map(|(c, &a)| c.iter().map(move |v| v * a)).collect();
    tape.custom(&[x, alpha], out, shape, Box::new(ChannelScale { plane }))
}

struct ValueEmbed {
    e: usize,
    l: usize,
    v: usize,
}

impl Backward for ValueEmbed {
    fn name(&self) -> &'static str {
        "value_embed"
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (patch, w) = (inputs[0], inputs[1]);
        let ValueEmbed { e, l, v } = *self;
        let mut gp = needs[0].then(|| vec![0.0; l * v]);
        let mut gw = needs[1].then(|| vec![0.0; e * v]);
        for c in 0..e {
            let wc = &w[c * v..(c + 1) * v];
            for t in 0..l {
                let g = &grad[(c * l + t) * v..(c * l + t + 1) * v];
                let p = &patch[t * v..(t + 1) * v];
                if let Some(gp) = gp.as_mut() {
                    for ((d, gv), wv) in gp[t * v..(t + 1) * v].iter_mut().zip(g).zip(wc) {
                        *d += gv * wv;
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for ((d, gv), pv) in gw[c * v..(c + 1) * v].iter_mut().zip(g).zip(p) {
                        *d += gv * pv;
                    }
                }
            }
        }
        vec![gp, gw]
    }
}

/// `F_chan[e,t,v] = w[e,v]·P[t,v]`: a width-1 convolution over time that
/// keeps the electrode axis.
pub fn value_embed(tape: &mut Tape, patch: Var, w: Var) -> Result<Var> {
    let (&[l, v], &[e, wv]) = (tape.shape(patch), tape.shape(w)) else {
        return Err(shape_err("value_embed", format!("patch {:?}, kernel {:?}", tape.shape(patch), tape.shape(w))));
    };
    if wv != v {
        return Err(shape_err("value_embed", format!("patch has {v} electrodes, kernel {wv}")));
    }
    let (p, wk) = (tape.value(patch), tape.value(w));
    let mut out = Vec::with_capacity(e * l * v);
    for c in 0..e {
        for t in 0..l {
            out.extend(p[t * v..(t + 1) * v].iter().zip(&wk[c * v..(c + 1) * v]).map(|(a, b)| a * b));
        }
    }
    tape.custom(&[patch, w], out, vec![e, l, v], Box::new(ValueEmbed { e, l, v }))
}

/// Intermediate maps of one forward pass, for inspection and tests.
#[derive(Clone, Copy, Debug)]
pub struct WtfmTrace {
    pub fine: Var,
    pub coarse: Var,
    pub bands: [Var; 4],
    pub modulation: Var,
    pub modulated: Var,
    pub value: Var,
}

/// Fused features `Z[(2E + E_chan)×L×V]` for one patch `P[L×V]`.
pub fn wtfm_forward(tape: &mut Tape, cfg: &WtfmConfig, p: &WtfmVars, patch: Var) -> Result<(Var, WtfmTrace)> {
    let (l, v) = match *tape.shape(patch) {
        [l, v] if v == cfg.electrodes => (l, v),
        ref s => return Err(shape_err("wtfm", format!("patch {s:?} vs {} electrodes", cfg.electrodes))),
    };
    let x = tape.reshape(patch, &[1, l, v])?;
    let fine = tape.conv2d(x, p.small_kernels)?;
    let coarse = tape.conv2d(x, p.large_kernels)?;
    let bands = dwt2_haar_op(tape, fine)?;
    let used = if cfg.detail_bands { &bands[..] } else { &bands[..1] };
    let mut weighted = Vec::with_capacity(4);
    for &band in used {
        let up = upsample_bicubic_op(tape, band, l, v)?;
        let scaled = if cfg.attention {
            let alpha = channel_attention(tape, up, p.attn_w1, p.attn_w2)?;
            scale_channels(tape, up, alpha)?
        } else {
            up
        };
        weighted.push(scaled);
    }
    let modulation = tape.add_n(&weighted)?;
    let modulated = tape.mul(coarse, modulation)?;

    let value = value_embed(tape, patch, p.value_embed)?;

    let z = tape.concat(&[modulated, fine, value], 0)?;
    debug_assert_eq!(tape.shape(z), &[cfg.output_channels(), l, v]);
    Ok((z, WtfmTrace { fine, coarse, bands, modulation, modulated, value }))
}
