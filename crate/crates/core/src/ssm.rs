//! Selective state-space block.
//!
//! The scan is a fused tape operation. When gradients are needed the forward
//! pass records the hidden states and transition factors, and the backward
//! pass runs the adjoint recurrence in reverse over them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{sigmoid, softplus, Backward, Padding, Tape, Tensor, Var};

/// Below this `|Δ·a|` the input coefficient uses its Taylor series.
const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_model: usize,
    /// State size per channel (N).
    pub state: usize,
    /// Inner width multiplier.
    pub expand: usize,
    pub conv_width: usize,
}

impl SsmConfig {
    pub fn new(d_model: usize, state: usize) -> Self {
        Self { d_model, state, expand: 4, conv_width: 4 }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.state == 0 || self.expand == 0 || self.conv_width == 0 {
            return Err(Error::Config("SSM sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Zero-order-hold discretization of one diagonal row.
///
/// Returns `(Ā, B̄)` with `Ā = exp(Δa)` and `B̄ = (exp(Δa) − 1)/(Δa) · Δ · b`.
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(shape_err("zoh_discretize", format!("A has {} entries, B has {}", a.len(), b.len())));
    }
    let abar = a.iter().map(|&an| (delta * an).exp()).collect();
    let bbar = a.iter().zip(b).map(|(&an, &bn)| input_gain(delta, an) * bn).collect();
    Ok((abar, bbar))
}

/// Beyond this `|z|`, `e^z − 1` is taken from an already computed `e^z`
/// (the cancellation costs at most a few ulps there).
const DIRECT_THRESHOLD: f64 = 0.5;

fn phi(z: f64) -> f64 {
    phi_from_exp(z, z.exp())
}

/// `φ(z) = (e^z − 1)/z` given `ez = e^z`.
fn phi_from_exp(z: f64, ez: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else if z.abs() < DIRECT_THRESHOLD {
        z.exp_m1() / z
    } else {
        (ez - 1.0) / z
    }
}

/// `ψ(Δ, a) = Δ·φ(Δa)`, the coefficient multiplying `b·x`.
fn input_gain(delta: f64, a: f64) -> f64 {
    delta * phi(delta * a)
}

/// `∂ψ/∂a = Δ²·(z e^z − e^z + 1)/z²` with `z = Δa`.
#[cfg(test)]
fn input_gain_da(delta: f64, a: f64) -> f64 {
    let z = delta * a;
    input_gain_da_from_exp(delta, z, z.exp())
}

fn input_gain_da_from_exp(delta: f64, z: f64, ez: f64) -> f64 {
    let g = if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else if z.abs() < DIRECT_THRESHOLD {
        (z * ez - z.exp_m1()) / (z * z)
    } else {
        (z * ez - ez + 1.0) / (z * z)
    };
    delta * delta * g
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmCore {
    /// Log-magnitude of the diagonal state matrix, `A = −exp(a_log)`, `[D×N]`.
    pub a_log: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    /// `[1×D]`
    pub w_delta: Tensor,
    pub d_skip: Tensor,
}

impl SsmCore {
    pub fn init(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            a_log: Tensor::from_fn(&[d, n], |k| ((k % n) as f64 + 1.0).ln()),
            w_b: Tensor::from_fn(&[n, d], |_| rng.random_range(-bound..bound)),
            w_c: Tensor::from_fn(&[n, d], |_| rng.random_range(-bound..bound)),
            w_delta: Tensor::from_fn(&[1, d], |_| rng.random_range(-bound..bound)),
            d_skip: Tensor::full(&[d], 1.0),
        }
    }

    /// `A = −exp(a_log)`.
    pub fn a(&self) -> Tensor {
        Tensor::from_fn(self.a_log.shape(), |k| -self.a_log.data()[k].exp())
    }
}

/// Per-step selective parameters `(S_B, S_C, S_Δ)` for one input row.
pub fn selective_params(x_t: &[f64], core: &SsmCore) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = x_t.len();
    let n = core.w_b.shape()[0];
    let project = |w: &Tensor, row: usize| -> f64 { w.data()[row * d..(row + 1) * d].iter().zip(x_t).map(|(a, b)| a * b).sum() };
    let sb = (0..n).map(|i| project(&core.w_b, i)).collect();
    let sc = (0..n).map(|i| project(&core.w_c, i)).collect();
    let delta = softplus(project(&core.w_delta, 0));
    (sb, sc, vec![delta; d])
}

#[derive(Clone, Copy)]
struct ScanDims {
    t: usize,
    d: usize,
    n: usize,
}

impl ScanDims {
    fn check(x: &[usize], a_log: &[usize], w_b: &[usize], w_c: &[usize], w_delta: &[usize], d_skip: &[usize]) -> Result<Self> {
        let (t, d) = match *x {
            [t, d] => (t, d),
            _ => return Err(shape_err("selective_scan", format!("x must be [T,D], got {x:?}"))),
        };
        let n = a_log.get(1).copied().unwrap_or(0);
        let ok = a_log == [d, n] && w_b == [n, d] && w_c == [n, d] && w_delta == [1, d] && d_skip == [d] && n > 0;
        if !ok {
            return Err(shape_err(
                "selective_scan",
                format!("x {x:?}, A {a_log:?}, W_B {w_b:?}, W_C {w_c:?}, W_Δ {w_delta:?}, D {d_skip:?}"),
            ));
        }
        Ok(Self { t, d, n })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-step quantities shared by the forward and backward passes.
struct Step {
    sb: Vec<f64>,
    sc: Vec<f64>,
    s: f64,
    delta: f64,
}

impl Step {
    fn new(n: usize) -> Self {
        Self { sb: vec![0.0; n], sc: vec![0.0; n], s: 0.0, delta: 0.0 }
    }

    fn update(&mut self, xt: &[f64], w_b: &[f64], w_c: &[f64], w_delta: &[f64]) {
        let d = xt.len();
        for (i, (b, c)) in self.sb.iter_mut().zip(self.sc.iter_mut()).enumerate() {
            *b = dot(&w_b[i * d..(i + 1) * d], xt);
            *c = dot(&w_c[i * d..(i + 1) * d], xt);
        }
        self.s = dot(w_delta, xt);
        self.delta = softplus(self.s);
    }
}

/// Hidden states and transition factors recorded during a replay.
struct ScanCache {
    states: Vec<f64>,
    abar: Vec<f64>,
}

/// Runs the recurrence; when `cache` is given, stores every `h_t` and `Ā_t` in it.
fn scan_forward(inputs: &[&[f64]], dims: ScanDims, mut cache: Option<&mut ScanCache>) -> Vec<f64> {
    let [x, a_log, w_b, w_c, w_delta, d_skip] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]];
    let ScanDims { t, d, n } = dims;
    let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; t * d];
    let mut p = Step::new(n);
    for step in 0..t {
        let xt = &x[step * d..(step + 1) * d];
        p.update(xt, w_b, w_c, w_delta);
        for c in 0..d {
            let hc = &mut h[c * n..(c + 1) * n];
            let ac = &a[c * n..(c + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                let z = p.delta * ac[j];
                let abar = z.exp();
                hc[j] = abar * hc[j] + p.delta * phi_from_exp(z, abar) * p.sb[j] * xt[c];
                acc += p.sc[j] * hc[j];
                if let Some(cache) = cache.as_deref_mut() {
                    cache.abar.push(abar);
                }
            }
            y[step * d + c] = acc + d_skip[c] * xt[c];
        }
        if let Some(cache) = cache.as_deref_mut() {
            cache.states.extend_from_slice(&h);
        }
    }
    y
}

struct ScanBackward {
    dims: ScanDims,
    cache: ScanCache,
}

impl Backward for ScanBackward {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], gy: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let ScanDims { t, d, n } = self.dims;
        let [x, a_log, w_b, w_c, w_delta, d_skip] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], inputs[5]];
        let cache = &self.cache;
        let states = &cache.states;
        let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();

        let mut gx = vec![0.0; t * d];
        let mut ga_log = vec![0.0; d * n];
        let mut gw_b = vec![0.0; n * d];
        let mut gw_c = vec![0.0; n * d];
        let mut gw_delta = vec![0.0; d];
        let mut gd_skip = vec![0.0; d];
        // gradient w.r.t. h_t flowing back from later steps
        let mut carry = vec![0.0; d * n];
        let zeros = vec![0.0; d * n];

        let mut p = Step::new(n);
        let (mut gsb, mut gsc) = (vec![0.0; n], vec![0.0; n]);
        for step in (0..t).rev() {
            let xt = &x[step * d..(step + 1) * d];
            let gyt = &gy[step * d..(step + 1) * d];
            p.update(xt, w_b, w_c, w_delta);
            let h_now = &states[step * d * n..(step + 1) * d * n];
            let h_prev = if step > 0 { &states[(step - 1) * d * n..step * d * n] } else { &zeros[..] };
            gsb.fill(0.0);
            gsc.fill(0.0);
            let mut gdelta = 0.0;
            for c in 0..d {
                gd_skip[c] += gyt[c] * xt[c];
                gx[step * d + c] += gyt[c] * d_skip[c];
                for j in 0..n {
                    let k = c * n + j;
                    let (aj, hp) = (a[k], h_prev[k]);
                    let z = p.delta * aj;
                    let abar = cache.abar[step * d * n + k];
                    let psi = p.delta * phi_from_exp(z, abar);
                    let gh = carry[k] + gyt[c] * p.sc[j];
                    gsc[j] += gyt[c] * h_now[k];
                    // h = abar·hp + psi·sb·x
                    let gabar = gh * hp;
                    let gpsi = gh * p.sb[j] * xt[c];
                    gx[step * d + c] += gh * psi * p.sb[j];
                    gsb[j] += gh * psi * xt[c];
                    gdelta += gabar * aj * abar + gpsi * abar;
                    ga_log[k] += (gabar * p.delta * abar + gpsi * input_gain_da_from_exp(p.delta, z, abar)) * aj;
                    carry[k] = gh * abar;
                }
            }
            let gs = gdelta * sigmoid(p.s);
            let gxt = &mut gx[step * d..(step + 1) * d];
            for c in 0..d {
                gw_delta[c] += gs * xt[c];
                gxt[c] += gs * w_delta[c];
            }
            for j in 0..n {
                for c in 0..d {
                    gw_b[j * d + c] += gsb[j] * xt[c];
                    gw_c[j * d + c] += gsc[j] * xt[c];
                    gxt[c] += gsb[j] * w_b[j * d + c] + gsc[j] * w_c[j * d + c];
                }
            }
        }
        [gx, ga_log, gw_b, gw_c, gw_delta, gd_skip]
            .into_iter()
            .zip(needs)
            .map(|(g, &need)| need.then_some(g))
            .collect()
    }
}

/// Tape handles of an [`SsmCore`].
#[derive(Clone, Copy, Debug)]
pub struct SsmCoreVars {
    pub a_log: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_delta: Var,
    pub d_skip: Var,
}

/// Selective scan over `x[T×D]` with `h_0 = 0`.
pub fn selective_scan_op(tape: &mut Tape, x: Var, core: &SsmCoreVars) -> Result<Var> {
    let ins = [x, core.a_log, core.w_b, core.w_c, core.w_delta, core.d_skip];
    let dims = {
        let s: Vec<&[usize]> = ins.iter().map(|&v| tape.shape(v)).collect();
        ScanDims::check(s[0], s[1], s[2], s[3], s[4], s[5])?
    };
    let values: Vec<&[f64]> = ins.iter().map(|&v| tape.value(v)).collect();
    let tracked = ins.iter().any(|&v| tape.requires_grad(v));
    let size = if tracked { dims.t * dims.d * dims.n } else { 0 };
    let mut cache = ScanCache { states: Vec::with_capacity(size), abar: Vec::with_capacity(size) };
    let y = scan_forward(&values, dims, tracked.then_some(&mut cache));
    tape.custom(&ins, y, vec![dims.t, dims.d], Box::new(ScanBackward { dims, cache }))
}

/// Untracked selective scan.
pub fn selective_scan(x: &Tensor, core: &SsmCore) -> Result<Tensor> {
    let dims = ScanDims::check(
        x.shape(),
        core.a_log.shape(),
        core.w_b.shape(),
        core.w_c.shape(),
        core.w_delta.shape(),
        core.d_skip.shape(),
    )?;
    let inputs = [x.data(), core.a_log.data(), core.w_b.data(), core.w_c.data(), core.w_delta.data(), core.d_skip.data()];
    Tensor::new(&[dims.t, dims.d], scan_forward(&inputs, dims, None))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams {
    /// `[D_model × 2·D_inner]`, signal branch first.
    pub in_proj: Tensor,
    /// `[D_inner × width]`
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    pub core: SsmCore,
    /// `[D_inner × D_model]`
    pub out_proj: Tensor,
}

impl MambaBlockParams {
    pub fn init(cfg: &SsmConfig, rng: &mut ChaCha8Rng) -> Self {
        let (dm, di) = (cfg.d_model, cfg.d_inner());
        let bound_in = 1.0 / (dm as f64).sqrt();
        let bound_conv = 1.0 / (cfg.conv_width as f64).sqrt();
        let bound_out = 1.0 / (di as f64).sqrt();
        let in_proj = Tensor::from_fn(&[dm, 2 * di], |_| rng.random_range(-bound_in..bound_in));
        let conv_kernel = Tensor::from_fn(&[di, cfg.conv_width], |_| rng.random_range(-bound_conv..bound_conv));
        let core = SsmCore::init(di, cfg.state, rng);
        let out_proj = Tensor::from_fn(&[di, dm], |_| rng.random_range(-bound_out..bound_out));
        Self { in_proj, conv_kernel, conv_bias: Tensor::zeros(&[di]), core, out_proj }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("in_proj", &self.in_proj),
            ("conv_kernel", &self.conv_kernel),
            ("conv_bias", &self.conv_bias),
            ("a_log", &self.core.a_log),
            ("w_b", &self.core.w_b),
            ("w_c", &self.core.w_c),
            ("w_delta", &self.core.w_delta),
            ("d_skip", &self.core.d_skip),
            ("out_proj", &self.out_proj),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("in_proj", &mut self.in_proj),
            ("conv_kernel", &mut self.conv_kernel),
            ("conv_bias", &mut self.conv_bias),
            ("a_log", &mut self.core.a_log),
            ("w_b", &mut self.core.w_b),
            ("w_c", &mut self.core.w_c),
            ("w_delta", &mut self.core.w_delta),
            ("d_skip", &mut self.core.d_skip),
            ("out_proj", &mut self.out_proj),
        ]
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> MambaVars {
        MambaVars {
            in_proj: tape.param(&self.in_proj),
            conv_kernel: tape.param(&self.conv_kernel),
            conv_bias: tape.param(&self.conv_bias),
            core: SsmCoreVars {
                a_log: tape.param(&self.core.a_log),
                w_b: tape.param(&self.core.w_b),
                w_c: tape.param(&self.core.w_c),
                w_delta: tape.param(&self.core.w_delta),
                d_skip: tape.param(&self.core.d_skip),
            },
            out_proj: tape.param(&self.out_proj),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MambaVars {
    pub in_proj: Var,
    pub conv_kernel: Var,
    pub conv_bias: Var,
    pub core: SsmCoreVars,
    pub out_proj: Var,
}

/// `out_proj(scan(silu(conv(u))) ⊙ silu(g)) + x` for `x[T×D_model]`.
pub fn mamba_block(tape: &mut Tape, p: &MambaVars, x: Var) -> Result<Var> {
    let t = match *tape.shape(x) {
        [t, _] => t,
        ref s => return Err(shape_err("mamba_block", format!("x must be [T,D], got {s:?}"))),
    };
    let di = tape.shape(p.conv_kernel)[0];
    let proj = tape.matmul(x, p.in_proj)?;
    let u = tape.narrow(proj, 1, 0, di)?;
    let g = tape.narrow(proj, 1, di, di)?;
    let ut = tape.transpose(u)?;
    let conv = tape.conv1d(ut, p.conv_kernel, Padding::Causal)?;
    let bias = tape.expand(p.conv_bias, 1, t)?;
    let conv = tape.add(conv, bias)?;
    let conv = tape.silu(conv)?;
    let u = tape.transpose(conv)?;
    let y = selective_scan_op(tape, u, &p.core)?;
    let gate = tape.silu(g)?;
    let y = tape.mul(y, gate)?;
    let out = tape.matmul(y, p.out_proj)?;
    tape.add(out, x)
}
