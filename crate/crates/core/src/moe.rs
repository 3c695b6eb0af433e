//! Noisy top-k mixture of selective state-space experts.
//!
//! Each patch is one routing token: its embedding is mean-pooled over time,
//! scored by the gate, and the whole patch goes to the selected experts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ssm::{mamba_block, MambaBlockParams, MambaVars, SsmConfig};
use crate::tensor::{logsumexp_slice, sigmoid, softplus, Backward, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    /// Number of experts (η).
    pub experts: usize,
    /// Experts kept per token.
    pub top_k: usize,
    pub lambda_balance: f64,
    pub lambda_z: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self { experts: 2, top_k: 2, lambda_balance: 0.01, lambda_z: 0.001 }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!("need 1 <= k <= experts, got k={} with {} experts", self.top_k, self.experts)));
        }
        if !(self.lambda_balance >= 0.0 && self.lambda_z >= 0.0) {
            return Err(Error::Config("auxiliary loss scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub experts: Vec<MambaBlockParams>,
    /// `[D_model×η]`
    pub w_gate: Tensor,
    /// `[D_model×η]`
    pub w_noise: Tensor,
}

impl MoeParams {
    /// Gate weights start near zero and the noise projection at zero, so
    /// routing begins close to uniform.
    pub fn init(cfg: &MoeConfig, ssm: &SsmConfig, rng: &mut ChaCha8Rng) -> Self {
        let experts = (0..cfg.experts).map(|_| MambaBlockParams::init(ssm, rng)).collect();
        let bound = 0.1 / (ssm.d_model as f64).sqrt();
        Self {
            experts,
            w_gate: Tensor::from_fn(&[ssm.d_model, cfg.experts], |_| rng.random_range(-bound..bound)),
            w_noise: Tensor::zeros(&[ssm.d_model, cfg.experts]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_gate".to_string(), &self.w_gate), ("w_noise".to_string(), &self.w_noise)];
        for (i, e) in self.experts.iter().enumerate() {
            out.extend(e.named().into_iter().map(|(n, t)| (format!("expert{i}.{n}"), t)));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("w_gate".to_string(), &mut self.w_gate), ("w_noise".to_string(), &mut self.w_noise)];
        for (i, e) in self.experts.iter_mut().enumerate() {
            out.extend(e.named_mut().into_iter().map(|(n, t)| (format!("expert{i}.{n}"), t)));
        }
        out
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> MoeVars {
        MoeVars {
            w_gate: tape.param(&self.w_gate),
            w_noise: tape.param(&self.w_noise),
            experts: self.experts.iter().map(|e| e.bind(tape)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MoeVars {
    pub w_gate: Var,
    pub w_noise: Var,
    pub experts: Vec<MambaVars>,
}

/// Indices of the `k` largest entries, ties resolved toward the lower index.
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax over the top-k entries of each row of `h[M×η]`; the rest are 0.
pub fn topk_softmax(h: &Tensor, k: usize) -> Result<Tensor> {
    let (m, e) = rows(h.shape(), "topk_softmax")?;
    if k == 0 || k > e {
        return Err(Error::Config(format!("top-k of {k} over {e} experts")));
    }
    Tensor::new(&[m, e], topk_softmax_raw(h.data(), m, e, k))
}

fn rows(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match *shape {
        [m, e] if m > 0 && e > 0 => Ok((m, e)),
        _ => Err(shape_err(op, format!("expected non-empty [M,η], got {shape:?}"))),
    }
}

fn topk_softmax_raw(h: &[f64], m: usize, e: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * e];
    for r in 0..m {
        let row = &h[r * e..(r + 1) * e];
        let keep = top_k_indices(row, k);
        let top = row[keep[0]];
        let denom: f64 = keep.iter().map(|&i| (row[i] - top).exp()).sum();
        for &i in &keep {
            out[r * e + i] = (row[i] - top).exp() / denom;
        }
    }
    out
}

struct TopKSoftmaxBackward {
    m: usize,
    e: usize,
}

impl Backward for TopKSoftmaxBackward {
    fn name(&self) -> &'static str {
        "topk_softmax"
    }

    fn backward(&self, _: &[&[f64]], w: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut dh = vec![0.0; self.m * self.e];
        for r in 0..self.m {
            let (wr, gr) = (&w[r * self.e..(r + 1) * self.e], &g[r * self.e..(r + 1) * self.e]);
            let dot: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for i in 0..self.e {
                dh[r * self.e + i] = wr[i] * (gr[i] - dot);
            }
        }
        vec![Some(dh)]
    }
}

pub fn topk_softmax_op(tape: &mut Tape, h: Var, k: usize) -> Result<Var> {
    let (m, e) = rows(tape.shape(h), "topk_softmax")?;
    if k == 0 || k > e {
        return Err(Error::Config(format!("top-k of {k} over {e} experts")));
    }
    let out = topk_softmax_raw(tape.value(h), m, e, k);
    tape.custom(&[h], out, vec![m, e], Box::new(TopKSoftmaxBackward { m, e }))
}

/// Standard normal CDF.
pub fn normal_cdf(u: f64) -> f64 {
    0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)
}

fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// The k-th largest entry of `row` other than `skip`, with its index;
/// `None` when fewer than `k` entries remain.
fn kth_excluding(row: &[f64], k: usize, skip: usize) -> Option<(usize, f64)> {
    let mut rest: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    if rest.len() < k {
        return None;
    }
    rest.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let j = rest[k - 1];
    Some((j, row[j]))
}

/// Smooth per-expert load: `Σ_m Φ((clean_mi − kth_excluding_i(H_m)) / softplus(noise_mi))`.
pub fn load_estimate(clean: &Tensor, noise_logits: &Tensor, h: &Tensor, k: usize) -> Result<Tensor> {
    let (m, e) = rows(clean.shape(), "load_estimate")?;
    if noise_logits.shape() != [m, e] || h.shape() != [m, e] {
        return Err(shape_err("load_estimate", "clean, noise and H must share a shape"));
    }
    Tensor::new(&[e], load_raw(clean.data(), noise_logits.data(), h.data(), m, e, k))
}

fn load_raw(clean: &[f64], noise: &[f64], h: &[f64], m: usize, e: usize, k: usize) -> Vec<f64> {
    let mut load = vec![0.0; e];
    for r in 0..m {
        let row = &h[r * e..(r + 1) * e];
        for (i, l) in load.iter_mut().enumerate() {
            *l += match kth_excluding(row, k, i) {
                None => 1.0,
                Some((_, thr)) => normal_cdf((clean[r * e + i] - thr) / softplus(noise[r * e + i])),
            };
        }
    }
    load
}

struct LoadBackward {
    m: usize,
    e: usize,
    k: usize,
}

impl Backward for LoadBackward {
    fn name(&self) -> &'static str {
        "load_estimate"
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (clean, noise, h) = (inputs[0], inputs[1], inputs[2]);
        let (m, e) = (self.m, self.e);
        let mut dc = vec![0.0; m * e];
        let mut dn = vec![0.0; m * e];
        let mut dh = vec![0.0; m * e];
        for r in 0..m {
            let row = &h[r * e..(r + 1) * e];
            for i in 0..e {
                let Some((j, thr)) = kth_excluding(row, self.k, i) else { continue };
                let idx = r * e + i;
                let s = softplus(noise[idx]);
                let u = (clean[idx] - thr) / s;
                let p = normal_pdf(u) * g[i];
                dc[idx] += p / s;
                dh[r * e + j] -= p / s;
                dn[idx] -= p * u / s * sigmoid(noise[idx]);
            }
        }
        [dc, dn, dh].into_iter().zip(needs).map(|(d, &need)| need.then_some(d)).collect()
    }
}

pub fn load_estimate_op(tape: &mut Tape, clean: Var, noise_logits: Var, h: Var, k: usize) -> Result<Var> {
    let (m, e) = rows(tape.shape(clean), "load_estimate")?;
    if tape.shape(noise_logits) != [m, e] || tape.shape(h) != [m, e] {
        return Err(shape_err("load_estimate", "clean, noise and H must share a shape"));
    }
    let out = load_raw(tape.value(clean), tape.value(noise_logits), tape.value(h), m, e, k);
    tape.custom(&[clean, noise_logits, h], out, vec![e], Box::new(LoadBackward { m, e, k }))
}

/// Squared coefficient of variation with population variance; 0 for an
/// all-zero load.
pub fn cv_squared(load: &[f64]) -> f64 {
    let n = load.len() as f64;
    let mean = load.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = load.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

pub fn balance_loss(load: &[f64], lambda: f64) -> f64 {
    lambda * cv_squared(load)
}

struct CvBackward;

impl Backward for CvBackward {
    fn name(&self) -> &'static str {
        "cv_squared"
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let load = inputs[0];
        let n = load.len() as f64;
        let mean = load.iter().sum::<f64>() / n;
        if mean == 0.0 {
            return vec![Some(vec![0.0; load.len()])];
        }
        let var = load.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        let d = load.iter().map(|l| g[0] * (2.0 * (l - mean) / (n * mean * mean) - 2.0 * var / (n * mean.powi(3)))).collect();
        vec![Some(d)]
    }
}

pub fn cv_squared_op(tape: &mut Tape, load: Var) -> Result<Var> {
    if tape.shape(load).len() != 1 {
        return Err(shape_err("cv_squared", format!("load must be a vector, got {:?}", tape.shape(load))));
    }
    let v = cv_squared(tape.value(load));
    tape.custom(&[load], vec![v], vec![], Box::new(CvBackward))
}

/// `(1/M) Σ_m logsumexp(logits_m)²`.
pub fn z_loss(logits: &Tensor) -> Result<f64> {
    let (m, e) = rows(logits.shape(), "z_loss")?;
    let total: f64 = (0..m).map(|r| logsumexp_slice(logits.data()[r * e..(r + 1) * e].iter().copied()).powi(2)).sum();
    Ok(total / m as f64)
}

pub fn z_loss_op(tape: &mut Tape, logits: Var) -> Result<Var> {
    rows(tape.shape(logits), "z_loss")?;
    let lse = tape.logsumexp(logits, 1)?;
    let sq = tape.mul(lse, lse)?;
    tape.mean(sq)
}

/// Gate output for one batch of tokens.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub clean: Var,
    pub weights: Var,
    /// Smooth load while training, hard selection counts otherwise.
    pub load: Var,
    pub balance: Var,
    pub z: Var,
    /// `λ_B·L_B + λ_Z·L_Z`
    pub aux: Var,
}

/// Noisy top-k gate over `tokens[M×D]`. Noise is drawn only when `rng` is given.
pub fn gate(tape: &mut Tape, cfg: &MoeConfig, p: &MoeVars, tokens: Var, rng: Option<&mut ChaCha8Rng>) -> Result<GateVars> {
    let clean = tape.matmul(tokens, p.w_gate)?;
    let (m, e) = rows(tape.shape(clean), "gate")?;
    let (h, smooth) = match rng {
        Some(rng) => {
            let noise_logits = tape.matmul(tokens, p.w_noise)?;
            let scale = tape.softplus(noise_logits)?;
            let eps = Tensor::from_fn(&[m, e], |_| StandardNormal.sample(rng));
            let eps = tape.constant(eps);
            let noise = tape.mul(eps, scale)?;
            let h = tape.add(clean, noise)?;
            let load = load_estimate_op(tape, clean, noise_logits, h, cfg.top_k)?;
            (h, Some(load))
        }
        None => (clean, None),
    };
    let weights = topk_softmax_op(tape, h, cfg.top_k)?;
    let load = match smooth {
        Some(load) => load,
        None => {
            let w = tape.value(weights);
            let counts = (0..e).map(|i| (0..m).filter(|&r| w[r * e + i] > 0.0).count() as f64).collect();
            tape.constant(Tensor::new(&[e], counts)?)
        }
    };
    let balance = cv_squared_op(tape, load)?;
    let z = z_loss_op(tape, clean)?;
    let b = tape.scale(balance, cfg.lambda_balance)?;
    let zz = tape.scale(z, cfg.lambda_z)?;
    let aux = tape.add(b, zz)?;
    Ok(GateVars { clean, weights, load, balance, z, aux })
}

/// Result of routing a batch of patches through one mixture layer.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub outputs: Vec<Var>,
    pub gate: GateVars,
}

/// Route each patch `xs[m]` (`[L×D]`) to its selected experts and combine.
/// Experts with zero weight for a patch are never evaluated for it.
pub fn moe_forward(tape: &mut Tape, cfg: &MoeConfig, p: &MoeVars, xs: &[Var], rng: Option<&mut ChaCha8Rng>) -> Result<MoeOutput> {
    if xs.is_empty() {
        return Err(Error::Usage("mixture layer needs at least one token".into()));
    }
    let mut pooled = Vec::with_capacity(xs.len());
    for &x in xs {
        let d = *tape.shape(x).last().unwrap_or(&0);
        let mean = tape.mean_axis(x, 0)?;
        pooled.push(tape.reshape(mean, &[1, d])?);
    }
    let tokens = tape.concat(&pooled, 0)?;
    let g = gate(tape, cfg, p, tokens, rng)?;
    let e = cfg.experts;
    let mut outputs = Vec::with_capacity(xs.len());
    for (r, &x) in xs.iter().enumerate() {
        let mut parts = Vec::with_capacity(cfg.top_k);
        for i in 0..e {
            if tape.value(g.weights)[r * e + i] == 0.0 {
                continue;
            }
            let w = tape.pick(g.weights, r * e + i)?;
            let y = mamba_block(tape, &p.experts[i], x)?;
            parts.push(tape.mul_scalar_var(y, w)?);
        }
        outputs.push(if parts.len() == 1 { parts[0] } else { tape.add_n(&parts)? });
    }
    Ok(MoeOutput { outputs, gate: g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::gradient_check;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Data, 0);
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    #[test]
    fn top_k_examples() {
        let w = topk_softmax(&Tensor::new(&[1, 2], vec![2.0, 1.0]).unwrap(), 1).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0]);
        let h = random(&[5, 3], 1, 2.0);
        let dense = topk_softmax(&h, 3).unwrap();
        for r in 0..5 {
            let row = &h.data()[r * 3..r * 3 + 3];
            let lse = logsumexp_slice(row.iter().copied());
            for i in 0..3 {
                assert!((dense.data()[r * 3 + i] - (row[i] - lse).exp()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn top_k_gradient() {
        let h = random(&[4, 5], 2, 2.0);
        let errs = gradient_check(&[h], 1e-6, |t, v| topk_softmax_op(t, v[0], 2)).unwrap();
        assert!(errs[0] < 1e-6, "{errs:?}");
    }

    #[test]
    fn load_examples() {
        let clean = random(&[6, 2], 3, 1.0);
        let noise = random(&[6, 2], 4, 1.0);
        let load = load_estimate(&clean, &noise, &clean, 2).unwrap();
        assert_eq!(load.data(), &[6.0, 6.0]);

        let sym = Tensor::full(&[4, 2], 0.3);
        let load = load_estimate(&sym, &Tensor::zeros(&[4, 2]), &sym, 1).unwrap();
        assert!(load.data().iter().all(|&l| (l - 2.0).abs() < 1e-15));
    }

    #[test]
    fn load_matches_monte_carlo() {
        let (m, e, k) = (3, 4, 2);
        let clean = random(&[m, e], 5, 1.0);
        let noise = random(&[m, e], 6, 1.0);
        let mut rng = stream_rng(7, Stream::GateNoise, 0);
        let h = Tensor::from_fn(&[m, e], |j| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            clean.data()[j] + eps * softplus(noise.data()[j])
        });
        let load = load_estimate(&clean, &noise, &h, k).unwrap();
        // resample expert i's own noise, others held at their drawn values
        let draws = 100_000;
        for i in 0..e {
            let mut hits = 0usize;
            for r in 0..m {
                let mut row = h.data()[r * e..(r + 1) * e].to_vec();
                for _ in 0..draws {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    row[i] = clean.data()[r * e + i] + eps * softplus(noise.data()[r * e + i]);
                    hits += top_k_indices(&row, k).contains(&i) as usize;
                }
            }
            let mc = hits as f64 / draws as f64;
            assert!((mc - load.data()[i]).abs() < 0.01, "expert {i}: {mc} vs {}", load.data()[i]);
        }
    }

    #[test]
    fn load_gradient() {
        let clean = random(&[5, 3], 8, 1.0);
        let noise = random(&[5, 3], 9, 1.0);
        let h = random(&[5, 3], 10, 1.5);
        let errs = gradient_check(&[clean, noise, h], 1e-6, |t, v| load_estimate_op(t, v[0], v[1], v[2], 2)).unwrap();
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }

    #[test]
    fn balance_examples() {
        assert_eq!(balance_loss(&[5.0, 5.0], 0.01), 0.0);
        assert_eq!(balance_loss(&[2.0, 0.0], 1.0), 1.0);
        assert_eq!(balance_loss(&[0.0, 0.0, 0.0], 1.0), 0.0);
        let load = [0.3, 2.9, 1.4, 0.05];
        let mean = load.iter().sum::<f64>() / 4.0;
        let var = load.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / 4.0;
        assert!((balance_loss(&load, 0.7) - 0.7 * var / (mean * mean)).abs() < 1e-12);
        let errs = gradient_check(&[Tensor::new(&[4], load.to_vec()).unwrap()], 1e-6, |t, v| cv_squared_op(t, v[0])).unwrap();
        assert!(errs[0] < 1e-6);
    }

    #[test]
    fn z_loss_examples() {
        let z = z_loss(&Tensor::zeros(&[1, 2])).unwrap();
        assert!((z - 2f64.ln().powi(2)).abs() < 1e-12);
        let z = z_loss(&Tensor::new(&[1, 2], vec![1.7, f64::NEG_INFINITY]).unwrap()).unwrap();
        assert!((z - 1.7 * 1.7).abs() < 1e-12);
        // extended-precision oracle: lse = max + log1p(Σ exp(x - max)) evaluated term-wise
        let logits = Tensor::new(&[2, 3], vec![500.0, -500.0, 499.0, -500.0, -499.5, -500.0]).unwrap();
        let oracle = |row: [f64; 3]| {
            let max = row.iter().copied().fold(f64::MIN, f64::max);
            let rest: f64 = row.iter().map(|x| (x - max).exp()).sum::<f64>() - 1.0;
            max + rest.ln_1p()
        };
        let expected = (oracle([500.0, -500.0, 499.0]).powi(2) + oracle([-500.0, -499.5, -500.0]).powi(2)) / 2.0;
        let got = z_loss(&logits).unwrap();
        assert!(got.is_finite() && ((got - expected) / expected).abs() < 1e-9);
    }

    fn setup(experts: usize, k: usize, seed: u64) -> (MoeConfig, MoeParams) {
        let cfg = MoeConfig { experts, top_k: k, ..MoeConfig::default() };
        let ssm = SsmConfig::new(3, 2);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut p = MoeParams::init(&cfg, &ssm, &mut rng);
        p.w_gate = random(&[3, experts], seed, 1.0);
        p.w_noise = random(&[3, experts], seed + 1, 1.0);
        (cfg, p)
    }

    fn patches(n: usize, seed: u64) -> Vec<Tensor> {
        (0..n).map(|i| random(&[5, 3], seed + i as u64, 1.0)).collect()
    }

    #[test]
    fn single_expert_is_the_expert() {
        let (cfg, p) = setup(1, 1, 11);
        let xs = patches(3, 12);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = moe_forward(&mut tape, &cfg, &vars, &xv, None).unwrap();
        for (&x, &o) in xv.iter().zip(&out.outputs) {
            let direct = mamba_block(&mut tape, &vars.experts[0], x).unwrap();
            assert_eq!(tape.tensor(direct), tape.tensor(o));
        }
    }

    #[test]
    fn identity_experts_with_even_gate_pass_through() {
        let (cfg, mut p) = setup(2, 2, 13);
        p.w_gate = Tensor::zeros(p.w_gate.shape());
        for e in &mut p.experts {
            e.out_proj = Tensor::zeros(e.out_proj.shape());
        }
        let xs = patches(2, 14);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = moe_forward(&mut tape, &cfg, &vars, &xv, None).unwrap();
        assert!(tape.value(out.gate.weights).iter().all(|&w| w == 0.5));
        for (x, &o) in xs.iter().zip(&out.outputs) {
            assert!(tape.tensor(o).max_abs_diff(x) < 1e-15);
        }
    }

    #[test]
    fn seeded_noise_replays() {
        let (cfg, p) = setup(3, 2, 15);
        let xs = patches(4, 16);
        let run = || {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let mut rng = stream_rng(1, Stream::GateNoise, 0);
            let out = moe_forward(&mut tape, &cfg, &vars, &xv, Some(&mut rng)).unwrap();
            tape.tensor(out.gate.weights)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn moe_gradients_match_differences() {
        let (cfg, p) = setup(2, 1, 17);
        let xs = patches(3, 18);
        let names: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = names.clone();
        inputs.extend(xs.iter().cloned());
        let per_expert = p.experts[0].named().len();
        let errs = gradient_check(&inputs, 1e-5, |tape, v| {
            let experts = (0..2)
                .map(|i| {
                    let s = &v[2 + i * per_expert..2 + (i + 1) * per_expert];
                    MambaVars {
                        in_proj: s[0],
                        conv_kernel: s[1],
                        conv_bias: s[2],
                        core: crate::ssm::SsmCoreVars { a_log: s[3], w_b: s[4], w_c: s[5], w_delta: s[6], d_skip: s[7] },
                        out_proj: s[8],
                    }
                })
                .collect();
            let vars = MoeVars { w_gate: v[0], w_noise: v[1], experts };
            let mut rng = stream_rng(3, Stream::GateNoise, 0);
            let out = moe_forward(tape, &cfg, &vars, &v[names.len()..], Some(&mut rng))?;
            let mut flat = Vec::with_capacity(out.outputs.len() + 1);
            for &o in &out.outputs {
                flat.push(tape.reshape(o, &[15])?);
            }
            flat.push(tape.reshape(out.gate.aux, &[1])?);
            tape.concat(&flat, 0)
        })
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gate_rows_are_sparse_distributions(seed in any::<u64>(), e in 1usize..6, k in 1usize..6, m in 1usize..8) {
            let k = k.min(e);
            let w = topk_softmax(&random(&[m, e], seed, 5.0), k).unwrap();
            for r in 0..m {
                let row = &w.data()[r * e..(r + 1) * e];
                prop_assert!(row.iter().filter(|&&x| x != 0.0).count() <= k);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn sparse_dispatch_matches_dense(seed in any::<u64>(), k in 1usize..=3) {
            let (cfg, p) = setup(3, k, seed);
            let xs = patches(4, seed ^ 5);
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let mut rng = stream_rng(seed, Stream::GateNoise, 0);
            let out = moe_forward(&mut tape, &cfg, &vars, &xv, Some(&mut rng)).unwrap();
            let w = tape.tensor(out.gate.weights);
            for (r, &x) in xv.iter().enumerate() {
                let mut dense = Tensor::zeros(&[5, 3]);
                for i in 0..3 {
                    let y = mamba_block(&mut tape, &vars.experts[i], x).unwrap();
                    for (acc, v) in dense.data_mut().iter_mut().zip(tape.value(y)) {
                        *acc += w.data()[r * 3 + i] * v;
                    }
                }
                prop_assert!(tape.tensor(out.outputs[r]).max_abs_diff(&dense) < 1e-10);
            }
        }

        #[test]
        fn spreading_a_uniform_load_increases_balance_loss(level in 0.1f64..10.0, a in 1e-3f64..1.0, b in 1e-3f64..1.0) {
            let (small, large) = (a.min(b) * level * 0.99, a.max(b) * level * 0.99);
            prop_assume_distinct(small, large)?;
            let l1 = balance_loss(&[level - small, level + small], 1.0);
            let l2 = balance_loss(&[level - large, level + large], 1.0);
            prop_assert!(l1 > 0.0 && l2 > l1);
        }
    }

    fn prop_assume_distinct(a: f64, b: f64) -> std::result::Result<(), proptest::test_runner::TestCaseError> {
        if a == b {
            return Err(proptest::test_runner::TestCaseError::reject("equal spreads"));
        }
        Ok(())
    }
}
