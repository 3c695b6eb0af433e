//! Full network: wavelet features, token embedding, mixture layers, head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::head::{head_logits, HeadParams, HeadVars};
use crate::moe::{moe_forward, MoeConfig, MoeParams, MoeVars};
use crate::rng::{stream_rng, Stream};
use crate::ssm::SsmConfig;
use crate::tensor::{Backward, Tape, Tensor, Var};
use crate::wtfm::{wtfm_forward, WtfmConfig, WtfmParams, WtfmVars};

/// Reference sizes published for the full-scale model.
pub const PAPER_PARAMS: u64 = 455_003;
pub const PAPER_FLOPS: u64 = 27_312_144;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub electrodes: usize,
    pub classes: usize,
    pub wtfm_channels: usize,
    pub value_channels: usize,
    pub attn_reduction: usize,
    pub attention: bool,
    pub detail_bands: bool,
    pub d_model: usize,
    pub state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub experts: usize,
    pub top_k: usize,
    pub moe_layers: usize,
    pub lambda_balance: f64,
    pub lambda_z: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            electrodes: 16,
            classes: 8,
            wtfm_channels: 8,
            value_channels: 8,
            attn_reduction: 4,
            attention: true,
            detail_bands: true,
            d_model: 128,
            state: 16,
            expand: 4,
            conv_width: 4,
            experts: 2,
            top_k: 2,
            moe_layers: 1,
            lambda_balance: 0.01,
            lambda_z: 0.001,
        }
    }
}

impl ModelConfig {
    pub fn wtfm(&self) -> WtfmConfig {
        WtfmConfig {
            channels: self.wtfm_channels,
            value_channels: self.value_channels,
            reduction: self.attn_reduction,
            electrodes: self.electrodes,
            attention: self.attention,
            detail_bands: self.detail_bands,
        }
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig { d_model: self.d_model, state: self.state, expand: self.expand, conv_width: self.conv_width }
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            experts: self.experts,
            top_k: self.top_k,
            lambda_balance: self.lambda_balance,
            lambda_z: self.lambda_z,
        }
    }

    /// Channels entering the token embedding.
    pub fn feature_channels(&self) -> usize {
        self.wtfm().output_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.moe_layers == 0 {
            return Err(Error::Config("need at least one mixture layer".into()));
        }
        self.wtfm().validate()?;
        self.ssm().validate()?;
        self.moe().validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    /// Learned electrode pooling weights `[C×V]`.
    pub pool: Tensor,
    /// `[C×D_model]`
    pub proj: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoembaModel {
    pub config: ModelConfig,
    pub wtfm: WtfmParams,
    pub embed: EmbedParams,
    pub layers: Vec<MoeParams>,
    pub head: HeadParams,
}

/// Tape handles of a whole model, in the order of [`MoembaModel::named`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub wtfm: WtfmVars,
    pub pool: Var,
    pub proj: Var,
    pub bias: Var,
    pub layers: Vec<MoeVars>,
    pub head: HeadVars,
    pub all: Vec<Var>,
}

/// Differentiable outputs for one batch of patches.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// `[M×G]`
    pub logits: Var,
    /// Sum of the mixture layers' auxiliary losses.
    pub aux: Var,
    /// Per-layer expert loads.
    pub loads: Vec<Vec<f64>>,
}

impl MoembaModel {
    /// Deterministic construction from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let wtfm = WtfmParams::init(&config.wtfm(), &mut rng);
        let c = config.feature_channels();
        let v = config.electrodes;
        let bound = 1.0 / (c as f64).sqrt();
        let embed = EmbedParams {
            pool: Tensor::full(&[c, v], 1.0 / v as f64),
            proj: Tensor::from_fn(&[c, config.d_model], |_| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(&[config.d_model]),
        };
        let layers = (0..config.moe_layers).map(|_| MoeParams::init(&config.moe(), &config.ssm(), &mut rng)).collect();
        let head = HeadParams::init(config.d_model, config.classes, &mut rng);
        Ok(Self { config, wtfm, embed, layers, head })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.wtfm.named().into_iter().map(|(n, t)| (format!("wtfm.{n}"), t)).collect();
        out.push(("embed.pool".into(), &self.embed.pool));
        out.push(("embed.proj".into(), &self.embed.proj));
        out.push(("embed.bias".into(), &self.embed.bias));
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("moe{l}.{n}"), t)));
        }
        out.extend(self.head.named().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            self.wtfm.named_mut().into_iter().map(|(n, t)| (format!("wtfm.{n}"), t)).collect();
        out.push(("embed.pool".into(), &mut self.embed.pool));
        out.push(("embed.proj".into(), &mut self.embed.proj));
        out.push(("embed.bias".into(), &mut self.embed.bias));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.named_mut().into_iter().map(|(n, t)| (format!("moe{l}.{n}"), t)));
        }
        out.extend(self.head.named_mut().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    /// Register every parameter on `tape` as a borrowed leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> ModelVars {
        let start = tape.len();
        let wtfm = self.wtfm.bind(tape);
        let pool = tape.param(&self.embed.pool);
        let proj = tape.param(&self.embed.proj);
        let bias = tape.param(&self.embed.bias);
        let layers = self.layers.iter().map(|l| l.bind(tape)).collect();
        let head = self.head.bind(tape);
        // every param is a fresh leaf, so they occupy consecutive slots in named order
        let all = (start..tape.len()).map(Var::from_index).collect();
        ModelVars { wtfm, pool, proj, bias, layers, head, all }
    }

    /// Token sequence `[L×D_model]` for one patch `[L×V]`.
    pub fn embed_patch(&self, tape: &mut Tape, vars: &ModelVars, patch: Var) -> Result<Var> {
        let l = tape.shape(patch)[0];
        let (z, _) = wtfm_forward(tape, &self.config.wtfm(), &vars.wtfm, patch)?;
        let tokens = electrode_pool(tape, z, vars.pool)?;
        let proj = tape.matmul(tokens, vars.proj)?;
        let bias = tape.expand(vars.bias, 0, l)?;
        tape.add(proj, bias)
    }

    /// Forward a batch of patches. Gate noise is drawn only when `rng` is given.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, patches: &[Var], mut rng: Option<&mut ChaCha8Rng>) -> Result<BatchOutput> {
        if patches.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        for &p in patches {
            if tape.shape(p).len() != 2 || tape.shape(p)[1] != self.config.electrodes {
                return Err(shape_err("model", format!("patch {:?} vs {} electrodes", tape.shape(p), self.config.electrodes)));
            }
        }
        let mut xs = Vec::with_capacity(patches.len());
        for &p in patches {
            xs.push(self.embed_patch(tape, vars, p)?);
        }
        let moe = self.config.moe();
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut loads = Vec::with_capacity(self.layers.len());
        for layer in &vars.layers {
            let out = moe_forward(tape, &moe, layer, &xs, rng.as_deref_mut())?;
            aux.push(out.gate.aux);
            loads.push(tape.value(out.gate.load).to_vec());
            xs = out.outputs;
        }
        let d = self.config.d_model;
        let mut pooled = Vec::with_capacity(xs.len());
        for &x in &xs {
            let m = tape.mean_axis(x, 0)?;
            pooled.push(tape.reshape(m, &[1, d])?);
        }
        let z = tape.concat(&pooled, 0)?;
        let logits = head_logits(tape, &vars.head, z)?;
        let aux = if aux.len() == 1 { aux[0] } else { tape.add_n(&aux)? };
        Ok(BatchOutput { logits, aux, loads })
    }

    /// Class probabilities per patch, evaluated without gate noise.
    pub fn predict(&self, patches: &[Tensor], batch: usize) -> Result<Vec<Vec<f64>>> {
        let g = self.config.classes;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape);
            let xs: Vec<Var> = chunk.iter().map(|p| tape.constant(p.clone())).collect();
            let res = self.forward(&mut tape, &vars, &xs, None)?;
            let probs = tape.softmax(res.logits, 1)?;
            out.extend(tape.value(probs).chunks(g).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.config)
    }
}

struct ElectrodePool {
    c: usize,
    l: usize,
    v: usize,
}

impl Backward for ElectrodePool {
    fn name(&self) -> &'static str {
        "electrode_pool"
    }

    fn backward(&self, inputs: &[&[f64]], _: &[f64], grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (z, u) = (inputs[0], inputs[1]);
        let ElectrodePool { c, l, v } = *self;
        let mut gz = needs[0].then(|| vec![0.0; c * l * v]);
        let mut gu = needs[1].then(|| vec![0.0; c * v]);
        for ch in 0..c {
            let uc = &u[ch * v..(ch + 1) * v];
            for t in 0..l {
                let g = grad[t * c + ch];
                let row = (ch * l + t) * v..(ch * l + t + 1) * v;
                if let Some(gz) = gz.as_mut() {
                    gz[row.clone()].iter_mut().zip(uc).for_each(|(d, w)| *d = g * w);
                }
                if let Some(gu) = gu.as_mut() {
                    gu[ch * v..(ch + 1) * v].iter_mut().zip(&z[row]).for_each(|(d, x)| *d += g * x);
                }
            }
        }
        vec![gz, gu]
    }
}

/// `tokens[t,c] = Σ_v z[c,t,v]·u[c,v]`: learned per-channel electrode pooling.
fn electrode_pool(tape: &mut Tape, z: Var, u: Var) -> Result<Var> {
    let (&[c, l, v], &[uc, uv]) = (tape.shape(z), tape.shape(u)) else {
        return Err(shape_err("electrode_pool", format!("features {:?}, weights {:?}", tape.shape(z), tape.shape(u))));
    };
    if (uc, uv) != (c, v) {
        return Err(shape_err("electrode_pool", format!("features {:?}, weights {:?}", tape.shape(z), tape.shape(u))));
    }
    let (zv, w) = (tape.value(z), tape.value(u));
    let mut out = vec![0.0; l * c];
    for ch in 0..c {
        for t in 0..l {
            let row = &zv[(ch * l + t) * v..(ch * l + t + 1) * v];
            out[t * c + ch] = row.iter().zip(&w[ch * v..(ch + 1) * v]).map(|(a, b)| a * b).sum();
        }
    }
    tape.custom(&[z, u], out, vec![l, c], Box::new(ElectrodePool { c, l, v }))
}

/// Exact parameter count for a configuration.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (e, ec, r, v) = (cfg.wtfm_channels, cfg.value_channels, cfg.attn_reduction, cfg.electrodes);
    let wtfm = e * 9 + e * 49 + 2 * r * e + ec * v;
    let c = 2 * e + ec;
    let embed = c * v + c * cfg.d_model + cfg.d_model;
    let (d, di, n) = (cfg.d_model, cfg.expand * cfg.d_model, cfg.state);
    let block = d * 2 * di + di * cfg.conv_width + di + di * n + 2 * n * di + di + di + di * d;
    let layer = cfg.experts * block + 2 * d * cfg.experts;
    let head = 2 * d + d * cfg.classes + cfg.classes;
    wtfm + embed + cfg.moe_layers * layer + head
}

/// Analytic FLOPs for one forward pass of one `window × electrodes` patch.
///
/// A multiply-accumulate counts as 2. Matmuls cost `2mkp`, convolutions
/// `2·C_in·C_out·k_h·k_w·H·W`, depthwise 1-D convolutions `2·C·w·L` and the
/// scan `9·T·D·N`. Only the `top_k` selected experts are counted. The Haar
/// analysis and each factor-2 bicubic upsampling are counted as linear maps
/// (2 FLOPs per tap); elementwise activations are not counted.
pub fn count_flops(cfg: &ModelConfig, window: usize, electrodes: usize) -> u64 {
    let (l, v) = (window as u64, electrodes as u64);
    let (e, ec, r) = (cfg.wtfm_channels as u64, cfg.value_channels as u64, cfg.attn_reduction as u64);
    let (hl, hv) = (l.div_ceil(2), v.div_ceil(2));
    let bands = if cfg.detail_bands { 4 } else { 1 };
    let convs = 2 * e * 9 * l * v + 2 * e * 49 * l * v;
    let dwt = 2 * 4 * 4 * e * hl * hv;
    // separable: 4 taps along columns on h rows, then 4 taps along rows
    let upsample = bands * (2 * 4 * e * hl * v + 2 * 4 * e * l * v);
    let attention = if cfg.attention { bands * (2 * r * e + 2 * e * r) } else { 0 };
    let value = 2 * ec * l * v;
    let c = 2 * e + ec;
    let (d, di, n, g) = (cfg.d_model as u64, (cfg.expand * cfg.d_model) as u64, cfg.state as u64, cfg.classes as u64);
    let embed = 2 * c * l * v + 2 * l * c * d;
    let block = 2 * l * d * 2 * di + 2 * di * cfg.conv_width as u64 * l + 2 * l * di * (2 * n + 1) + 9 * l * di * n + 2 * l * di * d;
    let gate = 2 * 2 * d * cfg.experts as u64;
    let layer = gate + cfg.top_k as u64 * block;
    let head = 2 * d * g;
    convs + dwt + upsample + attention + value + embed + cfg.moe_layers as u64 * layer + head
}

/// Signed relative deviation in percent.
pub fn deviation_percent(value: u64, reference: u64) -> f64 {
    100.0 * (value as f64 - reference as f64) / reference as f64
}
