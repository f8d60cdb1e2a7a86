//! Backbone (cross-attention, mixture of experts, small UNet) and the three
//! heads built on it: the noise projector, its warmup decoder, and the
//! reward model.
//!
//! On the tape, latents are laid out `[batch, H, W, C]`; [`Latent`] values
//! are `C×H×W`. Use [`chw_to_hwc`] / [`hwc_to_chw`] to move between them.

use noiseproj_tensor::{Bound, ParamId, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BackboneConfig, Routing};
use crate::error::{Error, Result};
use crate::testbed::{Latent, LatentShape, PromptSpec};

pub const NUM_SCORES: usize = 10;
const LN_EPS: f64 = 1e-5;

pub fn chw_to_hwc(values: &[f64], shape: LatentShape) -> Vec<f64> {
    let (c, hw) = (shape.channels, shape.positions());
    let mut out = vec![0.0; values.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = values[ch * hw + p];
        }
    }
    out
}

pub fn hwc_to_chw(values: &[f64], shape: LatentShape) -> Vec<f64> {
    let (c, hw) = (shape.channels, shape.positions());
    let mut out = vec![0.0; values.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[ch * hw + p] = values[p * c + ch];
        }
    }
    out
}

/// Stack latents into a `[B, H, W, C]` constant.
pub fn latent_batch<'t>(tape: &'t Tape, latents: &[&Latent]) -> Result<Var<'t>> {
    let shape = latents.first().ok_or_else(|| Error::Invalid("empty latent batch".into()))?.shape;
    let mut data = Vec::with_capacity(latents.len() * shape.numel());
    for l in latents {
        if l.shape != shape {
            return Err(Error::Invalid("latent batch mixes shapes".into()));
        }
        data.extend(chw_to_hwc(&l.values, shape));
    }
    Ok(tape.constant_from(&[latents.len(), shape.height, shape.width, shape.channels], data)?)
}

/// Split a `[B, H, W, C]` tape value back into latents.
pub fn unbatch(var: Var<'_>, shape: LatentShape) -> Result<Vec<Latent>> {
    let data = var.data();
    data.chunks(shape.numel())
        .map(|chunk| Latent::new(shape, hwc_to_chw(chunk, shape)))
        .collect()
}

/// Text rows for a batch: the rows of sample `i` are `offsets[i]..offsets[i+1]`.
pub fn text_batch<'t>(tape: &'t Tape, rows_per_sample: &[&[Vec<f64>]], d_txt: usize) -> Result<(Var<'t>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut offsets = vec![0];
    for rows in rows_per_sample {
        for r in rows.iter() {
            if r.len() != d_txt {
                return Err(Error::Invalid(format!("text row has width {}, expected {d_txt}", r.len())));
            }
            data.extend_from_slice(r);
        }
        offsets.push(offsets.last().unwrap() + rows.len());
    }
    let n = *offsets.last().unwrap();
    Ok((tape.constant_from(&[n, d_txt], data)?, offsets))
}

#[derive(Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: params.push_fan_in(format!("{name}.w"), &[9 * cin, cout], 9 * cin, rng),
            b: params.push_zeros(format!("{name}.b"), &[cout]),
        }
    }

    fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.im2col3x3()?.matmul(b.get(self.w))?.add(b.get(self.b))?)
    }
}

#[derive(Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: params.push_fan_in(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng),
            b: params.push_zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    fn zeros(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: params.push_zeros(format!("{name}.w"), &[fan_in, fan_out]),
            b: params.push_zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(b.get(self.w))?.add(b.get(self.b))?)
    }
}

/// Intermediate values of one backbone pass.
pub struct BackboneTrace<'t> {
    /// `[B, H, W, F]` features.
    pub features: Var<'t>,
    /// `[B·H·W, n_experts]` router probabilities.
    pub gates: Var<'t>,
}

/// Cross-attention → MoE → UNet-lite, producing a `[B, H, W, F]` feature map.
#[derive(Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    shape: LatentShape,
    d_txt: usize,
    embed: ParamId,
    pos: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    router: Linear,
    expert_w1: ParamId,
    expert_b1: ParamId,
    expert_w2: ParamId,
    expert_b2: ParamId,
    enc: Conv,
    down: Conv,
    mid: Conv,
    dec: Conv,
    out: Conv,
}

impl Backbone {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: &BackboneConfig, shape: LatentShape, d_txt: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if shape.height % 2 != 0 || shape.width % 2 != 0 {
            return Err(Error::Config(format!("UNet needs even spatial size, got {}x{}", shape.height, shape.width)));
        }
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", cfg.d_model, cfg.n_heads)));
        }
        let d = cfg.d_model;
        let (e, eh) = (cfg.n_experts, cfg.expert_hidden);
        let [c0, c1] = cfg.unet_channels;
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            cfg: cfg.clone(),
            shape,
            d_txt,
            embed: params.push_fan_in(name("embed.w"), &[shape.positions(), shape.channels, d], shape.channels, rng),
            // unit-scale table: positions must stand out against the channel embedding
            pos: params.push_fan_in(name("pos"), &[shape.positions(), d], 1, rng),
            wq: params.push_fan_in(name("attn.q"), &[d, d], d, rng),
            wk: params.push_fan_in(name("attn.k"), &[d_txt, d], d_txt, rng),
            wv: params.push_fan_in(name("attn.v"), &[d_txt, d], d_txt, rng),
            wo: params.push_fan_in(name("attn.o"), &[d, d], d, rng),
            ln_gain: params.push_full(name("attn.ln.gain"), &[d], 1.0),
            ln_bias: params.push_zeros(name("attn.ln.bias"), &[d]),
            router: Linear::new(params, &name("moe.router"), d, e, rng),
            expert_w1: params.push_fan_in(name("moe.w1"), &[d, e * eh], d, rng),
            expert_b1: params.push_zeros(name("moe.b1"), &[e * eh]),
            expert_w2: params.push_fan_in(name("moe.w2"), &[e * eh, d], eh, rng),
            expert_b2: params.push_zeros(name("moe.b2"), &[e, d]),
            enc: Conv::new(params, &name("unet.enc"), d, c0, rng),
            down: Conv::new(params, &name("unet.down"), c0, c1, rng),
            mid: Conv::new(params, &name("unet.mid"), c1, c1, rng),
            dec: Conv::new(params, &name("unet.dec"), c0 + c1, c0, rng),
            out: Conv::new(params, &name("unet.out"), c0, cfg.feature_channels, rng),
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.cfg.feature_channels
    }

    /// Channel embedding with its own weights at every position, plus a
    /// learned position table: `[B, H, W, C] → [B·H·W, d]`.
    pub fn embed<'t>(&self, b: &Bound<'t>, noise: Var<'t>) -> Result<Var<'t>> {
        let s = noise.shape();
        if s.len() != 4 || s[1..] != [self.shape.height, self.shape.width, self.shape.channels] {
            return Err(Error::Invalid(format!("backbone input shape {s:?} does not match latent {:?}", self.shape)));
        }
        let (batch, hw, d) = (s[0], self.shape.positions(), self.cfg.d_model);
        let per_channel = noise.reshape(&[batch, hw, self.shape.channels, 1])?.mul(b.get(self.embed))?;
        Ok(per_channel.sum_axis(2)?.add(b.get(self.pos))?.reshape(&[batch * hw, d])?)
    }

    /// Noise tokens attend over their sample's text rows; residual, then layer norm.
    pub fn cross_attention<'t>(&self, b: &Bound<'t>, h: Var<'t>, text: Var<'t>, kv_offsets: &[usize]) -> Result<Var<'t>> {
        let ts = text.shape();
        if ts.len() != 2 || ts[1] != self.d_txt {
            return Err(Error::Invalid(format!("text rows have shape {ts:?}, expected [_, {}]", self.d_txt)));
        }
        let tape = h.tape();
        let q = h.matmul(b.get(self.wq))?;
        let k = text.matmul(b.get(self.wk))?;
        let v = text.matmul(b.get(self.wv))?;
        let attn = tape.cross_attention(q, k, v, self.cfg.n_heads, self.shape.positions(), kv_offsets)?;
        let mixed = h.add(attn.matmul(b.get(self.wo))?)?.layer_norm(LN_EPS)?;
        Ok(mixed.mul(b.get(self.ln_gain))?.add(b.get(self.ln_bias))?)
    }

    /// Gated mixture of positionwise expert MLPs with a residual connection.
    /// Returns the output and the router probabilities.
    pub fn moe<'t>(&self, b: &Bound<'t>, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = h.tape();
        let (e, eh) = (self.cfg.n_experts, self.cfg.expert_hidden);
        let gates = self.router.forward(b, h)?.softmax()?;
        let used = match self.cfg.routing {
            Routing::Soft => gates,
            Routing::Top1 => {
                let g = gates.data();
                let mut mask = vec![0.0; g.len()];
                for (row, m) in g.chunks(e).zip(mask.chunks_mut(e)) {
                    let best = (0..e).fold(0, |best, i| if row[i] > row[best] { i } else { best });
                    m[best] = 1.0;
                }
                gates.mul(tape.constant_from(&gates.shape(), mask)?)?
            }
        };
        // Σ_e g_e·(W2_e·act(W1_e·h + b1_e) + b2_e), with the experts stacked side by side
        let mut spread = vec![0.0; e * e * eh];
        for i in 0..e {
            spread[i * e * eh + i * eh..i * e * eh + (i + 1) * eh].fill(1.0);
        }
        let spread = tape.constant_from(&[e, e * eh], spread)?;
        let hidden = h.matmul(b.get(self.expert_w1))?.add(b.get(self.expert_b1))?.silu();
        let gated = hidden.mul(used.matmul(spread)?)?;
        let out = gated.matmul(b.get(self.expert_w2))?.add(used.matmul(b.get(self.expert_b2))?)?;
        Ok((h.add(out)?, gates))
    }

    /// Two-level encoder/decoder with one skip: `[B, H, W, d] → [B, H, W, F]`.
    pub fn unet<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let e1 = self.enc.forward(b, x)?.silu();
        let e2 = self.down.forward(b, e1.avg_pool2()?)?.silu();
        let m = self.mid.forward(b, e2)?.silu();
        let up = x.tape().concat_last(&[m.upsample2()?, e1])?;
        let d1 = self.dec.forward(b, up)?.silu();
        self.out.forward(b, d1)
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, noise: Var<'t>, text: Var<'t>, kv_offsets: &[usize]) -> Result<BackboneTrace<'t>> {
        let batch = noise.shape()[0];
        let h = self.embed(b, noise)?;
        let h = self.cross_attention(b, h, text, kv_offsets)?;
        let (h, gates) = self.moe(b, h)?;
        let grid = h.reshape(&[batch, self.shape.height, self.shape.width, self.cfg.d_model])?;
        Ok(BackboneTrace {
            features: self.unet(b, grid)?,
            gates,
        })
    }

    #[cfg(test)]
    pub(crate) fn out_layer(&self) -> (ParamId, ParamId) {
        (self.out.w, self.out.b)
    }
}

/// `μ̂` and `σ̂` as plain latents.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorOutput {
    pub mu_hat: Latent,
    pub sigma_hat: Latent,
}

/// Tape values of one projector pass, all `[B, H, W, ·]`.
pub struct ProjectorTrace<'t> {
    pub backbone: BackboneTrace<'t>,
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

/// Backbone `m_θ0` plus the Gaussian encoder head `q_θ1`.
#[derive(Clone)]
pub struct NoiseProjector {
    pub params: ParamSet,
    backbone: Backbone,
    mu_head: Linear,
    log_sigma_head: Linear,
    sigma_min: f64,
    sigma_max: f64,
    shape: LatentShape,
    d_txt: usize,
}

impl NoiseProjector {
    /// Heads start at zero, so a fresh projector maps every input to
    /// `μ̂ = 0`, `σ̂ = 1`.
    pub fn new(cfg: &BackboneConfig, shape: LatentShape, d_txt: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed.wrapping_mul(2).wrapping_add(1));
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, "projector", cfg, shape, d_txt, &mut rng)?;
        let f = cfg.feature_channels;
        let mu_head = Linear::zeros(&mut params, "projector.mu", f, shape.channels);
        let log_sigma_head = Linear::zeros(&mut params, "projector.log_sigma", f, shape.channels);
        Ok(Self {
            params,
            backbone,
            mu_head,
            log_sigma_head,
            sigma_min: cfg.sigma_min,
            sigma_max: cfg.sigma_max,
            shape,
            d_txt,
        })
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, eps: Var<'t>, text: Var<'t>, kv_offsets: &[usize]) -> Result<ProjectorTrace<'t>> {
        let trace = self.backbone.forward(b, eps, text, kv_offsets)?;
        let mu = self.mu_head.forward(b, trace.features)?;
        let log_sigma = self
            .log_sigma_head
            .forward(b, trace.features)?
            .clamp(self.sigma_min.ln(), self.sigma_max.ln());
        Ok(ProjectorTrace {
            backbone: trace,
            mu,
            sigma: log_sigma.exp(),
        })
    }

    /// Forward a batch of `(noise, prompt)` pairs on a fresh tape.
    pub fn project_batch(&self, items: &[(&Latent, &PromptSpec)]) -> Result<Vec<ProjectorOutput>> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let eps = latent_batch(&tape, &items.iter().map(|(e, _)| *e).collect::<Vec<_>>())?;
        let rows: Vec<&[Vec<f64>]> = items.iter().map(|(_, p)| p.sentence_embedding.as_slice()).collect();
        let (text, offsets) = text_batch(&tape, &rows, self.d_txt)?;
        let out = self.forward(&b, eps, text, &offsets)?;
        let mus = unbatch(out.mu, self.shape)?;
        let sigmas = unbatch(out.sigma, self.shape)?;
        Ok(mus
            .into_iter()
            .zip(sigmas)
            .map(|(mu_hat, sigma_hat)| ProjectorOutput { mu_hat, sigma_hat })
            .collect())
    }

    pub fn project(&self, eps: &Latent, prompt: &PromptSpec) -> Result<ProjectorOutput> {
        Ok(self.project_batch(&[(eps, prompt)])?.remove(0))
    }
}

/// Warmup-only decoder `p_ψ`: refined noise → backbone feature map.
#[derive(Clone)]
pub struct VaeDecoder {
    pub params: ParamSet,
    hidden: Conv,
    out: Linear,
}

impl VaeDecoder {
    pub fn new(cfg: &BackboneConfig, shape: LatentShape) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed.wrapping_mul(2).wrapping_add(2));
        let mut params = ParamSet::new();
        let hidden = Conv::new(&mut params, "decoder.hidden", shape.channels, cfg.decoder_hidden, &mut rng);
        let out = Linear::new(&mut params, "decoder.out", cfg.decoder_hidden, cfg.feature_channels, &mut rng);
        Self { params, hidden, out }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, refined: Var<'t>) -> Result<Var<'t>> {
        self.out.forward(b, self.hidden.forward(b, refined)?.silu())
    }
}

/// Ten probabilities over the scores `0..=9`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDistribution {
    pub probs: [f64; NUM_SCORES],
}

impl RewardDistribution {
    pub fn new(probs: [f64; NUM_SCORES]) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("not a distribution: {probs:?}")));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != NUM_SCORES {
            return Err(Error::Invalid(format!("expected {NUM_SCORES} logits, got {}", logits.len())));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = [0.0; NUM_SCORES];
        for (p, l) in probs.iter_mut().zip(logits) {
            *p = (l - max).exp();
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self::new(probs)
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / NUM_SCORES as f64; NUM_SCORES],
        }
    }
}

/// Backbone over (noise, one token row) → mean pool → MLP → 10 logits.
#[derive(Clone)]
pub struct RewardModel {
    pub params: ParamSet,
    backbone: Backbone,
    hidden: Linear,
    logits: Linear,
    shape: LatentShape,
    d_txt: usize,
}

impl RewardModel {
    pub fn new(cfg: &BackboneConfig, shape: LatentShape, d_txt: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed.wrapping_mul(2));
        let mut params = ParamSet::new();
        let backbone = Backbone::new(&mut params, "reward", cfg, shape, d_txt, &mut rng)?;
        let hidden = Linear::new(&mut params, "reward.mlp", cfg.feature_channels, cfg.reward_hidden, &mut rng);
        let logits = Linear::new(&mut params, "reward.head", cfg.reward_hidden, NUM_SCORES, &mut rng);
        Ok(Self {
            params,
            backbone,
            hidden,
            logits,
            shape,
            d_txt,
        })
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn d_txt(&self) -> usize {
        self.d_txt
    }

    /// `eps` is `[B, H, W, C]`, `tokens` is `[B, d_txt]` (one row per sample).
    /// Returns `[B, 10]` logits.
    pub fn logits<'t>(&self, b: &Bound<'t>, eps: Var<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let batch = eps.shape()[0];
        if tokens.shape() != [batch, self.d_txt] {
            return Err(Error::Invalid(format!(
                "reward model takes one token row per sample, got {:?} for batch {batch}",
                tokens.shape()
            )));
        }
        let offsets: Vec<usize> = (0..=batch).collect();
        let features = self.backbone.forward(b, eps, tokens, &offsets)?.features;
        let f = self.backbone.feature_channels();
        let pooled = features.reshape(&[batch, self.shape.positions(), f])?.mean_axis(1)?;
        self.logits.forward(b, self.hidden.forward(b, pooled)?.silu())
    }

    /// Distributions for a batch of `(noise, token embedding)` pairs.
    pub fn predict_batch(&self, items: &[(&Latent, &[f64])]) -> Result<Vec<RewardDistribution>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let eps = latent_batch(&tape, &items.iter().map(|(e, _)| *e).collect::<Vec<_>>())?;
        let mut rows = Vec::with_capacity(items.len() * self.d_txt);
        for (_, u) in items {
            if u.len() != self.d_txt {
                return Err(Error::Invalid(format!(
                    "reward model takes a single token row of width {}, got {} values",
                    self.d_txt,
                    u.len()
                )));
            }
            rows.extend_from_slice(u);
        }
        let tokens = tape.constant_from(&[items.len(), self.d_txt], rows)?;
        let logits = self.logits(&b, eps, tokens)?.data();
        logits.chunks(NUM_SCORES).map(RewardDistribution::from_logits).collect()
    }

    /// `token_embedding` must be a single row; a multi-row sentence matrix is rejected.
    pub fn predict(&self, eps: &Latent, token_embedding: &[Vec<f64>]) -> Result<RewardDistribution> {
        match token_embedding {
            [row] => Ok(self.predict_batch(&[(eps, row.as_slice())])?.remove(0)),
            _ => Err(Error::Invalid(format!(
                "reward model conditions on a single token row, got {}",
                token_embedding.len()
            ))),
        }
    }
}

/// Plain tensor of a latent batch, e.g. for gradient checks.
pub fn latent_tensor(latents: &[&Latent]) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(latent_batch(&tape, latents)?.to_tensor())
}
