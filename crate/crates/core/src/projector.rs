//! Projector training: Gaussian-proximity warmup with a throwaway decoder,
//! then reward-weighted preference optimization against a frozen reward model.

use log::{info, warn};
use noiseproj_tensor::{clip_grad_norm, Adam, AdamConfig, Bound, ParamSet, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ProjectorConfig, SeedRange};
use crate::diffusion::{DiffusionEngine, GuidanceConfig};
use crate::error::{Error, Result};
use crate::nets::{latent_batch, text_batch, NoiseProjector, RewardDistribution, RewardModel, VaeDecoder, NUM_SCORES};
use crate::reward::{argmax_score, scalar_reward, FrozenReward};
use crate::stats;
use crate::testbed::{oracle_sentence_score, seed_to_noise, Latent, World};

/// Per-score weights `w[i] = 1 + w_max − w_max^(i/9)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: [f64; NUM_SCORES],
}

pub fn weight_vector(w_max: f64) -> Result<WeightVector> {
    if !(w_max > 1.0) || !w_max.is_finite() {
        return Err(Error::Config(format!("w_max must be finite and > 1, got {w_max}")));
    }
    let mut w = [0.0; NUM_SCORES];
    for (i, v) in w.iter_mut().enumerate() {
        *v = match i {
            0 => w_max,
            9 => 1.0,
            _ => 1.0 + w_max - w_max.powf(i as f64 / 9.0),
        };
    }
    Ok(WeightVector { w })
}

/// `mean((λ/2)(μ̂² + σ̂² − 2 ln σ̂ − 1))` on the tape.
pub fn kl_constraint<'t>(mu: Var<'t>, sigma: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if sigma.data().iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Invalid("kl_constraint needs strictly positive sigma".into()));
    }
    let inner = mu.square().add(sigma.square())?.sub(sigma.ln().scale(2.0))?.add_scalar(-1.0);
    Ok(inner.mean().scale(lambda / 2.0))
}

/// Plain-value version of [`kl_constraint`].
pub fn kl_constraint_values(mu: &[f64], sigma: &[f64], lambda: f64) -> Result<f64> {
    if mu.len() != sigma.len() || mu.is_empty() {
        return Err(Error::Invalid("kl_constraint needs equal, non-empty mu and sigma".into()));
    }
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Invalid("kl_constraint needs strictly positive sigma".into()));
    }
    let total: f64 = mu.iter().zip(sigma).map(|(m, s)| m * m + s * s - 2.0 * s.ln() - 1.0).sum();
    Ok(lambda / 2.0 * total / mu.len() as f64)
}

/// Mean squared error between two equally shaped values.
pub fn reconstruction_loss<'t>(target: Var<'t>, decoded: Var<'t>) -> Result<Var<'t>> {
    if target.shape() != decoded.shape() {
        return Err(Error::Invalid(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            target.shape(),
            decoded.shape()
        )));
    }
    Ok(target.sub(decoded)?.square().mean())
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 + exp(−(R_refined − R_init)))`.
pub fn unweighted_dpo_loss(r_refined: f64, r_init: f64) -> f64 {
    softplus(-(r_refined - r_init))
}

/// `μ̂ + σ̂ ⊙ ε_init`, reusing the initial noise itself.
pub fn refine(projector: &NoiseProjector, eps_init: &Latent, prompt: &crate::testbed::PromptSpec) -> Result<Latent> {
    Ok(refine_batch(projector, &[(eps_init, prompt)])?.remove(0))
}

pub fn refine_batch(projector: &NoiseProjector, items: &[(&Latent, &crate::testbed::PromptSpec)]) -> Result<Vec<Latent>> {
    if items.iter().any(|(e, _)| !e.is_finite()) {
        return Err(Error::NonFinite {
            context: "in initial noise passed to refine".into(),
        });
    }
    let outs = projector.project_batch(items)?;
    outs.into_iter()
        .zip(items)
        .map(|(o, (eps, _))| {
            let values = o
                .mu_hat
                .values
                .iter()
                .zip(&o.sigma_hat.values)
                .zip(&eps.values)
                .map(|((m, s), e)| m + s * e)
                .collect();
            Latent::new(eps.shape, values)
        })
        .collect()
}

/// One `(initial noise, prompt)` training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub seed: u64,
    pub prompt_id: usize,
    pub eps: Latent,
}

pub fn examples(world: &World, seeds: SeedRange, prompt_ids: &[usize]) -> Result<Vec<Example>> {
    for &p in prompt_ids {
        world.prompt(p)?;
    }
    let mut out = Vec::with_capacity(seeds.len() * prompt_ids.len());
    for seed in seeds.iter() {
        let eps = seed_to_noise(seed, world.shape()).latent;
        for &prompt_id in prompt_ids {
            out.push(Example {
                seed,
                prompt_id,
                eps: eps.clone(),
            });
        }
    }
    Ok(out)
}

/// Prompts a config trains on: its explicit list, or every prompt.
pub fn training_prompts(cfg: &ProjectorConfig, world: &World) -> Vec<usize> {
    if cfg.prompts.is_empty() {
        (0..world.prompts.len()).collect()
    } else {
        cfg.prompts.clone()
    }
}

/// Token-averaged reward statistics of a batch, computed without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRewards {
    /// Mean scalar reward over each sample's tokens.
    pub scalar: Vec<f64>,
    /// Token-averaged distribution of each sample.
    pub mean_dist: Vec<RewardDistribution>,
}

/// `(sample index, token row)` pairs for every token of every sample.
fn token_rows<'w>(world: &'w World, batch: &[&Example]) -> (Vec<usize>, Vec<&'w [f64]>) {
    let mut index = Vec::new();
    let mut rows = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        for &t in &world.prompts[ex.prompt_id].tokens {
            index.push(i);
            rows.push(world.tokens[t].embedding.as_slice());
        }
    }
    (index, rows)
}

/// Token-averaged scalar rewards and distributions for plain latents.
pub fn batch_rewards(reward: &RewardModel, world: &World, batch: &[(&Latent, usize)]) -> Result<BatchRewards> {
    let mut items = Vec::new();
    let mut owner = Vec::new();
    for (i, (eps, p)) in batch.iter().enumerate() {
        for &t in &world.prompt(*p)?.tokens {
            items.push((*eps, world.tokens[t].embedding.as_slice()));
            owner.push(i);
        }
    }
    let dists = reward.predict_batch(&items)?;
    let mut sums = vec![[0.0; NUM_SCORES]; batch.len()];
    let mut counts = vec![0usize; batch.len()];
    for (d, &i) in dists.iter().zip(&owner) {
        for (s, p) in sums[i].iter_mut().zip(&d.probs) {
            *s += p;
        }
        counts[i] += 1;
    }
    let mean_dist = sums
        .into_iter()
        .zip(&counts)
        .map(|(mut s, &c)| {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
            RewardDistribution::new(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchRewards {
        scalar: mean_dist.iter().map(scalar_reward).collect(),
        mean_dist,
    })
}

/// Tape values of the final objective for one batch.
pub struct LogitTerms<'t> {
    pub loss: Var<'t>,
    pub r_refined: Vec<f64>,
    pub r_init: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Token-averaged scalar reward `[B]` of a `[B, H, W, C]` tape value.
pub fn reward_on_tape<'t>(reward: &RewardModel, frozen: &Bound<'t>, world: &World, refined: Var<'t>, batch: &[&Example]) -> Result<(Var<'t>, Vec<RewardDistribution>)> {
    let tape = refined.tape();
    let (index, rows) = token_rows(world, batch);
    let m = index.len();
    let d_txt = reward.d_txt();
    let tokens = tape.constant_from(&[m, d_txt], rows.concat())?;
    let probs = reward.logits(frozen, refined.gather_rows(&index)?, tokens)?.softmax()?;
    let values = tape.constant_from(&[NUM_SCORES, 1], (0..NUM_SCORES).map(|i| i as f64).collect())?;
    // averaging matrix [M, B]: column i has 1/n_i on the rows of sample i
    let mut counts = vec![0usize; batch.len()];
    index.iter().for_each(|&i| counts[i] += 1);
    let mut avg = vec![0.0; m * batch.len()];
    for (r, &i) in index.iter().enumerate() {
        avg[r * batch.len() + i] = 1.0 / counts[i] as f64;
    }
    let avg = tape.constant_from(&[m, batch.len()], avg)?;
    let per_token = probs.matmul(values)?.reshape(&[1, m])?;
    let scalar = per_token.matmul(avg)?.reshape(&[batch.len()])?;
    let pd = probs.data();
    let mut sums = vec![[0.0; NUM_SCORES]; batch.len()];
    for (r, &i) in index.iter().enumerate() {
        for k in 0..NUM_SCORES {
            sums[i][k] += pd[r * NUM_SCORES + k] / counts[i] as f64;
        }
    }
    let dists = sums.into_iter().map(RewardDistribution::new).collect::<Result<Vec<_>>>()?;
    Ok((scalar, dists))
}

/// `Σ_i w[r_i]·softplus(−β(R_refined,i − R_init,i))`.
///
/// `r_init` is supplied as plain numbers (no gradient), the reward model is
/// bound frozen, and `r_i` is the argmax of the refined sample's
/// token-averaged distribution.
pub fn logit_loss<'t>(
    reward: &RewardModel,
    frozen: &Bound<'t>,
    world: &World,
    refined: Var<'t>,
    batch: &[&Example],
    r_init: &[f64],
    weights: &WeightVector,
    beta: f64,
) -> Result<LogitTerms<'t>> {
    let tape = refined.tape();
    let (r_ref, dists) = reward_on_tape(reward, frozen, world, refined, batch)?;
    let w: Vec<f64> = dists.iter().map(|d| weights.w[argmax_score(d) as usize]).collect();
    let init = tape.constant_from(&[batch.len()], r_init.to_vec())?;
    let gap = r_ref.sub(init)?;
    let per_sample = gap.scale(-beta).softplus();
    let loss = per_sample.mul(tape.constant_from(&[batch.len()], w.clone())?)?.sum();
    Ok(LogitTerms {
        loss,
        r_refined: r_ref.data(),
        r_init: r_init.to_vec(),
        weights: w,
    })
}

fn projector_pass<'t>(projector: &NoiseProjector, world: &World, tape: &'t Tape, b: &Bound<'t>, batch: &[&Example]) -> Result<(Var<'t>, crate::nets::ProjectorTrace<'t>)> {
    let eps = latent_batch(tape, &batch.iter().map(|e| &e.eps).collect::<Vec<_>>())?;
    let rows: Vec<&[Vec<f64>]> = batch
        .iter()
        .map(|e| world.prompts[e.prompt_id].sentence_embedding.as_slice())
        .collect();
    let (text, offsets) = text_batch(tape, &rows, world.config.d_txt)?;
    let trace = projector.forward(b, eps, text, &offsets)?;
    Ok((eps, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub constraint: f64,
    pub reconstruction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub epochs: Vec<WarmupEpoch>,
    /// Reconstruction error on a fixed probe batch before and after training.
    pub probe_reconstruction_before: f64,
    pub probe_reconstruction_after: f64,
    /// Mean router probability per expert over the probe batch after training.
    pub expert_usage: Vec<f64>,
    /// Mean router entropy (nats) over the probe batch after training.
    pub router_entropy: f64,
    pub mean_abs_mu: f64,
    pub mean_abs_sigma_minus_one: f64,
    /// Whether the decoder received a non-zero gradient on the first step.
    pub decoder_grad_nonzero: bool,
    pub projector_grad_nonzero: bool,
    pub param_hash: String,
}

fn gradient_nonzero(params: &ParamSet) -> bool {
    params.iter().any(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)))
}

struct WarmupProbe {
    batch: Vec<Example>,
    normal: Vec<f64>,
}

fn warmup_losses<'t>(
    projector: &NoiseProjector,
    decoder: &VaeDecoder,
    world: &World,
    tape: &'t Tape,
    pb: &Bound<'t>,
    db: &Bound<'t>,
    batch: &[&Example],
    normal: Vec<f64>,
    lambda: f64,
) -> Result<(Var<'t>, Var<'t>, crate::nets::ProjectorTrace<'t>)> {
    let (_, trace) = projector_pass(projector, world, tape, pb, batch)?;
    let noise = tape.constant_from(&trace.mu.shape(), normal)?;
    let refined = trace.mu.add(trace.sigma.mul(noise)?)?;
    let constraint = kl_constraint(trace.mu, trace.sigma, lambda)?;
    let recon = reconstruction_loss(trace.backbone.features, decoder.forward(db, refined)?)?;
    Ok((constraint, recon, trace))
}

/// Minimizes `L_constraint + L_reconstruction` with fresh standard-normal
/// reparameterization noise each step. The decoder is consumed.
pub fn pretrain(projector: &mut NoiseProjector, decoder: VaeDecoder, world: &World, cfg: &ProjectorConfig) -> Result<WarmupReport> {
    let mut decoder = decoder;
    let prompts = training_prompts(cfg, world);
    let data = examples(world, cfg.train_seeds, &prompts)?;
    let shape = world.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let adam_cfg = AdamConfig {
        lr: cfg.warmup_lr,
        ..Default::default()
    };
    let mut p_adam = Adam::new(&projector.params, adam_cfg);
    let mut d_adam = Adam::new(&decoder.params, adam_cfg);

    let probe = {
        let n = data.len().min(32);
        let step = (data.len() / n).max(1);
        let batch: Vec<Example> = data.iter().step_by(step).take(n).cloned().collect();
        let normal = (0..batch.len() * shape.numel()).map(|_| rng.sample(StandardNormal)).collect();
        WarmupProbe { batch, normal }
    };
    let probe_recon = |projector: &NoiseProjector, decoder: &VaeDecoder| -> Result<f64> {
        let tape = Tape::new();
        let (pb, db) = (projector.params.bind_frozen(&tape), decoder.params.bind_frozen(&tape));
        let refs: Vec<&Example> = probe.batch.iter().collect();
        let (_, recon, _) = warmup_losses(projector, decoder, world, &tape, &pb, &db, &refs, probe.normal.clone(), cfg.lambda)?;
        Ok(recon.item())
    };
    let before = probe_recon(projector, &decoder)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.warmup_epochs);
    let mut initial_loss = None;
    let mut bad_epochs = 0;
    let (mut decoder_grad_nonzero, mut projector_grad_nonzero) = (false, false);
    for epoch in 0..cfg.warmup_epochs {
        order.shuffle(&mut rng);
        let (mut tot_c, mut tot_r, mut n) = (0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let normal: Vec<f64> = (0..batch.len() * shape.numel()).map(|_| rng.sample(StandardNormal)).collect();
            let tape = Tape::new();
            let (pb, db) = (projector.params.bind(&tape), decoder.params.bind(&tape));
            let (constraint, recon, _) = warmup_losses(projector, &decoder, world, &tape, &pb, &db, &batch, normal, cfg.lambda)?;
            let loss = constraint.add(recon)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite warmup loss".into(),
                });
            }
            let grads = tape.backward(loss)?;
            projector.params.absorb_grads(&pb, &grads);
            decoder.params.absorb_grads(&db, &grads);
            if epoch == 0 && n == 0.0 {
                decoder_grad_nonzero = gradient_nonzero(&decoder.params);
                projector_grad_nonzero = gradient_nonzero(&projector.params);
            }
            clip_grad_norm(&mut projector.params, cfg.clip_norm);
            clip_grad_norm(&mut decoder.params, cfg.clip_norm);
            p_adam.step(&mut projector.params)?;
            d_adam.step(&mut decoder.params)?;
            let k = batch.len() as f64;
            tot_c += constraint.item() * k;
            tot_r += recon.item() * k;
            n += k;
        }
        let record = WarmupEpoch {
            epoch,
            loss: (tot_c + tot_r) / n,
            constraint: tot_c / n,
            reconstruction: tot_r / n,
        };
        info!(
            "warmup epoch {epoch}: loss {:.5} (constraint {:.5}, reconstruction {:.5})",
            record.loss, record.constraint, record.reconstruction
        );
        let first = *initial_loss.get_or_insert(record.loss);
        bad_epochs = if record.loss > 10.0 * first { bad_epochs + 1 } else { 0 };
        epochs.push(record);
        if bad_epochs >= 3 {
            return Err(Error::Diverged {
                epoch,
                reason: format!("warmup loss above 10x its first-epoch value ({first:.4}) for 3 epochs"),
            });
        }
    }
    let after = probe_recon(projector, &decoder)?;

    let (expert_usage, router_entropy, mean_abs_mu, mean_abs_sigma_minus_one) = {
        let tape = Tape::new();
        let pb = projector.params.bind_frozen(&tape);
        let refs: Vec<&Example> = probe.batch.iter().collect();
        let (_, trace) = projector_pass(projector, world, &tape, &pb, &refs)?;
        let gates = trace.backbone.gates.data();
        let e = trace.backbone.gates.shape()[1];
        let rows = gates.len() / e;
        let mut usage = vec![0.0; e];
        let mut entropy = 0.0;
        for row in gates.chunks(e) {
            for (u, g) in usage.iter_mut().zip(row) {
                *u += g / rows as f64;
                if *g > 0.0 {
                    entropy -= g * g.ln() / rows as f64;
                }
            }
        }
        let mu = trace.mu.data();
        let sigma = trace.sigma.data();
        (
            usage,
            entropy,
            stats::mean(&mu.iter().map(|v| v.abs()).collect::<Vec<_>>()),
            stats::mean(&sigma.iter().map(|v| (v - 1.0).abs()).collect::<Vec<_>>()),
        )
    };
    Ok(WarmupReport {
        epochs,
        probe_reconstruction_before: before,
        probe_reconstruction_after: after,
        expert_usage,
        router_entropy,
        mean_abs_mu,
        mean_abs_sigma_minus_one,
        decoder_grad_nonzero,
        projector_grad_nonzero,
        param_hash: projector.params.content_hash(),
    })
}

/// Seeds and sampler used to measure oracle alignment during training.
pub struct Probe<'a> {
    pub engine: &'a DiffusionEngine,
    pub guidance: GuidanceConfig,
    pub seeds: SeedRange,
}

/// Mean oracle sentence score of `(optionally refined)` noises over seeds × prompts.
pub fn probe_alignment(probe: &Probe<'_>, world: &World, projector: Option<&NoiseProjector>, prompt_ids: &[usize]) -> Result<f64> {
    let data = examples(world, probe.seeds, prompt_ids)?;
    let mut scores = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let eps: Vec<Latent> = match projector {
            Some(p) => {
                let items: Vec<_> = chunk.iter().map(|e| (&e.eps, &world.prompts[e.prompt_id])).collect();
                refine_batch(p, &items)?
            }
            None => chunk.iter().map(|e| e.eps.clone()).collect(),
        };
        for (ex, e) in chunk.iter().zip(&eps) {
            let x0 = probe.engine.sample_ode(e, ex.prompt_id, probe.guidance).map_err(|err| Error::Sampling {
                seed: ex.seed,
                prompt_id: ex.prompt_id,
                source: Box::new(err),
            })?;
            scores.push(oracle_sentence_score(&x0.values, &world.prompts[ex.prompt_id], world) as f64);
        }
    }
    Ok(stats::mean(&scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub logit: f64,
    pub constraint: f64,
    pub mean_r_refined: f64,
    pub mean_r_init: f64,
    pub probe_alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub tau: f64,
    pub epochs: Vec<FinalEpoch>,
    pub probe_alignment_before: Option<f64>,
    pub reward_hash: String,
    pub param_hash: String,
}

/// Minimizes `L_logit + τ·L_constraint` against the frozen reward model.
///
/// On divergence (non-finite loss, or epoch loss above 10× the first
/// epoch's for 3 epochs) the projector is restored to its last good epoch
/// and an error is returned.
pub fn train_final(projector: &mut NoiseProjector, reward: &FrozenReward, world: &World, cfg: &ProjectorConfig, probe: Option<&Probe<'_>>) -> Result<FinalReport> {
    let weights = weight_vector(cfg.w_max)?;
    let prompts = training_prompts(cfg, world);
    let data = examples(world, cfg.train_seeds, &prompts)?;
    let model = reward.model()?;
    // the initial branch never changes: score it once
    let mut r_init = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let items: Vec<(&Latent, usize)> = chunk.iter().map(|e| (&e.eps, e.prompt_id)).collect();
        r_init.extend(batch_rewards(model, world, &items)?.scalar);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut adam = Adam::new(
        &projector.params,
        AdamConfig {
            lr: cfg.final_lr,
            ..Default::default()
        },
    );
    let probe_alignment_before = probe.map(|p| probe_alignment(p, world, Some(projector), &prompts)).transpose()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.final_epochs);
    let mut last_good = projector.params.clone();
    let mut initial_loss = None;
    let mut bad_epochs = 0;
    for epoch in 0..cfg.final_epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut tot_logit, mut tot_c, mut tot_ref, mut tot_init, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let init: Vec<f64> = idx.iter().map(|&i| r_init[i]).collect();
            let tape = Tape::new();
            let pb = projector.params.bind(&tape);
            let rb = model.params.bind_frozen(&tape);
            let (eps, trace) = projector_pass(projector, world, &tape, &pb, &batch)?;
            let refined = trace.mu.add(trace.sigma.mul(eps)?)?;
            let terms = logit_loss(model, &rb, world, refined, &batch, &init, &weights, cfg.beta_dpo)?;
            let constraint = kl_constraint(trace.mu, trace.sigma, cfg.lambda)?;
            let loss = terms.loss.add(constraint.scale(cfg.tau))?;
            let value = loss.item();
            if !value.is_finite() {
                projector.params.load_values(&last_good)?;
                return Err(Error::Diverged {
                    epoch,
                    reason: "non-finite final loss; projector restored to last good epoch".into(),
                });
            }
            let grads = tape.backward(loss)?;
            projector.params.absorb_grads(&pb, &grads);
            clip_grad_norm(&mut projector.params, cfg.clip_norm);
            adam.step(&mut projector.params)?;
            let k = batch.len() as f64;
            tot += value;
            tot_logit += terms.loss.item();
            tot_c += constraint.item() * k;
            tot_ref += terms.r_refined.iter().sum::<f64>();
            tot_init += init.iter().sum::<f64>();
            n += k;
        }
        // reward model must be untouched by projector training
        reward.model()?;
        let record = FinalEpoch {
            epoch,
            loss: tot / n,
            logit: tot_logit / n,
            constraint: tot_c / n,
            mean_r_refined: tot_ref / n,
            mean_r_init: tot_init / n,
            probe_alignment: probe.map(|p| probe_alignment(p, world, Some(projector), &prompts)).transpose()?,
        };
        info!(
            "final epoch {epoch}: loss {:.4}, constraint {:.5}, reward {:.3} -> {:.3}, probe {:?}",
            record.loss, record.constraint, record.mean_r_init, record.mean_r_refined, record.probe_alignment
        );
        let first = *initial_loss.get_or_insert(record.loss);
        bad_epochs = if record.loss > 10.0 * first.abs().max(1e-12) { bad_epochs + 1 } else { 0 };
        epochs.push(record);
        if bad_epochs >= 3 {
            projector.params.load_values(&last_good)?;
            warn!("final training diverged at epoch {epoch}; restored last good parameters");
            return Err(Error::Diverged {
                epoch,
                reason: format!("loss above 10x its first-epoch value ({first:.4}) for 3 epochs"),
            });
        }
        if bad_epochs == 0 {
            last_good = projector.params.clone();
        }
    }
    Ok(FinalReport {
        tau: cfg.tau,
        epochs,
        probe_alignment_before,
        reward_hash: reward.hash().to_string(),
        param_hash: projector.params.content_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_vector_closed_form() {
        let w = weight_vector(5.0).unwrap().w;
        assert_eq!(w[0], 5.0);
        assert_eq!(w[9], 1.0);
        assert!((w[3] - (6.0 - 5f64.powf(1.0 / 3.0))).abs() < 1e-12);
        assert!((w[3] - 4.290).abs() < 1e-3);
        assert!(weight_vector(1.0).is_err());
    }

    #[test]
    fn dpo_zero_gap_is_ln2() {
        assert!((unweighted_dpo_loss(3.0, 3.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(unweighted_dpo_loss(1000.0, 0.0) < 1e-300);
        assert!((unweighted_dpo_loss(0.0, 800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn kl_values_match_formula() {
        assert_eq!(kl_constraint_values(&[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap(), 0.0);
        assert!((kl_constraint_values(&[1.0], &[1.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_constraint_values(&[0.0], &[0.0], 1.0).is_err());
    }
}
