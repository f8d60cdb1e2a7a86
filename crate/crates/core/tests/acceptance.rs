//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Exits non-zero on a failure only when `ACCEPTANCE_STRICT` is set.

use std::fs;
use std::path::Path;
use std::time::Instant;

use noiseproj_core::config::{BackboneConfig, Config, Routing, SeedRange};
use noiseproj_core::diffusion::{Condition, DiffusionEngine, GaussianMixture, GuidanceConfig, NoiseSchedule};
use noiseproj_core::eval::{save_checkpoint, Stage};
use noiseproj_core::nets::{latent_batch, text_batch, NoiseProjector, RewardModel, VaeDecoder, NUM_SCORES};
use noiseproj_core::pipeline::Context;
use noiseproj_core::projector::{
    examples, kl_constraint, kl_constraint_values, logit_loss, reconstruction_loss, refine, refine_batch, unweighted_dpo_loss, weight_vector, Example,
    WeightVector,
};
use noiseproj_core::reward::FrozenReward;
use noiseproj_core::testbed::{make_world, seed_to_noise, Latent, LatentShape};
use noiseproj_tensor::gradcheck::max_relative_error;
use noiseproj_tensor::{ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const SCORE_TOL: f64 = 1e-5;
const MEAN_TOL: f64 = 0.05;
const COV_TOL: f64 = 0.1;
const WITHIN1_MIN: f64 = 0.9;
const SPEARMAN_MIN: f64 = 0.8;
const MU_MAX: f64 = 0.1;
const SIGMA_MAX: f64 = 0.1;
const MOMENT_MEAN_TOL: f64 = 0.05;
const MOMENT_VAR_TOL: f64 = 0.1;
const ALIGN_GAIN_MIN: f64 = 3.0;
const TAU_RATIO_MIN: f64 = 5.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn perturb(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.3 * rng.gen_range(-1.0..1.0);
        }
    }
}

fn probe<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Var<'t> {
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &v.shape());
    v.mul(tape.constant(&w)).unwrap().sum()
}

/// `(mu, sigma, features)` of the projector on frozen parameters.
fn project<'t>(proj: &NoiseProjector, params: &ParamSet, rows: &[&[Vec<f64>]], d_txt: usize, t: &'t Tape, x: Var<'t>) -> (Var<'t>, Var<'t>, Var<'t>) {
    let (txt, off) = text_batch(t, rows, d_txt).unwrap();
    let trace = proj.forward(&params.bind_frozen(t), x, txt, &off).unwrap();
    (trace.mu, trace.sigma, trace.backbone.features)
}

fn gradients() -> Outcome {
    let world = make_world(
        &Config::from_toml_str("[world]\nlatent_shape = [2, 4, 4]\nd_txt = 6\nn_tokens = 3\nn_prompts = 2\ntokens_per_prompt = [1, 2]\n")
            .unwrap()
            .world,
    )
    .unwrap();
    let shape = world.shape();
    let d_txt = world.config.d_txt;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<Example> = examples(&world, SeedRange::new(0, 2), &[0, 1]).unwrap();
    let refs: Vec<&Example> = data.iter().collect();
    let eps = {
        let tape = Tape::new();
        latent_batch(&tape, &data.iter().map(|e| &e.eps).collect::<Vec<_>>()).unwrap().to_tensor()
    };
    let rows: Vec<&[Vec<f64>]> = data.iter().map(|e| world.prompts[e.prompt_id].sentence_embedding.as_slice()).collect();
    let r_init = [3.0, 4.5, 5.0, 6.0];
    let weights = weight_vector(5.0).unwrap();
    let mut worst: Vec<(String, f64)> = Vec::new();

    for routing in [Routing::Soft, Routing::Top1] {
        let cfg = BackboneConfig {
            d_model: 8,
            n_heads: 2,
            n_experts: 3,
            expert_hidden: 4,
            unet_channels: [4, 6],
            feature_channels: 3,
            reward_hidden: 6,
            decoder_hidden: 4,
            routing,
            ..BackboneConfig::default()
        };
        let mut proj = NoiseProjector::new(&cfg, shape, d_txt).unwrap();
        perturb(&mut proj.params, 2);
        let mut reward = RewardModel::new(&cfg, shape, d_txt).unwrap();
        perturb(&mut reward.params, 3);
        let mut decoder = VaeDecoder::new(&cfg, shape);
        perturb(&mut decoder.params, 4);
        let bb = proj.backbone().clone();
        let n = eps.shape()[0];
        let h = rand_tensor(&mut rng, &[n * shape.positions(), cfg.d_model]);
        let text = rand_tensor(&mut rng, &[n + 1, d_txt]);
        // first sample gets two rows, the rest one each
        let offsets: Vec<usize> = std::iter::once(0).chain(2..=n + 1).collect();
        let grid = rand_tensor(&mut rng, &[n, shape.height, shape.width, cfg.d_model]);
        let tag = |s: &str| format!("{s} ({routing:?})");
        let mut check = |name: String, inputs: &[Tensor], f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>| {
            let e = max_relative_error(inputs, GRAD_STEP, |t, v| Ok(f(t, v))).unwrap();
            worst.push((name, e));
        };

        let pp = proj.params.clone();
        check(tag("embed"), &[eps.clone()], &|t, v| probe(t, bb.embed(&pp.bind_frozen(t), v[0]).unwrap(), 5));
        check(tag("cross attention"), &[h.clone(), text.clone()], &|t, v| {
            probe(t, bb.cross_attention(&pp.bind_frozen(t), v[0], v[1], &offsets).unwrap(), 6)
        });
        check(tag("mixture of experts"), &[h.clone()], &|t, v| probe(t, bb.moe(&pp.bind_frozen(t), v[0]).unwrap().0, 7));
        check(tag("unet"), &[grid.clone()], &|t, v| probe(t, bb.unet(&pp.bind_frozen(t), v[0]).unwrap(), 8));
        let dp = decoder.params.clone();
        check(tag("decoder"), &[eps.clone()], &|t, v| probe(t, decoder.forward(&dp.bind_frozen(t), v[0]).unwrap(), 9));

        let labels: Vec<usize> = (0..n).map(|i| (3 * i + 1) % NUM_SCORES).collect();
        let tokens = rand_tensor(&mut rng, &[n, d_txt]);
        let rp = reward.params.clone();
        check(tag("reward cross-entropy"), &[eps.clone()], &|t, v| {
            let logits = reward.logits(&rp.bind_frozen(t), v[0], t.constant(&tokens)).unwrap();
            logits.log_softmax().unwrap().pick(&labels).unwrap().mean().neg()
        });
        let normal = rand_tensor(&mut rng, &eps.shape());
        check(tag("warmup objective"), &[eps.clone()], &|t, v| {
            let (mu, sigma, features) = project(&proj, &pp, &rows, d_txt, t, v[0]);
            let refined = mu.add(sigma.mul(t.constant(&normal)).unwrap()).unwrap();
            let kl = kl_constraint(mu, sigma, 1.0).unwrap();
            kl.add(reconstruction_loss(features, decoder.forward(&dp.bind_frozen(t), refined).unwrap()).unwrap()).unwrap()
        });
        check(tag("final objective"), &[eps.clone()], &|t, v| {
            let (mu, sigma, _) = project(&proj, &pp, &rows, d_txt, t, v[0]);
            let refined = mu.add(sigma.mul(v[0]).unwrap()).unwrap();
            let logit = logit_loss(&reward, &rp.bind_frozen(t), &world, refined, &refs, &r_init, &weights, 0.8).unwrap().loss;
            logit.add(kl_constraint(mu, sigma, 1.0).unwrap().scale(200.0)).unwrap()
        });
    }
    let pair = [rand_tensor(&mut rng, &[6]), Tensor::new(&[6], (0..6).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap()];
    worst.push(("constraint".into(), max_relative_error(&pair, GRAD_STEP, |_, v| kl_constraint(v[0], v[1], 0.7).map_err(|e| panic!("{e}"))).unwrap()));
    worst.push((
        "reconstruction".into(),
        max_relative_error(&pair, GRAD_STEP, |_, v| reconstruction_loss(v[0], v[1]).map_err(|e| panic!("{e}"))).unwrap(),
    ));
    worst.push(("pairwise logistic".into(), max_relative_error(&pair[..1], GRAD_STEP, |_, v| Ok(v[0].scale(-1.0).softplus().sum())).unwrap()));

    let (name, e) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    outcome(e <= GRAD_TOL, format!("{} checks, worst relative error {e:.2e} ({name})", worst.len()))
}

fn exact_score() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sched = NoiseSchedule::linear(50, 1e-4, 0.02, 1000).unwrap();
    let dim = 3;
    let mut worst: f64 = 0.0;
    let points = 120;
    for trial in 0..points {
        let k = 1 + trial % 3;
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let m: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let v: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.gen_range(0.1..1.5)).collect()).collect();
        let mix = GaussianMixture::new(&w, &m, &v).unwrap();
        let engine = DiffusionEngine::new(sched.clone(), vec![mix.clone()]).unwrap();
        let t = rng.gen_range(1..=50);
        let (ab, s2) = (sched.alpha_bar(t).unwrap(), sched.sigma_sq(t).unwrap());
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let eps = engine
            .eps_exact(&Latent::new(LatentShape::new(1, 1, dim), x.clone()).unwrap(), t, Condition::Prompt(0))
            .unwrap();
        let h = 1e-5;
        let oracle: Vec<f64> = (0..dim)
            .map(|i| {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                -s2.sqrt() * (mix.log_density(&xp, ab, s2) - mix.log_density(&xm, ab, s2)) / (2.0 * h)
            })
            .collect();
        let diff: f64 = eps.values.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = oracle.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    outcome(worst <= SCORE_TOL, format!("{points} points, worst relative error {worst:.2e}"))
}

fn pushforward() -> Outcome {
    let m = [1.0, -0.5];
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02, 1000).unwrap();
    let engine = DiffusionEngine::new(sched, vec![GaussianMixture::gaussian(m.to_vec(), vec![1.0; 2])]).unwrap();
    let g = GuidanceConfig::new(0.0).unwrap();
    let n = 10_000;
    let xs: Vec<Vec<f64>> = (0..n)
        .map(|s| engine.sample_ode(&seed_to_noise(s, LatentShape::new(1, 1, 2)).latent, 0, g).unwrap().values)
        .collect();
    let mean: Vec<f64> = (0..2).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n as f64).collect();
    let mean_err = (0..2).map(|i| (mean[i] - m[i]).abs()).fold(0.0, f64::max);
    let mut frob = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let c = xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1) as f64;
            frob += (c - if i == j { 1.0 } else { 0.0 }).powi(2);
        }
    }
    let frob = frob.sqrt();
    outcome(
        mean_err <= MEAN_TOL && frob <= COV_TOL,
        format!("max mean error {mean_err:.4}, covariance Frobenius error {frob:.4} (2-dim latent, 100 steps, 10^4 samples)"),
    )
}

fn identities() -> Outcome {
    let dpo = unweighted_dpo_loss(4.2, 4.2);
    let kl = kl_constraint_values(&[0.0; 16], &[1.0; 16], 1.0).unwrap();
    let w = weight_vector(5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let world = make_world(&Config::default().world).unwrap();
    let mut reward = RewardModel::new(&BackboneConfig::default(), world.shape(), world.config.d_txt).unwrap();
    perturb(&mut reward.params, 5);
    let data = examples(&world, SeedRange::new(0, 2), &[0, 1, 2]).unwrap();
    let refs: Vec<&Example> = data.iter().collect();
    let r_init: Vec<f64> = (0..data.len()).map(|_| rng.gen_range(0.0..9.0)).collect();
    let tape = Tape::new();
    let refined = latent_batch(&tape, &data.iter().map(|e| &e.eps).collect::<Vec<_>>()).unwrap();
    let terms = logit_loss(&reward, &reward.params.bind_frozen(&tape), &world, refined, &refs, &r_init, &WeightVector { w: [1.0; NUM_SCORES] }, 1.0).unwrap();
    let summed: f64 = terms.r_refined.iter().zip(&r_init).map(|(a, b)| unweighted_dpo_loss(*a, *b)).sum();
    let gap = (terms.loss.item() - summed).abs();
    let pass = (dpo - std::f64::consts::LN_2).abs() <= 1e-9 && kl == 0.0 && w.w[0] == 5.0 && w.w[9] == 1.0 && gap <= 1e-9;
    outcome(
        pass,
        format!(
            "zero-gap loss - ln2 = {:.1e}, constraint at (0,1) = {kl}, w[0] = {}, w[9] = {}, unit-weight gap {gap:.1e}",
            dpo - std::f64::consts::LN_2,
            w.w[0],
            w.w[9]
        ),
    )
}

fn identity_at_init(ctx: &Context) -> Outcome {
    let fresh = ctx.new_projector().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    for _ in 0..100 {
        let seed = rng.gen_range(0..100_000);
        let p = rng.gen_range(0..ctx.world.prompts.len());
        let eps = seed_to_noise(seed, ctx.world.shape()).latent;
        if refine(&fresh, &eps, &ctx.world.prompts[p]).unwrap() == eps {
            exact += 1;
        }
    }
    let seeds = ctx.config.eval.unseen_seeds;
    let base = ctx.eval(None, seeds).unwrap();
    let with = ctx.eval(Some(&fresh), seeds).unwrap();
    let same = with.samples == base.samples && with.mean.to_bits() == base.mean.to_bits() && with.std.to_bits() == base.std.to_bits();
    outcome(exact == 100 && same, format!("{exact}/100 refinements bit-exact, baseline report reproduced: {same}"))
}

fn warmup_proximity(ctx: &Context, warm: &NoiseProjector, mean_abs_mu: f64, mean_abs_sigma: f64) -> Outcome {
    // one prompt per seed, cycling, so every draw has its own noise
    let n_prompts = ctx.world.prompts.len();
    let draws: Vec<Example> = (0..10_000u64)
        .flat_map(|i| examples(&ctx.world, SeedRange::new(10_000 + i, 10_001 + i), &[i as usize % n_prompts]).unwrap())
        .collect();
    let d = ctx.world.shape().numel();
    let (mut sum, mut sq) = (vec![0.0; d], vec![0.0; d]);
    for chunk in draws.chunks(64) {
        let items: Vec<_> = chunk.iter().map(|e| (&e.eps, &ctx.world.prompts[e.prompt_id])).collect();
        for r in refine_batch(warm, &items).unwrap() {
            for (i, v) in r.values.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
    }
    let n = draws.len() as f64;
    let mut mean_err: f64 = 0.0;
    let mut var_err: f64 = 0.0;
    for i in 0..d {
        let m = sum[i] / n;
        mean_err = mean_err.max(m.abs());
        var_err = var_err.max((sq[i] / n - m * m - 1.0).abs());
    }
    outcome(
        mean_abs_mu < MU_MAX && mean_abs_sigma < SIGMA_MAX && mean_err <= MOMENT_MEAN_TOL && var_err <= MOMENT_VAR_TOL,
        format!(
            "mean|mu| {mean_abs_mu:.4}, mean|sigma-1| {mean_abs_sigma:.4}, worst element mean {mean_err:.4} and variance error {var_err:.4} over {} draws",
            draws.len()
        ),
    )
}

fn determinism() -> Outcome {
    let toml = "[reward]\nseeds = [0, 20]\nepochs = 2\n\
                [projector]\nwarmup_epochs = 1\nfinal_epochs = 2\ntrain_seeds = [0, 6]\nprompts = [0, 1]\n\
                [eval]\nunseen_seeds = [350, 354]\nprobe_seeds = [350, 352]\n\
                diversity_samples = 520\nfid_reshuffles = 2\nis_folds = 2\nablation_taus = [0.0, 200.0]\n";
    let run = |dir: &Path| {
        let ctx = Context::new(Config::from_toml_str(toml).unwrap()).unwrap();
        let hash = ctx.config.model_hash();
        let ds = ctx.gen_data(ctx.config.reward.seeds).unwrap();
        ds.save(&dir.join("dataset.jsonl")).unwrap();
        let (reward, rr) = ctx.train_reward(&ds).unwrap();
        save_checkpoint(&dir.join("reward.ckpt"), &reward.params, Stage::Reward, &hash).unwrap();
        write_json(dir, "reward.json", &rr);
        let (warm, wr) = ctx.warmup().unwrap();
        save_checkpoint(&dir.join("warmup.ckpt"), &warm.params, Stage::ProjectorWarmup, &hash).unwrap();
        write_json(dir, "warmup.json", &wr);
        let frozen = FrozenReward::new(reward);
        let (proj, fr) = ctx.train_projector(&warm, &frozen, None, true).unwrap();
        save_checkpoint(&dir.join("projector.ckpt"), &proj.params, Stage::ProjectorFinal, &hash).unwrap();
        write_json(dir, "projector.json", &fr);
        write_json(dir, "eval.json", &ctx.eval(Some(&proj), ctx.config.eval.unseen_seeds).unwrap());
        write_json(dir, "diversity.json", &ctx.diversity(&proj).unwrap());
        write_json(dir, "ablation.json", &ctx.ablate_tau(&warm, &frozen, &ctx.config.eval.ablation_taus, ctx.config.eval.probe_seeds).unwrap());
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let differing: Vec<String> = names
        .iter()
        .filter(|n| fs::read(a.path().join(n)).unwrap() != fs::read(b.path().join(n)).ok().unwrap_or_default())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    outcome(differing.is_empty(), format!("{} artifacts compared, differing: {differing:?}", names.len()))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) {
    fs::write(dir.join(name), serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, o: Outcome| {
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "gradient correctness", gradients());
    record(2, "exact-score oracle", exact_score());
    record(3, "ODE pushforward", pushforward());
    record(4, "loss identities", identities());

    let ctx = Context::new(Config::default()).unwrap();
    record(5, "identity at init", identity_at_init(&ctx));

    let start = Instant::now();
    let ds = ctx.gen_data(ctx.config.reward.seeds).unwrap();
    let (reward, rr) = ctx.train_reward(&ds).unwrap();
    let reward_time = start.elapsed().as_secs_f64();
    let last = rr.last().unwrap();
    record(
        6,
        "reward distillation",
        outcome(
            last.heldout_within1 >= WITHIN1_MIN && rr.heldout_spearman >= SPEARMAN_MIN,
            format!(
                "held-out within-1 {:.3}, Spearman {:.3} ({reward_time:.0}s)",
                last.heldout_within1, rr.heldout_spearman
            ),
        ),
    );

    let (warm, wr) = ctx.warmup().unwrap();
    record(7, "warmup Gaussian proximity", warmup_proximity(&ctx, &warm, wr.mean_abs_mu, wr.mean_abs_sigma_minus_one));

    let frozen = FrozenReward::new(reward);
    let (proj, fr) = ctx.train_projector(&warm, &frozen, None, false).unwrap();
    let pipeline_time = start.elapsed().as_secs_f64();
    let seen = (ctx.eval(None, ctx.config.eval.seen_seeds).unwrap(), ctx.eval(Some(&proj), ctx.config.eval.seen_seeds).unwrap());
    let unseen = (ctx.eval(None, ctx.config.eval.unseen_seeds).unwrap(), ctx.eval(Some(&proj), ctx.config.eval.unseen_seeds).unwrap());
    let (seen_gain, unseen_gain) = (seen.1.mean - seen.0.mean, unseen.1.mean - unseen.0.mean);
    let total_time = start.elapsed().as_secs_f64();
    record(
        8,
        "alignment improvement",
        outcome(
            unseen_gain >= ALIGN_GAIN_MIN && seen_gain >= unseen_gain,
            format!(
                "unseen {:.2} -> {:.2} ({unseen_gain:+.2}), seen {:.2} -> {:.2} ({seen_gain:+.2}); training {pipeline_time:.0}s, with evaluation {total_time:.0}s",
                unseen.0.mean, unseen.1.mean, seen.0.mean, seen.1.mean
            ),
        ),
    );

    let div = ctx.diversity(&proj).unwrap();
    record(
        9,
        "diversity narrowing",
        outcome(
            div.projector.split_fid < div.pretrained.split_fid && div.projector.is_like < div.pretrained.is_like,
            format!(
                "split-FID {:.4} -> {:.4}, IS-like {:.4} -> {:.4} over {} samples",
                div.pretrained.split_fid, div.projector.split_fid, div.pretrained.is_like, div.projector.is_like, div.pretrained.samples
            ),
        ),
    );

    let (free, free_report) = ctx.train_projector(&warm, &frozen, Some(0.0), false).unwrap();
    let free_unseen = ctx.eval(Some(&free), ctx.config.eval.unseen_seeds).unwrap();
    let constraint = |r: &noiseproj_core::projector::FinalReport| r.epochs.iter().map(|e| e.constraint).sum::<f64>() / r.epochs.len() as f64;
    let (c0, c200) = (constraint(&free_report), constraint(&fr));
    record(
        10,
        "constraint weight role",
        outcome(
            c0 >= TAU_RATIO_MIN * c200 && unseen.1.mean >= free_unseen.mean,
            format!(
                "mean constraint tau=0 {c0:.5} vs tau=200 {c200:.5} (ratio {:.1}), unseen alignment tau=200 {:.2} vs tau=0 {:.2}",
                c0 / c200.max(1e-300),
                unseen.1.mean,
                free_unseen.mean
            ),
        ),
    );

    record(11, "determinism", determinism());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        // report-only unless asked to gate on the outcome
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
