//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::io::Write;
use std::time::Instant;

use layerskip::cache::KvqCache;
use layerskip::checkpoint::load_checkpoint;
use layerskip::corpus::{synthetic_text, Corpus};
use layerskip::decoder::{
    generate, generate_autoregressive, generate_self_speculative, kvq_ablation, DecodeConfig,
    DecodeMode, DecodeReport, SelfSpecSession,
};
use layerskip::metrics::{rouge2_f1, speedup};
use layerskip::model::{
    forward_step, forward_train, DropMask, ModelConfig, ModelParams, TokenBatch,
};
use layerskip::nn::{grad_check, sample_coords, Scalar};
use layerskip::probe::layer_perplexities;
use layerskip::schedules::{
    layer_scale_d, loss_and_grad, normalized_exit_scale, time_scale_s, total_loss_weighted,
    DropoutSchedule, EarlyExitLossSchedule, ExitCurriculum, LayerProfile, TimeCurriculum,
};
use layerskip::tokenizer::encode;
use layerskip::trainer::{train_run, TrainConfig};
use layerskip::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String)>;

struct Suite {
    failed: Vec<usize>,
}

impl Suite {
    fn record(&mut self, id: usize, name: &str, outcome: Outcome) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            self.failed.push(id);
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2} {name}: {detail}");
        std::io::stdout().flush().ok();
    }
}

const TRAIN_SEED: u64 = 1;
const PROMPT_SEED: u64 = 99;

fn corpus() -> (Corpus, Corpus) {
    Corpus::from_lines(&synthetic_text(12_000, TRAIN_SEED)).split(0.1)
}

/// Sentence prefixes from a grammar sample disjoint in seed from training.
fn prompts(n: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROMPT_SEED);
    synthetic_text(n, PROMPT_SEED)
        .lines()
        .map(|l| {
            let cut = rng.random_range(3..=12).min(l.len());
            encode(&l[..cut])
        })
        .collect()
}

fn model_config(dim: usize, ffn_hidden: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        dim,
        n_heads: 4,
        vocab: 257,
        max_context: 256,
        ffn_hidden,
    }
}

#[derive(Clone, Copy)]
enum Recipe {
    Baseline,
    EarlyExit,
    LayerSkip,
}

fn train_config(model: &ModelConfig, steps: usize, recipe: Recipe) -> TrainConfig {
    let l = model.n_layers;
    let mut cfg = TrainConfig::baseline(model, steps, 7);
    cfg.context_len = 32;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;
    if matches!(recipe, Recipe::EarlyExit | Recipe::LayerSkip) {
        cfg.early_exit = EarlyExitLossSchedule::new(0.2, ExitCurriculum::All, steps, l).unwrap();
    }
    if matches!(recipe, Recipe::LayerSkip) {
        cfg.dropout = DropoutSchedule::new(0.2, TimeCurriculum::Exponential, steps, l, 7).unwrap();
    }
    cfg
}

fn train(model: ModelConfig, steps: usize, recipe: Recipe) -> Result<ModelParams> {
    let (tr, _) = corpus();
    Ok(train_run(
        &tr.tokens,
        None,
        model,
        &train_config(&model, steps, recipe),
        None,
    )?
    .0)
}

fn schedule_math() -> Outcome {
    let mut worst = 0.0f64;
    for n in 1..=64usize {
        for l in 0..n {
            let want = if n == 1 {
                0.0
            } else {
                2f64.powf(l as f64 / (n - 1) as f64) - 1.0
            };
            worst = worst.max((layer_scale_d(l, n) - want).abs());
        }
    }
    for total in [1usize, 2, 3, 7, 100, 1_000, 12_345, 100_000] {
        for t in 0..total {
            let want = if total == 1 {
                1.0
            } else {
                2f64.powf(t as f64 / (total - 1) as f64) - 1.0
            };
            worst = worst.max((time_scale_s(t, total, TimeCurriculum::Exponential)? - want).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64usize);
        let total = rng.random_range(1..=100_000usize);
        let e_scale: f64 = rng.random();
        let curriculum = match rng.random_range(0..3) {
            0 => ExitCurriculum::Rotational {
                dilation: rng.random_range(1..=n),
            },
            1 => ExitCurriculum::Gradual,
            _ => ExitCurriculum::All,
        };
        let s = EarlyExitLossSchedule::new(e_scale, curriculum, total, n)?;
        let t = rng.random_range(0..total);
        // e(l) by direct summation, then normalization over enabled layers
        let e: Vec<f64> = (0..n)
            .map(|l| {
                let tri: f64 = (0..=l).map(|i| i as f64).sum();
                if l + 1 < n {
                    e_scale * tri
                } else {
                    (n - 1) as f64
                        + e_scale * (0..n.saturating_sub(1)).map(|i| i as f64).sum::<f64>()
                }
            })
            .collect();
        let on: Vec<bool> = (0..n).map(|l| s.enabled(t, l)).collect();
        let z: f64 = (0..n).filter(|&l| on[l]).map(|l| e[l]).sum();
        let w: Vec<f64> = (0..n).map(|l| normalized_exit_scale(t, l, &s)).collect();
        if z > 0.0 {
            for l in 0..n {
                let want = if on[l] { e[l] / z } else { 0.0 };
                worst = worst.max((w[l] - want).abs());
            }
        }
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((
        worst <= 1e-12 && sum_err <= 1e-12,
        format!(
            "max closed-form error {worst:.2e}, max |sum - 1| {sum_err:.2e} over 1000 schedules"
        ),
    ))
}

fn uniform_equivalent_rate() -> Outcome {
    let s = DropoutSchedule::new(0.2, TimeCurriculum::Constant, 10, 24, 0)?;
    let mean = s.mean_rate(0)?;
    let mut uniform = s;
    uniform.layer_profile = LayerProfile::Uniform;
    uniform.p_max = mean;
    Ok((
        (mean - 0.0889).abs() <= 0.0005 && (uniform.mean_rate(0)? - mean).abs() < 1e-15,
        format!("mean rate {mean:.6} (target 0.0889 ± 0.0005)"),
    ))
}

fn rotation() -> Outcome {
    let s =
        EarlyExitLossSchedule::new(0.2, ExitCurriculum::Rotational { dilation: 8 }, 10_000, 32)?;
    let mut once = true;
    for t0 in 0..2_000 {
        for l in 0..32 {
            once &= (t0..t0 + 8).filter(|&t| s.enabled(t, l)).count() == 1;
        }
    }
    let max_on = (0..2_000)
        .map(|t| {
            s.weights(t)
                .iter()
                .filter(|&&w| w > 0.0)
                .count()
                .max((0..32).filter(|&l| s.enabled(t, l)).count())
        })
        .max()
        .unwrap_or(0);
    Ok((
        once && max_on <= 4,
        format!("once per 8 iterations: {once}; max enabled per iteration {max_on} (bound 4)"),
    ))
}

fn grad_point<T: Scalar>() -> Result<(ModelParams<T>, TokenBatch, Vec<u32>)> {
    let cfg = ModelConfig {
        n_layers: 2,
        dim: 16,
        n_heads: 2,
        vocab: 13,
        max_context: 16,
        ffn_hidden: 24,
    };
    let mut p = ModelParams::<T>::init(cfg, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    for (name, q) in names.iter().zip(p.params_mut()) {
        for v in q.value.data_mut() {
            let x = if name.ends_with("norm") {
                1.0 + rng.random_range(-0.2..0.2)
            } else if name == "lm_head" {
                rng.random_range(-2.0..2.0)
            } else {
                rng.random_range(-0.5..0.5)
            };
            *v = T::from_f64_lossy(x);
        }
    }
    let tokens: Vec<u32> = (0..12).map(|i| (i * 5 + 3) % 13).collect();
    let targets = tokens.iter().map(|t| (t * 3 + 1) % 13).collect();
    Ok((p, TokenBatch::new(2, 6, tokens)?, targets))
}

fn grad_error<T: Scalar>(mask: &DropMask, delta: f64) -> Result<f64> {
    let (mut p, b, targets) = grad_point::<T>()?;
    let weights = EarlyExitLossSchedule::new(1.0, ExitCurriculum::All, 10, 2)?.weights(0);
    p.zero_grad();
    loss_and_grad(&mut p, &b, &targets, mask, &weights)?;
    let point = p.flat_values();
    let analytic = p.flat_grads();
    let mut oracle = p.cast::<f64>();
    let coords = sample_coords(point.len(), 400, 3);
    grad_check(
        |x: &[f64]| {
            oracle.set_flat_values(x)?;
            let h = forward_train(&oracle, &b, mask)?;
            Ok(total_loss_weighted(&oracle, &h, &targets, &weights)?.total)
        },
        &point,
        &analytic,
        delta,
        &coords,
    )
}

fn gradients() -> Outcome {
    let clock = Instant::now();
    let none = DropMask::none(2, 2);
    let frozen = DropMask::from_fn(2, 2, |l, s| l == 1 && s == 0);
    let e32 = grad_error::<f32>(&none, 1e-3)?.max(grad_error::<f32>(&frozen, 1e-3)?);
    let e64 = grad_error::<f64>(&none, 1e-5)?.max(grad_error::<f64>(&frozen, 1e-5)?);
    let secs = clock.elapsed().as_secs_f64();
    Ok((
        e32 < 1e-3 && e64 < 1e-6,
        format!("32-bit rel err {e32:.2e} (< 1e-3), 64-bit rel err {e64:.2e} (< 1e-6), {secs:.1}s"),
    ))
}

fn metrics() -> Outcome {
    let f = rouge2_f1("the cat sat on mat", "the cat on mat");
    let s = speedup(36.0, 18.0)?;
    Ok((
        (f - 4.0 / 7.0).abs() <= 1e-9 && s == 2.0,
        format!("rouge2_f1 {f:.12} (4/7), speedup(36 ms, 18 ms) = {s}"),
    ))
}

fn determinism() -> Outcome {
    let model = ModelConfig {
        n_layers: 4,
        dim: 32,
        n_heads: 4,
        vocab: 257,
        max_context: 64,
        ffn_hidden: 64,
    };
    let cfg = train_config(&model, 40, Recipe::LayerSkip);
    let (tr, _) = corpus();
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    for d in &dirs {
        train_run(&tr.tokens, None, model, &cfg, Some(d.path()))?;
    }
    let bytes: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| std::fs::read(d.path().join("final.lskp")))
        .collect::<std::io::Result<_>>()?;
    let same_ckpt = bytes[0] == bytes[1];
    let params: Vec<ModelParams> = dirs
        .iter()
        .map(|d| load_checkpoint(&d.path().join("final.lskp")).map(|c| c.params))
        .collect::<Result<_>>()?;
    let mut same_gen = true;
    for prompt in prompts(10) {
        for mode in DecodeMode::ALL {
            let dc = DecodeConfig::new(mode, 2, 3).with_max_new_tokens(16);
            same_gen &=
                generate(&params[0], &prompt, &dc)?.0 == generate(&params[1], &prompt, &dc)?.0;
        }
    }
    Ok((
        same_ckpt && same_gen,
        format!(
            "checkpoints byte-identical: {same_ckpt} ({} bytes); generations identical: {same_gen}",
            bytes[0].len()
        ),
    ))
}

fn greedy_exactness(params: &ModelParams, prompts: &[Vec<u32>]) -> Outcome {
    let clock = Instant::now();
    let mut mismatches = 0;
    let mut runs = 0;
    let mut accepted = 0;
    let mut proposed = 0;
    for prompt in prompts {
        let ar = DecodeConfig::new(DecodeMode::Autoregressive, 8, 1).with_max_new_tokens(32);
        let (base, _) = generate_autoregressive(params, prompt, &ar)?;
        for e in [2, 4, 6] {
            for d in [1, 4, 8] {
                let dc =
                    DecodeConfig::new(DecodeMode::SelfSpeculative, e, d).with_max_new_tokens(32);
                let (out, rep) = generate_self_speculative(params, prompt, &dc)?;
                mismatches += usize::from(out != base);
                runs += 1;
                accepted += rep.drafts_accepted;
                proposed += rep.drafts_proposed;
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    Ok((
        mismatches == 0 && prompts.len() >= 100 && secs < 120.0,
        format!(
            "{mismatches} mismatches over {} prompts x 9 (E, d) = {runs} runs; pooled acceptance {:.3}; {secs:.1}s (< 120s)",
            prompts.len(),
            accepted as f64 / proposed.max(1) as f64
        ),
    ))
}

fn cache_consistency(params: &ModelParams, prompts: &[Vec<u32>]) -> Outcome {
    let l = params.config.n_layers;
    let dc = DecodeConfig::new(DecodeMode::SelfSpeculative, 4, 4).with_max_new_tokens(200);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut rounds, mut rejected, mut worst) = (0, 0, 0.0f64);
    let mut aligned = true;
    for prompt in prompts.iter().cycle() {
        if rounds >= 50 {
            break;
        }
        let mut s = SelfSpecSession::new(params, prompt, &dc)?;
        while !s.is_finished() && rounds < 50 {
            let j = rng.random_range(0..4usize);
            let stats = s.round_with(&mut |i, t| if i == j { (t + 1) % 256 } else { t })?;
            rounds += 1;
            rejected += usize::from(stats.accepted < stats.drafted);
            let committed = s.committed_tokens();
            aligned &= (0..l).all(|k| s.cache().valid_len(k) == committed.len());
            let mut fresh = KvqCache::new(&params.config);
            forward_step(params, &committed, &mut fresh, l)?;
            worst = worst.max(
                s.cache()
                    .max_abs_diff(&fresh, committed.len())
                    .unwrap_or(f64::INFINITY),
            );
        }
    }
    Ok((
        rounds == 50 && aligned && worst <= 1e-6 && rejected > 0,
        format!("{rounds} rounds, {rejected} with forced rejection; max |cache - fresh| {worst:.2e} (<= 1e-6); layers aligned: {aligned}"),
    ))
}

fn kvq_reuse(params: &ModelParams, prompts: &[Vec<u32>]) -> Outcome {
    let (e, d, l) = (4usize, 4usize, params.config.n_layers);
    let dc = DecodeConfig::new(DecodeMode::SelfSpeculative, e, d).with_max_new_tokens(32);
    let ab = kvq_ablation(params, prompts, &dc)?;
    let (w, wo) = (&ab.with_reuse, &ab.without_reuse);
    let mut exact = w.round_stats.len() == wo.round_stats.len();
    for (a, b) in w.round_stats.iter().zip(&wo.round_stats) {
        exact &= a.drafted == b.drafted
            && a.verify_units == (a.drafted * (l - e)) as u64
            && b.verify_units == (b.drafted * l) as u64;
    }
    let full_rounds = w.round_stats.iter().filter(|s| s.drafted == d).count();
    Ok((
        ab.identical_outputs && exact,
        format!(
            "outputs identical: {}; per-round verify units d(L-E) = {} vs dL = {} in all {} rounds ({} with d = {d}): {exact}; ms/token {:.3} with reuse, {:.3} without",
            ab.identical_outputs,
            d * (l - e),
            d * l,
            w.rounds,
            full_rounds,
            w.wall_ms_per_token,
            wo.wall_ms_per_token
        ),
    ))
}

fn acceptance(params: &ModelParams, prompts: &[Vec<u32>]) -> Result<DecodeReport> {
    let dc = DecodeConfig::new(DecodeMode::SelfSpeculative, params.config.n_layers / 2, 4)
        .with_max_new_tokens(32);
    let reports = prompts
        .iter()
        .map(|p| generate_self_speculative(params, p, &dc).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    DecodeReport::aggregate(&reports)
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    let total = Instant::now();

    suite.record(2, "schedule math", schedule_math());
    suite.record(3, "uniform-equivalent dropout rate", uniform_equivalent_rate());
    suite.record(4, "rotational curriculum", rotation());
    suite.record(5, "gradient correctness", gradients());
    suite.record(10, "metric oracles", metrics());
    suite.record(11, "determinism", determinism());

    let held_out = prompts(100);
    let steps = 3000;
    let model = model_config(128, 352);
    let (_, heldout) = corpus();
    let mut secs = Vec::new();
    let runs: Result<Vec<ModelParams>> = [Recipe::Baseline, Recipe::EarlyExit, Recipe::LayerSkip]
        .into_iter()
        .map(|r| {
            let clock = Instant::now();
            let p = train(model, steps, r);
            secs.push(clock.elapsed().as_secs_f64());
            p
        })
        .collect();
    let names = [
        (1, "greedy exactness"),
        (6, "cache consistency"),
        (7, "KVQ reuse ablation"),
        (8, "early-exit loss perplexity trend"),
        (9, "acceptance-rate ordering"),
    ];
    match runs {
        Ok(runs) => {
            let (base, ee, ls) = (&runs[0], &runs[1], &runs[2]);
            println!("      trained baseline, early-exit and LayerSkip models ({steps} steps each) in {:.0}s", secs.iter().sum::<f64>());
            suite.record(names[0].0, names[0].1, greedy_exactness(ls, &held_out));
            suite.record(names[1].0, names[1].1, cache_consistency(ls, &held_out));
            suite.record(names[2].0, names[2].1, kvq_reuse(ls, &held_out));
            let trend = (|| -> Outcome {
                let pb = layer_perplexities(base, &heldout.tokens, 32)?;
                let pe = layer_perplexities(ee, &heldout.tokens, 32)?;
                let mid = model.n_layers / 2;
                let last = model.n_layers;
                let ratio = pb[mid] / pe[mid];
                let drift = pe[last] / pb[last] - 1.0;
                let two_runs = secs[0] + secs[1];
                Ok((
                    ratio >= 5.0 && drift.abs() <= 0.15 && two_runs < 1800.0,
                    format!(
                        "layer {mid} perplexity {:.2} baseline vs {:.2} early-exit ({ratio:.1}x, >= 5x); layer {last} {:.3} vs {:.3} ({:+.1}%, within 15%); {two_runs:.0}s for both runs",
                        pb[mid], pe[mid], pb[last], pe[last], drift * 100.0
                    ),
                ))
            })();
            suite.record(names[3].0, names[3].1, trend);
            let order = (|| -> Outcome {
                let rb = acceptance(base, &held_out)?;
                let rl = acceptance(ls, &held_out)?;
                Ok((
                    rl.acceptance_rate > rb.acceptance_rate,
                    format!(
                        "acceptance at E=4: {:.3} LayerSkip vs {:.3} baseline over {} prompts",
                        rl.acceptance_rate,
                        rb.acceptance_rate,
                        held_out.len()
                    ),
                ))
            })();
            suite.record(names[4].0, names[4].1, order);
        }
        Err(e) => {
            for (id, name) in names {
                suite.record(
                    id,
                    name,
                    Err(layerskip::Error::Config(format!("training failed: {e}"))),
                );
            }
        }
    }

    println!(
        "acceptance suite finished in {:.0}s",
        total.elapsed().as_secs_f64()
    );
    if !suite.failed.is_empty() {
        println!("failed criteria: {:?}", suite.failed);
        std::process::exit(1);
    }
}
