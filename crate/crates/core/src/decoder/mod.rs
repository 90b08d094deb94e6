//! Greedy generation: full-depth autoregressive, early exit, and
//! self-speculative decoding that drafts with the first `E` layers and
//! verifies with the remaining `L - E` over one shared cache.

mod bench;

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::KvqCache;
use crate::error::{Error, Result};
use crate::model::{forward_remainder, forward_step, unembed, ModelConfig, ModelParams};
use crate::nn::argmax;
use crate::tokenizer::EOT;

pub use bench::{bench_markdown, kvq_ablation, run_bench, write_bench_csv, BenchRow, KvqAblation};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Autoregressive,
    EarlyExit,
    SelfSpeculative,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [
        DecodeMode::Autoregressive,
        DecodeMode::EarlyExit,
        DecodeMode::SelfSpeculative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Autoregressive => "autoregressive",
            DecodeMode::EarlyExit => "early_exit",
            DecodeMode::SelfSpeculative => "self_speculative",
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecodeMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown decode mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub exit_layer: usize,
    pub num_speculations: usize,
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    /// Verification resumes from the cached exit states. When false, the
    /// draft positions are recomputed through every layer.
    pub reuse_cache: bool,
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode, exit_layer: usize, num_speculations: usize) -> Self {
        DecodeConfig {
            exit_layer,
            num_speculations,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            mode,
            reuse_cache: true,
        }
    }

    pub fn with_max_new_tokens(self, max_new_tokens: usize) -> Self {
        DecodeConfig {
            max_new_tokens,
            ..self
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let l = model.n_layers;
        if self.max_new_tokens < 1 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.num_speculations < 1 {
            return Err(Error::Config("num_speculations must be at least 1".into()));
        }
        match self.mode {
            DecodeMode::Autoregressive => {}
            DecodeMode::EarlyExit if self.exit_layer < 1 || self.exit_layer > l => {
                return Err(Error::Config(format!(
                    "exit layer {} outside 1..={l}",
                    self.exit_layer
                )))
            }
            DecodeMode::EarlyExit => {}
            DecodeMode::SelfSpeculative => {
                if self.exit_layer < 1 || self.exit_layer >= l {
                    return Err(Error::Config(format!(
                        "self-speculative exit layer {} outside 1..{l}",
                        self.exit_layer
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cost of one draft/verify round in layer-token units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundStats {
    pub drafted: usize,
    pub accepted: usize,
    pub emitted: usize,
    /// `drafted · E`.
    pub draft_units: u64,
    /// `drafted · (L − E)` with cache reuse, `drafted · L` without.
    pub verify_units: u64,
    /// `L` when every draft was accepted and the bonus token needed the
    /// last draft run through the full model, else 0.
    pub trailing_units: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub mode: DecodeMode,
    pub exit_layer: usize,
    pub num_speculations: usize,
    pub tokens_emitted: usize,
    pub rounds: usize,
    pub drafts_proposed: usize,
    pub drafts_accepted: usize,
    /// `drafts_accepted / drafts_proposed`; 0 when nothing was drafted.
    pub acceptance_rate: f64,
    /// Blocks applied to single positions after the prompt prefill.
    pub layer_token_units: u64,
    /// Units spent encoding all but the last prompt token.
    pub prefill_units: u64,
    pub draft_units: u64,
    pub verify_units: u64,
    pub trailing_units: u64,
    pub wall_ms: f64,
    pub wall_ms_per_token: f64,
    pub round_stats: Vec<RoundStats>,
}

impl DecodeReport {
    fn new(mode: DecodeMode, exit_layer: usize, num_speculations: usize) -> Self {
        DecodeReport {
            mode,
            exit_layer,
            num_speculations,
            tokens_emitted: 0,
            rounds: 0,
            drafts_proposed: 0,
            drafts_accepted: 0,
            acceptance_rate: 0.0,
            layer_token_units: 0,
            prefill_units: 0,
            draft_units: 0,
            verify_units: 0,
            trailing_units: 0,
            wall_ms: 0.0,
            wall_ms_per_token: 0.0,
            round_stats: Vec::new(),
        }
    }

    fn finish(&mut self, wall_ms: f64) {
        self.acceptance_rate = if self.drafts_proposed == 0 {
            0.0
        } else {
            self.drafts_accepted as f64 / self.drafts_proposed as f64
        };
        self.wall_ms = wall_ms;
        self.wall_ms_per_token = if self.tokens_emitted == 0 {
            0.0
        } else {
            wall_ms / self.tokens_emitted as f64
        };
    }

    /// Sums counts and times over `reports`; rates are recomputed from the
    /// totals. Per-round statistics are concatenated.
    pub fn aggregate(reports: &[DecodeReport]) -> Result<DecodeReport> {
        let first = reports.first().ok_or(Error::Empty("decode reports"))?;
        let mut out = DecodeReport::new(first.mode, first.exit_layer, first.num_speculations);
        let mut wall = 0.0;
        for r in reports {
            out.tokens_emitted += r.tokens_emitted;
            out.rounds += r.rounds;
            out.drafts_proposed += r.drafts_proposed;
            out.drafts_accepted += r.drafts_accepted;
            out.layer_token_units += r.layer_token_units;
            out.prefill_units += r.prefill_units;
            out.draft_units += r.draft_units;
            out.verify_units += r.verify_units;
            out.trailing_units += r.trailing_units;
            out.round_stats.extend_from_slice(&r.round_stats);
            wall += r.wall_ms;
        }
        out.finish(wall);
        Ok(out)
    }
}

fn validate_prompt(params: &ModelParams<f32>, prompt: &[u32], max_new_tokens: usize) -> Result<()> {
    let cfg = params.config;
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: cfg.vocab,
        });
    }
    // every emitted token except the last is fed back as input
    let needed = prompt.len() + max_new_tokens - 1;
    if needed > cfg.max_context {
        return Err(Error::ContextOverflow {
            needed,
            max: cfg.max_context,
        });
    }
    Ok(())
}

/// Fills the cache with all prompt tokens but the last, which becomes the
/// first decode input. Returns the units spent. Positions are committed only
/// when every layer holds them.
fn prefill(
    params: &ModelParams<f32>,
    prompt: &[u32],
    cache: &mut KvqCache<f32>,
    layers: usize,
) -> Result<u64> {
    let head = &prompt[..prompt.len() - 1];
    if !head.is_empty() {
        forward_step(params, head, cache, layers)?;
        if layers == params.config.n_layers {
            cache.commit(head.len())?;
        }
    }
    let units = cache.units();
    cache.reset_units();
    Ok(units)
}

fn greedy(params: &ModelParams<f32>, x: &[f32]) -> u32 {
    argmax(&unembed(params, x)) as u32
}

/// Greedy decoding that exits after `exit_layer` blocks at every step.
fn generate_greedy(
    params: &ModelParams<f32>,
    prompt: &[u32],
    exit_layer: usize,
    max_new_tokens: usize,
    mode: DecodeMode,
) -> Result<(Vec<u32>, DecodeReport)> {
    validate_prompt(params, prompt, max_new_tokens)?;
    let clock = Instant::now();
    let mut report = DecodeReport::new(mode, exit_layer, 0);
    let mut cache = KvqCache::new(&params.config);
    report.prefill_units = prefill(params, prompt, &mut cache, exit_layer)?;
    let mut pending = *prompt.last().expect("validated non-empty");
    let mut out = Vec::new();
    while out.len() < max_new_tokens {
        let x = forward_step(params, &[pending], &mut cache, exit_layer)?;
        pending = greedy(params, x.row(0));
        out.push(pending);
        if pending == EOT {
            break;
        }
    }
    report.tokens_emitted = out.len();
    report.layer_token_units = cache.units();
    report.finish(clock.elapsed().as_secs_f64() * 1e3);
    Ok((out, report))
}

/// Full-depth greedy decoding. Stops after `max_new_tokens` or an
/// end-of-text token, which is included in the output.
pub fn generate_autoregressive(
    params: &ModelParams<f32>,
    prompt: &[u32],
    config: &DecodeConfig,
) -> Result<(Vec<u32>, DecodeReport)> {
    config.validate(&params.config)?;
    let l = params.config.n_layers;
    generate_greedy(
        params,
        prompt,
        l,
        config.max_new_tokens,
        DecodeMode::Autoregressive,
    )
}

/// Greedy decoding from the shared head applied to `x[E]`.
pub fn generate_early_exit(
    params: &ModelParams<f32>,
    prompt: &[u32],
    config: &DecodeConfig,
) -> Result<(Vec<u32>, DecodeReport)> {
    let config = DecodeConfig {
        mode: DecodeMode::EarlyExit,
        ..*config
    };
    config.validate(&params.config)?;
    generate_greedy(
        params,
        prompt,
        config.exit_layer,
        config.max_new_tokens,
        DecodeMode::EarlyExit,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftResult {
    /// First drafted position; equals the committed length before drafting.
    pub start: usize,
    /// Tokens fed as inputs at positions `start..start + tokens.len()`: the
    /// pending token followed by all drafts but the last.
    pub inputs: Vec<u32>,
    /// Drafted tokens `D_0..D_{k-1}`, `k ≤ d`; ends early at end-of-text.
    pub tokens: Vec<u32>,
    pub units: u64,
}

/// Up to `d` greedy early-exit steps starting from `pending`. Appends K/V
/// for layers below `E` and records each fed position's exit state.
/// `perturb(i, token)` may replace draft `i` before it is fed on; the
/// identity gives ordinary drafting.
pub fn draft(
    params: &ModelParams<f32>,
    cache: &mut KvqCache<f32>,
    pending: u32,
    exit_layer: usize,
    d: usize,
    perturb: &mut dyn FnMut(usize, u32) -> u32,
) -> Result<DraftResult> {
    let start = cache.committed_len();
    if let Some(l) = (0..params.config.n_layers).find(|&l| cache.valid_len(l) != start) {
        return Err(Error::Cache(format!(
            "layer {l} holds {} positions before drafting, committed {start}",
            cache.valid_len(l)
        )));
    }
    let units = cache.units();
    let mut inputs = Vec::with_capacity(d);
    let mut tokens = Vec::with_capacity(d);
    let mut next = pending;
    for i in 0..d {
        inputs.push(next);
        let x = forward_step(params, &[next], cache, exit_layer)?;
        next = perturb(i, greedy(params, x.row(0)));
        tokens.push(next);
        if next == EOT {
            break;
        }
    }
    Ok(DraftResult {
        start,
        inputs,
        tokens,
        units: cache.units() - units,
    })
}

/// Longest prefix of `drafts` agreeing with `full`, plus the tokens that
/// prefix yields: the accepted drafts followed by `full` at the first
/// disagreement, or by `full[drafts.len()]` when everything matched and a
/// bonus prediction is available.
pub fn accept_prefix(drafts: &[u32], full: &[u32]) -> (usize, Vec<u32>) {
    let n = drafts.iter().zip(full).take_while(|(a, b)| a == b).count();
    let mut emitted = drafts[..n].to_vec();
    if let Some(&t) = full.get(n) {
        emitted.push(t);
    }
    (n, emitted)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub n_accepted: usize,
    pub emitted: Vec<u32>,
    /// Full-model greedy token after each drafted input position.
    pub full: Vec<u32>,
    pub verify_units: u64,
    pub trailing_units: u64,
}

/// Runs the full model over the drafted positions, accepts the longest
/// agreeing prefix and rolls the cache back so every layer holds exactly
/// the committed positions.
///
/// With `reuse`, layers `E..L` resume from the cached exit states; without
/// it, the drafted positions are recomputed from layer 0. If every draft is
/// accepted and `allow_bonus` holds, the last draft is run through all
/// layers to produce one more token.
pub fn verify(
    params: &ModelParams<f32>,
    cache: &mut KvqCache<f32>,
    exit_layer: usize,
    drafted: &DraftResult,
    reuse: bool,
    allow_bonus: bool,
) -> Result<Verification> {
    let l = params.config.n_layers;
    let k = drafted.tokens.len();
    if k == 0 {
        return Err(Error::Empty("draft"));
    }
    let start = drafted.start;
    let units = cache.units();
    let x = if reuse {
        forward_remainder(params, cache, exit_layer, start..start + k)?
    } else {
        cache.truncate(start);
        forward_step(params, &drafted.inputs, cache, l)?
    };
    let full: Vec<u32> = (0..k).map(|i| greedy(params, x.row(i))).collect();
    let verify_units = cache.units() - units;
    let (n_accepted, mut emitted) = accept_prefix(&drafted.tokens, &full);
    let mut trailing_units = 0;
    if n_accepted < k {
        cache.truncate(start + n_accepted + 1);
    } else {
        cache.commit(start + k)?;
        let last = drafted.tokens[k - 1];
        if allow_bonus && last != EOT {
            let before = cache.units();
            let y = forward_step(params, &[last], cache, l)?;
            emitted.push(greedy(params, y.row(0)));
            cache.commit(start + k + 1)?;
            trailing_units = cache.units() - before;
        }
    }
    cache.clear_exit_states();
    Ok(Verification {
        n_accepted,
        emitted,
        full,
        verify_units,
        trailing_units,
    })
}

/// Self-speculative generation state: one cache, one pending token.
pub struct SelfSpecSession<'a> {
    params: &'a ModelParams<f32>,
    config: DecodeConfig,
    cache: KvqCache<f32>,
    prompt: Vec<u32>,
    emitted: Vec<u32>,
    pending: u32,
    report: DecodeReport,
    clock: Instant,
}

impl<'a> SelfSpecSession<'a> {
    pub fn new(
        params: &'a ModelParams<f32>,
        prompt: &[u32],
        config: &DecodeConfig,
    ) -> Result<Self> {
        let config = DecodeConfig {
            mode: DecodeMode::SelfSpeculative,
            ..*config
        };
        config.validate(&params.config)?;
        validate_prompt(params, prompt, config.max_new_tokens)?;
        let clock = Instant::now();
        let mut cache = KvqCache::new(&params.config);
        let mut report = DecodeReport::new(
            DecodeMode::SelfSpeculative,
            config.exit_layer,
            config.num_speculations,
        );
        report.prefill_units = prefill(params, prompt, &mut cache, params.config.n_layers)?;
        Ok(SelfSpecSession {
            params,
            config,
            cache,
            prompt: prompt.to_vec(),
            emitted: Vec::new(),
            pending: *prompt.last().expect("validated non-empty"),
            report,
            clock,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.emitted.len() >= self.config.max_new_tokens || self.emitted.last() == Some(&EOT)
    }

    pub fn cache(&self) -> &KvqCache<f32> {
        &self.cache
    }

    pub fn emitted(&self) -> &[u32] {
        &self.emitted
    }

    /// Tokens whose K/V every layer holds: the prompt and all emitted tokens
    /// except the pending last one.
    pub fn committed_tokens(&self) -> Vec<u32> {
        let mut all = self.prompt.clone();
        all.extend_from_slice(&self.emitted);
        all.truncate(self.cache.committed_len());
        all
    }

    /// One draft/verify round; `perturb` as in [`draft`].
    pub fn round_with(&mut self, perturb: &mut dyn FnMut(usize, u32) -> u32) -> Result<RoundStats> {
        if self.is_finished() {
            return Err(Error::Config("generation already finished".into()));
        }
        let remaining = self.config.max_new_tokens - self.emitted.len();
        let d = self.config.num_speculations.min(remaining);
        let e = self.config.exit_layer;
        let drafted = draft(self.params, &mut self.cache, self.pending, e, d, perturb)?;
        let k = drafted.tokens.len();
        let v = verify(
            self.params,
            &mut self.cache,
            e,
            &drafted,
            self.config.reuse_cache,
            k < remaining,
        )?;
        self.pending = *v.emitted.last().expect("at least one token per round");
        self.emitted.extend_from_slice(&v.emitted);
        let stats = RoundStats {
            drafted: k,
            accepted: v.n_accepted,
            emitted: v.emitted.len(),
            draft_units: drafted.units,
            verify_units: v.verify_units,
            trailing_units: v.trailing_units,
        };
        let r = &mut self.report;
        r.rounds += 1;
        r.drafts_proposed += k;
        r.drafts_accepted += v.n_accepted;
        r.draft_units += stats.draft_units;
        r.verify_units += stats.verify_units;
        r.trailing_units += stats.trailing_units;
        r.round_stats.push(stats);
        Ok(stats)
    }

    pub fn round(&mut self) -> Result<RoundStats> {
        self.round_with(&mut |_, t| t)
    }

    pub fn finish(mut self) -> (Vec<u32>, DecodeReport) {
        self.report.tokens_emitted = self.emitted.len();
        self.report.layer_token_units = self.cache.units();
        self.report.finish(self.clock.elapsed().as_secs_f64() * 1e3);
        (self.emitted, self.report)
    }
}

/// Draft with the first `E` layers, verify with the rest. Under greedy
/// decoding the output equals [`generate_autoregressive`] token for token.
pub fn generate_self_speculative(
    params: &ModelParams<f32>,
    prompt: &[u32],
    config: &DecodeConfig,
) -> Result<(Vec<u32>, DecodeReport)> {
    let mut session = SelfSpecSession::new(params, prompt, config)?;
    while !session.is_finished() {
        session.round()?;
    }
    Ok(session.finish())
}

/// Dispatches on `config.mode`.
pub fn generate(
    params: &ModelParams<f32>,
    prompt: &[u32],
    config: &DecodeConfig,
) -> Result<(Vec<u32>, DecodeReport)> {
    match config.mode {
        DecodeMode::Autoregressive => generate_autoregressive(params, prompt, config),
        DecodeMode::EarlyExit => generate_early_exit(params, prompt, config),
        DecodeMode::SelfSpeculative => generate_self_speculative(params, prompt, config),
    }
}

/// Per-token-time speedup of `new` over `base`.
pub fn speedup(base: &DecodeReport, new: &DecodeReport) -> Result<f64> {
    crate::metrics::speedup(base.wall_ms_per_token, new.wall_ms_per_token)
}
