use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::{generate, generate_self_speculative, DecodeConfig, DecodeMode, DecodeReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: DecodeMode,
    pub exit_layer: usize,
    pub num_speculations: usize,
    pub prompt_id: usize,
    pub tokens: usize,
    pub acceptance_rate: f64,
    pub ms_per_token: f64,
    pub layer_token_units: u64,
    pub wall_ms: f64,
    pub drafts_proposed: usize,
    pub drafts_accepted: usize,
}

impl BenchRow {
    fn from_report(prompt_id: usize, r: &DecodeReport) -> Self {
        BenchRow {
            mode: r.mode,
            exit_layer: r.exit_layer,
            num_speculations: r.num_speculations,
            prompt_id,
            tokens: r.tokens_emitted,
            acceptance_rate: r.acceptance_rate,
            ms_per_token: r.wall_ms_per_token,
            layer_token_units: r.layer_token_units,
            wall_ms: r.wall_ms,
            drafts_proposed: r.drafts_proposed,
            drafts_accepted: r.drafts_accepted,
        }
    }
}

/// Runs every prompt through autoregressive, early-exit and
/// self-speculative decoding with the exit layer and speculation count of
/// `config`. Rows are grouped by mode, then prompt.
pub fn run_bench(
    params: &ModelParams<f32>,
    prompts: &[Vec<u32>],
    config: &DecodeConfig,
) -> Result<Vec<BenchRow>> {
    if prompts.is_empty() {
        return Err(Error::Empty("bench prompts"));
    }
    let l = params.config.n_layers;
    let mut rows = Vec::with_capacity(3 * prompts.len());
    for mode in DecodeMode::ALL {
        let cfg = match mode {
            DecodeMode::Autoregressive => DecodeConfig {
                mode,
                exit_layer: l,
                ..*config
            },
            DecodeMode::EarlyExit => DecodeConfig { mode, ..*config },
            DecodeMode::SelfSpeculative => DecodeConfig { mode, ..*config },
        };
        for (id, prompt) in prompts.iter().enumerate() {
            let (_, report) = generate(params, prompt, &cfg)?;
            rows.push(BenchRow::from_report(id, &report));
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "mode,E,d,prompt_id,tokens,acceptance_rate,ms_per_token,layer_token_units"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.6},{:.6},{}",
            r.mode,
            r.exit_layer,
            r.num_speculations,
            r.prompt_id,
            r.tokens,
            r.acceptance_rate,
            r.ms_per_token,
            r.layer_token_units
        )?;
    }
    f.flush()?;
    Ok(())
}

struct ModeTotals {
    tokens: usize,
    wall_ms: f64,
    units: u64,
    proposed: usize,
    accepted: usize,
}

fn totals(rows: &[BenchRow], mode: DecodeMode) -> Option<(usize, usize, ModeTotals)> {
    let mut it = rows.iter().filter(|r| r.mode == mode).peekable();
    let first = it.peek()?;
    let (e, d) = (first.exit_layer, first.num_speculations);
    let mut t = ModeTotals {
        tokens: 0,
        wall_ms: 0.0,
        units: 0,
        proposed: 0,
        accepted: 0,
    };
    for r in it {
        t.tokens += r.tokens;
        t.wall_ms += r.wall_ms;
        t.units += r.layer_token_units;
        t.proposed += r.drafts_proposed;
        t.accepted += r.drafts_accepted;
    }
    Some((e, d, t))
}

/// Markdown table with one line per mode. Speedup is autoregressive
/// milliseconds per token over the mode's.
pub fn bench_markdown(rows: &[BenchRow]) -> String {
    let base = totals(rows, DecodeMode::Autoregressive)
        .filter(|(_, _, t)| t.tokens > 0)
        .map(|(_, _, t)| t.wall_ms / t.tokens as f64);
    let mut out = String::from(
        "| mode | E | d | tokens | acceptance | ms/token | units/token | speedup |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for mode in DecodeMode::ALL {
        let Some((e, d, t)) = totals(rows, mode) else {
            continue;
        };
        let per = |x: f64| {
            if t.tokens == 0 {
                0.0
            } else {
                x / t.tokens as f64
            }
        };
        let ms = per(t.wall_ms);
        let acc = if t.proposed == 0 {
            "-".to_string()
        } else {
            format!("{:.3}", t.accepted as f64 / t.proposed as f64)
        };
        let speed = match base {
            Some(b) if ms > 0.0 => format!("{:.2}x", b / ms),
            _ => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "| {mode} | {e} | {d} | {} | {acc} | {ms:.3} | {:.2} | {speed} |",
            t.tokens,
            per(t.units as f64),
        );
    }
    out
}

/// Self-speculative decoding with and without exit-state reuse over the
/// same prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvqAblation {
    pub with_reuse: DecodeReport,
    pub without_reuse: DecodeReport,
    /// Both variants produced the same tokens for every prompt.
    pub identical_outputs: bool,
}

impl KvqAblation {
    /// Verification units saved by reuse, as a fraction of the
    /// no-reuse verification cost.
    pub fn verify_savings(&self) -> f64 {
        if self.without_reuse.verify_units == 0 {
            return 0.0;
        }
        1.0 - self.with_reuse.verify_units as f64 / self.without_reuse.verify_units as f64
    }
}

pub fn kvq_ablation(
    params: &ModelParams<f32>,
    prompts: &[Vec<u32>],
    config: &DecodeConfig,
) -> Result<KvqAblation> {
    if prompts.is_empty() {
        return Err(Error::Empty("ablation prompts"));
    }
    let mut with = Vec::with_capacity(prompts.len());
    let mut without = Vec::with_capacity(prompts.len());
    let mut identical = true;
    for prompt in prompts {
        let (a, ra) = generate_self_speculative(
            params,
            prompt,
            &DecodeConfig {
                reuse_cache: true,
                ..*config
            },
        )?;
        let (b, rb) = generate_self_speculative(
            params,
            prompt,
            &DecodeConfig {
                reuse_cache: false,
                ..*config
            },
        )?;
        identical &= a == b;
        with.push(ra);
        without.push(rb);
    }
    Ok(KvqAblation {
        with_reuse: DecodeReport::aggregate(&with)?,
        without_reuse: DecodeReport::aggregate(&without)?,
        identical_outputs: identical,
    })
}
