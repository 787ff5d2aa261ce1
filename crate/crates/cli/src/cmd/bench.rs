//! `quire bench`: wall-time and memory estimates for the attention kernels
//! over a strategy x sequence-length grid, with scaling assertions.

use crate::{BenchArgs, BenchStrategyArg, CliError};
use ndarray::Array2;
use quire_core::attention::{full_attention_threads, gathered_attention_threads};
use quire_core::mask::{ContextPlan, MaskStrategy, PlanPair};
use quire_core::spatial::{centers_of, CenterSet};
use quire_core::synth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

const F32_BYTES: u64 = 4;
/// Words per line in the synthetic two-column layout used for spatial cells.
const TWO_COLUMN_LINE: usize = 8;
/// Doubling-pair wall-time ratio bounds asserted at n >= 1024: banded cells
/// must scale sub-quadratically, dense cells super-linearly.
const BANDED_RATIO_MAX: f64 = 3.0;
const DENSE_RATIO_MIN: f64 = 3.0;
const RATIO_FLOOR_N: usize = 1024;

#[derive(Serialize)]
struct BenchReport {
    grid: Vec<Cell>,
    meta: Meta,
}

#[derive(Serialize)]
struct Cell {
    strategy: String,
    n: usize,
    m: usize,
    mean_ms: Option<f64>,
    std_ms: Option<f64>,
    peak_bytes: u64,
    tokens_per_sec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct Meta {
    d_model: usize,
    context: usize,
    reps: usize,
    warmup: usize,
    threads: usize,
    seed: u64,
    scaling_checks: Vec<ScalingCheck>,
}

/// One asserted wall-time ratio between a doubling pair of grid cells.
#[derive(Serialize)]
struct ScalingCheck {
    strategy: String,
    n_small: usize,
    n_large: usize,
    /// "max": ratio must stay below `bound`; "min": above it.
    kind: &'static str,
    bound: f64,
    ratio: f64,
    within: bool,
}

pub fn run(args: &BenchArgs, seed: u64, threads: usize) -> Result<(), CliError> {
    validate(args)?;
    let budget = (args.memory_budget_gib * (1u64 << 30) as f64) as u64;
    let mut grid = Vec::new();
    for (strat_idx, &strategy) in args.strategies.iter().enumerate() {
        for &n in &args.sizes {
            let stream = ((strat_idx as u64) << 40) | n as u64;
            grid.push(cell(
                strategy,
                n,
                args.context,
                args.d_model,
                args.reps,
                seed,
                stream,
                threads,
                budget,
            )?);
        }
    }
    let scaling_checks = scaling_checks(&grid, &args.sizes);
    let failed: Vec<String> = scaling_checks
        .iter()
        .filter(|c| !c.within)
        .map(|c| {
            format!(
                "{} {} -> {}: ratio {:.2} outside {} {:.2}",
                c.strategy, c.n_small, c.n_large, c.ratio, c.kind, c.bound
            )
        })
        .collect();
    let report = BenchReport {
        grid,
        meta: Meta {
            d_model: args.d_model,
            context: args.context,
            reps: args.reps,
            warmup: 1,
            threads,
            seed,
            scaling_checks,
        },
    };
    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::runtime(format!("report serialization: {e}")))?;
    json.push('\n');
    match &args.out {
        Some(path) => {
            std::fs::write(path, json).map_err(|e| {
                CliError::runtime(format!("cannot write {}: {e}", path.display()))
            })?;
            println!("wrote {}", path.display());
        }
        None => print!("{json}"),
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "scaling checks failed: {}",
            failed.join("; ")
        )))
    }
}

fn validate(args: &BenchArgs) -> Result<(), CliError> {
    if args.reps < 3 {
        return Err(CliError::usage("--reps must be at least 3"));
    }
    if args.sizes.is_empty() || args.sizes.contains(&0) {
        return Err(CliError::usage("--sizes needs positive sequence lengths"));
    }
    if args.strategies.is_empty() {
        return Err(CliError::usage("--strategies must not be empty"));
    }
    if args.d_model == 0 || args.context == 0 {
        return Err(CliError::usage("--d-model and --context must be positive"));
    }
    if args.memory_budget_gib <= 0.0 {
        return Err(CliError::usage("--memory-budget-gib must be positive"));
    }
    Ok(())
}

/// Smallest odd window covering the requested context budget.
fn window_for(context: usize) -> usize {
    if context % 2 == 0 {
        context + 1
    } else {
        context
    }
}

fn mask_strategy(strategy: BenchStrategyArg, context: usize, seed: u64) -> Option<MaskStrategy> {
    let window = window_for(context);
    match strategy {
        BenchStrategyArg::Sw => Some(MaskStrategy::SlidingWindow { window }),
        BenchStrategyArg::Swrand => Some(MaskStrategy::SlidingWindowRandom {
            block_size: (context / 2).max(1),
            random_blocks: 1,
            seed,
        }),
        BenchStrategyArg::Distance => Some(MaskStrategy::Distance { context }),
        BenchStrategyArg::Hybrid => Some(MaskStrategy::DistanceSlidingWindow {
            context: window,
            window,
        }),
        BenchStrategyArg::Full => None,
    }
}

/// Upper bound on the cell's working set before any allocation happens,
/// using the analytic row-length cap for each strategy.
fn guard_estimate(strategy: BenchStrategyArg, n: usize, d: usize, context: usize) -> u64 {
    let n64 = n as u64;
    let d64 = d as u64;
    let base = 4 * n64 * d64 * F32_BYTES;
    let window = window_for(context) as u64;
    match strategy {
        BenchStrategyArg::Sw => base + n64 * window * F32_BYTES,
        BenchStrategyArg::Swrand => {
            let block = ((context / 2).max(1)) as u64;
            let m = (block * 4).min(n64);
            base + 2 * n64 * m * d64 * F32_BYTES + n64 * m * F32_BYTES
        }
        BenchStrategyArg::Distance => {
            let m = (context as u64).min(n64);
            base + 2 * n64 * m * d64 * F32_BYTES + n64 * m * F32_BYTES
        }
        BenchStrategyArg::Hybrid => {
            base + n64 * window * d64 * F32_BYTES + n64 * window * F32_BYTES
        }
        BenchStrategyArg::Full => base + n64 * n64 * F32_BYTES + n64 * n64,
    }
}

/// Peak working set of a batched implementation of one gathered cell:
/// inputs and output, a gather buffer per side whose rows are not all
/// contiguous, and the score matrix. The streaming kernel reuses one scratch
/// row per thread so its true footprint is far lower; the batched model
/// makes cells comparable and gives the guard something monotone in n and m.
fn peak_bytes_gathered(n: usize, d: usize, key_plan: &ContextPlan, value_plan: &ContextPlan) -> u64 {
    let n64 = n as u64;
    let d64 = d as u64;
    let mut bytes = 4 * n64 * d64 * F32_BYTES;
    let m_key = key_plan.max_row_len() as u64;
    if !all_rows_contiguous(key_plan) {
        bytes += n64 * m_key * d64 * F32_BYTES;
    }
    if !all_rows_contiguous(value_plan) {
        bytes += n64 * value_plan.max_row_len() as u64 * d64 * F32_BYTES;
    }
    bytes + n64 * m_key * F32_BYTES
}

fn all_rows_contiguous(plan: &ContextPlan) -> bool {
    (0..plan.len()).all(|i| plan.row_is_contiguous(i))
}

/// Box centers for spatial strategies: the two-column synthetic layout when
/// n fills whole lines, a single-column stack otherwise.
fn centers_for(n: usize) -> Result<CenterSet, CliError> {
    let doc = if n % TWO_COLUMN_LINE == 0 {
        synth::two_column_document(n / TWO_COLUMN_LINE, TWO_COLUMN_LINE / 2, 1000, 0)
    } else {
        synth::grid_document(n, 1, 1000, 0)
    }
    .map_err(CliError::from_model)?;
    centers_of(&doc).map_err(CliError::from_spatial)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((n, d), || rng.gen::<f32>() * 2.0 - 1.0)
}

#[allow(clippy::too_many_arguments)]
fn cell(
    strategy: BenchStrategyArg,
    n: usize,
    context: usize,
    d: usize,
    reps: usize,
    seed: u64,
    stream: u64,
    threads: usize,
    budget: u64,
) -> Result<Cell, CliError> {
    let m = match strategy {
        BenchStrategyArg::Full => n,
        _ => context,
    };
    let estimate = guard_estimate(strategy, n, d, context);
    if estimate > budget {
        return Ok(Cell {
            strategy: strategy.to_string(),
            n,
            m,
            mean_ms: None,
            std_ms: None,
            peak_bytes: estimate,
            tokens_per_sec: None,
            error: Some(format!(
                "estimated footprint {estimate} bytes exceeds budget {budget}"
            )),
        });
    }
    let plans = match mask_strategy(strategy, context, seed) {
        Some(ms) => {
            let centers = if ms.needs_centers() {
                Some(centers_for(n)?)
            } else {
                None
            };
            Some(
                ms.build_threads(n, centers.as_ref(), threads)
                    .map_err(CliError::from_mask)?,
            )
        }
        None => None,
    };
    let peak_bytes = match &plans {
        Some(pair) => peak_bytes_gathered(n, d, pair.key(), pair.value()),
        None => estimate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let q = random_matrix(&mut rng, n, d);
    let k = random_matrix(&mut rng, n, d);
    let v = random_matrix(&mut rng, n, d);
    let run_once = |plans: &Option<PlanPair>| -> Result<(), CliError> {
        let out = match plans {
            Some(pair) => {
                gathered_attention_threads(&q, &k, &v, pair.key(), pair.value(), threads)
            }
            None => full_attention_threads(&q, &k, &v, None, threads),
        }
        .map_err(|e| CliError::runtime(format!("{strategy} n={n}: {e}")))?;
        std::hint::black_box(out);
        Ok(())
    };
    run_once(&plans)?;
    let mut times_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run_once(&plans)?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times_ms.iter().sum::<f64>() / reps as f64;
    let var = times_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let tokens_per_sec = if mean > 1e-9 {
        Some(n as f64 / (mean / 1e3))
    } else {
        None
    };
    Ok(Cell {
        strategy: strategy.to_string(),
        n,
        m,
        mean_ms: Some(mean),
        std_ms: Some(var.sqrt()),
        peak_bytes,
        tokens_per_sec,
        error: None,
    })
}

/// Ratio assertions over doubling pairs: the banded window cells must scale
/// sub-quadratically while dense attention grows super-linearly.
fn scaling_checks(grid: &[Cell], sizes: &[usize]) -> Vec<ScalingCheck> {
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut checks = Vec::new();
    for (name, kind, bound) in [
        ("sw", "max", BANDED_RATIO_MAX),
        ("full", "min", DENSE_RATIO_MIN),
    ] {
        for pair in sorted.windows(2) {
            let (small, large) = (pair[0], pair[1]);
            if large != 2 * small || small < RATIO_FLOOR_N {
                continue;
            }
            let mean_of = |n: usize| {
                grid.iter()
                    .find(|c| c.strategy == name && c.n == n)
                    .and_then(|c| c.mean_ms)
            };
            let (Some(t_small), Some(t_large)) = (mean_of(small), mean_of(large)) else {
                continue;
            };
            if t_small <= 0.0 {
                continue;
            }
            let ratio = t_large / t_small;
            let within = match kind {
                "max" => ratio < bound,
                _ => ratio > bound,
            };
            checks.push(ScalingCheck {
                strategy: name.to_owned(),
                n_small: small,
                n_large: large,
                kind,
                bound,
                ratio,
                within,
            });
        }
    }
    checks
}
