//! `quire maskgen` and `quire maskviz`: build context plan files and render
//! them as images.

use crate::{CliError, LayoutArg, MaskgenArgs, StrategyArg};
use quire_core::mask::{plan_to_pgm, ContextPlan, MaskStrategy};
use quire_core::ocr::Document;
use quire_core::spatial::{centers_of, CenterSet};
use quire_core::synth;
use std::fs;
use std::path::{Path, PathBuf};

/// Words per line in the synthetic two-column layout (two 4-word columns).
const TWO_COLUMN_LINE: usize = 8;
/// Vocabulary for synthetic layouts; plans only use geometry, so any size
/// above the synthetic id floor works.
const SYNTH_VOCAB: usize = 1000;

pub fn run(args: &MaskgenArgs, seed: u64, threads: usize) -> Result<(), CliError> {
    let strategy = resolve_strategy(args, seed)?;
    let (n, centers) = resolve_source(args, strategy.needs_centers())?;
    let plans = strategy
        .build_threads(n, centers.as_ref(), threads)
        .map_err(CliError::from_mask)?;
    if plans.is_shared() {
        write_plan(plans.key(), &args.out)?;
    } else {
        let (key_path, value_path) = hybrid_output_paths(&args.out);
        write_plan(plans.key(), &key_path)?;
        write_plan(plans.value(), &value_path)?;
    }
    Ok(())
}

pub fn viz(plan_path: &Path, out: &Path) -> Result<(), CliError> {
    let bytes = fs::read(plan_path)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", plan_path.display())))?;
    let plan = ContextPlan::from_bytes(&bytes).map_err(CliError::from_mask)?;
    let pgm = plan_to_pgm(&plan);
    fs::write(out, pgm)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "wrote {} ({n}x{n}, {dark} dark pixels)",
        out.display(),
        n = plan.len(),
        dark = plan.total_entries()
    );
    Ok(())
}

/// Turns the flag set into a strategy, normalizing even windows down to the
/// next odd size so they can be centered.
fn resolve_strategy(args: &MaskgenArgs, seed: u64) -> Result<MaskStrategy, CliError> {
    let window = || -> Result<usize, CliError> {
        let w = args
            .window
            .ok_or_else(|| CliError::usage("--window is required for this strategy"))?;
        if w == 0 {
            return Err(CliError::usage("--window must be at least 1"));
        }
        Ok(if w % 2 == 0 { w - 1 } else { w })
    };
    let context = |needed: &str| -> Result<usize, CliError> {
        args.context
            .ok_or_else(|| CliError::usage(format!("--context is required for {needed}")))
    };
    match args.strategy {
        StrategyArg::Sw => Ok(MaskStrategy::SlidingWindow { window: window()? }),
        StrategyArg::Swrand => {
            let block_size = args
                .blocks
                .ok_or_else(|| CliError::usage("--blocks is required for swrand"))?;
            let random_blocks = args
                .rand
                .ok_or_else(|| CliError::usage("--rand is required for swrand"))?;
            Ok(MaskStrategy::SlidingWindowRandom {
                block_size,
                random_blocks,
                seed,
            })
        }
        StrategyArg::Distance => Ok(MaskStrategy::Distance {
            context: context("distance")?,
        }),
        StrategyArg::Hybrid => {
            let window = window()?;
            let context = args.context.unwrap_or(window);
            if context != window {
                return Err(CliError::usage(format!(
                    "hybrid pairs each spatial key with one window value, so --context \
                     must equal the odd window size; got {context} and {window}"
                )));
            }
            Ok(MaskStrategy::DistanceSlidingWindow { context, window })
        }
    }
}

/// Resolves the token count and (when needed) box centers, from either an
/// ingested document or a synthetic layout of the requested length.
fn resolve_source(
    args: &MaskgenArgs,
    needs_centers: bool,
) -> Result<(usize, Option<CenterSet>), CliError> {
    match (&args.doc, args.len) {
        (Some(_), Some(_)) => Err(CliError::usage("pass --doc or --len, not both")),
        (None, None) => Err(CliError::usage("pass --doc or --len to size the plan")),
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
            let doc = Document::from_json(&text)
                .map_err(|e| CliError::usage(format!("document {}: {e}", path.display())))?;
            if doc.is_empty() {
                return Err(CliError::usage("document has no tokens"));
            }
            let centers = if needs_centers {
                Some(centers_of(&doc).map_err(CliError::from_spatial)?)
            } else {
                None
            };
            Ok((doc.len(), centers))
        }
        (None, Some(len)) => {
            if len == 0 {
                return Err(CliError::usage("--len must be at least 1"));
            }
            if !needs_centers {
                return Ok((len, None));
            }
            let layout = args.layout.unwrap_or(LayoutArg::TwoColumn);
            let doc = synthetic_document(layout, len)?;
            let centers = centers_of(&doc).map_err(CliError::from_spatial)?;
            Ok((len, Some(centers)))
        }
    }
}

fn synthetic_document(layout: LayoutArg, len: usize) -> Result<Document, CliError> {
    match layout {
        LayoutArg::ReadingOrder => {
            synth::grid_document(len, 1, SYNTH_VOCAB, 0).map_err(CliError::from_model)
        }
        LayoutArg::TwoColumn => {
            if len % TWO_COLUMN_LINE != 0 {
                return Err(CliError::usage(format!(
                    "--len must be a multiple of {TWO_COLUMN_LINE} for the two-column \
                     layout, got {len}"
                )));
            }
            synth::two_column_document(len / TWO_COLUMN_LINE, TWO_COLUMN_LINE / 2, SYNTH_VOCAB, 0)
                .map_err(CliError::from_model)
        }
    }
}

fn write_plan(plan: &ContextPlan, path: &Path) -> Result<(), CliError> {
    let file = fs::File::create(path)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))?;
    plan.write_to(std::io::BufWriter::new(file))
        .map_err(CliError::from_mask)?;
    println!(
        "wrote {} rows={} max_row={} entries={}",
        path.display(),
        plan.len(),
        plan.max_row_len(),
        plan.total_entries()
    );
    Ok(())
}

/// `plan.cpln` with tag `key` becomes `plan.key.cpln`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plan".to_owned());
    let ext = path
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cpln".to_owned());
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

/// Expose the split-path rule so tests and docs agree on the file layout.
pub fn hybrid_output_paths(out: &Path) -> (PathBuf, PathBuf) {
    (sibling(out, "key"), sibling(out, "value"))
}
