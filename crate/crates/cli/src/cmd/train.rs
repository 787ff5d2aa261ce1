//! `quire train` and `quire eval`: run the masked LM on the configured
//! corpus, checkpoint it, and score it.

use crate::config::FileConfig;
use crate::{CliError, EvalArgs, TrainArgs};
use quire_core::model::{evaluate, Trainer};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

fn load_file_config(config: Option<&Path>) -> Result<FileConfig, CliError> {
    let path = config.ok_or_else(|| {
        CliError::usage("this command needs --config with [model], [train], and [corpus] tables")
    })?;
    FileConfig::load(path)
}

pub fn run_train(
    args: &TrainArgs,
    config: Option<&Path>,
    seed: Option<u64>,
    threads: usize,
) -> Result<(), CliError> {
    let file = load_file_config(config)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            if seed.is_some() {
                return Err(CliError::usage(
                    "--seed conflicts with --resume; the checkpoint pins the run seed",
                ));
            }
            Trainer::load(path).map_err(CliError::from_model)?
        }
        None => {
            let mut model = file.model.clone();
            if let Some(s) = seed {
                model.seed = s;
            }
            Trainer::new(model, file.train.clone()).map_err(CliError::from_model)?
        }
    };
    let corpus = Arc::new(file.build_corpus_for(&trainer.model.config, threads)?);
    let remaining = trainer
        .train_config
        .total_steps
        .saturating_sub(trainer.step);
    let steps = args.steps.unwrap_or(remaining);
    let start = Instant::now();
    let losses = trainer
        .run_with(&corpus, steps, |step, loss| {
            println!("step {step} loss {loss:?}");
        })
        .map_err(CliError::from_model)?;
    eprintln!(
        "trained {} steps in {:.2}s ({} / {} total)",
        losses.len(),
        start.elapsed().as_secs_f64(),
        trainer.step,
        trainer.train_config.total_steps
    );
    if let Some(out) = &args.out {
        trainer.save(out).map_err(CliError::from_model)?;
        println!("checkpoint -> {}", out.display());
    }
    Ok(())
}

pub fn run_eval(args: &EvalArgs, config: Option<&Path>, threads: usize) -> Result<(), CliError> {
    let file = load_file_config(config)?;
    let trainer = Trainer::load(&args.checkpoint).map_err(CliError::from_model)?;
    let corpus = file.build_corpus_for(&trainer.model.config, threads)?;
    let report = evaluate(&trainer.model, &corpus, trainer.model.config.seed)
        .map_err(CliError::from_model)?;
    let json = serde_json::to_string(&report)
        .map_err(|e| CliError::runtime(format!("report serialization: {e}")))?;
    println!("{json}");
    Ok(())
}
