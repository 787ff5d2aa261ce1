//! Training loop plumbing: corpus preparation, a parallel batch loader
//! with in-order delivery, the trainer that owns model and optimizer
//! state, checkpoint save/load, and held-out evaluation.
//!
//! Batches are pure functions of `(seed, step)`, so worker count and
//! queue depth never change what the model sees; they only overlap mask
//! building with the optimizer.

use super::masking::{mlm_mask, MlmBatch};
use super::optim::schedule_factor;
use super::{
    load_checkpoint, save_checkpoint, AdamW, Checkpoint, MlmModel, ModelConfig, ModelError,
    ParamView, TrainConfig, EVAL_STREAM,
};
use crate::mask::{MaskError, MaskStrategy, PlanPair};
use crate::ocr::{BoundingBox, Document};
use crate::spatial::centers_of;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

/// One ready-to-train document: ids, normalized geometry, and its
/// prebuilt context plans.
pub struct CorpusDoc {
    pub token_ids: Vec<u32>,
    pub boxes: Vec<BoundingBox>,
    pub plans: Arc<PlanPair>,
}

/// A fixed, fully prepared training set. Steps cycle through documents
/// in order: step `s` trains on document `s % len`.
pub struct Corpus {
    pub docs: Vec<CorpusDoc>,
}

impl Corpus {
    /// Builds plans for every normalized document under one strategy.
    /// Documents are processed in order; plan construction itself may use
    /// worker threads.
    pub fn from_documents(
        documents: &[Document],
        strategy: &MaskStrategy,
        threads: usize,
    ) -> Result<Self, ModelError> {
        let mut docs = Vec::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if doc.is_empty() {
                return Err(ModelError::Config(format!(
                    "corpus document {i} has no tokens"
                )));
            }
            let centers;
            let centers_ref = if strategy.needs_centers() {
                centers = centers_of(doc).map_err(MaskError::from)?;
                Some(&centers)
            } else {
                None
            };
            let plans = strategy.build_threads(doc.len(), centers_ref, threads)?;
            docs.push(CorpusDoc {
                token_ids: doc.tokens.iter().map(|t| t.id).collect(),
                boxes: doc.normalized_boxes.clone(),
                plans: Arc::new(plans),
            });
        }
        Ok(Corpus { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc_for_step(&self, step: u64) -> &CorpusDoc {
        &self.docs[(step % self.docs.len() as u64) as usize]
    }

    /// Largest vocabulary id appearing in any document.
    pub fn max_token_id(&self) -> u32 {
        self.docs
            .iter()
            .flat_map(|d| d.token_ids.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

/// Builds corruption batches on worker threads and hands them out in
/// step order through a bounded queue.
pub struct BatchLoader {
    rx: Option<mpsc::Receiver<(u64, MlmBatch)>>,
    pending: BTreeMap<u64, MlmBatch>,
    next_step: u64,
    end_step: u64,
    workers: Vec<JoinHandle<()>>,
}

impl BatchLoader {
    /// Starts `workers` threads covering steps `start..start + steps`,
    /// worker `w` taking every `workers`-th step. `depth` bounds the
    /// shared queue.
    #[allow(clippy::too_many_arguments)]
    pub fn spawn(
        corpus: Arc<Corpus>,
        mask_prob: f64,
        vocab_size: usize,
        seed: u64,
        start: u64,
        steps: u64,
        workers: usize,
        depth: usize,
    ) -> Self {
        assert!(!corpus.is_empty(), "cannot load from an empty corpus");
        let workers = workers.max(1);
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let end = start + steps;
        let handles = (0..workers as u64)
            .map(|w| {
                let corpus = Arc::clone(&corpus);
                let tx = tx.clone();
                std::thread::spawn(move || {
                    let mut step = start + w;
                    while step < end {
                        let doc = corpus.doc_for_step(step);
                        let batch = mlm_mask(
                            &doc.token_ids,
                            &doc.boxes,
                            &doc.plans,
                            mask_prob,
                            vocab_size,
                            seed,
                            step,
                        );
                        if tx.send((step, batch)).is_err() {
                            return;
                        }
                        step += workers as u64;
                    }
                })
            })
            .collect();
        BatchLoader {
            rx: Some(rx),
            pending: BTreeMap::new(),
            next_step: start,
            end_step: end,
            workers: handles,
        }
    }

    /// The next batch in step order, or `None` once the range is done.
    pub fn next(&mut self) -> Option<MlmBatch> {
        if self.next_step >= self.end_step {
            return None;
        }
        loop {
            if let Some(batch) = self.pending.remove(&self.next_step) {
                self.next_step += 1;
                return Some(batch);
            }
            let rx = self.rx.as_ref()?;
            match rx.recv() {
                Ok((step, batch)) => {
                    self.pending.insert(step, batch);
                }
                Err(_) => return None,
            }
        }
    }
}

impl Drop for BatchLoader {
    fn drop(&mut self) {
        // Closing the receiver unblocks any worker stuck on a full queue.
        self.rx = None;
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
    }
}

/// Config blob stored inside checkpoints.
#[derive(Serialize, Deserialize)]
struct TrainerConfig {
    model: ModelConfig,
    train: TrainConfig,
}

/// Owns the model, optimizer, and step counter through a training run.
pub struct Trainer {
    pub model: MlmModel,
    pub optimizer: AdamW,
    pub train_config: TrainConfig,
    /// Completed optimization steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, train_config: TrainConfig) -> Result<Self, ModelError> {
        model_config.validate()?;
        train_config.validate()?;
        let optimizer = AdamW::new(train_config.learning_rate, train_config.weight_decay);
        Ok(Trainer {
            model: MlmModel::new(model_config)?,
            optimizer,
            train_config,
            step: 0,
        })
    }

    /// Runs up to `steps` optimization steps (clipped to the configured
    /// total), invoking `on_step` with each 0-based step index and its
    /// loss. Returns the losses in order.
    pub fn run_with<F: FnMut(u64, f64)>(
        &mut self,
        corpus: &Arc<Corpus>,
        steps: u64,
        mut on_step: F,
    ) -> Result<Vec<f64>, ModelError> {
        if corpus.is_empty() {
            return Err(ModelError::Config("corpus is empty".into()));
        }
        let max_id = corpus.max_token_id() as usize;
        if max_id >= self.model.config.vocab_size {
            return Err(ModelError::Config(format!(
                "corpus uses token id {max_id}, vocab_size is {}",
                self.model.config.vocab_size
            )));
        }
        let total = self.train_config.total_steps;
        let end = total.min(self.step + steps);
        if end <= self.step {
            return Ok(Vec::new());
        }
        let mut loader = BatchLoader::spawn(
            Arc::clone(corpus),
            self.model.config.mlm_mask_prob,
            self.model.config.vocab_size,
            self.model.config.seed,
            self.step,
            end - self.step,
            self.train_config.loader_workers,
            self.train_config.queue_depth,
        );
        let mut losses = Vec::with_capacity((end - self.step) as usize);
        while self.step < end {
            let batch = loader
                .next()
                .ok_or(ModelError::LoaderStopped { step: self.step })?;
            debug_assert_eq!(batch.step, self.step);
            self.model.zero_grads();
            let loss = self.model.train_loss_and_backward(&batch)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    step: self.step,
                    loss,
                });
            }
            let factor = schedule_factor(self.step, total, self.train_config.warmup_ratio);
            let model = &mut self.model;
            self.optimizer
                .step(factor, |f| model.visit_params(&mut |p| f(p)))?;
            on_step(self.step, loss);
            losses.push(loss);
            self.step += 1;
        }
        Ok(losses)
    }

    pub fn run(&mut self, corpus: &Arc<Corpus>, steps: u64) -> Result<Vec<f64>, ModelError> {
        self.run_with(corpus, steps, |_, _| {})
    }

    /// Serializes model parameters, optimizer moments, and the step
    /// counter. Identical state writes identical bytes.
    pub fn checkpoint(&mut self) -> Result<Checkpoint, ModelError> {
        let config_json = serde_json::to_string(&TrainerConfig {
            model: self.model.config.clone(),
            train: self.train_config.clone(),
        })?;
        let mut tensors = BTreeMap::new();
        self.model.visit_params(&mut |p: ParamView| {
            tensors.insert(p.name.clone(), (p.shape.clone(), p.value.to_vec()));
        });
        for (name, data) in self.optimizer.export_state() {
            let len = data.len();
            tensors.insert(name, (vec![len], data));
        }
        Ok(Checkpoint {
            step: self.step,
            config_json,
            tensors,
        })
    }

    pub fn save(&mut self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(path, &self.checkpoint()?)
    }

    /// Restores a trainer from a checkpoint file; training resumes at the
    /// stored step with bit-identical results.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let checkpoint = load_checkpoint(path)?;
        Self::from_checkpoint(&checkpoint)
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self, ModelError> {
        let config: TrainerConfig = serde_json::from_str(&checkpoint.config_json)?;
        let mut trainer = Trainer::new(config.model, config.train)?;
        let mut fault: Option<ModelError> = None;
        let mut restored = 0usize;
        trainer.model.visit_params(&mut |p: ParamView| {
            if fault.is_some() {
                return;
            }
            match checkpoint.tensors.get(&p.name) {
                Some((shape, data)) if *shape == p.shape && data.len() == p.value.len() => {
                    p.value.copy_from_slice(data);
                    restored += 1;
                }
                Some((shape, _)) => {
                    fault = Some(ModelError::Checkpoint(format!(
                        "tensor {} has shape {shape:?}, model expects {:?}",
                        p.name, p.shape
                    )));
                }
                None => {
                    fault = Some(ModelError::Checkpoint(format!(
                        "checkpoint is missing tensor {}",
                        p.name
                    )));
                }
            }
        });
        if let Some(err) = fault {
            return Err(err);
        }
        let param_tensors = checkpoint
            .tensors
            .keys()
            .filter(|name| !name.starts_with("adam."))
            .count();
        if param_tensors != restored {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint carries {param_tensors} parameter tensors, model has {restored}"
            )));
        }
        let flat: BTreeMap<String, Vec<f64>> = checkpoint
            .tensors
            .iter()
            .map(|(name, (_, data))| (name.clone(), data.clone()))
            .collect();
        trainer.optimizer.import_state(checkpoint.step, &flat)?;
        trainer.step = checkpoint.step;
        Ok(trainer)
    }
}

/// Aggregate masked-token metrics over a corpus.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub masked_tokens: usize,
    pub documents: usize,
}

/// Evaluates masked-token recovery over every document, using a
/// corruption stream disjoint from all training steps.
pub fn evaluate(model: &MlmModel, corpus: &Corpus, seed: u64) -> Result<EvalReport, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Config("corpus is empty".into()));
    }
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut masked = 0usize;
    for (d, doc) in corpus.docs.iter().enumerate() {
        let batch = mlm_mask(
            &doc.token_ids,
            &doc.boxes,
            &doc.plans,
            model.config.mlm_mask_prob,
            model.config.vocab_size,
            seed,
            EVAL_STREAM + d as u64,
        );
        let logits = model.logits(&batch.token_ids, &batch.boxes, &batch.plans)?;
        let (loss, _) =
            super::encoder::masked_cross_entropy(&logits, &batch.labels, &batch.mask_positions);
        total_loss += loss * batch.mask_positions.len() as f64;
        masked += batch.mask_positions.len();
        for &pos in &batch.mask_positions {
            let row = logits.row(pos as usize);
            let mut best = 0usize;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best as u32 == batch.labels[pos as usize] {
                correct += 1;
            }
        }
    }
    let (loss, accuracy) = if masked == 0 {
        (0.0, 0.0)
    } else {
        (total_loss / masked as f64, correct as f64 / masked as f64)
    };
    Ok(EvalReport {
        loss,
        accuracy,
        masked_tokens: masked,
        documents: corpus.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::sliding_window_plan;
    use crate::model::masking::IGNORE_INDEX;
    use crate::model::MASK_TOKEN_ID;
    use crate::ocr::ingest;
    use std::io::BufReader;

    fn toy_doc(n: usize, phase: u32, vocab: u32) -> CorpusDoc {
        let token_ids: Vec<u32> = (0..n as u32).map(|i| 3 + (i + phase) % (vocab - 3)).collect();
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|i| {
                let x = ((i * 37) % 1000) as u16;
                BoundingBox::new(x, ((i * 11) % 1000) as u16, x + 12, ((i * 11) % 1000) as u16 + 8)
                    .unwrap()
            })
            .collect();
        let plans = Arc::new(PlanPair::shared(sliding_window_plan(n, 5).unwrap()));
        CorpusDoc {
            token_ids,
            boxes,
            plans,
        }
    }

    fn toy_corpus(docs: usize, n: usize, vocab: u32) -> Arc<Corpus> {
        Arc::new(Corpus {
            docs: (0..docs).map(|d| toy_doc(n, d as u32 * 7, vocab)).collect(),
        })
    }

    fn toy_model_config(n: usize, vocab: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            num_heads: 2,
            num_layers: 2,
            d_ff: Some(32),
            max_seq_len: n,
            max_2d_positions: 1024,
            strategy: MaskStrategy::SlidingWindow { window: 5 },
            mlm_mask_prob: 0.15,
            seed,
        }
    }

    fn toy_train_config(total: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            total_steps: total,
            whole_word_masking: false,
            loader_workers: 2,
            queue_depth: 4,
        }
    }

    #[test]
    fn loader_delivers_every_step_in_order_regardless_of_workers() {
        let corpus = toy_corpus(5, 32, 40);
        for workers in [1usize, 3] {
            let mut loader =
                BatchLoader::spawn(Arc::clone(&corpus), 0.15, 40, 9, 4, 17, workers, 2);
            let mut steps = Vec::new();
            while let Some(batch) = loader.next() {
                // Each delivered batch matches a directly built one.
                let doc = corpus.doc_for_step(batch.step);
                let direct =
                    mlm_mask(&doc.token_ids, &doc.boxes, &doc.plans, 0.15, 40, 9, batch.step);
                assert_eq!(batch.token_ids, direct.token_ids);
                assert_eq!(batch.labels, direct.labels);
                steps.push(batch.step);
            }
            assert_eq!(steps, (4..21).collect::<Vec<u64>>());
        }
    }

    #[test]
    fn dropping_a_loader_mid_stream_does_not_hang() {
        let corpus = toy_corpus(3, 16, 40);
        let mut loader = BatchLoader::spawn(corpus, 0.15, 40, 0, 0, 1000, 2, 1);
        let first = loader.next().unwrap();
        assert_eq!(first.step, 0);
        drop(loader);
    }

    #[test]
    fn training_reduces_loss_on_a_learnable_corpus() {
        let corpus = toy_corpus(8, 32, 40);
        let mut trainer =
            Trainer::new(toy_model_config(32, 40, 3), toy_train_config(120)).unwrap();
        let losses = trainer.run(&corpus, 120).unwrap();
        assert_eq!(losses.len(), 120);
        // Single-step losses are noisy (each step masks a different
        // handful of positions), so compare windowed means.
        let early: f64 = losses[..16].iter().sum::<f64>() / 16.0;
        let late: f64 = losses[losses.len() - 16..].iter().sum::<f64>() / 16.0;
        assert!(
            late < early,
            "loss did not improve: early mean {early}, late mean {late}"
        );
        assert_eq!(trainer.step, 120);
        // The run is clipped at total_steps.
        assert!(trainer.run(&corpus, 10).unwrap().is_empty());
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let corpus = toy_corpus(4, 24, 40);
        let mut a = Trainer::new(toy_model_config(24, 40, 5), toy_train_config(30)).unwrap();
        let mut b = Trainer::new(toy_model_config(24, 40, 5), toy_train_config(30)).unwrap();
        let la = a.run(&corpus, 12).unwrap();
        let lb = b.run(&corpus, 12).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn resume_from_checkpoint_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.sdat");
        let corpus = toy_corpus(6, 24, 40);

        let mut full = Trainer::new(toy_model_config(24, 40, 8), toy_train_config(24)).unwrap();
        full.run(&corpus, 10).unwrap();
        full.save(&path).unwrap();
        let tail_direct = full.run(&corpus, 14).unwrap();

        let mut resumed = Trainer::load(&path).unwrap();
        assert_eq!(resumed.step, 10);
        let tail_resumed = resumed.run(&corpus, 14).unwrap();
        assert_eq!(tail_direct, tail_resumed);

        // Final parameters agree bit for bit.
        let mut left = BTreeMap::new();
        full.model.visit_params(&mut |p: ParamView| {
            left.insert(p.name.clone(), p.value.to_vec());
        });
        let mut identical = true;
        resumed.model.visit_params(&mut |p: ParamView| {
            identical &= left.get(&p.name).map(|v| v == p.value).unwrap_or(false);
        });
        assert!(identical);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward_outputs_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fwd.sdat");
        let corpus = toy_corpus(2, 16, 40);
        let mut trainer = Trainer::new(toy_model_config(16, 40, 2), toy_train_config(20)).unwrap();
        trainer.run(&corpus, 5).unwrap();
        trainer.save(&path).unwrap();
        let restored = Trainer::load(&path).unwrap();
        let doc = &corpus.docs[0];
        let a = trainer
            .model
            .logits(&doc.token_ids, &doc.boxes, &doc.plans)
            .unwrap();
        let b = restored
            .model
            .logits(&doc.token_ids, &doc.boxes, &doc.plans)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let n = 8;
        let vocab = 30;
        let mut model = MlmModel::new(toy_model_config(n, vocab, 4)).unwrap();
        let doc = toy_doc(n, 0, vocab as u32);

        // Hand-built batch: three masked positions, one of each corruption
        // flavor, everything else ignored.
        let mut token_ids = doc.token_ids.clone();
        let mut labels = vec![IGNORE_INDEX; n];
        labels[1] = doc.token_ids[1];
        token_ids[1] = MASK_TOKEN_ID;
        labels[4] = doc.token_ids[4];
        token_ids[4] = 17;
        labels[6] = doc.token_ids[6];
        let batch = MlmBatch {
            step: 0,
            token_ids,
            boxes: doc.boxes.clone(),
            plans: Arc::clone(&doc.plans),
            labels,
            mask_positions: vec![1, 4, 6],
        };

        model.zero_grads();
        let base_loss = model.train_loss_and_backward(&batch).unwrap();
        assert!(base_loss.is_finite());
        let mut grads = BTreeMap::new();
        let mut lens = Vec::new();
        model.visit_params(&mut |p: ParamView| {
            grads.insert(p.name.clone(), p.grad.to_vec());
            lens.push((p.name.clone(), p.value.len()));
        });

        let h = 1e-4;
        let mut checked = 0;
        for (name, len) in &lens {
            for idx in [0usize, len / 2, len - 1] {
                let analytic = grads[name][idx];
                let mut probe = |delta: f64| -> f64 {
                    model.visit_params(&mut |p: ParamView| {
                        if &p.name == name {
                            p.value[idx] += delta;
                        }
                    });
                    let (loss, _) = model.eval_loss(&batch).unwrap();
                    model.visit_params(&mut |p: ParamView| {
                        if &p.name == name {
                            p.value[idx] -= delta;
                        }
                    });
                    loss
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let rel =
                    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-3,
                    "{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} entries were checked");
    }

    #[test]
    fn evaluation_reports_sane_ranges_and_improves_with_training() {
        let corpus = toy_corpus(6, 32, 40);
        let mut trainer =
            Trainer::new(toy_model_config(32, 40, 6), toy_train_config(120)).unwrap();
        let before = evaluate(&trainer.model, &corpus, 77).unwrap();
        assert!(before.masked_tokens > 0);
        assert!((0.0..=1.0).contains(&before.accuracy));
        trainer.run(&corpus, 120).unwrap();
        let after = evaluate(&trainer.model, &corpus, 77).unwrap();
        assert!(
            after.loss < before.loss,
            "eval loss did not improve: {} -> {}",
            before.loss,
            after.loss
        );
    }

    #[test]
    fn corpus_rejects_token_ids_beyond_the_vocabulary() {
        let corpus = Arc::new(Corpus {
            docs: vec![toy_doc(16, 100, 200)],
        });
        let mut trainer = Trainer::new(toy_model_config(16, 40, 0), toy_train_config(5)).unwrap();
        let err = trainer.run(&corpus, 1).unwrap_err();
        assert!(err.to_string().contains("vocab_size"));
    }

    #[test]
    fn corpus_builds_from_ingested_documents() {
        let text = r#"{"page":{"width":200,"height":100},"words":[{"text_id":3,"box":[0,0,20,10]},{"text_id":4,"box":[30,0,50,10]},{"text_id":5,"box":[0,20,20,30]},{"text_id":6,"box":[30,20,50,30]}]}"#;
        let doc = ingest(BufReader::new(text.as_bytes())).unwrap();
        let strategy = MaskStrategy::Distance { context: 3 };
        let corpus = Corpus::from_documents(&[doc], &strategy, 1).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.docs[0].token_ids, vec![3, 4, 5, 6]);
        assert_eq!(corpus.docs[0].plans.key().len(), 4);
        assert_eq!(corpus.max_token_id(), 6);
    }
}
