//! Post-norm transformer encoder on gathered attention, the MLM model
//! around it, and thin inference-only classification heads.
//!
//! Each layer computes
//! `ln2(h + ffn(h))` with `h = ln1(x + mha(x))`, where the multi-head
//! attention gathers keys and values per the batch's context plans. A
//! dense-attention reference path runs the same weights through the
//! quadratic kernel with the plan rendered as a 0/1 mask, for
//! equivalence checks on full-coverage plans.

use super::layers::{gelu, gelu_grad, Linear};
use super::masking::{MlmBatch, IGNORE_INDEX};
use super::{stream_rng, EmbeddingTable, LayerNorm, ModelConfig, ModelError, ParamView, INIT_STREAM};
use crate::attention::{full_attention, gathered_attention, GatheredAttention};
use crate::mask::{plan_to_dense, PlanPair};
use crate::ocr::BoundingBox;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use std::sync::Arc;

/// Multi-head attention whose per-head score/value gathers follow a
/// [`PlanPair`]. Heads are column slices of the shared projections.
pub struct MultiHeadAttention {
    num_heads: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: Vec<GatheredAttention<f64>>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(rng: &mut R, d_model: usize, num_heads: usize) -> Self {
        MultiHeadAttention {
            num_heads,
            wq: Linear::new(rng, d_model, d_model),
            wk: Linear::new(rng, d_model, d_model),
            wv: Linear::new(rng, d_model, d_model),
            wo: Linear::new(rng, d_model, d_model),
            heads: (0..num_heads).map(|_| GatheredAttention::new()).collect(),
        }
    }

    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        plans: &Arc<PlanPair>,
    ) -> Result<Array2<f64>, ModelError> {
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let (n, d) = q.dim();
        let dk = d / self.num_heads;
        let mut ctx = Array2::zeros((n, d));
        for h in 0..self.num_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let out_h = self.heads[h].forward(
                q.slice(cols).to_owned(),
                k.slice(cols).to_owned(),
                v.slice(cols).to_owned(),
                plans,
            )?;
            ctx.slice_mut(cols).assign(&out_h);
        }
        Ok(self.wo.forward(&ctx))
    }

    pub fn forward_inference(
        &self,
        x: &Array2<f64>,
        plans: &PlanPair,
    ) -> Result<Array2<f64>, ModelError> {
        let q = self.wq.forward_inference(x);
        let k = self.wk.forward_inference(x);
        let v = self.wv.forward_inference(x);
        let (n, d) = q.dim();
        let dk = d / self.num_heads;
        let mut ctx = Array2::zeros((n, d));
        for h in 0..self.num_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let out_h = gathered_attention(
                &q.slice(cols).to_owned(),
                &k.slice(cols).to_owned(),
                &v.slice(cols).to_owned(),
                plans.key(),
                plans.value(),
            )?;
            ctx.slice_mut(cols).assign(&out_h);
        }
        Ok(self.wo.forward_inference(&ctx))
    }

    /// Same weights through the quadratic kernel with a dense 0/1 mask.
    pub fn forward_dense(
        &self,
        x: &Array2<f64>,
        mask: &Array2<u8>,
    ) -> Result<Array2<f64>, ModelError> {
        let q = self.wq.forward_inference(x);
        let k = self.wk.forward_inference(x);
        let v = self.wv.forward_inference(x);
        let (n, d) = q.dim();
        let dk = d / self.num_heads;
        let mut ctx = Array2::zeros((n, d));
        for h in 0..self.num_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let out_h = full_attention(
                &q.slice(cols).to_owned(),
                &k.slice(cols).to_owned(),
                &v.slice(cols).to_owned(),
                Some(mask),
            )?;
            ctx.slice_mut(cols).assign(&out_h);
        }
        Ok(self.wo.forward_inference(&ctx))
    }

    pub fn backward(&mut self, dout: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let dctx = self.wo.backward(dout);
        let (n, d) = dctx.dim();
        let dk = d / self.num_heads;
        let mut dq = Array2::zeros((n, d));
        let mut dkm = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.num_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let (dqh, dkh, dvh) = self.heads[h].backward(&dctx.slice(cols).to_owned())?;
            dq.slice_mut(cols).assign(&dqh);
            dkm.slice_mut(cols).assign(&dkh);
            dv.slice_mut(cols).assign(&dvh);
        }
        let dx = self.wq.backward(&dq) + self.wk.backward(&dkm) + self.wv.backward(&dv);
        Ok(dx)
    }

    pub fn visit<F: FnMut(ParamView)>(&mut self, prefix: &str, f: &mut F) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
}

/// One post-norm encoder layer.
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    ffn_pre: Option<Array2<f64>>,
}

impl EncoderLayer {
    pub fn new<R: Rng>(rng: &mut R, d_model: usize, num_heads: usize, d_ff: usize) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(rng, d_model, num_heads),
            ln1: LayerNorm::new(d_model),
            ff1: Linear::new(rng, d_model, d_ff),
            ff2: Linear::new(rng, d_ff, d_model),
            ln2: LayerNorm::new(d_model),
            ffn_pre: None,
        }
    }

    pub fn forward(
        &mut self,
        x: &Array2<f64>,
        plans: &Arc<PlanPair>,
    ) -> Result<Array2<f64>, ModelError> {
        let a = self.attn.forward(x, plans)?;
        let h = self.ln1.forward(&(x + &a));
        let pre = self.ff1.forward(&h);
        let act = pre.mapv(gelu);
        let ffn = self.ff2.forward(&act);
        let out = self.ln2.forward(&(&h + &ffn));
        self.ffn_pre = Some(pre);
        Ok(out)
    }

    pub fn forward_inference(
        &self,
        x: &Array2<f64>,
        plans: &PlanPair,
    ) -> Result<Array2<f64>, ModelError> {
        let a = self.attn.forward_inference(x, plans)?;
        let h = self.ln1.forward_inference(&(x + &a));
        let act = self.ff1.forward_inference(&h).mapv(gelu);
        let ffn = self.ff2.forward_inference(&act);
        Ok(self.ln2.forward_inference(&(&h + &ffn)))
    }

    pub fn forward_dense(
        &self,
        x: &Array2<f64>,
        mask: &Array2<u8>,
    ) -> Result<Array2<f64>, ModelError> {
        let a = self.attn.forward_dense(x, mask)?;
        let h = self.ln1.forward_inference(&(x + &a));
        let act = self.ff1.forward_inference(&h).mapv(gelu);
        let ffn = self.ff2.forward_inference(&act);
        Ok(self.ln2.forward_inference(&(&h + &ffn)))
    }

    pub fn backward(&mut self, dout: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let pre = self
            .ffn_pre
            .take()
            .expect("backward requires a prior forward");
        let dr2 = self.ln2.backward(dout);
        let dact = self.ff2.backward(&dr2);
        let dpre = &dact * &pre.mapv(gelu_grad);
        let dh = &dr2 + &self.ff1.backward(&dpre);
        let dr1 = self.ln1.backward(&dh);
        let dx = &dr1 + &self.attn.backward(&dr1)?;
        Ok(dx)
    }

    pub fn visit<F: FnMut(ParamView)>(&mut self, prefix: &str, f: &mut F) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
    }
}

/// Cross-entropy over the masked positions only, averaged per masked
/// token; everything else in `labels` is ignored. Returns zero loss for
/// an empty position list.
pub fn masked_cross_entropy(
    logits: &Array2<f64>,
    labels: &[u32],
    positions: &[u32],
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.dim());
    if positions.is_empty() {
        return (0.0, grad);
    }
    let count = positions.len() as f64;
    let vocab = logits.ncols();
    let mut loss = 0.0;
    for &pos in positions {
        let i = pos as usize;
        let label = labels[i];
        assert!(
            label != IGNORE_INDEX && (label as usize) < vocab,
            "masked position {i} carries label {label} outside the vocabulary"
        );
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &l in row.iter() {
            sum += (l - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[label as usize];
        for j in 0..vocab {
            grad[[i, j]] += (row[j] - lse).exp() / count;
        }
        grad[[i, label as usize]] -= 1.0 / count;
    }
    (loss / count, grad)
}

/// The masked-language model: multimodal embeddings, a gathered-attention
/// encoder stack, and a vocabulary projection head.
pub struct MlmModel {
    pub config: ModelConfig,
    pub embeddings: EmbeddingTable,
    pub layers: Vec<EncoderLayer>,
    pub lm_head: Linear,
}

impl MlmModel {
    /// Builds and initializes a model; all weights come from the seed's
    /// dedicated initialization stream.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, INIT_STREAM);
        let embeddings = EmbeddingTable::new(&mut rng, &config);
        let layers = (0..config.num_layers)
            .map(|_| {
                EncoderLayer::new(&mut rng, config.d_model, config.num_heads, config.ffn_width())
            })
            .collect();
        let lm_head = Linear::new(&mut rng, config.d_model, config.vocab_size);
        Ok(MlmModel {
            config,
            embeddings,
            layers,
            lm_head,
        })
    }

    /// Encoder output for a token sequence, inference path (no caches).
    pub fn encode(
        &self,
        ids: &[u32],
        boxes: &[BoundingBox],
        plans: &PlanPair,
    ) -> Result<Array2<f64>, ModelError> {
        let mut h = self.embeddings.forward_inference(ids, boxes)?;
        for layer in &self.layers {
            h = layer.forward_inference(&h, plans)?;
        }
        Ok(h)
    }

    /// Vocabulary logits for a token sequence, inference path.
    pub fn logits(
        &self,
        ids: &[u32],
        boxes: &[BoundingBox],
        plans: &PlanPair,
    ) -> Result<Array2<f64>, ModelError> {
        Ok(self.lm_head.forward_inference(&self.encode(ids, boxes, plans)?))
    }

    /// Logits through the dense-attention reference path. Requires a
    /// shared plan, which renders exactly as a 0/1 mask.
    pub fn dense_reference_logits(
        &self,
        ids: &[u32],
        boxes: &[BoundingBox],
        plans: &PlanPair,
    ) -> Result<Array2<f64>, ModelError> {
        if !plans.is_shared() {
            return Err(ModelError::Config(
                "dense reference requires a shared key/value plan".into(),
            ));
        }
        let mask = plan_to_dense(plans.key());
        let mut h = self.embeddings.forward_inference(ids, boxes)?;
        for layer in &self.layers {
            h = layer.forward_dense(&h, &mask)?;
        }
        Ok(self.lm_head.forward_inference(&h))
    }

    /// Training pass: forward through the caching path, masked
    /// cross-entropy, and a full backward accumulating every gradient.
    /// Returns the loss.
    pub fn train_loss_and_backward(&mut self, batch: &MlmBatch) -> Result<f64, ModelError> {
        let mut h = self.embeddings.forward(&batch.token_ids, &batch.boxes)?;
        for layer in &mut self.layers {
            h = layer.forward(&h, &batch.plans)?;
        }
        let logits = self.lm_head.forward(&h);
        let (loss, dlogits) = masked_cross_entropy(&logits, &batch.labels, &batch.mask_positions);
        let mut dh = self.lm_head.backward(&dlogits);
        for layer in self.layers.iter_mut().rev() {
            dh = layer.backward(&dh)?;
        }
        self.embeddings.backward(&dh);
        Ok(loss)
    }

    /// Evaluation loss over a batch's masked positions, plus their count.
    pub fn eval_loss(&self, batch: &MlmBatch) -> Result<(f64, usize), ModelError> {
        let logits = self.logits(&batch.token_ids, &batch.boxes, &batch.plans)?;
        let (loss, _) = masked_cross_entropy(&logits, &batch.labels, &batch.mask_positions);
        Ok((loss, batch.mask_positions.len()))
    }

    pub fn visit_params<F: FnMut(ParamView)>(&mut self, f: &mut F) {
        self.embeddings.visit("emb", f);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("layer{l}"), f);
        }
        self.lm_head.visit("lm_head", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p: ParamView| p.grad.fill(0.0));
    }

    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |p: ParamView| count += p.value.len());
        count
    }
}

/// Mean-pool sequence classifier: two affine layers around a GELU. The
/// dropout slot between them is inert because these heads only run
/// inference.
pub struct SequenceClassifier {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout_prob: f64,
}

impl SequenceClassifier {
    pub fn new<R: Rng>(
        rng: &mut R,
        d_model: usize,
        hidden: usize,
        num_classes: usize,
        dropout_prob: f64,
    ) -> Self {
        SequenceClassifier {
            fc1: Linear::new(rng, d_model, hidden),
            fc2: Linear::new(rng, hidden, num_classes),
            dropout_prob,
        }
    }

    /// Class logits for one encoded sequence.
    pub fn classify(&self, hidden: &Array2<f64>) -> Vec<f64> {
        let pooled = hidden.mean_axis(Axis(0)).expect("non-empty sequence");
        let pooled = pooled.insert_axis(Axis(0));
        let act = self.fc1.forward_inference(&pooled).mapv(gelu);
        self.fc2.forward_inference(&act).row(0).to_vec()
    }
}

/// Per-token label logits through the same two-layer shape.
pub struct TokenClassifier {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout_prob: f64,
}

impl TokenClassifier {
    pub fn new<R: Rng>(
        rng: &mut R,
        d_model: usize,
        hidden: usize,
        num_labels: usize,
        dropout_prob: f64,
    ) -> Self {
        TokenClassifier {
            fc1: Linear::new(rng, d_model, hidden),
            fc2: Linear::new(rng, hidden, num_labels),
            dropout_prob,
        }
    }

    pub fn label_logits(&self, hidden: &Array2<f64>) -> Array2<f64> {
        let act = self.fc1.forward_inference(hidden).mapv(gelu);
        self.fc2.forward_inference(&act)
    }
}
