//! BERT-style token corruption for masked-language-model training.
//!
//! Each token is independently selected with the configured probability;
//! a selected token is replaced by the mask id 80% of the time, by a
//! uniformly random vocabulary id 10% of the time, and left unchanged the
//! remaining 10%. Labels hold the original ids at selected positions and
//! [`IGNORE_INDEX`] everywhere else. Corruption is a pure function of
//! `(seed, step)`, so any training step can be rebuilt independently.

use super::stream_rng;
use crate::mask::PlanPair;
use crate::ocr::BoundingBox;
use rand::Rng;
use std::sync::Arc;

/// Vocabulary id reserved for padding.
pub const PAD_TOKEN_ID: u32 = 0;

/// Vocabulary id substituted for 80% of the selected tokens.
pub const MASK_TOKEN_ID: u32 = 1;

/// Label value marking positions that carry no training signal.
pub const IGNORE_INDEX: u32 = u32::MAX;

/// One training example: corrupted ids, geometry, context plans, and the
/// recovery targets.
#[derive(Clone)]
pub struct MlmBatch {
    pub step: u64,
    pub token_ids: Vec<u32>,
    pub boxes: Vec<BoundingBox>,
    pub plans: Arc<PlanPair>,
    /// Original ids at masked positions, [`IGNORE_INDEX`] elsewhere.
    pub labels: Vec<u32>,
    /// Ascending positions of the selected tokens.
    pub mask_positions: Vec<u32>,
}

/// Corrupts a token sequence for one training step. The random stream is
/// derived from `(seed, step)`, so identical inputs always produce an
/// identical batch.
pub fn mlm_mask(
    tokens: &[u32],
    boxes: &[BoundingBox],
    plans: &Arc<PlanPair>,
    prob: f64,
    vocab_size: usize,
    seed: u64,
    step: u64,
) -> MlmBatch {
    assert!(prob > 0.0 && prob < 1.0, "mask probability {prob} outside (0, 1)");
    assert_eq!(tokens.len(), boxes.len(), "token/box count mismatch");
    assert_eq!(tokens.len(), plans.key().len(), "token/plan count mismatch");
    let mut rng = stream_rng(seed, step);
    let mut token_ids = tokens.to_vec();
    let mut labels = vec![IGNORE_INDEX; tokens.len()];
    let mut mask_positions = Vec::new();
    for (i, &original) in tokens.iter().enumerate() {
        if rng.gen::<f64>() >= prob {
            continue;
        }
        labels[i] = original;
        mask_positions.push(i as u32);
        let split = rng.gen::<f64>();
        if split < 0.8 {
            token_ids[i] = MASK_TOKEN_ID;
        } else if split < 0.9 {
            token_ids[i] = rng.gen_range(0..vocab_size as u32);
        }
    }
    MlmBatch {
        step,
        token_ids,
        boxes: boxes.to_vec(),
        plans: Arc::clone(plans),
        labels,
        mask_positions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::sliding_window_plan;

    fn fixture(n: usize) -> (Vec<u32>, Vec<BoundingBox>, Arc<PlanPair>) {
        let tokens: Vec<u32> = (0..n as u32).map(|i| 3 + i % 97).collect();
        let boxes: Vec<BoundingBox> = (0..n)
            .map(|i| {
                let x = (i % 1000) as u16;
                BoundingBox::new(x, 0, x + 10, 10).unwrap()
            })
            .collect();
        let plans = Arc::new(PlanPair::shared(sliding_window_plan(n, 3).unwrap()));
        (tokens, boxes, plans)
    }

    #[test]
    fn corruption_is_reproducible_per_seed_and_step() {
        let (tokens, boxes, plans) = fixture(256);
        let a = mlm_mask(&tokens, &boxes, &plans, 0.15, 100, 42, 7);
        let b = mlm_mask(&tokens, &boxes, &plans, 0.15, 100, 42, 7);
        assert_eq!(a.token_ids, b.token_ids);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.mask_positions, b.mask_positions);

        let c = mlm_mask(&tokens, &boxes, &plans, 0.15, 100, 42, 8);
        assert_ne!(a.token_ids, c.token_ids);
        let d = mlm_mask(&tokens, &boxes, &plans, 0.15, 100, 43, 7);
        assert_ne!(a.token_ids, d.token_ids);
    }

    #[test]
    fn labels_mark_exactly_the_selected_positions() {
        let (tokens, boxes, plans) = fixture(512);
        let batch = mlm_mask(&tokens, &boxes, &plans, 0.15, 100, 1, 0);
        assert!(!batch.mask_positions.is_empty());
        assert!(batch.mask_positions.windows(2).all(|w| w[0] < w[1]));
        for (i, &label) in batch.labels.iter().enumerate() {
            let selected = batch.mask_positions.binary_search(&(i as u32)).is_ok();
            if selected {
                assert_eq!(label, tokens[i], "label at {i} must be the original id");
            } else {
                assert_eq!(label, IGNORE_INDEX);
                assert_eq!(batch.token_ids[i], tokens[i], "unselected token changed");
            }
        }
    }

    #[test]
    fn selection_rate_and_corruption_split_match_the_contract() {
        let (tokens, boxes, plans) = fixture(4096);
        let mut selected = 0usize;
        let mut masked = 0usize;
        let mut randomized = 0usize;
        let mut unchanged = 0usize;
        let mut total = 0usize;
        for step in 0..25 {
            let batch = mlm_mask(&tokens, &boxes, &plans, 0.15, 1000, 5, step);
            total += tokens.len();
            selected += batch.mask_positions.len();
            for &pos in &batch.mask_positions {
                let i = pos as usize;
                if batch.token_ids[i] == MASK_TOKEN_ID {
                    masked += 1;
                } else if batch.token_ids[i] == tokens[i] {
                    unchanged += 1;
                } else {
                    randomized += 1;
                }
            }
        }
        assert!(total >= 100_000);
        let rate = selected as f64 / total as f64;
        assert!(
            (rate - 0.15).abs() <= 0.01,
            "selection rate {rate} strays more than 1% from 0.15"
        );
        let mask_frac = masked as f64 / selected as f64;
        let rand_frac = randomized as f64 / selected as f64;
        let keep_frac = unchanged as f64 / selected as f64;
        assert!((mask_frac - 0.8).abs() < 0.03, "mask fraction {mask_frac}");
        // A random draw can reproduce the original id, so the randomized
        // bucket may undercount slightly in favor of unchanged.
        assert!((rand_frac - 0.1).abs() < 0.03, "random fraction {rand_frac}");
        assert!((keep_frac - 0.1).abs() < 0.03, "unchanged fraction {keep_frac}");
    }

    #[test]
    fn tiny_probability_can_select_nothing() {
        let (tokens, boxes, plans) = fixture(8);
        let batch = mlm_mask(&tokens, &boxes, &plans, 1e-9, 100, 0, 0);
        assert!(batch.mask_positions.is_empty());
        assert_eq!(batch.token_ids, tokens);
        assert!(batch.labels.iter().all(|&l| l == IGNORE_INDEX));
    }
}
