//! End-to-end integration: OCR page lines through ingestion, plan building,
//! the gathered kernel, plan files, and a short training run, checking that
//! every module hands the next one exactly what it expects.

use ndarray::Array2;
use quire_core::attention::{full_attention, gathered_attention};
use quire_core::mask::{plan_to_dense, plan_to_pgm, ContextPlan, MaskStrategy};
use quire_core::model::{evaluate, Corpus, ModelConfig, TrainConfig, Trainer};
use quire_core::ocr::{ingest, Document, Stage, NORM_MAX};
use quire_core::spatial::centers_of;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::BufReader;
use std::sync::Arc;

/// Three pages of mixed widths: 4 lines x 3 words, 3 x 2, and 2 x 4.
fn three_page_input() -> String {
    let shapes: [(usize, usize, i64, i64); 3] = [
        (4, 3, 900, 400),
        (3, 2, 600, 300),
        (2, 4, 1200, 250),
    ];
    let mut out = String::new();
    let mut id = 3u32;
    for (lines, words, width, height) in shapes {
        let mut entries = Vec::new();
        for line in 0..lines {
            for word in 0..words {
                let x0 = 20 + word as i64 * 150;
                let y0 = 30 + line as i64 * 60;
                entries.push(format!(
                    r#"{{"text_id":{id},"box":[{x0},{y0},{x1},{y1}]}}"#,
                    x1 = x0 + 100,
                    y1 = y0 + 40,
                ));
                id += 1;
            }
        }
        out.push_str(&format!(
            r#"{{"page":{{"width":{width},"height":{height}}},"words":[{}]}}"#,
            entries.join(",")
        ));
        out.push('\n');
    }
    out
}

fn ingest_str(text: &str) -> Document {
    ingest(BufReader::new(text.as_bytes())).expect("pipeline accepts the fixture")
}

#[test]
fn multi_page_input_flows_to_normalized_boxes() {
    let doc = ingest_str(&three_page_input());
    assert_eq!(doc.stage, Stage::Normalized);
    assert_eq!(doc.len(), 4 * 3 + 3 * 2 + 2 * 4);
    assert_eq!(doc.pages.len(), 3);

    let offsets = doc.page_offsets();
    assert_eq!(offsets, vec![0, 400, 700]);
    assert!(offsets.windows(2).all(|w| w[0] < w[1]));

    for (token, nbox) in doc.tokens.iter().zip(&doc.normalized_boxes) {
        assert!(token.bbox.y0 >= offsets[token.page]);
        assert!(nbox.x1 <= NORM_MAX && nbox.y1 <= NORM_MAX);
        assert!(nbox.x0 <= nbox.x1 && nbox.y0 <= nbox.y1);
    }
    let last = doc.tokens.last().unwrap();
    assert_eq!(last.page, 2);
    assert!(last.bbox.y0 >= 700, "page 2 tokens sit below pages 0 and 1");
}

#[test]
fn serialized_documents_round_trip_exactly() {
    let doc = ingest_str(&three_page_input());
    let restored = Document::from_json(&doc.to_json()).unwrap();
    assert_eq!(doc, restored);

    let empty = ingest_str("");
    assert!(empty.is_empty());
    assert_eq!(Document::from_json(&empty.to_json()).unwrap(), empty);
}

#[test]
fn every_strategy_plans_the_ingested_document_and_matches_dense_attention() {
    let doc = ingest_str(&three_page_input());
    let n = doc.len();
    let centers = centers_of(&doc).unwrap();
    let strategies = [
        MaskStrategy::SlidingWindow { window: 7 },
        MaskStrategy::SlidingWindowRandom {
            block_size: 4,
            random_blocks: 1,
            seed: 5,
        },
        MaskStrategy::Distance { context: 5 },
        MaskStrategy::DistanceSlidingWindow {
            context: 5,
            window: 5,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut matrix = |d: usize| -> Array2<f32> {
        Array2::from_shape_simple_fn((n, d), || rng.gen::<f32>() - 0.5)
    };
    let q = matrix(16);
    let k = matrix(16);
    let v = matrix(8);

    for strategy in &strategies {
        let pair = strategy.build_threads(n, Some(&centers), 2).unwrap();
        for plan in [pair.key(), pair.value()] {
            assert_eq!(plan.len(), n);
            for i in 0..n {
                let row = plan.row(i);
                assert!(row.windows(2).all(|w| w[0] < w[1]), "row {i} sorted unique");
                assert!(row.iter().all(|&j| (j as usize) < n));
            }
        }
        for i in 0..n {
            assert!(
                pair.key().row(i).contains(&(i as u32)),
                "{strategy:?}: token {i} lost itself"
            );
        }

        let gathered = gathered_attention(&q, &k, &v, pair.key(), pair.value()).unwrap();
        if pair.is_shared() {
            let mask = plan_to_dense(pair.key());
            let dense = full_attention(&q, &k, &v, Some(&mask)).unwrap();
            let worst = gathered
                .iter()
                .zip(dense.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 1e-6, "{strategy:?}: max deviation {worst}");
        }
    }
}

#[test]
fn plan_files_and_images_survive_the_disk() {
    let doc = ingest_str(&three_page_input());
    let centers = centers_of(&doc).unwrap();
    let pair = MaskStrategy::Distance { context: 4 }
        .build(doc.len(), Some(&centers))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("doc.cpln");
    let file = std::fs::File::create(&path).unwrap();
    pair.key().write_to(std::io::BufWriter::new(file)).unwrap();
    let restored = ContextPlan::read_from(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(restored.len(), pair.key().len());
    for i in 0..restored.len() {
        assert_eq!(restored.row(i), pair.key().row(i));
    }

    let pgm = plan_to_pgm(&restored);
    let mut lines = pgm.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(
        lines.next(),
        Some(format!("{n} {n}", n = doc.len()).as_str())
    );
}

#[test]
fn ingested_documents_train_and_evaluate() {
    let text = three_page_input();
    let docs: Vec<Document> = (0..2).map(|_| ingest_str(&text)).collect();
    let strategy = MaskStrategy::DistanceSlidingWindow {
        context: 5,
        window: 5,
    };
    let corpus = Arc::new(Corpus::from_documents(&docs, &strategy, 2).unwrap());

    let model = ModelConfig {
        vocab_size: 64,
        d_model: 16,
        num_heads: 2,
        num_layers: 1,
        d_ff: None,
        max_seq_len: 32,
        max_2d_positions: 1024,
        strategy,
        mlm_mask_prob: 0.15,
        seed: 3,
    };
    let train = TrainConfig {
        learning_rate: 1e-3,
        weight_decay: 0.01,
        warmup_ratio: 0.1,
        total_steps: 6,
        whole_word_masking: false,
        loader_workers: 2,
        queue_depth: 2,
    };
    let mut trainer = Trainer::new(model, train).unwrap();
    let losses = trainer.run(&corpus, 6).unwrap();
    assert_eq!(losses.len(), 6);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));

    let report = evaluate(&trainer.model, &corpus, 3).unwrap();
    assert!(report.loss.is_finite());
    assert!((0.0..=1.0).contains(&report.accuracy));
    assert_eq!(report.documents, 2);
}
