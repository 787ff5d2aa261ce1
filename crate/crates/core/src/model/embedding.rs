//! Multimodal input embeddings: each token's vector is the sum of a word
//! embedding, a 1D position embedding, and four box-corner embeddings
//! looked up from separate `x0`/`y0`/`x1`/`y1` tables over the normalized
//! 0..=1023 coordinate range.

use super::layers::init_matrix;
use super::{ModelConfig, ModelError, ParamView};
use crate::ocr::BoundingBox;
use ndarray::Array2;
use rand::Rng;

pub struct EmbeddingTable {
    pub word: Array2<f64>,
    pub pos1d: Array2<f64>,
    pub x0: Array2<f64>,
    pub y0: Array2<f64>,
    pub x1: Array2<f64>,
    pub y1: Array2<f64>,
    grads: Grads,
    cache: Option<Cache>,
}

struct Grads {
    word: Array2<f64>,
    pos1d: Array2<f64>,
    x0: Array2<f64>,
    y0: Array2<f64>,
    x1: Array2<f64>,
    y1: Array2<f64>,
}

struct Cache {
    ids: Vec<u32>,
    boxes: Vec<BoundingBox>,
}

impl EmbeddingTable {
    pub fn new<R: Rng>(rng: &mut R, config: &ModelConfig) -> Self {
        let d = config.d_model;
        let word = init_matrix(rng, config.vocab_size, d);
        let pos1d = init_matrix(rng, config.max_seq_len, d);
        let x0 = init_matrix(rng, config.max_2d_positions, d);
        let y0 = init_matrix(rng, config.max_2d_positions, d);
        let x1 = init_matrix(rng, config.max_2d_positions, d);
        let y1 = init_matrix(rng, config.max_2d_positions, d);
        let grads = Grads {
            word: Array2::zeros(word.dim()),
            pos1d: Array2::zeros(pos1d.dim()),
            x0: Array2::zeros(x0.dim()),
            y0: Array2::zeros(y0.dim()),
            x1: Array2::zeros(x1.dim()),
            y1: Array2::zeros(y1.dim()),
        };
        EmbeddingTable {
            word,
            pos1d,
            x0,
            y0,
            x1,
            y1,
            grads,
            cache: None,
        }
    }

    pub fn d_model(&self) -> usize {
        self.word.ncols()
    }

    fn check(&self, ids: &[u32], boxes: &[BoundingBox]) -> Result<(), ModelError> {
        if ids.len() != boxes.len() {
            return Err(ModelError::Config(format!(
                "{} token ids vs {} boxes",
                ids.len(),
                boxes.len()
            )));
        }
        if ids.len() > self.pos1d.nrows() {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.pos1d.nrows(),
            });
        }
        let max_2d = self.x0.nrows();
        for (i, (&id, b)) in ids.iter().zip(boxes).enumerate() {
            if id as usize >= self.word.nrows() {
                return Err(ModelError::TokenOutOfRange {
                    index: i,
                    id,
                    vocab: self.word.nrows(),
                });
            }
            for coord in [b.x0, b.y0, b.x1, b.y1] {
                if coord as usize >= max_2d {
                    return Err(ModelError::CoordOutOfRange {
                        index: i,
                        coord,
                        max: max_2d,
                    });
                }
            }
        }
        Ok(())
    }

    fn lookup(&self, ids: &[u32], boxes: &[BoundingBox]) -> Array2<f64> {
        let d = self.d_model();
        let mut out = Array2::zeros((ids.len(), d));
        for (i, (&id, b)) in ids.iter().zip(boxes).enumerate() {
            for c in 0..d {
                out[[i, c]] = self.word[[id as usize, c]]
                    + self.pos1d[[i, c]]
                    + self.x0[[b.x0 as usize, c]]
                    + self.y0[[b.y0 as usize, c]]
                    + self.x1[[b.x1 as usize, c]]
                    + self.y1[[b.y1 as usize, c]];
            }
        }
        out
    }

    /// Embeds a token sequence, caching the indices for backward.
    pub fn forward(
        &mut self,
        ids: &[u32],
        boxes: &[BoundingBox],
    ) -> Result<Array2<f64>, ModelError> {
        self.check(ids, boxes)?;
        let out = self.lookup(ids, boxes);
        self.cache = Some(Cache {
            ids: ids.to_vec(),
            boxes: boxes.to_vec(),
        });
        Ok(out)
    }

    pub fn forward_inference(
        &self,
        ids: &[u32],
        boxes: &[BoundingBox],
    ) -> Result<Array2<f64>, ModelError> {
        self.check(ids, boxes)?;
        Ok(self.lookup(ids, boxes))
    }

    /// Scatter-adds the output gradient into every table the forward pass
    /// read from, in token order.
    pub fn backward(&mut self, dout: &Array2<f64>) {
        let cache = self
            .cache
            .take()
            .expect("backward requires a prior forward");
        let d = self.d_model();
        assert_eq!(dout.dim(), (cache.ids.len(), d));
        for (i, (&id, b)) in cache.ids.iter().zip(&cache.boxes).enumerate() {
            for c in 0..d {
                let g = dout[[i, c]];
                self.grads.word[[id as usize, c]] += g;
                self.grads.pos1d[[i, c]] += g;
                self.grads.x0[[b.x0 as usize, c]] += g;
                self.grads.y0[[b.y0 as usize, c]] += g;
                self.grads.x1[[b.x1 as usize, c]] += g;
                self.grads.y1[[b.y1 as usize, c]] += g;
            }
        }
    }

    /// Zeroes the four box-corner tables; used to ablate spatial inputs.
    pub fn zero_2d_tables(&mut self) {
        self.x0.fill(0.0);
        self.y0.fill(0.0);
        self.x1.fill(0.0);
        self.y1.fill(0.0);
    }

    pub fn visit<F: FnMut(ParamView)>(&mut self, prefix: &str, f: &mut F) {
        let tables: [(&str, &mut Array2<f64>, &mut Array2<f64>); 6] = [
            ("word", &mut self.word, &mut self.grads.word),
            ("pos1d", &mut self.pos1d, &mut self.grads.pos1d),
            ("x0", &mut self.x0, &mut self.grads.x0),
            ("y0", &mut self.y0, &mut self.grads.y0),
            ("x1", &mut self.x1, &mut self.grads.x1),
            ("y1", &mut self.y1, &mut self.grads.y1),
        ];
        for (name, value, grad) in tables {
            let shape = vec![value.nrows(), value.ncols()];
            f(ParamView {
                name: format!("{prefix}.{name}"),
                shape,
                value: value.as_slice_mut().unwrap(),
                grad: grad.as_slice_mut().unwrap(),
                decay: true,
            });
        }
    }
}
