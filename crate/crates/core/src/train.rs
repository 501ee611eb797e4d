//! A small full-batch training loop on a synthetic two-class image set.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, LayerSpec};
use crate::init::seeded_rng;
use crate::layers::Module;
use crate::model::{build_model, softmax_cross_entropy};
use crate::tensor::{Shape, Tensor4};

pub const DEMO_SAMPLES: usize = 256;
pub const DEMO_SIZE: usize = 16;

/// Offset separating the data stream from the parameter stream.
const DATA_SEED_OFFSET: u64 = 0x5eed_da7a;

/// Synthetic images of shape `(DEMO_SAMPLES, channels, 16, 16)`.
///
/// Even samples (label 0) have a bright 8x8 square centered on dark noise;
/// odd samples (label 1) are dark noise only.
pub fn demo_dataset(channels: usize, seed: u64) -> (Tensor4, Vec<usize>) {
    let mut rng = seeded_rng(seed.wrapping_add(DATA_SEED_OFFSET));
    let labels: Vec<usize> = (0..DEMO_SAMPLES).map(|i| i % 2).collect();
    let lo = DEMO_SIZE / 4;
    let hi = DEMO_SIZE - lo;
    let shape = Shape::new(DEMO_SAMPLES, channels, DEMO_SIZE, DEMO_SIZE);
    let x = Tensor4::from_fn(shape, |n, _, h, w| {
        let square = labels[n] == 0 && (lo..hi).contains(&h) && (lo..hi).contains(&w);
        if square {
            rng.random_range(0.8..1.0)
        } else {
            rng.random_range(0.0..0.2)
        }
    });
    (x, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// Loss before each update, one record per step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> f64 {
        self.records[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.records[self.records.len() - 1].loss
    }

    pub fn tail(&self, n: usize) -> &[TrainRecord] {
        &self.records[self.records.len().saturating_sub(n)..]
    }
}

/// Trains `graph` with plain gradient descent on softmax cross-entropy.
///
/// The graph must take `c x 16 x 16` inputs and end in `gap_head classes=2`.
pub fn run_demo_train(graph: &GraphSpec, seed: u64, steps: usize, lr: f64) -> Result<TrainLog> {
    if steps == 0 {
        return Err(Error::validation("steps must be at least 1"));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::validation(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    if !matches!(graph.layers.last(), Some(LayerSpec::GapHead { classes: 2 })) {
        return Err(Error::validation(
            "demo training needs a graph ending in `gap_head classes=2`",
        ));
    }
    let input = graph.input_shape;
    if input.h != DEMO_SIZE || input.w != DEMO_SIZE {
        return Err(Error::validation(format!(
            "demo training uses {DEMO_SIZE}x{DEMO_SIZE} images, graph expects {input}"
        )));
    }

    let mut model = build_model(graph, seed)?;
    let (x, labels) = demo_dataset(input.c, seed);
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        model.zero_grad();
        let logits = model.forward(&x, true)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} is {loss}")));
        }
        records.push(TrainRecord { step, loss });
        model.backward(&grad)?;
        let mut bad = false;
        model.visit_params(&mut |p, g| {
            for (w, d) in p.iter_mut().zip(g.iter()) {
                *w -= lr * d;
                bad |= !w.is_finite();
            }
        });
        if bad {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
    }
    Ok(TrainLog { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_model_config;

    const SMALL: &str =
        "input 1 16 16\nconv cin=1 cout=4 k=3 s=2 p=1\nbn c=4\nrelu\ngap_head classes=2\n";

    #[test]
    fn dataset_classes_differ_in_the_center() {
        let (x, labels) = demo_dataset(1, 3);
        assert_eq!(labels[0], 0);
        assert_eq!(labels[1], 1);
        assert!(x.get(0, 0, 8, 8) >= 0.8);
        assert!(x.get(1, 0, 8, 8) < 0.2);
        assert!(x.get(0, 0, 0, 0) < 0.2);
    }

    #[test]
    fn rejects_bad_arguments() {
        let g = parse_model_config(SMALL).unwrap();
        assert!(matches!(
            run_demo_train(&g, 0, 0, 0.1),
            Err(Error::Validation(_))
        ));
        assert!(run_demo_train(&g, 0, 1, f64::NAN).is_err());
        let no_head = parse_model_config("input 1 16 16\nrelu\n").unwrap();
        assert!(run_demo_train(&no_head, 0, 1, 0.1).is_err());
        let wrong_size = parse_model_config("input 1 8 8\ngap_head classes=2\n").unwrap();
        assert!(run_demo_train(&wrong_size, 0, 1, 0.1).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let g = parse_model_config(SMALL).unwrap();
        let log = run_demo_train(&g, 1, 4, 0.0).unwrap();
        for r in &log.records {
            assert!((r.loss - log.initial_loss()).abs() < 1e-12);
        }
    }

    #[test]
    fn reproducible() {
        let g = parse_model_config(SMALL).unwrap();
        assert_eq!(
            run_demo_train(&g, 2, 5, 0.1).unwrap(),
            run_demo_train(&g, 2, 5, 0.1).unwrap()
        );
    }

    #[test]
    fn huge_learning_rate_fails_hard() {
        let g = parse_model_config(SMALL).unwrap();
        assert!(matches!(
            run_demo_train(&g, 1, 50, 1e300),
            Err(Error::NonFinite(_))
        ));
    }
}
