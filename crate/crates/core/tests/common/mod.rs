//! Helpers shared by integration tests.

#![allow(dead_code)]

use divan::encoder::{EncoderConfig, NormOrder, Parameters, Positional};
use divan::model::{total_loss, FusionSpec, HeadConfig, Model, VerseExample};
use divan::normalize::TokenSequence;

const H: f64 = 1e-5;

/// A d_model 8 encoder with a small head over three classes.
pub fn tiny_model(norm_order: NormOrder, positional: Positional) -> Model {
    let enc = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_len: 8,
        dropout: 0.0,
        positional,
        norm_order,
        seed: 3,
    };
    let head = HeadConfig {
        hidden: 10,
        dropout: 0.0,
        seed: 4,
    };
    Model::init(9, 3, 3, enc, head, FusionSpec::default()).unwrap()
}

pub fn tiny_batch() -> Vec<VerseExample> {
    vec![
        VerseExample {
            tokens: TokenSequence::new(vec![2, 5], 8).unwrap(),
            aux: vec![0.3, -1.2, 0.7],
            label: 1,
        },
        VerseExample {
            tokens: TokenSequence::new(vec![2, 7, 4, 8], 8).unwrap(),
            aux: vec![-0.4, 0.1, 1.5],
            label: 2,
        },
    ]
}

/// Per-tensor relative error `‖g − ĝ‖ / max(‖g‖ + ‖ĝ‖, 1e-5)` between the
/// analytic gradient and central differences. The floor matters for the key
/// bias, whose true gradient is identically zero (softmax is shift invariant
/// along keys).
pub fn gradient_errors(m: &Model, data: &[VerseExample]) -> Vec<(String, f64)> {
    let batch: Vec<&VerseExample> = data.iter().collect();
    let weights = [0.7, 1.3, 1.1];
    let (_, grads) = m.loss_and_grad(&batch, &weights, None).unwrap();
    grads
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(ti, t)| {
            let g = t.data;
            let numeric: Vec<f64> = (0..g.len())
                .map(|j| {
                    let mut plus = m.clone();
                    plus.params.tensors_mut()[ti][j] += H;
                    let mut minus = m.clone();
                    minus.params.tensors_mut()[ti][j] -= H;
                    let lp = total_loss(&plus, &batch, &weights, 0.0).unwrap();
                    let lm = total_loss(&minus, &batch, &weights, 0.0).unwrap();
                    (lp - lm) / (2.0 * H)
                })
                .collect();
            let diff = g.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt()
                + numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
            (t.name, diff / scale.max(1e-5))
        })
        .collect()
}
