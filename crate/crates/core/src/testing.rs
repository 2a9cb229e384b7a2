//! Randomized model and batch generators shared by the property suites.

use rand::Rng;

use crate::model_graph::{LayerSpec, ModelSpec};
use crate::tensor::Tensor;

/// A random residual MLP with at most `max_layers` layers (including input and
/// loss), at most `max_skips` non-consecutive `Add` joins, and hidden width at
/// most `max_units`.
pub fn random_model_spec<R: Rng>(rng: &mut R, max_layers: usize, max_skips: usize, max_units: usize) -> ModelSpec {
    assert!(max_layers >= 4, "need room for input, two dense layers and the loss");
    let width = rng.gen_range(2..=max_units.clamp(2, 8));
    let classes = rng.gen_range(2..=4);
    let mut layers = vec![LayerSpec::Input { cost: None }];
    let mut fixed = 4;
    let input_shape = if max_layers >= 5 && rng.gen_bool(0.2) {
        layers.push(LayerSpec::flatten());
        fixed += 1;
        vec![2, rng.gen_range(1..=3)]
    } else {
        vec![rng.gen_range(1..=6)]
    };
    layers.push(LayerSpec::dense(width));
    let first_hidden = layers.len() - 1;

    let body = rng.gen_range(0..=max_layers - fixed);
    let mut skips = 0;
    for _ in 0..body {
        let current = layers.len() - 1;
        let can_skip = skips < max_skips && current >= first_hidden + 2;
        match rng.gen_range(0..3) {
            0 if can_skip => {
                let src = rng.gen_range(first_hidden..current - 1);
                layers.push(LayerSpec::add(src, current));
                skips += 1;
            }
            1 => layers.push(LayerSpec::relu()),
            _ => layers.push(LayerSpec::dense(width)),
        }
    }
    layers.push(LayerSpec::dense(classes));
    layers.push(LayerSpec::loss());
    ModelSpec::new(rng.gen(), input_shape, layers)
}

/// Uniform `[-2, 2]` inputs with uniformly drawn labels.
pub fn random_batch<R: Rng>(rng: &mut R, rows: usize, input_shape: &[usize], classes: usize) -> (Tensor, Vec<usize>) {
    let mut shape = vec![rows];
    shape.extend_from_slice(input_shape);
    let n = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("valid shape");
    let labels = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
    (x, labels)
}
