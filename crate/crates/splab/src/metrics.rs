//! Run-level measurements: test accuracy, the spurious score, and the
//! empirical pattern norm.

use ndarray::{Array2, Array4, Axis};

use crate::data::{cast_batch, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{self, Model};
use crate::spurious::{combine_batch, Pattern};
use crate::tensor::Scalar;

/// Probability threshold: an example "responds" to a pattern when the
/// target-class probability rises by more than this much.
pub const SCORE_THRESHOLD: f64 = 0.1;

/// Batch size for dataset sweeps.
const EVAL_BATCH: usize = 1000;

/// Eval-mode class probabilities for every image, computed in batches.
pub fn predict_probs<F: Scalar>(model: &Model<F>, images: &Array4<f32>) -> Result<Array2<f64>> {
    let n = images.dim().0;
    let mut out = Array2::<f64>::zeros((n, model.spec.num_classes));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let batch = images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let probs = nn::forward(model, &cast_batch::<F>(batch))?;
        for (i, row) in probs.rows().into_iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                out[(start + i, j)] = p.into_f64();
            }
        }
        start = end;
    }
    Ok(out)
}

/// Fraction of examples whose argmax probability matches the label.
pub fn accuracy<F: Scalar>(model: &Model<F>, dataset: &ImageDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("accuracy of an empty dataset".into()));
    }
    let probs = predict_probs(model, &dataset.images)?;
    let mut correct = 0usize;
    for (row, &label) in probs.rows().into_iter().zip(&dataset.labels) {
        // first index attaining the max, so ties break deterministically
        let mut pred = 0usize;
        for (i, &p) in row.iter().enumerate() {
            if p > row[pred] {
                pred = i;
            }
        }
        if pred == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of test examples where adding the pattern raises the
/// target-class probability by more than `threshold`.
///
/// Measures how strongly the network associates the pattern itself with the
/// target class, independent of the image content it rides on.
pub fn spurious_score<F: Scalar>(
    model: &Model<F>,
    test: &ImageDataset,
    pattern: &Pattern,
    target_class: u8,
    threshold: f64,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Degenerate("spurious score of an empty dataset".into()));
    }
    if target_class as usize >= model.spec.num_classes {
        return Err(Error::Config(format!(
            "target class {target_class} out of range for {} classes",
            model.spec.num_classes
        )));
    }
    let clean = predict_probs(model, &test.images)?;
    let patterned_images = combine_batch(&test.images, pattern)?;
    let patterned = predict_probs(model, &patterned_images)?;
    let c = target_class as usize;
    let mut hits = 0usize;
    for i in 0..test.len() {
        if patterned[(i, c)] - clean[(i, c)] > threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

/// Mean L2 distance the pattern actually moves test images:
/// `mean_i ‖min(1, x_i + p) − x_i‖₂`.
///
/// Smaller than the raw pattern norm wherever images are already bright,
/// because of the clip.
pub fn empirical_norm(test: &ImageDataset, pattern: &Pattern) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Degenerate("empirical norm over an empty dataset".into()));
    }
    let (h, w, c) = test.input_shape();
    if (h, w, c) != pattern.values.dim() {
        return Err(Error::Shape(format!(
            "dataset images {:?} and pattern {:?} differ",
            (h, w, c),
            pattern.values.dim()
        )));
    }
    let mut total = 0.0f64;
    for img in test.images.axis_iter(Axis(0)) {
        let mut sq = 0.0f64;
        for (x, &p) in img.iter().zip(pattern.values.iter()) {
            let d = ((x + p).min(1.0) - x) as f64;
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(total / test.len() as f64)
}

/// Mean and standard error (sample stddev / √k) of per-seed results.
pub fn aggregate_scores(per_seed: &[f64]) -> Result<(f64, f64)> {
    if per_seed.is_empty() {
        return Err(Error::Degenerate("aggregating an empty result list".into()));
    }
    let mean = crate::stats::mean(per_seed);
    let stderr = crate::stats::sample_std(per_seed) / (per_seed.len() as f64).sqrt();
    Ok((mean, stderr))
}
