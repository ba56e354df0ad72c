//! Model probes: pixel-removal sensitivity curves, first-layer weight
//! importance maps, and PGM image export for visual inspection.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::predict_probs;
use crate::nn::{ArchKind, Model};
use crate::rng;
use crate::tensor::Scalar;

/// Removal fractions are swept from 0 to 1 in steps of 0.02 (51 points).
pub const SENSITIVITY_STEPS: usize = 51;

/// Mean true-class confidence as growing fractions of each image's nonzero
/// pixels are zeroed.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SensitivityCurve {
    pub fractions: Vec<f64>,
    pub mean_prob: Vec<f64>,
    /// Standard error of the per-image probabilities at each fraction.
    pub stderr: Vec<f64>,
    pub n_examples: usize,
    pub seed: u64,
}

/// Sweeps pixel removal over `num_images` test images (sampled without
/// replacement by `seed`; the whole set if it is smaller).
///
/// Each image gets one random order over its nonzero elements; at fraction
/// `q` the first `round(q * k)` of them are zeroed, so masks grow by
/// inclusion and the curve reflects a single progressive deletion process.
pub fn sensitivity_curve<F: Scalar>(
    model: &Model<F>,
    test: &ImageDataset,
    num_images: usize,
    seed: u64,
) -> Result<SensitivityCurve> {
    if test.is_empty() || num_images == 0 {
        return Err(Error::Degenerate("sensitivity curve needs at least one image".into()));
    }
    let mut select = rng::stream(seed, "probe/select");
    let chosen: Vec<usize> = if num_images >= test.len() {
        (0..test.len()).collect()
    } else {
        rng::sample_without_replacement(&mut select, test.len(), num_images)
    };
    let (base, labels) = test.gather(&chosen);
    let (h, w, c) = test.input_shape();
    let elems = h * w * c;

    // one removal order per image, drawn from a single probe stream
    let mut order_rng = rng::stream(seed, "probe/order");
    let orders: Vec<Vec<u32>> = (0..chosen.len())
        .map(|i| {
            let img = base.index_axis(Axis(0), i);
            let flat = img.as_slice().expect("gathered batch is standard layout");
            let mut nonzero: Vec<u32> =
                (0..elems as u32).filter(|&e| flat[e as usize] != 0.0).collect();
            rng::shuffle(&mut order_rng, &mut nonzero);
            nonzero
        })
        .collect();

    let fractions: Vec<f64> = (0..SENSITIVITY_STEPS).map(|s| s as f64 * 0.02).collect();
    let mut mean_prob = Vec::with_capacity(fractions.len());
    let mut stderr = Vec::with_capacity(fractions.len());
    let mut masked = base.clone();
    let mut removed = vec![0usize; chosen.len()];
    for &q in &fractions {
        // masks grow monotonically; zero only the newly removed elements
        for (i, order) in orders.iter().enumerate() {
            let take = ((q * order.len() as f64).round() as usize).min(order.len());
            let flat = masked
                .index_axis_mut(Axis(0), i)
                .into_slice_memory_order()
                .expect("standard layout");
            for &e in &order[removed[i]..take] {
                flat[e as usize] = 0.0;
            }
            removed[i] = take.max(removed[i]);
        }
        let probs = predict_probs(model, &masked)?;
        let per_image: Vec<f64> =
            labels.iter().enumerate().map(|(i, &label)| probs[(i, label as usize)]).collect();
        mean_prob.push(crate::stats::mean(&per_image));
        stderr.push(crate::stats::sample_std(&per_image) / (per_image.len() as f64).sqrt());
    }
    Ok(SensitivityCurve { fractions, mean_prob, stderr, n_examples: chosen.len(), seed })
}

/// Per-pixel importance for fully-connected nets: the largest (signed)
/// first-layer weight leaving each input pixel, reshaped to `(h, w)`.
pub fn weight_importance<F: Scalar>(model: &Model<F>) -> Result<Array2<f64>> {
    match model.spec.kind {
        ArchKind::SmallMlp | ArchKind::Mlp | ArchKind::LargeMlp => {}
        other => {
            return Err(Error::Unsupported(format!(
                "weight importance reads a dense first layer; `{other}` starts with a convolution"
            )))
        }
    }
    let (h, w, c) = model.spec.input_shape;
    let weights = model
        .params
        .get("fc1.w")
        .ok_or_else(|| Error::Shape("model has no first dense layer".into()))?;
    let weights = weights.view().into_dimensionality::<ndarray::Ix2>().expect("dense weight rank");
    let mut map = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::NEG_INFINITY;
            for ch in 0..c {
                let row = (y * w + x) * c + ch;
                for &v in weights.row(row) {
                    best = best.max(v.into_f64());
                }
            }
            map[(y, x)] = best;
        }
    }
    Ok(map)
}

/// Writes a scalar map as binary 8-bit PGM, min-max scaled; a constant map
/// renders mid-gray.
pub fn write_pgm(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return Err(Error::Degenerate("cannot write an empty image".into()));
    }
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::Numerical("non-finite values in image map".into()));
    }
    let mut bytes = Vec::with_capacity(h * w);
    for &v in map.iter() {
        let px = if max > min { (((v - min) * 255.0) / (max - min)).floor() as u8 } else { 128 };
        bytes.push(px);
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Renders an `(h, w, c)` image tensor to PGM, averaging channels.
pub fn write_image_pgm(path: &Path, image: &ndarray::Array3<f32>) -> Result<()> {
    let (h, w, c) = image.dim();
    let mut map = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mean: f64 = (0..c).map(|ch| image[(y, x, ch)] as f64).sum::<f64>() / c as f64;
            map[(y, x)] = mean;
        }
    }
    write_pgm(path, &map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetName, Split};
    use crate::nn::{build_model, ArchSpec};
    use ndarray::Array4;

    fn corner_model() -> Model<f32> {
        let spec = ArchSpec::new(ArchKind::SmallMlp, (28, 28, 1), 10).unwrap();
        let mut m = build_model::<f32>(&spec, 0).unwrap();
        for (_, t) in m.params.iter_mut() {
            t.fill(0.0);
        }
        m.params.get_mut("fc1.w").unwrap()[[0, 0]] = 1.0;
        m.params.get_mut("fc2.w").unwrap()[[0, 3]] = 10.0;
        m
    }

    #[test]
    fn sensitivity_tracks_loss_of_the_informative_pixel() {
        let m = corner_model();
        let mut images = Array4::<f32>::zeros((1, 28, 28, 1));
        images[(0, 0, 0, 0)] = 1.0; // the only nonzero pixel is the one the net reads
        let ds = ImageDataset { name: DatasetName::Mnist, split: Split::Test, images, labels: vec![3] };
        let curve = sensitivity_curve(&m, &ds, 1, 0).unwrap();
        assert_eq!(curve.fractions.len(), SENSITIVITY_STEPS);
        assert_eq!(curve.n_examples, 1);
        // with one nonzero pixel, round(q) flips at q = 0.5
        assert!(curve.mean_prob[0] > 0.8, "unmasked prob {}", curve.mean_prob[0]);
        assert!((curve.mean_prob[24] - curve.mean_prob[0]).abs() < 1e-9);
        assert!((curve.mean_prob[50] - 0.1).abs() < 1e-6, "fully masked => uniform");
        // masks only grow: confidence never recovers
        for win in curve.mean_prob.windows(2) {
            assert!(win[1] <= win[0] + 1e-12);
        }
    }

    #[test]
    fn sensitivity_is_deterministic_in_seed() {
        let m = corner_model();
        let mut r = rng::stream(1, "probes/test");
        let images = Array4::from_shape_simple_fn((20, 28, 28, 1), || {
            rng::uniform(&mut r, 0.0, 1.0) as f32
        });
        let ds = ImageDataset {
            name: DatasetName::Mnist,
            split: Split::Test,
            images,
            labels: vec![3; 20],
        };
        let a = sensitivity_curve(&m, &ds, 10, 7).unwrap();
        let b = sensitivity_curve(&m, &ds, 10, 7).unwrap();
        assert_eq!(a.mean_prob, b.mean_prob);
        let c = sensitivity_curve(&m, &ds, 10, 8).unwrap();
        assert_ne!(a.mean_prob, c.mean_prob, "different seed, different image sample");
    }

    #[test]
    fn importance_map_reads_first_layer_rows() {
        let m = corner_model();
        let map = weight_importance(&m).unwrap();
        assert_eq!(map.dim(), (28, 28));
        assert_eq!(map[(0, 0)], 1.0);
        assert_eq!(map.sum(), 1.0, "only one pixel has outgoing weight");
    }

    #[test]
    fn importance_rejects_conv_first_layers() {
        let spec = ArchSpec::new(ArchKind::SmallCnn, (28, 28, 1), 10).unwrap();
        let m = build_model::<f32>(&spec, 0).unwrap();
        assert!(weight_importance(&m).is_err());
    }

    #[test]
    fn pgm_output_is_min_max_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let map = ndarray::array![[0.0, 1.0], [0.5, 0.25]];
        write_pgm(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 255, 127, 63]);
        // constant map: mid-gray
        write_pgm(&path, &ndarray::Array2::from_elem((2, 2), 3.0)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[header.len()..], &[128, 128, 128, 128]);
    }

    #[test]
    fn exported_square_pattern_has_exactly_25_maximal_pixels() {
        use crate::spurious::{make_pattern, PatternKind};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s3.pgm");
        let p = make_pattern(PatternKind::S3, (28, 28, 1), 0).unwrap();
        write_image_pgm(&path, &p.values).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n28 28\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let pixels = &bytes[header.len()..];
        assert_eq!(pixels.len(), 28 * 28);
        assert_eq!(pixels.iter().filter(|&&b| b == 255).count(), 25);
        assert_eq!(pixels.iter().filter(|&&b| b == 0).count(), 28 * 28 - 25);
    }
}
