//! Spurious patterns and training-set poisoning.
//!
//! Seven fixed pattern families: solid top-left squares of side 1/3/5
//! (`S1`/`S2`/`S3`), dense uniform-random patterns with per-entry range
//! 0.25/0.5/1.0 (`R1`/`R2`/`R3`), and a 2x18 vertical center bar (`Co`).
//! A pattern is added to an image with `min(1, x + p)` — pixelwise addition
//! clipped back to the valid range — and poisoning stamps it onto a chosen
//! number of training images of one target class, leaving labels untouched.

use ndarray::{Array3, Array4, Axis};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PatternKind {
    S1,
    S2,
    S3,
    R1,
    R2,
    R3,
    Co,
}

impl PatternKind {
    pub const ALL: [PatternKind; 7] = [
        PatternKind::S1,
        PatternKind::S2,
        PatternKind::S3,
        PatternKind::R1,
        PatternKind::R2,
        PatternKind::R3,
        PatternKind::Co,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::S1 => "S1",
            PatternKind::S2 => "S2",
            PatternKind::S3 => "S3",
            PatternKind::R1 => "R1",
            PatternKind::R2 => "R2",
            PatternKind::R3 => "R3",
            PatternKind::Co => "Co",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown pattern `{s}`")))
    }

    /// Side length for the square family.
    fn square_side(self) -> Option<usize> {
        match self {
            PatternKind::S1 => Some(1),
            PatternKind::S2 => Some(3),
            PatternKind::S3 => Some(5),
            _ => None,
        }
    }

    /// Per-entry range for the random family.
    fn random_range(self) -> Option<f64> {
        match self {
            PatternKind::R1 => Some(0.25),
            PatternKind::R2 => Some(0.5),
            PatternKind::R3 => Some(1.0),
            _ => None,
        }
    }
}

impl std::fmt::Display for PatternKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A concrete additive pattern, shaped like one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub kind: PatternKind,
    /// `(h, w, c)` additive values, each in `[0, 1]`.
    pub values: Array3<f32>,
}

/// Realizes a pattern for images of the given shape.
///
/// Random-family patterns draw every entry (all pixels and channels)
/// independently from `U[0, range]` using the seeded `pattern` stream, so
/// one experiment can share a single draw across runs. Deterministic
/// families ignore the seed.
pub fn make_pattern(kind: PatternKind, shape: (usize, usize, usize), seed: u64) -> Result<Pattern> {
    let (h, w, c) = shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Shape("pattern shape must be nonzero".into()));
    }
    let mut values = Array3::<f32>::zeros((h, w, c));
    if let Some(side) = kind.square_side() {
        if side > h || side > w {
            return Err(Error::Shape(format!("{kind} needs at least {side}x{side} images")));
        }
        for y in 0..side {
            for x in 0..side {
                for ch in 0..c {
                    values[(y, x, ch)] = 1.0;
                }
            }
        }
    } else if let Some(range) = kind.random_range() {
        let mut stream = rng::stream(seed, "pattern");
        for v in values.iter_mut() {
            *v = rng::uniform(&mut stream, 0.0, range) as f32;
        }
    } else {
        // Co: a 2-wide, 18-tall bar through the center, columns 13..15,
        // rows 5..23 — drawn to overlap digit strokes, so it only means
        // anything on the 28x28 grayscale sets.
        if (h, w, c) != (28, 28, 1) {
            return Err(Error::Config(format!(
                "{kind} is defined only for 28x28 grayscale images, got {h}x{w}x{c}"
            )));
        }
        for y in 5..23 {
            for x in 13..15 {
                values[(y, x, 0)] = 1.0;
            }
        }
    }
    Ok(Pattern { kind, values })
}

/// `min(1, x + p)` for one image.
pub fn combine(image: &Array3<f32>, pattern: &Pattern) -> Result<Array3<f32>> {
    if image.dim() != pattern.values.dim() {
        return Err(Error::Shape(format!(
            "image {:?} and pattern {:?} differ",
            image.dim(),
            pattern.values.dim()
        )));
    }
    let mut out = image.clone();
    out.zip_mut_with(&pattern.values, |x, &p| *x = (*x + p).min(1.0));
    Ok(out)
}

/// `min(1, x + p)` applied to every image of a batch.
pub fn combine_batch(batch: &Array4<f32>, pattern: &Pattern) -> Result<Array4<f32>> {
    let (_, h, w, c) = batch.dim();
    if (h, w, c) != pattern.values.dim() {
        return Err(Error::Shape(format!(
            "batch images {:?} and pattern {:?} differ",
            (h, w, c),
            pattern.values.dim()
        )));
    }
    let mut out = batch.clone();
    for mut img in out.axis_iter_mut(Axis(0)) {
        img.zip_mut_with(&pattern.values, |x, &p| *x = (*x + p).min(1.0));
    }
    Ok(out)
}

/// What to poison: how many examples of which class, selected by which seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PoisonPlan {
    pub target_class: u8,
    pub n: usize,
    pub selection_seed: u64,
}

/// A training set with a pattern stamped onto selected examples.
#[derive(Clone, Debug)]
pub struct PoisonedDataset {
    pub data: ImageDataset,
    /// Ascending indices of the modified examples.
    pub poisoned_indices: Vec<usize>,
    pub plan: PoisonPlan,
    pub pattern_kind: PatternKind,
}

/// Stamps `pattern` onto `plan.n` examples of `plan.target_class`, chosen
/// uniformly without replacement. Labels are unchanged — the pattern rides
/// on images that already belong to the target class.
pub fn inject(base: &ImageDataset, pattern: &Pattern, plan: &PoisonPlan) -> Result<PoisonedDataset> {
    if base.input_shape() != pattern.values.dim() {
        return Err(Error::Shape(format!(
            "dataset images {:?} and pattern {:?} differ",
            base.input_shape(),
            pattern.values.dim()
        )));
    }
    let candidates = base.indices_of_class(plan.target_class);
    if candidates.len() < plan.n {
        return Err(Error::Degenerate(format!(
            "class {} has {} examples, cannot poison {}",
            plan.target_class,
            candidates.len(),
            plan.n
        )));
    }
    let mut stream = rng::stream(plan.selection_seed, "poison-select");
    let mut picks: Vec<usize> = rng::sample_without_replacement(&mut stream, candidates.len(), plan.n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picks.sort_unstable();

    let mut data = base.clone();
    for &i in &picks {
        let mut img = data.images.index_axis_mut(Axis(0), i);
        img.zip_mut_with(&pattern.values, |x, &p| *x = (*x + p).min(1.0));
    }
    Ok(PoisonedDataset { data, poisoned_indices: picks, plan: *plan, pattern_kind: pattern.kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetName, Split};
    use proptest::prelude::*;

    fn shape28() -> (usize, usize, usize) {
        (28, 28, 1)
    }

    #[test]
    fn square_patterns_cover_exactly_their_area() {
        for (kind, side) in [(PatternKind::S1, 1usize), (PatternKind::S2, 3), (PatternKind::S3, 5)] {
            let p = make_pattern(kind, shape28(), 0).unwrap();
            let ones = p.values.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, side * side, "{kind}");
            assert_eq!(p.values.iter().filter(|&&v| v != 0.0).count(), ones, "{kind}");
            assert_eq!(p.values[(side - 1, side - 1, 0)], 1.0);
            if side < 28 {
                assert_eq!(p.values[(side, side, 0)], 0.0);
            }
        }
    }

    #[test]
    fn square_patterns_fill_all_channels() {
        let p = make_pattern(PatternKind::S2, (32, 32, 3), 0).unwrap();
        for ch in 0..3 {
            assert_eq!(p.values[(0, 0, ch)], 1.0);
            assert_eq!(p.values[(2, 2, ch)], 1.0);
        }
    }

    #[test]
    fn random_patterns_are_dense_bounded_and_seeded() {
        for (kind, range) in
            [(PatternKind::R1, 0.25f32), (PatternKind::R2, 0.5), (PatternKind::R3, 1.0)]
        {
            let a = make_pattern(kind, shape28(), 2024).unwrap();
            let b = make_pattern(kind, shape28(), 2024).unwrap();
            let c = make_pattern(kind, shape28(), 2025).unwrap();
            assert_eq!(a, b, "same seed must reproduce {kind}");
            assert_ne!(a, c, "different seed must change {kind}");
            assert!(a.values.iter().all(|&v| (0.0..range).contains(&v)));
            // dense: essentially every entry is nonzero
            let nonzero = a.values.iter().filter(|&&v| v > 0.0).count();
            assert!(nonzero > 780, "{kind}: {nonzero} nonzero of 784");
            // the mean of U[0, r] is r/2
            let mean: f32 = a.values.iter().sum::<f32>() / 784.0;
            assert!((mean - range / 2.0).abs() < 0.02 * range.max(1.0), "{kind} mean {mean}");
        }
    }

    #[test]
    fn center_bar_occupies_the_documented_cells() {
        let p = make_pattern(PatternKind::Co, shape28(), 0).unwrap();
        let ones = p.values.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 2 * 18);
        assert_eq!(p.values[(5, 13, 0)], 1.0);
        assert_eq!(p.values[(22, 14, 0)], 1.0);
        assert_eq!(p.values[(4, 13, 0)], 0.0);
        assert_eq!(p.values[(23, 13, 0)], 0.0);
        assert_eq!(p.values[(5, 12, 0)], 0.0);
        assert_eq!(p.values[(5, 15, 0)], 0.0);
    }

    fn tiny_dataset() -> ImageDataset {
        // 12 images, labels cycle 0..3
        let images = Array4::from_shape_fn((12, 28, 28, 1), |(n, y, x, _)| {
            ((n + y + x) % 7) as f32 / 10.0
        });
        let labels = (0..12).map(|i| (i % 4) as u8).collect();
        ImageDataset { name: DatasetName::Mnist, split: Split::Train, images, labels }
    }

    #[test]
    fn inject_touches_only_selected_target_class_images() {
        let base = tiny_dataset();
        let pattern = make_pattern(PatternKind::S3, shape28(), 0).unwrap();
        let plan = PoisonPlan { target_class: 1, n: 2, selection_seed: 9 };
        let poisoned = inject(&base, &pattern, &plan).unwrap();
        assert_eq!(poisoned.poisoned_indices.len(), 2);
        assert!(poisoned.poisoned_indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(poisoned.data.labels, base.labels, "labels must not change");
        for i in 0..base.len() {
            let orig = base.images.index_axis(Axis(0), i);
            let new = poisoned.data.images.index_axis(Axis(0), i);
            if poisoned.poisoned_indices.contains(&i) {
                assert_eq!(base.labels[i], 1, "only target-class images may be poisoned");
                assert_eq!(new[(0, 0, 0)], (orig[(0, 0, 0)] + 1.0).min(1.0));
                assert_eq!(new[(27, 27, 0)], orig[(27, 27, 0)], "untouched pixel changed");
            } else {
                assert_eq!(orig, new, "non-selected image {i} changed");
            }
        }
        // determinism
        let again = inject(&base, &pattern, &plan).unwrap();
        assert_eq!(again.poisoned_indices, poisoned.poisoned_indices);
    }

    #[test]
    fn inject_rejects_oversubscribed_class() {
        let base = tiny_dataset();
        let pattern = make_pattern(PatternKind::S1, shape28(), 0).unwrap();
        let plan = PoisonPlan { target_class: 1, n: 4, selection_seed: 0 };
        assert!(inject(&base, &pattern, &plan).is_err(), "class 1 has only 3 members");
    }

    proptest! {
        #[test]
        fn combine_stays_in_unit_range_and_dominates_input(
            seed in 0u64..1000,
            kind_idx in 0usize..7,
        ) {
            let kind = PatternKind::ALL[kind_idx];
            let pattern = make_pattern(kind, shape28(), seed).unwrap();
            let mut r = rng::stream(seed, "combine/prop");
            let image = Array3::from_shape_simple_fn((28, 28, 1), || rng::uniform(&mut r, 0.0, 1.0) as f32);
            let out = combine(&image, &pattern).unwrap();
            for ((y, x, ch), &v) in out.indexed_iter() {
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v >= image[(y, x, ch)] - 1e-7, "combine may only brighten");
                let want = (image[(y, x, ch)] + pattern.values[(y, x, ch)]).min(1.0);
                prop_assert!((v - want).abs() < 1e-7);
            }
        }

        #[test]
        fn poisoned_count_is_exact(n in 0usize..3) {
            let base = tiny_dataset();
            let pattern = make_pattern(PatternKind::R2, shape28(), 1).unwrap();
            let plan = PoisonPlan { target_class: 2, n, selection_seed: 4 };
            let poisoned = inject(&base, &pattern, &plan).unwrap();
            prop_assert_eq!(poisoned.poisoned_indices.len(), n);
            let changed = (0..base.len())
                .filter(|&i| {
                    poisoned.data.images.index_axis(Axis(0), i) != base.images.index_axis(Axis(0), i)
                })
                .count();
            prop_assert_eq!(changed, n);
        }
    }
}
