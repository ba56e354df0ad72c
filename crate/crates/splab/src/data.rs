//! Dataset loading (IDX and CIFAR-10 binary), batching and augmentation.
//!
//! Images live in memory as `(n, h, w, c)` `f32` arrays scaled to `[0, 1]`;
//! labels are `u8` class indices. Loaders validate magic numbers, dimension
//! records and payload sizes, and report the offending field on mismatch.

use std::io::Read;
use std::path::Path;

use ndarray::{Array4, ArrayD, Axis};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Scalar;

/// The three image corpora the lab works with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum DatasetName {
    Mnist,
    Fashion,
    Cifar10,
}

impl DatasetName {
    pub const ALL: [DatasetName; 3] = [DatasetName::Mnist, DatasetName::Fashion, DatasetName::Cifar10];

    pub fn name(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Fashion => "fashion",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset `{s}`")))
    }

    /// `(height, width, channels)` of one example.
    pub fn input_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetName::Mnist | DatasetName::Fashion => (28, 28, 1),
            DatasetName::Cifar10 => (32, 32, 3),
        }
    }

    pub fn num_classes(self) -> usize {
        10
    }

    /// Files expected under `<root>/<name>/`, with reference SHA-256 sums.
    pub fn files(self) -> &'static [(&'static str, &'static str)] {
        match self {
            DatasetName::Mnist => &[
                (
                    "train-images-idx3-ubyte",
                    "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
                ),
                (
                    "train-labels-idx1-ubyte",
                    "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
                ),
                (
                    "t10k-images-idx3-ubyte",
                    "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
                ),
                (
                    "t10k-labels-idx1-ubyte",
                    "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
                ),
            ],
            DatasetName::Fashion => &[
                (
                    "train-images-idx3-ubyte",
                    "c59f468a2f672dc815687fe0f83887768d799fd8a3f3276145d20f83aa44d888",
                ),
                (
                    "train-labels-idx1-ubyte",
                    "bad3541b69d912435c50bb6ba87bec294ff4f6a2e1246121d8633921760443d9",
                ),
                (
                    "t10k-images-idx3-ubyte",
                    "5b4141f0afbad91edebe8549f8fcffe087ea10ca49f1dbef5c9a5cd8815ce37b",
                ),
                (
                    "t10k-labels-idx1-ubyte",
                    "0402a96d92fd2663957122ceb108a494c5af83dab82d92729df917d7dec38c34",
                ),
            ],
            // Converted from the upstream image archive into the classic
            // binary batch layout (label byte + planar RGB); sums are for
            // this lab's reference copies.
            DatasetName::Cifar10 => &[
                ("data_batch_1.bin", "014e562d6e23c72197cc727519169a60359f5eccd8945ad5a09d710285ff4e48"),
                ("data_batch_2.bin", "bbe8596564c0f86427f876058170b84dac6670ddf06d79402899d93ceea26f67"),
                ("data_batch_3.bin", "a591ca11fa1708a91ee40f54b3da4784ccd871ecf2137de63f51ada8b3fa57ed"),
                ("data_batch_4.bin", "755304fc0b379caeae8c14f0dac912fbc7d6cd469eb67a1029a08a39453a9add"),
                ("data_batch_5.bin", "cee916563c9f80d84e3cc88e17fdc0941787f1244f00a67874d45b261883ada5"),
                ("test_batch.bin", "8e2eb146ae340b09e24670f29cabc6326dba54da8789dab6768acf480273f65b"),
            ],
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// An in-memory labeled image collection.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub name: DatasetName,
    pub split: Split,
    /// `(n, h, w, c)`, values in `[0, 1]`.
    pub images: Array4<f32>,
    pub labels: Vec<u8>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let (_, h, w, c) = self.images.dim();
        (h, w, c)
    }

    /// Indices of every example with the given label.
    pub fn indices_of_class(&self, class: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Copies the selected examples into a fresh `(k, h, w, c)` batch.
    pub fn gather(&self, indices: &[usize]) -> (Array4<f32>, Vec<u8>) {
        let (_, h, w, c) = self.images.dim();
        let mut batch = Array4::<f32>::zeros((indices.len(), h, w, c));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            batch.index_axis_mut(Axis(0), row).assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        (batch, labels)
    }

    fn check(self) -> Result<Self> {
        let (n, h, w, c) = self.images.dim();
        if n != self.labels.len() {
            return Err(Error::format(
                "count",
                format!("{n} images but {} labels", self.labels.len()),
            ));
        }
        let classes = self.name.num_classes() as u8;
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::format("labels", format!("label {bad} out of range")));
        }
        if (h, w, c) != self.name.input_shape() {
            return Err(Error::format(
                "dimensions",
                format!("{}x{}x{} does not match {}", h, w, c, self.name),
            ));
        }
        Ok(self)
    }
}

/// Converts an `f32` image batch to the engine's scalar type.
pub fn cast_batch<F: Scalar>(batch: Array4<f32>) -> ArrayD<F> {
    batch.mapv(|v| F::from_f64(v as f64)).into_dyn()
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file truncated"))
}

/// Parses an IDX image file (magic 0x00000803) and its label companion
/// (magic 0x00000801), scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Array4<f32>, Vec<u8>)> {
    let img = read_all(images_path)?;
    let magic = be_u32(&img, 0, "image magic")?;
    if magic != 0x0000_0803 {
        return Err(Error::format("image magic", format!("expected 0x00000803, got {magic:#010x}")));
    }
    let n = be_u32(&img, 4, "image count")? as usize;
    let h = be_u32(&img, 8, "image rows")? as usize;
    let w = be_u32(&img, 12, "image cols")? as usize;
    let payload = &img[16..];
    if payload.len() != n * h * w {
        return Err(Error::format(
            "image payload",
            format!("expected {} bytes, found {}", n * h * w, payload.len()),
        ));
    }

    let lab = read_all(labels_path)?;
    let magic = be_u32(&lab, 0, "label magic")?;
    if magic != 0x0000_0801 {
        return Err(Error::format("label magic", format!("expected 0x00000801, got {magic:#010x}")));
    }
    let ln = be_u32(&lab, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::format("label count", format!("{ln} labels for {n} images")));
    }
    if lab.len() != 8 + ln {
        return Err(Error::format(
            "label payload",
            format!("expected {} bytes, found {}", 8 + ln, lab.len()),
        ));
    }

    let scale = 1.0f32 / 255.0;
    let pixels: Vec<f32> = payload.iter().map(|&b| b as f32 * scale).collect();
    let images = Array4::from_shape_vec((n, h, w, 1), pixels)
        .map_err(|e| Error::format("image payload", e.to_string()))?;
    Ok((images, lab[8..].to_vec()))
}

/// Loads one split of the CIFAR-10 binary batches (3073-byte records:
/// label byte, then 1024 red, 1024 green, 1024 blue bytes).
pub fn load_cifar10(dir: &Path, split: Split) -> Result<ImageDataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let scale = 1.0f32 / 255.0;
    for file in &files {
        let bytes = read_all(&dir.join(file))?;
        if bytes.len() % 3073 != 0 {
            return Err(Error::format(
                "batch payload",
                format!("{file}: {} bytes is not a whole number of records", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(3073) {
            labels.push(rec[0]);
            let planes = &rec[1..];
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        images.push(planes[c * 1024 + y * 32 + x] as f32 * scale);
                    }
                }
            }
        }
    }
    let n = labels.len();
    let images = Array4::from_shape_vec((n, 32, 32, 3), images)
        .map_err(|e| Error::format("batch payload", e.to_string()))?;
    ImageDataset { name: DatasetName::Cifar10, split, images, labels }.check()
}

/// Loads a dataset split from `<root>/<dataset>/` using the standard
/// file names for its format.
pub fn load(root: &Path, name: DatasetName, split: Split) -> Result<ImageDataset> {
    let dir = root.join(name.name());
    match name {
        DatasetName::Mnist | DatasetName::Fashion => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let (images, labels) = load_idx(
                &dir.join(format!("{prefix}-images-idx3-ubyte")),
                &dir.join(format!("{prefix}-labels-idx1-ubyte")),
            )?;
            ImageDataset { name, split, images, labels }.check()
        }
        DatasetName::Cifar10 => load_cifar10(&dir, split),
    }
}

/// Train-time augmentation: zero-pad by 4, take a random crop at the
/// original size, and flip horizontally with probability 1/2. Applied to
/// color images only (the harness enables it for CIFAR-10 training).
pub fn augment_batch(batch: &mut Array4<f32>, rng: &mut ChaCha20Rng) {
    const PAD: usize = 4;
    let (b, h, w, c) = batch.dim();
    let mut padded = vec![0.0f32; (h + 2 * PAD) * (w + 2 * PAD) * c];
    let pw = w + 2 * PAD;
    for bi in 0..b {
        let dy = rng::uniform_index(rng, 2 * PAD + 1);
        let dx = rng::uniform_index(rng, 2 * PAD + 1);
        let flip = rng::coin(rng, 0.5);
        let img = batch.index_axis(Axis(0), bi);
        padded.fill(0.0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    padded[((y + PAD) * pw + (x + PAD)) * c + ch] = img[(y, x, ch)];
                }
            }
        }
        let mut img = batch.index_axis_mut(Axis(0), bi);
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { dx + w - 1 - x } else { dx + x };
                for ch in 0..c {
                    img[(y, x, ch)] = padded[((y + dy) * pw + sx) * c + ch];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(dir: &Path, n: usize, h: usize, w: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("img");
        let lab_path = dir.join("lab");
        let mut f = std::fs::File::create(&img_path).unwrap();
        f.write_all(&0x0803u32.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(h as u32).to_be_bytes()).unwrap();
        f.write_all(&(w as u32).to_be_bytes()).unwrap();
        let px: Vec<u8> = (0..n * h * w).map(|i| (i % 256) as u8).collect();
        f.write_all(&px).unwrap();
        let mut f = std::fs::File::create(&lab_path).unwrap();
        f.write_all(&0x0801u32.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(0..n).map(|i| (i % 10) as u8).collect::<Vec<_>>()).unwrap();
        (img_path, lab_path)
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 3, 4, 5);
        let (images, labels) = load_idx(&ip, &lp).unwrap();
        assert_eq!(images.dim(), (3, 4, 5, 1));
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(images[(0, 0, 0, 0)], 0.0);
        assert_eq!(images[(0, 0, 1, 0)], 1.0 / 255.0);
        assert!(images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 2, 2, 2);
        // corrupt the magic
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&ip, &bytes).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("image magic"), "{err}");
        // restore magic, truncate payload
        bytes[3] = 0x03;
        bytes.pop();
        std::fs::write(&ip, &bytes).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("image payload"), "{err}");
    }

    #[test]
    fn cifar_records_decode_planar_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; 3073];
        rec[0] = 7; // label
        rec[1] = 255; // red at (0,0)
        rec[1 + 1024] = 128; // green at (0,0)
        rec[1 + 2048 + 33] = 64; // blue at (1,1)
        std::fs::write(dir.path().join("test_batch.bin"), &rec).unwrap();
        let ds = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 7);
        assert_eq!(ds.images[(0, 0, 0, 0)], 1.0);
        assert!((ds.images[(0, 0, 0, 1)] - 128.0 / 255.0).abs() < 1e-6);
        assert!((ds.images[(0, 1, 1, 2)] - 64.0 / 255.0).abs() < 1e-6);
        assert_eq!(ds.images[(0, 0, 0, 2)], 0.0);
    }

    #[test]
    fn gather_copies_requested_rows() {
        let images = Array4::from_shape_fn((4, 2, 2, 1), |(n, y, x, _)| (n * 4 + y * 2 + x) as f32);
        let ds = ImageDataset {
            name: DatasetName::Mnist,
            split: Split::Train,
            images,
            labels: vec![0, 1, 2, 3],
        };
        let (batch, labels) = ds.gather(&[3, 1]);
        assert_eq!(labels, vec![3, 1]);
        assert_eq!(batch[(0, 0, 0, 0)], 12.0);
        assert_eq!(batch[(1, 0, 0, 0)], 4.0);
    }

    #[test]
    fn augmentation_preserves_shape_and_pixel_budget() {
        let mut rng = rng::stream(5, "augment/test");
        let mut batch = Array4::from_elem((8, 32, 32, 3), 0.5f32);
        augment_batch(&mut batch, &mut rng);
        assert_eq!(batch.dim(), (8, 32, 32, 3));
        // crops shift zeros in from the padding; values stay in range
        assert!(batch.iter().all(|&v| v == 0.0 || v == 0.5));
        assert!(batch.iter().any(|&v| v == 0.0), "some crop should expose padding");
    }

    #[test]
    fn augmentation_is_identity_free_on_average_center() {
        // with dy=dx=4 and no flip the crop is the identity; over many draws
        // at least one batch element must keep its center pixel intact
        let mut rng = rng::stream(6, "augment/test2");
        let mut batch = Array4::from_elem((32, 32, 32, 3), 1.0f32);
        augment_batch(&mut batch, &mut rng);
        let centers: Vec<f32> = (0..32).map(|b| batch[(b, 16, 16, 0)]).collect();
        assert!(centers.iter().all(|&v| v == 1.0), "center survives any ±4 crop");
    }
}
