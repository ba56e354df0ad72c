//! Self-describing binary model container.
//!
//! Layout: the magic string `SPLAB01`, then architecture kind, number of
//! classes, input shape, and init seed, then every parameter and buffer
//! tensor as `(name length, name bytes, rank, dims…, raw f32 data)`. All
//! integers are 64-bit little-endian; tensor data is little-endian f32 in
//! row-major order. Save → load reproduces the model bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::nn::{ArchKind, ArchSpec, Model};
use crate::tensor::{ParamSet, Scalar, Tensor};

const MAGIC: &[u8; 7] = b"SPLAB01";

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_tensor_group<F: Scalar>(w: &mut impl Write, set: &ParamSet<F>) -> Result<()> {
    write_u64(w, set.len() as u64)?;
    for (name, tensor) in set.iter() {
        write_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(w, tensor.ndim() as u64)?;
        for &d in tensor.shape() {
            write_u64(w, d as u64)?;
        }
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for &v in tensor.iter() {
            bytes.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_tensor_group<F: Scalar>(r: &mut impl Read) -> Result<ParamSet<F>> {
    let count = read_u64(r)?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u64(r)? as usize;
        if name_len > 4096 {
            return Err(Error::format("tensor name", format!("implausible length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("tensor name", "not valid UTF-8"))?;
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(Error::format("tensor rank", format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = read_u64(r)? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::format("tensor dims", "size overflow"))?;
            dims.push(d);
        }
        if len > (1 << 31) {
            return Err(Error::format("tensor dims", format!("implausible element count {len}")));
        }
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<F> = bytes
            .chunks_exact(4)
            .map(|c| F::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let tensor = Tensor::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::format("tensor data", e.to_string()))?;
        set.insert(name, tensor)?;
    }
    Ok(set)
}

/// Writes a model to `path`.
pub fn save<F: Scalar>(path: &Path, model: &Model<F>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let arch = model.spec.kind.name().as_bytes();
    write_u64(&mut w, arch.len() as u64)?;
    w.write_all(arch)?;
    write_u64(&mut w, model.spec.num_classes as u64)?;
    let (h, wd, c) = model.spec.input_shape;
    write_u64(&mut w, h as u64)?;
    write_u64(&mut w, wd as u64)?;
    write_u64(&mut w, c as u64)?;
    write_u64(&mut w, model.seed)?;
    write_tensor_group(&mut w, &model.params)?;
    write_tensor_group(&mut w, &model.buffers)?;
    w.flush()?;
    Ok(())
}

/// Reads a model from `path`, validating the container against the declared
/// architecture (tensor names and shapes must match exactly).
pub fn load<F: Scalar>(path: &Path) -> Result<Model<F>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("magic", "not a model container (bad magic)"));
    }
    let arch_len = read_u64(&mut r)? as usize;
    if arch_len > 64 {
        return Err(Error::format("architecture", "implausible name length"));
    }
    let mut arch_bytes = vec![0u8; arch_len];
    r.read_exact(&mut arch_bytes)?;
    let arch_name = String::from_utf8(arch_bytes)
        .map_err(|_| Error::format("architecture", "not valid UTF-8"))?;
    let kind = ArchKind::parse(&arch_name)?;
    let num_classes = read_u64(&mut r)? as usize;
    let h = read_u64(&mut r)? as usize;
    let w = read_u64(&mut r)? as usize;
    let c = read_u64(&mut r)? as usize;
    let seed = read_u64(&mut r)?;
    let spec = ArchSpec::new(kind, (h, w, c), num_classes)?;

    let params = read_tensor_group::<F>(&mut r)?;
    let buffers = read_tensor_group::<F>(&mut r)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("container", "trailing bytes after the last tensor"));
    }

    // the container must describe exactly the tensors this architecture has
    let reference = crate::nn::build_model::<F>(&spec, seed)?;
    check_same_layout("parameter", &reference.params, &params)?;
    check_same_layout("buffer", &reference.buffers, &buffers)?;

    Ok(Model { spec, params, buffers, seed })
}

fn check_same_layout<F: Scalar>(
    what: &str,
    reference: &ParamSet<F>,
    loaded: &ParamSet<F>,
) -> Result<()> {
    if reference.len() != loaded.len() {
        return Err(Error::format(
            format!("{what} tensors"),
            format!("expected {} tensors, found {}", reference.len(), loaded.len()),
        ));
    }
    for ((want_name, want), (got_name, got)) in reference.iter().zip(loaded.iter()) {
        if want_name != got_name {
            return Err(Error::format(
                format!("{what} tensors"),
                format!("expected `{want_name}`, found `{got_name}`"),
            ));
        }
        if want.shape() != got.shape() {
            return Err(Error::format(
                format!("{what} `{got_name}`"),
                format!("shape {:?} does not match the architecture's {:?}", got.shape(), want.shape()),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    fn roundtrip(kind: ArchKind, shape: (usize, usize, usize)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = ArchSpec::new(kind, shape, 10).unwrap();
        let mut model = build_model::<f32>(&spec, 42).unwrap();
        // make buffers non-trivial so the round-trip covers them
        for (_, t) in model.buffers.iter_mut() {
            t.mapv_inplace(|v| v + 0.25);
        }
        save(&path, &model).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.seed, model.seed);
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a, b, "parameters must round-trip bit-exactly");
        }
        for ((_, a), (_, b)) in model.buffers.iter().zip(back.buffers.iter()) {
            assert_eq!(a, b, "buffers must round-trip bit-exactly");
        }
    }

    #[test]
    fn round_trip_is_bit_exact_for_dense_and_conv_nets() {
        roundtrip(ArchKind::SmallMlp, (28, 28, 1));
        roundtrip(ArchKind::SmallCnn, (28, 28, 1));
        roundtrip(ArchKind::ResNet20, (32, 32, 3));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_model");
        std::fs::write(&path, b"PK\x03\x04 something else entirely").unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = ArchSpec::new(ArchKind::SmallMlp, (28, 28, 1), 10).unwrap();
        let model = build_model::<f32>(&spec, 0).unwrap();
        save(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load::<f32>(&path).is_err());
    }

    #[test]
    fn rejects_trailing_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = ArchSpec::new(ArchKind::SmallMlp, (28, 28, 1), 10).unwrap();
        let model = build_model::<f32>(&spec, 0).unwrap();
        save(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"extra");
        std::fs::write(&path, &bytes).unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = ArchSpec::new(ArchKind::Mlp, (28, 28, 1), 10).unwrap();
        let model = build_model::<f32>(&spec, 9).unwrap();
        save(&path, &model).unwrap();
        let back = load::<f32>(&path).unwrap();
        let x = ndarray::Array4::<f32>::from_shape_fn((3, 28, 28, 1), |(b, y, _, _)| {
            (b as f32 + 1.0) * 0.01 * y as f32
        });
        let a = crate::metrics::predict_probs(&model, &x).unwrap();
        let b = crate::metrics::predict_probs(&back, &x).unwrap();
        assert_eq!(a, b);
    }
}
