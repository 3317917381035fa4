//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!   8-byte magic "FLOODCNN"
//!   u32 format version
//!   u32 metadata length, then that many bytes of UTF-8 JSON
//!   u32 tensor count
//!   per tensor: u32 name length, name bytes, u32 rank, u64 dims, f32 data
//!
//! The metadata embeds the serialized layer plan, so loading rebuilds the
//! exact stack without consulting the architecture catalog, then overwrites
//! every parameter and buffer with the stored tensors. Round trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BuildFlags, Model, NetPlan};
use crate::optim::{Rng, RNG_ALGORITHM};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"FLOODCNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    arch: String,
    batchnorm: bool,
    dropout: bool,
    dropout_rate: f64,
    input_shape: [usize; 3],
    num_classes: usize,
    class_names: Vec<String>,
    plan: String,
    rng_algorithm: String,
    rng_seed: u64,
    rng_position: u64,
    history: Option<String>,
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let meta = Meta {
        arch: model.arch().to_string(),
        batchnorm: model.flags().batchnorm,
        dropout: model.flags().dropout,
        dropout_rate: model.flags().dropout_rate,
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        class_names: crate::data::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        plan: model.plan().serialize(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        rng_seed: model.seed(),
        rng_position: model.rng_position(),
        history: model.history_summary().map(str::to_string),
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| Error::State(format!("checkpoint metadata serialization failed: {e}")))?;

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;

    let state = model.state();
    w.write_all(&(state.len() as u32).to_le_bytes())?;
    for (name, tensor) in state {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4096 * 4);
        for chunk in tensor.data().chunks(4096) {
            buf.clear();
            for &v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint. When `expected_arch` is given, a stored model of any
/// other architecture is rejected before tensors are read.
pub fn load_checkpoint(path: &Path, expected_arch: Option<&str>) -> Result<Model<f32>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Load(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{}: unsupported checkpoint format version {version} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }

    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_bytes)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Load(format!("{}: bad checkpoint metadata: {e}", path.display())))?;

    if let Some(expected) = expected_arch {
        if meta.arch != expected {
            return Err(Error::Load(format!(
                "{}: checkpoint holds a '{}' model, expected '{expected}'",
                path.display(),
                meta.arch
            )));
        }
    }
    if meta.rng_algorithm != RNG_ALGORITHM {
        return Err(Error::Load(format!(
            "{}: checkpoint used rng '{}', this build implements '{RNG_ALGORITHM}'",
            path.display(),
            meta.rng_algorithm
        )));
    }

    let plan = NetPlan::parse(&meta.plan)?;
    let flags = BuildFlags {
        batchnorm: meta.batchnorm,
        dropout: meta.dropout,
        dropout_rate: meta.dropout_rate,
    };
    // Seeding with the recorded rng reproduces the original dropout streams;
    // the freshly initialized parameters are overwritten below.
    let mut rng = Rng::new(meta.rng_seed);
    let mut model: Model<f32> =
        Model::from_plan_labeled(plan, &meta.arch, flags, meta.input_shape, &mut rng)?;
    model.set_rng_record(meta.rng_seed, meta.rng_position);
    model.set_history_summary(meta.history.clone());

    let count = read_u32(&mut r)? as usize;
    let mut state = model.state_mut();
    if count != state.len() {
        return Err(Error::Load(format!(
            "{}: checkpoint has {count} tensors, architecture '{}' needs {}",
            path.display(),
            meta.arch,
            state.len()
        )));
    }
    for (key, tensor) in state.iter_mut() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Load(format!("{}: tensor name is not UTF-8", path.display())))?;
        if &name != key {
            return Err(Error::Load(format!(
                "{}: tensor '{name}' does not match expected '{key}'",
                path.display()
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let shape = Shape::new(&dims)?;
        if &shape != tensor.shape() {
            return Err(Error::Load(format!(
                "{}: tensor '{name}' has shape {shape}, architecture needs {}",
                path.display(),
                tensor.shape()
            )));
        }
        let mut loaded: Tensor<f32> = Tensor::zeros(shape);
        let mut buf = vec![0u8; 4096 * 4];
        let mut filled = 0;
        while filled < loaded.numel() {
            let take = (loaded.numel() - filled).min(4096);
            read_exact(&mut r, &mut buf[..take * 4])?;
            for i in 0..take {
                let b = [buf[i * 4], buf[i * 4 + 1], buf[i * 4 + 2], buf[i * 4 + 3]];
                loaded.data_mut()[filled + i] = f32::from_le_bytes(b);
            }
            filled += take;
        }
        tensor.data_mut().copy_from_slice(loaded.data());
    }
    Ok(model)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Load("checkpoint file is truncated".to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ConvSpec, Mode};
    use crate::model::LayerSpec;

    fn small_plan() -> NetPlan {
        NetPlan::new(vec![
            LayerSpec::Conv(ConvSpec { filters: 3, kernel: (3, 3), stride: (1, 1), padding: (1, 1) }),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Pool { window: (2, 2), stride: (2, 2) },
            LayerSpec::Flatten,
            LayerSpec::Dense { width: 6 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Dense { width: 2 },
        ])
    }

    fn build_small(seed: u64) -> Model<f32> {
        let mut rng = Rng::new(seed);
        Model::from_plan(small_plan(), [6, 6, 3], &mut rng).unwrap()
    }

    fn random_batch(seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(Shape::new(&[4, 6, 6, 3]).unwrap());
        for v in t.data_mut() {
            *v = rng.uniform(0.0, 1.0) as f32;
        }
        t
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = build_small(9);

        // Make running stats non-trivial before saving.
        let batch = random_batch(10);
        model.forward(&batch, Mode::Train).unwrap();
        model.set_history_summary(Some("{\"epochs\":3}".to_string()));

        save_checkpoint(&model, &path).unwrap();
        let mut loaded = load_checkpoint(&path, None).unwrap();

        for ((ka, ta), (kb, tb)) in model.state().iter().zip(loaded.state().iter()) {
            assert_eq!(ka, kb);
            assert_eq!(ta.data(), tb.data(), "tensor {ka} must round-trip bit-exact");
        }
        assert_eq!(loaded.arch(), "custom");
        assert_eq!(loaded.seed(), model.seed());
        assert_eq!(loaded.rng_position(), model.rng_position());
        assert_eq!(loaded.history_summary(), Some("{\"epochs\":3}"));

        let a = model.forward(&batch, Mode::Infer).unwrap();
        let b = loaded.forward(&batch, Mode::Infer).unwrap();
        assert_eq!(a.data(), b.data());

        // Saving the loaded model reproduces the same file byte-for-byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_small(1);
        save_checkpoint(&model, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path, None) {
            Err(Error::Load(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_small(1);
        save_checkpoint(&model, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path, None) {
            Err(Error::Load(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_small(1);
        save_checkpoint(&model, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path, None) {
            Err(Error::Load(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn arch_expectation_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = Rng::new(4);
        let model: Model<f32> =
            Model::from_plan_labeled(small_plan(), "vgg3block", BuildFlags::default(), [6, 6, 3], &mut rng)
                .unwrap();
        save_checkpoint(&model, &path).unwrap();

        assert!(load_checkpoint(&path, Some("vgg3block")).is_ok());
        match load_checkpoint(&path, Some("alexnet")) {
            Err(Error::Load(msg)) => {
                assert!(msg.contains("vgg3block") && msg.contains("alexnet"), "{msg}")
            }
            other => panic!("expected arch mismatch error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope.ckpt");
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Io(_))));
    }
}
