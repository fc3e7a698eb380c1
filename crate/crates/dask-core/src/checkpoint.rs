//! Binary model checkpoints: a magic tag, a JSON metadata block (model kind,
//! parameter shapes, config hash), then the concatenated little-endian f64
//! parameter arrays in declaration order. Round trips are bit-exact. There is
//! no checksum: a flipped payload byte that keeps lengths intact still loads.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::CHANNELS;
use crate::rehearser::{KernelPredictor, Rehearser, SharedKernel, StatsPredictor};
use crate::reid::{ReidExtractor, ReidModel};
use crate::tensor::{Conv2d, Linear, Tensor};

pub const MAGIC: &[u8; 9] = b"DASKCKPT1";

pub const KIND_REID: &str = "reid";
pub const KIND_KERNEL_REHEARSER: &str = "akpnet";
pub const KIND_SHARED_KERNEL: &str = "shared-kernel";
pub const KIND_STATS_HEAD: &str = "stats-head";

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    shapes: Vec<Vec<usize>>,
    config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernels_per_image: Option<usize>,
}

fn write_checkpoint(meta: &Meta, params: &[&Tensor], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let json = serde_json::to_vec(meta)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for t in params {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(Meta, Vec<Tensor>)> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    if data.len() < MAGIC.len() + 4 {
        return Err(Error::CheckpointTruncated("missing header".into()));
    }
    if &data[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let mut pos = MAGIC.len();
    let json_len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    if data.len() < pos + json_len {
        return Err(Error::CheckpointTruncated("metadata block".into()));
    }
    let meta: Meta = serde_json::from_slice(&data[pos..pos + json_len])
        .map_err(|e| Error::CheckpointTruncated(format!("metadata parse: {e}")))?;
    pos += json_len;

    let expect: usize = meta
        .shapes
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum::<usize>()
        * 8;
    if data.len() - pos != expect {
        return Err(Error::CheckpointTruncated(format!(
            "payload is {} bytes, shapes require {expect}",
            data.len() - pos
        )));
    }
    let mut tensors = Vec::with_capacity(meta.shapes.len());
    for shape in &meta.shapes {
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(f64::from_le_bytes(data[pos..pos + 8].try_into().unwrap()));
            pos += 8;
        }
        tensors.push(Tensor::new(shape.clone(), values)?);
    }
    Ok((meta, tensors))
}

fn check_kind(meta: &Meta, expected: &str) -> Result<()> {
    if meta.kind != expected {
        return Err(Error::CheckpointKind {
            expected: expected.into(),
            found: meta.kind.clone(),
        });
    }
    Ok(())
}

fn conv_block(w: Tensor, b: Tensor) -> Conv2d {
    Conv2d {
        weight: w,
        bias: b,
        stride: 2,
    }
}

fn take_pairs(tensors: Vec<Tensor>) -> Vec<(Tensor, Tensor)> {
    let mut it = tensors.into_iter();
    let mut pairs = Vec::new();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        pairs.push((w, b));
    }
    pairs
}

pub fn save_reid_model(model: &ReidModel, config_hash: &str, path: &Path) -> Result<()> {
    let params = model.params();
    let meta = Meta {
        kind: KIND_REID.into(),
        shapes: params.iter().map(|t| t.shape().to_vec()).collect(),
        config_hash: config_hash.into(),
        kernel_size: None,
        kernels_per_image: None,
    };
    write_checkpoint(&meta, &params, path)
}

pub fn load_reid_model(path: &Path) -> Result<ReidModel> {
    let (meta, tensors) = read_checkpoint(path)?;
    check_kind(&meta, KIND_REID)?;
    if tensors.len() != 12 {
        return Err(Error::CheckpointShape(format!(
            "reid checkpoint needs 12 parameter tensors, found {}",
            tensors.len()
        )));
    }
    let mut pairs = take_pairs(tensors).into_iter();
    let blocks: Vec<Conv2d> = (0..4)
        .map(|_| {
            let (w, b) = pairs.next().unwrap();
            conv_block(w, b)
        })
        .collect();
    for blk in &blocks {
        if blk.weight.shape().len() != 4 {
            return Err(Error::CheckpointShape("conv weight rank".into()));
        }
    }
    let (ew, eb) = pairs.next().unwrap();
    let (cw, cb) = pairs.next().unwrap();
    if ew.shape().len() != 2 || cw.shape().len() != 2 || ew.shape()[1] != cw.shape()[0] {
        return Err(Error::CheckpointShape(
            "embedding/classifier shapes inconsistent".into(),
        ));
    }
    Ok(ReidModel {
        extractor: ReidExtractor {
            blocks,
            embed: Linear {
                weight: ew,
                bias: eb,
            },
        },
        classifier: Linear {
            weight: cw,
            bias: cb,
        },
    })
}

pub fn save_rehearser(rehearser: &Rehearser, config_hash: &str, path: &Path) -> Result<()> {
    let (kind, params, kernel_size, kernels_per_image) = match rehearser {
        Rehearser::Kernel(net) => (
            KIND_KERNEL_REHEARSER,
            net.params(),
            Some(net.kernel_size),
            Some(net.kernels_per_image),
        ),
        Rehearser::Shared(sk) => (KIND_SHARED_KERNEL, sk.params(), Some(sk.kernel_size), None),
        Rehearser::Stats(sp) => (KIND_STATS_HEAD, sp.params(), None, None),
    };
    let meta = Meta {
        kind: kind.into(),
        shapes: params.iter().map(|t| t.shape().to_vec()).collect(),
        config_hash: config_hash.into(),
        kernel_size,
        kernels_per_image,
    };
    write_checkpoint(&meta, &params, path)
}

pub fn load_rehearser(path: &Path) -> Result<Rehearser> {
    let (meta, tensors) = read_checkpoint(path)?;
    match meta.kind.as_str() {
        KIND_KERNEL_REHEARSER => {
            let kernel_size = meta
                .kernel_size
                .ok_or_else(|| Error::CheckpointShape("missing kernel_size".into()))?;
            let kernels_per_image = meta
                .kernels_per_image
                .ok_or_else(|| Error::CheckpointShape("missing kernels_per_image".into()))?;
            if tensors.len() != 8 {
                return Err(Error::CheckpointShape(format!(
                    "kernel rehearser needs 8 tensors, found {}",
                    tensors.len()
                )));
            }
            let mut pairs = take_pairs(tensors).into_iter();
            let blocks: Vec<Conv2d> = (0..3)
                .map(|_| {
                    let (w, b) = pairs.next().unwrap();
                    conv_block(w, b)
                })
                .collect();
            let (hw, hb) = pairs.next().unwrap();
            let net = KernelPredictor {
                blocks,
                head: Linear {
                    weight: hw,
                    bias: hb,
                },
                kernel_size,
                kernels_per_image,
            };
            if net.head.bias.numel() != net.head_output_len() {
                return Err(Error::CheckpointShape(format!(
                    "head width {} does not match kernel layout {}",
                    net.head.bias.numel(),
                    net.head_output_len()
                )));
            }
            Ok(Rehearser::Kernel(net))
        }
        KIND_SHARED_KERNEL => {
            let kernel_size = meta
                .kernel_size
                .ok_or_else(|| Error::CheckpointShape("missing kernel_size".into()))?;
            if tensors.len() != 2 {
                return Err(Error::CheckpointShape(format!(
                    "shared kernel needs 2 tensors, found {}",
                    tensors.len()
                )));
            }
            let mut it = tensors.into_iter();
            let weights = it.next().unwrap();
            let bias = it.next().unwrap();
            if weights.shape() != [CHANNELS, CHANNELS, kernel_size, kernel_size]
                || bias.shape() != [CHANNELS]
            {
                return Err(Error::CheckpointShape("shared kernel shapes".into()));
            }
            Ok(Rehearser::Shared(SharedKernel {
                weights,
                bias,
                kernel_size,
            }))
        }
        KIND_STATS_HEAD => {
            if tensors.len() != 8 {
                return Err(Error::CheckpointShape(format!(
                    "stats head needs 8 tensors, found {}",
                    tensors.len()
                )));
            }
            let mut pairs = take_pairs(tensors).into_iter();
            let blocks: Vec<Conv2d> = (0..3)
                .map(|_| {
                    let (w, b) = pairs.next().unwrap();
                    conv_block(w, b)
                })
                .collect();
            let (hw, hb) = pairs.next().unwrap();
            Ok(Rehearser::Stats(StatsPredictor {
                blocks,
                head: Linear {
                    weight: hw,
                    bias: hb,
                },
            }))
        }
        other => Err(Error::CheckpointKind {
            expected: "a rehearser kind".into(),
            found: other.into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        crate::rng::stream(77, "ckpt", 0)
    }

    #[test]
    fn reid_round_trip_is_bit_exact() {
        let mut r = rng();
        let model = ReidModel::new(32, 7, &mut r);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_reid_model(&model, "abc", &path).unwrap();
        let back = load_reid_model(&path).unwrap();
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn rehearser_round_trips() {
        let mut r = rng();
        let dir = tempfile::tempdir().unwrap();
        let cases = vec![
            Rehearser::Kernel(KernelPredictor::new(3, 2, &mut r).unwrap()),
            Rehearser::Shared(SharedKernel::new(3).unwrap()),
            Rehearser::Stats(StatsPredictor::new(&mut r)),
        ];
        for (i, reh) in cases.iter().enumerate() {
            let path = dir.path().join(format!("r{i}.ckpt"));
            save_rehearser(reh, "h", &path).unwrap();
            let back = load_rehearser(&path).unwrap();
            let params_a: Vec<&Tensor> = match reh {
                Rehearser::Kernel(n) => n.params(),
                Rehearser::Shared(s) => s.params(),
                Rehearser::Stats(s) => s.params(),
            };
            let params_b: Vec<&Tensor> = match &back {
                Rehearser::Kernel(n) => n.params(),
                Rehearser::Shared(s) => s.params(),
                Rehearser::Stats(s) => s.params(),
            };
            for (a, b) in params_a.iter().zip(params_b) {
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn magic_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT!xxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_reid_model(&path),
            Err(Error::CheckpointMagic)
        ));
    }

    #[test]
    fn truncated_payload_is_distinct() {
        let mut r = rng();
        let model = ReidModel::new(16, 3, &mut r);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_reid_model(&model, "h", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_reid_model(&path),
            Err(Error::CheckpointTruncated(_))
        ));
    }

    #[test]
    fn kind_mismatch_is_distinct() {
        let mut r = rng();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.ckpt");
        save_rehearser(
            &Rehearser::Kernel(KernelPredictor::new(3, 1, &mut r).unwrap()),
            "h",
            &path,
        )
        .unwrap();
        assert!(matches!(
            load_reid_model(&path),
            Err(Error::CheckpointKind { .. })
        ));
    }

    #[test]
    fn flipped_payload_byte_still_loads() {
        // Documented limitation: no checksum, so a value flip survives as
        // long as lengths and shapes are intact.
        let mut r = rng();
        let model = ReidModel::new(16, 3, &mut r);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        save_reid_model(&model, "h", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_reid_model(&path).is_ok());
    }
}
