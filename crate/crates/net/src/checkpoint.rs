//! Binary checkpoint container.
//!
//! Layout: magic `UIQA`, format version u16, fusion-kind tag u8, class
//! count u16, then a sequence of named tensors until EOF. Each tensor is
//! name length (u16) + UTF-8 name, rank (u8), extents as u32, and the
//! payload as little-endian f32. All integers little-endian. Writing a
//! just-read file reproduces it byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;
use uniqa_tensor::{Scalar, Tensor};

use crate::backbone::Backbone;
use crate::model::UnpairedIqaModel;
use crate::params::{
    BottleneckParams, ConvParams, FebParams, FusionKind, FusionParams, LinearParams, MafeParams,
};

pub const MAGIC: [u8; 4] = *b"UIQA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown fusion tag {0}")]
    UnknownFusionTag(u8),
    #[error("malformed tensor record: {0}")]
    Malformed(String),
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has dims {got:?}, expected {expected:?}")]
    DimsMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint holds unexpected tensor `{0}`")]
    Unexpected(String),
}

#[derive(Debug, Clone)]
pub struct Container {
    pub fusion: FusionKind,
    pub class_count: u16,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn write_container(path: &Path, container: &Container) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[container.fusion.tag()])?;
    w.write_all(&container.class_count.to_le_bytes())?;
    for (name, tensor) in &container.tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[tensor.rank() as u8])?;
        for &d in tensor.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u16(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let fusion = FusionKind::from_tag(tag[0]).ok_or(CheckpointError::UnknownFusionTag(tag[0]))?;
    let class_count = read_u16(&mut r)?;
    let mut tensors = Vec::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name not UTF-8: {e}")))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{name}` has a zero extent"
            )));
        }
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(Container {
        fusion,
        class_count,
        tensors,
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Serialize a model's parameters in registry order.
pub fn save_model<S: Scalar>(
    path: &Path,
    model: &UnpairedIqaModel<S>,
) -> Result<(), CheckpointError> {
    let tensors = model
        .named_params()
        .into_iter()
        .map(|(name, t)| (name, t.cast::<f32>()))
        .collect();
    write_container(
        path,
        &Container {
            fusion: model.fusion_kind,
            class_count: model.class_count as u16,
            tensors,
        },
    )
}

/// Serialize a standalone backbone (its class count rides in the header).
pub fn save_backbone<S: Scalar>(
    path: &Path,
    backbone: &Backbone<S>,
) -> Result<(), CheckpointError> {
    let mut named: Vec<(String, &Tensor<S>)> = Vec::new();
    backbone.collect_named(&mut named);
    let tensors = named
        .into_iter()
        .map(|(name, t)| (name, t.cast::<f32>()))
        .collect();
    write_container(
        path,
        &Container {
            fusion: FusionKind::None,
            class_count: backbone.class_count as u16,
            tensors,
        },
    )
}

struct TensorMap {
    entries: Vec<(String, Tensor<f32>)>,
    taken: Vec<bool>,
}

impl TensorMap {
    fn new(entries: Vec<(String, Tensor<f32>)>) -> Self {
        let taken = vec![false; entries.len()];
        TensorMap { entries, taken }
    }

    fn take<S: Scalar>(&mut self, name: &str, expected: &[usize]) -> Result<Tensor<S>, CheckpointError> {
        for (i, (n, t)) in self.entries.iter().enumerate() {
            if n == name && !self.taken[i] {
                if t.dims() != expected {
                    return Err(CheckpointError::DimsMismatch {
                        name: name.to_string(),
                        got: t.dims().to_vec(),
                        expected: expected.to_vec(),
                    });
                }
                self.taken[i] = true;
                return Ok(t.cast::<S>().with_grad());
            }
        }
        Err(CheckpointError::Missing(name.to_string()))
    }

    fn dims_of(&self, name: &str) -> Result<&[usize], CheckpointError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.dims())
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    fn ensure_drained(&self) -> Result<(), CheckpointError> {
        for (i, (n, _)) in self.entries.iter().enumerate() {
            if !self.taken[i] {
                return Err(CheckpointError::Unexpected(n.clone()));
            }
        }
        Ok(())
    }
}

fn take_conv<S: Scalar>(
    map: &mut TensorMap,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<ConvParams<S>, CheckpointError> {
    Ok(ConvParams {
        weight: map.take(&format!("{prefix}.weight"), &[c_out, c_in, k, k])?,
        bias: map.take(&format!("{prefix}.bias"), &[c_out])?,
    })
}

fn take_linear<S: Scalar>(
    map: &mut TensorMap,
    prefix: &str,
    out: usize,
    inp: usize,
) -> Result<LinearParams<S>, CheckpointError> {
    Ok(LinearParams {
        weight: map.take(&format!("{prefix}.weight"), &[out, inp])?,
        bias: map.take(&format!("{prefix}.bias"), &[out])?,
    })
}

fn take_feb<S: Scalar>(
    map: &mut TensorMap,
    prefix: &str,
    c_in: usize,
    width: usize,
) -> Result<FebParams<S>, CheckpointError> {
    Ok(FebParams {
        conv1: take_conv(map, &format!("{prefix}.conv1"), width, c_in, 3)?,
        conv2: take_conv(map, &format!("{prefix}.conv2"), width, width, 3)?,
    })
}

fn backbone_from_map<S: Scalar>(
    map: &mut TensorMap,
    class_count: usize,
) -> Result<Backbone<S>, CheckpointError> {
    // widths are recovered from recorded extents
    let mut widths = Vec::new();
    let mut i = 0;
    while map.contains(&format!("backbone.feb.{i}.conv2.weight")) {
        widths.push(map.dims_of(&format!("backbone.feb.{i}.conv2.weight"))?[0]);
        i += 1;
    }
    if widths.is_empty() {
        return Err(CheckpointError::Missing("backbone.feb.0.conv2.weight".into()));
    }
    let stem = take_conv(map, "backbone.stem", widths[0], 3, 3)?;
    let mut febs = Vec::with_capacity(widths.len());
    let mut in_ch = widths[0];
    for (i, &w) in widths.iter().enumerate() {
        febs.push(take_feb(map, &format!("backbone.feb.{i}"), in_ch, w)?);
        in_ch = w;
    }
    let classifier = take_linear(map, "backbone.classifier", class_count, *widths.last().unwrap())?;
    Ok(Backbone {
        widths,
        class_count,
        stem,
        febs,
        classifier,
    })
}

/// Rebuild a model from a checkpoint. Stage widths are recovered from the
/// recorded tensor extents; backbone and score head are restored when
/// present. Unknown or leftover tensors are an error.
pub fn load_model<S: Scalar>(path: &Path) -> Result<UnpairedIqaModel<S>, CheckpointError> {
    let container = read_container(path)?;
    let fusion_kind = container.fusion;
    let class_count = container.class_count as usize;
    let mut map = TensorMap::new(container.tensors);

    let mut stage_widths = Vec::new();
    for i in 0..4 {
        stage_widths.push(map.dims_of(&format!("feb_d.{i}.conv2.weight"))?[0]);
    }
    let stem_d = take_conv(&mut map, "stem_d", stage_widths[0], 3, 3)?;
    let mut feb_d = Vec::with_capacity(4);
    let mut in_ch = stage_widths[0];
    for (i, &w) in stage_widths.iter().enumerate() {
        feb_d.push(take_feb(&mut map, &format!("feb_d.{i}"), in_ch, w)?);
        in_ch = w;
    }
    let (stem_er, feb_er) = if fusion_kind.uses_reference() {
        let stem = take_conv(&mut map, "stem_er", stage_widths[0], 3, 3)?;
        let mut febs = Vec::with_capacity(4);
        let mut in_ch = stage_widths[0];
        for (i, &w) in stage_widths.iter().enumerate() {
            febs.push(take_feb(&mut map, &format!("feb_er.{i}"), in_ch, w)?);
            in_ch = w;
        }
        (Some(stem), febs)
    } else {
        (None, Vec::new())
    };
    let mut fusion = Vec::with_capacity(4);
    for (i, &w) in stage_widths.iter().enumerate() {
        let params = match fusion_kind {
            FusionKind::None => FusionParams::None,
            FusionKind::Cosine => FusionParams::Cosine,
            FusionKind::Bottleneck => FusionParams::Bottleneck(BottleneckParams {
                fuse: take_conv(&mut map, &format!("fusion.{i}.fuse"), w, 2 * w, 1)?,
            }),
            FusionKind::Mafe => FusionParams::Mafe(MafeParams {
                pre_d: take_conv(&mut map, &format!("fusion.{i}.pre_d"), w, w, 1)?,
                pre_er: take_conv(&mut map, &format!("fusion.{i}.pre_er"), w, w, 1)?,
                squeeze: take_linear(&mut map, &format!("fusion.{i}.squeeze"), w, 2 * w)?,
            }),
        };
        fusion.push(params);
    }
    let last = *stage_widths.last().unwrap();
    let classifier = take_linear(&mut map, "classifier", class_count, last)?;

    let backbone = if map.contains("backbone.stem.weight") {
        // the embedded backbone's own class count is recoverable from its head
        let bb_classes = map.dims_of("backbone.classifier.weight")?[0];
        Some(backbone_from_map(&mut map, bb_classes)?)
    } else {
        None
    };
    let score_head = if map.contains("score_head.weight") {
        let backbone_channels = backbone
            .as_ref()
            .map(|b| b.feature_channels())
            .ok_or_else(|| CheckpointError::Missing("backbone.stem.weight".into()))?;
        Some(take_linear(&mut map, "score_head", 1, last * backbone_channels)?)
    } else {
        None
    };
    map.ensure_drained()?;

    Ok(UnpairedIqaModel {
        fusion_kind,
        class_count,
        stage_widths,
        stem_d,
        feb_d,
        stem_er,
        feb_er,
        fusion,
        classifier,
        score_head,
        backbone,
    })
}

/// Rebuild a standalone backbone checkpoint.
pub fn load_backbone<S: Scalar>(path: &Path) -> Result<Backbone<S>, CheckpointError> {
    let container = read_container(path)?;
    let mut map = TensorMap::new(container.tensors);
    let backbone = backbone_from_map(&mut map, container.class_count as usize)?;
    map.ensure_drained()?;
    Ok(backbone)
}

/// Write arbitrary named tensors in the container format (feature dumps).
pub fn write_named_tensors<S: Scalar>(
    path: &Path,
    fusion: FusionKind,
    class_count: u16,
    tensors: &[(String, Tensor<S>)],
) -> Result<(), CheckpointError> {
    let tensors = tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.cast::<f32>()))
        .collect();
    write_container(
        path,
        &Container {
            fusion,
            class_count,
            tensors,
        },
    )
}
