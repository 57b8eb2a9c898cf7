//! `.sgm.json` manifest + `.sgm.bin` blob model container.
//!
//! The blob is a flat sequence of little-endian f32 values. Each layer owns
//! one contiguous byte range, laid out as:
//!
//! | kind                 | payload                                                   |
//! |----------------------|-----------------------------------------------------------|
//! | `conv2d`             | weights `(C_out, C_in, k, k)`, then bias `[C_out]` if any |
//! | `fc`                 | weights `(C_out, C_in)`, then bias `[C_out]` if any       |
//! | `groupconv`          | each group's block `(F_i, C_i, k, k)` in group order, then bias |
//! | `affine_passthrough` | scale `[C]`, then shift `[C]`                             |
//!
//! Masks are hex-encoded bitsets, row-major over `C_out x C_in`, bit `b` stored
//! in byte `b / 8` at position `b % 8` (LSB first), set = connection alive.
//! Groupings are integer assignment arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deploy::{GroupConvPlan, PlanGroup};
use crate::error::{Error, Result};
use crate::grouping::FilterGroups;
use crate::model::{Activation, AffineLayer, ConvLayer, FcLayer, GroupConvLayer, Layer, LayerKind, LayerOp, Model};
use crate::pruning::PruneMask;
use crate::tensor::{ConvWeights, FcWeights, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub masks: BTreeMap<String, MaskRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groupings: BTreeMap<String, GroupingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub bias: bool,
    pub blob_offset: u64,
    pub blob_length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouping_ref: Option<String>,
    pub compress: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<PlanGroup>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_perm: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_fc: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub rows: usize,
    pub cols: usize,
    pub bits: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingRecord {
    pub num_groups: usize,
    pub assignment: Vec<usize>,
}

impl MaskRecord {
    pub fn encode(mask: &PruneMask) -> Self {
        let mut bytes = vec![0u8; mask.total().div_ceil(8)];
        for (b, &kept) in mask.kept().iter().enumerate() {
            if kept {
                bytes[b / 8] |= 1 << (b % 8);
            }
        }
        Self {
            rows: mask.rows(),
            cols: mask.cols(),
            bits: hex::encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<PruneMask> {
        let bytes = hex::decode(&self.bits).map_err(|e| Error::format("mask bitset", e.to_string()))?;
        let total = self.rows * self.cols;
        if bytes.len() != total.div_ceil(8) {
            return Err(Error::format(
                "mask bitset",
                format!("{} bytes for a {}x{} mask", bytes.len(), self.rows, self.cols),
            ));
        }
        let kept = (0..total).map(|b| bytes[b / 8] >> (b % 8) & 1 == 1).collect();
        PruneMask::from_kept(self.rows, self.cols, kept)
    }
}

/// Manifest path `x.sgm.json` -> blob path `x.sgm.bin`.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    let s = manifest.to_string_lossy();
    match s.strip_suffix(".json") {
        Some(stem) => PathBuf::from(format!("{stem}.bin")),
        None => manifest.with_extension("bin"),
    }
}

/// `(stem.sgm.json, stem.sgm.bin)`.
pub fn paths_for_stem(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.to_string_lossy();
    (PathBuf::from(format!("{s}.sgm.json")), PathBuf::from(format!("{s}.sgm.bin")))
}

fn push_f32(blob: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a model to manifest text and blob bytes.
pub fn encode_model(model: &Model) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut masks = BTreeMap::new();
    let mut groupings = BTreeMap::new();
    for l in &model.layers {
        let offset = blob.len() as u64;
        let mut rec = LayerRecord {
            name: l.name.clone(),
            kind: l.kind(),
            c_out: 0,
            c_in: 0,
            kernel: 1,
            stride: 1,
            padding: 0,
            activation: l.activation,
            bias: l.bias().is_some(),
            blob_offset: offset,
            blob_length: 0,
            mask_ref: None,
            grouping_ref: None,
            compress: l.compress,
            groups: None,
            output_perm: None,
            from_fc: None,
        };
        match &l.op {
            LayerOp::Conv2d(c) => {
                rec.c_out = c.weights.c_out();
                rec.c_in = c.weights.c_in();
                rec.kernel = c.weights.kernel();
                rec.stride = c.weights.stride;
                rec.padding = c.weights.padding;
                push_f32(&mut blob, c.weights.values.data());
            }
            LayerOp::Fc(f) => {
                rec.c_out = f.weights.c_out();
                rec.c_in = f.weights.c_in();
                push_f32(&mut blob, f.weights.values.data());
            }
            LayerOp::GroupConv(g) => {
                rec.c_out = g.plan.c_out;
                rec.c_in = g.plan.c_in;
                rec.kernel = g.plan.kernel;
                rec.stride = g.stride;
                rec.padding = g.padding;
                rec.groups = Some(g.plan.groups.clone());
                rec.output_perm = Some(g.plan.output_perm.clone());
                rec.from_fc = Some(g.from_fc);
                for b in &g.blocks {
                    push_f32(&mut blob, b.data());
                }
            }
            LayerOp::Affine(a) => {
                rec.c_out = a.scale.len();
                rec.c_in = a.scale.len();
                push_f32(&mut blob, &a.scale);
                push_f32(&mut blob, &a.shift);
            }
        }
        if let Some(b) = l.bias() {
            push_f32(&mut blob, b.data());
        }
        rec.blob_length = blob.len() as u64 - offset;
        if let Some(mask) = l.mask().filter(|m| !m.is_all_kept()) {
            masks.insert(l.name.clone(), MaskRecord::encode(mask));
            rec.mask_ref = Some(l.name.clone());
        }
        if let Some(g) = &l.groups {
            groupings.insert(
                l.name.clone(),
                GroupingRecord {
                    num_groups: g.num_groups(),
                    assignment: g.assignment().to_vec(),
                },
            );
            rec.grouping_ref = Some(l.name.clone());
        }
        layers.push(rec);
    }
    if masks.len() + groupings.len() > 0 {
        let mut names: Vec<&str> = model.layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("layer names must be unique to persist masks".into()));
        }
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape.clone(),
        layers,
        masks,
        groupings,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: PathBuf::from("<manifest>"),
        source,
    })?;
    text.push('\n');
    Ok((text, blob))
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn expected_floats(rec: &LayerRecord) -> Result<usize> {
    let bias = if rec.bias { rec.c_out } else { 0 };
    let kk = rec.kernel * rec.kernel;
    Ok(match rec.kind {
        LayerKind::Conv2d => rec.c_out * rec.c_in * kk + bias,
        LayerKind::Fc => rec.c_out * rec.c_in + bias,
        LayerKind::AffinePassthrough => 2 * rec.c_out,
        LayerKind::GroupConv => {
            let groups = rec
                .groups
                .as_ref()
                .ok_or_else(|| Error::format("manifest", format!("groupconv `{}` has no groups", rec.name)))?;
            groups.iter().map(|g| g.filters.len() * g.channels.len() * kk).sum::<usize>() + bias
        }
    })
}

/// Check that every layer's range lies inside the blob and that ranges are disjoint.
fn check_ranges(layers: &[LayerRecord], blob_len: u64) -> Result<()> {
    for rec in layers {
        let end = rec.blob_offset.checked_add(rec.blob_length).unwrap_or(u64::MAX);
        if end > blob_len {
            return Err(Error::TruncatedBlob {
                layer: rec.name.clone(),
                offset: rec.blob_offset,
                end,
                blob_len,
            });
        }
    }
    let mut order: Vec<&LayerRecord> = layers.iter().filter(|r| r.blob_length > 0).collect();
    order.sort_by_key(|r| (r.blob_offset, r.blob_length));
    for w in order.windows(2) {
        if w[0].blob_offset + w[0].blob_length > w[1].blob_offset {
            return Err(Error::OverlappingBlob {
                first: w[0].name.clone(),
                second: w[1].name.clone(),
            });
        }
    }
    Ok(())
}

fn decode_layer(rec: &LayerRecord, data: Vec<f32>, manifest: &ModelManifest) -> Result<Layer> {
    let bad = |detail: String| Error::format("manifest", format!("layer `{}`: {detail}", rec.name));
    let (body, bias) = if rec.bias && rec.kind != LayerKind::AffinePassthrough {
        let split = data.len() - rec.c_out;
        (data[..split].to_vec(), Some(Tensor::new(vec![rec.c_out], data[split..].to_vec())?))
    } else {
        (data, None)
    };
    let mask = match &rec.mask_ref {
        Some(r) => {
            let m = manifest
                .masks
                .get(r)
                .ok_or_else(|| bad(format!("unknown mask_ref `{r}`")))?
                .decode()?;
            if m.rows() != rec.c_out || m.cols() != rec.c_in {
                return Err(bad(format!("mask is {}x{}", m.rows(), m.cols())));
            }
            Some(m)
        }
        None => None,
    };
    let groups = match &rec.grouping_ref {
        Some(r) => {
            let g = manifest
                .groupings
                .get(r)
                .ok_or_else(|| bad(format!("unknown grouping_ref `{r}`")))?;
            if g.assignment.len() != rec.c_out {
                return Err(bad(format!("grouping assigns {} filters", g.assignment.len())));
            }
            Some(FilterGroups::new(g.num_groups, g.assignment.clone())?)
        }
        None => None,
    };
    let k = rec.kernel;
    let op = match rec.kind {
        LayerKind::Conv2d => {
            let w = ConvWeights::new(Tensor::new(vec![rec.c_out, rec.c_in, k, k], body)?, rec.stride, rec.padding)?;
            LayerOp::Conv2d(ConvLayer {
                weights: w,
                bias,
                mask: mask.unwrap_or_else(|| PruneMask::all_kept(rec.c_out, rec.c_in)),
            })
        }
        LayerKind::Fc => LayerOp::Fc(FcLayer {
            weights: FcWeights::new(Tensor::new(vec![rec.c_out, rec.c_in], body)?)?,
            bias,
            mask: mask.unwrap_or_else(|| PruneMask::all_kept(rec.c_out, rec.c_in)),
        }),
        LayerKind::GroupConv => {
            let groups = rec.groups.clone().unwrap_or_default();
            let plan = GroupConvPlan {
                c_out: rec.c_out,
                c_in: rec.c_in,
                kernel: k,
                output_perm: rec.output_perm.clone().ok_or_else(|| bad("missing output_perm".into()))?,
                groups,
            };
            plan.validate()?;
            let mut blocks = Vec::with_capacity(plan.groups.len());
            let mut at = 0;
            for g in &plan.groups {
                let len = g.filters.len() * g.channels.len() * k * k;
                blocks.push(Tensor::new(vec![g.filters.len(), g.channels.len(), k, k], body[at..at + len].to_vec())?);
                at += len;
            }
            LayerOp::GroupConv(GroupConvLayer {
                plan,
                blocks,
                bias,
                stride: rec.stride,
                padding: rec.padding,
                from_fc: rec.from_fc.unwrap_or(false),
            })
        }
        LayerKind::AffinePassthrough => {
            let c = rec.c_out;
            LayerOp::Affine(AffineLayer {
                scale: body[..c].to_vec(),
                shift: body[c..].to_vec(),
            })
        }
    };
    Ok(Layer {
        name: rec.name.clone(),
        op,
        activation: rec.activation,
        compress: rec.compress,
        groups,
    })
}

/// Rebuild a model from manifest text and blob bytes.
pub fn decode_model(manifest_text: &str, blob: &[u8]) -> Result<Model> {
    let manifest: ModelManifest = serde_json::from_str(manifest_text).map_err(|source| Error::Json {
        path: PathBuf::from("<manifest>"),
        source,
    })?;
    decode_manifest(&manifest, blob)
}

pub fn decode_manifest(manifest: &ModelManifest, blob: &[u8]) -> Result<Model> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    check_ranges(&manifest.layers, blob.len() as u64)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for rec in &manifest.layers {
        let floats = expected_floats(rec)?;
        if rec.blob_length != 4 * floats as u64 {
            return Err(Error::format(
                "manifest",
                format!(
                    "layer `{}` declares {} blob bytes, its shape needs {}",
                    rec.name,
                    rec.blob_length,
                    4 * floats
                ),
            ));
        }
        let start = rec.blob_offset as usize;
        let data = read_f32s(&blob[start..start + rec.blob_length as usize]);
        layers.push(decode_layer(rec, data, manifest)?);
    }
    Model::new(layers, manifest.input_shape.clone())
}

/// Load a model from its manifest and blob files. Masks default to all-kept.
pub fn load_model(manifest_path: &Path, blob_path: &Path) -> Result<Model> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    decode_manifest(&manifest, &blob)
}

/// Write a model. Identical models produce byte-identical files.
pub fn save_model(model: &Model, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let (text, blob) = encode_model(model)?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    fs::write(blob_path, blob).map_err(|e| Error::io(blob_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::toy_cnn;

    #[test]
    fn empty_model_has_empty_layer_array() {
        let (text, blob) = encode_model(&Model::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["layers"], serde_json::json!([]));
        assert!(blob.is_empty());
        assert_eq!(decode_model(&text, &blob).unwrap(), Model::default());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = toy_cnn(10, 3).unwrap();
        let (text, blob) = encode_model(&m).unwrap();
        let back = decode_model(&text, &blob).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back).unwrap(), (text, blob));
    }

    #[test]
    fn offset_past_blob_end_is_truncation() {
        let m = toy_cnn(10, 3).unwrap();
        let (text, blob) = encode_model(&m).unwrap();
        let mut manifest: ModelManifest = serde_json::from_str(&text).unwrap();
        manifest.layers[2].blob_offset = blob.len() as u64;
        assert!(matches!(decode_manifest(&manifest, &blob), Err(Error::TruncatedBlob { .. })));
        assert!(matches!(decode_model(&text, &blob[..blob.len() - 4]), Err(Error::TruncatedBlob { .. })));
    }

    #[test]
    fn overlapping_ranges_and_bad_version() {
        let m = toy_cnn(10, 3).unwrap();
        let (text, blob) = encode_model(&m).unwrap();
        let mut manifest: ModelManifest = serde_json::from_str(&text).unwrap();
        manifest.layers[1].blob_offset -= 4;
        assert!(matches!(decode_manifest(&manifest, &blob), Err(Error::OverlappingBlob { .. })));

        let mut manifest: ModelManifest = serde_json::from_str(&text).unwrap();
        manifest.format_version = 99;
        assert!(matches!(
            decode_manifest(&manifest, &blob),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn mask_bitset_layout() {
        let mut m = PruneMask::all_kept(3, 3);
        m.kill(0, 1);
        m.kill(2, 2);
        let rec = MaskRecord::encode(&m);
        // bits 0..8 = 1,0,1,1,1,1,1,1 -> 0xfd; bit 8 dead -> 0x00
        assert_eq!(rec.bits, "fd00");
        assert_eq!(rec.decode().unwrap(), m);
    }

    #[test]
    fn blob_path_derivation() {
        assert_eq!(blob_path_for(Path::new("a/toy.sgm.json")), PathBuf::from("a/toy.sgm.bin"));
        assert_eq!(paths_for_stem(Path::new("out/p")).1, PathBuf::from("out/p.sgm.bin"));
    }
}
