//! Model bundle: a directory holding `manifest.json` plus little-endian
//! `f32.bin` and `i32.bin` blobs referenced by offset and length.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{DecoderModel, RoiConfig};
use crate::feat_learn::{LevelFeatureModel, LntModel};
use crate::gbdt::{GbdtModel, Tree};
use crate::gusl::{GuslModel, Head};
use crate::pipeline::{CascadeModel, PipelineConfig, ProfileGrids, FORMAT_VERSION};
use crate::saab::{CwSaabLevel, EncoderModel, ParentKernel, SaabKernel, WINDOW};
use crate::volume::Shape3;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const F32_BLOB: &str = "f32.bin";
pub const I32_BLOB: &str = "i32.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Span {
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobInfo {
    file: String,
    elements: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelEntry {
    dim: usize,
    anchors: Span,
    bias: Span,
    energy: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParentEntry {
    parent: usize,
    keep: Vec<usize>,
    energies: Vec<f64>,
    kernel: KernelEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct LevelEntry {
    input_channels: usize,
    /// `(parent, kernel channel)` per output channel, for inspection.
    channel_tree: Vec<(usize, usize)>,
    parents: Vec<ParentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderEntry {
    input_shape: Shape3,
    levels: Vec<LevelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TreeEntry {
    nodes: usize,
    /// `feature ‖ left ‖ right`.
    links: Span,
    /// `threshold ‖ value`.
    scalars: Span,
}

#[derive(Debug, Serialize, Deserialize)]
struct GbdtEntry {
    n_features: usize,
    base_score: f64,
    learning_rate: f64,
    train_mse: Vec<f64>,
    trees: Vec<TreeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureEntry {
    channels: usize,
    selected: Vec<usize>,
    lnt_input_dims: usize,
    lnt_subsets: Vec<Vec<usize>>,
    /// Per LNT feature: subset weights followed by the intercept.
    lnt_weights: Span,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadEntry {
    features: Vec<FeatureEntry>,
    roi: RoiConfig,
    initial: GbdtEntry,
    correctors: Vec<Option<GbdtEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    profile: String,
    grids: ProfileGrids,
    config: PipelineConfig,
    f32_blob: BlobInfo,
    i32_blob: BlobInfo,
    stage1_encoder: EncoderEntry,
    stage1_head: HeadEntry,
    stage2_encoder: EncoderEntry,
    gland: HeadEntry,
    tz: Option<HeadEntry>,
    pz: Option<HeadEntry>,
}

#[derive(Default)]
struct Writer {
    f: Vec<f32>,
    i: Vec<i32>,
}

impl Writer {
    fn f32s(&mut self, v: impl IntoIterator<Item = f32>) -> Span {
        let offset = self.f.len();
        self.f.extend(v);
        Span { offset, len: self.f.len() - offset }
    }

    fn i32s(&mut self, v: impl IntoIterator<Item = i32>) -> Span {
        let offset = self.i.len();
        self.i.extend(v);
        Span { offset, len: self.i.len() - offset }
    }

    fn encoder(&mut self, e: &EncoderModel) -> EncoderEntry {
        EncoderEntry {
            input_shape: e.input_shape,
            levels: e
                .levels
                .iter()
                .map(|l| LevelEntry {
                    input_channels: l.input_channels,
                    channel_tree: l.channel_tree(),
                    parents: l
                        .parents
                        .iter()
                        .map(|p| ParentEntry {
                            parent: p.parent,
                            keep: p.keep.clone(),
                            energies: p.energies.clone(),
                            kernel: KernelEntry {
                                dim: p.kernel.input_dim(),
                                anchors: self.f32s(p.kernel.anchors().iter().copied()),
                                bias: self.f32s(p.kernel.bias().iter().copied()),
                                energy: p.kernel.energy().to_vec(),
                            },
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn gbdt(&mut self, m: &GbdtModel) -> GbdtEntry {
        GbdtEntry {
            n_features: m.n_features,
            base_score: m.base_score,
            learning_rate: m.learning_rate,
            train_mse: m.train_mse.clone(),
            trees: m
                .trees
                .iter()
                .map(|t| TreeEntry {
                    nodes: t.len(),
                    links: self.i32s(t.feature.iter().chain(&t.left).chain(&t.right).copied()),
                    scalars: self.f32s(t.threshold.iter().chain(&t.value).copied()),
                })
                .collect(),
        }
    }

    fn head(&mut self, h: &Head) -> HeadEntry {
        HeadEntry {
            features: h
                .features
                .iter()
                .map(|f| FeatureEntry {
                    channels: f.channels,
                    selected: f.selected.clone(),
                    lnt_input_dims: f.lnt.input_dims,
                    lnt_subsets: f.lnt.subsets.clone(),
                    lnt_weights: self.f32s(f.lnt.weights.iter().flatten().map(|&w| w as f32)),
                })
                .collect(),
            roi: h.decoder.roi.clone(),
            initial: self.gbdt(&h.decoder.initial),
            correctors: h.decoder.correctors.iter().map(|c| c.as_ref().map(|m| self.gbdt(m))).collect(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `model` into directory `dir`, creating it if needed. LNT weights
/// are stored as `f32`; models produced by training already carry that
/// precision, so the round trip is exact.
pub fn save_model(model: &CascadeModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Writer::default();
    let stage1_encoder = w.encoder(&model.stage1.encoder);
    let stage1_head = w.head(&model.stage1.head);
    let stage2_encoder = w.encoder(&model.stage2_encoder);
    let gland = w.head(&model.gland);
    let tz = model.tz.as_ref().map(|h| w.head(h));
    let pz = model.pz.as_ref().map(|h| w.head(h));

    let fbytes: Vec<u8> = w.f.iter().flat_map(|v| v.to_le_bytes()).collect();
    let ibytes: Vec<u8> = w.i.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        format_version: model.format_version,
        profile: model.config.profile.clone(),
        grids: model.grids,
        config: model.config.clone(),
        f32_blob: BlobInfo { file: F32_BLOB.into(), elements: w.f.len(), sha256: sha256_hex(&fbytes) },
        i32_blob: BlobInfo { file: I32_BLOB.into(), elements: w.i.len(), sha256: sha256_hex(&ibytes) },
        stage1_encoder,
        stage1_head,
        stage2_encoder,
        gland,
        tz,
        pz,
    };
    for (name, bytes) in [(F32_BLOB, &fbytes), (I32_BLOB, &ibytes)] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
}

struct Reader {
    f: Vec<f32>,
    i: Vec<i32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

fn slice<'a, T>(data: &'a [T], s: Span, what: &str) -> Result<&'a [T]> {
    s.offset
        .checked_add(s.len)
        .and_then(|end| data.get(s.offset..end))
        .ok_or_else(|| corrupt(format!("{what} span {}+{} outside blob of {}", s.offset, s.len, data.len())))
}

impl Reader {
    fn encoder(&self, e: &EncoderEntry) -> Result<EncoderModel> {
        let mut levels = Vec::with_capacity(e.levels.len());
        let mut channels = 1;
        for l in &e.levels {
            if l.input_channels != channels {
                return Err(corrupt(format!("encoder level expects {} channels, previous level gives {channels}", l.input_channels)));
            }
            let mut parents = Vec::with_capacity(l.parents.len());
            for p in &l.parents {
                let k = &p.kernel;
                if k.dim != WINDOW {
                    return Err(corrupt(format!("saab kernel input size {} (expected {WINDOW})", k.dim)));
                }
                let kernel = SaabKernel::from_parts(
                    k.dim,
                    slice(&self.f, k.anchors, "anchors")?.to_vec(),
                    slice(&self.f, k.bias, "bias")?.to_vec(),
                    k.energy.clone(),
                )
                .map_err(|e| corrupt(e.to_string()))?;
                if p.parent >= l.input_channels
                    || p.keep.len() != p.energies.len()
                    || p.keep.iter().any(|&c| c >= kernel.channels())
                {
                    return Err(corrupt("encoder channel tree inconsistent with its kernels"));
                }
                parents.push(ParentKernel { parent: p.parent, kernel, keep: p.keep.clone(), energies: p.energies.clone() });
            }
            let level = CwSaabLevel { input_channels: l.input_channels, parents };
            channels = level.output_channels();
            levels.push(level);
        }
        Ok(EncoderModel { input_shape: e.input_shape, levels })
    }

    fn gbdt(&self, g: &GbdtEntry) -> Result<GbdtModel> {
        let trees = g
            .trees
            .iter()
            .map(|t| {
                let links = slice(&self.i, t.links, "tree links")?;
                let scalars = slice(&self.f, t.scalars, "tree scalars")?;
                if links.len() != 3 * t.nodes || scalars.len() != 2 * t.nodes {
                    return Err(corrupt("tree array lengths disagree with node count"));
                }
                let n = t.nodes;
                Ok(Tree {
                    feature: links[..n].to_vec(),
                    left: links[n..2 * n].to_vec(),
                    right: links[2 * n..].to_vec(),
                    threshold: scalars[..n].to_vec(),
                    value: scalars[n..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GbdtModel::from_parts(g.n_features, g.base_score, g.learning_rate, trees, g.train_mse.clone())
    }

    fn head(&self, h: &HeadEntry, enc: &EncoderModel) -> Result<Head> {
        if h.features.len() != enc.levels.len() || h.correctors.len() != enc.levels.len() {
            return Err(corrupt("head level count differs from its encoder"));
        }
        let mut features = Vec::with_capacity(h.features.len());
        for (f, level) in h.features.iter().zip(&enc.levels) {
            if f.channels != level.output_channels() || f.lnt_input_dims != 9 * f.channels {
                return Err(corrupt("feature model channel count differs from its encoder level"));
            }
            let flat = slice(&self.f, f.lnt_weights, "lnt weights")?;
            let mut weights = Vec::with_capacity(f.lnt_subsets.len());
            let mut at = 0;
            for s in &f.lnt_subsets {
                let w = flat.get(at..at + s.len() + 1).ok_or_else(|| corrupt("lnt weight blob too short"))?;
                weights.push(w.iter().map(|&v| f64::from(v)).collect());
                at += s.len() + 1;
            }
            if at != flat.len() {
                return Err(corrupt("lnt weight blob has trailing values"));
            }
            let lnt = LntModel::from_parts(f.lnt_input_dims, f.lnt_subsets.clone(), weights)?;
            let total = f.lnt_input_dims + lnt.k();
            if f.selected.iter().any(|&d| d >= total) {
                return Err(corrupt("selected feature index out of range"));
            }
            features.push(LevelFeatureModel { channels: f.channels, lnt, selected: f.selected.clone() });
        }
        let initial = self.gbdt(&h.initial)?;
        let correctors = h.correctors.iter().map(|c| c.as_ref().map(|g| self.gbdt(g)).transpose()).collect::<Result<Vec<_>>>()?;
        for (l, f) in features.iter().enumerate() {
            let dims = f.output_dims();
            let bad = correctors[l].as_ref().is_some_and(|m| m.n_features != dims)
                || (l + 1 == features.len() && initial.n_features != dims);
            if bad {
                return Err(corrupt("regressor feature count differs from level features"));
            }
        }
        h.roi.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(Head { features, decoder: DecoderModel { roi: h.roi.clone(), initial, correctors } })
    }
}

fn read_blob(dir: &Path, info: &BlobInfo, width: usize) -> Result<Vec<[u8; 4]>> {
    if info.file.contains(['/', '\\']) || info.file == ".." {
        return Err(corrupt(format!("blob name {:?} escapes the bundle", info.file)));
    }
    let p = dir.join(&info.file);
    let bytes = fs::read(&p).map_err(|e| corrupt(format!("cannot read blob {}: {e}", p.display())))?;
    if sha256_hex(&bytes) != info.sha256 {
        return Err(corrupt(format!("checksum mismatch for {}", p.display())));
    }
    if bytes.len() != info.elements * width {
        return Err(corrupt(format!("{} holds {} bytes, expected {}", p.display(), bytes.len(), info.elements * width)));
    }
    Ok(bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

pub fn load_model(dir: &Path) -> Result<CascadeModel> {
    let p = dir.join(MANIFEST);
    let text = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let found = raw.get("format_version").and_then(serde_json::Value::as_u64).ok_or_else(|| corrupt("manifest has no format_version"))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::Incompatible { found: u32::try_from(found).unwrap_or(u32::MAX), expected: FORMAT_VERSION });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let r = Reader {
        f: read_blob(dir, &m.f32_blob, 4)?.into_iter().map(f32::from_le_bytes).collect(),
        i: read_blob(dir, &m.i32_blob, 4)?.into_iter().map(i32::from_le_bytes).collect(),
    };
    if m.config.profile != m.profile || m.config.grids().ok() != Some(m.grids) {
        return Err(corrupt("manifest profile and grids disagree"));
    }
    let enc1 = r.encoder(&m.stage1_encoder)?;
    let enc2 = r.encoder(&m.stage2_encoder)?;
    let head1 = r.head(&m.stage1_head, &enc1)?;
    let gland = r.head(&m.gland, &enc2)?;
    let tz = m.tz.as_ref().map(|h| r.head(h, &enc2)).transpose()?;
    let pz = m.pz.as_ref().map(|h| r.head(h, &enc2)).transpose()?;
    Ok(CascadeModel {
        format_version: m.format_version,
        config: m.config,
        grids: m.grids,
        stage1: GuslModel { encoder: enc1, head: head1 },
        stage2_encoder: enc2,
        gland,
        tz,
        pz,
    })
}
