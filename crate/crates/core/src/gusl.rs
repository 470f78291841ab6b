//! One segmentation head: encoder features, per-level feature learning and
//! the residual-correcting decoder.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, train_decoder, DecoderConfig, DecoderModel, FeatureSource, LevelLog, LevelState};
use crate::feat_learn::{fit_level_features, FeatLearnConfig, LevelFeatureModel};
use crate::saab::{encode, fit_encoder, EncoderConfig, EncoderModel};
use crate::volume::{avg_pool_label, FeatureTensor, ProbMap, Shape3, Volume3D};
use crate::{derive_seed, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuslConfig {
    pub encoder: EncoderConfig,
    pub features: FeatLearnConfig,
    pub decoder: DecoderConfig,
}

/// Learned feature models and decoder for one target structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// Index 0 = finest level.
    pub features: Vec<LevelFeatureModel>,
    pub decoder: DecoderModel,
}

impl Head {
    pub fn param_count(&self) -> usize {
        self.features.iter().map(LevelFeatureModel::param_count).sum::<usize>() + self.decoder.param_count()
    }

    /// Level-1 probability map from the encoder outputs of one volume.
    pub fn predict(&self, encoded: &[FeatureTensor]) -> Result<ProbMap> {
        let mut states = self.trace(encoded)?;
        Ok(states.swap_remove(0).p_r)
    }

    /// Every decoder level, index 0 = finest.
    pub fn trace(&self, encoded: &[FeatureTensor]) -> Result<Vec<LevelState>> {
        let src = Source { encoded: vec![encoded], features: &self.features };
        decode(&self.decoder, &src, 0)
    }
}

struct Source<'a> {
    encoded: Vec<&'a [FeatureTensor]>,
    features: &'a [LevelFeatureModel],
}

impl FeatureSource for Source<'_> {
    fn cases(&self) -> usize {
        self.encoded.len()
    }

    fn levels(&self) -> usize {
        self.features.len()
    }

    fn shape(&self, level: usize) -> Shape3 {
        self.encoded[0][level].shape()
    }

    fn dims(&self, level: usize) -> usize {
        self.features[level].output_dims()
    }

    fn rows(&self, case: usize, level: usize, voxels: &[usize]) -> Result<Vec<f32>> {
        self.features[level].rows(&self.encoded[case][level], voxels)
    }
}

/// Level-wise targets: the label map average-pooled once per level.
pub fn level_targets(label: &ProbMap, levels: usize) -> Vec<ProbMap> {
    let mut out = vec![label.clone()];
    for _ in 1..levels {
        out.push(avg_pool_label(out.last().unwrap(), 1));
    }
    out
}

pub fn encode_all(encoder: &EncoderModel, volumes: &[Volume3D]) -> Result<Vec<Vec<FeatureTensor>>> {
    volumes.par_iter().map(|v| encode(encoder, v)).collect()
}

/// Fits a head on pre-encoded training volumes.
pub fn fit_head(
    encoded: &[Vec<FeatureTensor>],
    labels: &[ProbMap],
    cfg: &GuslConfig,
    seed: u64,
) -> Result<(Head, Vec<LevelLog>)> {
    if encoded.is_empty() || encoded.len() != labels.len() {
        return Err(Error::InsufficientData(format!(
            "head needs one label per encoded case ({} vs {})",
            encoded.len(),
            labels.len()
        )));
    }
    let levels = encoded[0].len();
    for (e, l) in encoded.iter().zip(labels) {
        if e.len() != levels || e[0].shape() != l.shape() {
            return Err(Error::Shape(format!(
                "label grid {:?} does not match encoder grid {:?}",
                l.shape(),
                e[0].shape()
            )));
        }
    }
    let targets: Vec<Vec<ProbMap>> = labels.iter().map(|l| level_targets(l, levels)).collect();
    let mut features = Vec::with_capacity(levels);
    for level in 0..levels {
        let encs: Vec<&FeatureTensor> = encoded.iter().map(|e| &e[level]).collect();
        let ys: Vec<&[f64]> = targets.iter().map(|t| t[level].data()).collect();
        features.push(fit_level_features(&encs, &ys, &cfg.features, derive_seed(seed, "features", level as u64))?);
    }
    let src = Source { encoded: encoded.iter().map(Vec::as_slice).collect(), features: &features };
    let (decoder, log) = train_decoder(&src, &targets, &cfg.decoder, derive_seed(seed, "decoder", 0))?;
    Ok((Head { features, decoder }, log))
}

/// Encoder plus a single head, trained end to end.
#[derive(Clone, Debug, PartialEq)]
pub struct GuslModel {
    pub encoder: EncoderModel,
    pub head: Head,
}

pub fn train_gusl(volumes: &[Volume3D], labels: &[ProbMap], cfg: &GuslConfig, seed: u64) -> Result<(GuslModel, Vec<LevelLog>)> {
    let encoder = fit_encoder(volumes, &cfg.encoder, derive_seed(seed, "encoder", 0))?;
    let encoded = encode_all(&encoder, volumes)?;
    let (head, log) = fit_head(&encoded, labels, cfg, seed)?;
    Ok((GuslModel { encoder, head }, log))
}

impl GuslModel {
    pub fn predict(&self, vol: &Volume3D) -> Result<ProbMap> {
        self.head.predict(&encode(&self.encoder, vol)?)
    }
}
