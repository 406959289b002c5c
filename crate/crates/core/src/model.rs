//! Model assembly: configuration, parameter initialization, and the
//! end-to-end forward pass (encoder -> DFN bottleneck -> gated decoder ->
//! classifier head).

use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decoder_forward, init_decoder, DecoderParams, DecoderTrace};
use crate::dfn::{dfn_forward, init_dfn, DfnConfig, DfnParams};
use crate::error::{CheckpointError, ConfigError, TensorError};
use crate::graph::{Graph, Var};
use crate::head::{classify, init_head, HeadConfig, HeadParams};
use crate::loss::{ContrastiveConfig, FocalConfig};
use crate::metrics::ThresholdPolicy;
use crate::optim::{ConstraintHooks, OptimConfig};
use crate::params::{ModelCtx, ParamSet};
use crate::swin::{encoder_forward, EncoderConfig, EncoderParams};
use crate::tensor::{Scalar, Tensor};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold_policy: String,
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_policy: "bpcer:0.1".into(),
            k: 5,
        }
    }
}

/// The complete experiment configuration, the JSON external contract.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub dfn: DfnConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub focal: FocalConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn default_256() -> Self {
        Self {
            version: CONFIG_VERSION,
            encoder: EncoderConfig::default_256(),
            dfn: DfnConfig::default(),
            head: HeadConfig::default(),
            focal: FocalConfig::default(),
            contrastive: ContrastiveConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Small documented test profile (64x64 inputs).
    pub fn toy() -> Self {
        Self {
            version: CONFIG_VERSION,
            encoder: EncoderConfig::toy(),
            head: HeadConfig::toy(),
            ..Self::default_256()
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder.width(self.encoder.stages() - 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version {
                found: self.version,
                expected: CONFIG_VERSION,
            });
        }
        self.encoder.validate()?;
        if self.encoder.stages() < 2 {
            return Err(ConfigError::Invalid(
                "the UNet needs at least 2 encoder stages".into(),
            ));
        }
        self.dfn.validate(self.bottleneck_channels())?;
        self.head.validate()?;
        self.focal.validate()?;
        self.contrastive.validate()?;
        self.optim.validate()?;
        if self.train.epochs == 0 {
            return Err(ConfigError::Invalid("train.epochs must be >= 1".into()));
        }
        if self.train.batch_size < 2 {
            return Err(ConfigError::Invalid(
                "train.batch_size must be >= 2 (contrastive pairing)".into(),
            ));
        }
        self.eval
            .threshold_policy
            .parse::<ThresholdPolicy>()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.k < 2 {
            return Err(ConfigError::Invalid("eval.k must be >= 2".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parameter-id skeleton of the whole network.
#[derive(Debug, Clone)]
pub struct ModelStructure {
    pub encoder: EncoderParams,
    pub dfn: DfnParams,
    pub decoder: DecoderParams,
    pub head: HeadParams,
}

pub fn init_structure<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    cfg: &RunConfig,
) -> ModelStructure {
    let encoder = crate::swin::init_encoder(ps, rng, &cfg.encoder);
    let dfn = init_dfn(ps, rng, &cfg.dfn, cfg.bottleneck_channels());
    let decoder = init_decoder(ps, rng, &cfg.encoder, cfg.head.spatial_kernel);
    let head = init_head(ps, rng, &cfg.head, cfg.encoder.embed_dim);
    ModelStructure {
        encoder,
        dfn,
        decoder,
        head,
    }
}

pub struct ModelOutput {
    pub probability: Var,
    pub logit: Var,
    pub embedding: Var,
    pub decoder_trace: DecoderTrace,
}

/// Full forward pass over one image leaf, wired encoder -> DFN -> decoder ->
/// head.
pub fn model_forward<T: Scalar>(
    cx: &mut ModelCtx<T>,
    image: Var,
    st: &ModelStructure,
    cfg: &RunConfig,
) -> Result<ModelOutput, TensorError> {
    let (bottleneck, stage_feats) = encoder_forward(cx, image, &st.encoder, &cfg.encoder)?;
    let chw = cx.g.permute(bottleneck, &[2, 0, 1])?;
    let refined = dfn_forward(cx, chw, &st.dfn)?;
    let refined_grid = cx.g.permute(refined, &[1, 2, 0])?;
    let (features, decoder_trace) = decoder_forward(cx, refined_grid, &stage_feats, &st.decoder)?;
    let head_out = classify(cx, features, &st.head)?;
    Ok(ModelOutput {
        probability: head_out.probability,
        logit: head_out.logit,
        embedding: head_out.embedding,
        decoder_trace,
    })
}

/// A runnable model: config, structure, and f32 master weights.
pub struct Model {
    pub config: RunConfig,
    pub structure: ModelStructure,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn init(config: RunConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let structure = init_structure(&mut ps, &mut rng, &config);
        Ok(Self {
            config,
            structure,
            params: ps,
        })
    }

    /// Post-step projection hooks for every learnable tau and bank filter.
    pub fn hooks(&self) -> ConstraintHooks {
        let mut hooks = ConstraintHooks::default();
        for stage in &self.structure.encoder.stages {
            for b in &stage.blocks {
                hooks.log_tau.push(b.attn.log_tau);
            }
        }
        for level in &self.structure.decoder.levels {
            for b in &level.blocks {
                hooks.log_tau.push(b.attn.log_tau);
            }
        }
        hooks.dfn_filters = self.structure.dfn.filters.clone();
        hooks
    }

    /// Inference on one image tensor `[3,S,S]`: probability plus embedding.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<(f64, Vec<f32>), TensorError> {
        let mut g = Graph::<f32>::new();
        let mut cx = ModelCtx::new(&mut g, &self.params);
        let img = cx.g.leaf(image.clone());
        let out = model_forward(&mut cx, img, &self.structure, &self.config)?;
        let prob = g.value(out.probability).item().as_f64();
        let emb = g.value(out.embedding).data().to_vec();
        Ok((prob, emb))
    }

    /// Restore a model from a checkpoint file; returns the stored step.
    pub fn load(path: &Path) -> Result<(Self, u64), crate::error::Error> {
        let ckpt = crate::checkpoint::load_checkpoint(path)?;
        let mut model = Model::init(ckpt.config.clone(), ckpt.config.train.seed)
            .map_err(crate::error::Error::Config)?;
        let mut seen = vec![false; model.params.len()];
        for (name, tensor) in ckpt.tensors {
            let id = model
                .params
                .lookup(&name)
                .ok_or(CheckpointError::UnknownTensor(name.clone()))?;
            if model.params.get(id).shape() != tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    stored: tensor.shape().to_vec(),
                    expected: model.params.get(id).shape().to_vec(),
                }
                .into());
            }
            model.params.set(id, tensor);
            seen[id.0] = true;
        }
        if let Some(idx) = seen.iter().position(|&s| !s) {
            let name = model
                .params
                .iter()
                .nth(idx)
                .map(|(_, n, _)| n.to_string())
                .unwrap_or_default();
            return Err(CheckpointError::MissingTensor(name).into());
        }
        Ok((model, ckpt.step))
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<(), CheckpointError> {
        crate::checkpoint::save_checkpoint(&self.params, &self.config, step, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_roundtrip_and_validation() {
        let cfg = RunConfig::toy();
        let json = cfg.to_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);

        let mut bad = cfg.clone();
        bad.version = 2;
        assert!(matches!(bad.validate(), Err(ConfigError::Version { .. })));

        let mut bad = cfg.clone();
        bad.train.batch_size = 1;
        assert!(bad.validate().is_err());

        let mut bad = cfg.clone();
        bad.eval.threshold_policy = "whenever".into();
        assert!(bad.validate().is_err());

        assert!(RunConfig::from_json("{\"version\":1}").is_err());
        assert!(RunConfig::from_json("not json").is_err());
    }

    #[test]
    fn toy_forward_smoke_and_determinism() {
        let model = Model::init(RunConfig::toy(), 7).unwrap();
        let image = Tensor::<f32>::from_fn(&[3, 64, 64], |i| ((i * 31 % 255) as f32) / 255.0);
        let (p1, e1) = model.forward(&image).unwrap();
        assert!(p1 > 0.0 && p1 < 1.0);
        assert_eq!(e1.len(), model.config.head.embedding_dim());
        let (p2, e2) = model.forward(&image).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(e1, e2);
    }

    #[test]
    fn hooks_cover_every_block_and_filter() {
        let model = Model::init(RunConfig::toy(), 7).unwrap();
        let hooks = model.hooks();
        // toy: 2+2 encoder blocks + 2 decoder blocks
        assert_eq!(hooks.log_tau.len(), 6);
        assert_eq!(hooks.dfn_filters.len(), model.config.dfn.filter_count);
    }

    #[test]
    fn batch_of_two_equals_two_single_forwards() {
        let model = Model::init(RunConfig::toy(), 3).unwrap();
        let a = Tensor::<f32>::from_fn(&[3, 64, 64], |i| ((i * 7 % 97) as f32) / 96.0);
        let b = Tensor::<f32>::from_fn(&[3, 64, 64], |i| ((i * 13 % 89) as f32) / 88.0);
        let (pa, _) = model.forward(&a).unwrap();
        let (pb, _) = model.forward(&b).unwrap();
        // batched path: one graph, two forwards
        let mut g = Graph::<f32>::new();
        let mut cx = ModelCtx::new(&mut g, &model.params);
        let ia = cx.g.leaf(a.clone());
        let ib = cx.g.leaf(b.clone());
        let oa = model_forward(&mut cx, ia, &model.structure, &model.config).unwrap();
        let ob = model_forward(&mut cx, ib, &model.structure, &model.config).unwrap();
        let qa = g.value(oa.probability).item() as f64;
        let qb = g.value(ob.probability).item() as f64;
        assert!((pa - qa).abs() < 1e-6);
        assert!((pb - qb).abs() < 1e-6);
    }
}
