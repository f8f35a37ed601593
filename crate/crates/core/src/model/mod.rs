//! The three networks: per-frame backbone `g`, scene-flow head `s` and BEV
//! detection head `h`. The backbone is shared by both heads.

mod backbone;
mod check;
mod conv;
mod cycle;
mod detect;
mod flow;

pub use backbone::{
    backbone_backward, backbone_features, backbone_forward, BackboneCache, BackboneGeometry,
    Encoding,
};
pub use check::{
    check_detect_gradients, check_flow_gradients, gradient_suite, tiny_config, tiny_scene,
    SuiteResult,
};
pub use conv::{col2im3x3, im2col3x3};
pub use cycle::{
    detect_forward, detection_loss_and_grads, flow_loss, flow_loss_and_grads,
    forward_backward_flow, pair_forward_flow, DetectStepOutput, FlowCycle, FlowStepOutput,
    PairGeometry,
};
pub use detect::{
    detect_head_backward, detect_head_forward, BevGrid, DetectCache, DetectOutput,
};
pub use flow::{
    flow_head_backward, flow_head_forward, flow_head_forward_with, FlowCache, FlowGeometry,
    FlowInputGrads,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{hex_digest, mlp_init, MlpSpec, Namespace, ParamStore, Real};

/// Number of regression channels: dx, dy, z, log w, log l, log h, sin θ, cos θ.
pub const REG_CHANNELS: usize = 8;

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_sample: usize,
    pub n_centroids: usize,
    /// Grouping radius in meters.
    pub radius: f64,
    pub max_k: usize,
    pub mlp: MlpSpec,
    /// Feed reflectance as a per-point input feature.
    pub use_reflectance: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_sample: 2048,
            n_centroids: 256,
            radius: 0.5,
            max_k: 16,
            mlp: MlpSpec::relu(&[32, 64]),
            use_reflectance: false,
        }
    }
}

impl BackboneConfig {
    pub fn input_dim(&self) -> usize {
        usize::from(self.use_reflectance)
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        if self.n_sample == 0 || self.n_centroids == 0 || self.max_k == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.n_centroids > self.n_sample {
            return Err(Error::Config(format!(
                "n_centroids {} exceeds n_sample {}",
                self.n_centroids, self.n_sample
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("backbone radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowHeadConfig {
    /// Frame-2 centroids grouped around each frame-1 centroid.
    pub embed_k: usize,
    pub embed_mlp: MlpSpec,
    /// Set-conv over frame-1 centroids after the flow embedding.
    pub conv_radius: f64,
    pub conv_max_k: usize,
    pub conv_mlp: MlpSpec,
    pub upconv_mlp: MlpSpec,
    pub fc: MlpSpec,
}

impl Default for FlowHeadConfig {
    fn default() -> Self {
        Self {
            embed_k: 16,
            embed_mlp: MlpSpec::relu(&[64, 64]),
            conv_radius: 4.0,
            conv_max_k: 8,
            conv_mlp: MlpSpec::relu(&[64]),
            upconv_mlp: MlpSpec::relu(&[64, 64]),
            fc: MlpSpec::linear_head(&[32, 3]),
        }
    }
}

impl FlowHeadConfig {
    pub fn validate(&self) -> Result<()> {
        for m in [&self.embed_mlp, &self.conv_mlp, &self.upconv_mlp, &self.fc] {
            m.validate()?;
        }
        if self.fc.out_dim() != 3 {
            return Err(Error::Config(format!(
                "flow fc must end in width 3, got {}",
                self.fc.out_dim()
            )));
        }
        if self.embed_k == 0 || self.conv_max_k == 0 || !(self.conv_radius > 0.0) {
            return Err(Error::Config("flow head neighborhood sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectHeadConfig {
    /// Half-width of the square BEV window in meters.
    pub bev_extent: f64,
    pub bev_cells: usize,
    pub conv_channels: usize,
    pub reg_channels: usize,
    pub num_classes: usize,
}

impl Default for DetectHeadConfig {
    fn default() -> Self {
        Self {
            bev_extent: 20.0,
            bev_cells: 64,
            conv_channels: 32,
            reg_channels: REG_CHANNELS,
            num_classes: 1,
        }
    }
}

impl DetectHeadConfig {
    pub fn cell_size(&self) -> f64 {
        2.0 * self.bev_extent / self.bev_cells as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.reg_channels != REG_CHANNELS {
            return Err(Error::Config(format!(
                "reg_channels must be {REG_CHANNELS}, got {}",
                self.reg_channels
            )));
        }
        if self.bev_cells == 0 || self.conv_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("detection head sizes must be positive".into()));
        }
        if !(self.bev_extent > 0.0) {
            return Err(Error::Config("bev_extent must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub flow: FlowHeadConfig,
    pub detect: DetectHeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.flow.validate()?;
        self.detect.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(h)
    }
}

/// Initial heatmap logit, so a fresh head predicts about 0.1 everywhere.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;

/// All learned tensors of `g`, `s` and `h` plus the configuration they were
/// built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub version: u32,
}

impl<T: Real> ModelParams<T> {
    /// Fresh random parameters. Each namespace draws from its own stream, so
    /// the backbone initialization does not depend on the head shapes.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stream = |ns: Namespace| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ns as u64 + 1);
            rng
        };

        let b = &config.backbone;
        let d = b.feature_dim();
        let mut rng = stream(Namespace::Backbone);
        mlp_init(&mut store, "g.sa", &b.mlp, b.input_dim() + 3, &mut rng)?;

        let f = &config.flow;
        let mut rng = stream(Namespace::Flow);
        mlp_init(&mut store, "s.embed", &f.embed_mlp, 2 * d + 3, &mut rng)?;
        let e = f.embed_mlp.out_dim();
        mlp_init(&mut store, "s.conv", &f.conv_mlp, e + 3, &mut rng)?;
        let c = f.conv_mlp.out_dim();
        mlp_init(&mut store, "s.up", &f.upconv_mlp, c + d, &mut rng)?;
        mlp_init(&mut store, "s.fc", &f.fc, f.upconv_mlp.out_dim(), &mut rng)?;
        // Start the flow output small.
        let last = f.fc.layer_widths.len() - 1;
        if let Some(p) = store.get_mut(&format!("s.fc.l{last}.w")) {
            p.value.scale(T::of(0.1));
        }

        let h = &config.detect;
        let mut rng = stream(Namespace::Detect);
        let ch = h.conv_channels;
        mlp_init(&mut store, "h.conv1", &MlpSpec::relu(&[ch]), 9 * d, &mut rng)?;
        mlp_init(&mut store, "h.conv2", &MlpSpec::relu(&[ch]), 9 * ch, &mut rng)?;
        mlp_init(
            &mut store,
            "h.hm",
            &MlpSpec::linear_head(&[h.num_classes]),
            ch,
            &mut rng,
        )?;
        mlp_init(
            &mut store,
            "h.reg",
            &MlpSpec::linear_head(&[REG_CHANNELS]),
            ch,
            &mut rng,
        )?;
        if let Some(p) = store.get_mut("h.hm.l0.b") {
            p.value.fill(T::of(HEATMAP_PRIOR_BIAS));
        }

        Ok(Self {
            config,
            store,
            version: MODEL_VERSION,
        })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            store: self.store.cast(),
            version: self.version,
        }
    }

    pub fn namespace_hash(&self, ns: Namespace) -> String {
        self.store.namespace_hash(ns)
    }

    /// Zeroes the weights and bias of the last flow layer, making the
    /// predicted flow identically zero.
    pub fn zero_flow_output(&mut self) {
        let last = self.config.flow.fc.layer_widths.len() - 1;
        for suffix in ["w", "b"] {
            if let Some(p) = self.store.get_mut(&format!("s.fc.l{last}.{suffix}")) {
                p.value.fill(T::zero());
            }
        }
    }

    /// Replaces the tensors of every namespace in `namespaces` by `other`'s.
    pub fn take_namespaces(&mut self, other: &ModelParams<T>, namespaces: &[Namespace]) -> Result<()> {
        for &ns in namespaces {
            self.store.copy_namespace_from(&other.store, ns)?;
        }
        Ok(())
    }
}
