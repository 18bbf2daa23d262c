//! The saliency model: a strided CNN encoder with taps at three scales,
//! per-scale transformer encoders, and a seven-block fusion decoder that
//! restores full resolution through five nearest-neighbor upsamplings.

mod net;
mod params;

pub use net::{
    apply_bn_updates, decoder_probe, encoder_forward, model_backward, model_forward,
    transformer_encoder_forward, ForwardOutput, Phase, BN_MOMENTUM,
};
pub use params::{parameter_specs, ModelParams, ParamSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossKind;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("tensor op failed: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    CheckpointData(#[from] crate::data::DataError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which CNN feature extractor preset a variant uses. Both are from-scratch
/// toy backbones; `Dense` is the wider preset standing in for the
/// higher-capacity alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Res,
    Dense,
}

impl Backbone {
    /// Channel widths of the five stride-2 encoder stages.
    pub fn stage_channels(self) -> [usize; 5] {
        match self {
            Backbone::Res => [6, 8, 10, 12, 16],
            Backbone::Dense => [8, 10, 14, 16, 20],
        }
    }
}

/// Architecture hyperparameters plus the ablation flags of the variant grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_w: usize,
    pub input_h: usize,
    pub backbone: Backbone,
    /// Channel dimension each stream is projected to before its transformer:
    /// stream 1 consumes the w/32 features, stream 3 the w/8 features.
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    /// Attention heads per transformer encoder.
    pub heads1: usize,
    pub heads2: usize,
    pub heads3: usize,
    /// Self-attention + MLP layers per transformer encoder.
    pub layers: usize,
    /// The MLP hidden width is `mlp_ratio * d`.
    pub mlp_ratio: usize,
    /// Output channels of decoder blocks 3..6; blocks 1 and 2 are forced to
    /// d2 and d3 so the skip fusion products align.
    pub decoder_tail: [usize; 4],
    pub use_e1: bool,
    pub use_e2: bool,
    pub use_e3: bool,
    pub use_skip_connections: bool,
    pub loss_kind: LossKind,
}

impl ModelConfig {
    /// Small configuration for desk-scale training and verification.
    pub fn toy(input_w: usize, input_h: usize) -> Self {
        Self {
            input_w,
            input_h,
            backbone: Backbone::Res,
            d1: 16,
            d2: 16,
            d3: 8,
            heads1: 4,
            heads2: 4,
            heads3: 2,
            layers: 2,
            mlp_ratio: 4,
            decoder_tail: [8, 8, 6, 4],
            use_e1: true,
            use_e2: true,
            use_e3: true,
            use_skip_connections: true,
            loss_kind: LossKind::Combined,
        }
    }

    /// The published dimensioning: 768/768/512 projection widths with
    /// 12/12/8 attention heads at a 384x288 input. Constructible, but far too
    /// slow for the test suite; toy configs cover execution.
    pub fn paper_scale() -> Self {
        Self {
            input_w: 384,
            input_h: 288,
            backbone: Backbone::Res,
            d1: 768,
            d2: 768,
            d3: 512,
            heads1: 12,
            heads2: 12,
            heads3: 8,
            layers: 2,
            mlp_ratio: 4,
            decoder_tail: [256, 128, 64, 32],
            use_e1: true,
            use_e2: true,
            use_e3: true,
            use_skip_connections: true,
            loss_kind: LossKind::Combined,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_w == 0 || self.input_w % 32 != 0 || self.input_h == 0 || self.input_h % 32 != 0
        {
            return Err(ModelError::Config(format!(
                "input {}x{} must be divisible by 32",
                self.input_w, self.input_h
            )));
        }
        for (d, h, which) in [
            (self.d1, self.heads1, 1),
            (self.d2, self.heads2, 2),
            (self.d3, self.heads3, 3),
        ] {
            if d < 2 {
                return Err(ModelError::Config(format!(
                    "transformer dim d{which}={d} must be at least 2"
                )));
            }
            if h == 0 || d % h != 0 {
                return Err(ModelError::Config(format!(
                    "transformer dim d{which}={d} is not divisible by its {h} heads"
                )));
            }
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config(
                "layers and mlp_ratio must be positive".into(),
            ));
        }
        if self.decoder_tail.iter().any(|&c| c == 0) {
            return Err(ModelError::Config("decoder channels must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of a tap at the given reduction factor.
    pub fn tap_size(&self, factor: usize) -> (usize, usize) {
        (self.input_h / factor, self.input_w / factor)
    }

    /// Projection width of stream 1, 2, or 3.
    pub fn stream_dim(&self, stream: usize) -> usize {
        match stream {
            1 => self.d1,
            2 => self.d2,
            3 => self.d3,
            _ => unreachable!("streams are 1..=3"),
        }
    }

    pub fn stream_heads(&self, stream: usize) -> usize {
        match stream {
            1 => self.heads1,
            2 => self.heads2,
            3 => self.heads3,
            _ => unreachable!("streams are 1..=3"),
        }
    }

    /// Reduction factor of the encoder tap feeding the given stream.
    pub fn stream_factor(stream: usize) -> usize {
        match stream {
            1 => 32,
            2 => 16,
            3 => 8,
            _ => unreachable!("streams are 1..=3"),
        }
    }

    pub fn stream_uses_transformer(&self, stream: usize) -> bool {
        match stream {
            1 => self.use_e1,
            2 => self.use_e2,
            3 => self.use_e3,
            _ => unreachable!("streams are 1..=3"),
        }
    }

    /// Whether the parameters for a stream exist at all. Stream 1 always
    /// feeds the decoder; streams 2 and 3 are built when skip connections
    /// consume them or when their transformer was explicitly requested
    /// (in which case they are dead weight kept for ablation probes).
    pub fn stream_exists(&self, stream: usize) -> bool {
        match stream {
            1 => true,
            2 => self.use_skip_connections || self.use_e2,
            3 => self.use_skip_connections || self.use_e3,
            _ => unreachable!("streams are 1..=3"),
        }
    }

    /// Output channels of decoder blocks 1..=6.
    pub fn decoder_channels(&self) -> [usize; 6] {
        [
            self.d2,
            self.d3,
            self.decoder_tail[0],
            self.decoder_tail[1],
            self.decoder_tail[2],
            self.decoder_tail[3],
        ]
    }
}

/// The nine ablation variants. Rows differ in which transformer encoders are
/// active, whether skip connections are used, the training loss, and the
/// backbone preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    BaseNet,
    BaseNetPlus,
    SkipNet,
    TranSalNetResBce,
    BaseNetCb,
    BaseNetPlusCb,
    SkipNetCb,
    TranSalNetRes,
    TranSalNetDense,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::BaseNet,
        Variant::BaseNetPlus,
        Variant::SkipNet,
        Variant::TranSalNetResBce,
        Variant::BaseNetCb,
        Variant::BaseNetPlusCb,
        Variant::SkipNetCb,
        Variant::TranSalNetRes,
        Variant::TranSalNetDense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaseNet => "BaseNet",
            Variant::BaseNetPlus => "BaseNet+",
            Variant::SkipNet => "SkipNet",
            Variant::TranSalNetResBce => "TranSalNet_Res_BCE",
            Variant::BaseNetCb => "BaseNet(L_CB)",
            Variant::BaseNetPlusCb => "BaseNet+(L_CB)",
            Variant::SkipNetCb => "SkipNet(L_CB)",
            Variant::TranSalNetRes => "TranSalNet_Res",
            Variant::TranSalNetDense => "TranSalNet_Dense",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    /// (E1, E2, E3, skip connections)
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Variant::BaseNet | Variant::BaseNetCb => (false, false, false, false),
            Variant::BaseNetPlus | Variant::BaseNetPlusCb => (true, false, false, false),
            Variant::SkipNet | Variant::SkipNetCb => (false, false, false, true),
            Variant::TranSalNetResBce | Variant::TranSalNetRes | Variant::TranSalNetDense => {
                (true, true, true, true)
            }
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Variant::BaseNet
            | Variant::BaseNetPlus
            | Variant::SkipNet
            | Variant::TranSalNetResBce => LossKind::Bce,
            _ => LossKind::Combined,
        }
    }

    pub fn backbone(self) -> Backbone {
        match self {
            Variant::TranSalNetDense => Backbone::Dense,
            _ => Backbone::Res,
        }
    }

    /// Applies this variant's flags, loss, and backbone onto a base config.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let (e1, e2, e3, sc) = self.flags();
        ModelConfig {
            backbone: self.backbone(),
            use_e1: e1,
            use_e2: e2,
            use_e3: e3,
            use_skip_connections: sc,
            loss_kind: self.loss_kind(),
            ..base.clone()
        }
    }
}
