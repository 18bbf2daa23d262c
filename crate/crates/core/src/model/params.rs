//! Parameter store: named learnable tensors plus batch-norm running
//! statistics, with seeded initialization and the checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Result};
use crate::data::codec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)].
    FanInUniform { fan_in: usize },
    /// Gaussian with std 0.02, resampled outside two standard deviations.
    TruncatedNormal,
    Zeros,
    Ones,
    /// Constant fill (final-block bias sits at -1 so the sigmoid starts
    /// away from saturation).
    Constant(i32),
}

/// One named tensor in the store and how it is born.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Running statistics are buffers: saved and loaded but never given
    /// gradient slots.
    pub is_buffer: bool,
}

impl ParamSpec {
    fn learnable(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name,
            shape,
            init,
            is_buffer: false,
        }
    }

    fn buffer(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name,
            shape,
            init,
            is_buffer: true,
        }
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    out.push(ParamSpec::learnable(
        format!("{prefix}.weight"),
        vec![c_out, c_in, k, k],
        Init::FanInUniform {
            fan_in: c_in * k * k,
        },
    ));
    out.push(ParamSpec::learnable(
        format!("{prefix}.bias"),
        vec![c_out],
        Init::Zeros,
    ));
}

fn bn_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec::learnable(
        format!("{prefix}.gamma"),
        vec![c],
        Init::Ones,
    ));
    out.push(ParamSpec::learnable(
        format!("{prefix}.beta"),
        vec![c],
        Init::Zeros,
    ));
    out.push(ParamSpec::buffer(
        format!("{prefix}.running_mean"),
        vec![c],
        Init::Zeros,
    ));
    out.push(ParamSpec::buffer(
        format!("{prefix}.running_var"),
        vec![c],
        Init::Ones,
    ));
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(ParamSpec::learnable(
        format!("{prefix}.weight"),
        vec![d_in, d_out],
        Init::FanInUniform { fan_in: d_in },
    ));
    out.push(ParamSpec::learnable(
        format!("{prefix}.bias"),
        vec![d_out],
        Init::Zeros,
    ));
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::learnable(
        format!("{prefix}.gamma"),
        vec![d],
        Init::Ones,
    ));
    out.push(ParamSpec::learnable(
        format!("{prefix}.beta"),
        vec![d],
        Init::Zeros,
    ));
}

/// The full parameter layout for a config, in deterministic construction
/// order. The parameter count is a pure function of the config.
pub fn parameter_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let stages = config.backbone.stage_channels();

    let mut c_in = 3;
    for (i, &c_out) in stages.iter().enumerate() {
        let prefix = format!("encoder.stage{}", i + 1);
        conv_specs(&mut specs, &format!("{prefix}.conv"), c_in, c_out, 3);
        bn_specs(&mut specs, &format!("{prefix}.bn"), c_out);
        c_in = c_out;
    }

    for stream in 1..=3usize {
        if !config.stream_exists(stream) {
            continue;
        }
        let d = config.stream_dim(stream);
        let factor = ModelConfig::stream_factor(stream);
        let (h, w) = config.tap_size(factor);
        let tap_channels = match stream {
            1 => stages[4],
            2 => stages[3],
            3 => stages[2],
            _ => unreachable!(),
        };
        let prefix = format!("stream{stream}");
        conv_specs(&mut specs, &format!("{prefix}.proj"), tap_channels, d, 1);
        if config.stream_uses_transformer(stream) {
            specs.push(ParamSpec::learnable(
                format!("{prefix}.pos"),
                vec![h * w, d],
                Init::TruncatedNormal,
            ));
            let hidden = config.mlp_ratio * d;
            for l in 1..=config.layers {
                let lp = format!("{prefix}.layer{l}");
                ln_specs(&mut specs, &format!("{lp}.ln1"), d);
                for proj in ["q", "k", "v", "out"] {
                    linear_specs(&mut specs, &format!("{lp}.attn.{proj}"), d, d);
                }
                ln_specs(&mut specs, &format!("{lp}.ln2"), d);
                linear_specs(&mut specs, &format!("{lp}.mlp.fc1"), d, hidden);
                linear_specs(&mut specs, &format!("{lp}.mlp.fc2"), hidden, d);
            }
        }
    }

    let dec = config.decoder_channels();
    let mut c_in = config.d1;
    for (i, &c_out) in dec.iter().enumerate() {
        let prefix = format!("decoder.block{}", i + 1);
        conv_specs(&mut specs, &format!("{prefix}.conv"), c_in, c_out, 3);
        bn_specs(&mut specs, &format!("{prefix}.bn"), c_out);
        c_in = c_out;
    }
    conv_specs(&mut specs, "decoder.block7.conv", c_in, 1, 3);
    // Start the output map near sigmoid(-1) instead of 0.5.
    let bias = specs
        .iter_mut()
        .find(|s| s.name == "decoder.block7.conv.bias")
        .expect("block7 bias exists");
    bias.init = Init::Constant(-1);

    specs
}

/// Named parameter store; every learnable tensor has a same-shaped gradient
/// slot managed by the trainer.
#[derive(Debug, Clone)]
pub struct ModelParams {
    learnable: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<String>,
    buffers: Vec<String>,
}

impl ModelParams {
    /// Seeded initialization following the construction order of
    /// [`parameter_specs`].
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut learnable = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for spec in parameter_specs(config) {
            let tensor = match spec.init {
                Init::FanInUniform { fan_in } => {
                    let a = (1.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.gen_range(-a..a))
                }
                Init::TruncatedNormal => Tensor::from_fn(&spec.shape, |_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 0.04 {
                        break v;
                    }
                }),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::filled(&spec.shape, 1.0),
                Init::Constant(c) => Tensor::filled(&spec.shape, c as f64),
            };
            if spec.is_buffer {
                buffers.insert(spec.name, tensor);
            } else {
                learnable.insert(spec.name, tensor);
            }
        }
        Ok(Self { learnable, buffers })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.learnable
            .get(name)
            .or_else(|| self.buffers.get(name))
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        if let Some(t) = self.learnable.get_mut(name) {
            return t;
        }
        self.buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.learnable.contains_key(name) || self.buffers.contains_key(name)
    }

    pub fn learnable(&self) -> &BTreeMap<String, Tensor> {
        &self.learnable
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn learnable_names(&self) -> Vec<String> {
        self.learnable.keys().cloned().collect()
    }

    /// Total number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.learnable.values().map(Tensor::len).sum()
    }

    /// A gradient store with one zero tensor per learnable parameter.
    pub fn zero_grads(&self) -> BTreeMap<String, Tensor> {
        self.learnable
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect()
    }

    /// Writes a checkpoint directory: one TSAL container per tensor plus a
    /// manifest with the config snapshot as canonical JSON.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>, config: &ModelConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let manifest = Manifest {
            format: "salgrid-checkpoint".into(),
            version: 1,
            config: config.clone(),
            params: self.learnable.keys().cloned().collect(),
            buffers: self.buffers.keys().cloned().collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        for (name, tensor) in self.learnable.iter().chain(self.buffers.iter()) {
            codec::save_tensor(dir.join(format!("{name}.tsal")), tensor)?;
        }
        Ok(())
    }

    /// Loads a checkpoint and validates every tensor shape against the
    /// config's parameter layout.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelConfig, Self)> {
        let dir = dir.as_ref();
        let manifest_text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| ModelError::Checkpoint(format!("manifest.json: {e}")))?;
        let manifest: Manifest = serde_json::from_str(&manifest_text)
            .map_err(|e| ModelError::Checkpoint(format!("manifest.json: {e}")))?;
        if manifest.format != "salgrid-checkpoint" || manifest.version != 1 {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint format {}@{}",
                manifest.format, manifest.version
            )));
        }
        let config = manifest.config;
        config.validate()?;
        let specs = parameter_specs(&config);
        let expected: Vec<&ParamSpec> = specs.iter().collect();
        let manifest_names: Vec<&String> =
            manifest.params.iter().chain(manifest.buffers.iter()).collect();
        if manifest_names.len() != expected.len() {
            return Err(ModelError::Checkpoint(format!(
                "manifest lists {} tensors, config requires {}",
                manifest_names.len(),
                expected.len()
            )));
        }
        let mut learnable = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for spec in &specs {
            let path = dir.join(format!("{}.tsal", spec.name));
            let tensor = codec::load_tensor(&path)?;
            if tensor.shape() != spec.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: shape {:?} does not match config shape {:?}",
                    spec.name,
                    tensor.shape(),
                    spec.shape
                )));
            }
            if spec.is_buffer {
                buffers.insert(spec.name.clone(), tensor);
            } else {
                learnable.insert(spec.name.clone(), tensor);
            }
        }
        Ok((config, Self { learnable, buffers }))
    }
}
