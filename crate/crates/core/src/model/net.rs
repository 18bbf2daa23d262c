//! Forward graph construction on the tape, and the backward pass that
//! collects per-parameter gradients.

use std::collections::BTreeMap;

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::{BatchStats, NodeId, Tape, Tensor};

/// Batch-norm mode selector: training uses batch statistics (and reports
/// them for the running-average update), evaluation uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Momentum of the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Everything a forward pass produced: the tape (for backward), the
/// prediction node, parameter-to-node bindings, batch-norm statistics to fold
/// into the running averages, and the attention probability nodes.
pub struct ForwardOutput {
    pub tape: Tape,
    pub pred: NodeId,
    pub param_nodes: BTreeMap<String, NodeId>,
    pub bn_stats: Vec<(String, BatchStats)>,
    pub attention_nodes: Vec<NodeId>,
}

impl ForwardOutput {
    pub fn prediction(&self) -> &Tensor {
        self.tape.value(self.pred)
    }

    /// Attention probability matrices, one [T x T] tensor per
    /// stream/layer/head in construction order.
    pub fn attention_maps(&self) -> Vec<&Tensor> {
        self.attention_nodes
            .iter()
            .map(|&id| self.tape.value(id))
            .collect()
    }
}

struct GraphBuilder<'a> {
    tape: Tape,
    params: &'a ModelParams,
    nodes: BTreeMap<String, NodeId>,
    phase: Phase,
    bn_stats: Vec<(String, BatchStats)>,
    attention: Vec<NodeId>,
}

impl<'a> GraphBuilder<'a> {
    fn new(params: &'a ModelParams, phase: Phase) -> Self {
        Self {
            tape: Tape::new(),
            params,
            nodes: BTreeMap::new(),
            phase,
            bn_stats: Vec::new(),
            attention: Vec::new(),
        }
    }

    fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.nodes.get(name) {
            return id;
        }
        let id = self.tape.leaf(self.params.get(name).clone());
        self.nodes.insert(name.to_string(), id);
        id
    }

    fn conv(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        Ok(self.tape.conv2d(x, w, b)?)
    }

    /// Batch norm over a [C x H x W] activation. Single-pixel maps fall back
    /// to eval mode because batch statistics need at least two samples.
    fn batch_norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let shape = self.tape.value(x).shape().to_vec();
        let x4 = self.tape.reshape(x, &[1, shape[0], shape[1], shape[2]])?;
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        let out4 = if self.phase == Phase::Train && shape[1] * shape[2] >= 2 {
            let (id, stats) = self.tape.batch_norm_train(x4, gamma, beta)?;
            self.bn_stats.push((prefix.to_string(), stats));
            id
        } else {
            let mean = self.params.get(&format!("{prefix}.running_mean")).data().to_vec();
            let var = self.params.get(&format!("{prefix}.running_var")).data().to_vec();
            self.tape.batch_norm_eval(x4, gamma, beta, &mean, &var)?
        };
        Ok(self.tape.reshape(out4, &shape)?)
    }

    fn layer_norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        Ok(self.tape.layer_norm(x, gamma, beta)?)
    }

    fn linear(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let xw = self.tape.matmul(x, w)?;
        Ok(self.tape.add_bias_rows(xw, b)?)
    }

    /// Multi-head self-attention over [T x d] tokens. The 1/sqrt(d_head)
    /// scaling is applied to the query slices to keep the score tensors as
    /// the only T x T intermediates.
    fn msa(&mut self, prefix: &str, x: NodeId, d: usize, heads: usize) -> Result<NodeId> {
        let q = self.linear(&format!("{prefix}.q"), x)?;
        let k = self.linear(&format!("{prefix}.k"), x)?;
        let v = self.linear(&format!("{prefix}.v"), x)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let qs = self.tape.scale(qh, scale);
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qs, kt)?;
            let attn = self.tape.softmax_last(scores);
            self.attention.push(attn);
            head_outs.push(self.tape.matmul(attn, vh)?);
        }
        let merged = self.tape.concat_cols(&head_outs)?;
        self.linear(&format!("{prefix}.out"), merged)
    }

    fn mlp(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?;
        let act = self.tape.gelu(h);
        self.linear(&format!("{prefix}.fc2"), act)
    }

    /// Five stride-2 stages (conv, 2x2 mean downsample, BN, ReLU); taps are
    /// taken after the /8, /16, and /32 stages. Shallower taps are excluded
    /// by construction.
    fn encoder(&mut self, img: NodeId) -> Result<[NodeId; 3]> {
        let mut x = img;
        let mut taps = Vec::with_capacity(3);
        for i in 1..=5 {
            let prefix = format!("encoder.stage{i}");
            let c = self.conv(&format!("{prefix}.conv"), x)?;
            let pooled = self.tape.avg_pool_2x2(c)?;
            let n = self.batch_norm(&format!("{prefix}.bn"), pooled)?;
            x = self.tape.relu(n);
            if i >= 3 {
                taps.push(x);
            }
        }
        // Deepest first: x1 at /32, x2 at /16, x3 at /8.
        Ok([taps[2], taps[1], taps[0]])
    }

    /// Channel projection plus, when enabled, the positional embedding and
    /// the stack of pre-norm attention/MLP layers with residual connections.
    fn stream(&mut self, config: &ModelConfig, stream: usize, tap: NodeId) -> Result<NodeId> {
        let d = config.stream_dim(stream);
        let prefix = format!("stream{stream}");
        let proj = self.conv(&format!("{prefix}.proj"), tap)?;
        if !config.stream_uses_transformer(stream) {
            return Ok(proj);
        }
        let shape = self.tape.value(proj).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let tokens = self.tape.tokens_from_grid(proj)?;
        let pos = self.param(&format!("{prefix}.pos"));
        let mut z = self.tape.add(tokens, pos)?;
        let heads = config.stream_heads(stream);
        for l in 1..=config.layers {
            let lp = format!("{prefix}.layer{l}");
            let ln1 = self.layer_norm(&format!("{lp}.ln1"), z)?;
            let attn = self.msa(&format!("{lp}.attn"), ln1, d, heads)?;
            let with_attn = self.tape.add(attn, z)?;
            let ln2 = self.layer_norm(&format!("{lp}.ln2"), with_attn)?;
            let ff = self.mlp(&format!("{lp}.mlp"), ln2)?;
            z = self.tape.add(ff, with_attn)?;
        }
        Ok(self.tape.grid_from_tokens(z, h, w)?)
    }

    fn decoder_block(&mut self, index: usize, x: NodeId) -> Result<NodeId> {
        let prefix = format!("decoder.block{index}");
        let c = self.conv(&format!("{prefix}.conv"), x)?;
        let n = self.batch_norm(&format!("{prefix}.bn"), c)?;
        Ok(self.tape.relu(n))
    }

    /// Blocks 1..6 with elementwise-product skip fusion into blocks 2 and 3,
    /// then the sigmoid output block.
    fn decoder(
        &mut self,
        config: &ModelConfig,
        xc1: NodeId,
        xc2: Option<NodeId>,
        xc3: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut hat = self.decoder_block(1, xc1)?;
        for i in 2..=6 {
            let up = self.tape.upsample_nearest_2x(hat)?;
            let input = match (i, config.use_skip_connections) {
                (2, true) => {
                    let skip = xc2.ok_or_else(|| {
                        ModelError::Config("skip fusion needs the /16 stream".into())
                    })?;
                    let prod = self.tape.mul(up, skip)?;
                    self.tape.relu(prod)
                }
                (3, true) => {
                    let skip = xc3.ok_or_else(|| {
                        ModelError::Config("skip fusion needs the /8 stream".into())
                    })?;
                    let prod = self.tape.mul(up, skip)?;
                    self.tape.relu(prod)
                }
                _ => up,
            };
            hat = self.decoder_block(i, input)?;
        }
        let logits = self.conv("decoder.block7.conv", hat)?;
        let out = self.tape.sigmoid(logits);
        let shape = self.tape.value(out).shape().to_vec();
        Ok(self.tape.reshape(out, &[shape[1], shape[2]])?)
    }

    fn finish(self, pred: NodeId) -> ForwardOutput {
        ForwardOutput {
            tape: self.tape,
            pred,
            param_nodes: self.nodes,
            bn_stats: self.bn_stats,
            attention_nodes: self.attention,
        }
    }
}

fn check_image(config: &ModelConfig, image: &Tensor) -> Result<()> {
    let want = [3, config.input_h, config.input_w];
    if image.shape() != want {
        return Err(ModelError::Config(format!(
            "image shape {:?} does not match configured input {:?}",
            image.shape(),
            want
        )));
    }
    Ok(())
}

/// Full forward pass honoring the ablation flags: a disabled transformer
/// encoder degrades its stream to the channel projection alone, and without
/// skip connections only the deepest stream reaches the decoder.
pub fn model_forward(
    config: &ModelConfig,
    params: &ModelParams,
    image: &Tensor,
    phase: Phase,
) -> Result<ForwardOutput> {
    config.validate()?;
    check_image(config, image)?;
    let mut b = GraphBuilder::new(params, phase);
    let img = b.tape.leaf(image.clone());
    let [x1, x2, x3] = b.encoder(img)?;
    let xc1 = b.stream(config, 1, x1)?;
    let (xc2, xc3) = if config.use_skip_connections {
        (
            Some(b.stream(config, 2, x2)?),
            Some(b.stream(config, 3, x3)?),
        )
    } else {
        (None, None)
    };
    let pred = b.decoder(config, xc1, xc2, xc3)?;
    Ok(b.finish(pred))
}

/// Gradients for every learnable parameter; parameters on no active path
/// receive exactly zero.
pub fn model_backward(
    params: &ModelParams,
    forward: &ForwardOutput,
    loss_grad: &Tensor,
) -> Result<BTreeMap<String, Tensor>> {
    let grads = forward.tape.backward(forward.pred, loss_grad.clone())?;
    let mut by_name = BTreeMap::new();
    for (name, tensor) in params.learnable() {
        let grad = match forward.param_nodes.get(name) {
            Some(&id) => grads.get_or_zeros(id, tensor.shape()),
            None => Tensor::zeros(tensor.shape()),
        };
        by_name.insert(name.clone(), grad);
    }
    Ok(by_name)
}

/// Folds freshly computed batch statistics into the running averages.
pub fn apply_bn_updates(params: &mut ModelParams, stats: &[(String, BatchStats)]) {
    for (prefix, batch) in stats {
        let mean = params.get_mut(&format!("{prefix}.running_mean"));
        for (m, &b) in mean.data_mut().iter_mut().zip(&batch.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        let var = params.get_mut(&format!("{prefix}.running_var"));
        for (v, &b) in var.data_mut().iter_mut().zip(&batch.var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
    }
}

/// Runs just the CNN encoder and returns the three tap values, deepest first.
pub fn encoder_forward(
    config: &ModelConfig,
    params: &ModelParams,
    image: &Tensor,
    phase: Phase,
) -> Result<(Tensor, Tensor, Tensor)> {
    config.validate()?;
    check_image(config, image)?;
    let mut b = GraphBuilder::new(params, phase);
    let img = b.tape.leaf(image.clone());
    let [x1, x2, x3] = b.encoder(img)?;
    Ok((
        b.tape.value(x1).clone(),
        b.tape.value(x2).clone(),
        b.tape.value(x3).clone(),
    ))
}

/// Runs one transformer stream on an externally supplied tap; returns the
/// context-enhanced feature map and the attention probabilities.
pub fn transformer_encoder_forward(
    config: &ModelConfig,
    params: &ModelParams,
    stream: usize,
    tap: &Tensor,
    phase: Phase,
) -> Result<(Tensor, Vec<Tensor>)> {
    config.validate()?;
    let mut b = GraphBuilder::new(params, phase);
    let x = b.tape.leaf(tap.clone());
    let out = b.stream(config, stream, x)?;
    let attn = b
        .attention
        .iter()
        .map(|&id| b.tape.value(id).clone())
        .collect();
    Ok((b.tape.value(out).clone(), attn))
}

/// Runs only the decoder on explicit stream inputs. With skip connections
/// disabled the /16 and /8 inputs are provably unused.
pub fn decoder_probe(
    config: &ModelConfig,
    params: &ModelParams,
    xc1: &Tensor,
    xc2: &Tensor,
    xc3: &Tensor,
    phase: Phase,
) -> Result<Tensor> {
    config.validate()?;
    let mut b = GraphBuilder::new(params, phase);
    let n1 = b.tape.leaf(xc1.clone());
    let n2 = b.tape.leaf(xc2.clone());
    let n3 = b.tape.leaf(xc3.clone());
    let pred = b.decoder(config, n1, Some(n2), Some(n3))?;
    Ok(b.tape.value(pred).clone())
}
