//! The learned visiting-order policy: an attention encoder over the start
//! point and all clusters, an autoregressive attention decoder over the
//! partial tour, and a pointer-style output distribution over the next
//! cluster to serve.
//!
//! One network handles any cluster count: the encoder carries no positional
//! information (cluster order is irrelevant on input), while the decoder
//! injects sinusoidal position codes into the already-chosen sequence.
//! Decoding offers greedy, sampling, and beam variants.  All forward passes
//! run on the [`crate::numerics`] tape, so the same code path serves both
//! inference and training gradients.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tape, Tensor, TensorId};
use crate::router;
use crate::scenario::{CandidateGrid, Scenario};

/// Architecture and input-scaling constants.  Stored alongside the weights
/// in every checkpoint so a model is loadable without external context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width of every token.
    pub d_em: usize,
    /// Per-head projection width.
    pub d_v: usize,
    /// Attention heads per multi-head layer.
    pub heads: usize,
    /// Encoder depth.
    pub encoder_layers: usize,
    /// Decoder depth.
    pub decoder_layers: usize,
    /// Hidden width of the position-wise feed-forward blocks.
    pub ffn_hidden: usize,
    /// Output scores are squashed to `±clip_c` before the softmax.
    pub clip_c: f64,
    /// Grid side the cluster features are laid out for (`l_sub²` points).
    pub l_sub: usize,
    /// Coordinates are divided by this length (m) on input.
    pub area_scale: f64,
    /// Node counts are divided by this on input.
    pub n_scale: f64,
}

impl ModelConfig {
    /// Full-scale architecture (512-wide, 6 encoder / 2 decoder layers).
    pub fn full_scale(l_sub: usize) -> Self {
        ModelConfig {
            d_em: 512,
            d_v: 64,
            heads: 8,
            encoder_layers: 6,
            decoder_layers: 2,
            ffn_hidden: 2048,
            clip_c: 10.0,
            l_sub,
            area_scale: 3000.0,
            n_scale: 30.0,
        }
    }

    /// Small configuration that trains in minutes on a CPU.
    pub fn desk(l_sub: usize) -> Self {
        ModelConfig {
            d_em: 64,
            d_v: 8,
            heads: 8,
            encoder_layers: 2,
            decoder_layers: 1,
            ffn_hidden: 256,
            clip_c: 10.0,
            l_sub,
            area_scale: 3000.0,
            n_scale: 30.0,
        }
    }

    /// Width of one cluster token: `l_sub²` candidate points and the cluster
    /// head, three coordinates each, plus the node count.
    pub fn feature_width(&self) -> usize {
        3 * (self.l_sub * self.l_sub + 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_em", self.d_em),
            ("d_v", self.d_v),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_hidden", self.ffn_hidden),
            ("l_sub", self.l_sub),
        ] {
            if v < 1 {
                return Err(Error::param(format!("model.{name} must be ≥ 1, got {v}")));
            }
        }
        for (name, v) in [
            ("clip_c", self.clip_c),
            ("area_scale", self.area_scale),
            ("n_scale", self.n_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::param(format!(
                    "model.{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct NormParams {
    gamma: Tensor,
    beta: Tensor,
}

#[derive(Debug, Clone)]
struct AttentionParams {
    query: Vec<Tensor>,
    key: Vec<Tensor>,
    value: Vec<Tensor>,
    output: Tensor,
}

#[derive(Debug, Clone)]
struct FfnParams {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Debug, Clone)]
struct EncoderLayerParams {
    attn: AttentionParams,
    norm1: NormParams,
    ffn: FfnParams,
    norm2: NormParams,
}

#[derive(Debug, Clone)]
struct DecoderLayerParams {
    self_attn: AttentionParams,
    norm1: NormParams,
    cross_attn: AttentionParams,
    norm2: NormParams,
}

/// Every learnable tensor of the policy, in a fixed traversal order shared
/// by checkpoints, gradient collection, and the optimizer.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    config: ModelConfig,
    start_w: Tensor,
    start_b: Tensor,
    cluster_w: Tensor,
    cluster_b: Tensor,
    encoder: Vec<EncoderLayerParams>,
    decoder: Vec<DecoderLayerParams>,
    out_query: Tensor,
    out_key: Tensor,
}

impl PolicyParams {
    /// Seeded initialization: weights uniform in `±1/√d_em`, normalization
    /// affines at identity.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d_em as f64).sqrt();
        let mut u = |r: usize, c: usize| Tensor::rand_uniform(r, c, -bound, bound, &mut rng);
        let d = config.d_em;
        let f = config.feature_width();

        let start_w = u(3, d);
        let start_b = u(1, d);
        let cluster_w = u(f, d);
        let cluster_b = u(1, d);
        let attn = |u: &mut dyn FnMut(usize, usize) -> Tensor| AttentionParams {
            query: (0..config.heads).map(|_| u(d, config.d_v)).collect(),
            key: (0..config.heads).map(|_| u(d, config.d_v)).collect(),
            value: (0..config.heads).map(|_| u(d, config.d_v)).collect(),
            output: u(config.heads * config.d_v, d),
        };
        let identity_norm = || NormParams {
            gamma: Tensor::from_vec(1, d, vec![1.0; d]).expect("norm affine"),
            beta: Tensor::zeros(1, d),
        };
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderLayerParams {
                attn: attn(&mut u),
                norm1: identity_norm(),
                ffn: FfnParams {
                    w1: u(d, config.ffn_hidden),
                    b1: u(1, config.ffn_hidden),
                    w2: u(config.ffn_hidden, d),
                    b2: u(1, d),
                },
                norm2: identity_norm(),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayerParams {
                self_attn: attn(&mut u),
                norm1: identity_norm(),
                cross_attn: attn(&mut u),
                norm2: identity_norm(),
            })
            .collect();
        let out_query = u(d, d);
        let out_key = u(d, d);

        Ok(PolicyParams {
            config,
            start_w,
            start_b,
            cluster_w,
            cluster_b,
            encoder,
            decoder,
            out_query,
            out_key,
        })
    }

    /// All-zero parameters of the right shapes (checkpoint-loading shell).
    fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_em;
        let f = config.feature_width();
        let attn = || AttentionParams {
            query: (0..config.heads).map(|_| Tensor::zeros(d, config.d_v)).collect(),
            key: (0..config.heads).map(|_| Tensor::zeros(d, config.d_v)).collect(),
            value: (0..config.heads).map(|_| Tensor::zeros(d, config.d_v)).collect(),
            output: Tensor::zeros(config.heads * config.d_v, d),
        };
        let norm = || NormParams {
            gamma: Tensor::zeros(1, d),
            beta: Tensor::zeros(1, d),
        };
        Ok(PolicyParams {
            start_w: Tensor::zeros(3, d),
            start_b: Tensor::zeros(1, d),
            cluster_w: Tensor::zeros(f, d),
            cluster_b: Tensor::zeros(1, d),
            encoder: (0..config.encoder_layers)
                .map(|_| EncoderLayerParams {
                    attn: attn(),
                    norm1: norm(),
                    ffn: FfnParams {
                        w1: Tensor::zeros(d, config.ffn_hidden),
                        b1: Tensor::zeros(1, config.ffn_hidden),
                        w2: Tensor::zeros(config.ffn_hidden, d),
                        b2: Tensor::zeros(1, d),
                    },
                    norm2: norm(),
                })
                .collect(),
            decoder: (0..config.decoder_layers)
                .map(|_| DecoderLayerParams {
                    self_attn: attn(),
                    norm1: norm(),
                    cross_attn: attn(),
                    norm2: norm(),
                })
                .collect(),
            out_query: Tensor::zeros(d, d),
            out_key: Tensor::zeros(d, d),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Named views of every tensor in the canonical traversal order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embed.start.w".into(), &self.start_w));
        out.push(("embed.start.b".into(), &self.start_b));
        out.push(("embed.cluster.w".into(), &self.cluster_w));
        out.push(("embed.cluster.b".into(), &self.cluster_b));
        fn attn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, a: &'a AttentionParams) {
            for (h, t) in a.query.iter().enumerate() {
                out.push((format!("{prefix}.q.{h}"), t));
            }
            for (h, t) in a.key.iter().enumerate() {
                out.push((format!("{prefix}.k.{h}"), t));
            }
            for (h, t) in a.value.iter().enumerate() {
                out.push((format!("{prefix}.v.{h}"), t));
            }
            out.push((format!("{prefix}.out"), &a.output));
        }
        for (i, l) in self.encoder.iter().enumerate() {
            attn(&mut out, &format!("enc.{i}.self"), &l.attn);
            out.push((format!("enc.{i}.norm1.gamma"), &l.norm1.gamma));
            out.push((format!("enc.{i}.norm1.beta"), &l.norm1.beta));
            out.push((format!("enc.{i}.ffn.w1"), &l.ffn.w1));
            out.push((format!("enc.{i}.ffn.b1"), &l.ffn.b1));
            out.push((format!("enc.{i}.ffn.w2"), &l.ffn.w2));
            out.push((format!("enc.{i}.ffn.b2"), &l.ffn.b2));
            out.push((format!("enc.{i}.norm2.gamma"), &l.norm2.gamma));
            out.push((format!("enc.{i}.norm2.beta"), &l.norm2.beta));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            attn(&mut out, &format!("dec.{i}.self"), &l.self_attn);
            out.push((format!("dec.{i}.norm1.gamma"), &l.norm1.gamma));
            out.push((format!("dec.{i}.norm1.beta"), &l.norm1.beta));
            attn(&mut out, &format!("dec.{i}.cross"), &l.cross_attn);
            out.push((format!("dec.{i}.norm2.gamma"), &l.norm2.gamma));
            out.push((format!("dec.{i}.norm2.beta"), &l.norm2.beta));
        }
        out.push(("out.query".into(), &self.out_query));
        out.push(("out.key".into(), &self.out_key));
        out
    }

    /// Mutable variant of [`named_tensors`]; must keep the identical order
    /// (guarded by a unit test).
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embed.start.w".into(), &mut self.start_w));
        out.push(("embed.start.b".into(), &mut self.start_b));
        out.push(("embed.cluster.w".into(), &mut self.cluster_w));
        out.push(("embed.cluster.b".into(), &mut self.cluster_b));
        fn attn<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, a: &'a mut AttentionParams) {
            for (h, t) in a.query.iter_mut().enumerate() {
                out.push((format!("{prefix}.q.{h}"), t));
            }
            for (h, t) in a.key.iter_mut().enumerate() {
                out.push((format!("{prefix}.k.{h}"), t));
            }
            for (h, t) in a.value.iter_mut().enumerate() {
                out.push((format!("{prefix}.v.{h}"), t));
            }
            out.push((format!("{prefix}.out"), &mut a.output));
        }
        for (i, l) in self.encoder.iter_mut().enumerate() {
            attn(&mut out, &format!("enc.{i}.self"), &mut l.attn);
            out.push((format!("enc.{i}.norm1.gamma"), &mut l.norm1.gamma));
            out.push((format!("enc.{i}.norm1.beta"), &mut l.norm1.beta));
            out.push((format!("enc.{i}.ffn.w1"), &mut l.ffn.w1));
            out.push((format!("enc.{i}.ffn.b1"), &mut l.ffn.b1));
            out.push((format!("enc.{i}.ffn.w2"), &mut l.ffn.w2));
            out.push((format!("enc.{i}.ffn.b2"), &mut l.ffn.b2));
            out.push((format!("enc.{i}.norm2.gamma"), &mut l.norm2.gamma));
            out.push((format!("enc.{i}.norm2.beta"), &mut l.norm2.beta));
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            attn(&mut out, &format!("dec.{i}.self"), &mut l.self_attn);
            out.push((format!("dec.{i}.norm1.gamma"), &mut l.norm1.gamma));
            out.push((format!("dec.{i}.norm1.beta"), &mut l.norm1.beta));
            attn(&mut out, &format!("dec.{i}.cross"), &mut l.cross_attn);
            out.push((format!("dec.{i}.norm2.gamma"), &mut l.norm2.gamma));
            out.push((format!("dec.{i}.norm2.beta"), &mut l.norm2.beta));
        }
        out.push(("out.query".into(), &mut self.out_query));
        out.push(("out.key".into(), &mut self.out_key));
        out
    }

    pub fn num_tensors(&self) -> usize {
        self.named_tensors().len()
    }

    /// Writes the configuration (as a JSON record named `config`) and every
    /// parameter tensor to the binary checkpoint container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Checkpoint(format!("cannot serialize model config: {e}")))?;
        let bytes = json.as_bytes();
        let config_tensor = Tensor::from_vec(
            1,
            bytes.len(),
            bytes.iter().map(|&b| f64::from(b)).collect(),
        )?;
        let mut entries: Vec<(String, &Tensor)> = vec![("config".to_string(), &config_tensor)];
        entries.extend(self.named_tensors());
        numerics::save_checkpoint(path, &entries)
    }

    /// Loads a checkpoint written by [`save`]: the `config` record must come
    /// first; every expected tensor must be present with its exact shape and
    /// nothing extra.
    pub fn load(path: &Path) -> Result<Self> {
        let records = numerics::load_checkpoint(path)?;
        let Some((first_name, config_tensor)) = records.first() else {
            return Err(Error::Checkpoint("empty checkpoint".to_string()));
        };
        if first_name != "config" {
            return Err(Error::Checkpoint(format!(
                "first record must be `config`, found `{first_name}`"
            )));
        }
        let mut bytes = Vec::with_capacity(config_tensor.len());
        for &v in config_tensor.values() {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::Checkpoint(format!(
                    "config record holds non-byte value {v}"
                )));
            }
            bytes.push(v as u8);
        }
        let json = String::from_utf8(bytes)
            .map_err(|e| Error::Checkpoint(format!("config record is not UTF-8: {e}")))?;
        let mut de = serde_json::Deserializer::from_str(&json);
        let config: ModelConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            Error::Checkpoint(format!("config record is not a valid model config: {e}"))
        })?;

        let mut params = PolicyParams::zeros(config)?;
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, tensor) in records.into_iter().skip(1) {
            if by_name.insert(name.clone(), tensor).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
            }
        }
        for (name, slot) in params.named_tensors_mut() {
            let Some(loaded) = by_name.remove(&name) else {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            };
            if loaded.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {}×{}, expected {}×{}",
                    loaded.rows(),
                    loaded.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = loaded;
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unknown parameter `{name}` in checkpoint"
            )));
        }
        Ok(params)
    }
}

// ----------------------------------------------------------------------
// Instance features
// ----------------------------------------------------------------------

/// Scaled network inputs: the start token (3 coordinates) and one token per
/// cluster (candidate points, cluster head, node count).
#[derive(Debug, Clone)]
pub struct InstanceFeatures {
    start: Vec<f64>,
    clusters: Vec<Vec<f64>>,
}

impl InstanceFeatures {
    pub fn m(&self) -> usize {
        self.clusters.len()
    }
}

/// Builds the feature tokens for one instance.  Grids with fewer than
/// `l_sub²` points (edge cells dropped from the disk) are padded by
/// repeating the disk-center point so the token width stays fixed.
pub fn instance_features(
    scenario: &Scenario,
    grids: &[CandidateGrid],
    config: &ModelConfig,
) -> Result<InstanceFeatures> {
    let m = scenario.m();
    if grids.len() != m {
        return Err(Error::contract(format!(
            "{} grids for {m} clusters",
            grids.len()
        )));
    }
    let cap = config.l_sub * config.l_sub;
    let s = config.area_scale;
    let start = vec![
        scenario.start.x / s,
        scenario.start.y / s,
        scenario.start.z / s,
    ];
    let mut clusters = Vec::with_capacity(m);
    for (i, (cluster, grid)) in scenario.clusters.iter().zip(grids).enumerate() {
        if grid.cluster_index != i {
            return Err(Error::contract(format!(
                "grid {i} belongs to cluster {}",
                grid.cluster_index
            )));
        }
        if grid.points.is_empty() {
            return Err(Error::Infeasible(format!("cluster {i} has no candidate points")));
        }
        if grid.points.len() > cap {
            return Err(Error::Shape(format!(
                "cluster {i} has {} candidate points but the model expects at most {cap} (grid side {})",
                grid.points.len(),
                config.l_sub
            )));
        }
        let pad = cluster.disk_center(scenario.env.altitude);
        let mut feats = Vec::with_capacity(config.feature_width());
        for k in 0..cap {
            let p = grid.points.get(k).unwrap_or(&pad);
            feats.extend_from_slice(&[p.x / s, p.y / s, p.z / s]);
        }
        feats.extend_from_slice(&[cluster.ch.x / s, cluster.ch.y / s, 0.0]);
        feats.push(f64::from(cluster.node_count) / config.n_scale);
        clusters.push(feats);
    }
    Ok(InstanceFeatures { start, clusters })
}

// ----------------------------------------------------------------------
// Tape-side forward pass
// ----------------------------------------------------------------------

struct AttnIds {
    query: Vec<TensorId>,
    key: Vec<TensorId>,
    value: Vec<TensorId>,
    output: TensorId,
}

struct EncLayerIds {
    attn: AttnIds,
    norm1: (TensorId, TensorId),
    ffn: (TensorId, TensorId, TensorId, TensorId),
    norm2: (TensorId, TensorId),
}

struct DecLayerIds {
    self_attn: AttnIds,
    norm1: (TensorId, TensorId),
    cross_attn: AttnIds,
    norm2: (TensorId, TensorId),
}

struct EmbedIds {
    start_w: TensorId,
    start_b: TensorId,
    cluster_w: TensorId,
    cluster_b: TensorId,
}

struct OutputIds {
    query: TensorId,
    key: TensorId,
}

fn put(tape: &mut Tape, t: &Tensor, trainable: bool, sink: &mut Vec<TensorId>) -> TensorId {
    let id = if trainable {
        tape.param(t.clone())
    } else {
        tape.input(t.clone())
    };
    sink.push(id);
    id
}

fn register_attn(
    tape: &mut Tape,
    a: &AttentionParams,
    trainable: bool,
    sink: &mut Vec<TensorId>,
) -> AttnIds {
    AttnIds {
        query: a.query.iter().map(|t| put(tape, t, trainable, sink)).collect(),
        key: a.key.iter().map(|t| put(tape, t, trainable, sink)).collect(),
        value: a.value.iter().map(|t| put(tape, t, trainable, sink)).collect(),
        output: put(tape, &a.output, trainable, sink),
    }
}

fn register_encoder(
    tape: &mut Tape,
    params: &PolicyParams,
    trainable: bool,
    sink: &mut Vec<TensorId>,
) -> (EmbedIds, Vec<EncLayerIds>) {
    let embed = EmbedIds {
        start_w: put(tape, &params.start_w, trainable, sink),
        start_b: put(tape, &params.start_b, trainable, sink),
        cluster_w: put(tape, &params.cluster_w, trainable, sink),
        cluster_b: put(tape, &params.cluster_b, trainable, sink),
    };
    let layers = params
        .encoder
        .iter()
        .map(|l| EncLayerIds {
            attn: register_attn(tape, &l.attn, trainable, sink),
            norm1: (
                put(tape, &l.norm1.gamma, trainable, sink),
                put(tape, &l.norm1.beta, trainable, sink),
            ),
            ffn: (
                put(tape, &l.ffn.w1, trainable, sink),
                put(tape, &l.ffn.b1, trainable, sink),
                put(tape, &l.ffn.w2, trainable, sink),
                put(tape, &l.ffn.b2, trainable, sink),
            ),
            norm2: (
                put(tape, &l.norm2.gamma, trainable, sink),
                put(tape, &l.norm2.beta, trainable, sink),
            ),
        })
        .collect();
    (embed, layers)
}

fn register_decoder(
    tape: &mut Tape,
    params: &PolicyParams,
    trainable: bool,
    sink: &mut Vec<TensorId>,
) -> (Vec<DecLayerIds>, OutputIds) {
    let layers = params
        .decoder
        .iter()
        .map(|l| DecLayerIds {
            self_attn: register_attn(tape, &l.self_attn, trainable, sink),
            norm1: (
                put(tape, &l.norm1.gamma, trainable, sink),
                put(tape, &l.norm1.beta, trainable, sink),
            ),
            cross_attn: register_attn(tape, &l.cross_attn, trainable, sink),
            norm2: (
                put(tape, &l.norm2.gamma, trainable, sink),
                put(tape, &l.norm2.beta, trainable, sink),
            ),
        })
        .collect();
    let output = OutputIds {
        query: put(tape, &params.out_query, trainable, sink),
        key: put(tape, &params.out_key, trainable, sink),
    };
    (layers, output)
}

/// Multi-head attention: rows of `q_src` attend over rows of `kv_src`.
/// `masked` (one flag per key row) bars keys by driving their scores to −∞.
fn mha_on_tape(
    tape: &mut Tape,
    ids: &AttnIds,
    q_src: TensorId,
    kv_src: TensorId,
    masked: Option<&[bool]>,
    d_v: usize,
) -> Result<TensorId> {
    let q_rows = tape.value(q_src).rows();
    let n = tape.value(kv_src).rows();
    let full_mask: Option<Vec<bool>> = masked.map(|cols| {
        let mut m = Vec::with_capacity(q_rows * n);
        for _ in 0..q_rows {
            m.extend_from_slice(cols);
        }
        m
    });
    let mut heads = Vec::with_capacity(ids.query.len());
    for h in 0..ids.query.len() {
        let q = tape.matmul(q_src, ids.query[h])?;
        let k = tape.matmul(kv_src, ids.key[h])?;
        let v = tape.matmul(kv_src, ids.value[h])?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (d_v as f64).sqrt());
        if let Some(mask) = &full_mask {
            scores = tape.masked_fill(scores, mask, f64::NEG_INFINITY)?;
        }
        let attn = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn, v)?);
    }
    let cat = tape.concat_cols(&heads)?;
    tape.matmul(cat, ids.output)
}

/// Start and cluster tokens through their separate linear embeddings,
/// stacked to `(M+1)×d_em` with the start token first.
fn embed_on_tape(tape: &mut Tape, emb: &EmbedIds, feats: &InstanceFeatures) -> Result<TensorId> {
    let start = tape.input(Tensor::from_vec(1, feats.start.len(), feats.start.clone())?);
    let s_emb = tape.matmul(start, emb.start_w)?;
    let s_emb = tape.add_bias(s_emb, emb.start_b)?;
    let width = feats.clusters[0].len();
    let flat: Vec<f64> = feats.clusters.iter().flatten().copied().collect();
    let clusters = tape.input(Tensor::from_vec(feats.clusters.len(), width, flat)?);
    let c_emb = tape.matmul(clusters, emb.cluster_w)?;
    let c_emb = tape.add_bias(c_emb, emb.cluster_b)?;
    tape.concat_rows(&[s_emb, c_emb])
}

/// Encoder stack: self-attention and feed-forward blocks, each wrapped in a
/// residual connection and a per-feature normalization across tokens.
fn encode_on_tape(
    tape: &mut Tape,
    layers: &[EncLayerIds],
    config: &ModelConfig,
    h0: TensorId,
) -> Result<TensorId> {
    let mut h = h0;
    for l in layers {
        let z = mha_on_tape(tape, &l.attn, h, h, None, config.d_v)?;
        let r = tape.add(h, z)?;
        h = tape.batch_norm_tokens(r, l.norm1.0, l.norm1.1)?;
        let f = tape.matmul(h, l.ffn.0)?;
        let f = tape.add_bias(f, l.ffn.1)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, l.ffn.2)?;
        let f = tape.add_bias(f, l.ffn.3)?;
        let r2 = tape.add(h, f)?;
        h = tape.batch_norm_tokens(r2, l.norm2.0, l.norm2.1)?;
    }
    Ok(h)
}

/// Sinusoidal position codes: dimension `d` (1-based) carries frequency
/// `10000^(−2⌊d/2⌋/d_em)`, sine on even dimensions and cosine on odd ones.
fn positional_encoding(rows: usize, d_em: usize) -> Tensor {
    let mut pe = Tensor::zeros(rows, d_em);
    for pos in 0..rows {
        for j in 0..d_em {
            let d_i = j + 1;
            let omega = 10000f64.powf(-2.0 * ((d_i / 2) as f64) / d_em as f64);
            let phase = omega * pos as f64;
            let v = if d_i % 2 == 0 { phase.sin() } else { phase.cos() };
            pe.set(pos, j, v);
        }
    }
    pe
}

/// One decoding step: the chosen prefix (encoder rows plus position codes)
/// feeds the decoder layers — self-attention queried by the running context
/// over the prefix, then visited-masked cross-attention over the encoder
/// output — and a single-head pointer layer turns the result into a
/// distribution over the elements, with exact zeros on visited ones.
fn decode_step_on_tape(
    tape: &mut Tape,
    dec: &[DecLayerIds],
    out: &OutputIds,
    config: &ModelConfig,
    h6: TensorId,
    prefix: &[usize],
    visited: &[bool],
) -> Result<TensorId> {
    let elements = tape.value(h6).rows();
    if visited.len() != elements {
        return Err(Error::contract(format!(
            "visited mask of {} for {} elements",
            visited.len(),
            elements
        )));
    }
    if prefix.is_empty() {
        return Err(Error::contract("decode prefix is empty"));
    }
    if visited.iter().all(|&v| v) {
        return Err(Error::contract("every element is already visited"));
    }
    let pe = positional_encoding(prefix.len(), config.d_em);
    let pe = tape.input(pe);
    let rows = tape.gather_rows(h6, prefix)?;
    let prefix_mat = tape.add(rows, pe)?;
    let mut ctx = tape.gather_rows(prefix_mat, &[prefix.len() - 1])?;
    for l in dec {
        let z = mha_on_tape(tape, &l.self_attn, ctx, prefix_mat, None, config.d_v)?;
        let r = tape.add(ctx, z)?;
        ctx = tape.layer_norm_rows(r, l.norm1.0, l.norm1.1)?;
        let z2 = mha_on_tape(tape, &l.cross_attn, ctx, h6, Some(visited), config.d_v)?;
        let r2 = tape.add(ctx, z2)?;
        ctx = tape.layer_norm_rows(r2, l.norm2.0, l.norm2.1)?;
    }
    let qh = tape.matmul(ctx, out.query)?;
    let kh = tape.matmul(h6, out.key)?;
    let kt = tape.transpose(kh);
    let u = tape.matmul(qh, kt)?;
    let u = tape.scale(u, 1.0 / (config.d_em as f64).sqrt());
    let u = tape.tanh(u);
    let u = tape.scale(u, config.clip_c);
    let u = tape.masked_fill(u, visited, f64::NEG_INFINITY)?;
    tape.softmax_rows(u)
}

// ----------------------------------------------------------------------
// Inference
// ----------------------------------------------------------------------

/// Encoder output for one instance, reusable across decoding steps.
#[derive(Debug, Clone)]
pub struct EncodedInstance {
    h6: Tensor,
}

impl EncodedInstance {
    /// Elements in the pointer vocabulary: start plus M clusters.
    pub fn elements(&self) -> usize {
        self.h6.rows()
    }
}

/// Embeds the tokens of one instance (no attention layers) — exposed for
/// structural checks.
pub fn embed_features(params: &PolicyParams, feats: &InstanceFeatures) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut sink = Vec::new();
    let (emb, _) = register_encoder(&mut tape, params, false, &mut sink);
    let h0 = embed_on_tape(&mut tape, &emb, feats)?;
    Ok(tape.value(h0).clone())
}

/// Runs the full encoder once for an instance.
pub fn encode_instance(
    params: &PolicyParams,
    scenario: &Scenario,
    grids: &[CandidateGrid],
) -> Result<EncodedInstance> {
    let feats = instance_features(scenario, grids, &params.config)?;
    encode_features(params, &feats)
}

/// As [`encode_instance`] for pre-built features.
pub fn encode_features(params: &PolicyParams, feats: &InstanceFeatures) -> Result<EncodedInstance> {
    let mut tape = Tape::new();
    let mut sink = Vec::new();
    let (emb, layers) = register_encoder(&mut tape, params, false, &mut sink);
    let h0 = embed_on_tape(&mut tape, &emb, feats)?;
    let h6 = encode_on_tape(&mut tape, &layers, &params.config, h0)?;
    Ok(EncodedInstance {
        h6: tape.value(h6).clone(),
    })
}

/// Distribution over the next element given the visited mask and the chosen
/// prefix (element indices, start = 0).  Visited entries are exactly zero.
pub fn step_distribution(
    params: &PolicyParams,
    enc: &EncodedInstance,
    prefix: &[usize],
    visited: &[bool],
) -> Result<Vec<f64>> {
    if let Some(&bad) = prefix.iter().find(|&&e| e >= enc.elements()) {
        return Err(Error::Index(format!(
            "prefix element {bad} outside 0..{}",
            enc.elements()
        )));
    }
    let mut tape = Tape::new();
    let mut sink = Vec::new();
    let (dec, out) = register_decoder(&mut tape, params, false, &mut sink);
    let h6 = tape.input(enc.h6.clone());
    let probs = decode_step_on_tape(&mut tape, &dec, &out, &params.config, h6, prefix, visited)?;
    Ok(tape.value(probs).values().to_vec())
}

/// A complete visiting order (cluster indices, start excluded) with the
/// chain-rule log-probability of having decoded it.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedOrder {
    pub order: Vec<usize>,
    pub log_prob: f64,
}

/// Greedy decoding: the highest-probability unvisited element at every
/// step, ties to the lowest index.  Deterministic.
pub fn decode_greedy(
    params: &PolicyParams,
    scenario: &Scenario,
    grids: &[CandidateGrid],
) -> Result<DecodedOrder> {
    let enc = encode_instance(params, scenario, grids)?;
    decode_greedy_encoded(params, &enc)
}

/// As [`decode_greedy`] when the encoder output is already at hand.
pub fn decode_greedy_encoded(params: &PolicyParams, enc: &EncodedInstance) -> Result<DecodedOrder> {
    let n = enc.elements();
    let mut visited = vec![false; n];
    visited[0] = true;
    let mut prefix = vec![0usize];
    let mut order = Vec::with_capacity(n - 1);
    let mut log_prob = 0.0;
    for _ in 1..n {
        let probs = step_distribution(params, enc, &prefix, &visited)?;
        let mut best: Option<(usize, f64)> = None;
        for (j, &p) in probs.iter().enumerate() {
            if !visited[j] && best.map_or(true, |(_, bp)| p > bp) {
                best = Some((j, p));
            }
        }
        let (j, p) = best.expect("at least one unvisited element");
        log_prob += p.ln();
        visited[j] = true;
        prefix.push(j);
        order.push(j - 1);
    }
    Ok(DecodedOrder { order, log_prob })
}

/// Draws `count` complete orders from the step distributions.  One encoder
/// pass; reproducible from the seed.
pub fn sample_orders(
    params: &PolicyParams,
    scenario: &Scenario,
    grids: &[CandidateGrid],
    count: usize,
    seed: u64,
) -> Result<Vec<DecodedOrder>> {
    if count < 1 {
        return Err(Error::param(format!("sample count must be ≥ 1, got {count}")));
    }
    let enc = encode_instance(params, scenario, grids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = enc.elements();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut visited = vec![false; n];
        visited[0] = true;
        let mut prefix = vec![0usize];
        let mut order = Vec::with_capacity(n - 1);
        let mut log_prob = 0.0;
        for _ in 1..n {
            let probs = step_distribution(params, &enc, &prefix, &visited)?;
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut chosen = None;
            for (j, &p) in probs.iter().enumerate() {
                if visited[j] {
                    continue;
                }
                cum += p;
                if u < cum {
                    chosen = Some(j);
                    break;
                }
            }
            let j = match chosen {
                Some(j) => j,
                // Cumulative roundoff can leave u just past the final mass.
                None => (0..n).rev().find(|&j| !visited[j]).expect("unvisited element"),
            };
            log_prob += probs[j].ln();
            visited[j] = true;
            prefix.push(j);
            order.push(j - 1);
        }
        out.push(DecodedOrder { order, log_prob });
    }
    Ok(out)
}

/// How [`decode_sample`] picks among its drawn orders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleSelection {
    /// Refine every sampled order with weighted A* and keep the lowest
    /// total age (the default deployment mode).
    MinTotalAoi { omega: f64 },
    /// Keep the sample with the highest chain-rule probability.
    MaxProbability,
}

/// Sampling decode: draws `width` orders and selects per `selection`.
pub fn decode_sample(
    params: &PolicyParams,
    scenario: &Scenario,
    grids: &[CandidateGrid],
    width: usize,
    seed: u64,
    selection: SampleSelection,
) -> Result<DecodedOrder> {
    let samples = sample_orders(params, scenario, grids, width, seed)?;
    match selection {
        SampleSelection::MaxProbability => {
            let mut best = samples[0].clone();
            for s in &samples[1..] {
                if s.log_prob > best.log_prob {
                    best = s.clone();
                }
            }
            Ok(best)
        }
        SampleSelection::MinTotalAoi { omega } => {
            let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
            let mut best: Option<(f64, DecodedOrder)> = None;
            for s in samples {
                let cost = match cache.get(&s.order) {
                    Some(&c) => c,
                    None => {
                        let (_, c) = router::plan_with_order(scenario, grids, &s.order, omega)?;
                        cache.insert(s.order.clone(), c);
                        c
                    }
                };
                if best.as_ref().map_or(true, |(bc, _)| cost < *bc) {
                    best = Some((cost, s));
                }
            }
            Ok(best.expect("width ≥ 1").1)
        }
    }
}

/// Beam-search decode over cumulative log-probability.  Width 1 reproduces
/// greedy decoding exactly; width ≥ M! enumerates every order.
pub fn decode_beam(
    params: &PolicyParams,
    scenario: &Scenario,
    grids: &[CandidateGrid],
    width: usize,
) -> Result<DecodedOrder> {
    if width < 1 {
        return Err(Error::param(format!("beam width must be ≥ 1, got {width}")));
    }
    let enc = encode_instance(params, scenario, grids)?;
    let n = enc.elements();

    struct Beam {
        prefix: Vec<usize>,
        visited: Vec<bool>,
        log_prob: f64,
    }
    let mut visited0 = vec![false; n];
    visited0[0] = true;
    let mut beams = vec![Beam {
        prefix: vec![0],
        visited: visited0,
        log_prob: 0.0,
    }];
    for _ in 1..n {
        // (cumulative log-prob, parent rank, element) — sorted best-first
        // with the same tie-breaks as greedy so width 1 coincides.
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            let probs = step_distribution(params, &enc, &b.prefix, &b.visited)?;
            for (j, &p) in probs.iter().enumerate() {
                if !b.visited[j] {
                    cands.push((b.log_prob + p.ln(), bi, j));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(width);
        beams = cands
            .into_iter()
            .map(|(lp, bi, j)| {
                let parent = &beams[bi];
                let mut prefix = parent.prefix.clone();
                prefix.push(j);
                let mut visited = parent.visited.clone();
                visited[j] = true;
                Beam {
                    prefix,
                    visited,
                    log_prob: lp,
                }
            })
            .collect();
    }
    let best = &beams[0];
    Ok(DecodedOrder {
        order: best.prefix[1..].iter().map(|&e| e - 1).collect(),
        log_prob: best.log_prob,
    })
}

// ----------------------------------------------------------------------
// Differentiable log-probability
// ----------------------------------------------------------------------

/// A recorded forward pass of the full chain-rule log-probability, ready
/// for one backward sweep.
pub struct LogProbTape {
    pub tape: Tape,
    /// The scalar log-probability node.
    pub log_prob: TensorId,
    /// Every parameter's tape handle, in [`PolicyParams::named_tensors`]
    /// order (empty when recorded without gradients).
    pub param_ids: Vec<TensorId>,
}

/// Records log P(order) on a fresh tape.  With `trainable` set, parameters
/// are registered for gradients in the canonical order.
pub fn log_prob_tape(
    params: &PolicyParams,
    scenario: &Scenario,
    grids: &[CandidateGrid],
    order: &[usize],
    trainable: bool,
) -> Result<LogProbTape> {
    let m = scenario.m();
    validate_order(order, m)?;
    let feats = instance_features(scenario, grids, &params.config)?;
    let mut tape = Tape::new();
    let mut sink = Vec::new();
    let (emb, enc_layers) = register_encoder(&mut tape, params, trainable, &mut sink);
    let (dec_layers, out) = register_decoder(&mut tape, params, trainable, &mut sink);
    let h0 = embed_on_tape(&mut tape, &emb, &feats)?;
    let h6 = encode_on_tape(&mut tape, &enc_layers, &params.config, h0)?;

    let mut visited = vec![false; m + 1];
    visited[0] = true;
    let mut prefix = vec![0usize];
    let mut log_prob: Option<TensorId> = None;
    for &cluster in order {
        let element = cluster + 1;
        let probs = decode_step_on_tape(
            &mut tape,
            &dec_layers,
            &out,
            &params.config,
            h6,
            &prefix,
            &visited,
        )?;
        let p = tape.entry(probs, 0, element)?;
        let lp = tape.log(p)?;
        log_prob = Some(match log_prob {
            None => lp,
            Some(acc) => tape.add(acc, lp)?,
        });
        visited[element] = true;
        prefix.push(element);
    }
    Ok(LogProbTape {
        tape,
        log_prob: log_prob.expect("M ≥ 1"),
        param_ids: sink,
    })
}

/// Chain-rule log-probability of a complete order (forward only).
pub fn log_prob(
    params: &PolicyParams,
    scenario: &Scenario,
    grids: &[CandidateGrid],
    order: &[usize],
) -> Result<f64> {
    let lt = log_prob_tape(params, scenario, grids, order, false)?;
    lt.tape.value(lt.log_prob).scalar()
}

/// A visiting order must list each cluster exactly once.
fn validate_order(order: &[usize], m: usize) -> Result<()> {
    if order.len() != m {
        return Err(Error::contract(format!(
            "order visits {} clusters, scenario has {m}",
            order.len()
        )));
    }
    let mut seen = vec![false; m];
    for &c in order {
        if c >= m {
            return Err(Error::Index(format!("cluster {c} outside 0..{m}")));
        }
        if seen[c] {
            return Err(Error::contract(format!("cluster {c} visited twice")));
        }
        seen[c] = true;
    }
    Ok(())
}
