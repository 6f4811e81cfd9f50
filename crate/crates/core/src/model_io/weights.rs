// SPDX-License-Identifier: MIT OR Apache-2.0

//! Typed model weights: architecture constants, per-head attention slices,
//! and the assembled [`Model`] the runtime evaluates.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr_lite::normal_matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::{ArchitectureMap, Role};
use super::container::{encode_tensors, load_tensors, TensorStore, TensorView};
use crate::error::{ChannelError, Result};

/// Architecture constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads_per_layer: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub ln_eps: f32,
}

impl ModelConfig {
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            n_heads_per_layer: 12,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            vocab_size: 50257,
            n_ctx: 1024,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_layers,
            self.n_heads_per_layer,
            self.d_model,
            self.d_head,
            self.d_mlp,
            self.vocab_size,
            self.n_ctx,
        ];
        if counts.contains(&0) {
            return Err(ChannelError::Config(format!("all counts must be positive: {self:?}")));
        }
        if self.d_model != self.n_heads_per_layer * self.d_head {
            return Err(ChannelError::Config(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads_per_layer, self.d_head
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(ChannelError::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }

    /// Parse a Hugging Face style `config.json` (`n_layer`, `n_head`, ...).
    pub fn from_hf_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Hf {
            n_layer: usize,
            n_head: usize,
            n_embd: usize,
            vocab_size: usize,
            n_positions: usize,
            #[serde(default)]
            n_inner: Option<usize>,
            #[serde(default = "default_eps")]
            layer_norm_epsilon: f32,
        }
        fn default_eps() -> f32 {
            1e-5
        }
        let hf: Hf = serde_json::from_str(text)?;
        if hf.n_head == 0 || !hf.n_embd.is_multiple_of(hf.n_head) {
            return Err(ChannelError::Config(format!(
                "n_embd {} not divisible by n_head {}",
                hf.n_embd, hf.n_head
            )));
        }
        let cfg = Self {
            n_layers: hf.n_layer,
            n_heads_per_layer: hf.n_head,
            d_model: hf.n_embd,
            d_head: hf.n_embd / hf.n_head,
            d_mlp: hf.n_inner.unwrap_or(4 * hf.n_embd),
            vocab_size: hf.vocab_size,
            n_ctx: hf.n_positions,
            ln_eps: hf.layer_norm_epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_hf_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model_type": "gpt2",
            "n_layer": self.n_layers,
            "n_head": self.n_heads_per_layer,
            "n_embd": self.d_model,
            "n_inner": self.d_mlp,
            "vocab_size": self.vocab_size,
            "n_positions": self.n_ctx,
            "layer_norm_epsilon": self.ln_eps,
            "activation_function": "gelu_new",
        })
    }

    pub(crate) fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(ChannelError::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.n_layers,
            });
        }
        if head >= self.n_heads_per_layer {
            return Err(ChannelError::OutOfRange {
                what: "head",
                index: head,
                limit: self.n_heads_per_layer,
            });
        }
        Ok(())
    }
}

/// One attention head's slice of the fused projections.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub layer: usize,
    pub head: usize,
    /// `d_model × d_head`
    pub read_q: Array2<f32>,
    pub read_k: Array2<f32>,
    pub read_v: Array2<f32>,
    /// `d_head × d_model`
    pub write_o: Array2<f32>,
    pub bias_q: Array1<f32>,
    pub bias_k: Array1<f32>,
    pub bias_v: Array1<f32>,
    /// Output bias shared by every head of the layer.
    pub bias_o: Array1<f32>,
    /// Pre-attention layer-norm gain.
    pub ln_gain: Array1<f32>,
}

/// Slice head `(layer, head)` out of the fused checkpoint tensors.
pub fn extract_head_weights(
    store: &TensorStore,
    config: &ModelConfig,
    layer: usize,
    head: usize,
) -> Result<HeadWeights> {
    config.check_head(layer, head)?;
    let map = ArchitectureMap::detect(store);
    let qkv = store.matrix(&map.name(Role::QkvWeight(layer)))?;
    let qkv_bias = store.vector(&map.name(Role::QkvBias(layer)))?;
    let out = store.matrix(&map.name(Role::AttnOutWeight(layer)))?;
    let out_bias = store.vector(&map.name(Role::AttnOutBias(layer)))?;
    let ln_gain = store.vector(&map.name(Role::Ln1Gain(layer)))?;
    slice_head(config, layer, head, &qkv, &qkv_bias, &out, &out_bias, &ln_gain)
}

#[allow(clippy::too_many_arguments)]
fn slice_head(
    config: &ModelConfig,
    layer: usize,
    head: usize,
    qkv: &Array2<f32>,
    qkv_bias: &Array1<f32>,
    out: &Array2<f32>,
    out_bias: &Array1<f32>,
    ln_gain: &Array1<f32>,
) -> Result<HeadWeights> {
    let d = config.d_model;
    let dh = config.d_head;
    expect_shape("fused qkv weight", qkv.shape(), &[d, 3 * d])?;
    expect_shape("fused qkv bias", qkv_bias.shape(), &[3 * d])?;
    expect_shape("attention output weight", out.shape(), &[d, d])?;
    expect_shape("attention output bias", out_bias.shape(), &[d])?;
    expect_shape("ln_1 gain", ln_gain.shape(), &[d])?;
    let col = |block: usize| block * d + head * dh..block * d + (head + 1) * dh;
    Ok(HeadWeights {
        layer,
        head,
        read_q: qkv.slice(s![.., col(0)]).to_owned(),
        read_k: qkv.slice(s![.., col(1)]).to_owned(),
        read_v: qkv.slice(s![.., col(2)]).to_owned(),
        write_o: out.slice(s![head * dh..(head + 1) * dh, ..]).to_owned(),
        bias_q: qkv_bias.slice(s![col(0)]).to_owned(),
        bias_k: qkv_bias.slice(s![col(1)]).to_owned(),
        bias_v: qkv_bias.slice(s![col(2)]).to_owned(),
        bias_o: out_bias.clone(),
        ln_gain: ln_gain.clone(),
    })
}

fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(ChannelError::Shape(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f32>,
    pub bias: Array1<f32>,
}

/// Everything in a block except the per-head attention slices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub attn_out_bias: Array1<f32>,
    /// `d_model × d_mlp`
    pub mlp_in: Array2<f32>,
    pub mlp_in_bias: Array1<f32>,
    /// `d_mlp × d_model`
    pub mlp_out: Array2<f32>,
    pub mlp_out_bias: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// `vocab × d_model`
    pub token: Array2<f32>,
    /// `n_ctx × d_model`
    pub position: Array2<f32>,
    /// `vocab × d_model`; `None` when tied to `token`.
    pub unembed: Option<Array2<f32>>,
}

impl Embeddings {
    pub fn unembedding(&self) -> &Array2<f32> {
        self.unembed.as_ref().unwrap_or(&self.token)
    }
}

/// A loaded model. Large tensors sit behind `Arc` so clones (and edited
/// variants) share everything they do not replace.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Arc<Embeddings>,
    pub blocks: Vec<Arc<BlockWeights>>,
    /// `heads[layer][head]`
    pub heads: Vec<Vec<Arc<HeadWeights>>>,
    pub final_ln: Arc<LayerNorm>,
    /// Identifies the weights this model was built from.
    pub checkpoint_id: String,
}

impl Model {
    pub fn head(&self, layer: usize, head: usize) -> Result<&HeadWeights> {
        self.config.check_head(layer, head)?;
        Ok(&self.heads[layer][head])
    }

    /// Build a model from a tensor store.
    pub fn from_store(store: &TensorStore, config: ModelConfig, checkpoint_id: String) -> Result<Self> {
        config.validate()?;
        let map = ArchitectureMap::detect(store);
        let missing = map.missing(store, config.n_layers);
        if let Some(first) = missing.first() {
            return Err(ChannelError::MissingTensor(first.clone()));
        }
        let token = store.matrix(&map.name(Role::TokenEmbedding))?;
        expect_shape("token embedding", token.shape(), &[config.vocab_size, config.d_model])?;
        let position = store.matrix(&map.name(Role::PositionEmbedding))?;
        if position.ncols() != config.d_model || position.nrows() < config.n_ctx {
            return Err(ChannelError::Shape(format!(
                "position embedding {:?} incompatible with n_ctx {} / d_model {}",
                position.shape(),
                config.n_ctx,
                config.d_model
            )));
        }
        let unembed_name = map.name(Role::Unembedding);
        let unembed = if store.contains(&unembed_name) {
            let u = store.matrix(&unembed_name)?;
            if u == token {
                None
            } else {
                expect_shape("unembedding", u.shape(), &[config.vocab_size, config.d_model])?;
                Some(u)
            }
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(config.n_layers);
        let mut heads = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ln1 = LayerNorm {
                gain: store.vector(&map.name(Role::Ln1Gain(l)))?,
                bias: store.vector(&map.name(Role::Ln1Bias(l)))?,
            };
            let qkv = store.matrix(&map.name(Role::QkvWeight(l)))?;
            let qkv_bias = store.vector(&map.name(Role::QkvBias(l)))?;
            let out = store.matrix(&map.name(Role::AttnOutWeight(l)))?;
            let out_bias = store.vector(&map.name(Role::AttnOutBias(l)))?;
            let layer_heads = (0..config.n_heads_per_layer)
                .map(|h| slice_head(&config, l, h, &qkv, &qkv_bias, &out, &out_bias, &ln1.gain).map(Arc::new))
                .collect::<Result<Vec<_>>>()?;
            heads.push(layer_heads);

            let block = BlockWeights {
                ln2: LayerNorm {
                    gain: store.vector(&map.name(Role::Ln2Gain(l)))?,
                    bias: store.vector(&map.name(Role::Ln2Bias(l)))?,
                },
                ln1,
                attn_out_bias: out_bias,
                mlp_in: store.matrix(&map.name(Role::MlpInWeight(l)))?,
                mlp_in_bias: store.vector(&map.name(Role::MlpInBias(l)))?,
                mlp_out: store.matrix(&map.name(Role::MlpOutWeight(l)))?,
                mlp_out_bias: store.vector(&map.name(Role::MlpOutBias(l)))?,
            };
            expect_shape("mlp in", block.mlp_in.shape(), &[config.d_model, config.d_mlp])?;
            expect_shape("mlp out", block.mlp_out.shape(), &[config.d_mlp, config.d_model])?;
            blocks.push(Arc::new(block));
        }
        let final_ln = LayerNorm {
            gain: store.vector(&map.name(Role::FinalLnGain))?,
            bias: store.vector(&map.name(Role::FinalLnBias))?,
        };
        Ok(Self {
            config,
            embed: Arc::new(Embeddings {
                token,
                position: position.slice(s![..config.n_ctx, ..]).to_owned(),
                unembed,
            }),
            blocks,
            heads,
            final_ln: Arc::new(final_ln),
            checkpoint_id,
        })
    }

    /// Load `model.safetensors` (+ `config.json` when present) from a
    /// directory. Without a config file the GPT-2 small constants are used.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let weights = dir.join("model.safetensors");
        let config_path = dir.join("config.json");
        let config = if config_path.exists() {
            let text = std::fs::read_to_string(&config_path).map_err(|e| ChannelError::io(&config_path, e))?;
            ModelConfig::from_hf_json(&text)?
        } else {
            ModelConfig::gpt2_small()
        };
        Self::load_file(&weights, config)
    }

    pub fn load_file(path: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let store = load_tensors(path)?;
        let id = file_sha256(path)?;
        Self::from_store(&store, config, id)
    }

    /// GPT-2 style random initialization (normal weights, std 0.02; unit
    /// layer-norm gains; zero biases).
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02f32;
        let ones = Array1::<f32>::ones(d);
        let zeros = Array1::<f32>::zeros(d);
        let ln = || LayerNorm { gain: ones.clone(), bias: zeros.clone() };
        let token = normal_matrix(&mut rng, config.vocab_size, d, std);
        let position = normal_matrix(&mut rng, config.n_ctx, d, std);
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        for l in 0..config.n_layers {
            let qkv = normal_matrix(&mut rng, d, 3 * d, std);
            let out = normal_matrix(&mut rng, d, d, std);
            let qkv_bias = Array1::zeros(3 * d);
            let lnl = ln();
            heads.push(
                (0..config.n_heads_per_layer)
                    .map(|h| slice_head(&config, l, h, &qkv, &qkv_bias, &out, &zeros, &lnl.gain).map(Arc::new))
                    .collect::<Result<Vec<_>>>()?,
            );
            blocks.push(Arc::new(BlockWeights {
                ln1: lnl,
                ln2: ln(),
                attn_out_bias: zeros.clone(),
                mlp_in: normal_matrix(&mut rng, d, config.d_mlp, std),
                mlp_in_bias: Array1::zeros(config.d_mlp),
                mlp_out: normal_matrix(&mut rng, config.d_mlp, d, std),
                mlp_out_bias: zeros.clone(),
            }));
        }
        Ok(Self {
            config,
            embed: Arc::new(Embeddings { token, position, unembed: None }),
            blocks,
            heads,
            final_ln: Arc::new(ln()),
            checkpoint_id: format!("random-init:{seed}"),
        })
    }

    /// Re-fuse per-head slices into the layer's `d × 3d` qkv weight and
    /// `3d` bias.
    pub fn fused_qkv(&self, layer: usize) -> Result<(Array2<f32>, Array1<f32>)> {
        self.config.check_head(layer, 0)?;
        let d = self.config.d_model;
        let dh = self.config.d_head;
        let mut w = Array2::zeros((d, 3 * d));
        let mut b = Array1::zeros(3 * d);
        for (h, hw) in self.heads[layer].iter().enumerate() {
            for (block, (m, bias)) in [(&hw.read_q, &hw.bias_q), (&hw.read_k, &hw.bias_k), (&hw.read_v, &hw.bias_v)]
                .into_iter()
                .enumerate()
            {
                let cols = block * d + h * dh..block * d + (h + 1) * dh;
                w.slice_mut(s![.., cols.clone()]).assign(m);
                b.slice_mut(s![cols]).assign(bias);
            }
        }
        Ok((w, b))
    }

    /// Re-stack per-head output slices into the layer's `d × d` weight.
    pub fn fused_attn_out(&self, layer: usize) -> Result<Array2<f32>> {
        self.config.check_head(layer, 0)?;
        let views: Vec<_> = self.heads[layer].iter().map(|h| h.write_o.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| ChannelError::Shape(e.to_string()))
    }

    /// Serialize to the container layout under GPT-2 tensor names.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let map = ArchitectureMap::gpt2();
        let mut owned: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        let mut push2 = |role: Role, m: &Array2<f32>| {
            owned.push((map.name(role), m.shape().to_vec(), m.iter().copied().collect()));
        };
        push2(Role::TokenEmbedding, &self.embed.token);
        push2(Role::PositionEmbedding, &self.embed.position);
        if let Some(u) = &self.embed.unembed {
            push2(Role::Unembedding, u);
        }
        let mut fused = Vec::new();
        for l in 0..self.config.n_layers {
            let (qkv, qkv_b) = self.fused_qkv(l)?;
            fused.push((l, qkv, qkv_b, self.fused_attn_out(l)?));
        }
        for (l, qkv, _, out) in &fused {
            push2(Role::QkvWeight(*l), qkv);
            push2(Role::AttnOutWeight(*l), out);
            push2(Role::MlpInWeight(*l), &self.blocks[*l].mlp_in);
            push2(Role::MlpOutWeight(*l), &self.blocks[*l].mlp_out);
        }
        let mut push1 = |role: Role, v: &Array1<f32>| {
            owned.push((map.name(role), vec![v.len()], v.to_vec()));
        };
        for (l, _, qkv_b, _) in &fused {
            let b = &self.blocks[*l];
            push1(Role::QkvBias(*l), qkv_b);
            push1(Role::AttnOutBias(*l), &b.attn_out_bias);
            push1(Role::Ln1Gain(*l), &b.ln1.gain);
            push1(Role::Ln1Bias(*l), &b.ln1.bias);
            push1(Role::Ln2Gain(*l), &b.ln2.gain);
            push1(Role::Ln2Bias(*l), &b.ln2.bias);
            push1(Role::MlpInBias(*l), &b.mlp_in_bias);
            push1(Role::MlpOutBias(*l), &b.mlp_out_bias);
        }
        push1(Role::FinalLnGain, &self.final_ln.gain);
        push1(Role::FinalLnBias, &self.final_ln.bias);
        let views: Vec<TensorView<'_>> = owned
            .iter()
            .map(|(n, s, d)| TensorView { name: n, shape: s.clone(), data: d })
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "pt".to_string());
        encode_tensors(&views, &meta)
    }

    /// Write `model.safetensors` and `config.json` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| ChannelError::io(dir, e))?;
        let weights = dir.join("model.safetensors");
        std::fs::write(&weights, self.encode()?).map_err(|e| ChannelError::io(&weights, e))?;
        let cfg = dir.join("config.json");
        std::fs::write(&cfg, serde_json::to_vec_pretty(&self.config.to_hf_json())?)
            .map_err(|e| ChannelError::io(&cfg, e))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use std::io::Read;
    let mut file = std::fs::File::open(path).map_err(|e| ChannelError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| ChannelError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Box-Muller normal sampling; avoids pulling in a distributions crate for
/// one initializer.
mod rand_distr_lite {
    use ndarray::Array2;
    use rand::Rng;

    pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f32) -> Array2<f32> {
        Array2::from_shape_simple_fn((rows, cols), || std * standard_normal(rng))
    }

    pub fn standard_normal<R: Rng>(rng: &mut R) -> f32 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }
}
