//! The BEAT-Net encoder stack.
//!
//! ```text
//! tokens [S, L] ─ word encoder (conv stem + residual blocks + projection) ─ Z [S, D]
//!   ─ spatial:  Z ⊙ γ[lead] + β[lead]
//!   ─ temporal: + e[beat]
//!   ─ pre-norm transformer with padding mask ─ pool ─ MLP ─ K logits
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_archive, write_archive, Archive, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;
use crate::FORMAT_VERSION;

const LN_EPS: f64 = 1e-5;

/// How the transformer output is reduced to one vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

/// How the word encoder reduces its feature map over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordPooling {
    /// Keep the time axis: features are flattened before the projection, so
    /// the embedding knows where inside the window a deflection sits.
    #[default]
    Flatten,
    /// Global average over time.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_leads: usize,
    pub token_len: usize,
    pub seq_len: usize,
    pub max_time_blocks: usize,
    pub word_blocks: usize,
    pub word_channels: usize,
    pub word_kernel: usize,
    pub word_pooling: WordPooling,
    pub tx_layers: usize,
    pub tx_heads: usize,
    pub tx_ff_dim: usize,
    pub n_labels: usize,
    pub use_spatial: bool,
    pub use_temporal: bool,
    pub pool: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_leads: 12,
            token_len: 96,
            seq_len: 256,
            max_time_blocks: 64,
            word_blocks: 3,
            word_channels: 32,
            word_kernel: 7,
            word_pooling: WordPooling::Flatten,
            tx_layers: 4,
            tx_heads: 4,
            tx_ff_dim: 256,
            n_labels: 5,
            use_spatial: true,
            use_temporal: true,
            pool: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_leads", self.n_leads),
            ("seq_len", self.seq_len),
            ("max_time_blocks", self.max_time_blocks),
            ("word_channels", self.word_channels),
            ("word_kernel", self.word_kernel),
            ("tx_heads", self.tx_heads),
            ("tx_ff_dim", self.tx_ff_dim),
            ("n_labels", self.n_labels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid("model config", format!("{name} must be >= 1")));
        }
        if self.token_len < 2 || self.token_len % 2 != 0 {
            return Err(Error::invalid("token_len", format!("{} must be even and >= 2", self.token_len)));
        }
        if self.word_kernel % 2 == 0 {
            return Err(Error::invalid("word_kernel", "must be odd"));
        }
        if self.d_model % self.tx_heads != 0 {
            return Err(Error::invalid(
                "tx_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.tx_heads),
            ));
        }
        Ok(())
    }

    /// Length of the word-encoder feature map after the stride-2 stem.
    fn word_len(&self) -> usize {
        let pad = self.word_kernel / 2;
        (self.token_len + 2 * pad - self.word_kernel) / 2 + 1
    }

    fn word_features(&self) -> usize {
        match self.word_pooling {
            WordPooling::Flatten => self.word_channels * self.word_len(),
            WordPooling::Mean => self.word_channels,
        }
    }

    /// Name and shape of every learnable tensor, in name order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, ch) = (self.d_model, self.word_channels);
        let mut s = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            s.insert(name, shape);
        };
        put("word.stem.weight".into(), vec![ch, 1, self.word_kernel]);
        put("word.stem.bias".into(), vec![ch]);
        for b in 0..self.word_blocks {
            for conv in ["conv1", "conv2"] {
                put(format!("word.block{b}.{conv}.weight"), vec![ch, ch, 3]);
                put(format!("word.block{b}.{conv}.bias"), vec![ch]);
            }
        }
        put("word.proj.weight".into(), vec![self.word_features(), d]);
        put("word.proj.bias".into(), vec![d]);
        if self.use_spatial {
            put("spatial.gamma".into(), vec![self.n_leads, d]);
            put("spatial.beta".into(), vec![self.n_leads, d]);
        }
        if self.use_temporal {
            put("temporal.embed".into(), vec![self.max_time_blocks, d]);
        }
        if self.pool == Pooling::Cls {
            put("cls.token".into(), vec![1, d]);
        }
        for l in 0..self.tx_layers {
            let p = format!("tx.layer{l}");
            for ln in ["ln1", "ln2"] {
                put(format!("{p}.{ln}.gamma"), vec![d]);
                put(format!("{p}.{ln}.beta"), vec![d]);
            }
            for w in ["q", "k", "v", "o"] {
                put(format!("{p}.attn.w{w}"), vec![d, d]);
                put(format!("{p}.attn.b{w}"), vec![d]);
            }
            put(format!("{p}.ff1.weight"), vec![d, self.tx_ff_dim]);
            put(format!("{p}.ff1.bias"), vec![self.tx_ff_dim]);
            put(format!("{p}.ff2.weight"), vec![self.tx_ff_dim, d]);
            put(format!("{p}.ff2.bias"), vec![d]);
        }
        put("head.fc1.weight".into(), vec![d, d]);
        put("head.fc1.bias".into(), vec![d]);
        put("head.fc2.weight".into(), vec![d, self.n_labels]);
        put("head.fc2.bias".into(), vec![self.n_labels]);
        s
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Stable 64-bit FNV-1a, used to give every parameter its own RNG stream so
/// that ablated models share the initial values of the parameters they keep.
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    let leaf = name.rsplit('.').next().unwrap_or("");
    match leaf {
        "gamma" => Tensor::ones(shape),
        "beta" => Tensor::zeros(shape),
        _ if leaf == "bias" || leaf.starts_with('b') => Tensor::zeros(shape),
        "embed" | "token" => Tensor::randn(shape, 0.02, &mut rng),
        _ => {
            // conv [out, in, k] and dense [in, out]
            let fan_in = match shape.len() {
                3 => shape[1] * shape[2],
                _ => shape[0],
            };
            let gain = if name.starts_with("word.") { 2.0 } else { 1.0 };
            Tensor::randn(shape, (gain / fan_in as f64).sqrt(), &mut rng)
        }
    }
}

/// A configuration together with its learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    model_config: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, seed);
                (name, t)
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("parameter", format!("missing {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want = self.config.param_shapes();
        if want.len() != self.tensors.len() || want.keys().any(|k| !self.tensors.contains_key(k)) {
            return Err(Error::invalid("parameters", "names do not match the model configuration"));
        }
        for (name, shape) in want {
            let t = &self.tensors[&name];
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    /// Writes a parameter archive whose metadata block carries the config
    /// and `extra` (free-form JSON, e.g. the training config).
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            model_config: self.config.clone(),
            extra,
        };
        write_archive(
            path,
            &Archive {
                meta: serde_json::to_string(&meta)?,
                tensors: self.tensors.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let archive = read_archive(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&archive.meta)?;
        let params = ModelParams {
            config: meta.model_config,
            tensors: archive.tensors,
        };
        params.validate()?;
        Ok((params, meta.extra))
    }

    /// Records every tensor on `tape` as a named parameter.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(name, t)| (name.clone(), tape.param(name.clone(), t.clone())))
                .collect(),
        )
    }
}

/// Tape handles of the registered parameters.
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("parameter", format!("missing {name}")))
    }
}

fn linear(tape: &mut Tape, p: &ParamVars, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, p.get(w)?)?;
    tape.add(y, p.get(b)?)
}

fn check_tokens(cfg: &ModelConfig, seq: &TokenSequence) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::invalid("tokens", "empty sequence"));
    }
    if let Some(t) = seq.tokens.iter().find(|t| t.waveform.len() != cfg.token_len) {
        return Err(Error::invalid(
            "token_len",
            format!("token of length {} but model expects {}", t.waveform.len(), cfg.token_len),
        ));
    }
    Ok(())
}

/// Maps every token to `R^D` with shared weights; padding rows are zero.
pub fn word_encode(tape: &mut Tape, p: &ParamVars, cfg: &ModelConfig, seq: &TokenSequence) -> Result<Var> {
    check_tokens(cfg, seq)?;
    let valid: Vec<usize> = (0..seq.len()).filter(|&i| seq.tokens[i].valid).collect();
    let d = cfg.d_model;
    if valid.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[seq.len(), d])));
    }
    let n = valid.len();
    let l = cfg.token_len;
    let data: Vec<f64> = valid.iter().flat_map(|&i| seq.tokens[i].waveform.iter().copied()).collect();
    let x = tape.constant(Tensor::new(vec![n, 1, l], data)?);
    let pad = cfg.word_kernel / 2;
    let mut h = tape.conv1d(x, p.get("word.stem.weight")?, Some(p.get("word.stem.bias")?), 2, pad)?;
    h = tape.gelu(h)?;
    for b in 0..cfg.word_blocks {
        let w1 = p.get(&format!("word.block{b}.conv1.weight"))?;
        let b1 = p.get(&format!("word.block{b}.conv1.bias"))?;
        let w2 = p.get(&format!("word.block{b}.conv2.weight"))?;
        let b2 = p.get(&format!("word.block{b}.conv2.bias"))?;
        let mut r = tape.conv1d(h, w1, Some(b1), 1, 1)?;
        r = tape.gelu(r)?;
        r = tape.conv1d(r, w2, Some(b2), 1, 1)?;
        h = tape.add(h, r)?;
        h = tape.gelu(h)?;
    }
    let feats = match cfg.word_pooling {
        WordPooling::Flatten => tape.reshape(h, &[n, cfg.word_features()])?,
        WordPooling::Mean => tape.mean_pool(h, 2, None)?,
    };
    let z = linear(tape, p, feats, "word.proj.weight", "word.proj.bias")?;
    if n == seq.len() {
        return Ok(z);
    }
    // scatter the valid rows back into place, padding reads the zero row
    let zero = tape.constant(Tensor::zeros(&[1, d]));
    let table = tape.concat(&[z, zero])?;
    let mut slot = vec![n; seq.len()];
    for (row, &i) in valid.iter().enumerate() {
        slot[i] = row;
    }
    tape.embedding_lookup(table, &slot)
}

/// `z ⊙ γ[lead] + β[lead]`; identity when the spatial encoder is disabled.
pub fn spatial_encode(tape: &mut Tape, p: &ParamVars, cfg: &ModelConfig, z: Var, leads: &[usize]) -> Result<Var> {
    if let Some(&bad) = leads.iter().find(|&&c| c >= cfg.n_leads) {
        return Err(Error::invalid(
            "lead_index",
            format!("{bad} out of range for {} leads", cfg.n_leads),
        ));
    }
    if !cfg.use_spatial {
        return Ok(z);
    }
    let g = tape.embedding_lookup(p.get("spatial.gamma")?, leads)?;
    let b = tape.embedding_lookup(p.get("spatial.beta")?, leads)?;
    let scaled = tape.mul(z, g)?;
    tape.add(scaled, b)
}

/// `z + e[beat]`; indices past the table are clamped to the last block.
pub fn temporal_encode(tape: &mut Tape, p: &ParamVars, cfg: &ModelConfig, z: Var, beats: &[usize]) -> Result<Var> {
    if !cfg.use_temporal {
        return Ok(z);
    }
    let last = cfg.max_time_blocks - 1;
    let clamped: Vec<usize> = beats.iter().map(|&t| t.min(last)).collect();
    if beats.iter().any(|&t| t > last) {
        log::warn!("temporal index beyond {last} clamped to the last block");
    }
    let e = tape.embedding_lookup(p.get("temporal.embed")?, &clamped)?;
    tape.add(z, e)
}

/// Transformer self-attention weights, one `[heads, S', S']` tensor per
/// layer. With CLS pooling row/column 0 is the CLS slot and `offset` is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub layers: Vec<Tensor>,
    pub offset: usize,
}

fn attention_block(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    mask: &[bool],
) -> Result<(Var, Tensor)> {
    let s = mask.len();
    let (h, dh) = (cfg.tx_heads, cfg.d_model / cfg.tx_heads);
    let mut heads = |w: &str| -> Result<Var> {
        let y = linear(tape, p, x, &format!("{prefix}.attn.w{w}"), &format!("{prefix}.attn.b{w}"))?;
        let y = tape.reshape(y, &[s, h, dh])?;
        tape.permute(y, &[1, 0, 2])
    };
    let q = heads("q")?;
    let k = heads("k")?;
    let v = heads("v")?;
    let kt = tape.transpose(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.masked_softmax(scores, 2, mask)?;
    let weights = tape.value(attn).clone();
    let ctx = tape.batch_matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, &[s, cfg.d_model])?;
    let out = linear(tape, p, ctx, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))?;
    Ok((out, weights))
}

/// Transformer encoder, pooling and head. Returns `[K]` logits and the
/// attention maps.
pub fn sentence_forward(
    tape: &mut Tape,
    p: &ParamVars,
    cfg: &ModelConfig,
    z: Var,
    mask: &[bool],
) -> Result<(Var, Attention)> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("tokens", "sequence has no valid token"));
    }
    let (mut x, mask, offset) = match cfg.pool {
        Pooling::Mean => (z, mask.to_vec(), 0),
        Pooling::Cls => {
            let x = tape.concat(&[p.get("cls.token")?, z])?;
            let mut m = vec![true];
            m.extend_from_slice(mask);
            (x, m, 1)
        }
    };
    let mut layers = Vec::with_capacity(cfg.tx_layers);
    for l in 0..cfg.tx_layers {
        let pre = format!("tx.layer{l}");
        let n1 = tape.layer_norm(x, p.get(&format!("{pre}.ln1.gamma"))?, p.get(&format!("{pre}.ln1.beta"))?, LN_EPS)?;
        let (a, w) = attention_block(tape, p, cfg, &pre, n1, &mask)?;
        layers.push(w);
        x = tape.add(x, a)?;
        let n2 = tape.layer_norm(x, p.get(&format!("{pre}.ln2.gamma"))?, p.get(&format!("{pre}.ln2.beta"))?, LN_EPS)?;
        let f = linear(tape, p, n2, &format!("{pre}.ff1.weight"), &format!("{pre}.ff1.bias"))?;
        let f = tape.gelu(f)?;
        let f = linear(tape, p, f, &format!("{pre}.ff2.weight"), &format!("{pre}.ff2.bias"))?;
        x = tape.add(x, f)?;
    }
    let pooled = match cfg.pool {
        Pooling::Mean => tape.mean_pool(x, 0, Some(&mask))?,
        Pooling::Cls => {
            let row = tape.embedding_lookup(x, &[0])?;
            tape.reshape(row, &[cfg.d_model])?
        }
    };
    let hdn = linear(tape, p, pooled, "head.fc1.weight", "head.fc1.bias")?;
    let hdn = tape.gelu(hdn)?;
    let logits = linear(tape, p, hdn, "head.fc2.weight", "head.fc2.bias")?;
    Ok((logits, Attention { layers, offset }))
}

/// Full forward pass on `tape`.
pub fn forward_on_tape(tape: &mut Tape, p: &ParamVars, cfg: &ModelConfig, seq: &TokenSequence) -> Result<(Var, Attention)> {
    let z = word_encode(tape, p, cfg, seq)?;
    let z = spatial_encode(tape, p, cfg, z, &seq.lead_indices())?;
    let z = temporal_encode(tape, p, cfg, z, &seq.temporal_indices())?;
    sentence_forward(tape, p, cfg, z, &seq.mask())
}

/// Logits and attention maps for one sequence.
pub fn forward(params: &ModelParams, seq: &TokenSequence) -> Result<(Vec<f64>, Attention)> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape);
    let (logits, attn) = forward_on_tape(&mut tape, &p, &params.config, seq)?;
    Ok((tape.value(logits).data().to_vec(), attn))
}

/// Mean BCE loss of one sequence, recorded on `tape`.
pub fn loss_on_tape(tape: &mut Tape, p: &ParamVars, cfg: &ModelConfig, seq: &TokenSequence) -> Result<Var> {
    if seq.labels.len() != cfg.n_labels {
        return Err(Error::invalid(
            "labels",
            format!("{} labels but model has {} outputs", seq.labels.len(), cfg.n_labels),
        ));
    }
    let (logits, _) = forward_on_tape(tape, p, cfg, seq)?;
    tape.bce_with_logits(logits, &seq.targets())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::HeartbeatToken;
    use rand::Rng;

    pub(crate) fn tiny(use_spatial: bool, use_temporal: bool) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_leads: 3,
            token_len: 8,
            seq_len: 6,
            max_time_blocks: 4,
            word_blocks: 1,
            word_channels: 2,
            word_kernel: 3,
            word_pooling: WordPooling::Flatten,
            tx_layers: 1,
            tx_heads: 2,
            tx_ff_dim: 8,
            n_labels: 2,
            use_spatial,
            use_temporal,
            pool: Pooling::Mean,
        }
    }

    fn token(wave: Vec<f64>, lead: usize, time: usize) -> HeartbeatToken {
        HeartbeatToken {
            waveform: wave,
            lead_index: lead,
            temporal_index: time,
            valid: true,
        }
    }

    fn random_seq(cfg: &ModelConfig, n_valid: usize, seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens: Vec<HeartbeatToken> = (0..n_valid)
            .map(|i| {
                let w = (0..cfg.token_len).map(|_| rng.random_range(-1.0..1.0)).collect();
                token(w, i % cfg.n_leads, i / cfg.n_leads)
            })
            .collect();
        tokens.resize_with(cfg.seq_len, || HeartbeatToken::padding(cfg.token_len));
        TokenSequence {
            tokens,
            labels: vec![true, false],
            record_id: "t".into(),
        }
    }

    /// Perturbs spatial and temporal tables away from their identity init.
    fn scramble(params: &mut ModelParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in params.tensors.iter_mut() {
            if name.starts_with("spatial") || name.starts_with("temporal") || name.starts_with("tx") {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
    }

    #[test]
    fn default_config_is_desk_scale() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert!(cfg.param_count() <= 5_000_000, "{}", cfg.param_count());
        assert_eq!(cfg.param_count(), ModelParams::init(cfg.clone(), 0).unwrap().param_count());
    }

    #[test]
    fn heads_must_divide_d() {
        let cfg = ModelConfig { tx_heads: 3, ..tiny(true, true) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_spatial_init() {
        let params = ModelParams::init(tiny(true, true), 1).unwrap();
        assert!(params.tensors["spatial.gamma"].data().iter().all(|&v| v == 1.0));
        assert!(params.tensors["spatial.beta"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ablations_share_initial_values() {
        let full = ModelParams::init(tiny(true, true), 5).unwrap();
        let ablated = ModelParams::init(tiny(false, false), 5).unwrap();
        for (name, t) in &ablated.tensors {
            assert_eq!(t, &full.tensors[name], "{name}");
        }
        assert!(!ablated.tensors.contains_key("spatial.gamma"));
        assert!(!ablated.tensors.contains_key("temporal.embed"));
    }

    #[test]
    fn word_encoder_shares_weights_and_masks_padding() {
        let cfg = tiny(true, true);
        let params = ModelParams::init(cfg.clone(), 2).unwrap();
        let mut seq = random_seq(&cfg, 4, 3);
        seq.tokens[3].waveform = seq.tokens[0].waveform.clone();
        let mut tape = Tape::new();
        let p = params.register(&mut tape);
        let z = word_encode(&mut tape, &p, &cfg, &seq).unwrap();
        let zd = tape.value(z).data();
        let d = cfg.d_model;
        assert_eq!(tape.shape(z), &[6, 8]);
        assert_eq!(&zd[..d], &zd[3 * d..4 * d]);
        assert!(zd[4 * d..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn word_encoder_token_independence() {
        let cfg = tiny(true, true);
        let params = ModelParams::init(cfg.clone(), 2).unwrap();
        let seq = random_seq(&cfg, 5, 4);
        let mut other = seq.clone();
        other.tokens[2].waveform.iter_mut().for_each(|v| *v *= -3.0);
        let run = |s: &TokenSequence| {
            let mut tape = Tape::new();
            let p = params.register(&mut tape);
            let z = word_encode(&mut tape, &p, &cfg, s).unwrap();
            tape.value(z).data().to_vec()
        };
        let (a, b) = (run(&seq), run(&other));
        for i in (0..6).filter(|&i| i != 2) {
            assert_eq!(&a[i * 8..(i + 1) * 8], &b[i * 8..(i + 1) * 8]);
        }
        assert_ne!(&a[16..24], &b[16..24]);
    }

    #[test]
    fn wrong_token_length_rejected() {
        let cfg = tiny(true, true);
        let params = ModelParams::init(cfg.clone(), 0).unwrap();
        let mut seq = random_seq(&cfg, 2, 0);
        seq.tokens[0].waveform.push(0.0);
        assert!(forward(&params, &seq).is_err());
    }

    fn encode_rows(cfg: &ModelConfig, params: &ModelParams, z: Vec<f64>, leads: &[usize], beats: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = params.register(&mut tape);
        let n = leads.len();
        let z = tape.constant(Tensor::new(vec![n, cfg.d_model], z)?);
        let zs = spatial_encode(&mut tape, &p, cfg, z, leads)?;
        let zt = temporal_encode(&mut tape, &p, cfg, zs, beats)?;
        Ok(tape.value(zt).data().to_vec())
    }

    #[test]
    fn spatial_affine_arithmetic() {
        let cfg = ModelConfig { d_model: 2, tx_heads: 1, use_temporal: false, ..tiny(true, false) };
        let mut params = ModelParams::init(cfg.clone(), 0).unwrap();
        params.tensors.insert("spatial.gamma".into(), Tensor::new(vec![3, 2], vec![1.0, 1.0, 2.0, 3.0, 1.0, 1.0]).unwrap());
        params.tensors.insert("spatial.beta".into(), Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
        let out = encode_rows(&cfg, &params, vec![1.0, 2.0, 1.0, 2.0], &[1, 0], &[0, 0]).unwrap();
        assert_eq!(out, vec![3.0, 7.0, 1.0, 2.0]);
        assert!(encode_rows(&cfg, &params, vec![1.0, 2.0], &[3], &[0]).is_err());
    }

    #[test]
    fn temporal_embedding_arithmetic() {
        let cfg = ModelConfig { d_model: 2, tx_heads: 1, ..tiny(false, true) };
        let mut params = ModelParams::init(cfg.clone(), 0).unwrap();
        let mut e = vec![0.0; 8];
        e[6] = 0.5;
        e[7] = -0.5;
        params.tensors.insert("temporal.embed".into(), Tensor::new(vec![4, 2], e).unwrap());
        let out = encode_rows(&cfg, &params, vec![1.0, 1.0, 1.0, 1.0], &[0, 0], &[3, 0]).unwrap();
        assert_eq!(out, vec![1.5, 0.5, 1.0, 1.0]);
        // overflow clamps to the last block
        let out = encode_rows(&cfg, &params, vec![1.0, 1.0], &[0], &[99]).unwrap();
        assert_eq!(out, vec![1.5, 0.5]);
    }

    #[test]
    fn zero_temporal_table_is_identity() {
        let cfg = tiny(false, true);
        let mut params = ModelParams::init(cfg.clone(), 0).unwrap();
        params.tensors.insert("temporal.embed".into(), Tensor::zeros(&[4, 8]));
        let z: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(encode_rows(&cfg, &params, z.clone(), &[0, 1], &[2, 3]).unwrap(), z);
    }

    #[test]
    fn swapping_temporal_indices_changes_only_those_rows() {
        let cfg = tiny(false, true);
        let mut params = ModelParams::init(cfg.clone(), 0).unwrap();
        scramble(&mut params, 1);
        let z: Vec<f64> = (0..24).map(f64::from).collect();
        let a = encode_rows(&cfg, &params, z.clone(), &[0, 0, 0], &[0, 1, 2]).unwrap();
        let b = encode_rows(&cfg, &params, z, &[0, 0, 0], &[2, 1, 0]).unwrap();
        assert_eq!(&a[8..16], &b[8..16]);
        assert_ne!(&a[..8], &b[..8]);
        assert_ne!(&a[16..], &b[16..]);
    }

    #[test]
    fn attention_rows_are_masked_distributions() {
        let cfg = tiny(true, true);
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let seq = random_seq(&cfg, 4, 1);
        let (_, attn) = forward(&params, &seq).unwrap();
        let w = &attn.layers[0];
        assert_eq!(w.shape(), &[2, 6, 6]);
        for row in w.data().chunks(6) {
            assert!((row[..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[4..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn padding_permutation_and_removal_invariance() {
        let cfg = tiny(true, true);
        let mut params = ModelParams::init(cfg.clone(), 3).unwrap();
        scramble(&mut params, 2);
        let seq = random_seq(&cfg, 4, 1);
        let (base, _) = forward(&params, &seq).unwrap();

        let mut shuffled = seq.clone();
        shuffled.tokens.swap(4, 5);
        shuffled.tokens[4].lead_index = 2;
        shuffled.tokens[5].temporal_index = 3;
        let (b, _) = forward(&params, &shuffled).unwrap();

        let mut trimmed = seq.clone();
        trimmed.tokens.truncate(4);
        let (c, _) = forward(&params, &trimmed).unwrap();
        for i in 0..2 {
            assert!((base[i] - b[i]).abs() < 1e-9);
            assert!((base[i] - c[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn all_padding_rejected() {
        let cfg = tiny(true, true);
        let params = ModelParams::init(cfg.clone(), 0).unwrap();
        assert!(forward(&params, &random_seq(&cfg, 0, 0)).is_err());
    }

    #[test]
    fn single_token_without_transformer_is_head_of_embedding() {
        let cfg = ModelConfig { tx_layers: 0, ..tiny(false, false) };
        let params = ModelParams::init(cfg.clone(), 4).unwrap();
        let seq = random_seq(&cfg, 1, 2);
        let (logits, _) = forward(&params, &seq).unwrap();

        let mut tape = Tape::new();
        let p = params.register(&mut tape);
        let z = word_encode(&mut tape, &p, &cfg, &seq).unwrap();
        let row = tape.embedding_lookup(z, &[0]).unwrap();
        let row = tape.reshape(row, &[8]).unwrap();
        let h = linear(&mut tape, &p, row, "head.fc1.weight", "head.fc1.bias").unwrap();
        let h = tape.gelu(h).unwrap();
        let out = linear(&mut tape, &p, h, "head.fc2.weight", "head.fc2.bias").unwrap();
        assert_eq!(tape.value(out).data(), logits.as_slice());
    }

    fn two_lead_seq(cfg: &ModelConfig, leads: [usize; 2]) -> TokenSequence {
        let w: Vec<f64> = (0..cfg.token_len).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut tokens = vec![token(w.clone(), leads[0], 0), token(w.map_scale(2.0), leads[1], 0)];
        tokens.resize_with(cfg.seq_len, || HeartbeatToken::padding(cfg.token_len));
        TokenSequence {
            tokens,
            labels: vec![false, true],
            record_id: "l".into(),
        }
    }

    trait Scale {
        fn map_scale(&self, k: f64) -> Vec<f64>;
    }

    impl Scale for Vec<f64> {
        fn map_scale(&self, k: f64) -> Vec<f64> {
            self.iter().map(|v| v * k).collect()
        }
    }

    #[test]
    fn lead_permutation_contrast() {
        for (spatial, expect_change) in [(true, true), (false, false)] {
            let cfg = tiny(spatial, false);
            let mut params = ModelParams::init(cfg.clone(), 6).unwrap();
            scramble(&mut params, 3);
            let (a, _) = forward(&params, &two_lead_seq(&cfg, [0, 1])).unwrap();
            let (b, _) = forward(&params, &two_lead_seq(&cfg, [1, 0])).unwrap();
            let diff = (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
            assert_eq!(diff > 1e-9, expect_change, "spatial={spatial} diff={diff}");
        }
    }

    #[test]
    fn temporal_permutation_contrast() {
        for (temporal, expect_change) in [(true, true), (false, false)] {
            let cfg = tiny(false, temporal);
            let mut params = ModelParams::init(cfg.clone(), 6).unwrap();
            scramble(&mut params, 4);
            let mut seq = random_seq(&cfg, 2, 8);
            seq.tokens[0].temporal_index = 0;
            seq.tokens[1].temporal_index = 1;
            let (a, _) = forward(&params, &seq).unwrap();
            seq.tokens.swap(0, 1);
            let (b, _) = forward(&params, &seq).unwrap();
            seq.tokens[0].temporal_index = 0;
            seq.tokens[1].temporal_index = 1;
            let (c, _) = forward(&params, &seq).unwrap();
            // moving tokens around is invisible, moving them between beats is not
            assert!((a[0] - b[0]).abs() < 1e-9);
            let diff = (b[0] - c[0]).abs() + (b[1] - c[1]).abs();
            assert_eq!(diff > 1e-9, expect_change, "temporal={temporal}");
        }
    }

    #[test]
    fn cls_pooling_runs_and_offsets_attention() {
        let cfg = ModelConfig { pool: Pooling::Cls, ..tiny(true, true) };
        let params = ModelParams::init(cfg.clone(), 1).unwrap();
        let (logits, attn) = forward(&params, &random_seq(&cfg, 3, 1)).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(attn.offset, 1);
        assert_eq!(attn.layers[0].shape(), &[2, 7, 7]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = ModelParams::init(tiny(true, false), 9).unwrap();
        params.save(&path, serde_json::json!({"epochs": 3})).unwrap();
        let (back, extra) = ModelParams::load(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(extra["epochs"], 3);
    }

    #[test]
    fn checkpoint_with_wrong_tensors_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut params = ModelParams::init(tiny(true, false), 9).unwrap();
        params.tensors.remove("head.fc2.bias");
        params.save(&path, serde_json::Value::Null).unwrap();
        assert!(ModelParams::load(&path).is_err());
    }
}
