//! Tiny decoder-only causal transformer that consumes projected graph
//! tokens as a prefix before the text tokens. Exposes the hidden states
//! of both segments, the per-node mean-aggregated reconstruction tokens,
//! low-rank adapters, and the last-token attention probe.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::ndt::GraphTokenSequence;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { enabled: false, rank: 8, alpha: 32.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ProjectorActivation {
    Gelu,
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub d_z: usize,
    pub lora: LoraConfig,
    /// Whether attention may look at placeholder slots at all.
    pub mask_placeholders: bool,
    pub projector_activation: ProjectorActivation,
}

impl LmConfig {
    pub fn desk_default(vocab_size: usize, d_z: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_len: 256,
            d_z,
            lora: LoraConfig::default(),
            mask_placeholders: false,
            projector_activation: ProjectorActivation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.lora.enabled && self.lora.rank == 0 {
            return Err(Error::Parameter("LoRA rank must be >= 1".into()));
        }
        Ok(())
    }
}

fn randn(rng: &mut ChaCha12Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std)
        .collect()
}

/// Dense layer with optional low-rank adapter
/// (effective weight = W + (alpha/r) A B).
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub lora: Option<LoraAdapter>,
}

pub struct LoraAdapter {
    pub a: Tensor, // [in, r]
    pub b: Tensor, // [r, out]
    pub scaling: f64,
}

impl Linear {
    pub fn new(rng: &mut ChaCha12Rng, d_in: usize, d_out: usize) -> Linear {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Tensor::param(&[d_in, d_out], randn(rng, d_in * d_out, std)),
            bias: Tensor::param(&[d_out], vec![0.0; d_out]),
            lora: None,
        }
    }

    pub fn identity(d: usize) -> Linear {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Linear {
            weight: Tensor::param(&[d, d], w),
            bias: Tensor::param(&[d], vec![0.0; d]),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    /// Attach a zero-initialized adapter (B = 0, so the adapted forward
    /// equals the base forward until training moves B).
    pub fn attach_lora(&mut self, rng: &mut ChaCha12Rng, rank: usize, alpha: f64) -> Result<()> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Parameter(format!(
                "LoRA rank {rank} exceeds min weight dimension {}",
                d_in.min(d_out)
            )));
        }
        let std = 1.0 / (d_in as f64).sqrt();
        self.lora = Some(LoraAdapter {
            a: Tensor::param(&[d_in, rank], randn(rng, d_in * rank, std)),
            b: Tensor::param(&[rank, d_out], vec![0.0; rank * d_out]),
            scaling: alpha / rank as f64,
        });
        Ok(())
    }

    /// Fold the adapter delta into the base weight and drop it.
    pub fn merge_lora(&mut self) -> Result<()> {
        if let Some(ad) = self.lora.take() {
            let delta = ad.a.matmul(&ad.b)?.scale(ad.scaling);
            let mut w = self.weight.values();
            for (wi, d) in w.iter_mut().zip(delta.values()) {
                *wi += d;
            }
            self.weight.set_values(&w);
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let base = x.matmul(&self.weight)?.add(&self.bias)?;
        match &self.lora {
            None => Ok(base),
            Some(ad) => base.add(&x.matmul(&ad.a)?.matmul(&ad.b)?.scale(ad.scaling)),
        }
    }
}

struct LayerNormParams {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNormParams {
    fn new(d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Tensor::param(&[d], vec![1.0; d]),
            bias: Tensor::param(&[d], vec![0.0; d]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm().mul(&self.gain)?.add(&self.bias)
    }
}

pub struct Block {
    ln1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    ln2: LayerNormParams,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Block {
    fn new(rng: &mut ChaCha12Rng, d: usize) -> Block {
        Block {
            ln1: LayerNormParams::new(d),
            wq: Linear::new(rng, d, d),
            wk: Linear::new(rng, d, d),
            wv: Linear::new(rng, d, d),
            wo: Linear::new(rng, d, d),
            ln2: LayerNormParams::new(d),
            mlp_in: Linear::new(rng, d, 4 * d),
            mlp_out: Linear::new(rng, 4 * d, d),
        }
    }
}

pub struct LmModel {
    pub cfg: LmConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub proj_in: Linear,
    pub proj_out: Linear,
    pub blocks: Vec<Block>,
    final_ln: LayerNormParams,
    pub out_head: Tensor,
}

impl LmModel {
    pub fn new(cfg: LmConfig, rng: &mut ChaCha12Rng) -> Result<LmModel> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut model = LmModel {
            tok_emb: Tensor::param(&[cfg.vocab_size, d], randn(rng, cfg.vocab_size * d, 0.1)),
            pos_emb: Tensor::param(&[cfg.max_len, d], randn(rng, cfg.max_len * d, 0.1)),
            proj_in: Linear::new(rng, cfg.d_z, d),
            proj_out: Linear::new(rng, d, d),
            blocks: (0..cfg.n_layers).map(|_| Block::new(rng, d)).collect(),
            final_ln: LayerNormParams::new(d),
            out_head: Tensor::param(&[d, cfg.vocab_size], randn(rng, d * cfg.vocab_size, 1.0 / (d as f64).sqrt())),
            cfg,
        };
        if model.cfg.lora.enabled {
            apply_lora(&mut model)?;
        }
        Ok(model)
    }

    /// Named parameter list; order is stable.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("tok_emb".into(), self.tok_emb.clone()),
            ("pos_emb".into(), self.pos_emb.clone()),
            ("out_head".into(), self.out_head.clone()),
        ];
        push_linear(&mut out, "proj_in", &self.proj_in);
        push_linear(&mut out, "proj_out", &self.proj_out);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gain"), b.ln1.gain.clone()));
            out.push((format!("block{i}.ln1.bias"), b.ln1.bias.clone()));
            push_linear(&mut out, &format!("block{i}.wq"), &b.wq);
            push_linear(&mut out, &format!("block{i}.wk"), &b.wk);
            push_linear(&mut out, &format!("block{i}.wv"), &b.wv);
            push_linear(&mut out, &format!("block{i}.wo"), &b.wo);
            out.push((format!("block{i}.ln2.gain"), b.ln2.gain.clone()));
            out.push((format!("block{i}.ln2.bias"), b.ln2.bias.clone()));
            push_linear(&mut out, &format!("block{i}.mlp_in"), &b.mlp_in);
            push_linear(&mut out, &format!("block{i}.mlp_out"), &b.mlp_out);
        }
        out.push(("final_ln.gain".into(), self.final_ln.gain.clone()));
        out.push(("final_ln.bias".into(), self.final_ln.bias.clone()));
        out
    }

    /// The parameters a training step updates. With adapters enabled the
    /// base transformer weights are frozen; the projector, embeddings'
    /// adapter-free head, and adapters stay trainable.
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        if !self.cfg.lora.enabled {
            return self.named_params();
        }
        let mut out = vec![("out_head".into(), self.out_head.clone())];
        push_linear(&mut out, "proj_in", &self.proj_in);
        push_linear(&mut out, "proj_out", &self.proj_out);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, lin) in [("wq", &b.wq), ("wv", &b.wv)] {
                if let Some(ad) = &lin.lora {
                    out.push((format!("block{i}.{name}.lora_a"), ad.a.clone()));
                    out.push((format!("block{i}.{name}.lora_b"), ad.b.clone()));
                }
            }
        }
        out
    }
}

fn push_linear(out: &mut Vec<(String, Tensor)>, name: &str, lin: &Linear) {
    out.push((format!("{name}.weight"), lin.weight.clone()));
    out.push((format!("{name}.bias"), lin.bias.clone()));
    if let Some(ad) = &lin.lora {
        out.push((format!("{name}.lora_a"), ad.a.clone()));
        out.push((format!("{name}.lora_b"), ad.b.clone()));
    }
}

/// Attach zero-initialized adapters to the attention query/value
/// projections of every block.
pub fn apply_lora(model: &mut LmModel) -> Result<()> {
    let rank = model.cfg.lora.rank;
    let alpha = model.cfg.lora.alpha;
    // adapter init draws come from a dedicated stream so enabling LoRA
    // does not shift the base init
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(0x10ad);
    for b in &mut model.blocks {
        b.wq.attach_lora(&mut rng, rank, alpha)?;
        b.wv.attach_lora(&mut rng, rank, alpha)?;
    }
    model.cfg.lora.enabled = true;
    Ok(())
}

/// Fold all adapters into the base weights.
pub fn merge_lora(model: &mut LmModel) -> Result<()> {
    for b in &mut model.blocks {
        b.wq.merge_lora()?;
        b.wv.merge_lora()?;
    }
    model.cfg.lora.enabled = false;
    Ok(())
}

/// Map the token stream through the projector; placeholder slots map
/// the zero vector.
pub fn encode_prefix(model: &LmModel, seq: &GraphTokenSequence) -> Result<Tensor> {
    if seq.d_z != model.cfg.d_z && seq.slots.iter().any(|s| s.is_node()) {
        return Err(Error::Dimension(format!(
            "sequence feature dim {} vs model d_z {}",
            seq.d_z, model.cfg.d_z
        )));
    }
    let rows = seq.feature_rows();
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let x = Tensor::from_vec(&[n, model.cfg.d_z], flat);
    let hidden = model.proj_in.forward(&x)?;
    let hidden = match model.cfg.projector_activation {
        ProjectorActivation::Gelu => hidden.gelu(),
        ProjectorActivation::Identity => hidden,
    };
    model.proj_out.forward(&hidden)
}

/// Everything a forward pass exposes downstream.
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Final-layer hidden states of the graph-token positions.
    pub s_g: Tensor,
    /// Final-layer hidden states of the text-token positions.
    pub s_t: Tensor,
    /// Final-layer attention of the last position over all positions,
    /// averaged over heads (detached values).
    pub last_attention: Vec<f64>,
    pub prefix_len: usize,
}

/// Run the transformer over `prefix` graph embeddings followed by text
/// tokens. `placeholder_slots[i]` marks prefix positions carrying no
/// node; they are attention-masked when the config says so.
pub fn forward(
    model: &LmModel,
    prefix: &Tensor,
    text_tokens: &[usize],
    placeholder_slots: &[bool],
) -> Result<ForwardOutput> {
    let d = model.cfg.d_model;
    let n = prefix.rows();
    let m = text_tokens.len();
    let t = n + m;
    if t > model.cfg.max_len {
        return Err(Error::Parameter(format!(
            "input length {t} exceeds max_len {}",
            model.cfg.max_len
        )));
    }
    if placeholder_slots.len() != n {
        return Err(Error::Dimension("placeholder flag length mismatch".into()));
    }
    for &tok in text_tokens {
        if tok >= model.cfg.vocab_size {
            return Err(Error::Parameter(format!("token id {tok} outside vocabulary")));
        }
    }
    let text_emb = model.tok_emb.gather_rows(text_tokens)?;
    let pos = model.pos_emb.slice_rows(0, t)?;
    let mut x = Tensor::concat_rows(&[prefix.clone(), text_emb])?.add(&pos)?;

    // causal mask, with placeholder columns optionally removed
    let mut mask = vec![false; t * t];
    for q in 0..t {
        for k in 0..=q {
            let hidden_pad = model.cfg.mask_placeholders && k < n && placeholder_slots[k] && k != q;
            mask[q * t + k] = !hidden_pad;
        }
    }

    let heads = model.cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut last_attention = vec![0.0; t];
    for (li, block) in model.blocks.iter().enumerate() {
        let normed = block.ln1.forward(&x)?;
        let q = block.wq.forward(&normed)?;
        let k = block.wk.forward(&normed)?;
        let v = block.wv.forward(&normed)?;
        let mut ctx_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(c0, c1)?;
            let kh = k.slice_cols(c0, c1)?;
            let vh = v.slice_cols(c0, c1)?;
            let scores = qh.matmul(&kh.transpose())?.scale(scale);
            let probs = scores.softmax_rows(Some(&mask))?;
            if li == model.blocks.len() - 1 {
                let pv = probs.values();
                for j in 0..t {
                    last_attention[j] += pv[(t - 1) * t + j] / heads as f64;
                }
            }
            ctx_heads.push(probs.matmul(&vh)?);
        }
        let ctx = Tensor::concat_cols(&ctx_heads)?;
        x = x.add(&block.wo.forward(&ctx)?)?;
        let normed2 = block.ln2.forward(&x)?;
        let mlp = block.mlp_out.forward(&block.mlp_in.forward(&normed2)?.gelu())?;
        x = x.add(&mlp)?;
    }
    let hidden = model.final_ln.forward(&x)?;
    let logits = hidden.matmul(&model.out_head)?;
    Ok(ForwardOutput {
        s_g: hidden.slice_rows(0, n)?,
        s_t: hidden.slice_rows(n, t)?,
        logits,
        last_attention,
        prefix_len: n,
    })
}

/// A templated training example: prompt then label tokens, appended
/// after the graph prefix. Supervision covers exactly the label-token
/// positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instruction {
    pub prompt_tokens: Vec<usize>,
    pub label_tokens: Vec<usize>,
}

impl Instruction {
    pub fn text_tokens(&self) -> Vec<usize> {
        let mut t = self.prompt_tokens.clone();
        t.extend(&self.label_tokens);
        t
    }

    /// Absolute positions of the supervised tokens given a prefix of
    /// length `n`.
    pub fn supervised_positions(&self, n: usize) -> Vec<usize> {
        let start = n + self.prompt_tokens.len();
        (start..start + self.label_tokens.len()).collect()
    }
}

/// Mean over supervised positions of -log p(x_i | v, x_{<i}).
pub fn text_loss(logits: &Tensor, instruction: &Instruction, prefix_len: usize) -> Result<Tensor> {
    if instruction.label_tokens.is_empty() {
        return Err(Error::Usage("instruction has no supervised positions".into()));
    }
    let positions = instruction.supervised_positions(prefix_len);
    // logits at position i-1 predict token x_i
    let pred_rows: Vec<usize> = positions.iter().map(|&p| p - 1).collect();
    let rows = logits.gather_rows(&pred_rows)?;
    let probs = rows.softmax_rows(None)?;
    let v = logits.cols();
    let mut onehot = vec![0.0; positions.len() * v];
    for (r, &tok) in instruction.label_tokens.iter().enumerate() {
        onehot[r * v + tok] = 1.0;
    }
    let picked = probs.mul(&Tensor::from_vec(&[positions.len(), v], onehot))?;
    Ok(picked.sum_rows().log().mean().scale(-1.0))
}

/// Mean aggregation of graph-token hidden states over each node's slot
/// occurrences. Rows follow ascending gamma key order.
pub fn aggregate_h(s_g: &Tensor, gamma: &BTreeMap<usize, std::collections::BTreeSet<usize>>) -> Result<Tensor> {
    if gamma.is_empty() {
        return Err(Error::Usage("empty occurrence map".into()));
    }
    let n = s_g.rows();
    let mut groups = Vec::with_capacity(gamma.len());
    for (node, idxs) in gamma {
        if idxs.is_empty() {
            return Err(Error::Usage(format!("empty occurrence set for node {node}")));
        }
        for &i in idxs {
            if i >= n {
                return Err(Error::Usage(format!("occurrence index {i} outside prefix of {n}")));
            }
        }
        groups.push(idxs.iter().copied().collect::<Vec<_>>());
    }
    s_g.index_mean_pool(&groups)
}

/// Last-token attention mass on non-placeholder graph slots, raw and
/// log-scaled.
pub struct AttentionProbe {
    pub per_slot: Vec<f64>,
    pub per_slot_log: Vec<f64>,
    pub graph_mass: f64,
}

pub fn attention_probe(output: &ForwardOutput, node_slots: &[bool]) -> AttentionProbe {
    let n = output.prefix_len;
    let mut per_slot = Vec::new();
    let mut mass = 0.0;
    for i in 0..n {
        if node_slots[i] {
            per_slot.push(output.last_attention[i]);
            mass += output.last_attention[i];
        }
    }
    let per_slot_log = per_slot.iter().map(|&p| (p.max(1e-300)).ln()).collect();
    AttentionProbe { per_slot, per_slot_log, graph_mass: mass }
}

/// Greedy argmax decoding of `len` label tokens after the prompt.
pub fn greedy_decode(
    model: &LmModel,
    prefix: &Tensor,
    placeholder_slots: &[bool],
    prompt: &[usize],
    len: usize,
) -> Result<Vec<usize>> {
    let mut text = prompt.to_vec();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let fwd = forward(model, prefix, &text, placeholder_slots)?;
        let logits = fwd.logits.values();
        let v = model.cfg.vocab_size;
        let t = prefix.rows() + text.len();
        let row = &logits[(t - 1) * v..t * v];
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        out.push(best);
        text.push(best);
    }
    Ok(out)
}

/// Training-side scalar loss for one example, for gradient checking and
/// the train loop.
pub fn example_text_loss(
    model: &LmModel,
    seq: &GraphTokenSequence,
    instruction: &Instruction,
) -> Result<Tensor> {
    let prefix = encode_prefix(model, seq)?;
    let placeholder: Vec<bool> = seq.slots.iter().map(|s| !s.is_node()).collect();
    let fwd = forward(model, &prefix, &instruction.text_tokens(), &placeholder)?;
    text_loss(&fwd.logits, instruction, prefix.rows())
}

// Checkpoint format: JSON map name -> {shape, values}, shared by every
// trainable module.
#[derive(Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn params_to_map(params: &[(String, Tensor)]) -> BTreeMap<String, ParamRecord> {
    params
        .iter()
        .map(|(name, t)| {
            (name.clone(), ParamRecord { shape: t.shape(), values: t.values() })
        })
        .collect()
}

/// Load values into an existing parameter list by name.
pub fn load_param_map(map: &BTreeMap<String, ParamRecord>, params: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in params {
        let rec = map
            .get(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint missing parameter {name}")))?;
        if rec.shape != t.shape() {
            return Err(Error::Parse(format!(
                "checkpoint parameter {name} has shape {:?}, expected {:?}",
                rec.shape,
                t.shape()
            )));
        }
        t.set_values(&rec.values);
    }
    Ok(())
}

pub fn save_params(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, &params_to_map(params))?;
    Ok(())
}

pub fn load_params(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let r = BufReader::new(File::open(path)?);
    let map: BTreeMap<String, ParamRecord> = serde_json::from_reader(r)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    load_param_map(&map, params)
}
