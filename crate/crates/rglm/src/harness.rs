//! Configuration, instruction building, the training loop, evaluation,
//! and the experiment suites (ablation, sweep, attention report,
//! timing, cross-dataset transfer).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tensor};
use crate::gnn::{self, GnnConfig, GnnEncoder};
use crate::heads::{
    graph_loss, report_lower_bound, DecoderHead, DenoiserHead, GraphHead, NoiseSchedule,
    SimilarizerHead, Variant,
};
use crate::lm::{
    aggregate_h, attention_probe, encode_prefix, forward, greedy_decode, load_param_map,
    params_to_map, text_loss, Instruction, LmConfig, LmModel, LoraConfig, ParamRecord,
    ProjectorActivation,
};
use crate::ndt::{serialize_pair, serialize_subgraph, GraphTokenSequence, NdtConfig};
use crate::opt::{warmup_scale, Adam};
use crate::tag::{load_tag, sample_subgraph, Split, Subgraph, Tag};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// vocabulary and tasks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeClassification,
    LinkPrediction,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "node_classification" => Ok(Task::NodeClassification),
            "link_prediction" => Ok(Task::LinkPrediction),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

const BASE_WORDS: [&str; 8] = ["task", "node", "link", "class", "connected", "?", "yes", "no"];

/// Closed word-level vocabulary: fixed template words plus one token
/// per class name.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    num_classes: usize,
}

impl Vocab {
    pub fn for_classes(num_classes: usize) -> Vocab {
        let mut words: Vec<String> = BASE_WORDS.iter().map(|s| s.to_string()).collect();
        for c in 0..num_classes {
            words.push(format!("class_{c}"));
        }
        Vocab { words, num_classes }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn class_token(&self, class: usize) -> usize {
        BASE_WORDS.len() + class
    }

    pub fn class_of_token(&self, id: usize) -> Option<usize> {
        if id >= BASE_WORDS.len() && id < BASE_WORDS.len() + self.num_classes {
            Some(id - BASE_WORDS.len())
        } else {
            None
        }
    }

    pub fn yes_token(&self) -> usize {
        6
    }

    pub fn no_token(&self) -> usize {
        7
    }
}

// ---------------------------------------------------------------------------
// instruction datasets

/// One training/evaluation example: serialized graph prefix, templated
/// prompt + gold label tokens, and the subgraph kept for reconstruction.
pub struct Example {
    pub id: usize,
    pub seq: GraphTokenSequence,
    pub sub: Subgraph,
    pub instruction: Instruction,
    /// Gold class for evaluation: node label, or 1/0 for link yes/no.
    pub gold: usize,
}

fn example_rng(seed: u64, salt: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Disjoint union of two subgraphs, aligned with `serialize_pair`'s
/// occurrence indexing (second graph's node ids offset by the first's
/// node count).
pub fn union_subgraph(a: &Subgraph, b: &Subgraph) -> Subgraph {
    let off = a.node_count();
    let mut edges = a.edges.clone();
    edges.extend(b.edges.iter().map(|&(x, y)| (x + off, y + off)));
    let mut features = a.features.clone();
    features.extend(b.features.iter().cloned());
    let mut hop_of = a.hop_of.clone();
    hop_of.extend(b.hop_of.iter().copied());
    let mut labels = a.labels.clone();
    labels.extend(b.labels.iter().copied());
    Subgraph {
        center_local: a.center_local,
        node_ids: (0..off + b.node_count()).collect(),
        edges,
        features,
        hop_of,
        labels,
    }
}

/// Induced subgraph on an ascending node subset, reindexed to 0..k.
/// Reconstruction targets must align with the aggregated H rows, which
/// cover exactly the nodes the truncated tree visited (the gamma keys).
fn induced_on(sub: &Subgraph, nodes: &[usize]) -> Subgraph {
    let pos: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let edges = sub
        .edges
        .iter()
        .filter_map(|&(a, b)| Some((*pos.get(&a)?, *pos.get(&b)?)))
        .collect();
    Subgraph {
        center_local: pos.get(&sub.center_local).copied().unwrap_or(0),
        node_ids: nodes.iter().map(|&n| sub.node_ids[n]).collect(),
        edges,
        features: nodes.iter().map(|&n| sub.features[n].clone()).collect(),
        hop_of: nodes.iter().map(|&n| sub.hop_of[n]).collect(),
        labels: nodes.iter().map(|&n| sub.labels[n]).collect(),
    }
}

/// Build the templated instruction dataset for one split.
pub fn build_instructions(
    tag: &Tag,
    task: Task,
    split: Split,
    ndt: &NdtConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<Example>> {
    match task {
        Task::NodeClassification => {
            let mut out = Vec::new();
            for &node in &tag.nodes_in_split(split) {
                let Some(label) = tag.labels[node] else { continue };
                if label >= tag.meta.num_classes {
                    return Err(Error::Parse(format!("node {node} has unknown class id {label}")));
                }
                let sub = sample_subgraph(tag, node, ndt.hops)?;
                let mut rng = example_rng(seed, node as u64);
                let seq = serialize_subgraph(&sub, ndt, &mut rng)?;
                let covered: Vec<usize> = seq.gamma.keys().copied().collect();
                let sub = induced_on(&sub, &covered);
                let prompt = vec![
                    vocab.id("task").unwrap(),
                    vocab.id("node").unwrap(),
                    vocab.id("class").unwrap(),
                    vocab.id("?").unwrap(),
                ];
                out.push(Example {
                    id: node,
                    seq,
                    sub,
                    instruction: Instruction {
                        prompt_tokens: prompt,
                        label_tokens: vec![vocab.class_token(label)],
                    },
                    gold: label,
                });
            }
            Ok(out)
        }
        Task::LinkPrediction => build_link_instructions(tag, split, ndt, vocab, seed),
    }
}

fn split_of_index(i: usize) -> Split {
    match i % 5 {
        0 | 1 | 2 => Split::Train,
        3 => Split::Val,
        _ => Split::Test,
    }
}

fn build_link_instructions(
    tag: &Tag,
    split: Split,
    ndt: &NdtConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<Example>> {
    // balanced 1:1 positives (edges) and sampled absent pairs
    let mut rng = example_rng(seed, 0x6c69_6e6b);
    let mut negatives = Vec::new();
    let mut seen: std::collections::BTreeSet<(usize, usize)> = Default::default();
    let mut guard = 0usize;
    while negatives.len() < tag.edges.len() && guard < 100 * tag.edges.len() + 1000 {
        guard += 1;
        let a = rng.gen_range(0..tag.node_count);
        let b = rng.gen_range(0..tag.node_count);
        let (a, b) = (a.min(b), a.max(b));
        if a == b || tag.has_edge(a, b) || seen.contains(&(a, b)) {
            continue;
        }
        seen.insert((a, b));
        negatives.push((a, b));
    }
    let mut out = Vec::new();
    let prompt = vec![
        vocab.id("task").unwrap(),
        vocab.id("link").unwrap(),
        vocab.id("connected").unwrap(),
        vocab.id("?").unwrap(),
    ];
    for (kind, pairs) in [(1usize, &tag.edges), (0usize, &negatives)] {
        for (i, &(a, b)) in pairs.iter().enumerate() {
            if split_of_index(i) != split {
                continue;
            }
            let sub_a = sample_subgraph(tag, a, ndt.hops)?;
            let sub_b = sample_subgraph(tag, b, ndt.hops)?;
            let mut ser_rng = example_rng(seed, (kind * tag.node_count * tag.node_count + a * tag.node_count + b) as u64);
            let seq = serialize_pair(&sub_a, &sub_b, ndt, &mut ser_rng)?;
            let label = if kind == 1 { vocab.yes_token() } else { vocab.no_token() };
            let union = union_subgraph(&sub_a, &sub_b);
            let covered: Vec<usize> = seq.gamma.keys().copied().collect();
            out.push(Example {
                id: out.len(),
                seq,
                sub: induced_on(&union, &covered),
                instruction: Instruction { prompt_tokens: prompt.clone(), label_tokens: vec![label] },
                gold: kind,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainVariant {
    Vanilla,
    Decoder,
    Similarizer,
    Denoiser,
}

impl TrainVariant {
    pub fn recon(self) -> Option<Variant> {
        match self {
            TrainVariant::Vanilla => None,
            TrainVariant::Decoder => Some(Variant::Decoder),
            TrainVariant::Similarizer => Some(Variant::Similarizer),
            TrainVariant::Denoiser => Some(Variant::Denoiser),
        }
    }

    pub fn is_latent(self) -> bool {
        matches!(self, TrainVariant::Similarizer | TrainVariant::Denoiser)
    }
}

impl FromStr for TrainVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<TrainVariant> {
        match s {
            "vanilla" => Ok(TrainVariant::Vanilla),
            "decoder" => Ok(TrainVariant::Decoder),
            "similarizer" => Ok(TrainVariant::Similarizer),
            "denoiser" => Ok(TrainVariant::Denoiser),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainVariant::Vanilla => "vanilla",
            TrainVariant::Decoder => "decoder",
            TrainVariant::Similarizer => "similarizer",
            TrainVariant::Denoiser => "denoiser",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: TrainVariant,
    pub dataset: PathBuf,
    pub pre_gnn: Option<PathBuf>,
    pub task: Task,
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub replicate: usize,
    pub lora: bool,
    pub branch: Vec<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub denoiser_hidden: usize,
    pub diffusion_steps: usize,
    pub mask_placeholders: bool,
    pub no_feat: bool,
    pub no_topo: bool,
    pub no_pregnn: bool,
    /// Write 0.0 wall times so metric streams are byte-reproducible.
    pub deterministic_timing: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: TrainVariant::Vanilla,
            dataset: PathBuf::new(),
            pre_gnn: None,
            task: Task::NodeClassification,
            lambda_f: 0.4,
            lambda_s: 2.0,
            lambda_l: 1.0,
            lr: 5e-4,
            warmup_ratio: 0.03,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            replicate: 3,
            lora: false,
            branch: vec![3, 3],
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_len: 64,
            denoiser_hidden: 16,
            diffusion_steps: 100,
            mask_placeholders: false,
            no_feat: false,
            no_topo: false,
            no_pregnn: false,
            deterministic_timing: false,
            out_dir: None,
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for key {key}"))),
    }
}

impl TrainConfig {
    /// Apply one flat `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.parse()?,
            "dataset" => self.dataset = PathBuf::from(value),
            "pre_gnn" => {
                self.pre_gnn = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "task" => self.task = value.parse()?,
            "lambda_f" => self.lambda_f = parse_val(key, value)?,
            "lambda_s" => self.lambda_s = parse_val(key, value)?,
            "lambda_l" => self.lambda_l = parse_val(key, value)?,
            "lr" => self.lr = parse_val(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse_val(key, value)?,
            "batch_size" => self.batch_size = parse_val(key, value)?,
            "epochs" => self.epochs = parse_val(key, value)?,
            "seed" => self.seed = parse_val(key, value)?,
            "replicate" => self.replicate = parse_val(key, value)?,
            "lora" => self.lora = parse_bool(key, value)?,
            "branch" => {
                let parts: Result<Vec<usize>> = value
                    .split(',')
                    .map(|p| parse_val::<usize>(key, p.trim()))
                    .collect();
                self.branch = parts?;
            }
            "d_model" => self.d_model = parse_val(key, value)?,
            "n_layers" => self.n_layers = parse_val(key, value)?,
            "n_heads" => self.n_heads = parse_val(key, value)?,
            "max_len" => self.max_len = parse_val(key, value)?,
            "denoiser_hidden" => self.denoiser_hidden = parse_val(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse_val(key, value)?,
            "mask_placeholders" => self.mask_placeholders = parse_bool(key, value)?,
            "no_feat" => self.no_feat = parse_bool(key, value)?,
            "no_topo" => self.no_topo = parse_bool(key, value)?,
            "no_pregnn" => self.no_pregnn = parse_bool(key, value)?,
            "deterministic_timing" => self.deterministic_timing = parse_bool(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a flat key=value file (blank lines and `#` comments allowed).
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Apply `--key=value` style overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let stripped = o.strip_prefix("--").unwrap_or(o);
            let (k, v) = stripped
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.is_latent() && self.pre_gnn.is_none() && !self.no_pregnn {
            return Err(Error::Config(
                "latent variants need pre_gnn=<checkpoint> (or no_pregnn=true)".into(),
            ));
        }
        if self.lambda_f < 0.0 || self.lambda_s < 0.0 || self.lambda_l < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.replicate == 0 {
            return Err(Error::Config("batch_size, epochs, replicate must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lm_config(&self, vocab_size: usize, d_z: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
            d_z,
            lora: LoraConfig { enabled: self.lora, ..LoraConfig::default() },
            mask_placeholders: self.mask_placeholders,
            projector_activation: ProjectorActivation::Gelu,
        }
    }

    pub fn ndt_config(&self) -> NdtConfig {
        NdtConfig::new(&self.branch)
    }
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Serialize, Deserialize)]
struct LmCheckpoint {
    config: LmConfig,
    params: BTreeMap<String, ParamRecord>,
}

pub fn save_model(path: &Path, model: &LmModel) -> Result<()> {
    let ckpt = LmCheckpoint {
        config: model.cfg.clone(),
        params: params_to_map(&model.named_params()),
    };
    fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<LmModel> {
    let ckpt: LmCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let model = LmModel::new(ckpt.config, &mut rng)?;
    load_param_map(&ckpt.params, &model.named_params())?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct GnnCheckpoint {
    config: GnnConfig,
    d_z: usize,
    num_classes: usize,
    params: BTreeMap<String, ParamRecord>,
}

pub fn save_encoder(path: &Path, encoder: &GnnEncoder) -> Result<()> {
    let ckpt = GnnCheckpoint {
        config: encoder.cfg.clone(),
        d_z: encoder.d_z,
        num_classes: encoder.num_classes,
        params: params_to_map(&encoder.named_params()),
    };
    fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<GnnEncoder> {
    let ckpt: GnnCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut encoder = GnnEncoder::new(ckpt.config, ckpt.d_z, ckpt.num_classes, &mut rng)?;
    load_param_map(&ckpt.params, &encoder.named_params())?;
    encoder.frozen = true;
    Ok(encoder)
}

#[derive(Serialize, Deserialize)]
struct HeadCheckpoint {
    variant: Variant,
    d_model: usize,
    d_out: usize,
    denoiser_hidden: usize,
    lambda_f: f64,
    lambda_s: f64,
    lambda_l: f64,
    schedule_beta: Vec<f64>,
    params: BTreeMap<String, ParamRecord>,
}

pub fn save_head(path: &Path, head: &GraphHead, d_model: usize) -> Result<()> {
    let (d_out, hidden, lf, ls, ll, beta) = match head {
        GraphHead::Decoder(h) => (h.d_f.l2.d_out(), 0, h.lambda_f, h.lambda_s, 0.0, vec![]),
        GraphHead::Similarizer(h) => (h.s.l2.d_out(), 0, 0.0, 0.0, h.lambda_l, vec![]),
        GraphHead::Denoiser(h) => (
            h.out.d_out(),
            h.proj_e.d_out(),
            0.0,
            0.0,
            h.lambda_l,
            h.schedule.beta.clone(),
        ),
    };
    let ckpt = HeadCheckpoint {
        variant: head.variant(),
        d_model,
        d_out,
        denoiser_hidden: hidden,
        lambda_f: lf,
        lambda_s: ls,
        lambda_l: ll,
        schedule_beta: beta,
        params: params_to_map(&head.named_params()),
    };
    fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<GraphHead> {
    let ckpt: HeadCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let head = match ckpt.variant {
        Variant::Decoder => GraphHead::Decoder(DecoderHead::new(
            &mut rng,
            ckpt.d_model,
            ckpt.d_out,
            ckpt.lambda_f,
            ckpt.lambda_s,
        )?),
        Variant::Similarizer => GraphHead::Similarizer(SimilarizerHead::new(
            &mut rng,
            ckpt.d_model,
            ckpt.d_out,
            ckpt.lambda_l,
        )?),
        Variant::Denoiser => GraphHead::Denoiser(DenoiserHead::new(
            &mut rng,
            ckpt.d_model,
            ckpt.d_out,
            ckpt.denoiser_hidden,
            NoiseSchedule::new(ckpt.schedule_beta)?,
            ckpt.lambda_l,
        )?),
    };
    load_param_map(&ckpt.params, &head.named_params())?;
    Ok(head)
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_text: f64,
    pub loss_graph: f64,
    pub loss_total: f64,
    pub bound_report: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub wall_time_s: f64,
    pub peak_memory_note: String,
}

pub const METRICS_HEADER: &str =
    "epoch,step,loss_text,loss_graph,loss_total,bound_report,val_acc,val_f1,wall_time_s";

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6},{:.3}\n",
            r.epoch,
            r.step,
            r.loss_text,
            r.loss_graph,
            r.loss_total,
            r.bound_report,
            r.val_acc,
            r.val_f1,
            r.wall_time_s
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Greedy-decode the label token per example and score against gold.
pub fn evaluate(model: &LmModel, examples: &[Example], vocab: &Vocab, task: Task) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::Usage("empty evaluation split".into()));
    }
    let n_classes = match task {
        Task::NodeClassification => vocab.num_classes,
        Task::LinkPrediction => 2,
    };
    let mut gold = Vec::with_capacity(examples.len());
    let mut pred = Vec::with_capacity(examples.len());
    for ex in examples {
        let prefix = encode_prefix(model, &ex.seq)?;
        let placeholder: Vec<bool> = ex.seq.slots.iter().map(|s| !s.is_node()).collect();
        let decoded = greedy_decode(
            model,
            &prefix,
            &placeholder,
            &ex.instruction.prompt_tokens,
            ex.instruction.label_tokens.len(),
        )?;
        let p = match task {
            Task::NodeClassification => vocab.class_of_token(decoded[0]),
            Task::LinkPrediction => {
                if decoded[0] == vocab.yes_token() {
                    Some(1)
                } else if decoded[0] == vocab.no_token() {
                    Some(0)
                } else {
                    None
                }
            }
        };
        gold.push(ex.gold);
        pred.push(p);
    }
    Ok(score(&gold, &pred, n_classes))
}

/// Accuracy and macro-F1 from gold labels and (possibly unparseable)
/// predictions.
pub fn score(gold: &[usize], pred: &[Option<usize>], n_classes: usize) -> EvalMetrics {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnc = vec![0usize; n_classes];
    let mut correct = 0usize;
    for (&g, p) in gold.iter().zip(pred) {
        match p {
            Some(p) if *p == g => {
                tp[g] += 1;
                correct += 1;
            }
            Some(p) => {
                fp[*p] += 1;
                fnc[g] += 1;
            }
            None => fnc[g] += 1,
        }
    }
    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let p_den = tp[c] + fp[c];
        let r_den = tp[c] + fnc[c];
        let prec = if p_den == 0 { 0.0 } else { tp[c] as f64 / p_den as f64 };
        let rec = if r_den == 0 { 0.0 } else { tp[c] as f64 / r_den as f64 };
        if prec + rec > 0.0 {
            f1_sum += 2.0 * prec * rec / (prec + rec);
        }
    }
    EvalMetrics {
        accuracy: correct as f64 / gold.len() as f64,
        macro_f1: f1_sum / n_classes as f64,
    }
}

// ---------------------------------------------------------------------------
// training

pub struct TrainOutcome {
    pub model: LmModel,
    pub head: Option<GraphHead>,
    pub metrics: Vec<MetricsRecord>,
    pub vocab: Vocab,
    pub best_val: EvalMetrics,
}

fn build_head(cfg: &TrainConfig, d_model: usize, d_z: usize, d_e: usize, rng: &mut ChaCha12Rng) -> Result<Option<GraphHead>> {
    let lambda_f = if cfg.no_feat { 0.0 } else { cfg.lambda_f };
    let lambda_s = if cfg.no_topo { 0.0 } else { cfg.lambda_s };
    Ok(match cfg.variant {
        TrainVariant::Vanilla => None,
        TrainVariant::Decoder => Some(GraphHead::Decoder(DecoderHead::new(
            rng, d_model, d_z, lambda_f, lambda_s,
        )?)),
        TrainVariant::Similarizer => Some(GraphHead::Similarizer(SimilarizerHead::new(
            rng, d_model, d_e, cfg.lambda_l,
        )?)),
        TrainVariant::Denoiser => Some(GraphHead::Denoiser(DenoiserHead::new(
            rng,
            d_model,
            d_e,
            cfg.denoiser_hidden,
            NoiseSchedule::linear(cfg.diffusion_steps, 1e-4, 0.02)?,
            cfg.lambda_l,
        )?)),
    })
}

/// Latent targets per example for the latent variants; None otherwise.
fn build_targets(
    cfg: &TrainConfig,
    examples: &[Example],
    encoder: Option<&GnnEncoder>,
) -> Result<Option<Vec<Tensor>>> {
    if !cfg.variant.is_latent() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let t = match encoder {
            Some(enc) => gnn::encode_targets(enc, &ex.sub)?,
            // w/o PreGNN: reconstruct the raw input features instead
            None => {
                let n = ex.sub.node_count();
                let d = ex.sub.features.first().map_or(0, Vec::len);
                let flat: Vec<f64> = ex.sub.features.iter().flatten().copied().collect();
                Tensor::from_vec(&[n, d], flat)
            }
        };
        out.push(t);
    }
    Ok(Some(out))
}

/// Loss of one example under the current parameters; also returns the
/// text and graph components as plain numbers.
fn example_loss(
    model: &LmModel,
    head: Option<&GraphHead>,
    ex: &Example,
    target: Option<&Tensor>,
    rng: &mut ChaCha12Rng,
) -> Result<(Tensor, f64, f64)> {
    let prefix = encode_prefix(model, &ex.seq)?;
    let placeholder: Vec<bool> = ex.seq.slots.iter().map(|s| !s.is_node()).collect();
    let fwd = forward(model, &prefix, &ex.instruction.text_tokens(), &placeholder)?;
    let lt = text_loss(&fwd.logits, &ex.instruction, prefix.rows())?;
    match head {
        None => {
            let v = lt.item();
            Ok((lt, v, 0.0))
        }
        Some(h) => {
            let hidden = aggregate_h(&fwd.s_g, &ex.seq.gamma)?;
            let lg = graph_loss(h, &hidden, &ex.sub, target, rng)?;
            let (tv, gv) = (lt.item(), lg.item());
            let total = crate::heads::combined_loss(&lt, &lg)?;
            Ok((total, tv, gv))
        }
    }
}

pub fn train(cfg: &TrainConfig, tag: &Tag) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let vocab = Vocab::for_classes(tag.meta.num_classes);
    let ndt = cfg.ndt_config();
    ndt.validate()?;

    let train_set = build_instructions(tag, cfg.task, Split::Train, &ndt, &vocab, cfg.seed)?;
    let val_set = build_instructions(tag, cfg.task, Split::Val, &ndt, &vocab, cfg.seed)?;
    if train_set.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }

    let encoder = match (&cfg.pre_gnn, cfg.variant.is_latent() && !cfg.no_pregnn) {
        (Some(path), true) => Some(load_encoder(path)?),
        _ => None,
    };
    if let Some(enc) = &encoder {
        if enc.d_z != tag.meta.d_z {
            return Err(Error::Config(format!(
                "pre-gnn checkpoint expects d_z {}, dataset has {}",
                enc.d_z, tag.meta.d_z
            )));
        }
    }
    let d_e = encoder.as_ref().map(|e| e.cfg.d_e).unwrap_or(tag.meta.d_z);
    let targets = build_targets(cfg, &train_set, encoder.as_ref())?;

    let mut init_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let model = LmModel::new(cfg.lm_config(vocab.len(), tag.meta.d_z), &mut init_rng)?;
    let head = build_head(cfg, cfg.d_model, tag.meta.d_z, d_e, &mut init_rng)?;

    let mut trained: Vec<Tensor> = model.trainable_params().into_iter().map(|(_, t)| t).collect();
    if let Some(h) = &head {
        trained.extend(h.named_params().into_iter().map(|(_, t)| t));
    }
    let mut opt = Adam::new(trained.clone(), cfg.lr)?;

    // replicated index list over the training set
    let base_order: Vec<usize> = (0..train_set.len())
        .flat_map(|i| std::iter::repeat(i).take(cfg.replicate))
        .collect();
    let steps_per_epoch = base_order.len().div_ceil(cfg.batch_size);
    let warmup_steps = ((steps_per_epoch * cfg.epochs) as f64 * cfg.warmup_ratio).round() as usize;

    let mut order_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut graph_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let mem_note = format!(
        "{} trainable f64 values (~{} KiB with optimizer state)",
        trained.iter().map(|t| t.len()).sum::<usize>(),
        trained.iter().map(|t| t.len()).sum::<usize>() * 8 * 3 / 1024
    );

    let mut metrics = Vec::new();
    let mut best_val = EvalMetrics { accuracy: -1.0, macro_f1: 0.0 };
    let mut best_snapshot: Vec<Vec<f64>> = Vec::new();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = base_order.clone();
        order.shuffle(&mut order_rng);
        let mut sum_text = 0.0;
        let mut sum_graph = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_total: Option<Tensor> = None;
            for &i in chunk {
                let target = targets.as_ref().map(|t| &t[i]);
                let (loss, tv, gv) =
                    example_loss(&model, head.as_ref(), &train_set[i], target, &mut graph_rng)?;
                sum_text += tv;
                sum_graph += gv;
                count += 1;
                batch_total = Some(match batch_total {
                    None => loss,
                    Some(acc) => acc.add(&loss)?,
                });
            }
            let batch_loss = batch_total.unwrap().scale(1.0 / chunk.len() as f64);
            let lv = batch_loss.item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, step {global_step}: loss {lv}"
                )));
            }
            backward(&batch_loss)?;
            opt.step(warmup_scale(global_step, warmup_steps))?;
            global_step += 1;
        }
        let loss_text = sum_text / count as f64;
        let loss_graph = sum_graph / count as f64;
        let bound = match cfg.variant.recon() {
            Some(v) => report_lower_bound(v, loss_graph, 0.0).value,
            None => 0.0,
        };
        let val = if val_set.is_empty() {
            EvalMetrics { accuracy: 0.0, macro_f1: 0.0 }
        } else {
            evaluate(&model, &val_set, &vocab, cfg.task)?
        };
        if val.accuracy > best_val.accuracy {
            best_val = val;
            best_snapshot = trained.iter().map(|t| t.values()).collect();
        }
        metrics.push(MetricsRecord {
            epoch,
            step: global_step,
            loss_text,
            loss_graph,
            loss_total: loss_text + loss_graph,
            bound_report: bound,
            val_acc: val.accuracy,
            val_f1: val.macro_f1,
            wall_time_s: if cfg.deterministic_timing {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
            peak_memory_note: mem_note.clone(),
        });
    }

    // restore the best-validation parameters
    if !best_snapshot.is_empty() {
        for (t, vals) in trained.iter().zip(&best_snapshot) {
            t.set_values(vals);
        }
    }
    Ok(TrainOutcome { model, head, metrics, vocab, best_val })
}

/// Test-split metrics for an already trained model.
pub fn test_metrics(cfg: &TrainConfig, tag: &Tag, outcome: &TrainOutcome) -> Result<EvalMetrics> {
    let ndt = cfg.ndt_config();
    let test = build_instructions(tag, cfg.task, Split::Test, &ndt, &outcome.vocab, cfg.seed)?;
    evaluate(&outcome.model, &test, &outcome.vocab, cfg.task)
}

// ---------------------------------------------------------------------------
// experiment suites

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub label: String,
    pub seed: u64,
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub test_acc: f64,
    pub test_f1: f64,
}

pub fn runs_csv(rows: &[RunRow]) -> String {
    let mut out = String::from("label,seed,lambda_f,lambda_s,lambda_l,test_acc,test_f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6}\n",
            r.label, r.seed, r.lambda_f, r.lambda_s, r.lambda_l, r.test_acc, r.test_f1
        ));
    }
    out
}

/// Mean and sample standard deviation per label, appended as summary
/// rows with seed column `mean` / `std`.
pub fn summarize_runs(rows: &[RunRow]) -> Vec<(String, f64, f64, f64, f64)> {
    let mut labels: Vec<String> = Vec::new();
    for r in rows {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    let mut out = Vec::new();
    for label in labels {
        let accs: Vec<f64> = rows.iter().filter(|r| r.label == label).map(|r| r.test_acc).collect();
        let f1s: Vec<f64> = rows.iter().filter(|r| r.label == label).map(|r| r.test_f1).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let std = |v: &[f64], m: f64| {
            if v.len() < 2 {
                0.0
            } else {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            }
        };
        let (am, fm) = (mean(&accs), mean(&f1s));
        out.push((label, am, std(&accs, am), fm, std(&f1s, fm)));
    }
    out
}

fn run_once(cfg: &TrainConfig, tag: &Tag, label: &str, seed: u64) -> Result<RunRow> {
    let mut c = cfg.clone();
    c.seed = seed;
    let outcome = train(&c, tag)?;
    let test = test_metrics(&c, tag, &outcome)?;
    Ok(RunRow {
        label: label.to_string(),
        seed,
        lambda_f: if c.no_feat || c.variant != TrainVariant::Decoder { 0.0 } else { c.lambda_f },
        lambda_s: if c.no_topo || c.variant != TrainVariant::Decoder { 0.0 } else { c.lambda_s },
        lambda_l: if c.variant.is_latent() { c.lambda_l } else { 0.0 },
        test_acc: test.accuracy,
        test_f1: test.macro_f1,
    })
}

/// The ablation table for the configured variant.
pub fn ablate(base: &TrainConfig, tag: &Tag, seeds: &[u64]) -> Result<Vec<RunRow>> {
    base.validate()?;
    let mut cells: Vec<(String, TrainConfig)> = Vec::new();
    let vanilla = TrainConfig { variant: TrainVariant::Vanilla, ..base.clone() };
    cells.push(("vanilla".into(), vanilla));
    cells.push(("full".into(), base.clone()));
    match base.variant {
        TrainVariant::Decoder => {
            cells.push(("no_feat".into(), TrainConfig { no_feat: true, ..base.clone() }));
            cells.push(("no_topo".into(), TrainConfig { no_topo: true, ..base.clone() }));
        }
        TrainVariant::Similarizer | TrainVariant::Denoiser => {
            cells.push(("no_pregnn".into(), TrainConfig { no_pregnn: true, ..base.clone() }));
        }
        TrainVariant::Vanilla => {}
    }
    let mut rows = Vec::new();
    for (label, cfg) in &cells {
        for &seed in seeds {
            rows.push(run_once(cfg, tag, label, seed)?);
        }
    }
    Ok(rows)
}

/// One train+evaluate per grid point per seed.
pub fn sweep(
    base: &TrainConfig,
    tag: &Tag,
    grid: &[(f64, f64, f64)],
    seeds: &[u64],
) -> Result<Vec<RunRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut rows = Vec::new();
    for &(lf, ls, ll) in grid {
        let cfg = TrainConfig { lambda_f: lf, lambda_s: ls, lambda_l: ll, ..base.clone() };
        let label = format!("lf{lf}_ls{ls}_ll{ll}");
        for &seed in seeds {
            rows.push(run_once(&cfg, tag, &label, seed)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRow {
    pub example_id: usize,
    pub a_mass: f64,
    pub a_log_mass: f64,
    pub b_mass: f64,
    pub b_log_mass: f64,
}

/// Last-token attention mass on real graph slots, per test example, for
/// two checkpoints.
pub fn attention_report(
    model_a: &LmModel,
    model_b: &LmModel,
    examples: &[Example],
) -> Result<Vec<AttentionRow>> {
    let mut rows = Vec::new();
    for ex in examples {
        let mass = |model: &LmModel| -> Result<f64> {
            let prefix = encode_prefix(model, &ex.seq)?;
            let placeholder: Vec<bool> = ex.seq.slots.iter().map(|s| !s.is_node()).collect();
            let fwd = forward(model, &prefix, &ex.instruction.text_tokens(), &placeholder)?;
            Ok(attention_probe(&fwd, &ex.seq.node_mask()).graph_mass)
        };
        let a = mass(model_a)?;
        let b = mass(model_b)?;
        rows.push(AttentionRow {
            example_id: ex.id,
            a_mass: a,
            a_log_mass: a.max(1e-300).ln(),
            b_mass: b,
            b_log_mass: b.max(1e-300).ln(),
        });
    }
    Ok(rows)
}

pub fn attention_csv(rows: &[AttentionRow]) -> String {
    let mut out = String::from("example_id,a_mass,a_log_mass,b_mass,b_log_mass\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.6},{:.9},{:.6}\n",
            r.example_id, r.a_mass, r.a_log_mass, r.b_mass, r.b_log_mass
        ));
    }
    out
}

/// Train on one dataset, evaluate zero-shot on another with the same
/// class vocabulary.
pub fn cross_dataset_eval(cfg: &TrainConfig, tag_train: &Tag, tag_target: &Tag) -> Result<EvalMetrics> {
    if tag_train.meta.num_classes != tag_target.meta.num_classes {
        return Err(Error::Config(format!(
            "class vocabulary mismatch: {} vs {} classes",
            tag_train.meta.num_classes, tag_target.meta.num_classes
        )));
    }
    if tag_train.meta.d_z != tag_target.meta.d_z {
        return Err(Error::Config("feature dimension mismatch between datasets".into()));
    }
    let outcome = train(cfg, tag_train)?;
    let ndt = cfg.ndt_config();
    let test = build_instructions(tag_target, cfg.task, Split::Test, &ndt, &outcome.vocab, cfg.seed)?;
    evaluate(&outcome.model, &test, &outcome.vocab, cfg.task)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    pub secs_per_epoch_mean: f64,
    pub secs_per_epoch_std: f64,
    pub epochs_measured: usize,
    pub memory_note: String,
}

/// Wall time per epoch (mean and spread over measured epochs) for each
/// configuration, plus the allocation high-water note.
pub fn timing_report(cfgs: &[(String, TrainConfig)], tag: &Tag) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in cfgs {
        let outcome = train(cfg, tag)?;
        let mut times = Vec::new();
        let mut prev = 0.0;
        for m in &outcome.metrics {
            times.push(m.wall_time_s - prev);
            prev = m.wall_time_s;
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let std = if times.len() < 2 {
            0.0
        } else {
            (times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (times.len() - 1) as f64)
                .sqrt()
        };
        rows.push(TimingRow {
            label: label.clone(),
            secs_per_epoch_mean: mean,
            secs_per_epoch_std: std,
            epochs_measured: times.len(),
            memory_note: outcome.metrics.last().map(|m| m.peak_memory_note.clone()).unwrap_or_default(),
        });
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("label,secs_per_epoch_mean,secs_per_epoch_std,epochs_measured,memory_note\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{},{}\n",
            r.label, r.secs_per_epoch_mean, r.secs_per_epoch_std, r.epochs_measured, r.memory_note
        ));
    }
    out
}

/// Convenience: load the dataset referenced by a config.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Tag> {
    load_tag(&cfg.dataset)
}

// ---------------------------------------------------------------------------
// gradient suite

/// Finite-difference checks of every loss through its full stack on a
/// d_model = 16 configuration. Returns (label, relative error) pairs.
pub fn gradient_suite() -> Result<Vec<(String, f64)>> {
    use crate::autodiff::grad_check;
    use crate::gnn::{sample_mask, GnnEncoder};
    use crate::heads::{diff_loss_at, feat_loss, sim_loss, topo_loss};
    use crate::tag::{generate_synthetic_tag, SbmSpec};

    let tag = generate_synthetic_tag(&SbmSpec {
        nodes: 12,
        classes: 2,
        d_z: 3,
        intra_p: 0.6,
        inter_p: 0.15,
        feature_noise: 0.3,
        seed: 31,
        name: "gradsuite".into(),
        ..Default::default()
    })?;
    let vocab = Vocab::for_classes(2);
    let ndt = NdtConfig::new(&[2, 2]);
    let examples = build_instructions(&tag, Task::NodeClassification, Split::Train, &ndt, &vocab, 7)?;
    let ex = examples
        .iter()
        .find(|e| !e.sub.edges.is_empty() && e.sub.node_count() >= 3)
        .ok_or_else(|| Error::Usage("gradient suite found no suitable example".into()))?;

    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_len: 32,
        d_z: 3,
        lora: LoraConfig::default(),
        mask_placeholders: false,
        projector_activation: ProjectorActivation::Gelu,
    };
    let model = LmModel::new(lm_cfg, &mut rng)?;
    let model_params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();

    let forward_h = |model: &LmModel| -> Result<(Tensor, Tensor)> {
        let prefix = encode_prefix(model, &ex.seq)?;
        let placeholder: Vec<bool> = ex.seq.slots.iter().map(|s| !s.is_node()).collect();
        let fwd = forward(model, &prefix, &ex.instruction.text_tokens(), &placeholder)?;
        let lt = text_loss(&fwd.logits, &ex.instruction, prefix.rows())?;
        let h = aggregate_h(&fwd.s_g, &ex.seq.gamma)?;
        Ok((lt, h))
    };

    let mut results = Vec::new();

    let err = grad_check(|| forward_h(&model).map(|(lt, _)| lt), &model_params, 1e-5)?;
    results.push(("text".to_string(), err));

    let dec = DecoderHead::new(&mut rng, 16, 3, 1.0, 1.0)?;
    let mut with_head = model_params.clone();
    with_head.extend(dec.named_params().into_iter().map(|(_, t)| t));
    let err = grad_check(
        || {
            let (_, h) = forward_h(&model)?;
            feat_loss(&h, &ex.sub.features, &dec)
        },
        &with_head,
        1e-5,
    )?;
    results.push(("feat".to_string(), err));

    let (negs, _) = crate::heads::sample_negative_edges(&ex.sub, ex.sub.edges.len().max(1), &mut rng);
    if !negs.is_empty() {
        let err = grad_check(
            || {
                let (_, h) = forward_h(&model)?;
                topo_loss(&h, &ex.sub.edges, &negs, &dec)
            },
            &with_head,
            1e-5,
        )?;
        results.push(("topo".to_string(), err));
    }

    let sim = SimilarizerHead::new(&mut rng, 16, 4, 1.0)?;
    let n = ex.sub.node_count();
    let target = Tensor::from_vec(
        &[n, 4],
        (0..n * 4).map(|i| (i as f64 * 0.37).sin() + 1.2).collect(),
    );
    let mut with_sim = model_params.clone();
    with_sim.extend(sim.named_params().into_iter().map(|(_, t)| t));
    let err = grad_check(
        || {
            let (_, h) = forward_h(&model)?;
            sim_loss(&h, &target, &sim)
        },
        &with_sim,
        1e-5,
    )?;
    results.push(("sim".to_string(), err));

    let den = DenoiserHead::new(&mut rng, 16, 4, 8, NoiseSchedule::linear_default(), 1.0)?;
    let eps: Vec<f64> = (0..n * 4).map(|i| (i as f64 * 1.3).cos()).collect();
    let mut with_den = model_params.clone();
    with_den.extend(den.named_params().into_iter().map(|(_, t)| t));
    let err = grad_check(
        || {
            let (_, h) = forward_h(&model)?;
            diff_loss_at(&den, &target, &h, 23, &eps)
        },
        &with_den,
        1e-5,
    )?;
    results.push(("diff".to_string(), err));

    let gnn_cfg = GnnConfig { d_e: 6, k_pe: 2, k_rwse: 2, ..Default::default() };
    let encoder = GnnEncoder::new(gnn_cfg, tag.meta.d_z, tag.meta.num_classes, &mut rng)?;
    let labeled: Vec<usize> = (0..tag.node_count)
        .filter(|&i| tag.splits[i] == Split::Train && tag.labels[i].is_some())
        .collect();
    let masked = sample_mask(&labeled, 0.8, &mut rng);
    let inputs: Vec<Option<usize>> = (0..tag.node_count)
        .map(|i| match (tag.splits[i], tag.labels[i]) {
            (Split::Train, Some(c)) if !masked.contains(&i) => Some(c),
            _ => None,
        })
        .collect();
    let gnn_params: Vec<Tensor> = encoder.named_params().into_iter().map(|(_, t)| t).collect();
    let err = grad_check(
        || gnn::pretrain_loss(&encoder, &tag, &masked, &inputs),
        &gnn_params,
        1e-5,
    )?;
    results.push(("pretrain".to_string(), err));

    Ok(results)
}
