//! The three reconstructive graph objectives over the aggregated node
//! states H: feature + structure decoding in input space, cosine
//! similarization against pretrained latents, and diffusion noise
//! prediction conditioned on H.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::lm::Linear;
use crate::tag::Subgraph;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Decoder,
    Similarizer,
    Denoiser,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "decoder" => Ok(Variant::Decoder),
            "similarizer" => Ok(Variant::Similarizer),
            "denoiser" => Ok(Variant::Denoiser),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected decoder, similarizer, or denoiser"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Decoder => "decoder",
            Variant::Similarizer => "similarizer",
            Variant::Denoiser => "denoiser",
        })
    }
}

/// Two dense layers with an optional gelu in between.
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub gelu: bool,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha12Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Mlp {
        Mlp { l1: Linear::new(rng, d_in, d_hidden), l2: Linear::new(rng, d_hidden, d_out), gelu: true }
    }

    pub fn identity(d: usize) -> Mlp {
        Mlp { l1: Linear::identity(d), l2: Linear::identity(d), gelu: false }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.forward(x)?;
        let h = if self.gelu { h.gelu() } else { h };
        self.l2.forward(&h)
    }

    fn push_params(&self, out: &mut Vec<(String, Tensor)>, name: &str) {
        out.push((format!("{name}.l1.weight"), self.l1.weight.clone()));
        out.push((format!("{name}.l1.bias"), self.l1.bias.clone()));
        out.push((format!("{name}.l2.weight"), self.l2.weight.clone()));
        out.push((format!("{name}.l2.bias"), self.l2.bias.clone()));
    }
}

/// Input-space head: feature decoder d_f plus pairwise structure scorer
/// d_s(h_i, h_j) = (W h_i) . (W h_j).
pub struct DecoderHead {
    pub d_f: Mlp,
    pub w_s: Tensor,
    pub lambda_f: f64,
    pub lambda_s: f64,
}

impl DecoderHead {
    pub fn new(
        rng: &mut ChaCha12Rng,
        d_model: usize,
        d_z: usize,
        lambda_f: f64,
        lambda_s: f64,
    ) -> Result<DecoderHead> {
        if lambda_f < 0.0 || lambda_s < 0.0 {
            return Err(Error::Parameter("loss weights must be nonnegative".into()));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let w: Vec<f64> = (0..d_model * d_model)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std)
            .collect();
        Ok(DecoderHead {
            d_f: Mlp::new(rng, d_model, d_model, d_z),
            w_s: Tensor::param(&[d_model, d_model], w),
            lambda_f,
            lambda_s,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.d_f.push_params(&mut out, "d_f");
        out.push(("w_s".into(), self.w_s.clone()));
        out
    }
}

/// Mean squared feature-reconstruction error over subgraph nodes.
pub fn feat_loss(h: &Tensor, z_sub: &[Vec<f64>], head: &DecoderHead) -> Result<Tensor> {
    if h.rows() != z_sub.len() {
        return Err(Error::Usage(format!(
            "H has {} rows but subgraph has {} nodes",
            h.rows(),
            z_sub.len()
        )));
    }
    let decoded = head.d_f.forward(h)?;
    let d_z = decoded.cols();
    if z_sub.iter().any(|z| z.len() != d_z) {
        return Err(Error::Dimension("feature row width mismatch".into()));
    }
    let flat: Vec<f64> = z_sub.iter().flatten().copied().collect();
    let target = Tensor::from_vec(&[z_sub.len(), d_z], flat);
    Ok(decoded.sub(&target)?.square().sum_rows().mean())
}

/// Uniform sample of `count` absent unordered pairs (no edge, i != j).
/// Returns the pairs and whether the request was truncated to the
/// number of pairs that exist.
pub fn sample_negative_edges(
    sub: &Subgraph,
    count: usize,
    rng: &mut ChaCha12Rng,
) -> (Vec<(usize, usize)>, bool) {
    let n = sub.node_count();
    let mut absent: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !sub.has_edge(i, j) {
                absent.push((i, j));
            }
        }
    }
    let truncated = absent.len() < count;
    use rand::seq::SliceRandom;
    absent.shuffle(rng);
    absent.truncate(count);
    absent.sort_unstable();
    (absent, truncated)
}

/// BCE over sigmoid scores: positives from the edge list, negatives
/// from the sampled absent pairs, both in stable log-sigmoid form.
pub fn topo_loss(
    h: &Tensor,
    edges: &[(usize, usize)],
    negatives: &[(usize, usize)],
    head: &DecoderHead,
) -> Result<Tensor> {
    if edges.is_empty() || negatives.is_empty() {
        return Err(Error::Usage("topology loss needs nonempty edge and negative sets".into()));
    }
    let proj = h.matmul(&head.w_s)?;
    let scores = |pairs: &[(usize, usize)]| -> Result<Tensor> {
        let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let a = proj.gather_rows(&is)?;
        let b = proj.gather_rows(&js)?;
        Ok(a.mul(&b)?.sum_rows())
    };
    let pos = scores(edges)?;
    let neg = scores(negatives)?;
    bce_from_scores(&pos, &neg)
}

/// -mean log sigmoid(pos) - mean log(1 - sigmoid(neg)).
pub fn bce_from_scores(pos: &Tensor, neg: &Tensor) -> Result<Tensor> {
    pos.scale(-1.0).softplus().mean().add(&neg.softplus().mean())
}

/// Latent-space head: projection s toward the frozen encoder's space.
pub struct SimilarizerHead {
    pub s: Mlp,
    pub lambda_l: f64,
}

impl SimilarizerHead {
    pub fn new(rng: &mut ChaCha12Rng, d_model: usize, d_e: usize, lambda_l: f64) -> Result<SimilarizerHead> {
        if lambda_l < 0.0 {
            return Err(Error::Parameter("lambda_l must be nonnegative".into()));
        }
        Ok(SimilarizerHead { s: Mlp::new(rng, d_model, d_model, d_e), lambda_l })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.s.push_params(&mut out, "s");
        out
    }
}

/// Mean over nodes of 1 - cosine(s(h_v), e_v), both sides row-normalized.
pub fn sim_loss(h: &Tensor, e_target: &Tensor, head: &SimilarizerHead) -> Result<Tensor> {
    let proj = head.s.forward(h)?;
    if proj.shape() != e_target.shape() {
        return Err(Error::Dimension(format!(
            "projected shape {:?} vs target shape {:?}",
            proj.shape(),
            e_target.shape()
        )));
    }
    let n = proj.rows();
    let pn = proj.norm_rows();
    for (i, v) in pn.values().iter().enumerate() {
        if *v < 1e-12 {
            return Err(Error::Numeric(format!("zero-norm projected row {i}")));
        }
    }
    let ev = e_target.values();
    let c = e_target.cols();
    let mut e_norm = vec![0.0; n * c];
    for i in 0..n {
        let norm: f64 = ev[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!("zero-norm target row {i}")));
        }
        for j in 0..c {
            e_norm[i * c + j] = ev[i * c + j] / norm;
        }
    }
    let proj_unit = proj.scale_rows(&pn.recip())?;
    let cos = proj_unit.mul(&Tensor::from_vec(&[n, c], e_norm))?.sum_rows();
    Ok(cos.scale(-1.0).add_scalar(1.0).mean())
}

/// Variance-preserving forward-noising schedule.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    /// alpha_bar[t] = prod_{i<=t} (1 - beta_i), alpha_bar[0] = 1.
    pub alpha_bar: Vec<f64>,
    /// Reverse-process variances; sigma2[0] = 0.
    pub sigma2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    t: usize,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(beta: Vec<f64>) -> Result<NoiseSchedule> {
        if beta.is_empty() {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if beta.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::Parameter("beta values must lie in [0, 1)".into()));
        }
        let t_max = beta.len();
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t - 1]);
        }
        let mut sigma2 = vec![0.0; t_max + 1];
        for t in 1..=t_max {
            sigma2[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]).max(1e-300) * beta[t - 1];
        }
        Ok(NoiseSchedule { beta, alpha_bar, sigma2 })
    }

    /// The conventional desk-scale default: T = 100, beta linear from
    /// 1e-4 to 0.02.
    pub fn linear_default() -> NoiseSchedule {
        Self::linear(100, 1e-4, 0.02).unwrap()
    }

    pub fn linear(t: usize, start: f64, end: f64) -> Result<NoiseSchedule> {
        if t < 1 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        let beta = (0..t)
            .map(|i| {
                if t == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::new(beta)
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ScheduleFile { t: self.t_max(), beta: self.beta.clone() })?)
    }

    pub fn from_json(s: &str) -> Result<NoiseSchedule> {
        let f: ScheduleFile = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if f.t != f.beta.len() {
            return Err(Error::Parse("schedule step count disagrees with beta list".into()));
        }
        NoiseSchedule::new(f.beta)
    }
}

/// E_t = sqrt(alpha_bar_t) E + sqrt(1 - alpha_bar_t) eps.
pub fn forward_noise(e: &Tensor, t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Tensor> {
    if t < 1 || t > schedule.t_max() {
        return Err(Error::Parameter(format!(
            "timestep {t} outside [1, {}]",
            schedule.t_max()
        )));
    }
    if eps.len() != e.len() {
        return Err(Error::Dimension("noise shape mismatch".into()));
    }
    let ab = schedule.alpha_bar[t];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out: Vec<f64> = e.values().iter().zip(eps).map(|(x, n)| sa * x + sn * n).collect();
    Ok(Tensor::from_vec(&e.shape(), out))
}

const T_EMB_DIM: usize = 16;

fn timestep_embedding(t: usize) -> Vec<f64> {
    let half = T_EMB_DIM / 2;
    let mut out = vec![0.0; T_EMB_DIM];
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        out[2 * i] = (t as f64 * freq).sin();
        out[2 * i + 1] = (t as f64 * freq).cos();
    }
    out
}

/// Diffusion head: one transformer-style block over projected noisy
/// latents, conditioned on C = psi(H) and a sinusoidal timestep
/// embedding through their own projection layers.
pub struct DenoiserHead {
    pub proj_e: Linear,
    /// The condition projection psi.
    pub proj_c: Linear,
    pub proj_t: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp: Mlp,
    pub out: Linear,
    pub schedule: NoiseSchedule,
    pub lambda_l: f64,
}

impl DenoiserHead {
    pub fn new(
        rng: &mut ChaCha12Rng,
        d_model: usize,
        d_e: usize,
        d_hidden: usize,
        schedule: NoiseSchedule,
        lambda_l: f64,
    ) -> Result<DenoiserHead> {
        if lambda_l < 0.0 {
            return Err(Error::Parameter("lambda_l must be nonnegative".into()));
        }
        Ok(DenoiserHead {
            proj_e: Linear::new(rng, d_e, d_hidden),
            proj_c: Linear::new(rng, d_model, d_hidden),
            proj_t: Linear::new(rng, T_EMB_DIM, d_hidden),
            wq: Linear::new(rng, d_hidden, d_hidden),
            wk: Linear::new(rng, d_hidden, d_hidden),
            wv: Linear::new(rng, d_hidden, d_hidden),
            wo: Linear::new(rng, d_hidden, d_hidden),
            mlp: Mlp::new(rng, d_hidden, 2 * d_hidden, d_hidden),
            out: Linear::new(rng, d_hidden, d_e),
            schedule,
            lambda_l,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, lin) in [
            ("proj_e", &self.proj_e),
            ("proj_c", &self.proj_c),
            ("proj_t", &self.proj_t),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("out", &self.out),
        ] {
            out.push((format!("{name}.weight"), lin.weight.clone()));
            out.push((format!("{name}.bias"), lin.bias.clone()));
        }
        self.mlp.push_params(&mut out, "mlp");
        out
    }

    /// Predict the noise from (E_t, H, t).
    pub fn forward(&self, e_t: &Tensor, h: &Tensor, t: usize) -> Result<Tensor> {
        if t < 1 || t > self.schedule.t_max() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [1, {}]",
                self.schedule.t_max()
            )));
        }
        if e_t.rows() != h.rows() {
            return Err(Error::Dimension("E_t and H must be row-aligned".into()));
        }
        let temb = Tensor::from_vec(&[1, T_EMB_DIM], timestep_embedding(t));
        let d_h = self.proj_e.d_out();
        let t_row = self.proj_t.forward(&temb)?.reshape(&[d_h])?;
        let mut x = self
            .proj_e
            .forward(e_t)?
            .add(&self.proj_c.forward(h)?)?
            .add(&t_row)?;
        let q = self.wq.forward(&x)?;
        let k = self.wk.forward(&x)?;
        let v = self.wv.forward(&x)?;
        let probs = q
            .matmul(&k.transpose())?
            .scale(1.0 / (d_h as f64).sqrt())
            .softmax_rows(None)?;
        x = x.add(&self.wo.forward(&probs.matmul(&v)?)?)?;
        x = x.add(&self.mlp.forward(&x)?)?;
        self.out.forward(&x)
    }
}

/// Mean squared element-wise error against the drawn noise.
pub fn noise_mse(pred: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if pred.len() != eps.len() {
        return Err(Error::Dimension("noise shape mismatch".into()));
    }
    let target = Tensor::from_vec(&pred.shape(), eps.to_vec());
    Ok(pred.sub(&target)?.square().mean())
}

/// Single-sample noise-prediction loss at a fixed (t, eps).
pub fn diff_loss_at(head: &DenoiserHead, e: &Tensor, h: &Tensor, t: usize, eps: &[f64]) -> Result<Tensor> {
    let e_t = forward_noise(e, t, eps, &head.schedule)?;
    let pred = head.forward(&e_t, h, t)?;
    noise_mse(&pred, eps)
}

/// Single-sample Monte-Carlo estimate of the diffusion loss: draws t
/// uniform over [1, T] and standard-normal eps.
pub fn diff_loss(head: &DenoiserHead, e: &Tensor, h: &Tensor, rng: &mut ChaCha12Rng) -> Result<Tensor> {
    let t = rng.gen_range(1..=head.schedule.t_max());
    let eps: Vec<f64> = (0..e.len())
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    diff_loss_at(head, e, h, t, &eps)
}

/// The chosen variant's head, bundled for the combined objective.
pub enum GraphHead {
    Decoder(DecoderHead),
    Similarizer(SimilarizerHead),
    Denoiser(DenoiserHead),
}

impl GraphHead {
    pub fn variant(&self) -> Variant {
        match self {
            GraphHead::Decoder(_) => Variant::Decoder,
            GraphHead::Similarizer(_) => Variant::Similarizer,
            GraphHead::Denoiser(_) => Variant::Denoiser,
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        match self {
            GraphHead::Decoder(h) => h.named_params(),
            GraphHead::Similarizer(h) => h.named_params(),
            GraphHead::Denoiser(h) => h.named_params(),
        }
    }
}

/// Weighted graph-reconstruction loss for one subgraph. The latent
/// variants need pretrained targets; the decoder drops the topology
/// term when the subgraph has no edges or no absent pairs to sample.
pub fn graph_loss(
    head: &GraphHead,
    h: &Tensor,
    sub: &Subgraph,
    targets: Option<&Tensor>,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    match head {
        GraphHead::Decoder(d) => {
            let mut loss = feat_loss(h, &sub.features, d)?.scale(d.lambda_f);
            if !sub.edges.is_empty() {
                let (negs, _truncated) = sample_negative_edges(sub, sub.edges.len(), rng);
                if !negs.is_empty() {
                    loss = loss.add(&topo_loss(h, &sub.edges, &negs, d)?.scale(d.lambda_s))?;
                }
            }
            Ok(loss)
        }
        GraphHead::Similarizer(s) => {
            let e = targets.ok_or_else(|| {
                Error::Config("similarizer needs pretrained latent targets".into())
            })?;
            Ok(sim_loss(h, e, s)?.scale(s.lambda_l))
        }
        GraphHead::Denoiser(den) => {
            let e = targets
                .ok_or_else(|| Error::Config("denoiser needs pretrained latent targets".into()))?;
            Ok(diff_loss(den, e, h, rng)?.scale(den.lambda_l))
        }
    }
}

/// L = L_text + L_graph, exactly.
pub fn combined_loss(text: &Tensor, graph: &Tensor) -> Result<Tensor> {
    if !text.item().is_finite() || !graph.item().is_finite() {
        return Err(Error::Numeric("non-finite loss component".into()));
    }
    text.add(graph)
}

/// Report-time variational bound: entropy estimate minus the weighted
/// loss, with the unidentifiable constants pinned to kappa = 1, C = 0
/// and flagged. Useful only for monotone tracking across checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub variant: Variant,
    pub value: f64,
    pub kappa: f64,
    pub c: f64,
    /// Always true: constants are placeholders, not estimates.
    pub caveat: bool,
}

pub fn report_lower_bound(variant: Variant, graph_loss_value: f64, entropy_estimate: f64) -> BoundReport {
    BoundReport {
        variant,
        value: entropy_estimate - graph_loss_value,
        kappa: 1.0,
        c: 0.0,
        caveat: true,
    }
}
