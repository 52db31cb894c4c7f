//! Message-passing encoder with Laplacian / random-walk positional
//! encodings, pretrained by masked-label prediction plus a Gaussian KL
//! regularizer, then frozen to emit per-node latent targets.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tensor};
use crate::lm::Linear;
use crate::opt::Adam;
use crate::tag::{Split, Subgraph, Tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnnConfig {
    pub d_e: usize,
    pub n_layers: usize,
    /// Laplacian eigenvector count.
    pub k_pe: usize,
    /// Random-walk return-probability steps.
    pub k_rwse: usize,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
    /// Learned edge/non-edge attention bias over all pairs; quadratic,
    /// only allowed below 200 nodes.
    pub dense_pair_bias: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            d_e: 32,
            n_layers: 3,
            k_pe: 4,
            k_rwse: 4,
            mask_ratio: 0.8,
            epochs: 60,
            lr: 5e-3,
            kl_weight: 1.0,
            seed: 0,
            dense_pair_bias: false,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config("need at least 2 layers (conv + attention)".into()));
        }
        if self.k_rwse == 0 {
            return Err(Error::Config("k_rwse must be >= 1".into()));
        }
        Ok(())
    }
}

/// Eigenvalues of the unnormalized Laplacian D - A, ascending.
pub fn laplacian_eigenvalues(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let mut l = DMatrix::<f64>::zeros(n, n);
    for &(a, b) in edges {
        l[(a, b)] = -1.0;
        l[(b, a)] = -1.0;
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
    }
    let mut eigs: Vec<f64> = l.symmetric_eigen().eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

/// Eigenvectors of the unnormalized Laplacian for the k smallest
/// positive eigenvalues, one row per node. Signs are fixed by
/// permutation-invariant functionals (entry sum, then cube sum, then
/// first sizeable entry positive) so relabeling nodes permutes rows.
/// Missing columns (fewer than k positive eigenvalues) are zero.
pub fn lap_pe(n: usize, edges: &[(usize, usize)], k: usize) -> Result<Vec<Vec<f64>>> {
    if k >= n {
        return Err(Error::Parameter(format!("k = {k} must be < node count {n}")));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for &(a, b) in edges {
        l[(a, b)] = -1.0;
        l[(b, a)] = -1.0;
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
    }
    let decomp = l.symmetric_eigen();
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| {
            (
                decomp.eigenvalues[i],
                decomp.eigenvectors.column(i).iter().copied().collect(),
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out = vec![vec![0.0; k]; n];
    let mut col = 0;
    for (val, mut vec) in pairs {
        if col == k {
            break;
        }
        if val <= 1e-9 {
            continue;
        }
        let tol = 1e-10;
        let sum: f64 = vec.iter().sum();
        let cube: f64 = vec.iter().map(|x| x * x * x).sum();
        let sign = if sum.abs() > tol {
            sum.signum()
        } else if cube.abs() > tol {
            cube.signum()
        } else {
            vec.iter().find(|x| x.abs() > tol).map_or(1.0, |x| x.signum())
        };
        if sign < 0.0 {
            for x in &mut vec {
                *x = -*x;
            }
        }
        for (i, x) in vec.iter().enumerate() {
            out[i][col] = *x;
        }
        col += 1;
    }
    Ok(out)
}

/// k-step random-walk return probabilities, k = 1..=big_k, one row per
/// node: entry k-1 is diag((D^-1 A)^k). Isolated nodes get zeros.
pub fn rwse(n: usize, edges: &[(usize, usize)], big_k: usize) -> Result<Vec<Vec<f64>>> {
    if big_k == 0 {
        return Err(Error::Parameter("random-walk step count must be >= 1".into()));
    }
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut deg = vec![0usize; n];
    for &(a, b) in edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    for &(a, b) in edges {
        p[(a, b)] = 1.0 / deg[a] as f64;
        p[(b, a)] = 1.0 / deg[b] as f64;
    }
    let mut out = vec![vec![0.0; big_k]; n];
    let mut pk = p.clone();
    for k in 0..big_k {
        for i in 0..n {
            out[i][k] = pk[(i, i)];
        }
        if k + 1 < big_k {
            pk = &pk * &p;
        }
    }
    Ok(out)
}

const LABEL_EMB_DIM: usize = 8;

pub struct GnnEncoder {
    pub cfg: GnnConfig,
    pub d_z: usize,
    pub num_classes: usize,
    input_proj: Linear,
    conv_self: Vec<Linear>,
    conv_nbr: Vec<Linear>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    pair_bias: Option<Tensor>,
    decoder: Linear,
    stats: Linear,
    /// One row per class plus a trailing MASK row.
    label_emb: Tensor,
    pub frozen: bool,
}

impl GnnEncoder {
    pub fn new(cfg: GnnConfig, d_z: usize, num_classes: usize, rng: &mut ChaCha12Rng) -> Result<GnnEncoder> {
        cfg.validate()?;
        let d_in = d_z + cfg.k_pe + cfg.k_rwse + LABEL_EMB_DIM;
        let d = cfg.d_e;
        let n_conv = cfg.n_layers - 1;
        use rand_distr::{Distribution, StandardNormal};
        let emb: Vec<f64> = (0..(num_classes + 1) * LABEL_EMB_DIM)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * 0.1)
            .collect();
        Ok(GnnEncoder {
            input_proj: Linear::new(rng, d_in, d),
            conv_self: (0..n_conv).map(|_| Linear::new(rng, d, d)).collect(),
            conv_nbr: (0..n_conv).map(|_| Linear::new(rng, d, d)).collect(),
            wq: Linear::new(rng, d, d),
            wk: Linear::new(rng, d, d),
            wv: Linear::new(rng, d, d),
            pair_bias: if cfg.dense_pair_bias {
                Some(Tensor::param(&[2], vec![0.0, 0.0]))
            } else {
                None
            },
            decoder: Linear::new(rng, d, num_classes),
            stats: Linear::new(rng, d, 2 * d),
            label_emb: Tensor::param(&[num_classes + 1, LABEL_EMB_DIM], emb),
            cfg,
            d_z,
            num_classes,
            frozen: false,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(String, Tensor)>, name: &str, l: &Linear| {
            out.push((format!("{name}.weight"), l.weight.clone()));
            out.push((format!("{name}.bias"), l.bias.clone()));
        };
        lin(&mut out, "input_proj", &self.input_proj);
        for (i, (s, n)) in self.conv_self.iter().zip(&self.conv_nbr).enumerate() {
            lin(&mut out, &format!("conv{i}.self"), s);
            lin(&mut out, &format!("conv{i}.nbr"), n);
        }
        lin(&mut out, "attn.wq", &self.wq);
        lin(&mut out, "attn.wk", &self.wk);
        lin(&mut out, "attn.wv", &self.wv);
        if let Some(b) = &self.pair_bias {
            out.push(("pair_bias".into(), b.clone()));
        }
        lin(&mut out, "decoder", &self.decoder);
        lin(&mut out, "stats", &self.stats);
        out.push(("label_emb".into(), self.label_emb.clone()));
        out
    }

    /// Hidden states for an arbitrary graph. `label_inputs[i] = None`
    /// feeds the MASK embedding.
    pub fn hidden(
        &self,
        n: usize,
        edges: &[(usize, usize)],
        features: &[Vec<f64>],
        label_inputs: &[Option<usize>],
    ) -> Result<Tensor> {
        if features.len() != n || label_inputs.len() != n {
            return Err(Error::Dimension("feature/label row count mismatch".into()));
        }
        if features.iter().any(|f| f.len() != self.d_z) {
            return Err(Error::Dimension(format!(
                "feature dim mismatch: expected {}",
                self.d_z
            )));
        }
        if self.cfg.dense_pair_bias && n >= 200 {
            return Err(Error::Config(
                "dense pair bias is quadratic and only allowed below 200 nodes".into(),
            ));
        }
        // clamp so tiny subgraphs still encode; missing columns stay zero
        let k_eff = self.cfg.k_pe.min(n.saturating_sub(1));
        let pe = if k_eff == 0 {
            vec![vec![0.0; self.cfg.k_pe]; n]
        } else {
            let short = lap_pe(n, edges, k_eff)?;
            short
                .into_iter()
                .map(|mut row| {
                    row.resize(self.cfg.k_pe, 0.0);
                    row
                })
                .collect()
        };
        let rw = rwse(n, edges, self.cfg.k_rwse)?;
        let d_const = self.d_z + self.cfg.k_pe + self.cfg.k_rwse;
        let mut flat = Vec::with_capacity(n * d_const);
        for i in 0..n {
            flat.extend(&features[i]);
            flat.extend(&pe[i]);
            flat.extend(&rw[i]);
        }
        let const_part = Tensor::from_vec(&[n, d_const], flat);
        let idx: Vec<usize> = label_inputs
            .iter()
            .map(|l| match l {
                Some(c) => *c,
                None => self.num_classes,
            })
            .collect();
        for &i in &idx {
            if i > self.num_classes {
                return Err(Error::Parameter(format!("label id {i} outside class range")));
            }
        }
        let label_part = self.label_emb.gather_rows(&idx)?;
        let input = Tensor::concat_cols(&[const_part, label_part])?;
        let mut x = self.input_proj.forward(&input)?.relu();

        // row-normalized adjacency for mean neighbor aggregation
        let mut deg = vec![0usize; n];
        for &(a, b) in edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        let mut a_norm = vec![0.0; n * n];
        for &(a, b) in edges {
            a_norm[a * n + b] = 1.0 / deg[a] as f64;
            a_norm[b * n + a] = 1.0 / deg[b] as f64;
        }
        let a_norm = Tensor::from_vec(&[n, n], a_norm);

        for (ws, wn) in self.conv_self.iter().zip(&self.conv_nbr) {
            let agg = a_norm.matmul(&x)?;
            let update = ws.forward(&x)?.add(&wn.forward(&agg)?)?.relu();
            x = x.add(&update)?;
        }

        // one attention-weighted aggregation layer over neighbors
        // (all pairs when the dense bias is enabled)
        let d = self.cfg.d_e;
        let q = self.wq.forward(&x)?;
        let k = self.wk.forward(&x)?;
        let v = self.wv.forward(&x)?;
        let mut scores = q.matmul(&k.transpose())?.scale(1.0 / (d as f64).sqrt());
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        if self.cfg.dense_pair_bias {
            for m in &mut mask {
                *m = true;
            }
            // bias row 0 applies to edge pairs, row 1 to non-edges
            let bias = self.pair_bias.as_ref().unwrap();
            let mut sel = vec![0.0; n * n * 2];
            for i in 0..n * n {
                sel[i * 2 + 1] = 1.0;
            }
            for &(a, b) in edges {
                for (i, j) in [(a, b), (b, a)] {
                    sel[(i * n + j) * 2] = 1.0;
                    sel[(i * n + j) * 2 + 1] = 0.0;
                }
            }
            let bias_mat = Tensor::from_vec(&[n * n, 2], sel)
                .matmul(&bias.reshape(&[2, 1])?)?
                .reshape(&[n, n])?;
            scores = scores.add(&bias_mat)?;
        } else {
            for &(a, b) in edges {
                mask[a * n + b] = true;
                mask[b * n + a] = true;
            }
        }
        let probs = scores.softmax_rows(Some(&mask))?;
        x.add(&probs.matmul(&v)?)
    }

    pub fn class_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        self.decoder.forward(hidden)
    }

    /// (mu, log variance) of the latent head.
    pub fn latent_stats(&self, hidden: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = self.stats.forward(hidden)?;
        Ok((s.slice_cols(0, self.cfg.d_e)?, s.slice_cols(self.cfg.d_e, 2 * self.cfg.d_e)?))
    }
}

/// Mean over nodes of KL(N(mu, diag sigma^2) || N(0, I)).
pub fn kl_to_standard_normal(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let term = mu
        .square()
        .add(&logvar.exp())?
        .sub(logvar)?
        .add_scalar(-1.0);
    Ok(term.sum_rows().mean().scale(0.5))
}

/// Cross-entropy over the given node subset.
pub fn masked_ce(logits: &Tensor, labels: &[usize], nodes: &[usize]) -> Result<Tensor> {
    if nodes.is_empty() {
        return Err(Error::Usage("empty node set for cross-entropy".into()));
    }
    let rows = logits.gather_rows(nodes)?;
    let probs = rows.softmax_rows(None)?;
    let c = logits.cols();
    let mut onehot = vec![0.0; nodes.len() * c];
    for (r, &i) in nodes.iter().enumerate() {
        onehot[r * c + labels[i]] = 1.0;
    }
    let picked = probs.mul(&Tensor::from_vec(&[nodes.len(), c], onehot))?;
    Ok(picked.sum_rows().log().mean().scale(-1.0))
}

/// The masked set for one epoch: `mask_ratio` of the labeled train
/// nodes, at least one, drawn without replacement.
pub fn sample_mask(labeled_train: &[usize], mask_ratio: f64, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let m = ((labeled_train.len() as f64 * mask_ratio).round() as usize)
        .clamp(1, labeled_train.len());
    let mut pool = labeled_train.to_vec();
    pool.shuffle(rng);
    pool.truncate(m);
    pool.sort_unstable();
    pool
}

/// One full-graph pretraining loss evaluation: masked-label CE plus the
/// weighted KL regularizer.
pub fn pretrain_loss(encoder: &GnnEncoder, tag: &Tag, masked: &[usize], unmasked_inputs: &[Option<usize>]) -> Result<Tensor> {
    let hidden = encoder.hidden(tag.node_count, &tag.edges, &tag.features, unmasked_inputs)?;
    let logits = encoder.class_logits(&hidden)?;
    let labels: Vec<usize> = tag.labels.iter().map(|l| l.unwrap_or(0)).collect();
    let ce = masked_ce(&logits, &labels, masked)?;
    let (mu, logvar) = encoder.latent_stats(&hidden)?;
    let kl = kl_to_standard_normal(&mu, &logvar)?;
    ce.add(&kl.scale(encoder.cfg.kl_weight))
}

fn label_inputs_for(tag: &Tag, masked: &[usize]) -> Vec<Option<usize>> {
    (0..tag.node_count)
        .map(|i| match (tag.splits[i], tag.labels[i]) {
            (Split::Train, Some(c)) if !masked.contains(&i) => Some(c),
            _ => None,
        })
        .collect()
}

/// Train the encoder on the full graph and return it frozen.
pub fn pretrain(tag: &Tag, cfg: GnnConfig) -> Result<GnnEncoder> {
    cfg.validate()?;
    let labeled_train: Vec<usize> = (0..tag.node_count)
        .filter(|&i| tag.splits[i] == Split::Train && tag.labels[i].is_some())
        .collect();
    if labeled_train.is_empty() {
        return Err(Error::Config("no labeled train nodes for pretraining".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut encoder = GnnEncoder::new(cfg, tag.meta.d_z, tag.meta.num_classes, &mut rng)?;
    let params: Vec<Tensor> = encoder.named_params().into_iter().map(|(_, t)| t).collect();
    let mut opt = Adam::new(params, encoder.cfg.lr)?;
    for _epoch in 0..encoder.cfg.epochs {
        let masked = sample_mask(&labeled_train, encoder.cfg.mask_ratio, &mut rng);
        let inputs = label_inputs_for(tag, &masked);
        let loss = pretrain_loss(&encoder, tag, &masked, &inputs)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric("pretraining loss diverged".into()));
        }
        backward(&loss)?;
        opt.step(1.0)?;
    }
    encoder.frozen = true;
    Ok(encoder)
}

/// Classify every node with all labels masked; returns argmax classes.
pub fn classify_all(encoder: &GnnEncoder, tag: &Tag) -> Result<Vec<usize>> {
    let inputs = vec![None; tag.node_count];
    let hidden = encoder.hidden(tag.node_count, &tag.edges, &tag.features, &inputs)?;
    let logits = encoder.class_logits(&hidden)?;
    let v = logits.values();
    let c = encoder.num_classes;
    Ok((0..tag.node_count)
        .map(|i| {
            let row = &v[i * c..(i + 1) * c];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        })
        .collect())
}

/// Deterministic latent targets: the mu head over a subgraph with every
/// label masked, rows in subgraph node order.
pub fn encode_targets(encoder: &GnnEncoder, sub: &Subgraph) -> Result<Tensor> {
    if !encoder.frozen {
        return Err(Error::Usage("encoder must be frozen before target encoding".into()));
    }
    let n = sub.node_count();
    let inputs = vec![None; n];
    let hidden = encoder.hidden(n, &sub.edges, &sub.features, &inputs)?;
    let (mu, _) = encoder.latent_stats(&hidden)?;
    Ok(mu.detach())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag::{generate_synthetic_tag, sample_subgraph, SbmSpec, TagMeta};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn path3_laplacian_spectrum() {
        let eigs = laplacian_eigenvalues(3, &[(0, 1), (1, 2)]);
        for (got, want) in eigs.iter().zip([0.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-10, "{eigs:?}");
        }
    }

    #[test]
    fn k3_nonzero_eigenvalues_are_three() {
        let eigs = laplacian_eigenvalues(3, &[(0, 1), (0, 2), (1, 2)]);
        assert!(eigs[0].abs() < 1e-10);
        assert!((eigs[1] - 3.0).abs() < 1e-10);
        assert!((eigs[2] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn lap_pe_columns_orthonormal() {
        let spec = SbmSpec { nodes: 20, seed: 5, ..Default::default() };
        let tag = generate_synthetic_tag(&spec).unwrap();
        let pe = lap_pe(tag.node_count, &tag.edges, 4).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..20).map(|i| pe[i][a] * pe[i][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "columns {a},{b}: {dot}");
            }
        }
    }

    #[test]
    fn rwse_triangle_and_path() {
        let tri = rwse(3, &[(0, 1), (0, 2), (1, 2)], 2).unwrap();
        for row in &tri {
            assert_eq!(row[0], 0.0); // no self-loops: k=1 return impossible
            assert!((row[1] - 0.5).abs() < 1e-12);
        }
        let p2 = rwse(2, &[(0, 1)], 2).unwrap();
        assert_eq!(p2[0], vec![0.0, 1.0]);
        assert_eq!(p2[1], vec![0.0, 1.0]);
    }

    #[test]
    fn rwse_entries_in_unit_interval() {
        let spec = SbmSpec { nodes: 25, seed: 9, ..Default::default() };
        let tag = generate_synthetic_tag(&spec).unwrap();
        let rw = rwse(tag.node_count, &tag.edges, 6).unwrap();
        for row in rw {
            for p in row {
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn kl_zero_at_standard_normal() {
        let mu = Tensor::from_vec(&[3, 4], vec![0.0; 12]);
        let logvar = Tensor::from_vec(&[3, 4], vec![0.0; 12]);
        let kl = kl_to_standard_normal(&mu, &logvar).unwrap();
        assert_eq!(kl.item(), 0.0);
        // and strictly positive away from it
        let mu2 = Tensor::from_vec(&[3, 4], vec![0.3; 12]);
        assert!(kl_to_standard_normal(&mu2, &logvar).unwrap().item() > 0.0);
    }

    #[test]
    fn uniform_classifier_gives_log_c() {
        let logits = Tensor::from_vec(&[5, 4], vec![0.0; 20]);
        let labels = vec![0, 1, 2, 3, 0];
        let ce = masked_ce(&logits, &labels, &[0, 2, 4]).unwrap();
        assert!((ce.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_sbm_reaches_full_train_accuracy() {
        let spec = SbmSpec {
            nodes: 40,
            classes: 2,
            d_z: 4,
            intra_p: 1.0,
            inter_p: 0.0,
            feature_noise: 0.0,
            seed: 3,
            name: "degenerate".into(),
            ..Default::default()
        };
        let tag = generate_synthetic_tag(&spec).unwrap();
        let cfg = GnnConfig { d_e: 16, epochs: 120, lr: 1e-2, seed: 1, ..Default::default() };
        let encoder = pretrain(&tag, cfg).unwrap();
        assert!(encoder.frozen);
        let preds = classify_all(&encoder, &tag).unwrap();
        let train = tag.nodes_in_split(Split::Train);
        let correct = train
            .iter()
            .filter(|&&i| preds[i] == tag.labels[i].unwrap())
            .count();
        assert_eq!(correct, train.len(), "train accuracy below 100%");
    }

    #[test]
    fn no_labeled_train_nodes_is_config_error() {
        let spec = SbmSpec { nodes: 20, seed: 7, ..Default::default() };
        let mut tag = generate_synthetic_tag(&spec).unwrap();
        for l in &mut tag.labels {
            *l = None;
        }
        assert!(matches!(pretrain(&tag, GnnConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn encode_targets_deterministic_and_shaped() {
        let spec = SbmSpec { nodes: 30, seed: 11, ..Default::default() };
        let tag = generate_synthetic_tag(&spec).unwrap();
        let cfg = GnnConfig { d_e: 8, epochs: 3, ..Default::default() };
        let encoder = pretrain(&tag, cfg).unwrap();
        let sub = sample_subgraph(&tag, 4, 2).unwrap();
        let e1 = encode_targets(&encoder, &sub).unwrap();
        let e2 = encode_targets(&encoder, &sub).unwrap();
        assert_eq!(e1.shape(), vec![sub.node_count(), 8]);
        assert_eq!(e1.values(), e2.values());
    }

    #[test]
    fn unfrozen_encoder_rejected_for_targets() {
        let mut r = rng(2);
        let encoder = GnnEncoder::new(GnnConfig::default(), 4, 2, &mut r).unwrap();
        let sub = Subgraph {
            center_local: 0,
            node_ids: vec![0],
            edges: vec![],
            features: vec![vec![0.0; 4]],
            hop_of: vec![0],
            labels: vec![None],
        };
        assert!(matches!(encode_targets(&encoder, &sub), Err(Error::Usage(_))));
    }

    #[test]
    fn feature_dim_mismatch_rejected() {
        let mut r = rng(3);
        let mut encoder = GnnEncoder::new(
            GnnConfig { k_pe: 1, ..Default::default() },
            4,
            2,
            &mut r,
        )
        .unwrap();
        encoder.frozen = true;
        let sub = Subgraph {
            center_local: 0,
            node_ids: vec![0, 1, 2],
            edges: vec![(0, 1), (1, 2)],
            features: vec![vec![0.0; 3]; 3],
            hop_of: vec![0, 1, 2],
            labels: vec![None; 3],
        };
        assert!(matches!(encode_targets(&encoder, &sub), Err(Error::Dimension(_))));
    }

    #[test]
    fn permutation_equivariance_of_targets() {
        // asymmetric graph with simple positive spectrum
        let edges = vec![(0, 1), (0, 2), (1, 3), (3, 4), (3, 5), (2, 3)];
        let n = 6;
        let eigs = laplacian_eigenvalues(n, &edges);
        for w in eigs.windows(2).skip(1) {
            assert!(w[1] - w[0] > 1e-6, "spectrum not simple: {eigs:?}");
        }
        let mut r = rng(4);
        let cfg = GnnConfig { d_e: 8, k_pe: 2, k_rwse: 3, ..Default::default() };
        let mut encoder = GnnEncoder::new(cfg, 3, 2, &mut r).unwrap();
        encoder.frozen = true;
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![i as f64 * 0.3, (i as f64).sin(), 1.0 - i as f64 * 0.1])
            .collect();
        let sub = Subgraph {
            center_local: 0,
            node_ids: (0..n).collect(),
            edges: edges.clone(),
            features: feats.clone(),
            hop_of: vec![0; n],
            labels: vec![None; n],
        };
        let perm = [2usize, 5, 0, 3, 1, 4]; // new index of old node i
        let mut inv = [0usize; 6];
        for (old, &new) in perm.iter().enumerate() {
            inv[new] = old;
        }
        let sub_p = Subgraph {
            center_local: perm[0],
            node_ids: (0..n).collect(),
            edges: edges.iter().map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b]))).collect(),
            features: (0..n).map(|i| feats[inv[i]].clone()).collect(),
            hop_of: vec![0; n],
            labels: vec![None; n],
        };
        let e = encode_targets(&encoder, &sub).unwrap().values();
        let ep = encode_targets(&encoder, &sub_p).unwrap().values();
        let d = 8;
        for i in 0..n {
            for j in 0..d {
                let a = e[i * d + j];
                let b = ep[perm[i] * d + j];
                assert!((a - b).abs() < 1e-8, "node {i} dim {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mask_sampling_deterministic() {
        let nodes: Vec<usize> = (0..20).collect();
        let m1 = sample_mask(&nodes, 0.8, &mut rng(5));
        let m2 = sample_mask(&nodes, 0.8, &mut rng(5));
        assert_eq!(m1, m2);
        assert_eq!(m1.len(), 16);
        let m_all = sample_mask(&nodes, 1.0, &mut rng(5));
        assert_eq!(m_all.len(), 20);
    }

    #[test]
    fn pretrain_deterministic_per_seed() {
        let spec = SbmSpec { nodes: 24, seed: 13, ..Default::default() };
        let tag = generate_synthetic_tag(&spec).unwrap();
        let cfg = GnnConfig { d_e: 8, epochs: 4, seed: 9, ..Default::default() };
        let a = pretrain(&tag, cfg.clone()).unwrap();
        let b = pretrain(&tag, cfg).unwrap();
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(&b.named_params()) {
            assert_eq!(pa.values(), pb.values());
        }
    }

    #[test]
    fn grad_check_pretrain_loss() {
        let spec = SbmSpec {
            nodes: 10,
            classes: 2,
            d_z: 3,
            seed: 17,
            intra_p: 0.6,
            inter_p: 0.2,
            ..Default::default()
        };
        let tag = generate_synthetic_tag(&spec).unwrap();
        let mut r = rng(6);
        let cfg = GnnConfig { d_e: 6, k_pe: 2, k_rwse: 2, ..Default::default() };
        let encoder = GnnEncoder::new(cfg, 3, 2, &mut r).unwrap();
        let labeled: Vec<usize> = (0..tag.node_count)
            .filter(|&i| tag.splits[i] == Split::Train && tag.labels[i].is_some())
            .collect();
        let masked = sample_mask(&labeled, 0.8, &mut r);
        let inputs = label_inputs_for(&tag, &masked);
        let params: Vec<Tensor> = encoder.named_params().into_iter().map(|(_, t)| t).collect();
        let err = crate::autodiff::grad_check(
            || pretrain_loss(&encoder, &tag, &masked, &inputs),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn dense_pair_bias_gate() {
        let mut r = rng(8);
        let cfg = GnnConfig { dense_pair_bias: true, k_pe: 2, ..Default::default() };
        let encoder = GnnEncoder::new(cfg, 2, 2, &mut r).unwrap();
        let n = 250;
        let feats = vec![vec![0.0; 2]; n];
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let inputs = vec![None; n];
        assert!(matches!(
            encoder.hidden(n, &edges, &feats, &inputs),
            Err(Error::Config(_))
        ));
        // and works below the gate
        let small: Vec<(usize, usize)> = vec![(0, 1), (1, 2), (0, 2), (2, 3)];
        let h = encoder
            .hidden(4, &small, &vec![vec![0.1; 2]; 4], &vec![None; 4])
            .unwrap();
        assert_eq!(h.shape(), vec![4, encoder.cfg.d_e]);
    }

    #[test]
    fn default_tag_meta_round_trip_dims() {
        let meta = TagMeta { d_z: 4, num_classes: 3, name: "x".into() };
        assert_eq!(meta.d_z, 4);
    }
}
