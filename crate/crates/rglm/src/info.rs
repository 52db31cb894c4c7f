//! Exact information-theoretic computations over finite joint
//! distributions: entropy, (conditional) mutual information, and the
//! identity/bound checks the training objective rests on. Also a binned
//! plug-in MI estimate for continuous diagnostics.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::{Error, Result};

const NORM_TOL: f64 = 1e-12;

/// Dense pmf over a product of finite alphabets, row-major with the
/// last variable fastest.
#[derive(Debug, Clone)]
pub struct JointDistribution {
    pub names: Vec<String>,
    pub alphabet: Vec<usize>,
    pub pmf: Vec<f64>,
}

impl JointDistribution {
    pub fn new(names: &[&str], alphabet: &[usize], pmf: Vec<f64>) -> Result<JointDistribution> {
        let size: usize = alphabet.iter().product();
        if names.len() != alphabet.len() || pmf.len() != size {
            return Err(Error::Parameter("joint table dimensions inconsistent".into()));
        }
        if pmf.iter().any(|&p| p < 0.0) {
            return Err(Error::Parameter("negative pmf entry".into()));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::Parameter(format!("pmf sums to {total}, not 1")));
        }
        Ok(JointDistribution {
            names: names.iter().map(|s| s.to_string()).collect(),
            alphabet: alphabet.to_vec(),
            pmf,
        })
    }

    fn var(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Parameter(format!("no variable named {name}")))
    }

    fn vars(&self, names: &[&str]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.var(n)).collect()
    }

    /// Decode the flat index into per-variable symbols.
    fn decode(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.alphabet.len()];
        for v in (0..self.alphabet.len()).rev() {
            out[v] = idx % self.alphabet[v];
            idx /= self.alphabet[v];
        }
        out
    }

    /// Marginal table over the given variables (in their given order).
    pub fn marginal_by_idx(&self, vars: &[usize]) -> Vec<f64> {
        let size: usize = vars.iter().map(|&v| self.alphabet[v]).product();
        let mut out = vec![0.0; size];
        for (idx, &p) in self.pmf.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let sym = self.decode(idx);
            let mut key = 0;
            for &v in vars {
                key = key * self.alphabet[v] + sym[v];
            }
            out[key] += p;
        }
        out
    }

    fn entropy_by_idx(&self, vars: &[usize]) -> f64 {
        table_entropy(&self.marginal_by_idx(vars))
    }

    /// Joint entropy of the named variables, in nats.
    pub fn entropy(&self, vars: &[&str]) -> Result<f64> {
        Ok(self.entropy_by_idx(&self.vars(vars)?))
    }

    /// I(X; Y) with X and Y each a set of named variables.
    pub fn mutual_information(&self, x: &[&str], y: &[&str]) -> Result<f64> {
        let (xi, yi) = (self.vars(x)?, self.vars(y)?);
        let xy: Vec<usize> = xi.iter().chain(&yi).copied().collect();
        Ok(self.entropy_by_idx(&xi) + self.entropy_by_idx(&yi) - self.entropy_by_idx(&xy))
    }

    /// I(X; Y | Z) = H(X,Z) + H(Y,Z) - H(Z) - H(X,Y,Z).
    pub fn conditional_mi(&self, x: &[&str], y: &[&str], z: &[&str]) -> Result<f64> {
        let (xi, yi, zi) = (self.vars(x)?, self.vars(y)?, self.vars(z)?);
        let xz: Vec<usize> = xi.iter().chain(&zi).copied().collect();
        let yz: Vec<usize> = yi.iter().chain(&zi).copied().collect();
        let xyz: Vec<usize> = xi.iter().chain(&yi).chain(&zi).copied().collect();
        Ok(self.entropy_by_idx(&xz) + self.entropy_by_idx(&yz)
            - self.entropy_by_idx(&zi)
            - self.entropy_by_idx(&xyz))
    }
}

fn table_entropy(pmf: &[f64]) -> f64 {
    // 0 * log 0 = 0
    -pmf.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Dirichlet(1) draw over `n` cells.
pub fn dirichlet_uniform(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let total: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= total;
    }
    draws
}

/// Random joint over (x, s_g, s_t) with the given alphabet sizes.
pub fn random_joint3(rng: &mut ChaCha12Rng, sizes: [usize; 3]) -> JointDistribution {
    let n = sizes.iter().product();
    JointDistribution::new(&["x", "sg", "st"], &sizes, dirichlet_uniform(rng, n)).unwrap()
}

/// Chain-rule identity behind the alignment decomposition:
/// I(x; s_g | s_t) = I(x; s_g) + I(x; s_t | s_g) - I(x; s_t).
/// Returns |lhs - rhs|; an exact identity, so the residual is numerics
/// only.
pub fn verify_decomposition(j: &JointDistribution) -> Result<f64> {
    let lhs = j.conditional_mi(&["x"], &["sg"], &["st"])?;
    let rhs = j.mutual_information(&["x"], &["sg"])?
        + j.conditional_mi(&["x"], &["st"], &["sg"])?
        - j.mutual_information(&["x"], &["st"])?;
    Ok((lhs - rhs).abs())
}

/// Joint over (g, sg, st, x) where s_g is a deterministic function of g.
#[derive(Debug, Clone)]
pub struct PipelineJoint {
    pub joint: JointDistribution,
    pub encoder: Vec<usize>,
}

impl PipelineJoint {
    /// Assemble p(g) * 1[s_g = f(g)] * p(s_t | g) * p(x | g, s_t).
    pub fn new(
        p_g: &[f64],
        encoder: &[usize],
        sg_size: usize,
        p_st_given_g: &[Vec<f64>],
        p_x_given_g_st: &[Vec<Vec<f64>>],
    ) -> Result<PipelineJoint> {
        let g_size = p_g.len();
        if encoder.len() != g_size || p_st_given_g.len() != g_size || p_x_given_g_st.len() != g_size
        {
            return Err(Error::Parameter("pipeline joint: table sizes inconsistent".into()));
        }
        if encoder.iter().any(|&s| s >= sg_size) {
            return Err(Error::Parameter("encoder output outside s_g alphabet".into()));
        }
        let st_size = p_st_given_g[0].len();
        let x_size = p_x_given_g_st[0][0].len();
        let mut pmf = vec![0.0; g_size * sg_size * st_size * x_size];
        for g in 0..g_size {
            for st in 0..st_size {
                for x in 0..x_size {
                    let sg = encoder[g];
                    let p = p_g[g] * p_st_given_g[g][st] * p_x_given_g_st[g][st][x];
                    let idx = ((g * sg_size + sg) * st_size + st) * x_size + x;
                    pmf[idx] += p;
                }
            }
        }
        let joint = JointDistribution::new(
            &["g", "sg", "st", "x"],
            &[g_size, sg_size, st_size, x_size],
            pmf,
        )?;
        Ok(PipelineJoint { joint, encoder: encoder.to_vec() })
    }

    /// Check p(s_g != f(g)) = 0.
    pub fn check_determinism(&self) -> Result<()> {
        let j = &self.joint;
        for (idx, &p) in j.pmf.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let sym = j.decode(idx);
            if sym[1] != self.encoder[sym[0]] {
                return Err(Error::Parameter("pipeline joint violates s_g = f(g)".into()));
            }
        }
        Ok(())
    }
}

/// Upper-bound check: I(g; s_g) - I(x; s_g | s_t), which must be >= 0
/// when s_g is a deterministic function of g.
pub fn verify_upper_bound(p: &PipelineJoint) -> Result<f64> {
    p.check_determinism()?;
    let lhs = p.joint.mutual_information(&["g"], &["sg"])?;
    let rhs = p.joint.conditional_mi(&["x"], &["sg"], &["st"])?;
    Ok(lhs - rhs)
}

/// Random deterministic-encoder pipeline joint.
pub fn random_pipeline(rng: &mut ChaCha12Rng, g_size: usize) -> PipelineJoint {
    let sg_size = 1 + rng.gen_range(0..g_size);
    let st_size = rng.gen_range(2..=4);
    let x_size = rng.gen_range(2..=4);
    let p_g = dirichlet_uniform(rng, g_size);
    let encoder: Vec<usize> = (0..g_size).map(|_| rng.gen_range(0..sg_size)).collect();
    let p_st: Vec<Vec<f64>> = (0..g_size).map(|_| dirichlet_uniform(rng, st_size)).collect();
    let p_x: Vec<Vec<Vec<f64>>> = (0..g_size)
        .map(|_| (0..st_size).map(|_| dirichlet_uniform(rng, x_size)).collect())
        .collect();
    PipelineJoint::new(&p_g, &encoder, sg_size, &p_st, &p_x).unwrap()
}

/// Tight instance: f injective, x a copy of s_g, s_t independent noise.
/// Then I(g; s_g) = H(g) = I(x; s_g | s_t) and the slack is 0.
pub fn tight_pipeline(g_size: usize) -> PipelineJoint {
    let p_g = vec![1.0 / g_size as f64; g_size];
    let encoder: Vec<usize> = (0..g_size).collect();
    let p_st = vec![vec![0.5, 0.5]; g_size];
    let p_x: Vec<Vec<Vec<f64>>> = (0..g_size)
        .map(|g| {
            (0..2)
                .map(|_| {
                    let mut row = vec![0.0; g_size];
                    row[g] = 1.0;
                    row
                })
                .collect()
        })
        .collect();
    PipelineJoint::new(&p_g, &encoder, g_size, &p_st, &p_x).unwrap()
}

/// Markov chain x -> y -> z built as p(x) p(y|x) p(z|y).
pub fn random_markov_chain(rng: &mut ChaCha12Rng, sizes: [usize; 3]) -> JointDistribution {
    let [nx, ny, nz] = sizes;
    let p_x = dirichlet_uniform(rng, nx);
    let p_yx: Vec<Vec<f64>> = (0..nx).map(|_| dirichlet_uniform(rng, ny)).collect();
    let p_zy: Vec<Vec<f64>> = (0..ny).map(|_| dirichlet_uniform(rng, nz)).collect();
    let mut pmf = vec![0.0; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                pmf[(x * ny + y) * nz + z] = p_x[x] * p_yx[x][y] * p_zy[y][z];
            }
        }
    }
    JointDistribution::new(&["x", "y", "z"], &sizes, pmf).unwrap()
}

/// Data-processing slack I(X;Y) - I(X;Z) for a chain X -> Y -> Z.
pub fn verify_dpi(j: &JointDistribution) -> Result<f64> {
    Ok(j.mutual_information(&["x"], &["y"])? - j.mutual_information(&["x"], &["z"])?)
}

/// Plug-in MI estimate of two continuous sample sets after projecting
/// the pair onto its top canonical-correlation directions and
/// equal-width binning. Biased; a monotone-trend instrument, not a
/// bound certificate.
pub fn binned_mi_estimate(a: &[Vec<f64>], b: &[Vec<f64>], bins: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Parameter("sample sets differ in length".into()));
    }
    if a.len() < 1000 {
        return Err(Error::Parameter(format!("need >= 1000 paired samples, got {}", a.len())));
    }
    if bins < 2 {
        return Err(Error::Parameter("need at least 2 bins".into()));
    }
    let (pa, pb) = project_canonical(a, b)?;
    let ba = bin_indices(&pa, bins)?;
    let bb = bin_indices(&pb, bins)?;
    let n = a.len() as f64;
    let mut joint = vec![0.0; bins * bins];
    for (&i, &j) in ba.iter().zip(&bb) {
        joint[i * bins + j] += 1.0 / n;
    }
    let jd = JointDistribution::new(&["a", "b"], &[bins, bins], normalize(joint))?;
    jd.mutual_information(&["a"], &["b"])
}

fn normalize(mut t: Vec<f64>) -> Vec<f64> {
    let s: f64 = t.iter().sum();
    for x in t.iter_mut() {
        *x /= s;
    }
    t
}

fn centered(samples: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
    let n = samples.len();
    let d = samples[0].len();
    let mut m = nalgebra::DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    for j in 0..d {
        let mean = m.column(j).sum() / n as f64;
        for i in 0..n {
            m[(i, j)] -= mean;
        }
    }
    m
}

/// Inverse square root of a covariance matrix, eigenvalues floored for
/// rank-deficient sides.
fn inv_sqrt(cov: nalgebra::DMatrix<f64>, floor: f64) -> nalgebra::DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(cov);
    let d = eig.eigenvalues.len();
    let mut out = nalgebra::DMatrix::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(floor);
        let q = eig.eigenvectors.column(k);
        out += q * q.transpose() / lam.sqrt();
    }
    out
}

/// Top canonical-correlation projections of two paired sample sets.
/// Unlike independent per-side PCA, the chosen directions maximize the
/// cross-set correlation, so dependence concentrated off the principal
/// axes is still visible after the 1-d reduction.
fn project_canonical(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = a.len() as f64;
    let ca = centered(a);
    let cb = centered(b);
    let saa = ca.transpose() * &ca / n;
    let sbb = cb.transpose() * &cb / n;
    let sab = ca.transpose() * &cb / n;
    let floor_a = (saa.trace() / saa.nrows() as f64).max(1e-12) * 1e-9;
    let floor_b = (sbb.trace() / sbb.nrows() as f64).max(1e-12) * 1e-9;
    let wa = inv_sqrt(saa, floor_a);
    let wb = inv_sqrt(sbb, floor_b);
    let c = &wa * sab * &wb;
    let svd = c.svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let top = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let dir_a = &wa * u.column(top);
    let dir_b = &wb * vt.row(top).transpose();
    let pa = check_variance((ca * dir_a).iter().copied().collect())?;
    let pb = check_variance((cb * dir_b).iter().copied().collect())?;
    Ok((pa, pb))
}

fn check_variance(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    if var < 1e-24 {
        return Err(Error::Numeric("binned MI: zero-variance side".into()));
    }
    Ok(v)
}

fn bin_indices(v: &[f64], bins: usize) -> Result<Vec<usize>> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    Ok(v.iter()
        .map(|&x| (((x - lo) / width) as usize).min(bins - 1))
        .collect())
}

/// Summary emitted by the `mi-verify` subcommand.
#[derive(Debug, Serialize)]
pub struct MiReport {
    pub instances: usize,
    pub max_residual: f64,
    pub min_upper_bound_slack: f64,
    pub min_dpi_slack: f64,
    pub tight_case_slack: f64,
    pub failures: Vec<String>,
}

pub fn run_mi_verify(
    n_decomposition: usize,
    n_upper_bound: usize,
    n_dpi: usize,
    seed: u64,
) -> Result<MiReport> {
    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut max_residual = 0.0f64;
    for i in 0..n_decomposition {
        let sizes = [
            2 + rng.gen_range(0..3),
            2 + rng.gen_range(0..3),
            2 + rng.gen_range(0..3),
        ];
        let j = random_joint3(&mut rng, sizes);
        let r = verify_decomposition(&j)?;
        max_residual = max_residual.max(r);
        if r >= 1e-12 {
            failures.push(format!("decomposition instance {i}: residual {r}"));
        }
    }
    let mut min_ub = f64::INFINITY;
    for i in 0..n_upper_bound {
        let g_size = 2 + rng.gen_range(0..7);
        let p = random_pipeline(&mut rng, g_size);
        let s = verify_upper_bound(&p)?;
        min_ub = min_ub.min(s);
        if s < -1e-12 {
            failures.push(format!("upper-bound instance {i}: slack {s}"));
        }
    }
    let tight = verify_upper_bound(&tight_pipeline(4))?;
    if tight.abs() >= 1e-12 {
        failures.push(format!("tight upper-bound case: slack {tight}"));
    }
    let mut min_dpi = f64::INFINITY;
    for i in 0..n_dpi {
        let sizes = [
            2 + rng.gen_range(0..3),
            2 + rng.gen_range(0..3),
            2 + rng.gen_range(0..3),
        ];
        let j = random_markov_chain(&mut rng, sizes);
        let s = verify_dpi(&j)?;
        min_dpi = min_dpi.min(s);
        if s < -1e-12 {
            failures.push(format!("dpi instance {i}: slack {s}"));
        }
    }
    Ok(MiReport {
        instances: n_decomposition + n_upper_bound + n_dpi + 1,
        max_residual,
        min_upper_bound_slack: min_ub,
        min_dpi_slack: min_dpi,
        tight_case_slack: tight,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_copy_mi_is_entropy() {
        // X uniform on 4 symbols, Y = X
        let mut pmf = vec![0.0; 16];
        for i in 0..4 {
            pmf[i * 4 + i] = 0.25;
        }
        let j = JointDistribution::new(&["x", "y"], &[4, 4], pmf).unwrap();
        let mi = j.mutual_information(&["x"], &["y"]).unwrap();
        assert!((mi - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn independent_mi_zero() {
        let mut r = rng(1);
        let px = dirichlet_uniform(&mut r, 3);
        let py = dirichlet_uniform(&mut r, 4);
        let mut pmf = vec![0.0; 12];
        for x in 0..3 {
            for y in 0..4 {
                pmf[x * 4 + y] = px[x] * py[y];
            }
        }
        let j = JointDistribution::new(&["x", "y"], &[3, 4], pmf).unwrap();
        assert!(j.mutual_information(&["x"], &["y"]).unwrap().abs() < 1e-14);
    }

    #[test]
    fn two_by_two_hand_computation() {
        let j = JointDistribution::new(&["x", "y"], &[2, 2], vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        let mi = j.mutual_information(&["x"], &["y"]).unwrap();
        assert!((mi - expected).abs() < 1e-12, "mi {mi} vs {expected}");
    }

    #[test]
    fn unnormalized_rejected() {
        assert!(JointDistribution::new(&["x"], &[2], vec![0.5, 0.6]).is_err());
        assert!(JointDistribution::new(&["x"], &[2], vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn decomposition_residual_tiny_on_random_joints() {
        let mut r = rng(7);
        for _ in 0..50 {
            let j = random_joint3(&mut r, [3, 4, 3]);
            assert!(verify_decomposition(&j).unwrap() < 1e-12);
        }
    }

    #[test]
    fn decomposition_on_degenerate_joints() {
        // fully independent: all four terms zero
        let mut r = rng(2);
        let px = dirichlet_uniform(&mut r, 2);
        let psg = dirichlet_uniform(&mut r, 3);
        let pst = dirichlet_uniform(&mut r, 2);
        let mut pmf = vec![0.0; 12];
        for x in 0..2 {
            for sg in 0..3 {
                for st in 0..2 {
                    pmf[(x * 3 + sg) * 2 + st] = px[x] * psg[sg] * pst[st];
                }
            }
        }
        let j = JointDistribution::new(&["x", "sg", "st"], &[2, 3, 2], pmf).unwrap();
        assert!(j.conditional_mi(&["x"], &["sg"], &["st"]).unwrap().abs() < 1e-14);
        assert!(verify_decomposition(&j).unwrap() < 1e-12);

        // perfect copy x = sg = st: both sides zero
        let mut pmf = vec![0.0; 8];
        pmf[0] = 0.5; // (0,0,0)
        pmf[7] = 0.5; // (1,1,1)
        let j = JointDistribution::new(&["x", "sg", "st"], &[2, 2, 2], pmf).unwrap();
        assert!(j.conditional_mi(&["x"], &["sg"], &["st"]).unwrap().abs() < 1e-14);
        assert!(verify_decomposition(&j).unwrap() < 1e-12);
    }

    #[test]
    fn upper_bound_on_random_pipelines() {
        let mut r = rng(11);
        for _ in 0..50 {
            let g_size = 2 + r.gen_range(0..7);
            let p = random_pipeline(&mut r, g_size);
            assert!(verify_upper_bound(&p).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn upper_bound_constant_encoder_both_sides_zero() {
        let mut r = rng(3);
        let g_size = 4;
        let p_g = dirichlet_uniform(&mut r, g_size);
        let encoder = vec![0; g_size];
        let p_st: Vec<Vec<f64>> = (0..g_size).map(|_| dirichlet_uniform(&mut r, 3)).collect();
        let p_x: Vec<Vec<Vec<f64>>> = (0..g_size)
            .map(|_| (0..3).map(|_| dirichlet_uniform(&mut r, 2)).collect())
            .collect();
        let p = PipelineJoint::new(&p_g, &encoder, 2, &p_st, &p_x).unwrap();
        assert!(p.joint.mutual_information(&["g"], &["sg"]).unwrap().abs() < 1e-14);
    }

    #[test]
    fn upper_bound_tight_case() {
        let slack = verify_upper_bound(&tight_pipeline(4)).unwrap();
        assert!(slack.abs() < 1e-12, "tight slack {slack}");
    }

    #[test]
    fn deterministic_function_mi_equals_entropy() {
        let mut r = rng(5);
        for _ in 0..20 {
            let p = random_pipeline(&mut r, 6);
            let mi = p.joint.mutual_information(&["g"], &["sg"]).unwrap();
            let h = p.joint.entropy(&["sg"]).unwrap();
            assert!((mi - h).abs() < 1e-12);
        }
    }

    #[test]
    fn dpi_cases() {
        let mut r = rng(13);
        for _ in 0..50 {
            let j = random_markov_chain(&mut r, [3, 3, 3]);
            assert!(verify_dpi(&j).unwrap() >= -1e-12);
        }
        // z = y: slack 0
        let p_x = vec![0.3, 0.7];
        let p_yx = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let mut pmf = vec![0.0; 8];
        for x in 0..2 {
            for y in 0..2 {
                pmf[(x * 2 + y) * 2 + y] = p_x[x] * p_yx[x][y];
            }
        }
        let j = JointDistribution::new(&["x", "y", "z"], &[2, 2, 2], pmf).unwrap();
        assert!(verify_dpi(&j).unwrap().abs() < 1e-12);
        // z independent noise: slack = I(X;Y)
        let mut pmf = vec![0.0; 8];
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    pmf[(x * 2 + y) * 2 + z] = p_x[x] * p_yx[x][y] * 0.5;
                }
            }
        }
        let j = JointDistribution::new(&["x", "y", "z"], &[2, 2, 2], pmf).unwrap();
        let slack = verify_dpi(&j).unwrap();
        let ixy = j.mutual_information(&["x"], &["y"]).unwrap();
        assert!((slack - ixy).abs() < 1e-12);
    }

    #[test]
    fn hxy_le_hx() {
        let mut r = rng(17);
        for _ in 0..30 {
            let j = random_joint3(&mut r, [4, 3, 2]);
            let hx = j.entropy(&["x"]).unwrap();
            let hx_given = hx - j.mutual_information(&["x"], &["sg"]).unwrap();
            assert!(hx_given <= hx + 1e-12);
            let mi_xy = j.mutual_information(&["x"], &["sg"]).unwrap();
            let mi_yx = j.mutual_information(&["sg"], &["x"]).unwrap();
            assert!(mi_xy >= -1e-12);
            assert!((mi_xy - mi_yx).abs() < 1e-12);
        }
    }

    #[test]
    fn binned_estimate_identity_and_independence() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng(23);
        let n = 100_000;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)])
            .collect();
        // B = A: estimate close to binned H(A)
        let est = binned_mi_estimate(&a, &a, 10).unwrap();
        let pa = {
            let v: Vec<f64> = a.iter().map(|s| s[0]).collect();
            let idx = bin_indices(&v, 10).unwrap();
            let mut t = vec![0.0; 10];
            for i in idx {
                t[i] += 1.0 / n as f64;
            }
            table_entropy(&t)
        };
        assert!((est - pa).abs() / pa < 0.05, "est {est} vs H {pa}");

        // independent sides: small estimate
        let b: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)])
            .collect();
        let est = binned_mi_estimate(&a, &b, 8).unwrap();
        assert!(est < 0.05, "independent estimate {est}");
    }

    #[test]
    fn binned_estimate_noise_ordering() {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng(29);
        let n = 20_000;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)])
            .collect();
        let noisy = |scale: f64, r: &mut ChaCha12Rng| -> Vec<Vec<f64>> {
            a.iter()
                .map(|s| {
                    let e: f64 = StandardNormal.sample(r);
                    vec![s[0] + scale * e]
                })
                .collect()
        };
        let small = noisy(0.3, &mut r);
        let large = noisy(3.0, &mut r);
        let mi_small = binned_mi_estimate(&a, &small, 8).unwrap();
        let mi_large = binned_mi_estimate(&a, &large, 8).unwrap();
        assert!(mi_small > mi_large, "{mi_small} vs {mi_large}");
    }

    #[test]
    fn binned_estimate_degenerate_side_rejected() {
        let a: Vec<Vec<f64>> = (0..2000).map(|i| vec![i as f64]).collect();
        let b: Vec<Vec<f64>> = (0..2000).map(|_| vec![1.0]).collect();
        assert!(matches!(binned_mi_estimate(&a, &b, 8), Err(Error::Numeric(_))));
    }
}
