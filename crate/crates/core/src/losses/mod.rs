//! Training objectives: the stop-gradient cosine loss, the image-aware
//! contrastive loss and its label-supervised variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var, EPS};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IaVariant {
    /// Positives are the other views of the same image.
    ImageAware,
    /// Positives are rows whose label sets intersect.
    Supervised,
    /// Cosine loss only.
    None,
}

/// How the per-anchor contrastive terms are reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub variant: IaVariant,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 4.0,
            variant: IaVariant::ImageAware,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Row-major `N×N` positive-set indicator with an empty diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveMask {
    n: usize,
    mask: Vec<bool>,
}

impl PositiveMask {
    /// Rows sharing an image id are mutual positives.
    pub fn from_image_ids(ids: &[u64]) -> Result<Self> {
        Self::build(ids.len(), |i, j| ids[i] == ids[j], "ia_closs")
    }

    /// Rows whose label sets intersect are mutual positives.
    pub fn from_labels(labels: &[Vec<usize>]) -> Result<Self> {
        Self::build(
            labels.len(),
            |i, j| labels[i].iter().any(|l| labels[j].contains(l)),
            "sup_closs",
        )
    }

    fn build(n: usize, related: impl Fn(usize, usize) -> bool, op: &'static str) -> Result<Self> {
        if n < 2 {
            return Err(Error::Precondition {
                op,
                detail: format!("need at least two rows, got {n}"),
            });
        }
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                mask[i * n + j] = i != j && related(i, j);
            }
            if !mask[i * n..(i + 1) * n].contains(&true) {
                return Err(Error::Precondition {
                    op,
                    detail: format!("row {i} has an empty positive set"),
                });
            }
        }
        Ok(Self { n, mask })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn positives(&self, i: usize) -> usize {
        self.mask[i * self.n..(i + 1) * self.n].iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    /// Every off-diagonal entry: the `A(i)` sets.
    pub fn all_others(&self) -> Vec<bool> {
        (0..self.n * self.n).map(|k| k / self.n != k % self.n).collect()
    }
}

/// Partner index of the stacked `[stream_a; stream_b]` layout.
pub fn stacked_pairs(m: usize) -> Vec<usize> {
    (0..2 * m).map(|i| (i + m) % (2 * m)).collect()
}

/// Symmetrised negative cosine similarity against stop-gradient partners:
/// `−(1/N) Σ_i cos(q_i, sg(z_pair(i)))` over all `N` stacked rows.
///
/// Gradients reach `q` only.
pub fn simsiam_loss<S: Scalar>(g: &mut Graph<S>, q: Var, z: Var, pair_index: &[usize]) -> Result<Var> {
    let (n, d) = g.value(q).dims2("simsiam_loss")?;
    if g.value(z).shape() != [n, d] {
        return Err(Error::dim(
            "simsiam_loss",
            format!("q is {:?} but z is {:?}", [n, d], g.value(z).shape()),
        ));
    }
    if pair_index.len() != n || pair_index.iter().enumerate().any(|(i, &p)| p >= n || p == i || pair_index[p] != i) {
        return Err(Error::Precondition {
            op: "simsiam_loss",
            detail: "pair index must be a fixed-point-free involution".into(),
        });
    }
    let qn = g.l2_normalize_rows(q, None)?;
    let zs = g.stop_gradient(z);
    let zn = g.l2_normalize_rows(zs, Some(S::of(EPS)))?;
    let partners = g.gather_rows(zn, pair_index)?;
    let prod = g.mul(qn, partners)?;
    let cos = g.sum_rows(prod)?;
    let total = g.sum(cos);
    Ok(g.scale(total, S::of(-1.0 / n as f64)))
}

fn check_embeddings<S: Scalar>(z: &Tensor<S>, mask: &PositiveMask, op: &'static str) -> Result<(usize, usize)> {
    let (n, d) = z.dims2(op)?;
    if n != mask.len() {
        return Err(Error::dim(op, format!("{n} embeddings but {} mask rows", mask.len())));
    }
    Ok((n, d))
}

fn anchor_weights(mask: &PositiveMask, reduction: Reduction) -> Vec<f64> {
    let n = mask.len();
    let r = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    (0..n).map(|i| r / mask.positives(i) as f64).collect()
}

/// `−Σ_i (1/|P(i)|) log[Σ_{p∈P(i)} exp(z_i·z_p/τ) / Σ_{a≠i} exp(z_i·z_a/τ)]`
/// for an arbitrary positive mask, on the graph.
pub fn contrastive_loss<S: Scalar>(
    g: &mut Graph<S>,
    z: Var,
    mask: &PositiveMask,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    check_embeddings(g.value(z), mask, "contrastive_loss")?;
    let sim = g.matmul_nt(z, z)?;
    let logits = g.scale(sim, S::of(1.0 / tau));
    let lse_p = g.log_sum_exp_rows(logits, Some(mask.as_slice()))?;
    let lse_a = g.log_sum_exp_rows(logits, Some(&mask.all_others()))?;
    let log_ratio = g.sub(lse_p, lse_a)?;
    let w: Vec<S> = anchor_weights(mask, reduction).into_iter().map(|v| S::of(-v)).collect();
    let n = w.len();
    let weighted = g.mul_const(log_ratio, &Tensor::new([n], w)?)?;
    Ok(g.sum(weighted))
}

/// Image-aware contrastive loss on L2-normalised embeddings `z[N×d]`.
pub fn ia_closs<S: Scalar>(g: &mut Graph<S>, z: Var, image_id: &[u64], tau: f64, reduction: Reduction) -> Result<Var> {
    let mask = PositiveMask::from_image_ids(image_id)?;
    contrastive_loss(g, z, &mask, tau, reduction)
}

/// Supervised variant: positives share at least one label.
pub fn sup_closs<S: Scalar>(
    g: &mut Graph<S>,
    z: Var,
    labels: &[Vec<usize>],
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let mask = PositiveMask::from_labels(labels)?;
    contrastive_loss(g, z, &mask, tau, reduction)
}

/// `L_sim + λ·L_ia` on the graph.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, l_sim: Var, l_ia: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(l_ia, S::of(lambda));
    g.add(l_sim, weighted)
}

/// Scalar form of [`total_loss`].
pub fn combine(l_sim: f64, l_ia: f64, lambda: f64) -> f64 {
    l_sim + lambda * l_ia
}

/// Per-anchor similarity exponentials, shifted by the anchor's maximum over `A(i)`.
struct Exps {
    n: usize,
    e: Vec<f64>,
    sum_p: Vec<f64>,
    sum_a: Vec<f64>,
}

fn exps(z: &Tensor<f64>, mask: &PositiveMask, tau: f64) -> Exps {
    let n = z.shape()[0];
    let dot = |i: usize, j: usize| -> f64 { z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau };
    let mut e = vec![0.0; n * n];
    let mut sum_p = vec![0.0; n];
    let mut sum_a = vec![0.0; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| if j == i { f64::NEG_INFINITY } else { dot(i, j) }).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for j in 0..n {
            if j == i {
                continue;
            }
            let v = (logits[j] - mx).exp();
            e[i * n + j] = v;
            sum_a[i] += v;
            if mask.get(i, j) {
                sum_p[i] += v;
            }
        }
    }
    Exps { n, e, sum_p, sum_a }
}

/// Value of [`contrastive_loss`] computed directly on a tensor.
pub fn contrastive_value(z: &Tensor<f64>, mask: &PositiveMask, tau: f64, reduction: Reduction) -> Result<f64> {
    check_embeddings(z, mask, "contrastive_value")?;
    let ex = exps(z, mask, tau);
    let w = anchor_weights(mask, reduction);
    Ok((0..ex.n).map(|i| -w[i] * (ex.sum_p[i] / ex.sum_a[i]).ln()).sum())
}

/// Analytic `∂L/∂z` of the contrastive loss, treating `z` as free rows.
///
/// Row `i` collects its own anchor term, written in the pairwise-difference
/// form `−1/(|P(i)|τ) · Σ_{p∈P, a∈A∖P} (z_p − z_a) e_ip e_ia / (Σ_P e_ip · Σ_A e_ia)`,
/// plus the terms where it appears as a positive or contrast of other anchors.
pub fn contrastive_grad(z: &Tensor<f64>, mask: &PositiveMask, tau: f64, reduction: Reduction) -> Result<Tensor<f64>> {
    let (n, d) = check_embeddings(z, mask, "contrastive_grad")?;
    let ex = exps(z, mask, tau);
    let w = anchor_weights(mask, reduction);
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let coef = -w[i] / tau;
        let denom = ex.sum_p[i] * ex.sum_a[i];
        let gi = &mut grad[i * d..(i + 1) * d];
        for p in (0..n).filter(|&p| mask.get(i, p)) {
            for a in (0..n).filter(|&a| a != i && !mask.get(i, a)) {
                let f = coef * ex.e[i * n + p] * ex.e[i * n + a] / denom;
                for k in 0..d {
                    gi[k] += f * (z.row(p)[k] - z.row(a)[k]);
                }
            }
        }
    }
    // contributions through the other anchors' rows
    for j in 0..n {
        let coef = -w[j] / tau;
        let zj = z.row(j).to_vec();
        for i in (0..n).filter(|&i| i != j) {
            let e = ex.e[j * n + i];
            let pos = if mask.get(j, i) { e / ex.sum_p[j] } else { 0.0 };
            let f = coef * (pos - e / ex.sum_a[j]);
            let gi = &mut grad[i * d..(i + 1) * d];
            for k in 0..d {
                gi[k] += f * zj[k];
            }
        }
    }
    Tensor::new([n, d], grad)
}

/// Analytic image-aware loss gradient.
pub fn ia_closs_grad(z: &Tensor<f64>, image_id: &[u64], tau: f64, reduction: Reduction) -> Result<Tensor<f64>> {
    contrastive_grad(z, &PositiveMask::from_image_ids(image_id)?, tau, reduction)
}

/// Mean over feature dimensions of the per-dimension standard deviation of
/// L2-normalised rows. Near `1/√d` for spread-out embeddings, 0 at collapse.
pub fn embedding_std<S: Scalar>(z: &Tensor<S>) -> f64 {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    if n < 2 {
        return 0.0;
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r: Vec<f64> = z.row(i).iter().map(|v| v.as_f64()).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
            r.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for k in 0..d {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    total / d as f64
}

#[cfg(test)]
mod tests;
