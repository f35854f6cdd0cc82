//! Training objectives with exact gradients.
//!
//! Representation losses act on unit-norm embeddings, classification losses
//! on probability rows. Every loss returns its value together with the
//! gradient with respect to each input it is differentiated through.
//! Distillation targets are always treated as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    normalize_rows, normalize_rows_backward, softmax_rows, BatchForward, BatchViews, BranchOut,
    EncoderStack, ViewForward, ViewGrad,
};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub epsilon: f64,
    /// Mean-entropy weight of the fused head; 0 drops the term.
    pub epsilon_fused: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_u: 0.35,
            lambda_s: 0.35,
            epsilon: 1.0,
            epsilon_fused: 1.0,
        }
    }
}

impl LossWeights {
    /// Weight of the cross-modal terms, `1 − λ_u − λ_s`.
    pub fn cross(&self) -> f64 {
        1.0 - self.lambda_u - self.lambda_s
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_u >= 0.0
            && self.lambda_s >= 0.0
            && self.lambda_u + self.lambda_s <= 1.0 + 1e-12
            && self.epsilon >= 0.0
            && self.epsilon_fused >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "loss weights need non-negative entries and λ_u + λ_s <= 1, got {self:?}"
            )))
        }
    }
}

/// Loss value with gradients for two matrix inputs.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub value: f64,
    pub d_a: Matrix,
    pub d_b: Matrix,
}

#[derive(Debug, Clone)]
pub struct SupContrastive {
    pub value: f64,
    pub d_z: Matrix,
    pub d_z_prime: Matrix,
    /// No labelled anchor had a same-label partner; value and gradients are 0.
    pub no_positives: bool,
}

#[derive(Debug, Clone)]
pub struct ProbGrad {
    pub value: f64,
    pub d_p: Matrix,
}

#[derive(Debug, Clone)]
pub struct SupCls {
    pub value: f64,
    pub d_p: Matrix,
    /// No labelled rows; value and gradient are 0.
    pub no_labeled: bool,
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "paired inputs {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.nrows() < 2 {
        return Err(Error::DegenerateBatch(a.nrows()));
    }
    Ok(())
}

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// InfoNCE with the matching row as positive and every row of `b` in the
/// denominator: mean over i of `lse_j(a_i·b_j/τ) − a_i·b_i/τ`.
fn info_nce(a: &Matrix, b: &Matrix, tau: f64) -> PairGrad {
    let n = a.nrows();
    let s = a * b.transpose() / tau;
    let mut ds = Matrix::zeros(n, n);
    let mut value = 0.0;
    for i in 0..n {
        let lse = log_sum_exp(s.row(i).iter().copied());
        value += lse - s[(i, i)];
        for j in 0..n {
            ds[(i, j)] = (s[(i, j)] - lse).exp() / n as f64;
        }
        ds[(i, i)] -= 1.0 / n as f64;
    }
    PairGrad {
        value: value / n as f64,
        d_a: &ds * b / tau,
        d_b: ds.transpose() * a / tau,
    }
}

/// Two-view contrastive loss on projected embeddings.
pub fn loss_rep_unsup(z: &Matrix, z_prime: &Matrix, tau_u: f64) -> Result<PairGrad> {
    check_pair(z, z_prime)?;
    Ok(info_nce(z, z_prime, tau_u))
}

/// Supervised contrastive loss over the labelled rows. Positives of anchor
/// `i` are the other labelled rows with its label; the denominator runs over
/// the labelled rows.
pub fn loss_rep_sup(
    z: &Matrix,
    z_prime: &Matrix,
    labels: &[Option<usize>],
    tau_s: f64,
) -> Result<SupContrastive> {
    check_pair(z, z_prime)?;
    if labels.len() != z.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            z.nrows()
        )));
    }
    let rows: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .collect();
    let n = rows.len();
    let mut d_z = Matrix::zeros(z.nrows(), z.ncols());
    let mut d_z_prime = Matrix::zeros(z.nrows(), z.ncols());

    let anchors: Vec<(usize, Vec<usize>)> = (0..n)
        .map(|a| {
            let pos = (0..n)
                .filter(|&r| r != a && rows[r].1 == rows[a].1)
                .collect::<Vec<_>>();
            (a, pos)
        })
        .filter(|(_, pos)| !pos.is_empty())
        .collect();
    if anchors.is_empty() {
        return Ok(SupContrastive {
            value: 0.0,
            d_z,
            d_z_prime,
            no_positives: true,
        });
    }

    let za = Matrix::from_fn(n, z.ncols(), |r, c| z[(rows[r].0, c)]);
    let zb = Matrix::from_fn(n, z.ncols(), |r, c| z_prime[(rows[r].0, c)]);
    let s = &za * zb.transpose() / tau_s;
    let scale = 1.0 / anchors.len() as f64;
    let mut ds = Matrix::zeros(n, n);
    let mut value = 0.0;
    for (a, pos) in &anchors {
        let lse = log_sum_exp(s.row(*a).iter().copied());
        let inv = 1.0 / pos.len() as f64;
        value += lse - pos.iter().map(|&r| s[(*a, r)]).sum::<f64>() * inv;
        for j in 0..n {
            ds[(*a, j)] += scale * (s[(*a, j)] - lse).exp();
        }
        for &r in pos {
            ds[(*a, r)] -= scale * inv;
        }
    }
    let da = &ds * &zb / tau_s;
    let db = ds.transpose() * &za / tau_s;
    for (r, &(i, _)) in rows.iter().enumerate() {
        d_z.row_mut(i).copy_from(&da.row(r));
        d_z_prime.row_mut(i).copy_from(&db.row(r));
    }
    Ok(SupContrastive {
        value: value * scale,
        d_z,
        d_z_prime,
        no_positives: false,
    })
}

/// Symmetrised InfoNCE between already-normalised features of the two
/// modalities; the positive of each row is its own pair partner.
pub(crate) fn cross_modal_normalized(a: &Matrix, b: &Matrix, tau: f64) -> PairGrad {
    let ab = info_nce(a, b, tau);
    let ba = info_nce(b, a, tau);
    PairGrad {
        value: 0.5 * (ab.value + ba.value),
        d_a: (ab.d_a + ba.d_b) * 0.5,
        d_b: (ab.d_b + ba.d_a) * 0.5,
    }
}

/// Cross-modal contrastive loss on encoder features (no projection head).
/// Features are ℓ2-normalised first; gradients are with respect to the raw
/// features.
pub fn loss_rep_cross(h: &Matrix, h_tilde: &Matrix, tau_c: f64) -> Result<PairGrad> {
    check_pair(h, h_tilde)?;
    let (a, b) = (normalize_rows(h), normalize_rows(h_tilde));
    let g = cross_modal_normalized(&a, &b, tau_c);
    Ok(PairGrad {
        value: g.value,
        d_a: normalize_rows_backward(h, &a, &g.d_a),
        d_b: normalize_rows_backward(h_tilde, &b, &g.d_b),
    })
}

fn check_probs(p: &Matrix, q: &Matrix) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(Error::DimensionMismatch(format!(
            "probability blocks {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok(())
}

/// Mean over rows of `−Σ_k t_k log p_k` with gradient `−t / (n p)` with
/// respect to `p`; `t` is constant.
fn cross_entropy(target: &Matrix, p: &Matrix) -> ProbGrad {
    let n = p.nrows().max(1) as f64;
    let mut value = 0.0;
    let mut d_p = Matrix::zeros(p.nrows(), p.ncols());
    for i in 0..p.nrows() {
        for k in 0..p.ncols() {
            let t = target[(i, k)];
            if t != 0.0 {
                value -= t * p[(i, k)].ln();
                d_p[(i, k)] = -t / (n * p[(i, k)]);
            }
        }
    }
    ProbGrad {
        value: value / n,
        d_p,
    }
}

/// Self-distillation: mean `ℓ(q, p)` with sharpened targets `q` held fixed.
pub fn loss_cls_self_distill(p: &Matrix, q_sharp: &Matrix) -> Result<ProbGrad> {
    check_probs(p, q_sharp)?;
    Ok(cross_entropy(q_sharp, p))
}

/// One-hot cross-entropy averaged over the labelled rows.
pub fn loss_cls_sup(p: &Matrix, labels: &[Option<usize>]) -> Result<SupCls> {
    if labels.len() != p.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            p.nrows()
        )));
    }
    let k = p.ncols();
    if let Some(bad) = labels.iter().flatten().find(|&&l| l >= k) {
        return Err(Error::DimensionMismatch(format!("label {bad} outside {k} classes")));
    }
    let labelled: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .collect();
    let mut d_p = Matrix::zeros(p.nrows(), k);
    if labelled.is_empty() {
        return Ok(SupCls {
            value: 0.0,
            d_p,
            no_labeled: true,
        });
    }
    let n = labelled.len() as f64;
    let mut value = 0.0;
    for &(i, l) in &labelled {
        value -= p[(i, l)].ln();
        d_p[(i, l)] = -1.0 / (n * p[(i, l)]);
    }
    Ok(SupCls {
        value: value / n,
        d_p,
        no_labeled: false,
    })
}

/// Correspondence between the two modalities' class indices. `perm[a] = b`
/// means class `a` of the y head corresponds to class `b` of the x head. Old
/// classes are fixed points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub perm: Vec<usize>,
    pub num_old: usize,
}

impl LabelMapping {
    pub fn identity(k: usize, num_old: usize) -> Self {
        LabelMapping {
            perm: (0..k).collect(),
            num_old,
        }
    }

    pub fn new(perm: Vec<usize>, num_old: usize) -> Result<Self> {
        let m = LabelMapping { perm, num_old };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.perm.len();
        let mut seen = vec![false; k];
        for (a, &b) in self.perm.iter().enumerate() {
            if b >= k || seen[b] {
                return Err(Error::InvalidMapping(format!("{:?} is not a permutation", self.perm)));
            }
            seen[b] = true;
            if a < self.num_old && b != a {
                return Err(Error::InvalidMapping(format!("old class {a} moved to {b}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (a, &b) in self.perm.iter().enumerate() {
            inv[b] = a;
        }
        inv
    }

    /// Moves column `a` of a y-indexed block to column `perm[a]`.
    pub fn to_x_index(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for (a, &b) in self.perm.iter().enumerate() {
            out.column_mut(b).copy_from(&m.column(a));
        }
        out
    }

    /// Inverse of [`LabelMapping::to_x_index`].
    pub fn to_y_index(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for (a, &b) in self.perm.iter().enumerate() {
            out.column_mut(a).copy_from(&m.column(b));
        }
        out
    }
}

/// Cross-modal distillation with targets taken from `target_x` / `target_y`
/// (the probabilities used as teachers) and gradients for the students.
fn cross_distill_with_targets(
    p_x: &Matrix,
    p_y: &Matrix,
    teacher_x: &Matrix,
    teacher_y: &Matrix,
    mapping: &LabelMapping,
) -> Result<PairGrad> {
    check_probs(p_x, p_y)?;
    if mapping.len() != p_x.ncols() {
        return Err(Error::InvalidMapping(format!(
            "mapping over {} classes for {} columns",
            mapping.len(),
            p_x.ncols()
        )));
    }
    mapping.validate()?;
    let x_from_y = cross_entropy(&mapping.to_x_index(teacher_y), p_x);
    let y_from_x = cross_entropy(&mapping.to_y_index(teacher_x), p_y);
    Ok(PairGrad {
        value: 0.5 * (x_from_y.value + y_from_x.value),
        d_a: x_from_y.d_p * 0.5,
        d_b: y_from_x.d_p * 0.5,
    })
}

/// Symmetrised cross-modal prototype distillation: each modality is trained
/// toward the other's (remapped, constant) prediction.
pub fn loss_cls_cross_distill(p_x: &Matrix, p_y: &Matrix, mapping: &LabelMapping) -> Result<PairGrad> {
    cross_distill_with_targets(p_x, p_y, p_x, p_y, mapping)
}

/// Entropy of the mean prediction over all rows, and its gradient.
pub fn entropy_reg(p_all_views: &Matrix) -> ProbGrad {
    let n = p_all_views.nrows().max(1) as f64;
    let k = p_all_views.ncols();
    let mean: Vec<f64> = (0..k).map(|c| p_all_views.column(c).sum() / n).collect();
    let value = -mean
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|m| m * m.ln())
        .sum::<f64>();
    let col_grad: Vec<f64> = mean
        .iter()
        .map(|&m| -(m.max(f64::MIN_POSITIVE).ln() + 1.0) / n)
        .collect();
    let d_p = Matrix::from_fn(p_all_views.nrows(), k, |_, c| col_grad[c]);
    ProbGrad { value, d_p }
}

/// `∂L/∂logits` from `∂L/∂p` for row-wise softmax.
pub fn softmax_backward(p: &Matrix, d_p: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.nrows(), p.ncols());
    for i in 0..p.nrows() {
        let dot = p.row(i).dot(&d_p.row(i));
        for k in 0..p.ncols() {
            out[(i, k)] = p[(i, k)] * (d_p[(i, k)] - dot);
        }
    }
    out
}

/// Scalar values of every loss term for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    /// Summed over the x and y heads.
    pub rep_u: f64,
    pub rep_s: f64,
    /// Both directions of the cross-modal InfoNCE, averaged over views.
    pub rep_c: f64,
    pub cls_u: f64,
    pub cls_s: f64,
    pub cls_c: f64,
    /// `H(p̄)` summed over the x and y heads.
    pub entropy: f64,
    pub fusion: f64,
    pub total: f64,
}

/// Fused-head terms that enter the fusion loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FusionParts {
    pub rep_u: f64,
    pub rep_s: f64,
    pub cls_u: f64,
    pub cls_s: f64,
    pub entropy: f64,
}

/// Sub-loss values before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rep_u: f64,
    pub rep_s: f64,
    pub rep_c: f64,
    pub cls_u: f64,
    pub cls_s: f64,
    pub cls_c: f64,
    pub entropy: f64,
    pub fused: FusionParts,
}

/// Weighted combination. The entropy term is subtracted so that minimising
/// the total maximises the balance of the mean prediction.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> LossValues {
    let wc = w.cross();
    let rep = w.lambda_u * parts.rep_u + w.lambda_s * parts.rep_s + wc * parts.rep_c;
    let cls = w.lambda_u * parts.cls_u + w.lambda_s * parts.cls_s + wc * parts.cls_c
        - w.epsilon * parts.entropy;
    let f = &parts.fused;
    let fusion = w.lambda_u * (f.rep_u + f.cls_u) + w.lambda_s * (f.rep_s + f.cls_s)
        - w.epsilon_fused * f.entropy;
    LossValues {
        rep_u: parts.rep_u,
        rep_s: parts.rep_s,
        rep_c: parts.rep_c,
        cls_u: parts.cls_u,
        cls_s: parts.cls_s,
        cls_c: parts.cls_c,
        entropy: parts.entropy,
        fusion,
        total: rep + cls + fusion,
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub values: LossValues,
    pub parts: LossParts,
    /// Gradient of `values.total`, laid out like the model.
    pub grads: EncoderStack,
    pub no_positives: bool,
    pub no_labeled: bool,
}

/// Constant targets for one batch: sharpened self-distillation targets per
/// head and view, and the teacher probabilities for cross-modal distillation.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[view][head]` with heads ordered x, y, fused.
    pub q: [[Matrix; 3]; 2],
    /// `[view][modality]` teacher probabilities, x then y.
    pub teacher: [[Matrix; 2]; 2],
}

fn sharpen(b: &BranchOut, tau_p: f64, tau_q: f64) -> Matrix {
    softmax_rows(&(&b.logits * (tau_p / tau_q)))
}

pub fn compute_targets(model: &EncoderStack, fwd: &BatchForward) -> Targets {
    let t = &model.config.temps;
    let q = |v: &ViewForward| {
        [
            sharpen(&v.x, t.tau_p, t.tau_q),
            sharpen(&v.y, t.tau_p, t.tau_q),
            sharpen(&v.fused, t.tau_p, t.tau_q),
        ]
    };
    Targets {
        q: [q(&fwd.view), q(&fwd.view_prime)],
        teacher: [
            [fwd.view.x.p.clone(), fwd.view.y.p.clone()],
            [fwd.view_prime.x.p.clone(), fwd.view_prime.y.p.clone()],
        ],
    }
}

fn branch(v: &ViewForward, head: usize) -> &BranchOut {
    match head {
        0 => &v.x,
        1 => &v.y,
        _ => &v.fused,
    }
}

/// Forward pass, targets and the full objective with gradients for one batch.
pub fn objective(
    model: &EncoderStack,
    views: &BatchViews,
    labels: &[Option<usize>],
    mapping: &LabelMapping,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let fwd = crate::model::forward(model, views)?;
    let targets = compute_targets(model, &fwd);
    objective_with_targets(model, &fwd, &targets, labels, mapping, weights)
}

/// The full objective for a given forward pass and fixed targets.
pub fn objective_with_targets(
    model: &EncoderStack,
    fwd: &BatchForward,
    targets: &Targets,
    labels: &[Option<usize>],
    mapping: &LabelMapping,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    weights_ok(w)?;
    let t = model.config.temps;
    let views = [&fwd.view, &fwd.view_prime];
    let rows = fwd.view.x.h.nrows();
    if rows < 2 {
        return Err(Error::DegenerateBatch(rows));
    }
    let mut vg = [ViewGrad::zeros(model, rows), ViewGrad::zeros(model, rows)];
    // d loss / d p, per view and head
    let k = model.config.num_classes;
    let mut dp: [[Matrix; 3]; 2] = std::array::from_fn(|_| std::array::from_fn(|_| Matrix::zeros(rows, k)));
    let mut parts = LossParts::default();
    let mut no_positives = false;
    let mut no_labeled = false;

    for head in 0..3 {
        let (a, b) = (branch(views[0], head), branch(views[1], head));
        // the fused head uses the same λ coefficients inside the fusion loss
        let rep_u = loss_rep_unsup(&a.z, &b.z, t.tau_u)?;
        let rep_s = loss_rep_sup(&a.z, &b.z, labels, t.tau_s)?;
        no_positives |= rep_s.no_positives;
        add_z(&mut vg[0], head, &(&rep_u.d_a * w.lambda_u + &rep_s.d_z * w.lambda_s));
        add_z(&mut vg[1], head, &(&rep_u.d_b * w.lambda_u + &rep_s.d_z_prime * w.lambda_s));

        let mut cls_u = 0.0;
        let mut cls_s = 0.0;
        for (v, other) in [(0, 1), (1, 0)] {
            let student = &branch(views[v], head).p;
            let sd = loss_cls_self_distill(student, &targets.q[other][head])?;
            let sup = loss_cls_sup(student, labels)?;
            no_labeled |= sup.no_labeled;
            cls_u += 0.5 * sd.value;
            cls_s += 0.5 * sup.value;
            dp[v][head] += (sd.d_p * w.lambda_u + sup.d_p * w.lambda_s) * 0.5;
        }

        if head < 2 {
            parts.rep_u += rep_u.value;
            parts.rep_s += rep_s.value;
            parts.cls_u += cls_u;
            parts.cls_s += cls_s;
        } else {
            parts.fused = FusionParts {
                rep_u: rep_u.value,
                rep_s: rep_s.value,
                cls_u,
                cls_s,
                entropy: 0.0,
            };
        }
    }

    let wc = w.cross();
    for v in 0..2 {
        let view = views[v];
        let cross = cross_modal_normalized(&view.x.h_norm, &view.y.h_norm, t.tau_c);
        parts.rep_c += cross.value;
        vg[v].x.h_norm += &cross.d_a * wc;
        vg[v].y.h_norm += &cross.d_b * wc;

        let distill = cross_distill_with_targets(
            &view.x.p,
            &view.y.p,
            &targets.teacher[v][0],
            &targets.teacher[v][1],
            mapping,
        )?;
        parts.cls_c += distill.value;
        dp[v][0] += &distill.d_a * wc;
        dp[v][1] += &distill.d_b * wc;
    }

    for head in 0..3 {
        let (a, b) = (&branch(views[0], head).p, &branch(views[1], head).p);
        let mut stacked = Matrix::zeros(2 * rows, k);
        stacked.rows_mut(0, rows).copy_from(a);
        stacked.rows_mut(rows, rows).copy_from(b);
        let ent = entropy_reg(&stacked);
        let eps = if head < 2 {
            parts.entropy += ent.value;
            w.epsilon
        } else {
            parts.fused.entropy = ent.value;
            w.epsilon_fused
        };
        dp[0][head] -= ent.d_p.rows(0, rows) * eps;
        dp[1][head] -= ent.d_p.rows(rows, rows) * eps;
    }

    let mut grads = model.zeros_like();
    for v in 0..2 {
        for head in 0..3 {
            let p = &branch(views[v], head).p;
            let dl = softmax_backward(p, &dp[v][head]);
            match head {
                0 => vg[v].x.logits += dl,
                1 => vg[v].y.logits += dl,
                _ => vg[v].fused.logits += dl,
            }
        }
        model.backward_view(views[v], &vg[v], &mut grads);
    }

    Ok(LossBreakdown {
        values: total_loss(&parts, w),
        parts,
        grads,
        no_positives,
        no_labeled,
    })
}

fn weights_ok(w: &LossWeights) -> Result<()> {
    w.validate()
}

fn add_z(g: &mut ViewGrad, head: usize, d: &Matrix) {
    match head {
        0 => g.x.z += d,
        1 => g.y.z += d,
        _ => g.fused.z += d,
    }
}
