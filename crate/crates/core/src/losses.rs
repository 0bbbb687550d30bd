//! Identity, completion, cross hard triplet and consistency losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

pub const DEFAULT_MARGIN: f32 = 0.3;

/// Distance used by the triplet hinge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletDistance {
    /// `‖a − b‖²`
    Squared,
    /// `‖a − b‖`, clamped below at 1e-12 before the root.
    #[default]
    Euclidean,
}

/// How per-anchor hinge terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

/// Distance and reduction of the cross hard triplet loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSpec {
    pub distance: TripletDistance,
    pub reduction: Reduction,
}

impl TripletSpec {
    /// Squared Euclidean distance summed over anchors.
    pub const SQUARED_SUM: Self = Self {
        distance: TripletDistance::Squared,
        reduction: Reduction::Sum,
    };
}

/// `[B, B]` distances between rows of `a` and `b`.
pub fn distance_matrix(g: &Graph, a: Var, b: Var, kind: TripletDistance) -> Result<Var> {
    let d = g.pairwise_sqdist(a, b)?;
    Ok(match kind {
        TripletDistance::Squared => d,
        TripletDistance::Euclidean => g.sqrt_clamped(d, 1e-12),
    })
}

/// Mean cross-entropy of `logits: [.., n_classes]` against one label per
/// leading row (labels repeat across any middle axis, e.g. parts).
pub fn cross_entropy(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    let classes = *shape.last().unwrap_or(&0);
    let rows: usize = shape[..shape.len() - 1].iter().product();
    if labels.is_empty() || rows % labels.len() != 0 || shape[0] != labels.len() {
        return Err(Error::Batch(format!(
            "{} labels for logits of shape {shape:?}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label: bad, classes });
    }
    let per = rows / labels.len();
    let lsm = g.log_softmax(logits);
    let idx: Vec<usize> = (0..rows).map(|r| r * classes + labels[r / per]).collect();
    let picked = g.take(lsm, idx, &[rows])?;
    Ok(g.scale(g.mean(picked), -1.0))
}

/// Mean squared error against a gradient-detached target.
pub fn completion_loss(g: &Graph, f_cp: Var, f_ht: Var) -> Result<Var> {
    if g.shape(f_cp) != g.shape(f_ht) {
        return Err(Error::Shape {
            op: "completion_loss",
            lhs: g.shape(f_cp),
            rhs: g.shape(f_ht),
        });
    }
    let diff = g.sub(f_cp, g.detach(f_ht))?;
    Ok(g.mean(g.square(diff)))
}

/// `Σ KL(softmax(c) ‖ softmax(h)) / rows` over the last axis, `h` detached.
pub fn consistency_loss(g: &Graph, logits_c: Var, logits_h: Var) -> Result<Var> {
    let shape = g.shape(logits_c);
    if shape != g.shape(logits_h) {
        return Err(Error::Shape {
            op: "consistency_loss",
            lhs: shape,
            rhs: g.shape(logits_h),
        });
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let log_q = g.detach(g.log_softmax(g.detach(logits_h)));
    let p = g.softmax(logits_c);
    let log_p = g.log_softmax(logits_c);
    let kl = g.sum(g.mul(p, g.sub(log_p, log_q)?)?);
    Ok(g.scale(kl, 1.0 / rows as f32))
}

/// Hardest positive and negative of every anchor row in a `[B, B]`
/// distance matrix. Positives include the anchor's own column. Ties go to
/// the smallest index.
pub fn mine_hardest(dist: &[f32], labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let b = labels.len();
    assert_eq!(dist.len(), b * b, "distance matrix must be B×B");
    let mut pos = Vec::with_capacity(b);
    let mut neg = Vec::with_capacity(b);
    for i in 0..b {
        let row = &dist[i * b..(i + 1) * b];
        let mut p: Option<usize> = None;
        let mut n: Option<usize> = None;
        let mut same = 0;
        for (j, &d) in row.iter().enumerate() {
            if labels[j] == labels[i] {
                same += 1;
                if p.map_or(true, |q| d > row[q]) {
                    p = Some(j);
                }
            } else if n.map_or(true, |q| d < row[q]) {
                n = Some(j);
            }
        }
        if same < 2 {
            return Err(Error::Batch(format!("identity {} has no positive in the batch", labels[i])));
        }
        let n = n.ok_or_else(|| Error::Batch(format!("identity {} has no negative in the batch", labels[i])))?;
        pos.push(p.expect("anchor column is a positive"));
        neg.push(n);
    }
    Ok((pos, neg))
}

/// `Σ_i [d(a_i, x_p) − d(a_i, x_n) + m]₊` (or its mean over `i`), anchors
/// `[B, D]` against candidates `[B, D]`.
pub fn hard_triplet(
    g: &Graph,
    anchors: Var,
    candidates: Var,
    labels: &[usize],
    margin: f32,
    spec: TripletSpec,
) -> Result<(Var, Vec<usize>, Vec<usize>)> {
    let d = distance_matrix(g, anchors, candidates, spec.distance)?;
    let b = labels.len();
    if g.shape(d) != [b, b] {
        return Err(Error::Batch(format!("{b} labels for distances {:?}", g.shape(d))));
    }
    let (pos, neg) = mine_hardest(g.value(d).data(), labels)?;
    let dp = g.take(d, (0..b).map(|i| i * b + pos[i]).collect(), &[b])?;
    let dn = g.take(d, (0..b).map(|i| i * b + neg[i]).collect(), &[b])?;
    let hinge = g.relu(g.add_scalar(g.sub(dp, dn)?, margin));
    let loss = match spec.reduction {
        Reduction::Sum => g.sum(hinge),
        Reduction::Mean => g.mean(hinge),
    };
    Ok((loss, pos, neg))
}

/// Cross hard triplet: holistic part vectors as anchors, hardest samples
/// mined among occluded and (when present) completed part vectors. Inputs
/// are `[B, M, C]` and are flattened per instance.
pub fn cht_loss(
    g: &Graph,
    holistic: Var,
    occluded: Var,
    completed: Option<Var>,
    labels: &[usize],
    margin: f32,
    spec: TripletSpec,
) -> Result<Var> {
    let flat = |v: Var| -> Result<Var> {
        let s = g.shape(v);
        g.reshape(v, &[s[0], s[1..].iter().product()])
    };
    let a = flat(holistic)?;
    let (l1, _, _) = hard_triplet(g, a, flat(occluded)?, labels, margin, spec)?;
    match completed {
        Some(c) => {
            let (l2, _, _) = hard_triplet(g, a, flat(c)?, labels, margin, spec)?;
            g.add(l1, l2)
        }
        None => Ok(l1),
    }
}

/// Scalar values of the four components and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub id: f32,
    /// Completion term as it enters the total, after weighting.
    pub fcd: f32,
    pub cht: f32,
    pub fc2: f32,
    pub total: f32,
}

/// Graph handles of the loss components; absent components count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub id: Var,
    pub fcd: Option<Var>,
    pub cht: Var,
    pub fc2: Option<Var>,
}

/// Unweighted sum. Any non-finite component aborts with its name.
pub fn total_loss(g: &Graph, terms: &LossTerms) -> Result<(Var, LossReport)> {
    let val = |name: &str, v: Option<Var>| -> Result<f32> {
        let x = v.map_or(0.0, |v| g.value(v).item());
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {x}")));
        }
        Ok(x)
    };
    let id = val("id", Some(terms.id))?;
    let fcd = val("fcd", terms.fcd)?;
    let cht = val("cht", Some(terms.cht))?;
    let fc2 = val("fc2", terms.fc2)?;
    let mut total = g.add(terms.id, terms.cht)?;
    for t in [terms.fcd, terms.fc2].into_iter().flatten() {
        total = g.add(total, t)?;
    }
    let report = LossReport {
        id,
        fcd,
        cht,
        fc2,
        total: g.value(total).item(),
    };
    Ok((total, report))
}
