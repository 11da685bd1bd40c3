//! Identity losses: label-smoothing cross-entropy over classifier logits and
//! a batch-hard triplet loss over embedding rows.

use crate::tensor::{Array, Result, Scalar, Tape, TensorError, Var};

/// Cross-entropy with label smoothing: the target row puts `1 - eps` on the
/// true class and spreads `eps` uniformly over the other `C - 1` classes;
/// the result is averaged over the batch.
pub fn label_smoothing_ce<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &[usize],
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(logits);
    let &[b, c] = shape else {
        return Err(TensorError::Contract(format!(
            "label_smoothing_ce: logits must be 2-d, got {shape:?}"
        )));
    };
    if labels.len() != b {
        return Err(TensorError::Contract(format!(
            "label_smoothing_ce: {b} logit rows but {} labels",
            labels.len()
        )));
    }
    if c < 2 {
        return Err(TensorError::Contract(
            "label_smoothing_ce: need at least 2 classes".into(),
        ));
    }
    let mut target = vec![F::from_f64(eps / (c - 1) as f64); b * c];
    for (row, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(TensorError::Contract(format!(
                "label_smoothing_ce: label {label} out of range for {c} classes"
            )));
        }
        target[row * c + label] = F::from_f64(1.0 - eps);
    }
    let target = tape.constant(Array::matrix(b, c, target)?);
    let logp = tape.log_softmax(logits);
    let weighted = tape.mul(target, logp)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, F::from_f64(-1.0 / b as f64)))
}

/// Batch-hard triplet loss with Euclidean distances: for each anchor, the
/// farthest positive and the nearest negative are selected on detached
/// values, then the hinge `max(0, d_ap - d_an + margin)` is recomputed
/// differentiably and averaged over anchors.
pub fn triplet_loss<F: Scalar>(
    tape: &mut Tape<F>,
    feats: Var,
    labels: &[u32],
    margin: f64,
) -> Result<Var> {
    let shape = tape.shape(feats);
    let &[b, d] = shape else {
        return Err(TensorError::Contract(format!(
            "triplet_loss: features must be 2-d, got {shape:?}"
        )));
    };
    if labels.len() != b {
        return Err(TensorError::Contract(format!(
            "triplet_loss: {b} feature rows but {} labels",
            labels.len()
        )));
    }
    // hard mining on raw values
    let vals = tape.value(feats).data().to_vec();
    let dist = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let diff = (vals[i * d + k] - vals[j * d + k]).to_f64();
            s += diff * diff;
        }
        (s + 1e-12).sqrt()
    };
    let mut selected = Vec::with_capacity(b);
    for a in 0..b {
        let mut hard_pos: Option<(usize, f64)> = None;
        let mut hard_neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let dj = dist(a, j);
            if labels[j] == labels[a] {
                if hard_pos.is_none_or(|(_, dp)| dj > dp) {
                    hard_pos = Some((j, dj));
                }
            } else if hard_neg.is_none_or(|(_, dn)| dj < dn) {
                hard_neg = Some((j, dj));
            }
        }
        let (Some((p, _)), Some((n, _))) = (hard_pos, hard_neg) else {
            return Err(TensorError::Contract(format!(
                "triplet_loss: anchor {a} (identity {}) lacks a {} in the batch",
                labels[a],
                if hard_pos.is_none() { "positive" } else { "negative" }
            )));
        };
        selected.push((a, p, n));
    }
    // differentiable recomputation of the selected pairs
    let eps = F::from_f64(1e-12);
    let margin_f = F::from_f64(margin);
    let mut total: Option<Var> = None;
    for (a, p, n) in selected {
        let fa = tape.rows(feats, &[a])?;
        let fp = tape.rows(feats, &[p])?;
        let fn_ = tape.rows(feats, &[n])?;
        let pair_dist = |x: Var, y: Var, tape: &mut Tape<F>| -> Result<Var> {
            let diff = tape.sub(x, y)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum(sq);
            let g = tape.add_const(s, eps);
            Ok(tape.sqrt(g))
        };
        let d_ap = pair_dist(fa, fp, tape)?;
        let d_an = pair_dist(fa, fn_, tape)?;
        let gap = tape.sub(d_ap, d_an)?;
        let shifted = tape.add_const(gap, margin_f);
        let hinge = tape.relu(shifted);
        total = Some(match total {
            Some(acc) => tape.add(acc, hinge)?,
            None => hinge,
        });
    }
    Ok(tape.scale(total.unwrap(), F::from_f64(1.0 / b as f64)))
}
