use crate::clustering::PosteriorSeq;
use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Graph, Var};

/// Tolerance on target rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-6;

fn check_masked(op: &'static str, rows: usize, masked: &[usize]) -> Result<()> {
    if masked.is_empty() {
        return Err(Error::invalid(format!("{op}: empty mask")));
    }
    if let Some(&t) = masked.iter().find(|&&t| t >= rows) {
        return Err(Error::shape(op, format!("masked frame {t} of {rows}")));
    }
    Ok(())
}

/// Mean over `masked` frames of the squared L2 distance between the
/// prediction rows and the (constant) target rows.
pub fn jepa_loss(g: &mut Graph, z_pred: Var, z_target: &DenseArray, masked: &[usize]) -> Result<Var> {
    if g.shape(z_pred) != z_target.shape() || z_target.ndim() != 2 {
        return Err(Error::shape(
            "jepa_loss",
            format!("{:?} vs {:?}", g.shape(z_pred), z_target.shape()),
        ));
    }
    check_masked("jepa_loss", z_target.shape()[0], masked)?;
    let c = z_target.shape()[1];
    let mut tgt = Vec::with_capacity(masked.len() * c);
    for &t in masked {
        tgt.extend_from_slice(z_target.row(t));
    }
    let tgt = g.constant(DenseArray::new(&[masked.len(), c], tgt)?);
    let pred = g.select_rows(z_pred, masked)?;
    let diff = g.sub(pred, tgt)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / masked.len() as f64)
}

/// `Σ_k q log q` per row with `0·log 0 = 0`.
fn neg_entropy(q: &[f64], log_q: &[f64]) -> f64 {
    q.iter()
        .zip(log_q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum()
}

/// Mean forward KL(q ‖ softmax(logits)) over `masked` frames, in log space.
/// Rows of `q` must sum to one within [`ROW_SUM_TOL`].
pub fn cluster_kl_loss(g: &mut Graph, q: &PosteriorSeq, logits: Var, masked: &[usize]) -> Result<Var> {
    if g.shape(logits) != q.q.shape() {
        return Err(Error::shape(
            "cluster_kl_loss",
            format!("logits {:?} vs targets {:?}", g.shape(logits), q.q.shape()),
        ));
    }
    check_masked("cluster_kl_loss", q.len(), masked)?;
    let k = q.k();
    let mut qm = Vec::with_capacity(masked.len() * k);
    let mut const_term = 0.0;
    for &t in masked {
        let row = q.q.row(t);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| *p < 0.0) {
            return Err(Error::invalid(format!(
                "target row {t} is not a distribution (sums to {sum})"
            )));
        }
        const_term += neg_entropy(row, q.log_q.row(t));
        qm.extend_from_slice(row);
    }
    let qm = g.constant(DenseArray::new(&[masked.len(), k], qm)?);
    let log_p = g.log_softmax(logits, 1)?;
    let log_p = g.select_rows(log_p, masked)?;
    let cross = g.mul(qm, log_p)?;
    let cross = g.sum(cross)?;
    // Σ q log q − Σ q log p
    let kl = g.neg(cross)?;
    let kl = g.add_scalar(kl, const_term)?;
    g.scale(kl, 1.0 / masked.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jepa_single_frame() {
        let mut g = Graph::new();
        let pred = g.variable(DenseArray::new(&[2, 2], vec![3.0, 4.0, 9.0, 9.0]).unwrap());
        let tgt = DenseArray::zeros(&[2, 2]);
        let l = jepa_loss(&mut g, pred, &tgt, &[0]).unwrap();
        assert_eq!(g.value(l).data(), &[25.0]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut g = Graph::new();
        let pred = g.variable(DenseArray::zeros(&[2, 2]));
        assert!(jepa_loss(&mut g, pred, &DenseArray::zeros(&[2, 2]), &[]).is_err());
    }

    #[test]
    fn non_stochastic_targets_rejected() {
        let mut g = Graph::new();
        let logits = g.variable(DenseArray::zeros(&[1, 2]));
        let q = PosteriorSeq {
            q: DenseArray::new(&[1, 2], vec![0.7, 0.7]).unwrap(),
            log_q: DenseArray::new(&[1, 2], vec![0.7f64.ln(), 0.7f64.ln()]).unwrap(),
        };
        assert!(cluster_kl_loss(&mut g, &q, logits, &[0]).is_err());
    }
}
