//! Overlap and ranking metrics on probability maps.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

fn check<T: Scalar>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, pred.shape(), target.shape()));
    }
    Ok(())
}

/// `2 |P & T| / (|P| + |T|)` after thresholding `pred`; two empty masks
/// score 1.
pub fn dice_score<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, threshold: f64) -> Result<f64> {
    check("dice_score", pred, target)?;
    let (mut inter, mut p_sum, mut t_sum) = (0usize, 0usize, 0usize);
    for (p, t) in pred.data().iter().zip(target.data()) {
        let p = p.as_f64() > threshold;
        let t = t.as_f64() > 0.5;
        inter += usize::from(p && t);
        p_sum += usize::from(p);
        t_sum += usize::from(t);
    }
    if p_sum + t_sum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_sum + t_sum) as f64)
}

/// Exact ROC AUC via the Mann-Whitney U statistic; tied scores count half.
pub fn auc_score<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check("auc_score", pred, target)?;
    let mut pairs: Vec<(f64, bool)> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.as_f64(), t.as_f64() > 0.5))
        .collect();
    let n_pos = pairs.iter().filter(|(_, t)| *t).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of 1-based ranks of the positives, ties sharing their mean rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let pos = pairs[i..j].iter().filter(|(_, t)| *t).count();
        rank_sum += mean_rank * pos as f64;
        i = j;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_worked_examples() {
        let a = t(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let b = t(&[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(dice_score(&a, &b, 0.5).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a, 0.5).unwrap(), 1.0);
        let z = t(&[0.0; 6]);
        assert_eq!(dice_score(&z, &z, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn auc_worked_examples() {
        let labels = t(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(auc_score(&t(&[0.9, 0.8, 0.4, 0.3]), &labels).unwrap(), 0.75);
        assert_eq!(auc_score(&t(&[0.5; 4]), &labels).unwrap(), 0.5);
        assert!(matches!(auc_score(&t(&[0.5; 4]), &t(&[1.0; 4])), Err(Error::AucUndefined)));
    }
}
