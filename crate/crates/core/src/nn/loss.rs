use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Margin of the hinge term for negative pairs.
pub const MARGIN: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct ContrastiveOutput<T> {
    pub loss: f64,
    pub distances: Vec<f64>,
    pub grad_v: Tensor<T>,
    pub grad_a: Tensor<T>,
}

/// Euclidean distance between matching rows of two `[batch, dim]` tensors.
pub fn pair_distances<T: Scalar>(v: &Tensor<T>, a: &Tensor<T>) -> Result<Vec<f64>> {
    if v.shape() != a.shape() || v.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "embedding shapes {:?} and {:?} differ",
            v.shape(),
            a.shape()
        )));
    }
    Ok((0..v.batch())
        .map(|b| {
            v.sample(b)
                .iter()
                .zip(a.sample(b))
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Mean over the batch of `y d² + (1 − y) max(1 − d, 0)²`.
///
/// At `d = 0` the negative-pair gradient is taken as zero.
pub fn contrastive_loss<T: Scalar>(v: &Tensor<T>, a: &Tensor<T>, labels: &[u8]) -> Result<ContrastiveOutput<T>> {
    let distances = pair_distances(v, a)?;
    if labels.len() != distances.len() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            distances.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Domain(format!("label {bad} is not binary")));
    }
    let n = distances.len().max(1) as f64;
    let dim = v.sample_len();
    let mut loss = 0.0;
    let mut gv = vec![T::zero(); v.len()];
    for (b, (&d, &y)) in distances.iter().zip(labels).enumerate() {
        // coefficient on (v - a) in dL/dv
        let coef = if y == 1 {
            loss += d * d;
            2.0 / n
        } else {
            let h = (MARGIN - d).max(0.0);
            loss += h * h;
            if h > 0.0 && d > 0.0 {
                -2.0 * h / (d * n)
            } else {
                0.0
            }
        };
        if coef != 0.0 {
            let (vs, as_) = (v.sample(b), a.sample(b));
            for j in 0..dim {
                gv[b * dim + j] = T::from_f64_lossy(coef * (vs[j].as_f64() - as_[j].as_f64()));
            }
        }
    }
    let ga = gv.iter().map(|&g| -g).collect();
    Ok(ContrastiveOutput {
        loss: loss / n,
        distances,
        grad_v: Tensor::new(v.shape().to_vec(), gv)?,
        grad_a: Tensor::new(a.shape().to_vec(), ga)?,
    })
}
