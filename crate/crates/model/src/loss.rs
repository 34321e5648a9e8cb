//! Differentiable CCC objective.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Same guard as the scalar metric.
pub const DENOMINATOR_GUARD: f64 = ser_core::metrics::CCC_DENOMINATOR_GUARD;

/// Column-wise CCC of `(batch, dims)` predictions against targets, with
/// population statistics. Returns a `(dims,)` tensor.
pub fn ccc_columns(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let (b, _) = pred.dims2()?;
    if b < 2 {
        return Err(Error::invalid(format!("CCC needs at least 2 items, got {b}")));
    }
    let mu_p = pred.mean_keepdim(0)?;
    let mu_t = target.mean_keepdim(0)?;
    let dp = pred.broadcast_sub(&mu_p)?;
    let dt = target.broadcast_sub(&mu_t)?;
    let cov = (&dp * &dt)?.mean(0)?;
    let var_p = dp.sqr()?.mean(0)?;
    let var_t = dt.sqr()?.mean(0)?;
    let bias = (mu_p - mu_t)?.sqr()?.squeeze(0)?;
    let den = ((var_p + var_t)? + bias)?.maximum(DENOMINATOR_GUARD)?;
    Ok(((cov * 2.0)? / den)?)
}

/// `1 - mean CCC` over the columns, as a scalar tensor.
pub fn ccc_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((1.0 - ccc_columns(pred, target)?.mean(D::Minus1)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap().unsqueeze(1).unwrap()
    }

    #[test]
    fn matches_scalar_metric() {
        let c = ccc_columns(&col(&[1.0, 2.0, 4.0]), &col(&[1.0, 2.0, 3.0])).unwrap();
        let v = c.to_vec1::<f64>().unwrap()[0];
        assert!((v - 6.0 / 7.0).abs() < 1e-12);
        let c = ccc_columns(&col(&[0.5, 0.5]), &col(&[0.0, 1.0])).unwrap();
        assert_eq!(c.to_vec1::<f64>().unwrap()[0], 0.0);
        let c = ccc_columns(&col(&[0.3, 0.3]), &col(&[0.3, 0.3])).unwrap();
        assert_eq!(c.to_vec1::<f64>().unwrap()[0], 0.0);
    }

    #[test]
    fn loss_averages_columns() {
        let t = Tensor::new(&[[1.0f64, 1.0, 0.0], [2.0, 2.0, 1.0], [3.0, 3.0, 2.0]], &Device::Cpu).unwrap();
        let p = Tensor::new(&[[1.0f64, 1.0, 0.0], [2.0, 2.0, 1.0], [3.0, 4.0, 2.0]], &Device::Cpu).unwrap();
        let l = ccc_loss(&p, &t).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_single_items() {
        assert!(ccc_loss(&col(&[1.0]), &col(&[1.0])).is_err());
    }
}
