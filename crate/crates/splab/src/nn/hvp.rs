//! Whole-dataset gradients and Hessian-vector products.
//!
//! The HVP uses a symmetric finite difference of gradients,
//! `(g(θ + hv) − g(θ − hv)) / 2h` with `h = 1e-3 / ‖v‖`, which is exact for
//! quadratic objectives and avoids a second backward graph.

use ndarray::Array4;

use crate::data::cast_batch;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{ParamSet, Scalar};

/// Batch size used when sweeping a full dataset for gradients or HVPs.
pub const SWEEP_BATCH: usize = 1000;

/// Mean loss and gradient over all `(images, labels)` rows, accumulated in
/// minibatches and weighted exactly by batch size.
pub fn dataset_loss_grad<F: Scalar>(
    model: &Model<F>,
    images: &Array4<f32>,
    labels: &[u8],
    batch_size: usize,
) -> Result<(f64, ParamSet<F>)> {
    let n = images.dim().0;
    if n == 0 || n != labels.len() {
        return Err(Error::Shape(format!("{n} images with {} labels", labels.len())));
    }
    let mut total_loss = 0.0f64;
    let mut total_grad = model.params.zeros_like();
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch = images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        let x = cast_batch::<F>(batch);
        let (loss, grad) = crate::nn::loss_grad(model, &x, &labels[start..end])?;
        let weight = (end - start) as f64 / n as f64;
        total_loss += loss * weight;
        total_grad.axpy(weight, &grad);
        start = end;
    }
    Ok((total_loss, total_grad))
}

/// Hessian-vector product of a gradient oracle via central differences.
pub fn hvp_fd<F: Scalar>(
    grad_at: &mut dyn FnMut(&ParamSet<F>) -> Result<ParamSet<F>>,
    theta: &ParamSet<F>,
    v: &ParamSet<F>,
) -> Result<ParamSet<F>> {
    let v_norm = v.norm2();
    if v_norm == 0.0 {
        return Ok(v.zeros_like());
    }
    let h = 1e-3 / v_norm;
    let mut plus = theta.clone();
    plus.axpy(h, v);
    let mut minus = theta.clone();
    minus.axpy(-h, v);
    let g_plus = grad_at(&plus)?;
    let mut out = grad_at(&minus)?;
    out.scale(-1.0);
    out.axpy(1.0, &g_plus);
    out.scale(1.0 / (2.0 * h));
    Ok(out)
}

/// HVP of the mean training loss over `(images, labels)` at the model's
/// current parameters.
pub fn model_hvp<F: Scalar>(
    model: &Model<F>,
    images: &Array4<f32>,
    labels: &[u8],
    v: &ParamSet<F>,
) -> Result<ParamSet<F>> {
    let mut probe = model.clone();
    let mut grad_at = |theta: &ParamSet<F>| -> Result<ParamSet<F>> {
        probe.params = theta.clone();
        Ok(dataset_loss_grad(&probe, images, labels, SWEEP_BATCH)?.1)
    };
    hvp_fd(&mut grad_at, &model.params, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn vec_param(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", ndarray::ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn fd_hvp_is_exact_on_a_quadratic() {
        // f(w) = 1/2 wᵀAw with A = [[2, 1], [1, 3]]; ∇f = Aw, H = A.
        let a = [[2.0, 1.0], [1.0, 3.0]];
        let mut grad = |w: &ParamSet<f64>| -> Result<ParamSet<f64>> {
            let ws = w.get("w").unwrap();
            Ok(vec_param(&[
                a[0][0] * ws[0] + a[0][1] * ws[1],
                a[1][0] * ws[0] + a[1][1] * ws[1],
            ]))
        };
        let theta = vec_param(&[0.3, -0.7]);
        let v = vec_param(&[1.0, 2.0]);
        let hv = hvp_fd(&mut grad, &theta, &v).unwrap();
        let got = hv.get("w").unwrap();
        assert!((got[0] - 4.0).abs() < 1e-9, "{}", got[0]); // 2*1 + 1*2
        assert!((got[1] - 7.0).abs() < 1e-9, "{}", got[1]); // 1*1 + 3*2
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let mut grad = |_: &ParamSet<f64>| -> Result<ParamSet<f64>> { panic!("must not be called") };
        let theta = vec_param(&[1.0]);
        let hv = hvp_fd(&mut grad, &theta, &vec_param(&[0.0])).unwrap();
        assert_eq!(hv.get("w").unwrap()[0], 0.0);
    }
}
