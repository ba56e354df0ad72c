//! Data deletion: full retraining, incremental retraining, and a
//! group-influence parameter update driven by a conjugate-gradient
//! inverse-Hessian-vector-product solver.

use ndarray::Array4;

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::nn::{build_model, dataset_loss_grad, model_hvp, train, Model, TrainConfig, TrainHistory, SWEEP_BATCH};
use crate::tensor::{ParamSet, Scalar};

/// How to remove a set of training examples from a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DeletionMethod {
    /// Train a fresh network from scratch on the reduced dataset.
    FullRetrain,
    /// Continue training the existing weights on the reduced dataset with a
    /// restarted learning-rate schedule and optimizer state.
    Incremental,
    /// One closed-form parameter update from the group influence function.
    Influence,
}

impl DeletionMethod {
    pub const ALL: [DeletionMethod; 3] =
        [DeletionMethod::FullRetrain, DeletionMethod::Incremental, DeletionMethod::Influence];

    pub fn name(self) -> &'static str {
        match self {
            DeletionMethod::FullRetrain => "retrain",
            DeletionMethod::Incremental => "incremental",
            DeletionMethod::Influence => "influence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "retrain" | "full" => Ok(DeletionMethod::FullRetrain),
            "incremental" => Ok(DeletionMethod::Incremental),
            "influence" => Ok(DeletionMethod::Influence),
            other => Err(Error::Config(format!(
                "unknown deletion method `{other}` (expected retrain, incremental, or influence)"
            ))),
        }
    }
}

impl std::fmt::Display for DeletionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Conjugate-gradient settings for the damped inverse-HVP solve.
#[derive(Clone, Copy, Debug)]
pub struct CgConfig {
    /// Damping added to the Hessian so the system is positive definite.
    pub lambda: f64,
    /// Relative residual target: stop once `‖r‖ ≤ tol · ‖b‖`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { lambda: 0.01, tol: 1e-4, max_iters: 100 }
    }
}

/// What the CG solve actually did, kept alongside any influence result so a
/// non-converged solve is never silently reported as exact.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct IhvpReport {
    pub iterations: usize,
    /// Final relative residual `‖b - Ax‖ / ‖b‖`.
    pub residual: f64,
    /// Times the residual rose and the direction set was rebuilt.
    pub restarts: usize,
    pub converged: bool,
}

/// Solves `A x = b` for symmetric positive definite `A` given only
/// matrix-vector products.
///
/// Finite-difference Hessian products carry noise, so the solver watches the
/// recurrence residual: if it ever grows, the true residual is recomputed
/// from scratch and the direction set restarted. Repeated violations mean
/// the products are too noisy to polish further, and the solve stops with
/// `converged: false` rather than looping.
pub fn cg_solve<F: Scalar>(
    apply: &mut dyn FnMut(&ParamSet<F>) -> Result<ParamSet<F>>,
    b: &ParamSet<F>,
    cfg: &CgConfig,
) -> Result<(ParamSet<F>, IhvpReport)> {
    const MAX_RESTARTS: usize = 5;
    let b_norm = b.norm2();
    if b_norm == 0.0 {
        return Ok((
            b.zeros_like(),
            IhvpReport { iterations: 0, residual: 0.0, restarts: 0, converged: true },
        ));
    }
    let threshold = cfg.tol * b_norm;

    let mut x = b.zeros_like();
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut prev_res = b_norm;
    let mut iterations = 0usize;
    let mut restarts = 0usize;
    let mut converged = false;

    while iterations < cfg.max_iters {
        let ap = apply(&p)?;
        let pap = p.dot(&ap);
        if !pap.is_finite() || pap <= 0.0 {
            // lost positive definiteness (FD noise); stop with what we have
            break;
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        iterations += 1;

        let new_rr = r.dot(&r);
        let res = new_rr.sqrt();
        if res <= threshold {
            converged = true;
            prev_res = res;
            break;
        }
        if res > prev_res {
            restarts += 1;
            if restarts > MAX_RESTARTS {
                prev_res = res;
                break;
            }
            // recompute the exact residual and restart the direction set
            let ax = apply(&x)?;
            r = b.clone();
            r.axpy(-1.0, &ax);
            rr = r.dot(&r);
            prev_res = rr.sqrt();
            if prev_res <= threshold {
                converged = true;
                break;
            }
            p = r.clone();
            continue;
        }
        let beta = new_rr / rr;
        rr = new_rr;
        prev_res = res;
        // p = r + beta * p
        p.scale(beta);
        p.axpy(1.0, &r);
    }

    Ok((x, IhvpReport { iterations, residual: prev_res / b_norm, restarts, converged }))
}

/// The influence-function parameter update, generic over how Hessian
/// products and gradients are produced so convex reference problems exercise
/// exactly the same code path as real networks.
///
/// Computes `Δθ = (1/n) (H + λI)⁻¹ Σ_{i∈S} ∇L_i`: the first-order estimate
/// of how the empirical-risk minimizer moves when the examples in `S` leave
/// an `n`-example training set.
pub fn influence_step<F: Scalar>(
    hess_apply: &mut dyn FnMut(&ParamSet<F>) -> Result<ParamSet<F>>,
    deleted_grad_sum: &ParamSet<F>,
    n_train: usize,
    cfg: &CgConfig,
) -> Result<(ParamSet<F>, IhvpReport)> {
    if n_train == 0 {
        return Err(Error::Degenerate("influence step over an empty training set".into()));
    }
    let mut damped = |v: &ParamSet<F>| -> Result<ParamSet<F>> {
        let mut hv = hess_apply(v)?;
        hv.axpy(cfg.lambda, v);
        Ok(hv)
    };
    let (mut step, report) = cg_solve(&mut damped, deleted_grad_sum, cfg)?;
    step.scale(1.0 / n_train as f64);
    Ok((step, report))
}

/// Outcome of removing examples: the post-deletion model plus whatever the
/// method produced along the way.
pub struct DeletionOutcome<F: Scalar> {
    pub model: Model<F>,
    pub history: Option<TrainHistory>,
    pub ihvp: Option<IhvpReport>,
}

/// Copies a dataset without the listed (deduplicated) indices.
pub fn remove_indices(dataset: &ImageDataset, delete: &[usize]) -> Result<ImageDataset> {
    let mut drop = vec![false; dataset.len()];
    for &i in delete {
        if i >= dataset.len() {
            return Err(Error::Config(format!(
                "deletion index {i} out of range for {} examples",
                dataset.len()
            )));
        }
        drop[i] = true;
    }
    let keep: Vec<usize> = (0..dataset.len()).filter(|&i| !drop[i]).collect();
    if keep.is_empty() {
        return Err(Error::Degenerate("deleting every training example".into()));
    }
    let (images, labels) = dataset.gather(&keep);
    Ok(ImageDataset { name: dataset.name, split: dataset.split, images, labels })
}

/// Applies the group-influence update to a trained model: one damped
/// inverse-Hessian solve over the full training set, then a parameter step.
pub fn influence_delete<F: Scalar>(
    model: &Model<F>,
    train_set: &ImageDataset,
    delete: &[usize],
    cfg: &CgConfig,
) -> Result<DeletionOutcome<F>> {
    if delete.is_empty() {
        return Err(Error::Degenerate("no examples marked for deletion".into()));
    }
    let (del_images, del_labels): (Array4<f32>, Vec<u8>) = {
        for &i in delete {
            if i >= train_set.len() {
                return Err(Error::Config(format!(
                    "deletion index {i} out of range for {} examples",
                    train_set.len()
                )));
            }
        }
        train_set.gather(delete)
    };
    // dataset_loss_grad returns the mean gradient; the update needs the sum
    let (_, mut grad_sum) = dataset_loss_grad(model, &del_images, &del_labels, SWEEP_BATCH)?;
    grad_sum.scale(delete.len() as f64);

    let mut hess = |v: &ParamSet<F>| model_hvp(model, &train_set.images, &train_set.labels, v);
    let (step, report) = influence_step(&mut hess, &grad_sum, train_set.len(), &cfg.clone())?;

    let mut updated = model.clone();
    updated.params.axpy(1.0, &step);
    if !updated.params.all_finite() {
        return Err(Error::Numerical("influence update produced non-finite parameters".into()));
    }
    Ok(DeletionOutcome { model: updated, history: None, ihvp: Some(report) })
}

/// Trains a fresh network (same architecture and init seed) on the dataset
/// minus the deleted examples.
pub fn full_retrain<F: Scalar>(
    model: &Model<F>,
    train_set: &ImageDataset,
    delete: &[usize],
    test_set: Option<&ImageDataset>,
    cfg: &TrainConfig,
) -> Result<DeletionOutcome<F>> {
    let reduced = remove_indices(train_set, delete)?;
    let mut fresh = build_model::<F>(&model.spec, model.seed)?;
    let history = train(&mut fresh, &reduced, test_set, cfg)?;
    Ok(DeletionOutcome { model: fresh, history: Some(history), ihvp: None })
}

/// Continues training the existing weights on the reduced dataset; the
/// learning-rate schedule and optimizer state start over.
pub fn incremental_retrain<F: Scalar>(
    model: &Model<F>,
    train_set: &ImageDataset,
    delete: &[usize],
    test_set: Option<&ImageDataset>,
    cfg: &TrainConfig,
) -> Result<DeletionOutcome<F>> {
    let reduced = remove_indices(train_set, delete)?;
    let mut warm = model.clone();
    let history = train(&mut warm, &reduced, test_set, cfg)?;
    Ok(DeletionOutcome { model: warm, history: Some(history), ihvp: None })
}

/// Dispatches on the method; `train_cfg` is ignored by the influence update
/// and `cg_cfg` by the retraining variants.
pub fn apply_deletion<F: Scalar>(
    method: DeletionMethod,
    model: &Model<F>,
    train_set: &ImageDataset,
    delete: &[usize],
    test_set: Option<&ImageDataset>,
    train_cfg: &TrainConfig,
    cg_cfg: &CgConfig,
) -> Result<DeletionOutcome<F>> {
    match method {
        DeletionMethod::FullRetrain => full_retrain(model, train_set, delete, test_set, train_cfg),
        DeletionMethod::Incremental => {
            incremental_retrain(model, train_set, delete, test_set, train_cfg)
        }
        DeletionMethod::Influence => influence_delete(model, train_set, delete, cg_cfg),
    }
}
