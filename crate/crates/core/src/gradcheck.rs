//! End-to-end gradient verification: for every parameter family, the
//! backward pass is compared against central finite differences of the full
//! batched objective. Restricted to tiny configurations (the finite-
//! difference pass is O(params * batch forwards)) and always run with
//! dropout disabled so the objective is a deterministic function of the
//! parameters.

use crate::autodiff::{finite_diff_grad, grad_rel_err, scalar_value, ArrayRef, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig};
use crate::moe::{Model, PredictorKind};
use crate::synth::{generate, Dataset, Split, TaskSpec};
use crate::train::forward_batch;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FamilyCheck {
    pub family: String,
    /// Max relative error over the family's tensors (inf-norm scaled).
    pub rel_err: f64,
    pub pass: bool,
    pub tensors: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub families: Vec<FamilyCheck>,
    /// Always true: the check refuses to run with dropout active.
    pub dropout_disabled: bool,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.families.iter().all(|f| f.pass)
    }
}

/// Tensor name -> family label.
fn family_of(name: &str) -> String {
    if name.starts_with("expert.") {
        "experts".to_string()
    } else if name.starts_with("gate.") {
        // keep the two gates separate: gate.0, gate.1
        name.rsplit_once('.').map(|(g, _)| g.to_string()).unwrap()
    } else if name.starts_with("tag.") {
        "tags".to_string()
    } else if name.starts_with("in_proj.") {
        "in_proj".to_string()
    } else if name.starts_with("out_proj.") {
        "out_proj".to_string()
    } else if name.starts_with("adapter.") {
        "adapter".to_string()
    } else if name.starts_with("mlp.") {
        "mlp".to_string()
    } else if name.starts_with("linear.") {
        "linear".to_string()
    } else {
        name.to_string()
    }
}

/// Batched objective summed over every task, so all projection families
/// participate in one scalar.
fn objective(
    model: &Model,
    ds: &Dataset,
    tasks: &[TaskSpec],
    batch: &[usize],
    loss_cfg: &LossConfig,
    tape: &Tape,
) -> Result<ArrayRef> {
    let mut grand: Option<ArrayRef> = None;
    for task in tasks {
        let (pa, pb, tgt) = forward_batch(model, ds, task, batch, tape, 0, false)?;
        let (total, _) = total_loss(tape, &pa, &pb, &tgt, loss_cfg)?;
        grand = Some(match grand {
            None => total,
            Some(g) => tape.add(&g, &total)?,
        });
    }
    Ok(grand.expect("task list is non-empty"))
}

/// Relative error between the tape gradient of `param` and central finite
/// differences of the objective. Mutates and restores `param`'s data.
pub fn check_tensor(
    param: &ArrayRef,
    analytic: &[f64],
    mut loss_at: impl FnMut() -> Result<f64>,
    eps: f64,
) -> Result<f64> {
    let base = param.borrow().data.clone();
    let numeric = finite_diff_grad(
        |p| {
            param.borrow_mut().data = p.to_vec();
            loss_at()
        },
        &base,
        eps,
    );
    param.borrow_mut().data = base;
    Ok(grad_rel_err(analytic, &numeric?))
}

fn check_model(
    model: &Model,
    ds: &Dataset,
    tasks: &[TaskSpec],
    batch: &[usize],
    loss_cfg: &LossConfig,
) -> Result<Vec<FamilyCheck>> {
    // analytic pass
    model.zero_grads();
    let tape = Tape::new();
    let total = objective(model, ds, tasks, batch, loss_cfg, &tape)?;
    tape.backward(&total)?;
    let grads: Vec<(String, ArrayRef, Vec<f64>)> = model
        .named_params()
        .into_iter()
        .map(|(n, p)| {
            let g = p.borrow().grad.clone();
            (n, p, g)
        })
        .collect();

    let mut families: std::collections::BTreeMap<String, FamilyCheck> =
        std::collections::BTreeMap::new();
    for (name, param, analytic) in grads {
        let rel = check_tensor(
            &param,
            &analytic,
            || {
                let tape = Tape::no_grad();
                let total = objective(model, ds, tasks, batch, loss_cfg, &tape)?;
                Ok(scalar_value(&total))
            },
            GRADCHECK_EPS,
        )?;
        let fam = family_of(&name);
        let entry = families.entry(fam.clone()).or_insert(FamilyCheck {
            family: fam,
            rel_err: 0.0,
            pass: true,
            tensors: 0,
        });
        entry.tensors += 1;
        if rel > entry.rel_err {
            entry.rel_err = rel;
        }
        entry.pass = entry.rel_err < GRADCHECK_TOLERANCE;
    }
    Ok(families.into_values().collect())
}

/// Full gradient check on a tiny run config: the MoE model (all families,
/// including adapters) plus the parameter-matched MLP baseline's core.
pub fn gradcheck(run: &RunConfig) -> Result<GradcheckReport> {
    let registry = run.validate()?;
    if run.moe.hidden > 8 || run.moe.experts_per_modality > 2 {
        return Err(Error::config(format!(
            "gradient check requires a tiny config (hidden <= 8, experts_per_modality <= 2); \
             got hidden={} experts={}",
            run.moe.hidden, run.moe.experts_per_modality
        )));
    }
    let mut moe_cfg = run.moe.clone();
    moe_cfg.dropout_p = 0.0;
    let (ds, _) = generate(&run.synth, &registry)?;
    let batch_size = run.train.batch_size.min(4).max(2);
    let batch: Vec<usize> = ds.split_range(Split::Train).take(batch_size).collect();
    let loss_cfg = run.loss.clone();

    let moe = Model::init(
        PredictorKind::Moe,
        &moe_cfg,
        &registry,
        &run.tasks,
        &run.adapter_modalities,
        run.train.seed,
    )?;
    let mut families = check_model(&moe, &ds, &run.tasks, &batch, &loss_cfg)?;

    let mlp = Model::init(
        PredictorKind::Mlp,
        &moe_cfg,
        &registry,
        &run.tasks,
        &[],
        run.train.seed,
    )?;
    let mlp_families = check_model(&mlp, &ds, &run.tasks, &batch, &loss_cfg)?;
    families.extend(mlp_families.into_iter().filter(|f| f.family == "mlp"));

    Ok(GradcheckReport {
        families,
        dropout_disabled: true,
    })
}
