//! Training-loop orchestration: wires models, optimizers, the sparsity
//! controller, and metrics into seeded, reproducible runs.
//!
//! Per training step: sample the next mini-batch, compute the batch loss and
//! gradient, apply the optimizer update (prox included), measure sparsity,
//! then let the controller react. The logged `loss` column is the mini-batch
//! objective at the parameters the step started from; the step-0 row logs
//! the full training-split loss at initialization.
//!
//! Determinism: every random choice (validation split, parameter init,
//! sparse init, per-epoch shuffles) derives from the run seed through
//! fixed salts, and all reductions run in index order, so equal configs
//! produce byte-identical logs.

mod config;
mod runlog;

pub use config::{apply_override, DataSpec, LrDecay, OptimizerKind, RunConfig};
pub use runlog::{
    CsvSink, JsonLinesSink, LogSink, RunLog, RunSummary, StepRow, CSV_HEADER,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::controller::{sparsity_defect, within_tolerance, ControllerState};
use crate::error::{Error, Result};
use crate::metrics::{frobenius_norm, layerwise_report, lemma1_check, Lemma1Record};
use crate::models::{self, LossKind, ModelKind};
use crate::optim::{
    adabreg_step, adamw_step, linbreg_step, magnitude_prune, sgd_step, sparse_init, AdaBregState,
    AdamWState, LinBregState, ProxLayout, PruneState, SgdState, TrainCheckpoint,
};
use crate::param_store::{Mask, ParamStore, Scope};

/// Abort when the parameter norm passes this bound.
const DIVERGENCE_NORM_CAP: f64 = 1e12;
/// Momentum and decoupled weight decay used by the dense baselines.
const DENSE_MOMENTUM: f64 = 0.9;
const DENSE_WEIGHT_DECAY: f64 = 1e-4;

// Salts separating the independent random streams drawn from one run seed.
const SALT_SPLIT: u64 = 0xc2b2_ae3d_27d4_eb4f;
const SALT_INIT: u64 = 0x9e37_79b9_7f4a_7c15;
const SALT_SPARSE: u64 = 0x1656_67b1_9e37_79f9;
const SALT_SHUFFLE: u64 = 0x2545_f491_4f6c_dd1d;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Deterministic train/validation split: shuffle the row indices with a
/// seed-derived stream and hold out the last tenth (at least one row, and
/// at most n-1 so training is never empty).
pub fn train_val_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_SPLIT));
    idx.shuffle(&mut rng);
    let n_val = (n / 10).max(1).min(n.saturating_sub(1));
    let cut = n - n_val;
    (idx[..cut].to_vec(), idx[cut..].to_vec())
}

/// Mini-batch order for one epoch: the training indices shuffled by a stream
/// derived from (run seed, epoch). Public so optimizer-level reference loops
/// can replay exactly the batches a run saw.
pub fn epoch_order(train_idx: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train_idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        SALT_SHUFFLE.wrapping_add(epoch as u64),
    ));
    order.shuffle(&mut rng);
    order
}

/// Live optimizer state for one run. Bregman drivers carry a second, dense
/// optimizer for the excluded parameters, which bypass the prox entirely.
enum OptDriver {
    LinBreg { breg: LinBregState, dense: SgdState },
    AdaBreg { breg: AdaBregState, dense: AdamWState },
    Sgd(SgdState),
    AdamW(AdamWState),
    Prune { sgd: SgdState, prune: PruneState, flat_mask: Vec<bool> },
}

impl OptDriver {
    fn current_tau(&self) -> f64 {
        match self {
            OptDriver::LinBreg { breg, .. } => breg.tau,
            OptDriver::AdaBreg { breg, .. } => breg.tau,
            OptDriver::Sgd(s) => s.lr,
            OptDriver::AdamW(s) => s.lr,
            OptDriver::Prune { sgd, .. } => sgd.lr,
        }
    }

    fn scale_step_size(&mut self, factor: f64) {
        match self {
            OptDriver::LinBreg { breg, dense } => {
                breg.tau *= factor;
                dense.lr *= factor;
            }
            OptDriver::AdaBreg { breg, dense } => {
                breg.tau *= factor;
                dense.set_lr(dense.lr * factor);
            }
            OptDriver::Sgd(s) => s.lr *= factor,
            OptDriver::AdamW(s) => {
                let lr = s.lr;
                s.set_lr(lr * factor);
            }
            OptDriver::Prune { sgd, .. } => sgd.lr *= factor,
        }
    }
}

fn flatten_mask(mask: &Mask) -> Vec<bool> {
    mask.lanes().iter().flat_map(|lane| lane.iter().copied()).collect()
}

/// Pending descent-inequality record waiting for the next step's loss.
struct PendingRecord {
    k: u64,
    prev_loss: f64,
    theta_prev: Vec<f64>,
    theta_next: Vec<f64>,
    tau: f64,
    lam_k: f64,
    lam_km1: f64,
}

/// Train per the configured optimizer and return the complete log.
pub fn train(cfg: &RunConfig) -> Result<RunLog> {
    run_loop(cfg, None)
}

/// Like `train`, streaming every row into `sink` as it is produced.
pub fn train_with_sink(cfg: &RunConfig, sink: &mut dyn LogSink) -> Result<RunLog> {
    run_loop(cfg, Some(sink))
}

/// Magnitude-pruning entry point; requires `optimizer = prune`.
pub fn prune_train(cfg: &RunConfig) -> Result<RunLog> {
    if cfg.optimizer != OptimizerKind::Prune {
        return Err(Error::InvalidConfig(format!(
            "prune_train needs optimizer = prune, got {:?}",
            cfg.optimizer
        )));
    }
    run_loop(cfg, None)
}

/// Run `train` once per value of the swept key, with seeds derived from the
/// base seed so runs stay distinct but reproducible. Values are parsed
/// exactly like `key=value` overrides. Runs execute in parallel; results
/// come back in value order and the first failure aborts the sweep.
pub fn sweep(base: &RunConfig, axis: &str, values: &[String]) -> Result<Vec<(RunConfig, RunLog)>> {
    let mut configs = Vec::with_capacity(values.len());
    for (i, raw) in values.iter().enumerate() {
        let mut cfg = base.with_override(axis, raw)?;
        cfg.seed = base.seed.wrapping_add(i as u64);
        cfg.validate()?;
        configs.push(cfg);
    }
    configs.par_iter().map(|cfg| train(cfg).map(|log| (cfg.clone(), log))).collect()
}

fn run_loop(cfg: &RunConfig, mut sink: Option<&mut dyn LogSink>) -> Result<RunLog> {
    cfg.validate()?;
    let (data, _truth) = cfg.data.materialize()?;
    let (train_idx, val_idx) = train_val_split(data.n(), cfg.seed);

    let mut store = cfg.model.init_params(derive_seed(cfg.seed, SALT_INIT))?;
    if cfg.classifier_lambda_scale != 1.0 {
        for t in store.tensors_mut() {
            if t.regularized() && t.name().starts_with("classifier") {
                t.set_lambda_scale(cfg.classifier_lambda_scale)?;
            }
        }
    }

    let bregman = cfg.optimizer.is_bregman();
    let lambda0 = cfg.resolve_lambda0();
    let tau = cfg.resolve_tau();

    // Initial point: Bregman runs may sparsify the init and always need the
    // matching dual; the dense paths keep the raw init.
    let p0 = if bregman {
        sparse_init(&mut store, cfg.s_init, lambda0, derive_seed(cfg.seed, SALT_SPARSE))?
    } else {
        Vec::new()
    };
    let layout = ProxLayout::from_store(&store);
    let n_excluded = store.d_total() - store.d_reg();

    let mut driver = match cfg.optimizer {
        OptimizerKind::LinBreg => OptDriver::LinBreg {
            breg: LinBregState::new(p0, tau)?,
            dense: SgdState::new(n_excluded, tau, DENSE_MOMENTUM, 0.0, true)?,
        },
        OptimizerKind::AdaBreg => OptDriver::AdaBreg {
            breg: AdaBregState::new(p0, tau)?,
            dense: AdamWState::new(n_excluded, tau, 0.0)?,
        },
        OptimizerKind::Sgd => OptDriver::Sgd(SgdState::new(
            store.d_total(),
            tau,
            DENSE_MOMENTUM,
            DENSE_WEIGHT_DECAY,
            true,
        )?),
        OptimizerKind::AdamW => {
            OptDriver::AdamW(AdamWState::new(store.d_total(), tau, DENSE_WEIGHT_DECAY)?)
        }
        OptimizerKind::Prune => {
            let target = cfg.target_sparsity.expect("validated");
            let prune = PruneState::new(&store, target, cfg.prune_schedule_epochs)?;
            let flat_mask = flatten_mask(&prune.mask);
            OptDriver::Prune {
                sgd: SgdState::new(
                    store.d_total(),
                    tau,
                    DENSE_MOMENTUM,
                    DENSE_WEIGHT_DECAY,
                    true,
                )?,
                prune,
                flat_mask,
            }
        }
    };

    // The controller exists for every Bregman run that names a target, even
    // with adaptation off, so the defect still gets measured and logged.
    let mut ctl: Option<ControllerState> = match (bregman, cfg.target_sparsity) {
        (true, Some(target)) => {
            Some(ControllerState::new(&cfg.controller, lambda0, target, cfg.adaptive)?)
        }
        _ => None,
    };

    // Descent monitor: only sound where the smoothness constant is exact,
    // which is the full-batch quadratic trained with plain Bregman steps.
    let monitor_active = cfg.optimizer == OptimizerKind::LinBreg
        && cfg.model.kind == ModelKind::Linear
        && cfg.model.loss == LossKind::SquaredError
        && cfg.batch_size >= train_idx.len();
    let l_smooth = if monitor_active {
        let sub = data.subset(&train_idx)?;
        models::lipschitz_constant_quadratic(sub.features(), sub.n(), sub.d(), sub.n())?
    } else {
        0.0
    };
    let mut lemma_records: Vec<Lemma1Record> = Vec::new();
    let mut pending: Option<PendingRecord> = None;
    let mut lam_prev = lambda0;

    let mut rows: Vec<StepRow> = Vec::new();
    let mut epoch_reports = Vec::new();
    let mut steps_to_tolerance: Option<u64> = None;

    let eval_accs = |store: &ParamStore| -> Result<(f64, f64)> {
        let tr = models::accuracy(&cfg.model, store, &data, &train_idx)?;
        let va = if val_idx.is_empty() {
            0.0
        } else {
            models::accuracy(&cfg.model, store, &data, &val_idx)?
        };
        Ok((tr, va))
    };

    // Initialization row.
    {
        let init_loss = models::loss_and_grad(&cfg.model, &store, &data, &train_idx)?.0;
        let (train_acc, val_acc) = eval_accs(&store)?;
        let s_reg = store.sparsity(Scope::RegularizedOnly)?;
        let s_all = store.sparsity(Scope::All)?;
        if let (Some(target), None) = (cfg.target_sparsity, steps_to_tolerance) {
            if within_tolerance(s_reg, target, cfg.controller.zeta) {
                steps_to_tolerance = Some(0);
            }
        }
        let (lambda, eps, f, alpha) = match &ctl {
            Some(c) => (c.lambda, sparsity_defect(c.target, s_reg), c.f, c.alpha),
            None => (if bregman { lambda0 } else { 0.0 }, 0.0, 0, 0.0),
        };
        let row = StepRow {
            step: 0,
            epoch: 0,
            loss: init_loss,
            train_acc,
            val_acc,
            sparsity_reg: s_reg,
            sparsity_all: s_all,
            lambda,
            eps,
            f,
            alpha,
            frob_norm: frobenius_norm(&store, Scope::All),
        };
        if let Some(s) = sink.as_deref_mut() {
            s.record(&row)?;
        }
        rows.push(row);
    }

    let mut step: u64 = 0;
    let mut best_epoch_loss = f64::INFINITY;
    let mut bad_epochs: usize = 0;

    for epoch in 0..cfg.epochs {
        // Pruning updates its mask at the epoch boundary, before training.
        if let OptDriver::Prune { prune, flat_mask, .. } = &mut driver {
            if cfg.prune_single_shot {
                if epoch == 0 {
                    let fresh =
                        magnitude_prune(&store, cfg.target_sparsity.expect("validated"))?;
                    prune.mask = prune.mask.and(&fresh)?;
                }
            } else {
                prune.advance(&store, epoch)?;
            }
            store.apply_mask(&prune.mask)?;
            *flat_mask = flatten_mask(&prune.mask);
        }

        let order = epoch_order(&train_idx, cfg.seed, epoch);

        let mut epoch_loss_sum = 0.0;
        let mut steps_in_epoch = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let (loss, grad_all) = models::loss_and_grad(&cfg.model, &store, &data, batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            epoch_loss_sum += loss;
            steps_in_epoch += 1;

            let lambda_step = match &ctl {
                Some(c) => c.lambda,
                None => {
                    if bregman {
                        cfg.fixed_lambda.unwrap_or(lambda0)
                    } else {
                        0.0
                    }
                }
            };

            let theta_before = if monitor_active { store.flat(Scope::All) } else { Vec::new() };

            match &mut driver {
                OptDriver::LinBreg { breg, dense } => {
                    let (g_reg, g_exc) = store.split_all_aligned(&grad_all)?;
                    let theta_reg =
                        linbreg_step(breg, &g_reg, &layout, lambda_step, cfg.variant)?;
                    store.set_flat(Scope::RegularizedOnly, &theta_reg)?;
                    if n_excluded > 0 {
                        let mut th = store.excluded_flat();
                        sgd_step(dense, &mut th, &g_exc)?;
                        store.set_excluded_flat(&th)?;
                    }
                }
                OptDriver::AdaBreg { breg, dense } => {
                    let (g_reg, g_exc) = store.split_all_aligned(&grad_all)?;
                    let theta_reg =
                        adabreg_step(breg, &g_reg, &layout, lambda_step, cfg.variant)?;
                    store.set_flat(Scope::RegularizedOnly, &theta_reg)?;
                    if n_excluded > 0 {
                        let mut th = store.excluded_flat();
                        adamw_step(dense, &mut th, &g_exc)?;
                        store.set_excluded_flat(&th)?;
                    }
                }
                OptDriver::Sgd(sgd) => {
                    let mut th = store.flat(Scope::All);
                    sgd_step(sgd, &mut th, &grad_all)?;
                    store.set_flat(Scope::All, &th)?;
                }
                OptDriver::AdamW(adamw) => {
                    let mut th = store.flat(Scope::All);
                    adamw_step(adamw, &mut th, &grad_all)?;
                    store.set_flat(Scope::All, &th)?;
                }
                OptDriver::Prune { sgd, prune, flat_mask } => {
                    // Masked weights receive zero updates: their gradient
                    // entries are dropped and the mask is re-applied so
                    // weight decay cannot resurrect them either.
                    let mut g = grad_all.clone();
                    for (gi, keep) in g.iter_mut().zip(flat_mask.iter()) {
                        if !keep {
                            *gi = 0.0;
                        }
                    }
                    let mut th = store.flat(Scope::All);
                    sgd_step(sgd, &mut th, &g)?;
                    store.set_flat(Scope::All, &th)?;
                    store.apply_mask(&prune.mask)?;
                }
            }

            let frob = frobenius_norm(&store, Scope::All);
            if !frob.is_finite() || frob > DIVERGENCE_NORM_CAP {
                return Err(Error::Diverged { step });
            }
            let s_reg = store.sparsity(Scope::RegularizedOnly)?;
            let s_all = store.sparsity(Scope::All)?;

            if monitor_active {
                if let Some(pd) = pending.take() {
                    lemma_records.push(lemma1_check(
                        pd.k,
                        pd.prev_loss,
                        loss,
                        &pd.theta_prev,
                        &pd.theta_next,
                        pd.tau,
                        l_smooth,
                        pd.lam_k,
                        pd.lam_km1,
                    )?);
                }
                pending = Some(PendingRecord {
                    k: step,
                    prev_loss: loss,
                    theta_prev: theta_before,
                    theta_next: store.flat(Scope::All),
                    tau: driver.current_tau(),
                    lam_k: lambda_step,
                    lam_km1: lam_prev,
                });
                lam_prev = lambda_step;
            }

            let (lambda_logged, eps_logged, f_logged, alpha_logged) = match &mut ctl {
                Some(c) => {
                    let ev = c.controller_step(s_reg, step - 1, cfg.variant);
                    if let Some((old, new)) = ev.correction {
                        let theta_reg = store.flat(Scope::RegularizedOnly);
                        match &mut driver {
                            OptDriver::LinBreg { breg, .. } => {
                                layout.correct_dual(&mut breg.p, &theta_reg, old, new)?
                            }
                            OptDriver::AdaBreg { breg, .. } => {
                                layout.correct_dual(&mut breg.p, &theta_reg, old, new)?
                            }
                            _ => {}
                        }
                    }
                    (ev.lambda_before, ev.eps, ev.f_used, ev.alpha_used)
                }
                None => (lambda_step, 0.0, 0, 0.0),
            };

            if let (Some(target), None) = (cfg.target_sparsity, steps_to_tolerance) {
                if within_tolerance(s_reg, target, cfg.controller.zeta) {
                    steps_to_tolerance = Some(step);
                }
            }

            let (train_acc, val_acc) = eval_accs(&store)?;
            let row = StepRow {
                step,
                epoch: epoch as u64,
                loss,
                train_acc,
                val_acc,
                sparsity_reg: s_reg,
                sparsity_all: s_all,
                lambda: lambda_logged,
                eps: eps_logged,
                f: f_logged,
                alpha: alpha_logged,
                frob_norm: frob,
            };
            if let Some(s) = sink.as_deref_mut() {
                s.record(&row)?;
            }
            rows.push(row);
        }

        epoch_reports.push(layerwise_report(&store, step)?);

        match cfg.lr_decay {
            LrDecay::None => {}
            LrDecay::Plateau { factor, patience } => {
                let mean = epoch_loss_sum / steps_in_epoch.max(1) as f64;
                if mean < best_epoch_loss {
                    best_epoch_loss = mean;
                    bad_epochs = 0;
                } else {
                    bad_epochs += 1;
                    if bad_epochs > patience {
                        driver.scale_step_size(factor);
                        bad_epochs = 0;
                    }
                }
            }
            LrDecay::PerEpochExp { rate } => driver.scale_step_size(rate),
        }
    }

    // Close the last descent record with a final full-batch loss.
    if monitor_active {
        if let Some(pd) = pending.take() {
            let final_loss = models::loss_and_grad(&cfg.model, &store, &data, &train_idx)?.0;
            lemma_records.push(lemma1_check(
                pd.k,
                pd.prev_loss,
                final_loss,
                &pd.theta_prev,
                &pd.theta_next,
                pd.tau,
                l_smooth,
                pd.lam_k,
                pd.lam_km1,
            )?);
        }
    }

    if let Some(s) = sink.as_deref_mut() {
        s.finish()?;
    }

    let lambda_final = match &ctl {
        Some(c) => c.lambda,
        None => {
            if bregman {
                cfg.fixed_lambda.unwrap_or(lambda0)
            } else {
                0.0
            }
        }
    };
    let last = rows.last().expect("at least the init row exists");
    let summary = RunSummary {
        reached_target: cfg
            .target_sparsity
            .map(|t| within_tolerance(last.sparsity_reg, t, cfg.controller.zeta)),
        steps_to_tolerance,
        final_loss: last.loss,
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        best_val_acc: rows.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max),
        final_sparsity_reg: last.sparsity_reg,
        final_sparsity_all: last.sparsity_all,
        lambda_final,
        final_tau: driver.current_tau(),
        violations_lemma1: if monitor_active {
            Some(lemma_records.iter().filter(|r| r.violation).count() as u64)
        } else {
            None
        },
    };

    let checkpoint = TrainCheckpoint {
        store: store.clone(),
        lambda: lambda_final,
        p: match &driver {
            OptDriver::LinBreg { breg, .. } => breg.p.clone(),
            OptDriver::AdaBreg { breg, .. } => breg.p.clone(),
            _ => Vec::new(),
        },
        moments: match &driver {
            OptDriver::AdaBreg { breg, .. } => {
                Some((breg.m.clone(), breg.v.clone(), breg.t))
            }
            _ => None,
        },
    };

    let log = RunLog { rows, epoch_reports, lemma1: lemma_records, summary, checkpoint };
    log.check_rows()?;
    Ok(log)
}
