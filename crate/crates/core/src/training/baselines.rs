use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::distill::teacher_metrics;
use super::{
    check_finite, evaluate_train, push_epoch, save_last_good, task_loss, RunReport, TrainConfig, TrainData,
};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::{Linear, TapModel};
use crate::tensor::{HasParams, Optimizer, Tape, Tensor, Var};

/// Unweighted mean of the teachers' outputs for a batch, `[B, out]`.
pub fn soft_target(teachers: &[TapModel], batch: &Batch) -> Result<Tensor> {
    let first = teachers
        .first()
        .ok_or_else(|| Error::Config("soft target needs at least one teacher".into()))?;
    let width = first.spec().output_dim;
    let mut sum = vec![0.0; batch.len() * width];
    for t in teachers {
        if t.spec().output_dim != width {
            return Err(output_space_error(first, t));
        }
        for (s, p) in sum.iter_mut().zip(t.predict(batch)?) {
            *s += p;
        }
    }
    let n = teachers.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Tensor::new(vec![batch.len(), width], sum)
}

fn output_space_error(a: &TapModel, b: &TapModel) -> Error {
    Error::Config(format!(
        "output spaces differ: `{}` has {} outputs, `{}` has {}; logit distillation is undefined (NA) for this pair",
        a.name(),
        a.spec().output_dim,
        b.name(),
        b.spec().output_dim
    ))
}

/// Logit distillation from one teacher: task loss plus `α·mse(student, teacher)`.
pub fn baseline_ld(
    student: TapModel,
    teacher: &TapModel,
    alpha: f64,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(TapModel, RunReport)> {
    train_soft(student, std::slice::from_ref(teacher), alpha, data, cfg, "ld")
}

/// Multi-teacher distillation towards the averaged teacher outputs.
pub fn baseline_mt(
    student: TapModel,
    teachers: &[TapModel],
    alpha: f64,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(TapModel, RunReport)> {
    train_soft(student, teachers, alpha, data, cfg, "mt")
}

fn train_soft(
    mut student: TapModel,
    teachers: &[TapModel],
    alpha: f64,
    data: &TrainData,
    cfg: &TrainConfig,
    method: &str,
) -> Result<(TapModel, RunReport)> {
    cfg.validate()?;
    data.require_train()?;
    check_alpha(alpha)?;
    for t in teachers {
        if t.spec().output_dim != student.spec().output_dim {
            return Err(output_space_error(&student, t));
        }
    }
    let started = Instant::now();
    let mut report = RunReport::new(method, names(teachers), cfg.seed);
    report.alpha = Some(alpha);
    report.initial_train_loss = evaluate_train(&student, data)?;
    student.set_frozen(false);
    let mut opt = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_good = student.clone();
    for epoch in 1..=cfg.epochs {
        let batches = data.epoch_batches(cfg.batch_size, &mut rng);
        let (mut task_sum, mut soft_sum) = (0.0, 0.0);
        for (step, idx) in batches.iter().enumerate() {
            let batch = data.batch(idx);
            let target = soft_target(teachers, &batch)?;
            let mut tape = Tape::new();
            let out = student.forward(&mut tape, &batch)?;
            let task = task_loss(&mut tape, &student, out.prediction, &batch)?;
            let t = tape.constant(target);
            let soft = tape.mse_loss(out.prediction, t)?;
            let total = weighted(&mut tape, task, soft, alpha)?;
            let (task_v, soft_v) = (tape.value(task).item(), tape.value(soft).item());
            if let Err(e) = check_finite(tape.value(total).item(), method, epoch, step) {
                save_last_good(cfg, &last_good, data);
                return Err(e);
            }
            if epoch == 1 && step == 0 {
                report.initial_distill_loss = Some(soft_v);
            }
            let grads = tape.backward(total)?;
            student.zero_grad();
            student.accumulate(&grads);
            opt.step(&mut student.params_mut());
            student.zero_grad();
            task_sum += task_v;
            soft_sum += soft_v;
            report.distill_steps += 1;
            report.teacher_passes.invoked += teachers.len() as u64;
        }
        let steps = batches.len() as f64;
        push_epoch(&mut report, &student, data, epoch, task_sum / steps, Some(soft_sum / steps))?;
        last_good = student.clone();
    }
    finish(&mut report, &student, teachers, data, started)?;
    Ok((student, report))
}

/// Feature distillation with a freshly initialised projection per teacher.
pub fn baseline_fd(
    student: TapModel,
    teachers: &[TapModel],
    alpha: f64,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(TapModel, RunReport)> {
    let d_student = tap_width(&student);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfd00_0000_0000_0001);
    let projections = teachers
        .iter()
        .enumerate()
        .map(|(i, t)| Linear::he_uniform(&format!("fd.proj{i}"), tap_width(t), d_student, &mut rng))
        .collect();
    baseline_fd_with(student, teachers, projections, alpha, data, cfg)
}

fn tap_width(m: &TapModel) -> usize {
    m.width(m.tap_out()).expect("tap_out exists")
}

/// Feature distillation with caller-supplied projections (one per teacher),
/// trained jointly with the student.
pub fn baseline_fd_with(
    mut student: TapModel,
    teachers: &[TapModel],
    mut projections: Vec<Linear>,
    alpha: f64,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(TapModel, RunReport)> {
    cfg.validate()?;
    data.require_train()?;
    check_alpha(alpha)?;
    if teachers.is_empty() || projections.len() != teachers.len() {
        return Err(Error::Config(format!(
            "{} projections for {} teachers",
            projections.len(),
            teachers.len()
        )));
    }
    let started = Instant::now();
    let mut report = RunReport::new("fd", names(teachers), cfg.seed);
    report.alpha = Some(alpha);
    report.initial_train_loss = evaluate_train(&student, data)?;
    student.set_frozen(false);
    for p in &mut projections {
        p.set_frozen(false);
    }
    let mut opt = cfg.adam();
    let mut proj_opt = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last_good = student.clone();
    for epoch in 1..=cfg.epochs {
        let batches = data.epoch_batches(cfg.batch_size, &mut rng);
        let (mut task_sum, mut hint_sum) = (0.0, 0.0);
        for (step, idx) in batches.iter().enumerate() {
            let batch = data.batch(idx);
            let mut tape = Tape::new();
            let (total, task, hint) = fd_losses(&mut tape, &student, teachers, &projections, &batch, alpha)?;
            let (task_v, hint_v) = (tape.value(task).item(), tape.value(hint).item());
            if let Err(e) = check_finite(tape.value(total).item(), "fd", epoch, step) {
                save_last_good(cfg, &last_good, data);
                return Err(e);
            }
            if epoch == 1 && step == 0 {
                report.initial_distill_loss = Some(hint_v);
            }
            let grads = tape.backward(total)?;
            student.zero_grad();
            student.accumulate(&grads);
            opt.step(&mut student.params_mut());
            student.zero_grad();
            let mut proj_params: Vec<_> = projections.iter_mut().flat_map(|p| p.params_mut()).collect();
            for p in proj_params.iter_mut() {
                p.zero_grad();
                p.accumulate(&grads);
            }
            proj_opt.step(&mut proj_params);
            for p in proj_params.iter_mut() {
                p.zero_grad();
            }
            task_sum += task_v;
            hint_sum += hint_v;
            report.distill_steps += 1;
            report.teacher_passes.invoked += teachers.len() as u64;
        }
        let steps = batches.len() as f64;
        push_epoch(&mut report, &student, data, epoch, task_sum / steps, Some(hint_sum / steps))?;
        last_good = student.clone();
    }
    finish(&mut report, &student, teachers, data, started)?;
    Ok((student, report))
}

/// The feature-distillation objective on a tape: `(total, task, hint)`, where
/// `hint = Σ_j mse(P_j(teacher_j tap_out), student tap_out)`.
pub fn fd_losses(
    tape: &mut Tape,
    student: &TapModel,
    teachers: &[TapModel],
    projections: &[Linear],
    batch: &Batch,
    alpha: f64,
) -> Result<(Var, Var, Var)> {
    let out = student.forward(tape, batch)?;
    let task = task_loss(tape, student, out.prediction, batch)?;
    let h = out.tap(student.tap_out());
    let mut hint: Option<Var> = None;
    for (t, proj) in teachers.iter().zip(projections) {
        let p = t.forward(tape, batch)?.tap(t.tap_out());
        let p = tape.detach(p);
        let z = proj.forward(tape, p)?;
        let l = tape.l2_divergence(z, h)?;
        hint = Some(match hint {
            Some(s) => tape.add(s, l)?,
            None => l,
        });
    }
    let hint = hint.ok_or_else(|| Error::Config("feature distillation needs a teacher".into()))?;
    let total = weighted(tape, task, hint, alpha)?;
    Ok((total, task, hint))
}

fn weighted(tape: &mut Tape, task: Var, extra: Var, alpha: f64) -> Result<Var> {
    if alpha == 0.0 {
        return Ok(task);
    }
    let e = tape.scale(extra, alpha);
    tape.add(task, e)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} must be finite and ≥ 0")))
    }
}

fn names(teachers: &[TapModel]) -> Vec<String> {
    teachers.iter().map(|t| t.name().to_string()).collect()
}

fn finish(
    report: &mut RunReport,
    student: &TapModel,
    teachers: &[TapModel],
    data: &TrainData,
    started: Instant,
) -> Result<()> {
    report.final_train_loss = evaluate_train(student, data)?;
    report.final_metric = report.epochs.last().map_or(f64::NAN, |e| e.test_mse);
    report.teacher_metrics = teacher_metrics(teachers, data)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(())
}
