use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    check_finite, evaluate_train, push_epoch, save_last_good, targets_tensor, task_loss, RunReport,
    TeacherMetric, TrainConfig, TrainData,
};
use crate::committee::{distill_loss, select_teachers, DistillModule, ImportanceVector, TeacherDims};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::TapModel;
use crate::tensor::{Adam, AdamConfig, Gradients, HasParams, Optimizer, Tape, Tensor, Var};

/// Committee, loss weight, selection threshold and schedule for one run.
#[derive(Clone, Debug)]
pub struct CommitteeConfig {
    /// Pretrained teachers; questions go in at each teacher's `tap_in`,
    /// answers come from its `tap_out`.
    pub teachers: Vec<TapModel>,
    pub alpha: f64,
    pub threshold: Option<f64>,
    pub d_m: usize,
    pub d_emb: usize,
    /// Student schedule and learning rate.
    pub schedule: TrainConfig,
    /// Learning rate for the augmenters during the regularizer phase.
    pub augmenter_lr: f64,
    /// Also fit importance scores to which answers predict the task best.
    pub importance_fit: bool,
}

impl CommitteeConfig {
    pub fn new(teachers: Vec<TapModel>, schedule: TrainConfig) -> Self {
        let augmenter_lr = schedule.lr;
        CommitteeConfig {
            teachers,
            alpha: 1.0,
            threshold: None,
            d_m: 32,
            d_emb: 16,
            schedule,
            augmenter_lr,
            importance_fit: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.teachers.is_empty() {
            return Err(Error::Config("committee has no teachers".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be finite and ≥ 0", self.alpha)));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("threshold {t} must lie in (0, 1)")));
            }
        }
        if !(self.augmenter_lr >= 0.0 && self.augmenter_lr.is_finite()) {
            return Err(Error::Config("augmenter learning rate is invalid".into()));
        }
        Ok(())
    }

    pub fn teacher_names(&self) -> Vec<String> {
        self.teachers.iter().map(|t| t.name().to_string()).collect()
    }

    pub fn teacher_dims(&self) -> Vec<TeacherDims> {
        self.teachers
            .iter()
            .map(|t| TeacherDims {
                injection: t.width(t.tap_in()).expect("tap_in exists"),
                tap_out: t.width(t.tap_out()).expect("tap_out exists"),
            })
            .collect()
    }

    /// Fresh augmenters for `student`, seeded independently of batch order.
    pub fn build_module(&self, student: &TapModel) -> Result<DistillModule> {
        let d_in = student.width(student.tap_in()).expect("tap_in exists");
        let d_student = student.width(student.tap_out()).expect("tap_out exists");
        let mut rng = ChaCha8Rng::seed_from_u64(self.schedule.seed ^ 0x005e_ed0f_a09a_11ce);
        DistillModule::new(d_in, d_student, self.d_m, self.d_emb, &self.teacher_dims(), &mut rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub first: f64,
    pub second: f64,
}

/// Answers of the selected teachers to the questions generated from `x`.
fn answers(
    tape: &mut Tape,
    teachers: &[TapModel],
    module: &DistillModule,
    x: Var,
    selected: &[usize],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let questions = module.questions.generate_questions_for(tape, x, selected)?;
    let mut preds = Vec::with_capacity(selected.len());
    let mut outs = Vec::with_capacity(selected.len());
    for (&i, q) in selected.iter().zip(questions) {
        let teacher = &teachers[i];
        let fwd = teacher.forward_with_injection(tape, q, teacher.tap_in())?;
        let a = module.answers.answer(tape, i, fwd.tap(teacher.tap_out()))?;
        preds.push(fwd.prediction);
        outs.push(a);
    }
    Ok((preds, outs))
}

/// The student objective on a tape: `(total, task, distill)`.
///
/// Answers depend on the student's embedding output, so the distillation
/// term also reaches the embeddings through the frozen teachers. Importance
/// weights are computed from a detached copy and act as fixed coefficients.
pub fn distill_objective(
    tape: &mut Tape,
    student: &TapModel,
    teachers: &[TapModel],
    module: &DistillModule,
    batch: &Batch,
    selected: &[usize],
    alpha: f64,
) -> Result<(Var, Var, Var)> {
    let fwd = student.forward(tape, batch)?;
    let task = task_loss(tape, student, fwd.prediction, batch)?;
    let x = fwd.tap(student.tap_in());
    let (_, ans) = answers(tape, teachers, module, x, selected)?;
    let x_fixed = tape.detach(x);
    let w = module.questions.teacher_importance(tape, x_fixed)?;
    let w = tape.detach(w);
    let distill = distill_loss(tape, &ans, selected, fwd.tap(student.tap_out()), w)?;
    // Skipping the term at α = 0 keeps the update bitwise equal to supervised training.
    let total = if alpha == 0.0 {
        task
    } else {
        let weighted = tape.scale(distill, alpha);
        tape.add(task, weighted)?
    };
    Ok((total, task, distill))
}

/// One optimizer step on the student's parameters only. Teachers and the
/// module must be frozen. Returns `(task, distill)` losses.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    student: &mut TapModel,
    teachers: &[TapModel],
    module: &DistillModule,
    batch: &Batch,
    selected: &[usize],
    alpha: f64,
    opt: &mut Adam,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let (total, task, distill) = distill_objective(&mut tape, student, teachers, module, batch, selected, alpha)?;
    let losses = StepLosses {
        first: tape.value(task).item(),
        second: tape.value(distill).item(),
    };
    let grads = tape.backward(total)?;
    ensure_untouched(module, &grads)?;
    for t in teachers {
        ensure_untouched(t, &grads)?;
    }
    student.zero_grad();
    student.accumulate(&grads);
    opt.step(&mut student.params_mut());
    student.zero_grad();
    Ok(losses)
}

/// How the regularizer treats the importance-fit term.
#[derive(Clone, Copy, Debug)]
pub enum ImportanceFit<'a> {
    Off,
    /// Targets derived from this batch's answer-based predictions.
    FromAnswers,
    /// Caller-supplied `[B, selected]` targets.
    Fixed(&'a Tensor),
}

/// Terms of the task regularizer for one batch.
#[derive(Clone, Debug)]
pub struct RegularizerTerms {
    pub total: Var,
    /// Σ over selected teachers of the task loss of teacher predictions from questions.
    pub question_loss: Var,
    /// Σ over selected teachers of the task loss of student predictions from answers.
    pub answer_loss: Var,
    pub importance_loss: Option<Var>,
    /// The 0/1 targets the importance-fit term used, `[B, selected]`.
    pub importance_targets: Option<Tensor>,
}

/// Builds the regularizer objective on a tape.
///
/// With importance fitting on, the importance logits are additionally fitted
/// (binary cross-entropy) to whether each selected teacher's answer gives a
/// student prediction at least as good as the committee average for that
/// example. The targets are labels, not differentiated.
pub fn regularizer_objective(
    tape: &mut Tape,
    student: &TapModel,
    teachers: &[TapModel],
    module: &DistillModule,
    batch: &Batch,
    selected: &[usize],
    fit: ImportanceFit,
) -> Result<RegularizerTerms> {
    let x = student.embed(tape, batch)?;
    let (teacher_preds, ans) = answers(tape, teachers, module, x, selected)?;
    let y = tape.constant(targets_tensor(batch));
    let mut q_total: Option<Var> = None;
    let mut a_total: Option<Var> = None;
    let mut answer_preds = Vec::with_capacity(selected.len());
    for (&yq, &a) in teacher_preds.iter().zip(&ans) {
        let lq = tape.mse_loss(yq, y)?;
        let ya = student
            .forward_with_injection(tape, a, student.tap_out())?
            .prediction;
        let la = tape.mse_loss(ya, y)?;
        answer_preds.push(ya);
        q_total = Some(match q_total {
            Some(t) => tape.add(t, lq)?,
            None => lq,
        });
        a_total = Some(match a_total {
            Some(t) => tape.add(t, la)?,
            None => la,
        });
    }
    let (question_loss, answer_loss) = match (q_total, a_total) {
        (Some(q), Some(a)) => (q, a),
        _ => return Err(Error::Precondition("no teacher selected".into())),
    };
    let mut total = tape.add(question_loss, answer_loss)?;
    let targets = match fit {
        ImportanceFit::Off => None,
        ImportanceFit::FromAnswers => Some(importance_targets(tape, &answer_preds, batch)),
        ImportanceFit::Fixed(t) => {
            if t.shape() != [batch.len(), selected.len()] {
                return Err(Error::shape("importance targets", t.shape(), &[batch.len(), selected.len()]));
            }
            Some(t.clone())
        }
    };
    let mut importance_loss = None;
    if let Some(targets) = &targets {
        let logits = module.questions.importance_logits(tape, x)?;
        let mut fit: Option<Var> = None;
        let k = selected.len();
        for (j, &i) in selected.iter().enumerate() {
            let col = tape.column(logits, i)?;
            let t = Tensor::vector(targets.data().iter().skip(j).step_by(k).copied().collect());
            let l = tape.bce_with_logits(col, &t)?;
            fit = Some(match fit {
                Some(f) => tape.add(f, l)?,
                None => l,
            });
        }
        let fit = fit.expect("selection is non-empty");
        let fit = tape.scale(fit, 1.0 / selected.len() as f64);
        total = tape.add(total, fit)?;
        importance_loss = Some(fit);
    }
    Ok(RegularizerTerms {
        total,
        question_loss,
        answer_loss,
        importance_loss,
        importance_targets: targets,
    })
}

/// Per example, 1 for each teacher whose answer-based prediction error is at
/// most the mean over the selected teachers, else 0. Shape `[B, selected]`.
fn importance_targets(tape: &Tape, answer_preds: &[Var], batch: &Batch) -> Tensor {
    let n = answer_preds.len();
    let mut out = Vec::with_capacity(batch.len() * n);
    for b in 0..batch.len() {
        let errs: Vec<f64> = answer_preds
            .iter()
            .map(|&p| (tape.value(p).data()[b] - batch.targets[b]).powi(2))
            .collect();
        let mean = errs.iter().sum::<f64>() / n as f64;
        out.extend(errs.iter().map(|&e| if e <= mean { 1.0 } else { 0.0 }));
    }
    Tensor::from_parts(vec![batch.len(), n], out)
}

/// One optimizer step on the augmenters only. Student and teachers must be
/// frozen; any gradient reaching them is a hard error. Returns
/// `(question loss, answer loss)`.
#[allow(clippy::too_many_arguments)]
pub fn regularizer_step(
    student: &TapModel,
    teachers: &[TapModel],
    module: &mut DistillModule,
    batch: &Batch,
    selected: &[usize],
    importance_fit: bool,
    opt: &mut Adam,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let fit = if importance_fit {
        ImportanceFit::FromAnswers
    } else {
        ImportanceFit::Off
    };
    let terms = regularizer_objective(&mut tape, student, teachers, module, batch, selected, fit)?;
    let losses = StepLosses {
        first: tape.value(terms.question_loss).item(),
        second: tape.value(terms.answer_loss).item(),
    };
    let grads = tape.backward(terms.total)?;
    ensure_untouched(student, &grads)?;
    student.assert_frozen_grads_zero()?;
    for t in teachers {
        ensure_untouched(t, &grads)?;
        t.assert_frozen_grads_zero()?;
    }
    module.zero_grad();
    module.accumulate(&grads);
    opt.step(&mut module.params_mut());
    module.zero_grad();
    Ok(losses)
}

/// Fails if `grads` carries any nonzero gradient for `owner`'s parameters.
fn ensure_untouched(owner: &impl HasParams, grads: &Gradients) -> Result<()> {
    for p in owner.params() {
        if let Some(g) = grads.param(p.id()) {
            if g.iter().any(|&v| v != 0.0) {
                return Err(Error::FrozenGradient(p.name().to_string()));
            }
        }
    }
    Ok(())
}

/// Per-example importance `[B, n]` for a batch, without recording gradients.
pub fn importance_scores(student: &TapModel, module: &DistillModule, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = student.embed(&mut tape, batch)?;
    let x = tape.detach(x);
    let w = module.questions.teacher_importance(&mut tape, x)?;
    Ok(tape.value(w).clone())
}

/// Which phase of the schedule a [`PhaseRecord`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Regularizer,
    Distill,
}

/// Parameter checksums around one phase of one batch.
#[derive(Clone, Debug)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub student: (u64, u64),
    pub module: (u64, u64),
    pub teachers: (Vec<u64>, Vec<u64>),
}

/// Outcome of [`run_distillation`].
#[derive(Debug)]
pub struct DistillOutcome {
    pub student: TapModel,
    pub module: DistillModule,
    pub report: RunReport,
}

/// Trains `student` (consumed) with the committee. Per batch: select
/// teachers (when a threshold is set), one regularizer step on the
/// augmenters, then one distillation step on the student.
pub fn run_distillation(config: &CommitteeConfig, student: TapModel, data: &TrainData) -> Result<DistillOutcome> {
    run_distillation_observed(config, student, data, None)
}

/// [`run_distillation`] with an observer that receives parameter checksums
/// around every phase.
pub fn run_distillation_observed(
    config: &CommitteeConfig,
    student: TapModel,
    data: &TrainData,
    observer: Option<&mut dyn FnMut(PhaseRecord)>,
) -> Result<DistillOutcome> {
    let module = config.build_module(&student)?;
    run_distillation_from(config, student, module, data, observer)
}

/// Runs the schedule starting from a caller-supplied module.
pub fn run_distillation_from(
    config: &CommitteeConfig,
    mut student: TapModel,
    mut module: DistillModule,
    data: &TrainData,
    mut observer: Option<&mut dyn FnMut(PhaseRecord)>,
) -> Result<DistillOutcome> {
    config.validate()?;
    data.require_train()?;
    if module.n_teachers() != config.teachers.len() {
        return Err(Error::Config(format!(
            "module sized for {} teachers, committee has {}",
            module.n_teachers(),
            config.teachers.len()
        )));
    }
    let started = Instant::now();
    let schedule = &config.schedule;
    let mut teachers = config.teachers.clone();
    for t in &mut teachers {
        t.set_frozen(true);
    }
    let n = teachers.len();

    let mut report = RunReport::new("qa", config.teacher_names(), schedule.seed);
    report.alpha = Some(config.alpha);
    report.threshold = config.threshold;
    report.initial_train_loss = evaluate_train(&student, data)?;

    let mut student_opt = schedule.adam();
    let mut module_opt = Adam::new(AdamConfig::with_lr(config.augmenter_lr));
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let all: Vec<usize> = (0..n).collect();
    let mut last_good = student.clone();

    for epoch in 1..=schedule.epochs {
        let batches = data.epoch_batches(schedule.batch_size, &mut rng);
        let (mut task_sum, mut distill_sum) = (0.0, 0.0);
        let mut importance_sum = vec![0.0; n];
        for (step, idx) in batches.iter().enumerate() {
            let batch = data.batch(idx);
            let scores = importance_scores(&student, &module, &batch)?;
            if let Some(bad) = scores.data().iter().find(|v| !v.is_finite()) {
                save_last_good(schedule, &last_good, data);
                check_finite(*bad, "importance", epoch, step)?;
            }
            let w = ImportanceVector::batch_mean(&scores)?;
            importance_sum.iter_mut().zip(w.values()).for_each(|(s, v)| *s += v);
            let selected = match config.threshold {
                Some(t) => select_teachers(&w, t)?,
                None => all.clone(),
            };
            report.teacher_passes.invoked += selected.len() as u64;
            report.teacher_passes.skipped += (n - selected.len()) as u64;
            report.distill_steps += 1;

            let fail = |e: Error, last_good: &TapModel| {
                save_last_good(schedule, last_good, data);
                e
            };

            let before = observer.as_ref().map(|_| checksums(&student, &module, &teachers));
            student.set_frozen(true);
            module.set_frozen(false);
            let reg = regularizer_step(
                &student,
                &teachers,
                &mut module,
                &batch,
                &selected,
                config.importance_fit,
                &mut module_opt,
            )
            .map_err(|e| fail(e, &last_good))?;
            check_finite(reg.first + reg.second, "regularizer", epoch, step)
                .map_err(|e| fail(e, &last_good))?;
            let mid = observer.as_ref().map(|_| checksums(&student, &module, &teachers));

            module.set_frozen(true);
            student.set_frozen(false);
            let losses = distill_step(
                &mut student,
                &teachers,
                &module,
                &batch,
                &selected,
                config.alpha,
                &mut student_opt,
            )
            .map_err(|e| fail(e, &last_good))?;
            check_finite(losses.first + config.alpha * losses.second, "distill", epoch, step)
                .map_err(|e| fail(e, &last_good))?;
            if step == 0 && epoch == 1 {
                report.initial_distill_loss = Some(losses.second);
            }
            task_sum += losses.first;
            distill_sum += losses.second;

            if let Some(obs) = observer.as_mut() {
                let after = checksums(&student, &module, &teachers);
                let (b, m) = (before.expect("observed"), mid.expect("observed"));
                obs(PhaseRecord {
                    phase: Phase::Regularizer,
                    student: (b.0, m.0),
                    module: (b.1, m.1),
                    teachers: (b.2, m.2.clone()),
                });
                obs(PhaseRecord {
                    phase: Phase::Distill,
                    student: (m.0, after.0),
                    module: (m.1, after.1),
                    teachers: (m.2, after.2),
                });
            }
        }
        let steps = batches.len() as f64;
        report
            .importance_trace
            .push(importance_sum.iter().map(|s| s / steps).collect());
        push_epoch(
            &mut report,
            &student,
            data,
            epoch,
            task_sum / steps,
            Some(distill_sum / steps),
        )?;
        last_good = student.clone();
    }
    student.set_frozen(false);
    report.final_train_loss = evaluate_train(&student, data)?;
    report.final_metric = report.epochs.last().map_or(f64::NAN, |e| e.test_mse);
    report.teacher_metrics = teacher_metrics(&teachers, data)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(DistillOutcome {
        student,
        module,
        report,
    })
}

fn checksums(student: &TapModel, module: &DistillModule, teachers: &[TapModel]) -> (u64, u64, Vec<u64>) {
    (
        student.checksum(),
        module.checksum(),
        teachers.iter().map(|t| t.checksum()).collect(),
    )
}

pub(crate) fn teacher_metrics(teachers: &[TapModel], data: &TrainData) -> Result<Vec<TeacherMetric>> {
    teachers
        .iter()
        .map(|t| {
            Ok(TeacherMetric {
                name: t.name().to_string(),
                test_mse: super::evaluate(t, data)?,
            })
        })
        .collect()
}
