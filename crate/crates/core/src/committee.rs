//! The distillation module: a question augmenter that turns the student's
//! embedding-level representation into one question per teacher, an answer
//! augmenter that maps each teacher's pre-head state back to the student's
//! width, per-example teacher importance, the importance-weighted
//! distillation loss, and threshold-based teacher selection.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::Mlp;
use crate::tensor::{HasParams, Parameter, Tape, Tensor, Var};

/// Widths the augmenters must match for one teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TeacherDims {
    /// Width of the hidden state questions replace.
    pub injection: usize,
    /// Width of the hidden state answers are read from.
    pub tap_out: usize,
}

/// Teacher embeddings `E: [n, d_emb]`, question projection
/// `W_m: [d_in, d_m, d_emb]`, importance projection `W_f: [d_in, d_emb]`,
/// and one output MLP per teacher.
#[derive(Clone, Debug)]
pub struct QuestionAugmenter {
    pub teacher_embedding: Parameter,
    pub question_projection: Parameter,
    pub importance_projection: Parameter,
    pub out_mlps: Vec<Mlp>,
}

impl QuestionAugmenter {
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_m: usize,
        d_emb: usize,
        injection_widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if injection_widths.is_empty() {
            return Err(Error::Config("a committee needs at least one teacher".into()));
        }
        if d_in == 0 || d_m == 0 || d_emb == 0 {
            return Err(Error::Config("augmenter dimensions must be positive".into()));
        }
        let n = injection_widths.len();
        let proj_bound = (6.0 / d_in as f64).sqrt();
        let emb_std = 1.0 / (d_emb as f64).sqrt();
        Ok(QuestionAugmenter {
            teacher_embedding: Parameter::new(
                "qa.teacher_embedding",
                Tensor::normal(&[n, d_emb], emb_std, rng),
            ),
            question_projection: Parameter::new(
                "qa.question_projection",
                Tensor::uniform(&[d_in, d_m, d_emb], proj_bound, rng),
            ),
            importance_projection: Parameter::new(
                "qa.importance_projection",
                Tensor::uniform(&[d_in, d_emb], proj_bound, rng),
            ),
            out_mlps: injection_widths
                .iter()
                .enumerate()
                .map(|(i, &w)| Mlp::new(&format!("qa.out{i}"), d_m, d_m, w, rng))
                .collect(),
        })
    }

    pub fn n_teachers(&self) -> usize {
        self.teacher_embedding.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.question_projection.shape()[0]
    }

    pub fn d_m(&self) -> usize {
        self.question_projection.shape()[1]
    }

    pub fn d_emb(&self) -> usize {
        self.question_projection.shape()[2]
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.d_in() {
            return Err(Error::shape("question augmenter input", s, &[self.d_in()]));
        }
        Ok(())
    }

    /// `M = x·W_m`, shape `[B, d_m, d_emb]`.
    pub fn projected_states(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let w = tape.param(&self.question_projection);
        tape.contract3(x, w)
    }

    /// Question hidden states `u_i = M·E[i]` for the listed teachers, each `[B, d_m]`.
    ///
    /// `W_m` is contracted with `E` first, so `M` is never formed per example;
    /// the result is the same bilinear map.
    pub fn question_states(&self, tape: &mut Tape, x: Var, teachers: &[usize]) -> Result<Vec<Var>> {
        self.check_input(tape, x)?;
        let (d_in, d_m, d_emb) = (self.d_in(), self.d_m(), self.d_emb());
        let n = self.n_teachers();
        if let Some(&bad) = teachers.iter().find(|&&i| i >= n) {
            return Err(Error::Precondition(format!(
                "teacher index {bad} outside committee of {n}"
            )));
        }
        let w = tape.param(&self.question_projection);
        let w = tape.reshape(w, &[d_in * d_m, d_emb])?;
        let e = tape.param(&self.teacher_embedding);
        let et = tape.transpose(e)?;
        // G[(s, j), i] = Σ_k W_m[s, j, k] · E[i, k]
        let g = tape.matmul(w, et)?;
        teachers
            .iter()
            .map(|&i| {
                let gi = tape.column(g, i)?;
                let gi = tape.reshape(gi, &[d_in, d_m])?;
                tape.matmul(x, gi)
            })
            .collect()
    }

    /// One question per listed teacher, each as wide as that teacher's
    /// injection point.
    pub fn generate_questions_for(&self, tape: &mut Tape, x: Var, teachers: &[usize]) -> Result<Vec<Var>> {
        let states = self.question_states(tape, x, teachers)?;
        states
            .into_iter()
            .zip(teachers)
            .map(|(u, &i)| self.out_mlps[i].forward(tape, u))
            .collect()
    }

    pub fn generate_questions(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let all: Vec<usize> = (0..self.n_teachers()).collect();
        self.generate_questions_for(tape, x, &all)
    }

    /// `F·Eᵀ` with `F = x·W_f`; shape `[B, n]`.
    pub fn importance_logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let wf = tape.param(&self.importance_projection);
        let f = tape.matmul(x, wf)?;
        let e = tape.param(&self.teacher_embedding);
        let et = tape.transpose(e)?;
        tape.matmul(f, et)
    }

    /// Per-example importance `σ(F·Eᵀ)`, shape `[B, n]`.
    pub fn teacher_importance(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let logits = self.importance_logits(tape, x)?;
        Ok(tape.sigmoid(logits))
    }
}

impl HasParams for QuestionAugmenter {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![
            &self.teacher_embedding,
            &self.question_projection,
            &self.importance_projection,
        ];
        for m in &self.out_mlps {
            v.extend(m.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![
            &mut self.teacher_embedding,
            &mut self.question_projection,
            &mut self.importance_projection,
        ];
        for m in &mut self.out_mlps {
            v.extend(m.params_mut());
        }
        v
    }
}

/// One MLP per teacher mapping its pre-head state to the student's width.
#[derive(Clone, Debug)]
pub struct AnswerAugmenter {
    pub in_mlps: Vec<Mlp>,
}

impl AnswerAugmenter {
    pub fn new<R: Rng + ?Sized>(tap_out_widths: &[usize], d_student: usize, rng: &mut R) -> Self {
        AnswerAugmenter {
            in_mlps: tap_out_widths
                .iter()
                .enumerate()
                .map(|(i, &w)| Mlp::new(&format!("aa.in{i}"), w, d_student, d_student, rng))
                .collect(),
        }
    }

    pub fn n_teachers(&self) -> usize {
        self.in_mlps.len()
    }

    /// Answer of teacher `teacher` from its pre-head state `p`.
    pub fn answer(&self, tape: &mut Tape, teacher: usize, p: Var) -> Result<Var> {
        let mlp = self.in_mlps.get(teacher).ok_or_else(|| {
            Error::Precondition(format!("no answer MLP for teacher {teacher}"))
        })?;
        let got = tape.shape(p).last().copied().unwrap_or(0);
        if tape.shape(p).len() != 2 || got != mlp.in_dim() {
            return Err(Error::TeacherWidth {
                teacher,
                expected: mlp.in_dim(),
                got,
            });
        }
        mlp.forward(tape, p)
    }

    /// Answers for every teacher, `p[i]` being teacher `i`'s state.
    pub fn generate_answers(&self, tape: &mut Tape, p: &[Var]) -> Result<Vec<Var>> {
        if p.len() != self.n_teachers() {
            return Err(Error::Precondition(format!(
                "{} teacher states for {} answer MLPs",
                p.len(),
                self.n_teachers()
            )));
        }
        p.iter()
            .enumerate()
            .map(|(i, &pi)| self.answer(tape, i, pi))
            .collect()
    }
}

impl HasParams for AnswerAugmenter {
    fn params(&self) -> Vec<&Parameter> {
        self.in_mlps.iter().flat_map(|m| m.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.in_mlps.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
}

/// Both augmenters; the learnable state of the distillation module.
#[derive(Clone, Debug)]
pub struct DistillModule {
    pub questions: QuestionAugmenter,
    pub answers: AnswerAugmenter,
}

impl DistillModule {
    /// Sizes the module for a student with embedding width `d_in` and last
    /// hidden width `d_student`, and the given teachers.
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_student: usize,
        d_m: usize,
        d_emb: usize,
        teachers: &[TeacherDims],
        rng: &mut R,
    ) -> Result<Self> {
        let inj: Vec<usize> = teachers.iter().map(|t| t.injection).collect();
        let outs: Vec<usize> = teachers.iter().map(|t| t.tap_out).collect();
        Ok(DistillModule {
            questions: QuestionAugmenter::new(d_in, d_m, d_emb, &inj, rng)?,
            answers: AnswerAugmenter::new(&outs, d_student, rng),
        })
    }

    pub fn n_teachers(&self) -> usize {
        self.questions.n_teachers()
    }
}

impl HasParams for DistillModule {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.questions.params();
        v.extend(self.answers.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.questions.params_mut();
        v.extend(self.answers.params_mut());
        v
    }
}

/// Teacher importance scores, each strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector(Vec<f64>);

impl ImportanceVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Precondition("empty importance vector".into()));
        }
        if let Some(bad) = w.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Precondition(format!(
                "importance score {bad} outside (0, 1)"
            )));
        }
        Ok(ImportanceVector(w))
    }

    /// Column means of a `[B, n]` importance matrix.
    pub fn batch_mean(w: &Tensor) -> Result<Self> {
        let (rows, n) = w.as_matrix_dims();
        let mut mean = vec![0.0; n];
        for r in 0..rows {
            mean.iter_mut().zip(w.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        Self::new(mean)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `Σ_j mean_b w[b, teachers[j]] · L(a_j[b], h[b])` with `L` the mean squared
/// difference. `answers[j]` belongs to teacher `teachers[j]`; `weights` is `[B, n]`.
pub fn distill_loss(
    tape: &mut Tape,
    answers: &[Var],
    teachers: &[usize],
    h: Var,
    weights: Var,
) -> Result<Var> {
    if answers.len() != teachers.len() || answers.is_empty() {
        return Err(Error::Precondition(format!(
            "{} answers for {} teachers",
            answers.len(),
            teachers.len()
        )));
    }
    let hs = tape.shape(h).to_vec();
    let ws = tape.shape(weights).to_vec();
    if hs.len() != 2 || ws.len() != 2 || ws[0] != hs[0] {
        return Err(Error::shape("distill_loss weights", &ws, &hs));
    }
    let mut total: Option<Var> = None;
    for (&a, &i) in answers.iter().zip(teachers) {
        if tape.shape(a) != hs.as_slice() {
            return Err(Error::TeacherWidth {
                teacher: i,
                expected: hs[1],
                got: tape.shape(a).last().copied().unwrap_or(0),
            });
        }
        let per_row = tape.row_l2_divergence(a, h)?;
        let wi = tape.column(weights, i)?;
        let weighted = tape.mul(per_row, wi)?;
        let term = tape.mean(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Teachers whose score reaches `threshold`; if none does, the single
/// highest-scoring teacher (lowest index on ties).
pub fn select_teachers(w: &ImportanceVector, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Precondition(format!(
            "selection threshold {threshold} must lie strictly between 0 and 1"
        )));
    }
    let picked: Vec<usize> = w
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= threshold)
        .map(|(i, _)| i)
        .collect();
    if !picked.is_empty() {
        return Ok(picked);
    }
    let mut best = 0;
    for (i, &v) in w.values().iter().enumerate() {
        if v > w.values()[best] {
            best = i;
        }
    }
    Ok(vec![best])
}

/// Writes `example_id,teacher_0,...,teacher_{n-1}` rows.
pub fn write_importance_csv(
    rows: &[(usize, Vec<f64>)],
    n_teachers: usize,
    out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["example_id".to_string()];
    header.extend((0..n_teachers).map(|i| format!("teacher_{i}")));
    w.write_record(&header)?;
    for (id, scores) in rows {
        if scores.len() != n_teachers {
            return Err(Error::Precondition(format!(
                "example {id} has {} scores for {n_teachers} teachers",
                scores.len()
            )));
        }
        let mut rec = vec![id.to_string()];
        rec.extend(scores.iter().map(|s| s.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
