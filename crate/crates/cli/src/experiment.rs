use std::collections::BTreeMap;
use committee_core::data::{fnv1a, generate_synthetic, load_csv};
use committee_core::training::{
    baseline_fd, baseline_ld, baseline_mt, run_distillation, train_supervised, train_teacher, DistillOutcome,
    TeacherMetric,
};
use committee_core::{CommitteeConfig, Dataset, ModelSpec, Role, RunReport, TapModel, TrainConfig, TrainData};

use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, Result};

/// Knobs of a single method run that the matrix varies.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    pub committee: Vec<String>,
    pub alpha: f64,
    pub threshold: Option<f64>,
}

impl MethodRun {
    pub fn label(&self) -> String {
        committee_label(&self.committee)
    }
}

pub fn committee_label(names: &[String]) -> String {
    if names.is_empty() {
        "-".into()
    } else {
        names.join("+")
    }
}

/// Data, student and lazily trained teachers for one seed.
pub struct SeedContext {
    pub seed: u64,
    pub dataset: Dataset,
    pub student: TapModel,
    teachers: BTreeMap<String, (TapModel, RunReport)>,
    cfg: ExperimentConfig,
}

fn derived_seed(seed: u64, role: &str, name: &str) -> u64 {
    fnv1a(format!("{seed}/{role}/{name}").as_bytes())
}

impl SeedContext {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let dataset = match cfg.dataset.synthetic_config(seed) {
            Some(sc) => generate_synthetic(&sc)?.0,
            None => {
                let crate::config::DatasetSource::Csv(path) = &cfg.dataset else {
                    unreachable!()
                };
                load_csv(path)?
            }
        };
        let spec = ModelSpec::preset(
            &cfg.student,
            Role::Student,
            cfg.width_divisor,
            derived_seed(seed, "student", &cfg.student),
        )?;
        let student = committee_core::build(&spec, &dataset.schema)?;
        Ok(SeedContext {
            seed,
            dataset,
            student,
            teachers: BTreeMap::new(),
            cfg: cfg.clone(),
        })
    }

    fn schedule(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.cfg.batch_size,
            lr: self.cfg.lr,
            seed: self.seed,
            checkpoint_dir: Some(self.cfg.out.join("checkpoints")),
        }
    }

    /// Trains the named teacher on first use.
    pub fn teacher(&mut self, name: &str) -> Result<&(TapModel, RunReport)> {
        if !self.teachers.contains_key(name) {
            let spec = ModelSpec::preset(
                name,
                Role::Teacher,
                self.cfg.width_divisor,
                derived_seed(self.seed, "teacher", name),
            )?;
            let data = TrainData::new(&self.dataset);
            let trained = train_teacher(&spec, &data, &self.schedule(self.cfg.teacher_epochs))?;
            self.teachers.insert(name.to_string(), trained);
        }
        Ok(&self.teachers[name])
    }

    pub fn teachers(&mut self, names: &[String]) -> Result<Vec<TapModel>> {
        names.iter().map(|n| Ok(self.teacher(n)?.0.clone())).collect()
    }

    /// The listed teacher with the lowest held-out MSE (first on ties).
    pub fn best_teacher(&mut self, names: &[String]) -> Result<String> {
        let mut best: Option<(f64, &String)> = None;
        for n in names {
            let m = self.teacher(n)?.1.final_metric;
            if best.is_none_or(|(b, _)| m < b) {
                best = Some((m, n));
            }
        }
        best.map(|(_, n)| n.clone())
            .ok_or_else(|| CliError::Config("empty committee".into()))
    }

    pub fn trained_teachers(&self) -> impl Iterator<Item = (&String, &(TapModel, RunReport))> {
        self.teachers.iter()
    }

    /// Runs one method for this seed and returns its report.
    pub fn run(&mut self, run: &MethodRun) -> Result<RunReport> {
        Ok(self.run_full(run)?.1)
    }

    /// Like [`SeedContext::run`] but also returns the distillation module and
    /// student for the committee method.
    pub fn run_full(&mut self, run: &MethodRun) -> Result<(Option<DistillOutcome>, RunReport)> {
        let teachers = self.teachers(&run.committee)?;
        let metrics: Vec<TeacherMetric> = run
            .committee
            .iter()
            .map(|n| {
                Ok(TeacherMetric {
                    name: n.clone(),
                    test_mse: self.teacher(n)?.1.final_metric,
                })
            })
            .collect::<Result<_>>()?;
        let best = self.best_teacher(&run.committee);
        let schedule = self.schedule(self.cfg.epochs);
        let data = TrainData::new(&self.dataset);
        let student = self.student.clone();
        let (outcome, mut report) = match run.method {
            Method::None => {
                let mut s = student;
                (None, train_supervised(&mut s, &data, &schedule)?)
            }
            Method::Ld => {
                // A committee collapses to its strongest member.
                let best = best?;
                let idx = run.committee.iter().position(|n| *n == best).expect("member");
                baseline_ld(student, &teachers[idx], run.alpha, &data, &schedule).map(|(_, r)| (None, r))?
            }
            Method::Fd => baseline_fd(student, &teachers, run.alpha, &data, &schedule).map(|(_, r)| (None, r))?,
            Method::Mt => baseline_mt(student, &teachers, run.alpha, &data, &schedule).map(|(_, r)| (None, r))?,
            Method::Qa => {
                let mut cc = CommitteeConfig::new(teachers, schedule);
                cc.alpha = run.alpha;
                cc.threshold = run.threshold;
                cc.d_m = self.cfg.d_m;
                cc.d_emb = self.cfg.d_emb;
                let out = run_distillation(&cc, student, &data)?;
                let report = out.report.clone();
                (Some(out), report)
            }
        };
        report.method = run.method.to_string();
        report.committee = run.committee.clone();
        report.teacher_metrics = metrics;
        if run.method != Method::Qa {
            report.threshold = None;
        }
        Ok((outcome, report))
    }
}
