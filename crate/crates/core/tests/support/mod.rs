//! Fixtures and oracles shared by the core integration tests and the
//! acceptance target (which includes this file by path).
#![allow(dead_code)]

use committee_core::committee::{distill_loss, DistillModule, TeacherDims};
use committee_core::data::{generate_synthetic, Batch, Dataset, FeatureView, SyntheticConfig};
use committee_core::models::{build, preset_menu, Linear, ModelSpec, Role, TapModel};
use committee_core::tensor::{HasParams, Parameter, Tape, Tensor, Var};
use committee_core::training::{
    baseline_fd_with, distill_objective, fd_losses, regularizer_objective, run_distillation,
    run_distillation_observed, soft_target, ImportanceFit, train_supervised, CommitteeConfig, Phase, TrainConfig, TrainData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Gradients smaller than this are compared on this scale instead of their own.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Uniform values with magnitude in `[0.1, 1]`, away from ReLU's kink.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let m: f64 = rng.random_range(0.1..1.0);
        *v = if rng.random::<bool>() { m } else { -m };
    }
    t
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn rand2(rng: &mut ChaCha8Rng) -> Tensor {
    let s = [dim(rng), dim(rng)];
    rand_tensor(rng, &s)
}

/// Reduces any output to a scalar with fixed, uneven weights so every
/// element's gradient is exercised.
fn to_scalar(tape: &mut Tape, out: Var) -> Var {
    if tape.shape(out).is_empty() {
        return out;
    }
    let shape = tape.shape(out).to_vec();
    let mut r = Tensor::zeros(&shape);
    for (k, v) in r.data_mut().iter_mut().enumerate() {
        *v = ((k as f64) * 0.7 + 0.3).sin() + 0.1;
    }
    let r = tape.constant(r);
    let p = tape.mul(out, r).unwrap();
    tape.sum(p)
}

type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Largest relative error between backprop and central differences over
/// every coordinate of every input.
pub fn check_inputs(inputs: &[Tensor], f: &Graph) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let loss = to_scalar(&mut tape, out);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let loss = to_scalar(&mut tape, out);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (c, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[c] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[c] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Same check for parameters owned by `owner`, selected by `select`;
/// `loss` builds the scalar objective on a fresh tape.
pub fn check_params<M>(
    owner: &mut M,
    select: &dyn Fn(&mut M) -> Vec<&mut Parameter>,
    loss: &dyn Fn(&M, &mut Tape) -> Var,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut tape = Tape::new();
    let l = loss(owner, &mut tape);
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = select(owner)
        .iter()
        .map(|p| grads.param(p.id()).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value().len()]))
        .collect();
    let value = |m: &M| {
        let mut t = Tape::new();
        let l = loss(m, &mut t);
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        let coords: Vec<usize> = if g.len() <= max_coords {
            (0..g.len()).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..g.len())).collect()
        };
        for c in coords {
            let orig = select(owner)[k].value().data()[c];
            select(owner)[k].value_mut().data_mut()[c] = orig + FD_STEP;
            let up = value(owner);
            select(owner)[k].value_mut().data_mut()[c] = orig - FD_STEP;
            let down = value(owner);
            select(owner)[k].value_mut().data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g[c], numeric));
        }
    }
    worst
}

pub type Case = (&'static str, fn(&mut ChaCha8Rng) -> f64);

/// One random instance per call; returns the worst relative error.
pub fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            check_inputs(&[rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])], &|t, v| t.matmul(v[0], v[1]).unwrap())
        }),
        ("contract3 (vector)", |r| {
            let (s, m, e) = (dim(r), dim(r), dim(r));
            check_inputs(&[rand_tensor(r, &[s]), rand_tensor(r, &[s, m, e])], &|t, v| {
                t.contract3(v[0], v[1]).unwrap()
            })
        }),
        ("contract3 (batch)", |r| {
            let (b, s, m, e) = (dim(r), dim(r), dim(r), dim(r));
            check_inputs(&[rand_tensor(r, &[b, s]), rand_tensor(r, &[s, m, e])], &|t, v| {
                t.contract3(v[0], v[1]).unwrap()
            })
        }),
        ("add", |r| {
            let s = [dim(r), dim(r)];
            check_inputs(&[rand_tensor(r, &s), rand_tensor(r, &s)], &|t, v| t.add(v[0], v[1]).unwrap())
        }),
        ("sub", |r| {
            let s = [dim(r), dim(r)];
            check_inputs(&[rand_tensor(r, &s), rand_tensor(r, &s)], &|t, v| t.sub(v[0], v[1]).unwrap())
        }),
        ("mul", |r| {
            let s = [dim(r), dim(r)];
            check_inputs(&[rand_tensor(r, &s), rand_tensor(r, &s)], &|t, v| t.mul(v[0], v[1]).unwrap())
        }),
        ("add_row", |r| {
            let (m, n) = (dim(r), dim(r));
            check_inputs(&[rand_tensor(r, &[m, n]), rand_tensor(r, &[n])], &|t, v| t.add_row(v[0], v[1]).unwrap())
        }),
        ("scale", |r| {
            let c: f64 = r.random_range(-2.0..2.0);
            let x = rand2(r);
            check_inputs(&[x], &move |t, v| t.scale(v[0], c))
        }),
        ("relu", |r| {
            let x = { let s = [dim(r), dim(r)]; rand_away_from_zero(r, &s) };
            check_inputs(&[x], &|t, v| t.relu(v[0]))
        }),
        ("sigmoid", |r| {
            let mut x = rand2(r);
            x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
            check_inputs(&[x], &|t, v| t.sigmoid(v[0]))
        }),
        ("square", |r| {
            let x = rand2(r);
            check_inputs(&[x], &|t, v| t.square(v[0]))
        }),
        ("concat_cols", |r| {
            let m = dim(r);
            let widths = [dim(r), dim(r), dim(r)];
            let parts = widths.map(|w| rand_tensor(r, &[m, w]));
            check_inputs(&parts, &|t, v| t.concat_cols(v).unwrap())
        }),
        ("reshape", |r| {
            let (a, b) = (dim(r), dim(r));
            check_inputs(&[rand_tensor(r, &[a, b])], &move |t, v| {
                let x = t.reshape(v[0], &[b * a]).unwrap();
                let sq = t.square(x);
                t.reshape(sq, &[b, a]).unwrap()
            })
        }),
        ("transpose", |r| {
            let x = rand2(r);
            check_inputs(&[x], &|t, v| t.transpose(v[0]).unwrap())
        }),
        ("column", |r| {
            let (m, n) = (dim(r), dim(r));
            let j = r.random_range(0..n);
            check_inputs(&[rand_tensor(r, &[m, n])], &move |t, v| t.column(v[0], j).unwrap())
        }),
        ("row_mean", |r| {
            let x = rand2(r);
            check_inputs(&[x], &|t, v| t.row_mean(v[0]).unwrap())
        }),
        ("sum", |r| {
            let x = rand2(r);
            check_inputs(&[x], &|t, v| {
                let s = t.square(v[0]);
                t.sum(s)
            })
        }),
        ("mean", |r| {
            let x = rand2(r);
            check_inputs(&[x], &|t, v| {
                let s = t.square(v[0]);
                t.mean(s)
            })
        }),
        ("softmax_rows", |r| {
            let s = [dim(r), dim(r) + 1];
            let x = rand_tensor(r, &s);
            check_inputs(&[x], &|t, v| t.softmax_rows(v[0]).unwrap())
        }),
        ("bce_with_logits", |r| {
            let n = dim(r) + 1;
            let mut y = Tensor::zeros(&[n]);
            y.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.0..1.0));
            let x = rand_tensor(r, &[n]);
            check_inputs(&[x], &move |t, v| t.bce_with_logits(v[0], &y).unwrap())
        }),
        ("mse_loss", |r| {
            let s = [dim(r), dim(r)];
            check_inputs(&[rand_tensor(r, &s), rand_tensor(r, &s)], &|t, v| t.mse_loss(v[0], v[1]).unwrap())
        }),
        ("l2_divergence", |r| {
            let s = [dim(r), dim(r)];
            check_inputs(&[rand_tensor(r, &s), rand_tensor(r, &s)], &|t, v| t.l2_divergence(v[0], v[1]).unwrap())
        }),
        ("row_l2_divergence", |r| {
            let s = [dim(r), dim(r)];
            check_inputs(&[rand_tensor(r, &s), rand_tensor(r, &s)], &|t, v| {
                t.row_l2_divergence(v[0], v[1]).unwrap()
            })
        }),
        ("embedding_lookup", |r| {
            let (rows, d) = (dim(r) + 1, dim(r));
            let idx: Vec<usize> = (0..dim(r) + 2).map(|_| r.random_range(0..rows)).collect();
            let mut table = Parameter::new("table", rand_tensor(r, &[rows, d]));
            check_params(
                &mut table,
                &|p| vec![p],
                &|p, t| {
                    let e = t.embedding_lookup(p, &idx).unwrap();
                    to_scalar(t, e)
                },
                usize::MAX,
                r,
            )
        }),
        ("embedding_bag_mean", |r| {
            let (rows, d) = (dim(r) + 1, dim(r));
            let bags: Vec<Vec<usize>> = (0..dim(r) + 1)
                .map(|_| (0..r.random_range(0..4)).map(|_| r.random_range(0..rows)).collect())
                .collect();
            let mut table = Parameter::new("table", rand_tensor(r, &[rows, d]));
            check_params(
                &mut table,
                &|p| vec![p],
                &|p, t| {
                    let e = t.embedding_bag_mean(p, &bags).unwrap();
                    to_scalar(t, e)
                },
                usize::MAX,
                r,
            )
        }),
        ("forward_with_injection", |r| {
            let seed = r.random();
            let (ds, _) = tiny_dataset(seed);
            let spec = ModelSpec::new("m", Role::Teacher, &[5, 3], seed);
            let model = build(&spec, &ds.schema).unwrap();
            let layer = r.random_range(0..=model.tap_out());
            let w = model.width(layer).unwrap();
            let b = dim(r);
            let x = rand_away_from_zero(r, &[b, w]);
            check_inputs(&[x], &move |t, v| model.forward_with_injection(t, v[0], layer).unwrap().prediction)
        }),
        ("question augmenter", |r| {
            let mut fx = Tiny::new(r.random());
            fx.freeze_for_regularizer();
            let x = rand_tensor(r, &[3, fx.d_in()]);
            check_params(
                &mut fx.module,
                &|m| m.questions.params_mut(),
                &|m, t| {
                    let xv = t.constant(x.clone());
                    let qs = m.questions.generate_questions(t, xv).unwrap();
                    let parts: Vec<Var> = qs.into_iter().map(|q| to_scalar(t, q)).collect();
                    parts.into_iter().reduce(|a, b| t.add(a, b).unwrap()).unwrap()
                },
                12,
                r,
            )
        }),
        ("question augmenter input", |r| {
            let fx = Tiny::new(r.random());
            let x = rand_tensor(r, &[3, fx.d_in()]);
            let module = fx.module.clone();
            check_inputs(&[x], &move |t, v| {
                let qs = module.questions.generate_questions(t, v[0]).unwrap();
                t.concat_cols(&qs).unwrap()
            })
        }),
        ("teacher importance", |r| {
            let mut fx = Tiny::new(r.random());
            let x = rand_tensor(r, &[3, fx.d_in()]);
            check_params(
                &mut fx.module,
                &|m| {
                    let q = &mut m.questions;
                    vec![&mut q.teacher_embedding, &mut q.importance_projection]
                },
                &|m, t| {
                    let xv = t.constant(x.clone());
                    let w = m.questions.teacher_importance(t, xv).unwrap();
                    to_scalar(t, w)
                },
                usize::MAX,
                r,
            )
        }),
        ("answer augmenter", |r| {
            let mut fx = Tiny::new(r.random());
            let widths: Vec<usize> = fx.teachers.iter().map(|t| t.width(t.tap_out()).unwrap()).collect();
            let ps: Vec<Tensor> = widths.iter().map(|&w| rand_tensor(r, &[3, w])).collect();
            check_params(
                &mut fx.module,
                &|m| m.answers.params_mut(),
                &|m, t| {
                    let pv: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
                    let a = m.answers.generate_answers(t, &pv).unwrap();
                    let c = t.concat_cols(&a).unwrap();
                    to_scalar(t, c)
                },
                12,
                r,
            )
        }),
        ("distill_loss", |r| {
            let (b, d) = (dim(r) + 1, dim(r));
            let n = 2;
            let inputs = [
                rand_tensor(r, &[b, d]),
                rand_tensor(r, &[b, d]),
                rand_tensor(r, &[b, d]),
                rand_tensor(r, &[b, n]),
            ];
            check_inputs(&inputs, &|t, v| {
                let w = t.sigmoid(v[3]);
                distill_loss(t, &[v[0], v[1]], &[0, 1], v[2], w).unwrap()
            })
        }),
    ]
}

/// Composite objectives, each checked on a fresh tiny committee.
pub fn composite_cases() -> Vec<Case> {
    vec![
        ("distill_step objective", |r| {
            let mut fx = Tiny::new(r.random());
            fx.freeze_for_distill();
            let alpha: f64 = r.random_range(0.1..2.0);
            let selected = random_selection(r, fx.teachers.len());
            let (teachers, module, batch) = (fx.teachers.clone(), fx.module.clone(), fx.batch.clone());
            // Embedding rows also feed the (detached) importance weights, so
            // only the layers after the embedding are perturbed.
            check_params(
                &mut fx.student,
                &|s| {
                    let mut v: Vec<&mut Parameter> = Vec::new();
                    let n_tables = 2;
                    for (k, p) in s.params_mut().into_iter().enumerate() {
                        if k >= n_tables {
                            v.push(p);
                        }
                    }
                    v
                },
                &|s, t| distill_objective(t, s, &teachers, &module, &batch, &selected, alpha).unwrap().0,
                10,
                r,
            )
        }),
        ("regularizer objective", |r| {
            let mut fx = Tiny::new(r.random());
            fx.freeze_for_regularizer();
            let selected = random_selection(r, fx.teachers.len());
            let (student, teachers, batch) = (fx.student.clone(), fx.teachers.clone(), fx.batch.clone());
            // The importance-fit labels are a step function of the answers;
            // they are fixed at their unperturbed values.
            let targets = {
                let mut t = Tape::new();
                let terms =
                    regularizer_objective(&mut t, &student, &teachers, &fx.module, &batch, &selected, ImportanceFit::FromAnswers)
                        .unwrap();
                terms.importance_targets.unwrap()
            };
            check_params(
                &mut fx.module,
                &|m| m.params_mut(),
                &|m, t| {
                    regularizer_objective(t, &student, &teachers, m, &batch, &selected, ImportanceFit::Fixed(&targets))
                        .unwrap()
                        .total
                },
                8,
                r,
            )
        }),
        ("feature distillation objective", |r| {
            let mut fx = Tiny::new(r.random());
            fx.freeze_for_distill();
            let d_s = fx.student.width(fx.student.tap_out()).unwrap();
            let mut projections: Vec<Linear> = fx
                .teachers
                .iter()
                .enumerate()
                .map(|(i, t)| Linear::he_uniform(&format!("p{i}"), t.width(t.tap_out()).unwrap(), d_s, r))
                .collect();
            let (student, teachers, batch) = (fx.student.clone(), fx.teachers.clone(), fx.batch.clone());
            check_params(
                &mut projections,
                &|ps| ps.iter_mut().flat_map(|p| p.params_mut()).collect(),
                &|ps, t| fd_losses(t, &student, &teachers, ps, &batch, 0.7).unwrap().0,
                10,
                r,
            )
        }),
    ]
}

fn random_selection(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    match r.random_range(0..3) {
        0 => (0..n).collect(),
        k => vec![(k - 1).min(n - 1)],
    }
}

/// Runs every case `INSTANCES` times; returns `(name, worst error)`.
pub fn run_suite(cases: &[Case], seed: u64) -> Vec<(&'static str, f64)> {
    cases
        .iter()
        .enumerate()
        .map(|(k, (name, f))| {
            let mut r = rng(seed ^ ((k as u64) << 32));
            let worst = (0..INSTANCES).map(|_| f(&mut r)).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}

pub fn tiny_dataset(seed: u64) -> (Dataset, committee_core::data::SyntheticTruth) {
    generate_synthetic(&SyntheticConfig {
        n_users: 12,
        n_items: 10,
        latent_dim: 2,
        noise_sd: 0.2,
        n_ratings: 60,
        seed,
    })
    .unwrap()
}

pub fn small_spec(name: &str, role: Role, hidden: &[usize], seed: u64) -> ModelSpec {
    let mut s = ModelSpec::new(name, role, hidden, seed);
    s.embed_dim = 3;
    s.text_buckets = 32;
    s
}

/// A tiny student, a two-teacher committee (one categorical, one hashed
/// text), a module sized for them and one batch.
#[derive(Clone)]
pub struct Tiny {
    pub data: Dataset,
    pub student: TapModel,
    pub teachers: Vec<TapModel>,
    pub module: DistillModule,
    pub batch: Batch,
}

impl Tiny {
    pub fn new(seed: u64) -> Self {
        let (data, _) = tiny_dataset(seed);
        let student = build(&small_spec("s", Role::Student, &[6, 4], seed), &data.schema).unwrap();
        let teachers = vec![
            build(&small_spec("t0", Role::Teacher, &[5, 3], seed + 1), &data.schema).unwrap(),
            build(
                &small_spec("t1", Role::Teacher, &[4], seed + 2).with_view(FeatureView::HashedText),
                &data.schema,
            )
            .unwrap(),
        ];
        let dims: Vec<TeacherDims> = teachers
            .iter()
            .map(|t| TeacherDims {
                injection: t.width(t.tap_in()).unwrap(),
                tap_out: t.width(t.tap_out()).unwrap(),
            })
            .collect();
        let d_in = student.width(0).unwrap();
        let d_s = student.width(student.tap_out()).unwrap();
        let module = DistillModule::new(d_in, d_s, 4, 3, &dims, &mut rng(seed + 3)).unwrap();
        let hashes = data.title_hashes();
        let idx: Vec<usize> = (0..5).collect();
        let batch = Batch::from_indices(&data, &hashes, &idx);
        let mut fx = Tiny {
            data,
            student,
            teachers,
            module,
            batch,
        };
        fx.jitter_biases(seed + 4);
        fx
    }

    /// Zero biases put a ReLU kink exactly at the unperturbed point whenever
    /// a whole row of the previous layer is inactive; move them off zero.
    fn jitter_biases(&mut self, seed: u64) {
        let mut r = rng(seed);
        let mut params = self.student.params_mut();
        params.extend(self.teachers.iter_mut().flat_map(|t| t.params_mut()));
        params.extend(self.module.params_mut());
        for p in params {
            if p.name().ends_with(".bias") {
                p.value_mut().data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
            }
        }
    }

    pub fn d_in(&self) -> usize {
        self.student.width(0).unwrap()
    }

    pub fn freeze_for_distill(&mut self) {
        self.student.set_frozen(false);
        self.module.set_frozen(true);
        self.teachers.iter_mut().for_each(|t| t.set_frozen(true));
    }

    pub fn freeze_for_regularizer(&mut self) {
        self.student.set_frozen(true);
        self.module.set_frozen(false);
        self.teachers.iter_mut().for_each(|t| t.set_frozen(true));
    }
}

/// A small synthetic task with briefly pretrained teachers, for run-level checks.
pub struct SmallRun {
    pub data: Dataset,
    pub student: TapModel,
    pub teachers: Vec<TapModel>,
}

impl SmallRun {
    pub fn new(seed: u64, n_teachers: usize) -> Self {
        let (data, _) = generate_synthetic(&SyntheticConfig {
            n_users: 60,
            n_items: 40,
            latent_dim: 3,
            noise_sd: 0.3,
            n_ratings: 2000,
            seed,
        })
        .unwrap();
        let td = TrainData::new(&data);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 64,
            lr: 3e-3,
            seed,
            checkpoint_dir: None,
        };
        let shapes: [(&str, &[usize], FeatureView); 3] = [
            ("t-a", &[16, 8], FeatureView::Categorical),
            ("t-b", &[12], FeatureView::HashedText),
            ("t-c", &[10, 6], FeatureView::Categorical),
        ];
        let teachers = shapes[..n_teachers]
            .iter()
            .enumerate()
            .map(|(i, (name, hidden, view))| {
                let spec = small_spec(name, Role::Teacher, hidden, seed + 10 + i as u64).with_view(*view);
                committee_core::training::train_teacher(&spec, &td, &cfg).unwrap().0
            })
            .collect();
        let student = build(&small_spec("s", Role::Student, &[8, 4], seed + 1), &data.schema).unwrap();
        SmallRun {
            data,
            student,
            teachers,
        }
    }

    pub fn committee(&self, epochs: usize, batch_size: usize, seed: u64) -> CommitteeConfig {
        CommitteeConfig {
            d_m: 4,
            d_emb: 3,
            ..CommitteeConfig::new(
                self.teachers.clone(),
                TrainConfig {
                    epochs,
                    batch_size,
                    lr: 3e-3,
                    seed,
                    checkpoint_dir: None,
                },
            )
        }
    }
}

/// Outcome of the phase-isolation audit.
#[derive(Debug, Default)]
pub struct IsolationAudit {
    pub steps: usize,
    pub violations: Vec<String>,
}

/// Runs at least `min_steps` committee steps with checksums around every
/// phase and lists every parameter change outside its own phase.
pub fn isolation_audit(seed: u64, min_steps: usize) -> IsolationAudit {
    let run = SmallRun::new(seed, 2);
    let td = TrainData::new(&run.data);
    let batch = 32;
    let per_epoch = td.split.train.len().div_ceil(batch);
    let cfg = run.committee(min_steps.div_ceil(per_epoch), batch, seed);
    let mut audit = IsolationAudit::default();
    let mut record = |r: committee_core::training::PhaseRecord| {
        let step = audit.steps;
        let teachers_same = r.teachers.0 == r.teachers.1;
        match r.phase {
            Phase::Regularizer => {
                if r.student.0 != r.student.1 {
                    audit.violations.push(format!("step {step}: student changed in regularizer"));
                }
                if !teachers_same {
                    audit.violations.push(format!("step {step}: teacher changed in regularizer"));
                }
                if r.module.0 == r.module.1 {
                    audit.violations.push(format!("step {step}: augmenters did not move in regularizer"));
                }
            }
            Phase::Distill => {
                if r.module.0 != r.module.1 {
                    audit.violations.push(format!("step {step}: augmenters changed in distill step"));
                }
                if !teachers_same {
                    audit.violations.push(format!("step {step}: teacher changed in distill step"));
                }
                if r.student.0 == r.student.1 {
                    audit.violations.push(format!("step {step}: student did not move in distill step"));
                }
                audit.steps += 1;
            }
        }
    };
    run_distillation_observed(&cfg, run.student.clone(), &td, Some(&mut record)).unwrap();
    audit
}

/// Trains the same student with α = 0 distillation and with plain
/// supervision; returns whether the final weights and every reported
/// metric agree bitwise.
pub fn alpha_zero_matches_supervised(seed: u64) -> bool {
    let run = SmallRun::new(seed, 2);
    let td = TrainData::new(&run.data);
    let mut cfg = run.committee(2, 32, seed);
    cfg.alpha = 0.0;
    let out = run_distillation(&cfg, run.student.clone(), &td).unwrap();
    let mut plain = run.student.clone();
    let sup = train_supervised(&mut plain, &td, &cfg.schedule).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let weights_equal = out
        .student
        .params()
        .iter()
        .zip(plain.params())
        .all(|(a, b)| bits(a.value().data()) == bits(b.value().data()));
    let metrics_equal = out.report.epochs.len() == sup.epochs.len()
        && out.report.epochs.iter().zip(&sup.epochs).all(|(a, b)| {
            a.train_loss.to_bits() == b.train_loss.to_bits() && a.test_mse.to_bits() == b.test_mse.to_bits()
        })
        && out.report.final_metric.to_bits() == sup.final_metric.to_bits();
    weights_equal && metrics_equal
}

/// For every preset at full width and both roles, injecting each hidden
/// state back at its own layer reproduces the plain forward bitwise.
/// Returns `(model, layer, equal)` rows.
pub fn identity_injection_rows() -> Vec<(String, usize, bool)> {
    let (data, _) = generate_synthetic(&SyntheticConfig {
        n_users: 1000,
        n_items: 500,
        n_ratings: 64,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let hashes = data.title_hashes();
    let idx: Vec<usize> = (0..16).collect();
    let batch = Batch::from_indices(&data, &hashes, &idx);
    let mut rows = Vec::new();
    for (name, view, hidden) in preset_menu() {
        for role in [Role::Student, Role::Teacher] {
            let spec = ModelSpec::new(name, role, &hidden, 5).with_view(view);
            let model = build(&spec, &data.schema).unwrap();
            let mut tape = Tape::new();
            let plain = model.forward(&mut tape, &batch).unwrap();
            let want: Vec<u64> = tape.value(plain.prediction).data().iter().map(|v| v.to_bits()).collect();
            for layer in 0..=model.tap_out() {
                let injected = tape.constant(tape.value(plain.tap(layer)).clone());
                let out = model.forward_with_injection(&mut tape, injected, layer).unwrap();
                let got: Vec<u64> = tape.value(out.prediction).data().iter().map(|v| v.to_bits()).collect();
                rows.push((format!("{name}/{role:?}"), layer, got == want));
            }
        }
    }
    rows
}

/// Importance scores for random inputs of moderate and large magnitude.
pub fn importance_samples(seed: u64) -> Vec<f64> {
    let fx = Tiny::new(seed);
    let mut r = rng(seed);
    let mut out = Vec::new();
    for scale in [0.1, 1.0, 10.0, 1e3] {
        let mut x = rand_tensor(&mut r, &[8, fx.d_in()]);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = fx.module.questions.teacher_importance(&mut tape, xv).unwrap();
        out.extend_from_slice(tape.value(w).data());
    }
    out
}

/// Importance scores for an all-zero student representation.
pub fn importance_at_zero(seed: u64) -> Vec<f64> {
    let fx = Tiny::new(seed);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, fx.d_in()]));
    let w = fx.module.questions.teacher_importance(&mut tape, x).unwrap();
    tape.value(w).data().to_vec()
}

/// Worst relative deviation from linearity of the distillation loss in the
/// weights: scaling by `c` and additivity over two weight sets.
pub fn distill_loss_linearity(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, d, n) = (5, 4, 3);
    let answers: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut r, &[b, d])).collect();
    let h = rand_tensor(&mut r, &[b, d]);
    let loss = |w: &Tensor| {
        let mut tape = Tape::new();
        let a: Vec<Var> = answers.iter().map(|t| tape.constant(t.clone())).collect();
        let hv = tape.constant(h.clone());
        let wv = tape.constant(w.clone());
        let l = distill_loss(&mut tape, &a, &[0, 1, 2], hv, wv).unwrap();
        tape.value(l).item()
    };
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let mut w1 = Tensor::zeros(&[b, n]);
        let mut w2 = Tensor::zeros(&[b, n]);
        w1.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.01..0.99));
        w2.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.01..0.99));
        let c: f64 = r.random_range(0.1..5.0);
        let mut cw = w1.clone();
        cw.data_mut().iter_mut().for_each(|v| *v *= c);
        let mut sum = w1.clone();
        sum.data_mut().iter_mut().zip(w2.data()).for_each(|(a, b)| *a += b);
        let (l1, l2) = (loss(&w1), loss(&w2));
        worst = worst.max(((loss(&cw) - c * l1) / (c * l1)).abs());
        worst = worst.max(((loss(&sum) - (l1 + l2)) / (l1 + l2)).abs());
    }
    worst
}

/// Largest absolute gap between the MT soft target and a loop over the
/// teachers' individual predictions (three teachers).
pub fn mt_target_error(seed: u64) -> f64 {
    let run = SmallRun::new(seed, 3);
    let hashes = run.data.title_hashes();
    let idx: Vec<usize> = (0..40).collect();
    let batch = Batch::from_indices(&run.data, &hashes, &idx);
    let target = soft_target(&run.teachers, &batch).unwrap();
    let preds: Vec<Vec<f64>> = run.teachers.iter().map(|t| t.predict(&batch).unwrap()).collect();
    let mut worst = 0.0f64;
    for b in 0..batch.len() {
        let mut s = 0.0;
        for p in &preds {
            s += p[b];
        }
        worst = worst.max((target.data()[b] - s / preds.len() as f64).abs());
    }
    worst
}

/// Feature distillation against an identical network through an identity
/// projection: the hint term on the very first step.
pub fn fd_identity_initial_loss(seed: u64) -> f64 {
    let run = SmallRun::new(seed, 1);
    let td = TrainData::new(&run.data);
    let mut teacher = run.student.clone();
    teacher.set_frozen(true);
    let d = run.student.width(run.student.tap_out()).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        lr: 1e-3,
        seed,
        checkpoint_dir: None,
    };
    let (_, report) = baseline_fd_with(
        run.student.clone(),
        &[teacher],
        vec![Linear::identity("proj", d)],
        1.0,
        &td,
        &cfg,
    )
    .unwrap();
    report.initial_distill_loss.expect("first step recorded")
}
