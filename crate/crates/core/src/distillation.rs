//! Progressive distillation: a student with `N` steps learns to reproduce
//! two deterministic teacher steps of a `2N`-step teacher in one step.
//!
//! Student step `τ` sits at teacher level `2τ`. The teacher is evaluated
//! at `2τ` and `2τ − 1`; the two moves land at levels `2τ − 1` and
//! `2τ − 2` (level 0 being clean data).

use crate::data::CorpusItem;
use crate::diffusion::{transfer, NoiseSchedule, Scales};
use crate::error::{Error, Result};
use crate::model::{DenoiserModel, EncodedAudio, EvalWeights, ModelConfig};
use crate::nn::{AdamConfig, AdamState, Graph, Param, ParameterSet, Var};
use crate::personalization::IdentityLibrary;
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{train_with, AuxLoss, ItemContext, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub student_steps: usize,
    pub epochs: usize,
    pub lambda_dis: f64,
    /// Batching, learning rate and teacher-loss weights for the student.
    pub train: TrainConfig,
}

impl DistillConfig {
    pub fn new(student_steps: usize, train: TrainConfig) -> Self {
        Self {
            student_steps,
            epochs: 25,
            lambda_dis: 0.1,
            train,
        }
    }
}

/// Clean-data target implied by two teacher steps, and its loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTarget {
    pub x_tilde: Tensor,
    pub weight: f64,
}

/// Checks that a `teacher_steps` teacher can be halved into `student_steps`.
pub fn check_parity(teacher_steps: usize, student_steps: usize) -> Result<()> {
    if teacher_steps % 2 != 0 || student_steps == 0 || teacher_steps != 2 * student_steps {
        return Err(Error::Config(format!(
            "distillation needs an even-step teacher with exactly twice the student's steps \
             (teacher T = 2N); got teacher T = {teacher_steps}, student N = {student_steps}"
        )));
    }
    Ok(())
}

pub fn student_schedule(teacher: &NoiseSchedule) -> Result<NoiseSchedule> {
    check_parity(teacher.num_steps(), teacher.num_steps() / 2)?;
    teacher.subsample(2)
}

/// `(x_τ′, x_τ″)`: two deterministic teacher moves from student step `τ`.
/// `denoise(x, k)` is the teacher's x0 estimate at teacher step `k`.
pub fn teacher_two_step<F>(
    mut denoise: F,
    x_tau: &Tensor,
    tau: usize,
    teacher: &NoiseSchedule,
) -> Result<(Tensor, Tensor)>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let k = 2 * tau;
    teacher.check_step(k)?;
    let (s0, s1, s2) = (teacher.scales(k)?, teacher.scales(k - 1)?, teacher.scales(k - 2)?);
    let x0_a = denoise(x_tau, k)?;
    let x1 = transfer(x_tau, &x0_a, s0, s1).map_err(|e| singular(e, tau))?;
    let x0_b = denoise(&x1, k - 1)?;
    let x2 = transfer(&x1, &x0_b, s1, s2).map_err(|e| singular(e, tau))?;
    Ok((x1, x2))
}

fn singular(e: Error, tau: usize) -> Error {
    match e {
        Error::Singularity(m) => Error::Singularity(format!("{m} (student step {tau})")),
        other => other,
    }
}

/// `x̃ = (x″ − (s″/s)·x) / (a″ − (s″/s)·a)` with weight `max(a²/s², 1)`.
pub fn distill_target(x_tau: &Tensor, x_pp: &Tensor, tau: usize, teacher: &NoiseSchedule) -> Result<DistillTarget> {
    x_tau.ensure_same_shape(x_pp, "distillation target")?;
    teacher.check_step(2 * tau)?;
    let from = teacher.scales(2 * tau)?;
    let to = teacher.scales(2 * tau - 2)?;
    let x_tilde = target_fn(from, to, tau)?;
    Ok(DistillTarget {
        x_tilde: x_pp.zip_map(x_tau, x_tilde),
        weight: teacher.snr(2 * tau).max(1.0),
    })
}

fn target_fn(from: Scales, to: Scales, tau: usize) -> Result<impl Fn(f64, f64) -> f64> {
    if from.noise <= 0.0 {
        return Err(Error::Singularity(format!("noise scale is zero at student step {tau}")));
    }
    let ratio = to.noise / from.noise;
    let denom = to.signal - ratio * from.signal;
    if denom.abs() < 1e-12 {
        return Err(Error::Singularity(format!(
            "distillation target denominator vanishes at student step {tau}"
        )));
    }
    Ok(move |pp: f64, x: f64| (pp - ratio * x) / denom)
}

/// `weight · mse(x̃, student)`.
pub fn distill_loss(target: &DistillTarget, student_out: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student_out.clone());
    let l = distill_loss_var(&mut g, target, s)?;
    Ok(g.scalar(l))
}

pub fn distill_loss_var(g: &mut Graph, target: &DistillTarget, student_out: Var) -> Result<Var> {
    if g.value(student_out).shape() != target.x_tilde.shape() {
        return Err(Error::dim(
            "distillation loss",
            format!("{:?}", target.x_tilde.shape()),
            format!("{:?}", g.value(student_out).shape()),
        ));
    }
    let t = g.constant(target.x_tilde.clone());
    let mse = g.mse(student_out, t)?;
    Ok(g.scale(mse, target.weight))
}

struct TeacherTerm<'a> {
    teacher: &'a DenoiserModel,
    weights: EvalWeights,
    library: &'a IdentityLibrary,
    lambda: f64,
}

impl AuxLoss for TeacherTerm<'_> {
    fn weight(&self) -> f64 {
        self.lambda
    }

    fn item_loss(&self, g: &mut Graph, ctx: &ItemContext<'_>) -> Result<Var> {
        let audio = EncodedAudio {
            frames: ctx.audio.clone(),
            global: Vec::new(),
        };
        let emb = self.library.embedding(ctx.identity_index);
        let schedule = &self.teacher.schedule;
        let (_, x_pp) = teacher_two_step(
            |x, k| self.teacher.predict_x0(&self.weights, &audio, &emb, x, k),
            ctx.x_t,
            ctx.t,
            schedule,
        )?;
        let target = distill_target(ctx.x_t, &x_pp, ctx.t, schedule)?;
        distill_loss_var(g, &target, ctx.x_hat)
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub student: DenoiserModel,
    pub library: IdentityLibrary,
    pub report: TrainReport,
}

/// One halving stage: the student starts as a copy of the teacher (and its
/// library) and trains on the teacher loss plus `λ5` times the
/// distillation loss.
pub fn distill_stage(
    config: &DistillConfig,
    items: &[&CorpusItem],
    teacher: &DenoiserModel,
    teacher_library: &IdentityLibrary,
) -> Result<StageResult> {
    check_parity(teacher.steps(), config.student_steps)?;
    if !(config.lambda_dis >= 0.0 && config.lambda_dis.is_finite()) {
        return Err(Error::Config(format!("λ5 must be non-negative, got {}", config.lambda_dis)));
    }
    let student_config = ModelConfig {
        steps: config.student_steps,
        ..teacher.config.clone()
    };
    let mut student = DenoiserModel::from_params(student_config, teacher.params.clone())?;
    let mut library = teacher_library.clone();
    let term = TeacherTerm {
        teacher,
        weights: teacher.eval_weights(),
        library: teacher_library,
        lambda: config.lambda_dis,
    };
    let train = TrainConfig {
        epochs: config.epochs,
        ..config.train.clone()
    };
    let report = train_with(&train, items, &mut student, &mut library, Some(&term), None)?;
    Ok(StageResult {
        student,
        library,
        report,
    })
}

/// Analytic check of distillation on 1-D Gaussian data `x0 ~ N(μ, σ0²)`,
/// whose optimal x0 estimate is known in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianToy {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyReport {
    /// Per student step: MSE between one student move and two teacher moves.
    pub step_mse: Vec<f64>,
    pub max_mse: f64,
}

impl GaussianToy {
    /// `E[x0 | x_t] = μ + a·σ0²/(a²σ0² + s²)·(x − a·μ)`.
    pub fn optimal_x0(&self, x: f64, sc: Scales) -> f64 {
        let v = self.std * self.std;
        self.mean + sc.signal * v / (sc.signal * sc.signal * v + sc.noise * sc.noise) * (x - sc.signal * self.mean)
    }

    /// Sample of the forward marginal at level `sc`.
    fn sample<R: rand::Rng + ?Sized>(&self, sc: Scales, n: usize, r: &mut R) -> Tensor {
        Tensor::from_fn(n, 1, |_, _| {
            let x0 = self.mean + self.std * rng::normal(r);
            sc.signal * x0 + sc.noise * rng::normal(r)
        })
    }

    /// Train a per-step affine student `x̂ = w·x + b` on the distillation
    /// loss against the optimal teacher, then compare one student move with
    /// two teacher moves on fresh samples.
    pub fn distill(&self, teacher: &NoiseSchedule, iterations: usize, batch: usize, seed: u64) -> Result<ToyReport> {
        let student = student_schedule(teacher)?;
        let mut r = rng::rng_from(seed, "gaussian-toy");
        let teacher_fn = |x: &Tensor, k: usize| -> Result<Tensor> {
            let sc = teacher.scales(k)?;
            Ok(x.map(|v| self.optimal_x0(v, sc)))
        };
        let mut step_mse = Vec::with_capacity(student.num_steps());
        for tau in 1..=student.num_steps() {
            let sc = student.scales(tau)?;
            let mut params = ParameterSet::new();
            params.insert("w", Param::from_f32(1, 1, vec![1.0])?)?;
            params.insert("b", Param::zeros(1, 1))?;
            let mut adam = AdamState::new(AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            });
            for _ in 0..iterations {
                let x = self.sample(sc, batch, &mut r);
                let (_, x_pp) = teacher_two_step(teacher_fn, &x, tau, teacher)?;
                let target = distill_target(&x, &x_pp, tau, teacher)?;
                let mut g = Graph::new();
                let bnd = params.bind(&mut g);
                let xv = g.constant(x);
                let pred = g.matmul(xv, bnd.var("w")?)?;
                let ones = g.constant(Tensor::filled(batch, 1, 1.0));
                let bias = g.matmul(ones, bnd.var("b")?)?;
                let pred = g.add(pred, bias)?;
                let loss = distill_loss_var(&mut g, &target, pred)?;
                let mut grads = g.backward(loss)?;
                adam.step(&mut params, &bnd.collect(&mut grads))?;
            }
            let w = f64::from(params.get("w")?.data()[0]);
            let b = f64::from(params.get("b")?.data()[0]);
            let x = self.sample(sc, 4096, &mut r);
            let (_, x_pp) = teacher_two_step(teacher_fn, &x, tau, teacher)?;
            let x0_hat = x.map(|v| w * v + b);
            let one = transfer(&x, &x0_hat, sc, student.scales(tau - 1)?)?;
            let mse = one.zip_map(&x_pp, |a, b| (a - b).powi(2)).mean();
            step_mse.push(mse);
        }
        let max_mse = step_mse.iter().copied().fold(0.0, f64::max);
        Ok(ToyReport { step_mse, max_mse })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::scaled_linear_schedule;
    use rand::Rng;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn parity_rules() {
        assert!(check_parity(32, 16).is_ok());
        assert!(matches!(check_parity(31, 15), Err(Error::Config(_))));
        assert!(matches!(check_parity(32, 8), Err(Error::Config(_))));
        let half = student_schedule(&scaled_linear_schedule(32).unwrap()).unwrap();
        assert_eq!(half.num_steps(), 16);
    }

    #[test]
    fn transfer_hand_example_inside_two_step() {
        // the first move of the pair, with a = 0.8, s = 0.6 → a' = 0.9, s' = 0.436
        let x = transfer(
            &scalar(2.2),
            &scalar(2.0),
            Scales { signal: 0.8, noise: 0.6 },
            Scales { signal: 0.9, noise: 0.436 },
        )
        .unwrap();
        assert!((x.item() - 2.236).abs() < 1e-12);
    }

    /// Independent scalar re-implementation of the two moves.
    fn scalar_two_step(x: f64, tau: usize, s: &NoiseSchedule, den: impl Fn(f64, usize) -> f64) -> (f64, f64) {
        let lvl = |k: usize| {
            let ab = if k == 0 { 1.0 } else { s.alpha_bar(k) };
            (ab.sqrt(), (1.0 - ab).sqrt())
        };
        let (a0, s0) = lvl(2 * tau);
        let (a1, s1) = lvl(2 * tau - 1);
        let (a2, s2) = lvl(2 * tau - 2);
        let h0 = den(x, 2 * tau);
        let x1 = a1 * h0 + s1 / s0 * (x - a0 * h0);
        let h1 = den(x1, 2 * tau - 1);
        let x2 = a2 * h1 + s2 / s1 * (x1 - a1 * h1);
        (x1, x2)
    }

    #[test]
    fn two_step_matches_scalar_oracle() {
        let s = scaled_linear_schedule(32).unwrap();
        let den = |x: f64, k: usize| 0.3 * x.tanh() + 0.01 * k as f64;
        for tau in [1, 2, 7, 16] {
            let (x1, x2) = teacher_two_step(|x, k| Ok(x.map(|v| den(v, k))), &scalar(0.37), tau, &s).unwrap();
            let (o1, o2) = scalar_two_step(0.37, tau, &s, den);
            assert!((x1.item() - o1).abs() < 1e-10);
            assert!((x2.item() - o2).abs() < 1e-10);
        }
    }

    #[test]
    fn perfect_teacher_moves_keep_the_noise() {
        let s = scaled_linear_schedule(32).unwrap();
        let (x0, eps, tau) = (0.42, -1.3, 5);
        let sc = s.scales(2 * tau).unwrap();
        let x = scalar(sc.signal * x0 + sc.noise * eps);
        let (x1, x2) = teacher_two_step(|x, _| Ok(x.map(|_| x0)), &x, tau, &s).unwrap();
        let (s1, s2) = (s.scales(2 * tau - 1).unwrap(), s.scales(2 * tau - 2).unwrap());
        assert!((x1.item() - (s1.signal * x0 + s1.noise * eps)).abs() < 1e-12);
        assert!((x2.item() - (s2.signal * x0 + s2.noise * eps)).abs() < 1e-12);
        let target = distill_target(&x, &x2, tau, &s).unwrap();
        assert!((target.x_tilde.item() - x0).abs() < 1e-12);
    }

    #[test]
    fn target_continues_hand_example() {
        // levels: a = 0.8, s = 0.6 and a″ = 0.95, s″ = sqrt(1 − 0.9025)
        let s = NoiseSchedule::from_alpha_bars(vec![0.99, 0.9025, 0.75, 0.64]).unwrap();
        let (x, xpp) = (2.2, 1.9);
        let t = distill_target(&scalar(x), &scalar(xpp), 2, &s).unwrap();
        let (a, sd) = (0.8, 0.6);
        let (a2, s2) = (0.95, (1.0f64 - 0.9025).sqrt());
        let r = s2 / sd;
        let want = (xpp - r * x) / (a2 - r * a);
        assert!((t.x_tilde.item() - want).abs() < 1e-12);
        assert!((t.weight - (0.64f64 / 0.36)).abs() < 1e-12);
    }

    #[test]
    fn weight_is_truncated_snr() {
        let s = scaled_linear_schedule(32).unwrap();
        let student = student_schedule(&s).unwrap();
        for tau in 1..=16 {
            let t = distill_target(&scalar(0.1), &scalar(0.2), tau, &s).unwrap();
            assert_eq!(t.weight, student.snr(tau).max(1.0));
            if 1.0 - s.alpha_bar(2 * tau) >= 0.5 {
                assert_eq!(t.weight, 1.0);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let t = DistillTarget {
            x_tilde: Tensor::filled(2, 3, 0.5),
            weight: 1.0,
        };
        assert_eq!(distill_loss(&t, &t.x_tilde).unwrap(), 0.0);
        assert!((distill_loss(&t, &t.x_tilde.map(|v| v + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let t2 = DistillTarget {
            x_tilde: scalar(0.3),
            weight: 2.25,
        };
        assert!((distill_loss(&t2, &scalar(0.4)).unwrap() - 0.0225).abs() < 1e-12);
        assert!(matches!(distill_loss(&t, &scalar(0.0)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn perfect_teacher_fixed_point_randomized() {
        let s = scaled_linear_schedule(32).unwrap();
        let mut r = rng::seeded(12);
        for _ in 0..200 {
            let x0: f64 = r.random_range(-2.0..2.0);
            let eps = rng::normal(&mut r);
            let tau = r.random_range(1..=16);
            let sc = s.scales(2 * tau).unwrap();
            let x = scalar(sc.signal * x0 + sc.noise * eps);
            let (_, x2) = teacher_two_step(|x, _| Ok(x.map(|_| x0)), &x, tau, &s).unwrap();
            let t = distill_target(&x, &x2, tau, &s).unwrap();
            assert!((t.x_tilde.item() - x0).abs() < 1e-10);
        }
    }

    #[test]
    fn optimal_denoiser_is_posterior_mean() {
        let toy = GaussianToy { mean: 0.5, std: 0.2 };
        let sc = Scales { signal: 0.6, noise: 0.8 };
        // regression slope of x0 on x_t is cov/var
        let slope = 0.6 * 0.04 / (0.36 * 0.04 + 0.64);
        assert!((toy.optimal_x0(1.0, sc) - (0.5 + slope * (1.0 - 0.3))).abs() < 1e-12);
        let clean = Scales { signal: 1.0, noise: 0.0 };
        assert!((toy.optimal_x0(0.9, clean) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn gaussian_toy_student_matches_teacher() {
        let toy = GaussianToy { mean: 0.5, std: 0.2 };
        let rep = toy.distill(&scaled_linear_schedule(8).unwrap(), 600, 64, 1).unwrap();
        assert_eq!(rep.step_mse.len(), 4);
        assert!(rep.max_mse < 1e-3, "{rep:?}");
        let untrained = toy.distill(&scaled_linear_schedule(8).unwrap(), 0, 64, 1).unwrap();
        assert!(untrained.max_mse > 1e-2, "{untrained:?}");
    }
}
