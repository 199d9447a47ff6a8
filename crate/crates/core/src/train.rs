//! The three-task objective (text-to-image, video prediction, text-to-video),
//! Adam, and the deterministic toy training loop.

use std::fmt::{self, Write as _};

use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::model::{Condition, Graph, Model, ModelConfig, ModelVars};
use crate::tensor::{Dims3, Matrix, Tape, Tensor4, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Text to image: single-frame target.
    T2I,
    /// Video prediction: `None` condition, first frame given.
    V2V,
    /// Text to video.
    T2V,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::T2I, TaskKind::V2V, TaskKind::T2V];
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::T2I => "t2i",
            TaskKind::V2V => "v2v",
            TaskKind::T2V => "t2v",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2i" => Ok(TaskKind::T2I),
            "v2v" => Ok(TaskKind::V2V),
            "t2v" => Ok(TaskKind::T2V),
            other => Err(Error::contract(format!("unknown task {other:?}"))),
        }
    }
}

/// One training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    kind: TaskKind,
    text: Option<Vec<usize>>,
    target: TokenGrid,
}

impl TaskExample {
    pub fn t2i(text: Vec<usize>, target: TokenGrid) -> Result<Self> {
        if target.dims().s != 1 {
            return Err(Error::contract(format!("text-to-image target must have s = 1, got {}", target.dims())));
        }
        Self::with_text(TaskKind::T2I, text, target)
    }

    pub fn t2v(text: Vec<usize>, target: TokenGrid) -> Result<Self> {
        Self::with_text(TaskKind::T2V, text, target)
    }

    pub fn v2v(target: TokenGrid) -> Result<Self> {
        if target.dims().s < 2 {
            return Err(Error::contract("video prediction needs at least two frames"));
        }
        Ok(TaskExample {
            kind: TaskKind::V2V,
            text: None,
            target,
        })
    }

    fn with_text(kind: TaskKind, text: Vec<usize>, target: TokenGrid) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::contract(format!("{kind} example needs text")));
        }
        Ok(TaskExample {
            kind,
            text: Some(text),
            target,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn text(&self) -> Option<&[usize]> {
        self.text.as_deref()
    }

    pub fn target(&self) -> &TokenGrid {
        &self.target
    }

    pub fn condition(&self) -> Condition {
        match &self.text {
            Some(ids) => Condition::Text(ids.clone()),
            None => Condition::None,
        }
    }

    /// Number of leading target positions fed to the decoder as given
    /// (the first frame for video prediction) and excluded from the loss.
    pub fn given_len(&self) -> usize {
        match self.kind {
            TaskKind::V2V => self.target.dims().h * self.target.dims().w,
            _ => 0,
        }
    }

    pub fn given_tokens(&self) -> Vec<usize> {
        self.target.to_usize()[..self.given_len()].to_vec()
    }
}

/// Horizontal stripes drifting one step per frame.
pub fn stripes(dims: Dims3, vocab: usize, base: usize, step: usize) -> Result<TokenGrid> {
    let ids: Vec<usize> = (0..dims.len())
        .map(|t| {
            let (i, _, k) = dims.unflat(t);
            (base + step * i + k) % vocab
        })
        .collect();
    TokenGrid::from_usize(dims, vocab, &ids)
}

/// Two-token checkerboard whose phase flips every frame.
pub fn checker(dims: Dims3, vocab: usize, a: usize, b: usize) -> Result<TokenGrid> {
    let ids: Vec<usize> = (0..dims.len())
        .map(|t| {
            let (i, j, k) = dims.unflat(t);
            if (i + j + k) % 2 == 0 {
                a % vocab
            } else {
                b % vocab
            }
        })
        .collect();
    TokenGrid::from_usize(dims, vocab, &ids)
}

/// Synthetic memorisation set with one example per task, sized to `config`.
/// Text ids are keyed to the patterns they describe.
pub fn toy_dataset(config: &ModelConfig) -> Result<Vec<TaskExample>> {
    let dims = config.target_dims;
    let n = config.vocab;
    let max_id = config.text_vocab - 1;
    let text = |ids: &[usize]| -> Vec<usize> { ids.iter().map(|&t| 1 + (t - 1) % max_id).collect() };
    let image = Dims3::new(dims.h, dims.w, 1);
    Ok(vec![
        TaskExample::t2i(text(&[1, 2, 3]), stripes(image, n, 1, 3)?)?,
        TaskExample::v2v(checker(dims, n, 5, 9)?)?,
        TaskExample::t2v(text(&[4, 5]), stripes(dims, n, 2, 5)?)?,
    ])
}

/// The `None` condition after the encoder, `1 x 1 x 1 x d`.
pub fn none_condition(model: &Model) -> Result<Tensor4> {
    model.encode(&model.condition_repr(&Condition::None)?)
}

/// Mean over examples of each example's teacher-forced loss.
pub fn multitask_loss(graph: &mut Graph, examples: &[TaskExample]) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::contract("multitask loss needs a non-empty batch"));
    }
    let mut total = None;
    for ex in examples {
        let l = graph.nll(&ex.condition(), ex.target(), ex.given_len())?;
        total = Some(match total {
            None => l,
            Some(acc) => graph.tape.add(acc, l)?,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(graph.tape.scale(total, 1.0 / examples.len() as f64))
}

/// Loss value only.
pub fn multitask_loss_value(model: &Model, examples: &[TaskExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ModelVars::constants(&mut tape, model);
    let mut g = Graph::new(&mut tape, model, &vars);
    let loss = multitask_loss(&mut g, examples)?;
    Ok(tape.scalar(loss))
}

/// Loss and gradients for every parameter.
pub fn multitask_gradients(model: &Model, examples: &[TaskExample]) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::leaves(&mut tape, model);
    let mut g = Graph::new(&mut tape, model, &vars);
    let loss = multitask_loss(&mut g, examples)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), vars.all().iter().map(|&v| grads.get(v)).collect()))
}

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    /// Zero moments shaped like `params`, lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn new(params: &[Matrix]) -> Self {
        OptimizerState::with_lr(params, 1e-3)
    }

    pub fn with_lr(params: &[Matrix], lr: f64) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params / {} moments", params.len(), state.m.len()),
            format!("{} grads", grads.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape_str(), g.shape_str()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *x -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Loss before each update.
    pub losses: Vec<f64>,
}

/// Full-batch Adam over `dataset` in fixed order from a seeded initialisation.
pub fn train_toy(config: ModelConfig, dataset: &[TaskExample], steps: usize, seed: u64) -> Result<TrainOutcome> {
    for kind in TaskKind::ALL {
        if !dataset.iter().any(|ex| ex.kind() == kind) {
            return Err(Error::contract(format!("dataset has no {kind} example")));
        }
    }
    let mut model = Model::init(config, seed)?;
    // validates every example against the config before any update
    multitask_loss_value(&model, dataset)?;
    let mut state = OptimizerState::new(model.values());
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grads) = multitask_gradients(&model, dataset)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("training loss became non-finite"));
        }
        losses.push(loss);
        adam_step(model.values_mut(), &grads, &mut state)?;
    }
    Ok(TrainOutcome { model, losses })
}

/// `step,loss` rows.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{position_weights, Strategy};

    fn tiny_set() -> (Model, Vec<TaskExample>) {
        let config = ModelConfig::tiny();
        let data = toy_dataset(&config).unwrap();
        (Model::init_scaled(config, 3, 0.3).unwrap(), data)
    }

    #[test]
    fn dataset_shapes() {
        let data = toy_dataset(&ModelConfig::toy()).unwrap();
        let kinds: Vec<_> = data.iter().map(|e| e.kind()).collect();
        assert_eq!(kinds, TaskKind::ALL);
        assert_eq!(data[0].target().dims(), Dims3::new(2, 2, 1));
        assert_eq!(data[1].condition(), Condition::None);
        assert_eq!(data[1].given_len(), 4);
        for ex in &data {
            if let Some(t) = ex.text() {
                assert!(t.iter().all(|&id| (1..8).contains(&id)));
            }
        }
        assert_ne!(data[1].target(), data[2].target());
    }

    #[test]
    fn none_condition_cases() {
        let model = Model::init_scaled(ModelConfig::toy(), 1, 0.5).unwrap();
        let a = none_condition(&model).unwrap();
        assert_eq!(a, none_condition(&model).unwrap());
        assert_eq!((a.dims(), a.width()), (Dims3::new(1, 1, 1), 32));
        for id in 1..8 {
            let other = model.encode(&model.condition_repr(&Condition::Text(vec![id])).unwrap()).unwrap();
            assert_ne!(a, other);
        }
    }

    #[test]
    fn single_example_reduces_to_teacher_forced() {
        let (model, data) = tiny_set();
        let one = multitask_loss_value(&model, &data[..1]).unwrap();
        let direct = model.teacher_forced_nll(&data[0].condition(), data[0].target()).unwrap();
        assert_eq!(one, direct);
    }

    #[test]
    fn batch_is_mean_of_singles() {
        let (model, data) = tiny_set();
        let batch = multitask_loss_value(&model, &data).unwrap();
        let singles: f64 = data.iter().map(|e| multitask_loss_value(&model, std::slice::from_ref(e)).unwrap()).sum();
        assert!((batch - singles / 3.0).abs() < 1e-14);
    }

    #[test]
    fn uniform_model_gives_log_vocab() {
        let config = ModelConfig::toy();
        let model = Model::zeros(config.clone()).unwrap();
        let data = toy_dataset(&config).unwrap();
        for subset in [&data[..1], &data[1..2], &data[..]] {
            assert!((multitask_loss_value(&model, subset).unwrap() - 16f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (model, _) = tiny_set();
        assert!(matches!(multitask_loss_value(&model, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn excluded_prefix_has_zero_gradient() {
        let (model, data) = tiny_set();
        let ex = &data[1];
        let mut tape = Tape::new();
        let vars = ModelVars::leaves(&mut tape, &model);
        let mut g = Graph::new(&mut tape, &model, &vars);
        let (_, logits) = g.teacher_forced(&ex.condition(), ex.target()).unwrap();
        let n = ex.target().dims().len();
        let w = position_weights(n, ex.given_len(), model.config().reduction);
        let loss = tape.cross_entropy(logits, &ex.target().to_usize(), &w).unwrap();
        let grads = tape.backward(loss).unwrap().get(logits);
        for t in 0..n {
            let zero = grads.row(t).iter().all(|v| *v == 0.0);
            assert_eq!(zero, t < 4, "position {t}");
        }
        // changing the logits of excluded rows leaves the loss unchanged
        let base = tape.value(logits).clone();
        let mut bumped = base.clone();
        for t in 0..4 {
            for v in bumped.row_mut(t) {
                *v += 2.0;
            }
        }
        let ce = |z: &Matrix| -> f64 {
            let mut t2 = Tape::new();
            let z = t2.constant(z.clone());
            let l = t2.cross_entropy(z, &ex.target().to_usize(), &w).unwrap();
            t2.scalar(l)
        };
        assert_eq!(ce(&base), ce(&bumped));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![Matrix::filled(2, 2, 0.5)];
        let g = vec![Matrix::zeros(2, 2)];
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p[0], Matrix::filled(2, 2, 0.5));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.25] {
            let mut p = vec![Matrix::filled(1, 1, 1.0)];
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &[Matrix::filled(1, 1, g)], &mut s).unwrap();
            // m_hat = g, v_hat = g^2: step = lr * g / (|g| + eps)
            let expected = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p[0].get(0, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![Matrix::zeros(2, 2)];
        let mut s = OptimizerState::new(&p);
        assert!(adam_step(&mut p, &[Matrix::zeros(2, 3)], &mut s).is_err());
        assert!(adam_step(&mut p, &[], &mut s).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![Matrix::from_vec(1, 3, vec![0.1, -0.2, 0.3]).unwrap()];
            let mut s = OptimizerState::new(&p);
            for i in 0..100 {
                let g = p[0].data().iter().map(|x| 2.0 * x + (i as f64).sin()).collect();
                adam_step(&mut p, &[Matrix::from_vec(1, 3, g).unwrap()], &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_steps_returns_init() {
        let config = ModelConfig::tiny();
        let data = toy_dataset(&config).unwrap();
        let out = train_toy(config.clone(), &data, 0, 4).unwrap();
        assert!(out.losses.is_empty());
        assert_eq!(out.model.values(), Model::init(config, 4).unwrap().values());
    }

    #[test]
    fn short_run_records_every_step_and_learns() {
        let config = ModelConfig::tiny();
        let data = toy_dataset(&config).unwrap();
        let out = train_toy(config, &data, 40, 2).unwrap();
        assert_eq!(out.losses.len(), 40);
        assert!(out.losses[39] < out.losses[0]);
    }

    #[test]
    fn dataset_must_cover_tasks() {
        let config = ModelConfig::tiny();
        let data = toy_dataset(&config).unwrap();
        assert!(matches!(train_toy(config, &data[..2], 1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_format() {
        assert_eq!(loss_csv(&[2.5, 0.125]), "step,loss\n0,2.5\n1,0.125\n");
    }

    #[test]
    fn greedy_sampling_keeps_given_frame() {
        let config = ModelConfig::tiny();
        let data = toy_dataset(&config).unwrap();
        let model = Model::init(config.clone(), 0).unwrap();
        let ex = &data[1];
        let out = crate::model::sample(&model, &ex.condition(), ex.target().dims(), Strategy::Greedy, &ex.given_tokens()).unwrap();
        assert_eq!(&out.to_usize()[..4], &ex.given_tokens()[..]);
    }
}
