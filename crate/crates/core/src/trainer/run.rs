use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{Confusion, Metrics};
use crate::error::{Error, Result};
use crate::model::{BatchForward, ForwardOptions, Noise, PplModel};
use crate::numcore::optim::{AdamW, AdamWConfig};
use crate::numcore::rng::streams;
use crate::numcore::{seeded_rng, Graph, ParamStore, RngState, RngStream, Tensor};
use crate::synth::{generate_scene, upsample_nearest, Scene};

/// Seed of the shared held-out scene set; independent of the run seed.
pub const HELDOUT_SEED: u64 = 0x5eed_4e1d;
/// Seed of the evaluation-time sampling noise.
pub const EVAL_SEED: u64 = 0xe7a1;
const EVAL_CHUNK: usize = 25;

/// Learnable parameters, optimizer moments, and random streams.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
    pub data_rng: RngStream,
    pub sampling_rng: RngStream,
}

impl TrainState {
    /// Fresh parameters for `config`, with the matching model structure.
    pub fn init(config: &TrainConfig) -> Result<(PplModel, TrainState)> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init_rng = seeded_rng(config.seed, streams::INIT);
        let model = PplModel::new(&mut params, &mut init_rng, config.model_dims())?;
        let optimizer = AdamW::new(AdamWConfig::default(), &params);
        let state = TrainState {
            config: config.clone(),
            params,
            optimizer,
            step: 0,
            data_rng: seeded_rng(config.seed, streams::DATA),
            sampling_rng: seeded_rng(config.seed, streams::SAMPLING),
        };
        Ok((model, state))
    }

    pub fn next_batch(&mut self, palette: &Tensor) -> Result<Vec<Scene>> {
        let spec = self.config.scene_spec();
        (0..self.config.batch_size)
            .map(|_| generate_scene(&spec, palette, &mut self.data_rng))
            .collect()
    }
}

fn check_finite(fwd: &BatchForward, g: &Graph, step: u64) -> Result<[f64; 6]> {
    let named = [
        ("task", fwd.task),
        ("pixel", fwd.pixel),
        ("prob", fwd.prob),
        ("div", fwd.div),
        ("kl", fwd.kl),
        ("total", fwd.total),
    ];
    let mut out = [0.0; 6];
    for (i, (name, v)) in named.iter().enumerate() {
        let x = g.value(*v).item();
        if !x.is_finite() {
            return Err(Error::NonFinite {
                component: format!("loss_{name}"),
                step,
            });
        }
        out[i] = x;
    }
    Ok(out)
}

/// Predicted full-resolution labels per scene from Monte-Carlo probabilities.
fn full_res_predictions(model: &PplModel, probs: &Tensor, scenes: usize) -> Vec<Vec<usize>> {
    let (hp, wp) = model.dims.image().grid();
    let p = hp * wp;
    let arg = probs.argmax_rows();
    (0..scenes)
        .map(|i| upsample_nearest(&arg[i * p..(i + 1) * p], hp, wp, model.dims.patch))
        .collect()
}

fn log_sq_mean(u: &[f64]) -> f64 {
    u.iter().map(|x| 2.0 * x.ln()).sum::<f64>() / u.len().max(1) as f64
}

/// One optimizer step on `batch`.
pub fn train_step(model: &PplModel, state: &mut TrainState, batch: &[Scene]) -> Result<Metrics> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let refs: Vec<&Scene> = batch.iter().collect();
    let cfg = &state.config;
    let next_step = state.step + 1;
    let (losses, grads, probs, uncertainty) = {
        let mut g = Graph::with_params(&state.params);
        let fwd = model.forward(
            &mut g,
            &refs,
            ForwardOptions {
                samples: cfg.n,
                mode: cfg.sampling_mode,
                weights: cfg.weights,
                noise: Noise::Draw(&mut state.sampling_rng),
                zero_sigma: false,
            },
        )?;
        let losses = check_finite(&fwd, &g, next_step)?;
        let grads = g.backward(fwd.total)?.into_params();
        (losses, grads, g.value(fwd.probs).clone(), fwd.uncertainty)
    };
    if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
        return Err(Error::NonFinite {
            component: format!("gradient of {}", state.params.name(crate::numcore::ParamId(bad))),
            step: next_step,
        });
    }
    state
        .optimizer
        .update(&mut state.params, &grads, state.config.learning_rate);
    state.step = next_step;

    let mut conf = Confusion::new(model.dims.classes);
    for (scene, pred) in batch.iter().zip(full_res_predictions(model, &probs, batch.len())) {
        conf.add(&scene.labels, &pred);
    }
    let [task, pixel, prob, div, kl, total] = losses;
    Ok(Metrics {
        step: state.step,
        loss_total: total,
        loss_task: task,
        loss_pixel: pixel,
        loss_prob: prob,
        loss_div: div,
        loss_kl: kl,
        acc: conf.accuracy(),
        miou: conf.mean_iou(),
        uncertainty: log_sq_mean(&uncertainty),
    })
}

/// Per-scene evaluation outputs.
#[derive(Clone, Debug)]
pub struct SceneEval {
    pub prediction: Vec<usize>,
    pub accuracy: f64,
    pub uncertainty: f64,
}

/// Forward-only pass over `scenes` with fixed evaluation noise.
pub fn evaluate_detailed(
    model: &PplModel,
    params: &ParamStore,
    config: &TrainConfig,
    scenes: &[Scene],
) -> Result<(Metrics, Vec<SceneEval>)> {
    if scenes.is_empty() {
        return Err(Error::input("evaluation needs at least one scene"));
    }
    let mut rng = seeded_rng(EVAL_SEED, streams::EVAL);
    let mut conf = Confusion::new(model.dims.classes);
    let mut sums = [0.0; 6];
    let mut per_scene = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(EVAL_CHUNK) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let mut g = Graph::with_params(params);
        let fwd = model.forward(
            &mut g,
            &refs,
            ForwardOptions {
                samples: config.n,
                mode: config.sampling_mode,
                weights: config.weights,
                noise: Noise::Draw(&mut rng),
                zero_sigma: false,
            },
        )?;
        let losses = check_finite(&fwd, &g, 0)?;
        for (s, l) in sums.iter_mut().zip(losses) {
            *s += l * chunk.len() as f64;
        }
        let preds = full_res_predictions(model, g.value(fwd.probs), chunk.len());
        for ((scene, pred), u) in chunk.iter().zip(preds).zip(&fwd.uncertainty) {
            conf.add(&scene.labels, &pred);
            let correct = scene.labels.iter().zip(&pred).filter(|(a, b)| a == b).count();
            per_scene.push(SceneEval {
                accuracy: correct as f64 / scene.labels.len() as f64,
                uncertainty: *u,
                prediction: pred,
            });
        }
    }
    let n = scenes.len() as f64;
    let [task, pixel, prob, div, kl, total] = sums.map(|s| s / n);
    let u: Vec<f64> = per_scene.iter().map(|s| s.uncertainty).collect();
    let metrics = Metrics {
        step: 0,
        loss_total: total,
        loss_task: task,
        loss_pixel: pixel,
        loss_prob: prob,
        loss_div: div,
        loss_kl: kl,
        acc: conf.accuracy(),
        miou: conf.mean_iou(),
        uncertainty: log_sq_mean(&u),
    };
    Ok((metrics, per_scene))
}

/// Held-out metrics for the parameters in `params`.
pub fn evaluate(model: &PplModel, params: &ParamStore, config: &TrainConfig, scenes: &[Scene]) -> Result<Metrics> {
    evaluate_detailed(model, params, config, scenes).map(|(m, _)| m)
}

/// The shared held-out set for a scene spec.
pub fn heldout_scenes(config: &TrainConfig) -> Result<Vec<Scene>> {
    let spec = config.scene_spec();
    let palette = spec.palette();
    let mut rng = seeded_rng(HELDOUT_SEED, streams::HELDOUT);
    (0..config.heldout_scenes)
        .map(|_| generate_scene(&spec, &palette, &mut rng))
        .collect()
}

/// A training run in progress: model, state, data, and logs.
pub struct Trainer {
    pub model: PplModel,
    pub state: TrainState,
    pub heldout: Vec<Scene>,
    pub palette: Tensor,
    /// One row per optimizer step.
    pub train_log: Vec<Metrics>,
    /// Held-out rows at step 0 and every `eval_every` steps.
    pub eval_log: Vec<Metrics>,
}

impl Trainer {
    /// Initialize parameters and run the step-0 evaluation.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let (model, state) = TrainState::init(config)?;
        let heldout = heldout_scenes(config)?;
        let palette = config.scene_spec().palette();
        let mut t = Self {
            model,
            state,
            heldout,
            palette,
            train_log: Vec::new(),
            eval_log: Vec::new(),
        };
        let m = t.evaluate_now()?;
        t.eval_log.push(m);
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn evaluate_now(&self) -> Result<Metrics> {
        let mut m = evaluate(&self.model, &self.state.params, &self.state.config, &self.heldout)?;
        m.step = self.state.step;
        Ok(m)
    }

    /// One training step on a fresh batch, plus a held-out evaluation when due.
    pub fn step(&mut self) -> Result<()> {
        let batch = self.state.next_batch(&self.palette)?;
        let m = train_step(&self.model, &mut self.state, &batch)?;
        self.train_log.push(m);
        if self.state.step % self.state.config.eval_every == 0 {
            let e = self.evaluate_now()?;
            self.eval_log.push(e);
        }
        Ok(())
    }

    /// Step until `steps` optimizer updates have been applied in total.
    pub fn run_to(&mut self, steps: u64) -> Result<()> {
        while self.state.step < steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.restore()
    }
}

/// Run `config.steps` steps from scratch.
pub fn train(config: &TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    t.run_to(config.steps)?;
    Ok(t)
}

pub const CHECKPOINT_FORMAT: &str = "probprompt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

/// Versioned, self-describing snapshot of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub data_rng: RngState,
    pub sampling_rng: RngState,
    pub params: Vec<NamedArray>,
    pub optimizer: OptimizerState,
    pub train_log: Vec<Metrics>,
    pub eval_log: Vec<Metrics>,
}

fn named(store: &ParamStore, tensors: impl Iterator<Item = Tensor>) -> Vec<NamedArray> {
    store
        .ids()
        .zip(tensors)
        .map(|(id, t)| NamedArray {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            data: t.into_data(),
        })
        .collect()
}

fn load_into(store: &ParamStore, arrays: &[NamedArray], what: &str) -> Result<Vec<Tensor>> {
    if arrays.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {} arrays, found {}",
            store.len(),
            arrays.len()
        )));
    }
    let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
    for a in arrays {
        let id = store
            .id(&a.name)
            .ok_or_else(|| Error::Checkpoint(format!("{what}: unknown array {}", a.name)))?;
        if store.get(id).shape() != a.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{what}: {} has shape {:?}, expected {:?}",
                a.name,
                a.shape,
                store.get(id).shape()
            )));
        }
        out[id.index()] = Some(Tensor::new(a.shape.clone(), a.data.clone())?);
    }
    out.into_iter()
        .map(|t| t.ok_or_else(|| Error::Checkpoint(format!("{what}: missing array"))))
        .collect()
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        let s = &t.state;
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: s.config.clone(),
            step: s.step,
            data_rng: s.data_rng.state(),
            sampling_rng: s.sampling_rng.state(),
            params: named(&s.params, s.params.ids().map(|id| s.params.get(id).clone())),
            optimizer: OptimizerState {
                config: s.optimizer.config,
                step: s.optimizer.step,
                m: named(&s.params, s.optimizer.m.iter().cloned()),
                v: named(&s.params, s.optimizer.v.iter().cloned()),
            },
            train_log: t.train_log.clone(),
            eval_log: t.eval_log.clone(),
        }
    }

    pub fn restore(&self) -> Result<Trainer> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let (model, mut state) = TrainState::init(&self.config)?;
        let params = load_into(&state.params, &self.params, "params")?;
        let m = load_into(&state.params, &self.optimizer.m, "optimizer.m")?;
        let v = load_into(&state.params, &self.optimizer.v, "optimizer.v")?;
        for (id, t) in state.params.ids().collect::<Vec<_>>().into_iter().zip(params) {
            *state.params.get_mut(id) = t;
        }
        state.optimizer = AdamW {
            config: self.optimizer.config,
            step: self.optimizer.step,
            m,
            v,
        };
        state.step = self.step;
        state.data_rng = RngStream::from_state(self.data_rng);
        state.sampling_rng = RngStream::from_state(self.sampling_rng);
        let heldout = heldout_scenes(&self.config)?;
        let palette = self.config.scene_spec().palette();
        Ok(Trainer {
            model,
            state,
            heldout,
            palette,
            train_log: self.train_log.clone(),
            eval_log: self.eval_log.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
