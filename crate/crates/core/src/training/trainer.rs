use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::model::{Ctx, Example, Model};
use crate::numerics::{Graph, ParamGroup, ParamId};

use super::loss::{constrained_loss, constrained_rows};
use super::optim::{lr_at_step, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f32,
    pub beta: f32,
    pub label_smoothing: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub warmup_steps: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Target tokens (end markers included) per batch.
    pub batch_tokens: usize,
    pub seed: u64,
    pub log_interval: u64,
    pub clip_norm: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.8,
            beta: 0.2,
            label_smoothing: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            warmup_steps: 400,
            stage1_steps: 2000,
            stage2_steps: 500,
            batch_tokens: 1000,
            seed: 1,
            log_interval: 50,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights need alpha, beta >= 0 and a positive sum, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} not in [0, 1)",
                self.label_smoothing
            )));
        }
        if self.batch_tokens == 0 || self.warmup_steps == 0 || self.log_interval == 0 {
            return Err(Error::Config(
                "batch_tokens, warmup_steps and log_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Base parameters only, standard objective, no constraints.
    One,
    /// Every parameter, weighted objective, sampled constraints.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss: f32,
    pub lr: f32,
}

/// Interval-averaged records plus the raw per-step losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub intervals: Vec<StepRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Lines of `step<TAB>stage<TAB>loss<TAB>lr`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.intervals {
            writeln!(w, "{}\t{}\t{:.6}\t{:.6e}", r.step, r.stage.number(), r.loss, r.lr)?;
        }
        Ok(())
    }

    /// Exponential moving average of per-step losses of `stage`, sampled at
    /// each step of that stage (counted from 1).
    pub fn ema(&self, stage: Stage, decay: f32) -> Vec<f32> {
        let mut out = Vec::new();
        let mut acc = None;
        for r in self.steps.iter().filter(|r| r.stage == stage) {
            let a = acc.map_or(r.loss, |a: f32| decay * a + (1.0 - decay) * r.loss);
            acc = Some(a);
            out.push(a);
        }
        out
    }
}

/// Splits example indices into batches of roughly `batch_tokens` target
/// tokens, in a fresh random order every epoch.
fn make_batches(examples: &[Example], batch_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for i in order {
        cur.push(i);
        tokens += examples[i].target.len() + 1;
        if tokens >= batch_tokens {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Model, optimizer and schedule position of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Global step shared by both stages for the learning-rate schedule.
    pub step: u64,
    pub log: TrainLog,
    rng: ChaCha8Rng,
    batches: Vec<Vec<usize>>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            model.params(),
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            adam,
            config,
            step: 0,
            log: TrainLog::default(),
            rng,
            batches: Vec::new(),
        })
    }

    /// Resumes from a saved model and optimizer state.
    pub fn resume(model: Model, adam: Adam, config: TrainConfig, step: u64) -> Result<Self> {
        let mut t = Trainer::new(model, config)?;
        t.adam = adam;
        t.step = step;
        t.rng = ChaCha8Rng::seed_from_u64(t.config.seed ^ step.rotate_left(32));
        Ok(t)
    }

    fn trainable(&self, stage: Stage) -> Vec<ParamId> {
        let p = self.model.params();
        match stage {
            Stage::One => p.ids_in(ParamGroup::Base).collect(),
            Stage::Two => p.ids().collect(),
        }
    }

    fn next_batch(&mut self, examples: &[Example]) -> Vec<usize> {
        if self.batches.is_empty() {
            self.batches = make_batches(examples, self.config.batch_tokens, &mut self.rng);
            self.batches.reverse();
        }
        self.batches.pop().expect("non-empty corpus gives a batch")
    }

    /// One optimisation step; returns the per-token loss.
    pub fn train_step(&mut self, examples: &[Example], stage: Stage) -> Result<f32> {
        let idx = self.next_batch(examples);
        let empty = ConstraintSet::empty();
        let stripped: Vec<Example>;
        let batch: Vec<&Example> = match stage {
            Stage::One => {
                stripped = idx
                    .iter()
                    .map(|&i| Example {
                        source: examples[i].source.clone(),
                        target: examples[i].target.clone(),
                        constraints: empty.clone(),
                    })
                    .collect();
                stripped.iter().collect()
            }
            Stage::Two => idx.iter().map(|&i| &examples[i]).collect(),
        };
        let (alpha, beta) = match stage {
            Stage::One => (1.0, 1.0),
            Stage::Two => (self.config.alpha, self.config.beta),
        };

        let mut g = Graph::new();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(self.rng_seed_for_step());
        let tf = self.model.teacher_forced(&mut g, &batch, &mut Ctx::train(&mut drop_rng))?;
        let sets: Vec<&ConstraintSet> = batch.iter().map(|e| &e.constraints).collect();
        let mask = constrained_rows(&tf, &sets);
        let terms = constrained_loss(
            &mut g,
            tf.out.probs,
            &tf.gold,
            &mask,
            alpha,
            beta,
            self.config.label_smoothing,
        )?;
        let loss = g.scale(terms.total, 1.0 / terms.tokens as f32);
        if log::log_enabled!(log::Level::Trace) {
            if let Some(m) = tf.out.mixture {
                let t = g.value(m);
                log::trace!("mean mixture mass {:.4}", t.data().iter().sum::<f32>() / t.rows() as f32);
            }
        }
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Invalid(format!("non-finite loss at step {}", self.step + 1)));
        }
        let mut grads = g.backward(loss, self.model.params())?;
        if let Some(max) = self.config.clip_norm {
            let n = grads.global_norm();
            if n > max {
                grads.scale(max / n);
            }
        }
        self.step += 1;
        let lr = lr_at_step(self.step, self.model.config().d_model, self.config.warmup_steps)?;
        let ids = self.trainable(stage);
        self.adam.update(self.model.params_mut(), &grads, lr, &ids)?;
        self.log.steps.push(StepRecord {
            step: self.step,
            stage,
            loss: value,
            lr,
        });
        Ok(value)
    }

    fn rng_seed_for_step(&self) -> u64 {
        crate::datapipe::mix_seed(self.config.seed ^ 0xD5, self.step)
    }

    pub fn run_stage(&mut self, examples: &[Example], stage: Stage, steps: u64) -> Result<()> {
        if examples.is_empty() {
            return Err(Error::Invalid("no training examples".into()));
        }
        let interval = self.config.log_interval;
        let mut acc = 0.0f64;
        let mut n = 0u64;
        for k in 1..=steps {
            let loss = self.train_step(examples, stage)?;
            acc += loss as f64;
            n += 1;
            if k % interval == 0 || k == steps {
                let lr = self.log.steps.last().map_or(0.0, |r| r.lr);
                let rec = StepRecord {
                    step: self.step,
                    stage,
                    loss: (acc / n as f64) as f32,
                    lr,
                };
                log::info!("step {} stage {} loss {:.4} lr {:.2e}", rec.step, stage.number(), rec.loss, lr);
                self.log.intervals.push(rec);
                acc = 0.0;
                n = 0;
            }
        }
        Ok(())
    }
}

/// Both stages back to back. `constraints[i]` belongs to `examples[i]`
/// and replaces its constraint set for stage two.
pub fn train(
    model: Model,
    config: TrainConfig,
    examples: &[Example],
    constraints: &[ConstraintSet],
) -> Result<Trainer> {
    if constraints.len() != examples.len() {
        return Err(Error::Invalid(format!(
            "{} constraint sets for {} examples",
            constraints.len(),
            examples.len()
        )));
    }
    let with_constraints: Vec<Example> = examples
        .iter()
        .zip(constraints)
        .map(|(e, c)| Example {
            constraints: c.clone(),
            ..e.clone()
        })
        .collect();
    let mut t = Trainer::new(model, config)?;
    let (s1, s2) = (t.config.stage1_steps, t.config.stage2_steps);
    t.run_stage(&with_constraints, Stage::One, s1)?;
    t.run_stage(&with_constraints, Stage::Two, s2)?;
    Ok(t)
}
