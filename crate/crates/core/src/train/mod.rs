//! Deep-supervised training.

mod loss;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, ContourMap, EvalOptions, EvalResult, Mask};
use crate::kv::KvMap;
use crate::mhnet::{preprocess, Model};
use crate::tensor::{Tape, Tensor};

pub use loss::{
    balanced_bce, class_balance, deep_supervised_loss, BetaConvention, DeepLoss, LossConfig,
    DEFAULT_EPSILON,
};
pub use optim::{sgd_step, OptimState, SgdConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// When set, replaces `iterations` with `epochs * dataset size`.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub loss: LossConfig,
    /// Random horizontal flips.
    pub flip: bool,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            epochs: None,
            seed: 0,
            sgd: SgdConfig::default(),
            loss: LossConfig::default(),
            flip: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "iterations",
        "epochs",
        "seed",
        "lr",
        "momentum",
        "weight_decay",
        "accumulate",
        "lr_step",
        "lr_decay",
        "beta",
        "epsilon",
        "flip",
        "checkpoint_every",
    ];

    /// Reads the training keys of `kv`; other keys are ignored.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            iterations: kv.get_or("iterations", d.iterations)?,
            epochs: kv.get("epochs")?,
            seed: kv.get_or("seed", d.seed)?,
            sgd: SgdConfig {
                lr: kv.get_or("lr", d.sgd.lr)?,
                momentum: kv.get_or("momentum", d.sgd.momentum)?,
                weight_decay: kv.get_or("weight_decay", d.sgd.weight_decay)?,
                accumulate: kv.get_or("accumulate", d.sgd.accumulate)?,
                lr_step: kv.get_or("lr_step", d.sgd.lr_step)?,
                lr_decay: kv.get_or("lr_decay", d.sgd.lr_decay)?,
            },
            loss: LossConfig {
                beta: kv.get_or("beta", d.loss.beta)?,
                epsilon: kv.get_or("epsilon", d.loss.epsilon)?,
                head_weights: None,
            },
            flip: kv.get_or("flip", d.flip)?,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
        };
        c.sgd.validate()?;
        c.loss.validate()?;
        Ok(c)
    }

    pub fn total_iterations(&self, dataset_len: usize) -> usize {
        match self.epochs {
            Some(e) => e * dataset_len,
            None => self.iterations,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub head_losses: Vec<f64>,
    pub fused_loss: f64,
}

/// Receives progress from [`train_loop`].
pub trait TrainObserver {
    fn on_iteration(&mut self, _m: &IterationMetrics) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` iterations and once at the end.
    fn on_checkpoint(&mut self, _iteration: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct Quiet;

impl TrainObserver for Quiet {}

/// Writes one JSON object per iteration.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> TrainObserver for JsonLines<W> {
    fn on_iteration(&mut self, m: &IterationMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| Error::Tape(e.to_string()))?;
        writeln!(self.0, "{line}")?;
        Ok(())
    }
}

/// Keeps every metrics record in memory.
#[derive(Default)]
pub struct Recorder {
    pub metrics: Vec<IterationMetrics>,
    pub checkpoints: Vec<usize>,
}

impl TrainObserver for Recorder {
    fn on_iteration(&mut self, m: &IterationMetrics) -> Result<()> {
        self.metrics.push(m.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, iteration: usize, _model: &Model) -> Result<()> {
        self.checkpoints.push(iteration);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub updates: usize,
    pub final_loss: Option<f64>,
}

fn flip_tensor(t: &Tensor) -> Tensor {
    let (c, h, w) = t.shape();
    let mut out = t.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, t.get(ch, y, w - 1 - x));
            }
        }
    }
    out
}

fn flip_mask(m: &Mask) -> Mask {
    let (h, w) = (m.height(), m.width());
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, m.get(y, w - 1 - x));
        }
    }
    out
}

/// Forward, loss and backward for one sample; gradients go into `state`.
pub fn train_step(
    model: &Model,
    sample: &Sample,
    loss_cfg: &LossConfig,
    state: &mut OptimState,
) -> Result<DeepLoss> {
    let mut tape = Tape::new();
    let x = tape.input(&preprocess(&sample.image));
    let out = model.forward(&mut tape, x)?;
    let heads: Vec<Tensor> = out.heads.iter().map(|&v| tape.value(v)).collect();
    let fused = tape.value(out.fused);
    let deep = model.config().ablation.deep_supervision();
    if !fused.all_finite() {
        let zero = Tensor::zeros(1, fused.height(), fused.width());
        return Ok(DeepLoss {
            total: f64::NAN,
            heads: vec![f64::NAN; heads.len()],
            fused: f64::NAN,
            head_grads: vec![zero.clone(); heads.len()],
            fused_grad: zero,
        });
    }
    let dl = deep_supervised_loss(&heads, &fused, &sample.edges, loss_cfg, deep)?;
    if !dl.total.is_finite() {
        return Ok(dl);
    }
    let mut seeds: Vec<(crate::tensor::Var, &Tensor)> = vec![(out.fused, &dl.fused_grad)];
    if deep {
        seeds.extend(out.heads.iter().copied().zip(&dl.head_grads));
    }
    let grads = tape.backward(&seeds)?;
    state.accumulate(&grads);
    Ok(dl)
}

/// Trains `model` in place. Sample order and flips are drawn from
/// `cfg.seed`, so identical inputs give identical trajectories.
pub fn train_loop(
    dataset: &[Sample],
    model: &mut Model,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    cfg.loss.validate()?;
    let total = cfg.total_iterations(dataset.len());
    let mut state = OptimState::new(model.params(), cfg.sgd.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut final_loss = None;
    for it in 0..total {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let flipped;
        let sample = if cfg.flip && rng.gen_bool(0.5) {
            flipped = Sample {
                image: flip_tensor(&dataset[idx].image),
                edges: flip_mask(&dataset[idx].edges),
            };
            &flipped
        } else {
            &dataset[idx]
        };
        let lr = cfg.sgd.lr_at(it);
        let dl = train_step(model, sample, &cfg.loss, &mut state)?;
        if !dl.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss {} on sample {idx}", dl.total),
            });
        }
        observer.on_iteration(&IterationMetrics {
            iteration: it,
            loss: dl.total,
            lr,
            head_losses: dl.heads.clone(),
            fused_loss: dl.fused,
        })?;
        final_loss = Some(dl.total);
        if state.ready() {
            sgd_step(model.params_mut(), &mut state, lr)?;
            if model
                .params()
                .entries()
                .iter()
                .any(|e| e.values.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: "non-finite parameter after update".into(),
                });
            }
        }
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < total {
            observer.on_checkpoint(it + 1, model)?;
        }
    }
    observer.on_checkpoint(total, model)?;
    Ok(TrainSummary {
        iterations: total,
        updates: state.updates(),
        final_loss,
    })
}

/// Fused predictions of `model` scored against each sample's edges.
pub fn evaluate_model(model: &Model, samples: &[Sample], opts: &EvalOptions) -> Result<EvalResult> {
    let data = samples
        .iter()
        .map(|s| {
            let p = model.predict(&s.image)?;
            Ok((ContourMap::from_tensor(&p.fused)?, s.edges.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&data, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{random_dataset, SceneRanges};
    use crate::mhnet::{Ablation, ModelConfig};

    fn tiny(ablation: Ablation) -> Model {
        let mut c = ModelConfig::new(ablation);
        for l in &mut c.front.layers {
            l.channels = 3;
        }
        c.hierarchy.branch_channels = 3;
        c.hierarchy.fused_channels = 3;
        c.seed = 1;
        Model::new(c).unwrap()
    }

    fn data(n: usize) -> Vec<Sample> {
        let ranges = SceneRanges {
            height: 16,
            width: 16,
            ..Default::default()
        };
        random_dataset(4, n, &ranges).unwrap()
    }

    fn short(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            sgd: SgdConfig {
                accumulate: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let mut m = tiny(Ablation::Flag);
        let init = m.clone();
        let cfg = TrainConfig {
            epochs: Some(0),
            ..Default::default()
        };
        let mut rec = Recorder::default();
        let s = train_loop(&data(2), &mut m, &cfg, &mut rec).unwrap();
        assert_eq!(s.iterations, 0);
        assert_eq!(m, init);
        assert_eq!(rec.checkpoints, vec![0]);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let d = data(3);
        let run = || {
            let mut m = tiny(Ablation::Plag);
            let mut rec = Recorder::default();
            train_loop(&d, &mut m, &short(6), &mut rec).unwrap();
            (m, rec.metrics)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, tiny(Ablation::Plag));
    }

    #[test]
    fn metrics_and_checkpoints() {
        let d = data(2);
        let mut m = tiny(Ablation::Flag);
        let mut buf = Vec::new();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            ..short(5)
        };
        train_loop(&d, &mut m, &cfg, &mut JsonLines(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        let v: serde_json::Value = serde_json::from_str(lines[4]).unwrap();
        assert_eq!(v["iteration"], 4);
        assert_eq!(v["head_losses"].as_array().unwrap().len(), 4);
        let mut rec = Recorder::default();
        train_loop(&d, &mut tiny(Ablation::Flag), &cfg, &mut rec).unwrap();
        assert_eq!(rec.checkpoints, vec![2, 4, 5]);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let cfg = TrainConfig {
            sgd: SgdConfig {
                lr: 1e300,
                accumulate: 1,
                ..Default::default()
            },
            iterations: 20,
            ..Default::default()
        };
        let mut m = tiny(Ablation::Flag);
        let e = train_loop(&data(2), &mut m, &cfg, &mut Quiet).unwrap_err();
        assert!(matches!(e, Error::Diverged { .. }), "{e}");
    }

    #[test]
    fn no_deep_sup_ignores_intermediate_heads() {
        let d = data(1);
        let m = tiny(Ablation::NoDeepSup);
        let mut s = OptimState::new(m.params(), SgdConfig::default()).unwrap();
        let dl = train_step(&m, &d[0], &LossConfig::default(), &mut s).unwrap();
        assert_eq!(dl.total, dl.fused);
        let f = tiny(Ablation::Flag);
        let dl = train_step(&f, &d[0], &LossConfig::default(), &mut s).unwrap();
        let sum: f64 = dl.heads.iter().sum::<f64>() + dl.fused;
        assert!((dl.total - sum).abs() < 1e-9);
    }

    #[test]
    fn flips_are_involutions() {
        let d = data(1);
        assert_eq!(flip_tensor(&flip_tensor(&d[0].image)), d[0].image);
        assert_eq!(flip_mask(&flip_mask(&d[0].edges)), d[0].edges);
        assert_ne!(flip_mask(&d[0].edges), d[0].edges);
    }

    #[test]
    fn config_from_kv() {
        let kv = KvMap::parse("lr=0.01\naccumulate=5\nbeta=as_written\nflip=false\n").unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(c.sgd.lr, 0.01);
        assert_eq!(c.sgd.accumulate, 5);
        assert_eq!(c.loss.beta, BetaConvention::AsWritten);
        assert!(!c.flip);
        assert!(TrainConfig::from_kv(&KvMap::parse("epsilon=0.5").unwrap()).is_err());
    }
}
