use amhnet::datagen::{DatasetSpec, Sample, SceneRanges};
use amhnet::mhnet::{Ablation, Model, ModelConfig};
use amhnet::train::{train_loop, Recorder, SgdConfig, TrainConfig};

fn one_sample(side: usize, seed: u64) -> Vec<Sample> {
    let spec = DatasetSpec {
        seed,
        train: 1,
        test: 0,
        ranges: SceneRanges {
            height: side,
            width: side,
            ..Default::default()
        },
    };
    spec.generate().unwrap().0
}

fn run(data: &[Sample], iterations: usize, sgd: SgdConfig) -> Recorder {
    let mut model = Model::new(ModelConfig::new(Ablation::Flag)).unwrap();
    let cfg = TrainConfig {
        iterations,
        sgd,
        flip: false,
        ..Default::default()
    };
    let mut rec = Recorder::default();
    train_loop(data, &mut model, &cfg, &mut rec).unwrap();
    rec
}

#[test]
fn single_sample_loss_never_rises_at_small_lr() {
    let data = one_sample(32, 11);
    let accumulate = 4;
    let rec = run(
        &data,
        50 * accumulate,
        SgdConfig {
            lr: 1e-6,
            momentum: 0.0,
            weight_decay: 0.0,
            accumulate,
            ..Default::default()
        },
    );
    // every iteration of one accumulation window sees the same weights
    let per_step: Vec<f64> = rec.metrics.chunks(accumulate).map(|w| w[0].loss).collect();
    assert_eq!(per_step.len(), 50);
    for (i, w) in per_step.windows(2).enumerate() {
        assert!(w[1] <= w[0], "step {i}: {} -> {}", w[0], w[1]);
    }
    assert!(per_step[49] < per_step[0]);
}

#[test]
fn flag_overfits_one_sample() {
    let data = one_sample(32, 12);
    let pixels = (32 * 32) as f64;
    let rec = run(
        &data,
        2000,
        SgdConfig {
            accumulate: 1,
            ..Default::default()
        },
    );
    let best = rec
        .metrics
        .iter()
        .map(|m| m.fused_loss / pixels)
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.05, "best per-pixel fused loss {best}");
}
