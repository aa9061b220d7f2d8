//! Trains PrimNet on the generated texture dataset and reports held-out
//! closed-set rank-1, TAR@1%FAR and the template-size sweep.
//!
//! Usage: `cargo run --example toy_train -- [epochs] [lr] [batch] [noise]`

use std::time::Instant;

use primid_core::eval::{closed_set_rank1, tar_at_far, template_size_sweep, verification_scores, FAR_1};
use primid_core::model::{build_primnet, train, PrimNetConfig, TrainConfig, TrainingSample};
use primid_core::pipeline::{embed_subjects, sweep_trend, CropSample};
use primid_core::synth::{generate, ToySpec};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let defaults = TrainConfig::default();
    let spec = ToySpec {
        noise: arg(4, ToySpec::default().noise),
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: arg(1, defaults.epochs),
        lr: arg(2, defaults.lr),
        batch_size: arg(3, defaults.batch_size),
        ..defaults
    };
    let held_out_from = spec.per_class * 3 / 4;
    let samples: Vec<(bool, CropSample)> = generate(&spec)
        .into_iter()
        .map(|img| {
            let sample = CropSample {
                individual: img.id(),
                image_ref: img.name(),
                crop: img.crop,
            };
            (img.index >= held_out_from, sample)
        })
        .collect();
    let data: Vec<TrainingSample> = samples
        .iter()
        .filter(|(held_out, _)| !held_out)
        .map(|(_, s)| TrainingSample {
            crop: s.crop.clone(),
            label: s.individual.clone(),
        })
        .collect();

    let mut model = build_primnet(&PrimNetConfig::default()).expect("default config");
    let start = Instant::now();
    let report = train(&mut model, &data, &train_cfg).expect("training");
    println!("trained in {:.1?}", start.elapsed());
    println!("loss {:.3} -> {:?}", report.initial_loss, report.epoch_losses);

    let test = embed_subjects(&model, samples.iter().filter(|(h, _)| *h).map(|(_, s)| s)).expect("embedding");
    let rank1 = closed_set_rank1(&test, 100, 0).expect("closed set");
    let tar = tar_at_far(&verification_scores(&test).expect("scores").scores, FAR_1).expect("tar");
    println!("rank-1 {:.4}  TAR@1%FAR {:.4} (threshold {:.4})", rank1.mean, tar.tar, tar.threshold);
    let sizes: Vec<usize> = (1..spec.per_class - held_out_from).collect();
    let sweep = template_size_sweep(&test, &sizes, FAR_1, 20, 0).expect("sweep");
    for p in &sweep {
        println!("size {:2}  TAR {:.4}", p.size, p.tar);
    }
    println!("spearman {:?}", sweep_trend(&sweep));
}
