//! One-seed desk-scale pilot: full replay config vs naive fine-tuning
//! on the bundled digit data, with per-task progress.

use dfgr_core::dataset::{self, TaskSchedule};
use dfgr_core::losses::LossWeights;
use dfgr_core::trainer::{self, ModelSizes, TrainConfig};
use std::path::Path;
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (ti, tl) = dataset::mnist_paths(&data, true).unwrap();
    let train = dataset::preprocess(&dataset::load_idx(&ti, &tl).unwrap()).unwrap();
    let train = dataset::subsample_per_class(&train, 1000, 0).unwrap();
    let (ei, el) = dataset::mnist_paths(&data, false).unwrap();
    let test = dataset::preprocess(&dataset::load_idx(&ei, &el).unwrap()).unwrap();
    println!("train {} images, test {} images", train.len(), test.len());

    let schedule = TaskSchedule::balanced();
    let sizes = ModelSizes::desk();
    let config = TrainConfig {
        seed,
        loss_weights: LossWeights::full(),
        replay_adjust: true,
        ..TrainConfig::desk()
    };

    let t0 = Instant::now();
    let full = trainer::run_schedule(&train, &test, &schedule, &sizes, &config, None).unwrap();
    println!("dfgr full ({:.1} min):", t0.elapsed().as_secs_f64() / 60.0);
    for r in &full {
        println!(
            "  task {}: avg {:.4} (cls epochs {}, gen epochs {}) per-class {:?}",
            r.task_index,
            r.average_accuracy,
            r.classifier_epochs,
            r.generator_epochs,
            r.per_class_accuracy
                .iter()
                .map(|(c, a)| format!("{c}:{a:.3}"))
                .collect::<Vec<_>>()
        );
    }

    let t0 = Instant::now();
    let naive =
        trainer::naive_baseline(&train, &test, &schedule, &sizes.classifier, &config, None)
            .unwrap();
    println!("naive ({:.1} min):", t0.elapsed().as_secs_f64() / 60.0);
    for r in &naive {
        println!(
            "  task {}: avg {:.4} per-class {:?}",
            r.task_index,
            r.average_accuracy,
            r.per_class_accuracy
                .iter()
                .map(|(c, a)| format!("{c}:{a:.3}"))
                .collect::<Vec<_>>()
        );
    }
    println!(
        "final: dfgr {:.4} vs naive {:.4} (margin {:.1} points)",
        full.last().unwrap().average_accuracy,
        naive.last().unwrap().average_accuracy,
        (full.last().unwrap().average_accuracy - naive.last().unwrap().average_accuracy) * 100.0
    );
}
