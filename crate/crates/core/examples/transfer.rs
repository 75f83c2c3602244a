use std::time::Instant;

use symbiotic::data::{generate, Annotation, GenOptions, SynthSpec};
use symbiotic::model::Variant;
use symbiotic::training::{pretrain_then_transfer, TrainConfig, TransferConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let steps: usize = args.get(2).map_or(600, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(0.05, |s| s.parse().unwrap());
    let n_train: usize = args.get(4).map_or(5000, |s| s.parse().unwrap());
    let bs: usize = args.get(5).map_or(32, |s| s.parse().unwrap());
    let spec = SynthSpec { seed: 1000 + seed, ..SynthSpec::default() };
    let train_ds = generate(&spec, &GenOptions::new(n_train, 0.5)).unwrap();
    let test_spec = SynthSpec { seed: 9_000_000 + seed, ..SynthSpec::default() };
    let test = generate(&test_spec, &GenOptions { annotation: Annotation::Full, ..GenOptions::new(1000, 0.5) }).unwrap();
    let t = Instant::now();
    let cfg = TrainConfig { lr, batch_size: bs, ..TrainConfig::new(Variant::BaselineGap, seed) };
    let rep = pretrain_then_transfer(&cfg, &train_ds, &test, &TransferConfig { seg_samples: 64, steps }, None).unwrap();
    let ious: Vec<String> = rep.arms.iter().map(|a| format!("{} {:.4}", a.name, a.mean_iou)).collect();
    println!("seed {seed}: {} ({:.0}s)", ious.join(", "), t.elapsed().as_secs_f64());
}
