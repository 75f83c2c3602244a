use std::time::Instant;

use symbiotic::data::{generate, Annotation, GenOptions, SynthSpec};
use symbiotic::model::Variant;
use symbiotic::training::{evaluate, train, MaskProvider, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let epochs: usize = args.get(2).map_or(2, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(0.05, |s| s.parse().unwrap());
    let n_train: usize = args.get(4).map_or(5000, |s| s.parse().unwrap());
    let spec = SynthSpec { seed: 1000 + seed, ..SynthSpec::default() };
    let t = Instant::now();
    let train_ds = generate(&spec, &GenOptions::new(n_train, 0.5)).unwrap();
    let test_spec = SynthSpec { seed: 9_000_000 + seed, ..SynthSpec::default() };
    let test = generate(&test_spec, &GenOptions { annotation: Annotation::Full, ..GenOptions::new(1000, 0.5) }).unwrap();
    eprintln!("data {:.1}s", t.elapsed().as_secs_f64());
    for v in [Variant::BaselineGap, Variant::Sa] {
        let t = Instant::now();
        let cfg = TrainConfig { epochs, lr, ..TrainConfig::new(v, seed) };
        let mut run = train(&cfg, &train_ds, None).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let (rep, _) = evaluate(&run.model, &mut run.store, &test, &mut MaskProvider::None, &run.meta, 50).unwrap();
        let last: Vec<f64> = run.records.iter().rev().take(20).map(|r| r.total).collect();
        let aps: Vec<String> = rep.attributes.as_ref().unwrap().per_attribute.iter().map(|a| format!("{:.3}", a.ap.unwrap())).collect();
        println!(
            "seed {seed} {v}: steps {} time {secs:.1}s macroAP {:.4} mIoU {:.4} loss {:.3} aps {}",
            run.records.len(),
            rep.macro_ap().unwrap(),
            rep.mean_iou().unwrap(),
            last.iter().sum::<f64>() / last.len() as f64,
            aps.join(" ")
        );
    }
}
