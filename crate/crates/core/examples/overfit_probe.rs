use salgrid_core::loss::LossWeights;
use salgrid_core::metrics;
use salgrid_core::model::{model_forward, ModelConfig, Phase, Variant};
use salgrid_core::trainer::{synthetic_dataset, train_loop, TrainOptions};
use salgrid_core::data::SaliencyMap;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(200);
    let sz: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let cfg = Variant::TranSalNetRes.configure(&ModelConfig::toy(sz, sz));
    let data = synthetic_dataset(4, sz, sz, seed);
    let opts = TrainOptions {
        epochs: steps,
        batch_size: 4,
        patience: steps,
        base_lr: lr,
        lr_decay_every: 100000,
        seed,
        ..TrainOptions::default()
    };
    let t0 = std::time::Instant::now();
    let out = train_loop(&data, &data, &cfg, &opts, None).unwrap();
    let first = out.history.train_loss(0).unwrap();
    let last = out.history.train_loss(out.final_epoch).unwrap();
    let mut ccs = Vec::new();
    for s in &data {
        let f = model_forward(&cfg, &out.params, &s.image, Phase::Eval).unwrap();
        let pm = SaliencyMap::from_tensor(f.prediction()).unwrap();
        ccs.push(metrics::cc(&pm, &s.gt_map).unwrap());
    }
    let cc_mean = ccs.iter().sum::<f64>() / ccs.len() as f64;
    println!(
        "lr={lr} seed={seed} steps={steps}: loss {first:.4} -> {last:.4} (ratio {:.3}), cc={cc_mean:.4}, mins cc={:?}, took {:.1}s",
        last / first, ccs.iter().cloned().fold(f64::INFINITY, f64::min), t0.elapsed().as_secs_f64()
    );
}
