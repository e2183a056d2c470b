// Temporary calibration: held-out PSNR gain of the toy multi-focus model
// as training progresses.
use mgdn::data::{self, SceneSpec};
use mgdn::metrics;
use mgdn::model::{AdamConfig, Model, ModelConfig, Task, Trainer};

fn main() {
    mgdn::init_threads();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let share: bool = args.get(3).map(|s| s == "share").unwrap_or(false);
    let lambda: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let train: Vec<_> = (0..200)
        .map(|i| data::gen_multifocus(&SceneSpec { seed: 1000 + i, height: 64, width: 64, primitives: 6 }, 2.0))
        .collect();
    let held: Vec<_> = (0..20)
        .map(|i| data::gen_multifocus(&SceneSpec { seed: 9000 + i, height: 64, width: 64, primitives: 6 }, 2.0))
        .collect();

    let mut cfg = ModelConfig::for_task(Task::Mff);
    cfg.share_stream_params = share;
    cfg.lambda = lambda;
    let model = Model::init(cfg, 7).unwrap();
    let mut tr = Trainer::new(model, AdamConfig { lr, ..Default::default() }, 7);

    let eval_gain = |tr: &Trainer| -> (f64, f64) {
        let mut gains = Vec::new();
        let mut fused_mean = 0.0;
        for s in &held {
            let inf = tr.model.infer(&s.inputs).unwrap();
            let pf = metrics::psnr(&inf.output, &s.gt, 1.0).unwrap();
            let p0 = metrics::psnr(&s.inputs[0], &s.gt, 1.0).unwrap();
            let p1 = metrics::psnr(&s.inputs[1], &s.gt, 1.0).unwrap();
            gains.push(pf - p0.max(p1));
            fused_mean += pf / held.len() as f64;
        }
        (gains.iter().sum::<f64>() / gains.len() as f64, fused_mean)
    };

    let t0 = std::time::Instant::now();
    for step in 1..=steps {
        let idx = tr.next_sample(train.len());
        let s = &train[idx];
        let r = tr.train_step(&s.inputs, &s.gt).unwrap();
        if step % 100 == 0 {
            let (gain, fused) = eval_gain(&tr);
            println!(
                "step {step}: loss {:.4} l1 {:.4} mi {:.4} | held gain {gain:+.2} dB (fused {fused:.2}) | {:.1}s",
                r.total, r.l1, r.mi, t0.elapsed().as_secs_f64()
            );
        }
    }
}
