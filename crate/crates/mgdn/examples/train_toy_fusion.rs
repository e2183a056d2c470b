//! Trains a small multi-focus model for a couple hundred steps and shows
//! the held-out PSNR moving past the best single input.

use mgdn::data::{self, SceneSpec};
use mgdn::metrics;
use mgdn::model::{AdamConfig, Model, ModelConfig, Task, Trainer};

fn main() -> mgdn::Result<()> {
    mgdn::init_threads();
    let train: Vec<_> = (0..40)
        .map(|i| {
            data::gen_multifocus(
                &SceneSpec { seed: 100 + i, height: 32, width: 32, primitives: 6 },
                2.0,
            )
        })
        .collect();
    let held = data::gen_multifocus(
        &SceneSpec { seed: 999, height: 32, width: 32, primitives: 6 },
        2.0,
    );

    let mut cfg = ModelConfig::for_task(Task::Mff);
    cfg.stages = 2;
    cfg.channels = 16;
    let model = Model::init(cfg, 1)?;
    let mut trainer = Trainer::new(model, AdamConfig { lr: 2e-3, ..Default::default() }, 1);

    let report = |m: &Model| -> mgdn::Result<(f64, f64)> {
        let fused = m.infer(&held.inputs)?.output;
        let best_input = held
            .inputs
            .iter()
            .map(|i| metrics::psnr(i, &held.gt, 1.0).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((metrics::psnr(&fused, &held.gt, 1.0)?, best_input))
    };

    let (initial, best_input) = report(&trainer.model)?;
    println!("best single input: {best_input:.2} dB, untrained fusion: {initial:.2} dB");
    for step in 1..=300 {
        let idx = trainer.next_sample(train.len());
        let s = &train[idx];
        let r = trainer.train_step(&s.inputs, &s.gt)?;
        if step % 50 == 0 {
            let (fused, _) = report(&trainer.model)?;
            println!(
                "step {step}: total {:.4} (l1 {:.4}, mi {:.4}) | held-out fusion {fused:.2} dB",
                r.total, r.l1, r.mi
            );
        }
    }
    Ok(())
}
