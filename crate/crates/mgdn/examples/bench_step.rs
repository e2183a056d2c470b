// Temporary micro-benchmark for the training step.
use std::time::Instant;

use mgdn::model::{AdamConfig, Model, ModelConfig, Task, Trainer};
use mgdn::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    mgdn::init_threads();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig::for_task(Task::Mff);
    let model = Model::init(cfg, 1).unwrap();
    let mut img = |c: usize| Tensor::from_fn(vec![64, 64, c], |_| rng.gen::<f64>());
    let i1 = img(3);
    let i2 = img(3);
    let gt = img(3);

    // Forward only.
    let t0 = Instant::now();
    let mut nodes = 0;
    for _ in 0..5 {
        let mut tape = Tape::new();
        let leased = model.params.lease(&mut tape);
        let iv = [
            tape.constant(i1.data().to_vec(), i1.shape().to_vec()),
            tape.constant(i2.data().to_vec(), i2.shape().to_vec()),
        ];
        let fwd = model.forward(&mut tape, &leased, &iv).unwrap();
        let gtv = tape.constant(gt.data().to_vec(), gt.shape().to_vec());
        let _lv = model.training_loss(&mut tape, &leased, &fwd, gtv).unwrap();
        nodes = tape.num_nodes();
    }
    println!("forward+loss: {:?}/it, {nodes} nodes", t0.elapsed() / 5);

    // Forward + backward.
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let leased = model.params.lease(&mut tape);
        let iv = [
            tape.constant(i1.data().to_vec(), i1.shape().to_vec()),
            tape.constant(i2.data().to_vec(), i2.shape().to_vec()),
        ];
        let fwd = model.forward(&mut tape, &leased, &iv).unwrap();
        let gtv = tape.constant(gt.data().to_vec(), gt.shape().to_vec());
        let lv = model.training_loss(&mut tape, &leased, &fwd, gtv).unwrap();
        tape.backward(lv.total).unwrap();
    }
    println!("forward+backward: {:?}/it", t0.elapsed() / 5);

    // Full step.
    let model = Model::init(ModelConfig::for_task(Task::Mff), 1).unwrap();
    let mut tr = Trainer::new(model, AdamConfig::default(), 0);
    let t0 = Instant::now();
    for _ in 0..5 {
        tr.train_step(&[i1.clone(), i2.clone()], &gt).unwrap();
    }
    println!("train_step: {:?}/it", t0.elapsed() / 5);

    // Phase breakdown of one step.
    use std::time::Duration;
    let (mut t_lease, mut t_fwd, mut t_loss, mut t_bwd, mut t_absorb, mut t_drop, mut t_adam) =
        (Duration::default(), Duration::default(), Duration::default(), Duration::default(),
         Duration::default(), Duration::default(), Duration::default());
    for _ in 0..5 {
        tr.model.params.zero_grads();
        let mut tape = Tape::new();
        let t0 = Instant::now();
        let leased = tr.model.params.lease(&mut tape);
        let iv = [
            tape.constant(i1.data().to_vec(), i1.shape().to_vec()),
            tape.constant(i2.data().to_vec(), i2.shape().to_vec()),
        ];
        let gtv = tape.constant(gt.data().to_vec(), gt.shape().to_vec());
        t_lease += t0.elapsed();
        let t0 = Instant::now();
        let fwd = tr.model.forward(&mut tape, &leased, &iv).unwrap();
        t_fwd += t0.elapsed();
        let t0 = Instant::now();
        let lv = tr.model.training_loss(&mut tape, &leased, &fwd, gtv).unwrap();
        t_loss += t0.elapsed();
        let t0 = Instant::now();
        tape.backward(lv.total).unwrap();
        t_bwd += t0.elapsed();
        let t0 = Instant::now();
        tr.model.params.absorb_grads(&tape, &leased);
        t_absorb += t0.elapsed();
        let t0 = Instant::now();
        drop(tape);
        t_drop += t0.elapsed();
        let t0 = Instant::now();
        // run the actual adam math via a throwaway training step clone? just time absorb->update path
        for (idx, p) in tr.model.params.params_mut().iter_mut().enumerate() {
            let g = match p.tensor.grad() { Some(g) => g.to_vec(), None => vec![0.0; p.tensor.numel()] };
            let m = &mut tr.adam.m[idx];
            let v = &mut tr.adam.v[idx];
            let data = p.tensor.data_mut();
            for j in 0..g.len() {
                m[j] = 0.9 * m[j] + 0.1 * g[j];
                v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
                data[j] -= 1e-4 * (m[j]) / ((v[j]).sqrt() + 1e-8);
            }
        }
        t_adam += t0.elapsed();
    }
    println!("lease {:?} fwd {:?} loss {:?} bwd {:?} absorb {:?} drop {:?} adam {:?}",
        t_lease / 5, t_fwd / 5, t_loss / 5, t_bwd / 5, t_absorb / 5, t_drop / 5, t_adam / 5);
}
// (phase breakdown appended)
