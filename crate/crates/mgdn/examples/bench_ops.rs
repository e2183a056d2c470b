// Temporary micro-benchmark for individual ops at model sizes.
use std::time::Instant;

use mgdn::tensor::{ops, Tape};
use mgdn::tensor::tape::Padding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    mgdn::init_threads();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut vecn = |n: usize| (0..n).map(|_| rng.gen::<f64>()).collect::<Vec<f64>>();
    let (h, w, c) = (64usize, 64usize, 32usize);

    let bench = |name: &str, mut f: Box<dyn FnMut()>| {
        let t0 = Instant::now();
        let iters = 20;
        for _ in 0..iters {
            f();
        }
        println!("{name}: {:?}", t0.elapsed() / iters);
    };

    let x = vecn(h * w * c);
    let w33 = vecn(9 * c * c);
    let b33 = vecn(c);
    {
        let x = x.clone();
        let w33 = w33.clone();
        let b33 = b33.clone();
        bench(
            "conv3x3 32->32 fwd",
            Box::new(move || {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), vec![h, w, c], true);
                let wv = t.leaf(w33.clone(), vec![3, 3, c, c], true);
                let bv = t.leaf(b33.clone(), vec![c], true);
                let _ = ops::conv2d(&mut t, xv, wv, bv, Padding::Same).unwrap();
            }),
        );
    }
    {
        let x = x.clone();
        let w33 = w33.clone();
        let b33 = b33.clone();
        bench(
            "conv3x3 fwd+bwd",
            Box::new(move || {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), vec![h, w, c], true);
                let wv = t.leaf(w33.clone(), vec![3, 3, c, c], true);
                let bv = t.leaf(b33.clone(), vec![c], true);
                let y = ops::conv2d(&mut t, xv, wv, bv, Padding::Same).unwrap();
                let s = ops::sum_all(&mut t, y).unwrap();
                t.backward(s).unwrap();
            }),
        );
    }
    let w11 = vecn(c * c);
    {
        let x = x.clone();
        let w11 = w11.clone();
        let b33 = b33.clone();
        bench(
            "conv1x1 32->32 fwd",
            Box::new(move || {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), vec![h, w, c], true);
                let wv = t.leaf(w11.clone(), vec![1, 1, c, c], true);
                let bv = t.leaf(b33.clone(), vec![c], true);
                let _ = ops::conv2d(&mut t, xv, wv, bv, Padding::Same).unwrap();
            }),
        );
    }
    {
        let x = x.clone();
        bench(
            "sigmoid fwd",
            Box::new(move || {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), vec![h, w, c], true);
                let _ = ops::sigmoid(&mut t, xv).unwrap();
            }),
        );
    }
    {
        let x = x.clone();
        bench(
            "gather fwd",
            Box::new(move || {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), vec![h, w, c], true);
                let idx = std::sync::Arc::new((0..h * w * c).rev().collect::<Vec<usize>>());
                let _ = ops::gather(&mut t, xv, idx, vec![h * w * c]).unwrap();
            }),
        );
    }
    {
        let x = x.clone();
        let g = vecn(c);
        let b2 = vecn(c);
        bench(
            "layer_norm fwd",
            Box::new(move || {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), vec![h, w, c], true);
                let gv = t.leaf(g.clone(), vec![c], true);
                let bv = t.leaf(b2.clone(), vec![c], true);
                let _ = ops::layer_norm(&mut t, xv, gv, bv, 1e-6).unwrap();
            }),
        );
    }
    {
        // Window attention batched matmul shape: 256 windows x 2 heads.
        let batch = 512;
        let a = vecn(batch * 16 * 16);
        let b = vecn(batch * 16 * 16);
        bench(
            "batched matmul (win)",
            Box::new(move || {
                let mut t = Tape::new();
                let av = t.leaf(a.clone(), vec![batch, 16, 16], true);
                let bv = t.leaf(b.clone(), vec![batch, 16, 16], true);
                let _ = ops::matmul(
                    &mut t,
                    av,
                    bv,
                    mgdn::tensor::tape::MatSpec {
                        mode: mgdn::tensor::tape::MatMode::NN,
                        batch,
                        m: 16,
                        k: 16,
                        n: 16,
                    },
                )
                .unwrap();
            }),
        );
    }
    {
        let t1 = vecn(h * w);
        let t2 = vecn(h * w);
        bench(
            "soft_joint_hist fwd",
            Box::new(move || {
                let mut t = Tape::new();
                let a = t.leaf(t1.clone(), vec![h * w], true);
                let b = t.leaf(t2.clone(), vec![h * w], true);
                let _ = ops::soft_joint_hist(&mut t, a, b, 32, 1.5).unwrap();
            }),
        );
    }
    {
        let x = x.clone();
        let kv = vecn(h * w * 9);
        bench(
            "dynamic_filter fwd",
            Box::new(move || {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone(), vec![h, w, c], true);
                let kvv = t.leaf(kv.clone(), vec![h, w, 9], true);
                let _ = ops::dynamic_filter(&mut t, xv, kvv).unwrap();
            }),
        );
    }
}
