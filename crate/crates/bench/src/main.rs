use deblur_core::*;
use deblur_core::models::*;
use deblur_core::norm::Mode;
use std::time::Instant;

fn main() {
    // raw matmul throughput
    let mut rng = Rng::new(1);
    let m = 512; let k = 512; let n = 1024;
    let a = Tensor::<f32>::from_vec(&[m, k], (0..m*k).map(|_| rng.range(-1.0,1.0) as f32).collect()).unwrap();
    let b = Tensor::<f32>::from_vec(&[k, n], (0..k*n).map(|_| rng.range(-1.0,1.0) as f32).collect()).unwrap();
    let mut g = Graph::new();
    let va = g.leaf(a, false);
    let vb = g.leaf(b, false);
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps { let _ = g.matmul(va, vb).unwrap(); }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m*k*n) as f64 * reps as f64;
    println!("matmul {}x{}x{}: {:.2} GFLOP/s", m, k, n, flops / dt / 1e9);

    // generator fwd+bwd at training size
    let cfg = GeneratorConfig { arch: Arch::Pix2Pix, use_self_attention: false, use_channel_attention: false, use_global_residual: true, use_spectral_norm: false, use_edge_channel: false, feedback_iterations: 0, input_size: (64,64) };
    let mut gen = build_generator::<f32>(&cfg, &mut Rng::new(2)).unwrap();
    let x = Tensor::<f32>::from_vec(&[4,3,64,64], (0..4*3*64*64).map(|_| rng.range(-1.0,1.0) as f32).collect()).unwrap();
    let y = Tensor::<f32>::from_vec(&[4,3,64,64], (0..4*3*64*64).map(|_| rng.range(-1.0,1.0) as f32).collect()).unwrap();
    // warmup + timed
    let t0 = Instant::now();
    let steps = 10;
    for _ in 0..steps {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let yv = g.leaf(y.clone(), false);
        let out = generator_forward(&mut g, &mut gen, xv, Mode::Train).unwrap();
        let d = g.sub(out, yv).unwrap();
        let a = g.abs(d);
        let loss = g.mean_all(a);
        let grads = g.backward(loss).unwrap();
        let _named = g.named_gradients(&grads);
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("pix2pix-64 batch4 fwd+bwd: {:.3} s/step → 500 steps ≈ {:.1} min", dt, dt*500.0/60.0);
}
