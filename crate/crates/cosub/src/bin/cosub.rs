use cosub::tensor::Element;
use std::time::Instant;

fn main() {
    for (m, k, n) in [(256, 256, 256), (128, 256, 512), (1024, 256, 256)] {
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let reps = 50;
        let t0 = Instant::now();
        for _ in 0..reps {
            f32::matmul_acc(&mut c, &a, &b, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n) as f64 * reps as f64) / dt / 1e9;
        println!("{}x{}x{}: {:.2} GFLOP/s", m, k, n, gflops);
    }
}
