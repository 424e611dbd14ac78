use ndarray::Array2;
use std::time::Instant;
fn main() {
    for &(m, k, n) in &[(32usize, 288usize, 2048usize), (64, 576, 2048), (128, 1152, 1024), (256, 2304, 512)] {
        let a = Array2::<f32>::from_elem((m, k), 0.5);
        let b = Array2::<f32>::from_elem((k, n), 0.25);
        let t = Instant::now();
        let mut reps = 0u64;
        while t.elapsed().as_secs_f64() < 0.5 {
            let c = a.dot(&b);
            std::hint::black_box(&c);
            reps += 1;
        }
        let flops = 2.0 * (m * k * n) as f64 * reps as f64 / t.elapsed().as_secs_f64();
        println!("({m},{k},{n}): {:.1} GFLOP/s single-thread", flops / 1e9);
    }
}
