use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, iters: usize) {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..iters {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                0.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * iters) as f64;
    println!("{m}x{k}x{n}: {:.1} GFLOP/s", flops / secs / 1e9);
}

fn main() {
    bench(1024, 64, 64, 2000);
    bench(1024, 64, 256, 1000);
    bench(1024, 256, 64, 1000);
    bench(64, 64, 64, 20000);
    bench(512, 512, 512, 100);
}
