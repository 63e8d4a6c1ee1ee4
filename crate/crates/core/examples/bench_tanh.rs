use replykit::tensor::scalar::Scalar;
use std::time::Instant;

fn main() {
    let xs: Vec<f32> = (0..262144).map(|i| (i as f32 / 262144.0) * 4.0 - 2.0).collect();
    let mut out = vec![0.0f32; xs.len()];
    let t0 = Instant::now();
    for _ in 0..100 {
        for (o, &x) in out.iter_mut().zip(&xs) {
            *o = Scalar::tanh(x);
        }
    }
    let per = t0.elapsed().as_secs_f64() * 1e9 / (100.0 * xs.len() as f64);
    println!("scalar-trait tanh: {per:.2} ns/elem  (sum {})", out.iter().sum::<f32>());

    let t0 = Instant::now();
    for _ in 0..100 {
        for (o, &x) in out.iter_mut().zip(&xs) {
            *o = x.tanh();
        }
    }
    let per = t0.elapsed().as_secs_f64() * 1e9 / (100.0 * xs.len() as f64);
    println!("libm tanh:         {per:.2} ns/elem  (sum {})", out.iter().sum::<f32>());
}
