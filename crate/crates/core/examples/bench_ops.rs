use replykit::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut t = |r: usize, c: usize| -> Tensor<f32> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    };
    let x_big = t(1024, 64);
    let w = t(64, 64);
    let wf1 = t(64, 256);
    let ff = t(1024, 256);
    let bias = t(1, 64);
    let gain = t(1, 64);
    let emb = t(2000, 64);
    let ids: Vec<u32> = (0..1024).map(|i| (i * 7 % 2000) as u32).collect();
    let masks: Vec<Vec<bool>> = (0..64).map(|_| (0..16).map(|j| j >= 12).collect()).collect();

    macro_rules! bench {
        ($name:expr, $iters:expr, $body:expr) => {{
            let t0 = Instant::now();
            for _ in 0..$iters { $body; }
            println!("{:24} {:8.3} ms", $name, t0.elapsed().as_secs_f64() * 1000.0 / $iters as f64);
        }};
    }

    bench!("matmul 1024x64x64", 200, {
        let mut g = Graph::<f32>::no_grad();
        let a = g.leaf(x_big.clone(), false);
        let b = g.leaf(w.clone(), false);
        let _ = g.matmul(a, b).unwrap();
    });
    bench!("matmul 1024x64x256", 200, {
        let mut g = Graph::<f32>::no_grad();
        let a = g.leaf(x_big.clone(), false);
        let b = g.leaf(wf1.clone(), false);
        let _ = g.matmul(a, b).unwrap();
    });
    bench!("add_row_broadcast", 200, {
        let mut g = Graph::<f32>::no_grad();
        let a = g.leaf(x_big.clone(), false);
        let b = g.leaf(bias.clone(), false);
        let _ = g.add_row_broadcast(a, b).unwrap();
    });
    bench!("layer_norm 1024x64", 200, {
        let mut g = Graph::<f32>::no_grad();
        let a = g.leaf(x_big.clone(), false);
        let gn = g.leaf(gain.clone(), false);
        let bs = g.leaf(bias.clone(), false);
        let _ = g.layer_norm(a, gn, bs, 1e-12).unwrap();
    });
    bench!("gelu 1024x256", 200, {
        let mut g = Graph::<f32>::no_grad();
        let a = g.leaf(ff.clone(), false);
        let _ = g.gelu(a).unwrap();
    });
    bench!("attention 64x16 h4", 200, {
        let mut g = Graph::<f32>::no_grad();
        let q = g.leaf(x_big.clone(), false);
        let k = g.leaf(x_big.clone(), false);
        let v = g.leaf(x_big.clone(), false);
        let _ = g.multi_head_attention(q, k, v, 4, 16, &masks).unwrap();
    });
    bench!("add 1024x64", 400, {
        let mut g = Graph::<f32>::no_grad();
        let a = g.leaf(x_big.clone(), false);
        let b = g.leaf(x_big.clone(), false);
        let _ = g.add(a, b).unwrap();
    });
    bench!("gather 1024 of 2000x64", 200, {
        let mut g = Graph::<f32>::no_grad();
        let e = g.leaf(emb.clone(), false);
        let _ = g.gather_rows(e, &ids).unwrap();
    });
    bench!("leaf clone 2000x64", 400, {
        let mut g = Graph::<f32>::no_grad();
        let _ = g.leaf(emb.clone(), false);
    });
}
