use replykit::corpus::TokenSequence;
use replykit::encoder::{build_encoder, forward_cls, EncoderConfig, EncoderVars, Init};
use replykit::matching::symmetric_loss_graph;
use replykit::tensor::Graph;
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn main() {
    let t = 16usize;
    let vocab = 2000u32;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
        let active = rng.gen_range(8..=t);
        let mut ids = vec![2u32];
        for _ in 0..active - 2 { ids.push(rng.gen_range(5..vocab)); }
        ids.push(3);
        ids.resize(t, 0);
        TokenSequence { ids, attention_mask: (0..t).map(|i| i < active).collect() }
    };
    let batch: Vec<TokenSequence> = (0..64).map(|_| mk(&mut rng)).collect();
    let cfg = EncoderConfig::new(4, 64, 4, 256, vocab as usize, t).unwrap();
    let w = build_encoder::<f32>(&cfg, Init::Random { seed: 1 }).unwrap();

    // forward only, no grad
    let t0 = Instant::now();
    let iters = 100;
    for _ in 0..iters {
        let mut g = Graph::<f32>::no_grad();
        let vars = EncoderVars::register(&mut g, &w, &|_| false);
        let _ = forward_cls(&mut g, &vars, &cfg, &batch).unwrap();
    }
    println!("forward no-grad: {:.2} ms/micro-batch", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);

    // registration alone
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::<f32>::no_grad();
        let _ = EncoderVars::register(&mut g, &w, &|_| false);
    }
    println!("register: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);

    // forward + backward (both encoders + loss, like a train step)
    let w2 = build_encoder::<f32>(&cfg, Init::Random { seed: 2 }).unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::<f32>::new();
        let vars = EncoderVars::register(&mut g, &w, &|_| true);
        let vars2 = EncoderVars::register(&mut g, &w2, &|_| true);
        let m = forward_cls(&mut g, &vars, &cfg, &batch).unwrap();
        let r = forward_cls(&mut g, &vars2, &cfg, &batch).unwrap();
        let loss = symmetric_loss_graph(&mut g, m, r, 1.0).unwrap();
        let _ = g.backward(loss).unwrap();
    }
    println!("full train step (no adam): {:.2} ms/micro-batch", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}
