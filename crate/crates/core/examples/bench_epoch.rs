use replykit::corpus::TokenSequence;
use replykit::encoder::{build_encoder, EncoderConfig, FreezeSpec, Init};
use replykit::matching::{train_tokenized, MatchingModel, TokenizedPairs, TrainConfig};
use replykit::tensor::LrSchedule;
use rand::{Rng, SeedableRng};

fn main() {
    let t = 16usize;
    let vocab = 2000u32;
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4096);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
        let active = rng.gen_range(8..=t);
        let mut ids = vec![2u32];
        for _ in 0..active - 2 { ids.push(rng.gen_range(5..vocab)); }
        ids.push(3);
        ids.resize(t, 0);
        TokenSequence { ids, attention_mask: (0..t).map(|i| i < active).collect() }
    };
    let data = TokenizedPairs {
        msgs: (0..n).map(|_| mk(&mut rng)).collect(),
        rsps: (0..n).map(|_| mk(&mut rng)).collect(),
    };
    let val = TokenizedPairs {
        msgs: (0..256).map(|_| mk(&mut rng)).collect(),
        rsps: (0..256).map(|_| mk(&mut rng)).collect(),
    };
    let cfg = EncoderConfig::new(4, 64, 4, 256, vocab as usize, t).unwrap();
    let msg = build_encoder::<f32>(&cfg, Init::Random { seed: 1 }).unwrap();
    let rsp = build_encoder::<f32>(&cfg, Init::Random { seed: 2 }).unwrap();
    let model = MatchingModel::new(msg, rsp, FreezeSpec::none()).unwrap();
    let tc = TrainConfig {
        max_epochs: 1,
        batch_size: 64,
        accumulation_steps: 2,
        schedule: LrSchedule { base: 3e-4, warmup_steps: 50, gamma: 0.9995 },
        seed: 0,
        max_len: t,
        temperature: 1.0,
    };
    let started = std::time::Instant::now();
    let out = train_tokenized(model, &data, &val, "bench", &tc).unwrap();
    let secs = started.elapsed().as_secs_f64();
    println!(
        "pairs={n} epoch_time={:.2}s  est_50k={:.1}s  val_loss={:.4}",
        secs,
        secs * 50000.0 / n as f64,
        out.report.epoch_val_losses[0]
    );
}
