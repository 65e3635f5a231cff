//! Two-stage feature compression on a synthetic class codebook: pretrain
//! the wide stage offline, adapt the narrow stage online, and watch the
//! round-trip survive.
//!
//!     cargo run --release --example feature_codec

use rand::Rng;
use semsplat::codec::{eval_cosine, train_stage1_offline, TwoStageCodec};
use semsplat::config::CodecSection;
use semsplat::synth::{gaussian, Codebook};

fn main() -> semsplat::Result<()> {
    let dim = 96;
    let classes = 10;
    let names: Vec<String> = (0..classes).map(|i| format!("class{i}")).collect();
    let book = Codebook::generate(&names, dim, 3);

    // noisy class vectors stand in for per-pixel features
    let mut rng = semsplat::rng::stream(4, "codec-example");
    let n = 4096;
    let mut corpus = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = rng.gen_range(0..classes);
        for k in 0..dim {
            corpus.push(book.vector(c)[k] + 0.02 * gaussian(&mut rng));
        }
    }

    let (stage1, _) = train_stage1_offline(&corpus, dim, 32, 4, 300, 256, 3e-3, 5)?;
    println!(
        "stage 1 ({dim} -> 32): round-trip cosine {:.4}",
        eval_cosine(&stage1, &corpus, n)
    );

    let cfg = CodecSection {
        feat_dim: dim,
        code_mid: 32,
        code_final: 15,
        samples_per_keyframe: 1024,
        minibatch: 2048,
        ..Default::default()
    };
    let mut two = TwoStageCodec::new(stage1, &cfg, 6);
    let kf: Vec<f32> = corpus[..1024 * dim].iter().map(|v| *v as f32).collect();
    two.buffer_keyframe(&kf, dim, 0)?;
    let trace = two.init_online()?;
    println!(
        "online stage (32 -> 15): {} init iterations, loss {:.4} -> {:.4}",
        two.init_iterations,
        trace[0],
        trace.last().unwrap()
    );
    for step in 0..3 {
        let lo = (step + 1) * 1024 * dim;
        let frame: Vec<f32> = corpus[lo..lo + 512 * dim].iter().map(|v| *v as f32).collect();
        let loss = two.step_online(&frame, dim)?;
        println!("  frame step {step}: 1 iteration, loss {loss:.4}");
    }

    // end to end: encode2 ∘ decode2 keeps each vector aligned to its class
    let test = &corpus[..1024 * dim];
    let codes = two.encode2(test, 1024)?;
    let recon = two.decode2(&codes, 1024)?;
    let mut agree = 0;
    for i in 0..1024 {
        let pick = |v: &[f64]| {
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            for c in 0..classes {
                let b = book.vector(c);
                let dot: f64 = b.iter().zip(v).map(|(a, x)| a * x).sum();
                if dot > best_cos {
                    best_cos = dot;
                    best = c;
                }
            }
            best
        };
        if pick(&test[i * dim..(i + 1) * dim]) == pick(&recon[i * dim..(i + 1) * dim]) {
            agree += 1;
        }
    }
    println!(
        "argmax class preserved through {dim} -> 15 -> {dim} for {agree}/1024 samples"
    );
    Ok(())
}
