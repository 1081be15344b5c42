//! Runs one batch-1 forward pass at the reference scale (1024²/224²
//! inputs) and prints every stage shape, wall time, and peak memory.
//!
//! ```text
//! cargo run --release --example reference_scale
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use graftnet::backbone::select_graft_pair;
use graftnet::model::TransResNet;
use graftnet::nn::Mode;
use graftnet::{no_grad, ModelConfig, Tensor};

fn peak_rss_mb() -> f64 {
    let status = std::fs::read_to_string("/proc/self/status").unwrap_or_default();
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: f64 = rest.trim().trim_end_matches(" kB").trim().parse().unwrap_or(0.0);
            return kb / 1024.0;
        }
    }
    0.0
}

fn main() {
    let cfg = ModelConfig::paper();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t0 = std::time::Instant::now();
    let model = TransResNet::<f32>::new(&cfg, &mut rng).unwrap();
    println!("built model in {:.1}s", t0.elapsed().as_secs_f64());

    let img = Tensor::new(
        &[1, 3, 1024, 1024],
        (0..3 * 1024 * 1024).map(|i| 0.5 + 0.3 * (i as f32 * 1e-4).sin()).collect(),
    )
    .unwrap();

    let t1 = std::time::Instant::now();
    let pyr = no_grad(|| model.encode(&img, Mode::Train)).unwrap();
    println!("encode in {:.1}s", t1.elapsed().as_secs_f64());
    for i in 2..=5 {
        println!("cnn[{i}]   = {:?}", pyr.cnn_stage(i).unwrap().shape());
    }
    for i in 1..=4 {
        println!("trans[{i}] = {:?}", pyr.trans_stage(i).unwrap().shape());
    }
    let (r, s) = select_graft_pair(&pyr, 2).unwrap();
    println!("graft pair: {:?} / {:?}", r.shape(), s.shape());

    let t2 = std::time::Instant::now();
    let out = no_grad(|| model.forward(&img, Mode::Train)).unwrap();
    println!("full forward in {:.1}s", t2.elapsed().as_secs_f64());
    println!("logits = {:?}", out.logits.shape());
    println!("ctam   = {:?}", out.ctam.as_ref().unwrap().shape());
    println!("total {:.1}s, peak RSS {:.0} MB", t0.elapsed().as_secs_f64(), peak_rss_mb());
}
