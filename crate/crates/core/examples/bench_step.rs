use std::time::Instant;

use scws_core::data::{synth_generate, DatasetManifest};
use scws_core::network::Network;
use scws_core::tensor::graph::Graph;
use scws_core::tensor::ops::BnMode;
use scws_core::network::ParamNodes;
use scws_core::trainer::{train_step, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("scws_bench");
    if !dir.join("manifest.tsv").exists() {
        synth_generate(&dir, 16, 64, 3).unwrap();
    }
    let manifest = DatasetManifest::load(&dir.join("manifest.tsv")).unwrap();
    let samples: Vec<_> = (0..8).map(|i| manifest.load_sample(i).unwrap()).collect();
    let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
    let mut net = Network::new(cfg.network_config(), 1).unwrap();

    // forward only
    let images = {
        let mut data = Vec::new();
        for s in &samples { data.extend_from_slice(s.image.data()); }
        scws_core::Tensor::from_vec(&[8,3,64,64], data).unwrap()
    };
    for _ in 0..2 { // warm
        let mut g = Graph::new();
        let mut pn = ParamNodes::new(net.params.len());
        net.forward(&mut g, &images, BnMode::Train, &mut pn).unwrap();
    }
    let t = Instant::now();
    for _ in 0..5 {
        let mut g = Graph::new();
        let mut pn = ParamNodes::new(net.params.len());
        net.forward(&mut g, &images, BnMode::Train, &mut pn).unwrap();
    }
    println!("forward (batch 8):        {:>8.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);

    let t = Instant::now();
    for _ in 0..5 { net.predict(&images).unwrap(); }
    println!("predict eval (batch 8):   {:>8.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);

    let t = Instant::now();
    for _ in 0..5 { train_step(&mut net, &samples, &cfg, 1e-4).unwrap(); }
    println!("full train_step:          {:>8.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);

    let cfg_nossc = TrainConfig { enable_ssc: false, ..cfg.clone() };
    let t = Instant::now();
    for _ in 0..5 { train_step(&mut net, &samples, &cfg_nossc, 1e-4).unwrap(); }
    println!("train_step no-ssc:        {:>8.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);

    let cfg_nolsc = TrainConfig { enable_lsc: false, enable_ssc: false, ..cfg.clone() };
    let t = Instant::now();
    for _ in 0..5 { train_step(&mut net, &samples, &cfg_nolsc, 1e-4).unwrap(); }
    println!("train_step ce-only:       {:>8.1} ms", t.elapsed().as_secs_f64() * 1000.0 / 5.0);
}
