//! Trains the default network on a few MNIST classes and prints the history.
//!
//! cargo run --release -p coda-core --example mnist_subset -- [rescaler] [epochs] [per_class] [pure|hybrid] [lr] [T] [adam|sgd]

use coda_core::data::load_idx;
use coda_core::dau::RescaleKind;
use coda_core::net::train::{train_with_eval, TrainConfig};
use coda_core::net::{CodaNet, NetConfig, Optimizer};
use std::time::Instant;

fn main() -> coda_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kind: RescaleKind = args.get(1).map_or(Ok(RescaleKind::L2), |s| s.parse())?;
    let epochs: usize = args.get(2).map_or(20, |s| s.parse().expect("epochs"));
    let per_class: usize = args.get(3).map_or(200, |s| s.parse().expect("per_class"));
    let hybrid = args.get(4).is_some_and(|s| s == "hybrid");
    let lr: f64 = args.get(5).map_or(0.003, |s| s.parse().expect("lr"));
    let temperature: f64 = args.get(6).map_or(10.0, |s| s.parse().expect("temperature"));
    let optimizer: Optimizer = args.get(7).map_or(Ok(Optimizer::Adam), |s| s.parse())?;
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist5k");
    let all = load_idx(
        format!("{root}/images-idx3-ubyte.gz"),
        format!("{root}/labels-idx1-ubyte.gz"),
    )?;
    let set = all.select_classes(&[0, 1, 2])?;
    let (train, test) = set.split(0.2, 17);
    let train = train.take_per_class(per_class);
    let test = test.take_per_class(100);
    println!("train {} test {}", train.len(), test.len());
    let mut cfg = NetConfig::default_for(1, 28, 28, 3, kind);
    cfg.temperature = temperature;
    let mut net = if hybrid {
        CodaNet::build_hybrid(2, 2, cfg, 0)?
    } else {
        CodaNet::new(cfg, 0)?
    };
    let tc = TrainConfig {
        epochs,
        lr,
        optimizer,
        ..Default::default()
    };
    let t0 = Instant::now();
    let hist = train_with_eval(&mut net, &train.images, &train.labels, &tc, Some((&test.images, &test.labels)))?;
    for h in &hist {
        println!("{h:?}");
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
