//! Trains the default toy model on synthetic pairs and prints the loss curve.

use std::time::Instant;

use priorfuse::config::FusionConfig;
use priorfuse::data::synthetic_dataset;
use priorfuse::train::{smoothed_endpoints, train_toy};

fn main() -> priorfuse::Result<()> {
    let mut cfg = FusionConfig::default();
    if let Some(lr) = std::env::args().nth(1) {
        cfg.set("train.lr", &lr)?;
    }
    let data: Vec<_> = synthetic_dataset(16, 64, 42)?
        .into_iter()
        .map(|p| (p.ir, p.vis))
        .collect();
    let start = Instant::now();
    let out = train_toy(&data, &cfg)?;
    for (i, l) in out.losses.iter().enumerate() {
        println!("{i:3} {l:.5}");
    }
    if let Some((a, b)) = smoothed_endpoints(&out.losses, 5) {
        println!("smoothed {a:.5} -> {b:.5} (ratio {:.3})", b / a);
    }
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
