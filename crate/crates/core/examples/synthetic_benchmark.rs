//! Runs the synthetic ablation benchmark and prints rank-1 / mAP per variant.
//!
//! `cargo run --release -p cdp-core --example synthetic_benchmark [epochs]`

use std::time::Instant;

use cdp_core::eval::Direction;
use cdp_core::experiment::{self, BenchmarkConfig, Variant};

fn main() -> cdp_core::Result<()> {
    let mut cfg = BenchmarkConfig::default();
    if let Some(e) = std::env::args().nth(1) {
        cfg.train.epochs = e.parse().expect("epochs must be an integer");
    }
    let data = experiment::prepare(&cfg)?;
    for v in Variant::ALL {
        let t = Instant::now();
        let res = experiment::run_variant(&data, &cfg, v)?;
        for d in [Direction::V2t, Direction::T2v] {
            let r = res.report(d).expect("both directions evaluated");
            println!(
                "{:<9} {d} rank1 {:.4} rank10 {:.4} mAP {:.4}",
                v.name(),
                r.rank(1),
                r.rank(10),
                r.map_mean
            );
        }
        println!("{:<9} took {:.1}s, final P {:?}", v.name(), t.elapsed().as_secs_f64(), res.final_distribution);
    }
    Ok(())
}
