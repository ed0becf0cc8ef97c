use distfit::mixture::ring_spec;
use distfit::trainer::{train, PenaltyKind, TrainConfig};
use std::time::Instant;

fn main() {
    let spec = ring_spec(8, 2.0, 0.02, None).unwrap();
    for (name, penalty) in [
        ("none", PenaltyKind::None),
        ("gdf", PenaltyKind::Gdf),
        ("ldf", PenaltyKind::Ldf),
    ] {
        let config = TrainConfig {
            iterations: 50,
            penalty,
            seed: 7,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let log = train(&config, &spec).unwrap();
        let dt = t.elapsed().as_secs_f64();
        println!(
            "{name}: 50 iters in {dt:.2}s  -> {:.1}s per 5000-iter run; last d_loss {:.4} g_loss {:.4} penalty {:.4}",
            dt * 100.0,
            log.snapshots.last().unwrap().loss_d,
            log.snapshots.last().unwrap().loss_g,
            log.snapshots.last().unwrap().penalty,
        );
    }
}
