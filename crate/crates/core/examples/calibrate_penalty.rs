//! One-off calibration: distribution of the fitting penalty when real
//! batches are scored against exact mixture statistics.

use distfit::autodiff::Tape;
use distfit::fitting::{penalty, PenaltyMode, STD_EPSILON};
use distfit::mixture::{closed_form_stats, ring_spec, sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let draws = 100_000;
    for b in [128usize, 512, 2048] {
        let spec = ring_spec(8, 2.0, 0.02, None).unwrap();
        let target = closed_form_stats(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0xCA11B7A7E);
        let mut values = Vec::with_capacity(draws);
        for _ in 0..draws {
            let batch = sample(&spec, b, &mut rng);
            let mut tape = Tape::new();
            let leaf = tape.leaf(batch.samples, false).unwrap();
            let p = penalty(&mut tape, leaf, &PenaltyMode::Gdf { target: target.clone() }, STD_EPSILON).unwrap();
            values.push(tape.value(p).get(0, 0));
        }
        values.sort_by(f64::total_cmp);
        let pct = |q: f64| values[((q * draws as f64) as usize).min(draws - 1)];
        println!(
            "b={b}: mean={:.5} p50={:.5} p99={:.5} p999={:.5} p9999={:.5} max={:.5}  (xsqrt(b): p999*sqrt(b)={:.4} max*sqrt(b)={:.4})",
            values.iter().sum::<f64>() / draws as f64,
            pct(0.50), pct(0.99), pct(0.999), pct(0.9999),
            values[draws - 1],
            pct(0.999) * (b as f64).sqrt(),
            values[draws - 1] * (b as f64).sqrt(),
        );
    }
}
