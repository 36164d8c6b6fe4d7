//! Time one train-mode forward + backward pass of the default U-net.
//!
//! cargo run --release --example throughput -- [length] [batch]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::time::Instant;
use turbstoch::diffcore::{Tape, Tensor3};
use turbstoch::unet::{build_model, Mode};

fn main() -> turbstoch::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let len = args.first().copied().unwrap_or(16384);
    let batch = args.get(1).copied().unwrap_or(8);
    let model = build_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise: Vec<f64> = (0..len * batch).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = Tensor3::new(batch, 1, len, noise)?;

    for _ in 0..2 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let x = tape.constant(noise.clone())?;
        let (y, _) = model.forward(&mut tape, x, Mode::Train)?;
        let t1 = Instant::now();
        let sq = tape.square(y)?;
        let loss = tape.mean(sq)?;
        tape.backward(loss)?;
        let t2 = Instant::now();
        println!(
            "length {len} batch {batch}: forward {:.2}s, backward {:.2}s",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64()
        );
    }
    Ok(())
}
