//! Regenerates `assets/toy_encoder_weights.bin` from the fixed seed.

use costroke_core::encoder::toy::{ToyWeights, WEIGHT_SEED};

fn main() -> std::io::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/toy_encoder_weights.bin");
    std::fs::write(path, ToyWeights::generate(WEIGHT_SEED).to_bytes())?;
    println!("wrote {path}");
    Ok(())
}
