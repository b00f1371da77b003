//! Prints the best beam accuracy any locator can reach on the desk preset:
//! each test sample is located at its true position, snapped to the nearest
//! grid cell and compared against the best cell of its noiseless scan.
//!
//! ```text
//! cargo run --release --example accuracy_ceiling -- [per_snr]
//! ```

use nearfocus::beamscan::{generate_dataset, Sample, Split};
use nearfocus::harness::{RunConfig, Scale};
use nearfocus::training::{beam_accuracy, grid_of, TruthLocator};

fn main() -> nearfocus::Result<()> {
    let per_snr = std::env::args().nth(1).unwrap_or_else(|| "200".into());
    let sets = vec![format!("data.per_snr={per_snr}")];
    let cfg = RunConfig::resolve(Scale::Desk, None, &sets, None, std::env::temp_dir())?;
    let ds = generate_dataset(&cfg.sim, &cfg.codebook, &cfg.data)?;
    let grid = grid_of(&cfg.codebook);
    for &snr in &cfg.data.snr_list {
        let test: Vec<&Sample> = ds.at_snr(snr).filter(|s| s.split == Some(Split::Test)).collect();
        let acc = beam_accuracy(&test, &TruthLocator, None, &grid)?;
        println!("{snr:>5} dB: {acc:.4} over {} test samples", test.len());
    }
    Ok(())
}
