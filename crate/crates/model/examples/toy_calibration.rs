//! Regenerates `data/toy_calibration.json` and prints each sweep.
//!
//! cargo run --release -p topocl-model --example toy_calibration > crates/model/data/toy_calibration.json

use topocl_core::calibrate::calibrate;
use topocl_model::{generate_corpus, toy_calibration_corpus_config, toy_calibration_settings, toy_calibration_templates};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&toy_calibration_corpus_config())?;
    let report = calibrate(
        "toy-shapes",
        &corpus.calibration_images(),
        &toy_calibration_templates(),
        &toy_calibration_settings(),
    )?;
    for sweep in &report.sweeps {
        let medians: Vec<String> = sweep.points.iter().map(|p| format!("{:.3}", p.median)).collect();
        eprintln!("{:<20} {}", sweep.name, medians.join(" "));
    }
    println!("{}", report.table.to_json()?);
    Ok(())
}
