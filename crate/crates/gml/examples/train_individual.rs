//! Trains each site in isolation: the same schedule and initializations as
//! the gossip run but zero exchanges, so the event log moves no bytes. This
//! is the baseline gossip learning has to beat.

use gml::config::config_parse;
use gml::gossip::communication_totals;
use gml::runner::{run_experiment, Method};

const QUICK_CONFIG: &str = r#"{
    "seed": 7,
    "image_extent": 24,
    "sites": [
        {"site_id": "site-a", "n_cases": 12, "blob_radius_range": [3.5, 5.0],
         "tumor_intensity": 2.4, "background_noise_sigma": 1.2, "contrast_scale": 1.0},
        {"site_id": "site-b", "n_cases": 20, "blob_radius_range": [4.0, 5.5],
         "tumor_intensity": 2.1, "background_noise_sigma": 1.3, "contrast_scale": 1.1},
        {"site_id": "site-c", "n_cases": 24, "blob_radius_range": [4.5, 7.0],
         "tumor_intensity": 1.8, "background_noise_sigma": 1.4, "contrast_scale": 1.2}
    ],
    "held_out_sites": [
        {"site_id": "site-d", "n_cases": 6, "blob_radius_range": [3.5, 6.0],
         "tumor_intensity": 2.2, "background_noise_sigma": 1.25, "contrast_scale": 1.05},
        {"site_id": "site-e", "n_cases": 6, "blob_radius_range": [4.0, 7.0],
         "tumor_intensity": 1.9, "background_noise_sigma": 1.35, "contrast_scale": 1.15}
    ],
    "model": {"learning_rate": 3e-4},
    "schedule": {"total_rounds": 20, "warmup_rounds": 7}
}"#;

fn main() -> gml::Result<()> {
    let cfg = config_parse(QUICK_CONFIG)?;
    let out = run_experiment(&cfg, Method::Individual)?;

    println!("{}", out.report.to_csv());
    let totals = communication_totals(out.events.events());
    assert_eq!(totals.messages, 0);
    println!("no model ever left its site: {} messages", totals.messages);
    println!(
        "out-of-sample aggregate {:.4} (own-site fit does not transfer for free)",
        out.report.aggregated_out_of_sample.unwrap()
    );
    Ok(())
}
