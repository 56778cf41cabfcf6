//! Runs the gossip mutual learning protocol on a reduced config and prints
//! the event flow, per-site DSC, and communication totals.

use gml::config::config_parse;
use gml::gossip::{communication_totals, EventKind};
use gml::runner::{run_experiment, Method};

// A third of the default round count and smaller images: finishes in a
// couple of seconds while still crossing the warmup boundary.
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
    let out = run_experiment(&cfg, Method::Gml)?;

    println!("first post-warmup exchange:");
    for e in out
        .events
        .events()
        .iter()
        .skip_while(|e| e.kind != EventKind::Activation)
        .take(4)
    {
        println!(
            "  round {:2} seq {:3} {:?} {} -> {}",
            e.round,
            e.seq,
            e.kind,
            e.sender.as_deref().unwrap_or("-"),
            e.receiver.as_deref().unwrap_or("-"),
        );
    }

    println!("\n{}", out.report.to_csv());
    let totals = communication_totals(out.events.events());
    println!(
        "messages {} ({} bytes): one checkpoint per post-warmup round",
        totals.messages, totals.bytes
    );
    Ok(())
}
