//! Runs all four methods on the same reduced config, persists each run, and
//! prints the comparison tables a CLI user would get from `gml compare`.

use gml::config::config_parse;
use gml::runner::{cmd_compare, cmd_run, Method};

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
    let out = std::env::temp_dir().join("gml_example_compare");

    for method in Method::ALL {
        let dir = cmd_run(&cfg, method, &out)?;
        println!("ran {method:10} -> {}", dir.display());
    }

    println!("\n{}", cmd_compare(&[out])?);
    Ok(())
}
