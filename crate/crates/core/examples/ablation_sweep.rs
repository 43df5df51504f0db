//! Runs the ablation grid over seeds 0..20 and counts how often each row
//! beats the all-off baseline.
//!
//! cargo run --release -p isostory-core --example ablation_sweep -- fixtures/story.txt

use isostory::metrics::{ablation_run, DEFAULT_GRID};
use isostory::pipeline::PipelineConfig;
use isostory::plan::parse_script;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "fixtures/story.txt".into());
    let plan = parse_script(&std::fs::read_to_string(path)?)?;
    let mut wins = [0usize; DEFAULT_GRID.len()];
    for seed in 0..20u64 {
        let base = PipelineConfig {
            seed,
            ..Default::default()
        };
        let table = ablation_run(&plan, &base, &DEFAULT_GRID)?;
        let scores: Vec<f64> = table
            .rows
            .iter()
            .map(|r| r.report.overall.unwrap_or(f64::NAN))
            .collect();
        for (w, s) in wins.iter_mut().zip(&scores).skip(1) {
            if *s > scores[0] {
                *w += 1;
            }
        }
        let cols: Vec<String> = scores.iter().map(|v| format!("{v:.4}")).collect();
        println!("seed {seed:2}: {}", cols.join(" "));
    }
    for (row, w) in DEFAULT_GRID.iter().zip(wins).skip(1) {
        println!("IC={} IS={} Re={}: {w}/20", row.iso_cross, row.iso_self, row.reweight);
    }
    Ok(())
}
