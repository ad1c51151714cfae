//! Grid search over architectures with a resumable JSON-lines run log,
//! champion selection and CSV exports.
//!
//! cargo run --release --example architecture_search [grid] [out_dir]
//!
//! `grid` is a preset (tiny, mini, table-v, full) or a grid JSON file.

use std::path::PathBuf;

use floodcast::cli::protocol_data;
use floodcast::model::TrainConfig;
use floodcast::nas::{enumerate_grid, export_runs, ranked, read_log, run_search, select_champion, GridSpec, SearchOptions, RUN_LOG_FILE};
use floodcast::synth_hydro::{generate_dataset, SynthConfig};

fn main() -> floodcast::Result<()> {
    let mut args = std::env::args().skip(1);
    let grid = GridSpec::resolve(&args.next().unwrap_or_else(|| "tiny".into()))?;
    let out = args.next().map_or_else(|| std::env::temp_dir().join("floodcast-search"), PathBuf::from);
    let configs = enumerate_grid(&grid)?;

    let ds = generate_dataset(&SynthConfig {
        durations_hrs: Some(vec![12, 14, 16, 18, 13, 15, 17, 20, 12, 16, 14, 18, 15, 13, 16, 14]),
        ..SynthConfig::default()
    })?;
    // The search runs over the six most flood-prone segments.
    let data = protocol_data(&ds, 6)?;
    let tc = TrainConfig {
        batch_size: 64,
        max_epochs: 20,
        early_stop_patience: 5,
        ..TrainConfig::default()
    };
    let opts = SearchOptions {
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        seed: 42,
        log_path: out.join(RUN_LOG_FILE),
        max_new_runs: None,
    };
    println!("{} configurations x {} folds, log {}", configs.len(), data.n_folds(), opts.log_path.display());
    run_search(&configs, &data, &tc, &opts)?;

    let records = read_log(&opts.log_path)?;
    for r in ranked(&records).iter().take(5) {
        println!("  {}  {:50}  MAE {:.4} m  RMSE {:.4} m", r.run_id, r.config.label(), r.mae_m.unwrap_or(f64::NAN), r.rmse_m.unwrap_or(f64::NAN));
    }
    let champion = select_champion(&records)?;
    println!("champion {} ({} parameters)", champion.config.label(), champion.param_count);
    for f in export_runs(&records, 120, &out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
