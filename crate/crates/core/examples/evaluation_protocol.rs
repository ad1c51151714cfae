//! The full comparison table: GRU and LSTM, with and without MAX15, at
//! look-backs 1 and 4, against zero, train-mean and persistence baselines,
//! scored with leave-one-event-out training on synthetic storms.
//!
//! cargo run --release --example evaluation_protocol [report_dir]

use std::path::PathBuf;

use floodcast::eval::{evaluate_protocol, ProtocolOptions};
use floodcast::model::{ArchConfig, TrainConfig};
use floodcast::protocol::ProtocolData;
use floodcast::synth_hydro::{generate_dataset, SynthConfig};

fn main() -> floodcast::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("floodcast-report"), PathBuf::from);
    let ds = generate_dataset(&SynthConfig {
        n_segments: 50,
        durations_hrs: Some(vec![12, 14, 16, 18, 13, 15, 17, 20, 12, 16, 14, 18, 15, 13, 16, 14]),
        ..SynthConfig::default()
    })?;
    let data = ProtocolData::from_dataset(&ds, None)?;
    let tc = TrainConfig {
        batch_size: 128,
        max_epochs: 30,
        early_stop_patience: 5,
        ..TrainConfig::default()
    };
    let mut opts = ProtocolOptions::new(ArchConfig::champion(), tc, 42);
    opts.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    opts.models_dir = Some(out.join("models"));
    println!("{} folds, {} test events; training 8 x {} fold models", data.n_folds(), data.plan.test.len(), data.n_folds());
    let report = evaluate_protocol(&data, &opts)?;
    println!("{:24} {:>9} {:>9}", "variant", "MAE (m)", "RMSE (m)");
    for r in &report.rows {
        println!("{:24} {:9.4} {:9.4}", r.variant, r.mae_m, r.rmse_m);
    }
    report.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
