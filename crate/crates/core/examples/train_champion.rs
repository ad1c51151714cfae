//! Train the champion architecture (GRU 1x20, spatial 2x4 selu, head
//! [64, 64, 16, 1]) on one fold of the leave-one-event-out rotation and
//! compare it with the baseline predictors.
//!
//! cargo run --release --example train_champion

use floodcast::eval::Baseline;
use floodcast::model::{ArchConfig, TrainConfig};
use floodcast::protocol::{baseline_folds, prepare_fold, score_fold, train_fold, ProtocolData};
use floodcast::synth_hydro::{generate_dataset, SynthConfig};

fn main() -> floodcast::Result<()> {
    let ds = generate_dataset(&SynthConfig {
        n_segments: 50,
        durations_hrs: Some(vec![12, 14, 16, 18, 13, 15, 17, 20, 12, 16, 14, 18, 15, 13, 16, 14]),
        ..SynthConfig::default()
    })?;
    let data = ProtocolData::from_dataset(&ds, None)?;
    let arch = ArchConfig::champion();
    println!("{} ({} parameters)", arch.label(), arch.param_count());

    let fold = prepare_fold(&data, 0, arch.look_back, arch.include_max15)?;
    println!(
        "fold 0: validation {}, {} training samples, {} validation samples",
        fold.validation_event,
        fold.train.len(),
        fold.val.len()
    );
    let tc = TrainConfig {
        batch_size: 128,
        max_epochs: 60,
        early_stop_patience: 10,
        ..TrainConfig::default()
    };
    let model = train_fold(&arch, &tc, &fold, 42, 0)?;
    for r in model.history.iter().filter(|r| r.epoch % 5 == 0 || r.epoch == model.best_epoch) {
        let mark = if r.epoch == model.best_epoch { " <- restored" } else { "" };
        println!("  epoch {:3}  train MAE {:.4} m  val MAE {:.4} m{mark}", r.epoch, r.train_mae, r.val_mae);
    }

    let score = score_fold(&model, &fold)?;
    println!("\ntest events, fold 0:");
    for e in &score.events {
        println!("  {}  MAE {:.4} m  RMSE {:.4} m  ({} samples)", e.event_id, e.mae_m, e.rmse_m, e.n_samples);
    }
    println!("  champion               MAE {:.4} m", score.mean_mae());
    for b in Baseline::ALL {
        let folds = baseline_folds(&data, b, arch.look_back)?;
        println!("  {:22} MAE {:.4} m", b.label(), folds[0].mean_mae());
    }
    Ok(())
}
