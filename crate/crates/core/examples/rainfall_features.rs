//! Interpolate gauge rainfall onto street segments and derive the hourly
//! RH / MAX15 / HR_2 / HR_72 features, then look at their correlations with
//! depth.
//!
//! cargo run --release --example rainfall_features

use floodcast::eval::correlation_matrix;
use floodcast::features::{idw_interpolate, Feature, DEFAULT_IDW_POWER};
use floodcast::synth_hydro::{generate_dataset, SynthConfig};

fn main() -> floodcast::Result<()> {
    // Two gauges 1 km apart: the midpoint gets the plain average, a point
    // next to a gauge gets mostly that gauge's value.
    let gauges = [(0.0, 0.0, 10.0), (1000.0, 0.0, 20.0)];
    println!("IDW midpoint       {:.3} mm", idw_interpolate(&gauges, (500.0, 0.0), DEFAULT_IDW_POWER)?);
    println!("IDW near gauge 1   {:.3} mm", idw_interpolate(&gauges, (100.0, 0.0), DEFAULT_IDW_POWER)?);
    println!("IDW on gauge 2     {:.3} mm", idw_interpolate(&gauges, (1000.0, 0.0), DEFAULT_IDW_POWER)?);

    let ds = generate_dataset(&SynthConfig {
        n_segments: 10,
        n_events: 3,
        ..SynthConfig::default()
    })?;
    let table = &ds.features[0];
    println!("\nevent {} segment {}:", table.event_id, table.segment_ids[0]);
    println!("hour   RH    MAX15  HR_2   HR_72  TD_HR  depth");
    let depth = table.depth.as_ref().expect("oracle depths attached");
    for h in 0..table.n_hours().min(12) {
        println!(
            "{:4} {:6.2} {:6.2} {:6.2} {:6.2} {:6.3} {:6.3}",
            h,
            table.value(Feature::Rh, 0, h),
            table.value(Feature::Max15, 0, h),
            table.value(Feature::Hr2, 0, h),
            table.value(Feature::Hr72, 0, h),
            table.value(Feature::TdHr, 0, h),
            depth[[0, h]],
        );
    }

    let tables: Vec<_> = ds.features.iter().collect();
    let corr = correlation_matrix(&tables)?;
    println!("\nPearson correlation with depth:");
    for label in corr.labels.iter().skip(1) {
        match corr.get("depth", label) {
            Some(r) => println!("  {label:6} {r:+.3}"),
            None => println!("  {label:6} undefined"),
        }
    }
    Ok(())
}
