//! Verify hand-written backpropagation against central finite differences
//! for dense, LSTM and GRU layers and the full two-branch network, then run
//! Nadam on f(θ) = θ².
//!
//! cargo run --release --example gradient_check [seeds]

use floodcast::nn::{NadamConfig, NadamState};
use floodcast::verify::GradientSuite;

fn main() -> floodcast::Result<()> {
    let seeds = std::env::args().nth(1).map_or(10, |s| s.parse().expect("seed count"));
    let suite = GradientSuite {
        seeds,
        ..GradientSuite::default()
    };
    let r = suite.run()?;
    println!("{} seeds, {} entries checked, {} skipped at kinks", r.seeds, r.checked, r.skipped_kinks);
    println!("worst relative error  dense {:.2e}  lstm {:.2e}  gru {:.2e}  network {:.2e}", r.dense, r.lstm, r.gru, r.model);
    println!("tolerances            layers {:.0e}  network {:.0e}  -> {}", suite.layer_tolerance, suite.model_tolerance, if r.passed { "pass" } else { "FAIL" });

    let mut opt = NadamState::new(NadamConfig::default(), &[1]);
    let mut theta = [1.0];
    println!("\nNadam on θ², θ0 = 1, default hyper-parameters:");
    for step in 1..=3000 {
        let grad = vec![vec![2.0 * theta[0]]];
        opt.step(&mut [&mut theta[..]], &grad)?;
        if step % 500 == 0 {
            println!("  step {step:5}  θ = {:.6}", theta[0]);
        }
    }
    Ok(())
}
