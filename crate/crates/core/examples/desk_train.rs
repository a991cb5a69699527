//! A short end-to-end run: generate data in memory, train, and evaluate.
//!
//! cargo run --release --example desk_train -- [ablation] [epochs]

use printer::config::TrainConfig;
use printer::synthdata::{in_memory_dataset, SynthSpec};
use printer::trainer::Model;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ablation = args.next().unwrap_or_else(|| "full".into()).parse()?;
    let epochs: usize = args.next().map(|e| e.parse()).transpose()?.unwrap_or(5);

    let mut config = TrainConfig::with_ablation(ablation);
    config.run.epochs = epochs;
    let data = in_memory_dataset(&SynthSpec::default(), 64, 16)?;
    let mut model = Model::new(config)?;
    let started = std::time::Instant::now();
    model.train(&data.train, None, |epoch, reports| {
        let last = reports.last().expect("non-empty epoch");
        let parts: Vec<String> = last.losses.iter().map(|(n, v)| format!("{n}={v:.3}")).collect();
        println!("epoch {epoch}/{epochs} {}", parts.join(" "));
    })?;
    println!("trained in {:.1?}", started.elapsed());
    print!("{}", model.evaluate(&data.test)?.report.summary());
    Ok(())
}
