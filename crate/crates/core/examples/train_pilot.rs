//! Pilot training run for one variant on the 700-utterance corpus, with
//! the default schedule. Prints the JSON-lines log and saves a checkpoint.
//!
//!   cargo run --release --example train_pilot -- [variant] [checkpoint]

use std::path::PathBuf;

use msstyle::checkpoint::save_checkpoint;
use msstyle::config::RunConfig;
use msstyle::corpus::{build_corpus, Split};
use msstyle::model::{Model, Variant};
use msstyle::train::{classifier_accuracy, teacher_forced_mse, train_variant};

fn main() -> msstyle::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("proposed").parse()?;
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("target/{variant}.ckpt")));

    let cfg = RunConfig::default();
    let corpus = build_corpus(&cfg.corpus)?;
    let val: Vec<_> = corpus.split(Split::Val).collect();
    let mut model = Model::new(&cfg.model, variant, cfg.train.seed)?;

    let mut probe = model.clone();
    probe.stage = 1;
    let mse0 = teacher_forced_mse(&probe, &val)?;

    let start = std::time::Instant::now();
    train_variant(&mut model, &corpus, &cfg.train, &mut std::io::stdout())?;
    let mse = teacher_forced_mse(&model, &val)?;

    println!("trained {variant} to stage {} in {:.0} s", model.stage, start.elapsed().as_secs_f64());
    println!("val MSE {mse0:.4} -> {mse:.4} ({:.2}x)", mse / mse0);
    if let Some(acc) = classifier_accuracy(&model, &val)? {
        println!("GSE classifier val accuracy {:.3}", acc);
    }
    save_checkpoint(&model, Some(&cfg.to_value()), &out)?;
    println!("saved {}", out.display());
    Ok(())
}
