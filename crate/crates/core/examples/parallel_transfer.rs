//! Parallel style transfer: each test reference drives both scales for its
//! own text. Prints the per-emotion table.
//!
//!   cargo run --release --example parallel_transfer -- <checkpoint>

use std::path::Path;

use msstyle::checkpoint::load_checkpoint;
use msstyle::config::RunConfig;
use msstyle::corpus::build_corpus;
use msstyle::eval::{run_parallel_transfer, test_groups, train_probe, Scorer};

fn main() -> msstyle::Result<()> {
    let path = std::env::args().nth(1).expect("usage: parallel_transfer <checkpoint>");
    let model = load_checkpoint(Path::new(&path))?.model;
    model.expect_final()?;

    let cfg = RunConfig::default();
    let corpus = build_corpus(&cfg.corpus)?;
    let fit = train_probe(&corpus, &cfg.probe)?;
    println!("probe val accuracy {:.3}", fit.val_accuracy);
    let groups = test_groups(&corpus, cfg.eval.min_test_groups);
    let scorer = Scorer { probe: &fit.probe, voice: &corpus.voice };

    let report = run_parallel_transfer(&model, scorer, &groups)?;
    println!("{} on {} groups", report.variant, groups.len());
    println!("{:<10} {:>6} {:>9} {:>7} {:>7}", "", "match", "dur r", "pause", "done");
    for a in report.per_emotion.iter().chain(std::iter::once(&report.overall)) {
        println!(
            "{:<10} {:>6.2} {:>9.3} {:>7.3} {:>7.2}",
            a.label, a.global_probe_match.mean, a.duration_pearson.mean, a.pause_f1.mean, a.completion.mean
        );
    }
    let o = &report.overall;
    println!("match 95% CI +-{:.3}, duration r 95% CI +-{:.3}", o.global_probe_match.ci95, o.duration_pearson.ci95);
    Ok(())
}
