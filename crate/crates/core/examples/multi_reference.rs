//! Multi-reference transfer: the GSE comes from a reference of one emotion,
//! the LPE from a content-matched reference of another. Reports how often
//! the output takes the global emotion and whether its durations follow
//! the local reference rather than other renders of the same text.
//!
//!   cargo run --release --example multi_reference -- <checkpoint> [n_distractors]

use std::path::Path;

use msstyle::checkpoint::load_checkpoint;
use msstyle::config::RunConfig;
use msstyle::corpus::{build_corpus, EMOTION_NAMES};
use msstyle::eval::{run_multi_reference_study, test_groups, train_probe, Scorer};

fn main() -> msstyle::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("usage: multi_reference <checkpoint> [n_distractors]");
    let cfg = RunConfig::default();
    let n: usize = args.next().map(|s| s.parse().expect("n_distractors")).unwrap_or(cfg.eval.distractors);
    let model = load_checkpoint(Path::new(&path))?.model;

    let corpus = build_corpus(&cfg.corpus)?;
    let fit = train_probe(&corpus, &cfg.probe)?;
    let groups = test_groups(&corpus, cfg.eval.min_test_groups);
    let scorer = Scorer { probe: &fit.probe, voice: &corpus.voice };

    let study = run_multi_reference_study(&model, scorer, &groups, n, cfg.eval.seed)?;
    for (row, &local) in study.report.rows.iter().zip(&study.local_emotions).take(7) {
        println!(
            "global {:<9} local {:<9} -> probe {:<9} dur r {:+.2}",
            EMOTION_NAMES[row.target_emotion], EMOTION_NAMES[local], EMOTION_NAMES[row.predicted_emotion], row.duration_pearson
        );
    }
    println!("{} rows", study.report.rows.len());
    println!("probe matches global emotion   {:.3} (chance {:.3})", study.probe_match_rate, 1.0 / 7.0);
    println!("duration r vs local reference  {:.3}", study.mean_pearson_local);
    println!("duration r vs {n} distractors   {:.3}", study.mean_pearson_distractor);
    Ok(())
}
