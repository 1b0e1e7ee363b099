//! Quasi-phoneme vs frame-scale local style: decode completion and
//! reference-attention sharpness for Proposed and Base-FS.
//!
//!   cargo run --release --example granularity_study -- <proposed.ckpt> <base-fs.ckpt> [pgm_dir]

use std::path::{Path, PathBuf};

use msstyle::checkpoint::load_checkpoint;
use msstyle::config::RunConfig;
use msstyle::corpus::build_corpus;
use msstyle::eval::{alignment_pgm, run_granularity_study, test_groups, train_probe, Scorer};

fn main() -> msstyle::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: granularity_study <proposed.ckpt> <base-fs.ckpt> [pgm_dir]");
        std::process::exit(2);
    }
    let proposed = load_checkpoint(Path::new(&args[0]))?.model;
    let base_fs = load_checkpoint(Path::new(&args[1]))?.model;

    let cfg = RunConfig::default();
    let corpus = build_corpus(&cfg.corpus)?;
    let fit = train_probe(&corpus, &cfg.probe)?;
    let groups = test_groups(&corpus, cfg.eval.min_test_groups);
    let scorer = Scorer { probe: &fit.probe, voice: &corpus.voice };

    let report = run_granularity_study(&proposed, &base_fs, scorer, &groups)?;
    for side in [&report.proposed, &report.base_fs] {
        println!(
            "{:<9} completion {:.3}  entropy {:.3}  coverage {:.3}",
            side.variant, side.completion_rate, side.mean_entropy, side.mean_coverage
        );
    }

    // One reference-attention image per variant for the first test reference.
    let dir = args.get(2).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("target"));
    let r = &groups[0][0];
    for m in [&proposed, &base_fs] {
        let syn = m.synthesize(&r.text, &r.features.values, &r.features.values)?;
        if let Some(a) = &syn.ref_align {
            let path = dir.join(format!("{}.refattn.pgm", m.variant()));
            std::fs::write(&path, alignment_pgm(a)).map_err(|e| msstyle::Error::io(&path, e))?;
            println!("{} x {} attention -> {}", a.rows(), a.cols(), path.display());
        }
    }
    Ok(())
}
