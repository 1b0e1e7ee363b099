//! Generates the synthetic emotional corpus and writes it to disk.
//!
//!   cargo run --release --example gen_corpus -- [out_dir] [n_utterances] [seed]

use std::path::PathBuf;

use msstyle::corpus::{generate_corpus, write_summary, CorpusConfig, EMOTION_NAMES};

fn main() -> msstyle::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("target/msstyle-corpus"));
    let mut cfg = CorpusConfig::default();
    if let Some(n) = args.next() {
        cfg.n_utterances = n.parse().expect("n_utterances");
    }
    if let Some(s) = args.next() {
        cfg.seed = s.parse().expect("seed");
    }

    let corpus = generate_corpus(&cfg, &out)?;
    write_summary(&corpus, std::io::stdout()).expect("stdout");

    let first = &corpus.records[0];
    println!();
    println!("{}: emotion {}, text {:?}", first.id, EMOTION_NAMES[first.emotion], first.text);
    println!("  durations {:?}", first.durations);
    println!("  pauses    {:?}", first.pauses);
    println!("  features  {} x {}", first.features.channels(), first.frames());
    println!("written to {}", out.display());
    Ok(())
}
