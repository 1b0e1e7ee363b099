//! Aligns a reference's LPE sequence to the phoneme encodings of its text
//! and prints the attention matrix with its entropy and coverage.
//!
//!   cargo run --release --example reference_attention -- [checkpoint]
//!
//! Without a checkpoint the model is freshly initialised.

use std::path::Path;

use msstyle::autodiff::Graph;
use msstyle::checkpoint::load_checkpoint;
use msstyle::corpus::{build_corpus, CorpusConfig};
use msstyle::layers::Mode;
use msstyle::model::{Model, ModelConfig, Variant};
use msstyle::ref_attention::{attention_coverage, attention_entropy, max_weight_profile};

fn main() -> msstyle::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(Path::new(&p))?.model,
        None => Model::new(&ModelConfig::pilot(), Variant::Proposed, 1)?,
    };
    let net = &model.network;
    let attention = net.ref_attention.as_ref().expect("variant has reference attention");
    let corpus = build_corpus(&CorpusConfig::default())?;
    let record = &corpus.records[0];

    let style = net.ref_encoder.encode_reference(&model.store, &record.features.values, Mode::Eval)?;
    let lpe = style.lpe.expect("local head");
    let mut g = Graph::new();
    let phon = net.text_encoder.encode(&mut g, &model.store, &record.text)?;
    let phon = g.value(phon).clone();
    let (aligned, a) = attention.align_tensors(&model.store, &lpe, &phon)?;

    println!("text {:?}, durations {:?}", record.text, record.durations);
    println!("attention {} phonemes x {} LPE steps", a.rows(), a.cols());
    for i in 0..a.rows() {
        let row: Vec<String> = a.row_slice(i).iter().map(|w| format!("{w:.2}")).collect();
        println!("  {:>2}: {}", record.text[i], row.join(" "));
    }
    println!("aligned LPE     {} x {}", aligned.rows(), aligned.cols());
    println!("entropy         {:.3} nats", attention_entropy(&a));
    println!("coverage(0.3)   {:.3}", attention_coverage(&a, 0.3));
    let profile: Vec<String> = max_weight_profile(&a).iter().map(|w| format!("{w:.2}")).collect();
    println!("max per key     {}", profile.join(" "));
    Ok(())
}
