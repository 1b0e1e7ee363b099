//! Runs the reference encoder on one corpus utterance and shows both
//! scales: the single GSE vector and the downsampled LPE sequence. The
//! frame-scale strides are shown alongside for comparison.

use msstyle::corpus::{build_corpus, CorpusConfig};
use msstyle::layers::Mode;
use msstyle::model::{Model, ModelConfig, Variant};
use msstyle::ref_encoder::downsampled_length;

fn main() -> msstyle::Result<()> {
    let corpus = build_corpus(&CorpusConfig::default())?;
    let record = &corpus.records[3];
    let x = &record.features.values;

    for variant in [Variant::Proposed, Variant::BaseFs] {
        let model = Model::new(&ModelConfig::pilot(), variant, 1)?;
        let enc = &model.network.ref_encoder;
        let style = enc.encode_reference(&model.store, x, Mode::Eval)?;
        let lpe = style.lpe.as_ref().expect("local head");
        println!("{variant}: strides {:?}", enc.config.strides);
        println!("  reference      {} x {}", x.rows(), x.cols());
        println!(
            "  LPE            {} x {}  (expected T_L {})",
            lpe.rows(),
            lpe.cols(),
            downsampled_length(x.cols(), &enc.config.strides)?
        );
        println!("  granularity    {:.1} ms per LPE step", enc.config.granularity_ms());
        if let Some(gse) = &style.gse {
            let head: Vec<String> = gse.data().iter().take(6).map(|v| format!("{v:+.3}")).collect();
            println!("  GSE            {} dims [{} ...]", gse.len(), head.join(", "));
        }
    }
    Ok(())
}
