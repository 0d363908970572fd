//! Renders a corpus with planted defects and filters it with the desk backends.
//!
//! cargo run --release --example synth_and_prune -- [identities]

use gen3d::data::backends::RandomConvEmbedder;
use gen3d::data::prune::{prune, reference_classifier, DEFAULT_TAU_BV, DEFAULT_TAU_II};
use gen3d::data::{generate_corpus_with_defects, DataMix, Planted};

fn main() -> gen3d::Result<()> {
    let count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let records = generate_corpus_with_defects(count, 42, DataMix::Both, 32, count / 5, count / 5)?;
    let planted = |p: Planted| records.iter().flat_map(|r| &r.views).filter(|v| v.planted == Some(p)).count();
    println!("{count} identities, {} janus views, {} swapped views", planted(Planted::Janus), planted(Planted::Swap));

    let clf = reference_classifier(42, 32, 8)?;
    let emb = RandomConvEmbedder::new(42, 64);
    let (kept, report) = prune(records.clone(), &clf, &emb, DEFAULT_TAU_BV, DEFAULT_TAU_II)?;
    let janus_hits = report
        .removed_views
        .iter()
        .filter(|r| records[r.id as usize].view_at(r.azimuth).and_then(|v| v.planted) == Some(Planted::Janus))
        .count();
    println!("back-view filter removed {} views, {janus_hits} of them planted", report.removed_views.len());
    for s in &report.consistency {
        let swapped = records[s.id as usize].views.iter().any(|v| v.planted == Some(Planted::Swap));
        println!("  identity {:>3}  consistency {:.4}  {}  {}", s.id, s.score, if s.kept { "kept   " } else { "dropped" }, if swapped { "swapped" } else { "" });
    }
    println!("{} identities kept", kept.len());
    Ok(())
}
