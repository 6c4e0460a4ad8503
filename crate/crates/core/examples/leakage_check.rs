//! Checks a synthetic corpus against test items by SHA-1 digest, first clean
//! and then with a test item planted in the corpus.
//!
//!     cargo run --example leakage_check

use culture_manager::dedup::{check_leakage, sha1_hex, text_digest, CanonicalMode};
use culture_manager::model::{CultureId, Label, LabeledItem, SampleContent, SyntheticSample};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("sha1(\"abc\") = {}", sha1_hex(b"abc"));

    let arabic = CultureId::new("Arabic")?;
    let tests: Vec<LabeledItem> = ["يا له من يوم جميل", "The Arabic calligraphy class starts at noon"]
        .iter()
        .enumerate()
        .map(|(i, t)| LabeledItem {
            id: format!("ar-hate#{i}"),
            task_id: "ar-hate".into(),
            content: SampleContent::text(*t),
            label: Label::Zero,
        })
        .collect();
    let sample = |i: usize, text: &str| {
        SyntheticSample::new(SampleContent::text(text), Label::Zero, arabic.clone(), "ar-hate", format!("m{i}"), "q", 0)
    };
    let mut corpus = vec![sample(0, "Weddings in Amman last until dawn")?, sample(1, "Weddings in Amman last until dawn")?];

    let clean = check_leakage(&corpus, &tests, CanonicalMode::Canonical)?;
    println!("clean corpus:   {}", clean.summary());

    corpus.push(sample(2, "  The Arabic calligraphy class\tstarts at noon ")?);
    for mode in [CanonicalMode::Canonical, CanonicalMode::StrictVerbatim] {
        let report = check_leakage(&corpus, &tests, mode)?;
        println!("planted, {mode:?}: {}", report.summary());
        for o in &report.overlaps {
            println!("  {} matches {:?}", o.sample_id, o.test_ids);
        }
    }
    println!(
        "canonical digest of the planted text: {}",
        text_digest("  The Arabic calligraphy class\tstarts at noon ", CanonicalMode::Canonical)
    );
    Ok(())
}
