//! Exact-hash duplicate detection and train/test leakage checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::model::{LabeledItem, SyntheticSample};

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("SHA-1 collision: {digest} is shared by {first:?} and {second:?}")]
    Collision {
        digest: String,
        first: String,
        second: String,
    },
}

/// How text is prepared before hashing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalMode {
    /// NFC, LF line endings, trimmed, runs of spaces/tabs collapsed.
    #[default]
    Canonical,
    /// Raw bytes, no normalization at all.
    StrictVerbatim,
}

pub fn sha1_hex(bytes: &[u8]) -> String {
    hex::encode(Sha1::digest(bytes))
}

/// NFC, CRLF (and lone CR) to LF, outer whitespace trimmed, space/tab runs collapsed to a
/// single space. Case is preserved.
pub fn canonicalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let unix = nfc.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unix.len());
    let mut in_run = false;
    for c in unix.trim().chars() {
        if c == ' ' || c == '\t' {
            if !in_run {
                out.push(' ');
            }
            in_run = true;
        } else {
            out.push(c);
            in_run = false;
        }
    }
    out
}

pub fn prepare(text: &str, mode: CanonicalMode) -> String {
    match mode {
        CanonicalMode::Canonical => canonicalize(text),
        CanonicalMode::StrictVerbatim => text.to_string(),
    }
}

pub fn text_digest(text: &str, mode: CanonicalMode) -> String {
    sha1_hex(prepare(text, mode).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub digest: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub digest: String,
    pub sample_id: String,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub mode: CanonicalMode,
    pub synthetic_count: usize,
    pub test_count: usize,
    /// Synthetic x test comparisons covered by the digest index.
    pub checked_pairs: usize,
    /// Groups of identical synthetic samples.
    pub duplicate_groups: Vec<DuplicateGroup>,
    pub overlaps: Vec<Overlap>,
    pub overlap_count: usize,
    pub clean: bool,
}

impl LeakageReport {
    pub fn summary(&self) -> String {
        let dup_members: usize = self.duplicate_groups.iter().map(|g| g.members.len()).sum();
        format!(
            "checked {} synthetic x {} test items ({} pairs, {:?} mode): {} overlapping, {} duplicate group(s) covering {} samples -> {}",
            self.synthetic_count,
            self.test_count,
            self.checked_pairs,
            self.mode,
            self.overlap_count,
            self.duplicate_groups.len(),
            dup_members,
            if self.clean { "clean" } else { "LEAKAGE" }
        )
    }

    /// SHA-1 of the JSON form, recorded in run manifests.
    pub fn digest(&self) -> String {
        sha1_hex(serde_json::to_string(self).expect("report serializes").as_bytes())
    }
}

/// Tracks digest -> prepared text to catch collisions.
#[derive(Default)]
struct DigestIndex {
    texts: BTreeMap<String, String>,
}

impl DigestIndex {
    fn insert(&mut self, prepared: String) -> Result<String, DedupError> {
        let digest = sha1_hex(prepared.as_bytes());
        match self.texts.get(&digest) {
            Some(existing) if *existing != prepared => Err(DedupError::Collision {
                digest,
                first: existing.clone(),
                second: prepared,
            }),
            Some(_) => Ok(digest),
            None => {
                self.texts.insert(digest.clone(), prepared);
                Ok(digest)
            }
        }
    }
}

/// Reports synthetic samples whose digest matches a test item, plus groups
/// of identical synthetic samples. True/false items hash their
/// `question\nanswer` layout.
pub fn check_leakage(
    synthetic: &[SyntheticSample],
    tests: &[LabeledItem],
    mode: CanonicalMode,
) -> Result<LeakageReport, DedupError> {
    let mut index = DigestIndex::default();
    let mut test_ids: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for item in tests {
        let d = index.insert(prepare(&item.content.canonical_text(), mode))?;
        test_ids.entry(d).or_default().push(item.id.clone());
    }

    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut overlaps = Vec::new();
    for sample in synthetic {
        let d = index.insert(prepare(&sample.content.canonical_text(), mode))?;
        if let Some(ids) = test_ids.get(&d) {
            overlaps.push(Overlap {
                digest: d.clone(),
                sample_id: sample.id(),
                test_ids: ids.clone(),
            });
        }
        groups.entry(d).or_default().push(sample.id());
    }

    let duplicate_groups = groups
        .into_iter()
        .filter(|(_, m)| m.len() > 1)
        .map(|(digest, members)| DuplicateGroup { digest, members })
        .collect();
    let overlap_count = overlaps.len();
    Ok(LeakageReport {
        mode,
        synthetic_count: synthetic.len(),
        test_count: tests.len(),
        checked_pairs: synthetic.len() * tests.len(),
        duplicate_groups,
        overlaps,
        overlap_count,
        clean: overlap_count == 0,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::{CultureId, Label, SampleContent};

    fn sample(text: &str, ordinal: usize) -> SyntheticSample {
        SyntheticSample::new(
            SampleContent::text(text),
            Label::One,
            CultureId::new("Arabic").unwrap(),
            "t",
            "m",
            "q",
            ordinal,
        )
        .unwrap()
    }

    fn item(id: &str, text: &str) -> LabeledItem {
        LabeledItem {
            id: id.into(),
            task_id: "t".into(),
            content: SampleContent::text(text),
            label: Label::Zero,
        }
    }

    #[test]
    fn fips_vectors() {
        assert_eq!(sha1_hex(b"abc"), "a9993e364706816aba3e25717850c26c9cd0d89d");
        assert_eq!(sha1_hex(b""), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
        assert_eq!(
            sha1_hex(b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"),
            "84983e441c3bd26ebaae4aa1f95129e5e54670f1"
        );
    }

    #[test]
    fn canonicalization_rules() {
        assert_eq!(canonicalize("  a  b\r\n"), "a b");
        assert_eq!(canonicalize("ABC"), "ABC");
        assert_eq!(canonicalize("a\t\t b\r\nc"), "a b\nc");
        // e + combining acute composes to U+00E9
        assert_eq!(canonicalize("e\u{301}"), "\u{e9}");
    }

    #[test]
    fn planted_leak_is_found_through_whitespace() {
        let tests = vec![item("t:1", "the test sentence"), item("t:2", "another")];
        let synth = vec![sample("  the  test sentence  ", 0), sample("unrelated", 1)];
        let r = check_leakage(&synth, &tests, CanonicalMode::Canonical).unwrap();
        assert_eq!(r.overlap_count, 1);
        assert!(!r.clean);
        assert_eq!(r.overlaps[0].test_ids, vec!["t:1".to_string()]);

        let strict = check_leakage(&synth, &tests, CanonicalMode::StrictVerbatim).unwrap();
        assert_eq!(strict.overlap_count, 0);
    }

    #[test]
    fn duplicates_are_separate_from_leakage() {
        let synth = vec![sample("same", 0), sample("same", 1), sample("other", 2)];
        let r = check_leakage(&synth, &[item("t:1", "disjoint")], CanonicalMode::Canonical).unwrap();
        assert!(r.clean);
        assert_eq!(r.duplicate_groups.len(), 1);
        assert_eq!(r.duplicate_groups[0].members.len(), 2);
        assert_eq!(r.checked_pairs, 3);
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(s in "[ \\ta-zA-Z\\r\\n\u{301}é]{0,40}") {
            let once = canonicalize(&s);
            prop_assert_eq!(canonicalize(&once), once);
        }

        #[test]
        fn planting_k_items_gives_overlap_k(k in 0usize..8, extra in 0usize..5) {
            let tests: Vec<_> = (0..10).map(|i| item(&format!("t:{i}"), &format!("test item number {i}"))).collect();
            let mut synth: Vec<_> = (0..extra).map(|i| sample(&format!("synthetic {i}"), i)).collect();
            for i in 0..k {
                synth.push(sample(&format!(" test item number {i} "), 100 + i));
            }
            let r = check_leakage(&synth, &tests, CanonicalMode::Canonical).unwrap();
            prop_assert_eq!(r.overlap_count, k);
            prop_assert_eq!(r.clean, k == 0);
        }
    }
}
