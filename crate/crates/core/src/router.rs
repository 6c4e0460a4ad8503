//! Prompt-based culture routing with tolerant reply parsing.

use std::collections::BTreeMap;

use futures::future::try_join_all;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CallSettings, ChatBackend};
use crate::dedup::{sha1_hex, text_digest, CanonicalMode};
use crate::model::{CultureId, MatchKind, RouteTarget, RoutingDecision, OTHERS};
use crate::prompts::{PromptError, Templates};

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("gold culture {0:?} is not among the configured cultures")]
    UnknownGold(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

const WRAPPERS: &[char] = &['"', '\'', '`', '*', '“', '”', '‘', '’', '«', '»', '(', ')', '[', ']'];
const TRAILING: &[char] = &['.', ',', ';', ':', '!', '?'];

/// Trims whitespace, wrapping quotes/backticks/emphasis and trailing
/// punctuation until nothing changes.
pub fn clean_reply(raw: &str) -> &str {
    let mut s = raw;
    loop {
        let next = s
            .trim()
            .trim_end_matches(TRAILING)
            .trim_matches(WRAPPERS)
            .trim();
        if next == s {
            return s;
        }
        s = next;
    }
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    let pat = format!(r"(?i)(?:^|[^\w]){}(?:$|[^\w])", regex::escape(needle));
    Regex::new(&pat).map(|re| re.is_match(haystack)).unwrap_or(false)
}

/// Maps a router reply onto an option. Strict mode accepts only an exact
/// option name after [`clean_reply`].
pub fn parse_route(raw: &str, cultures: &[CultureId], strict: bool) -> (RouteTarget, MatchKind) {
    let target = |name: &str| -> RouteTarget {
        cultures
            .iter()
            .find(|c| c.as_str() == name)
            .map_or(RouteTarget::Others, |c| RouteTarget::Culture(c.clone()))
    };
    let options: Vec<&str> = cultures.iter().map(CultureId::as_str).chain([OTHERS]).collect();
    let cleaned = clean_reply(raw);

    if let Some(o) = options.iter().find(|o| **o == cleaned) {
        return (target(o), MatchKind::Exact);
    }
    if strict {
        return (RouteTarget::Others, MatchKind::FallbackOthers);
    }
    let lowered = cleaned.to_lowercase();
    let ci: Vec<&&str> = options.iter().filter(|o| o.to_lowercase() == lowered).collect();
    if ci.len() == 1 {
        return (target(ci[0]), MatchKind::Normalized);
    }
    let contained: Vec<&&str> = options.iter().filter(|o| contains_word(raw, o)).collect();
    if contained.len() == 1 {
        return (target(contained[0]), MatchKind::Normalized);
    }
    (RouteTarget::Others, MatchKind::FallbackOthers)
}

/// Routes `input` by prompting the base model (no adapter) at temperature 0.
pub async fn route(
    input: &str,
    cultures: &[CultureId],
    chat: &dyn ChatBackend,
    templates: &Templates,
    base_model_id: &str,
    strict: bool,
) -> Result<RoutingDecision, RouterError> {
    let prompt = templates.router(cultures, input)?;
    let request_id = format!("route/{}", &sha1_hex(prompt.text.as_bytes())[..16]);
    let settings = CallSettings::new(base_model_id, 0.0);
    let reply = chat.chat(&settings.request(&prompt, request_id)?).await?;
    let (chosen, match_kind) = parse_route(&reply.text, cultures, strict);
    Ok(RoutingDecision {
        input_digest: text_digest(input, CanonicalMode::Canonical),
        chosen,
        raw_answer: reply.text,
        match_kind,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// gold culture -> chosen option -> count
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub decisions: Vec<RoutingDecision>,
}

impl RouterReport {
    pub fn to_text(&self) -> String {
        let mut cols: Vec<String> = self.confusion.keys().cloned().collect();
        for row in self.confusion.values() {
            for k in row.keys() {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        let mut out = format!("accuracy {:.4} ({}/{})\n", self.accuracy, self.correct, self.total);
        out.push_str(&format!("gold \\ chosen\t{}\n", cols.join("\t")));
        for (gold, row) in &self.confusion {
            let cells: Vec<String> = cols.iter().map(|c| row.get(c).copied().unwrap_or(0).to_string()).collect();
            out.push_str(&format!("{gold}\t{}\n", cells.join("\t")));
        }
        out
    }
}

/// Fraction of items routed to their gold culture; Others is always wrong.
pub async fn router_accuracy(
    items: &[(String, CultureId)],
    cultures: &[CultureId],
    chat: &dyn ChatBackend,
    templates: &Templates,
    base_model_id: &str,
    strict: bool,
) -> Result<RouterReport, RouterError> {
    if let Some((_, g)) = items.iter().find(|(_, g)| !cultures.contains(g)) {
        return Err(RouterError::UnknownGold(g.to_string()));
    }
    let decisions = try_join_all(
        items
            .iter()
            .map(|(text, _)| route(text, cultures, chat, templates, base_model_id, strict)),
    )
    .await?;
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut correct = 0;
    for ((_, gold), d) in items.iter().zip(&decisions) {
        if d.chosen.culture() == Some(gold) {
            correct += 1;
        }
        *confusion
            .entry(gold.to_string())
            .or_default()
            .entry(d.chosen.name().to_string())
            .or_default() += 1;
    }
    let total = items.len();
    Ok(RouterReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        confusion,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::ScriptedChat;

    fn cultures() -> Vec<CultureId> {
        ["Arabic", "Turkish"].iter().map(|c| CultureId::new(*c).unwrap()).collect()
    }

    fn decide(raw: &str) -> (String, MatchKind) {
        let (t, k) = parse_route(raw, &cultures(), false);
        (t.name().to_string(), k)
    }

    #[test]
    fn parsing_stages() {
        assert_eq!(decide("Turkish"), ("Turkish".into(), MatchKind::Exact));
        assert_eq!(decide("  \"turkish\". "), ("Turkish".into(), MatchKind::Normalized));
        assert_eq!(decide("I think this is French"), ("Others".into(), MatchKind::FallbackOthers));
        assert_eq!(decide("The culture is Arabic."), ("Arabic".into(), MatchKind::Normalized));
        assert_eq!(decide("Arabic or Turkish"), ("Others".into(), MatchKind::FallbackOthers));
        assert_eq!(decide("Others"), ("Others".into(), MatchKind::Exact));
        assert_eq!(decide("Arabian"), ("Others".into(), MatchKind::FallbackOthers));
    }

    #[test]
    fn strict_only_accepts_exact() {
        let (t, k) = parse_route("`Arabic`", &cultures(), true);
        assert_eq!((t.name(), k), ("Arabic", MatchKind::Exact));
        let (t, k) = parse_route("arabic", &cultures(), true);
        assert_eq!((t.name(), k), ("Others", MatchKind::FallbackOthers));
    }

    fn prompt(input: &str) -> String {
        Templates::embedded().router(&cultures(), input).unwrap().text
    }

    #[tokio::test]
    async fn accuracy_counts_and_confusion() {
        let mut chat = ScriptedChat::new();
        let mut items = Vec::new();
        for i in 0..10 {
            let text = format!("item {i}");
            let gold = cultures()[i % 2].clone();
            let reply = if i == 3 { "Others".to_string() } else { gold.to_string() };
            chat = chat.with_reply(&prompt(&text), reply);
            items.push((text, gold));
        }
        let r = router_accuracy(&items, &cultures(), &chat, Templates::embedded(), "base", false).await.unwrap();
        assert_eq!(r.correct, 9);
        assert!((r.accuracy - 0.9).abs() < 1e-12);
        assert_eq!(r.confusion["Turkish"]["Others"], 1);
        assert!(chat.calls().iter().all(|c| c.temperature == 0.0 && c.model_or_adapter_id == "base"));
    }

    #[tokio::test]
    async fn unknown_gold_is_rejected() {
        let chat = ScriptedChat::new();
        let items = vec![("x".to_string(), CultureId::new("French").unwrap())];
        assert!(matches!(
            router_accuracy(&items, &cultures(), &chat, Templates::embedded(), "base", false).await,
            Err(RouterError::UnknownGold(_))
        ));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn decision_is_a_configured_option(raw in "\\PC{0,40}", strict in any::<bool>()) {
            let cultures: Vec<CultureId> = ["Arabic", "Turkish", "Chinese"].iter().map(|c| CultureId::new(*c).unwrap()).collect();
            let (target, kind) = parse_route(&raw, &cultures, strict);
            match target.culture() {
                Some(c) => prop_assert!(cultures.contains(c)),
                None => prop_assert_eq!(target.name(), OTHERS),
            }
            if strict {
                prop_assert_ne!(kind, MatchKind::Normalized);
            }
        }

        #[test]
        fn wrapped_exact_names_survive(idx in 0usize..3, wrap in prop::sample::select(vec!["", "\"", "'", "`", "**"]), dot in any::<bool>()) {
            let cultures: Vec<CultureId> = ["Arabic", "Turkish"].iter().map(|c| CultureId::new(*c).unwrap()).collect();
            let name = ["Arabic", "Turkish", OTHERS][idx];
            let raw = format!(" {wrap}{name}{wrap}{} ", if dot { "." } else { "" });
            let (target, kind) = parse_route(&raw, &cultures, true);
            prop_assert_eq!(target.name(), name);
            prop_assert_eq!(kind, MatchKind::Exact);
        }
    }
}
