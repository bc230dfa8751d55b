use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{catalog, event_category, SynthUser};
use crate::hier::{EventRecord, Modality};

pub const FUTURE_QUERY: &str = "what are the user's most likely actions in the next period?";
pub(crate) const NO_ACTIVITY: &str = "no notable activity.";

/// Tie-break applied between categories with equal counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiversityRule {
    /// Prefer categories whose modality is not yet represented, then wider
    /// temporal spread.
    #[default]
    UnseenModality,
    /// Prefer wider temporal spread only.
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FutureOptions {
    pub bin_days: u32,
    pub top_s: usize,
    pub diversity: DiversityRule,
}

impl Default for FutureOptions {
    fn default() -> Self {
        Self {
            bin_days: 7,
            top_s: 5,
            diversity: DiversityRule::UnseenModality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuturePair {
    pub user_id: String,
    pub query: String,
    pub answer: String,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone)]
struct Tally {
    count: usize,
    bins: BTreeSet<u32>,
    modality: Option<Modality>,
}

/// Picks up to `top_s` action categories: highest count first, ties broken
/// by the diversity rule and finally by name.
pub fn select_actions(future: &[EventRecord], window_end: u32, opts: &FutureOptions) -> Vec<(String, usize)> {
    let bin_days = opts.bin_days.max(1);
    let mut tally: BTreeMap<&str, Tally> = BTreeMap::new();
    for ev in future {
        let Some(cat) = event_category(ev) else { continue };
        let t = tally.entry(cat).or_insert_with(|| Tally {
            count: 0,
            bins: BTreeSet::new(),
            modality: catalog::modality_of_category(cat),
        });
        t.count += 1;
        t.bins.insert(ev.day.saturating_sub(window_end) / bin_days);
    }
    let mut chosen: Vec<(String, usize)> = Vec::new();
    let mut seen: BTreeSet<Modality> = BTreeSet::new();
    while chosen.len() < opts.top_s && !tally.is_empty() {
        let key = |name: &str, t: &Tally| {
            let unseen = match opts.diversity {
                DiversityRule::UnseenModality => t.modality.is_some_and(|m| !seen.contains(&m)),
                DiversityRule::Spread => false,
            };
            (t.count, unseen, t.bins.len(), std::cmp::Reverse(name.to_string()))
        };
        let best = tally
            .iter()
            .max_by_key(|(n, t)| key(n, t))
            .map(|(n, _)| *n)
            .expect("non-empty tally");
        let t = tally.remove(best).expect("present");
        seen.extend(t.modality);
        chosen.push((best.to_string(), t.count));
    }
    chosen
}

pub(crate) fn frequency_word(count: usize) -> &'static str {
    match count {
        0 | 1 => "rarely",
        2 | 3 => "sometimes",
        _ => "frequently",
    }
}

pub(crate) fn summarize(actions: &[(String, usize)]) -> String {
    if actions.is_empty() {
        return NO_ACTIVITY.to_string();
    }
    let parts: Vec<String> = actions
        .iter()
        .map(|(c, n)| format!("{} {c}", frequency_word(*n)))
        .collect();
    format!("{}.", parts.join(", "))
}

pub fn build_future_pairs(users: &[SynthUser], opts: &FutureOptions) -> Vec<FuturePair> {
    users
        .iter()
        .map(|u| {
            let actions = select_actions(&u.future, u.profile.window_end, opts);
            FuturePair {
                user_id: u.profile.user_id.clone(),
                query: FUTURE_QUERY.to_string(),
                answer: summarize(&actions),
                actions: actions.into_iter().map(|(c, _)| c).collect(),
            }
        })
        .collect()
}
