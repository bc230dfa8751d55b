use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::future::NO_ACTIVITY;
use super::{catalog, user_seed, UserProfile};
use crate::error::{Error, Result};
use crate::vocab::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub keywords: Vec<String>,
}

/// The fixed pool of 72 life topics.
pub fn topics() -> &'static [Topic] {
    static TOPICS: OnceLock<Vec<Topic>> = OnceLock::new();
    TOPICS.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/topics.json")).expect("bundled topic pool parses")
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub user_id: String,
    pub topic: String,
    pub query: String,
    pub answer: String,
    pub reflected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QAOptions {
    pub top_k: usize,
    pub per_user: usize,
    pub reflect: bool,
    pub seed: u64,
}

impl Default for QAOptions {
    fn default() -> Self {
        Self {
            top_k: 10,
            per_user: 1,
            reflect: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QaStats {
    pub generated: usize,
    pub skipped: usize,
    pub sentences_removed: usize,
}

/// Everything a generator may look at for one draft answer.
#[derive(Debug)]
pub struct GenRequest<'a> {
    pub user_id: &'a str,
    pub prompt: String,
    pub query: &'a str,
    pub topic: &'a Topic,
    pub categories: &'a BTreeMap<String, usize>,
    pub seed: u64,
}

pub trait AnswerGenerator {
    fn generate(&self, req: &GenRequest<'_>) -> Result<String>;
}

/// Rule-based stand-in for a language model. It describes how often the
/// profile touches each topic keyword and sometimes adds an unsupported
/// sentence, which the reflection pass is expected to strip.
#[derive(Debug, Clone)]
pub struct SurrogateGenerator {
    pub seed: u64,
    pub hallucination_prob: f64,
}

impl SurrogateGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            hallucination_prob: 0.3,
        }
    }
}

fn history_frequency(count: usize) -> &'static str {
    match count {
        0..=2 => "rarely",
        3..=5 => "sometimes",
        _ => "frequently",
    }
}

impl AnswerGenerator for SurrogateGenerator {
    fn generate(&self, req: &GenRequest<'_>) -> Result<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed ^ self.seed);
        let mut sentences: Vec<String> = req
            .topic
            .keywords
            .iter()
            .filter_map(|k| req.categories.get(k).map(|&n| format!("{} uses {k}.", history_frequency(n))))
            .collect();
        if sentences.is_empty() {
            sentences.push(NO_ACTIVITY.to_string());
        }
        if rng.random_bool(self.hallucination_prob) {
            let absent: Vec<&str> = catalog::category_words()
                .into_iter()
                .filter(|c| !req.categories.contains_key(*c))
                .collect();
            if let Some(c) = absent.get(rng.random_range(0..absent.len().max(1))) {
                sentences.push(format!("also uses {c}."));
            }
        }
        Ok(sentences.join(" "))
    }
}

fn query_for(topic: &Topic) -> String {
    match topic.keywords.as_slice() {
        [a] => format!("how does the user engage with {a}?"),
        [a, b, ..] => format!("how does the user engage with {a} and {b}?"),
        [] => "how does the user engage with this topic?".to_string(),
    }
}

fn prompt_for(profile: &UserProfile, bag: &BTreeMap<String, usize>, topic: &Topic, query: &str) -> String {
    let summary: Vec<String> = bag.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    format!(
        "User {} activity over the past 90 days: {}\nTopic: {}\nQuestion: {query}\nAnswer in short sentences using only the activity listed.",
        profile.user_id,
        summary.join(", "),
        topic.name
    )
}

fn cosine(topic: &Topic, bag: &BTreeMap<String, usize>) -> f64 {
    let kws: BTreeSet<&str> = topic.keywords.iter().map(String::as_str).collect();
    let dot: f64 = kws.iter().map(|k| bag.get(*k).copied().unwrap_or(0) as f64).sum();
    let nb = bag.values().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
    let nt = (kws.len() as f64).sqrt();
    if nb == 0.0 || nt == 0.0 {
        0.0
    } else {
        dot / (nb * nt)
    }
}

/// Indices of the `k` topics most similar to the profile's category bag,
/// best first; ties go to the lower index.
pub fn rank_topics(bag: &BTreeMap<String, usize>, pool: &[Topic], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = pool.iter().enumerate().map(|(i, t)| (cosine(t, bag), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Drops every sentence that names an event word the profile never shows.
/// Returns the cleaned answer and the number of removed sentences.
pub fn reflect(answer: &str, profile_words: &BTreeMap<String, usize>) -> (String, usize) {
    let tok = Tokenizer::get();
    let event_words: BTreeSet<String> = catalog::event_words().into_iter().collect();
    let mut kept = Vec::new();
    let mut removed = 0;
    for sentence in answer.split_inclusive('.') {
        let s = sentence.trim();
        if s.is_empty() {
            continue;
        }
        let unsupported = tok.encode(s).iter().filter_map(|&id| tok.word(id)).any(|w| {
            event_words.contains(w) && !profile_words.contains_key(w)
        });
        if unsupported {
            removed += 1;
        } else {
            kept.push(s);
        }
    }
    if kept.is_empty() {
        (NO_ACTIVITY.to_string(), removed)
    } else {
        (kept.join(" "), removed)
    }
}

pub fn build_qa_pairs(
    profiles: &[UserProfile],
    generator: &dyn AnswerGenerator,
    opts: &QAOptions,
) -> Result<(Vec<QAPair>, QaStats)> {
    let pool = topics();
    if pool.is_empty() {
        return Err(Error::Config("empty topic pool".into()));
    }
    let mut out = Vec::new();
    let mut stats = QaStats::default();
    for (idx, p) in profiles.iter().enumerate() {
        let seed = user_seed(opts.seed ^ 0x0A5A, idx as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bag = p.category_counts();
        let words = p.token_bag();
        let mut top = rank_topics(&bag, pool, opts.top_k);
        top.shuffle(&mut rng);
        for &t in top.iter().take(opts.per_user) {
            let topic = &pool[t];
            let query = query_for(topic);
            let req = GenRequest {
                user_id: &p.user_id,
                prompt: prompt_for(p, &bag, topic, &query),
                query: &query,
                topic,
                categories: &bag,
                seed: rng.random(),
            };
            let draft = match generator.generate(&req) {
                Ok(d) if !d.trim().is_empty() => d,
                Ok(_) | Err(_) => {
                    stats.skipped += 1;
                    continue;
                }
            };
            let answer = if opts.reflect {
                let (a, removed) = reflect(&draft, &words);
                stats.sentences_removed += removed;
                a
            } else {
                draft
            };
            stats.generated += 1;
            out.push(QAPair {
                user_id: p.user_id.clone(),
                topic: topic.name.clone(),
                query,
                answer,
                reflected: opts.reflect,
            });
        }
    }
    Ok((out, stats))
}
