//! Synthetic behaviour corpora: persona-driven profiles, future-behaviour
//! summaries, topic question/answer pairs and downstream scenario labels.

pub mod catalog;
mod corpus;
mod future;
mod qa;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{EventRecord, Modality, Payload};
use crate::vocab::Tokenizer;
use catalog::Archetype;

pub use corpus::{parse_record, read_corpus, record_line, write_corpus, Corpus, Record, SCHEMA_VERSION};
pub use future::{build_future_pairs, select_actions, DiversityRule, FutureOptions, FuturePair, FUTURE_QUERY};
pub use qa::{
    build_qa_pairs, rank_topics, reflect, topics, AnswerGenerator, GenRequest, QAOptions, QAPair, QaStats,
    SurrogateGenerator, Topic,
};

/// Length of the history window in days.
pub const HISTORY_DAYS: u32 = 90;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    /// Exclusive end of the history window (absolute day).
    pub window_end: u32,
    /// Non-tabular events sorted by day.
    pub events: Vec<EventRecord>,
    pub tabular: Option<Vec<f64>>,
}

impl UserProfile {
    pub fn window_start(&self) -> u32 {
        self.window_end.saturating_sub(HISTORY_DAYS)
    }

    pub fn validate(&self) -> Result<()> {
        let start = self.window_start();
        for w in self.events.windows(2) {
            if w[0].day > w[1].day {
                return Err(Error::Contract(format!("{}: events not sorted by day", self.user_id)));
            }
        }
        for ev in &self.events {
            if ev.modality == Modality::Tabular {
                return Err(Error::Contract("tabular features belong in the tabular field".into()));
            }
            if ev.day < start || ev.day >= self.window_end {
                return Err(Error::Contract(format!(
                    "{}: event day {} outside window [{start}, {})",
                    self.user_id, ev.day, self.window_end
                )));
            }
            if !matches!(&ev.payload, Payload::Tokens(t) if !t.is_empty()) {
                return Err(Error::DegenerateInput(format!("{}: event without tokens", self.user_id)));
            }
        }
        Ok(())
    }

    /// Events of one modality, oldest first. Tabular yields the feature
    /// vector as a single record dated on the last window day.
    pub fn modality_events(&self, m: Modality) -> Vec<EventRecord> {
        if m == Modality::Tabular {
            return self
                .tabular
                .iter()
                .map(|x| EventRecord {
                    modality: Modality::Tabular,
                    day: self.window_end.saturating_sub(1),
                    payload: Payload::Features(x.clone()),
                })
                .collect();
        }
        self.events.iter().filter(|e| e.modality == m).cloned().collect()
    }

    /// Counts of every word token across event payloads.
    pub fn token_bag(&self) -> BTreeMap<String, usize> {
        let tok = Tokenizer::get();
        let mut bag = BTreeMap::new();
        for ev in &self.events {
            if let Payload::Tokens(ids) = &ev.payload {
                for &id in ids {
                    if let Some(w) = tok.word(id) {
                        *bag.entry(w.to_string()).or_insert(0) += 1;
                    }
                }
            }
        }
        bag
    }

    /// Category of each event (its first payload token).
    pub fn category_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for ev in &self.events {
            if let Some(c) = event_category(ev) {
                *out.entry(c.to_string()).or_insert(0) += 1;
            }
        }
        out
    }

    /// Appends newer events and slides the window so that it ends after the
    /// newest one; events that fall out of the 90-day window are dropped.
    pub fn merged_with(&self, new_events: &[EventRecord]) -> Result<UserProfile> {
        let mut out = self.clone();
        for ev in new_events {
            if ev.day < self.window_end {
                return Err(Error::Stale(format!(
                    "event on day {} predates window end {}",
                    ev.day, self.window_end
                )));
            }
            match (&ev.modality, &ev.payload) {
                (Modality::Tabular, Payload::Features(x)) => out.tabular = Some(x.clone()),
                (Modality::Tabular, _) | (_, Payload::Features(_)) => {
                    return Err(Error::Contract("payload does not match modality".into()))
                }
                _ => out.events.push(ev.clone()),
            }
            out.window_end = out.window_end.max(ev.day + 1);
        }
        out.events.sort_by_key(|e| e.day);
        let start = out.window_start();
        out.events.retain(|e| e.day >= start);
        Ok(out)
    }
}

pub fn event_category(ev: &EventRecord) -> Option<&'static str> {
    match &ev.payload {
        Payload::Tokens(ids) => ids.first().and_then(|&id| Tokenizer::get().word(id)).and_then(|w| {
            catalog::category_words().into_iter().find(|c| *c == w)
        }),
        Payload::Features(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    /// Mixture weights over [`Archetype::ALL`].
    pub weights: [f64; 6],
    /// Expected events per 90 days for each event modality.
    pub activity: [f64; 5],
    pub seed: u64,
}

impl Persona {
    pub fn weight(&self, a: Archetype) -> f64 {
        self.weights[a.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    /// Category token whose occurrence defines a positive.
    pub target: String,
    pub modality: Modality,
    /// Prediction window in days after the history window, `[start, end)`.
    pub window: (u32, u32),
    /// Archetype that drives the trigger probability.
    pub archetype: String,
    /// Population base rate of the target event.
    pub rate: f64,
    pub query: String,
}

impl ScenarioSpec {
    pub fn archetype(&self) -> Result<Archetype> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == self.archetype)
            .ok_or_else(|| Error::Config(format!("unknown archetype {}", self.archetype)))
    }
}

pub fn builtin_scenarios() -> Vec<ScenarioSpec> {
    let spec = |name: &str, target: &str, m, window, arch: &str, rate, query: &str| ScenarioSpec {
        name: name.into(),
        target: target.into(),
        modality: m,
        window,
        archetype: arch.into(),
        rate,
        query: query.into(),
    };
    vec![
        spec(
            "engagement",
            "spm_member_signin",
            Modality::Spm,
            (0, 14),
            "entertainment",
            0.15,
            "will the user sign in for member rewards soon?",
        ),
        spec(
            "credit_risk",
            "bill_overdue",
            Modality::Bill,
            (0, 28),
            "risk",
            0.10,
            "is the user likely to miss a repayment?",
        ),
        spec(
            "dining_offer",
            "mp_dining_voucher",
            Modality::Mini,
            (0, 28),
            "dining",
            0.15,
            "will the user redeem a dining voucher?",
        ),
        spec(
            "travel_offer",
            "mp_travel_package",
            Modality::Mini,
            (0, 28),
            "navigation",
            0.12,
            "will the user book a travel package?",
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub seed: u64,
    /// Concentration of the symmetric Dirichlet over archetypes.
    pub alpha: f64,
    /// Exclusive end day of every generated history window.
    pub window_end: u32,
    pub future_days: u32,
    /// Range of expected events per 90 days, per event modality.
    pub activity: [(f64, f64); 5],
    pub noise_prob: f64,
    pub scenarios: Vec<ScenarioSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 1000,
            seed: 0,
            alpha: 0.2,
            window_end: HISTORY_DAYS,
            future_days: 28,
            activity: [(12.0, 36.0), (6.0, 18.0), (6.0, 18.0), (2.0, 8.0), (4.0, 12.0)],
            noise_prob: 0.3,
            scenarios: builtin_scenarios(),
        }
    }
}

/// One generated user with its held-out future events.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUser {
    pub persona: Persona,
    pub profile: UserProfile,
    /// Events in `[window_end, window_end + future_days)`, sorted by day.
    pub future: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLabel {
    pub user_id: String,
    pub scenario: String,
    pub y: u8,
    /// Absolute prediction window `[start, end)`.
    pub window: (u32, u32),
}

pub(crate) fn user_seed(seed: u64, idx: u64) -> u64 {
    let mut z = seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn word(w: &str) -> u32 {
    Tokenizer::get()
        .word_id(w)
        .unwrap_or_else(|| panic!("catalog word {w} missing from tokenizer"))
}

fn attribute(m: Modality, rng: &mut ChaCha8Rng) -> &'static str {
    match m {
        Modality::Bill => catalog::AMOUNTS[rng.random_range(0..catalog::AMOUNTS.len())],
        Modality::App => {
            if rng.random_bool(0.3) {
                catalog::ACTION_INSTALLED
            } else {
                catalog::ACTION_OPEN
            }
        }
        Modality::Search => catalog::ACTION_VISIT,
        _ => catalog::ACTION_OPEN,
    }
}

fn gen_event(persona: &Persona, m: Modality, day: u32, noise_prob: f64, rng: &mut ChaCha8Rng) -> EventRecord {
    let arch = Archetype::ALL[sample_index(&persona.weights, rng)];
    let focus = arch.focus(m);
    let cats = catalog::categories(m);
    let cat = if !focus.is_empty() && rng.random_bool(catalog::FOCUS_STRENGTH) {
        focus[rng.random_range(0..focus.len())]
    } else {
        cats[rng.random_range(0..cats.len())]
    };
    let mut ids = vec![word(cat), word(attribute(m, rng))];
    if rng.random_bool(noise_prob) {
        ids.push(word(&catalog::noise_token(rng.random_range(0..catalog::NOISE_TOKENS))));
    }
    EventRecord {
        modality: m,
        day,
        payload: Payload::Tokens(ids),
    }
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

fn poisson(lambda: f64, rng: &mut ChaCha8Rng) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

fn gen_events(
    persona: &Persona,
    days: (u32, u32),
    scale: f64,
    noise_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<EventRecord> {
    let mut out = Vec::new();
    for (k, m) in Modality::EVENT_MODALITIES.into_iter().enumerate() {
        let n = poisson(persona.activity[k] * scale, rng);
        for _ in 0..n {
            let day = rng.random_range(days.0..days.1);
            out.push(gen_event(persona, m, day, noise_prob, rng));
        }
    }
    out.sort_by_key(|e| e.day);
    out
}

/// Tabular features: noisy weights of every archetype except dining, plus
/// pure-noise columns.
fn gen_tabular(persona: &Persona, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut x: Vec<f64> = Archetype::ALL
        .into_iter()
        .filter(|a| *a != Archetype::Dining)
        .map(|a| persona.weight(a) + noise.sample(rng))
        .collect();
    while x.len() < catalog::TABULAR_FEATURES {
        x.push(noise.sample(rng) * 5.0);
    }
    x
}

fn gen_user(cfg: &SynthConfig, idx: usize) -> Result<SynthUser> {
    let seed = user_seed(cfg.seed, idx as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = Dirichlet::new([cfg.alpha; 6]).map_err(|e| Error::Config(format!("dirichlet: {e}")))?;
    let weights = dir.sample(&mut rng);
    let activity = std::array::from_fn(|k| {
        let (lo, hi) = cfg.activity[k];
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    });
    let persona = Persona { weights, activity, seed };
    let start = cfg.window_end.saturating_sub(HISTORY_DAYS);
    let events = gen_events(&persona, (start, cfg.window_end), 1.0, cfg.noise_prob, &mut rng);
    let tabular = Some(gen_tabular(&persona, &mut rng));
    let fut_end = cfg.window_end + cfg.future_days;
    let mut future = gen_events(
        &persona,
        (cfg.window_end, fut_end),
        cfg.future_days as f64 / HISTORY_DAYS as f64,
        cfg.noise_prob,
        &mut rng,
    );
    for sc in &cfg.scenarios {
        let a = sc.archetype()?;
        let p = (sc.rate * Archetype::ALL.len() as f64 * persona.weight(a)).clamp(0.0, 1.0);
        if rng.random_bool(p) {
            let lo = cfg.window_end + sc.window.0;
            let hi = (cfg.window_end + sc.window.1).min(fut_end).max(lo + 1);
            let day = rng.random_range(lo..hi);
            let attr = attribute(sc.modality, &mut rng);
            future.push(EventRecord {
                modality: sc.modality,
                day,
                payload: Payload::Tokens(vec![word(&sc.target), word(attr)]),
            });
        }
    }
    future.sort_by_key(|e| e.day);
    Ok(SynthUser {
        persona,
        profile: UserProfile {
            user_id: format!("u{idx:06}"),
            window_end: cfg.window_end,
            events,
            tabular,
        },
        future,
    })
}

/// Generates `cfg.users` users. Each user's randomness depends only on
/// `(seed, index)`.
pub fn gen_profiles(cfg: &SynthConfig) -> Result<Vec<SynthUser>> {
    if cfg.users == 0 {
        return Err(Error::Contract("gen_profiles needs at least one user".into()));
    }
    if !(cfg.alpha > 0.0) || cfg.window_end < HISTORY_DAYS || cfg.future_days == 0 {
        return Err(Error::Config("invalid synth configuration".into()));
    }
    for sc in &cfg.scenarios {
        sc.archetype()?;
        if !(0.0..=1.0).contains(&sc.rate) || sc.window.0 >= sc.window.1 {
            return Err(Error::Config(format!("scenario {} has an invalid rate or window", sc.name)));
        }
    }
    (0..cfg.users).map(|i| gen_user(cfg, i)).collect()
}

/// `y = 1` iff a target event falls inside the scenario's window.
pub fn label_scenarios(users: &[SynthUser], scenarios: &[ScenarioSpec]) -> Vec<ScenarioLabel> {
    let tok = Tokenizer::get();
    let mut out = Vec::with_capacity(users.len() * scenarios.len());
    for sc in scenarios {
        let target = tok.word_id(&sc.target);
        for u in users {
            let lo = u.profile.window_end + sc.window.0;
            let hi = u.profile.window_end + sc.window.1;
            let hit = u.future.iter().any(|e| {
                e.day >= lo
                    && e.day < hi
                    && matches!(&e.payload, Payload::Tokens(ids) if ids.first().copied() == target && target.is_some())
            });
            out.push(ScenarioLabel {
                user_id: u.profile.user_id.clone(),
                scenario: sc.name.clone(),
                y: hit as u8,
                window: (lo, hi),
            });
        }
    }
    out
}

/// Generates users and every derived record in one go.
pub fn synthesize(cfg: &SynthConfig, fut: &FutureOptions, qa: &QAOptions) -> Result<(Corpus, Vec<SynthUser>, QaStats)> {
    let users = gen_profiles(cfg)?;
    let future_pairs = build_future_pairs(&users, fut);
    let profiles: Vec<UserProfile> = users.iter().map(|u| u.profile.clone()).collect();
    let (qa_pairs, stats) = build_qa_pairs(&profiles, &SurrogateGenerator::new(cfg.seed), qa)?;
    let labels = label_scenarios(&users, &cfg.scenarios);
    Ok((
        Corpus {
            profiles,
            future_pairs,
            qa_pairs,
            labels,
        },
        users,
        stats,
    ))
}

#[cfg(test)]
mod tests;
