//! Amortization benchmark: prefixes of an exact length, queries of an
//! exact length, timed with and without the cache.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hier::{EventRecord, HierConfig, Modality, Payload};
use crate::model::{ModelSpec, QAnchor};
use crate::serve::{build_prefix, embed_query, embed_uncached_counted};
use crate::synth::{UserProfile, HISTORY_DAYS};
use crate::vocab::{query_segment, Tokenizer};

const FILLER: [&str; 12] = [
    "dining", "travel", "coffee", "grocery", "taxi", "movie", "hotel", "game", "music", "rent", "fuel", "flight",
];

const QUERY_WORDS: [&str; 10] = [
    "will", "the", "user", "redeem", "a", "dining", "travel", "voucher", "next", "period",
];

/// Retention caps that let a full profile reach exactly `l_p` tokens: one
/// tabular token, seven structural tokens, the rest spread over events.
pub fn retention_for(l_p: usize) -> Result<[usize; 6]> {
    if l_p < 8 {
        return Err(Error::Config(format!("prefix length {l_p} below the 8-token minimum")));
    }
    let events = l_p - 8;
    let mut r = [events / 5, events / 5, events / 5, events / 5, events / 5, 1];
    for slot in r.iter_mut().take(events % 5) {
        *slot += 1;
    }
    Ok(r)
}

/// `base` with retention caps sized for `l_p`.
pub fn bench_spec(base: &ModelSpec, l_p: usize) -> Result<ModelSpec> {
    let mut s = base.clone();
    s.hier.retention = retention_for(l_p)?;
    Ok(s)
}

/// A profile that fills every retention slot of `hier`, so its prefix is
/// `7 + Σ caps` tokens long.
pub fn sized_profile(hier: &HierConfig, user_id: &str, seed: u64) -> Result<UserProfile> {
    let tok = Tokenizer::get();
    let mut events = Vec::new();
    let mut k = seed as usize;
    for m in Modality::EVENT_MODALITIES {
        for i in 0..hier.cap(m) {
            k = k.wrapping_mul(31).wrapping_add(7);
            let words = format!("{} {}", FILLER[k % FILLER.len()], FILLER[(k / 7) % FILLER.len()]);
            events.push(EventRecord {
                modality: m,
                day: (i as u32 * 3 + m.index() as u32) % HISTORY_DAYS,
                payload: Payload::Tokens(tok.encode(&words)),
            });
        }
    }
    events.sort_by_key(|e| e.day);
    let tabular = (0..hier.tabular_features)
        .map(|i| ((seed as f64 + i as f64) * 0.37).sin())
        .collect();
    let p = UserProfile {
        user_id: user_id.to_string(),
        window_end: HISTORY_DAYS,
        events,
        tabular: Some(tabular),
    };
    p.validate()?;
    Ok(p)
}

/// A query whose segment (separator included) is exactly `l_q` tokens.
pub fn sized_query(l_q: usize, variant: usize) -> Result<String> {
    if l_q < 2 {
        return Err(Error::Config("query length must be at least 2".into()));
    }
    let tok = Tokenizer::get();
    let vocab: Vec<&str> = QUERY_WORDS.into_iter().filter(|w| tok.word_id(w).is_some()).collect();
    let words: Vec<&str> = (0..l_q - 1).map(|i| vocab[(i + variant) % vocab.len()]).collect();
    let q = words.join(" ");
    debug_assert_eq!(query_segment(&q).len(), l_q);
    Ok(q)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub mode: &'static str,
    pub run: usize,
    pub l_p: usize,
    pub l_q: usize,
    pub queries: usize,
    pub seconds: f64,
    pub tokens_processed: usize,
    pub attention_pairs: usize,
}

/// Times `queries` embeddings per run. The cached mode includes one
/// prefix build per run.
pub fn run_bench(model: &QAnchor, profile: &UserProfile, queries: &[String], cached: bool, runs: usize) -> Result<Vec<BenchRow>> {
    let l_q = queries.first().map_or(0, |q| query_segment(q).len());
    let mut out = Vec::with_capacity(runs);
    for run in 0..runs {
        let t = Instant::now();
        let (mut tokens, mut pairs, l_p);
        if cached {
            let entry = build_prefix(model, profile)?;
            l_p = entry.l_p;
            tokens = 0;
            pairs = 0;
            for q in queries {
                let (_, c) = embed_query(model, &entry, q, None)?;
                tokens += c.tokens_processed;
                pairs += c.attention_pairs;
            }
        } else {
            l_p = model.encoder.assemble(&model.store, profile)?.len();
            tokens = 0;
            pairs = 0;
            for q in queries {
                let (_, c) = embed_uncached_counted(model, profile, q, None)?;
                tokens += c.tokens_processed;
                pairs += c.attention_pairs;
            }
        }
        out.push(BenchRow {
            mode: if cached { "cached" } else { "uncached" },
            run,
            l_p,
            l_q,
            queries: queries.len(),
            seconds: t.elapsed().as_secs_f64(),
            tokens_processed: tokens,
            attention_pairs: pairs,
        });
    }
    Ok(out)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_spec;

    #[test]
    fn sized_profile_hits_the_requested_length() {
        for l_p in [8, 9, 33, 64, 128] {
            let spec = bench_spec(&tiny_spec(), l_p).unwrap();
            let m = QAnchor::new(&spec).unwrap();
            let p = sized_profile(&spec.hier, "u", 3).unwrap();
            assert_eq!(m.encoder.assemble(&m.store, &p).unwrap().len(), l_p);
        }
        assert!(retention_for(7).is_err());
    }

    #[test]
    fn sized_query_hits_the_requested_length() {
        for l_q in 2..20 {
            for v in 0..3 {
                assert_eq!(query_segment(&sized_query(l_q, v).unwrap()).len(), l_q);
            }
        }
    }

    #[test]
    fn bench_counters_match_the_arithmetic() {
        let spec = bench_spec(&tiny_spec(), 32).unwrap();
        let m = QAnchor::new(&spec).unwrap();
        let p = sized_profile(&spec.hier, "u", 1).unwrap();
        let qs: Vec<String> = (0..4).map(|i| sized_query(6, i).unwrap()).collect();
        let c = run_bench(&m, &p, &qs, true, 1).unwrap();
        let u = run_bench(&m, &p, &qs, false, 1).unwrap();
        assert_eq!(c[0].tokens_processed, 4 * 7);
        assert_eq!(u[0].tokens_processed, 4 * (32 + 7));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
