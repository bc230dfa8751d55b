//! Prefix caching: encode a user's tokens once, then answer many
//! scenario queries with suffix-only passes.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::backbone::{MixedSequence, PrefixKV, SeqItem};
use crate::error::{Error, Result};
use crate::hier::{EventRecord, HierTokens, Modality};
use crate::model::{PromptPlacement, QAnchor};
use crate::synth::UserProfile;
use crate::tensor::{Graph, Tensor, Var};
use crate::tune::SoftPrompt;
use crate::vocab::{query_segment, USER_EMB};

/// One adapted event vector in the token buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferedToken {
    pub day: u32,
    pub vector: Vec<f64>,
}

/// A user's encoded prefix and the buffer it was built from.
#[derive(Debug, Clone)]
pub struct PrefixEntry {
    pub user_id: String,
    pub kv: PrefixKV,
    pub l_p: usize,
    /// Every in-window adapted event per modality, oldest first.
    pub buffer: [Vec<BufferedToken>; 6],
    /// Modal summary per present modality.
    pub summaries: [Option<Vec<f64>>; 6],
    pub tokens: HierTokens,
    /// Profile the entry reflects, events ordered by day.
    pub profile: UserProfile,
    pub built_at_ms: u128,
}

impl PrefixEntry {
    /// Retained buffer tokens plus the seven structural tokens must equal `l_p`.
    pub fn validate(&self, model: &QAnchor) -> Result<()> {
        let cfg = model.encoder.config();
        let retained: usize = Modality::ALL
            .iter()
            .map(|&m| self.buffer[m.index()].len().min(cfg.cap(m)))
            .sum();
        if retained + 7 != self.l_p || self.kv.len() != self.l_p || self.tokens.len() != self.l_p {
            return Err(Error::Contract(format!(
                "prefix of {} tokens disagrees with buffer ({retained} retained)",
                self.l_p
            )));
        }
        Ok(())
    }

    /// Floats held by the key/value cache.
    pub fn footprint_floats(&self) -> usize {
        self.kv.footprint_floats()
    }
}

/// Work done by one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CostCounter {
    /// New hidden states computed.
    pub tokens_processed: usize,
    /// Query-key scores computed, summed over layers and heads.
    pub attention_pairs: usize,
    pub cached: bool,
}

impl CostCounter {
    fn charge(&mut self, model: &QAnchor, past: usize, new: usize) {
        let cfg = model.config();
        self.tokens_processed += new;
        let pairs: usize = (0..new).map(|i| past + i + 1).sum();
        self.attention_pairs += pairs * cfg.n_layers * cfg.n_heads;
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

fn normalized(profile: &UserProfile) -> UserProfile {
    let mut p = profile.clone();
    p.events.sort_by_key(|e| e.day);
    p
}

fn prefix_sequence(tokens: &HierTokens) -> MixedSequence {
    MixedSequence::new(tokens.rows().into_iter().map(SeqItem::Injected).collect())
}

/// Encodes `profile` and runs the backbone over its tokens.
pub fn build_prefix(model: &QAnchor, profile: &UserProfile) -> Result<PrefixEntry> {
    let profile = normalized(profile);
    profile.validate()?;
    let mut g = model.inference_graph();
    let batch = model.encoder.encode_batch(&mut g, &model.store, &[&profile])?;
    let pool = g.value(batch.pool);
    let rows = &batch.users[0];
    let buffer = std::array::from_fn(|m| {
        batch.buffers[0][m]
            .iter()
            .map(|&(day, r)| BufferedToken {
                day,
                vector: pool.row(r).to_vec(),
            })
            .collect()
    });
    let summaries = std::array::from_fn(|m| rows.present[m].then(|| pool.row(rows.modal[m]).to_vec()));
    let tokens = crate::hier::tokens_from_rows(pool, rows);
    let (_, kv) = model.backbone.run(&model.store, &prefix_sequence(&tokens), None)?;
    Ok(PrefixEntry {
        user_id: profile.user_id.clone(),
        l_p: tokens.len(),
        kv,
        buffer,
        summaries,
        tokens,
        profile,
        built_at_ms: now_ms(),
    })
}

/// Anchored embedding for `query` against a cached prefix. Sequence-start
/// prompts sit before the prefix, so they take a full uncached pass.
pub fn embed_query(
    model: &QAnchor,
    entry: &PrefixEntry,
    query: &str,
    prompt: Option<&SoftPrompt>,
) -> Result<(Vec<f64>, CostCounter)> {
    let mut cost = CostCounter::default();
    if let Some(p) = prompt.filter(|p| p.placement == PromptPlacement::SequenceStart) {
        let seq = model.anchor_sequence(&entry.tokens, query, Some(p.as_arg()));
        cost.charge(model, 0, seq.len());
        let pos = seq.sentinel_position()?;
        let (hidden, _) = model.backbone.run(&model.store, &seq, None)?;
        return Ok((model.project(hidden.row(pos))?, cost));
    }
    let mut items = Vec::new();
    if let Some(p) = prompt {
        items.extend((0..p.len()).map(|r| SeqItem::Injected(p.vectors.row(r).to_vec())));
    }
    items.extend(query_segment(query).into_iter().map(SeqItem::Token));
    items.push(SeqItem::Token(USER_EMB));
    let seq = MixedSequence::new(items);
    cost.cached = true;
    cost.charge(model, entry.l_p, seq.len());
    let (hidden, _) = model.backbone.run(&model.store, &seq, Some(&entry.kv))?;
    Ok((model.project(hidden.row(seq.len() - 1))?, cost))
}

/// Embedding and cost of the same request without any cache.
pub fn embed_uncached_counted(
    model: &QAnchor,
    profile: &UserProfile,
    query: &str,
    prompt: Option<&SoftPrompt>,
) -> Result<(Vec<f64>, CostCounter)> {
    let tokens = model.encoder.assemble(&model.store, profile)?;
    let seq = model.anchor_sequence(&tokens, query, prompt.map(SoftPrompt::as_arg));
    let mut cost = CostCounter::default();
    cost.charge(model, 0, seq.len());
    let pos = seq.sentinel_position()?;
    let (hidden, _) = model.backbone.run(&model.store, &seq, None)?;
    Ok((model.project(hidden.row(pos))?, cost))
}

fn stack(rows: &[&[f64]]) -> Result<Tensor> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

/// Applies new events: adapts only the new events, expires tokens that
/// left the window, re-pools the summaries of changed modalities, then
/// rebuilds the cache from the buffer.
pub fn refresh_prefix(model: &QAnchor, entry: &PrefixEntry, new_events: &[EventRecord]) -> Result<PrefixEntry> {
    if new_events.is_empty() {
        return Ok(entry.clone());
    }
    let merged = entry.profile.merged_with(new_events)?;
    let enc = &model.encoder;
    let mut g = model.inference_graph();
    let mut buffer = entry.buffer.clone();
    let mut changed = [false; 6];

    let mut fresh: [Vec<&EventRecord>; 6] = Default::default();
    for ev in new_events {
        fresh[ev.modality.index()].push(ev);
    }
    for m in Modality::EVENT_MODALITIES {
        let evs = &mut fresh[m.index()];
        if evs.is_empty() {
            continue;
        }
        evs.sort_by_key(|e| e.day);
        let mut data = Vec::new();
        for ev in evs.iter() {
            data.extend(enc.base_encode(ev)?);
        }
        let h = g.constant(Tensor::new(vec![evs.len(), enc.config().d_enc], data)?);
        let out = enc.event_adapter(&mut g, &model.store, m, h)?;
        let out = g.value(out);
        for (i, ev) in evs.iter().enumerate() {
            buffer[m.index()].push(BufferedToken {
                day: ev.day,
                vector: out.row(i).to_vec(),
            });
        }
        changed[m.index()] = true;
    }
    let tab = Modality::Tabular.index();
    if !fresh[tab].is_empty() {
        let ev = &merged.modality_events(Modality::Tabular)[0];
        let h = g.constant(Tensor::new(vec![1, enc.config().d_enc], enc.base_encode(ev)?)?);
        let out = enc.event_adapter(&mut g, &model.store, Modality::Tabular, h)?;
        buffer[tab] = vec![BufferedToken {
            day: ev.day,
            vector: g.value(out).row(0).to_vec(),
        }];
        changed[tab] = true;
    }
    if let Some(t) = buffer[tab].first_mut() {
        t.day = merged.window_end.saturating_sub(1);
    }
    let start = merged.window_start();
    for m in Modality::EVENT_MODALITIES {
        let before = buffer[m.index()].len();
        buffer[m.index()].retain(|t| t.day >= start);
        changed[m.index()] |= buffer[m.index()].len() != before;
    }

    let mut summaries = entry.summaries.clone();
    for m in Modality::ALL {
        let mi = m.index();
        if !changed[mi] {
            continue;
        }
        summaries[mi] = if buffer[mi].is_empty() {
            None
        } else {
            let rows: Vec<&[f64]> = buffer[mi].iter().map(|t| t.vector.as_slice()).collect();
            let ev = g.constant(stack(&rows)?);
            let s = enc.modal_summary(&mut g, &model.store, ev)?;
            Some(g.value(s).row(0).to_vec())
        };
    }
    let tokens = assemble_from_buffer(model, &mut g, &buffer, &summaries)?;
    let (_, kv) = model.backbone.run(&model.store, &prefix_sequence(&tokens), None)?;
    Ok(PrefixEntry {
        user_id: entry.user_id.clone(),
        l_p: tokens.len(),
        kv,
        buffer,
        summaries,
        tokens,
        profile: merged,
        built_at_ms: now_ms(),
    })
}

fn assemble_from_buffer(
    model: &QAnchor,
    g: &mut Graph,
    buffer: &[Vec<BufferedToken>; 6],
    summaries: &[Option<Vec<f64>>; 6],
) -> Result<HierTokens> {
    let enc = &model.encoder;
    let d = model.config().d_model;
    let mut slots: [Option<Var>; 6] = [None; 6];
    for m in Modality::ALL {
        if let Some(s) = &summaries[m.index()] {
            slots[m.index()] = Some(g.constant(Tensor::new(vec![1, d], s.clone())?));
        }
    }
    let user = enc.user_summary(g, &model.store, &slots)?;
    let user_token = g.value(user).row(0).to_vec();
    let mut modal_tokens: [Vec<f64>; 6] = Default::default();
    for m in Modality::ALL {
        modal_tokens[m.index()] = match &summaries[m.index()] {
            Some(s) => s.clone(),
            None => {
                let p = enc.placeholder(g, &model.store, m)?;
                g.value(p).row(0).to_vec()
            }
        };
    }
    let event_tokens = std::array::from_fn(|mi| {
        let cap = enc.config().cap(Modality::ALL[mi]);
        buffer[mi].iter().rev().take(cap).map(|t| t.vector.clone()).collect()
    });
    Ok(HierTokens {
        user_token,
        modal_tokens,
        event_tokens,
    })
}
