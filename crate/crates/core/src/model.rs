//! The dual-tower model: hierarchical encoder plus shared backbone, with
//! batched anchored forward passes and checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, MixedSequence, ModelConfig, RowPool, SeqItem, SeqSpec};
use crate::checkpoint::{read_container, save_store, CKPT_MAGIC};
use crate::error::{Error, Result};
use crate::hier::{EncodedBatch, HierConfig, HierEncoder, HierTokens, Modality, TokenGroup, UserRows};
use crate::synth::UserProfile;
use crate::tensor::{Graph, ParamId, ParamStore, Precision, Tensor, Var};
use crate::vocab::{query_segment, USER_EMB};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub hier: HierConfig,
}

/// Where soft-prompt vectors sit in an anchored sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPlacement {
    /// `[e_i ; prompt ; query ; <USER_EMB>]`
    #[default]
    AfterUser,
    /// `[prompt ; e_i ; query ; <USER_EMB>]`
    SequenceStart,
}

/// One sequence of a batched forward: optional user tokens (an index into
/// an [`EncodedBatch`]), text tokens, the sentinel, then optional answer
/// tokens for teacher forcing.
#[derive(Debug, Clone, Default)]
pub struct SeqPlan {
    pub user: Option<usize>,
    pub text: Vec<u32>,
    pub answer: Vec<u32>,
}

impl SeqPlan {
    pub fn anchor(user: usize, query: &str) -> Self {
        Self {
            user: Some(user),
            text: query_segment(query),
            answer: Vec::new(),
        }
    }

    /// Semantic-tower sequence `[answer ; <USER_EMB>]`.
    pub fn semantic(answer: &[u32]) -> Self {
        Self {
            user: None,
            text: answer.to_vec(),
            answer: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeqLayout {
    /// First stacked row of this sequence.
    pub start: usize,
    pub len: usize,
    /// Offset of the sentinel inside the sequence.
    pub sentinel: usize,
    pub groups: Vec<TokenGroup>,
}

#[derive(Debug)]
pub struct BatchOut {
    /// Unit-norm embeddings, one row per plan.
    pub emb: Var,
    pub hidden: Var,
    pub attn: Vec<Var>,
    pub layouts: Vec<SeqLayout>,
}

/// Soft-prompt rows ready to splice into a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PromptInput {
    pub rows: Var,
    pub placement: PromptPlacement,
}

#[derive(Debug, Clone)]
pub struct QAnchor {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: HierEncoder,
    pub precision: Precision,
}

pub fn user_groups(rows: &UserRows) -> Vec<TokenGroup> {
    let mut out = vec![TokenGroup::User];
    out.extend(Modality::ALL.map(TokenGroup::Summary));
    for m in Modality::ALL {
        out.extend(std::iter::repeat_n(TokenGroup::Events(m), rows.events[m.index()].len()));
    }
    out
}

impl QAnchor {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.model.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.model.seed);
        let backbone = Backbone::new(&spec.model, &mut store, &mut rng)?;
        let encoder = HierEncoder::new(&spec.hier, &spec.model, &mut store, spec.model.seed)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            backbone,
            encoder,
            precision: Precision::F64,
        })
    }

    /// Attaches to a store that already holds every parameter.
    pub fn from_store(spec: &ModelSpec, store: ParamStore) -> Result<Self> {
        let backbone = Backbone::attach(&spec.model, &store)?;
        let encoder = HierEncoder::attach(&spec.hier, &spec.model, &store)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            backbone,
            encoder,
            precision: Precision::F64,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.model
    }

    pub fn graph(&self) -> Graph {
        Graph::new().with_precision(self.precision)
    }

    pub fn inference_graph(&self) -> Graph {
        Graph::inference().with_precision(self.precision)
    }

    pub fn apply_lora(&mut self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.model.seed ^ 0x10_4A);
        self.backbone.apply_lora(&mut self.store, &mut rng)
    }

    pub fn merge_lora(&mut self) -> Result<()> {
        self.backbone.merge_lora(&mut self.store)
    }

    /// Parameters of the backbone body and the encoder, i.e. everything a
    /// prompt-tuning run must leave untouched.
    pub fn frozen_during_tuning(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Marks exactly the pretraining parameters as trainable: adapters (or
    /// the full body when no adapters exist), encoder, projection head.
    pub fn set_pretrain_trainable(&mut self) {
        self.store.set_all_trainable(false);
        let body = if self.backbone.has_lora() {
            self.backbone.lora_param_ids()
        } else {
            self.backbone.base_param_ids()
        };
        for id in body
            .into_iter()
            .chain(self.backbone.head_param_ids())
            .chain(self.encoder.param_ids())
        {
            self.store.set_trainable(id, true);
        }
    }

    /// Stacked forward over `plans`. `enc` supplies the user rows referenced
    /// by `SeqPlan::user`.
    pub fn forward_plans(
        &self,
        g: &mut Graph,
        enc: Option<&EncodedBatch>,
        plans: &[SeqPlan],
        prompt: Option<PromptInput>,
    ) -> Result<BatchOut> {
        if plans.is_empty() {
            return Err(Error::Contract("forward of no sequences".into()));
        }
        let mut pool = RowPool::new();
        let enc_base = enc.map(|e| pool.add(g, e.pool));
        let (prompt_base, n_prompt) = match prompt {
            Some(p) => (pool.add(g, p.rows), g.value(p.rows).rows()),
            None => (0, 0),
        };
        let all_ids: Vec<u32> = plans
            .iter()
            .flat_map(|p| p.text.iter().copied().chain([USER_EMB]).chain(p.answer.iter().copied()))
            .collect();
        let tok_emb = self.backbone.embed_tokens(g, &self.store, &all_ids)?;
        let tok_base = pool.add(g, tok_emb);

        let mut order = Vec::new();
        let mut layouts = Vec::with_capacity(plans.len());
        let mut specs = Vec::with_capacity(plans.len());
        let mut tok_cursor = tok_base;
        for plan in plans {
            let start = order.len();
            let mut groups = Vec::new();
            let push_prompt = |order: &mut Vec<usize>, groups: &mut Vec<TokenGroup>| {
                order.extend(prompt_base..prompt_base + n_prompt);
                groups.extend(std::iter::repeat_n(TokenGroup::Prompt, n_prompt));
            };
            let place = prompt.map(|p| p.placement);
            if place == Some(PromptPlacement::SequenceStart) {
                push_prompt(&mut order, &mut groups);
            }
            if let Some(u) = plan.user {
                let (e, base) = match (enc, enc_base) {
                    (Some(e), Some(b)) => (e, b),
                    _ => return Err(Error::Contract("plan references users but no encoding given".into())),
                };
                let rows = e
                    .users
                    .get(u)
                    .ok_or_else(|| Error::Index(format!("user {u} not in encoded batch")))?;
                order.extend(rows.sequence().into_iter().map(|r| base + r));
                groups.extend(user_groups(rows));
            }
            if place == Some(PromptPlacement::AfterUser) {
                push_prompt(&mut order, &mut groups);
            }
            let n_text = plan.text.len() + 1;
            order.extend(tok_cursor..tok_cursor + n_text);
            groups.extend(std::iter::repeat_n(TokenGroup::Query, n_text));
            tok_cursor += n_text;
            let sentinel = order.len() - 1 - start;
            order.extend(tok_cursor..tok_cursor + plan.answer.len());
            groups.extend(std::iter::repeat_n(TokenGroup::Query, plan.answer.len()));
            tok_cursor += plan.answer.len();
            let len = order.len() - start;
            layouts.push(SeqLayout {
                start,
                len,
                sentinel,
                groups,
            });
            specs.push(SeqSpec { len, cache: None });
        }
        let x = pool.assemble(g, &order)?;
        let out = self.backbone.forward(g, &self.store, x, &specs, false)?;
        let sentinels: Vec<usize> = layouts.iter().map(|l| l.start + l.sentinel).collect();
        let emb = self
            .backbone
            .extract_user_embedding(g, &self.store, out.hidden, &sentinels)?;
        Ok(BatchOut {
            emb,
            hidden: out.hidden,
            attn: out.attn,
            layouts,
        })
    }

    /// Anchored embeddings of many profiles for one query, computed in
    /// chunks on inference graphs.
    pub fn embed_profiles(
        &self,
        profiles: &[&UserProfile],
        query: &str,
        prompt: Option<(&Tensor, PromptPlacement)>,
        chunk: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(profiles.len());
        for part in profiles.chunks(chunk.max(1)) {
            let mut g = self.inference_graph();
            let enc = self.encoder.encode_batch(&mut g, &self.store, part)?;
            let plans: Vec<SeqPlan> = (0..part.len()).map(|i| SeqPlan::anchor(i, query)).collect();
            let p = prompt.map(|(t, placement)| PromptInput {
                rows: g.constant(t.clone()),
                placement,
            });
            let b = self.forward_plans(&mut g, Some(&enc), &plans, p)?;
            let e = g.value(b.emb);
            out.extend((0..part.len()).map(|i| e.row(i).to_vec()));
        }
        Ok(out)
    }

    /// `[e_i ; prompt? ; query ; <USER_EMB>]` (or prompt first) as a plain
    /// mixed sequence.
    pub fn anchor_sequence(
        &self,
        tokens: &HierTokens,
        query: &str,
        prompt: Option<(&Tensor, PromptPlacement)>,
    ) -> MixedSequence {
        let mut items = Vec::new();
        let prompt_items = |items: &mut Vec<SeqItem>, t: &Tensor| {
            items.extend((0..t.rows()).map(|r| SeqItem::Injected(t.row(r).to_vec())));
        };
        if let Some((t, PromptPlacement::SequenceStart)) = prompt {
            prompt_items(&mut items, t);
        }
        items.extend(tokens.rows().into_iter().map(SeqItem::Injected));
        if let Some((t, PromptPlacement::AfterUser)) = prompt {
            prompt_items(&mut items, t);
        }
        items.extend(query_segment(query).into_iter().map(SeqItem::Token));
        items.push(SeqItem::Token(USER_EMB));
        MixedSequence::new(items)
    }

    /// Projects one final hidden row to the unit-norm embedding space.
    pub fn project(&self, hidden_row: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.inference_graph();
        let h = g.constant(Tensor::new(vec![1, hidden_row.len()], hidden_row.to_vec())?);
        let e = self.backbone.extract_user_embedding(&mut g, &self.store, h, &[0])?;
        Ok(g.value(e).data().to_vec())
    }

    /// Embedding from a single uncached pass over the whole sequence.
    pub fn embed_uncached(
        &self,
        profile: &UserProfile,
        query: &str,
        prompt: Option<(&Tensor, PromptPlacement)>,
    ) -> Result<Vec<f64>> {
        let tokens = self.encoder.assemble(&self.store, profile)?;
        let seq = self.anchor_sequence(&tokens, query, prompt);
        let pos = seq.sentinel_position()?;
        let (hidden, _) = self.backbone.run(&self.store, &seq, None)?;
        self.project(hidden.row(pos))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "spec": self.spec });
        save_store(path, CKPT_MAGIC, meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path, CKPT_MAGIC)?;
        let spec: ModelSpec = serde_json::from_value(c.meta["spec"].clone()).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: format!("bad spec: {e}"),
        })?;
        Self::from_store(&spec, c.into_store())
    }
}

#[cfg(test)]
pub(crate) mod tests;
