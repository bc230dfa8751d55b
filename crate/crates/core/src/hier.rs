//! Hierarchical coarse-to-fine user encoder.
//!
//! Raw events are embedded by a frozen seeded bag-of-tokens projection,
//! refined by per-modality event adapters, mean-pooled and passed through a
//! shared modal adapter, and finally consolidated by a user adapter. The
//! assembled token run is `[user ; six modality summaries ; retained events
//! grouped by modality, newest first]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, LN_EPS};
use crate::error::{Error, Result};
use crate::synth::catalog::TABULAR_FEATURES;
use crate::synth::UserProfile;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Bill,
    Mini,
    Spm,
    App,
    Search,
    Tabular,
}

impl Modality {
    /// Canonical order used everywhere a per-modality layout is built.
    pub const ALL: [Modality; 6] = [
        Modality::Bill,
        Modality::Mini,
        Modality::Spm,
        Modality::App,
        Modality::Search,
        Modality::Tabular,
    ];
    pub const EVENT_MODALITIES: [Modality; 5] = [
        Modality::Bill,
        Modality::Mini,
        Modality::Spm,
        Modality::App,
        Modality::Search,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Bill => "Bill",
            Modality::Mini => "Mini",
            Modality::Spm => "Spm",
            Modality::App => "App",
            Modality::Search => "Search",
            Modality::Tabular => "Tabular",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Contract(format!("unknown modality {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    /// Symbolic event description as token ids.
    Tokens(Vec<u32>),
    /// Tabular feature vector.
    Features(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub modality: Modality,
    /// Absolute day index; a profile's window is `[window_end - 90, window_end)`.
    pub day: u32,
    #[serde(flatten)]
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierConfig {
    pub d_enc: usize,
    /// Retention cap `K_m` per modality, in canonical order.
    pub retention: [usize; 6],
    pub tabular_features: usize,
    pub encoder_seed: u64,
}

impl Default for HierConfig {
    fn default() -> Self {
        Self {
            d_enc: 64,
            retention: [8, 8, 8, 8, 8, 1],
            tabular_features: TABULAR_FEATURES,
            encoder_seed: 0,
        }
    }
}

impl HierConfig {
    pub fn cap(&self, m: Modality) -> usize {
        self.retention[m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.tabular_features == 0 {
            return Err(Error::Config("d_enc and tabular_features must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen seeded projection from bag-of-token counts (or tabular features)
/// to `d_enc`. Every token's projection vector has unit norm.
#[derive(Debug, Clone)]
pub struct BaseEncoder {
    token_proj: Tensor,
    tabular_proj: Tensor,
}

impl BaseEncoder {
    pub fn new(vocab_size: usize, cfg: &HierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder_seed ^ 0xB45E_E9C0);
        let unit_rows = |mut t: Tensor| {
            let c = t.cols();
            for row in t.data_mut().chunks_mut(c) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x /= n);
            }
            t
        };
        let token_proj = unit_rows(Tensor::randn(&[vocab_size, cfg.d_enc], 1.0, &mut rng));
        let tabular_proj = unit_rows(Tensor::randn(&[cfg.tabular_features, cfg.d_enc], 1.0, &mut rng));
        Self {
            token_proj,
            tabular_proj,
        }
    }

    pub fn d_enc(&self) -> usize {
        self.token_proj.cols()
    }

    /// Projection vector of each token (rows), i.e. the columns of the map.
    pub fn token_projection(&self) -> &Tensor {
        &self.token_proj
    }

    pub fn encode(&self, event: &EventRecord) -> Result<Vec<f64>> {
        let d = self.d_enc();
        let mut h = vec![0.0; d];
        match &event.payload {
            Payload::Tokens(ids) => {
                if ids.is_empty() {
                    return Err(Error::DegenerateInput("event payload has no tokens".into()));
                }
                let mut sorted = ids.clone();
                sorted.sort_unstable();
                for id in sorted {
                    if id as usize >= self.token_proj.rows() {
                        return Err(Error::Index(format!("token {id} outside the vocabulary")));
                    }
                    h.iter_mut()
                        .zip(self.token_proj.row(id as usize))
                        .for_each(|(a, b)| *a += b);
                }
            }
            Payload::Features(x) => {
                if x.len() != self.tabular_proj.rows() {
                    return Err(Error::Dimension(format!(
                        "tabular payload has {} features, expected {}",
                        x.len(),
                        self.tabular_proj.rows()
                    )));
                }
                for (f, &v) in x.iter().enumerate() {
                    h.iter_mut()
                        .zip(self.tabular_proj.row(f))
                        .for_each(|(a, b)| *a += v * b);
                }
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: store.add(format!("{name}.w1"), Tensor::randn(&[d_in, d], 1.0 / (d_in as f64).sqrt(), rng)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[d])),
            w2: store.add(format!("{name}.w2"), Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng)),
            b2: store.add(format!("{name}.b2"), Tensor::randn(&[d], 0.1, rng)),
        }
    }

    fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |p: &str| {
            store
                .find(&format!("{name}.{p}"))
                .ok_or_else(|| Error::Contract(format!("parameter {name}.{p} missing")))
        };
        Ok(Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        g.add_bias(h, b2)
    }
}

#[derive(Debug, Clone)]
struct NormMlp {
    gain: ParamId,
    bias: ParamId,
    mlp: Mlp,
}

impl NormMlp {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gain: store.add(format!("{name}.ln.gain"), Tensor::full(&[d_in], 1.0)),
            bias: store.add(format!("{name}.ln.bias"), Tensor::zeros(&[d_in])),
            mlp: Mlp::new(store, name, d_in, d, rng),
        }
    }

    fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |p: &str| {
            store
                .find(&format!("{name}.{p}"))
                .ok_or_else(|| Error::Contract(format!("parameter {name}.{p} missing")))
        };
        Ok(Self {
            gain: get("ln.gain")?,
            bias: get("ln.bias")?,
            mlp: Mlp::attach(store, name)?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let n = g.layer_norm(x, gain, bias, LN_EPS)?;
        self.mlp.apply(g, store, n)
    }
}

/// Handles of the encoder's trainable adapters.
#[derive(Debug, Clone)]
pub struct HierEncoder {
    cfg: HierConfig,
    d_model: usize,
    base: BaseEncoder,
    event_adapters: Vec<NormMlp>,
    modal_adapter: NormMlp,
    user_adapter: Mlp,
    placeholders: ParamId,
}

/// Row indices (into [`EncodedBatch::pool`]) of one user's tokens.
#[derive(Debug, Clone)]
pub struct UserRows {
    pub user: usize,
    pub modal: [usize; 6],
    /// Retained event rows per modality, newest first.
    pub events: [Vec<usize>; 6],
    pub present: [bool; 6],
}

impl UserRows {
    /// Assembled order: user token, six summaries, then event tokens.
    pub fn sequence(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.user);
        out.extend_from_slice(&self.modal);
        for ev in &self.events {
            out.extend_from_slice(ev);
        }
        out
    }

    pub fn len(&self) -> usize {
        1 + 6 + self.events.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Result of encoding several profiles on one graph.
#[derive(Debug)]
pub struct EncodedBatch {
    pub pool: Var,
    pub users: Vec<UserRows>,
    /// All in-window event rows per modality per user, oldest first, with
    /// their days (the retention-independent token buffer).
    pub buffers: Vec<[Vec<(u32, usize)>; 6]>,
}

/// Assembled hierarchical tokens as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HierTokens {
    pub user_token: Vec<f64>,
    pub modal_tokens: [Vec<f64>; 6],
    pub event_tokens: [Vec<Vec<f64>>; 6],
}

/// Position class of a token inside an anchored sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenGroup {
    User,
    Summary(Modality),
    Events(Modality),
    Prompt,
    Query,
}

impl TokenGroup {
    pub fn label(&self) -> String {
        match self {
            TokenGroup::User => "user".into(),
            TokenGroup::Summary(m) => format!("summary:{}", m.name()),
            TokenGroup::Events(m) => format!("events:{}", m.name()),
            TokenGroup::Prompt => "prompt".into(),
            TokenGroup::Query => "query".into(),
        }
    }

    /// Every group in report order.
    pub fn all() -> Vec<TokenGroup> {
        let mut v = vec![TokenGroup::User];
        v.extend(Modality::ALL.map(TokenGroup::Summary));
        v.extend(Modality::ALL.map(TokenGroup::Events));
        v.push(TokenGroup::Prompt);
        v.push(TokenGroup::Query);
        v
    }

    pub fn modality(&self) -> Option<Modality> {
        match self {
            TokenGroup::Summary(m) | TokenGroup::Events(m) => Some(*m),
            _ => None,
        }
    }
}

impl HierTokens {
    pub fn len(&self) -> usize {
        1 + 6 + self.event_tokens.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rows in assembled order.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.user_token.clone());
        out.extend(self.modal_tokens.iter().cloned());
        for ev in &self.event_tokens {
            out.extend(ev.iter().cloned());
        }
        out
    }

    /// Group of each assembled position.
    pub fn groups(&self) -> Vec<TokenGroup> {
        let mut out = vec![TokenGroup::User];
        out.extend(Modality::ALL.map(TokenGroup::Summary));
        for m in Modality::ALL {
            out.extend(std::iter::repeat_n(TokenGroup::Events(m), self.event_tokens[m.index()].len()));
        }
        out
    }
}

impl HierEncoder {
    pub fn new(cfg: &HierConfig, model: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = model.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x41E7_0C0D);
        let event_adapters = Modality::ALL
            .iter()
            .map(|m| NormMlp::new(store, &format!("encoder.event.{}", m.name()), cfg.d_enc, d, &mut rng))
            .collect();
        let modal_adapter = NormMlp::new(store, "encoder.modal", d, d, &mut rng);
        let user_adapter = Mlp::new(store, "encoder.user", 6 * d, d, &mut rng);
        let placeholders = store.add("encoder.placeholders", Tensor::randn(&[6, d], 1.0, &mut rng));
        Ok(Self {
            cfg: cfg.clone(),
            d_model: d,
            base: BaseEncoder::new(model.vocab_size, cfg),
            event_adapters,
            modal_adapter,
            user_adapter,
            placeholders,
        })
    }

    pub fn attach(cfg: &HierConfig, model: &ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let event_adapters = Modality::ALL
            .iter()
            .map(|m| NormMlp::attach(store, &format!("encoder.event.{}", m.name())))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            d_model: model.d_model,
            base: BaseEncoder::new(model.vocab_size, cfg),
            event_adapters,
            modal_adapter: NormMlp::attach(store, "encoder.modal")?,
            user_adapter: Mlp::attach(store, "encoder.user")?,
            placeholders: store
                .find("encoder.placeholders")
                .ok_or_else(|| Error::Contract("parameter encoder.placeholders missing".into()))?,
        })
    }

    pub fn config(&self) -> &HierConfig {
        &self.cfg
    }

    pub fn base(&self) -> &BaseEncoder {
        &self.base
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for a in self.event_adapters.iter().chain([&self.modal_adapter]) {
            ids.extend([a.gain, a.bias]);
            ids.extend(a.mlp.ids());
        }
        ids.extend(self.user_adapter.ids());
        ids.push(self.placeholders);
        ids
    }

    pub fn base_encode(&self, event: &EventRecord) -> Result<Vec<f64>> {
        self.base.encode(event)
    }

    /// `MLP_m(LayerNorm(h))` for each row of `h` (shape `[n × d_enc]`).
    pub fn event_adapter(&self, g: &mut Graph, store: &ParamStore, m: Modality, h: Var) -> Result<Var> {
        let adapter = self
            .event_adapters
            .get(m.index())
            .ok_or_else(|| Error::Contract(format!("no adapter for {m:?}")))?;
        adapter.apply(g, store, h)
    }

    /// Mean-pools the rows of `events` and applies the shared modal adapter.
    pub fn modal_summary(&self, g: &mut Graph, store: &ParamStore, events: Var) -> Result<Var> {
        let n = g.value(events).rows();
        if n == 0 || g.shape(events).len() != 2 {
            return Err(Error::DegenerateInput("modal_summary of no events".into()));
        }
        let pooled = g.segment_mean(events, &[(0, n)])?;
        self.modal_adapter.apply(g, store, pooled)
    }

    /// Concatenates per-modality summaries in canonical order (absent slots
    /// zero) and applies the user adapter. `slots[m]` is a `1 × d` node.
    pub fn user_summary(&self, g: &mut Graph, store: &ParamStore, slots: &[Option<Var>; 6]) -> Result<Var> {
        let zero = g.constant(Tensor::zeros(&[1, self.d_model]));
        let parts: Vec<Var> = slots.iter().map(|s| s.unwrap_or(zero)).collect();
        let stacked = g.concat_rows(&parts)?;
        let flat = g.reshape(stacked, &[1, 6 * self.d_model])?;
        self.user_adapter.apply(g, store, flat)
    }

    pub fn placeholder(&self, g: &mut Graph, store: &ParamStore, m: Modality) -> Result<Var> {
        let p = g.param(store, self.placeholders);
        g.gather_rows(p, &[m.index()])
    }

    /// Encodes a batch of profiles on `g`. Gradients flow into every adapter.
    pub fn encode_batch(&self, g: &mut Graph, store: &ParamStore, profiles: &[&UserProfile]) -> Result<EncodedBatch> {
        let d = self.d_model;
        let n_users = profiles.len();
        // per modality: stacked base encodings and (user, start, len) runs
        let mut event_vars: Vec<Option<Var>> = vec![None; 6];
        let mut runs: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); 6];
        let mut days: Vec<Vec<u32>> = vec![Vec::new(); 6];
        for m in Modality::ALL {
            let mut data = Vec::new();
            let mut count = 0;
            for (u, p) in profiles.iter().enumerate() {
                let evs = p.modality_events(m);
                if evs.is_empty() {
                    continue;
                }
                runs[m.index()].push((u, count, evs.len()));
                for ev in &evs {
                    data.extend(self.base.encode(ev)?);
                    days[m.index()].push(ev.day);
                }
                count += evs.len();
            }
            if count > 0 {
                let h = g.constant(Tensor::new(vec![count, self.cfg.d_enc], data)?);
                event_vars[m.index()] = Some(self.event_adapter(g, store, m, h)?);
            }
        }

        // pooled summaries for every present (user, modality)
        let mut pooled_parts = Vec::new();
        let mut modal_row: Vec<[Option<usize>; 6]> = vec![[None; 6]; n_users];
        let mut n_modal = 0;
        for m in Modality::ALL {
            if let Some(ev) = event_vars[m.index()] {
                let segs: Vec<(usize, usize)> = runs[m.index()].iter().map(|&(_, s, l)| (s, l)).collect();
                pooled_parts.push(g.segment_mean(ev, &segs)?);
                for &(u, _, _) in &runs[m.index()] {
                    modal_row[u][m.index()] = Some(n_modal);
                    n_modal += 1;
                }
            }
        }
        let modal = if pooled_parts.is_empty() {
            None
        } else {
            let pooled = g.concat_rows(&pooled_parts)?;
            Some(self.modal_adapter.apply(g, store, pooled)?)
        };

        // user adapter over zero-filled canonical slots
        let zero = g.constant(Tensor::zeros(&[1, d]));
        let slot_pool = match modal {
            Some(mv) => g.concat_rows(&[mv, zero])?,
            None => zero,
        };
        let zero_row = n_modal;
        let slot_idx: Vec<usize> = modal_row
            .iter()
            .flat_map(|rows| rows.iter().map(|r| r.unwrap_or(zero_row)))
            .collect();
        let user_in = if n_users > 0 {
            let gathered = g.gather_rows(slot_pool, &slot_idx)?;
            g.reshape(gathered, &[n_users, 6 * d])?
        } else {
            return Err(Error::Contract("encode_batch of no profiles".into()));
        };
        let users = self.user_adapter.apply(g, store, user_in)?;

        // final pool: users, modal summaries, placeholders, events per modality
        let placeholders = g.param(store, self.placeholders);
        let mut parts = vec![users];
        let modal_base = n_users;
        if let Some(mv) = modal {
            parts.push(mv);
        }
        let ph_base = modal_base + n_modal;
        parts.push(placeholders);
        let mut ev_base = [0usize; 6];
        let mut next = ph_base + 6;
        for m in Modality::ALL {
            if let Some(ev) = event_vars[m.index()] {
                ev_base[m.index()] = next;
                next += g.value(ev).rows();
                parts.push(ev);
            }
        }
        let pool = g.concat_rows(&parts)?;

        let mut out_users = Vec::with_capacity(n_users);
        let mut buffers: Vec<[Vec<(u32, usize)>; 6]> = (0..n_users).map(|_| Default::default()).collect();
        let mut run_of: Vec<[Option<(usize, usize)>; 6]> = vec![[None; 6]; n_users];
        for m in Modality::ALL {
            for &(u, s, l) in &runs[m.index()] {
                run_of[u][m.index()] = Some((s, l));
                buffers[u][m.index()] = (s..s + l)
                    .map(|i| (days[m.index()][i], ev_base[m.index()] + i))
                    .collect();
            }
        }
        for u in 0..n_users {
            let mut modal_idx = [0usize; 6];
            let mut events: [Vec<usize>; 6] = Default::default();
            let mut present = [false; 6];
            for m in Modality::ALL {
                let mi = m.index();
                modal_idx[mi] = match modal_row[u][mi] {
                    Some(r) => modal_base + r,
                    None => ph_base + mi,
                };
                if let Some((s, l)) = run_of[u][mi] {
                    present[mi] = true;
                    let keep = l.min(self.cfg.cap(m));
                    // events are stored oldest first; retain the newest
                    events[mi] = (0..keep).map(|j| ev_base[mi] + s + l - 1 - j).collect();
                }
            }
            out_users.push(UserRows {
                user: u,
                modal: modal_idx,
                events,
                present,
            });
        }
        Ok(EncodedBatch {
            pool,
            users: out_users,
            buffers,
        })
    }

    /// Encodes one profile and returns its assembled tokens as values.
    pub fn assemble(&self, store: &ParamStore, profile: &UserProfile) -> Result<HierTokens> {
        let mut g = Graph::inference();
        let batch = self.encode_batch(&mut g, store, &[profile])?;
        Ok(tokens_from_rows(g.value(batch.pool), &batch.users[0]))
    }
}

/// Reads one user's assembled tokens out of an encoded pool.
pub fn tokens_from_rows(pool: &Tensor, rows: &UserRows) -> HierTokens {
    let row = |i: usize| pool.row(i).to_vec();
    HierTokens {
        user_token: row(rows.user),
        modal_tokens: std::array::from_fn(|m| row(rows.modal[m])),
        event_tokens: std::array::from_fn(|m| rows.events[m].iter().map(|&i| row(i)).collect()),
    }
}
