//! Soft-prompt tuning against class prototypes with a frozen model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, write_container, PROMPT_MAGIC};
use crate::error::{Error, Result};
use crate::hier::EncodedBatch;
use crate::model::{BatchOut, PromptInput, PromptPlacement, QAnchor, SeqPlan};
use crate::optim::{AdamW, OptimConfig};
use crate::synth::UserProfile;
use crate::tensor::{Graph, ParamId, ParamStore, Reduction, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    /// P × d_model
    pub vectors: Tensor,
    pub placement: PromptPlacement,
}

impl SoftPrompt {
    pub fn new(vectors: Tensor, placement: PromptPlacement) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 {
            return Err(Error::Dimension("soft prompt needs at least one row".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::Contract("soft prompt has non-finite entries".into()));
        }
        Ok(Self { vectors, placement })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_arg(&self) -> (&Tensor, PromptPlacement) {
        (&self.vectors, self.placement)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    /// K × embed_dim_out
    pub vectors: Tensor,
    pub classes: Vec<String>,
}

impl PrototypeSet {
    pub fn new(vectors: Tensor, classes: Vec<String>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 || vectors.rows() != classes.len() {
            return Err(Error::Dimension("prototypes need one row per class".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::Contract("prototypes have non-finite entries".into()));
        }
        Ok(Self { vectors, classes })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub prompt_tokens: usize,
    pub placement: PromptPlacement,
    pub steps: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub prompt_init_std: f64,
    pub seed: u64,
    pub optim: OptimConfig,
    pub log_every: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            prompt_tokens: 6,
            placement: PromptPlacement::AfterUser,
            steps: 500,
            batch_size: 32,
            tau: 0.05,
            prompt_init_std: 0.02,
            seed: 0,
            optim: OptimConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
            log_every: 25,
        }
    }
}

/// Everything a tuning run produces; stored as a sidecar next to the
/// base checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedArtifacts {
    pub scenario: String,
    pub query: String,
    pub prompt: SoftPrompt,
    pub prototypes: PrototypeSet,
}

impl TunedArtifacts {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "scenario": self.scenario,
            "query": self.query,
            "placement": self.prompt.placement,
            "classes": self.prototypes.classes,
        });
        write_container(
            path,
            PROMPT_MAGIC,
            meta,
            [
                ("prompt", &self.prompt.vectors, true),
                ("prototypes", &self.prototypes.vectors, true),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path, PROMPT_MAGIC)?;
        let bad = |msg: &str| Error::Load {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| bad(&format!("missing {k}")));
        let scenario: String = serde_json::from_value(field("scenario")?).map_err(|e| bad(&e.to_string()))?;
        let query: String = serde_json::from_value(field("query")?).map_err(|e| bad(&e.to_string()))?;
        let placement: PromptPlacement =
            serde_json::from_value(field("placement")?).map_err(|e| bad(&e.to_string()))?;
        let classes: Vec<String> = serde_json::from_value(field("classes")?).map_err(|e| bad(&e.to_string()))?;
        let prompt = c.tensor("prompt").ok_or_else(|| bad("missing prompt tensor"))?.clone();
        let protos = c.tensor("prototypes").ok_or_else(|| bad("missing prototypes tensor"))?.clone();
        Ok(Self {
            scenario,
            query,
            prompt: SoftPrompt::new(prompt, placement)?,
            prototypes: PrototypeSet::new(protos, classes)?,
        })
    }
}

/// Mean over rows of `−log softmax_k(u·p_k / τ)[y]`.
pub fn proto_loss(g: &mut Graph, u: Var, labels: &[usize], prototypes: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let k = g.shape(prototypes)[0];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Index(format!("label {bad} with {k} prototypes")));
    }
    if g.shape(u)[0] != labels.len() {
        return Err(Error::Dimension("one label per embedding row".into()));
    }
    let pt = g.transpose(prototypes)?;
    let logits = g.matmul(u, pt)?;
    let logits = g.scale(logits, 1.0 / tau);
    g.cross_entropy(logits, labels, Reduction::Mean)
}

/// Prompt-conditioned anchored embeddings for a batch of profiles; the
/// prompt is any graph node, so gradients reach it when it is a parameter.
pub fn pt_forward(
    model: &QAnchor,
    g: &mut Graph,
    profiles: &[&UserProfile],
    query: &str,
    prompt: Var,
    placement: PromptPlacement,
) -> Result<(EncodedBatch, BatchOut)> {
    let enc = model.encoder.encode_batch(g, &model.store, profiles)?;
    let plans: Vec<SeqPlan> = (0..profiles.len()).map(|i| SeqPlan::anchor(i, query)).collect();
    let out = model.forward_plans(g, Some(&enc), &plans, Some(PromptInput { rows: prompt, placement }))?;
    Ok((enc, out))
}

/// Trainable state of a tuning run, kept apart from the model's store.
#[derive(Debug, Clone)]
pub struct TuneState {
    pub store: ParamStore,
    pub prompt: ParamId,
    pub prototypes: ParamId,
    pub placement: PromptPlacement,
}

impl TuneState {
    pub fn new(prompt: SoftPrompt, prototypes: PrototypeSet) -> (Self, Vec<String>) {
        let mut store = ParamStore::new();
        let p = store.add("tune.prompt", prompt.vectors);
        let k = store.add("tune.prototypes", prototypes.vectors);
        (
            Self {
                store,
                prompt: p,
                prototypes: k,
                placement: prompt.placement,
            },
            prototypes.classes,
        )
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TuneLog {
    pub step: usize,
    pub loss: f64,
    /// Mean cosine between each batch embedding and its own prototype.
    pub intra_cos: f64,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub artifacts: TunedArtifacts,
    pub log: Vec<TuneLog>,
    pub trainable_count: usize,
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-class mean of `emb` rows; every class must be present.
pub fn class_means(emb: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Tensor> {
    let d = emb.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (e, &y) in emb.iter().zip(labels) {
        if y >= k {
            return Err(Error::Index(format!("label {y} with {k} classes")));
        }
        counts[y] += 1;
        for (s, x) in sums[y].iter_mut().zip(e) {
            *s += x;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateData(format!("class {c} has no examples")));
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= *c as f64);
    }
    Tensor::from_rows(&sums)
}

/// One optimizer update over `batch`; returns the loss and intra-class cosine.
pub fn tune_step(
    model: &QAnchor,
    state: &mut TuneState,
    opt: &mut AdamW,
    profiles: &[&UserProfile],
    labels: &[usize],
    query: &str,
    tau: f64,
) -> Result<(f64, f64)> {
    let mut g = model.graph();
    let p = g.param(&state.store, state.prompt);
    let k = g.param(&state.store, state.prototypes);
    let (_, out) = pt_forward(model, &mut g, profiles, query, p, state.placement)?;
    let l = proto_loss(&mut g, out.emb, labels, k, tau)?;
    let loss = g.value(l).data()[0];
    let protos = g.value(k);
    let emb = g.value(out.emb);
    let intra = (0..labels.len())
        .map(|i| cos(emb.row(i), protos.row(labels[i])))
        .sum::<f64>()
        / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step: opt.steps_taken(),
            detail: "prototype loss".into(),
        });
    }
    let grads = g.backward(l)?;
    opt.step(&mut state.store, &grads);
    Ok((loss, intra))
}

/// Tunes a prompt and prototypes for one scenario. The model is only read;
/// its parameters are bound as constants.
pub fn tune(
    model: &QAnchor,
    profiles: &[&UserProfile],
    labels: &[usize],
    scenario: &str,
    query: &str,
    cfg: &TuneConfig,
) -> Result<TuneOutcome> {
    if cfg.prompt_tokens == 0 {
        return Err(Error::Config("prompt_tokens must be at least 1".into()));
    }
    if profiles.len() != labels.len() || profiles.is_empty() {
        return Err(Error::Contract("need one label per profile".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let mut frozen = model.clone();
    frozen.store.set_all_trainable(false);

    let base = frozen.embed_profiles(profiles, query, None, 64)?;
    let protos = class_means(&base, labels, k)?;
    let classes = (0..k).map(|c| format!("class_{c}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = frozen.config().d_model;
    let prompt = SoftPrompt::new(
        Tensor::randn(&[cfg.prompt_tokens, d], cfg.prompt_init_std, &mut rng),
        cfg.placement,
    )?;
    let (mut state, classes) = TuneState::new(prompt, PrototypeSet::new(protos, classes)?);
    let trainable_count = state.trainable_count();
    let mut opt = AdamW::new(cfg.optim.clone(), cfg.steps);

    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.shuffle(&mut rng);
    let bs = cfg.batch_size.clamp(1, profiles.len());
    let mut cursor = 0;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let ps: Vec<&UserProfile> = idx.iter().map(|&i| profiles[i]).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, intra_cos) = tune_step(&frozen, &mut state, &mut opt, &ps, &ys, query, cfg.tau)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            tracing::info!(step, loss, intra_cos, "tune");
        }
        log.push(TuneLog { step, loss, intra_cos });
    }
    Ok(TuneOutcome {
        artifacts: TunedArtifacts {
            scenario: scenario.to_string(),
            query: query.to_string(),
            prompt: SoftPrompt::new(state.store.get(state.prompt).clone(), state.placement)?,
            prototypes: PrototypeSet::new(state.store.get(state.prototypes).clone(), classes)?,
        },
        log,
        trainable_count,
    })
}
