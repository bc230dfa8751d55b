//! Joint contrastive and generative pretraining of the dual tower.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{QAnchor, SeqPlan};
use crate::optim::{AdamW, OptimConfig};
use crate::synth::{Corpus, UserProfile};
use crate::tensor::{Gradients, Graph, ParamStore, Reduction, Tensor, Var};
use crate::vocab::{query_segment, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub c_margin: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub w_cl: f64,
    pub w_ntp: f64,
    /// `sum` follows the per-answer summed likelihood; `mean` averages per token.
    pub ntp_reduction: NtpReduction,
    pub use_lora: bool,
    /// Longest answer used for teacher forcing and the semantic tower.
    pub max_answer_tokens: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub log_every: usize,
    /// Write a checkpoint every N steps (0 = only at the end).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NtpReduction {
    #[default]
    Sum,
    Mean,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            c_margin: 0.1,
            batch_size: 32,
            steps: 1000,
            w_cl: 1.0,
            w_ntp: 1.0,
            ntp_reduction: NtpReduction::Sum,
            use_lora: true,
            max_answer_tokens: 24,
            seed: 0,
            optim: OptimConfig::default(),
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.w_cl < 0.0 || self.w_ntp < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Gradient magnitudes over every trainable parameter after one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GradStats {
    pub step: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
}

impl GradStats {
    pub fn collect(step: usize, store: &ParamStore, grads: &Gradients) -> Self {
        let (mut sum, mut n, mut max) = (0.0, 0usize, 0.0f64);
        for id in store.trainable_ids() {
            match grads.param(store, id) {
                Some(g) => {
                    for x in g {
                        sum += x.abs();
                        max = max.max(x.abs());
                    }
                    n += g.len();
                }
                None => n += store.get(id).numel(),
            }
        }
        Self {
            step,
            mean_abs: if n == 0 { 0.0 } else { sum / n as f64 },
            max_abs: max,
        }
    }
}

/// One (user, query, answer) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub user: usize,
    /// Query segment including the leading separator.
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
}

/// Future-behaviour and QA pairs as token triples. `user` indexes
/// `corpus.profiles`.
pub fn build_examples(corpus: &Corpus, max_answer_tokens: usize) -> Vec<TrainExample> {
    let tok = Tokenizer::get();
    let idx = corpus.profile_index();
    let mut out = Vec::new();
    let pairs = corpus
        .future_pairs
        .iter()
        .map(|p| (&p.user_id, &p.query, &p.answer))
        .chain(corpus.qa_pairs.iter().map(|p| (&p.user_id, &p.query, &p.answer)));
    for (uid, q, a) in pairs {
        let Some(&user) = idx.get(uid.as_str()) else { continue };
        let mut answer = tok.encode(a);
        answer.truncate(max_answer_tokens);
        if answer.is_empty() {
            continue;
        }
        out.push(TrainExample {
            user,
            query: query_segment(q),
            answer,
        });
    }
    out
}

/// Aligned triples plus the distinct profiles they reference.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub profiles: Vec<&'a UserProfile>,
    /// `(index into profiles, query, answer)`
    pub items: Vec<(usize, Vec<u32>, Vec<u32>)>,
}

impl<'a> TrainBatch<'a> {
    pub fn new(profiles: &'a [UserProfile], examples: &[&TrainExample]) -> Self {
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut refs = Vec::new();
        let mut items = Vec::with_capacity(examples.len());
        for ex in examples {
            let i = *local.entry(ex.user).or_insert_with(|| {
                refs.push(&profiles[ex.user]);
                refs.len() - 1
            });
            items.push((i, ex.query.clone(), ex.answer.clone()));
        }
        Self { profiles: refs, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `m[i][j] = 0` iff `j != i` and either `sim(u_i, u_j)` or `sim(u_i, v_j)`
/// exceeds `sim(u_i, v_i) + c_margin`. The diagonal is 1 and never read.
pub fn margin_mask(u: &Tensor, v: &Tensor, c_margin: f64) -> Tensor {
    let b = u.rows();
    let mut m = Tensor::full(&[b, b], 1.0);
    for i in 0..b {
        let pos = cos(u.row(i), v.row(i));
        for j in 0..b {
            if j != i && (cos(u.row(i), u.row(j)) > pos + c_margin || cos(u.row(i), v.row(j)) > pos + c_margin) {
                m.data_mut()[i * b + j] = 0.0;
            }
        }
    }
    m
}

/// Masked InfoNCE over unit-norm rows `u` (anchors) and `v` (answers):
/// `mean_i −log(pos_i / Z_i)` where `Z_i` adds, for every unmasked `j ≠ i`,
/// the u–v, u–u and v–v exponentiated similarities to the positive term.
/// Computed as `log(1 + Σ_j m_ij (e^{(s_uv−s_ii)/τ} + e^{(s_uu−s_ii)/τ} + e^{(s_vv−s_ii)/τ}))`.
pub fn infonce_loss(g: &mut Graph, u: Var, v: Var, mask: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    let b = g.shape(u)[0];
    if g.shape(v)[0] != b || mask.shape() != [b, b] {
        return Err(Error::Dimension("infonce: batch sizes disagree".into()));
    }
    let vt = g.transpose(v)?;
    let ut = g.transpose(u)?;
    let s_uv = g.matmul(u, vt)?;
    let s_uu = g.matmul(u, ut)?;
    let s_vv = g.matmul(v, vt)?;
    let eye = g.constant(Tensor::identity(b));
    let diag_only = g.mul(s_uv, eye)?;
    let pos = g.sum_axis(diag_only, 1)?;
    let pos_col = g.reshape(pos, &[b, 1])?;
    let ones = g.constant(Tensor::full(&[1, b], 1.0));
    let pos_rep = g.matmul(pos_col, ones)?;
    let mut off = mask.clone();
    for i in 0..b {
        off.data_mut()[i * b + i] = 0.0;
    }
    let m = g.constant(off);
    let mut total = None;
    for s in [s_uv, s_uu, s_vv] {
        let d = g.sub(s, pos_rep)?;
        let d = g.scale(d, 1.0 / tau);
        let e = g.exp(d);
        let e = g.mul(e, m)?;
        total = Some(match total {
            None => e,
            Some(t) => g.add(t, e)?,
        });
    }
    let r = g.sum_axis(total.expect("three terms"), 1)?;
    let r = g.add_scalar(r, 1.0);
    let l = g.log(r);
    Ok(g.mean_all(l))
}

/// Teacher-forced cross-entropy of `answer` under `logits` (one row per
/// answer position).
pub fn ntp_loss(g: &mut Graph, logits: Var, answer: &[u32], reduction: NtpReduction) -> Result<Var> {
    if answer.is_empty() {
        return Err(Error::Contract("answer must contain at least one token".into()));
    }
    let targets: Vec<usize> = answer.iter().map(|&t| t as usize).collect();
    let red = match reduction {
        NtpReduction::Sum => Reduction::Sum,
        NtpReduction::Mean => Reduction::Mean,
    };
    g.cross_entropy(logits, &targets, red)
}

/// Loss nodes of one batch.
#[derive(Debug)]
pub struct BatchLoss {
    pub l_cl: Option<Var>,
    pub l_ntp: Option<Var>,
    pub total: Var,
    pub u: Var,
    pub v: Var,
}

/// Builds both towers and both losses for a batch on `g`.
pub fn batch_loss(model: &QAnchor, g: &mut Graph, batch: &TrainBatch<'_>, cfg: &TrainConfig) -> Result<BatchLoss> {
    let b = batch.len();
    let enc = model.encoder.encode_batch(g, &model.store, &batch.profiles)?;
    let mut plans: Vec<SeqPlan> = batch
        .items
        .iter()
        .map(|(u, q, a)| SeqPlan {
            user: Some(*u),
            text: q.clone(),
            answer: if cfg.w_ntp > 0.0 { a.clone() } else { Vec::new() },
        })
        .collect();
    plans.extend(batch.items.iter().map(|(_, _, a)| SeqPlan::semantic(a)));
    let out = model.forward_plans(g, Some(&enc), &plans, None)?;
    let u = g.gather_rows(out.emb, &(0..b).collect::<Vec<_>>())?;
    let v = g.gather_rows(out.emb, &(b..2 * b).collect::<Vec<_>>())?;

    let l_cl = if cfg.w_cl > 0.0 {
        let mask = margin_mask(g.value(u), g.value(v), cfg.c_margin);
        Some(infonce_loss(g, u, v, &mask, cfg.tau)?)
    } else {
        None
    };
    let l_ntp = if cfg.w_ntp > 0.0 {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (lay, (_, _, a)) in out.layouts.iter().zip(&batch.items) {
            let s = lay.start + lay.sentinel;
            rows.extend(s..s + a.len());
            targets.extend_from_slice(a);
        }
        let h = g.gather_rows(out.hidden, &rows)?;
        let logits = model.backbone.lm_head(g, &model.store, h)?;
        let l = ntp_loss(g, logits, &targets, cfg.ntp_reduction)?;
        Some(match cfg.ntp_reduction {
            NtpReduction::Sum => g.scale(l, 1.0 / b as f64),
            NtpReduction::Mean => l,
        })
    } else {
        None
    };
    let mut total = g.constant(Tensor::scalar(0.0));
    if let Some(l) = l_cl {
        let w = g.scale(l, cfg.w_cl);
        total = g.add(total, w)?;
    }
    if let Some(l) = l_ntp {
        let w = g.scale(l, cfg.w_ntp);
        total = g.add(total, w)?;
    }
    Ok(BatchLoss {
        l_cl,
        l_ntp,
        total,
        u,
        v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub l_cl: f64,
    pub l_ntp: f64,
    pub l_total: f64,
    pub grad_mean: f64,
    pub grad_max: f64,
}

/// One optimizer update. Aborts on a non-finite loss or gradient.
pub fn train_step(
    model: &mut QAnchor,
    opt: &mut AdamW,
    batch: &TrainBatch<'_>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLog> {
    let mut g = model.graph();
    let loss = batch_loss(model, &mut g, batch, cfg).map_err(|e| match e {
        Error::DegenerateInput(detail) => Error::NonFinite { step, detail },
        e => e,
    })?;
    let scalar = |v: Option<Var>, g: &Graph| v.map_or(0.0, |v| g.value(v).data()[0]);
    let l_cl = scalar(loss.l_cl, &g);
    let l_ntp = scalar(loss.l_ntp, &g);
    let l_total = g.value(loss.total).data()[0];
    if !l_total.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("L_cl={l_cl} L_ntp={l_ntp}"),
        });
    }
    let grads = g.backward(loss.total)?;
    let stats = GradStats::collect(step, &model.store, &grads);
    if !stats.max_abs.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: "gradient".into(),
        });
    }
    opt.step(&mut model.store, &grads);
    Ok(StepLog {
        step,
        l_cl,
        l_ntp,
        l_total,
        grad_mean: stats.mean_abs,
        grad_max: stats.max_abs,
    })
}

/// Epoch-shuffled batches of example indices.
#[derive(Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
            batch: batch.min(n).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Where a run writes its log and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs<'a> {
    pub log_csv: Option<&'a Path>,
    pub checkpoint_dir: Option<&'a Path>,
}

/// Full pretraining run. Applies adapters first when configured.
pub fn pretrain(model: &mut QAnchor, corpus: &Corpus, cfg: &TrainConfig, out: RunOutputs<'_>) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    let examples = build_examples(corpus, cfg.max_answer_tokens);
    if examples.is_empty() {
        return Err(Error::DegenerateData("corpus has no training pairs".into()));
    }
    if cfg.use_lora && !model.backbone.has_lora() {
        model.apply_lora()?;
    }
    model.set_pretrain_trainable();
    let mut opt = AdamW::new(cfg.optim.clone(), cfg.steps);
    let mut sampler = BatchSampler::new(examples.len(), cfg.batch_size, cfg.seed);
    let mut writer = match out.log_csv {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    if let Some(w) = writer.as_mut() {
        w.write_record(["step", "L_cl", "L_ntp", "L_total", "grad_mean", "grad_max"])?;
    }
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let refs: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = TrainBatch::new(&corpus.profiles, &refs);
        let log = train_step(model, &mut opt, &batch, cfg, step)?;
        if let Some(w) = writer.as_mut() {
            w.write_record(&[
                log.step.to_string(),
                log.l_cl.to_string(),
                log.l_ntp.to_string(),
                log.l_total.to_string(),
                log.grad_mean.to_string(),
                log.grad_max.to_string(),
            ])?;
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            tracing::info!(step, l_cl = log.l_cl, l_ntp = log.l_ntp, l_total = log.l_total, "pretrain");
        }
        if let Some(dir) = out.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                model.save(&dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
        logs.push(log);
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(logs)
}
