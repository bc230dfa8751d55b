//! Tiny decoder-only transformer: pre-norm blocks, rotary positions, causal
//! multi-head attention, GELU MLP. Input rows are either injected
//! continuous vectors or token embeddings; several sequences can be stacked
//! into one forward call, each optionally continuing from a [`PrefixKV`].

mod cache;
mod sequence;

pub use cache::{LayerKV, PrefixKV};
pub use sequence::{MixedSequence, RowPool, SeqItem};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AttnSegment, Graph, ParamId, ParamStore, Tensor, Var};
use crate::vocab::Tokenizer;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub embed_dim_out: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub tied_lm_head: bool,
    pub rope_base: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 512,
            max_seq_len: 512,
            embed_dim_out: 128,
            lora_rank: 8,
            lora_alpha: 16.0,
            tied_lm_head: false,
            rope_base: 10_000.0,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return bad("rotary embeddings need an even head width".into());
        }
        let need = Tokenizer::get().len();
        if self.vocab_size < need {
            return bad(format!(
                "vocab_size {} smaller than the tokenizer's {need} ids",
                self.vocab_size
            ));
        }
        if self.embed_dim_out == 0 || self.max_seq_len == 0 {
            return bad("embed_dim_out and max_seq_len must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LoraPair {
    a: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct LayerLora {
    q: LoraPair,
    k: LoraPair,
    v: LoraPair,
    o: LoraPair,
}

#[derive(Debug, Clone)]
struct Lora {
    scale: f64,
    layers: Vec<LayerLora>,
}

/// Backbone parameter handles. Values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: ModelConfig,
    tok_emb: ParamId,
    layers: Vec<Layer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    lm_head: Option<ParamId>,
    lm_bias: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    lora: Option<Lora>,
}

/// One sequence inside a stacked forward call.
#[derive(Debug, Clone, Copy)]
pub struct SeqSpec<'a> {
    /// Number of new rows this sequence contributes to the stacked input.
    pub len: usize,
    pub cache: Option<&'a PrefixKV>,
}

#[derive(Debug)]
pub struct ForwardOut {
    /// Final-norm hidden states of the new positions, stacked like the input.
    pub hidden: Var,
    /// One attention node per layer; segment `i` corresponds to sequence `i`.
    pub attn: Vec<Var>,
    /// Full key/value state per sequence (cache plus new rows), if requested.
    pub kv: Option<Vec<PrefixKV>>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std = cfg.init_std;
        let out_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = store.add("backbone.tok_emb", Tensor::randn(&[cfg.vocab_size, d], std, rng));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("backbone.layers.{l}.{n}");
            layers.push(Layer {
                ln1_g: store.add(p("ln1.gain"), Tensor::full(&[d], 1.0)),
                ln1_b: store.add(p("ln1.bias"), Tensor::zeros(&[d])),
                wq: store.add(p("attn.wq"), Tensor::randn(&[d, d], std, rng)),
                wk: store.add(p("attn.wk"), Tensor::randn(&[d, d], std, rng)),
                wv: store.add(p("attn.wv"), Tensor::randn(&[d, d], std, rng)),
                wo: store.add(p("attn.wo"), Tensor::randn(&[d, d], out_std, rng)),
                ln2_g: store.add(p("ln2.gain"), Tensor::full(&[d], 1.0)),
                ln2_b: store.add(p("ln2.bias"), Tensor::zeros(&[d])),
                w1: store.add(p("mlp.w1"), Tensor::randn(&[d, cfg.d_ff], std, rng)),
                b1: store.add(p("mlp.b1"), Tensor::zeros(&[cfg.d_ff])),
                w2: store.add(p("mlp.w2"), Tensor::randn(&[cfg.d_ff, d], out_std, rng)),
                b2: store.add(p("mlp.b2"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = store.add("backbone.lnf.gain", Tensor::full(&[d], 1.0));
        let lnf_b = store.add("backbone.lnf.bias", Tensor::zeros(&[d]));
        let lm_head = (!cfg.tied_lm_head)
            .then(|| store.add("backbone.lm_head", Tensor::randn(&[d, cfg.vocab_size], std, rng)));
        let lm_bias = store.add("backbone.lm_bias", Tensor::zeros(&[cfg.vocab_size]));
        let proj_std = 1.0 / (d as f64).sqrt();
        let proj_w = store.add("head.proj_w", Tensor::randn(&[d, cfg.embed_dim_out], proj_std, rng));
        let proj_b = store.add("head.proj_b", Tensor::zeros(&[cfg.embed_dim_out]));
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            layers,
            lnf_g,
            lnf_b,
            lm_head,
            lm_bias,
            proj_w,
            proj_b,
            lora: None,
        })
    }

    /// Re-attaches handles to a store that already holds every parameter
    /// (e.g. one loaded from a checkpoint).
    pub fn attach(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let get = |n: String| {
            store
                .find(&n)
                .ok_or_else(|| Error::Contract(format!("parameter {n} missing")))
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("backbone.layers.{l}.{n}");
            layers.push(Layer {
                ln1_g: get(p("ln1.gain"))?,
                ln1_b: get(p("ln1.bias"))?,
                wq: get(p("attn.wq"))?,
                wk: get(p("attn.wk"))?,
                wv: get(p("attn.wv"))?,
                wo: get(p("attn.wo"))?,
                ln2_g: get(p("ln2.gain"))?,
                ln2_b: get(p("ln2.bias"))?,
                w1: get(p("mlp.w1"))?,
                b1: get(p("mlp.b1"))?,
                w2: get(p("mlp.w2"))?,
                b2: get(p("mlp.b2"))?,
            });
        }
        let lm_head = if cfg.tied_lm_head {
            None
        } else {
            Some(get("backbone.lm_head".into())?)
        };
        let mut bb = Self {
            cfg: cfg.clone(),
            tok_emb: get("backbone.tok_emb".into())?,
            layers,
            lnf_g: get("backbone.lnf.gain".into())?,
            lnf_b: get("backbone.lnf.bias".into())?,
            lm_head,
            lm_bias: get("backbone.lm_bias".into())?,
            proj_w: get("head.proj_w".into())?,
            proj_b: get("head.proj_b".into())?,
            lora: None,
        };
        if store.find("backbone.layers.0.attn.q.lora_a").is_some() {
            let mut lora_layers = Vec::new();
            for l in 0..cfg.n_layers {
                let pair = |t: &str| -> Result<LoraPair> {
                    Ok(LoraPair {
                        a: get(format!("backbone.layers.{l}.attn.{t}.lora_a"))?,
                        b: get(format!("backbone.layers.{l}.attn.{t}.lora_b"))?,
                    })
                };
                lora_layers.push(LayerLora {
                    q: pair("q")?,
                    k: pair("k")?,
                    v: pair("v")?,
                    o: pair("o")?,
                });
            }
            let rank = store.get(lora_layers[0].q.a).shape()[1];
            bb.lora = Some(Lora {
                scale: cfg.lora_alpha / rank as f64,
                layers: lora_layers,
            });
        }
        Ok(bb)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn has_lora(&self) -> bool {
        self.lora.is_some()
    }

    /// Base weights of the transformer body (everything except the
    /// projection head and adapters).
    pub fn base_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.lnf_g, self.lnf_b, self.lm_bias];
        ids.extend(self.lm_head);
        for l in &self.layers {
            ids.extend([
                l.ln1_g, l.ln1_b, l.wq, l.wk, l.wv, l.wo, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        ids
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        vec![self.proj_w, self.proj_b]
    }

    pub fn lora_param_ids(&self) -> Vec<ParamId> {
        self.lora
            .iter()
            .flat_map(|l| &l.layers)
            .flat_map(|l| [l.q, l.k, l.v, l.o])
            .flat_map(|p| [p.a, p.b])
            .collect()
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.tok_emb
    }

    pub fn projection_ids(&self) -> (ParamId, ParamId) {
        (self.proj_w, self.proj_b)
    }

    /// Attaches low-rank adapters to the four attention projections of every
    /// layer and freezes the base weights. `B` starts at zero, so the
    /// adapted model initially computes exactly the base function.
    pub fn apply_lora<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let rank = self.cfg.lora_rank;
        if rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        if self.lora.is_some() {
            return Err(Error::Contract("adapters already attached".into()));
        }
        let d = self.cfg.d_model;
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let mut pair = |t: &str| {
                let a = format!("backbone.layers.{l}.attn.{t}.lora_a");
                let b = format!("backbone.layers.{l}.attn.{t}.lora_b");
                let a_val = Tensor::randn(&[d, rank], 1.0 / (d as f64).sqrt(), rng);
                let a = match store.find(&a) {
                    Some(id) => {
                        store.set(id, a_val)?;
                        id
                    }
                    None => store.add(a, a_val),
                };
                let b = match store.find(&b) {
                    Some(id) => {
                        store.set(id, Tensor::zeros(&[rank, d]))?;
                        id
                    }
                    None => store.add(b, Tensor::zeros(&[rank, d])),
                };
                store.set_trainable(a, true);
                store.set_trainable(b, true);
                Ok::<_, Error>(LoraPair { a, b })
            };
            layers.push(LayerLora {
                q: pair("q")?,
                k: pair("k")?,
                v: pair("v")?,
                o: pair("o")?,
            });
        }
        for id in self.base_param_ids() {
            store.set_trainable(id, false);
        }
        self.lora = Some(Lora {
            scale: self.cfg.lora_alpha / rank as f64,
            layers,
        });
        Ok(())
    }

    /// Folds `scale·A·B` into each adapted base weight, zeroes the adapters,
    /// detaches them and unfreezes the base.
    pub fn merge_lora(&mut self, store: &mut ParamStore) -> Result<()> {
        let Some(lora) = self.lora.take() else {
            return Err(Error::Contract("no adapters attached".into()));
        };
        for (layer, ll) in self.layers.iter().zip(&lora.layers) {
            for (w, p) in [(layer.wq, ll.q), (layer.wk, ll.k), (layer.wv, ll.v), (layer.wo, ll.o)] {
                let delta = store.get(p.a).matmul(store.get(p.b))?;
                let merged: Vec<f64> = store
                    .get(w)
                    .data()
                    .iter()
                    .zip(delta.data())
                    .map(|(x, dlt)| x + lora.scale * dlt)
                    .collect();
                let shape = store.get(w).shape().to_vec();
                store.set(w, Tensor::new(shape, merged)?)?;
                let rshape = store.get(p.b).shape().to_vec();
                store.set(p.b, Tensor::zeros(&rshape))?;
                store.set_trainable(p.a, false);
                store.set_trainable(p.b, false);
            }
        }
        for id in self.base_param_ids() {
            store.set_trainable(id, true);
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, lora: Option<LoraPair>) -> Result<Var> {
        let wv = g.param(store, w);
        let y = g.matmul(x, wv)?;
        match (lora, &self.lora) {
            (Some(p), Some(l)) => {
                let a = g.param(store, p.a);
                let b = g.param(store, p.b);
                let xa = g.matmul(x, a)?;
                let xab = g.matmul(xa, b)?;
                let scaled = g.scale(xab, l.scale);
                g.add(y, scaled)
            }
            _ => Ok(y),
        }
    }

    /// Token-embedding rows for `ids`.
    pub fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, ids: &[u32]) -> Result<Var> {
        let table = g.param(store, self.tok_emb);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.embedding(table, &idx)
    }

    /// Stacked forward pass. `x` holds the new input rows of every sequence
    /// back to back, in the order of `seqs`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seqs: &[SeqSpec<'_>],
        keep_kv: bool,
    ) -> Result<ForwardOut> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let total: usize = seqs.iter().map(|s| s.len).sum();
        if g.shape(x) != [total, d] {
            return Err(Error::Dimension(format!(
                "forward input {:?}, expected [{total}, {d}]",
                g.shape(x)
            )));
        }
        let mut positions = Vec::with_capacity(total);
        let mut segments = Vec::with_capacity(seqs.len());
        let (mut q_off, mut k_off) = (0, 0);
        let any_cache = seqs.iter().any(|s| s.cache.is_some());
        for s in seqs {
            if s.len == 0 {
                return Err(Error::Contract("empty sequence in forward".into()));
            }
            let past = s.cache.map_or(0, |c| c.len());
            if past + s.len > cfg.max_seq_len {
                return Err(Error::Capacity {
                    len: past + s.len,
                    max: cfg.max_seq_len,
                });
            }
            if let Some(c) = s.cache {
                if c.n_layers() != cfg.n_layers || c.width() != d {
                    return Err(Error::Contract("prefix cache built by a different model".into()));
                }
            }
            positions.extend(past..past + s.len);
            segments.push(AttnSegment {
                q_start: q_off,
                q_len: s.len,
                k_start: k_off,
                k_len: past + s.len,
            });
            q_off += s.len;
            k_off += past + s.len;
        }

        let mut h = x;
        let mut attn_nodes = Vec::with_capacity(cfg.n_layers);
        let mut kv_vars = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let ll = self.lora.as_ref().map(|l| l.layers[li].clone());
            let g1 = g.param(store, layer.ln1_g);
            let b1 = g.param(store, layer.ln1_b);
            let n1 = g.layer_norm(h, g1, b1, LN_EPS)?;
            let q = self.linear(g, store, n1, layer.wq, ll.as_ref().map(|l| l.q))?;
            let k = self.linear(g, store, n1, layer.wk, ll.as_ref().map(|l| l.k))?;
            let v = self.linear(g, store, n1, layer.wv, ll.as_ref().map(|l| l.v))?;
            let q = g.rope(q, &positions, cfg.n_heads, cfg.rope_base)?;
            let k = g.rope(k, &positions, cfg.n_heads, cfg.rope_base)?;
            let (k_all, v_all) = if any_cache {
                let mut kp = Vec::new();
                let mut vp = Vec::new();
                let mut off = 0;
                for s in seqs {
                    if let Some(c) = s.cache {
                        kp.push(g.constant(c.layer(li).k.clone()));
                        vp.push(g.constant(c.layer(li).v.clone()));
                    }
                    let idx: Vec<usize> = (off..off + s.len).collect();
                    kp.push(g.gather_rows(k, &idx)?);
                    vp.push(g.gather_rows(v, &idx)?);
                    off += s.len;
                }
                (g.concat_rows(&kp)?, g.concat_rows(&vp)?)
            } else {
                (k, v)
            };
            let a = g.attention(q, k_all, v_all, cfg.n_heads, &segments)?;
            attn_nodes.push(a);
            kv_vars.push((k_all, v_all));
            let o = self.linear(g, store, a, layer.wo, ll.as_ref().map(|l| l.o))?;
            h = g.add(h, o)?;

            let g2 = g.param(store, layer.ln2_g);
            let b2 = g.param(store, layer.ln2_b);
            let n2 = g.layer_norm(h, g2, b2, LN_EPS)?;
            let w1 = g.param(store, layer.w1);
            let bias1 = g.param(store, layer.b1);
            let w2 = g.param(store, layer.w2);
            let bias2 = g.param(store, layer.b2);
            let f = g.matmul(n2, w1)?;
            let f = g.add_bias(f, bias1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_bias(f, bias2)?;
            h = g.add(h, f)?;
        }
        let gf = g.param(store, self.lnf_g);
        let bf = g.param(store, self.lnf_b);
        let hidden = g.layer_norm(h, gf, bf, LN_EPS)?;

        let kv = keep_kv.then(|| {
            segments
                .iter()
                .map(|seg| {
                    let layers = kv_vars
                        .iter()
                        .map(|&(kv_k, kv_v)| LayerKV {
                            k: slice_rows(g.value(kv_k), seg.k_start, seg.k_len),
                            v: slice_rows(g.value(kv_v), seg.k_start, seg.k_len),
                        })
                        .collect();
                    PrefixKV::new(layers)
                })
                .collect()
        });
        Ok(ForwardOut {
            hidden,
            attn: attn_nodes,
            kv,
        })
    }

    /// Hidden rows at `positions` → linear projection → unit norm.
    pub fn extract_user_embedding(&self, g: &mut Graph, store: &ParamStore, hidden: Var, positions: &[usize]) -> Result<Var> {
        let rows = g.shape(hidden)[0];
        if let Some(&p) = positions.iter().find(|&&p| p >= rows) {
            return Err(Error::Contract(format!(
                "sentinel position {p} outside {rows} hidden rows"
            )));
        }
        let h = g.gather_rows(hidden, positions)?;
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let z = g.matmul(h, w)?;
        let z = g.add_bias(z, b)?;
        g.l2_normalize(z)
    }

    /// Next-token logits for the given hidden rows.
    pub fn lm_head(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let w = match self.lm_head {
            Some(id) => g.param(store, id),
            None => {
                let t = g.param(store, self.tok_emb);
                g.transpose(t)?
            }
        };
        let b = g.param(store, self.lm_bias);
        let logits = g.matmul(hidden, w)?;
        g.add_bias(logits, b)
    }

    /// Single-sequence forward over a [`MixedSequence`], continuing from
    /// `cache` when given. Returns the hidden states of the new positions and
    /// the extended cache.
    pub fn run(&self, store: &ParamStore, seq: &MixedSequence, cache: Option<&PrefixKV>) -> Result<(Tensor, PrefixKV)> {
        let mut g = Graph::inference();
        let x = seq.input_rows(&mut g, self, store)?;
        let out = self.forward(
            &mut g,
            store,
            x,
            &[SeqSpec {
                len: seq.len(),
                cache,
            }],
            true,
        )?;
        let kv = out.kv.and_then(|mut v| v.pop()).expect("kv requested");
        Ok((g.value(out.hidden).clone(), kv))
    }
}

fn slice_rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let c = t.cols();
    Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
        .expect("slice within bounds")
}

#[cfg(test)]
mod tests;
