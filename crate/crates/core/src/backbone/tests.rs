use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::check::{finite_diff, relative_error};
use crate::tensor::Reduction;
use crate::vocab::{NEWLINE, USER_EMB};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        embed_dim_out: 16,
        lora_rank: 4,
        lora_alpha: 8.0,
        init_std: 0.2,
        ..ModelConfig::default()
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (Backbone, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::new(cfg, &mut store, &mut rng).unwrap();
    (bb, store)
}

fn random_prefix(d: usize, n: usize, seed: u64) -> Vec<SeqItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| SeqItem::Injected(Tensor::randn(&[d], 1.0, &mut rng).into_data()))
        .collect()
}

fn suffix(ids: &[u32]) -> Vec<SeqItem> {
    let mut items: Vec<SeqItem> = ids.iter().map(|&i| SeqItem::Token(i)).collect();
    items.push(SeqItem::Token(USER_EMB));
    items
}

fn full_seq(prefix: &[SeqItem], suf: &[SeqItem]) -> MixedSequence {
    MixedSequence::new(prefix.iter().chain(suf).cloned().collect())
}

#[test]
fn cached_suffix_matches_full_pass() {
    let cfg = small_cfg();
    let (bb, store) = build(&cfg, 1);
    for split in [1usize, 3, 7] {
        let prefix = random_prefix(cfg.d_model, split, split as u64);
        let suf = suffix(&[NEWLINE, 300, 301, 302]);
        let (full, _) = bb.run(&store, &full_seq(&prefix, &suf), None).unwrap();
        let (_, cache) = bb.run(&store, &MixedSequence::new(prefix.clone()), None).unwrap();
        assert_eq!(cache.len(), split);
        let (tail, extended) = bb.run(&store, &MixedSequence::new(suf.clone()), Some(&cache)).unwrap();
        assert_eq!(extended.len(), split + suf.len());
        for r in 0..suf.len() {
            for c in 0..cfg.d_model {
                let diff = (tail.get(r, c) - full.get(split + r, c)).abs();
                assert!(diff < 1e-10, "split {split}, row {r}: {diff:e}");
            }
        }
    }
}

#[test]
fn single_token_shape() {
    let cfg = small_cfg();
    let (bb, store) = build(&cfg, 2);
    let (h, kv) = bb.run(&store, &MixedSequence::new(vec![SeqItem::Token(7)]), None).unwrap();
    assert_eq!(h.shape(), &[1, cfg.d_model]);
    assert_eq!(kv.footprint_floats(), 2 * cfg.n_layers * cfg.d_model);
}

#[test]
fn overflow_is_capacity_error() {
    let cfg = ModelConfig {
        max_seq_len: 4,
        ..small_cfg()
    };
    let (bb, store) = build(&cfg, 3);
    let seq = MixedSequence::new(vec![SeqItem::Token(9); 5]);
    assert!(matches!(bb.run(&store, &seq, None), Err(Error::Capacity { .. })));
}

#[test]
fn causal_mask_is_exact() {
    let cfg = small_cfg();
    let (bb, store) = build(&cfg, 4);
    let base: Vec<SeqItem> = [300u32, 301, 302, 303, 304, 305].iter().map(|&i| SeqItem::Token(i)).collect();
    let (h0, _) = bb.run(&store, &MixedSequence::new(base.clone()), None).unwrap();
    for t in 0..base.len() - 1 {
        let mut perturbed = base.clone();
        perturbed[t + 1] = SeqItem::Token(310);
        let (h1, _) = bb.run(&store, &MixedSequence::new(perturbed), None).unwrap();
        for r in 0..=t {
            assert_eq!(h0.row(r), h1.row(r), "row {r} changed when token {} moved", t + 1);
        }
        assert_ne!(h0.row(t + 1), h1.row(t + 1));
    }
}

#[test]
fn hidden_gradient_wrt_injected_vector() {
    let cfg = small_cfg();
    let (bb, store) = build(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inj = Tensor::randn(&[1, cfg.d_model], 1.0, &mut rng);
    let ids = [300usize, 301, 302];
    // the final layer norm zeroes every row mean, so weight the outputs
    let w = Tensor::randn(&[4, cfg.d_model], 1.0, &mut rng);

    let eval = |g: &mut Graph, inj_var: Var| -> Var {
        let table = g.param(&store, bb.token_embedding_id());
        let toks = g.embedding(table, &ids).unwrap();
        let x = g.concat_rows(&[inj_var, toks]).unwrap();
        let out = bb.forward(g, &store, x, &[SeqSpec { len: 4, cache: None }], false).unwrap();
        let wv = g.constant(w.clone());
        let weighted = g.mul(out.hidden, wv).unwrap();
        g.mean_all(weighted)
    };
    let mut g = Graph::new();
    let v = g.variable(inj.clone());
    let loss = eval(&mut g, v);
    let grads = g.backward(loss).unwrap();
    let numeric = finite_diff(&inj, 1e-5, |t| {
        let mut g = Graph::inference();
        let v = g.constant(t.clone());
        let l = eval(&mut g, v);
        g.value(l).data()[0]
    });
    let err = relative_error(grads.get(v).unwrap(), numeric.data());
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn embedding_is_unit_norm_and_cache_invariant() {
    let cfg = small_cfg();
    let (bb, store) = build(&cfg, 7);
    let prefix = random_prefix(cfg.d_model, 5, 8);
    let suf = suffix(&[NEWLINE, 320, 321]);
    let seq = full_seq(&prefix, &suf);
    let pos = seq.sentinel_position().unwrap();

    let mut g = Graph::inference();
    let x = seq.input_rows(&mut g, &bb, &store).unwrap();
    let out = bb.forward(&mut g, &store, x, &[SeqSpec { len: seq.len(), cache: None }], false).unwrap();
    let e = bb.extract_user_embedding(&mut g, &store, out.hidden, &[pos]).unwrap();
    let uncached = g.value(e).clone();
    assert!((uncached.norm() - 1.0).abs() < 1e-9);

    let (_, cache) = bb.run(&store, &MixedSequence::new(prefix), None).unwrap();
    let sseq = MixedSequence::new(suf);
    let mut g = Graph::inference();
    let x = sseq.input_rows(&mut g, &bb, &store).unwrap();
    let out = bb.forward(&mut g, &store, x, &[SeqSpec { len: sseq.len(), cache: Some(&cache) }], false).unwrap();
    let e = bb.extract_user_embedding(&mut g, &store, out.hidden, &[sseq.len() - 1]).unwrap();
    assert!(g.value(e).max_abs_diff(&uncached) < 1e-10);
}

#[test]
fn identity_projection_extracts_row() {
    let cfg = small_cfg();
    let (bb, mut store) = build(&cfg, 9);
    let (w, b) = bb.projection_ids();
    store.set(w, Tensor::identity(cfg.d_model)).unwrap();
    store.set(b, Tensor::zeros(&[cfg.d_model])).unwrap();
    let mut e1 = vec![0.0; cfg.d_model];
    e1[0] = 1.0;
    let mut rows = vec![vec![0.3; cfg.d_model], e1.clone()];
    rows[0][2] = -1.0;
    let mut g = Graph::inference();
    let h = g.constant(Tensor::from_rows(&rows).unwrap());
    let e = bb.extract_user_embedding(&mut g, &store, h, &[1]).unwrap();
    assert_eq!(g.value(e).data(), e1.as_slice());
    assert!(matches!(
        bb.extract_user_embedding(&mut g, &store, h, &[2]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn sentinel_contract() {
    let ok = MixedSequence::new(suffix(&[300]));
    assert_eq!(ok.sentinel_position().unwrap(), 1);
    let missing = MixedSequence::new(vec![SeqItem::Token(300)]);
    assert!(matches!(missing.sentinel_position(), Err(Error::Contract(_))));
    let early = MixedSequence::new(vec![SeqItem::Token(USER_EMB), SeqItem::Token(300)]);
    assert!(early.sentinel_position().is_err());
}

#[test]
fn lm_head_cases() {
    let cfg = small_cfg();
    let (bb, store) = build(&cfg, 10);
    let mut g = Graph::inference();
    let zero = g.constant(Tensor::zeros(&[3, cfg.d_model]));
    let logits = bb.lm_head(&mut g, &store, zero).unwrap();
    let p = g.softmax(logits).unwrap();
    let u = 1.0 / cfg.vocab_size as f64;
    assert!(g.value(p).data().iter().all(|x| (x - u).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hidden = Tensor::randn(&[7, cfg.d_model], 1.0, &mut rng);
    let h = g.constant(hidden.clone());
    let logits = bb.lm_head(&mut g, &store, h).unwrap();
    assert_eq!(g.value(logits).shape(), &[7, cfg.vocab_size]);

    // direct matmul oracle for greedy argmax
    let w = store.get(store.find("backbone.lm_head").unwrap());
    for r in 0..7 {
        let direct: Vec<f64> = (0..cfg.vocab_size)
            .map(|j| (0..cfg.d_model).map(|k| hidden.get(r, k) * w.get(k, j)).sum())
            .collect();
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&direct), argmax(g.value(logits).row(r)));
    }
}

#[test]
fn tied_head_uses_embedding_table() {
    let cfg = ModelConfig {
        tied_lm_head: true,
        ..small_cfg()
    };
    let (bb, store) = build(&cfg, 12);
    assert!(store.find("backbone.lm_head").is_none());
    let mut g = Graph::inference();
    let h = g.constant(Tensor::full(&[2, cfg.d_model], 0.5));
    let logits = bb.lm_head(&mut g, &store, h).unwrap();
    let table = store.get(bb.token_embedding_id());
    let expect: f64 = table.row(42).iter().map(|x| 0.5 * x).sum();
    assert!((g.value(logits).get(1, 42) - expect).abs() < 1e-12);
}

fn anchor_run(bb: &Backbone, store: &ParamStore) -> Tensor {
    let seq = full_seq(&random_prefix(bb.config().d_model, 4, 13), &suffix(&[NEWLINE, 300, 305]));
    bb.run(store, &seq, None).unwrap().0
}

#[test]
fn zero_adapter_matches_base() {
    let cfg = small_cfg();
    let (mut bb, mut store) = build(&cfg, 14);
    let base = anchor_run(&bb, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    bb.apply_lora(&mut store, &mut rng).unwrap();
    assert_eq!(anchor_run(&bb, &store), base);
    // zero A with a nonzero B is also the base function
    for id in bb.lora_param_ids() {
        let shape = store.get(id).shape().to_vec();
        let t = if store.name(id).ends_with("lora_a") {
            Tensor::zeros(&shape)
        } else {
            Tensor::randn(&shape, 1.0, &mut rng)
        };
        store.set(id, t).unwrap();
    }
    assert_eq!(anchor_run(&bb, &store), base);
}

#[test]
fn merge_preserves_outputs() {
    let cfg = small_cfg();
    let (mut bb, mut store) = build(&cfg, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    bb.apply_lora(&mut store, &mut rng).unwrap();
    for id in bb.lora_param_ids() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
    }
    let before = anchor_run(&bb, &store);
    bb.merge_lora(&mut store).unwrap();
    assert!(!bb.has_lora());
    let after = anchor_run(&bb, &store);
    assert!(before.max_abs_diff(&after) < 1e-10);
}

#[test]
fn lora_gradient_reaches_adapters_only() {
    let cfg = small_cfg();
    let (mut bb, mut store) = build(&cfg, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    bb.apply_lora(&mut store, &mut rng).unwrap();
    for id in bb.lora_param_ids() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
    }
    let seq = MixedSequence::new(suffix(&[300, 301, 302]));
    let mut g = Graph::new();
    let x = seq.input_rows(&mut g, &bb, &store).unwrap();
    let out = bb.forward(&mut g, &store, x, &[SeqSpec { len: seq.len(), cache: None }], false).unwrap();
    let logits = bb.lm_head(&mut g, &store, out.hidden).unwrap();
    let loss = g.cross_entropy(logits, &[1, 2, 3, 4], Reduction::Mean).unwrap();
    let grads = g.backward(loss).unwrap();
    for id in bb.base_param_ids() {
        let norm = grads
            .param(&store, id)
            .map_or(0.0, |gr| gr.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert_eq!(norm, 0.0, "{}", store.name(id));
    }
    for id in bb.lora_param_ids() {
        let gr = grads.param(&store, id).expect("adapter gradient");
        assert!(gr.iter().any(|x| *x != 0.0), "{}", store.name(id));
    }
}

#[test]
fn zero_rank_rejected() {
    let cfg = ModelConfig {
        lora_rank: 0,
        ..small_cfg()
    };
    let (mut bb, mut store) = build(&cfg, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(bb.apply_lora(&mut store, &mut rng), Err(Error::Config(_))));
}

#[test]
fn attach_recovers_handles() {
    let cfg = small_cfg();
    let (mut bb, mut store) = build(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    bb.apply_lora(&mut store, &mut rng).unwrap();
    let again = Backbone::attach(&cfg, &store).unwrap();
    assert!(again.has_lora());
    assert_eq!(anchor_run(&bb, &store), anchor_run(&again, &store));
}

#[test]
fn deterministic_init_and_forward() {
    let cfg = small_cfg();
    let (a, sa) = build(&cfg, 23);
    let (b, sb) = build(&cfg, 23);
    assert!(sa.bitwise_eq(&sb));
    assert_eq!(anchor_run(&a, &sa), anchor_run(&b, &sb));
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        d_model: 30,
        n_heads: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let small_vocab = ModelConfig {
        vocab_size: 100,
        ..ModelConfig::default()
    };
    assert!(small_vocab.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}
