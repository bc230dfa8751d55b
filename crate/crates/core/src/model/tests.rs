use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synth::{gen_profiles, SynthConfig};
use crate::tensor::cosine_sim;
use crate::vocab::Tokenizer;

pub(crate) fn tiny_spec() -> ModelSpec {
    ModelSpec {
        model: ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            embed_dim_out: 8,
            init_std: 0.1,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..ModelConfig::default()
        },
        hier: HierConfig {
            d_enc: 16,
            ..HierConfig::default()
        },
    }
}

fn profiles(n: usize, seed: u64) -> Vec<UserProfile> {
    gen_profiles(&SynthConfig {
        users: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .into_iter()
    .map(|u| u.profile)
    .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn batched_embeddings_match_single_passes() {
    let m = QAnchor::new(&tiny_spec()).unwrap();
    let ps = profiles(5, 1);
    let refs: Vec<&UserProfile> = ps.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prompt = Tensor::randn(&[3, 16], 0.5, &mut rng);
    for placement in [PromptPlacement::AfterUser, PromptPlacement::SequenceStart] {
        for p in [None, Some((&prompt, placement))] {
            let batch = m.embed_profiles(&refs, "will the user redeem a dining voucher?", p, 2).unwrap();
            for (prof, e) in ps.iter().zip(&batch) {
                let single = m.embed_uncached(prof, "will the user redeem a dining voucher?", p).unwrap();
                assert!(max_diff(e, &single) < 1e-10);
                let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn different_queries_give_different_embeddings() {
    for seed in 0..10 {
        let mut spec = tiny_spec();
        spec.model.seed = seed;
        let m = QAnchor::new(&spec).unwrap();
        let p = &profiles(1, seed)[0];
        let a = m.embed_uncached(p, "will the user redeem a dining voucher?", None).unwrap();
        let b = m.embed_uncached(p, "is the user likely to miss a repayment?", None).unwrap();
        assert!(cosine_sim(&a, &b).unwrap() < 1.0 - 1e-6);
    }
}

#[test]
fn zero_prompt_shifts_positions() {
    let m = QAnchor::new(&tiny_spec()).unwrap();
    let p = &profiles(1, 3)[0];
    let zero = Tensor::zeros(&[2, 16]);
    let a = m.embed_uncached(p, "will the user book a travel package?", None).unwrap();
    let b = m
        .embed_uncached(p, "will the user book a travel package?", Some((&zero, PromptPlacement::AfterUser)))
        .unwrap();
    assert!(max_diff(&a, &b) > 1e-9);
}

fn semantic(m: &QAnchor, answer: &str) -> Vec<f64> {
    let ids = Tokenizer::get().encode(answer);
    let mut g = m.inference_graph();
    let out = m.forward_plans(&mut g, None, &[SeqPlan::semantic(&ids)], None).unwrap();
    g.value(out.emb).row(0).to_vec()
}

#[test]
fn towers_share_backbone_parameters() {
    let mut m = QAnchor::new(&tiny_spec()).unwrap();
    let p = profiles(1, 4).remove(0);
    let s0 = semantic(&m, "frequently uses dining.");
    assert_eq!(s0, semantic(&m, "frequently uses dining."));
    let a0 = m.embed_uncached(&p, "how does the user engage with dining?", None).unwrap();
    let id = m.store.find("backbone.layers.0.attn.wv").unwrap();
    m.store.get_mut(id).data_mut()[3] += 0.5;
    let s1 = semantic(&m, "frequently uses dining.");
    let a1 = m.embed_uncached(&p, "how does the user engage with dining?", None).unwrap();
    assert!(max_diff(&s0, &s1) > 1e-9);
    assert!(max_diff(&a0, &a1) > 1e-9);
}

#[test]
fn checkpoint_round_trip_preserves_embeddings() {
    let mut m = QAnchor::new(&tiny_spec()).unwrap();
    m.apply_lora().unwrap();
    let id = m.backbone.lora_param_ids()[1];
    m.store.get_mut(id).data_mut()[0] = 0.3;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = QAnchor::load(&path).unwrap();
    assert!(back.store.bitwise_eq(&m.store));
    assert!(back.backbone.has_lora());
    let p = &profiles(1, 5)[0];
    assert_eq!(
        m.embed_uncached(p, "will the user redeem a dining voucher?", None).unwrap(),
        back.embed_uncached(p, "will the user redeem a dining voucher?", None).unwrap()
    );
    assert!(matches!(QAnchor::load(&dir.path().join("nope")), Err(Error::Load { .. })));
}

#[test]
fn pretrain_trainable_set_respects_adapters() {
    let mut m = QAnchor::new(&tiny_spec()).unwrap();
    m.set_pretrain_trainable();
    let wq = m.store.find("backbone.layers.0.attn.wq").unwrap();
    assert!(m.store.is_trainable(wq));
    m.apply_lora().unwrap();
    m.set_pretrain_trainable();
    assert!(!m.store.is_trainable(wq));
    for id in m.backbone.lora_param_ids().into_iter().chain(m.encoder.param_ids()) {
        assert!(m.store.is_trainable(id));
    }
}
