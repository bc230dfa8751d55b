use qanchor::backbone::ModelConfig;
use qanchor::experiment::scenario_data;
use qanchor::hier::HierConfig;
use qanchor::model::{ModelSpec, QAnchor};
use qanchor::pretrain::{pretrain, RunOutputs, TrainConfig};
use qanchor::probe::{evaluate, ProbeConfig};
use qanchor::serve::{build_prefix, embed_query};
use qanchor::synth::{read_corpus, synthesize, write_corpus, FutureOptions, QAOptions, SynthConfig, UserProfile};
use qanchor::tune::{tune, TuneConfig, TunedArtifacts};

const QUERY: &str = "will the user redeem a dining voucher?";

fn spec() -> ModelSpec {
    ModelSpec {
        model: ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            embed_dim_out: 8,
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

#[test]
fn synth_train_tune_serve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _, _) = synthesize(
        &SynthConfig {
            users: 40,
            seed: 5,
            ..SynthConfig::default()
        },
        &FutureOptions::default(),
        &QAOptions::default(),
    )
    .unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    write_corpus(&corpus_path, &corpus).unwrap();
    let corpus = read_corpus(&corpus_path).unwrap();

    let mut model = QAnchor::new(&spec()).unwrap();
    let log_path = dir.path().join("train_log.csv");
    let log = pretrain(
        &mut model,
        &corpus,
        &TrainConfig {
            steps: 6,
            batch_size: 8,
            max_answer_tokens: 8,
            log_every: 1,
            ..TrainConfig::default()
        },
        RunOutputs {
            log_csv: Some(&log_path),
            ..RunOutputs::default()
        },
    )
    .unwrap();
    assert_eq!(log.len(), 6);
    assert!(log.iter().all(|l| l.l_total.is_finite()));
    let header = std::fs::read_to_string(&log_path).unwrap();
    assert!(header.starts_with("step,L_cl,L_ntp,L_total,grad_mean,grad_max"));

    let ckpt = dir.path().join("model.ckpt");
    model.save(&ckpt).unwrap();
    let loaded = QAnchor::load(&ckpt).unwrap();
    assert!(loaded.store.bitwise_eq(&model.store));

    let labels = scenario_data(&corpus, "dining_offer").unwrap();
    let mut ys: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    ys[0] = 0;
    ys[1] = 1;
    let refs: Vec<&UserProfile> = corpus.profiles.iter().collect();
    let out = tune(
        &loaded,
        &refs,
        &ys,
        "dining_offer",
        QUERY,
        &TuneConfig {
            steps: 4,
            batch_size: 8,
            log_every: 0,
            ..TuneConfig::default()
        },
    )
    .unwrap();
    let sidecar = dir.path().join("dining_offer.qpt");
    out.artifacts.save(&sidecar).unwrap();
    let art = TunedArtifacts::load(&sidecar).unwrap();
    assert_eq!(art.scenario, "dining_offer");

    let p = &corpus.profiles[3];
    let entry = build_prefix(&loaded, p).unwrap();
    let (served, cost) = embed_query(&loaded, &entry, QUERY, Some(&art.prompt)).unwrap();
    let direct = loaded.embed_uncached(p, QUERY, Some(art.prompt.as_arg())).unwrap();
    assert_eq!(served.len(), 8);
    assert!(served.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-10));
    assert!(cost.cached);

    let emb = loaded.embed_profiles(&refs, QUERY, None, 16).unwrap();
    let res = evaluate(&emb, &labels, "dining_offer", "base", &ProbeConfig::default()).unwrap();
    assert!((0.0..=1.0).contains(&res.auc));
    assert_eq!(res.n_train + res.n_test, corpus.profiles.len());
}
