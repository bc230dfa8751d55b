//! End-to-end run on a synthetic corpus: random-init, pretrained and
//! prompt-tuned probes for one scenario, plus the attention shift.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::hier::{HierConfig, Modality};
use crate::model::{ModelSpec, QAnchor};
use crate::optim::OptimConfig;
use crate::pretrain::{pretrain, NtpReduction, RunOutputs, StepLog, TrainConfig};
use crate::probe::{attention_report, evaluate, stratified_split, AttentionReport, ProbeConfig, ProbeResult};
use crate::synth::{synthesize, Corpus, FutureOptions, QAOptions, SynthConfig, UserProfile};
use crate::tune::{tune, TuneConfig, TuneLog, TunedArtifacts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub tune: TuneConfig,
    pub probe: ProbeConfig,
    pub scenario: String,
    /// Users sampled for the attention report.
    pub attention_users: usize,
    pub embed_chunk: usize,
}

/// Small model and schedule sized for a single CPU core.
pub fn desk_model() -> ModelSpec {
    ModelSpec {
        model: ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            lora_rank: 8,
            lora_alpha: 16.0,
            ..ModelConfig::default()
        },
        hier: HierConfig {
            d_enc: 32,
            ..HierConfig::default()
        },
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig {
                users: 5000,
                ..SynthConfig::default()
            },
            model: desk_model(),
            train: TrainConfig {
                steps: 300,
                batch_size: 32,
                log_every: 50,
                ntp_reduction: NtpReduction::Mean,
                optim: OptimConfig {
                    lr: 3e-3,
                    ..OptimConfig::default()
                },
                ..TrainConfig::default()
            },
            tune: TuneConfig::default(),
            probe: ProbeConfig::default(),
            scenario: "dining_offer".into(),
            attention_users: 200,
            embed_chunk: 64,
        }
    }
}

impl ExperimentConfig {
    /// Same configuration with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.synth.seed = seed;
        c.model.model.seed = seed;
        c.model.hier.encoder_seed = seed;
        c.train.seed = seed;
        c.tune.seed = seed;
        c.probe.seed = seed;
        c
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub scenario: String,
    pub planted: Modality,
    pub random: ProbeResult,
    pub pretrained: ProbeResult,
    pub tuned: ProbeResult,
    pub attention: AttentionReport,
    /// Summary plus event attention of the planted modality, base and tuned.
    pub planted_mass: (f64, f64),
    pub train_log: Vec<StepLog>,
    pub tune_log: Vec<TuneLog>,
    pub seconds: f64,
}

/// Corpus plus the label vector of one scenario, aligned with profiles.
pub fn scenario_data(corpus: &Corpus, scenario: &str) -> Result<Vec<u8>> {
    let pairs = corpus.scenario_labels(scenario);
    if pairs.len() != corpus.profiles.len() {
        return Err(Error::DegenerateData(format!(
            "scenario {scenario} labels {} of {} profiles",
            pairs.len(),
            corpus.profiles.len()
        )));
    }
    let mut y = vec![0u8; corpus.profiles.len()];
    for (i, v) in pairs {
        y[i] = v;
    }
    Ok(y)
}

/// Pretrains a fresh model on `corpus` and returns it with its log.
pub fn pretrained_model(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(QAnchor, Vec<StepLog>)> {
    let mut model = QAnchor::new(&cfg.model)?;
    let log = pretrain(&mut model, corpus, &cfg.train, RunOutputs::default())?;
    Ok((model, log))
}

pub fn probe_model(
    model: &QAnchor,
    profiles: &[&UserProfile],
    labels: &[u8],
    query: &str,
    cfg: &ExperimentConfig,
    method: &str,
    prompt: Option<&TunedArtifacts>,
) -> Result<ProbeResult> {
    let emb = model.embed_profiles(profiles, query, prompt.map(|a| a.prompt.as_arg()), cfg.embed_chunk)?;
    evaluate(&emb, labels, &cfg.scenario, method, &cfg.probe)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let t0 = Instant::now();
    let (corpus, _, _) = synthesize(&cfg.synth, &FutureOptions::default(), &QAOptions::default())?;
    let spec = cfg
        .synth
        .scenarios
        .iter()
        .find(|s| s.name == cfg.scenario)
        .ok_or_else(|| Error::Config(format!("unknown scenario {}", cfg.scenario)))?;
    let planted = spec.archetype().map(|a| {
        Modality::EVENT_MODALITIES
            .into_iter()
            .find(|&m| !a.focus(m).is_empty())
            .unwrap_or(spec.modality)
    })?;
    let labels = scenario_data(&corpus, &cfg.scenario)?;
    let profiles: Vec<&UserProfile> = corpus.profiles.iter().collect();
    let query = spec.query.clone();

    let random = QAnchor::new(&cfg.model)?;
    let random_res = probe_model(&random, &profiles, &labels, &query, cfg, "random", None)?;
    tracing::info!(auc = random_res.auc, "random-init probe");

    let (model, train_log) = pretrained_model(cfg, &corpus)?;
    let base_res = probe_model(&model, &profiles, &labels, &query, cfg, "base", None)?;
    tracing::info!(auc = base_res.auc, "pretrained probe");

    let (train_idx, test_idx) = stratified_split(&labels, cfg.probe.train_fraction, cfg.probe.seed);
    let tr_profiles: Vec<&UserProfile> = train_idx.iter().map(|&i| profiles[i]).collect();
    let tr_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i] as usize).collect();
    let outcome = tune(&model, &tr_profiles, &tr_labels, &cfg.scenario, &query, &cfg.tune)?;
    let tuned_res = probe_model(&model, &profiles, &labels, &query, cfg, "tuned", Some(&outcome.artifacts))?;
    tracing::info!(auc = tuned_res.auc, "tuned probe");

    let sample: Vec<&UserProfile> = test_idx.iter().take(cfg.attention_users).map(|&i| profiles[i]).collect();
    let attention = attention_report(&model, &sample, &query, &outcome.artifacts.prompt)?;
    let planted_mass = attention.modality_mass(planted);
    Ok(ExperimentReport {
        seed: cfg.synth.seed,
        scenario: cfg.scenario.clone(),
        planted,
        random: random_res,
        pretrained: base_res,
        tuned: tuned_res,
        attention,
        planted_mass,
        train_log,
        tune_log: outcome.log,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
