use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use qanchor::bench::{median, retention_for, sized_profile, sized_query};
use qanchor::config::RunConfig;
use qanchor::experiment::scenario_data;
use qanchor::hier::HierConfig;
use qanchor::model::QAnchor;
use qanchor::pretrain::{pretrain, RunOutputs};
use qanchor::probe::{attention_report, evaluate, export_embeddings, read_embeddings, stratified_split, write_results};
use qanchor::synth::{
    build_future_pairs, build_qa_pairs, gen_profiles, label_scenarios, read_corpus, write_corpus, AnswerGenerator,
    Corpus, ScenarioSpec, SurrogateGenerator, UserProfile,
};
use qanchor::tune::{tune, TunedArtifacts};
use qanchor_client::{Client, HttpGenerator};
use qanchor_server::{AppState, LocalServer, ServerConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CacheMode, Cli, Command, ServiceTarget};

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = RunConfig::resolve(g.config.as_deref(), &overrides)?;
    if let Some(d) = &g.run_dir {
        cfg.run_dir = d.clone();
    }
    let name = command_name(&cli.command);
    let out = g.out.clone().unwrap_or_else(|| cfg.run_dir.join(name));
    match cli.command {
        Command::Synth { users, generator_url } => {
            if let Some(n) = users {
                cfg.synth.users = n;
            }
            if let Some(u) = generator_url {
                cfg.generator.url = u;
            }
            synth(&cfg, &out)
        }
        Command::Pretrain { corpus, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cmd_pretrain(&cfg, &out, &corpus)
        }
        Command::Tune {
            checkpoint,
            corpus,
            scenario,
            steps,
        } => {
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            if let Some(s) = steps {
                cfg.tune.steps = s;
            }
            cmd_tune(&cfg, &out, &checkpoint, &corpus)
        }
        Command::Embed {
            target,
            corpus,
            scenario,
            query,
            tuned,
        } => {
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            cmd_embed(&cfg, &out, &target, &corpus, query, tuned)
        }
        Command::Probe {
            inputs,
            scenario,
            attention,
            checkpoint,
            prompt,
            corpus,
            attention_users,
        } => {
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            let att = if attention {
                match (checkpoint, prompt, corpus) {
                    (Some(c), Some(p), Some(k)) => Some((c, p, k, attention_users)),
                    _ => bail!("--attention needs --checkpoint, --prompt and --corpus"),
                }
            } else {
                None
            };
            cmd_probe(&cfg, &out, &inputs, att)
        }
        Command::Serve {
            checkpoint,
            prompts,
            addr,
            capacity,
            no_cache,
        } => {
            if let Some(a) = addr {
                cfg.serve.addr = a;
            }
            if let Some(c) = capacity {
                cfg.serve.capacity = c;
            }
            if no_cache {
                cfg.serve.cache = false;
            }
            cmd_serve(&cfg, &checkpoint, &prompts)
        }
        Command::Bench {
            target,
            lp,
            lq,
            queries,
            runs,
            cache,
        } => cmd_bench(&cfg, &out, &target, BenchArgs { lp, lq, queries, runs, cache }),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Pretrain { .. } => "pretrain",
        Command::Tune { .. } => "tune",
        Command::Embed { .. } => "embed",
        Command::Probe { .. } => "probe",
        Command::Serve { .. } => "serve",
        Command::Bench { .. } => "bench",
    }
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = cfg.write_resolved(out)?;
    tracing::info!(path = %path.display(), "resolved config\n{}", cfg.to_toml()?);
    Ok(())
}

fn need(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("missing input: {}", path.display());
    }
    Ok(())
}

fn threads() -> Option<usize> {
    std::env::var("QANCHOR_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    let mut b = tokio::runtime::Builder::new_multi_thread();
    b.enable_all();
    if let Some(n) = threads() {
        b.worker_threads(n).max_blocking_threads(n);
    }
    Ok(b.build()?)
}

fn scenario_spec(cfg: &RunConfig) -> Result<ScenarioSpec> {
    cfg.synth
        .scenarios
        .iter()
        .find(|s| s.name == cfg.scenario)
        .cloned()
        .with_context(|| format!("unknown scenario {}", cfg.scenario))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    need(path)?;
    Ok(read_corpus(path)?)
}

fn load_model(path: &Path) -> Result<QAnchor> {
    need(path)?;
    Ok(QAnchor::load(path)?)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare(cfg, out)?;
    let users = gen_profiles(&cfg.synth)?;
    let future_pairs = build_future_pairs(&users, &cfg.future);
    let profiles: Vec<UserProfile> = users.iter().map(|u| u.profile.clone()).collect();
    let generator: Box<dyn AnswerGenerator> = if cfg.generator.url.is_empty() {
        Box::new(SurrogateGenerator::new(cfg.synth.seed))
    } else {
        Box::new(HttpGenerator::new(
            &cfg.generator.url,
            Duration::from_millis(cfg.generator.timeout_ms),
            cfg.generator.retries,
        )?)
    };
    let (qa_pairs, stats) = build_qa_pairs(&profiles, generator.as_ref(), &cfg.qa)?;
    let labels = label_scenarios(&users, &cfg.synth.scenarios);
    let corpus = Corpus {
        profiles,
        future_pairs,
        qa_pairs,
        labels,
    };
    let path = out.join("corpus.jsonl");
    write_corpus(&path, &corpus)?;
    let digest = sha256_file(&path)?;
    std::fs::write(out.join("corpus.sha256"), format!("{digest}  corpus.jsonl\n"))?;
    tracing::info!(
        users = corpus.profiles.len(),
        qa = corpus.qa_pairs.len(),
        skipped = stats.skipped,
        "corpus written"
    );
    println!("{} {digest}", path.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path, corpus: &Path) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    prepare(cfg, out)?;
    let mut model = QAnchor::new(&cfg.model)?;
    let ckpt_dir = out.join("checkpoints");
    let log_path = out.join("train_log.csv");
    let log = pretrain(
        &mut model,
        &corpus,
        &cfg.train,
        RunOutputs {
            log_csv: Some(&log_path),
            checkpoint_dir: (cfg.train.checkpoint_every > 0).then_some(ckpt_dir.as_path()),
        },
    )?;
    let path = out.join("model.ckpt");
    model.save(&path)?;
    if let (Some(a), Some(b)) = (log.first(), log.last()) {
        println!(
            "{} L_total {:.4} -> {:.4} over {} steps",
            path.display(),
            a.l_total,
            b.l_total,
            log.len()
        );
    }
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_tune(cfg: &RunConfig, out: &Path, checkpoint: &Path, corpus: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let corpus = load_corpus(corpus)?;
    let spec = scenario_spec(cfg)?;
    prepare(cfg, out)?;
    let labels = scenario_data(&corpus, &spec.name)?;
    let (train, _) = stratified_split(&labels, cfg.probe.train_fraction, cfg.probe.seed);
    let profiles: Vec<&UserProfile> = train.iter().map(|&i| &corpus.profiles[i]).collect();
    let ys: Vec<usize> = train.iter().map(|&i| labels[i] as usize).collect();
    let outcome = tune(&model, &profiles, &ys, &spec.name, &spec.query, &cfg.tune)?;
    let path = out.join(format!("{}.qpt", spec.name));
    outcome.artifacts.save(&path)?;
    write_csv(&out.join("tune_log.csv"), &outcome.log)?;
    println!(
        "{} trainable {} final loss {:.4}",
        path.display(),
        outcome.trainable_count,
        outcome.log.last().map_or(f64::NAN, |l| l.loss)
    );
    Ok(())
}

/// A client, plus the in-process server behind it when no URL was given.
async fn connect(cfg: &RunConfig, target: &ServiceTarget, hier: Option<HierConfig>) -> Result<(Client, Option<LocalServer>)> {
    if let Some(url) = &target.server {
        return Ok((Client::new(url), None));
    }
    let local = start_local(cfg, target, hier, cfg.serve.cache).await?;
    Ok((Client::new(&local.url()), Some(local)))
}

async fn start_local(cfg: &RunConfig, target: &ServiceTarget, hier: Option<HierConfig>, cache: bool) -> Result<LocalServer> {
    let model = match (&target.checkpoint, hier) {
        (Some(p), None) => load_model(p)?,
        (Some(_), Some(_)) => bail!("bench builds its own model; drop --checkpoint or use --server"),
        (None, Some(h)) => {
            let mut spec = cfg.model.clone();
            spec.hier = h;
            QAnchor::new(&spec)?
        }
        (None, None) => bail!("give --server or --checkpoint"),
    };
    let mut state = AppState::new(
        model,
        ServerConfig {
            capacity: cfg.serve.capacity,
            cache,
        },
    );
    for p in &target.prompts {
        need(p)?;
        state = state.with_prompt(TunedArtifacts::load(p)?);
    }
    Ok(LocalServer::start(Arc::new(state)).await?)
}

fn cmd_embed(
    cfg: &RunConfig,
    out: &Path,
    target: &ServiceTarget,
    corpus: &Path,
    query: Option<String>,
    tuned: bool,
) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let spec = scenario_spec(cfg)?;
    let query = query.unwrap_or(spec.query.clone());
    prepare(cfg, out)?;
    let labels = scenario_data(&corpus, &spec.name)?;
    let rt = runtime()?;
    let rows = rt.block_on(async {
        let (client, local) = connect(cfg, target, None).await?;
        let scenario = tuned.then_some(spec.name.as_str());
        let mut rows = Vec::with_capacity(corpus.profiles.len());
        let mut tokens = 0usize;
        for (p, &y) in corpus.profiles.iter().zip(&labels) {
            client.put_profile(p).await?;
            let r = client.embed(&p.user_id, &query, scenario).await?;
            tokens += r.tokens_processed;
            rows.push((p.user_id.clone(), y, r.embedding));
        }
        tracing::info!(users = rows.len(), tokens, "embedded");
        if let Some(l) = local {
            l.shutdown().await?;
        }
        anyhow::Ok(rows)
    })?;
    let method = if tuned { "tuned" } else { "base" };
    let path = out.join(format!("embeddings_{method}.csv"));
    export_embeddings(&path, &spec.name, &rows)?;
    println!("{} rows {}", path.display(), rows.len());
    Ok(())
}

fn method_of(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("embeddings");
    stem.strip_prefix("embeddings_").unwrap_or(stem).to_string()
}

fn cmd_probe(cfg: &RunConfig, out: &Path, inputs: &[PathBuf], attention: Option<(PathBuf, PathBuf, PathBuf, usize)>) -> Result<()> {
    for p in inputs {
        need(p)?;
    }
    prepare(cfg, out)?;
    let mut results = Vec::new();
    for p in inputs {
        let rows = read_embeddings(p)?;
        let emb: Vec<Vec<f64>> = rows.iter().map(|r| r.2.clone()).collect();
        let y: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let r = evaluate(&emb, &y, &cfg.scenario, &method_of(p), &cfg.probe)?;
        println!("{} {} auc {:.4} ks {:.4}", r.scenario, r.method, r.auc, r.ks);
        results.push(r);
    }
    write_results(&out.join("results.csv"), &results)?;
    if let Some((ckpt, prompt, corpus, n)) = attention {
        let model = load_model(&ckpt)?;
        need(&prompt)?;
        let art = TunedArtifacts::load(&prompt)?;
        let corpus = load_corpus(&corpus)?;
        let labels = scenario_data(&corpus, &art.scenario)?;
        let (_, test) = stratified_split(&labels, cfg.probe.train_fraction, cfg.probe.seed);
        let sample: Vec<&UserProfile> = test.iter().take(n).map(|&i| &corpus.profiles[i]).collect();
        let rep = attention_report(&model, &sample, &art.query, &art.prompt)?;
        rep.write_csv(&out.join("attention.csv"))?;
        for (g, d) in rep.groups.iter().zip(rep.delta()) {
            println!("attention {g} {d:+.5}");
        }
    }
    Ok(())
}

fn cmd_serve(cfg: &RunConfig, checkpoint: &Path, prompts: &[PathBuf]) -> Result<()> {
    let model = load_model(checkpoint)?;
    tracing::info!("resolved config\n{}", cfg.to_toml()?);
    let mut state = AppState::new(
        model,
        ServerConfig {
            capacity: cfg.serve.capacity,
            cache: cfg.serve.cache,
        },
    );
    for p in prompts {
        need(p)?;
        state = state.with_prompt(TunedArtifacts::load(p)?);
    }
    let rt = runtime()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.serve.addr)
            .await
            .with_context(|| format!("binding {}", cfg.serve.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        qanchor_server::serve(listener, Arc::new(state), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    })
}

pub struct BenchArgs {
    pub lp: usize,
    pub lq: usize,
    pub queries: usize,
    pub runs: usize,
    pub cache: CacheMode,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    mode: &'static str,
    run: usize,
    l_p: usize,
    l_q: usize,
    queries: usize,
    seconds: f64,
    tokens_processed: usize,
    attention_pairs: usize,
}

async fn bench_mode(client: &Client, profile: &UserProfile, queries: &[String], a: &BenchArgs, mode: &'static str) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(a.runs);
    for run in 0..a.runs {
        let t = Instant::now();
        let l_p = client.put_profile(profile).await?;
        let (mut tokens, mut pairs) = (0, 0);
        for q in queries {
            let r = client.embed(&profile.user_id, q, None).await?;
            tokens += r.tokens_processed;
            pairs += r.attention_pairs;
        }
        rows.push(BenchRow {
            mode,
            run,
            l_p,
            l_q: a.lq,
            queries: queries.len(),
            seconds: t.elapsed().as_secs_f64(),
            tokens_processed: tokens,
            attention_pairs: pairs,
        });
    }
    Ok(rows)
}

fn cmd_bench(cfg: &RunConfig, out: &Path, target: &ServiceTarget, a: BenchArgs) -> Result<()> {
    let hier = HierConfig {
        retention: retention_for(a.lp)?,
        ..cfg.model.hier.clone()
    };
    let profile = sized_profile(&hier, "bench-user", cfg.seed)?;
    let queries: Vec<String> = (0..a.queries).map(|i| sized_query(a.lq, i)).collect::<qanchor::Result<_>>()?;
    prepare(cfg, out)?;
    let modes: Vec<bool> = match a.cache {
        CacheMode::On => vec![true],
        CacheMode::Off => vec![false],
        CacheMode::Both => vec![true, false],
    };
    let rt = runtime()?;
    let rows = rt.block_on(async {
        let mut rows = Vec::new();
        for cache in modes {
            let mode = if cache { "cached" } else { "uncached" };
            if let Some(url) = &target.server {
                let client = Client::new(url);
                let stats = client.stats().await?;
                if stats.cache_enabled != cache {
                    bail!("server at {url} has cache_enabled={}, bench asked for {mode}", stats.cache_enabled);
                }
                rows.extend(bench_mode(&client, &profile, &queries, &a, mode).await?);
            } else {
                let local = start_local(cfg, target, Some(hier.clone()), cache).await?;
                let client = Client::new(&local.url());
                rows.extend(bench_mode(&client, &profile, &queries, &a, mode).await?);
                local.shutdown().await?;
            }
        }
        anyhow::Ok(rows)
    })?;
    let path = out.join("bench.csv");
    write_csv(&path, &rows)?;
    let med = |m: &str| median(&rows.iter().filter(|r| r.mode == m).map(|r| r.seconds).collect::<Vec<_>>());
    let (c, u) = (med("cached"), med("uncached"));
    for r in rows.iter().filter(|r| r.run == 0) {
        println!("{} l_p {} tokens_processed {}", r.mode, r.l_p, r.tokens_processed);
    }
    if c.is_finite() && u.is_finite() {
        println!("median seconds cached {c:.5} uncached {u:.5} speedup {:.2}x", u / c);
    }
    println!("{}", path.display());
    Ok(())
}
