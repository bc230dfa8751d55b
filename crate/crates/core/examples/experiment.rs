//! One end-to-end run. `SEED`, `STEPS`, `TUNE_STEPS` and `W_CL` override
//! the defaults, e.g. `SEED=1 cargo run --release --example experiment`.

use qanchor::experiment::{run_experiment, ExperimentConfig};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mut cfg = ExperimentConfig::default().with_seed(env("SEED", 0));
    cfg.train.steps = env("STEPS", cfg.train.steps);
    cfg.tune.steps = env("TUNE_STEPS", cfg.tune.steps);
    cfg.train.w_cl = env("W_CL", cfg.train.w_cl);
    let r = run_experiment(&cfg).unwrap();
    println!(
        "random {:.4} base {:.4} tuned {:.4} ({:.0}s)",
        r.random.auc, r.pretrained.auc, r.tuned.auc, r.seconds
    );
    println!("planted {:?}: base mass {:.4} tuned mass {:.4}", r.planted, r.planted_mass.0, r.planted_mass.1);
    for (group, d) in r.attention.groups.iter().zip(r.attention.delta()) {
        println!("  {group:<16} {d:+.4}");
    }
}
