//! Linear probes on frozen embeddings, ranking metrics, sentinel attention
//! reports, and CSV exports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{Modality, TokenGroup};
use crate::model::{PromptInput, QAnchor, SeqPlan};
use crate::synth::UserProfile;
use crate::tune::SoftPrompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the loss changes by less than this between iterations.
    pub tol: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 0.0,
            max_iters: 2000,
            tol: 1e-7,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iters: usize,
}

impl ProbeModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn scores(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.score(x)).collect()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus `l2/2 · ‖w‖²`.
pub fn logistic_loss(x: &[Vec<f64>], y: &[u8], w: &[f64], b: f64, l2: f64) -> f64 {
    let n = x.len() as f64;
    let data: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let z = b + w.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
            softplus(z) - yi as f64 * z
        })
        .sum::<f64>()
        / n;
    data + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

fn logistic_grad(x: &[Vec<f64>], y: &[u8], w: &[f64], b: f64, l2: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw: Vec<f64> = w.iter().map(|v| l2 * v).collect();
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z = b + w.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
        let r = (sigmoid(z) - yi as f64) / n;
        for (g, v) in gw.iter_mut().zip(xi) {
            *g += r * v;
        }
        gb += r;
    }
    (gw, gb)
}

/// Full-batch gradient descent with backtracking line search.
pub fn train_probe(x: &[Vec<f64>], y: &[u8], cfg: &ProbeConfig) -> Result<ProbeModel> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Dimension("one label per embedding".into()));
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateData("probe training split has a single class".into()));
    }
    let d = x[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut loss = logistic_loss(x, y, &w, b, cfg.l2);
    let mut step = 1.0;
    let mut iters = 0;
    while iters < cfg.max_iters {
        iters += 1;
        let (gw, gb) = logistic_grad(x, y, &w, b, cfg.l2);
        let gn2 = gw.iter().map(|v| v * v).sum::<f64>() + gb * gb;
        if gn2 == 0.0 {
            break;
        }
        step *= 2.0;
        let (nw, nb, nl) = loop {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let nb = b - step * gb;
            let nl = logistic_loss(x, y, &nw, nb, cfg.l2);
            if nl <= loss - 0.5 * step * gn2 || step < 1e-12 {
                break (nw, nb, nl);
            }
            step *= 0.5;
        };
        let delta = loss - nl;
        w = nw;
        b = nb;
        loss = nl;
        if delta.abs() < cfg.tol {
            break;
        }
    }
    Ok(ProbeModel { weights: w, bias: b, iters })
}

fn check_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let p = labels.iter().filter(|&&v| v == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("both classes must be present".into()));
    }
    Ok((p, n))
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("one label per score".into()));
    }
    let (p, n) = check_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Largest gap between true- and false-positive rates over all thresholds.
pub fn ks(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension("one label per score".into()));
    }
    let (p, n) = check_classes(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        best = best.max((tp as f64 / p as f64 - fp as f64 / n as f64).abs());
    }
    Ok(best)
}

/// Stratified split: `fraction` of each class goes to train.
pub fn stratified_split(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub scenario: String,
    pub method: String,
    pub auc: f64,
    pub ks: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Splits, fits a probe on the train part, and scores the test part.
pub fn evaluate(
    embeddings: &[Vec<f64>],
    labels: &[u8],
    scenario: &str,
    method: &str,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (train, test) = stratified_split(labels, cfg.train_fraction, cfg.seed);
    let pick = |ix: &[usize]| -> (Vec<Vec<f64>>, Vec<u8>) {
        (ix.iter().map(|&i| embeddings[i].clone()).collect(), ix.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    let model = train_probe(&xtr, &ytr, cfg)?;
    let s = model.scores(&xte);
    Ok(ProbeResult {
        scenario: scenario.to_string(),
        method: method.to_string(),
        auc: auc(&s, &yte)?,
        ks: ks(&s, &yte)?,
        n_train: train.len(),
        n_test: test.len(),
        seed: cfg.seed,
    })
}

pub fn write_results(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean attention mass from the sentinel onto each token group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionReport {
    pub groups: Vec<String>,
    pub base: Vec<f64>,
    pub tuned: Vec<f64>,
    /// Per-layer masses `[layer][group]` for the tuned condition.
    pub tuned_layers: Vec<Vec<f64>>,
    pub base_layers: Vec<Vec<f64>>,
}

impl AttentionReport {
    pub fn delta(&self) -> Vec<f64> {
        self.tuned.iter().zip(&self.base).map(|(t, b)| t - b).collect()
    }

    fn mass_of(&self, masses: &[f64], m: Modality) -> f64 {
        [TokenGroup::Summary(m), TokenGroup::Events(m)]
            .iter()
            .filter_map(|g| self.groups.iter().position(|n| *n == g.label()))
            .map(|i| masses[i])
            .sum()
    }

    /// Summary plus event mass of one modality, `(base, tuned)`.
    pub fn modality_mass(&self, m: Modality) -> (f64, f64) {
        (self.mass_of(&self.base, m), self.mass_of(&self.tuned, m))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "group,mass_base,mass_tuned,delta")?;
        for (i, g) in self.groups.iter().enumerate() {
            writeln!(f, "{g},{},{},{}", self.base[i], self.tuned[i], self.tuned[i] - self.base[i])?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Per-layer sentinel attention masses by group, averaged over heads and
/// profiles.
pub fn sentinel_attention(
    model: &QAnchor,
    profiles: &[&UserProfile],
    query: &str,
    prompt: Option<&SoftPrompt>,
) -> Result<Vec<BTreeMap<String, f64>>> {
    if profiles.is_empty() {
        return Err(Error::Contract("attention report needs at least one profile".into()));
    }
    let cfg = model.config();
    let mut layers = vec![BTreeMap::new(); cfg.n_layers];
    for chunk in profiles.chunks(32) {
        let mut g = model.inference_graph();
        let enc = model.encoder.encode_batch(&mut g, &model.store, chunk)?;
        let plans: Vec<SeqPlan> = (0..chunk.len()).map(|i| SeqPlan::anchor(i, query)).collect();
        let p = prompt.map(|p| PromptInput {
            rows: g.constant(p.vectors.clone()),
            placement: p.placement,
        });
        let out = model.forward_plans(&mut g, Some(&enc), &plans, p)?;
        for (l, &attn) in out.attn.iter().enumerate() {
            let heads = g.attention_heads(attn).unwrap_or(0);
            for (s, lay) in out.layouts.iter().enumerate() {
                for h in 0..heads {
                    let (probs, seg) = g
                        .attention_probs(attn, s, h)
                        .ok_or_else(|| Error::Contract("attention probabilities missing".into()))?;
                    let row = &probs[lay.sentinel * seg.k_len..(lay.sentinel + 1) * seg.k_len];
                    for (k, &pk) in row.iter().enumerate() {
                        *layers[l].entry(lay.groups[k].label()).or_insert(0.0) += pk;
                    }
                }
            }
        }
    }
    let norm = (profiles.len() * cfg.n_heads) as f64;
    for layer in &mut layers {
        layer.values_mut().for_each(|v| *v /= norm);
    }
    Ok(layers)
}

/// Compares sentinel attention without and with a tuned prompt.
pub fn attention_report(
    model: &QAnchor,
    profiles: &[&UserProfile],
    query: &str,
    prompt: &SoftPrompt,
) -> Result<AttentionReport> {
    let base = sentinel_attention(model, profiles, query, None)?;
    let tuned = sentinel_attention(model, profiles, query, Some(prompt))?;
    let groups: Vec<String> = TokenGroup::all().iter().map(TokenGroup::label).collect();
    let per_layer = |ls: &[BTreeMap<String, f64>]| -> Vec<Vec<f64>> {
        ls.iter()
            .map(|l| groups.iter().map(|g| l.get(g).copied().unwrap_or(0.0)).collect())
            .collect()
    };
    let base_layers = per_layer(&base);
    let tuned_layers = per_layer(&tuned);
    let mean = |ls: &[Vec<f64>]| -> Vec<f64> {
        (0..groups.len())
            .map(|i| ls.iter().map(|l| l[i]).sum::<f64>() / ls.len() as f64)
            .collect()
    };
    Ok(AttentionReport {
        base: mean(&base_layers),
        tuned: mean(&tuned_layers),
        groups,
        tuned_layers,
        base_layers,
    })
}

/// One row per user: id, scenario, label, then the embedding with 12
/// significant digits.
pub fn export_embeddings(
    path: &Path,
    scenario: &str,
    rows: &[(String, u8, Vec<f64>)],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = rows.first().map_or(0, |r| r.2.len());
    write!(f, "user_id,scenario,label")?;
    for i in 0..dim {
        write!(f, ",e{i}")?;
    }
    writeln!(f)?;
    for (uid, y, e) in rows {
        write!(f, "{uid},{scenario},{y}")?;
        for v in e {
            write!(f, ",{v:.11e}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads an embedding export back as `(user_id, label, embedding)`.
pub fn read_embeddings(path: &Path) -> Result<Vec<(String, u8, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line + 2,
            msg,
        };
        let y: u8 = rec.get(2).unwrap_or("").parse().map_err(|e| parse_err(format!("{e}")))?;
        let e: Vec<f64> = rec
            .iter()
            .skip(3)
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(format!("{e}"))))
            .collect::<Result<_>>()?;
        out.push((rec.get(0).unwrap_or("").to_string(), y, e));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
