use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::model::tests::tiny_spec;
use crate::model::PromptPlacement;
use crate::synth::{gen_profiles, SynthConfig};
use crate::tensor::Tensor;

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn pair_auc(s: &[f64], y: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn sweep_ks(s: &[f64], y: &[u8]) -> f64 {
    let p = y.iter().filter(|&&v| v == 1).count() as f64;
    let n = y.len() as f64 - p;
    let mut best = 0.0f64;
    for &t in s {
        let tpr = s.iter().zip(y).filter(|(v, l)| **v >= t && **l == 1).count() as f64 / p;
        let fpr = s.iter().zip(y).filter(|(v, l)| **v >= t && **l == 0).count() as f64 / n;
        best = best.max((tpr - fpr).abs());
    }
    best
}

fn ecdf_ks(s: &[f64], y: &[u8]) -> f64 {
    let pos: Vec<f64> = s.iter().zip(y).filter(|(_, l)| **l == 1).map(|(v, _)| *v).collect();
    let neg: Vec<f64> = s.iter().zip(y).filter(|(_, l)| **l == 0).map(|(v, _)| *v).collect();
    let cdf = |xs: &[f64], t: f64| xs.iter().filter(|&&v| v <= t).count() as f64 / xs.len() as f64;
    s.iter().map(|&t| (cdf(&pos, t) - cdf(&neg, t)).abs()).fold(0.0, f64::max)
}

fn random_case(n: usize, seed: u64, levels: u32) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
    y[0] = 0;
    y[1] = 1;
    let s = y
        .iter()
        .map(|&l| (rng.random_range(0..levels) as f64 + l as f64 * 3.0) / 7.0)
        .collect();
    (s, y)
}

#[test]
fn auc_and_ks_match_brute_force() {
    for seed in 0..10 {
        for levels in [5, 50, 100_000] {
            let (s, y) = random_case(200, seed, levels);
            assert_eq!(auc(&s, &y).unwrap(), pair_auc(&s, &y));
            assert_eq!(ks(&s, &y).unwrap(), sweep_ks(&s, &y));
            assert!((ks(&s, &y).unwrap() - ecdf_ks(&s, &y)).abs() < 1e-12);
        }
    }
}

#[test]
fn metric_trivial_cases() {
    let y = [0, 0, 1, 1];
    assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
    assert_eq!(ks(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
    assert_eq!(auc(&[0.5; 4], &y).unwrap(), 0.5);
    assert_eq!(ks(&[0.5; 4], &y).unwrap(), 0.0);
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(ks(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps(seed in 0u64..1000, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let (s, y) = random_case(60, seed, 20);
        let base = auc(&s, &y).unwrap();
        let affine: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let expd: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        prop_assert_eq!(auc(&affine, &y).unwrap(), base);
        prop_assert_eq!(auc(&expd, &y).unwrap(), base);
    }

    #[test]
    fn metrics_stay_in_unit_interval(seed in 0u64..1000) {
        let (s, y) = random_case(40, seed, 1000);
        let a = auc(&s, &y).unwrap();
        let k = ks(&s, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&k));
    }
}

#[test]
fn separable_data_is_fit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Vec<f64>> = (0..100)
        .map(|i| {
            let c = if i % 2 == 0 { 2.0 } else { -2.0 };
            vec![c + 0.3 * rng.random::<f64>(), rng.random::<f64>()]
        })
        .collect();
    let y: Vec<u8> = (0..100).map(|i| (i % 2 == 0) as u8).collect();
    let m = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    let acc = x.iter().zip(&y).filter(|(xi, &yi)| (m.score(xi) > 0.0) == (yi == 1)).count();
    assert_eq!(acc, 100);
}

#[test]
fn permuted_labels_give_chance_auc() {
    let mut total = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(2000, 8, &mut rng);
        let y: Vec<u8> = (0..2000).map(|_| rng.random_bool(0.5) as u8).collect();
        let r = evaluate(&x, &y, "null", "base", &ProbeConfig { seed, ..ProbeConfig::default() }).unwrap();
        total += r.auc;
    }
    assert!((total / 5.0 - 0.5).abs() < 0.05);
}

// Newton's method on the same objective.
fn newton(x: &[Vec<f64>], y: &[u8], l2: f64) -> Vec<f64> {
    let d = x[0].len() + 1;
    let aug: Vec<Vec<f64>> = x.iter().map(|r| r.iter().copied().chain([1.0]).collect()).collect();
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    for _ in 0..50 {
        let mut g = vec![0.0; d];
        let mut h = vec![vec![0.0; d]; d];
        for (r, &yi) in aug.iter().zip(y) {
            let z: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for i in 0..d {
                g[i] += (p - yi as f64) * r[i] / n;
                for j in 0..d {
                    h[i][j] += p * (1.0 - p) * r[i] * r[j] / n;
                }
            }
        }
        for i in 0..d - 1 {
            g[i] += l2 * w[i];
            h[i][i] += l2;
        }
        // Gaussian elimination for h · step = g
        let mut a: Vec<Vec<f64>> = h.iter().zip(&g).map(|(row, gi)| row.iter().copied().chain([*gi]).collect()).collect();
        for c in 0..d {
            let piv = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for r in 0..d {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=d {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        for i in 0..d {
            w[i] -= a[i][d] / a[i][i];
        }
    }
    w
}

#[test]
fn probe_matches_newton_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(200, 5, &mut rng);
    let y: Vec<u8> = x
        .iter()
        .map(|r| {
            let z = 0.8 * r[0] - 0.5 * r[2] + 0.2;
            rng.random_bool(1.0 / (1.0 + (-z as f64).exp())) as u8
        })
        .collect();
    for l2 in [0.0, 0.05] {
        let cfg = ProbeConfig {
            l2,
            tol: 1e-14,
            max_iters: 20_000,
            ..ProbeConfig::default()
        };
        let m = train_probe(&x, &y, &cfg).unwrap();
        let w = newton(&x, &y, l2);
        for i in 0..5 {
            assert!((m.weights[i] - w[i]).abs() < 1e-4, "{l2} w{i}");
        }
        assert!((m.bias - w[5]).abs() < 1e-4);
    }
}

#[test]
fn single_class_split_is_degenerate() {
    let x = vec![vec![0.0], vec![1.0]];
    assert!(matches!(
        train_probe(&x, &[1, 1], &ProbeConfig::default()),
        Err(Error::DegenerateData(_))
    ));
}

#[test]
fn stratified_split_keeps_class_ratio() {
    let y: Vec<u8> = (0..100).map(|i| (i < 20) as u8).collect();
    let (tr, te) = stratified_split(&y, 0.7, 3);
    assert_eq!(tr.len() + te.len(), 100);
    assert_eq!(tr.iter().filter(|&&i| y[i] == 1).count(), 14);
    assert_eq!(stratified_split(&y, 0.7, 3), (tr, te));
}

#[test]
fn export_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<(String, u8, Vec<f64>)> = (0..7)
        .map(|i| (format!("u{i}"), (i % 2) as u8, gaussian(1, 16, &mut rng).remove(0)))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    export_embeddings(&path, "dining_offer", &rows).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!((&a.0, a.1), (&b.0, b.1));
        for (x, y) in a.2.iter().zip(&b.2) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("user_id,scenario,label,e0,e1,"));
}

#[test]
fn attention_masses_sum_to_one_and_are_deterministic() {
    let model = QAnchor::new(&tiny_spec()).unwrap();
    let ps: Vec<UserProfile> = gen_profiles(&SynthConfig {
        users: 5,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap()
    .into_iter()
    .map(|u| u.profile)
    .collect();
    let refs: Vec<&UserProfile> = ps.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prompt = SoftPrompt::new(Tensor::randn(&[3, 16], 0.5, &mut rng), PromptPlacement::AfterUser).unwrap();
    let q = "will the user redeem a dining voucher?";
    let r = attention_report(&model, &refs, q, &prompt).unwrap();
    assert!((r.base.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((r.tuned.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    for l in r.base_layers.iter().chain(&r.tuned_layers) {
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let p = r.groups.iter().position(|g| g == "prompt").unwrap();
    assert_eq!(r.base[p], 0.0);
    assert!(r.tuned[p] > 0.0);
    assert_eq!(r, attention_report(&model, &refs, q, &prompt).unwrap());
    let (b, t) = r.modality_mass(Modality::Bill);
    assert!(b > 0.0 && t > 0.0);
    let dir = tempfile::tempdir().unwrap();
    r.write_csv(&dir.path().join("attn.csv")).unwrap();
}
