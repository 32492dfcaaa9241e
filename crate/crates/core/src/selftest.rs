//! Quick brute-force oracle checks behind `svkit selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augment::{mix_at_snr, speed_perturb};
use crate::features::Waveform;
use crate::fusion::{fit_fusion, fuse, log_loss, ScoreMatrix};
use crate::metrics::{eer, min_dcf, roc_points, DcfConfig};
use crate::model::{
    aam_softmax_loss, attentive_stats_pool, plan_shapes, softmax_ce_loss, AttentionParams, Frames, LossConfig,
    StrideVariant, SubcenterWeights,
};
use crate::schedule::{lr_at, CosineRestartConfig};
use crate::scoring::{asnorm_score, cosine_score, top_k_stats};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check { name, passed: worst <= tol, detail: format!("worst {worst:.3e} (tol {tol:.0e})") }
}

/// Central-difference gradient of `f` at `x`.
fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let scale = a.iter().chain(n).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn metrics_vs_sweep(rng: &mut ChaCha8Rng) -> Check {
    let cfg = DcfConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(10..400);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random_range(0..60) as f64 + if l { 15.0 } else { 0.0 }).collect();
        let nt = labels.iter().filter(|&&l| l).count() as f64;
        let nn = n as f64 - nt;
        let mut th = scores.clone();
        th.push(f64::INFINITY);
        th.sort_by(f64::total_cmp);
        th.dedup();
        let rates: Vec<(f64, f64)> = th
            .iter()
            .map(|&t| {
                let miss = scores.iter().zip(&labels).filter(|(s, l)| **l && **s < t).count() as f64 / nt;
                let fa = scores.iter().zip(&labels).filter(|(s, l)| !**l && **s >= t).count() as f64 / nn;
                (miss, fa)
            })
            .collect();
        let best = rates.iter().map(|&(m, f)| cfg.cost(m, f)).fold(f64::INFINITY, f64::min) / cfg.default_cost();
        let i = rates.iter().position(|&(m, f)| m >= f).expect("last threshold rejects all");
        let oracle_eer = if i == 0 {
            100.0 * rates[0].0
        } else {
            let ((m0, f0), (m1, f1)) = (rates[i - 1], rates[i]);
            let t = (f0 - m0) / ((m1 - m0) + (f0 - f1));
            100.0 * (m0 + t * (m1 - m0))
        };
        let curve = roc_points(&scores, &labels).expect("both classes present");
        worst = worst.max((eer(&curve) - oracle_eer).abs()).max((min_dcf(&curve, &cfg) - best).abs());
    }
    check("metrics match threshold sweep", worst, 1e-9)
}

fn aam_gradients(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (dim, n, k) = (6, 4, 2);
        let w = SubcenterWeights::random(dim, n, k, rng.random()).expect("valid shape");
        let x = crate::model::length_normalize(&normal(rng, dim)).expect("non-zero");
        let y = rng.random_range(0..n);
        let cfg = LossConfig::new(rng.random_range(5.0..30.0), rng.random_range(0.0..0.5)).expect("valid");
        let eval = aam_softmax_loss(&x, y, &w, &cfg).expect("valid");
        let num = numeric_grad(&x, 1e-6, |p| aam_softmax_loss(p, y, &w, &cfg).expect("valid").loss);
        worst = worst.max(rel_err(&eval.grad_x, &num));
    }
    check("aam-softmax gradient vs finite differences", worst, 1e-5)
}

fn ce_gradients(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let z: Vec<f64> = normal(rng, 7).into_iter().map(|v| 5.0 * v).collect();
        let y = rng.random_range(0..7);
        let a = softmax_ce_loss(&z, y).expect("valid").grad_logits;
        let num = numeric_grad(&z, 1e-6, |p| softmax_ce_loss(p, y).expect("valid").loss);
        worst = worst.max(rel_err(&a, &num));
    }
    check("softmax-ce gradient vs finite differences", worst, 1e-5)
}

fn pool_gradients(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (t, d, a) = (5, 3, 4);
        let p = AttentionParams::random(d, a, rng);
        let h = Frames::new(normal(rng, t * d), t, d).expect("shape");
        let g = normal(rng, 2 * d);
        let fwd = attentive_stats_pool(&h, &p).expect("valid");
        let grads = fwd.backward(&h, &p, &g).expect("valid");
        let objective = |frames: &[f64]| {
            let h = Frames::new(frames.to_vec(), t, d).expect("shape");
            let out = attentive_stats_pool(&h, &p).expect("valid").output;
            out.iter().zip(&g).map(|(o, gi)| o * gi).sum::<f64>()
        };
        worst = worst.max(rel_err(&grads.frames, &numeric_grad(&h.data, 1e-6, objective)));
    }
    check("attentive pooling gradient vs finite differences", worst, 1e-5)
}

fn asnorm_oracle(rng: &mut ChaCha8Rng) -> Check {
    let dim = 8;
    let unit = |v: Vec<f64>| -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    };
    let cohort: Vec<Vec<f32>> = (0..50).map(|_| unit(normal(rng, dim))).collect();
    let k = 10;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (e, t) = (unit(normal(rng, dim)), unit(normal(rng, dim)));
        let stats_of = |x: &[f32]| {
            let mut s: Vec<f64> = cohort.iter().map(|c| cosine_score(x, c).expect("dims")).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            let top = &s[..k];
            let mean = top.iter().sum::<f64>() / k as f64;
            let var = top.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
            (mean, var.sqrt())
        };
        let ((me, se), (mt, st)) = (stats_of(&e), stats_of(&t));
        let raw = cosine_score(&e, &t).expect("dims");
        let oracle = 0.5 * ((raw - me) / se + (raw - mt) / st);
        let cs = |x: &[f32]| top_k_stats(&cohort.iter().map(|c| cosine_score(x, c).expect("dims")).collect::<Vec<_>>(), k);
        let got = asnorm_score(raw, &cs(&e).expect("k <= cohort"), &cs(&t).expect("k <= cohort"));
        worst = worst.max((got - oracle).abs());
    }
    check("as-norm matches brute force", worst, 1e-9)
}

fn snr_and_speed(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let s = Waveform::new(normal(rng, 1600), 16000).expect("finite");
        let noise_len = rng.random_range(100..3000);
        let n = Waveform::new(normal(rng, noise_len), 16000).expect("finite");
        let snr = rng.random_range(0.0..20.0);
        let out = mix_at_snr(&s, &n, snr).expect("non-silent");
        let added: f64 = out.samples().iter().zip(s.samples()).map(|(o, x)| (o - x).powi(2)).sum::<f64>() / s.len() as f64;
        worst = worst.max((10.0 * (s.power() / added).log10() - snr).abs());
    }
    let mut lengths_ok = true;
    for len in [1usize, 2, 7, 100, 16001] {
        let w = Waveform::new(vec![0.5; len], 16000).expect("finite");
        for f in [0.9, 1.0, 1.1] {
            lengths_ok &= speed_perturb(&w, f).map(|o| o.len()).ok() == Some((len as f64 / f).round() as usize);
        }
    }
    let mut c = check("snr fidelity and speed-perturb lengths", worst, 1e-6);
    c.passed &= lengths_ok;
    c
}

fn schedule_values() -> Check {
    let cfg = CosineRestartConfig::stage_one(1000);
    let mut ok = lr_at(&cfg, 0).0 == 0.02 && (lr_at(&cfg, 1000).0 - 0.016).abs() < 1e-15;
    for c in 0..=10u32 {
        let start = 1000 * ((1u64 << c) - 1);
        ok &= lr_at(&cfg, start).1 == u64::from(c) && (start == 0 || lr_at(&cfg, start - 1).1 == u64::from(c) - 1);
    }
    Check { name: "schedule peaks and cycle boundaries", passed: ok, detail: String::new() }
}

fn shapes() -> Check {
    let expected = [
        [(80, 600), (40, 600), (20, 600), (10, 300)],
        [(80, 600), (40, 600), (20, 300), (10, 300)],
        [(80, 600), (40, 300), (20, 150), (10, 75)],
    ];
    let ok = StrideVariant::ALL.iter().zip(expected).all(|(v, e)| plan_shapes(*v, (80, 600)).ok() == Some(e));
    Check { name: "stride planner shapes", passed: ok, detail: String::new() }
}

fn fusion_dominance(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..5 {
        let n = 200;
        let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let gap = rng.random_range(0.2..2.0);
                let noise = normal(rng, n);
                labels.iter().zip(noise).map(|(&l, z)| z + if l { gap } else { 0.0 }).collect::<Vec<f64>>()
            })
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let m = ScoreMatrix::from_columns(&refs).expect("aligned");
        let fused = log_loss(&fuse(&fit_fusion(&m, &labels, 0.0).expect("fit"), &m).expect("dims"), &labels);
        for c in &refs {
            let single = ScoreMatrix::from_columns(&[c]).expect("aligned");
            let cal = log_loss(&fuse(&fit_fusion(&single, &labels, 0.0).expect("fit"), &single).expect("dims"), &labels);
            worst = worst.max(fused - cal);
        }
    }
    check("fusion beats each calibrated system", worst.max(0.0), 1e-9)
}

/// Runs every check with a fixed seed.
pub fn run_all() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_7e57);
    vec![
        metrics_vs_sweep(&mut rng),
        aam_gradients(&mut rng),
        ce_gradients(&mut rng),
        pool_gradients(&mut rng),
        asnorm_oracle(&mut rng),
        snr_and_speed(&mut rng),
        schedule_values(),
        shapes(),
        fusion_dominance(&mut rng),
    ]
}
