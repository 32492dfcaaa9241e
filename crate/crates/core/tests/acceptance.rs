//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//! Every oracle here is written independently of the library code it checks.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use svkit::augment::{mix_at_snr, speed_perturb, SPEED_FACTORS};
use svkit::features::Waveform;
use svkit::fusion::{fit_fusion, fuse, ScoreMatrix};
use svkit::metrics::{eer, min_dcf, roc_points, DcfConfig};
use svkit::model::{
    aam_softmax_loss, attentive_stats_pool, plan_shapes, softmax_ce_loss, subcenter_cosines, AttentionParams, Frames,
    LossConfig, StrideVariant, SubcenterWeights,
};
use svkit::schedule::{lr_at, lr_in_cycle, CosineRestartConfig};
use svkit::scoring::{cosine_score, msa_score, score_trials, ScoringMode};
use svkit::synthetic::{group_by_speaker, random_trials, speaker_embeddings};
use svkit::trialdata::{serialize_trials, EmbeddingStore, Trial, TrialList};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

// ---------------------------------------------------------------------------
// Metric oracle: for every distinct threshold t (plus +inf), miss = #targets
// below t and fa = #non-targets at or above t, counted by binary search in
// the separately sorted class score lists.

struct SweepOracle {
    eer_percent: f64,
    min_dcf: f64,
}

fn sweep_oracle(scores: &[f64], labels: &[bool], cfg: &DcfConfig) -> SweepOracle {
    let mut tar: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let mut non: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let miss = tar.partition_point(|&s| s < t) as f64 / nt;
            let fa = (non.len() - non.partition_point(|&s| s < t)) as f64 / nn;
            (miss, fa)
        })
        .collect();
    let norm = (cfg.c_miss * cfg.p_target).min(cfg.c_fa * (1.0 - cfg.p_target));
    let best = rates
        .iter()
        .map(|&(m, f)| cfg.c_miss * cfg.p_target * m + cfg.c_fa * (1.0 - cfg.p_target) * f)
        .fold(f64::INFINITY, f64::min);
    // Accept-all operating point sits before the first threshold.
    let mut curve = vec![(0.0, 1.0)];
    curve.extend(rates);
    let i = curve.iter().position(|&(m, f)| m >= f).expect("reject-all point");
    let eer_percent = if i == 0 {
        100.0 * curve[0].0
    } else {
        let ((m0, f0), (m1, f1)) = (curve[i - 1], curve[i]);
        // Intersection of the segment with the diagonal m = f.
        let t = (f0 - m0) / ((m1 - m0) - (f1 - f0));
        100.0 * (m0 + t * (m1 - m0))
    };
    SweepOracle { eer_percent, min_dcf: best / norm }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let cfg = DcfConfig::default();
    let (mut worst_eer, mut total) = (0.0f64, 0usize);
    for set in 0..200 {
        let n = match set {
            0 => 10,
            1 => 100_000,
            _ => 10f64.powf(rng.random_range(1.0..5.0)).round() as usize,
        };
        let p_target = rng.random_range(0.05..0.6);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(p_target)).collect();
        labels[0] = true;
        labels[1] = false;
        let gap = rng.random_range(0.0..3.0);
        let tied = set % 3 == 0;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let s = z + if l { gap } else { 0.0 };
                if tied {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        let oracle = sweep_oracle(&scores, &labels, &cfg);
        let curve = roc_points(&scores, &labels).map_err(|e| e.to_string())?;
        let (e, d) = (eer(&curve), min_dcf(&curve, &cfg));
        worst_eer = worst_eer.max((e - oracle.eer_percent).abs());
        ensure(d.to_bits() == oracle.min_dcf.to_bits(), || format!("set {set} (n={n}): minDCF {d} vs oracle {}", oracle.min_dcf))?;
        total += n;
    }
    ensure(worst_eer <= 1e-9, || format!("EER deviation {worst_eer:e}"))?;
    Ok(format!("200 sets, {total} trials, max EER deviation {worst_eer:.1e}, minDCF bit-equal"))
}

// ---------------------------------------------------------------------------
// Gradients vs central finite differences.

fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
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

/// Largest absolute deviation relative to the larger of the two gradients' max-norms.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

/// Independent AAM-softmax forward pass over a raw weight tensor `[class][k][dim]`.
fn aam_oracle_loss(x: &[f64], y: usize, w: &[f64], n: usize, k: usize, s: f64, m: f64) -> f64 {
    let d = x.len();
    let cos: Vec<f64> = (0..n)
        .map(|j| (0..k).map(|c| dot(x, &w[(j * k + c) * d..(j * k + c + 1) * d])).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let logits: Vec<f64> = cos
        .iter()
        .enumerate()
        .map(|(j, &c)| if j == y { s * (c.clamp(-1.0, 1.0).acos() + m).cos() } else { s * c })
        .collect();
    let top = (0..n).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).expect("classes");
    let rest: f64 = (0..n).filter(|&j| j != top).map(|j| (logits[j] - logits[top]).exp()).sum();
    logits[top] - logits[y] + rest.ln_1p()
}

fn subcenter_gap(x: &[f64], w: &[f64], n: usize, k: usize) -> f64 {
    let d = x.len();
    (0..n)
        .map(|j| {
            let mut c: Vec<f64> = (0..k).map(|c| dot(x, &w[(j * k + c) * d..(j * k + c + 1) * d])).collect();
            c.sort_by(|a, b| b.total_cmp(a));
            if k > 1 {
                c[0] - c[1]
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let h = 1e-5;
    let (mut w_aam, mut w_ce, mut w_pool) = (0.0f64, 0.0f64, 0.0f64);
    let mut instances = 0;
    while instances < 120 {
        let (d, n, k) = (rng.random_range(3..12), rng.random_range(2..8), rng.random_range(1..4));
        let w = SubcenterWeights::random(d, n, k, rng.random()).map_err(|e| e.to_string())?;
        let x = unit(&gaussian(&mut rng, d));
        if subcenter_gap(&x, w.data(), n, k) < 1e-3 {
            continue;
        }
        let y = rng.random_range(0..n);
        let (s, m) = (rng.random_range(5.0..64.0), rng.random_range(0.0..0.6));
        let cfg = LossConfig::new(s, m).map_err(|e| e.to_string())?;
        let eval = aam_softmax_loss(&x, y, &w, &cfg).map_err(|e| e.to_string())?;
        let oracle = aam_oracle_loss(&x, y, w.data(), n, k, s, m);
        ensure((eval.loss - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), || {
            format!("aam loss {} vs oracle {oracle}", eval.loss)
        })?;
        let gx = central_diff(&x, h, |p| aam_oracle_loss(p, y, w.data(), n, k, s, m));
        let gw = central_diff(w.data(), h, |p| aam_oracle_loss(&x, y, p, n, k, s, m));
        let fx = central_diff(&x, h, |p| aam_softmax_loss(p, y, &w, &cfg).expect("valid").loss);
        w_aam = w_aam.max(rel_err(&eval.grad_x, &gx)).max(rel_err(&eval.grad_w, &gw)).max(rel_err(&eval.grad_x, &fx));
        instances += 1;
    }
    for _ in 0..120 {
        let n = rng.random_range(2..20);
        let scale = rng.random_range(0.1..20.0);
        let z: Vec<f64> = gaussian(&mut rng, n).into_iter().map(|v| v * scale).collect();
        let y = rng.random_range(0..n);
        let g = softmax_ce_loss(&z, y).map_err(|e| e.to_string())?.grad_logits;
        let fd = central_diff(&z, h, |p| softmax_ce_loss(p, y).expect("valid").loss);
        w_ce = w_ce.max(rel_err(&g, &fd));
    }
    for _ in 0..120 {
        let (t, d, a) = (rng.random_range(2..10), rng.random_range(1..6), rng.random_range(1..6));
        let p = AttentionParams::random(d, a, &mut rng);
        let hf = Frames::new(gaussian(&mut rng, t * d), t, d).map_err(|e| e.to_string())?;
        let g = gaussian(&mut rng, 2 * d);
        let grads = attentive_stats_pool(&hf, &p).and_then(|f| f.backward(&hf, &p, &g)).map_err(|e| e.to_string())?;
        let objective = |h: &Frames, p: &AttentionParams| -> f64 {
            dot(&attentive_stats_pool(h, p).expect("valid").output, &g)
        };
        let fd_h = central_diff(&hf.data, h, |v| objective(&Frames::new(v.to_vec(), t, d).expect("shape"), &p));
        let fd_w = central_diff(&p.w, h, |v| objective(&hf, &AttentionParams { w: v.to_vec(), ..p.clone() }));
        let fd_b = central_diff(&p.b, h, |v| objective(&hf, &AttentionParams { b: v.to_vec(), ..p.clone() }));
        let fd_v = central_diff(&p.v, h, |v| objective(&hf, &AttentionParams { v: v.to_vec(), ..p.clone() }));
        w_pool = w_pool
            .max(rel_err(&grads.frames, &fd_h))
            .max(rel_err(&grads.w, &fd_w))
            .max(rel_err(&grads.b, &fd_b))
            .max(rel_err(&grads.v, &fd_v));
    }
    ensure(w_aam <= 1e-5 && w_ce <= 1e-5 && w_pool <= 1e-5, || {
        format!("relative errors aam {w_aam:.2e}, ce {w_ce:.2e}, pool {w_pool:.2e}")
    })?;
    Ok(format!("120 instances each; max rel err aam {w_aam:.1e}, ce {w_ce:.1e}, pool {w_pool:.1e}"))
}

// ---------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let (mut d_margin, mut d_k1, mut d_msa) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (d, n, k) = (rng.random_range(2..16), rng.random_range(2..10), rng.random_range(1..4));
        let w = SubcenterWeights::random(d, n, k, rng.random()).map_err(|e| e.to_string())?;
        let x = unit(&gaussian(&mut rng, d));
        let y = rng.random_range(0..n);
        let s = rng.random_range(1.0..64.0);
        let aam = aam_softmax_loss(&x, y, &w, &LossConfig::new(s, 0.0).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let (cos, _) = subcenter_cosines(&x, &w).map_err(|e| e.to_string())?;
        let logits: Vec<f64> = cos.iter().map(|c| s * c).collect();
        let ce = softmax_ce_loss(&logits, y).map_err(|e| e.to_string())?;
        d_margin = d_margin.max((aam.loss - ce.loss).abs());

        let raw = gaussian(&mut rng, d * n);
        let w1 = SubcenterWeights::from_unnormalized(d, n, 1, raw.clone()).map_err(|e| e.to_string())?;
        let v = gaussian(&mut rng, d);
        let (c1, _) = subcenter_cosines(&unit(&v), &w1).map_err(|e| e.to_string())?;
        for (j, c) in c1.iter().enumerate() {
            let wj = &raw[j * d..(j + 1) * d];
            let plain = dot(&v, wj) / (dot(&v, &v).sqrt() * dot(wj, wj).sqrt());
            d_k1 = d_k1.max((c - plain).abs());
        }

        let a: Vec<f32> = unit(&gaussian(&mut rng, d)).iter().map(|&v| v as f32).collect();
        let b: Vec<f32> = unit(&gaussian(&mut rng, d)).iter().map(|&v| v as f32).collect();
        let segs = rng.random_range(1..8);
        let msa = msa_score(&vec![a.as_slice(); segs], &vec![b.as_slice(); segs]).map_err(|e| e.to_string())?;
        d_msa = d_msa.max((msa - cosine_score(&a, &b).map_err(|e| e.to_string())?).abs());
    }
    ensure(d_margin <= 1e-12, || format!("m=0 deviation {d_margin:e}"))?;
    ensure(d_k1 <= 1e-12, || format!("K=1 deviation {d_k1:e}"))?;
    ensure(d_msa <= 1e-12, || format!("identical-segment MSA deviation {d_msa:e}"))?;
    Ok(format!("m=0 {d_margin:.1e}, K=1 {d_k1:.1e}, MSA {d_msa:.1e}"))
}

// ---------------------------------------------------------------------------

fn random_store(rng: &mut ChaCha8Rng, prefix: &str, n: usize, dim: usize) -> EmbeddingStore {
    let mut store = EmbeddingStore::new(dim);
    for i in 0..n {
        let v: Vec<f32> = unit(&gaussian(rng, dim)).iter().map(|&x| x as f32).collect();
        store.push(format!("{prefix}{i}"), &v).expect("unique ids");
    }
    store
}

fn brute_asnorm(e: &[f32], t: &[f32], cohort: &[Vec<f32>], k: usize) -> f64 {
    let stats = |x: &[f32]| {
        let mut s: Vec<f64> = cohort.iter().map(|c| dot_f32(x, c)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let mean = s[..k].iter().sum::<f64>() / k as f64;
        let var = s[..k].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        (mean, var.sqrt())
    };
    let raw = dot_f32(e, t);
    let ((me, se), (mt, st)) = (stats(e), stats(t));
    ((raw - me) / se + (raw - mt) / st) / 2.0
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let dim = 64;
    let store = random_store(&mut rng, "utt", 40, dim);
    let cohort = random_store(&mut rng, "coh", 200, dim);
    let trials: Vec<Trial> = (0..50)
        .map(|_| {
            let (a, b) = (rng.random_range(0..40), rng.random_range(0..40));
            Trial::new(format!("utt{a}"), format!("utt{b}"), None).expect("valid ids")
        })
        .collect();
    let list = TrialList::new(trials).map_err(|e| e.to_string())?;
    let set = score_trials(&list, &store, &ScoringMode::AsNorm { cohort: &cohort, top_k: 100 }).map_err(|e| e.to_string())?;
    let cohort_vecs: Vec<Vec<f32>> = cohort.iter().map(|(_, v)| v.to_vec()).collect();
    let mut worst = 0.0f64;
    for (t, s) in list.iter().zip(set.scores()) {
        let o = brute_asnorm(store.get(&t.enroll).expect("id"), store.get(&t.test).expect("id"), &cohort_vecs, 100);
        worst = worst.max((s - o).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("50 trials, 200-vector cohort, top-100, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(100..20_000);
        let amp = rng.random_range(0.01..1.0);
        let signal = Waveform::new(gaussian(&mut rng, len).iter().map(|v| amp * v).collect(), 16000).map_err(|e| e.to_string())?;
        let noise_len = rng.random_range(50..30_000);
        let noise = Waveform::new(gaussian(&mut rng, noise_len), 16000).map_err(|e| e.to_string())?;
        let snr = rng.random_range(0.0..=20.0);
        let out = mix_at_snr(&signal, &noise, snr).map_err(|e| e.to_string())?;
        ensure(out.len() == len, || "mixed length changed".into())?;
        let ps = signal.samples().iter().map(|v| v * v).sum::<f64>() / len as f64;
        let pa = out.samples().iter().zip(signal.samples()).map(|(o, s)| (o - s) * (o - s)).sum::<f64>() / len as f64;
        worst = worst.max((10.0 * (ps / pa).log10() - snr).abs());
    }
    ensure(worst <= 1e-6, || format!("SNR deviation {worst:e} dB"))?;
    let mut combos = 0;
    for len in (1..=64).chain([99, 100, 101, 1_000, 16_000, 16_001, 48_123]) {
        let w = Waveform::new((0..len).map(|i| (i as f64 * 0.01).sin()).collect(), 16000).map_err(|e| e.to_string())?;
        for f in SPEED_FACTORS {
            let out = speed_perturb(&w, f).map_err(|e| e.to_string())?;
            let expected = (len as f64 / f).round() as usize;
            ensure(out.len() == expected, || format!("len {len} factor {f}: got {} want {expected}", out.len()))?;
            combos += 1;
        }
    }
    Ok(format!("100 SNR triples within {worst:.1e} dB; {combos} speed/length combinations"))
}

// ---------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    for cycle0 in [1u64, 7, 100, 1_000, 12_345] {
        let cfg = CosineRestartConfig::stage_one(cycle0);
        ensure(lr_at(&cfg, 0) == (0.02, 0), || format!("cycle0 {cycle0}: step 0 gives {:?}", lr_at(&cfg, 0)))?;
        let (lr1, c1) = lr_at(&cfg, cycle0);
        ensure(c1 == 1 && (lr1 - 0.016).abs() <= 1e-15, || format!("cycle-1 start gives {lr1} in cycle {c1}"))?;
        for c in 0..=10u32 {
            let start = cycle0 * ((1u64 << c) - 1);
            ensure(cfg.cycle_bounds(c).0 == start, || format!("cycle {c} starts at {:?}", cfg.cycle_bounds(c)))?;
            ensure(lr_at(&cfg, start).1 == u64::from(c), || format!("step {start} not in cycle {c}"))?;
            if start > 0 {
                ensure(lr_at(&cfg, start - 1).1 == u64::from(c) - 1, || format!("step {} not in cycle {}", start - 1, c - 1))?;
            }
        }
    }
    let cfg = CosineRestartConfig::stage_one(1_000);
    for c in 0..5 {
        let end = lr_in_cycle(&cfg, c, 1.0);
        ensure((end - 5e-6).abs() <= 1e-18, || format!("end of cycle {c}: {end}"))?;
    }
    let long = CosineRestartConfig::stage_one(1 << 40);
    let near_end = lr_at(&long, (1 << 40) - 1).0;
    ensure((near_end - 5e-6).abs() <= 1e-12, || format!("last step of a long cycle: {near_end}"))?;
    let lmf = CosineRestartConfig::large_margin_finetune();
    for r in 0..5u64 {
        ensure(lr_at(&lmf, r * 11_000) == (1e-4, r), || format!("fine-tune restart {r}: {:?}", lr_at(&lmf, r * 11_000)))?;
    }
    Ok("peaks 0.02 / 0.016, floor 5e-6, boundaries cycle0*(2^c-1) for c <= 10, fine-tune restarts every 11000".into())
}

// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let expected = [
        ("ResNet34-st1112", [(80, 600), (40, 600), (20, 600), (10, 300)]),
        ("ResNet34-st1121", [(80, 600), (40, 600), (20, 300), (10, 300)]),
        ("ResNet101", [(80, 600), (40, 300), (20, 150), (10, 75)]),
    ];
    for (name, shapes) in expected {
        let v: StrideVariant = name.parse().map_err(|e: svkit::model::ModelError| e.to_string())?;
        let got = plan_shapes(v, (80, 600)).map_err(|e| e.to_string())?;
        ensure(got == shapes, || format!("{name}: {got:?}"))?;
    }
    let out = run_cli(&["shapes", "ResNet34-st1112", "--frames", "600"])?;
    ensure(out == "stage1 80 600\nstage2 40 600\nstage3 20 600\nstage4 10 300\n", || format!("CLI printed {out:?}"))?;
    Ok("3 variants exact, CLI agrees".into())
}

// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_svkit")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("svkit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn cli_eer(dir: &Path, trials: &Path, scores: &str) -> Result<f64, String> {
    let path = dir.join(scores);
    let out = run_cli(&["evaluate", "--trials", &trials.display().to_string(), "--scores", &path.display().to_string()])?;
    let line = out.lines().find(|l| l.starts_with("EER(%)")).ok_or("no EER line")?;
    line.split_whitespace().nth(1).ok_or("no EER value")?.parse::<f64>().map_err(|e| e.to_string())
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dim = 512;
    let store = speaker_embeddings("spk", 50, 20, dim, 0.1, 8008);
    let cohort = speaker_embeddings("coh", 250, 1, dim, 0.1, 8009);
    let trials = random_trials(&group_by_speaker(&store), 5000, 8010);
    let (emb, coh, tri) = (dir.path().join("emb.bin"), dir.path().join("cohort.bin"), dir.path().join("trials.txt"));
    std::fs::write(&emb, store.to_bytes()).map_err(|e| e.to_string())?;
    std::fs::write(&coh, cohort.to_bytes()).map_err(|e| e.to_string())?;
    std::fs::write(&tri, serialize_trials(&trials)).map_err(|e| e.to_string())?;
    let s = |p: &Path| p.display().to_string();

    let raw = run_cli(&["score", "--trials", &s(&tri), "--embeddings", &s(&emb)])?;
    std::fs::write(dir.path().join("raw.txt"), raw).map_err(|e| e.to_string())?;
    let norm = run_cli(&["score", "--trials", &s(&tri), "--embeddings", &s(&emb), "--asnorm", "--cohort", &s(&coh), "--topk", "100"])?;
    std::fs::write(dir.path().join("asnorm.txt"), norm).map_err(|e| e.to_string())?;
    let eer_raw = cli_eer(dir.path(), &tri, "raw.txt")?;
    let eer_norm = cli_eer(dir.path(), &tri, "asnorm.txt")?;

    // Oracle straight from the vectors: f64 dot products and the sweep above.
    let labels: Vec<bool> = trials.iter().map(|t| t.label == Some(true)).collect();
    let direct: Vec<f64> = trials
        .iter()
        .map(|t| dot_f32(store.get(&t.enroll).expect("id"), store.get(&t.test).expect("id")))
        .collect();
    let oracle = sweep_oracle(&direct, &labels, &DcfConfig::default()).eer_percent;
    ensure((eer_raw - oracle).abs() <= 0.1, || format!("pipeline EER {eer_raw} vs oracle {oracle}"))?;
    ensure(eer_norm <= eer_raw + 0.5, || format!("AS-Norm EER {eer_norm} vs raw {eer_raw}"))?;
    ensure(oracle > 0.0, || "synthetic set is trivially separable".into())?;
    Ok(format!("raw EER {eer_raw}% (oracle {oracle:.6}%), AS-Norm EER {eer_norm}%"))
}

// ---------------------------------------------------------------------------

fn mean_log_loss(z: &[f64], y: &[bool]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&v, &l)| {
            let t = if l { -v } else { v };
            t.max(0.0) + (-t.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / z.len() as f64
}

/// Unregularized two-parameter (scale, bias) logistic calibration by plain Newton.
fn calibrated_loss(s: &[f64], y: &[bool]) -> f64 {
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &l) in s.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(a * x + b)).exp());
            let r = p - if l { 1.0 } else { 0.0 };
            ga += r * x;
            gb += r;
            let w = p * (1.0 - p);
            haa += w * x * x;
            hab += w * x;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det);
        let before = mean_log_loss(&s.iter().map(|x| a * x + b).collect::<Vec<_>>(), y);
        let mut step = 1.0;
        while step > 1e-12 {
            let (na, nb) = (a - step * da, b - step * db);
            if mean_log_loss(&s.iter().map(|x| na * x + nb).collect::<Vec<_>>(), y) <= before {
                a = na;
                b = nb;
                break;
            }
            step /= 2.0;
        }
        if ga.abs().max(gb.abs()) / s.len() as f64 <= 1e-13 {
            break;
        }
    }
    mean_log_loss(&s.iter().map(|x| a * x + b).collect::<Vec<_>>(), y)
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9009);
    let mut margin = f64::NEG_INFINITY;
    for _ in 0..20 {
        let n = rng.random_range(200..2000);
        let k = rng.random_range(2..6);
        let prior = rng.random_range(0.2..0.6);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(prior)).collect();
        let shared = gaussian(&mut rng, n);
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let gap = rng.random_range(0.2..2.5);
                let (scale, shift) = (rng.random_range(0.1..5.0), rng.random_range(-3.0..3.0));
                let rho = rng.random_range(0.0..0.8);
                labels
                    .iter()
                    .zip(&shared)
                    .map(|(&l, &c)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * (rho * c + (1.0 - rho) * z + if l { gap } else { 0.0 }) + shift
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let m = ScoreMatrix::from_columns(&refs).map_err(|e| e.to_string())?;
        let model = fit_fusion(&m, &labels, 0.0).map_err(|e| e.to_string())?;
        let fused = mean_log_loss(&fuse(&model, &m).map_err(|e| e.to_string())?, &labels);
        for c in &cols {
            let single = calibrated_loss(c, &labels);
            ensure(fused <= single + 1e-9, || format!("fused {fused} > calibrated single {single}"))?;
            margin = margin.max(fused - single);
        }
    }
    Ok(format!("20 problems; worst fused minus best-calibrated single {margin:.2e}"))
}

// ---------------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (name, extra) in [("raw", ""), ("msa", "scoring = \"msa\"\nmsa_segment_secs = 0.5\n")] {
        let cfg = dir.path().join(format!("{name}.toml"));
        let text = format!(
            "seed = 77\nembed_dim = 128\nsynth_speakers = 4\nsynth_utterances = 3\nsynth_min_secs = 0.8\nsynth_max_secs = 1.5\nsynth_trials = 40\n{extra}"
        );
        std::fs::write(&cfg, text).map_err(|e| e.to_string())?;
        let (a, b) = (dir.path().join(format!("{name}-a")), dir.path().join(format!("{name}-b")));
        run_cli(&["pipeline", "--config", &cfg.display().to_string(), "--out", &a.display().to_string()])?;
        run_cli(&["--threads", "2", "pipeline", "--config", &cfg.display().to_string(), "--out", &b.display().to_string()])?;
        for file in ["embeddings.bin", "scores.txt", "trials.txt", "metrics.txt"] {
            let x = std::fs::read(a.join(file)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.join(file)).map_err(|e| e.to_string())?;
            ensure(!x.is_empty() && x == y, || format!("{name}/{file} differs between runs"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} artifacts byte-identical across runs and thread counts"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("metric oracle equivalence", criterion_1, Duration::from_secs(60)),
        ("gradient correctness", criterion_2, Duration::from_secs(30)),
        ("reduction identities", criterion_3, Duration::MAX),
        ("AS-Norm oracle", criterion_4, Duration::MAX),
        ("SNR fidelity and speed-perturb lengths", criterion_5, Duration::MAX),
        ("schedule values", criterion_6, Duration::MAX),
        ("shape planner", criterion_7, Duration::MAX),
        ("end-to-end synthetic verification", criterion_8, Duration::from_secs(120)),
        ("fusion dominance", criterion_9, Duration::MAX),
        ("reproducibility", criterion_10, Duration::MAX),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|d| {
            if elapsed > *budget {
                Err(format!("took {:.1}s, budget {}s ({d})", elapsed.as_secs_f64(), budget.as_secs()))
            } else {
                Ok(d)
            }
        });
        match result {
            Ok(detail) => println!("PASS  {:>2}. {name} [{:.2}s] {detail}", i + 1, elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2}. {name} [{:.2}s] {detail}", i + 1, elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
