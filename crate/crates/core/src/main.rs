use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use svkit::augment::{apply_policy, speed_perturb, NoiseBank};
use svkit::config::{stage_seed, PipelineConfig};
use svkit::features::{apply_cmn, read_wav, write_wav, MelExtractor};
use svkit::fusion::{fit_fusion, fuse, FusionModel, ScoreMatrix, DEFAULT_LAMBDA};
use svkit::metrics::{evaluate, DcfConfig};
use svkit::model::{plan_shapes, StrideVariant, ToyEmbedder};
use svkit::pipeline::{embed_all, format_metric, load_store, run_synthetic};
use svkit::schedule::{lr_at, CosineRestartConfig};
use svkit::scoring::{score_trials, speaker_mean_cohort, speaker_of, ScoringMode, DEFAULT_TOP_K};
use svkit::trialdata::{parse_scores, parse_trials_auto, serialize_scores, ScoreSet, TrialList};
use svkit::Error;

const LONG_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (formats: EMB1 MEL1)");

#[derive(Parser)]
#[command(name = "svkit", version = LONG_VERSION, about = "Speaker-verification evaluation toolkit")]
struct Cli {
    /// Worker threads for per-utterance and per-trial work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Log-Mel features (with CMN) of a WAV file, written as MEL1.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip cepstral mean normalization.
        #[arg(long)]
        no_cmn: bool,
    },
    /// Applies the online augmentation policy (and optionally speed perturbation) to one WAV.
    Augment {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Noise bank manifest of "category path" lines.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        speed: Option<f64>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Toy embeddings for a list of "id path" lines, written as EMB1.
    Embed {
        #[arg(long)]
        list: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Store per-segment embeddings (id#0 .. id#n-1) for MSA scoring.
        #[arg(long)]
        msa: bool,
    },
    /// Scores a trial list against an embedding store.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, requires = "cohort", conflicts_with = "msa")]
        asnorm: bool,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        topk: usize,
        /// Collapse the cohort to one mean embedding per speaker (id prefix before '/').
        #[arg(long)]
        cohort_speaker_means: bool,
        #[arg(long)]
        msa: bool,
        #[arg(long, default_value_t = svkit::scoring::MSA_SEGMENTS)]
        segments: usize,
    },
    /// EER and minDCF of a score file against labeled trials.
    Evaluate {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
    },
    /// Linear score fusion. With --fit-labels the model is trained on the
    /// labeled trials and saved to --model; otherwise --model is loaded
    /// (equal-weight average if absent).
    Fuse {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        fit_labels: bool,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Prints "step lr cycle" for steps 0..N.
    ScheduleDump {
        /// TOML with lr_max0, lr_min, decay, cycle0_steps, doubling[, fixed_period_steps].
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: u64,
    },
    /// Stage output shapes of a stride variant.
    Shapes {
        variant: String,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 80)]
        bins: usize,
    },
    /// Runs the built-in oracle checks.
    Selftest,
    /// Full pipeline on seeded synthetic audio; writes embeddings, trials, scores and metrics.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(path.display().to_string(), e))
}

fn read_trials(path: &Path) -> Result<TrialList, Error> {
    parse_trials_auto(&read_text(path)?).map_err(|e| Error::from(e).at(path))
}

fn read_scores(path: &Path, trials: &TrialList) -> Result<ScoreSet, Error> {
    let set = parse_scores(&read_text(path)?).map_err(|e| Error::from(e).at(path))?;
    set.with_trials(trials.clone()).map_err(|e| Error::from(e).at(path))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Error> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(|e| e.at(p)),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(path.display().to_string(), e))
}

fn run(cmd: Command, out: &mut impl Write) -> Result<(), Error> {
    let stdout_err = |e| Error::Io("<stdout>".into(), e);
    match cmd {
        Command::Features { wav, out: path, config, no_cmn } => {
            let cfg = load_config(config.as_deref())?;
            let w = read_wav(&wav, cfg.sample_rate)?;
            let mut f = MelExtractor::new(cfg.mel())?.compute(&w)?;
            if !no_cmn {
                f = apply_cmn(f);
            }
            let mut buf = Vec::new();
            f.write_mel1(&mut buf).expect("writing to a Vec cannot fail");
            write_file(&path, &buf)?;
            writeln!(out, "{} {}", f.n_bins(), f.n_frames()).map_err(stdout_err)?;
        }
        Command::Augment { wav, out: path, manifest, config, speed, seed } => {
            let cfg = load_config(config.as_deref())?;
            let mut w = read_wav(&wav, cfg.sample_rate)?;
            if let Some(f) = speed {
                w = speed_perturb(&w, f)?;
            }
            let bank = NoiseBank::load_manifest(&manifest, cfg.sample_rate).map_err(|e| Error::from(e).at(&manifest))?;
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed.unwrap_or(cfg.seed), "augment"));
            let (aug, applied) = apply_policy(&w, &cfg.policy(), &bank, &mut rng)?;
            write_wav(&path, &aug)?;
            let flag = |b: bool| u8::from(b);
            writeln!(
                out,
                "noise {} music {} babble {} reverb {}",
                flag(applied.noise),
                flag(applied.music),
                flag(applied.babble),
                flag(applied.reverb)
            )
            .map_err(stdout_err)?;
        }
        Command::Embed { list, out: path, config, msa } => {
            let cfg = load_config(config.as_deref())?;
            let base = list.parent().unwrap_or_else(|| Path::new("."));
            let mut items = Vec::new();
            for (i, line) in read_text(&list)?.lines().enumerate() {
                let toks: Vec<&str> = line.split_whitespace().collect();
                match toks.as_slice() {
                    [] => continue,
                    [id, wav] => items.push((id.to_string(), read_wav(&base.join(wav), cfg.sample_rate)?)),
                    _ => return Err(Error::Config(format!("line {}: expected \"id path\"", i + 1)).at(&list)),
                }
            }
            let extractor = MelExtractor::new(cfg.mel())?;
            let embedder = ToyEmbedder::new(cfg.n_mels, cfg.embed_dim, cfg.embed_seed);
            let store = embed_all(&items, &extractor, &embedder, msa.then_some((cfg.msa_segments, cfg.msa_segment_secs)))?;
            write_file(&path, &store.to_bytes())?;
            writeln!(out, "{} {}", store.len(), store.dim()).map_err(stdout_err)?;
        }
        Command::Score { trials, embeddings, asnorm, cohort, topk, cohort_speaker_means, msa, segments } => {
            let list = read_trials(&trials)?;
            let store = load_store(&embeddings)?;
            let cohort = match (asnorm, cohort) {
                (true, Some(p)) => {
                    let c = load_store(&p)?;
                    Some(if cohort_speaker_means { speaker_mean_cohort(&c, speaker_of)? } else { c })
                }
                _ => None,
            };
            let mode = match (&cohort, msa) {
                (Some(c), _) => ScoringMode::AsNorm { cohort: c, top_k: topk },
                (None, true) => ScoringMode::Msa { segments },
                (None, false) => ScoringMode::Raw,
            };
            let set = score_trials(&list, &store, &mode)?;
            out.write_all(serialize_scores(&set).as_bytes()).map_err(stdout_err)?;
        }
        Command::Evaluate { trials, scores, p_target, c_miss, c_fa } => {
            let list = read_trials(&trials)?;
            let labels = list
                .labels()
                .ok_or_else(|| Error::Config("evaluation needs a labeled trial list".into()).at(&trials))?;
            let set = read_scores(&scores, &list)?;
            let (eer, dcf) = evaluate(set.scores(), &labels, &DcfConfig { p_target, c_miss, c_fa })?;
            writeln!(out, "EER(%) {}\nminDCF {}", format_metric(eer), format_metric(dcf)).map_err(stdout_err)?;
        }
        Command::Fuse { trials, scores, fit_labels, model, lambda } => {
            let list = read_trials(&trials)?;
            let sets = scores.iter().map(|p| read_scores(p, &list)).collect::<Result<Vec<_>, _>>()?;
            let cols: Vec<&[f64]> = sets.iter().map(ScoreSet::scores).collect();
            let m = ScoreMatrix::from_columns(&cols)?;
            let fusion = if fit_labels {
                let labels = list
                    .labels()
                    .ok_or_else(|| Error::Config("--fit-labels needs a labeled trial list".into()).at(&trials))?;
                let fitted = fit_fusion(&m, &labels, lambda)?;
                eprintln!("fusion: {} Newton iterations, converged: {}", fitted.iterations, fitted.converged);
                if let Some(p) = &model {
                    write_file(p, fitted.to_text().as_bytes())?;
                }
                fitted
            } else {
                match &model {
                    Some(p) => FusionModel::from_text(&read_text(p)?).map_err(|e| Error::from(e).at(p))?,
                    None => FusionModel::average(m.n_systems()),
                }
            };
            let fused = ScoreSet::new(list, fuse(&fusion, &m)?)?;
            out.write_all(serialize_scores(&fused).as_bytes()).map_err(stdout_err)?;
        }
        Command::ScheduleDump { config, steps } => {
            let cfg: CosineRestartConfig =
                toml::from_str(&read_text(&config)?).map_err(|e| Error::Config(e.to_string()).at(&config))?;
            cfg.validate().map_err(|e| Error::from(e).at(&config))?;
            let mut text = String::new();
            for step in 0..steps {
                let (lr, cycle) = lr_at(&cfg, step);
                text.push_str(&format!("{step} {lr:e} {cycle}\n"));
            }
            out.write_all(text.as_bytes()).map_err(stdout_err)?;
        }
        Command::Shapes { .. } | Command::Selftest => unreachable!("handled before data commands"),
        Command::Pipeline { config, out: dir } => {
            let cfg = load_config(config.as_deref())?;
            let run = run_synthetic(&cfg)?;
            run.write(&dir)?;
            out.write_all(run.metrics_text().as_bytes()).map_err(stdout_err)?;
        }
    }
    Ok(())
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage_error("--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return usage_error(e);
        }
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Shapes { variant, frames, bins } => {
            let v: StrideVariant = match variant.parse() {
                Ok(v) => v,
                Err(e) => return usage_error(e),
            };
            match plan_shapes(v, (bins, frames)) {
                Ok(shapes) => {
                    for (i, (f, t)) in shapes.iter().enumerate() {
                        let _ = writeln!(out, "stage{} {f} {t}", i + 1);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => usage_error(e),
            }
        }
        Command::Selftest => {
            let checks = svkit::selftest::run_all();
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                let _ = if c.detail.is_empty() {
                    writeln!(out, "{status} {}", c.name)
                } else {
                    writeln!(out, "{status} {}: {}", c.name, c.detail)
                };
            }
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        cmd => match run(cmd, &mut out) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
