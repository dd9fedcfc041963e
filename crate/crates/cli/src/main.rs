use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use avsk::bench::{self, BenchReport, TimingConfig};
use avsk::checkpoint::{Checkpoint, RunManifest};
use avsk::features;
use avsk::model::{self, Model, ModelConfig, Prepared};
use avsk::robustness::{self, RobustnessConfig, Suite};
use avsk::train::{self, EvalMode, Trainer};
use avsk::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const SEED_ENV: &str = "AVSK_SEED";

#[derive(Parser)]
#[command(name = "avsk", version, about = "Visual and audio-visual speech recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Corpus WER of a checkpoint.
    Evaluate(EvalArgs),
    /// Forward-pass latency and memory of front-ends against batch size.
    Profile(ProfileArgs),
    /// Missing-video test suites and robustness verdicts.
    Robustness(RobustnessArgs),
    /// WER, DER and WDER of a diarization checkpoint.
    Diarize(DiarizeArgs),
    /// Generate or inspect synthetic dataset shards.
    #[command(subcommand)]
    Features(FeaturesCmd),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written for the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also checkpoint every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Suppress per-step progress.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to config.json beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// AVSK1 shard; defaults to the config's synthetic split.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Beam width; defaults to the config's decoder beam.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// vsr, avsr or ao
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, value_delimiter = ',', default_value = "lp,vit,vgg,conformer")]
    frontends: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    batches: Vec<usize>,
    #[arg(long, default_value_t = bench::MIN_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = bench::MIN_WARMUP)]
    warmup: usize,
    /// Square input side in pixels.
    #[arg(long, default_value_t = 16)]
    input_size: usize,
    #[arg(long, default_value_t = 64)]
    out_dim: usize,
    #[arg(long, default_value_t = 12)]
    clip_frames: usize,
    /// Tensor-memory cap in bytes; runs that exceed it become capacity rows.
    #[arg(long)]
    memory_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-render a report from saved JSON-lines records without timing.
    #[arg(long)]
    render_only: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Audio-only twin for the train-time check.
    #[arg(long)]
    twin: Option<PathBuf>,
    #[arg(long)]
    twin_config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "utterance,frame,start,middle,end")]
    suites: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// White-noise SNR applied to test audio.
    #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
    snr_db: f64,
    /// Leave test audio clean.
    #[arg(long)]
    clean: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiarizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum FeaturesCmd {
    /// Write a shard of synthetic examples.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        examples: usize,
        #[arg(long, default_value_t = 1)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        charset: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a shard, one line per example.
    Inspect {
        shard: PathBuf,
        /// Also write per-example stacked log-mel features as CSV.
        #[arg(long)]
        features_csv: Option<PathBuf>,
    },
}

/// Exit code 2 for usage/config problems, 3 for state mismatches.
struct Fail {
    code: u8,
    msg: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Input(_) | Error::Contract(_) | Error::Vocab { .. } | Error::Json(_) => 2,
            Error::State(_) => 3,
            _ => 1,
        };
        Fail { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail { code: 2, msg: msg.into() }
}

type Res<T> = std::result::Result<T, Fail>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Profile(a) => cmd_profile(a),
        Cmd::Robustness(a) => cmd_robustness(a),
        Cmd::Diarize(a) => cmd_diarize(a),
        Cmd::Features(c) => cmd_features(c),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn env_seed() -> Res<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| usage(format!("{SEED_ENV}: {s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Res<ModelConfig> {
    let mut cfg = ModelConfig::load(path)?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_config(cfg: &ModelConfig, path: &Path) -> Res<()> {
    let v: serde_json::Value = serde_json::from_str(&cfg.canonical_json()?).map_err(Error::from)?;
    fs::write(path, serde_json::to_string_pretty(&v).map_err(Error::from)? + "\n")?;
    Ok(())
}

fn load_model(a: &ModelArgs) -> Res<Model> {
    let cfg_path = match &a.config {
        Some(p) => p.clone(),
        None => a.checkpoint.with_file_name("config.json"),
    };
    // The saved config already carries any seed override.
    let cfg = ModelConfig::load(&cfg_path)?;
    Ok(Checkpoint::load(&a.checkpoint)?.into_model(cfg)?)
}

fn load_data(cfg: &ModelConfig, a: &DataArgs) -> Res<Vec<Prepared>> {
    let raw = match &a.data {
        Some(p) => features::load_shard(p)?,
        None => {
            let (tr, te) = train::datasets(cfg)?;
            match a.split {
                Split::Train => tr,
                Split::Test => te,
            }
        }
    };
    if raw.is_empty() {
        return Err(usage("dataset is empty"));
    }
    Ok(model::prepare_all(&raw, cfg)?)
}

fn out_dir(out: &Option<PathBuf>) -> Res<Option<&Path>> {
    if let Some(o) = out {
        fs::create_dir_all(o)?;
    }
    Ok(out.as_deref())
}

fn cmd_train(a: TrainArgs) -> Res<()> {
    let cfg = load_config(&a.config)?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::start("train", cfg.hash()?);
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_config(&cfg)?;
            let step = ck.step as usize;
            let opt = ck.opt.clone().ok_or_else(|| Fail::from(Error::State("checkpoint has no optimizer state".into())))?;
            let model = ck.into_model(cfg.clone())?;
            Trainer::resume(model, opt, step)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    write_config(&cfg, &a.out.join("config.json"))?;
    let loss_path = a.out.join("loss.csv");
    let mut loss_csv = if a.resume.is_some() && loss_path.exists() {
        fs::OpenOptions::new().append(true).open(&loss_path)?
    } else {
        let mut f = fs::File::create(&loss_path)?;
        writeln!(f, "{}", train::LOSS_CSV_HEADER)?;
        f
    };
    let ckpt_path = a.out.join("checkpoint.bin");
    let start = Instant::now();
    let total = cfg.train.steps;
    let logs = trainer.run(|log, t| {
        writeln!(loss_csv, "{}", log.csv_row())?;
        if !a.quiet && (log.step % 100 == 0 || log.step + 1 == total) {
            eprintln!("step {:>6}/{total}  loss {:.4}  lr {:.2e}", log.step + 1, log.loss, log.lr);
        }
        if a.checkpoint_every > 0 && t.step % a.checkpoint_every == 0 {
            Checkpoint::new(&t.model, Some(&t.opt), t.step as u64)?.save(&ckpt_path)?;
        }
        Ok(())
    })?;
    Checkpoint::new(&trainer.model, Some(&trainer.opt), trainer.step as u64)?.save(&ckpt_path)?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        manifest.metrics.insert("initial_loss".into(), first.loss);
        manifest.metrics.insert("final_loss".into(), last.loss);
        let clips: usize = logs.iter().map(|l| l.batch).sum();
        let masked: usize = logs.iter().map(|l| l.masked_clips).sum();
        manifest.metrics.insert("masked_clip_fraction".into(), masked as f64 / clips as f64);
    }
    manifest.metrics.insert("steps".into(), trainer.step as f64);
    manifest.metrics.insert("params".into(), trainer.model.params.numel() as f64);
    manifest.metrics.insert("train_seconds".into(), start.elapsed().as_secs_f64());
    for (k, p) in [("config", "config.json"), ("checkpoint", "checkpoint.bin"), ("loss", "loss.csv")] {
        manifest.artifacts.insert(k.into(), a.out.join(p).display().to_string());
    }
    manifest.finish();
    manifest.save(&a.out.join("manifest.json"))?;
    println!("trained {} steps; final loss {:.6}", trainer.step, logs.last().map_or(f64::NAN, |l| l.loss));
    Ok(())
}

fn cmd_evaluate(a: EvalArgs) -> Res<()> {
    let mode: EvalMode = a.mode.parse()?;
    let model = load_model(&a.model)?;
    mode.check(&model.cfg)?;
    let data = load_data(&model.cfg, &a.data)?;
    let beam = a.data.beam.unwrap_or(model.cfg.decoder.beam_width);
    let mut manifest = RunManifest::start("evaluate", model.cfg.hash()?);
    let report = train::evaluate(&model, &data, mode, beam)?;
    println!("mode={} utterances={} wer={:.6}", mode.tag(), report.utterances.len(), report.wer);
    if let Some(dir) = out_dir(&a.out)? {
        fs::write(dir.join("eval.csv"), report.csv())?;
        manifest.metrics.insert("wer".into(), report.wer);
        manifest.artifacts.insert("utterances".into(), dir.join("eval.csv").display().to_string());
        manifest.finish();
        manifest.save(&dir.join("eval.json"))?;
    }
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Res<()> {
    let report = match &a.render_only {
        Some(p) => BenchReport::from_jsonl(&fs::read_to_string(p)?)?,
        None => {
            let tc = TimingConfig {
                trials: a.trials,
                warmup: a.warmup,
                clip_frames: a.clip_frames,
                memory_limit: a.memory_limit,
                seed: a.seed,
            };
            tc.validate()?;
            let subjects = a
                .frontends
                .iter()
                .map(|f| bench::toy_subject(f, [a.input_size, a.input_size], a.out_dim, a.seed))
                .collect::<avsk::Result<Vec<_>>>()?;
            bench::compare_frontends(&subjects, &a.batches, &tc)?
        }
    };
    print!("{}", report.text());
    println!("note: latency orderings across architectures are reported, not asserted");
    if let Some(dir) = out_dir(&a.out)? {
        fs::write(dir.join("bench.csv"), report.csv())?;
        fs::write(dir.join("bench.txt"), report.text())?;
        if a.render_only.is_none() {
            fs::write(dir.join("records.jsonl"), report.jsonl()?)?;
        }
    }
    Ok(())
}

fn cmd_robustness(a: RobustnessArgs) -> Res<()> {
    let suites = a.suites.iter().map(|s| s.parse()).collect::<avsk::Result<Vec<Suite>>>()?;
    let mut rc = RobustnessConfig {
        suites,
        fractions: a.fractions.clone(),
        seeds: a.seeds.clone(),
        snr_db: (!a.clean).then_some(a.snr_db),
        beam: 0,
        audio_only: false,
    };
    rc.validate()?;
    let model = load_model(&a.model)?;
    EvalMode::Avsr.check(&model.cfg)?;
    let data = load_data(&model.cfg, &a.data)?;
    rc.beam = a.data.beam.unwrap_or(model.cfg.decoder.beam_width);
    let av = robustness::run_robustness_eval(&model, "av", &data, &rc)?;
    let mut tables = av.clone();
    let ao = match &a.twin {
        Some(ck) => {
            let twin = load_model(&ModelArgs { checkpoint: ck.clone(), config: a.twin_config.clone() })?;
            EvalMode::Ao.check(&twin.cfg)?;
            let ao = robustness::run_robustness_eval(&twin, "ao", &data, &RobustnessConfig { audio_only: true, ..rc.clone() })?;
            tables.extend(ao.iter().cloned());
            Some(ao)
        }
        None => None,
    };
    print!("{}", robustness::tables_csv(&tables));
    let verdict = |name: &str, suite: Suite, v: &robustness::Verdict| {
        if v.pass {
            println!("{name} {suite}: PASS");
        } else {
            println!("{name} {suite}: FAIL {}", v.violations.join("; "));
        }
    };
    for (i, t) in av.iter().enumerate() {
        verdict("test-time", t.suite, &robustness::check_test_time_robustness(t)?);
        if let Some(ao) = &ao {
            verdict("train-time", t.suite, &robustness::check_train_time_robustness(t, &ao[i])?);
        }
    }
    if let Some(dir) = out_dir(&a.out)? {
        fs::write(dir.join("robustness.csv"), robustness::tables_csv(&tables))?;
    }
    Ok(())
}

fn cmd_diarize(a: DiarizeArgs) -> Res<()> {
    let model = load_model(&a.model)?;
    let data = load_data(&model.cfg, &a.data)?;
    let beam = a.data.beam.unwrap_or(model.cfg.decoder.beam_width);
    let report = train::diarize_eval(&model, &data, beam)?;
    print!("{}", report.csv());
    if let Some(dir) = out_dir(&a.out)? {
        fs::write(dir.join("diarize.csv"), report.csv())?;
        fs::write(dir.join("diarize_utterances.csv"), report.utterance_csv())?;
    }
    Ok(())
}

fn cmd_features(c: FeaturesCmd) -> Res<()> {
    match c {
        FeaturesCmd::Generate { out, examples, speakers, charset, seed } => {
            let seed = env_seed()?.unwrap_or(seed);
            let data = features::synth_generate(seed, examples, speakers, charset)?;
            features::save_shard(&out, &data)?;
            println!("wrote {} examples to {}", data.len(), out.display());
        }
        FeaturesCmd::Inspect { shard, features_csv } => {
            let data = features::load_shard(&shard)?;
            let vocab = avsk::transducer::Vocab::alphabet(26)?;
            println!("index,frames,audio_frames,faces,transcript");
            let mut csv = String::new();
            for (i, ex) in data.iter().enumerate() {
                let af = features::audio_features(&ex.audio)?;
                println!("{i},{},{},{},{}", ex.frames(), af.len(), ex.face_tracks.len(), vocab.decode(&ex.transcript)?);
                if features_csv.is_some() {
                    for r in 0..af.len() {
                        let row: Vec<String> = af.frames().row(r).iter().map(|x| format!("{x:.6}")).collect();
                        csv.push_str(&format!("{i},{r},{}\n", row.join(",")));
                    }
                }
            }
            if let Some(p) = features_csv {
                fs::write(p, csv)?;
            }
        }
    }
    Ok(())
}
