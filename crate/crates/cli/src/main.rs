use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use amhnet::agcrf::GateSign;
use amhnet::datagen::{self, DatasetSpec};
use amhnet::evalkit::{self, ContourMap, EvalOptions, Mask, DEFAULT_TOLERANCE};
use amhnet::kv::KvMap;
use amhnet::mhnet::{checkpoint, Ablation, Model, ModelConfig};
use amhnet::oracle::{self, ModelGradCheck, OracleReport};
use amhnet::train::{self, JsonLines, Quiet, TrainConfig, TrainObserver};

#[derive(Parser)]
#[command(name = "amhnet", version, about = "Attention-gated multi-scale contour detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic train/test dataset as PGM files plus manifests.
    Generate {
        /// Dataset settings (key=value).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a manifest and write a checkpoint.
    Train {
        /// Model and training settings (key=value).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        variant: Option<Ablation>,
        #[arg(long)]
        sign: Option<GateSign>,
        /// Per-iteration metrics as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write per-head and fused contour maps for one image or a manifest.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        image: Option<PathBuf>,
        /// Writes only the fused map of each listed image, named after it.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write PNG copies.
        #[arg(long)]
        png: bool,
    },
    /// Score predicted maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Matching radius as a fraction of the image diagonal.
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = 99)]
        thresholds: usize,
        #[arg(long)]
        no_nms: bool,
        /// Write the result and PR curve as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run oracle suites and print a pass/fail table.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Write every report as a JSON line.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn read_kv(path: Option<&Path>) -> Result<KvMap> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(KvMap::parse(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(KvMap::default()),
    }
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = DatasetSpec::from_kv(&read_kv(config)?)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (train, test) = spec.generate()?;
    let a = datagen::write_dataset(out, "train", &train)?;
    let b = datagen::write_dataset(out, "test", &test)?;
    println!("{} train samples -> {}", train.len(), a.display());
    println!("{} test samples -> {}", test.len(), b.display());
    Ok(())
}

struct Checkpointing<'a, O> {
    inner: O,
    out: &'a Path,
}

impl<O: TrainObserver> TrainObserver for Checkpointing<'_, O> {
    fn on_iteration(&mut self, m: &train::IterationMetrics) -> amhnet::error::Result<()> {
        self.inner.on_iteration(m)
    }

    fn on_checkpoint(&mut self, _iteration: usize, model: &Model) -> amhnet::error::Result<()> {
        checkpoint::save(self.out, model)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<&Path>,
    manifest: &Path,
    out: &Path,
    seed: Option<u64>,
    iters: Option<usize>,
    variant: Option<Ablation>,
    sign: Option<GateSign>,
    log: Option<&Path>,
) -> Result<()> {
    let kv = read_kv(config)?;
    let keys: Vec<&str> = ModelConfig::KEYS.iter().chain(TrainConfig::KEYS).copied().collect();
    kv.check_keys(&keys)?;
    let mut mc = ModelConfig::from_kv(&kv)?;
    let mut tc = TrainConfig::from_kv(&kv)?;
    if let Some(s) = seed {
        mc.seed = s;
        tc.seed = s;
    }
    if let Some(n) = iters {
        tc.iterations = n;
        tc.epochs = None;
    }
    if let Some(v) = variant {
        mc.ablation = v;
    }
    if let Some(s) = sign {
        mc.hierarchy.sign = s;
    }
    let data = datagen::load_manifest(manifest)
        .with_context(|| format!("loading {}", manifest.display()))?;
    let mut model = Model::new(mc)?;
    let summary = match log {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let mut obs = Checkpointing { inner: JsonLines(BufWriter::new(f)), out };
            let s = train::train_loop(&data, &mut model, &tc, &mut obs)?;
            obs.inner.0.flush()?;
            s
        }
        None => train::train_loop(&data, &mut model, &tc, &mut Checkpointing { inner: Quiet, out })?,
    };
    println!(
        "{} iterations, {} updates, final loss {:.4} -> {}",
        summary.iterations,
        summary.updates,
        summary.final_loss.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn stem(p: &Path) -> Result<String> {
    Ok(p.file_stem()
        .and_then(|s| s.to_str())
        .with_context(|| format!("no file name in {}", p.display()))?
        .to_string())
}

fn write_map(dir: &Path, name: &str, t: &amhnet::tensor::Tensor, png: bool) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.pgm"));
    datagen::save_pgm(&path, t)?;
    if png {
        datagen::save_png_gray(&dir.join(format!("{name}.png")), t)?;
    }
    Ok(path)
}

fn cmd_infer(
    ckpt: &Path,
    image: Option<&Path>,
    manifest: Option<&Path>,
    out: &Path,
    png: bool,
) -> Result<()> {
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    fs::create_dir_all(out)?;
    if let Some(img) = image {
        let p = model.predict(&datagen::load_pgm(img)?)?;
        for (i, h) in p.heads.iter().enumerate() {
            println!("{}", write_map(out, &format!("head_{}", i + 1), h, png)?.display());
        }
        println!("{}", write_map(out, "fused", &p.fused, png)?.display());
        return Ok(());
    }
    let manifest = manifest.expect("clap requires image or manifest");
    let entries = datagen::read_manifest(manifest)?;
    for e in &entries {
        let p = model.predict(&datagen::load_pgm(&e.image)?)?;
        write_map(out, &stem(&e.image)?, &p.fused, png)?;
    }
    println!("{} fused maps -> {}", entries.len(), out.display());
    Ok(())
}

/// Ground truth for `name.pgm` is `name.pgm` or `name_gt.pgm` in `gt_dir`.
fn pair_files(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut preds: Vec<PathBuf> = fs::read_dir(pred_dir)
        .with_context(|| format!("reading {}", pred_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    preds.retain(|p| p.extension().is_some_and(|x| x == "pgm"));
    preds.sort();
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let s = stem(&p)?;
        let same = gt_dir.join(format!("{s}.pgm"));
        let suffixed = gt_dir.join(format!("{s}_gt.pgm"));
        if same.is_file() {
            out.push((p, same));
        } else if suffixed.is_file() {
            out.push((p, suffixed));
        } else {
            bail!("no ground truth for {} in {}", p.display(), gt_dir.display());
        }
    }
    if out.is_empty() {
        bail!("no .pgm predictions in {}", pred_dir.display());
    }
    Ok(out)
}

fn cmd_eval(pred: &Path, gt: &Path, opts: EvalOptions, json: Option<&Path>) -> Result<()> {
    if !(opts.tol_frac > 0.0 && opts.tol_frac.is_finite()) {
        bail!("--tol must be positive, got {}", opts.tol_frac);
    }
    let mut data = Vec::new();
    for (p, g) in pair_files(pred, gt)? {
        let map = ContourMap::from_tensor(&datagen::load_pgm(&p)?)
            .with_context(|| format!("reading {}", p.display()))?;
        let mask = Mask::from_tensor(&datagen::load_pgm(&g)?)
            .with_context(|| format!("reading {}", g.display()))?;
        data.push((map, mask));
    }
    let r = evalkit::evaluate(&data, &opts)?;
    print!("{}", r.table());
    if let Some(path) = json {
        fs::write(path, r.to_json())?;
    }
    Ok(())
}

/// Instances per suite for `verify all`: each suite is capped so the whole
/// run stays in the minute range.
fn suite_instances(name: &str, requested: usize) -> usize {
    match name {
        "unrolled_grad" | "fixed_point" => requested.min(20),
        _ => requested,
    }
}

fn cmd_verify(suite: &str, seed: u64, instances: usize, json: Option<&Path>) -> Result<()> {
    let mut names: Vec<&str> = if suite == "all" {
        oracle::SUITES.to_vec()
    } else {
        vec![suite]
    };
    if suite == "all" {
        names.push("model_grad");
    }
    let mut sink = match json {
        Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
        None => None,
    };
    println!("{:<14} {:>7} {:>7} {:>11}  status", "suite", "checks", "failed", "worst");
    let mut failed_total = 0;
    for name in names {
        let reports: Vec<OracleReport> = if name == "model_grad" {
            let check = ModelGradCheck::new(ModelConfig::new(Ablation::Flag), seed);
            oracle::check_model_gradients(&check)?
        } else if oracle::SUITES.contains(&name) {
            oracle::run_suite(name, seed, suite_instances(name, instances))?
        } else {
            bail!("unknown suite {name:?}; expected all, model_grad or one of {:?}", oracle::SUITES);
        };
        let failed = reports.iter().filter(|r| !r.pass).count();
        let worst = reports
            .iter()
            .map(|r| if r.relative { r.rel } else { r.max_abs })
            .fold(0.0, f64::max);
        println!(
            "{:<14} {:>7} {:>7} {:>11.3e}  {}",
            name,
            reports.len(),
            failed,
            worst,
            if failed == 0 { "PASS" } else { "FAIL" }
        );
        if let Some(w) = sink.as_mut() {
            for r in &reports {
                writeln!(w, "{}", r.to_json_line())?;
            }
        }
        failed_total += failed;
    }
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    if failed_total > 0 {
        bail!("{failed_total} oracle checks failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Train {
            config,
            manifest,
            out,
            seed,
            iters,
            variant,
            sign,
            log,
        } => cmd_train(
            config.as_deref(),
            &manifest,
            &out,
            seed,
            iters,
            variant,
            sign,
            log.as_deref(),
        ),
        Command::Infer {
            checkpoint,
            image,
            manifest,
            out,
            png,
        } => cmd_infer(&checkpoint, image.as_deref(), manifest.as_deref(), &out, png),
        Command::Eval {
            pred,
            gt,
            tol,
            thresholds,
            no_nms,
            json,
        } => cmd_eval(
            &pred,
            &gt,
            EvalOptions {
                tol_frac: tol,
                n_thresholds: thresholds,
                nms: !no_nms,
            },
            json.as_deref(),
        ),
        Command::Verify {
            suite,
            seed,
            instances,
            json,
        } => cmd_verify(&suite, seed, instances, json.as_deref()),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
