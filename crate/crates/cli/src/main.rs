//! `pairedit` command line: dataset generation, training, editing,
//! ablation tables and attention heatmaps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use pairedit::backbone::{AttentionMode, EditModel};
use pairedit::datagen::{generate_pair, EditSignal, SignalKind};
use pairedit::diffusion::{euler_sample, NoiseSchedule, DEFAULT_SAMPLE_STEPS};
use pairedit::evalkit::{attention_records, export_attention_heatmap, run_ablation, AblationArm, EvalOptions};
use pairedit::formats::{encode_pgm_bytes, load_dataset, load_model, read_drag_points, read_image, save_model, write_atomic, write_image, Config, DatasetPair};
use pairedit::numerics::ParamStore;
use pairedit::train::{train, TrainingSample};

#[derive(Parser)]
#[command(name = "pairedit", version, about = "Two-frame diffusion editing on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training or evaluation set.
    GenData(GenData),
    /// Train a model on a generated dataset.
    Train(Train),
    /// Edit a source image with a trained checkpoint.
    Edit(Edit),
    /// Evaluate a grid of trained checkpoints into an ablation table.
    Ablate(Ablate),
    /// Write matching-attention heatmaps for chosen target tokens.
    VizAttn(VizAttn),
    /// Print every config key with its effective value.
    PrintConfig(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.attention_mode=temporal`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_pairs: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value = "sketch")]
    signal: SignalKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    signal: SignalKind,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Optimizer steps; defaults to `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss log; defaults to the checkpoint path with a `.log` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct Edit {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// PGM sketch, PPM coarse edit or drag text file, matching the checkpoint.
    #[arg(long)]
    signal_file: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Ablate {
    /// Evaluation dataset.
    #[arg(long)]
    data: PathBuf,
    /// Directory holding `{mode}_{recon|norecon}_seed{seed}.fpck` checkpoints.
    #[arg(long)]
    ckpt_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "temporal,crossframe,matching")]
    modes: Vec<AttentionMode>,
    /// Reconstruction settings to include: `on`, `off` or `on,off`.
    #[arg(long, value_delimiter = ',', default_value = "on", value_parser = parse_on_off)]
    recon: Vec<bool>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Machine-readable table (TSV); the text table goes to stdout.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct VizAttn {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Index of the pair whose attention is shown.
    #[arg(long, default_value_t = 0)]
    pair: usize,
    /// Target token indices, one heatmap each.
    #[arg(long, value_delimiter = ',', required = true)]
    query: Vec<usize>,
    /// Which matching layer, in forward order.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Diffusion step at which the pair is noised.
    #[arg(long, default_value_t = 300)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension {v:?} in {s:?}"));
    Ok((dim(h)?, dim(w)?))
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn gen_data(a: &GenData) -> Result<()> {
    let mut cfg = a.config.load()?;
    cfg.set("data.height", &a.size.0.to_string())?;
    cfg.set("data.width", &a.size.1.to_string())?;
    let data = cfg.data_config()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if fs::read_dir(&a.out)?.any(|e| e.map(|e| e.file_name().to_string_lossy().starts_with("pair_")).unwrap_or(false)) {
        bail!("{} already holds pair directories", a.out.display());
    }
    for i in 0..a.num_pairs {
        let pair = generate_pair(&data, a.seed, i, a.signal).with_context(|| format!("generating pair {i}"))?;
        pairedit::formats::write_pair(&a.out, &DatasetPair::from_sample(&pair, &data.token_strides))?;
    }
    eprintln!("wrote {} {} pairs to {}", a.num_pairs, a.signal, a.out.display());
    Ok(())
}

/// Loads a dataset and sizes the model config to its images.
fn load_samples(dir: &Path, signal: Option<SignalKind>, cfg: &mut Config) -> Result<Vec<DatasetPair>> {
    let pairs = load_dataset(dir, signal)?;
    cfg.set("data.height", &pairs[0].source.height.to_string())?;
    cfg.set("data.width", &pairs[0].source.width.to_string())?;
    Ok(pairs)
}

fn training_samples(pairs: &[DatasetPair], model: &EditModel) -> Result<Vec<TrainingSample>> {
    let b = model.backbone();
    let needed = b.attention_strides();
    pairs
        .iter()
        .map(|p| {
            if (p.source.height, p.source.width) != (b.image_height, b.image_width) {
                bail!("pair {} is {}x{}, the model takes {}x{}", p.meta.index, p.source.height, p.source.width, b.image_height, b.image_width);
            }
            if let Some(s) = needed.iter().find(|s| !p.strides.contains(s)) {
                bail!("pair {} has no correspondence at token stride {s}", p.meta.index);
            }
            Ok(p.training_sample(b.patch)?)
        })
        .collect()
}

/// Writes lines to a sibling temp file and renames it into place on
/// `finish`, so the log is never left half-written under its final name.
struct StreamedFile {
    tmp: PathBuf,
    path: PathBuf,
    out: BufWriter<File>,
}

impl StreamedFile {
    fn create(path: &Path) -> Result<Self> {
        let name = path.file_name().ok_or_else(|| anyhow!("{} is not a file path", path.display()))?;
        let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        let out = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        Ok(Self { tmp, path: path.to_owned(), out })
    }

    fn line(&mut self, s: &str) -> std::io::Result<()> {
        writeln!(self.out, "{s}")?;
        self.out.flush()
    }

    fn finish(self) -> Result<()> {
        let file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&self.tmp, &self.path)?;
        Ok(())
    }
}

fn cmd_train(a: &Train) -> Result<()> {
    let mut cfg = a.config.load()?;
    let pairs = load_samples(&a.data, Some(a.signal), &mut cfg)?;
    let mc = cfg.model_config(a.signal)?;
    let mut tc = cfg.train_config()?;
    if let Some(k) = a.steps {
        tc.steps = k;
    }
    tc.seed = a.seed;
    let (model, mut store) = EditModel::init(&mc, a.seed)?;
    let samples = training_samples(&pairs, &model)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.ckpt_out.with_extension("log"));
    let mut log = StreamedFile::create(&log_path)?;
    log.line(&format!(
        "# step l_diff l_match l_total | lambda_match={:?} reconstruct_source={} mode={} signal={} steps={} seed={} pairs={}",
        tc.lambda_match,
        tc.reconstruct_source,
        mc.backbone.attention_mode,
        mc.signal,
        tc.steps,
        tc.seed,
        samples.len()
    ))?;
    let every = (tc.steps / 20).max(1);
    train(&model, &mut store, &samples, &tc, |step, r| {
        log.line(&format!("{step} {:.6e} {:.6e} {:.6e}", r.l_diff, r.l_match, r.l_total))?;
        if step % every == 0 || step + 1 == tc.steps {
            eprintln!("step {step:>6}  l_diff {:.4}  l_match {:.4}  l_total {:.4}", r.l_diff, r.l_match, r.l_total);
        }
        Ok(())
    })?;
    save_model(&a.ckpt_out, &mc, &store)?;
    log.finish()?;
    eprintln!("saved {} (log {})", a.ckpt_out.display(), log_path.display());
    Ok(())
}

fn read_signal(path: &Path, kind: SignalKind, width: usize, height: usize) -> Result<EditSignal> {
    let signal = match kind {
        SignalKind::Drag => EditSignal::Drag(read_drag_points(path, width, height)?),
        SignalKind::Sketch | SignalKind::Coarse => {
            let img = read_image(path)?;
            ensure!(Some(img.channels) == kind.raster_channels(), "{} has {} channel(s); the checkpoint expects a {kind} signal", path.display(), img.channels);
            if kind == SignalKind::Sketch {
                EditSignal::Sketch(img)
            } else {
                EditSignal::Coarse(img)
            }
        }
    };
    Ok(signal)
}

fn cmd_edit(a: &Edit) -> Result<()> {
    let (model, store) = load_model(&a.ckpt)?;
    let source = read_image(&a.source)?;
    ensure!(source.channels == 3, "{} is not an RGB image", a.source.display());
    let signal = read_signal(&a.signal_file, model.config().signal, source.width, source.height)?;
    let schedule = NoiseSchedule::cosine(EvalOptions::default().diffusion_steps)?;
    let out = euler_sample(&model, &store, &schedule, &source, &signal, a.steps, a.seed)?;
    write_image(&a.out, &out)?;
    Ok(())
}

fn cmd_ablate(a: &Ablate) -> Result<()> {
    let mut cfg = a.config.load()?;
    let pairs = load_samples(&a.data, None, &mut cfg)?;
    let opts = EvalOptions { seed: a.eval_seed, ..cfg.eval_options()? };
    let arms: Vec<AblationArm> = a.recon.iter().flat_map(|&r| a.modes.iter().map(move |&m| AblationArm::new(m, r))).collect();
    // every checkpoint shares the eval set, so the first one sizes it
    let first = a.ckpt_dir.join(arms.first().ok_or_else(|| anyhow!("no ablation arms"))?.checkpoint_name(*a.seeds.first().ok_or_else(|| anyhow!("no seeds"))?));
    let (model, _) = load_model(&first).with_context(|| format!("loading {}", first.display()))?;
    let samples = training_samples(&pairs, &model)?;
    let table = run_ablation(&a.ckpt_dir, &samples, &arms, &a.seeds, &opts)?;
    write_atomic(&a.out, table.to_tsv().as_bytes())?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_viz_attn(a: &VizAttn) -> Result<()> {
    let (model, store): (EditModel, ParamStore<f32>) = load_model(&a.ckpt)?;
    ensure!(model.backbone().attention_mode == AttentionMode::Matching, "{} has no matching attention to show", a.ckpt.display());
    let pairs = load_dataset(&a.data, Some(model.config().signal))?;
    let pair = pairs.get(a.pair).ok_or_else(|| anyhow!("pair {} of {}", a.pair, pairs.len()))?;
    let sample = training_samples(std::slice::from_ref(pair), &model)?.remove(0);
    let schedule = NoiseSchedule::cosine(EvalOptions::default().diffusion_steps)?;
    let records = attention_records(&model, &store, &schedule, &sample, a.t, a.seed)?;
    let record = records.get(a.layer).ok_or_else(|| anyhow!("layer {} of {}", a.layer, records.len()))?;
    fs::create_dir_all(&a.out_dir)?;
    for &q in &a.query {
        let hm = export_attention_heatmap(record, q, sample.source.height, sample.source.width)?;
        let path = a.out_dir.join(format!("attn_{}_q{q}.pgm", record.layer_id.replace('.', "_")));
        write_atomic(&path, &encode_pgm_bytes(&hm))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Edit(a) => cmd_edit(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::VizAttn(a) => cmd_viz_attn(&a),
        Command::PrintConfig(a) => {
            print!("{}", a.load()?.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
