use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use bsa::assembly::{generate_dataset, random_template, TemplateConfig};
use bsa::cil_engine::{run_stream, CilConfig, CilData, CilModel, InferenceRule};
use bsa::dataset_io::{make_task_stream, read_dataset, write_dataset, Dataset, Manifest, Split};
use bsa::encoder::EncoderConfig;
use bsa::eval_bench::{make_desk_benchmark, naive_baseline, render_svg, rows_from_stream, summarize, DeskConfig, ReportConfig, RunReport};
use bsa::geometry::{build_shape_pool, PoolConfig};
use bsa::numerics::checkpoint;
use bsa::numerics::ParamStore;
use bsa::pointops::group_dataset;
use bsa::rng;
use bsa::tokenizer_pretrain::{fit_codebook, pretrain, tokenize, PretrainConfig, PretrainModel, Pretrained};

#[derive(Parser, Debug)]
#[command(name = "bsa", version, about = "Synthetic shape assemblies, masked pre-training and class-incremental runs")]
struct Cli {
    /// Seed; defaults to 0 for gen/pretrain and 1993 for cil.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Primary output path of the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation and data preparation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a dataset file and manifest.
    Gen(GenArgs),
    /// Fit the codebook and run masked pre-training.
    Pretrain(PretrainArgs),
    /// Run a class-incremental stream.
    Cil(CilArgs),
    /// Print last and average accuracy of reports.
    Eval(EvalArgs),
    /// Render reports as an SVG accuracy chart.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long, default_value_t = 60, value_parser = clap::value_parser!(u32).range(1..))]
    templates: u32,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u32).range(1..))]
    samples: u32,
    #[arg(long, default_value_t = 1024, value_parser = clap::value_parser!(u32).range(1..))]
    points: u32,
    /// Id of the first template.
    #[arg(long, default_value_t = 0)]
    first_id: u32,
    /// Split recorded in the manifest; train and test draw different samples.
    #[arg(long, value_enum, default_value = "pretrain")]
    split: SplitArg,
    /// Write the desk benchmark (pretrain, train, test) into the --out directory instead.
    #[arg(long)]
    desk_benchmark: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Pretrain,
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Pretrain => Split::Pretrain,
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EncoderArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    ff_dim: usize,
    #[arg(long, default_value_t = 16)]
    bottleneck: usize,
    #[arg(long, default_value_t = 64)]
    groups: usize,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
}

impl EncoderArgs {
    fn config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            bottleneck: self.bottleneck,
            groups: self.groups,
            group_size: self.group_size,
            ..EncoderConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.4)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 64)]
    codebook: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Continue from this checkpoint; its config hash must match.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args, Debug, Serialize)]
struct CilArgs {
    /// Training dataset; the test set is given with --test.
    #[arg(long, conflicts_with = "desk_benchmark", requires = "test")]
    data: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Use the generated desk benchmark stream.
    #[arg(long)]
    desk_benchmark: bool,
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long, default_value_t = 3)]
    increment: usize,
    /// Size of the last task, when it differs.
    #[arg(long)]
    last_increment: Option<usize>,
    /// Exemplars per class; 0 runs exemplar-free.
    #[arg(long, default_value_t = 0)]
    exemplars: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    l2_weight: f64,
    /// Classify with classifier logits instead of prototypes.
    #[arg(long)]
    classifier_inference: bool,
    /// Also run the naive fine-tuning baseline.
    #[arg(long)]
    baseline: bool,
    /// Report path (same as --out).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    report: Vec<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PlotArgs {
    #[arg(long, required = true, num_args = 1..)]
    report: Vec<PathBuf>,
    /// SVG path (same as --out).
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn banner(name: &str, config: &impl Serialize) {
    let json = serde_json::to_string(config).expect("config serializes");
    let hash = hex::encode(&Sha256::digest(json.as_bytes())[..8]);
    eprintln!("bsa {name} [config {hash}] {json}");
}

fn out_path(cli_out: &Option<PathBuf>, alt: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    alt.clone().or_else(|| cli_out.clone()).with_context(|| format!("missing --out for the {what}"))
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize> {
    seed: u64,
    out: Option<&'a Path>,
    threads: Option<usize>,
    args: &'a A,
}

fn cmd_gen(a: &GenArgs, seed: u64, out: &Path) -> Result<()> {
    if a.desk_benchmark {
        let desk = make_desk_benchmark(seed, &DeskConfig::default())?;
        std::fs::create_dir_all(out)?;
        for (name, ds) in [("pretrain", &desk.pretrain), ("train", &desk.train), ("test", &desk.test)] {
            write_dataset(ds, &out.join(format!("{name}.bsa")))?;
            eprintln!("wrote {} samples to {}", ds.len(), out.join(format!("{name}.bsa")).display());
        }
        return Ok(());
    }
    let pool = build_shape_pool(&PoolConfig::default(), rng::derive(seed, &[1]))?;
    let ids: Vec<u32> = (a.first_id..a.first_id + a.templates).collect();
    let tcfg = TemplateConfig::default();
    let templates = ids.iter().map(|&id| random_template(id, &tcfg, rng::derive(seed, &[2]))).collect::<bsa::Result<Vec<_>>>()?;
    let split_path = a.split as u64;
    let set = generate_dataset(&templates, &pool, a.samples as usize, a.points as usize, rng::derive(seed, &[3, split_path]))?;
    let labels = set.labels.iter().map(|l| l - a.first_id).collect();
    let manifest = Manifest {
        name: out.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned()),
        class_count: ids.len(),
        class_names: Some(ids.iter().map(|i| format!("template-{i}")).collect()),
        split: a.split.into(),
        template_ids: Some(ids),
    };
    let ds = Dataset::from_clouds(manifest, &set.clouds, labels)?;
    write_dataset(&ds, out)?;
    eprintln!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs, seed: u64, out: &Path) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let enc = a.encoder.config();
    enc.validate()?;
    let pc = PretrainConfig {
        epochs: a.epochs,
        mask_ratio: a.mask_ratio,
        lr: a.lr,
        batch_size: a.batch,
        codebook_size: a.codebook,
        seed,
        ..PretrainConfig::default()
    };
    pc.validate()?;
    eprintln!("encoder config hash {}", enc.hash());
    let sets = group_dataset(&ds, enc.groups, enc.group_size, rng::derive(seed, &[5]))?;
    let mut store = ParamStore::new();
    let model = PretrainModel::new(&mut store, enc.clone(), a.codebook, &mut rng::rng_from(seed))?;
    let codebook = match &a.resume {
        Some(path) => {
            let prev = Pretrained::load(path)?;
            if prev.config_hash != enc.hash() {
                bail!("checkpoint {} has config hash {}, requested encoder is {}", path.display(), prev.config_hash, enc.hash());
            }
            checkpoint::restore(&mut store, &prev.tensors)?;
            prev.codebook
        }
        None => fit_codebook(&sets, a.codebook, seed, pc.kmeans_descriptors)?,
    };
    let tokens = sets.iter().map(|s| tokenize(s, &codebook)).collect::<bsa::Result<Vec<_>>>()?;
    let log = pretrain(&model, &mut store, &sets, &tokens, &pc, |e| {
        eprintln!("epoch {:>3}  loss {:.4}  acc {:.4}  {:.1}s", e.epoch, e.loss, e.accuracy, e.seconds)
    })?;
    eprintln!(
        "masked loss {:.4} -> {:.4}, accuracy {:.4} -> {:.4}",
        log.initial.loss, log.last.loss, log.initial.accuracy, log.last.accuracy
    );
    let log_path = out.with_extension("log.json");
    std::fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
    Pretrained::from_model(&model, &store, codebook, Some(pc), Some(log)).save(out)?;
    eprintln!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn cmd_cil(a: &CilArgs, seed: u64, out: &Path) -> Result<()> {
    let ckpt = Pretrained::load(&a.pretrained).with_context(|| format!("loading {}", a.pretrained.display()))?;
    let enc = ckpt.config.clone();
    let (train, test) = if a.desk_benchmark {
        let desk = make_desk_benchmark(0, &DeskConfig::default())?;
        (desk.train, desk.test)
    } else {
        let (Some(tr), Some(te)) = (&a.data, &a.test) else { bail!("give --data and --test, or --desk-benchmark") };
        (read_dataset(tr)?, read_dataset(te)?)
    };
    if a.increment > train.manifest.class_count {
        bail!("increment {} exceeds the {} classes of the dataset", a.increment, train.manifest.class_count);
    }
    let stream = make_task_stream(&train, &test, a.increment, a.last_increment, seed)?;
    let cfg = CilConfig {
        exemplars: a.exemplars,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        tau: a.tau,
        l2_weight: a.l2_weight,
        seed,
        inference: if a.classifier_inference { InferenceRule::Classifier } else { InferenceRule::Prototype },
        ..CilConfig::default()
    };
    cfg.validate()?;
    let tr_sets = group_dataset(&train, enc.groups, enc.group_size, rng::derive(seed, &[6]))?;
    let te_sets = group_dataset(&test, enc.groups, enc.group_size, rng::derive(seed, &[7]))?;
    let hash = stream.content_hash(&train, &test);
    let mut model = CilModel::from_pretrained(&ckpt, &enc)?;
    let data = CilData::new(&model, &train, &test, &tr_sets, &te_sets)?;
    let res = run_stream(&mut model, &data, &stream, &cfg)?;
    let method = if cfg.exemplar_free() { "adapters-exemplar-free" } else { "adapters-exemplars" };
    let report = summarize(method, ReportConfig::new(&cfg, a.increment, &enc), hash, rows_from_stream(&res))?;
    report.save(out)?;
    eprintln!("A_B {:.4}  mean {:.4}  -> {}", report.last_accuracy, report.average_accuracy, out.display());
    if a.baseline {
        let base = naive_baseline(&ckpt, &enc, &train, &test, &tr_sets, &te_sets, &stream, &cfg)?;
        let name = out.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
        let path = out.with_file_name(format!("{name}.baseline.json"));
        base.save(&path)?;
        eprintln!("baseline A_B {:.4}  mean {:.4}  -> {}", base.last_accuracy, base.average_accuracy, path.display());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    for p in &a.report {
        let r = RunReport::load(p).with_context(|| format!("reading {}", p.display()))?;
        println!("{}: A_B={} mean={} ({})", p.display(), r.last_accuracy, r.average_accuracy, r.method);
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs, out: &Path) -> Result<()> {
    let reports = a.report.iter().map(|p| RunReport::load(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<Vec<_>>>()?;
    std::fs::write(out, render_svg(&reports))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.cmd {
        Cmd::Gen(a) => {
            let seed = cli.seed.unwrap_or(0);
            let out = out_path(&cli.out, &None, "dataset")?;
            banner("gen", &Resolved { seed, out: Some(&out), threads: cli.threads, args: a });
            cmd_gen(a, seed, &out)
        }
        Cmd::Pretrain(a) => {
            let seed = cli.seed.unwrap_or(0);
            let out = out_path(&cli.out, &None, "checkpoint")?;
            banner("pretrain", &Resolved { seed, out: Some(&out), threads: cli.threads, args: a });
            cmd_pretrain(a, seed, &out)
        }
        Cmd::Cil(a) => {
            let seed = cli.seed.unwrap_or(1993);
            let out = out_path(&cli.out, &a.report, "report")?;
            banner("cil", &Resolved { seed, out: Some(&out), threads: cli.threads, args: a });
            cmd_cil(a, seed, &out)
        }
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Plot(a) => {
            let out = out_path(&cli.out, &a.svg, "svg")?;
            cmd_plot(a, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
