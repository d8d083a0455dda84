//! `ssada` command-line tool: dataset generation, training, scoring, evaluation
//! and reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ssada::acquire::{random_scores, rank, score_map, AcquisitionScore, Strategy};
use ssada::datagen::{generate, load_image, load_label, load_manifest, DatasetSpec, Domain, Split, MANIFEST_FILE};
use ssada::error::{Error, Result};
use ssada::model::load_checkpoint;
use ssada::report::{load_runs, write_report};
use ssada::trainer::{run, ExperimentConfig, Mode, TrainerState};
use ssada::weighting::{frequency_weights, iou_weights, per_class_iou, WeightingScheme};
use ssada::LabelMap;

#[derive(Parser)]
#[command(name = "ssada", version, about = "Semi-supervised active domain adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic source/target dataset.
    Gen(GenArgs),
    /// Train one run into a run directory (resumes an unfinished run with the same config).
    Train(Box<TrainArgs>),
    /// Score images of a split with an acquisition strategy.
    Score(ScoreArgs),
    /// Class weight table from predicted and ground-truth label maps.
    Weights(WeightsArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Comparison tables and plots over finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// DatasetSpec JSON; defaults are used when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Iou,
    Frequency,
}

impl From<SchemeArg> for WeightingScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Iou => WeightingScheme::Iou,
            SchemeArg::Frequency => WeightingScheme::Frequency,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// ExperimentConfig JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// source_only | supervised_target | joint | semi_random | ss_ada
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// entropy | confidence | random
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Comma-separated trigger epochs, e.g. 20,40,60.
    #[arg(long, value_delimiter = ',')]
    triggers: Option<Vec<usize>>,
    /// Fraction of target-train images annotated across all triggers.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    init_fraction: Option<f64>,
    /// Upper bound of the class weights.
    #[arg(long)]
    u: Option<f64>,
    #[arg(long, value_enum)]
    weighting: Option<SchemeArg>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    use_semi: Option<bool>,
    #[arg(long)]
    use_active: Option<bool>,
    #[arg(long)]
    use_weighting: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    log_batches: bool,
    /// Write the resolved config to stdout and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    /// Target-domain training images.
    TargetTrain,
    /// Target-domain validation images.
    TargetVal,
    /// Source-domain images.
    Source,
}

impl SplitArg {
    fn matches(self, domain: Domain, split: Split) -> bool {
        match self {
            SplitArg::TargetTrain => domain == Domain::Target && split == Split::Train,
            SplitArg::TargetVal => domain == Domain::Target && split == Split::Val,
            SplitArg::Source => domain == Domain::Source,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::TargetTrain => "target_train",
            SplitArg::TargetVal => "target_val",
            SplitArg::Source => "source",
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "entropy")]
    strategy: Strategy,
    #[arg(long, value_enum, default_value = "target-train")]
    split: SplitArg,
    /// Seed for the random strategy.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct WeightsArgs {
    /// Directory of predicted label PNGs.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label PNGs with the same file names.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    num_classes: usize,
    #[arg(long, default_value_t = 2.0)]
    u: f64,
    #[arg(long, value_enum, default_value = "iou")]
    scheme: SchemeArg,
    /// Value of the epoch column.
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "target-val")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories containing run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn refuse_existing_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::validation(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.is_dir() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::validation(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: Some(e.line()),
        msg: e.to_string(),
    })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut spec: DatasetSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    prepare_out_dir(&a.out, a.force)?;
    let records = generate(&spec, &a.out)?;
    info!("wrote {} samples to {}", records.len(), a.out.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&a.config, a.mode) {
        (Some(p), _) => read_json(p)?,
        (None, Some(m)) => ExperimentConfig::for_mode(m),
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(m) = a.mode {
        if m != cfg.mode {
            cfg.mode = m;
            cfg.toggles = m.default_toggles();
        }
    }
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { $field = v.into(); })*
        };
    }
    set! {
        dataset => cfg.dataset,
        seed => cfg.seed,
        epochs => cfg.epochs,
        batch_size => cfg.batch_size,
        strategy => cfg.strategy,
        triggers => cfg.triggers,
        budget => cfg.budget_fraction,
        init_fraction => cfg.init_fraction,
        u => cfg.u,
        weighting => cfg.weighting_scheme,
        lambda => cfg.lambda,
        use_semi => cfg.toggles.use_semi,
        use_active => cfg.toggles.use_active,
        use_weighting => cfg.toggles.use_weighting,
        checkpoint_every => cfg.checkpoint_every,
    }
    if a.log_batches {
        cfg.log_batches = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let summary = run(&cfg, &a.out, a.force)?;
    println!(
        "{} seed {}: final target-val mIoU {:.4}, labeled {}/{}",
        summary.mode, summary.seed, summary.final_miou, summary.labeled_count, summary.target_count
    );
    Ok(())
}

/// `(sample_id, image path, label path)` of every manifest entry in `split`.
fn split_entries(dataset: &Path, split: SplitArg) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let records = load_manifest(&dataset.join(MANIFEST_FILE))?;
    let out: Vec<_> = records
        .into_iter()
        .filter(|r| split.matches(r.domain, r.split))
        .map(|r| (r.sample_id, dataset.join(r.image_path), dataset.join(r.label_path)))
        .collect();
    if out.is_empty() {
        return Err(Error::validation(format!("dataset has no {} samples", split.name())));
    }
    Ok(out)
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    refuse_existing_file(&a.out, a.force)?;
    let entries = split_entries(&a.dataset, a.split)?;
    let scores = if a.strategy == Strategy::Random {
        let ids: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
        random_scores(&ids, a.seed)
    } else {
        let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
        entries
            .iter()
            .map(|(id, img, _)| {
                let p = ckpt.model.predict(&load_image(img)?)?;
                Ok(AcquisitionScore {
                    sample_id: id.clone(),
                    strategy: a.strategy,
                    score: score_map(&p, a.strategy).expect("model-based strategy"),
                    rank: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut text = String::from("sample_id,strategy,score,rank\n");
    for s in rank(scores)? {
        text.push_str(&format!("{},{},{:.16e},{}\n", s.sample_id, s.strategy, s.score, s.rank));
    }
    write_file(&a.out, &text)
}

fn label_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_weights(a: WeightsArgs) -> Result<()> {
    refuse_existing_file(&a.out, a.force)?;
    let gt_files = label_files(&a.gt)?;
    if gt_files.is_empty() {
        return Err(Error::validation(format!("no label PNGs in {}", a.gt.display())));
    }
    let gt: Vec<LabelMap> = gt_files.iter().map(|p| load_label(p)).collect::<Result<_>>()?;
    let scheme: WeightingScheme = a.scheme.into();
    let (iou, weights) = match scheme {
        WeightingScheme::Iou => {
            let pred: Vec<LabelMap> = gt_files
                .iter()
                .map(|p| load_label(&a.pred.join(p.file_name().expect("file name"))))
                .collect::<Result<_>>()?;
            let iou = per_class_iou(&pred, &gt, a.num_classes)?;
            let w = iou_weights(&iou, a.u)?;
            (Some(iou), w)
        }
        WeightingScheme::Frequency => (None, frequency_weights(&gt, a.num_classes, a.u)?),
    };
    let mut text = String::from("epoch,class_id,iou,weight\n");
    for (c, w) in weights.weights.iter().enumerate() {
        let iou = iou
            .as_ref()
            .and_then(|v| v.iou[c])
            .map(|v| format!("{v:.8}"))
            .unwrap_or_else(|| "undef".into());
        text.push_str(&format!("{},{c},{iou},{w:.8}\n", a.epoch));
    }
    write_file(&a.out, &text)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    refuse_existing_file(&a.out, a.force)?;
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let epoch = serde_json::from_value::<TrainerState>(ckpt.meta.clone())
        .map(|s| s.epoch)
        .unwrap_or(0);
    let entries = split_entries(&a.dataset, a.split)?;
    let mut preds = Vec::with_capacity(entries.len());
    let mut gts = Vec::with_capacity(entries.len());
    for (_, img, lab) in &entries {
        preds.push(ckpt.model.predict(&load_image(img)?)?.argmax());
        gts.push(load_label(lab)?);
    }
    let c = ckpt.model.config().num_classes;
    let (iou, miou) = ssada::metrics::miou(&preds, &gts, c)?;
    let header: String = (0..c).map(|i| format!(",iou_{i}")).collect();
    let per: String = iou
        .iou
        .iter()
        .map(|v| v.map(|v| format!(",{v:.8}")).unwrap_or_else(|| ",undef".into()))
        .collect();
    let text = format!("epoch,split,miou{header}\n{epoch},{},{miou:.8}{per}\n", a.split.name());
    write_file(&a.out, &text)?;
    println!("{} mIoU {miou:.4}", a.split.name());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let runs = load_runs(&a.runs)?;
    prepare_out_dir(&a.out, a.force)?;
    write_report(&runs, &a.out)?;
    info!("report over {} runs written to {}", runs.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(a),
        Command::Weights(a) => cmd_weights(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
