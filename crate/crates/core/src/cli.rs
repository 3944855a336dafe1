//! `sood` command line. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::assignment::{
    assign_pyramid, AssignOptions, AssignmentResult, FeatureGrid, Sampling, DEFAULT_CENTER_RADIUS,
};
use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::ingest::{
    aspect_ratio_stats, load_dataset, quad_to_rotated_box, read_dota_file, ClassMap,
};
use crate::losses::{supervised_loss, unsupervised_loss, LossBatch, LossConfig, LossTerms};
use crate::metrics::{
    per_category_box_pr, pixel_pr, precision_at_iou, score_centerness_heatmap, write_category_csv,
    write_heatmap_csv, write_pr_curve_csv,
};
use crate::pseudo_label::{
    pseudo_boxes, ratio_select, read_predictions, read_selection_csv, sla_select,
    write_selection_csv, DensePrediction, RatioKey, SlaConfig, TopkScope,
};
use crate::sim::{run_ablation, write_ablation_csv, RunManifest, SimConfig, Strategy};
use crate::soft_label::{
    build_soft_targets, write_soft_targets_csv, CcslParams, ExponentConvention,
};

#[derive(Debug, Parser)]
#[command(
    name = "sood",
    version,
    about = "Label assignment and pseudo-label analysis for oriented detection"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aspect-ratio statistics of a DOTA annotation directory.
    Stats(StatsArgs),
    /// Dump per-cell label assignments for one annotation file.
    Assign(AssignArgs),
    /// Select pseudo-labels from a prediction dump.
    Select(SelectArgs),
    /// Soft classification targets for one annotation file.
    Softlabel(SoftlabelArgs),
    /// Evaluate losses on a dumped batch.
    Loss(LossArgs),
    /// Run the synthetic selection-strategy ablation.
    Simulate(SimulateArgs),
    /// Recall/precision metrics over dumps.
    #[command(subcommand)]
    Pr(PrCommand),
}

#[derive(Debug, Args)]
struct ImageArgs {
    #[arg(long, default_value_t = 1024)]
    width: u32,
    #[arg(long, default_value_t = 1024)]
    height: u32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplingArg {
    Gca,
    Center,
    All,
}

#[derive(Debug, Args)]
struct SamplingArgs {
    #[arg(long, value_enum, default_value = "gca")]
    sampling: SamplingArg,
    /// Center-sampling radius in strides.
    #[arg(long, default_value_t = DEFAULT_CENTER_RADIUS)]
    radius: f64,
    /// Drop positives whose regression reach exceeds the level's size range.
    #[arg(long)]
    limit_range: bool,
}

impl SamplingArgs {
    fn sampling(&self) -> Sampling {
        match self.sampling {
            SamplingArg::Gca => Sampling::Gaussian,
            SamplingArg::Center => Sampling::Center {
                radius_factor: self.radius,
            },
            SamplingArg::All => Sampling::All,
        }
    }

    fn options(&self) -> AssignOptions {
        AssignOptions {
            limit_range: self.limit_range,
        }
    }
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Directory of DOTA `.txt` annotation files.
    #[arg(long = "in")]
    input: PathBuf,
    /// JSON summary (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Histogram CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    exclude_difficult: bool,
}

#[derive(Debug, Args)]
struct AssignArgs {
    /// DOTA annotation file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    image: ImageArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Sla,
    ScoreRatio,
    JointRatio,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    Joint,
    PerLevel,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// JSON-lines prediction dump, one record per level.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sla")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0.02)]
    thr: f64,
    #[arg(long, default_value_t = 2000)]
    topk: usize,
    #[arg(long, value_enum, default_value = "joint")]
    topk_scope: ScopeArg,
    #[arg(long, default_value_t = 0.03)]
    ratio: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConventionArg {
    Root,
    Power,
}

#[derive(Debug, Args)]
struct SoftlabelArgs {
    /// DOTA annotation file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    image: ImageArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Smoothing parameter; 0 gives plain centerness targets.
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, value_enum, default_value = "root")]
    convention: ConventionArg,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// JSON with optional `supervised`, `unsupervised` and `config` members.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Flat TOML configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `sla:THR:TOPK`, `score_ratio:R` or `joint_ratio:R`; repeatable.
    #[arg(long = "strategy")]
    strategies: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run manifest JSON with the config hash and seeds.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum PrCommand {
    /// Pixel-level recall/precision of a selection against ground truth.
    Pixel(PixelArgs),
    /// Pseudo-box precision across IoU thresholds.
    Iou(BoxPrArgs),
    /// Box recall/precision per category.
    Category(BoxPrArgs),
    /// Score/centerness histogram with Pearson correlation.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
struct PixelArgs {
    /// Selection CSV as written by `select`.
    #[arg(long)]
    selection: PathBuf,
    /// DOTA annotation file of the same image.
    #[arg(long)]
    ann: PathBuf,
    #[command(flatten)]
    image: ImageArgs,
    #[arg(long)]
    class_aware: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BoxPrArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    ann: PathBuf,
    /// Pseudo-box score threshold.
    #[arg(long, default_value_t = 0.5)]
    score_thr: f64,
    #[arg(long, default_value_t = 0.5)]
    nms: f64,
    /// Comma-separated IoU thresholds (`iou`) or the first one (`category`).
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6, 0.7, 0.8, 0.9])]
    iou: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    preds: PathBuf,
    /// Restrict to ground-truth positive cells of this annotation file.
    #[arg(long)]
    ann: Option<PathBuf>,
    #[command(flatten)]
    image: ImageArgs,
    /// Without `--ann`, cells whose max score is below this are skipped.
    #[arg(long, default_value_t = 0.05)]
    min_score: f64,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON with the counts and the correlation.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossInput {
    #[serde(default)]
    config: LossConfig,
    supervised: Option<LossBatch>,
    unsupervised: Option<LossBatch>,
}

#[derive(Debug, Serialize)]
struct LossOutput {
    supervised: Option<LossTerms>,
    unsupervised: Option<LossTerms>,
    total: f64,
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn existing(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Usage(format!(
            "input path does not exist: {}",
            path.display()
        )))
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Error::from(e).in_file(p)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Boxes of one annotation file, every malformed line being fatal.
pub fn load_annotation_boxes(path: &Path, classes: &mut ClassMap) -> Result<Vec<RotatedBox>> {
    let parsed = read_dota_file(path)?;
    if let Some(issue) = parsed.issues.into_iter().next() {
        return Err(Error::from(issue).in_file(path));
    }
    parsed
        .annotations
        .iter()
        .map(|q| quad_to_rotated_box(q, classes).map_err(|e| e.in_file(path)))
        .collect()
}

pub fn load_predictions(path: &Path) -> Result<Vec<DensePrediction>> {
    let file = File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    read_predictions(BufReader::new(file)).map_err(|e| e.in_file(path))
}

fn gt_assignment(
    ann: &Path,
    image: &ImageArgs,
    sampling: Sampling,
    opts: AssignOptions,
) -> Result<(Vec<RotatedBox>, Vec<AssignmentResult>)> {
    let boxes = load_annotation_boxes(ann, &mut ClassMap::dota_v15())?;
    let grids = FeatureGrid::pyramid(image.width, image.height)?;
    let res = assign_pyramid(&boxes, &grids, sampling, opts)?;
    Ok((boxes, res))
}

fn stats(a: &StatsArgs) -> CliResult {
    let dir = existing(&a.input)?;
    if !dir.is_dir() {
        return Err(Failure::Usage(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    if a.bins == 0 {
        return Err(Failure::Usage("--bins must be positive".to_string()));
    }
    let mut classes = ClassMap::dota_v15();
    let load = load_dataset(dir, &mut classes, a.exclude_difficult)?;
    for (path, issue) in &load.issues {
        eprintln!(
            "warning: {}: line {}: {}",
            path.display(),
            issue.line,
            issue.message
        );
    }
    let stats = aspect_ratio_stats(&load.boxes, a.bins, &classes)?;
    if let Some(csv) = &a.csv {
        emit(Some(csv), stats.to_csv().as_bytes())?;
    }
    emit(a.out.as_deref(), &json_bytes(&stats.summary_json())?)?;
    Ok(())
}

fn assign(a: &AssignArgs) -> CliResult {
    let (_, res) = gt_assignment(
        existing(&a.input)?,
        &a.image,
        a.sampling.sampling(),
        a.sampling.options(),
    )?;
    let mut buf = Vec::new();
    crate::assignment::write_assignment_csv(&mut buf, &res)?;
    emit(a.out.as_deref(), &buf)?;
    Ok(())
}

fn select(a: &SelectArgs) -> CliResult {
    let preds = load_predictions(existing(&a.input)?)?;
    let set = match a.strategy {
        StrategyArg::Sla => {
            let cfg = SlaConfig {
                topk_scope: match a.topk_scope {
                    ScopeArg::Joint => TopkScope::Joint,
                    ScopeArg::PerLevel => TopkScope::PerLevel,
                },
                ..SlaConfig::new(a.thr, a.topk)
            };
            sla_select(&preds, &cfg)?
        }
        StrategyArg::ScoreRatio => ratio_select(&preds, a.ratio, RatioKey::Score)?,
        StrategyArg::JointRatio => ratio_select(&preds, a.ratio, RatioKey::Joint)?,
    };
    let mut buf = Vec::new();
    write_selection_csv(&mut buf, &set)?;
    emit(a.out.as_deref(), &buf)?;
    Ok(())
}

fn softlabel(a: &SoftlabelArgs) -> CliResult {
    let (boxes, res) = gt_assignment(
        existing(&a.input)?,
        &a.image,
        a.sampling.sampling(),
        a.sampling.options(),
    )?;
    let params = CcslParams {
        beta_smooth: a.beta,
        image_w: a.image.width as f64,
        image_h: a.image.height as f64,
        convention: match a.convention {
            ConventionArg::Root => ExponentConvention::Root,
            ConventionArg::Power => ExponentConvention::Power,
        },
    };
    let targets = res
        .iter()
        .map(|r| build_soft_targets(r, &boxes, &params))
        .collect::<Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    write_soft_targets_csv(&mut buf, &targets)?;
    emit(a.out.as_deref(), &buf)?;
    Ok(())
}

fn loss(a: &LossArgs) -> CliResult {
    let path = existing(&a.input)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    let input: LossInput = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))?;
    if input.supervised.is_none() && input.unsupervised.is_none() {
        return Err(Failure::Domain(
            Error::Domain("no supervised or unsupervised batch given".to_string()).in_file(path),
        ));
    }
    input.config.validate()?;
    let sup = input
        .supervised
        .as_ref()
        .map(|b| supervised_loss(b, &input.config))
        .transpose()?;
    let unsup = input
        .unsupervised
        .as_ref()
        .map(|b| unsupervised_loss(b, &input.config))
        .transpose()?;
    let total = sup.map_or(0.0, |t| t.total())
        + input.config.unsup_weight * unsup.map_or(0.0, |t| t.total());
    let out = LossOutput {
        supervised: sup,
        unsupervised: unsup,
        total,
    };
    emit(a.out.as_deref(), &json_bytes(&out)?)?;
    Ok(())
}

fn simulate(a: &SimulateArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => SimConfig::from_file(existing(p)?)?,
        None => SimConfig::default(),
    };
    if let Some(r) = a.reps {
        cfg.repetitions = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if !a.strategies.is_empty() {
        cfg.strategies = a.strategies.clone();
    }
    cfg.validate()?;
    let strategies: Vec<Strategy> = cfg.parsed_strategies()?;
    let ablation = run_ablation(&cfg, &strategies)?;
    let mut buf = Vec::new();
    write_ablation_csv(&mut buf, &ablation.rows)?;
    emit(a.out.as_deref(), &buf)?;
    if let Some(m) = &a.manifest {
        emit(
            Some(m),
            &json_bytes(&RunManifest::new(&cfg, &strategies, &ablation))?,
        )?;
    }
    Ok(())
}

fn pr(cmd: &PrCommand) -> CliResult {
    match cmd {
        PrCommand::Pixel(a) => {
            let path = existing(&a.selection)?;
            let file = File::open(path).map_err(|e| Error::from(e).in_file(path))?;
            let set = read_selection_csv(BufReader::new(file)).map_err(|e| e.in_file(path))?;
            let (_, gt) = gt_assignment(
                existing(&a.ann)?,
                &a.image,
                Sampling::Gaussian,
                AssignOptions::default(),
            )?;
            let res = pixel_pr(&set, &gt, a.class_aware)?;
            emit(a.out.as_deref(), &json_bytes(&res)?)?;
        }
        PrCommand::Iou(a) => {
            let preds = load_predictions(existing(&a.preds)?)?;
            let gts = load_annotation_boxes(existing(&a.ann)?, &mut ClassMap::dota_v15())?;
            let boxes = pseudo_boxes(&preds, a.score_thr, a.nms)?;
            let points = precision_at_iou(&boxes, &gts, &a.iou, a.score_thr)?;
            let mut buf = Vec::new();
            write_pr_curve_csv(&mut buf, &points)?;
            emit(a.out.as_deref(), &buf)?;
        }
        PrCommand::Category(a) => {
            let preds = load_predictions(existing(&a.preds)?)?;
            let classes = ClassMap::dota_v15();
            let mut resolved = classes.clone();
            let gts = load_annotation_boxes(existing(&a.ann)?, &mut resolved)?;
            let boxes = pseudo_boxes(&preds, a.score_thr, a.nms)?;
            let iou = *a
                .iou
                .first()
                .ok_or_else(|| Failure::Usage("--iou needs a value".to_string()))?;
            let known: Vec<usize> = (0..classes.len()).collect();
            let report = per_category_box_pr(&boxes, &gts, iou, &known);
            let mut buf = Vec::new();
            write_category_csv(&mut buf, &report, |c| {
                resolved
                    .name(c)
                    .map_or_else(|| c.to_string(), str::to_string)
            })?;
            emit(a.out.as_deref(), &buf)?;
        }
        PrCommand::Heatmap(a) => {
            let preds = load_predictions(existing(&a.preds)?)?;
            let mut samples = Vec::new();
            match &a.ann {
                Some(ann) => {
                    let (_, gt) = gt_assignment(
                        existing(ann)?,
                        &a.image,
                        Sampling::Gaussian,
                        AssignOptions::default(),
                    )?;
                    for r in &gt {
                        let p =
                            preds
                                .iter()
                                .find(|p| p.level == r.grid.level)
                                .ok_or_else(|| {
                                    Error::Consistency(format!(
                                        "prediction dump lacks level {}",
                                        r.grid.level
                                    ))
                                })?;
                        if p.len() != r.cells.len() {
                            return Err(Error::Shape {
                                expected: r.cells.len(),
                                actual: p.len(),
                            }
                            .into());
                        }
                        samples.extend(
                            r.positive_cells()
                                .map(|c| (p.max_score(c).0, p.centerness[c])),
                        );
                    }
                }
                None => {
                    for p in &preds {
                        for c in 0..p.len() {
                            let s = p.max_score(c).0;
                            if s >= a.min_score {
                                samples.push((s, p.centerness[c]));
                            }
                        }
                    }
                }
            }
            let h = score_centerness_heatmap(&samples, a.bins)?;
            let mut buf = Vec::new();
            write_heatmap_csv(&mut buf, &h)?;
            emit(a.out.as_deref(), &buf)?;
            if let Some(s) = &a.summary {
                emit(Some(s), &json_bytes(&h)?)?;
            }
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Stats(a) => stats(a),
        Command::Assign(a) => assign(a),
        Command::Select(a) => select(a),
        Command::Softlabel(a) => softlabel(a),
        Command::Loss(a) => loss(a),
        Command::Simulate(a) => simulate(a),
        Command::Pr(c) => pr(c),
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Failure::Usage("--threads must be positive".to_string())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure::Domain(Error::Config(e.to_string()))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
