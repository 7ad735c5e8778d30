use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use uncert_core::active::{filter_detections, random_sample, uncertainty_sample, SamplingMethod};
use uncert_core::certainty::{consistency_delta, evaluate_images, CertaintyMethod, CertaintyParams, SetCertainty};
use uncert_core::eval::{coco_iou_thresholds, mean_average_precision};
use uncert_core::grouping::GroupingParams;
use uncert_core::io::{self, DetectionDump, GroundTruthFile};
use uncert_core::mask::VoteRule;
use uncert_core::sim::{self, SimDetectorState, SimulationConfig};
use uncert_core::{seed, Error, Result};

const SEED_ENV: &str = "UNCERT_SEED";

#[derive(Parser)]
#[command(name = "uncert", version, about = "Monte-Carlo certainty ranking and active-learning simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CertaintyArgs {
    /// IoU above which detections join the same instance set
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Detections below this confidence are discarded
    #[arg(long, default_value_t = 0.5)]
    confidence: f64,
    /// Per-pass NMS overlap threshold
    #[arg(long, default_value_t = 0.01)]
    nms: f64,
    /// Certainty assigned to images without any instance set
    #[arg(long, default_value_t = 1.0)]
    no_detection: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Rank images by Monte-Carlo certainty from per-image detection dumps
    Rank {
        #[arg(long)]
        dumps: PathBuf,
        /// Expected forward passes per dump (defaults to what the dumps declare)
        #[arg(long)]
        fp: Option<u32>,
        #[arg(long, default_value = "average")]
        mode: CertaintyMethod,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-set breakdown CSV
        #[arg(long)]
        sets_out: Option<PathBuf>,
        #[command(flatten)]
        certainty: CertaintyArgs,
    },
    /// Select images for annotation from a certainty report
    Sample {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "uncertainty")]
        method: SamplingMethod,
        #[arg(long)]
        seed: Option<u64>,
        /// Newline-separated image ids
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the sampling loop on a simulated world
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Learning-curve CSV
        #[arg(long)]
        out: PathBuf,
        /// Cumulative class-tally CSV
        #[arg(long)]
        tally_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare certainties at several forward-pass counts against a reference count
    Consistency {
        /// FP=DIR pairs, one per forward-pass count
        #[arg(long = "dumps-by-fp", value_parser = parse_fp_dir, required = true)]
        dumps_by_fp: Vec<(u32, PathBuf)>,
        #[arg(long, default_value_t = 100)]
        reference: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        certainty: CertaintyArgs,
    },
    /// Mask mAP of predictions against ground truth
    Eval {
        /// Directory of detection dumps
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write simulated Monte-Carlo dumps and matching ground truth
    Synth {
        /// Simulation config (world and detector keys)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fp: u32,
        /// Uniform per-class skill of the simulated detector
        #[arg(long, default_value_t = 0.5)]
        skill: f64,
        /// Number of pool images to emit
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gt_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_fp_dir(s: &str) -> std::result::Result<(u32, PathBuf), String> {
    let (fp, dir) = s.split_once('=').ok_or_else(|| format!("expected FP=DIR, got {s:?}"))?;
    let fp: u32 = fp.trim().parse().map_err(|e| format!("bad forward-pass count {fp:?}: {e}"))?;
    Ok((fp, PathBuf::from(dir)))
}

/// `--seed`, then `UNCERT_SEED`, then `fallback`.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(fallback),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn certainty_params(args: &CertaintyArgs, forward_passes: u32, num_classes: usize) -> CertaintyParams {
    CertaintyParams {
        forward_passes,
        num_classes,
        grouping: GroupingParams {
            iou_threshold: args.iou,
            vote_fraction: 0.25,
            vote_rule: VoteRule::AtLeast,
        },
        no_detection_certainty: args.no_detection,
    }
}

/// Shared forward-pass count and class count of a batch of dumps.
fn dump_shape(dumps: &[DetectionDump], expected_fp: Option<u32>, source: &Path) -> Result<(u32, usize)> {
    let first = dumps
        .first()
        .ok_or_else(|| Error::invalid(format!("no .json dumps in {}", source.display())))?;
    let fp = expected_fp.unwrap_or(first.forward_passes);
    let mut classes = None;
    for d in dumps {
        if d.forward_passes != fp {
            return Err(Error::invalid(format!(
                "{}: declares {} forward passes, expected {fp}",
                d.image_id, d.forward_passes
            )));
        }
        if let Some(n) = d.instances.first().map(|i| i.scores.len()) {
            if *classes.get_or_insert(n) != n {
                return Err(Error::invalid(format!("{}: score vectors disagree in length across dumps", d.image_id)));
            }
        }
    }
    Ok((fp, classes.unwrap_or(2)))
}

fn certainties_for(dumps: Vec<DetectionDump>, args: &CertaintyArgs, params: &CertaintyParams) -> Result<Vec<uncert_core::ImageCertainty>> {
    let per_image: BTreeMap<String, Vec<_>> = dumps
        .into_iter()
        .map(|d| (d.image_id, filter_detections(d.instances, args.confidence, args.nms)))
        .collect();
    Ok(evaluate_images(&per_image, params)?.into_values().collect())
}

fn rank(
    dumps_dir: &Path,
    fp: Option<u32>,
    mode: CertaintyMethod,
    out: &Path,
    sets_out: Option<&Path>,
    args: &CertaintyArgs,
) -> Result<()> {
    let dumps = io::read_dump_dir(dumps_dir)?;
    let (fp, classes) = dump_shape(&dumps, fp, dumps_dir)?;
    let params = certainty_params(args, fp, classes);
    let images = certainties_for(dumps, args, &params)?;
    io::write_text(out, &io::certainty_report_csv(&images, mode))?;
    if let Some(path) = sets_out {
        io::write_text(path, &io::certainty_sets_csv(&images))?;
    }
    info!("ranked {} images", images.len());
    Ok(())
}

fn sample(report: &Path, n: usize, method: SamplingMethod, seed_flag: Option<u64>, out: &Path) -> Result<()> {
    let certainties = io::read_certainty_report(&read_text(report)?, &report.display().to_string())?;
    let picked = match method {
        SamplingMethod::Uncertainty => uncertainty_sample(&certainties, n)?,
        SamplingMethod::Random => {
            let ids: BTreeSet<String> = certainties.keys().cloned().collect();
            random_sample(&ids, n, seed::derive(resolve_seed(seed_flag, 0)?, &[0x5a4d]))?.0
        }
    };
    if picked.len() < n {
        warn!("report lists {} images, fewer than the {n} requested", picked.len());
    }
    let mut text = picked.into_iter().collect::<Vec<_>>().join("\n");
    text.push('\n');
    io::write_text(out, &text)
}

fn simulate(config: &Path, out: &Path, tally_out: Option<&Path>, seed_flag: Option<u64>) -> Result<()> {
    let mut cfg: SimulationConfig = read_text(config)?.parse()?;
    cfg.engine.seed = resolve_seed(seed_flag, cfg.engine.seed)?;
    let state = sim::run_simulation(&cfg)?;
    if state.truncated {
        warn!(
            "pool exhausted: completed {} of {} sampling iterations",
            state.completed_iterations(),
            state.requested_iterations
        );
    }
    io::write_text(out, &io::learning_curve_csv(&state.curve))?;
    if let Some(path) = tally_out {
        io::write_text(path, &io::class_tally_csv(&state.tallies))?;
    }
    Ok(())
}

fn consistency(dumps_by_fp: &[(u32, PathBuf)], reference: u32, out: &Path, args: &CertaintyArgs) -> Result<()> {
    let mut dirs: BTreeMap<u32, &Path> = BTreeMap::new();
    for (fp, dir) in dumps_by_fp {
        if dirs.insert(*fp, dir).is_some() {
            return Err(Error::invalid(format!("forward-pass count {fp} given twice")));
        }
    }
    if !dirs.contains_key(&reference) {
        return Err(Error::invalid(format!("no dumps for the reference forward-pass count {reference}")));
    }
    if dirs.len() < 2 {
        return Err(Error::invalid("need dumps for at least one forward-pass count besides the reference"));
    }
    let mut per_fp = BTreeMap::new();
    for (&fp, dir) in &dirs {
        let dumps = io::read_dump_dir(dir)?;
        let (_, classes) = dump_shape(&dumps, Some(fp), dir)?;
        let params = certainty_params(args, fp, classes);
        let images = certainties_for(dumps, args, &params)?;
        per_fp.insert(fp, images.iter().flat_map(SetCertainty::from_image).collect::<Vec<_>>());
    }
    let records = consistency_delta(&per_fp, reference, args.iou)?;
    io::write_text(out, &io::consistency_csv(&records))
}

fn eval(predictions: &Path, gt_path: &Path, out: &Path) -> Result<()> {
    let gt = GroundTruthFile::read_file(gt_path)?;
    let dumps = io::read_dump_dir(predictions)?;
    if let Some(d) = dumps.iter().find(|d| !gt.image_ids.contains(&d.image_id)) {
        return Err(Error::invalid(format!("predictions for {:?}, which has no ground truth", d.image_id)));
    }
    let preds: Vec<_> = dumps.into_iter().flat_map(|d| d.instances).collect();
    let report = mean_average_precision(&preds, &gt.instances, &coco_iou_thresholds())?;
    io::write_text(out, &io::evaluation_csv(&report))
}

fn synth(
    config: Option<&Path>,
    fp: u32,
    skill: f64,
    images: Option<usize>,
    out: &Path,
    gt_out: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<()> {
    let cfg: SimulationConfig = match config {
        Some(p) => read_text(p)?.parse()?,
        None => SimulationConfig::default(),
    };
    if fp == 0 {
        return Err(Error::invalid("--fp must be at least 1"));
    }
    if !(0.0..=1.0).contains(&skill) {
        return Err(Error::invalid("--skill must be in [0,1]"));
    }
    let base = resolve_seed(seed_flag, cfg.engine.seed)?;
    let world = sim::generate_world(&cfg.world)?;
    let state = SimDetectorState::with_uniform_skill(cfg.world.num_classes, skill, cfg.detector.noise, base);
    let mut detector = cfg.detector.clone();
    detector.confidence_threshold = cfg.engine.confidence_threshold;
    detector.nms_threshold = cfg.engine.nms_threshold;

    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let ids: Vec<&String> = world.pool.iter().take(images.unwrap_or(world.pool.len())).collect();
    for id in &ids {
        let image = world.image(id).ok_or_else(|| Error::Internal(format!("pool image {id} missing")))?;
        let s = seed::derive(base, &[0xd0, seed::hash_str(id)]);
        let dets = sim::infer_mc(&state, &world, image, fp, s, &detector);
        DetectionDump::from_instances(id, world.params.width, world.params.height, fp, dets)?.write_file(&out.join(format!("{id}.json")))?;
    }
    if let Some(path) = gt_out {
        let gt = GroundTruthFile {
            image_ids: ids.iter().map(|s| s.to_string()).collect(),
            instances: ids.iter().flat_map(|id| world.image(id).into_iter().flat_map(|i| i.annotations.clone())).collect(),
        };
        io::write_text(path, &gt.to_json((world.params.width, world.params.height)))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Rank {
            dumps,
            fp,
            mode,
            out,
            sets_out,
            certainty,
        } => rank(&dumps, fp, mode, &out, sets_out.as_deref(), &certainty),
        Command::Sample {
            report,
            n,
            method,
            seed,
            out,
        } => sample(&report, n, method, seed, &out),
        Command::Simulate {
            config,
            out,
            tally_out,
            seed,
        } => simulate(&config, &out, tally_out.as_deref(), seed),
        Command::Consistency {
            dumps_by_fp,
            reference,
            out,
            certainty,
        } => consistency(&dumps_by_fp, reference, &out, &certainty),
        Command::Eval { predictions, gt, out } => eval(&predictions, &gt, &out),
        Command::Synth {
            config,
            fp,
            skill,
            images,
            out,
            gt_out,
            seed,
        } => synth(config.as_deref(), fp, skill, images, &out, gt_out.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
