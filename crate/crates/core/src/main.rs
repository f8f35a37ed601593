use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flowdet::data::{
    export_ply, flow_figure, write_kitti_bin, write_manifest, PlyItem, BLUE,
};
use flowdet::error::{Error, Result};
use flowdet::eval::{evaluate_detections, write_pr_csv};
use flowdet::losses::DistanceMode;
use flowdet::model::{gradient_suite, pair_forward_flow, ModelParams, PairGeometry};
use flowdet::pipeline::{
    alternate_train, collect_detections, evaluate_flow, pretrain_flow, train_detect,
    write_run_header, Checkpoint, RunConfig, SceneSource, Stage,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "flowdet", version, about = "Self-supervised scene-flow pre-training for 3D detection")]
struct Cli {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Distance used by the flow losses.
    #[arg(long, global = true, value_enum)]
    loss_distance: Option<LossDistance>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossDistance {
    Squared,
    Euclidean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes synthetic scenes as KITTI-style `.bin` frames with labels.
    Generate {
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Number of scenes; defaults to the split size in the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Self-supervised flow pre-training; reads no labels.
    PretrainFlow,
    /// Detection training, optionally from a flow checkpoint's backbone.
    TrainDetect {
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// The four-stage flow/detection alternation.
    Alternate,
    /// End-point error of a checkpoint on held-out scenes.
    EvalFlow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// BEV AP of a checkpoint on held-out scenes.
    EvalDetect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// PLY figure of one scene: frame t+1, sampled frame-t points and their
    /// propagation, ground-truth boxes.
    ExportPly {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Scene index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference checks of every op and the composed model.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        op_rtol: f64,
        #[arg(long, default_value_t = 1e-3)]
        model_rtol: f64,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::PretrainFlow => Some(Stage::PretrainFlow),
            Command::TrainDetect { .. } => Some(Stage::TrainDetect),
            Command::Alternate => Some(Stage::Alternate),
            Command::EvalFlow { .. } => Some(Stage::EvalFlow),
            Command::EvalDetect { .. } => Some(Stage::EvalDetect),
            _ => None,
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut run = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(stage) = cli.command.stage() {
        run.stage = stage;
    }
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    if let Some(out) = &cli.out {
        run.out_dir = out.clone();
    }
    if let Some(d) = cli.loss_distance {
        run.flow.distance = match d {
            LossDistance::Squared => DistanceMode::Squared,
            LossDistance::Euclidean => DistanceMode::Euclidean,
        };
    }
    if let Command::TrainDetect { label_fraction: Some(f), .. } = &cli.command {
        run.label_fraction = *f;
    }
    if let Command::EvalDetect { iou, .. } = &cli.command {
        run.detect.eval.iou = *iou;
    }
    run.validate()?;
    Ok(run)
}

fn split_ids(source: &SceneSource, split: Split) -> &[u64] {
    match split {
        Split::Train => &source.train_ids,
        Split::Val => &source.val_ids,
        Split::Test => &source.test_ids,
    }
}

fn load_params(run: &RunConfig, path: &Path) -> Result<ModelParams<f32>> {
    let ck = Checkpoint::load(path)?;
    if ck.config != run.model {
        log::warn!("checkpoint model config differs from the run config; using the checkpoint's");
    }
    Ok(ck.model_params())
}

fn write_flow_bin(path: &Path, flow: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = flow.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn generate(run: &RunConfig, split: Split, count: Option<usize>) -> Result<()> {
    let source = SceneSource::from_config(&run.data)?;
    let ids = split_ids(&source, split);
    let n = count.unwrap_or(ids.len());
    let ids: Vec<u64> = match split {
        Split::Train => (0..n as u64).collect(),
        _ => ids.iter().copied().take(n).collect(),
    };
    let dir = run.out_dir.join("scenes");
    fs::create_dir_all(&dir)?;
    for &id in &ids {
        let s = source.dataset.scene(id)?;
        write_kitti_bin(dir.join(format!("{id}_t.bin")), &s.frame_t)?;
        write_kitti_bin(dir.join(format!("{id}_t1.bin")), &s.frame_t1)?;
        if let Some(flow) = &s.gt_flow {
            write_flow_bin(&dir.join(format!("{id}_flow.bin")), flow.data())?;
        }
        let labels = serde_json::to_string_pretty(&s.gt_boxes_t)
            .map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(dir.join(format!("{id}_boxes.json")), labels)?;
    }
    write_manifest(
        run.out_dir.join("manifest.txt"),
        &ids,
        &run.data.generator.hash(),
        run.data.seed,
    )?;
    println!("wrote {} scenes to {}", ids.len(), dir.display());
    Ok(())
}

fn eval_flow(run: &RunConfig, checkpoint: &Path, split: Split) -> Result<()> {
    let params = load_params(run, checkpoint)?;
    let source = SceneSource::from_config(&run.data)?;
    let (model, zero) = evaluate_flow(&params, &source, split_ids(&source, split))?;
    let ratio = model.epe_mean / zero.epe_mean;
    let text = format!(
        "EPE mean {:.4} m (static {:.4}, dynamic {:.4}; {} / {} points)\nzero-flow EPE {:.4} m\nratio {:.4}\n",
        model.epe_mean, model.epe_static, model.epe_dynamic, model.n_static, model.n_dynamic,
        zero.epe_mean, ratio
    );
    print!("{text}");
    fs::write(run.out_dir.join("eval_flow.txt"), text)?;
    Ok(())
}

fn eval_detect(run: &RunConfig, checkpoint: &Path, split: Split) -> Result<()> {
    let params = load_params(run, checkpoint)?;
    let source = SceneSource::from_config(&run.data)?;
    let eval = &run.detect.eval;
    let (dets, gts) = collect_detections(&params, &source, split_ids(&source, split), eval)?;
    let report = evaluate_detections(&dets, &gts, params.config.detect.num_classes, eval)?;
    let text = format!("{}\nIoU threshold {}", report.summary(), eval.iou);
    println!("{text}");
    fs::write(run.out_dir.join("eval_detect.txt"), format!("{text}\n"))?;
    for (k, ap) in report.ap.iter().enumerate() {
        write_pr_csv(run.out_dir.join(format!("pr_class{k}.csv")), &ap.pr_curve)?;
    }
    Ok(())
}

fn export_scene(run: &RunConfig, checkpoint: Option<&Path>, split: Split, index: usize) -> Result<()> {
    let source = SceneSource::from_config(&run.data)?;
    let ids = split_ids(&source, split);
    let id = *ids
        .get(index)
        .ok_or(Error::IndexOutOfRange { index, len: ids.len() })?;
    let scene = source.dataset.scene(id)?;
    let params = match checkpoint {
        Some(p) => load_params(run, p)?,
        None => {
            let mut p = ModelParams::init(run.model.clone(), run.seed)?;
            p.zero_flow_output();
            p
        }
    };
    let pair = PairGeometry::build(&scene.frame_t, &scene.frame_t1, &params.config, id)?;
    let flow = pair_forward_flow(&pair, &params)?;
    let mut propagated = pair.frame_t.sampled_xyz.clone();
    propagated.add_assign(&flow)?;
    let mut items = flow_figure(&scene.frame_t1.xyz, &pair.frame_t.sampled_xyz, &propagated);
    items.push(PlyItem::Wireframe { boxes: scene.gt_boxes_t.clone(), color: BLUE });
    let path = run.out_dir.join(format!("scene_{id}.ply"));
    export_ply(&items, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn grad_check(seed: u64, op_rtol: f64, model_rtol: f64) -> Result<bool> {
    let mut ok = true;
    for r in gradient_suite(seed, op_rtol, model_rtol)? {
        let pass = r.report.passed();
        ok &= pass;
        println!(
            "{} {:<18} max rel err {:.2e} (rtol {:.0e}, {} inputs)",
            if pass { "PASS" } else { "FAIL" },
            r.name,
            r.report.max_rel_err(),
            r.report.rtol,
            r.report.entries.len()
        );
        for f in r.report.failures() {
            println!("     {}: {:.3e}", f.name, f.max_rel_err);
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<u8> {
    let run = resolve(&cli)?;
    write_run_header(&run, &run.out_dir)?;
    match &cli.command {
        Command::Generate { split, count } => generate(&run, *split, *count)?,
        Command::PretrainFlow => {
            let out = pretrain_flow(&run)?;
            println!(
                "best step {} val loss {:.5}; checkpoint {}",
                out.best_step,
                out.best_metric,
                out.best_path.display()
            );
        }
        Command::TrainDetect { init, .. } => {
            let init = init.as_deref().or(run.init_checkpoint.as_deref());
            let out = train_detect(&run, init)?;
            println!(
                "best step {} val AP {:.4}; checkpoint {}",
                out.best_step,
                out.best_metric,
                out.best_path.display()
            );
        }
        Command::Alternate => {
            let out = alternate_train(&run)?;
            for a in &out.audit {
                println!(
                    "audit {} {}.* from {}: {}",
                    a.stage,
                    a.namespace,
                    a.source_stage,
                    if a.ok() { "ok" } else { "MISMATCH" }
                );
            }
            for s in &out.stages {
                println!("{}: best step {} metric {:.5}", s.tag, s.best_step, s.best_metric);
            }
        }
        Command::EvalFlow { checkpoint, split } => eval_flow(&run, checkpoint, *split)?,
        Command::EvalDetect { checkpoint, split, .. } => eval_detect(&run, checkpoint, *split)?,
        Command::ExportPly { checkpoint, split, index } => {
            export_scene(&run, checkpoint.as_deref(), *split, *index)?
        }
        Command::GradCheck { op_rtol, model_rtol } => {
            if !grad_check(run.seed, *op_rtol, *model_rtol)? {
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Divergence { last_good: Some(p), .. } = &e {
                eprintln!("last good checkpoint: {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
