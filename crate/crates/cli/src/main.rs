use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gazereg::flow::{aggregate_with_occlusion, estimate_flow_blockmatch, occlusion_check, BlockMatchProvider, FlowField, OcclusionParams};
use gazereg::gaze::{align_window, parse_gaze_csv, parse_manifest, AlignMode};
use gazereg::heatmap::{binarize, gaussian_splat};
use gazereg::patch::{distributions_to_json, gaze_distribution, GazeDistribution, PatchGrid};
use gazereg::pipeline::{
    evaluate_params, grad_check, load_data, load_trained, save_trained, sweep, train, QueryMode, RunConfig, Runner, SweepAxis,
};
use gazereg::synth::{bayes_ceiling, write_dataset, Split};
use gazereg::{Error, Result};

#[derive(Parser)]
#[command(name = "gazereg", version, about = "Gaze-regularized attention on a synthetic anticipation task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set lambda=1000 --set data.tau_o=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    query_mode: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.sets)?;
        if let Some(q) = &self.query_mode {
            cfg.query_mode = QueryMode::parse(q)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset for the configured seed.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gaze heatmaps and patch distributions for every frame of a manifest.
    Heatmap {
        #[arg(long)]
        gaze: PathBuf,
        /// JSON list of frames (frame_id, timestamp_ms, image_path, width, height).
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value = "aggregated")]
        mode: String,
        #[arg(long, default_value_t = 200)]
        delta_ms: i64,
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 4)]
        grid_h: usize,
        #[arg(long, default_value_t = 4)]
        grid_v: usize,
        /// Drop gaze from occluded earlier frames using block-matching flow
        /// on the manifest images.
        #[arg(long)]
        occlusion: bool,
        #[arg(long, default_value_t = 20.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.6)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-backward consistency verdict for a flow pair, given as GFL
    /// files or estimated from two images.
    OcclusionCheck {
        #[arg(long, requires = "bwd")]
        fwd: Option<PathBuf>,
        #[arg(long, requires = "fwd")]
        bwd: Option<PathBuf>,
        #[arg(long, requires = "target", conflicts_with = "fwd")]
        earlier: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        block: usize,
        #[arg(long, default_value_t = 8)]
        search: usize,
        #[arg(long, default_value_t = 20.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.6)]
        eta: f64,
    },
    /// Train one run and write its checkpoint directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split and print the JSON report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of every trainable parameter.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 2)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train and evaluate one run per axis value (mean over `seeds`); writes CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated values; may be empty.
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}"))),
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn read_flow(path: &Path) -> Result<FlowField> {
    let mut f = fs::File::open(path)?;
    FlowField::read_from(&mut f, 0, 1)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let ds = load_data(&RunConfig { data_dir: None, ..cfg.clone() })?;
            write_dataset(&ds, &out)?;
            print_json(&serde_json::json!({
                "out": out,
                "seed": cfg.seed,
                "train": ds.train.len(),
                "val": ds.val.len(),
                "test": ds.test.len(),
                "bayes_ceiling": bayes_ceiling(&cfg.data)?,
            }))
        }
        Cmd::Heatmap { gaze, frames, mode, delta_ms, sigma, tau, grid_h, grid_v, occlusion, epsilon, eta, out } => {
            let track = parse_gaze_csv(&fs::read(&gaze)?)?;
            let frames_list = parse_manifest(&fs::read(&frames)?)?;
            let mode = match mode.as_str() {
                "singular" => AlignMode::Singular,
                "aggregated" => AlignMode::Aggregated,
                m => return Err(Error::Config(format!("unknown alignment mode {m:?}"))),
            };
            let root = frames.parent().map(Path::to_path_buf).unwrap_or_default();
            let provider = BlockMatchProvider { root, block: 8, search: 8 };
            let params = OcclusionParams { epsilon_px: epsilon, eta_threshold: eta, ..OcclusionParams::default() };
            fs::create_dir_all(&out)?;
            let mut dists: Vec<GazeDistribution> = Vec::new();
            let mut summary = Vec::new();
            for f in &frames_list {
                let grid = PatchGrid::for_image(f.width, f.height, grid_h, grid_v)?;
                let (window, dropped) = if occlusion && mode == AlignMode::Aggregated {
                    let agg = aggregate_with_occlusion(&track, &frames_list, f, delta_ms, &provider, &params)?;
                    (Some(agg.window), agg.dropped_samples)
                } else {
                    (align_window(&track, f, mode, delta_ms).ok(), 0)
                };
                let d = match &window {
                    Some(w) if !w.is_empty() => {
                        let h = binarize(&gaussian_splat(w, f.width, f.height, sigma)?, tau)?;
                        h.write_to(&mut fs::File::create(out.join(format!("frame_{}.ghm", f.frame_id)))?)?;
                        gaze_distribution(&h, &grid)?
                    }
                    _ => GazeDistribution::uniform(grid.n_patches(), f.frame_id),
                };
                summary.push(serde_json::json!({
                    "frame_id": f.frame_id,
                    "samples": window.as_ref().map_or(0, |w| w.selected.len()),
                    "dropped_samples": dropped,
                    "fallback": d.fallback,
                }));
                dists.push(d);
            }
            fs::write(out.join("distributions.json"), serde_json::to_string_pretty(&distributions_to_json(&dists))?)?;
            print_json(&summary)
        }
        Cmd::OcclusionCheck { fwd, bwd, earlier, target, block, search, epsilon, eta } => {
            let (f, b) = match (fwd, bwd, earlier, target) {
                (Some(f), Some(b), _, _) => (read_flow(&f)?, read_flow(&b)?),
                (_, _, Some(e), Some(t)) => {
                    let a = gazereg::container::load_image(&e)?;
                    let c = gazereg::container::load_image(&t)?;
                    (estimate_flow_blockmatch(&a, &c, block, search)?, estimate_flow_blockmatch(&c, &a, block, search)?)
                }
                _ => return Err(Error::Config("give --fwd/--bwd or --earlier/--target".into())),
            };
            let params = OcclusionParams { epsilon_px: epsilon, eta_threshold: eta, ..OcclusionParams::default() };
            print_json(&occlusion_check(&f, &b, &params)?)
        }
        Cmd::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let data = load_data(&cfg)?;
            let t = train(&cfg, &data)?;
            save_trained(&t, &out)?;
            let last = t.log.steps.last().map(|s| s.loss);
            print_json(&serde_json::json!({
                "checkpoint": out,
                "config_hash": t.log.config_hash,
                "seed": cfg.seed,
                "steps": t.log.steps.len(),
                "final_loss": last,
            }))
        }
        Cmd::Eval { cfg, checkpoint, split } => {
            let cfg = cfg.load()?;
            let ck = load_trained(&checkpoint, &cfg)?;
            let data = load_data(&cfg)?;
            let report = evaluate_params(&cfg, ck.seed, &ck.params, ck.pseudo.as_ref(), &data, parse_split(&split)?)?;
            println!("{}", report.to_json());
            Ok(())
        }
        Cmd::GradCheck { cfg, samples, step, tol } => {
            let cfg = cfg.load()?;
            let report = grad_check(&cfg, samples, step)?;
            print_json(&report)?;
            let worst = report.max_rel_err();
            if worst < tol {
                Ok(())
            } else {
                Err(Error::numeric("grad-check", format!("max relative error {worst:e} exceeds {tol:e}")))
            }
        }
        Cmd::Sweep { cfg, axis, values, out, split } => {
            let cfg = cfg.load()?;
            let axis = SweepAxis::parse(&axis)?;
            let values: Vec<String> =
                values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
            let mut runner = Runner::new();
            runner.split = Some(parse_split(&split)?);
            let table = sweep(&runner, &cfg, axis, &values);
            let csv = table.to_csv();
            match out {
                Some(p) => fs::write(p, &csv)?,
                None => print!("{csv}"),
            }
            for row in &table.rows {
                if let Some(e) = &row.error {
                    eprintln!("{}={}: {e}", row.axis, row.value);
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
