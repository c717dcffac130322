use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use driftlab::advection::AdvectionConfig;
use driftlab::dataset::{
    extract_pairs, read_predictions, split_trajectories, ChannelSchema, DatasetHandle,
    DatasetWriter, SplitName,
};
use driftlab::density::{load_density_map, DEFAULT_SIGMA};
use driftlab::ensemble::{
    load_trajectory, sample_deployments, simulate_probabilistic_trajectory, store_trajectory,
    DeploymentPlan, EnsembleConfig,
};
use driftlab::export::{export_map, MapExport};
use driftlab::grid::{
    downgrade_resolution, generate_synthetic_series, load_field_series, store_field_series,
    DomainGrid, FlowKind, LandLayout, SyntheticFlowSpec,
};
use driftlab::metrics::{
    evaluate_predictions, identity_baseline, position_space, LossKind, LossReport, OceanMask,
};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Trajectories simulated per batch before their files are written.
const SIM_BATCH: usize = 16;

#[derive(Parser)]
#[command(
    name = "driftlab",
    version,
    about = "Lagrangian drift ensembles, density maps and datasets"
)]
struct Cli {
    /// Seed for every random draw of the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (gen-flow) or directory (other subcommands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic velocity field series (VFLD).
    GenFlow(GenFlowArgs),
    /// Deploy particle ensembles and write one TRAJ file per trajectory.
    Simulate(SimulateArgs),
    /// Turn trajectories into a split dataset of consecutive-day density pairs.
    Dataset(DatasetArgs),
    /// Score the identity baseline or a prediction set on one split.
    Eval(EvalArgs),
    /// Export DMAP files or dataset samples as 16-bit PGM and CSV.
    ExportMaps(ExportArgs),
}

#[derive(Args)]
struct GenFlowArgs {
    /// uniform, solid-body-rotation, double-gyre or random-eddies.
    #[arg(long, default_value = "double-gyre")]
    kind: String,
    /// Speed scale in cells/day (angular rate in 1/day for solid-body-rotation).
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 40)]
    days: usize,
    #[arg(long, default_value_t = 64)]
    rows: usize,
    #[arg(long, default_value_t = 64)]
    cols: usize,
    /// Cell size in km (x and y unless --cell-km-y is given).
    #[arg(long, default_value_t = 1.3)]
    cell_km: f64,
    #[arg(long)]
    cell_km_y: Option<f64>,
    /// none, coast or island.
    #[arg(long, default_value = "none")]
    land: LandLayout,
    /// uniform: heading in degrees (0 = +x, 90 = +y).
    #[arg(long)]
    direction_deg: Option<f64>,
    /// solid-body-rotation: centre column.
    #[arg(long, requires = "center_y")]
    center_x: Option<f64>,
    /// solid-body-rotation: centre row.
    #[arg(long, requires = "center_x")]
    center_y: Option<f64>,
    /// double-gyre: oscillation strength.
    #[arg(long)]
    epsilon: Option<f64>,
    /// double-gyre: oscillation period in days.
    #[arg(long)]
    period_days: Option<f64>,
    /// random-eddies: number of eddies.
    #[arg(long)]
    eddies: Option<usize>,
    /// random-eddies: eddy radius in cells.
    #[arg(long)]
    eddy_scale: Option<f64>,
    /// random-eddies: eddy drift speed in cells/day.
    #[arg(long)]
    eddy_drift: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Velocity field series (VFLD).
    #[arg(long)]
    fields: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_traj: usize,
    /// Particles per ensemble.
    #[arg(long, default_value_t = 10_000)]
    np: usize,
    /// Initial perturbation radius in km.
    #[arg(long, default_value_t = 5.0)]
    radius_km: f64,
    #[arg(long, default_value_t = 0.25)]
    dt: f64,
    #[arg(long, default_value_t = 1.0)]
    save_interval: f64,
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// First deployment day (default: first day of the series).
    #[arg(long)]
    window_start: Option<f64>,
    /// Last deployment day (default: last day that leaves room for a full trajectory).
    #[arg(long)]
    window_end: Option<f64>,
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    traj_dir: PathBuf,
    /// Fields used for the current channels (default: the path recorded in run.json, as given
    /// to `simulate`).
    #[arg(long)]
    fields: Option<PathBuf>,
    /// Gaussian smoothing of the density maps, in cells.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// velocity or stream-proxy.
    #[arg(long, default_value = "velocity")]
    channels: String,
    /// Blur the current channels with this Gaussian sigma (cells) to mimic coarser inputs.
    #[arg(long)]
    downgrade_sigma: Option<f64>,
    /// Negate the current channels.
    #[arg(long)]
    invert_velocity: bool,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.70, 0.15, 0.15])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Prediction index JSON; the identity baseline is scored when absent.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Export D^t, D^{t+1}, prediction and drift maps for this many samples of the split.
    #[arg(long, default_value_t = 0)]
    export: usize,
}

#[derive(Args)]
struct ExportArgs {
    /// DMAP files to export.
    dmaps: Vec<PathBuf>,
    /// Treat the DMAP files as signed (drift) maps.
    #[arg(long)]
    signed: bool,
    /// Dataset whose samples to export.
    #[arg(long, requires = "samples")]
    dataset: Option<PathBuf>,
    /// Sample indices to export from --dataset.
    #[arg(long, value_delimiter = ',')]
    samples: Vec<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be >= 1");
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building thread pool")?;
    pool.install(|| match &cli.command {
        Command::GenFlow(a) => gen_flow(a, cli.seed, cli.out.as_deref()),
        Command::Simulate(a) => simulate(a, cli.seed, &out_dir(&cli, "traj")),
        Command::Dataset(a) => dataset(a, cli.seed, &out_dir(&cli, "dataset")),
        Command::Eval(a) => eval(a, &out_dir(&cli, "eval")),
        Command::ExportMaps(a) => export_maps(a, &out_dir(&cli, "maps")),
    })
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_flow(a: &GenFlowArgs, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut kind = FlowKind::from_name(&a.kind)?;
    match &mut kind {
        FlowKind::Uniform { direction_deg } => {
            if let Some(d) = a.direction_deg {
                *direction_deg = d;
            }
        }
        FlowKind::SolidBodyRotation { center } => {
            if let (Some(x), Some(y)) = (a.center_x, a.center_y) {
                *center = Some((x, y));
            }
        }
        FlowKind::DoubleGyre {
            epsilon,
            period_days,
        } => {
            if let Some(e) = a.epsilon {
                *epsilon = e;
            }
            if let Some(p) = a.period_days {
                *period_days = p;
            }
        }
        FlowKind::RandomEddies {
            count,
            scale_cells,
            drift_cells_per_day,
        } => {
            if let Some(c) = a.eddies {
                *count = c;
            }
            if let Some(s) = a.eddy_scale {
                *scale_cells = s;
            }
            if let Some(d) = a.eddy_drift {
                *drift_cells_per_day = d;
            }
        }
    }
    let grid = DomainGrid::with_layout(
        a.rows,
        a.cols,
        [a.cell_km, a.cell_km_y.unwrap_or(a.cell_km)],
        a.land,
    )?;
    let spec = SyntheticFlowSpec {
        kind,
        amplitude: a.amplitude,
        seed,
    };
    let series = generate_synthetic_series(&spec, &grid, a.days)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("fields.vfld"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    store_field_series(&series, &path)?;
    // read back through the validator
    let back = load_field_series(&path)?;

    let max_speed = (0..back.n_times())
        .flat_map(|k| {
            back.u(k)
                .iter()
                .zip(back.v(k).iter())
                .map(|(u, v)| u.hypot(*v))
                .collect::<Vec<_>>()
        })
        .fold(0.0f64, f64::max);
    println!("wrote {}", path.display());
    println!(
        "grid {}x{} cells of {}x{} km, {} ocean cells, land {:?}",
        grid.rows(),
        grid.cols(),
        grid.cell_size_km()[0],
        grid.cell_size_km()[1],
        grid.n_ocean(),
        a.land
    );
    println!(
        "flow {} amplitude {}, days {}..={}, max speed {:.4} cells/day",
        spec.kind,
        spec.amplitude,
        back.first_time(),
        back.last_time(),
        max_speed
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    fields: PathBuf,
    plan: DeploymentPlan,
    ensemble: EnsembleConfig,
    advection: AdvectionConfig,
    trajectories: Vec<TrajRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajRecord {
    id: u64,
    file: String,
    deploy_x: f64,
    deploy_y: f64,
    deploy_time: f64,
    deployed_count: usize,
    final_alive: usize,
}

fn simulate(a: &SimulateArgs, seed: u64, out: &Path) -> Result<()> {
    let series = load_field_series(&a.fields)?;
    let a_cfg = AdvectionConfig {
        substep_days: a.dt,
        save_interval_days: a.save_interval,
        max_duration_days: a.duration,
    };
    a_cfg.validate()?;
    let e_cfg = EnsembleConfig {
        n_particles: a.np,
        perturb_radius_km: a.radius_km,
        seed,
    };
    e_cfg.validate()?;
    let mut plan = DeploymentPlan::full_coverage(&series, &a_cfg, a.n_traj, seed);
    if let Some(s) = a.window_start {
        plan.time_window.0 = s;
    }
    if let Some(e) = a.window_end {
        plan.time_window.1 = e;
    }
    let starts = sample_deployments(&series, &plan, &a_cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut records = Vec::with_capacity(starts.len());
    for (b, batch) in starts.chunks(SIM_BATCH).enumerate() {
        let recs = batch
            .par_iter()
            .enumerate()
            .map(|(k, &(center, t0))| -> Result<TrajRecord> {
                let id = (b * SIM_BATCH + k) as u64;
                let traj = simulate_probabilistic_trajectory(
                    &series,
                    center,
                    t0,
                    &e_cfg.for_trajectory(id),
                    &a_cfg,
                )?;
                let file = format!("traj_{id:05}.traj");
                store_trajectory(&traj, out.join(&file))?;
                Ok(TrajRecord {
                    id,
                    file,
                    deploy_x: center.x,
                    deploy_y: center.y,
                    deploy_time: t0,
                    deployed_count: traj.deployed_count,
                    final_alive: traj.snapshots.last().map_or(0, |s| s.alive()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(recs);
    }

    let total_alive: usize = records.iter().map(|r| r.final_alive).sum();
    let total_deployed: usize = records.iter().map(|r| r.deployed_count).sum();
    write_json(
        &out.join("run.json"),
        &RunManifest {
            fields: a.fields.clone(),
            plan,
            ensemble: e_cfg,
            advection: a_cfg,
            trajectories: records,
        },
    )?;
    println!(
        "wrote {} trajectories to {} ({} of {} particles alive at the end)",
        a.n_traj,
        out.display(),
        total_alive,
        total_deployed
    );
    Ok(())
}

fn dataset(a: &DatasetArgs, seed: u64, out: &Path) -> Result<()> {
    let run_path = a.traj_dir.join("run.json");
    let run: RunManifest = serde_json::from_str(
        &fs::read_to_string(&run_path)
            .with_context(|| format!("reading {}", run_path.display()))?,
    )
    .with_context(|| format!("parsing {}", run_path.display()))?;
    let fields_path = a.fields.clone().unwrap_or_else(|| run.fields.clone());
    let mut series = load_field_series(&fields_path)?;
    if let Some(s) = a.downgrade_sigma {
        series = downgrade_resolution(&series, s)?;
    }
    if a.invert_velocity {
        series = series.negated();
    }
    let schema = ChannelSchema::from_name(&a.channels)?;
    ensure!(a.ratios.len() == 3, "--ratios takes three values");
    let ids: Vec<u64> = run.trajectories.iter().map(|t| t.id).collect();
    let split = split_trajectories(&ids, [a.ratios[0], a.ratios[1], a.ratios[2]], seed)?;

    let mut writer = DatasetWriter::create(out, &split, &series, a.sigma, schema)?;
    for batch in run.trajectories.chunks(SIM_BATCH) {
        let pairs = batch
            .par_iter()
            .map(|rec| -> Result<_> {
                let traj = load_trajectory(a.traj_dir.join(&rec.file))?;
                traj.validate(series.grid(), None)?;
                Ok(extract_pairs(&traj, rec.id, &series, a.sigma, schema)?)
            })
            .collect::<Result<Vec<_>>>()?;
        for pair in pairs.iter().flatten() {
            writer.push(pair)?;
        }
    }
    let manifest = writer.finish()?;
    // the exit status covers the format validator
    let handle = DatasetHandle::open(out)?;
    let counts = handle.sample_counts();
    println!(
        "wrote {} samples to {} (train/val/test trajectories {:?}, samples {:?})",
        manifest.n_samples,
        out.display(),
        split.sizes(),
        counts
    );
    Ok(())
}

#[derive(Serialize)]
struct SampleExports {
    index: usize,
    maps: Vec<MapExport>,
}

fn eval(a: &EvalArgs, out: &Path) -> Result<()> {
    let handle = DatasetHandle::open(&a.dataset)?;
    let which = SplitName::from_name(&a.split)?;
    let indices = handle.indices(which);
    ensure!(
        !indices.is_empty(),
        "split {} of {} has no samples",
        a.split,
        a.dataset.display()
    );
    let pairs = handle.load_split(which)?;
    let mask = OceanMask::from(handle.grid());

    let (kind, predictions) = match &a.predictions {
        None => (None, None),
        Some(path) => {
            let (kind, mut by_index) = read_predictions(path)?;
            ensure!(
                by_index.len() == indices.len(),
                "{} predictions for {} samples in split {}",
                by_index.len(),
                indices.len(),
                a.split
            );
            let preds = indices
                .iter()
                .map(|i| {
                    by_index
                        .remove(i)
                        .with_context(|| format!("no prediction for sample {i}"))
                })
                .collect::<Result<Vec<Array2<f64>>>>()?;
            (Some(kind), Some(preds))
        }
    };
    let (stem, report) = match (&kind, &predictions) {
        (Some(kind), Some(preds)) => ("report", evaluate_predictions(preds, &pairs, *kind, &mask)?),
        _ => ("identity", identity_baseline(&pairs, &mask)?),
    };
    report.store(out, stem)?;
    LossReport::load(out.join(format!("{stem}.json")))?;

    if a.export > 0 {
        let maps_dir = out.join("maps");
        let mut exported = Vec::new();
        for (k, pair) in pairs.iter().enumerate().take(a.export) {
            let index = indices[k];
            let d_hat = match (&kind, &predictions) {
                (Some(kind), Some(preds)) => position_space(&preds[k], pair, *kind, &mask)?,
                _ => pair.d_t.values().clone(),
            };
            let r = pair.target.values() - pair.d_t.values();
            let r_hat = &d_hat - pair.d_t.values();
            let name = |s: &str| format!("{index:06}_{s}");
            exported.push(SampleExports {
                index,
                maps: vec![
                    export_map(&maps_dir, &name("d_t"), pair.d_t.view(), false)?,
                    export_map(&maps_dir, &name("d_next"), pair.target.view(), false)?,
                    export_map(&maps_dir, &name("d_hat"), d_hat.view(), false)?,
                    export_map(&maps_dir, &name("r"), r.view(), true)?,
                    export_map(&maps_dir, &name("r_hat"), r_hat.view(), true)?,
                ],
            });
        }
        write_json(&maps_dir.join("exports.json"), &exported)?;
    }

    println!(
        "{} on {} split: n = {}, mean = {:.6e}, std = {:.6e} ({} scored in position space)",
        stem,
        a.split,
        report.n,
        report.mean,
        report.std,
        kind.map_or("identity", LossKind::name)
    );
    Ok(())
}

fn export_maps(a: &ExportArgs, out: &Path) -> Result<()> {
    if a.dmaps.is_empty() && a.dataset.is_none() {
        bail!("nothing to export: pass DMAP files or --dataset with --samples");
    }
    let mut exported: BTreeMap<String, MapExport> = BTreeMap::new();
    for path in &a.dmaps {
        let values = load_density_map(path)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("bad file name {}", path.display()))?
            .to_string();
        ensure!(!exported.contains_key(&name), "two inputs named {name}");
        exported.insert(
            name.clone(),
            export_map(out, &name, values.view(), a.signed)?,
        );
    }
    if let Some(dir) = &a.dataset {
        let handle = DatasetHandle::open(dir)?;
        for &index in &a.samples {
            let pair = handle.load_pair(index)?;
            let r = pair.target.values() - pair.d_t.values();
            for (suffix, values, signed) in [
                ("d_t", pair.d_t.values(), false),
                ("d_next", pair.target.values(), false),
                ("r", &r, true),
            ] {
                let name = format!("{index:06}_{suffix}");
                exported.insert(name.clone(), export_map(out, &name, values.view(), signed)?);
            }
        }
    }
    write_json(&out.join("exports.json"), &exported)?;
    println!("exported {} maps to {}", exported.len(), out.display());
    Ok(())
}
