//! Probabilistic trajectories: perturbed particle clouds advected together.
//!
//! Randomness enters only through the initial positions; advection itself is deterministic.
//! Every trajectory draws from its own ChaCha stream seeded with `seed ^ trajectory_index`, so
//! results do not depend on evaluation order or thread count.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advection::{
    advect_trajectory, check_boundary, AdvectionConfig, Particle, ParticleStatus,
};
use crate::binio::{self, ByteReader, PutLe};
use crate::error::{Error, Result};
use crate::grid::{DomainGrid, Position, VelocityFieldSeries};

const TRAJ_MAGIC: &[u8; 4] = b"TRAJ";
const TRAJ_VERSION: u32 = 1;

/// ChaCha stream used for deployment (centre, time) draws.
const SAMPLE_STREAM: u64 = 0;
/// ChaCha stream used for initial-position perturbations.
const PERTURB_STREAM: u64 = 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_particles: usize,
    pub perturb_radius_km: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_particles: 10_000,
            perturb_radius_km: 5.0,
            seed: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be >= 1".into()));
        }
        if !(self.perturb_radius_km >= 0.0 && self.perturb_radius_km.is_finite()) {
            return Err(Error::Config(format!(
                "perturbation radius must be finite and >= 0, got {}",
                self.perturb_radius_km
            )));
        }
        Ok(())
    }

    /// Same configuration with the seed mixed for trajectory `index`.
    pub fn for_trajectory(&self, index: u64) -> Self {
        EnsembleConfig {
            seed: self.seed ^ index,
            ..*self
        }
    }
}

/// Alive particle positions at one save time. Positions are stored at f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub day: f64,
    pub positions: Vec<[f32; 2]>,
}

impl Snapshot {
    pub fn alive(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilisticTrajectory {
    pub deploy_pos: Position,
    pub deploy_time: f64,
    /// Particles alive at the deployment time, after discards.
    pub deployed_count: usize,
    pub snapshots: Vec<Snapshot>,
}

impl ProbabilisticTrajectory {
    pub fn alive_counts(&self) -> Vec<usize> {
        self.snapshots.iter().map(Snapshot::alive).collect()
    }

    /// Checks count bounds, monotone attrition and that every position is in water.
    pub fn validate(&self, grid: &DomainGrid, n_particles: Option<usize>) -> Result<()> {
        if let Some(n) = n_particles {
            if self.deployed_count > n {
                return Err(Error::Data(format!(
                    "deployed_count {} exceeds n_particles {n}",
                    self.deployed_count
                )));
            }
        }
        let mut prev = self.deployed_count;
        for (k, snap) in self.snapshots.iter().enumerate() {
            if snap.alive() > prev {
                return Err(Error::Data(format!(
                    "alive count rises to {} at snapshot {k}",
                    snap.alive()
                )));
            }
            prev = snap.alive();
            if let Some(p) = snap.positions.iter().find(|&&p| {
                let p = Position::from(p);
                !grid.is_ocean_at(p.x, p.y)
            }) {
                return Err(Error::Data(format!(
                    "snapshot {k} position {p:?} is not in an ocean cell"
                )));
            }
        }
        Ok(())
    }
}

/// Draws `n_particles` points uniformly over the disk of `perturb_radius_km` around `center`
/// and keeps those that start alive (ocean, off the open boundary).
pub fn perturb_initial(
    center: Position,
    cfg: &EnsembleConfig,
    grid: &DomainGrid,
) -> Result<Vec<Position>> {
    cfg.validate()?;
    if !grid.is_ocean_at(center.x, center.y) {
        return Err(Error::NotOcean {
            x: center.x,
            y: center.y,
        });
    }
    let (rx, ry) = grid.km_to_cells(cfg.perturb_radius_km);
    let mut rng = stream_rng(cfg.seed, PERTURB_STREAM);
    let mut out = Vec::with_capacity(cfg.n_particles);
    for _ in 0..cfg.n_particles {
        let r = rng.random::<f64>().sqrt();
        let theta = 2.0 * PI * rng.random::<f64>();
        let p = Position::new(
            center.x + rx * r * theta.cos(),
            center.y + ry * r * theta.sin(),
        );
        if check_boundary(grid, p) == ParticleStatus::Alive {
            out.push(p);
        }
    }
    Ok(out)
}

/// Perturbs, advects every particle independently and collects daily alive snapshots.
pub fn simulate_probabilistic_trajectory(
    series: &VelocityFieldSeries,
    center: Position,
    t0: f64,
    e_cfg: &EnsembleConfig,
    a_cfg: &AdvectionConfig,
) -> Result<ProbabilisticTrajectory> {
    a_cfg.validate()?;
    let starts = perturb_initial(center, e_cfg, series.grid())?;
    let runs = starts
        .par_iter()
        .map(|&p| advect_trajectory(series, Particle::alive(p), t0, a_cfg))
        .collect::<Result<Vec<_>>>()?;

    let n_snapshots = a_cfg.n_saves() + 1;
    let snapshots = (0..n_snapshots)
        .map(|k| Snapshot {
            day: t0 + k as f64 * a_cfg.save_interval_days,
            positions: runs
                .iter()
                .filter_map(|records| records.get(k))
                .filter(|(_, p)| p.is_alive())
                .map(|(_, p)| [binio::f32_same_cell(p.pos.x), binio::f32_same_cell(p.pos.y)])
                .collect(),
        })
        .collect();

    Ok(ProbabilisticTrajectory {
        deploy_pos: center,
        deploy_time: t0,
        deployed_count: starts.len(),
        snapshots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub n_trajectories: usize,
    /// Inclusive range of whole-day deployment times.
    pub time_window: (f64, f64),
    pub seed: u64,
}

impl DeploymentPlan {
    /// Widest window over `series` that still leaves room for a full trajectory.
    pub fn full_coverage(
        series: &VelocityFieldSeries,
        a_cfg: &AdvectionConfig,
        n_trajectories: usize,
        seed: u64,
    ) -> Self {
        DeploymentPlan {
            n_trajectories,
            time_window: (
                series.first_time(),
                series.last_time() - a_cfg.max_duration_days,
            ),
            seed,
        }
    }
}

/// Draws the (centre, deployment day) pair of every trajectory in `plan`.
///
/// Centres are uniform over cells where a particle can start alive (ocean cells off the open
/// boundary), then uniform within the chosen cell. Days are uniform over whole-day stamps of the
/// series inside the window.
pub fn sample_deployments(
    series: &VelocityFieldSeries,
    plan: &DeploymentPlan,
    a_cfg: &AdvectionConfig,
) -> Result<Vec<(Position, f64)>> {
    a_cfg.validate()?;
    let (first, last) = plan.time_window;
    const EPS: f64 = 1e-9;
    if last.is_nan() || first.is_nan() || last < first {
        return Err(Error::Config(format!(
            "empty deployment window ({first}, {last})"
        )));
    }
    if first < series.first_time() - EPS
        || last + a_cfg.max_duration_days > series.last_time() + EPS
    {
        return Err(Error::Config(format!(
            "window ({first}, {last}) plus {} days exceeds field coverage ({}, {})",
            a_cfg.max_duration_days,
            series.first_time(),
            series.last_time()
        )));
    }
    let days: Vec<f64> = series
        .times()
        .iter()
        .copied()
        .filter(|&t| t >= first - EPS && t <= last + EPS && t.fract() == 0.0)
        .collect();
    if days.is_empty() {
        return Err(Error::Config(format!(
            "no whole-day stamps inside window ({first}, {last})"
        )));
    }
    let grid = series.grid();
    let cells: Vec<(usize, usize)> = grid
        .ocean_cells()
        .filter(|&(i, j)| !grid.is_open_boundary(i, j))
        .collect();
    if cells.is_empty() {
        return Err(Error::Config("grid has no interior ocean cell".into()));
    }

    Ok((0..plan.n_trajectories)
        .map(|k| {
            let mut rng = stream_rng(plan.seed ^ k as u64, SAMPLE_STREAM);
            let (i, j) = cells[rng.random_range(0..cells.len())];
            let center = Position::new(
                j as f64 + rng.random::<f64>(),
                i as f64 + rng.random::<f64>(),
            );
            let t0 = days[rng.random_range(0..days.len())];
            (center, t0)
        })
        .collect())
}

/// Samples and simulates every trajectory of `plan`, in index order.
pub fn deploy(
    series: &VelocityFieldSeries,
    plan: &DeploymentPlan,
    e_cfg: &EnsembleConfig,
    a_cfg: &AdvectionConfig,
) -> Result<Vec<ProbabilisticTrajectory>> {
    e_cfg.validate()?;
    let starts = sample_deployments(series, plan, a_cfg)?;
    starts
        .par_iter()
        .enumerate()
        .map(|(k, &(center, t0))| {
            simulate_probabilistic_trajectory(
                series,
                center,
                t0,
                &e_cfg.for_trajectory(k as u64),
                a_cfg,
            )
        })
        .collect()
}

pub fn encode_trajectory(traj: &ProbabilisticTrajectory) -> Result<Vec<u8>> {
    let n_pos: usize = traj.snapshots.iter().map(Snapshot::alive).sum();
    let mut buf = Vec::with_capacity(40 + 12 * traj.snapshots.len() + 8 * n_pos);
    buf.extend_from_slice(TRAJ_MAGIC);
    buf.put_u32(TRAJ_VERSION);
    buf.put_f64(traj.deploy_pos.x);
    buf.put_f64(traj.deploy_pos.y);
    buf.put_f64(traj.deploy_time);
    buf.put_u32(binio::checked_u32(traj.deployed_count, "deployed_count")?);
    buf.put_u32(binio::checked_u32(traj.snapshots.len(), "n_snapshots")?);
    for snap in &traj.snapshots {
        buf.put_f64(snap.day);
        buf.put_u32(binio::checked_u32(snap.alive(), "alive")?);
        for &[x, y] in &snap.positions {
            buf.put_f32(x);
            buf.put_f32(y);
        }
    }
    Ok(buf)
}

pub fn decode_trajectory(bytes: &[u8], path: &Path) -> Result<ProbabilisticTrajectory> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(TRAJ_MAGIC)?;
    r.version(TRAJ_VERSION)?;
    let deploy_pos = Position::new(r.f64()?, r.f64()?);
    let deploy_time = r.f64()?;
    let deployed_count = r.u32()? as usize;
    let n_snapshots = r.u32()? as usize;
    let mut snapshots = Vec::with_capacity(n_snapshots.min(1 << 16));
    for k in 0..n_snapshots {
        let day = r.f64()?;
        let alive = r.u32()? as usize;
        if alive > deployed_count {
            return Err(r.error(format!(
                "snapshot {k} has {alive} particles, more than the {deployed_count} deployed"
            )));
        }
        let flat = r.f32_vec(alive * 2)?;
        let positions = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        snapshots.push(Snapshot { day, positions });
    }
    r.finish()?;
    Ok(ProbabilisticTrajectory {
        deploy_pos,
        deploy_time,
        deployed_count,
        snapshots,
    })
}

pub fn store_trajectory(traj: &ProbabilisticTrajectory, path: impl AsRef<Path>) -> Result<()> {
    binio::write_file(path.as_ref(), &encode_trajectory(traj)?)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<ProbabilisticTrajectory> {
    let path = path.as_ref();
    decode_trajectory(&binio::read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_synthetic_series, FlowKind, SyntheticFlowSpec};
    use ndarray::Array2;

    fn series(
        grid: &DomainGrid,
        kind: FlowKind,
        amplitude: f64,
        days: usize,
    ) -> VelocityFieldSeries {
        let spec = SyntheticFlowSpec {
            kind,
            amplitude,
            seed: 5,
        };
        generate_synthetic_series(&spec, grid, days).unwrap()
    }

    fn ocean(rows: usize, cols: usize) -> DomainGrid {
        DomainGrid::all_ocean(rows, cols, [1.3, 1.3]).unwrap()
    }

    #[test]
    fn zero_radius_gives_copies() {
        let g = ocean(20, 20);
        let cfg = EnsembleConfig {
            n_particles: 50,
            perturb_radius_km: 0.0,
            seed: 1,
        };
        let c = Position::new(10.3, 9.7);
        let pts = perturb_initial(c, &cfg, &g).unwrap();
        assert_eq!(pts.len(), 50);
        assert!(pts.iter().all(|&p| p == c));
    }

    #[test]
    fn open_water_disk_keeps_everyone_within_radius() {
        let g = DomainGrid::all_ocean(30, 30, [1.3, 2.0]).unwrap();
        let cfg = EnsembleConfig {
            n_particles: 10_000,
            perturb_radius_km: 5.0,
            seed: 9,
        };
        let c = Position::new(15.0, 15.0);
        let pts = perturb_initial(c, &cfg, &g).unwrap();
        assert_eq!(pts.len(), 10_000);
        let worst = pts
            .iter()
            .map(|p| ((p.x - c.x) * 1.3).hypot((p.y - c.y) * 2.0))
            .fold(0.0, f64::max);
        assert!(worst <= 5.0 + 1e-9, "{worst}");
    }

    #[test]
    fn coastline_bisecting_disk_keeps_half() {
        let mut land = Array2::from_elem((30, 30), false);
        for i in 0..30 {
            for j in 15..30 {
                land[[i, j]] = true;
            }
        }
        let g = DomainGrid::new([1.3, 1.3], land).unwrap();
        let n = 10_000usize;
        let cfg = EnsembleConfig {
            n_particles: n,
            perturb_radius_km: 5.0,
            seed: 2,
        };
        let pts = perturb_initial(Position::new(14.999_999, 15.0), &cfg, &g).unwrap();
        let frac = pts.len() as f64 / n as f64;
        let sd = (0.25 / n as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sd, "kept fraction {frac}");
    }

    #[test]
    fn center_on_land_is_rejected() {
        let mut land = Array2::from_elem((5, 5), false);
        land[[2, 2]] = true;
        let g = DomainGrid::new([1.0, 1.0], land).unwrap();
        let err =
            perturb_initial(Position::new(2.5, 2.5), &EnsembleConfig::default(), &g).unwrap_err();
        assert!(matches!(err, Error::NotOcean { .. }));
        let bad = EnsembleConfig {
            n_particles: 0,
            ..Default::default()
        };
        assert!(perturb_initial(Position::new(1.5, 1.5), &bad, &g).is_err());
    }

    #[test]
    fn zero_flow_snapshots_are_static() {
        let g = ocean(20, 20);
        let s = series(&g, FlowKind::Uniform { direction_deg: 0.0 }, 0.0, 31);
        let cfg = EnsembleConfig {
            n_particles: 200,
            perturb_radius_km: 5.0,
            seed: 3,
        };
        let t = simulate_probabilistic_trajectory(
            &s,
            Position::new(10.0, 10.0),
            0.0,
            &cfg,
            &AdvectionConfig::default(),
        )
        .unwrap();
        assert_eq!(t.snapshots.len(), 31);
        assert!(t
            .snapshots
            .iter()
            .all(|s| s.positions == t.snapshots[0].positions));
        assert_eq!(t.snapshots[0].alive(), t.deployed_count);
        t.validate(&g, Some(200)).unwrap();
    }

    #[test]
    fn uniform_flow_drains_by_analytic_day() {
        let g = ocean(20, 40);
        let s = series(&g, FlowKind::Uniform { direction_deg: 0.0 }, 2.0, 31);
        let cfg = EnsembleConfig {
            n_particles: 500,
            perturb_radius_km: 5.0,
            seed: 4,
        };
        let center = Position::new(20.0, 10.0);
        let t =
            simulate_probabilistic_trajectory(&s, center, 0.0, &cfg, &AdvectionConfig::default())
                .unwrap();
        // the far (trailing) edge of the disk starts at x = 20 - 5/1.3 and must reach x = 39
        let trailing = center.x - 5.0 / 1.3;
        let crossing_day = ((39.0 - trailing) / 2.0).ceil() as usize;
        let counts = t.alive_counts();
        assert_eq!(counts[crossing_day], 0, "{counts:?}");
        assert!(counts[crossing_day - 2] > 0);
        assert!(counts.windows(2).all(|w| w[1] <= w[0]));
        t.validate(&g, Some(500)).unwrap();
    }

    #[test]
    fn coincident_particles_stay_coincident() {
        let g = ocean(48, 48);
        let s = series(
            &g,
            FlowKind::RandomEddies {
                count: 5,
                scale_cells: 8.0,
                drift_cells_per_day: 0.05,
            },
            0.3,
            31,
        );
        let cfg = EnsembleConfig {
            n_particles: 20,
            perturb_radius_km: 0.0,
            seed: 0,
        };
        let t = simulate_probabilistic_trajectory(
            &s,
            Position::new(24.0, 24.0),
            0.0,
            &cfg,
            &AdvectionConfig::default(),
        )
        .unwrap();
        for snap in &t.snapshots {
            let first = snap.positions[0];
            assert!(snap.positions.iter().all(|p| {
                let a = Position::from(*p);
                a.distance(Position::from(first)) < 1e-9
            }));
        }
        assert_eq!(t.snapshots[30].alive(), 20);
    }

    #[test]
    fn simulation_is_reproducible() {
        let g =
            DomainGrid::with_layout(32, 32, [1.3, 1.3], crate::grid::LandLayout::Coast).unwrap();
        let s = series(&g, FlowKind::from_name("double_gyre").unwrap(), 1.0, 31);
        let cfg = EnsembleConfig {
            n_particles: 300,
            perturb_radius_km: 5.0,
            seed: 77,
        };
        let run = || {
            simulate_probabilistic_trajectory(
                &s,
                Position::new(12.0, 14.0),
                0.0,
                &cfg,
                &AdvectionConfig::default(),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(
            encode_trajectory(&a).unwrap(),
            encode_trajectory(&run()).unwrap()
        );
        a.validate(&g, Some(300)).unwrap();
    }

    #[test]
    fn deployment_window_arithmetic() {
        let g = ocean(6, 6);
        let times: Vec<f64> = (1..=365).map(|d| d as f64).collect();
        let z = vec![Array2::zeros((6, 6)); 365];
        let s = VelocityFieldSeries::new(g.clone(), times, z.clone(), z).unwrap();
        let a = AdvectionConfig::default();
        let plan = DeploymentPlan::full_coverage(&s, &a, 3000, 1);
        assert_eq!(plan.time_window, (1.0, 335.0));
        let draws = sample_deployments(&s, &plan, &a).unwrap();
        let max_t0 = draws.iter().map(|d| d.1).fold(f64::MIN, f64::max);
        assert_eq!(max_t0, 335.0);
        for (c, t0) in &draws {
            assert!(*t0 >= 1.0 && *t0 <= 335.0 && t0.fract() == 0.0);
            assert_eq!(check_boundary(&g, *c), ParticleStatus::Alive);
        }

        let too_late = DeploymentPlan {
            time_window: (1.0, 336.0),
            ..plan
        };
        assert!(sample_deployments(&s, &too_late, &a).is_err());
        let inverted = DeploymentPlan {
            time_window: (10.0, 5.0),
            ..plan
        };
        assert!(sample_deployments(&s, &inverted, &a).is_err());
        let between_days = DeploymentPlan {
            time_window: (3.2, 3.7),
            ..plan
        };
        assert!(sample_deployments(&s, &between_days, &a).is_err());
    }

    #[test]
    fn deploy_is_order_independent() {
        let g =
            DomainGrid::with_layout(24, 24, [1.3, 1.3], crate::grid::LandLayout::Island).unwrap();
        let s = series(&g, FlowKind::from_name("random_eddies").unwrap(), 1.0, 20);
        let a = AdvectionConfig {
            max_duration_days: 10.0,
            ..Default::default()
        };
        let e = EnsembleConfig {
            n_particles: 40,
            perturb_radius_km: 3.0,
            seed: 21,
        };
        let plan = DeploymentPlan::full_coverage(&s, &a, 6, 8);
        assert!(deploy(
            &s,
            &DeploymentPlan {
                n_trajectories: 0,
                ..plan
            },
            &e,
            &a
        )
        .unwrap()
        .is_empty());

        let all = deploy(&s, &plan, &e, &a).unwrap();
        let draws = sample_deployments(&s, &plan, &a).unwrap();
        // each trajectory can be recomputed alone, in reverse order, from its index
        for k in (0..6).rev() {
            let (c, t0) = draws[k];
            let single =
                simulate_probabilistic_trajectory(&s, c, t0, &e.for_trajectory(k as u64), &a)
                    .unwrap();
            assert_eq!(single, all[k]);
            single.validate(&g, Some(40)).unwrap();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let serial = pool.install(|| deploy(&s, &plan, &e, &a).unwrap());
        assert_eq!(serial, all);
    }

    #[test]
    fn traj_rejects_garbage() {
        let t = ProbabilisticTrajectory {
            deploy_pos: Position::new(1.0, 2.0),
            deploy_time: 3.0,
            deployed_count: 1,
            snapshots: vec![Snapshot {
                day: 3.0,
                positions: vec![[1.0, 2.0]],
            }],
        };
        let mut bytes = encode_trajectory(&t).unwrap();
        assert_eq!(decode_trajectory(&bytes, Path::new("t")).unwrap(), t);
        bytes[4] = 9;
        assert!(decode_trajectory(&bytes, Path::new("t")).is_err());
        let bytes = encode_trajectory(&t).unwrap();
        assert!(decode_trajectory(&bytes[..bytes.len() - 2], Path::new("t")).is_err());
        let mut more = bytes.clone();
        more.push(0);
        assert!(decode_trajectory(&more, Path::new("t")).is_err());
    }
}
