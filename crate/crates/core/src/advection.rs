//! Space-time velocity sampling and fourth-order Runge-Kutta particle advection.
//!
//! Particles are terminated, never clamped: a step that leaves the domain box or touches land
//! marks the particle [`ParticleStatus::Escaped`] and keeps its pre-step position, and a step
//! ending in an ocean cell on the outermost ring marks it
//! [`ParticleStatus::OpenBoundaryContact`]. Terminated particles are never stepped again.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DomainGrid, Position, VelocityFieldSeries};

/// Relative slack when checking that the save interval is a whole number of substeps.
const MULTIPLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleStatus {
    Alive,
    /// Left the domain box or entered a land cell.
    Escaped,
    /// Reached an ocean cell on the open boundary.
    OpenBoundaryContact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub pos: Position,
    pub status: ParticleStatus,
}

impl Particle {
    pub fn alive(pos: Position) -> Self {
        Particle {
            pos,
            status: ParticleStatus::Alive,
        }
    }

    pub fn is_alive(&self) -> bool {
        self.status == ParticleStatus::Alive
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvectionConfig {
    pub substep_days: f64,
    pub save_interval_days: f64,
    pub max_duration_days: f64,
}

impl Default for AdvectionConfig {
    /// Six-hour substeps, daily saves, 30-day trajectories.
    fn default() -> Self {
        AdvectionConfig {
            substep_days: 0.25,
            save_interval_days: 1.0,
            max_duration_days: 30.0,
        }
    }
}

impl AdvectionConfig {
    pub fn validate(&self) -> Result<()> {
        let AdvectionConfig {
            substep_days: dt,
            save_interval_days: save,
            max_duration_days: max,
        } = *self;
        if !(dt > 0.0 && dt <= save && save <= max && max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < substep ({dt}) <= save interval ({save}) <= max duration ({max})"
            )));
        }
        let ratio = save / dt;
        if (ratio - ratio.round()).abs() > MULTIPLE_TOL * ratio {
            return Err(Error::Config(format!(
                "save interval {save} is not an integer multiple of substep {dt}"
            )));
        }
        Ok(())
    }

    pub fn substeps_per_save(&self) -> usize {
        (self.save_interval_days / self.substep_days).round() as usize
    }

    /// Number of save intervals after the initial record.
    pub fn n_saves(&self) -> usize {
        (self.max_duration_days / self.save_interval_days + MULTIPLE_TOL).floor() as usize
    }
}

/// Bilinear-in-space, linear-in-time velocity at a continuous position, in cells/day.
///
/// Values sit at cell centres `(j + 0.5, i + 0.5)`; between the outermost centres and the box
/// edge the nearest centre value is held. Times outside the series use the end fields.
pub fn sample_velocity(series: &VelocityFieldSeries, pos: Position, t: f64) -> Result<(f64, f64)> {
    let grid = series.grid();
    let (rows, cols) = grid.dim();
    let Position { x, y } = pos;
    if !(x >= 0.0 && y >= 0.0 && x <= cols as f64 && y <= rows as f64) {
        return Err(Error::OutsideDomain { x, y });
    }

    let (j0, wx) = bracket(x - 0.5, cols);
    let (i0, wy) = bracket(y - 0.5, rows);

    let n_times = series.n_times();
    let s = ((t - series.first_time()) / series.time_step()).clamp(0.0, (n_times - 1) as f64);
    let k0 = (s.floor() as usize).min(n_times - 2);
    let wt = s - k0 as f64;

    let at = |k: usize| {
        let lerp2 = |f: &ndarray::Array2<f64>| {
            let top = (1.0 - wx) * f[[i0, j0]] + wx * f[[i0, j0 + 1]];
            let bottom = (1.0 - wx) * f[[i0 + 1, j0]] + wx * f[[i0 + 1, j0 + 1]];
            (1.0 - wy) * top + wy * bottom
        };
        (lerp2(series.u(k)), lerp2(series.v(k)))
    };
    let (u0, v0) = at(k0);
    if wt == 0.0 {
        return Ok((u0, v0));
    }
    let (u1, v1) = at(k0 + 1);
    Ok(((1.0 - wt) * u0 + wt * u1, (1.0 - wt) * v0 + wt * v1))
}

/// Lower node index and weight along one axis of `n` centred nodes.
fn bracket(coord: f64, n: usize) -> (usize, f64) {
    let lo = coord.floor().clamp(0.0, (n - 2) as f64);
    (lo as usize, (coord - lo).clamp(0.0, 1.0))
}

/// Status a particle at `pos` would have.
pub fn check_boundary(grid: &DomainGrid, pos: Position) -> ParticleStatus {
    match grid.cell_of(pos.x, pos.y) {
        None => ParticleStatus::Escaped,
        Some((i, j)) if grid.is_land(i, j) => ParticleStatus::Escaped,
        Some((i, j)) if grid.is_open_boundary(i, j) => ParticleStatus::OpenBoundaryContact,
        Some(_) => ParticleStatus::Alive,
    }
}

/// One classic RK4 step of length `dt` days starting at time `t`.
pub fn rk4_step(series: &VelocityFieldSeries, particle: Particle, t: f64, dt: f64) -> Particle {
    if !particle.is_alive() {
        return particle;
    }
    let grid = series.grid();
    let p = particle.pos;
    let escaped = Particle {
        pos: p,
        status: ParticleStatus::Escaped,
    };
    let offset = |k: (f64, f64), h: f64| Position::new(p.x + h * k.0, p.y + h * k.1);
    // intermediate stages must stay in water; open-boundary cells are still water here
    let stage = |q: Position, tq: f64| -> Option<(f64, f64)> {
        if grid.is_ocean_at(q.x, q.y) {
            sample_velocity(series, q, tq).ok()
        } else {
            None
        }
    };

    let Some(k1) = stage(p, t) else {
        return escaped;
    };
    let Some(k2) = stage(offset(k1, dt / 2.0), t + dt / 2.0) else {
        return escaped;
    };
    let Some(k3) = stage(offset(k2, dt / 2.0), t + dt / 2.0) else {
        return escaped;
    };
    let Some(k4) = stage(offset(k3, dt), t + dt) else {
        return escaped;
    };

    let next = Position::new(
        p.x + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        p.y + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    );
    match check_boundary(grid, next) {
        ParticleStatus::Escaped => escaped,
        status => Particle { pos: next, status },
    }
}

/// Advects `start` from `t0`, recording the state at `t0` and after every save interval.
///
/// The list stops at the first record whose particle is terminated; that record carries the
/// terminal status and frozen position.
pub fn advect_trajectory(
    series: &VelocityFieldSeries,
    start: Particle,
    t0: f64,
    cfg: &AdvectionConfig,
) -> Result<Vec<(f64, Particle)>> {
    cfg.validate()?;
    let n_sub = cfg.substeps_per_save();
    let n_saves = cfg.n_saves();
    let dt = cfg.substep_days;

    let mut records = Vec::with_capacity(n_saves + 1);
    records.push((t0, start));
    let mut particle = start;
    for save in 0..n_saves {
        if !particle.is_alive() {
            break;
        }
        for sub in 0..n_sub {
            let t = t0 + (save * n_sub + sub) as f64 * dt;
            particle = rk4_step(series, particle, t, dt);
            if !particle.is_alive() {
                break;
            }
        }
        records.push((t0 + (save + 1) as f64 * cfg.save_interval_days, particle));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate_synthetic_series, FlowKind, SyntheticFlowSpec};
    use ndarray::Array2;
    use std::f64::consts::PI;

    fn ocean(rows: usize, cols: usize) -> DomainGrid {
        DomainGrid::all_ocean(rows, cols, [1.3, 1.3]).unwrap()
    }

    fn constant_series(grid: &DomainGrid, u: f64, v: f64, days: usize) -> VelocityFieldSeries {
        let times: Vec<f64> = (0..days).map(|d| d as f64).collect();
        VelocityFieldSeries::new(
            grid.clone(),
            times,
            vec![Array2::from_elem(grid.dim(), u); days],
            vec![Array2::from_elem(grid.dim(), v); days],
        )
        .unwrap()
    }

    fn rotation(omega: f64, days: usize) -> VelocityFieldSeries {
        let spec = SyntheticFlowSpec {
            kind: FlowKind::SolidBodyRotation {
                center: Some((20.0, 20.0)),
            },
            amplitude: omega,
            seed: 0,
        };
        generate_synthetic_series(&spec, &ocean(40, 40), days).unwrap()
    }

    #[test]
    fn sample_at_nodes_and_midpoints() {
        let g = ocean(4, 4);
        let mut u0 = Array2::zeros((4, 4));
        u0[[1, 1]] = 2.0;
        u0[[1, 2]] = 4.0;
        let mut u1 = u0.clone();
        u1[[1, 1]] = 6.0;
        let v = Array2::from_elem((4, 4), 0.5);
        let s =
            VelocityFieldSeries::new(g, vec![0.0, 1.0], vec![u0, u1], vec![v.clone(), v]).unwrap();

        assert_eq!(
            sample_velocity(&s, Position::new(1.5, 1.5), 0.0).unwrap(),
            (2.0, 0.5)
        );
        assert_eq!(
            sample_velocity(&s, Position::new(2.0, 1.5), 0.0).unwrap(),
            (3.0, 0.5)
        );
        // cell (1,1) goes 2 -> 6 between day 0 and day 1
        assert_eq!(
            sample_velocity(&s, Position::new(1.5, 1.5), 0.5).unwrap().0,
            4.0
        );
        // clamped in time
        assert_eq!(
            sample_velocity(&s, Position::new(1.5, 1.5), -3.0)
                .unwrap()
                .0,
            2.0
        );
        assert_eq!(
            sample_velocity(&s, Position::new(1.5, 1.5), 7.0).unwrap().0,
            6.0
        );
        assert!(matches!(
            sample_velocity(&s, Position::new(-0.1, 1.0), 0.0),
            Err(Error::OutsideDomain { .. })
        ));
        assert!(sample_velocity(&s, Position::new(4.0, 4.0), 0.0).is_ok());
    }

    #[test]
    fn sample_linear_in_time() {
        let g = ocean(3, 3);
        let s = VelocityFieldSeries::new(
            g.clone(),
            vec![0.0, 1.0, 2.0],
            vec![
                Array2::from_elem((3, 3), 0.0),
                Array2::from_elem((3, 3), 1.0),
                Array2::from_elem((3, 3), 3.0),
            ],
            vec![Array2::zeros((3, 3)); 3],
        )
        .unwrap();
        assert_eq!(
            sample_velocity(&s, Position::new(1.5, 1.5), 1.5).unwrap().0,
            2.0
        );
    }

    #[test]
    fn check_boundary_cases() {
        let mut land = Array2::from_elem((10, 10), false);
        land[[4, 4]] = true;
        let g = DomainGrid::new([1.0, 1.0], land).unwrap();
        assert_eq!(
            check_boundary(&g, Position::new(-0.1, 5.0)),
            ParticleStatus::Escaped
        );
        assert_eq!(
            check_boundary(&g, Position::new(10.0, 5.0)),
            ParticleStatus::Escaped
        );
        assert_eq!(
            check_boundary(&g, Position::new(4.5, 4.5)),
            ParticleStatus::Escaped
        );
        assert_eq!(
            check_boundary(&g, Position::new(9.5, 5.5)),
            ParticleStatus::OpenBoundaryContact
        );
        assert_eq!(
            check_boundary(&g, Position::new(5.5, 0.2)),
            ParticleStatus::OpenBoundaryContact
        );
        assert_eq!(
            check_boundary(&g, Position::new(5.5, 5.5)),
            ParticleStatus::Alive
        );
        assert_eq!(
            check_boundary(&g, Position::new(f64::NAN, 5.5)),
            ParticleStatus::Escaped
        );
    }

    #[test]
    fn uniform_step_is_exact() {
        let g = ocean(10, 10);
        let s = constant_series(&g, 1.0, 0.0, 3);
        let p = rk4_step(&s, Particle::alive(Position::new(3.3, 4.7)), 0.0, 0.25);
        assert_eq!(p.pos, Position::new(3.3 + 0.25, 4.7));
        assert!(p.is_alive());
    }

    #[test]
    fn step_into_land_escapes_and_freezes() {
        let mut land = Array2::from_elem((10, 10), false);
        land[[5, 6]] = true;
        let g = DomainGrid::new([1.0, 1.0], land).unwrap();
        let s = constant_series(&g, 1.0, 0.0, 3);
        let start = Position::new(5.9, 5.5);
        let p = rk4_step(&s, Particle::alive(start), 0.0, 0.25);
        assert_eq!(p.status, ParticleStatus::Escaped);
        assert_eq!(p.pos, start);
        // terminated particles are inert
        assert_eq!(rk4_step(&s, p, 0.25, 0.25), p);
    }

    #[test]
    fn half_step_stage_on_land_escapes() {
        // the midpoint stage at x = 7.0 already probes the land cell
        let mut land = Array2::from_elem((10, 10), false);
        land[[5, 7]] = true;
        let g = DomainGrid::new([1.0, 1.0], land).unwrap();
        let s = constant_series(&g, 4.0, 0.0, 3);
        let p = rk4_step(&s, Particle::alive(Position::new(6.5, 5.5)), 0.0, 0.25);
        assert_eq!(p.status, ParticleStatus::Escaped);
    }

    fn revolution_error(dt: f64) -> f64 {
        let s = rotation(2.0 * PI / 10.0, 12);
        let cfg = AdvectionConfig {
            substep_days: dt,
            save_interval_days: 10.0,
            max_duration_days: 10.0,
        };
        let start = Position::new(25.0, 20.0);
        let recs = advect_trajectory(&s, Particle::alive(start), 0.0, &cfg).unwrap();
        let (_, last) = recs.last().unwrap();
        assert!(last.is_alive());
        last.pos.distance(start)
    }

    #[test]
    fn rk4_order_on_rotation() {
        let errs: Vec<f64> = [0.5, 0.25, 0.125]
            .iter()
            .map(|&dt| revolution_error(dt))
            .collect();
        assert!(errs[1] < 1e-3, "error at dt=0.25: {}", errs[1]);
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 3.9, "order {order} from {errs:?}");
        }
    }

    #[test]
    fn zero_flow_trajectory() {
        let g = ocean(10, 10);
        let s = constant_series(&g, 0.0, 0.0, 31);
        let start = Particle::alive(Position::new(4.2, 5.1));
        let recs = advect_trajectory(&s, start, 0.0, &AdvectionConfig::default()).unwrap();
        assert_eq!(recs.len(), 31);
        assert!(recs.iter().all(|(_, p)| *p == start));
        assert_eq!(recs.last().unwrap().0, 30.0);
    }

    #[test]
    fn uniform_flow_hits_open_boundary_on_analytic_day() {
        let g = ocean(10, 10);
        let s = constant_series(&g, 1.0, 0.0, 31);
        // open-boundary column starts at x = 9; from x = 6.5 it is reached at t = 2.5
        let start = Particle::alive(Position::new(6.5, 5.5));
        let recs = advect_trajectory(&s, start, 0.0, &AdvectionConfig::default()).unwrap();
        assert_eq!(recs.len(), 4);
        let (day, last) = recs[3];
        assert_eq!(day, 3.0);
        assert_eq!(last.status, ParticleStatus::OpenBoundaryContact);
        assert_eq!(last.pos.x, 9.0);
        assert!(recs[..3].iter().all(|(_, p)| p.is_alive()));
    }

    #[test]
    fn config_validation() {
        let bad = AdvectionConfig {
            substep_days: 0.3,
            save_interval_days: 1.0,
            max_duration_days: 30.0,
        };
        assert!(bad.validate().is_err());
        let g = ocean(4, 4);
        let s = constant_series(&g, 0.0, 0.0, 2);
        assert!(
            advect_trajectory(&s, Particle::alive(Position::new(1.5, 1.5)), 0.0, &bad).is_err()
        );
        let inverted = AdvectionConfig {
            substep_days: 2.0,
            save_interval_days: 1.0,
            max_duration_days: 30.0,
        };
        assert!(inverted.validate().is_err());
        assert!(AdvectionConfig::default().validate().is_ok());
        assert_eq!(AdvectionConfig::default().n_saves(), 30);
        assert_eq!(AdvectionConfig::default().substeps_per_save(), 4);
    }

    #[test]
    fn time_reversal_on_static_flow() {
        let spec = SyntheticFlowSpec {
            kind: FlowKind::RandomEddies {
                count: 6,
                scale_cells: 6.0,
                drift_cells_per_day: 0.0,
            },
            amplitude: 0.8,
            seed: 11,
        };
        let s = generate_synthetic_series(&spec, &ocean(48, 48), 12).unwrap();
        let back = s.negated();
        let cfg = AdvectionConfig {
            substep_days: 0.0625,
            save_interval_days: 1.0,
            max_duration_days: 10.0,
        };
        for start in [
            Position::new(20.3, 24.1),
            Position::new(30.0, 15.5),
            Position::new(12.2, 33.3),
        ] {
            let fwd = advect_trajectory(&s, Particle::alive(start), 0.0, &cfg).unwrap();
            let (_, end) = *fwd.last().unwrap();
            assert!(end.is_alive());
            let rev = advect_trajectory(&back, end, 0.0, &cfg).unwrap();
            let (_, home) = *rev.last().unwrap();
            assert!(
                home.pos.distance(start) < 1e-6,
                "{:?} vs {:?}",
                home.pos,
                start
            );
        }
    }

    #[test]
    fn advection_is_deterministic() {
        let spec = SyntheticFlowSpec {
            kind: FlowKind::from_name("double_gyre").unwrap(),
            amplitude: 2.0,
            seed: 0,
        };
        let s = generate_synthetic_series(&spec, &ocean(32, 64), 31).unwrap();
        let start = Particle::alive(Position::new(20.0, 10.0));
        let a = advect_trajectory(&s, start, 0.0, &AdvectionConfig::default()).unwrap();
        let b = advect_trajectory(&s, start, 0.0, &AdvectionConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
