//! Desk-scale source/target environments.
//!
//! Gridworld states are `row * width + col` followed by one absorbing sink.
//! The goal cell pays `goal_reward` for any action and then moves to the sink,
//! so the reward is collected once and success means "visited the goal".

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::mdp::{DomainPair, MdpError, TabularMdp};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const NUM_GRID_ACTIONS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("invalid gridworld: {0}")]
    Grid(String),
    #[error("invalid archery spec: {0}")]
    Archery(String),
    #[error("bad layout map at row {row}: {msg}")]
    Layout { row: usize, msg: String },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    /// Obstacles present only in the target domain.
    pub wall_cells: BTreeSet<Cell>,
    /// Cell where the target swaps the effects of up and down.
    pub flip_cell: Option<Cell>,
    pub slip_prob: f64,
    pub goal_reward: f64,
    pub step_reward: f64,
    pub horizon: usize,
}

impl Default for GridworldSpec {
    /// 6×6 grid, start top-left, goal bottom-left, no obstacles.
    fn default() -> Self {
        Self {
            width: 6,
            height: 6,
            start: Cell::new(0, 0),
            goal: Cell::new(5, 0),
            wall_cells: BTreeSet::new(),
            flip_cell: None,
            slip_prob: 0.1,
            goal_reward: 1.0,
            step_reward: 0.0,
            horizon: 30,
        }
    }
}

impl GridworldSpec {
    /// Canonical obstacle layout: a 4-cell wall across row 2 that blocks the
    /// direct route down the left edge and leaves a gap on the right.
    pub fn wall_default() -> Self {
        Self {
            wall_cells: (0..4).map(|c| Cell::new(2, c)).collect(),
            ..Self::default()
        }
    }

    /// Canonical action-flip layout: a 3-wide column with the flip cell on
    /// the direct route from start to goal.
    pub fn flip_default() -> Self {
        Self {
            width: 3,
            height: 5,
            start: Cell::new(0, 1),
            goal: Cell::new(4, 1),
            flip_cell: Some(Cell::new(2, 1)),
            ..Self::default()
        }
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    /// Cells plus the absorbing sink.
    pub fn num_states(&self) -> usize {
        self.num_cells() + 1
    }

    pub fn state_of(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn cell_of(&self, state: usize) -> Option<Cell> {
        (state < self.num_cells()).then(|| Cell::new(state / self.width, state % self.width))
    }

    pub fn start_state(&self) -> usize {
        self.state_of(self.start)
    }

    pub fn goal_state(&self) -> usize {
        self.state_of(self.goal)
    }

    pub fn sink_state(&self) -> usize {
        self.num_cells()
    }

    fn in_bounds(&self, c: Cell) -> bool {
        c.row < self.height && c.col < self.width
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |m: String| Err(DomainError::Grid(m));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return bad(format!("slip_prob {} outside [0, 1)", self.slip_prob));
        }
        if !self.goal_reward.is_finite() || !self.step_reward.is_finite() {
            return bad("rewards must be finite".into());
        }
        for (name, c) in [("start", self.start), ("goal", self.goal)] {
            if !self.in_bounds(c) {
                return bad(format!("{name} {c} out of bounds"));
            }
            if self.wall_cells.contains(&c) {
                return bad(format!("{name} {c} is a wall cell"));
            }
        }
        if let Some(c) = self.wall_cells.iter().find(|c| !self.in_bounds(**c)) {
            return bad(format!("wall cell {c} out of bounds"));
        }
        if let Some(c) = self.flip_cell {
            if !self.in_bounds(c) {
                return bad(format!("flip cell {c} out of bounds"));
            }
        }
        Ok(())
    }

    fn shift(&self, c: Cell, effect: usize) -> Option<Cell> {
        let (r, col) = (c.row as isize, c.col as isize);
        let (nr, nc) = match effect {
            UP => (r - 1, col),
            DOWN => (r + 1, col),
            LEFT => (r, col - 1),
            RIGHT => (r, col + 1),
            _ => (r, col),
        };
        if nr < 0 || nc < 0 || nr as usize >= self.height || nc as usize >= self.width {
            None
        } else {
            Some(Cell::new(nr as usize, nc as usize))
        }
    }

    /// Builds one domain's MDP. `walls` and `flip` select target behavior.
    fn build(&self, walls: bool, flip: bool) -> Result<TabularMdp, DomainError> {
        let ns = self.num_states();
        let na = NUM_GRID_ACTIONS;
        let sink = self.sink_state();
        let goal = self.goal_state();
        let mut transition = vec![0.0; ns * na * ns];
        let mut reward = vec![0.0; ns * na];
        let intended = 1.0 - self.slip_prob;
        let slip_each = self.slip_prob / na as f64;
        for s in 0..ns {
            for a in 0..na {
                let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
                if s == sink || s == goal {
                    row[sink] = 1.0;
                    reward[s * na + a] = if s == goal { self.goal_reward } else { 0.0 };
                    continue;
                }
                reward[s * na + a] = self.step_reward;
                let cell = self.cell_of(s).expect("cell state");
                let swap = flip && self.flip_cell == Some(cell);
                let resolve = |effect: usize| -> usize {
                    let effect = match (swap, effect) {
                        (true, UP) => DOWN,
                        (true, DOWN) => UP,
                        (_, e) => e,
                    };
                    match self.shift(cell, effect) {
                        Some(n) if walls && self.wall_cells.contains(&n) => s,
                        Some(n) => self.state_of(n),
                        None => s,
                    }
                };
                row[resolve(a)] += intended;
                for effect in 0..na {
                    row[resolve(effect)] += slip_each;
                }
            }
        }
        let mut init = vec![0.0; ns];
        init[self.start_state()] = 1.0;
        Ok(TabularMdp::new(ns, na, transition, reward, init, self.horizon)?)
    }
}

/// Source without the obstacle, target with it.
pub fn build_wall_gridworld(spec: &GridworldSpec) -> Result<DomainPair, DomainError> {
    spec.validate()?;
    if spec.flip_cell.is_some() {
        return Err(DomainError::Grid("wall gridworld takes no flip cell".into()));
    }
    Ok(DomainPair::new(spec.build(false, false)?, spec.build(true, false)?)?)
}

/// Target swaps up and down at the flip cell; everything else is shared.
pub fn build_action_flip_gridworld(spec: &GridworldSpec) -> Result<DomainPair, DomainError> {
    spec.validate()?;
    if spec.flip_cell.is_none() {
        return Err(DomainError::Grid("action-flip gridworld needs a flip cell".into()));
    }
    Ok(DomainPair::new(spec.build(false, false)?, spec.build(false, true)?)?)
}

/// Parses an ASCII map into `base` (`S` start, `G` goal, `#` wall, `F` flip, `.` empty).
pub fn parse_ascii_layout(map: &str, base: GridworldSpec) -> Result<GridworldSpec, DomainError> {
    let rows: Vec<&str> = map
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if rows.is_empty() {
        return Err(DomainError::Layout { row: 0, msg: "empty map".into() });
    }
    let width = rows[0].chars().count();
    let mut spec = GridworldSpec {
        width,
        height: rows.len(),
        wall_cells: BTreeSet::new(),
        flip_cell: None,
        ..base
    };
    let (mut start, mut goal) = (None, None);
    for (r, line) in rows.iter().enumerate() {
        if line.chars().count() != width {
            return Err(DomainError::Layout { row: r, msg: format!("expected {width} columns") });
        }
        for (c, ch) in line.chars().enumerate() {
            let cell = Cell::new(r, c);
            let dup = |what: &str| DomainError::Layout { row: r, msg: format!("second {what}") };
            match ch {
                '.' => {}
                '#' => {
                    spec.wall_cells.insert(cell);
                }
                'S' if start.is_none() => start = Some(cell),
                'S' => return Err(dup("start")),
                'G' if goal.is_none() => goal = Some(cell),
                'G' => return Err(dup("goal")),
                'F' if spec.flip_cell.is_none() => spec.flip_cell = Some(cell),
                'F' => return Err(dup("flip cell")),
                other => {
                    return Err(DomainError::Layout { row: r, msg: format!("unknown symbol `{other}`") })
                }
            }
        }
    }
    spec.start = start.ok_or(DomainError::Layout { row: 0, msg: "no start `S`".into() })?;
    spec.goal = goal.ok_or(DomainError::Layout { row: 0, msg: "no goal `G`".into() })?;
    spec.validate()?;
    Ok(spec)
}

/// Renders the layout in the map syntax accepted by [`parse_ascii_layout`].
pub fn render_ascii_layout(spec: &GridworldSpec) -> String {
    let mut out = String::new();
    for r in 0..spec.height {
        for c in 0..spec.width {
            let cell = Cell::new(r, c);
            out.push(if cell == spec.start {
                'S'
            } else if cell == spec.goal {
                'G'
            } else if spec.wall_cells.contains(&cell) {
                '#'
            } else if spec.flip_cell == Some(cell) {
                'F'
            } else {
                '.'
            });
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// Single-shot archery: choose an angle, observe the lateral landing offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcherySpec {
    /// Meters.
    pub target_distance: f64,
    pub source_wind_mean: f64,
    pub source_wind_std: f64,
    pub target_wind_mean: f64,
    pub target_wind_std: f64,
    /// Degrees.
    pub angle_range: (f64, f64),
}

impl Default for ArcherySpec {
    fn default() -> Self {
        Self {
            target_distance: 70.0,
            source_wind_mean: 1.0,
            source_wind_std: 1.0,
            target_wind_mean: 0.0,
            target_wind_std: 0.3,
            angle_range: (-2.0, 2.0),
        }
    }
}

impl ArcherySpec {
    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |m: &str| Err(DomainError::Archery(m.into()));
        if !(self.source_wind_std > 0.0 && self.target_wind_std > 0.0) {
            return bad("wind standard deviations must be positive");
        }
        let (lo, hi) = self.angle_range;
        if !(lo < hi) || lo <= -90.0 || hi >= 90.0 {
            return bad("angle range must be a proper interval inside (-90, 90) degrees");
        }
        if !self.target_distance.is_finite() {
            return bad("target distance must be finite");
        }
        Ok(())
    }

    pub fn wind(&self, domain: Domain) -> (f64, f64) {
        match domain {
            Domain::Source => (self.source_wind_mean, self.source_wind_std),
            Domain::Target => (self.target_wind_mean, self.target_wind_std),
        }
    }

    /// Mean and standard deviation of the landing offset at `theta_deg`.
    pub fn landing_moments(&self, theta_deg: f64, domain: Domain) -> (f64, f64) {
        let th = theta_deg * PI / 180.0;
        let c2 = th.cos().powi(2);
        let (mu, sigma) = self.wind(domain);
        (self.target_distance * th.sin() + mu / c2, sigma / c2)
    }

    /// Landing offset for a given wind force `f`.
    pub fn landing(&self, theta_deg: f64, wind: f64) -> f64 {
        let th = theta_deg * PI / 180.0;
        self.target_distance * th.sin() + wind / th.cos().powi(2)
    }
}

/// Draws a landing offset in meters.
pub fn archery_sample<R: Rng + ?Sized>(
    theta_deg: f64,
    domain: Domain,
    spec: &ArcherySpec,
    rng: &mut R,
) -> f64 {
    let (mu, sigma) = spec.wind(domain);
    let f = Normal::new(mu, sigma).expect("validated wind std").sample(rng);
    spec.landing(theta_deg, f)
}

/// Log-density (nats) of landing at `s_prime` after shooting at `theta_deg`.
pub fn archery_log_density(theta_deg: f64, s_prime: f64, domain: Domain, spec: &ArcherySpec) -> f64 {
    let (mean, std) = spec.landing_moments(theta_deg, domain);
    let z = (s_prime - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
}

/// Negative distance to the target.
pub fn archery_reward(s_prime: f64) -> f64 {
    -s_prime.abs()
}

/// `log mean exp(reward_fn(θ, s'))` over `n_samples` landings.
pub fn archery_objective<R, F>(
    theta_deg: f64,
    domain: Domain,
    reward_fn: F,
    spec: &ArcherySpec,
    n_samples: usize,
    rng: &mut R,
) -> f64
where
    R: Rng + ?Sized,
    F: Fn(f64, f64) -> f64,
{
    assert!(n_samples >= 1, "archery_objective needs at least one sample");
    let values: Vec<f64> = (0..n_samples)
        .map(|_| reward_fn(theta_deg, archery_sample(theta_deg, domain, spec, rng)))
        .collect();
    log_mean_exp(&values)
}

/// Numerically stable `log(mean(exp(x)))`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + (s / values.len() as f64).ln()
}

/// Evenly spaced angles covering `spec.angle_range` inclusive.
pub fn angle_grid(spec: &ArcherySpec, points: usize) -> Vec<f64> {
    let (lo, hi) = spec.angle_range;
    if points <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{check_support, validate_mdp};
    use crate::rng::from_seed;

    #[test]
    fn default_wall_pair_is_valid_with_support() {
        let spec = GridworldSpec::wall_default();
        let mut pair = build_wall_gridworld(&spec).unwrap();
        assert!(validate_mdp(&pair.source).is_empty());
        assert!(validate_mdp(&pair.target).is_empty());
        assert!(check_support(&mut pair).ok);
    }

    #[test]
    fn zero_slip_breaks_support() {
        let spec = GridworldSpec { slip_prob: 0.0, ..GridworldSpec::wall_default() };
        let mut pair = build_wall_gridworld(&spec).unwrap();
        let report = check_support(&mut pair);
        assert!(!report.ok);
        // bumping into the wall stays put in the target, which the source never does
        let above = spec.state_of(Cell::new(1, 0));
        assert!(report.violations.contains(&(above, DOWN, above)));
    }

    #[test]
    fn no_walls_means_identical_domains() {
        let pair = build_wall_gridworld(&GridworldSpec::default()).unwrap();
        assert_eq!(pair.source.transitions(), pair.target.transitions());
    }

    #[test]
    fn target_never_enters_walls() {
        let spec = GridworldSpec::wall_default();
        let pair = build_wall_gridworld(&spec).unwrap();
        for w in &spec.wall_cells {
            let ws = spec.state_of(*w);
            // wall cells themselves are unreachable in the target
            let open = (0..spec.num_states()).filter(|&s| spec.cell_of(s).is_none_or(|c| !spec.wall_cells.contains(&c)));
            for s in open {
                for a in 0..NUM_GRID_ACTIONS {
                    assert_eq!(pair.target.prob(s, a, ws), 0.0);
                }
            }
        }
    }

    #[test]
    fn flip_swaps_up_and_down_only_at_flip_cell() {
        let spec = GridworldSpec::flip_default();
        let pair = build_action_flip_gridworld(&spec).unwrap();
        let f = spec.state_of(spec.flip_cell.unwrap());
        assert_eq!(pair.target.row(f, UP), pair.source.row(f, DOWN));
        assert_eq!(pair.target.row(f, DOWN), pair.source.row(f, UP));
        for s in (0..spec.num_states()).filter(|&s| s != f) {
            for a in 0..NUM_GRID_ACTIONS {
                assert_eq!(pair.target.row(s, a), pair.source.row(s, a));
            }
        }
    }

    #[test]
    fn flip_marginal_is_domain_invariant() {
        let spec = GridworldSpec::flip_default();
        let pair = build_action_flip_gridworld(&spec).unwrap();
        let f = spec.state_of(spec.flip_cell.unwrap());
        for s_next in 0..spec.num_states() {
            let m = |mdp: &TabularMdp| {
                (0..NUM_GRID_ACTIONS).map(|a| mdp.prob(f, a, s_next)).sum::<f64>() / NUM_GRID_ACTIONS as f64
            };
            assert!((m(&pair.source) - m(&pair.target)).abs() < 1e-12);
        }
        // up rows differ by 2(1-η) in L1 = 2·TV; the bound asks TV ≥ 2(1-η)(4/5)·½ at least
        let l1: f64 = pair.source.row(f, UP).iter().zip(pair.target.row(f, UP)).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 >= 2.0 * (1.0 - spec.slip_prob) * 0.8 - 1e-12);
    }

    #[test]
    fn builders_check_flip_presence() {
        assert!(build_wall_gridworld(&GridworldSpec::flip_default()).is_err());
        assert!(build_action_flip_gridworld(&GridworldSpec::wall_default()).is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = GridworldSpec::wall_default();
        spec.wall_cells.insert(spec.start);
        assert!(build_wall_gridworld(&spec).is_err());
        let spec = GridworldSpec { slip_prob: 1.0, ..GridworldSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn ascii_round_trip() {
        let spec = GridworldSpec::wall_default();
        let map = render_ascii_layout(&spec);
        assert_eq!(map.lines().nth(2).unwrap(), "####..");
        assert_eq!(parse_ascii_layout(&map, spec.clone()).unwrap(), spec);
    }

    #[test]
    fn ascii_errors() {
        assert!(parse_ascii_layout("S.G\n..", GridworldSpec::default()).is_err());
        assert!(parse_ascii_layout("S.x\n.G.", GridworldSpec::default()).is_err());
        assert!(parse_ascii_layout("S..\n...", GridworldSpec::default()).is_err());
    }

    #[test]
    fn archery_straight_shot_without_wind() {
        let spec = ArcherySpec::default();
        assert_eq!(spec.landing(0.0, 0.0), 0.0);
    }

    #[test]
    fn archery_source_at_zero_matches_wind() {
        let spec = ArcherySpec::default();
        let mut rng = from_seed(11);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| archery_sample(0.0, Domain::Source, &spec, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn archery_wind_compensating_angle() {
        let spec = ArcherySpec::default();
        let theta = (-1.0f64 / 70.0).asin() * 180.0 / PI;
        assert!((theta + 0.8185).abs() < 1e-3);
        let (mean, _) = spec.landing_moments(theta, Domain::Source);
        // 70 sin θ = -1 cancels the unit mean wind up to the 1/cos² factor
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn archery_density_closed_form_and_normalization() {
        let spec = ArcherySpec::default();
        let lp = archery_log_density(0.0, 0.0, Domain::Target, &spec);
        assert!((lp + (0.3 * (2.0 * PI).sqrt()).ln()).abs() < 1e-12);
        for (theta, domain) in [(0.0, Domain::Target), (-1.3, Domain::Source), (1.9, Domain::Target)] {
            let (m, sd) = spec.landing_moments(theta, domain);
            let (lo, hi, n) = (m - 12.0 * sd, m + 12.0 * sd, 20_000);
            let h = (hi - lo) / n as f64;
            // composite Simpson
            let mut acc = 0.0;
            for i in 0..=n {
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * archery_log_density(theta, lo + i as f64 * h, domain, &spec).exp();
            }
            assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn archery_reward_is_negative_distance() {
        assert_eq!(archery_reward(0.0), 0.0);
        assert_eq!(archery_reward(2.5), -2.5);
        assert_eq!(archery_reward(-1.0), -1.0);
    }

    #[test]
    fn objective_of_zero_reward_is_zero() {
        let spec = ArcherySpec::default();
        let j = archery_objective(0.3, Domain::Source, |_, _| 0.0, &spec, 50, &mut from_seed(2));
        assert_eq!(j, 0.0);
    }

    #[test]
    fn archery_spec_validation() {
        assert!(ArcherySpec::default().validate().is_ok());
        assert!(ArcherySpec { target_wind_std: 0.0, ..Default::default() }.validate().is_err());
        assert!(ArcherySpec { angle_range: (-90.0, 2.0), ..Default::default() }.validate().is_err());
    }
}
