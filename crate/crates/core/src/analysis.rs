//! Behavioural diagnostics: state-visitation densities, KL divergence between
//! them, offspring fitness relative to a parent, and action drift.
//!
//! Densities use the first two state dimensions. Nothing here mutates agents.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, EnvError, Environment};
use crate::nn::Mlp;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("density fitting needs at least two states, got {0}")]
    TooFewStates(usize),
    #[error("states must have at least two dimensions")]
    TooFewDims,
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("grid must have at least two cells per axis and a non-empty extent")]
    Grid,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Smallest bandwidth handed out by the default rule, so a sample of one
/// repeated point still has a proper density.
pub const MIN_BANDWIDTH: f64 = 1e-3;
/// Floor applied to `q` inside the KL sum.
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Episodes per agent for visitation samples.
pub const DEFAULT_VISITATION_EPISODES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitationSample {
    pub states: Vec<Vec<f64>>,
    pub episodes: usize,
}

/// States visited by the greedy policy over `episodes` episodes.
pub fn collect_visitation(
    env: &mut dyn Environment,
    policy: &Mlp,
    episodes: usize,
    base_seed: u64,
) -> Result<VisitationSample, AnalysisError> {
    let mut states = Vec::new();
    for e in 0..episodes {
        let ep = env::run_episode(env, env::trial_seed(base_seed, e), env::greedy_policy(policy))?;
        states.extend(ep.transitions.into_iter().map(|t| t.state));
    }
    Ok(VisitationSample { states, episodes })
}

/// Isotropic 2-D Gaussian kernel density estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    points: Vec<[f64; 2]>,
    bandwidth: f64,
}

/// Scott's rule in two dimensions: mean per-axis sample std times `n^(-1/6)`,
/// floored at [`MIN_BANDWIDTH`].
pub fn scott_bandwidth(points: &[[f64; 2]]) -> f64 {
    let n = points.len() as f64;
    let std = |k: usize| {
        let mean = points.iter().map(|p| p[k]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        var.sqrt()
    };
    (0.5 * (std(0) + std(1)) * n.powf(-1.0 / 6.0)).max(MIN_BANDWIDTH)
}

impl Kde {
    /// Fits on dims 0 and 1 of `states`; `bandwidth = None` uses
    /// [`scott_bandwidth`].
    pub fn fit<S: AsRef<[f64]>>(states: &[S], bandwidth: Option<f64>) -> Result<Self, AnalysisError> {
        if states.len() < 2 {
            return Err(AnalysisError::TooFewStates(states.len()));
        }
        let points = states
            .iter()
            .map(|s| match s.as_ref() {
                [a, b, ..] => Ok([*a, *b]),
                _ => Err(AnalysisError::TooFewDims),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let bandwidth = bandwidth.unwrap_or_else(|| scott_bandwidth(&points));
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(AnalysisError::Bandwidth(bandwidth));
        }
        Ok(Self { points, bandwidth })
    }

    pub fn from_sample(sample: &VisitationSample, bandwidth: Option<f64>) -> Result<Self, AnalysisError> {
        Self::fit(&sample.states, bandwidth)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        let norm = 1.0 / (2.0 * PI * h2 * self.points.len() as f64);
        let inv = -0.5 / h2;
        norm * self
            .points
            .iter()
            .map(|p| ((x - p[0]).powi(2) + (y - p[1]).powi(2)) * inv)
            .map(f64::exp)
            .sum::<f64>()
    }

    /// Bounding box of the sample padded by `pad` bandwidths.
    pub fn extent(&self, pad: f64) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for p in &self.points {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].max(p[0]);
            b[2] = b[2].min(p[1]);
            b[3] = b[3].max(p[1]);
        }
        let m = pad * self.bandwidth;
        [b[0] - m, b[1] + m, b[2] - m, b[3] + m]
    }
}

/// Regular grid of cell centres over `[x_min, x_max] x [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2d {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2d {
    pub fn new(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> Result<Self, AnalysisError> {
        if nx < 2 || ny < 2 || !(x.1 > x.0) || !(y.1 > y.0) {
            return Err(AnalysisError::Grid);
        }
        Ok(Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            nx,
            ny,
        })
    }

    /// Square-celled grid covering every model's sample padded by four
    /// bandwidths, with `n` cells along the longer axis.
    pub fn covering(models: &[&Kde], n: usize) -> Result<Self, AnalysisError> {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for m in models {
            let e = m.extent(4.0);
            b[0] = b[0].min(e[0]);
            b[1] = b[1].max(e[1]);
            b[2] = b[2].min(e[2]);
            b[3] = b[3].max(e[3]);
        }
        let (w, h) = (b[1] - b[0], b[3] - b[2]);
        let cell = w.max(h) / n.max(2) as f64;
        let nx = ((w / cell).ceil() as usize).max(2);
        let ny = ((h / cell).ceil() as usize).max(2);
        Self::new(
            (b[0], b[0] + cell * nx as f64),
            (b[2], b[2] + cell * ny as f64),
            nx,
            ny,
        )
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    /// Cell centres, row by row (y outer, x inner).
    pub fn centres(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let (dx, dy) = (self.dx(), self.dy());
        (0..self.ny).flat_map(move |j| {
            (0..self.nx).map(move |i| {
                (
                    self.x_min + (i as f64 + 0.5) * dx,
                    self.y_min + (j as f64 + 0.5) * dy,
                )
            })
        })
    }

    pub fn evaluate(&self, model: &Kde) -> Vec<f64> {
        self.centres().map(|(x, y)| model.density(x, y)).collect()
    }

    /// Midpoint-rule integral of density values laid out like [`Self::centres`].
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_area()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    /// Grid integral of `p`.
    pub p_mass: f64,
    /// Set when `p_mass` is more than 5% away from 1 (grid too coarse or
    /// too narrow).
    pub coarse_grid: bool,
}

/// `sum_cells p log(p / max(q, floor)) dA` over `grid`.
pub fn kl_divergence(p: &Kde, q: &Kde, grid: &Grid2d) -> KlEstimate {
    kl_from_values(&grid.evaluate(p), &grid.evaluate(q), grid.cell_area())
}

/// KL sum on precomputed grid values.
pub fn kl_from_values(p: &[f64], q: &[f64], cell_area: f64) -> KlEstimate {
    let mut value = 0.0;
    let mut mass = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        mass += pv;
        if pv > 0.0 {
            value += pv * (pv / qv.max(DENSITY_FLOOR)).ln();
        }
    }
    let p_mass = mass * cell_area;
    KlEstimate {
        value: value * cell_area,
        p_mass,
        coarse_grid: (p_mass - 1.0).abs() > 0.05,
    }
}

/// Closed-form `KL(N(m1, s1^2 I) || N(m2, s2^2 I))` in `d` dimensions.
pub fn gaussian_kl_isotropic(m1: &[f64], s1: f64, m2: &[f64], s2: f64) -> f64 {
    let d = m1.len() as f64;
    let gap: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    let r = (s1 * s1) / (s2 * s2);
    0.5 * (d * r + gap / (s2 * s2) - d + d * (1.0 / r).ln())
}

/// Mean Euclidean distance between the two policies' actions over `states`.
pub fn action_drift<S: AsRef<[f64]>>(parent: &Mlp, child: &Mlp, states: &[S]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    let mut wp = parent.workspace();
    let mut wc = child.workspace();
    states
        .iter()
        .map(|s| {
            let a = parent.forward_ws(s.as_ref(), &mut wp).to_vec();
            let b = child.forward_ws(s.as_ref(), &mut wc);
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / states.len() as f64
}

/// One row of a normalized offspring-fitness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffspringRow {
    pub label: String,
    pub operator: String,
    pub fitness: f64,
    /// `fitness / parent1`, or the raw fitness when `absolute` is set.
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffspringReport {
    pub rows: Vec<OffspringRow>,
    /// Parent 1's fitness was too close to zero to divide by.
    pub absolute: bool,
}

/// Below this magnitude parent 1's fitness is not used as a divisor.
pub const NEAR_ZERO_FITNESS: f64 = 1e-9;

/// Fitness of both parents and every child relative to parent 1. Children
/// are `(operator, fitness)`.
pub fn normalized_offspring_fitness(
    parent1: f64,
    parent2: f64,
    children: &[(String, f64)],
) -> OffspringReport {
    let absolute = parent1.abs() < NEAR_ZERO_FITNESS;
    let norm = |f: f64| if absolute { f } else { f / parent1 };
    let mut rows = vec![
        OffspringRow {
            label: "parent1".into(),
            operator: "none".into(),
            fitness: parent1,
            normalized: norm(parent1),
        },
        OffspringRow {
            label: "parent2".into(),
            operator: "none".into(),
            fitness: parent2,
            normalized: norm(parent2),
        },
    ];
    rows.extend(children.iter().enumerate().map(|(i, (op, f))| OffspringRow {
        label: format!("child{}", i + 1),
        operator: op.clone(),
        fitness: *f,
        normalized: norm(*f),
    }));
    OffspringReport { rows, absolute }
}

/// Writes `x,y,density` rows for a density evaluated on `grid`.
pub fn write_density_csv(path: &Path, grid: &Grid2d, values: &[f64]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "density"])?;
    for ((x, y), v) in grid.centres().zip(values) {
        w.write_record([x.to_string(), y.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes any serializable rows as a headed CSV table.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `x,y` rows of the visited states' first two dimensions.
pub fn write_visitation_csv(path: &Path, sample: &VisitationSample) -> Result<(), AnalysisError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x,y")?;
    for s in &sample.states {
        if let [a, b, ..] = s.as_slice() {
            writeln!(f, "{a},{b}")?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use rand_distr::{Distribution, Normal};

    fn gaussian_cloud(mean: [f64; 2], sd: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed, &[]);
        let nd = Normal::new(0.0, sd).unwrap();
        (0..n)
            .map(|_| vec![mean[0] + nd.sample(&mut rng), mean[1] + nd.sample(&mut rng)])
            .collect()
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(Kde::fit::<Vec<f64>>(&[], None), Err(AnalysisError::TooFewStates(0))));
        assert!(matches!(Kde::fit(&[vec![1.0, 2.0]], None), Err(AnalysisError::TooFewStates(1))));
        assert!(matches!(Kde::fit(&[vec![1.0], vec![2.0]], None), Err(AnalysisError::TooFewDims)));
        assert!(Kde::fit(&[vec![0.0, 0.0], vec![1.0, 1.0]], Some(0.0)).is_err());
    }

    #[test]
    fn repeated_point_peaks_there() {
        let kde = Kde::fit(&vec![vec![0.5, -0.2, 9.0]; 5], None).unwrap();
        assert_eq!(kde.bandwidth(), MIN_BANDWIDTH);
        let at = kde.density(0.5, -0.2);
        for (dx, dy) in [(0.001, 0.0), (0.0, -0.001), (0.01, 0.01)] {
            assert!(kde.density(0.5 + dx, -0.2 + dy) < at);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let kde = Kde::fit(&gaussian_cloud([0.3, -0.4], 0.5, 400, 1), None).unwrap();
        let grid = Grid2d::covering(&[&kde], 150).unwrap();
        let mass = grid.integrate(&grid.evaluate(&kde));
        assert!((mass - 1.0).abs() < 0.02, "{mass}");
    }

    #[test]
    fn two_clusters_two_modes() {
        let mut pts = gaussian_cloud([-2.0, 0.0], 0.1, 100, 2);
        pts.extend(gaussian_cloud([2.0, 0.0], 0.1, 100, 3));
        let kde = Kde::fit(&pts, Some(0.1)).unwrap();
        let xs: Vec<f64> = (0..=400).map(|i| -4.0 + 0.02 * i as f64).collect();
        let d: Vec<f64> = xs.iter().map(|&x| kde.density(x, 0.0)).collect();
        let maxima: Vec<f64> = (1..d.len() - 1)
            .filter(|&i| d[i] > d[i - 1] && d[i] > d[i + 1] && d[i] > 0.01)
            .map(|i| xs[i])
            .collect();
        assert_eq!(maxima.len(), 2, "{maxima:?}");
        assert!(maxima[0] < -1.5 && maxima[1] > 1.5);
    }

    #[test]
    fn density_is_permutation_invariant() {
        let pts = gaussian_cloud([0.0, 0.0], 1.0, 50, 4);
        let mut rev = pts.clone();
        rev.reverse();
        let a = Kde::fit(&pts, None).unwrap();
        let b = Kde::fit(&rev, None).unwrap();
        for (x, y) in [(0.0, 0.0), (0.7, -1.2), (3.0, 3.0)] {
            assert!((a.density(x, y) - b.density(x, y)).abs() < 1e-15);
            assert!(a.density(x, y) >= 0.0);
        }
    }

    #[test]
    fn kl_of_identical_models_is_zero() {
        let kde = Kde::fit(&gaussian_cloud([0.0, 1.0], 0.3, 200, 5), None).unwrap();
        let grid = Grid2d::covering(&[&kde], 80).unwrap();
        let kl = kl_divergence(&kde, &kde, &grid);
        assert!(kl.value.abs() < 1e-6);
        assert!(!kl.coarse_grid);
    }

    #[test]
    fn kl_matches_closed_form() {
        // fixed bandwidths make both estimates Gaussians with variance sd^2 + h^2
        let (sd_p, sd_q, h) = (0.5, 0.7, 0.05);
        let p = Kde::fit(&gaussian_cloud([0.0, 0.0], sd_p, 4000, 6), Some(h)).unwrap();
        let q = Kde::fit(&gaussian_cloud([0.6, 0.3], sd_q, 4000, 7), Some(h)).unwrap();
        let grid = Grid2d::new((-4.0, 4.5), (-4.0, 4.5), 120, 120).unwrap();
        let est = kl_divergence(&p, &q, &grid).value;
        let sp = (sd_p * sd_p + h * h).sqrt();
        let sq = (sd_q * sd_q + h * h).sqrt();
        let truth = gaussian_kl_isotropic(&[0.0, 0.0], sp, &[0.6, 0.3], sq);
        assert!((est - truth).abs() < 0.1 * truth, "est {est} truth {truth}");
    }

    #[test]
    fn kl_floor_and_coarse_warning() {
        let kl = kl_from_values(&[1.0, 0.0], &[0.0, 1.0], 1.0);
        assert!((kl.value - (1.0 / DENSITY_FLOOR).ln()).abs() < 1e-9);
        assert!(!kl.coarse_grid);
        assert!(kl_from_values(&[0.5, 0.3], &[0.5, 0.3], 1.0).coarse_grid);
    }

    #[test]
    fn gaussian_kl_formula() {
        assert_eq!(gaussian_kl_isotropic(&[1.0, 2.0], 0.3, &[1.0, 2.0], 0.3), 0.0);
        // 1-D: KL(N(0,1) || N(1,1)) = 0.5
        assert!((gaussian_kl_isotropic(&[0.0], 1.0, &[1.0], 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalized_fitness_table() {
        let r = normalized_offspring_fitness(
            50.0,
            40.0,
            &[("distillation".into(), 50.0), ("n_point".into(), 10.0)],
        );
        assert!(!r.absolute);
        let n: Vec<f64> = r.rows.iter().map(|r| r.normalized).collect();
        assert_eq!(n, vec![1.0, 0.8, 1.0, 0.2]);
        assert_eq!(r.rows[3].label, "child2");
        let r = normalized_offspring_fitness(0.0, 3.0, &[("x".into(), 2.0)]);
        assert!(r.absolute);
        assert_eq!(r.rows[2].normalized, 2.0);
    }

    #[test]
    fn drift_cases() {
        use crate::nn::NetworkSpec;
        let net = Mlp::random(NetworkSpec::policy(3, 2, &[4]), &mut rng_from(1, &[])).unwrap();
        let states = gaussian_cloud([0.0, 0.0], 1.0, 10, 8)
            .into_iter()
            .map(|mut s| {
                s.push(0.5);
                s
            })
            .collect::<Vec<_>>();
        assert_eq!(action_drift(&net, &net, &states), 0.0);
        let other = Mlp::random(net.spec().clone(), &mut rng_from(2, &[])).unwrap();
        assert!(action_drift(&net, &other, &states) > 0.0);
    }

    #[test]
    fn csv_exports() {
        let dir = tempfile::tempdir().unwrap();
        let kde = Kde::fit(&gaussian_cloud([0.0, 0.0], 1.0, 20, 9), None).unwrap();
        let grid = Grid2d::new((-1.0, 1.0), (-1.0, 1.0), 3, 2).unwrap();
        let path = dir.path().join("d.csv");
        write_density_csv(&path, &grid, &grid.evaluate(&kde)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("x,y,density\n"));
        let rows = normalized_offspring_fitness(2.0, 1.0, &[]).rows;
        let path = dir.path().join("r.csv");
        write_rows_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("label,operator,fitness,normalized\n"));
    }
}
