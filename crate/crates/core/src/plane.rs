//! Grid-based estimation on the product plane: the average velocity field,
//! the Herfindahl scalar field, the gradient model fit, and per-column
//! minima lines with bootstrap uncertainty.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricSeries;
use crate::seeding;

/// Tied (average) ranks, 1-based. NaN inputs get NaN ranks.
pub fn tied_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("non-NaN"));
    let mut ranks = vec![f64::NAN; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// How metric values become plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordConvention {
    /// Values used as-is.
    Raw,
    /// Per-year tied ranks scaled to [0, 1].
    TiedRank,
}

/// One entity observation on the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePoint {
    pub entity: usize,
    pub year: i32,
    pub x: f64,
    pub y: f64,
}

/// A year-over-year displacement anchored at its origin point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Displacement {
    pub origin: PlanePoint,
    pub dx: f64,
    pub dy: f64,
}

/// Plane points from two metric series sharing entities and years.
/// The convention is applied per year; entities missing either metric in a
/// year are skipped.
pub fn points_from_series(
    x: &MetricSeries,
    y: &MetricSeries,
    convention: CoordConvention,
) -> Result<Vec<PlanePoint>> {
    if x.entities.len() != y.entities.len() {
        return Err(Error::Validation(format!(
            "series entities differ: {} vs {}",
            x.entities.len(),
            y.entities.len()
        )));
    }
    let mut points = Vec::new();
    for &year in &x.years {
        if !y.years.contains(&year) {
            continue;
        }
        let n = x.entities.len();
        let xv: Vec<f64> = (0..n)
            .map(|e| x.get(e, year).unwrap_or(f64::NAN))
            .collect();
        let yv: Vec<f64> = (0..n)
            .map(|e| y.get(e, year).unwrap_or(f64::NAN))
            .collect();
        let (xc, yc) = match convention {
            CoordConvention::Raw => (xv, yv),
            CoordConvention::TiedRank => {
                (scale_ranks(&tied_ranks(&xv)), scale_ranks(&tied_ranks(&yv)))
            }
        };
        for e in 0..n {
            if !xc[e].is_nan() && !yc[e].is_nan() {
                points.push(PlanePoint {
                    entity: e,
                    year,
                    x: xc[e],
                    y: yc[e],
                });
            }
        }
    }
    Ok(points)
}

fn scale_ranks(ranks: &[f64]) -> Vec<f64> {
    let n = ranks.iter().filter(|v| !v.is_nan()).count();
    if n <= 1 {
        return ranks.iter().map(|&r| if r.is_nan() { r } else { 0.5 }).collect();
    }
    ranks
        .iter()
        .map(|&r| {
            if r.is_nan() {
                r
            } else {
                (r - 1.0) / (n as f64 - 1.0)
            }
        })
        .collect()
}

/// Consecutive-year displacements, anchored at the earlier year's position.
pub fn displacements(points: &[PlanePoint]) -> Vec<Displacement> {
    use std::collections::HashMap;
    let mut by_key: HashMap<(usize, i32), &PlanePoint> = HashMap::new();
    for p in points {
        by_key.insert((p.entity, p.year), p);
    }
    let mut out: Vec<Displacement> = points
        .iter()
        .filter_map(|p| {
            by_key.get(&(p.entity, p.year + 1)).map(|next| Displacement {
                origin: *p,
                dx: next.x - p.x,
                dy: next.y - p.y,
            })
        })
        .collect();
    out.sort_by_key(|d| (d.origin.entity, d.origin.year));
    out
}

/// Regular grid over the plane with a cell-occupancy threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
    /// Cells with fewer samples are masked.
    pub min_count: usize,
}

impl GridSpec {
    /// 20x20 unit grid, the default for tied-rank coordinates.
    pub fn unit(nx: usize, ny: usize, min_count: usize) -> Self {
        GridSpec {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            nx,
            ny,
            min_count,
        }
    }

    /// Cover the bounding box of a point cloud.
    pub fn covering(points: &[PlanePoint], nx: usize, ny: usize, min_count: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("no points to grid".into()));
        }
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for p in points {
            x_min = x_min.min(p.x);
            x_max = x_max.max(p.x);
            y_min = y_min.min(p.y);
            y_max = y_max.max(p.y);
        }
        let pad_x = ((x_max - x_min) * 1e-9).max(1e-12);
        let pad_y = ((y_max - y_min) * 1e-9).max(1e-12);
        Ok(GridSpec {
            x_min,
            x_max: x_max + pad_x,
            y_min,
            y_max: y_max + pad_y,
            nx,
            ny,
            min_count,
        })
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < self.x_min || x >= self.x_max || y < self.y_min || y >= self.y_max {
            return None;
        }
        let ix = ((x - self.x_min) / (self.x_max - self.x_min) * self.nx as f64) as usize;
        let iy = ((y - self.y_min) / (self.y_max - self.y_min) * self.ny as f64) as usize;
        Some((ix.min(self.nx - 1), iy.min(self.ny - 1)))
    }

    pub fn x_center(&self, ix: usize) -> f64 {
        self.x_min + (ix as f64 + 0.5) / self.nx as f64 * (self.x_max - self.x_min)
    }

    pub fn y_center(&self, iy: usize) -> f64 {
        self.y_min + (iy as f64 + 0.5) / self.ny as f64 * (self.y_max - self.y_min)
    }
}

/// Cell-averaged fields on a grid: mean displacement vector, mean scalar,
/// and sample counts. NaN marks masked or not-applicable cells.
#[derive(Debug, Clone)]
pub struct PlaneField {
    pub grid: GridSpec,
    pub vx: Array2<f64>,
    pub vy: Array2<f64>,
    pub scalar: Array2<f64>,
    pub count: Array2<u32>,
}

impl PlaneField {
    fn empty(grid: GridSpec) -> Self {
        PlaneField {
            vx: Array2::from_elem((grid.nx, grid.ny), f64::NAN),
            vy: Array2::from_elem((grid.nx, grid.ny), f64::NAN),
            scalar: Array2::from_elem((grid.nx, grid.ny), f64::NAN),
            count: Array2::zeros((grid.nx, grid.ny)),
            grid,
        }
    }

    pub fn same_grid(&self, other: &PlaneField) -> bool {
        self.grid == other.grid
    }
}

/// Average displacement per cell, displacement assigned to the cell of its
/// origin. Cells with fewer than `min_count` samples stay masked.
pub fn build_velocity_field(disps: &[Displacement], grid: &GridSpec) -> Result<PlaneField> {
    if disps.is_empty() {
        return Err(Error::Validation(
            "no displacements; need points for at least 2 consecutive years".into(),
        ));
    }
    let mut field = PlaneField::empty(*grid);
    let mut sum_x = Array2::<f64>::zeros((grid.nx, grid.ny));
    let mut sum_y = Array2::<f64>::zeros((grid.nx, grid.ny));
    for d in disps {
        if let Some((ix, iy)) = grid.cell_of(d.origin.x, d.origin.y) {
            sum_x[[ix, iy]] += d.dx;
            sum_y[[ix, iy]] += d.dy;
            field.count[[ix, iy]] += 1;
        }
    }
    for ix in 0..grid.nx {
        for iy in 0..grid.ny {
            let n = field.count[[ix, iy]];
            if n as usize >= grid.min_count && n > 0 {
                field.vx[[ix, iy]] = sum_x[[ix, iy]] / n as f64;
                field.vy[[ix, iy]] = sum_y[[ix, iy]] / n as f64;
            }
        }
    }
    Ok(field)
}

/// Average scalar (e.g. Herfindahl) per cell over (point, value) pairs.
pub fn build_scalar_field(
    points: &[PlanePoint],
    values: &[f64],
    grid: &GridSpec,
) -> Result<PlaneField> {
    if points.len() != values.len() {
        return Err(Error::Validation(format!(
            "points and values differ in length: {} vs {}",
            points.len(),
            values.len()
        )));
    }
    let mut field = PlaneField::empty(*grid);
    let mut sum = Array2::<f64>::zeros((grid.nx, grid.ny));
    for (p, &v) in points.iter().zip(values.iter()) {
        if v.is_nan() {
            continue;
        }
        if let Some((ix, iy)) = grid.cell_of(p.x, p.y) {
            sum[[ix, iy]] += v;
            field.count[[ix, iy]] += 1;
        }
    }
    for ix in 0..grid.nx {
        for iy in 0..grid.ny {
            let n = field.count[[ix, iy]];
            if n as usize >= grid.min_count && n > 0 {
                field.scalar[[ix, iy]] = sum[[ix, iy]] / n as f64;
            }
        }
    }
    Ok(field)
}

/// Central-difference gradient of a masked grid scalar; one-sided at edges.
/// A cell's gradient is NaN wherever a needed neighbor is masked.
pub fn masked_gradient(values: ArrayView2<'_, f64>, dx: f64, dy: f64) -> (Array2<f64>, Array2<f64>) {
    let (nx, ny) = values.dim();
    let mut gx = Array2::from_elem((nx, ny), f64::NAN);
    let mut gy = Array2::from_elem((nx, ny), f64::NAN);
    let diff = |a: f64, b: f64, span: f64| -> f64 { (b - a) / span };
    for i in 0..nx {
        for j in 0..ny {
            if values[[i, j]].is_nan() {
                continue;
            }
            gx[[i, j]] = if i > 0 && i + 1 < nx {
                diff(values[[i - 1, j]], values[[i + 1, j]], 2.0 * dx)
            } else if i + 1 < nx {
                diff(values[[i, j]], values[[i + 1, j]], dx)
            } else if i > 0 {
                diff(values[[i - 1, j]], values[[i, j]], dx)
            } else {
                f64::NAN
            };
            gy[[i, j]] = if j > 0 && j + 1 < ny {
                diff(values[[i, j - 1]], values[[i, j + 1]], 2.0 * dy)
            } else if j + 1 < ny {
                diff(values[[i, j]], values[[i, j + 1]], dy)
            } else if j > 0 {
                diff(values[[i, j - 1]], values[[i, j]], dy)
            } else {
                f64::NAN
            };
        }
    }
    (gx, gy)
}

/// Least-squares fit of the velocity field against the negated Herfindahl
/// gradient, one independent coefficient per axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldModelFit {
    /// Coefficient on -dH/dx (the Complexity axis).
    pub k_x: f64,
    /// Coefficient on -dH/dy (the logPRODY axis).
    pub k_y: f64,
    pub r2_x: f64,
    pub r2_y: f64,
    pub cells_used: usize,
    #[serde(skip)]
    pub residuals_x: Vec<f64>,
    #[serde(skip)]
    pub residuals_y: Vec<f64>,
}

/// Fit v ~ -k * grad(H) per axis over cells populated in both fields.
pub fn fit_gradient_model(velocity: &PlaneField, scalar: &PlaneField) -> Result<FieldModelFit> {
    if !velocity.same_grid(scalar) {
        return Err(Error::Validation("fields live on different grids".into()));
    }
    let grid = &velocity.grid;
    let dx = (grid.x_max - grid.x_min) / grid.nx as f64;
    let dy = (grid.y_max - grid.y_min) / grid.ny as f64;
    let (gx, gy) = masked_gradient(scalar.scalar.view(), dx, dy);

    let mut xs: Vec<(f64, f64)> = Vec::new(); // (-dH/dx, vx)
    let mut ys: Vec<(f64, f64)> = Vec::new();
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let vx = velocity.vx[[i, j]];
            let vy = velocity.vy[[i, j]];
            if vx.is_nan() || vy.is_nan() {
                continue;
            }
            if !gx[[i, j]].is_nan() {
                xs.push((-gx[[i, j]], vx));
            }
            if !gy[[i, j]].is_nan() {
                ys.push((-gy[[i, j]], vy));
            }
        }
    }
    let cells_used = xs.len().min(ys.len());
    if xs.len() < 3 || ys.len() < 3 {
        return Err(Error::Validation(format!(
            "gradient fit needs at least 3 shared populated cells, got {} / {}",
            xs.len(),
            ys.len()
        )));
    }

    fn through_origin(pairs: &[(f64, f64)]) -> (f64, f64, Vec<f64>) {
        let sxx: f64 = pairs.iter().map(|(g, _)| g * g).sum();
        let sxy: f64 = pairs.iter().map(|(g, v)| g * v).sum();
        let k = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let mean_v = pairs.iter().map(|(_, v)| v).sum::<f64>() / pairs.len() as f64;
        let ss_tot: f64 = pairs.iter().map(|(_, v)| (v - mean_v).powi(2)).sum();
        let residuals: Vec<f64> = pairs.iter().map(|(g, v)| v - k * g).collect();
        let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
        let r2 = if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        };
        (k, r2, residuals)
    }

    let (k_x, r2_x, residuals_x) = through_origin(&xs);
    let (k_y, r2_y, residuals_y) = through_origin(&ys);
    Ok(FieldModelFit {
        k_x,
        k_y,
        r2_x,
        r2_y,
        cells_used,
        residuals_x,
        residuals_y,
    })
}

/// Which field component the minima line follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldComponent {
    /// Vertical component of the velocity field.
    Vy,
    /// The scalar (Herfindahl) field.
    Scalar,
}

/// Per-column minima of a field component, kernel-smoothed across columns,
/// with bootstrap standard errors from resampling the underlying data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinimaLine {
    /// Column center abscissas.
    pub x: Vec<f64>,
    /// Smoothed argmin ordinate per column; None where the column is masked.
    pub y: Vec<Option<f64>>,
    /// Bootstrap standard error per column.
    pub stderr: Vec<Option<f64>>,
    /// Set when bootstrap_count < 2 (zero-variance report).
    pub degenerate: bool,
}

fn column_minima(field: &PlaneField, component: FieldComponent) -> Vec<Option<f64>> {
    let grid = &field.grid;
    let values = match component {
        FieldComponent::Vy => &field.vy,
        FieldComponent::Scalar => &field.scalar,
    };
    (0..grid.nx)
        .map(|ix| {
            let mut best: Option<(f64, usize)> = None;
            for iy in 0..grid.ny {
                let v = values[[ix, iy]];
                if v.is_nan() {
                    continue;
                }
                if best.map_or(true, |(bv, _)| v < bv) {
                    best = Some((v, iy));
                }
            }
            best.map(|(_, iy)| grid.y_center(iy))
        })
        .collect()
}

/// Gaussian kernel regression over column centers; Silverman's rule on the
/// populated column abscissas picks the bandwidth.
fn smooth_line(x: &[f64], y: &[Option<f64>]) -> Vec<Option<f64>> {
    let populated: Vec<(f64, f64)> = x
        .iter()
        .zip(y.iter())
        .filter_map(|(&xc, yc)| yc.map(|v| (xc, v)))
        .collect();
    if populated.len() < 2 {
        return y.to_vec();
    }
    let n = populated.len() as f64;
    let mean = populated.iter().map(|(x, _)| x).sum::<f64>() / n;
    let sd = (populated.iter().map(|(x, _)| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let bandwidth = (1.06 * sd * n.powf(-0.2)).max(1e-12);
    x.iter()
        .zip(y.iter())
        .map(|(&xc, yc)| {
            yc.map(|_| {
                let mut wsum = 0.0;
                let mut acc = 0.0;
                for &(px, py) in &populated {
                    let w = (-(xc - px).powi(2) / (2.0 * bandwidth * bandwidth)).exp();
                    wsum += w;
                    acc += w * py;
                }
                acc / wsum
            })
        })
        .collect()
}

/// Minima line of the vertical velocity component, bootstrap over the
/// displacement sample.
pub fn velocity_minima_line(
    disps: &[Displacement],
    grid: &GridSpec,
    bootstrap_count: usize,
    seed: u64,
) -> Result<MinimaLine> {
    minima_line_impl(
        disps,
        grid,
        FieldComponent::Vy,
        |items, grid| build_velocity_field(items, grid),
        bootstrap_count,
        seed,
    )
}

/// Minima line of a scalar field, bootstrap over the (point, value) sample.
pub fn scalar_minima_line(
    points: &[PlanePoint],
    values: &[f64],
    grid: &GridSpec,
    bootstrap_count: usize,
    seed: u64,
) -> Result<MinimaLine> {
    if points.len() != values.len() {
        return Err(Error::Validation("points and values differ in length".into()));
    }
    let paired: Vec<(PlanePoint, f64)> = points
        .iter()
        .copied()
        .zip(values.iter().copied())
        .collect();
    minima_line_impl(
        &paired,
        grid,
        FieldComponent::Scalar,
        |items, grid| {
            let pts: Vec<PlanePoint> = items.iter().map(|(p, _)| *p).collect();
            let vals: Vec<f64> = items.iter().map(|(_, v)| *v).collect();
            build_scalar_field(&pts, &vals, grid)
        },
        bootstrap_count,
        seed,
    )
}

fn minima_line_impl<T: Clone>(
    items: &[T],
    grid: &GridSpec,
    component: FieldComponent,
    build: impl Fn(&[T], &GridSpec) -> Result<PlaneField>,
    bootstrap_count: usize,
    seed: u64,
) -> Result<MinimaLine> {
    let field = build(items, grid)?;
    let x: Vec<f64> = (0..grid.nx).map(|ix| grid.x_center(ix)).collect();
    let base = smooth_line(&x, &column_minima(&field, component));

    let degenerate = bootstrap_count < 2;
    let mut per_column: Vec<Vec<f64>> = vec![Vec::new(); grid.nx];
    if !degenerate {
        for b in 0..bootstrap_count {
            let mut rng = seeding::rng(seed, b as u64);
            let resampled: Vec<T> = (0..items.len())
                .map(|_| items[rng.random_range(0..items.len())].clone())
                .collect();
            let Ok(f) = build(&resampled, grid) else {
                continue;
            };
            let line = smooth_line(&x, &column_minima(&f, component));
            for (col, v) in line.into_iter().enumerate() {
                if let Some(v) = v {
                    per_column[col].push(v);
                }
            }
        }
    }
    let stderr: Vec<Option<f64>> = per_column
        .iter()
        .zip(base.iter())
        .map(|(samples, base_v)| {
            if base_v.is_none() {
                return None;
            }
            if degenerate || samples.len() < 2 {
                return Some(0.0);
            }
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Some(var.sqrt())
        })
        .collect();

    Ok(MinimaLine {
        x,
        y: base,
        stderr,
        degenerate,
    })
}
