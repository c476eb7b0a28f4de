//! Spatial compactness prior.
//!
//! Each affinity row, read as a heatmap over the reference grid, is
//! approximated by a mixture of `M` axis-aligned 2D Gaussians anchored at
//! the row's top-`M` scores. The renormalised mixture density is the
//! compact target: it regularises training (as a frozen target) and
//! replaces the raw affinity rows when propagating labels.
//!
//! Fitting is closed-form: pixels are hard-assigned to the nearest anchor,
//! weights are the assigned mass fractions and variances are the
//! mass-weighted squared offsets from the anchor, floored at `σ²_min`.

use crate::affinity::{AffinityKind, AffinityMatrix};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_COMPONENTS: usize = 2;
pub const DEFAULT_SIGMA2_MIN: f64 = 0.5;

/// Nonnegative `h × w` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err!("heatmap {}x{} given {} values", height, width, values.len()));
        }
        Ok(Heatmap { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Heatmap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2D {
    pub weight: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture2D {
    pub components: Vec<Gaussian2D>,
}

impl GaussianMixture2D {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Indices of the `m` largest entries. Exact ties are ordered by distance to
/// the centroid of the tied pixels, then row-major.
fn top_indices(heat: &Heatmap, m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..heat.values.len()).filter(|&i| heat.values[i] > 0.0).collect();
    order.sort_by(|&a, &b| heat.values[b].total_cmp(&heat.values[a]).then(a.cmp(&b)));
    let mut picked = Vec::with_capacity(m);
    let mut start = 0;
    while picked.len() < m && start < order.len() {
        let v = heat.values[order[start]];
        let end = order[start..].iter().position(|&i| heat.values[i] != v).map_or(order.len(), |p| start + p);
        let group = &mut order[start..end];
        if group.len() > 1 && picked.len() + group.len() > m {
            let w = heat.width;
            let n = group.len() as f64;
            let cx = group.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
            let cy = group.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
            let d2 = |i: usize| ((i % w) as f64 - cx).powi(2) + ((i / w) as f64 - cy).powi(2);
            group.sort_by(|&a, &b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)));
        }
        for &i in group.iter() {
            if picked.len() == m {
                break;
            }
            picked.push(i);
        }
        start = end;
    }
    picked
}

/// Fits `m` components. Fails with [`Error::Degenerate`] when fewer than `m`
/// entries are nonzero; see [`fit_mixture_or_fallback`].
pub fn fit_mixture(heat: &Heatmap, m: usize) -> Result<GaussianMixture2D> {
    fit_mixture_with(heat, m, DEFAULT_SIGMA2_MIN)
}

pub fn fit_mixture_with(heat: &Heatmap, m: usize, sigma2_min: f64) -> Result<GaussianMixture2D> {
    if m == 0 {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    if heat.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Contract("heatmap entries must be finite and nonnegative".into()));
    }
    let nonzero = heat.values.iter().filter(|&&v| v > 0.0).count();
    if nonzero < m {
        return Err(Error::Degenerate(format!("{nonzero} nonzero entries for {m} components")));
    }
    Ok(fit_components(heat, m, sigma2_min))
}

/// Like [`fit_mixture_with`] but uses as many components as there are
/// nonzero entries when that is fewer than `m`. An all-zero heatmap yields a
/// single floor-width component at the grid centre.
pub fn fit_mixture_or_fallback(heat: &Heatmap, m: usize, sigma2_min: f64) -> GaussianMixture2D {
    let nonzero = heat.values.iter().filter(|&&v| v > 0.0).count();
    if nonzero == 0 {
        return GaussianMixture2D {
            components: vec![Gaussian2D {
                weight: 1.0,
                mean_x: (heat.width / 2) as f64,
                mean_y: (heat.height / 2) as f64,
                var_x: sigma2_min,
                var_y: sigma2_min,
            }],
        };
    }
    fit_components(heat, m.min(nonzero).max(1), sigma2_min)
}

fn fit_components(heat: &Heatmap, m: usize, sigma2_min: f64) -> GaussianMixture2D {
    let w = heat.width;
    let anchors: Vec<(f64, f64)> = top_indices(heat, m)
        .into_iter()
        .map(|i| ((i % w) as f64, (i / w) as f64))
        .collect();
    let k = anchors.len();
    let mut mass = vec![0.0; k];
    let mut sx = vec![0.0; k];
    let mut sy = vec![0.0; k];
    for (i, &v) in heat.values.iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, &(ax, ay)) in anchors.iter().enumerate() {
            let d = (x - ax).powi(2) + (y - ay).powi(2);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        mass[best] += v;
        sx[best] += v * (x - anchors[best].0).powi(2);
        sy[best] += v * (y - anchors[best].1).powi(2);
    }
    let total: f64 = mass.iter().sum();
    let components = anchors
        .iter()
        .enumerate()
        .map(|(c, &(ax, ay))| Gaussian2D {
            weight: mass[c] / total,
            mean_x: ax,
            mean_y: ay,
            var_x: (sx[c] / mass[c]).max(sigma2_min),
            var_y: (sy[c] / mass[c]).max(sigma2_min),
        })
        .collect();
    GaussianMixture2D { components }
}

/// Mixture density at every pixel centre, renormalised to unit mass.
pub fn compact_heatmap(mix: &GaussianMixture2D, height: usize, width: usize) -> Heatmap {
    let mut out = Heatmap::zeros(height, width);
    let mut gx = vec![0.0; width];
    let mut gy = vec![0.0; height];
    for g in &mix.components {
        for (x, v) in gx.iter_mut().enumerate() {
            *v = (-(x as f64 - g.mean_x).powi(2) / (2.0 * g.var_x)).exp();
        }
        for (y, v) in gy.iter_mut().enumerate() {
            *v = (-(y as f64 - g.mean_y).powi(2) / (2.0 * g.var_y)).exp();
        }
        let norm = g.weight / (2.0 * std::f64::consts::PI * (g.var_x * g.var_y).sqrt());
        for y in 0..height {
            let row = &mut out.values[y * width..(y + 1) * width];
            let fy = norm * gy[y];
            for (o, fx) in row.iter_mut().zip(&gx) {
                *o += fy * fx;
            }
        }
    }
    let z = out.mass();
    if z > 0.0 {
        out.values.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Compact version of one heatmap.
pub fn compact_row(row: &[f64], height: usize, width: usize, m: usize, sigma2_min: f64) -> Vec<f64> {
    let heat = Heatmap {
        height,
        width,
        values: row.iter().map(|v| v.max(0.0)).collect(),
    };
    compact_heatmap(&fit_mixture_or_fallback(&heat, m, sigma2_min), height, width).values
}

/// Compact targets for every row of a `[rows, h·w]` matrix.
pub fn compact_rows(values: &[f64], rows: usize, height: usize, width: usize, m: usize, sigma2_min: f64) -> Vec<f64> {
    let cols = height * width;
    let mut out = Vec::with_capacity(values.len());
    for i in 0..rows {
        out.extend(compact_row(&values[i * cols..(i + 1) * cols], height, width, m, sigma2_min));
    }
    out
}

/// Replaces every row by its compact heatmap.
pub fn filter_affinity(a: &AffinityMatrix, m: usize) -> AffinityMatrix {
    filter_affinity_with(a, m, DEFAULT_SIGMA2_MIN)
}

pub fn filter_affinity_with(a: &AffinityMatrix, m: usize, sigma2_min: f64) -> AffinityMatrix {
    AffinityMatrix {
        kind: AffinityKind::Compact,
        values: compact_rows(&a.values, a.rows, a.height, a.width, m, sigma2_min),
        ..a.clone()
    }
}

/// Mean over rows of `‖Ã_i − A_i‖₂`, with the compact targets frozen.
pub fn compactness_loss_on_tape(
    tape: &mut Tape,
    affinity: Var,
    height: usize,
    width: usize,
    m: usize,
    sigma2_min: f64,
) -> Result<Var> {
    let shape = tape.value(affinity).shape().to_vec();
    let [rows, cols] = shape[..] else {
        return Err(shape_err!("compactness loss needs a 2D affinity, got {:?}", shape));
    };
    if cols != height * width {
        return Err(shape_err!("affinity has {cols} columns for a {height}x{width} grid"));
    }
    let targets = compact_rows(tape.value(affinity).values(), rows, height, width, m, sigma2_min);
    let target = tape.constant(Tensor::new(vec![rows, cols], targets)?)?;
    let diff = tape.sub(affinity, target)?;
    let norms = tape.norm_rows(diff)?;
    tape.mean(norms)
}

/// Value of the compactness loss for a row-stochastic affinity.
pub fn compactness_loss(a: &AffinityMatrix, m: usize) -> Result<f64> {
    compactness_loss_with(a, m, DEFAULT_SIGMA2_MIN)
}

pub fn compactness_loss_with(a: &AffinityMatrix, m: usize, sigma2_min: f64) -> Result<f64> {
    if a.kind == AffinityKind::IntraInter {
        return Err(Error::Contract("compactness applies to intra-video affinities".into()));
    }
    let mut tape = Tape::new();
    let v = tape.constant(a.to_tensor())?;
    let l = compactness_loss_on_tape(&mut tape, v, a.height, a.width, m, sigma2_min)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass() {
        let mut h = Heatmap::zeros(8, 8);
        h.set(3, 5, 1.0);
        let mix = fit_mixture_or_fallback(&h, 2, DEFAULT_SIGMA2_MIN);
        assert_eq!(mix.len(), 1);
        let g = mix.components[0];
        assert_eq!((g.mean_x, g.mean_y, g.weight), (3.0, 5.0, 1.0));
        assert_eq!((g.var_x, g.var_y), (0.5, 0.5));
        assert!(matches!(fit_mixture(&h, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn two_equal_deltas() {
        let mut h = Heatmap::zeros(8, 8);
        h.set(0, 0, 0.5);
        h.set(7, 7, 0.5);
        let mix = fit_mixture(&h, 2).unwrap();
        let means: Vec<_> = mix.components.iter().map(|g| (g.mean_x, g.mean_y)).collect();
        assert_eq!(means, vec![(0.0, 0.0), (7.0, 7.0)]);
        assert!(mix.components.iter().all(|g| (g.weight - 0.5).abs() < 1e-12));
    }

    #[test]
    fn plateau_variance() {
        let mut h = Heatmap::zeros(5, 5);
        for y in 1..4 {
            for x in 1..4 {
                h.set(x, y, 1.0 / 9.0);
            }
        }
        let g = fit_mixture(&h, 1).unwrap().components[0];
        assert_eq!((g.mean_x, g.mean_y), (2.0, 2.0));
        assert!((g.var_x - 2.0 / 3.0).abs() < 1e-9);
        assert!((g.var_y - 2.0 / 3.0).abs() < 1e-9);
        assert!((g.weight - 1.0).abs() < 1e-9);
    }

    #[test]
    fn compact_heatmap_is_normalised_and_tight() {
        let mix = GaussianMixture2D {
            components: vec![Gaussian2D {
                weight: 1.0,
                mean_x: 6.0,
                mean_y: 7.0,
                var_x: 0.5,
                var_y: 0.5,
            }],
        };
        let h = compact_heatmap(&mix, 16, 16);
        assert!((h.mass() - 1.0).abs() < 1e-9);
        let mut near = 0.0;
        for y in 5..=9 {
            for x in 4..=8 {
                near += h.get(x, y);
            }
        }
        assert!(near >= 0.99, "{near}");
    }

    #[test]
    fn symmetric_mixture_gives_symmetric_map() {
        let g = |x, y| Gaussian2D {
            weight: 0.5,
            mean_x: x,
            mean_y: y,
            var_x: 1.3,
            var_y: 0.7,
        };
        let mix = GaussianMixture2D {
            components: vec![g(2.0, 3.0), g(7.0, 4.0)],
        };
        let h = compact_heatmap(&mix, 8, 10);
        // point reflection through (4.5, 3.5) swaps the components
        for y in 0..8 {
            for x in 0..10 {
                assert!((h.get(x, y) - h.get(9 - x, 7 - y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_row_is_not_compact() {
        let n = 16;
        let a = AffinityMatrix::new(AffinityKind::Intra, n, 4, 4, vec![1.0 / n as f64; n * n]).unwrap();
        assert!(compactness_loss(&a, 2).unwrap() > 0.0);
    }

    #[test]
    fn rejects_inter_affinity() {
        let a = AffinityMatrix::new(AffinityKind::IntraInter, 1, 1, 1, vec![0.5]).unwrap();
        assert!(compactness_loss(&a, 2).is_err());
    }
}
