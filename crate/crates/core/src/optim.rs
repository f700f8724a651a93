//! Box-constrained minimization: exhaustive coarse grid, then optional
//! Nelder-Mead refinement from the best node.

use std::cmp::Ordering;

use rayon::prelude::*;

/// Objective differences at or below this are ties.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SearchBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Extra values per dimension added to the regular grid (e.g. `rho = 0`).
    pub extra_nodes: Vec<Vec<f64>>,
}

impl SearchBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let d = lower.len();
        Self {
            lower,
            upper,
            extra_nodes: vec![Vec::new(); d],
        }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn axis(&self, dim: usize, levels: usize) -> Vec<f64> {
        let (lo, hi) = (self.lower[dim], self.upper[dim]);
        let mut axis: Vec<f64> = if levels <= 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..levels)
                .map(|i| lo + (hi - lo) * i as f64 / (levels - 1) as f64)
                .collect()
        };
        axis.extend(self.extra_nodes[dim].iter().copied());
        axis.sort_by(f64::total_cmp);
        axis.dedup();
        axis
    }

    /// Cartesian product of the per-dimension axes, first dimension slowest.
    pub fn grid(&self, levels: usize) -> Vec<Vec<f64>> {
        let mut nodes = vec![Vec::new()];
        for d in 0..self.dims() {
            let axis = self.axis(d, levels);
            nodes = nodes
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut n = prefix.clone();
                        n.push(v);
                        n
                    })
                })
                .collect();
        }
        nodes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadSettings {
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective at every coarse grid node, in grid order.
    pub grid_values: Vec<f64>,
    pub evaluations: usize,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// `true` when `a` should replace `b` as the incumbent.
fn better<P>(a: (&[f64], f64), b: (&[f64], f64), prefer: &P) -> bool
where
    P: Fn(&[f64], &[f64]) -> Ordering,
{
    let (fa, fb) = (a.1, b.1);
    if fa.is_infinite() && fb.is_infinite() {
        return false;
    }
    if fa < fb - TIE_TOL {
        return true;
    }
    if fb < fa - TIE_TOL {
        return false;
    }
    if (fa - fb).abs() <= TIE_TOL {
        return prefer(a.0, b.0) == Ordering::Less;
    }
    false
}

/// Minimize `objective` over the box. `prefer(a, b) == Less` means `a` wins ties.
/// Returns `None` if every evaluation was non-finite.
pub fn minimize<F, P>(
    search: &SearchBox,
    levels: usize,
    refine: Option<NelderMeadSettings>,
    objective: F,
    prefer: P,
) -> Option<Minimum>
where
    F: Fn(&[f64]) -> f64 + Sync,
    P: Fn(&[f64], &[f64]) -> Ordering,
{
    let nodes = search.grid(levels);
    let grid_values: Vec<f64> = nodes.par_iter().map(|x| sanitize(objective(x))).collect();
    let mut evaluations = nodes.len();
    let mut best = 0;
    for i in 1..nodes.len() {
        if better((&nodes[i], grid_values[i]), (&nodes[best], grid_values[best]), &prefer) {
            best = i;
        }
    }
    if !grid_values[best].is_finite() {
        return None;
    }
    let mut x = nodes[best].clone();
    let mut value = grid_values[best];
    if let Some(settings) = refine {
        let (nx, nv, used) = nelder_mead(search, &x, levels, settings, &objective);
        evaluations += used;
        if better((&nx, nv), (&x, value), &prefer) {
            x = nx;
            value = nv;
        }
    }
    Some(Minimum {
        x,
        value,
        grid_values,
        evaluations,
    })
}

fn nelder_mead<F>(
    search: &SearchBox,
    start: &[f64],
    levels: usize,
    settings: NelderMeadSettings,
    objective: &F,
) -> (Vec<f64>, f64, usize)
where
    F: Fn(&[f64]) -> f64,
{
    let d = search.dims();
    let eval = |x: &[f64]| sanitize(objective(x));
    // initial simplex: one grid spacing along each axis, pointing inward
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for j in 0..d {
        let width = search.upper[j] - search.lower[j];
        let step = width / levels.max(2) as f64;
        let mut v = start.to_vec();
        v[j] = if v[j] + step <= search.upper[j] {
            v[j] + step
        } else {
            v[j] - step
        };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
    let mut used = d + 1;

    for _ in 0..settings.max_iters {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[d] - values[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= settings.tol) && size <= settings.tol.sqrt() {
            break;
        }

        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[d])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            search.clamp(&mut p);
            p
        };

        let reflected = along(1.0);
        let fr = eval(&reflected);
        used += 1;
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = eval(&expanded);
            used += 1;
            if fe < fr {
                simplex[d] = expanded;
                values[d] = fe;
            } else {
                simplex[d] = reflected;
                values[d] = fr;
            }
            continue;
        }
        if fr < values[d - 1] {
            simplex[d] = reflected;
            values[d] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[d] {
            let c = along(0.5);
            let f = eval(&c);
            (c, f)
        } else {
            let c = along(-0.5);
            let f = eval(&c);
            (c, f)
        };
        used += 1;
        if fc < values[d].min(fr) {
            simplex[d] = contracted;
            values[d] = fc;
            continue;
        }
        for i in 1..=d {
            let shrunk: Vec<f64> = simplex[i]
                .iter()
                .zip(&simplex[0])
                .map(|(v, b)| b + 0.5 * (v - b))
                .collect();
            values[i] = eval(&shrunk);
            simplex[i] = shrunk;
            used += 1;
        }
    }
    let best = (0..=d)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("non-empty simplex");
    (simplex[best].clone(), values[best], used)
}
