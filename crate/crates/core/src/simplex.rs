//! Derivative-free maximization with the Nelder-Mead simplex.
//!
//! The optimizer maximizes a black-box objective by running the classic
//! downhill simplex on its negation. Evaluations that return non-finite
//! values are treated as a very large penalty, so the search simply backs
//! away from invalid regions. The best point ever evaluated is tracked
//! separately from the simplex and is what gets returned, which means the
//! result can never be worse than the starting point.
//!
//! A restart re-seeds a fresh, smaller simplex around the incumbent with
//! deterministic pseudo-random axis signs, which cheaply escapes the
//! degenerate simplices the method is prone to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective value used in place of NaN or infinite evaluations.
pub const PENALTY_VALUE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexOptions {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Axis step used to build the initial simplex around the start point.
    pub init_step: f64,
    /// Evaluation budget shared across restarts. Building a simplex may
    /// overshoot it by at most dim + 1 evaluations.
    pub max_evals: usize,
    /// Convergence: spread of vertex values must drop below this...
    pub f_tol: f64,
    /// ...and the spread of vertex coordinates below this.
    pub x_tol: f64,
    /// Number of re-seeded rounds after the first one.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            init_step: 0.25,
            max_evals: 2000,
            f_tol: 1e-5,
            x_tol: 1e-6,
            restarts: 1,
            seed: 0,
        }
    }
}

impl SimplexOptions {
    fn check(&self) -> Result<()> {
        if !(self.reflection > 0.0)
            || !(self.expansion > 1.0)
            || !(self.contraction > 0.0 && self.contraction < 1.0)
            || !(self.shrink > 0.0 && self.shrink < 1.0)
        {
            return Err(Error::invalid("simplex coefficients out of range"));
        }
        if !(self.init_step > 0.0) || !self.init_step.is_finite() {
            return Err(Error::invalid("init_step must be positive"));
        }
        if self.max_evals == 0 {
            return Err(Error::invalid("max_evals must be positive"));
        }
        if !(self.f_tol > 0.0) || !(self.x_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        Ok(())
    }
}

/// Best objective value seen up to (and including) an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub evaluation: usize,
    pub best_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub evaluations: usize,
    /// One entry per improvement of the incumbent.
    pub trace: Vec<TracePoint>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Tracker<F> {
    objective: F,
    evaluations: usize,
    best_point: Vec<f64>,
    best_value: f64,
    trace: Vec<TracePoint>,
}

impl<F: FnMut(&[f64]) -> f64> Tracker<F> {
    /// Evaluates the raw objective, sanitizes non-finite values and keeps
    /// the incumbent up to date. Returns the value on the minimized scale.
    fn eval(&mut self, x: &[f64]) -> f64 {
        let raw = (self.objective)(x);
        let value = if raw.is_finite() { raw } else { PENALTY_VALUE };
        self.evaluations += 1;
        if value > self.best_value {
            self.best_value = value;
            self.best_point.clear();
            self.best_point.extend_from_slice(x);
            self.trace.push(TracePoint { evaluation: self.evaluations, best_value: value });
        }
        -value
    }
}

/// Maximizes `objective` starting from `x0`. All evaluated points stay in
/// the unconstrained parameter space; bounds belong in the objective.
pub fn maximize(
    objective: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    opts: &SimplexOptions,
) -> Result<OptResult> {
    opts.check()?;
    if x0.is_empty() {
        return Err(Error::invalid("start point must not be empty"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("start point must be finite"));
    }
    let dim = x0.len();
    let mut tracker = Tracker {
        objective,
        evaluations: 0,
        best_point: x0.to_vec(),
        best_value: f64::NEG_INFINITY,
        trace: Vec::new(),
    };

    let mut rng_state = opts.seed.wrapping_add(0xA076_1D64_78BD_642F);
    let mut incumbent_min = f64::INFINITY;
    for round in 0..=opts.restarts {
        if round > 0 && tracker.evaluations >= opts.max_evals {
            break;
        }
        let step = opts.init_step / 4.0f64.powi(round.min(8) as i32);
        let center = tracker.best_point.clone();

        // vertex 0 is the round's start point; its value is reused on
        // restarts instead of re-evaluated
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
        let mut values: Vec<f64> = Vec::with_capacity(dim + 1);
        points.push(center.clone());
        values.push(if round == 0 { tracker.eval(&center) } else { incumbent_min });
        for i in 0..dim {
            let sign = if round == 0 {
                1.0
            } else if splitmix64(&mut rng_state) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            let mut v = center.clone();
            v[i] += sign * step;
            let fv = tracker.eval(&v);
            points.push(v);
            values.push(fv);
        }

        run_round(&mut tracker, &mut points, &mut values, opts);
        incumbent_min = -tracker.best_value;
    }

    Ok(OptResult {
        best_point: tracker.best_point,
        best_value: tracker.best_value,
        evaluations: tracker.evaluations,
        trace: tracker.trace,
    })
}

/// One Nelder-Mead run on the minimized scale until convergence or budget
/// exhaustion. `points`/`values` hold the initial simplex.
fn run_round<F: FnMut(&[f64]) -> f64>(
    tracker: &mut Tracker<F>,
    points: &mut [Vec<f64>],
    values: &mut [f64],
    opts: &SimplexOptions,
) {
    let dim = points[0].len();
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();

    loop {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[n - 1];
        let second_worst = order[n - 2];

        let f_spread = (values[worst] - values[best]).abs();
        let mut x_spread = 0.0f64;
        for &i in &order[1..] {
            for d in 0..dim {
                x_spread = x_spread.max((points[i][d] - points[best][d]).abs());
            }
        }
        if f_spread < opts.f_tol && x_spread < opts.x_tol {
            return;
        }
        if tracker.evaluations >= opts.max_evals {
            return;
        }

        // centroid of all vertices but the worst
        let mut centroid = vec![0.0; dim];
        for &i in order.iter().take(n - 1) {
            for d in 0..dim {
                centroid[d] += points[i][d];
            }
        }
        for c in centroid.iter_mut() {
            *c /= (n - 1) as f64;
        }

        let reflected: Vec<f64> = (0..dim)
            .map(|d| centroid[d] + opts.reflection * (centroid[d] - points[worst][d]))
            .collect();
        let fr = tracker.eval(&reflected);

        if fr < values[best] {
            // try to expand past the reflection
            let expanded: Vec<f64> = (0..dim)
                .map(|d| centroid[d] + opts.expansion * (reflected[d] - centroid[d]))
                .collect();
            let fe = tracker.eval(&expanded);
            if fe < fr {
                points[worst] = expanded;
                values[worst] = fe;
            } else {
                points[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr < values[second_worst] {
            points[worst] = reflected;
            values[worst] = fr;
        } else if fr < values[worst] {
            // outside contraction
            let contracted: Vec<f64> = (0..dim)
                .map(|d| centroid[d] + opts.contraction * (reflected[d] - centroid[d]))
                .collect();
            let fc = tracker.eval(&contracted);
            if fc <= fr {
                points[worst] = contracted;
                values[worst] = fc;
            } else {
                shrink(tracker, points, values, best, opts);
            }
        } else {
            // inside contraction
            let contracted: Vec<f64> = (0..dim)
                .map(|d| centroid[d] - opts.contraction * (centroid[d] - points[worst][d]))
                .collect();
            let fc = tracker.eval(&contracted);
            if fc < values[worst] {
                points[worst] = contracted;
                values[worst] = fc;
            } else {
                shrink(tracker, points, values, best, opts);
            }
        }
    }
}

fn shrink<F: FnMut(&[f64]) -> f64>(
    tracker: &mut Tracker<F>,
    points: &mut [Vec<f64>],
    values: &mut [f64],
    best: usize,
    opts: &SimplexOptions,
) {
    let dim = points[0].len();
    let anchor = points[best].clone();
    for i in 0..points.len() {
        if i == best {
            continue;
        }
        for d in 0..dim {
            points[i][d] = anchor[d] + opts.shrink * (points[i][d] - anchor[d]);
        }
        values[i] = tracker.eval(&points[i].clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts(max_evals: usize) -> SimplexOptions {
        SimplexOptions { max_evals, ..SimplexOptions::default() }
    }

    #[test]
    fn sphere_maximum_is_found_precisely() {
        let f = |x: &[f64]| -((x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2));
        let res = maximize(f, &[0.0, 0.0], &opts(2000)).unwrap();
        assert!((res.best_point[0] - 1.0).abs() < 1e-4, "{:?}", res.best_point);
        assert!((res.best_point[1] - 2.0).abs() < 1e-4);
        assert!(res.best_value > -1e-6);
        assert!(res.evaluations <= 2000 + 3);
    }

    #[test]
    fn booth_function_is_solved() {
        let f = |x: &[f64]| {
            -((x[0] + 2.0 * x[1] - 7.0).powi(2) + (2.0 * x[0] + x[1] - 5.0).powi(2))
        };
        let res = maximize(f, &[0.0, 0.0], &opts(2000)).unwrap();
        assert!((res.best_point[0] - 1.0).abs() < 1e-3, "{:?}", res.best_point);
        assert!((res.best_point[1] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn rosenbrock_valley_is_followed() {
        let f = |x: &[f64]| {
            -(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2))
        };
        let res = maximize(f, &[-1.2, 1.0], &opts(2000)).unwrap();
        assert!((res.best_point[0] - 1.0).abs() < 1e-2, "{:?}", res.best_point);
        assert!((res.best_point[1] - 1.0).abs() < 1e-2);
        assert!(res.evaluations <= 2000 + 3);
    }

    #[test]
    fn result_is_never_worse_than_the_start() {
        // maximum sits exactly at the start point
        let f = |x: &[f64]| -(x[0] * x[0] + x[1] * x[1]);
        let res = maximize(f, &[0.0, 0.0], &opts(50)).unwrap();
        assert_eq!(res.best_value, 0.0);
        assert_eq!(res.best_point, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_regions_are_avoided() {
        let f = |x: &[f64]| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            if r2 > 100.0 {
                f64::NAN
            } else {
                -((x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2))
            }
        };
        let res = maximize(f, &[0.0, 0.0], &opts(2000)).unwrap();
        assert!((res.best_point[0] - 1.0).abs() < 1e-3);
        assert!((res.best_point[1] - 2.0).abs() < 1e-3);
        assert!(res.best_value.is_finite());
    }

    #[test]
    fn trace_is_monotone_and_budget_respected() {
        let f = |x: &[f64]| -(x.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>());
        let o = opts(40);
        let res = maximize(f, &[0.0; 5], &o).unwrap();
        assert!(res.evaluations <= 40 + 6, "evals {}", res.evaluations);
        for w in res.trace.windows(2) {
            assert!(w[1].best_value >= w[0].best_value);
            assert!(w[1].evaluation > w[0].evaluation);
        }
        assert_eq!(res.trace.last().unwrap().best_value, res.best_value);
    }

    #[test]
    fn same_seed_reproduces_the_run_exactly() {
        let f = |x: &[f64]| -((x[0] + 0.3).powi(2) + (x[1] - 0.7).powi(2) + x[2].powi(2));
        let o = SimplexOptions { restarts: 3, seed: 42, ..opts(600) };
        let a = maximize(f, &[1.0, -1.0, 2.0], &o).unwrap();
        let b = maximize(f, &[1.0, -1.0, 2.0], &o).unwrap();
        assert_eq!(a.best_point, b.best_point);
        assert_eq!(a.best_value.to_bits(), b.best_value.to_bits());
        assert_eq!(a.evaluations, b.evaluations);
    }

    #[test]
    fn invalid_options_are_rejected() {
        let f = |x: &[f64]| -x[0] * x[0];
        assert!(maximize(f, &[], &opts(100)).is_err());
        assert!(maximize(f, &[f64::NAN], &opts(100)).is_err());
        let bad = SimplexOptions { contraction: 1.5, ..opts(100) };
        assert!(maximize(f, &[0.0], &bad).is_err());
        let bad = SimplexOptions { max_evals: 0, ..opts(100) };
        assert!(maximize(f, &[0.0], &bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Concave quadratics in up to 6 dimensions are maximized to
        /// within 1e-3 of the true optimum inside a 500 * dim budget.
        #[test]
        fn concave_quadratics_are_maximized(
            dim in 1usize..=6,
            seed in 0u64..1000,
        ) {
            let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
            let mut draw = || {
                let v = splitmix64(&mut state);
                (v >> 11) as f64 / (1u64 << 53) as f64
            };
            let scales: Vec<f64> = (0..dim).map(|_| 0.5 + 2.5 * draw()).collect();
            let center: Vec<f64> = (0..dim).map(|_| -2.0 + 4.0 * draw()).collect();
            let f = |x: &[f64]| {
                -(0..dim).map(|i| scales[i] * (x[i] - center[i]).powi(2)).sum::<f64>()
            };
            let o = SimplexOptions { max_evals: 500 * dim, restarts: 2, ..SimplexOptions::default() };
            let res = maximize(f, &vec![0.0; dim], &o).unwrap();
            for i in 0..dim {
                prop_assert!((res.best_point[i] - center[i]).abs() < 1e-3,
                    "dim {dim} coord {i}: {} vs {}", res.best_point[i], center[i]);
            }
        }
    }
}
