//! Three-center clustering with centers restricted to `{-alpha, 0, +alpha}`.
//!
//! The problem is `min ||w - alpha * c||^2` over a shared scale `alpha >= 0`
//! and a code vector `c` in `{-1, 0, +1}^N`. The 3xN indicator matrix is
//! stored as one code per weight (the code is `M^T z` with `M = [-1, 0, 1]`).
//!
//! [`solve`] alternates two exact sub-solves: nearest-center assignment with
//! `alpha` fixed, and the closed-form least-squares `alpha` with codes fixed.
//! Each column of the indicator is independent given `alpha`, so the
//! assignment step is one O(N) pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::mean_abs;

/// Center multipliers, in indicator-row order.
pub const CENTERS: [i8; 3] = [-1, 0, 1];

/// Largest input accepted by [`brute_force_solve`].
pub const BRUTE_FORCE_MAX_LEN: usize = 12;

/// One ternary code per weight.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct Codes(Vec<i8>);

impl Codes {
    pub fn new(codes: Vec<i8>) -> Result<Self> {
        if let Some(pos) = codes.iter().position(|c| !(-1..=1).contains(c)) {
            return Err(Error::Validation(format!(
                "code {} at index {pos} is not in {{-1, 0, +1}}",
                codes[pos]
            )));
        }
        Ok(Codes(codes))
    }

    pub fn zeros(n: usize) -> Self {
        Codes(vec![0; n])
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn nonzero_count(&self) -> usize {
        self.0.iter().filter(|&&c| c != 0).count()
    }

    pub fn negated(&self) -> Self {
        Codes(self.0.iter().map(|c| -c).collect())
    }

    /// `alpha * c` as real weights.
    pub fn dequantize(&self, alpha: f64) -> Vec<f64> {
        self.0.iter().map(|&c| alpha * f64::from(c)).collect()
    }

    /// Row index into [`CENTERS`] for every weight.
    pub fn cluster_indices(&self) -> Vec<usize> {
        self.0.iter().map(|&c| (c + 1) as usize).collect()
    }
}

impl TryFrom<Vec<i8>> for Codes {
    type Error = Error;

    fn try_from(v: Vec<i8>) -> Result<Self> {
        Codes::new(v)
    }
}

impl From<Codes> for Vec<i8> {
    fn from(c: Codes) -> Self {
        c.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub alpha_tolerance: f64,
    pub max_iterations: usize,
    /// Starting scales below this are treated as an all-zero layer.
    pub alpha_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha_tolerance: 1e-8,
            max_iterations: 100,
            alpha_floor: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_tolerance > 0.0) || !(self.alpha_floor > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config(format!(
                "solver settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSolution {
    pub codes: Codes,
    pub alpha: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every half-step (assignment, then scale update), in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

impl ClusterSolution {
    /// True when the layer collapsed to `alpha = 0` with all-zero codes.
    pub fn is_degenerate(&self) -> bool {
        self.alpha == 0.0 && self.codes.nonzero_count() == 0
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.dequantize(self.alpha)
    }

    /// Whether the solution's stored objective and codes fit `w` and each other.
    pub fn check(&self, w: &[f64]) -> Result<()> {
        let j = objective(w, &self.codes, self.alpha)?;
        if (j - self.objective).abs() > 1e-12 * (1.0 + j.abs()) || self.alpha < 0.0 {
            return Err(Error::Invariant(format!(
                "solution objective {} disagrees with recomputed {j}",
                self.objective
            )));
        }
        Ok(())
    }
}

/// Nearest-center assignment: `|w| <= alpha/2` maps to 0, otherwise `sign(w)`.
/// Exact ties at `alpha/2` go to zero.
pub fn assign_codes(w: &[f64], alpha: f64) -> Result<Codes> {
    if !(alpha > 0.0) {
        return Err(Error::Precondition(format!(
            "assignment needs alpha > 0, got {alpha}"
        )));
    }
    let half = alpha / 2.0;
    Ok(Codes(
        w.iter()
            .map(|&x| {
                if x.abs() <= half {
                    0
                } else if x > 0.0 {
                    1
                } else {
                    -1
                }
            })
            .collect(),
    ))
}

/// Closed-form least-squares scale for fixed codes:
/// `sum(c_i * w_i) / #{c_i != 0}`. `None` when every code is zero.
pub fn update_alpha(w: &[f64], codes: &Codes) -> Result<Option<f64>> {
    if w.len() != codes.len() {
        return Err(Error::Dimension(format!(
            "{} weights but {} codes",
            w.len(),
            codes.len()
        )));
    }
    let mut num = 0.0;
    let mut count = 0usize;
    for (&x, &c) in w.iter().zip(codes.as_slice()) {
        match c {
            1 => num += x,
            -1 => num -= x,
            _ => continue,
        }
        count += 1;
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(num / count as f64))
}

/// `||w - alpha * c||^2`.
pub fn objective(w: &[f64], codes: &Codes, alpha: f64) -> Result<f64> {
    if w.len() != codes.len() {
        return Err(Error::Dimension(format!(
            "{} weights but {} codes",
            w.len(),
            codes.len()
        )));
    }
    Ok(w
        .iter()
        .zip(codes.as_slice())
        .map(|(&x, &c)| {
            let r = x - alpha * f64::from(c);
            r * r
        })
        .sum())
}

fn degenerate(w: &[f64], iterations: usize, trace: Vec<f64>) -> ClusterSolution {
    ClusterSolution {
        codes: Codes::zeros(w.len()),
        alpha: 0.0,
        objective: w.iter().map(|x| x * x).sum(),
        iterations,
        trace,
    }
}

/// Alternating minimization from `alpha = mean(|w|)` until the codes stop
/// changing and `alpha` moves less than the tolerance, or the iteration cap.
pub fn solve(w: &[f64], config: &SolverConfig) -> Result<ClusterSolution> {
    if w.is_empty() {
        return Err(Error::Domain("cannot cluster an empty weight vector".into()));
    }
    if let Some(pos) = w.iter().position(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite weight at index {pos}")));
    }
    let mut alpha = mean_abs(w)?;
    if alpha < config.alpha_floor {
        return Ok(degenerate(w, 0, Vec::new()));
    }

    let mut codes: Option<Codes> = None;
    let mut trace = Vec::with_capacity(8);
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let next = assign_codes(w, alpha)?;
        trace.push(objective(w, &next, alpha)?);
        let changed = codes.as_ref() != Some(&next);

        let Some(next_alpha) = update_alpha(w, &next)? else {
            return Ok(degenerate(w, iterations, trace));
        };
        if !(next_alpha > 0.0) {
            return Ok(degenerate(w, iterations, trace));
        }
        trace.push(objective(w, &next, next_alpha)?);

        let delta = (next_alpha - alpha).abs();
        alpha = next_alpha;
        codes = Some(next);
        if !changed && delta < config.alpha_tolerance {
            break;
        }
    }

    let codes = codes.expect("at least one iteration runs");
    let objective = *trace.last().expect("trace is non-empty");
    Ok(ClusterSolution {
        codes,
        alpha,
        objective,
        iterations,
        trace,
    })
}

/// Global optimum by enumerating all `3^N` code vectors. Test oracle for
/// [`solve`]; refuses inputs longer than [`BRUTE_FORCE_MAX_LEN`].
pub fn brute_force_solve(w: &[f64]) -> Result<ClusterSolution> {
    let n = w.len();
    if n > BRUTE_FORCE_MAX_LEN {
        return Err(Error::Refused(format!(
            "brute force over 3^{n} assignments (limit N <= {BRUTE_FORCE_MAX_LEN})"
        )));
    }
    if n == 0 {
        return Err(Error::Domain("cannot cluster an empty weight vector".into()));
    }
    let total = 3usize.pow(n as u32);
    let mut codes = vec![0i8; n];
    let mut best: Option<(f64, f64, Vec<i8>)> = None;
    for index in 0..total {
        let mut k = index;
        for c in codes.iter_mut() {
            *c = CENTERS[k % 3];
            k /= 3;
        }
        let (mut num, mut count) = (0.0, 0usize);
        for (&x, &c) in w.iter().zip(&codes) {
            if c != 0 {
                num += f64::from(c) * x;
                count += 1;
            }
        }
        let alpha = if count == 0 { 0.0 } else { num / count as f64 };
        let j: f64 = w
            .iter()
            .zip(&codes)
            .map(|(&x, &c)| (x - alpha * f64::from(c)).powi(2))
            .sum();
        if best.as_ref().is_none_or(|(bj, _, _)| j < *bj) {
            best = Some((j, alpha, codes.clone()));
        }
    }
    let (j, mut alpha, mut codes) = best.expect("at least one assignment");
    if alpha < 0.0 {
        alpha = -alpha;
        codes.iter_mut().for_each(|c| *c = -*c);
    }
    Ok(ClusterSolution {
        codes: Codes(codes),
        alpha,
        objective: j,
        iterations: total,
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn codes(v: &[i8]) -> Codes {
        Codes::new(v.to_vec()).unwrap()
    }

    const SAMPLE: [f64; 4] = [0.9, 0.1, -0.8, 0.05];

    #[test]
    fn assign_examples() {
        assert_eq!(assign_codes(&[1.0, -1.0, 0.0], 1.0).unwrap(), codes(&[1, -1, 0]));
        assert_eq!(assign_codes(&SAMPLE, 0.4625).unwrap(), codes(&[1, 0, -1, 0]));
        assert_eq!(assign_codes(&[0.5], 1.0).unwrap(), codes(&[0]));
        assert_eq!(assign_codes(&[-0.5], 1.0).unwrap(), codes(&[0]));
        assert!(matches!(assign_codes(&[1.0], 0.0), Err(Error::Precondition(_))));
        assert!(matches!(assign_codes(&[1.0], -1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn update_alpha_examples() {
        let a = update_alpha(&SAMPLE, &codes(&[1, 0, -1, 0])).unwrap().unwrap();
        assert!((a - 0.85).abs() < 1e-15);
        assert_eq!(update_alpha(&[2.0, -2.0], &codes(&[1, -1])).unwrap(), Some(2.0));
        let a = update_alpha(&[0.3, 0.2, 0.1], &codes(&[1, 1, 0])).unwrap().unwrap();
        assert!((a - 0.25).abs() < 1e-15);
        assert_eq!(update_alpha(&[1.0, 2.0], &codes(&[0, 0])).unwrap(), None);
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective(&[1.0, -1.0], &codes(&[1, -1]), 1.0).unwrap(), 0.0);
        let j = objective(&SAMPLE, &codes(&[1, 0, -1, 0]), 0.85).unwrap();
        assert!((j - 0.0175).abs() < 1e-12);
        assert!(matches!(
            objective(&[1.0], &codes(&[1, 0]), 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn objective_matches_elementwise_loop() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let n = 1 + rng.below(40);
            let w: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
            let c: Vec<i8> = (0..n).map(|_| rng.below(3) as i8 - 1).collect();
            let alpha = rng.uniform(0.0, 2.0);
            let mut expected = 0.0;
            for i in 0..n {
                let center = if c[i] == 1 {
                    alpha
                } else if c[i] == -1 {
                    -alpha
                } else {
                    0.0
                };
                expected += (w[i] - center) * (w[i] - center);
            }
            let got = objective(&w, &codes(&c), alpha).unwrap();
            assert!((got - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn solve_examples() {
        let cfg = SolverConfig::default();
        let s = solve(&[1.0, -1.0, 0.0, 1.0], &cfg).unwrap();
        assert_eq!(s.alpha, 1.0);
        assert_eq!(s.codes, codes(&[1, -1, 0, 1]));
        assert_eq!(s.objective, 0.0);

        let s = solve(&SAMPLE, &cfg).unwrap();
        assert!((s.alpha - 0.85).abs() < 1e-12);
        assert_eq!(s.codes, codes(&[1, 0, -1, 0]));
        assert!((s.objective - 0.0175).abs() < 1e-12);
        let b = brute_force_solve(&SAMPLE).unwrap();
        assert!((b.objective - s.objective).abs() < 1e-12);

        let s = solve(&[0.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(s.alpha, 0.0);
        assert_eq!(s.codes, codes(&[0, 0, 0]));
        assert_eq!(s.objective, 0.0);
        assert!(s.is_degenerate());
    }

    #[test]
    fn solve_near_zero_layer_is_degenerate() {
        let s = solve(&[1e-14, -1e-14], &SolverConfig::default()).unwrap();
        assert!(s.is_degenerate());
        s.check(&[1e-14, -1e-14]).unwrap();
    }

    #[test]
    fn solve_rejects_bad_input() {
        let cfg = SolverConfig::default();
        assert!(matches!(solve(&[], &cfg), Err(Error::Domain(_))));
        assert!(matches!(solve(&[1.0, f64::NAN], &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn brute_force_examples() {
        let b = brute_force_solve(&[1.0, -1.0]).unwrap();
        assert_eq!(b.objective, 0.0);
        assert_eq!(b.alpha, 1.0);
        let b = brute_force_solve(&[0.6]).unwrap();
        assert_eq!(b.objective, 0.0);
        assert_eq!(b.alpha, 0.6);
        assert_eq!(b.codes, codes(&[1]));
        assert!(matches!(brute_force_solve(&[0.0; 13]), Err(Error::Refused(_))));
    }

    #[test]
    fn brute_force_bounds_solver_on_length_eight() {
        let mut rng = Rng::new(8);
        let cfg = SolverConfig::default();
        for _ in 0..100 {
            let w: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
            let s = solve(&w, &cfg).unwrap();
            let b = brute_force_solve(&w).unwrap();
            assert!(b.objective <= s.objective + 1e-12);
        }
    }

    #[test]
    fn codes_reject_out_of_range() {
        assert!(Codes::new(vec![2]).is_err());
        assert!(serde_json::from_str::<Codes>("[0, 1, -2]").is_err());
    }

    fn weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 1..64)
    }

    proptest! {
        #[test]
        fn descent_is_monotone(w in weights()) {
            let s = solve(&w, &SolverConfig::default()).unwrap();
            for pair in s.trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12);
            }
            prop_assert!(s.iterations <= 100);
            s.check(&w).unwrap();
        }

        #[test]
        fn converged_solution_is_a_fixed_point(w in weights()) {
            let cfg = SolverConfig::default();
            let s = solve(&w, &cfg).unwrap();
            prop_assume!(!s.is_degenerate());
            let again = assign_codes(&w, s.alpha).unwrap();
            prop_assert_eq!(&again, &s.codes);
            let alpha = update_alpha(&w, &again).unwrap().unwrap();
            prop_assert!((alpha - s.alpha).abs() < cfg.alpha_tolerance);
        }

        #[test]
        fn scale_equivariance(w in weights(), c in 0.01f64..100.0) {
            let cfg = SolverConfig::default();
            let s = solve(&w, &cfg).unwrap();
            let scaled: Vec<f64> = w.iter().map(|x| c * x).collect();
            let t = solve(&scaled, &cfg).unwrap();
            prop_assert_eq!(&t.codes, &s.codes);
            prop_assert!((t.alpha - c * s.alpha).abs() <= 1e-9 * (1.0 + c * s.alpha));
            prop_assert!((t.objective - c * c * s.objective).abs() <= 1e-9 * (1.0 + c * c * s.objective));
        }

        #[test]
        fn sign_symmetry(w in weights()) {
            let cfg = SolverConfig::default();
            let s = solve(&w, &cfg).unwrap();
            let neg: Vec<f64> = w.iter().map(|x| -x).collect();
            let t = solve(&neg, &cfg).unwrap();
            prop_assert_eq!(t.codes, s.codes.negated());
            prop_assert_eq!(t.alpha, s.alpha);
            prop_assert_eq!(t.objective, s.objective);
        }

        #[test]
        fn codes_follow_weight_signs(w in weights(), alpha in 1e-3f64..10.0) {
            let c = assign_codes(&w, alpha).unwrap();
            for (&x, &code) in w.iter().zip(c.as_slice()) {
                if x > 0.0 { prop_assert!(code != -1); }
                if x < 0.0 { prop_assert!(code != 1); }
            }
        }
    }
}
