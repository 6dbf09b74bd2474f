//! Frequency, amplitude and time-scale parameters of the iteration, and the
//! logarithmic form of the inequalities they must satisfy.

use serde::{Deserialize, Serialize};

use super::SchemeError;

/// Exponents of the geometric schedule `λ_q = a^{c b^q}`, `δ_q = a^{−b^q}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricParams {
    pub a: u64,
    pub b: f64,
    pub c: f64,
    pub beta: f64,
    pub alpha: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

pub fn default_eta() -> f64 {
    0.01
}

/// Explicit desk-scale parameters: `lambda = [λ_0, λ_1, …]`,
/// `delta = [δ_1, δ_2, …]`, `mu = [μ_1, μ_2, …]`. Stage `q` uses
/// `λ_q, λ_{q+1}, δ_{q+1}, δ_{q+2}, μ_{q+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualParams {
    pub lambda: Vec<i64>,
    pub delta: Vec<f64>,
    pub mu: Vec<f64>,
    #[serde(default = "default_eta")]
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Geometric(GeometricParams),
    Manual(ManualParams),
}

/// Everything one stage `q → q+1` needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageParams {
    pub q: u32,
    pub lambda_q: f64,
    pub lambda_next: i64,
    pub delta_next: f64,
    pub delta_next2: f64,
    pub mu: f64,
    /// Mollifier width `ℓ = λ_q^{−3/4} λ_{q+1}^{−1/4}`.
    pub ell: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSchedule {
    pub kind: ScheduleKind,
    /// `λ_q` for `q = 0..=horizon` (integers stored as `f64`; they may exceed
    /// the `i64` range in the geometric schedule).
    pub lambda: Vec<f64>,
    pub delta: Vec<f64>,
    pub mu: Vec<f64>,
    /// `ζ_max = 1/(2c)`; absent for manual schedules.
    pub zeta_max: Option<f64>,
}

/// Least multiple of 13 that is at least `x`.
fn ceil13(x: f64) -> f64 {
    (x / 13.0 - 1e-12).ceil().max(1.0) * 13.0
}

pub fn make_schedule(p: GeometricParams, horizon: usize) -> Result<ParameterSchedule, SchemeError> {
    let bad = |s: String| Err(SchemeError::Schedule(s));
    if p.a % 13 != 0 || p.a < 26 {
        return bad(format!(
            "a = {} must be a multiple of 13 and at least 26",
            p.a
        ));
    }
    if !(p.b > 1.0) {
        return bad(format!("b = {} must exceed 1", p.b));
    }
    if !(p.c > 2.5) {
        return bad(format!("c = {} must exceed 5/2", p.c));
    }
    if !(0.0 < p.alpha && p.alpha < p.beta && p.beta < 1.0) {
        return bad(format!(
            "need 0 < α < β < 1, got α = {}, β = {}",
            p.alpha, p.beta
        ));
    }
    if !(0.0 < p.eta && p.eta < 1.0) {
        return bad(format!("η = {} must lie in (0, 1)", p.eta));
    }
    let a = p.a as f64;
    let lambda: Vec<f64> = (0..=horizon + 1)
        .map(|q| ceil13(a.powf(p.c * p.b.powi(q as i32))))
        .collect();
    let delta: Vec<f64> = (0..=horizon + 2)
        .map(|q| a.powf(-p.b.powi(q as i32)))
        .collect();
    let mu = (0..=horizon)
        .map(|q| (delta[q] * delta[q + 1]).powf(0.25) * (lambda[q] * lambda[q + 1]).sqrt())
        .collect();
    Ok(ParameterSchedule {
        kind: ScheduleKind::Geometric(p),
        lambda,
        delta,
        mu,
        zeta_max: Some(0.5 / p.c),
    })
}

pub fn manual_schedule(p: ManualParams) -> Result<ParameterSchedule, SchemeError> {
    let bad = |s: String| Err(SchemeError::Schedule(s));
    let stages = p.mu.len();
    if stages == 0 || p.lambda.len() != stages + 1 || p.delta.len() != stages + 1 {
        return bad(format!(
            "manual schedule with {stages} stages needs {} λ values and {} δ values, got {} and {}",
            stages + 1,
            stages + 1,
            p.lambda.len(),
            p.delta.len()
        ));
    }
    if p.lambda[0] <= 0 || p.lambda.windows(2).any(|w| w[1] <= w[0]) {
        return bad(format!(
            "λ must be positive and strictly increasing, got {:?}",
            p.lambda
        ));
    }
    if p.delta.iter().any(|d| !(*d > 0.0)) || p.delta.windows(2).any(|w| w[1] >= w[0]) {
        return bad(format!(
            "δ must be positive and strictly decreasing, got {:?}",
            p.delta
        ));
    }
    if p.mu.iter().any(|m| !(*m > 0.0)) {
        return bad("μ must be positive".into());
    }
    if !(0.0 < p.eta && p.eta < 1.0) {
        return bad(format!("η = {} must lie in (0, 1)", p.eta));
    }
    // δ_0 is not used by a stage; keep the vector indexed by q.
    let mut delta = vec![f64::NAN];
    delta.extend(&p.delta);
    Ok(ParameterSchedule {
        lambda: p.lambda.iter().map(|&l| l as f64).collect(),
        delta,
        mu: p.mu.clone(),
        kind: ScheduleKind::Manual(p),
        zeta_max: None,
    })
}

impl ParameterSchedule {
    pub fn stages(&self) -> usize {
        self.mu.len()
    }

    pub fn eta(&self) -> f64 {
        match &self.kind {
            ScheduleKind::Geometric(p) => p.eta,
            ScheduleKind::Manual(p) => p.eta,
        }
    }

    pub fn stage(&self, q: u32) -> Result<StageParams, SchemeError> {
        let i = q as usize;
        if i >= self.stages() {
            return Err(SchemeError::Schedule(format!(
                "stage {q} is beyond the schedule ({} stages)",
                self.stages()
            )));
        }
        let next = self.lambda[i + 1];
        if next > i64::MAX as f64 / 4.0 {
            return Err(SchemeError::Schedule(format!(
                "λ_{} = {next:e} does not fit a grid",
                q + 1
            )));
        }
        Ok(StageParams {
            q,
            lambda_q: self.lambda[i],
            lambda_next: next as i64,
            delta_next: self.delta[i + 1],
            delta_next2: self.delta[i + 2],
            mu: self.mu[i],
            ell: self.lambda[i].powf(-0.75) * next.powf(-0.25),
            eta: self.eta(),
        })
    }
}

/// Margins of the seven parameter inequalities in base-`a` logarithmic form; an
/// inequality holds when its margin is `≤ 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityReport {
    pub q: u32,
    pub margins: [f64; 7],
    pub holds: [bool; 7],
}

impl InequalityReport {
    pub fn all_hold(&self) -> bool {
        self.holds.iter().all(|&h| h)
    }
}

/// Evaluates the reductions of the parameter inequalities after taking
/// `log_a` and dividing by `b^q` where the exponents allow it.
pub fn check_inequalities(p: &GeometricParams, q: u32) -> InequalityReport {
    let (b, c, beta, alpha) = (p.b, p.c, p.beta, p.alpha);
    let la = (p.a as f64).ln();
    let log_a = |x: f64| x.ln() / la;
    let bq1 = b.powi(q as i32 + 1);
    let margins = [
        // δ_q^{1/2}λ_q/μ_{q+1} ≤ λ_{q+1}^{−β}
        b * (0.25 - (0.5 - beta) * c) + 0.5 * c - 0.25,
        // μ_{q+1}δ_{q+1}^{1/2} ≤ δ_{q+2}λ_{q+1}
        b * b - b * (0.75 + 0.5 * c) - 0.25 + 0.5 * c,
        // l_{q+1}δ_{q+1}/λ_{q+1} ≤ ηδ_{q+2} with l_{q+1} = 2^{q+2}
        (q as f64 + 2.0) * log_a(2.0) - bq1 - c * bq1 - (log_a(p.eta) - b * bq1),
        // δ_{q+1}δ_q^{1/2}λ_q ≤ δ_{q+2}δ_{q+1}^{1/2}λ_{q+1}
        b * b - b * (c + 0.5) + c - 0.5,
        // λ_q ≤ λ_{q+1}^{1−β}
        1.0 - (1.0 - beta) * b,
        // λ_q^{1+α} ≤ λ_{q+1}^{1−α}
        1.0 + alpha - (1.0 - alpha) * b,
        // ℓλ_q ≤ 1, i.e. (c/4)(1 − b) ≤ 0
        0.25 * c * (1.0 - b),
    ];
    InequalityReport {
        q,
        margins,
        holds: margins.map(|m| m <= 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk(b: f64) -> GeometricParams {
        GeometricParams {
            a: 26,
            b,
            c: 2.6,
            beta: 0.01,
            alpha: 0.001,
            eta: 0.01,
        }
    }

    #[test]
    fn lambda_is_the_next_multiple_of_13() {
        let s = make_schedule(desk(1.03), 3).unwrap();
        let x = 26f64.powf(2.6);
        assert_eq!(s.lambda[0], (x / 13.0).ceil() * 13.0);
        for q in 0..4 {
            let raw = 26f64.powf(2.6 * 1.03f64.powi(q as i32));
            assert!(s.lambda[q] >= raw && s.lambda[q] - raw < 13.0);
            assert_eq!(s.lambda[q] % 13.0, 0.0);
        }
        assert!(s.lambda.windows(2).all(|w| w[1] > w[0]));
        assert!(s.delta.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.zeta_max, Some(0.5 / 2.6));
    }

    #[test]
    fn mu_matches_its_definition() {
        let s = make_schedule(desk(1.03), 2).unwrap();
        let st = s.stage(1).unwrap();
        let expect = (s.delta[1] * s.delta[2]).powf(0.25) * (s.lambda[1] * s.lambda[2]).sqrt();
        assert!((st.mu - expect).abs() <= 1e-12 * expect);
        assert!((st.ell - s.lambda[1].powf(-0.75) * s.lambda[2].powf(-0.25)).abs() < 1e-15);
    }

    #[test]
    fn constraint_violations_are_rejected() {
        assert!(make_schedule(
            GeometricParams {
                a: 27,
                ..desk(1.03)
            },
            1
        )
        .is_err());
        assert!(make_schedule(
            GeometricParams {
                a: 13,
                ..desk(1.03)
            },
            1
        )
        .is_err());
        assert!(make_schedule(
            GeometricParams {
                c: 2.0,
                ..desk(1.03)
            },
            1
        )
        .is_err());
        assert!(make_schedule(
            GeometricParams {
                b: 1.0,
                ..desk(1.03)
            },
            1
        )
        .is_err());
        assert!(make_schedule(
            GeometricParams {
                alpha: 0.02,
                ..desk(1.03)
            },
            1
        )
        .is_err());
    }

    #[test]
    fn manual_schedule_validation() {
        let ok = ManualParams {
            lambda: vec![13, 130],
            delta: vec![1.0, 0.25],
            mu: vec![10.0],
            eta: 0.01,
        };
        let s = manual_schedule(ok.clone()).unwrap();
        let st = s.stage(0).unwrap();
        assert_eq!(
            (st.lambda_next, st.delta_next, st.delta_next2, st.mu),
            (130, 1.0, 0.25, 10.0)
        );
        assert!(s.stage(1).is_err());
        assert!(manual_schedule(ManualParams {
            lambda: vec![130, 13],
            ..ok.clone()
        })
        .is_err());
        assert!(manual_schedule(ManualParams {
            delta: vec![0.25, 1.0],
            ..ok.clone()
        })
        .is_err());
        assert!(manual_schedule(ManualParams { mu: vec![], ..ok }).is_err());
    }

    /// Independent oracle: the inequalities evaluated directly on the
    /// unrounded powers of `a`, in logarithms.
    fn direct(p: &GeometricParams, q: u32) -> [f64; 7] {
        let la = (p.a as f64).ln();
        let lam = |q: u32| p.c * p.b.powi(q as i32) * la;
        let del = |q: u32| -p.b.powi(q as i32) * la;
        let mu = 0.25 * del(q) + 0.25 * del(q + 1) + 0.5 * lam(q) + 0.5 * lam(q + 1);
        let ell = -0.75 * lam(q) - 0.25 * lam(q + 1);
        let lnl = (q as f64 + 2.0) * 2f64.ln();
        [
            0.5 * del(q) + lam(q) - mu + p.beta * lam(q + 1),
            mu + 0.5 * del(q + 1) - del(q + 2) - lam(q + 1),
            lnl + del(q + 1) - lam(q + 1) - p.eta.ln() - del(q + 2),
            del(q + 1) + 0.5 * del(q) + lam(q) - del(q + 2) - 0.5 * del(q + 1) - lam(q + 1),
            lam(q) - (1.0 - p.beta) * lam(q + 1),
            (1.0 + p.alpha) * lam(q) - (1.0 - p.alpha) * lam(q + 1),
            ell + lam(q),
        ]
    }

    #[test]
    fn feasibility_structure() {
        for q in 0..=5 {
            let r = check_inequalities(&desk(1.03), q);
            assert!(r.all_hold(), "q = {q}: {:?}", r.margins);
        }
        assert!(!check_inequalities(&desk(1.001), 0).holds[0]);
        let r = check_inequalities(&desk(1.06), 0);
        assert!(!r.holds[1]);
    }

    #[test]
    fn quadratic_roots_bracket_the_desk_b() {
        // (2): b² − b(3/4 + c/2) + c/2 − 1/4 ≤ 0 between its two roots.
        let c = 2.6f64;
        let (p, r) = (0.75 + 0.5 * c, 0.5 * c - 0.25);
        let disc = (p * p - 4.0 * r).sqrt();
        let (lo, hi) = ((p - disc) / 2.0, (p + disc) / 2.0);
        assert!(lo < 1.03 && 1.03 < hi);
        assert!(1.06 > hi);
    }

    proptest! {
        #[test]
        fn log_forms_agree_with_direct_evaluation(
            b in 1.001f64..1.2, c in 2.51f64..4.0, beta in 0.001f64..0.2, q in 0u32..6
        ) {
            let p = GeometricParams { a: 26, b, c, beta, alpha: beta / 10.0, eta: 0.01 };
            let r = check_inequalities(&p, q);
            let d = direct(&p, q);
            let la = 26f64.ln();
            for i in 0..7 {
                // The reductions divide by b^q log a, by c b^q log a for (5)
                // and (6), and only by log a for (3).
                let scale = match i {
                    2 => la,
                    4 | 5 => la * c * b.powi(q as i32),
                    _ => la * b.powi(q as i32),
                };
                prop_assert!((r.margins[i] * scale - d[i]).abs() <= 1e-9 * (1.0 + d[i].abs()), "ineq {}", i + 1);
            }
        }
    }
}
