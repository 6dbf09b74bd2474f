//! Time cutoffs `χ_l` with `Σ_l χ_l² = 1`, and the prescribed energy profile.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::blocks::{smoothstep, smoothstep_prime};

/// `χ(s) = 1` for `|s| ≤ 1/4`, `sin(π/2 · S₅(3/2 − 2|s|))` for
/// `1/4 ≤ |s| ≤ 3/4`, zero beyond. `χ(s)² + χ(s − 1)² = 1` on `[0, 1]`
/// because `S₅(1 − x) = 1 − S₅(x)`.
pub fn chi(s: f64) -> f64 {
    let a = s.abs();
    if a <= 0.25 {
        1.0
    } else if a >= 0.75 {
        0.0
    } else {
        (FRAC_PI_2 * smoothstep(1.5 - 2.0 * a)).sin()
    }
}

pub fn chi_prime(s: f64) -> f64 {
    let a = s.abs();
    if a <= 0.25 || a >= 0.75 {
        return 0.0;
    }
    let x = 1.5 - 2.0 * a;
    let d = (FRAC_PI_2 * smoothstep(x)).cos() * FRAC_PI_2 * smoothstep_prime(x) * -2.0;
    d * s.signum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimePartition {
    pub mu: f64,
    pub l_min: i64,
    pub l_max: i64,
}

impl TimePartition {
    /// Indices `l ∈ Z ∩ [−Rμ, Rμ]`.
    pub fn new(mu: f64, radius: f64) -> Self {
        let r = (radius * mu).floor() as i64;
        Self {
            mu,
            l_min: -r,
            l_max: r,
        }
    }

    pub fn anchor(&self, l: i64) -> f64 {
        l as f64 / self.mu
    }

    pub fn chi_l(&self, l: i64, t: f64) -> f64 {
        chi(self.mu * t - l as f64)
    }

    /// `∂_t χ_l(t) = μ χ'(μt − l)`.
    pub fn dchi_l(&self, l: i64, t: f64) -> f64 {
        self.mu * chi_prime(self.mu * t - l as f64)
    }

    /// Indices in range whose cutoff is nonzero at `t`.
    pub fn active(&self, t: f64) -> Vec<i64> {
        let c = (self.mu * t).round() as i64;
        (c - 1..=c + 1)
            .filter(|&l| l >= self.l_min && l <= self.l_max && self.chi_l(l, t) > 0.0)
            .collect()
    }

    /// `max |Σ_l χ_l(t)² − 1|` over `t` in `samples`, summing over all `l ∈ Z`.
    pub fn partition_defect(&self, samples: &[f64]) -> f64 {
        samples
            .iter()
            .map(|&t| {
                let c = (self.mu * t).round() as i64;
                let s: f64 = (c - 1..=c + 1).map(|l| self.chi_l(l, t).powi(2)).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Prescribed energy `e(t)`, in units of `∫_{T³}|∇Ψ|²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergyProfile {
    Zero,
    /// `height · exp(1 − 1/(1 − s²))` with `s = (t − center)/width`.
    Bump {
        center: f64,
        width: f64,
        height: f64,
    },
}

impl EnergyProfile {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            EnergyProfile::Zero => 0.0,
            EnergyProfile::Bump {
                center,
                width,
                height,
            } => {
                let s = (t - center) / width;
                if s.abs() >= 1.0 {
                    0.0
                } else {
                    height * (1.0 - 1.0 / (1.0 - s * s)).exp()
                }
            }
        }
    }

    /// Radius `R` of a ball containing the support.
    pub fn radius(&self) -> f64 {
        match *self {
            EnergyProfile::Zero => 0.0,
            EnergyProfile::Bump { center, width, .. } => center.abs() + width,
        }
    }

    pub fn max(&self) -> f64 {
        match *self {
            EnergyProfile::Zero => 0.0,
            EnergyProfile::Bump { height, .. } => height,
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        match *self {
            EnergyProfile::Zero => EnergyProfile::Zero,
            EnergyProfile::Bump {
                center,
                width,
                height,
            } => EnergyProfile::Bump {
                center,
                width,
                height: height * f,
            },
        }
    }

    /// Rescales so that `max e ≤ cap`; returns the profile and the factor.
    pub fn capped(&self, cap: f64) -> (Self, f64) {
        let m = self.max();
        if m <= cap || m == 0.0 {
            (*self, 1.0)
        } else {
            (self.scaled(cap / m), cap / m)
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            EnergyProfile::Zero => true,
            EnergyProfile::Bump {
                center,
                width,
                height,
            } => center.is_finite() && width > 0.0 && height >= 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partition_of_unity() {
        let p = TimePartition::new(10.0, 3.0);
        let ts: Vec<f64> = (0..10_000)
            .map(|i| -2.5 + 5.0 * i as f64 / 9999.0)
            .collect();
        assert!(p.partition_defect(&ts) < 1e-12);
    }

    #[test]
    fn cutoff_shape() {
        let p = TimePartition::new(7.0, 2.0);
        for l in -3..=3 {
            assert_eq!(p.chi_l(l, p.anchor(l)), chi(0.0));
            assert!(chi(0.0) > 0.0);
            // χ_l and χ_{l+2} never overlap.
            for i in 0..1000 {
                let t = p.anchor(l) + (i as f64 / 1000.0 - 0.5) * 4.0 / 7.0;
                assert_eq!(p.chi_l(l, t) * p.chi_l(l + 2, t), 0.0);
            }
        }
        for s in [-0.75, -0.8, 0.75, 1.0] {
            assert_eq!(chi(s), 0.0);
        }
    }

    #[test]
    fn chi_prime_matches_differences() {
        let h = 1e-6;
        for i in 0..200 {
            let s = -0.9 + 1.8 * i as f64 / 199.0;
            let fd = (chi(s + h) - chi(s - h)) / (2.0 * h);
            assert!((fd - chi_prime(s)).abs() < 1e-6, "s = {s}");
        }
    }

    #[test]
    fn active_indices_overlap_adjacently() {
        let p = TimePartition::new(10.0, 3.0);
        for i in 0..2000 {
            let t = -3.0 + 6.0 * i as f64 / 1999.0;
            let a = p.active(t);
            assert!(!a.is_empty() || t.abs() > 2.9);
            assert!(a.len() <= 2);
            if a.len() == 2 {
                assert_eq!(a[1] - a[0], 1);
            }
        }
    }

    #[test]
    fn bump_profile() {
        let e = EnergyProfile::Bump {
            center: 0.5,
            width: 2.0,
            height: 0.8,
        };
        assert_eq!(e.value(0.5), 0.8);
        assert_eq!(e.value(2.5), 0.0);
        assert!(e.value(1.0) > 0.0 && e.value(1.0) < 0.8);
        assert_eq!(e.radius(), 2.5);
        let (c, f) = e.capped(0.4);
        assert_eq!(f, 0.5);
        assert_eq!(c.max(), 0.4);
    }

    proptest! {
        #[test]
        fn squares_sum_to_one(mu in 1.0f64..200.0, t in -5.0f64..5.0) {
            let p = TimePartition::new(mu, 100.0);
            prop_assert!(p.partition_defect(&[t]) < 1e-12);
            prop_assert!(p.active(t).len() <= 2);
        }

        #[test]
        fn capped_profile_respects_the_cap(height in 0.0f64..10.0, cap in 0.01f64..5.0, t in -2.0f64..2.0) {
            let e = EnergyProfile::Bump { center: 0.1, width: 1.5, height };
            let (c, f) = e.capped(cap);
            prop_assert!(c.max() <= cap * (1.0 + 1e-15));
            prop_assert!((c.value(t) - f * e.value(t)).abs() <= 1e-15 * e.value(t).max(1.0));
        }
    }
}
