use std::sync::OnceLock;

use nalgebra::Matrix2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type U2 = Matrix2<Complex64>;

/// Physical pulses of the standard compilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicalPulse {
    I,
    X,
    Y,
    X2,
    MinusX2,
    Y2,
    MinusY2,
}

impl PhysicalPulse {
    pub const ALL: [PhysicalPulse; 7] = [Self::I, Self::X, Self::Y, Self::X2, Self::MinusX2, Self::Y2, Self::MinusY2];

    /// Rotation axis and angle.
    pub fn rotation(self) -> ([f64; 3], f64) {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Self::I => ([1.0, 0.0, 0.0], 0.0),
            Self::X => ([1.0, 0.0, 0.0], PI),
            Self::Y => ([0.0, 1.0, 0.0], PI),
            Self::X2 => ([1.0, 0.0, 0.0], FRAC_PI_2),
            Self::MinusX2 => ([-1.0, 0.0, 0.0], FRAC_PI_2),
            Self::Y2 => ([0.0, 1.0, 0.0], FRAC_PI_2),
            Self::MinusY2 => ([0.0, -1.0, 0.0], FRAC_PI_2),
        }
    }

    pub fn unitary(self) -> U2 {
        let (n, theta) = self.rotation();
        rotation_unitary(n, theta)
    }
}

/// `exp(-i theta n.sigma / 2)`.
pub fn rotation_unitary(n: [f64; 3], theta: f64) -> U2 {
    let c = Complex64::new((0.5 * theta).cos(), 0.0);
    let s = (0.5 * theta).sin();
    let mi = Complex64::new(0.0, -s);
    U2::new(
        c + mi * n[2],
        mi * Complex64::new(n[0], -n[1]),
        mi * Complex64::new(n[0], n[1]),
        c - mi * n[2],
    )
}

/// Axis and angle in `[0, pi]` of a 2x2 unitary, ignoring global phase.
pub fn rotation_of(u: &U2) -> ([f64; 3], f64) {
    let det = u.determinant();
    let mut v = u / det.sqrt();
    if v.trace().re < 0.0 {
        v = -v;
    }
    let c = (0.5 * v.trace().re).clamp(-1.0, 1.0);
    let theta = 2.0 * c.acos();
    let s = (0.5 * theta).sin();
    if s < 1e-12 {
        return ([1.0, 0.0, 0.0], 0.0);
    }
    let nx = -(v[(0, 1)] + v[(1, 0)]).im / (2.0 * s);
    let ny = (v[(1, 0)] - v[(0, 1)]).re / (2.0 * s);
    let nz = -(v[(0, 0)] - v[(1, 1)]).im / (2.0 * s);
    let norm = (nx * nx + ny * ny + nz * nz).sqrt();
    ([nx / norm, ny / norm, nz / norm], theta)
}

/// `|Tr(a^dag b)| / 2`, equal to one iff `a` and `b` agree up to a phase.
pub fn overlap(a: &U2, b: &U2) -> f64 {
    (a.adjoint() * b).trace().norm() / 2.0
}

#[derive(Debug, Clone)]
pub struct Clifford {
    /// Pulses in time order.
    pub pulses: Vec<PhysicalPulse>,
    pub unitary: U2,
}

fn compile(pulses: &[PhysicalPulse]) -> Clifford {
    let unitary = pulses.iter().fold(U2::identity(), |acc, p| p.unitary() * acc);
    Clifford { pulses: pulses.to_vec(), unitary }
}

/// The 24 single-qubit Cliffords; index 0 is the identity.
pub fn clifford_group() -> &'static [Clifford] {
    static GROUP: OnceLock<Vec<Clifford>> = OnceLock::new();
    GROUP.get_or_init(|| {
        use PhysicalPulse::*;
        let table: [&[PhysicalPulse]; 24] = [
            &[I],
            &[X],
            &[Y],
            &[Y, X],
            &[X2, Y2],
            &[X2, MinusY2],
            &[MinusX2, Y2],
            &[MinusX2, MinusY2],
            &[Y2, X2],
            &[Y2, MinusX2],
            &[MinusY2, X2],
            &[MinusY2, MinusX2],
            &[X2],
            &[MinusX2],
            &[Y2],
            &[MinusY2],
            &[MinusX2, Y2, X2],
            &[MinusX2, MinusY2, X2],
            &[X, Y2],
            &[X, MinusY2],
            &[Y, X2],
            &[Y, MinusX2],
            &[X2, Y2, X2],
            &[MinusX2, Y2, MinusX2],
        ];
        table.iter().map(|p| compile(p)).collect()
    })
}

/// Index of the Clifford equal to `u` up to global phase.
pub fn find_clifford(u: &U2) -> Option<usize> {
    clifford_group().iter().position(|c| overlap(&c.unitary, u) > 1.0 - 1e-9)
}

/// Mean number of physical pulses per Clifford, with the identity counted
/// as one idle slot.
pub fn mean_pulses_per_clifford() -> f64 {
    let g = clifford_group();
    g.iter().map(|c| c.pulses.len() as f64).sum::<f64>() / g.len() as f64
}

/// `n` uniformly random Cliffords followed by the recovery Clifford that
/// returns the ideal sequence to the identity.
pub fn clifford_sequence(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq: Vec<usize> = (0..n).map(|_| rng.random_range(0..24)).collect();
    seq.push(recovery(&seq));
    seq
}

pub fn recovery(seq: &[usize]) -> usize {
    let g = clifford_group();
    let total = seq.iter().fold(U2::identity(), |acc, &k| g[k].unitary * acc);
    find_clifford(&total.adjoint()).expect("Clifford group is closed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn group_has_24_distinct_elements() {
        let g = clifford_group();
        for i in 0..24 {
            for j in 0..i {
                assert!(overlap(&g[i].unitary, &g[j].unitary) < 0.99, "{i} {j}");
            }
        }
        assert!((mean_pulses_per_clifford() - 1.875).abs() < 1e-12);
    }

    #[test]
    fn group_is_closed() {
        let g = clifford_group();
        for a in g {
            for b in g {
                assert!(find_clifford(&(a.unitary * b.unitary)).is_some());
            }
        }
    }

    #[test]
    fn rotation_round_trip() {
        for c in clifford_group() {
            let (n, th) = rotation_of(&c.unitary);
            assert!(overlap(&rotation_unitary(n, th), &c.unitary) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn identity_recovery() {
        assert_eq!(recovery(&[0]), 0);
        assert_eq!(recovery(&[1, 1]), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sequences_compose_to_identity(n in 1usize..60, seed in any::<u64>()) {
            let seq = clifford_sequence(n, seed);
            prop_assert_eq!(seq.len(), n + 1);
            let g = clifford_group();
            let total = seq.iter().fold(U2::identity(), |acc, &k| g[k].unitary * acc);
            prop_assert!(overlap(&total, &U2::identity()) > 1.0 - 1e-9);
            prop_assert_eq!(clifford_sequence(n, seed), seq);
        }
    }
}
