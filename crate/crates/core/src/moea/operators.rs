//! Simulated binary crossover and polynomial mutation.

use rand::Rng;

use super::{Genome, MoeaError};

/// SBX spread factor for a uniform draw `u` in [0, 1).
pub fn spread_factor(u: f64, eta: f64) -> f64 {
    let e = 1.0 / (eta + 1.0);
    if u <= 0.5 {
        (2.0 * u).powf(e)
    } else {
        (1.0 / (2.0 * (1.0 - u))).powf(e)
    }
}

/// Unclipped children of one gene pair. Their sum equals the parents' sum.
///
/// Written as mean ± half-spread so that identical parents reproduce exactly.
pub fn sbx_pair(p1: f64, p2: f64, beta: f64) -> (f64, f64) {
    let sum = p1 + p2;
    let spread = beta * (p2 - p1);
    (0.5 * (sum - spread), 0.5 * (sum + spread))
}

/// With probability `rate`, crosses each gene independently with probability
/// one half; children are clipped to the bounds.
pub fn sbx_crossover<R: Rng + ?Sized>(
    a: &Genome,
    b: &Genome,
    eta: f64,
    rate: f64,
    rng: &mut R,
) -> Result<(Genome, Genome), MoeaError> {
    if a.values.len() != b.values.len() || a.bounds != b.bounds {
        return Err(MoeaError::GenomeMismatch);
    }
    let (mut c1, mut c2) = (a.clone(), b.clone());
    if rng.random::<f64>() >= rate {
        return Ok((c1, c2));
    }
    for (i, bound) in a.bounds.iter().enumerate() {
        if !rng.random_bool(0.5) {
            continue;
        }
        let beta = spread_factor(rng.random::<f64>(), eta);
        let (x, y) = sbx_pair(a.values[i], b.values[i], beta);
        c1.values[i] = bound.clip(x);
        c2.values[i] = bound.clip(y);
    }
    Ok((c1, c2))
}

/// Bounded polynomial mutation of one gene for a uniform draw `u`.
pub fn mutate_gene(x: f64, lo: f64, hi: f64, u: f64, eta: f64) -> f64 {
    let range = hi - lo;
    if range <= 0.0 {
        return x;
    }
    let d1 = (x - lo) / range;
    let d2 = (hi - x) / range;
    let e = eta + 1.0;
    let dq = if u < 0.5 {
        (2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(e)).powf(1.0 / e) - 1.0
    } else {
        1.0 - (2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(e)).powf(1.0 / e)
    };
    (x + dq * range).clamp(lo, hi)
}

pub fn polynomial_mutation<R: Rng + ?Sized>(g: &Genome, eta: f64, rate: f64, rng: &mut R) -> Genome {
    let mut out = g.clone();
    for (v, b) in out.values.iter_mut().zip(g.bounds.iter()) {
        if rng.random::<f64>() < rate {
            *v = mutate_gene(*v, b.lo, b.hi, rng.random::<f64>(), eta);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moea::Bound;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn genome(values: Vec<f64>) -> Genome {
        let bounds = Arc::new(vec![Bound::new(0.0, 1.0).unwrap(); values.len()]);
        Genome::new(values, bounds).unwrap()
    }

    #[test]
    fn half_draw_is_identity() {
        assert_eq!(spread_factor(0.5, 15.0), 1.0);
        let (a, b) = sbx_pair(0.2, 0.9, 1.0);
        assert!((a - 0.2).abs() < 1e-15 && (b - 0.9).abs() < 1e-15);
        assert_eq!(mutate_gene(0.3, 0.0, 1.0, 0.5, 20.0), 0.3);
    }

    #[test]
    fn identical_parents_give_identical_children() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = genome(vec![0.25, 0.5, 0.75]);
        for _ in 0..100 {
            let (a, b) = sbx_crossover(&p, &p, 15.0, 1.0, &mut rng).unwrap();
            assert_eq!(a.values, p.values);
            assert_eq!(b.values, p.values);
        }
    }

    #[test]
    fn zero_rate_mutation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = genome(vec![0.1, 0.2]);
        assert_eq!(polynomial_mutation(&g, 20.0, 0.0, &mut rng).values, g.values);
    }

    #[test]
    fn degenerate_bounds_leave_gene_alone() {
        assert_eq!(mutate_gene(2.0, 2.0, 2.0, 0.1, 20.0), 2.0);
    }

    #[test]
    fn mismatched_parents_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = sbx_crossover(&genome(vec![0.1]), &genome(vec![0.1, 0.2]), 15.0, 1.0, &mut rng);
        assert!(matches!(r, Err(MoeaError::GenomeMismatch)));
    }

    proptest! {
        #[test]
        fn children_stay_in_bounds(
            a in prop::collection::vec(0.0f64..=1.0, 5),
            b in prop::collection::vec(0.0f64..=1.0, 5),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c1, c2) = sbx_crossover(&genome(a), &genome(b), 15.0, 1.0, &mut rng).unwrap();
            let m = polynomial_mutation(&c1, 20.0, 1.0, &mut rng);
            for v in c1.values.iter().chain(&c2.values).chain(&m.values) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn mutation_moves_toward_u(x in 0.0f64..=1.0, u in 0.0f64..1.0) {
            let y = mutate_gene(x, 0.0, 1.0, u, 20.0);
            if u < 0.5 { prop_assert!(y <= x); } else { prop_assert!(y >= x); }
        }
    }
}
