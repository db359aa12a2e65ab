//! Non-dominated sorting, crowding distance and binary tournaments.

use rand::Rng;

use super::MoeaError;

/// `a` dominates `b` under minimization: no worse everywhere, better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut better = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            better = true;
        }
    }
    better
}

/// Fast non-dominated sort. Fronts are returned best first, each sorted by
/// index.
pub fn non_dominated_sort(objectives: &[Vec<f64>]) -> Result<Vec<Vec<usize>>, MoeaError> {
    let n = objectives.len();
    if let Some(k) = objectives.first().map(Vec::len) {
        for (i, o) in objectives.iter().enumerate() {
            if o.len() != k {
                return Err(MoeaError::ObjectiveCount {
                    index: i,
                    expected: k,
                    got: o.len(),
                });
            }
            if o.iter().any(|v| v.is_nan()) {
                return Err(MoeaError::NanObjective { index: i });
            }
        }
    }

    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for p in 0..n {
        for q in (p + 1)..n {
            if dominates(&objectives[p], &objectives[q]) {
                dominated_by_me[p].push(q);
                domination_count[q] += 1;
            } else if dominates(&objectives[q], &objectives[p]) {
                dominated_by_me[q].push(p);
                domination_count[p] += 1;
            }
        }
    }

    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated_by_me[p] {
                domination_count[q] -= 1;
                if domination_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    Ok(fronts)
}

/// Rank (front index) of every individual.
pub fn ranks(fronts: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut rank = vec![0; n];
    for (r, front) in fronts.iter().enumerate() {
        for &i in front {
            rank[i] = r;
        }
    }
    rank
}

/// Crowding distance of each member of one front. Boundary members get
/// infinity; an objective with zero range adds nothing to interior members.
#[allow(clippy::needless_range_loop)]
pub fn crowding_distance(front: &[&[f64]]) -> Vec<f64> {
    let n = front.len();
    let mut distance = vec![0.0; n];
    if n == 0 {
        return distance;
    }
    let k = front[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    for m in 0..k {
        // Equal values are ordered by index, whatever the previous pass did.
        order.sort_by(|&a, &b| front[a][m].total_cmp(&front[b][m]).then(a.cmp(&b)));
        let lo = front[order[0]][m];
        let hi = front[order[n - 1]][m];
        distance[order[0]] = f64::INFINITY;
        distance[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in 1..n.saturating_sub(1) {
            let i = order[w];
            if distance[i].is_finite() {
                distance[i] += (front[order[w + 1]][m] - front[order[w - 1]][m]) / range;
            }
        }
    }
    distance
}

/// Rank and crowding distance for a whole population.
pub fn rank_and_crowding(objectives: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<f64>), MoeaError> {
    let fronts = non_dominated_sort(objectives)?;
    let rank = ranks(&fronts, objectives.len());
    let mut crowding = vec![0.0; objectives.len()];
    for front in &fronts {
        let members: Vec<&[f64]> = front.iter().map(|&i| objectives[i].as_slice()).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&members)) {
            crowding[i] = d;
        }
    }
    Ok((rank, crowding))
}

/// `a` beats `b`: lower rank, then larger crowding, then lower index.
pub fn crowded_less(a: usize, b: usize, rank: &[usize], crowding: &[f64]) -> bool {
    if rank[a] != rank[b] {
        return rank[a] < rank[b];
    }
    match crowding[a].total_cmp(&crowding[b]) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a < b,
    }
}

/// Binary tournament between two distinct, uniformly drawn indices.
pub fn tournament_select<R: Rng + ?Sized>(rank: &[usize], crowding: &[f64], rng: &mut R) -> usize {
    let n = rank.len();
    assert!(n > 0, "tournament on an empty population");
    if n == 1 {
        return 0;
    }
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    if crowded_less(a, b, rank, crowding) {
        a
    } else {
        b
    }
}

/// Area dominated by a two-objective point set and bounded by `reference`.
/// Points not strictly better than the reference in both objectives are
/// ignored.
pub fn hypervolume_2d(points: &[Vec<f64>], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1])
        .map(|p| (p[0], p[1]))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut volume = 0.0;
    let mut best_y = reference[1];
    for (x, y) in pts {
        if y < best_y {
            volume += (reference[0] - x) * (best_y - y);
            best_y = y;
        }
    }
    volume
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_fronts() {
        assert_eq!(non_dominated_sort(&[vec![1.0, 1.0]]).unwrap(), vec![vec![0]]);
        let objs = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![2.0, 2.0]];
        assert_eq!(non_dominated_sort(&objs).unwrap(), vec![vec![0, 1], vec![2]]);
        assert!(non_dominated_sort(&[]).unwrap().is_empty());
    }

    #[test]
    fn nan_is_rejected_with_index() {
        let objs = vec![vec![1.0, 2.0], vec![f64::NAN, 1.0]];
        assert!(matches!(
            non_dominated_sort(&objs),
            Err(MoeaError::NanObjective { index: 1 })
        ));
    }

    #[test]
    fn equal_points_share_a_front() {
        let objs = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        assert_eq!(non_dominated_sort(&objs).unwrap(), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn crowding_examples() {
        let one = [0.0, 0.0];
        assert_eq!(crowding_distance(&[&one]), vec![f64::INFINITY]);
        let (a, b) = ([0.0, 1.0], [1.0, 0.0]);
        assert_eq!(crowding_distance(&[&a, &b]), vec![f64::INFINITY; 2]);
        let (p, q, r) = ([0.0, 2.0], [1.0, 1.0], [2.0, 0.0]);
        let d = crowding_distance(&[&p, &q, &r]);
        assert_eq!(d[1], 2.0);
        assert!(d[0].is_infinite() && d[2].is_infinite());
    }

    #[test]
    fn zero_range_objective_contributes_nothing() {
        let pts = [[0.0, 5.0], [1.0, 5.0], [3.0, 5.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let d = crowding_distance(&refs);
        assert_eq!(d[1], 1.0);
    }

    #[test]
    fn tournament_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(tournament_select(&[0, 1], &[0.0, 0.0], &mut rng), 0);
            assert_eq!(tournament_select(&[0, 0], &[1.0, 3.0], &mut rng), 1);
            assert_eq!(tournament_select(&[2, 2], &[1.0, 1.0], &mut rng), 0);
            assert_eq!(tournament_select(&[5], &[0.0], &mut rng), 0);
        }
    }

    #[test]
    fn hypervolume_of_simple_sets() {
        let r = [1.0, 1.0];
        assert_eq!(hypervolume_2d(&[vec![0.0, 0.0]], r), 1.0);
        assert_eq!(hypervolume_2d(&[vec![0.5, 0.5], vec![0.6, 0.6]], r), 0.25);
        let hv = hypervolume_2d(&[vec![0.0, 0.5], vec![0.5, 0.0]], r);
        assert!((hv - 0.75).abs() < 1e-15);
        assert_eq!(hypervolume_2d(&[vec![2.0, 0.0]], r), 0.0);
    }
}
