//! Brute-force k-nearest-neighbour graphs.

/// The `k` nearest other points of every point, ordered by distance with
/// ties broken by index. Requires `k < points.len()`.
pub fn knn(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut out = Vec::with_capacity(n);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..n {
        best.clear();
        let pi = points[i];
        for (j, pj) in points.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = super::dist2(&pi, pj);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, bj)| bd < d || (bd == d && bj < j));
            best.insert(pos, (d, j));
            best.truncate(k);
        }
        out.push(best.iter().map(|&(_, j)| j).collect());
    }
    out
}

/// Undirected adjacency: `i ~ j` when either is among the other's neighbours.
pub fn symmetric(neighbours: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = neighbours.to_vec();
    for (i, ns) in neighbours.iter().enumerate() {
        for &j in ns {
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_on_a_line() {
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let nn = knn(&pts, 2);
        assert_eq!(nn[0], vec![1, 2]);
        // tie between 1 and 3 at distance 1 goes to the lower index
        assert_eq!(nn[2], vec![1, 3]);
        assert_eq!(nn[4], vec![3, 2]);
    }

    #[test]
    fn symmetric_adjacency_contains_both_directions() {
        let adj = symmetric(&[vec![1], vec![2], vec![1]]);
        assert_eq!(adj[1], vec![0, 2]);
        assert_eq!(adj[0], vec![1]);
    }
}
