//! Fill-reducing orderings for sparse factorizations.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Minimum-degree ordering of a symmetric sparsity graph.
///
/// `adj[v]` lists the neighbours of `v` (self loops and duplicates are
/// ignored). Returns `perm` with `perm[k]` the vertex eliminated at step
/// `k`. Ties are broken by the lowest vertex index so the result is
/// deterministic.
pub fn minimum_degree(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut graph: Vec<Vec<usize>> = adj
        .iter()
        .enumerate()
        .map(|(v, nb)| {
            let mut nb: Vec<usize> = nb.iter().copied().filter(|&u| u != v).collect();
            nb.sort_unstable();
            nb.dedup();
            nb
        })
        .collect();
    // make symmetric
    let mut extra: Vec<Vec<usize>> = vec![Vec::new(); n];
    for v in 0..n {
        for &u in &graph[v] {
            if graph[u].binary_search(&v).is_err() {
                extra[u].push(v);
            }
        }
    }
    for v in 0..n {
        if !extra[v].is_empty() {
            graph[v].append(&mut extra[v]);
            graph[v].sort_unstable();
            graph[v].dedup();
        }
    }

    let mut eliminated = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..n).map(|v| Reverse((graph[v].len(), v))).collect();
    let mut perm = Vec::with_capacity(n);
    let mut merged = Vec::new();

    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != graph[v].len() {
            continue;
        }
        eliminated[v] = true;
        perm.push(v);
        let clique = std::mem::take(&mut graph[v]);
        for &u in &clique {
            // adj[u] <- (adj[u] ∪ clique) \ {u, v}
            merged.clear();
            let a = &graph[u];
            let (mut i, mut j) = (0, 0);
            while i < a.len() || j < clique.len() {
                let next = match (a.get(i), clique.get(j)) {
                    (Some(&x), Some(&y)) if x == y => {
                        i += 1;
                        j += 1;
                        x
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        i += 1;
                        x
                    }
                    (Some(_), Some(&y)) => {
                        j += 1;
                        y
                    }
                    (Some(&x), None) => {
                        i += 1;
                        x
                    }
                    (None, Some(&y)) => {
                        j += 1;
                        y
                    }
                    (None, None) => unreachable!(),
                };
                if next != u && next != v && !eliminated[next] {
                    merged.push(next);
                }
            }
            std::mem::swap(&mut graph[u], &mut merged);
            heap.push(Reverse((graph[u].len(), u)));
        }
    }
    debug_assert_eq!(perm.len(), n);
    perm
}

/// Inverse of a permutation vector.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_graph_eliminates_leaves_first() {
        // centre 0 connected to 1..=4
        let adj = vec![vec![1, 2, 3, 4], vec![0], vec![0], vec![0], vec![0]];
        let perm = minimum_degree(&adj);
        let centre = perm.iter().position(|&v| v == 0).unwrap();
        assert!(centre >= 3, "centre eliminated too early: {perm:?}");
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn invert_roundtrip() {
        let p = vec![2, 0, 3, 1];
        let inv = invert(&p);
        for (k, &v) in p.iter().enumerate() {
            assert_eq!(inv[v], k);
        }
    }
}
