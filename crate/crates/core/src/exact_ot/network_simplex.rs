//! Primal network simplex for the transportation problem.
//!
//! The graph is the complete bipartite graph from `n` supply nodes to `m`
//! demand nodes plus an artificial root joined to every node. Pricing is a
//! block search over the original arcs; the leaving arc follows Cunningham's
//! rule, which keeps the spanning tree strongly feasible and rules out cycling.

use crate::error::{Error, Result};

const UP: i8 = 1;
const DOWN: i8 = -1;

pub(crate) struct Solution {
    /// `(i, j, mass)` for every original arc carrying positive flow.
    pub flows: Vec<(usize, usize, f64)>,
    /// Cost-form duals: `u[i] + v[j] <= cost[i][j]`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

struct Tree {
    n: usize,
    m: usize,
    root: usize,
    art: f64,
    cost: Vec<f64>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    dir: Vec<i8>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    pos: Vec<usize>,
    pi: Vec<f64>,
    next_arc: usize,
    block: usize,
    eps: f64,
}

impl Tree {
    fn new(n: usize, m: usize, cost: &[f64], supply: &[f64], demand: &[f64]) -> Self {
        let nm = n * m;
        let nodes = n + m + 1;
        let root = n + m;
        let max_c = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
        let art = (max_c + 1.0) * nodes as f64;
        let mut t = Tree {
            n,
            m,
            root,
            art,
            cost: cost.to_vec(),
            flow: vec![0.0; nm + n + m],
            in_tree: vec![false; nm],
            parent: vec![root; nodes],
            pred: vec![usize::MAX; nodes],
            dir: vec![0; nodes],
            depth: vec![1; nodes],
            children: vec![Vec::new(); nodes],
            pos: vec![0; nodes],
            pi: vec![0.0; nodes],
            next_arc: 0,
            block: ((nm as f64).sqrt() as usize).max(10).min(nm.max(1)),
            eps: 4.0 * f64::EPSILON * art,
        };
        t.depth[root] = 0;
        for u in 0..n + m {
            t.pred[u] = nm + u;
            t.pos[u] = t.children[root].len();
            t.children[root].push(u);
            if u < n {
                t.dir[u] = UP;
                t.flow[nm + u] = supply[u];
                t.pi[u] = -art;
            } else {
                t.dir[u] = DOWN;
                t.flow[nm + u] = demand[u - n];
                t.pi[u] = art;
            }
        }
        t
    }

    fn arc_cost(&self, a: usize) -> f64 {
        if a < self.n * self.m {
            self.cost[a]
        } else {
            self.art
        }
    }

    fn endpoints(&self, a: usize) -> (usize, usize) {
        (a / self.m, self.n + a % self.m)
    }

    fn find_entering(&mut self) -> Option<usize> {
        let nm = self.n * self.m;
        let mut best = None;
        let mut min = -self.eps;
        let mut e = self.next_arc;
        let (mut i, mut j) = (e / self.m, e % self.m);
        let mut cnt = self.block;
        for _ in 0..nm {
            if !self.in_tree[e] {
                let rc = self.cost[e] + self.pi[i] - self.pi[self.n + j];
                if rc < min {
                    min = rc;
                    best = Some(e);
                }
            }
            e += 1;
            j += 1;
            if j == self.m {
                j = 0;
                i += 1;
            }
            if e == nm {
                e = 0;
                i = 0;
                j = 0;
            }
            cnt -= 1;
            if cnt == 0 {
                if best.is_some() {
                    self.next_arc = e;
                    return best;
                }
                cnt = self.block;
            }
        }
        self.next_arc = e;
        best
    }

    fn remove_child(&mut self, p: usize, c: usize) {
        let idx = self.pos[c];
        self.children[p].swap_remove(idx);
        if idx < self.children[p].len() {
            let moved = self.children[p][idx];
            self.pos[moved] = idx;
        }
    }

    fn add_child(&mut self, p: usize, c: usize) {
        self.pos[c] = self.children[p].len();
        self.children[p].push(c);
    }

    /// Depths and potentials below `top`, from its (already valid) parent.
    fn refresh_subtree(&mut self, top: usize) {
        let mut stack = vec![top];
        while let Some(u) = stack.pop() {
            if u != self.root {
                let p = self.parent[u];
                let c = self.arc_cost(self.pred[u]);
                self.depth[u] = self.depth[p] + 1;
                self.pi[u] = if self.dir[u] == UP {
                    self.pi[p] - c
                } else {
                    self.pi[p] + c
                };
            }
            stack.extend_from_slice(&self.children[u]);
        }
    }

    fn pivot(&mut self, in_arc: usize) {
        let (first, second) = self.endpoints(in_arc);

        let (mut a, mut b) = (first, second);
        while a != b {
            if self.depth[a] > self.depth[b] {
                a = self.parent[a];
            } else if self.depth[b] > self.depth[a] {
                b = self.parent[b];
            } else {
                a = self.parent[a];
                b = self.parent[b];
            }
        }
        let join = a;

        let mut delta = f64::INFINITY;
        let mut u_out = usize::MAX;
        let mut on_first = true;
        let mut u = first;
        while u != join {
            if self.dir[u] == UP {
                let d = self.flow[self.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            if self.dir[u] == DOWN {
                let d = self.flow[self.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                    on_first = false;
                }
            }
            u = self.parent[u];
        }
        debug_assert!(u_out != usize::MAX);

        if delta > 0.0 {
            self.flow[in_arc] += delta;
            let mut u = first;
            while u != join {
                self.flow[self.pred[u]] -= self.dir[u] as f64 * delta;
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                self.flow[self.pred[u]] += self.dir[u] as f64 * delta;
                u = self.parent[u];
            }
        }
        let out_arc = self.pred[u_out];
        self.flow[out_arc] = 0.0;
        if out_arc < self.n * self.m {
            self.in_tree[out_arc] = false;
        }
        self.in_tree[in_arc] = true;

        // re-hang the detached subtree below the entering arc
        let (q, p, new_dir) = if on_first {
            (first, second, UP)
        } else {
            (second, first, DOWN)
        };
        let mut path = vec![q];
        while *path.last().unwrap() != u_out {
            let last = *path.last().unwrap();
            path.push(self.parent[last]);
        }
        let old: Vec<(usize, i8)> = path.iter().map(|&v| (self.pred[v], self.dir[v])).collect();
        let out_parent = self.parent[u_out];
        self.remove_child(out_parent, u_out);
        for t in 0..path.len() - 1 {
            self.remove_child(path[t + 1], path[t]);
        }
        for t in 0..path.len() - 1 {
            let (a, b) = (path[t], path[t + 1]);
            self.parent[b] = a;
            self.pred[b] = old[t].0;
            self.dir[b] = -old[t].1;
            self.add_child(a, b);
        }
        self.parent[q] = p;
        self.pred[q] = in_arc;
        self.dir[q] = new_dir;
        self.add_child(p, q);
        self.refresh_subtree(q);
    }
}

/// Solves `min sum c_ij f_ij` subject to row sums `supply` and column sums
/// `demand`; all supplies and demands must be positive.
pub(crate) fn solve(
    n: usize,
    m: usize,
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
) -> Result<Solution> {
    debug_assert_eq!(cost.len(), n * m);
    let mut t = Tree::new(n, m, cost, supply, demand);
    let max_pivots = 1000 + 50 * (n * m).max(n + m);
    let mut pivots = 0usize;
    loop {
        while let Some(e) = t.find_entering() {
            t.pivot(e);
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::NonConvergence(format!(
                    "network simplex exceeded {max_pivots} pivots"
                )));
            }
        }
        // potentials accumulate rounding along pivots; rebuild and re-price
        let root = t.root;
        t.refresh_subtree(root);
        if t.find_entering().is_none() {
            break;
        }
    }

    let nm = n * m;
    let flows = (0..nm)
        .filter(|&a| t.in_tree[a] && t.flow[a] > 0.0)
        .map(|a| (a / m, a % m, t.flow[a]))
        .collect();
    let u = (0..n).map(|i| -t.pi[i]).collect();
    let v = (0..m).map(|j| t.pi[n + j]).collect();
    Ok(Solution { flows, u, v })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_three() {
        let cost = [1.0, 2.0, 3.0, 4.0, 1.0, 2.0];
        let sol = solve(2, 3, &cost, &[0.5, 0.5], &[0.25, 0.25, 0.5]).unwrap();
        let total: f64 = sol.flows.iter().map(|&(i, j, f)| f * cost[i * 3 + j]).sum();
        // optimum 1.75, attained by two different plans
        assert!((total - 1.75).abs() < 1e-12, "{total}");
        for i in 0..2 {
            for j in 0..3 {
                assert!(sol.u[i] + sol.v[j] <= cost[i * 3 + j] + 1e-9);
            }
        }
        let dual: f64 = 0.5 * (sol.u[0] + sol.u[1])
            + 0.25 * (sol.v[0] + sol.v[1])
            + 0.5 * sol.v[2];
        assert!((dual - total).abs() < 1e-9);
    }
}
