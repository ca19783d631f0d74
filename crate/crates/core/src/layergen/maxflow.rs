//! Dinic max-flow on real capacities and submodular binary energy minimization.

use std::collections::VecDeque;

const EPS: f64 = 1e-12;

pub struct FlowGraph {
    head: Vec<usize>,
    next: Vec<usize>,
    to: Vec<usize>,
    cap: Vec<f64>,
    level: Vec<i32>,
    iter: Vec<usize>,
}

const NIL: usize = usize::MAX;

impl FlowGraph {
    pub fn new(nodes: usize) -> Self {
        Self {
            head: vec![NIL; nodes],
            next: Vec::new(),
            to: Vec::new(),
            cap: Vec::new(),
            level: vec![0; nodes],
            iter: vec![0; nodes],
        }
    }

    pub fn nodes(&self) -> usize {
        self.head.len()
    }

    /// Adds `a -> b` with capacity `c` and `b -> a` with capacity `rev`.
    pub fn add_edge(&mut self, a: usize, b: usize, c: f64, rev: f64) {
        for (u, v, w) in [(a, b, c), (b, a, rev)] {
            self.to.push(v);
            self.cap.push(w);
            self.next.push(self.head[u]);
            self.head[u] = self.to.len() - 1;
        }
    }

    fn bfs(&mut self, s: usize, t: usize) -> bool {
        self.level.iter_mut().for_each(|l| *l = -1);
        self.level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            let mut e = self.head[u];
            while e != NIL {
                let v = self.to[e];
                if self.cap[e] > EPS && self.level[v] < 0 {
                    self.level[v] = self.level[u] + 1;
                    q.push_back(v);
                }
                e = self.next[e];
            }
        }
        self.level[t] >= 0
    }

    fn dfs(&mut self, s: usize, t: usize, limit: f64) -> f64 {
        // Iterative augmenting-path search along the level graph.
        let mut path: Vec<usize> = Vec::new();
        let mut u = s;
        loop {
            if u == t {
                let f = path.iter().fold(limit, |m, &e| m.min(self.cap[e]));
                for &e in &path {
                    self.cap[e] -= f;
                    self.cap[e ^ 1] += f;
                }
                return f;
            }
            let mut advanced = false;
            while self.iter[u] != NIL {
                let e = self.iter[u];
                let v = self.to[e];
                if self.cap[e] > EPS && self.level[v] == self.level[u] + 1 {
                    path.push(e);
                    u = v;
                    advanced = true;
                    break;
                }
                self.iter[u] = self.next[e];
            }
            if !advanced {
                if u == s {
                    return 0.0;
                }
                // Dead end: retreat and skip this edge.
                self.level[u] = -1;
                let e = path.pop().unwrap();
                u = self.to[e ^ 1];
                self.iter[u] = self.next[self.iter[u]];
            }
        }
    }

    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        while self.bfs(s, t) {
            self.iter.copy_from_slice(&self.head);
            loop {
                let f = self.dfs(s, t, f64::INFINITY);
                if f <= EPS {
                    break;
                }
                flow += f;
            }
        }
        flow
    }

    /// Nodes that can still reach `t` in the residual graph.
    pub fn reaches_sink(&self, t: usize) -> Vec<bool> {
        // Reverse reachability: u reaches t if some edge u->v with residual and v reaches t.
        let n = self.nodes();
        let mut seen = vec![false; n];
        seen[t] = true;
        let mut q = VecDeque::from([t]);
        while let Some(v) = q.pop_front() {
            let mut e = self.head[v];
            while e != NIL {
                // e: v -> u, its pair e^1: u -> v.
                let u = self.to[e];
                if !seen[u] && self.cap[e ^ 1] > EPS {
                    seen[u] = true;
                    q.push_back(u);
                }
                e = self.next[e];
            }
        }
        seen
    }
}

/// Minimizes `const + Σ unary_x(b_x) + Σ pair_xy(b_x, b_y)` over binary `b`
/// for submodular pairwise terms. Ties resolve toward `b = 0`.
pub struct BinaryEnergy {
    n: usize,
    constant: f64,
    /// Net cost of choosing 1 over 0 per variable.
    slope: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
}

impl BinaryEnergy {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            constant: 0.0,
            slope: vec![0.0; n],
            pairs: Vec::new(),
        }
    }

    pub fn add_unary(&mut self, x: usize, e0: f64, e1: f64) {
        self.constant += e0;
        self.slope[x] += e1 - e0;
    }

    /// Adds `E(0,0)=a, E(0,1)=b, E(1,0)=c, E(1,1)=d` requiring `b + c >= a + d`.
    pub fn add_pair(&mut self, x: usize, y: usize, a: f64, b: f64, c: f64, d: f64) {
        // E = a + (c - a) x + (d - c) y + (b + c - a - d) (1 - x) y
        self.constant += a;
        self.slope[x] += c - a;
        self.slope[y] += d - c;
        let w = b + c - a - d;
        debug_assert!(w >= -1e-9, "non-submodular pair term");
        if w > 0.0 {
            self.pairs.push((x, y, w));
        }
    }

    /// Returns the minimizing assignment and its energy.
    pub fn minimize(&self) -> (Vec<bool>, f64) {
        let (s, t) = (self.n, self.n + 1);
        let mut g = FlowGraph::new(self.n + 2);
        let mut constant = self.constant;
        for (x, &m) in self.slope.iter().enumerate() {
            if m > 0.0 {
                g.add_edge(s, x, m, 0.0);
            } else if m < 0.0 {
                constant += m;
                g.add_edge(x, t, -m, 0.0);
            }
        }
        for &(x, y, w) in &self.pairs {
            // Cut when x = 0 (source side) and y = 1 (sink side).
            g.add_edge(x, y, w, 0.0);
        }
        let flow = g.max_flow(s, t);
        let sink_side = g.reaches_sink(t);
        let labels: Vec<bool> = sink_side[..self.n].to_vec();
        (labels, constant + flow)
    }

    pub fn evaluate(&self, b: &[bool]) -> f64 {
        let mut e = self.constant;
        for (x, &m) in self.slope.iter().enumerate() {
            if b[x] {
                e += m;
            }
        }
        for &(x, y, w) in &self.pairs {
            if !b[x] && b[y] {
                e += w;
            }
        }
        e
    }
}
