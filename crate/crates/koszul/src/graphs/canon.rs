//! Canonical forms and automorphism groups of small colored multigraphs.
//!
//! One engine serves every graph species in the crate: vertices carry opaque
//! colors, edges carry colors with an optional flip involution (for
//! undirected edges whose two readings differ), and "pins" are external
//! attachment points that isomorphisms must fix pointwise (sources, sinks,
//! hairs). Canonicalization is exhaustive minimization over vertex orderings
//! with invariant-refinement pruning; the graphs handled here are tiny, so
//! worst-case cost is acceptable. Tie-break: lexicographically smallest
//! edge-list encoding.

use std::collections::HashMap;

/// A colored multigraph in the normalized form the canonicalizer consumes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CGraph {
    /// Vertex colors. Isomorphisms preserve colors.
    pub vcol: Vec<u64>,
    /// Edges (u, v, color). Loops (u == v) are allowed. For symmetric graphs
    /// the stored orientation is a convention; see [`CanonCtx`].
    pub edges: Vec<(u8, u8, u16)>,
    /// Pinned external attachments (pin id, vertex). Pins are fixed
    /// pointwise by isomorphisms; pin ids must be distinct.
    pub pins: Vec<(u16, u8)>,
    /// If true, an edge (u, v, c) may be read as (v, u, flip(c)); the
    /// canonical encoding normalizes orientations. If false, edges are
    /// directed as stored.
    pub symmetric: bool,
}

/// Context for canonicalization: the color involution for reversed readings
/// of symmetric edges.
#[derive(Clone, Debug)]
pub struct CanonCtx {
    /// flip[c] = color of the reversed reading of an edge of color c.
    /// Empty means flip is the identity.
    pub flip: Vec<u16>,
}

impl CanonCtx {
    pub fn directed() -> Self {
        CanonCtx { flip: Vec::new() }
    }

    pub fn symmetric(ncolors: usize) -> Self {
        CanonCtx { flip: (0..ncolors as u16).collect() }
    }

    pub fn flip_color(&self, c: u16) -> u16 {
        if self.flip.is_empty() {
            c
        } else {
            self.flip[c as usize]
        }
    }
}

/// Outcome of canonicalization.
#[derive(Clone, Debug)]
pub struct Canon {
    /// The canonical graph (vertices renumbered, edges sorted, orientations
    /// normalized).
    pub graph: CGraph,
    /// Vertex permutation, old index → new index.
    pub perm: Vec<u8>,
    /// All vertex permutations of the canonical graph onto itself, in
    /// new-index form (aut[v] = image of canonical vertex v). Identity
    /// included.
    pub vertex_auts: Vec<Vec<u8>>,
    /// Encoding key, usable for hashing/deduplication.
    pub key: Vec<u64>,
}

const AUT_LIMIT: usize = 1 << 16;

/// Per-vertex segment of the incremental encoding: color, pins, then the
/// adjacency row towards already-placed vertices (sorted (u, c, dir) items),
/// each section length-prefixed so prefix comparison is well defined.
fn segment(
    g: &CGraph,
    ctx: &CanonCtx,
    adj: &[Vec<(u8, u16, u8)>],
    pos: &[i16],
    old_v: u8,
    new_v: u8,
    pin_of: &[Vec<u16>],
    out: &mut Vec<u64>,
) {
    out.push(g.vcol[old_v as usize]);
    let pins = &pin_of[old_v as usize];
    out.push(pins.len() as u64);
    for &p in pins {
        out.push(p as u64);
    }
    let mut row: Vec<u64> = Vec::new();
    for &(old_u, c, dir) in &adj[old_v as usize] {
        if old_u == old_v {
            // loop: counted once (adjacency stores it once), sits at (new_v, new_v)
            let cc = if g.symmetric { c.min(ctx.flip_color(c)) } else { c };
            row.push(((new_v as u64) << 24) | ((cc as u64) << 8) | 2);
            continue;
        }
        let pu = pos[old_u as usize];
        if pu < 0 {
            continue; // not placed yet
        }
        if g.symmetric {
            row.push(((pu as u64) << 24) | ((c as u64) << 8));
        } else {
            row.push(((pu as u64) << 24) | ((c as u64) << 8) | dir as u64);
        }
    }
    row.sort_unstable();
    out.push(row.len() as u64);
    out.extend_from_slice(&row);
}

/// Iterative invariant refinement; returns per-vertex invariants.
fn refine(g: &CGraph, ctx: &CanonCtx) -> Vec<u64> {
    let n = g.vcol.len();
    let mut inv: Vec<u64> = g.vcol.clone();
    for &(p, v) in &g.pins {
        inv[v as usize] = inv[v as usize]
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(0x1_0000 + p as u64);
    }
    for _ in 0..n.min(8) {
        let mut next: Vec<u64> = Vec::with_capacity(n);
        for v in 0..n {
            let mut neigh: Vec<u64> = Vec::new();
            for &(a, b, c) in &g.edges {
                if a as usize == v && b as usize == v {
                    neigh.push(0x8000_0000_0000_0000 ^ ((c as u64) << 16));
                    continue;
                }
                if a as usize == v {
                    let tag: u64 = if g.symmetric { 0 } else { 1 };
                    neigh.push((tag << 60) ^ ((c as u64) << 40) ^ inv[b as usize] >> 4);
                }
                if b as usize == v {
                    let tag: u64 = if g.symmetric { 0 } else { 2 };
                    let cc = if g.symmetric { ctx.flip_color(c) } else { c };
                    neigh.push((tag << 60) ^ ((cc as u64) << 40) ^ inv[a as usize] >> 4);
                }
            }
            neigh.sort_unstable();
            let mut h = inv[v].wrapping_mul(0x517cc1b727220a95);
            for x in neigh {
                h = h.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(x);
            }
            next.push(h | 1);
        }
        if next == inv {
            break;
        }
        inv = next;
    }
    inv
}

struct Search<'a> {
    g: &'a CGraph,
    ctx: &'a CanonCtx,
    cells: Vec<Vec<u8>>,
    adj: Vec<Vec<(u8, u16, u8)>>,
    pin_of: Vec<Vec<u16>>,
    n: usize,
    best: Option<Vec<u64>>,
    best_order: Vec<u8>,
    auts: Vec<Vec<u8>>,
    /// Incremented whenever `best` is replaced, so stale comparison states
    /// on the path can be reconciled.
    generation: u64,
}

impl<'a> Search<'a> {
    /// `tied` = the current partial encoding equals the best's prefix (as of
    /// generation `seen_gen`); false = strictly smaller.
    fn run(
        &mut self,
        assigned: &mut Vec<u8>,
        pos: &mut Vec<i16>,
        enc: &mut Vec<u64>,
        tied: bool,
        seen_gen: u64,
    ) {
        // reconcile against a best that changed beneath us
        let mut tied = tied;
        if seen_gen != self.generation {
            if let Some(best) = &self.best {
                let pref = &best[..enc.len().min(best.len())];
                match enc.as_slice().cmp(pref) {
                    std::cmp::Ordering::Less => tied = false,
                    std::cmp::Ordering::Equal => tied = true,
                    std::cmp::Ordering::Greater => return,
                }
            }
        }
        let my_gen = self.generation;
        if assigned.len() == self.n {
            match (&self.best, tied) {
                (None, _) | (Some(_), false) => {
                    self.best = Some(enc.clone());
                    self.best_order = assigned.clone();
                    self.auts = vec![(0..self.n as u8).collect()];
                    self.generation += 1;
                }
                (Some(_), true) => {
                    if self.auts.len() < AUT_LIMIT {
                        // both orderings give the same encoding, so old
                        // vertex assigned[k] plays the role of canonical
                        // vertex k; in canonical coordinates the map is
                        // k ↦ canonical index of assigned[k]
                        let mut canon_index = vec![0u8; self.n];
                        for (k, &old) in self.best_order.iter().enumerate() {
                            canon_index[old as usize] = k as u8;
                        }
                        let a: Vec<u8> =
                            assigned.iter().map(|&old| canon_index[old as usize]).collect();
                        self.auts.push(a);
                    }
                }
            }
            return;
        }
        // next cell with unused members
        let mut members: Vec<u8> = Vec::new();
        for cell in &self.cells {
            for &v in cell {
                if pos[v as usize] < 0 {
                    members.push(v);
                }
            }
            if !members.is_empty() {
                break;
            }
        }
        let k = assigned.len();
        for &v in &members {
            // reconcile tied state if best changed while scanning siblings
            if self.generation != my_gen {
                if let Some(best) = &self.best {
                    let pref = &best[..enc.len().min(best.len())];
                    match enc.as_slice().cmp(pref) {
                        std::cmp::Ordering::Less => tied = false,
                        std::cmp::Ordering::Equal => tied = true,
                        std::cmp::Ordering::Greater => return,
                    }
                }
            }
            let gen_here = self.generation;
            let mark = enc.len();
            segment(self.g, self.ctx, &self.adj, pos, v, k as u8, &self.pin_of, enc);
            let mut new_tied = tied;
            let mut prune = false;
            if tied {
                if let Some(best) = &self.best {
                    let seg = &enc[mark..];
                    let bseg = &best[mark..(mark + seg.len()).min(best.len())];
                    match seg.cmp(bseg) {
                        std::cmp::Ordering::Less => new_tied = false,
                        std::cmp::Ordering::Greater => prune = true,
                        std::cmp::Ordering::Equal => {
                            if bseg.len() < seg.len() {
                                prune = true; // best ended earlier: smaller
                            }
                        }
                    }
                }
            }
            if !prune {
                assigned.push(v);
                pos[v as usize] = k as i16;
                self.run(assigned, pos, enc, new_tied, gen_here);
                pos[v as usize] = -1;
                assigned.pop();
            }
            enc.truncate(mark);
        }
    }
}

/// Exhaustive canonical labeling with refinement pruning.
pub fn canonicalize(g: &CGraph, ctx: &CanonCtx) -> Canon {
    let n = g.vcol.len();
    assert!(n <= 120, "canonicalize: graph too large");
    let inv = refine(g, ctx);
    let mut order: Vec<u8> = (0..n as u8).collect();
    order.sort_by_key(|&v| (inv[v as usize], v));
    let mut cells: Vec<Vec<u8>> = Vec::new();
    for &v in &order {
        if let Some(last) = cells.last_mut() {
            if inv[last[0] as usize] == inv[v as usize] {
                last.push(v);
                continue;
            }
        }
        cells.push(vec![v]);
    }
    let mut adj: Vec<Vec<(u8, u16, u8)>> = vec![Vec::new(); n];
    for &(a, b, c) in &g.edges {
        if a == b {
            adj[a as usize].push((a, c, 2));
        } else if g.symmetric {
            adj[a as usize].push((b, c, 0));
            adj[b as usize].push((a, ctx.flip_color(c), 0));
        } else {
            adj[a as usize].push((b, c, 0)); // outgoing
            adj[b as usize].push((a, c, 1)); // incoming
        }
    }
    let mut pin_of: Vec<Vec<u16>> = vec![Vec::new(); n];
    for &(p, v) in &g.pins {
        pin_of[v as usize].push(p);
    }
    for pv in &mut pin_of {
        pv.sort_unstable();
    }

    let mut s = Search {
        g,
        ctx,
        cells,
        adj,
        pin_of,
        n,
        best: None,
        best_order: Vec::new(),
        auts: Vec::new(),
        generation: 0,
    };
    let mut assigned = Vec::with_capacity(n);
    let mut pos = vec![-1i16; n];
    let mut enc = Vec::new();
    s.run(&mut assigned, &mut pos, &mut enc, true, 0);

    let mut perm = vec![0u8; n];
    for (k, &old) in s.best_order.iter().enumerate() {
        perm[old as usize] = k as u8;
    }
    let vcol: Vec<u64> = s.best_order.iter().map(|&old| g.vcol[old as usize]).collect();
    let mut edges: Vec<(u8, u8, u16)> = g
        .edges
        .iter()
        .map(|&(u, v, c)| {
            let (nu, nv) = (perm[u as usize], perm[v as usize]);
            if nu == nv {
                (nu, nv, if g.symmetric { c.min(ctx.flip_color(c)) } else { c })
            } else if g.symmetric && nu > nv {
                (nv, nu, ctx.flip_color(c))
            } else {
                (nu, nv, c)
            }
        })
        .collect();
    edges.sort_unstable();
    let mut pins: Vec<(u16, u8)> = g.pins.iter().map(|&(p, v)| (p, perm[v as usize])).collect();
    pins.sort_unstable();
    let graph = CGraph { vcol, edges, pins, symmetric: g.symmetric };
    let key = s.best.unwrap_or_default();

    let mut auts = s.auts;
    auts.sort();
    auts.dedup();
    Canon { graph, perm, vertex_auts: auts, key }
}

/// Check whether two graphs are isomorphic (equal canonical keys).
pub fn isomorphic(a: &CGraph, b: &CGraph, ctx: &CanonCtx) -> bool {
    canonicalize(a, ctx).key == canonicalize(b, ctx).key
}

/// Connectivity of the underlying undirected graph. The empty graph is not
/// connected.
pub fn connected(nv: usize, edges: &[(u8, u8, u16)]) -> bool {
    if nv == 0 {
        return false;
    }
    let mut djs: Vec<usize> = (0..nv).collect();
    fn root(djs: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while djs[r] != r {
            r = djs[r];
        }
        let mut c = x;
        while djs[c] != c {
            let nxt = djs[c];
            djs[c] = r;
            c = nxt;
        }
        r
    }
    for &(u, v, _) in edges {
        let (ru, rv) = (root(&mut djs, u as usize), root(&mut djs, v as usize));
        if ru != rv {
            djs[ru] = rv;
        }
    }
    let r0 = root(&mut djs, 0);
    (1..nv).all(|v| root(&mut djs, v) == r0)
}

/// Deduplicating collector keyed by canonical key.
#[derive(Default)]
pub struct ClassSet {
    seen: HashMap<Vec<u64>, usize>,
    pub classes: Vec<Canon>,
}

impl ClassSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a graph; returns (index, true) if its class is new.
    pub fn insert(&mut self, g: &CGraph, ctx: &CanonCtx) -> (usize, bool) {
        let c = canonicalize(g, ctx);
        if let Some(&i) = self.seen.get(&c.key) {
            return (i, false);
        }
        let i = self.classes.len();
        self.seen.insert(c.key.clone(), i);
        self.classes.push(c);
        (i, true)
    }

    pub fn contains(&self, key: &[u64]) -> Option<usize> {
        self.seen.get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(vcol: Vec<u64>, edges: Vec<(u8, u8, u16)>, pins: Vec<(u16, u8)>) -> CGraph {
        CGraph { vcol, edges, pins, symmetric: true }
    }

    #[test]
    fn canonical_idempotent_and_iso_invariant() {
        let ctx = CanonCtx::symmetric(2);
        let a = g(vec![1, 1, 2], vec![(0, 1, 0), (1, 2, 0), (0, 2, 1)], vec![]);
        let b = g(vec![2, 1, 1], vec![(2, 1, 0), (1, 0, 0), (2, 0, 1)], vec![]);
        let ca = canonicalize(&a, &ctx);
        let cb = canonicalize(&b, &ctx);
        assert_eq!(ca.key, cb.key);
        let cc = canonicalize(&ca.graph, &ctx);
        assert_eq!(cc.key, ca.key);
        assert_eq!(cc.graph, ca.graph);
        assert_eq!(cc.perm, (0..3).collect::<Vec<u8>>());
    }

    #[test]
    fn automorphisms_of_triangle() {
        let ctx = CanonCtx::symmetric(1);
        let tri = g(vec![7, 7, 7], vec![(0, 1, 0), (1, 2, 0), (0, 2, 0)], vec![]);
        let c = canonicalize(&tri, &ctx);
        assert_eq!(c.vertex_auts.len(), 6);
    }

    #[test]
    fn petersen_like_symmetry() {
        // 4-cycle with colors, automorphisms = dihedral of the square = 8
        let ctx = CanonCtx::symmetric(1);
        let c4 = g(vec![3, 3, 3, 3], vec![(0, 1, 0), (1, 2, 0), (2, 3, 0), (3, 0, 0)], vec![]);
        let c = canonicalize(&c4, &ctx);
        assert_eq!(c.vertex_auts.len(), 8);
        for a in &c.vertex_auts {
            // each automorphism maps the edge set to itself
            let mapped: std::collections::BTreeSet<(u8, u8)> = c
                .graph
                .edges
                .iter()
                .map(|&(u, v, _)| {
                    let (mu, mv) = (a[u as usize], a[v as usize]);
                    (mu.min(mv), mu.max(mv))
                })
                .collect();
            let orig: std::collections::BTreeSet<(u8, u8)> =
                c.graph.edges.iter().map(|&(u, v, _)| (u.min(v), u.max(v))).collect();
            assert_eq!(mapped, orig);
        }
    }

    #[test]
    fn pins_freeze_vertices() {
        let ctx = CanonCtx::symmetric(1);
        let p = g(vec![7, 7], vec![(0, 1, 0)], vec![(0, 0), (1, 1)]);
        let c = canonicalize(&p, &ctx);
        assert_eq!(c.vertex_auts.len(), 1);
        let q = g(vec![7, 7], vec![(0, 1, 0)], vec![]);
        let cq = canonicalize(&q, &ctx);
        assert_eq!(cq.vertex_auts.len(), 2);
    }

    #[test]
    fn flip_normalizes_orientation() {
        let ctx = CanonCtx { flip: vec![1, 0] };
        let a =
            CGraph { vcol: vec![5, 6], edges: vec![(0, 1, 0)], pins: vec![], symmetric: true };
        let b =
            CGraph { vcol: vec![6, 5], edges: vec![(0, 1, 1)], pins: vec![], symmetric: true };
        assert!(isomorphic(&a, &b, &ctx));
    }

    #[test]
    fn directed_edges_keep_direction() {
        let ctx = CanonCtx::directed();
        let a = CGraph {
            vcol: vec![5, 5],
            edges: vec![(0, 1, 0)],
            pins: vec![(0, 0)],
            symmetric: false,
        };
        let b = CGraph {
            vcol: vec![5, 5],
            edges: vec![(1, 0, 0)],
            pins: vec![(0, 0)],
            symmetric: false,
        };
        assert!(!isomorphic(&a, &b, &ctx));
    }

    #[test]
    fn connectivity() {
        assert!(!connected(0, &[]));
        assert!(connected(1, &[]));
        assert!(!connected(2, &[]));
        assert!(connected(2, &[(0, 1, 0)]));
        assert!(!connected(3, &[(0, 1, 0)]));
    }

    #[test]
    fn parallel_edges_and_loops_distinguished() {
        let ctx = CanonCtx::symmetric(1);
        let double = g(vec![3, 3], vec![(0, 1, 0), (0, 1, 0)], vec![]);
        let single_loop = g(vec![3, 3], vec![(0, 1, 0), (1, 1, 0)], vec![]);
        assert!(!isomorphic(&double, &single_loop, &ctx));
    }

    #[test]
    fn random_relabeling_maps_to_same_canonical_form() {
        let ctx = CanonCtx::symmetric(2);
        let base = g(
            vec![1, 1, 1, 2],
            vec![(0, 1, 0), (1, 2, 0), (2, 0, 1), (2, 3, 0), (3, 3, 1)],
            vec![],
        );
        let cb = canonicalize(&base, &ctx);
        fn permute(p: &mut Vec<u8>, k: usize, out: &mut Vec<Vec<u8>>) {
            if k == p.len() {
                out.push(p.clone());
                return;
            }
            for i in k..p.len() {
                p.swap(k, i);
                permute(p, k + 1, out);
                p.swap(k, i);
            }
        }
        let mut perms4 = Vec::new();
        permute(&mut vec![0u8, 1, 2, 3], 0, &mut perms4);
        for perm in perms4 {
            let mut vcol = vec![0u64; 4];
            for old in 0..4 {
                vcol[perm[old] as usize] = base.vcol[old];
            }
            let edges: Vec<(u8, u8, u16)> = base
                .edges
                .iter()
                .map(|&(u, v, c)| (perm[u as usize], perm[v as usize], c))
                .collect();
            let gg = CGraph { vcol, edges, pins: vec![], symmetric: true };
            assert_eq!(canonicalize(&gg, &ctx).key, cb.key);
        }
    }

    #[test]
    fn theta_graph_vertex_auts() {
        // two vertices, three parallel edges: vertex-level automorphisms are
        // the swap and identity (edge permutations handled elsewhere)
        let ctx = CanonCtx::symmetric(1);
        let theta = g(vec![9, 9], vec![(0, 1, 0), (0, 1, 0), (0, 1, 0)], vec![]);
        let c = canonicalize(&theta, &ctx);
        assert_eq!(c.vertex_auts.len(), 2);
    }
}
