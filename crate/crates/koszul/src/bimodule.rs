//! Weight-graded dg Σ-bimodules over ℚ.
//!
//! A bimodule is stored cellwise: for each (out-arity m, in-arity n, weight
//! w) a graded basis with the actions of the adjacent transpositions of Σₘ
//! (on outputs, from the left) and Σₙ (on inputs, from the right), plus a
//! degree −1 differential. Validation checks the Coxeter relations, that the
//! two actions commute, and that the differential is equivariant and squares
//! to zero. Homological degree is ℤ-valued; the shift s raises degree by one.

use crate::linalg::{rat, Rat, SparseMat};
use crate::Error;
use num::{One, Zero};
use std::collections::BTreeMap;

pub type CellKey = (u8, u8, i64);

/// One (biarity, weight) component: a graded basis with group actions.
#[derive(Clone, Debug)]
pub struct GradedSpace {
    /// Homological degree of each basis element.
    pub degs: Vec<i64>,
    /// Action of the adjacent transposition sᵢ = (i, i+1) of Σₘ on outputs;
    /// length m − 1 (empty for m ≤ 1).
    pub out_gens: Vec<SparseMat>,
    /// Action of the adjacent transpositions of Σₙ on inputs (right action);
    /// length n − 1.
    pub in_gens: Vec<SparseMat>,
    /// Degree −1 differential.
    pub diff: SparseMat,
}

impl GradedSpace {
    pub fn dim(&self) -> usize {
        self.degs.len()
    }

    /// Space with trivial actions and differential, all in one degree.
    pub fn trivial(dim: usize, m: u8, n: u8, deg: i64) -> GradedSpace {
        GradedSpace {
            degs: vec![deg; dim],
            out_gens: (1..m).map(|_| SparseMat::identity(dim)).collect(),
            in_gens: (1..n).map(|_| SparseMat::identity(dim)).collect(),
            diff: SparseMat::zero(dim, dim),
        }
    }

    /// Sign action: every adjacent transposition acts by −1 (dim 1).
    pub fn sign(m: u8, n: u8, deg: i64) -> GradedSpace {
        let neg = SparseMat::identity(1).scale(&-Rat::one());
        GradedSpace {
            degs: vec![deg],
            out_gens: (1..m).map(|_| neg.clone()).collect(),
            in_gens: (1..n).map(|_| neg.clone()).collect(),
            diff: SparseMat::zero(1, 1),
        }
    }

    pub fn dims_by_degree(&self) -> BTreeMap<i64, usize> {
        let mut out = BTreeMap::new();
        for &d in &self.degs {
            *out.entry(d).or_insert(0) += 1;
        }
        out
    }
}

/// A finitely supported weight-graded dg Σ-bimodule.
#[derive(Clone, Debug, Default)]
pub struct SigmaBimodule {
    pub cells: BTreeMap<CellKey, GradedSpace>,
}

impl SigmaBimodule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, m: u8, n: u8, w: i64, space: GradedSpace) {
        if space.dim() > 0 {
            self.cells.insert((m, n, w), space);
        }
    }

    pub fn cell(&self, m: u8, n: u8, w: i64) -> Option<&GradedSpace> {
        self.cells.get(&(m, n, w))
    }

    pub fn dim(&self, m: u8, n: u8, w: i64) -> usize {
        self.cell(m, n, w).map_or(0, |c| c.dim())
    }

    /// The monoidal unit: ℚ in biarity (1, 1), weight 0, degree 0.
    pub fn unit() -> SigmaBimodule {
        let mut b = SigmaBimodule::new();
        b.insert(1, 1, 0, GradedSpace::trivial(1, 1, 1, 0));
        b
    }

    pub fn is_purely_outgoing(&self) -> bool {
        self.cells.keys().all(|&(_, n, _)| n == 0)
    }

    /// Dimension table per (m, n, w, degree).
    pub fn dims_table(&self) -> BTreeMap<(u8, u8, i64, i64), usize> {
        let mut out = BTreeMap::new();
        for (&(m, n, w), sp) in &self.cells {
            for &d in &sp.degs {
                *out.entry((m, n, w, d)).or_insert(0) += 1;
            }
        }
        out
    }

    /// Validation report: empty iff every invariant holds.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (&(m, n, w), sp) in &self.cells {
            let dim = sp.dim();
            let tag = format!("cell ({m},{n},{w})");
            if sp.out_gens.len() != (m.max(1) - 1) as usize {
                errs.push(format!("{tag}: wrong number of output generators"));
                continue;
            }
            if sp.in_gens.len() != (n.max(1) - 1) as usize {
                errs.push(format!("{tag}: wrong number of input generators"));
                continue;
            }
            let id = SparseMat::identity(dim);
            for (which, gens) in [("out", &sp.out_gens), ("in", &sp.in_gens)] {
                for (i, g) in gens.iter().enumerate() {
                    if g.rows != dim || g.cols != dim {
                        errs.push(format!("{tag}: {which} s{i} has wrong shape"));
                        continue;
                    }
                    if g.mul(g) != id {
                        errs.push(format!("{tag}: {which} s{i}² ≠ id"));
                    }
                }
                for i in 0..gens.len().saturating_sub(1) {
                    let a = &gens[i];
                    let b = &gens[i + 1];
                    if a.mul(b).mul(a) != b.mul(a).mul(b) {
                        errs.push(format!("{tag}: {which} braid relation fails at {i}"));
                    }
                }
                for i in 0..gens.len() {
                    for j in i + 2..gens.len() {
                        if gens[i].mul(&gens[j]) != gens[j].mul(&gens[i]) {
                            errs.push(format!("{tag}: {which} s{i}, s{j} do not commute"));
                        }
                    }
                }
            }
            for (i, a) in sp.out_gens.iter().enumerate() {
                for (j, b) in sp.in_gens.iter().enumerate() {
                    if a.mul(b) != b.mul(a) {
                        errs.push(format!("{tag}: out s{i} and in s{j} do not commute"));
                    }
                }
            }
            if sp.diff.rows != dim || sp.diff.cols != dim {
                errs.push(format!("{tag}: differential has wrong shape"));
                continue;
            }
            if !sp.diff.mul(&sp.diff).is_zero() {
                errs.push(format!("{tag}: d² ≠ 0"));
            }
            for g in sp.out_gens.iter().chain(sp.in_gens.iter()) {
                if g.mul(&sp.diff) != sp.diff.mul(g) {
                    errs.push(format!("{tag}: differential not equivariant"));
                    break;
                }
            }
            // degree bookkeeping: d lowers degree by exactly 1, actions
            // preserve degree
            for j in 0..dim {
                for (i, v) in sp.diff.col(j) {
                    if !v.is_zero() && sp.degs[i] != sp.degs[j] - 1 {
                        errs.push(format!("{tag}: differential entry ({i},{j}) not degree −1"));
                    }
                }
            }
            for g in sp.out_gens.iter().chain(sp.in_gens.iter()) {
                for j in 0..dim {
                    for (i, v) in g.col(j) {
                        if !v.is_zero() && sp.degs[i] != sp.degs[j] {
                            errs.push(format!("{tag}: action does not preserve degree"));
                        }
                    }
                }
            }
        }
        errs
    }

    /// Degreewise dual: (a*)_d at (m,n,w) = dual of a_{−d}; actions become
    /// inverse-transposes (= transposes on the involutive generators), the
    /// differential the signed transpose.
    pub fn dualize(&self) -> SigmaBimodule {
        let mut out = SigmaBimodule::new();
        for (&(m, n, w), sp) in &self.cells {
            let degs: Vec<i64> = sp.degs.iter().map(|&d| -d).collect();
            let out_gens: Vec<SparseMat> = sp.out_gens.iter().map(|g| g.transpose()).collect();
            let in_gens: Vec<SparseMat> = sp.in_gens.iter().map(|g| g.transpose()).collect();
            // ⟨d*f, x⟩ = −(−1)^{deg f} ⟨f, dx⟩
            let mut diff = SparseMat::zero(sp.dim(), sp.dim());
            let dt = sp.diff.transpose();
            for j in 0..sp.dim() {
                let sign = if degs[j].rem_euclid(2) == 0 { -Rat::one() } else { Rat::one() };
                for (i, v) in dt.col(j) {
                    diff.set(i, j, v * &sign);
                }
            }
            out.insert(m, n, w, GradedSpace { degs, out_gens, in_gens, diff });
        }
        out
    }

    /// Prestable: purely outgoing, weights ≥ −1, and the weight −1 part
    /// trivial in arities ≤ 2.
    pub fn prestable_check(&self) -> Result<bool, Error> {
        if !self.is_purely_outgoing() {
            return Err(Error::BadInput("prestability needs a purely outgoing bimodule".into()));
        }
        for &(m, _, w) in self.cells.keys() {
            if w < -1 || (w == -1 && m <= 2) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reduced: prestable and trivial in weight 0 arity 0.
    pub fn reduced_check(&self) -> Result<bool, Error> {
        Ok(self.prestable_check()? && self.dim(0, 0, 0) == 0)
    }

    /// Finite type within a window (always true for this finitely supported
    /// representation; present for contract completeness).
    pub fn finite_type_check(&self, _window: &Window) -> bool {
        true
    }

    /// Degree shift: (sᵏ a)_d = a_{d−k}. Actions unchanged; the differential
    /// picks up the usual (−1)ᵏ.
    pub fn shift(&self, k: i64) -> SigmaBimodule {
        let mut out = SigmaBimodule::new();
        let sign = if k.rem_euclid(2) == 0 { Rat::one() } else { -Rat::one() };
        for (&(m, n, w), sp) in &self.cells {
            out.insert(
                m,
                n,
                w,
                GradedSpace {
                    degs: sp.degs.iter().map(|&d| d + k).collect(),
                    out_gens: sp.out_gens.clone(),
                    in_gens: sp.in_gens.clone(),
                    diff: sp.diff.scale(&sign),
                },
            );
        }
        out
    }
}

/// Computation window: finite bounds on arity, weight and degree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub max_out: u8,
    pub max_in: u8,
    pub wmin: i64,
    pub wmax: i64,
    pub dmin: i64,
    pub dmax: i64,
}

impl Window {
    pub fn modular(max_arity: u8, wmax: i64) -> Window {
        Window {
            max_out: max_arity,
            max_in: 0,
            wmin: -1,
            wmax,
            dmin: i64::MIN / 4,
            dmax: i64::MAX / 4,
        }
    }

    pub fn contains_cell(&self, m: u8, n: u8, w: i64) -> bool {
        m <= self.max_out && n <= self.max_in && w >= self.wmin && w <= self.wmax
    }
}

/// Which closure rule applies when enlarging a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosureContext {
    /// Purely outgoing modules over a Brauer-type properad: per-vertex bound
    /// arity + 2·weight ≥ 1, at most max(m + 2w, 1) labels per cell.
    Modular,
    /// General composition: the window caps pass through unchanged.
    General,
}

/// The source cells needed so that every target cell of `window` is computed
/// exactly. Modular rule: a target (m, w) draws on labels of arity
/// ≤ m + 2w + 2; since the index graphs are connected with every label of
/// weight ≥ −1 and every edge of weight 1, the label weights themselves
/// never exceed w.
pub fn window_closure(window: &Window, context: ClosureContext) -> Result<Window, Error> {
    match context {
        ClosureContext::General => Ok(*window),
        ClosureContext::Modular => {
            if window.wmax < window.wmin {
                return Ok(*window);
            }
            let max_arity = (window.max_out as i64 + 2 * window.wmax + 2).max(0);
            if max_arity > u8::MAX as i64 {
                return Err(Error::InfiniteClosure("arity closure exceeds u8".into()));
            }
            Ok(Window {
                max_out: max_arity as u8,
                max_in: 0,
                wmin: -1,
                wmax: window.wmax,
                dmin: window.dmin,
                dmax: window.dmax,
            })
        }
    }
}

/// Maximum label count in a connected composition cell (m, w) over a
/// prestable module: max(m + 2w, 1).
pub fn modular_vertex_bound(m: u8, w: i64) -> usize {
    (m as i64 + 2 * w).max(1) as usize
}

// ---------------------------------------------------------------------------
// Twists
// ---------------------------------------------------------------------------

/// A dg Σ₂-module: the space of the binary pairing operation of a
/// Brauer-type properad.
#[derive(Clone, Debug)]
pub struct Twist {
    pub degs: Vec<i64>,
    /// Action of the transposition of Σ₂.
    pub invol: SparseMat,
    pub diff: SparseMat,
    pub name: String,
}

impl Twist {
    pub fn dim(&self) -> usize {
        self.degs.len()
    }

    /// Trivial one-dimensional twist in degree 0.
    pub fn one() -> Twist {
        Twist {
            degs: vec![0],
            invol: SparseMat::identity(1),
            diff: SparseMat::zero(1, 1),
            name: "1".into(),
        }
    }

    /// One-dimensional trivial representation concentrated in degree 1.
    pub fn r() -> Twist {
        Twist {
            degs: vec![1],
            invol: SparseMat::identity(1),
            diff: SparseMat::zero(1, 1),
            name: "R".into(),
        }
    }

    /// Inverse of R: degree −1.
    pub fn r_inv() -> Twist {
        Twist {
            degs: vec![-1],
            invol: SparseMat::identity(1),
            diff: SparseMat::zero(1, 1),
            name: "R^-1".into(),
        }
    }

    /// Sign representation in degree 0.
    pub fn s() -> Twist {
        Twist {
            degs: vec![0],
            invol: SparseMat::identity(1).scale(&-Rat::one()),
            diff: SparseMat::zero(1, 1),
            name: "S".into(),
        }
    }

    /// R^a ⊗ S^b.
    pub fn rs(a: i64, b: u32) -> Twist {
        let sign = if b % 2 == 1 { -Rat::one() } else { Rat::one() };
        Twist {
            degs: vec![a],
            invol: SparseMat::identity(1).scale(&sign),
            diff: SparseMat::zero(1, 1),
            name: format!("R^{a}S^{}", b % 2),
        }
    }

    /// Tensor product of twists (diagonal Σ₂-action, Koszul signs in the
    /// differential).
    pub fn tensor(&self, other: &Twist) -> Twist {
        let n1 = self.dim();
        let n2 = other.dim();
        let dim = n1 * n2;
        let mut degs = Vec::with_capacity(dim);
        for i in 0..n1 {
            for j in 0..n2 {
                degs.push(self.degs[i] + other.degs[j]);
            }
        }
        let mut invol = SparseMat::zero(dim, dim);
        for a in 0..n1 {
            for b in 0..n2 {
                for (i, v1) in self.invol.col(a) {
                    for (j, v2) in other.invol.col(b) {
                        invol.add_to(i * n2 + j, a * n2 + b, &v1 * &v2);
                    }
                }
            }
        }
        let mut diff = SparseMat::zero(dim, dim);
        for a in 0..n1 {
            for b in 0..n2 {
                for (i, v) in self.diff.col(a) {
                    diff.add_to(i * n2 + b, a * n2 + b, v);
                }
                let sign =
                    if self.degs[a].rem_euclid(2) == 0 { Rat::one() } else { -Rat::one() };
                for (j, v) in other.diff.col(b) {
                    diff.add_to(a * n2 + j, a * n2 + b, v * &sign);
                }
            }
        }
        Twist { degs, invol, diff, name: format!("{}*{}", self.name, other.name) }
    }

    pub fn dualize(&self) -> Twist {
        let degs: Vec<i64> = self.degs.iter().map(|&d| -d).collect();
        let invol = self.invol.transpose();
        let mut diff = SparseMat::zero(self.dim(), self.dim());
        let dt = self.diff.transpose();
        for j in 0..self.dim() {
            let sign = if degs[j].rem_euclid(2) == 0 { -Rat::one() } else { Rat::one() };
            for (i, v) in dt.col(j) {
                diff.set(i, j, v * &sign);
            }
        }
        Twist { degs, invol, diff, name: format!("({})*", self.name) }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let dim = self.dim();
        if self.invol.mul(&self.invol) != SparseMat::identity(dim) {
            errs.push("twist: involution² ≠ id".into());
        }
        if !self.diff.mul(&self.diff).is_zero() {
            errs.push("twist: d² ≠ 0".into());
        }
        if self.invol.mul(&self.diff) != self.diff.mul(&self.invol) {
            errs.push("twist: differential does not commute with involution".into());
        }
        for j in 0..dim {
            for (i, v) in self.diff.col(j) {
                if !v.is_zero() && self.degs[i] != self.degs[j] - 1 {
                    errs.push("twist: differential not of degree −1".into());
                }
            }
            for (i, v) in self.invol.col(j) {
                if !v.is_zero() && self.degs[i] != self.degs[j] {
                    errs.push("twist: involution not degree 0".into());
                }
            }
        }
        errs
    }

    /// Signed-permutation certificate for the involution: ι(e_c) =
    /// sign[c] · e_{img[c]}, or None if the involution is not monomial.
    pub fn monomial_invol(&self) -> Option<(Vec<usize>, Vec<i8>)> {
        let dim = self.dim();
        let mut img = vec![0usize; dim];
        let mut sign = vec![0i8; dim];
        for c in 0..dim {
            let col = self.invol.col(c);
            if col.len() != 1 {
                return None;
            }
            let (&i, v) = col.iter().next().unwrap();
            if *v == Rat::one() {
                img[c] = i;
                sign[c] = 1;
            } else if *v == -Rat::one() {
                img[c] = i;
                sign[c] = -1;
            } else {
                return None;
            }
        }
        Some((img, sign))
    }

    /// The bimodule with this twist in biarity (0, 2), weight 1.
    pub fn as_bimodule(&self) -> SigmaBimodule {
        let mut b = SigmaBimodule::new();
        b.insert(
            0,
            2,
            1,
            GradedSpace {
                degs: self.degs.clone(),
                out_gens: vec![],
                in_gens: vec![self.invol.clone()],
                diff: self.diff.clone(),
            },
        );
        b
    }
}

// ---------------------------------------------------------------------------
// Permutations and Koszul signs
// ---------------------------------------------------------------------------

/// Matrix of σ (active form: the element in slot i moves to slot σ[i]) for a
/// left action presented by adjacent-transposition generator matrices.
pub fn perm_action_left(gens: &[SparseMat], sigma: &[u8], dim: usize) -> SparseMat {
    let mut m = SparseMat::identity(dim);
    for &j in adjacent_decomposition(sigma).iter() {
        m = gens[j as usize].mul(&m);
    }
    m
}

/// Right action: ρ(σ·τ) = ρ(τ)·ρ(σ), so generators accumulate reversed.
pub fn perm_action_right(gens: &[SparseMat], sigma: &[u8], dim: usize) -> SparseMat {
    let mut m = SparseMat::identity(dim);
    for &j in adjacent_decomposition(sigma).iter() {
        m = m.mul(&gens[j as usize]);
    }
    m
}

/// Write σ as a product of adjacent transpositions s_{j1} ∘ … ∘ s_{jr}
/// (function composition, rightmost applied first); the returned list is
/// j1, …, jr.
pub fn adjacent_decomposition(sigma: &[u8]) -> Vec<u8> {
    let n = sigma.len();
    let mut arr: Vec<u8> = vec![0; n];
    for (i, &s) in sigma.iter().enumerate() {
        arr[s as usize] = i as u8; // arr = σ⁻¹
    }
    // bubble-sort σ⁻¹ to the identity; applying the recorded swaps to the
    // identity in reverse order rebuilds σ
    let mut swaps = Vec::new();
    let mut work = arr;
    loop {
        let mut done = true;
        for i in 0..n.saturating_sub(1) {
            if work[i] > work[i + 1] {
                work.swap(i, i + 1);
                swaps.push(i as u8);
                done = false;
            }
        }
        if done {
            break;
        }
    }
    swaps.reverse();
    swaps
}

pub fn perm_parity(sigma: &[u8]) -> i8 {
    if adjacent_decomposition(sigma).len() % 2 == 0 {
        1
    } else {
        -1
    }
}

/// Koszul sign of reordering homogeneous factors of the given degrees by σ
/// (factor i moves to slot σ[i]): (−1) per inversion of two odd factors.
pub fn koszul_sign(degs: &[i64], sigma: &[u8]) -> Rat {
    let n = degs.len();
    let mut neg = false;
    for i in 0..n {
        for j in i + 1..n {
            if sigma[i] > sigma[j] && degs[i] % 2 != 0 && degs[j] % 2 != 0 {
                neg = !neg;
            }
        }
    }
    if neg {
        -Rat::one()
    } else {
        Rat::one()
    }
}

/// All permutations of Σ_k in active form, lexicographic.
pub fn symmetric_group(k: usize) -> Vec<Vec<u8>> {
    crate::graphs::all_perms(k)
}

// ---------------------------------------------------------------------------
// Bimodule maps
// ---------------------------------------------------------------------------

/// A map of Σ-bimodules with a homological degree shift.
#[derive(Clone, Debug)]
pub struct BimoduleMap {
    pub maps: BTreeMap<CellKey, SparseMat>,
    pub degree: i64,
}

impl BimoduleMap {
    pub fn zero() -> BimoduleMap {
        BimoduleMap { maps: BTreeMap::new(), degree: 0 }
    }

    pub fn map(&self, key: CellKey, from_dim: usize, to_dim: usize) -> SparseMat {
        match self.maps.get(&key) {
            Some(m) => m.clone(),
            None => SparseMat::zero(to_dim, from_dim),
        }
    }

    /// Equivariance and differential compatibility with the sign convention
    /// for the map degree: d ∘ f = (−1)^{deg f} f ∘ d.
    pub fn validate(&self, from: &SigmaBimodule, to: &SigmaBimodule) -> Vec<String> {
        let mut errs = Vec::new();
        let sign = if self.degree.rem_euclid(2) == 0 { Rat::one() } else { -Rat::one() };
        for (&key, mat) in &self.maps {
            let (m, n, w) = key;
            let src = match from.cell(m, n, w) {
                Some(c) => c,
                None => {
                    if !mat.is_zero() {
                        errs.push(format!("map at ({m},{n},{w}): source cell missing"));
                    }
                    continue;
                }
            };
            let dst = match to.cell(m, n, w) {
                Some(c) => c,
                None => {
                    if !mat.is_zero() {
                        errs.push(format!("map at ({m},{n},{w}): target cell missing"));
                    }
                    continue;
                }
            };
            if mat.rows != dst.dim() || mat.cols != src.dim() {
                errs.push(format!("map at ({m},{n},{w}): shape mismatch"));
                continue;
            }
            for (gs, gd, which) in [
                (&src.out_gens, &dst.out_gens, "out"),
                (&src.in_gens, &dst.in_gens, "in"),
            ] {
                for (i, (a, b)) in gs.iter().zip(gd.iter()).enumerate() {
                    if mat.mul(a) != b.mul(mat) {
                        errs.push(format!(
                            "map at ({m},{n},{w}): not equivariant ({which} s{i})"
                        ));
                    }
                }
            }
            if dst.diff.mul(mat) != mat.mul(&src.diff).scale(&sign) {
                errs.push(format!("map at ({m},{n},{w}): does not commute with differentials"));
            }
            for j in 0..src.dim() {
                for (i, v) in mat.col(j) {
                    if !v.is_zero() && dst.degs[i] != src.degs[j] + self.degree {
                        errs.push(format!("map at ({m},{n},{w}): wrong degree shift"));
                    }
                }
            }
        }
        errs
    }
}

/// Deterministic pseudo-random dg Σ-bimodules for tests and the acceptance
/// battery: small supports, valid actions by construction, differentials
/// that square to zero and commute with the actions.
pub fn sample_bimodule(seed: u64, max_arity: u8, max_dim: usize) -> SigmaBimodule {
    let mut state =
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as usize
    };
    let mut b = SigmaBimodule::new();
    let ncells = 1 + next() % 3;
    for _ in 0..ncells {
        let m = (next() % (max_arity as usize + 1)) as u8;
        let n = (next() % (max_arity as usize + 1)) as u8;
        let w = (next() % 3) as i64;
        if b.cells.contains_key(&(m, n, w)) {
            continue;
        }
        let k = 1 + next() % max_dim;
        let deg = (next() % 4) as i64 - 1;
        let with_diff = k >= 2 && next() % 2 == 0;
        if with_diff {
            // two-term complex between trivial representations
            let half = k / 2;
            let mut degs = vec![deg + 1; half];
            degs.extend(vec![deg; k - half]);
            let mut diff = SparseMat::zero(k, k);
            for i in 0..half.min(k - half) {
                diff.set(half + i, i, rat(1, 1));
            }
            let sp = GradedSpace {
                degs,
                out_gens: (1..m).map(|_| SparseMat::identity(k)).collect(),
                in_gens: (1..n).map(|_| SparseMat::identity(k)).collect(),
                diff,
            };
            b.insert(m, n, w, sp);
        } else if next() % 3 == 0 && m >= 2 {
            b.insert(m, n, w, GradedSpace::sign(m, n, deg));
        } else {
            b.insert(m, n, w, GradedSpace::trivial(k, m, n, deg));
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_dims() {
        let u = SigmaBimodule::unit();
        assert_eq!(u.dim(1, 1, 0), 1);
        assert_eq!(u.dim(0, 2, 1), 0);
        assert!(u.validate().is_empty());
        assert_eq!(u.dualize().dims_table(), u.dims_table());
    }

    #[test]
    fn validate_catches_broken_involution() {
        let mut b = SigmaBimodule::new();
        let mut sp = GradedSpace::trivial(1, 2, 0, 0);
        sp.out_gens[0] = SparseMat::identity(1).scale(&rat(2, 1));
        b.insert(2, 0, 0, sp);
        let errs = b.validate();
        assert!(errs.iter().any(|e| e.contains("s0² ≠ id")), "{errs:?}");
    }

    #[test]
    fn validate_accepts_permutation_action() {
        let mut swap = SparseMat::zero(2, 2);
        swap.set(0, 1, Rat::one());
        swap.set(1, 0, Rat::one());
        let sp = GradedSpace {
            degs: vec![0, 0],
            out_gens: vec![swap],
            in_gens: vec![],
            diff: SparseMat::zero(2, 2),
        };
        let mut b = SigmaBimodule::new();
        b.insert(2, 0, 0, sp);
        assert!(b.validate().is_empty());
    }

    #[test]
    fn dual_of_r_sits_in_degree_minus_one() {
        let r = Twist::r();
        let d = r.dualize();
        assert_eq!(d.degs, vec![-1]);
        let rb = r.as_bimodule();
        let db = rb.dualize();
        assert_eq!(db.cell(0, 2, 1).unwrap().degs, vec![-1]);
    }

    #[test]
    fn double_dual_preserves_dims_and_validity() {
        for seed in 0..8 {
            let b = sample_bimodule(seed, 3, 3);
            assert!(b.validate().is_empty(), "seed {seed}");
            let d = b.dualize();
            assert!(d.validate().is_empty(), "dual seed {seed}: {:?}", d.validate());
            assert_eq!(d.dualize().dims_table(), b.dims_table());
        }
    }

    #[test]
    fn twist_algebra() {
        assert!(Twist::one().validate().is_empty());
        assert!(Twist::s().validate().is_empty());
        let rs = Twist::r().tensor(&Twist::s());
        assert_eq!(rs.degs, vec![1]);
        assert_eq!(rs.invol.get(0, 0), -Rat::one());
        let r_rinv = Twist::r().tensor(&Twist::r_inv());
        assert_eq!(r_rinv.degs, vec![0]);
        assert_eq!(Twist::s().monomial_invol().unwrap().1, vec![-1]);
        assert_eq!(Twist::one().monomial_invol().unwrap().1, vec![1]);
    }

    #[test]
    fn prestability() {
        let mut gens = SigmaBimodule::new();
        gens.insert(3, 0, -1, GradedSpace::trivial(1, 3, 0, 0));
        assert!(gens.prestable_check().unwrap());
        let mut bad = SigmaBimodule::new();
        bad.insert(2, 0, -1, GradedSpace::trivial(1, 2, 0, 0));
        assert!(!bad.prestable_check().unwrap());
        let mut u0 = SigmaBimodule::new();
        u0.insert(0, 0, 0, GradedSpace::trivial(1, 0, 0, 0));
        assert!(u0.prestable_check().unwrap());
        assert!(!u0.reduced_check().unwrap());
    }

    #[test]
    fn window_closure_modular() {
        let w = Window::modular(3, 0);
        let c = window_closure(&w, ClosureContext::Modular).unwrap();
        assert_eq!(c.max_out, 5);
        assert_eq!(c.wmin, -1);
        // idempotent up to monotonicity
        let w2 = Window::modular(2, 0);
        let csmall = window_closure(&w2, ClosureContext::Modular).unwrap();
        assert!(csmall.max_out <= c.max_out && csmall.wmax <= c.wmax);
        // empty window stays empty
        let we = Window { max_out: 0, max_in: 0, wmin: 0, wmax: -1, dmin: 0, dmax: 0 };
        let ce = window_closure(&we, ClosureContext::Modular).unwrap();
        assert_eq!(ce.wmax, -1);
    }

    #[test]
    fn perm_action_functorial() {
        fn pmat(p: &[u8]) -> SparseMat {
            let mut m = SparseMat::zero(p.len(), p.len());
            for (i, &pi) in p.iter().enumerate() {
                m.set(pi as usize, i, Rat::one());
            }
            m
        }
        let gens = vec![pmat(&[1, 0, 2]), pmat(&[0, 2, 1])];
        for a in symmetric_group(3) {
            let ma = perm_action_left(&gens, &a, 3);
            assert_eq!(ma, pmat(&a), "σ = {a:?}");
            for b in symmetric_group(3) {
                let mb = perm_action_left(&gens, &b, 3);
                let ab: Vec<u8> = (0..3).map(|x| a[b[x] as usize]).collect();
                assert_eq!(perm_action_left(&gens, &ab, 3), ma.mul(&mb));
            }
        }
    }

    #[test]
    fn right_action_reverses() {
        fn pmat(p: &[u8]) -> SparseMat {
            let mut m = SparseMat::zero(p.len(), p.len());
            for (i, &pi) in p.iter().enumerate() {
                m.set(pi as usize, i, Rat::one());
            }
            m
        }
        let gens = vec![pmat(&[1, 0, 2]), pmat(&[0, 2, 1])];
        for a in symmetric_group(3) {
            for b in symmetric_group(3) {
                let ab: Vec<u8> = (0..3).map(|x| a[b[x] as usize]).collect();
                let lhs = perm_action_right(&gens, &ab, 3);
                let rhs =
                    perm_action_right(&gens, &b, 3).mul(&perm_action_right(&gens, &a, 3));
                assert_eq!(lhs, rhs);
            }
        }
    }

    #[test]
    fn koszul_sign_swap() {
        assert_eq!(koszul_sign(&[1, 1], &[1, 0]), -Rat::one());
        assert_eq!(koszul_sign(&[1, 0], &[1, 0]), Rat::one());
        assert_eq!(koszul_sign(&[2, 1], &[1, 0]), Rat::one());
        assert_eq!(koszul_sign(&[1, 1, 1], &[1, 2, 0]), Rat::one());
    }

    #[test]
    fn shift_moves_degrees() {
        let r = Twist::r().as_bimodule();
        let s = r.shift(1);
        assert_eq!(s.cell(0, 2, 1).unwrap().degs, vec![2]);
        let s2 = r.shift(-1);
        assert_eq!(s2.cell(0, 2, 1).unwrap().degs, vec![0]);
    }

    #[test]
    fn sample_bimodules_always_valid() {
        for seed in 0..30 {
            let b = sample_bimodule(seed, 4, 4);
            assert!(b.validate().is_empty(), "seed {seed}: {:?}", b.validate());
        }
    }
}
