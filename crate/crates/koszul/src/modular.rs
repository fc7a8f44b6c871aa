//! Modular operads and cooperads: prestable weight-graded collections with
//! gluing and contraction along edges of connected multigraphs.
//!
//! Elements of the edge-indexed complexes are connected multigraphs with
//! hairs whose vertices carry basis labels and whose edges carry twist
//! components on one or two layers. The bar construction contracts one edge
//! at a time through the structure maps; the cobar construction of a
//! cooperad splits vertices through the co-structure maps; composing the two
//! gives the resolution complexes, and dualize-then-cobar is the edge
//! contraction complex of the dual. All differentials are assembled as exact
//! sparse matrices per (arity, weight) cell.
//!
//! Normal order for Koszul signs: edge factors in canonical edge order, then
//! vertex labels in canonical vertex order.

use crate::bimodule::{
    koszul_sign, modular_vertex_bound, perm_action_left, GradedSpace, SigmaBimodule, Twist,
    Window,
};
use crate::graphs::{MgAutGroup, Multigraph};
use crate::linalg::{homology, ChainComplex, ChainMap, ColBasisSolver, Rat, SparseMat};
use crate::Error;
use num::{One, Zero};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

const AUT_BUDGET: usize = 60_000;
const TUPLE_BUDGET: usize = 200_000;
pub const CLASS_BUDGET: usize = 400_000;

// ---------------------------------------------------------------------------
// Structure-map providers
// ---------------------------------------------------------------------------

/// The structure maps of a modular operad, one matrix per configuration.
/// `glue` joins leg p of an element in (a, wa) to leg q of one in (b, wb)
/// through twist component tc; the column index is x·dim_b + y, the result
/// legs are x's minus p followed by y's minus q. `contract` self-glues legs
/// p < q. Both may return sums (quotient structures).
pub trait GlueOps {
    fn glue(
        &self,
        a: u8,
        wa: i64,
        p: u8,
        b: u8,
        wb: i64,
        q: u8,
        tc: usize,
    ) -> Result<SparseMat, Error>;
    fn contract(&self, a: u8, wa: i64, p: u8, q: u8, tc: usize) -> Result<SparseMat, Error>;
}

/// Co-structure maps of a modular cooperad: transposed directions.
/// `coglue` maps the (a+b−2)-ary cell into the pair cell, `cocontract` the
/// (a−2)-ary cell into the a-ary cell.
pub trait CoglueOps {
    fn coglue(
        &self,
        a: u8,
        wa: i64,
        p: u8,
        b: u8,
        wb: i64,
        q: u8,
        tc: usize,
    ) -> Result<SparseMat, Error>;
    fn cocontract(&self, a: u8, wa: i64, p: u8, q: u8, tc: usize) -> Result<SparseMat, Error>;
}

/// One (arity, weight) component of a modular (co)operad.
#[derive(Clone)]
pub struct ModCell {
    pub space: GradedSpace,
    /// Koszul weights (syzygy bookkeeping); zero when not applicable.
    pub kweights: Vec<i64>,
}

/// A modular operad: prestable cells plus gluing/contraction maps.
pub struct ModularOperad {
    pub twist: Twist,
    pub cells: BTreeMap<(u8, i64), ModCell>,
    pub ops: Rc<dyn GlueOps>,
    pub name: String,
}

/// A modular cooperad.
pub struct ModularCooperad {
    pub twist: Twist,
    pub cells: BTreeMap<(u8, i64), ModCell>,
    pub ops: Rc<dyn CoglueOps>,
    pub name: String,
}

impl ModularOperad {
    pub fn dim(&self, m: u8, w: i64) -> usize {
        self.cells.get(&(m, w)).map_or(0, |c| c.space.dim())
    }

    pub fn as_bimodule(&self) -> SigmaBimodule {
        let mut b = SigmaBimodule::new();
        for (&(m, w), cell) in &self.cells {
            b.insert(m, 0, w, cell.space.clone());
        }
        b
    }

    pub fn prestable_check(&self) -> bool {
        self.cells
            .keys()
            .all(|&(m, w)| w >= -1 && !(w == -1 && m <= 2))
    }

    pub fn reduced_check(&self) -> bool {
        self.prestable_check() && self.dim(0, 0) == 0
    }

    pub fn dims_table(&self) -> BTreeMap<(u8, i64, i64), usize> {
        let mut t = BTreeMap::new();
        for (&(m, w), cell) in &self.cells {
            for &d in &cell.space.degs {
                *t.entry((m, w, d)).or_insert(0) += 1;
            }
        }
        t
    }
}

impl ModularCooperad {
    pub fn dim(&self, m: u8, w: i64) -> usize {
        self.cells.get(&(m, w)).map_or(0, |c| c.space.dim())
    }

    pub fn dims_table(&self) -> BTreeMap<(u8, i64, i64), usize> {
        let mut t = BTreeMap::new();
        for (&(m, w), cell) in &self.cells {
            for &d in &cell.space.degs {
                *t.entry((m, w, d)).or_insert(0) += 1;
            }
        }
        t
    }
}

// ---------------------------------------------------------------------------
// Labeled multigraph cells
// ---------------------------------------------------------------------------

type Label = u32;

/// Edge color encoding: layer * tdim + component. Layers: 0 = outer
/// (coproperad side, degree deg t + 1), 1 = inner (properad side, degree
/// deg t). Single-layer complexes only use layer 0 or 1.
#[derive(Clone, Debug)]
pub struct EdgePalette {
    pub tdim: usize,
    pub tdegs: Vec<i64>,
    /// flip[c] and sign of the involution on components.
    pub tflip: Vec<usize>,
    pub tsign: Vec<i8>,
    pub layers: [bool; 2],
}

impl EdgePalette {
    pub fn new(t: &Twist, layers: [bool; 2]) -> Result<EdgePalette, Error> {
        let (img, sign) = t.monomial_invol().ok_or_else(|| {
            Error::BadInput("twist involution is not monomial; unsupported here".into())
        })?;
        Ok(EdgePalette {
            tdim: t.dim(),
            tdegs: vec![0; 0],
            tflip: img,
            tsign: sign,
            layers,
        }
        .with_degs(t))
    }

    fn with_degs(mut self, t: &Twist) -> Self {
        self.tdegs = t.degs.clone();
        self
    }

    pub fn colors(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in 0..2 {
            if self.layers[layer] {
                for c in 0..self.tdim {
                    out.push((layer * self.tdim + c) as u8);
                }
            }
        }
        out
    }

    pub fn flip_table(&self) -> Vec<u8> {
        let mut out = vec![0u8; 2 * self.tdim];
        for layer in 0..2 {
            for c in 0..self.tdim {
                out[layer * self.tdim + c] = (layer * self.tdim + self.tflip[c]) as u8;
            }
        }
        out
    }

    pub fn layer(&self, color: u8) -> usize {
        color as usize / self.tdim
    }

    pub fn comp(&self, color: u8) -> usize {
        color as usize % self.tdim
    }

    /// Homological degree of an edge: outer edges carry the suspension.
    pub fn edge_deg(&self, color: u8) -> i64 {
        let c = self.comp(color);
        if self.layer(color) == 0 {
            self.tdegs[c] + 1
        } else {
            self.tdegs[c]
        }
    }

    pub fn flip_sign(&self, color: u8) -> Rat {
        let c = self.comp(color);
        if self.tsign[c] < 0 {
            -Rat::one()
        } else {
            Rat::one()
        }
    }
}

/// One multigraph class of a cell: labeled basis with coinvariant data.
pub struct MgClass {
    pub graph: Multigraph,
    pub auts: MgAutGroup,
    /// The (arity, weight) slot per vertex (decoded from vcol).
    pub slots: Vec<VSlotPub>,
    pub tuples: Vec<Vec<Label>>,
    pub tuple_degs: Vec<i64>,
    tuple_index: HashMap<Vec<Label>, usize>,
    pub coinv: SparseMat,
    solver: Option<ColBasisSolver>,
    /// The averaging projector onto invariants, stored once.
    sym: SparseMat,
    pub col_degs: Vec<i64>,
    pub col_kweights: Vec<i64>,
    pub offset: usize,
}

pub type VSlotPub = (u8, i64);

impl MgClass {
    pub fn dim(&self) -> usize {
        self.coinv.cols
    }

    fn express(&self, v: &BTreeMap<usize, Rat>) -> Result<BTreeMap<usize, Rat>, Error> {
        match &self.solver {
            Some(s) => Ok(s.express(v).map_err(crate::Error::Linalg)?),
            None => {
                if v.is_empty() {
                    Ok(BTreeMap::new())
                } else {
                    Err(Error::BadInput("express into empty multigraph basis".into()))
                }
            }
        }
    }
}

/// A cellwise edge-indexed complex: the carrier of bar/cobar constructions.
pub struct GraphComplex {
    pub palette: EdgePalette,
    /// Cells keyed by (arity, euler weight); the differential acts within.
    pub cells: BTreeMap<(u8, i64), Vec<MgClass>>,
    /// Assembled per-cell data.
    pub spaces: BTreeMap<(u8, i64), GradedSpace>,
    /// Per-cell syzygy degrees of the basis (total Koszul weight in labels).
    pub syzygy: BTreeMap<(u8, i64), Vec<i64>>,
}

impl GraphComplex {
    pub fn dim(&self, m: u8, w: i64) -> usize {
        self.spaces.get(&(m, w)).map_or(0, |s| s.dim())
    }

    pub fn as_bimodule(&self) -> SigmaBimodule {
        let mut b = SigmaBimodule::new();
        for (&(m, w), sp) in &self.spaces {
            b.insert(m, 0, w, sp.clone());
        }
        b
    }

    pub fn homology_dims(&self, m: u8, w: i64) -> Result<BTreeMap<i64, usize>, Error> {
        let sp = match self.spaces.get(&(m, w)) {
            Some(sp) => sp,
            None => return Ok(BTreeMap::new()),
        };
        let complex = degreewise_complex(sp);
        let h = homology(&complex).map_err(crate::Error::Linalg)?;
        Ok(h.dims)
    }
}

/// Split a graded space with differential into a chain complex by degree.
pub fn degreewise_complex(sp: &GradedSpace) -> ChainComplex {
    let mut by_deg: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &d) in sp.degs.iter().enumerate() {
        by_deg.entry(d).or_default().push(i);
    }
    let mut complex = ChainComplex::default();
    for (&d, idxs) in &by_deg {
        complex.add_space(d, idxs.iter().map(|i| format!("e{i}")).collect());
    }
    for (&d, idxs) in &by_deg {
        if let Some(lower) = by_deg.get(&(d - 1)) {
            let mut mat = SparseMat::zero(lower.len(), idxs.len());
            for (jj, &j) in idxs.iter().enumerate() {
                for (i, v) in sp.diff.col(j) {
                    let ii = lower.iter().position(|&x| x == i).unwrap();
                    mat.set(ii, jj, v);
                }
            }
            complex.add_diff(d, mat);
        }
    }
    complex
}

// ---------------------------------------------------------------------------
// Leg bookkeeping
// ---------------------------------------------------------------------------

/// Leg assignments of vertex v: hairs ascending, then edge endpoints in
/// record order (loops give two consecutive legs: stored reading first).
/// Entry: (kind, index, half) with kind 0 = hair (index = hair label),
/// kind 1 = edge (index = edge position, half = 0 for the u-end, 1 for v).
pub fn legs_of(g: &Multigraph, v: usize) -> Vec<(u8, u8, u8)> {
    let mut out = Vec::new();
    for (h, &hv) in g.hairs.iter().enumerate() {
        if hv as usize == v {
            out.push((0, h as u8, 0));
        }
    }
    for (e, &(a, b, _)) in g.edges.iter().enumerate() {
        if a as usize == v && b as usize == v {
            out.push((1, e as u8, 0));
            out.push((1, e as u8, 1));
        } else if a as usize == v {
            out.push((1, e as u8, 0));
        } else if b as usize == v {
            out.push((1, e as u8, 1));
        }
    }
    out
}

/// An isomorphism of labeled multigraphs: vertex permutation, edge matching,
/// per-edge flip flags.
pub struct MTransport<'a> {
    pub from: &'a Multigraph,
    pub to: &'a Multigraph,
    pub vperm: Vec<u8>,
    /// edge e of `from` ↦ (edge index in `to`, flipped reading).
    pub emap: Vec<(u8, bool)>,
    /// Hair relabeling carried by this transport (hair h ↦ hair_perm[h]).
    pub hair_perm: Option<Vec<u8>>,
}

impl<'a> MTransport<'a> {
    /// Match edges by (image endpoints, color) with ranks in record order.
    /// Valid between isomorphic graphs; rank ambiguities are absorbed by
    /// symmetrization downstream.
    pub fn by_rank(
        from: &'a Multigraph,
        to: &'a Multigraph,
        vperm: Vec<u8>,
        flip: &[u8],
    ) -> MTransport<'a> {
        let mut used = vec![false; to.edges.len()];
        let mut emap = Vec::with_capacity(from.edges.len());
        for &(u, v, c) in &from.edges {
            let (mut nu, mut nv) = (vperm[u as usize], vperm[v as usize]);
            let mut nc = c;
            let mut flipped = false;
            if nu > nv {
                std::mem::swap(&mut nu, &mut nv);
                nc = flip[c as usize];
                flipped = true;
            }
            if nu == nv {
                // loop: normalize the stored color
                let fc = flip[nc as usize];
                if fc < nc {
                    nc = fc;
                    flipped = !flipped;
                }
            }
            let pos = to
                .edges
                .iter()
                .enumerate()
                .position(|(i, &(a, b, cc))| !used[i] && a == nu && b == nv && cc == nc)
                .expect("edge matching failed");
            used[pos] = true;
            emap.push((pos as u8, flipped));
        }
        MTransport { from, to, vperm, emap, hair_perm: None }
    }

    /// The leg permutation induced at vertex v (active: leg s of v goes to
    /// leg perm[s] of the image vertex).
    pub fn leg_perm(&self, v: usize) -> Vec<u8> {
        let src = legs_of(self.from, v);
        let dst = legs_of(self.to, self.vperm[v] as usize);
        let mut p = vec![0u8; src.len()];
        for (s, &(kind, idx, half)) in src.iter().enumerate() {
            let pos = if kind == 0 {
                let target = match &self.hair_perm {
                    Some(p) => p[idx as usize],
                    None => idx,
                };
                dst.iter().position(|&(k, i, _)| k == 0 && i == target).unwrap()
            } else {
                let (ne, flipped) = self.emap[idx as usize];
                let target_half = if flipped { 1 - half } else { half };
                dst.iter()
                    .position(|&(k, i, h)| k == 1 && i == ne && h == target_half)
                    .unwrap()
            };
            p[s] = pos as u8;
        }
        p
    }
}

/// The label-cell menu: per (arity, weight), the labeling graded space.
pub trait LabelMenu {
    fn cell(&self, arity: u8, weight: i64) -> Option<&GradedSpace>;
    fn kweight(&self, arity: u8, weight: i64, idx: usize) -> i64;
}

struct BimoduleMenu<'a>(&'a BTreeMap<(u8, i64), ModCell>);

impl<'a> LabelMenu for BimoduleMenu<'a> {
    fn cell(&self, arity: u8, weight: i64) -> Option<&GradedSpace> {
        self.0.get(&(arity, weight)).map(|c| &c.space)
    }

    fn kweight(&self, arity: u8, weight: i64, idx: usize) -> i64 {
        self.0.get(&(arity, weight)).map_or(0, |c| c.kweights[idx])
    }
}

/// Push a labeled vector through a transport, acting on labels via the leg
/// permutations and tracking Koszul and twist-involution signs.
fn m_transport_vector(
    tr: &MTransport,
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    slots: &[VSlotPub],
    src_tuples: &[Vec<Label>],
    dst_index: &HashMap<Vec<Label>, usize>,
    v: &BTreeMap<usize, Rat>,
) -> BTreeMap<usize, Rat> {
    let nv = tr.from.vcol.len();
    let ne = tr.from.edges.len();
    let mut out: BTreeMap<usize, Rat> = BTreeMap::new();
    // factor permutation: edges first then vertices
    let mut fac_perm: Vec<u8> = Vec::with_capacity(ne + nv);
    for e in 0..ne {
        fac_perm.push(tr.emap[e].0);
    }
    for vv in 0..nv {
        fac_perm.push((ne + tr.vperm[vv] as usize) as u8);
    }
    for (ti, coeff) in v {
        let tuple = &src_tuples[*ti];
        let mut degs: Vec<i64> = Vec::with_capacity(ne + nv);
        for e in 0..ne {
            degs.push(palette.edge_deg(tr.from.edges[e].2));
        }
        let mut expansions: Vec<Vec<(u32, Rat)>> = Vec::with_capacity(nv);
        for vv in 0..nv {
            let (a, w) = slots[vv];
            let cell = menu.cell(a, w).expect("label cell missing");
            degs.push(cell.degs[tuple[vv] as usize]);
            let lp = tr.leg_perm(vv);
            let mat = perm_action_left(&cell.out_gens, &lp, cell.dim());
            expansions
                .push(mat.col(tuple[vv] as usize).into_iter().map(|(r, c)| (r as u32, c)).collect());
        }
        let mut sign = koszul_sign(&degs, &fac_perm);
        for e in 0..ne {
            if tr.emap[e].1 {
                sign *= palette.flip_sign(tr.from.edges[e].2);
            }
        }
        let mut partial: Vec<(Vec<Label>, Rat)> = vec![(vec![0u32; nv], coeff * &sign)];
        for (vv, exp) in expansions.iter().enumerate() {
            let target = tr.vperm[vv] as usize;
            let mut next = Vec::with_capacity(partial.len() * exp.len());
            for (t, c) in &partial {
                for (ridx, rc) in exp {
                    let mut t2 = t.clone();
                    t2[target] = *ridx;
                    next.push((t2, c * rc));
                }
            }
            partial = next;
        }
        for (t, c) in partial {
            if c.is_zero() {
                continue;
            }
            let di = *dst_index.get(&t).expect("multigraph transport left the tuple basis");
            let e = out.entry(di).or_insert_with(Rat::zero);
            *e += c;
            if e.is_zero() {
                out.remove(&di);
            }
        }
    }
    out
}

/// Enumerate the full automorphism group as transports, budgeted.
fn m_aut_elements<'a>(
    g: &'a Multigraph,
    auts: &MgAutGroup,
    flip: &[u8],
) -> Result<Vec<MTransport<'a>>, Error> {
    if auts.order as usize > AUT_BUDGET {
        return Err(Error::ResourceBound {
            what: format!("multigraph automorphisms of {}", g.debug_string()),
            size: auts.order as usize,
            budget: AUT_BUDGET,
        });
    }
    let mut out: Vec<MTransport> = Vec::new();
    // vertex part with by-rank matching
    let mut base: Vec<MTransport> = Vec::new();
    for p in &auts.vertex_auts {
        base.push(MTransport::by_rank(g, g, p.clone(), flip));
    }
    // local part: parallel-class permutations and loop flips composed on top
    // of each base element
    for b in base {
        let mut variants: Vec<Vec<(u8, bool)>> = vec![b.emap.clone()];
        for &(start, len) in &auts.parallel_classes {
            let perms = crate::graphs::all_perms(len);
            let mut next = Vec::new();
            for emap in &variants {
                for p in &perms {
                    let mut e2 = emap.clone();
                    // permute the images within the parallel class: edge
                    // (start + k) now maps to where (start + p[k]) mapped
                    for k in 0..len {
                        e2[start + k] = emap[start + p[k] as usize];
                    }
                    next.push(e2);
                }
            }
            variants = next;
        }
        for &le in &auts.loops {
            let mut next = Vec::new();
            for emap in &variants {
                next.push(emap.clone());
                let mut e2 = emap.clone();
                e2[le].1 = !e2[le].1;
                next.push(e2);
            }
            variants = next;
        }
        for emap in variants {
            out.push(MTransport { from: g, to: g, vperm: b.vperm.clone(), emap, hair_perm: None });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cell realization
// ---------------------------------------------------------------------------

/// A predicate flagging labeled graphs killed by a monomial ideal.
pub type BadTuple<'a> = &'a dyn Fn(&Multigraph, &[VSlotPub], &[Label]) -> bool;

/// Enumerate labeled multigraph classes for the composition of an edge
/// palette with a label menu, cellwise over the window.
pub fn realize_graph_cells(
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    label_cells: &[(u8, i64)],
    window: &Window,
) -> Result<BTreeMap<(u8, i64), Vec<MgClass>>, Error> {
    realize_graph_cells_filtered(palette, menu, label_cells, window, None)
}

/// Same, with killed orbits removed from the coinvariant bases.
pub fn realize_graph_cells_filtered(
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    label_cells: &[(u8, i64)],
    window: &Window,
    bad: Option<BadTuple>,
) -> Result<BTreeMap<(u8, i64), Vec<MgClass>>, Error> {
    // vertex slot menu: (arity, weight) of nonzero label cells; slot id =
    // index into this list, encoded into vcol
    let mut slot_list: Vec<VSlotPub> = label_cells.to_vec();
    slot_list.sort_unstable();
    slot_list.dedup();
    let colors = palette.colors();
    let flip = palette.flip_table();
    let mut out: BTreeMap<(u8, i64), Vec<MgClass>> = BTreeMap::new();
    for m in 0..=window.max_out {
        // vertex menu: (color = slot id, arity)
        let vmenu: Vec<(u32, u8)> = slot_list
            .iter()
            .enumerate()
            .map(|(i, &(a, _))| (i as u32, a))
            .collect();
        let max_vertices = modular_vertex_bound(m, window.wmax);
        let max_edges = (window.wmax - window.wmin).max(0) as usize
            + max_vertices
            + m as usize;
        let classes = crate::graphs::multigraph_classes(
            m as usize,
            &vmenu,
            &colors,
            &flip,
            max_vertices,
            max_edges,
            CLASS_BUDGET,
        )?;
        for (g, auts) in classes {
            let slots: Vec<VSlotPub> =
                g.vcol.iter().map(|&c| slot_list[c as usize]).collect();
            let w: i64 = slots.iter().map(|&(_, w)| w).sum::<i64>() + g.edges.len() as i64;
            if w < window.wmin || w > window.wmax {
                continue;
            }
            build_mg_class(palette, menu, &g, &auts, &slots, (m, w), bad, &mut out)?;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn build_mg_class(
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    g: &Multigraph,
    auts: &MgAutGroup,
    slots: &[VSlotPub],
    key: (u8, i64),
    bad: Option<BadTuple>,
    out: &mut BTreeMap<(u8, i64), Vec<MgClass>>,
) -> Result<(), Error> {
    let nv = g.vcol.len();
    let mut dims = Vec::with_capacity(nv);
    for &(a, w) in slots {
        let cell = match menu.cell(a, w) {
            Some(c) => c,
            None => return Ok(()),
        };
        if cell.dim() == 0 {
            return Ok(());
        }
        dims.push(cell.dim());
    }
    let total: usize = dims.iter().product();
    if total > TUPLE_BUDGET {
        return Err(Error::ResourceBound {
            what: format!("label tuples of {}", g.debug_string()),
            size: total,
            budget: TUPLE_BUDGET,
        });
    }
    let mut tuples: Vec<Vec<Label>> = vec![Vec::new()];
    for &d in &dims {
        let mut next = Vec::with_capacity(tuples.len() * d);
        for t in &tuples {
            for i in 0..d {
                let mut t2 = t.clone();
                t2.push(i as u32);
                next.push(t2);
            }
        }
        tuples = next;
    }
    if nv == 0 {
        return Ok(());
    }
    let tuple_index: HashMap<Vec<Label>, usize> =
        tuples.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    let edge_deg: i64 = g.edges.iter().map(|&(_, _, c)| palette.edge_deg(c)).sum();
    let tuple_degs: Vec<i64> = tuples
        .iter()
        .map(|t| {
            edge_deg
                + t.iter()
                    .enumerate()
                    .map(|(v, &idx)| {
                        let (a, w) = slots[v];
                        menu.cell(a, w).unwrap().degs[idx as usize]
                    })
                    .sum::<i64>()
        })
        .collect();
    let flip = palette.flip_table();
    let elems = m_aut_elements(g, auts, &flip)?;
    let dim = tuples.len();
    let mut e = SparseMat::zero(dim, dim);
    let scale = Rat::new(1.into(), (elems.len() as i64).into());
    for tr in &elems {
        for j in 0..dim {
            let unit: BTreeMap<usize, Rat> = [(j, Rat::one())].into_iter().collect();
            let img =
                m_transport_vector(tr, palette, menu, slots, &tuples, &tuple_index, &unit);
            for (i, x) in img {
                e.add_to(i, j, x * &scale);
            }
        }
    }
    let mut coinv = e.image_basis();
    if let Some(pred) = bad {
        // drop orbits supported on killed tuples; orbits are pure because
        // the relations are stable under the automorphisms
        let mut good = Vec::new();
        for j in 0..coinv.cols {
            let col = coinv.col(j);
            let flags: Vec<bool> =
                col.keys().map(|&ti| pred(g, slots, &tuples[ti])).collect();
            if flags.iter().all(|&b| !b) {
                good.push(j);
            } else if flags.iter().any(|&b| !b) {
                return Err(Error::BadInput(
                    "monomial filter mixes killed and surviving tuples in one orbit".into(),
                ));
            }
        }
        let mut filtered = SparseMat::zero(coinv.rows, good.len());
        for (jj, &j) in good.iter().enumerate() {
            for (i, v) in coinv.col(j) {
                filtered.set(i, jj, v);
            }
        }
        coinv = filtered;
    }
    if coinv.cols == 0 {
        return Ok(());
    }
    let col_degs: Vec<i64> = (0..coinv.cols)
        .map(|j| {
            let col = coinv.col(j);
            let (&ti, _) = col.iter().next().unwrap();
            tuple_degs[ti]
        })
        .collect();
    let col_kweights: Vec<i64> = (0..coinv.cols)
        .map(|j| {
            let col = coinv.col(j);
            let (&ti, _) = col.iter().next().unwrap();
            tuples[ti]
                .iter()
                .enumerate()
                .map(|(v, &idx)| {
                    let (a, w) = slots[v];
                    menu.kweight(a, w, idx as usize)
                })
                .sum()
        })
        .collect();
    let solver = Some(ColBasisSolver::new(&coinv));
    out.entry(key).or_default().push(MgClass {
        graph: g.clone(),
        auts: auts.clone(),
        slots: slots.to_vec(),
        tuples,
        tuple_degs,
        tuple_index,
        coinv,
        solver,
        sym: e,
        col_degs,
        col_kweights,
        offset: 0,
    });
    Ok(())
}

/// Assemble the symmetric-group actions and the label differential of the
/// realized cells (no edge differential yet).
pub fn assemble_cells(
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    cells: &mut BTreeMap<(u8, i64), Vec<MgClass>>,
) -> Result<BTreeMap<(u8, i64), GradedSpace>, Error> {
    let mut spaces = BTreeMap::new();
    let keys: Vec<(u8, i64)> = cells.keys().cloned().collect();
    let flip = palette.flip_table();
    for key in keys {
        let (m, _) = key;
        {
            let classes = cells.get_mut(&key).unwrap();
            let mut off = 0;
            for c in classes.iter_mut() {
                c.offset = off;
                off += c.dim();
            }
        }
        let classes = &cells[&key];
        let dim: usize = classes.iter().map(|c| c.dim()).sum();
        if dim == 0 {
            continue;
        }
        let degs: Vec<i64> = classes.iter().flat_map(|c| c.col_degs.clone()).collect();
        // label differential (Leibniz; edges contribute no internal d for
        // monomial twists with zero differential)
        let mut diff = SparseMat::zero(dim, dim);
        for c in classes {
            let nv = c.graph.vcol.len();
            let edge_deg_prefix: i64 =
                c.graph.edges.iter().map(|&(_, _, cc)| palette.edge_deg(cc)).sum();
            for col in 0..c.dim() {
                let x = c.coinv.col(col);
                let mut image: BTreeMap<usize, Rat> = BTreeMap::new();
                for (ti, coeff) in &x {
                    let tuple = &c.tuples[*ti];
                    let mut prefix = edge_deg_prefix;
                    for v in 0..nv {
                        let (a, w) = c.slots[v];
                        let cell = menu.cell(a, w).unwrap();
                        let dcol = cell.diff.col(tuple[v] as usize);
                        if !dcol.is_empty() {
                            let sign = if prefix.rem_euclid(2) == 0 {
                                Rat::one()
                            } else {
                                -Rat::one()
                            };
                            for (r, cv) in dcol {
                                let mut t2 = tuple.clone();
                                t2[v] = r as u32;
                                let di = c.tuple_index[&t2];
                                let e = image.entry(di).or_insert_with(Rat::zero);
                                *e += coeff * &cv * &sign;
                                if e.is_zero() {
                                    image.remove(&di);
                                }
                            }
                        }
                        prefix += cell.degs[tuple[v] as usize];
                    }
                }
                let coords = c.express(&image)?;
                for (r, v) in coords {
                    diff.set(c.offset + r, c.offset + col, v);
                }
            }
        }
        // hair transposition actions
        let mut out_gens = Vec::new();
        for t in 0..m.saturating_sub(1) {
            let mut mat = SparseMat::zero(dim, dim);
            for c in classes {
                let mut g = c.graph.clone();
                g.hairs.swap(t as usize, t as usize + 1);
                let (cg, iso, _) = g.canonical(&flip);
                let target = classes
                    .iter()
                    .find(|cc| cc.graph == cg)
                    .expect("hair relabel left the class list");
                let mut sigma: Vec<u8> = (0..c.graph.hairs.len() as u8).collect();
                sigma.swap(t as usize, t as usize + 1);
                let mut tr = MTransport::by_rank(&c.graph, &cg, iso.perm.clone(), &flip);
                tr.hair_perm = Some(sigma);
                for col in 0..c.dim() {
                    let x = c.coinv.col(col);
                    let image = m_transport_vector(
                        &tr,
                        palette,
                        menu,
                        &c.slots,
                        &c.tuples,
                        &target.tuple_index,
                        &x,
                    );
                    let coords = target.express(&image)?;
                    for (r, v) in coords {
                        mat.set(target.offset + r, c.offset + col, v);
                    }
                }
            }
            out_gens.push(mat);
        }
        spaces.insert(
            key,
            GradedSpace { degs, out_gens, in_gens: Vec::new(), diff },
        );
    }
    Ok(spaces)
}



// ---------------------------------------------------------------------------
// Shared contraction machinery
// ---------------------------------------------------------------------------

/// Remove edge e of the class graph and merge its endpoints (or drop a loop),
/// returning the intermediate graph, the merged-vertex position, and the leg
/// permutation carrying the glue-result leg order onto the derived order of
/// the merged vertex.
struct ContractionPlan {
    graph: Multigraph,
    slots: Vec<VSlotPub>,
    merged_pos: usize,
    /// active leg permutation: glue-result leg k sits at derived leg π[k]
    leg_perm: Vec<u8>,
    /// legs of the removed edge at its endpoints
    p: u8,
    q: u8,
    is_loop: bool,
}

fn plan_contraction(
    g: &Multigraph,
    slots: &[VSlotPub],
    e: usize,
    merged_slot: VSlotPub,
) -> ContractionPlan {
    let (u, v, _) = g.edges[e];
    let (u, v) = (u as usize, v as usize);
    let is_loop = u == v;
    let legs_u = legs_of(g, u);
    let p = legs_u.iter().position(|&(k, i, h)| k == 1 && i as usize == e && h == 0).unwrap()
        as u8;
    let q_vert = if is_loop { u } else { v };
    let legs_q = legs_of(g, q_vert);
    let q = legs_q
        .iter()
        .position(|&(k, i, h)| k == 1 && i as usize == e && h == 1)
        .unwrap() as u8;
    // build the new graph: drop e; merge u and v at position min(u, v)
    let lo = u.min(v);
    let hi = u.max(v);
    let nv = g.vcol.len();
    let new_index = |x: usize| -> usize {
        if is_loop {
            x
        } else if x == u || x == v {
            lo
        } else if x > hi {
            x - 1
        } else {
            x
        }
    };
    let n_new = if is_loop { nv } else { nv - 1 };
    let mut vcol = vec![0u32; n_new];
    let mut slots_new = vec![(0u8, 0i64); n_new];
    for x in 0..nv {
        let nx = new_index(x);
        if !is_loop && (x == u || x == v) {
            slots_new[nx] = merged_slot;
        } else if is_loop && x == u {
            slots_new[nx] = merged_slot;
        } else {
            slots_new[nx] = slots[x];
        }
    }
    for (x, s) in slots_new.iter().enumerate() {
        let _ = x;
        let _ = s;
    }
    let mut edges = Vec::with_capacity(g.edges.len() - 1);
    let mut old_edge_new_idx = vec![usize::MAX; g.edges.len()];
    for (i, &(a, b, c)) in g.edges.iter().enumerate() {
        if i == e {
            continue;
        }
        old_edge_new_idx[i] = edges.len();
        edges.push((new_index(a as usize) as u8, new_index(b as usize) as u8, c));
    }
    let hairs: Vec<u8> = g.hairs.iter().map(|&h| new_index(h as usize) as u8).collect();
    // vcol is recomputed by the caller from slots; placeholder here
    for (x, &(a, w)) in slots_new.iter().enumerate() {
        vcol[x] = encode_slot(a, w);
    }
    let new_graph = Multigraph { vcol, edges, hairs };
    let merged_pos = new_index(u);
    // glue-result leg order: u's legs minus p, then (if not loop) v's minus q;
    // for loops: u's legs minus {p, q}
    let mut glue_order: Vec<(u8, u8, u8)> = Vec::new();
    if is_loop {
        for (i, &leg) in legs_u.iter().enumerate() {
            if i as u8 != p && i as u8 != q {
                glue_order.push(leg);
            }
        }
    } else {
        for (i, &leg) in legs_u.iter().enumerate() {
            if i as u8 != p {
                glue_order.push(leg);
            }
        }
        let legs_v = legs_of(g, v);
        for (i, &leg) in legs_v.iter().enumerate() {
            if i as u8 != q {
                glue_order.push(leg);
            }
        }
    }
    // derived order of the merged vertex in the new graph; identify each new
    // leg with its old attachment
    let derived = legs_of(&new_graph, merged_pos);
    let mut leg_perm = vec![0u8; glue_order.len()];
    let mut used = vec![false; derived.len()];
    for (k, &(kind, idx, half)) in glue_order.iter().enumerate() {
        let pos = derived
            .iter()
            .enumerate()
            .position(|(dpos, &(dk, di, dh))| {
                if used[dpos] {
                    return false;
                }
                if kind == 0 {
                    dk == 0 && di == idx
                } else {
                    let ni = old_edge_new_idx[idx as usize];
                    dk == 1 && di as usize == ni && dh == half
                }
            })
            .expect("contraction leg trace failed");
        used[pos] = true;
        leg_perm[k] = pos as u8;
    }
    ContractionPlan {
        graph: new_graph,
        slots: slots_new,
        merged_pos,
        leg_perm,
        p,
        q,
        is_loop,
    }
}


/// Leg permutation of one vertex after its graph changed: matches legs by
/// attachment (hair relabeling, edge reindexing, freed hairs turning into
/// endpoints of a new edge). Active form: old leg s ↦ returned[s].
#[allow(clippy::too_many_arguments)]
fn vertex_leg_fix(
    old_g: &Multigraph,
    new_g: &Multigraph,
    old_v: usize,
    new_v: usize,
    hair_map: &BTreeMap<u8, u8>,
    edge_map: &BTreeMap<u8, u8>,
    freed: &BTreeMap<u8, (u8, u8)>,
) -> Vec<u8> {
    let old_legs = legs_of(old_g, old_v);
    let new_legs = legs_of(new_g, new_v);
    let mut used = vec![false; new_legs.len()];
    let mut perm = vec![0u8; old_legs.len()];
    for (s, &(kind, idx, half)) in old_legs.iter().enumerate() {
        let target: (u8, u8, u8) = if kind == 0 {
            if let Some(&(ne, nh)) = freed.get(&idx) {
                (1, ne, nh)
            } else {
                (0, hair_map[&idx], 0)
            }
        } else {
            (1, edge_map[&idx], half)
        };
        let pos = new_legs
            .iter()
            .enumerate()
            .position(|(pp, &(k, i, h))| {
                !used[pp] && k == target.0 && i == target.1 && (k == 0 || h == target.2)
            })
            .expect("leg fix failed");
        used[pos] = true;
        perm[s] = pos as u8;
    }
    perm
}

fn encode_slot(a: u8, w: i64) -> u32 {
    ((a as u32) << 16) | ((w + 1024) as u32 & 0xffff)
}

/// Add the layer-0 edge-contraction differential of the bar-type complexes:
/// for each outer edge, apply the structure maps of `m` through the
/// suspension drop.
#[allow(clippy::too_many_arguments)]
fn contraction_matrix(
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    classes: &[MgClass],
    all_cells: &BTreeMap<(u8, i64), Vec<MgClass>>,
    key: (u8, i64),
    ops: &dyn GlueOps,
    layer: usize,
    kappa: bool,
) -> Result<SparseMat, Error> {
    let _ = key;
    let dim: usize = classes.iter().map(|c| c.dim()).sum();
    let mut mat = SparseMat::zero(dim, dim);
    let flip = palette.flip_table();
    for c in classes {
        let g = &c.graph;
        let ne = g.edges.len();
        let nv = g.vcol.len();
        for e in 0..ne {
            let (u, v, color) = g.edges[e];
            if palette.layer(color) != layer {
                continue;
            }
            let tc = palette.comp(color);
            let (u, v) = (u as usize, v as usize);
            let is_loop = u == v;
            // result slot: the structure-map target cell
            let (au, wu) = c.slots[u];
            let merged_slot: VSlotPub = if is_loop {
                (au - 2, wu + 1)
            } else {
                let (av, wv) = c.slots[v];
                (au + av - 2, wu + wv + 1)
            };
            let plan = plan_contraction(g, &c.slots, e, merged_slot);
            let op_mat = if is_loop {
                ops.contract(au, wu, plan.p, plan.q, tc)?
            } else {
                let (av, wv) = c.slots[v];
                ops.glue(au, wu, plan.p, av, wv, plan.q, tc)?
            };
            if op_mat.is_zero() {
                continue;
            }
            let result_cell = match menu.cell(merged_slot.0, merged_slot.1) {
                Some(cell) => cell,
                None => continue,
            };
            // leg reordering action on the result cell
            let reorder =
                perm_action_left(&result_cell.out_gens, &plan.leg_perm, result_cell.dim());
            let op_mat = reorder.mul(&op_mat);
            // target classes of the result cell key
            let w_new: i64 = plan.slots.iter().map(|&(_, w)| w).sum::<i64>()
                + plan.graph.edges.len() as i64;
            let key_new = (plan.graph.hairs.len() as u8, w_new);
            let (cg, iso, _) = plan.graph.canonical(&flip);
            let target_classes = match all_cells.get(&key_new) {
                Some(t) => t,
                None => continue,
            };
            let target = match target_classes.iter().find(|cc| cc.graph == cg) {
                Some(t) => t,
                None => continue,
            };
            for col in 0..c.dim() {
                let x = c.coinv.col(col);
                let mut acc: BTreeMap<usize, Rat> = BTreeMap::new();
                for (ti, coeff) in &x {
                    let tuple = &c.tuples[*ti];
                    // sign: reorder factors to [e, x_u, (x_v)] front
                    let mut degs: Vec<i64> = Vec::with_capacity(ne + nv);
                    for ee in 0..ne {
                        degs.push(palette.edge_deg(g.edges[ee].2));
                    }
                    for vv in 0..nv {
                        let (a, w) = c.slots[vv];
                        degs.push(menu.cell(a, w).unwrap().degs[tuple[vv] as usize]);
                    }
                    let mut front = vec![e, ne + u];
                    if !is_loop {
                        front.push(ne + v);
                    }
                    let mut perm = vec![0u8; ne + nv];
                    let mut next = front.len();
                    for (i, &f) in front.iter().enumerate() {
                        perm[f] = i as u8;
                    }
                    for i in 0..ne + nv {
                        if !front.contains(&i) {
                            perm[i] = next as u8;
                            next += 1;
                        }
                    }
                    let mut sign = koszul_sign(&degs, &perm);
                    if kappa {
                        // κ is a degree −1 operator applied at the front: no
                        // extra Koszul factor, but the suspension drop flips
                        // nothing further
                    }
                    // operator application: column index in the op matrix
                    let colidx = if is_loop {
                        tuple[u] as usize
                    } else {
                        let dim_v = {
                            let (av, wv) = c.slots[v];
                            menu.cell(av, wv).unwrap().dim()
                        };
                        tuple[u] as usize * dim_v + tuple[v] as usize
                    };
                    let result_col = op_mat.col(colidx);
                    if result_col.is_empty() {
                        continue;
                    }
                    // degree of the merged label and the sign to move it from
                    // the front back past the remaining edges and earlier
                    // labels
                    let merged_deg = palette.edge_deg(color) - if kappa { 1 } else { 0 }
                        + degs[ne + u]
                        + if is_loop { 0 } else { degs[ne + v] };
                    let mut crossing = 0i64;
                    for ee in 0..ne {
                        if ee != e {
                            crossing += degs[ee];
                        }
                    }
                    for vv in 0..plan.merged_pos.min(nv) {
                        // labels before the merged position in the NEW order:
                        // old vertices mapping below merged_pos
                        let old = old_vertex_at(nv, u, v, is_loop, vv);
                        if let Some(o) = old {
                            if o != u && o != v {
                                crossing += degs[ne + o];
                            }
                        }
                    }
                    if merged_deg.rem_euclid(2) != 0 && crossing.rem_euclid(2) != 0 {
                        sign = -sign;
                    }
                    for (r, opv) in &result_col {
                        // assemble the intermediate tuple
                        let mut t2: Vec<Label> = Vec::with_capacity(plan.slots.len());
                        for x2 in 0..plan.slots.len() {
                            if x2 == plan.merged_pos {
                                t2.push(*r as u32);
                            } else {
                                let old = old_vertex_at(nv, u, v, is_loop, x2).unwrap();
                                t2.push(tuple[old]);
                            }
                        }
                        let tr = MTransport::by_rank(&plan.graph, &cg, iso.perm.clone(), &flip);
                        let singleton = vec![t2];
                        let v0: BTreeMap<usize, Rat> =
                            [(0usize, coeff * &sign * opv)].into_iter().collect();
                        let moved = m_transport_vector(
                            &tr,
                            palette,
                            menu,
                            &plan.slots,
                            &singleton,
                            &target.tuple_index,
                            &v0,
                        );
                        let sym = m_symmetrize(target, palette, menu, &moved)?;
                        let coords = target.express(&sym)?;
                        for (rr, val) in coords {
                            let idx = target.offset + rr;
                            let entry = acc.entry(idx).or_insert_with(Rat::zero);
                            *entry += val;
                            if entry.is_zero() {
                                acc.remove(&idx);
                            }
                        }
                    }
                }
                for (r, val) in acc {
                    mat.add_to(r, c.offset + col, val);
                }
            }
        }
    }
    Ok(mat)
}

/// Old vertex index occupying new position `pos` after merging u, v (or a
/// loop at u), or None for the merged position itself.
fn old_vertex_at(nv: usize, u: usize, v: usize, is_loop: bool, pos: usize) -> Option<usize> {
    if is_loop {
        return Some(pos);
    }
    let lo = u.min(v);
    let hi = u.max(v);
    if pos == lo {
        return None;
    }
    let old = if pos < lo {
        pos
    } else if pos + 1 <= hi {
        // positions between lo and hi−1 shift by... new index: x if x < hi
        pos
    } else {
        pos + 1
    };
    // positions ≥ hi in the new graph come from old x = pos + 1
    let old = if pos >= hi { pos + 1 } else { old };
    if old == u || old == v {
        None
    } else {
        Some(old)
    }
}

fn m_symmetrize(
    c: &MgClass,
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    v: &BTreeMap<usize, Rat>,
) -> Result<BTreeMap<usize, Rat>, Error> {
    let _ = (palette, menu);
    Ok(c.sym.apply(v))
}

// ---------------------------------------------------------------------------
// Presentations and realized quotients
// ---------------------------------------------------------------------------

/// A monogene presentation: twist, prestable generators, and relations given
/// as vectors inside the one-edge cells of the free construction.
pub struct Presentation {
    pub twist: Twist,
    /// Generator cells keyed by (arity, euler weight).
    pub generators: BTreeMap<(u8, i64), GradedSpace>,
    /// Relation vectors: (arity, euler weight, coefficients over the
    /// one-edge part of the free cell, expressed in the free basis computed
    /// by `realize`). Built via [`one_edge_cell_basis`].
    pub relations: Vec<RelationVec>,
    pub name: String,
}

/// A relation: a vector in a free cell, supported on one-edge classes.
#[derive(Clone, Debug)]
pub struct RelationVec {
    pub arity: u8,
    pub weight: i64,
    pub coords: BTreeMap<usize, Rat>,
}

struct MapMenu<'a>(&'a BTreeMap<(u8, i64), ModCell>);

impl<'a> LabelMenu for MapMenu<'a> {
    fn cell(&self, arity: u8, weight: i64) -> Option<&GradedSpace> {
        self.0.get(&(arity, weight)).map(|c| &c.space)
    }

    fn kweight(&self, arity: u8, weight: i64, idx: usize) -> i64 {
        self.0.get(&(arity, weight)).map_or(0, |c| c.kweights[idx])
    }
}

/// The free modular construction on generator cells: multigraphs labeled by
/// generators with inner twist edges. Returns the classes, the assembled
/// spaces, and the generator menu used.
pub struct FreeCells {
    pub twist: Twist,
    pub palette: EdgePalette,
    pub gen_cells: BTreeMap<(u8, i64), ModCell>,
    pub classes: BTreeMap<(u8, i64), Vec<MgClass>>,
    pub spaces: BTreeMap<(u8, i64), GradedSpace>,
}

pub fn free_cells(
    twist: &Twist,
    generators: &BTreeMap<(u8, i64), GradedSpace>,
    window: &Window,
) -> Result<FreeCells, Error> {
    let palette = EdgePalette::new(twist, [false, true])?;
    let gen_cells: BTreeMap<(u8, i64), ModCell> = generators
        .iter()
        .map(|(&k, sp)| {
            (k, ModCell { space: sp.clone(), kweights: vec![0; sp.dim()] })
        })
        .collect();
    let keys: Vec<(u8, i64)> = gen_cells.keys().cloned().collect();
    let menu = MapMenu(&gen_cells);
    let mut classes = realize_graph_cells(&palette, &menu, &keys, window)?;
    let spaces = assemble_cells(&palette, &menu, &mut classes)?;
    Ok(FreeCells { twist: twist.clone(), palette, gen_cells, classes, spaces })
}

impl FreeCells {
    pub fn dim(&self, m: u8, w: i64) -> usize {
        self.spaces.get(&(m, w)).map_or(0, |s| s.dim())
    }

    /// Koszul weight (edge count) per basis element of a cell.
    pub fn kweights(&self, m: u8, w: i64) -> Vec<i64> {
        match self.classes.get(&(m, w)) {
            Some(classes) => classes
                .iter()
                .flat_map(|c| vec![c.graph.edges.len() as i64; c.dim()])
                .collect(),
            None => Vec::new(),
        }
    }

    /// Flat indices of basis columns living on one-edge classes.
    pub fn one_edge_columns(&self, m: u8, w: i64) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(classes) = self.classes.get(&(m, w)) {
            for c in classes {
                if c.graph.edges.len() == 1 {
                    for col in 0..c.dim() {
                        out.push(c.offset + col);
                    }
                }
            }
        }
        out
    }

    /// Structural gluing of two free basis elements along hairs p, q with
    /// twist component tc; result expressed in the free basis.
    #[allow(clippy::too_many_arguments)]
    pub fn glue_free(
        &self,
        a: u8,
        wa: i64,
        xi: usize,
        p: u8,
        b: u8,
        wb: i64,
        yi: usize,
        q: u8,
        tc: usize,
    ) -> Result<BTreeMap<usize, Rat>, Error> {
        let (ca, cola) = self.locate(a, wa, xi).ok_or_else(|| {
            Error::BadInput("glue_free: element out of range".into())
        })?;
        let (cb, colb) = self
            .locate(b, wb, yi)
            .ok_or_else(|| Error::BadInput("glue_free: element out of range".into()))?;
        let cla = &self.classes[&(a, wa)][ca];
        let clb = &self.classes[&(b, wb)][cb];
        let flip = self.palette.flip_table();
        let menu = MapMenu(&self.gen_cells);
        let mut out: BTreeMap<usize, Rat> = BTreeMap::new();
        for (tia, coeffa) in &cla.coinv.col(cola) {
            for (tib, coeffb) in &clb.coinv.col(colb) {
                let ta = &cla.tuples[*tia];
                let tb = &clb.tuples[*tib];
                // joined graph: a's vertices then b's; new edge appended
                let ga = &cla.graph;
                let gb = &clb.graph;
                let nva = ga.vcol.len();
                let hu = ga.hairs[p as usize] as usize;
                let hv = gb.hairs[q as usize] as usize + nva;
                let mut vcol = ga.vcol.clone();
                vcol.extend_from_slice(&gb.vcol);
                let mut edges = ga.edges.clone();
                edges.extend(
                    gb.edges.iter().map(|&(x, y, c)| (x + nva as u8, y + nva as u8, c)),
                );
                let newcolor = (self.palette.tdim + tc) as u8; // layer 1
                edges.push((hu as u8, hv as u8, newcolor));
                let mut hairs = Vec::new();
                for (h, &hv0) in ga.hairs.iter().enumerate() {
                    if h as u8 != p {
                        hairs.push(hv0);
                    }
                }
                for (h, &hv0) in gb.hairs.iter().enumerate() {
                    if h as u8 != q {
                        hairs.push(hv0 + nva as u8);
                    }
                }
                let joined = Multigraph { vcol, edges, hairs };
                let mut slots = cla.slots.clone();
                slots.extend_from_slice(&clb.slots);
                let mut tuple = ta.clone();
                tuple.extend_from_slice(tb);
                // leg fixes at the two hosts: hair p (resp. q) becomes the
                // first (resp. second) half of the appended edge
                let new_edge_idx = (ga.edges.len() + gb.edges.len()) as u8;
                let hair_map_a: BTreeMap<u8, u8> = {
                    let mut mm = BTreeMap::new();
                    let mut next = 0u8;
                    for h in 0..ga.hairs.len() as u8 {
                        if h != p {
                            mm.insert(h, next);
                            next += 1;
                        }
                    }
                    mm
                };
                let hair_map_b: BTreeMap<u8, u8> = {
                    let mut mm = BTreeMap::new();
                    let mut next = ga.hairs.len() as u8 - 1;
                    for h in 0..gb.hairs.len() as u8 {
                        if h != q {
                            mm.insert(h, next);
                            next += 1;
                        }
                    }
                    mm
                };
                let edge_map_a: BTreeMap<u8, u8> =
                    (0..ga.edges.len() as u8).map(|i| (i, i)).collect();
                let edge_map_b: BTreeMap<u8, u8> = (0..gb.edges.len() as u8)
                    .map(|i| (i, i + ga.edges.len() as u8))
                    .collect();
                let freed_a: BTreeMap<u8, (u8, u8)> =
                    [(p, (new_edge_idx, 0u8))].into_iter().collect();
                let freed_b: BTreeMap<u8, (u8, u8)> =
                    [(q, (new_edge_idx, 1u8))].into_iter().collect();
                let fix_u = vertex_leg_fix(ga, &joined, hu, hu, &hair_map_a, &edge_map_a, &freed_a);
                let fix_v = vertex_leg_fix(
                    gb,
                    &joined,
                    hv - nva,
                    hv,
                    &hair_map_b,
                    &edge_map_b,
                    &freed_b,
                );
                // the other vertices of a and b also need hair relabel fixes
                let mut fixes: Vec<(usize, Vec<u8>)> = Vec::new();
                for vv in 0..nva {
                    let f = if vv == hu {
                        fix_u.clone()
                    } else {
                        vertex_leg_fix(ga, &joined, vv, vv, &hair_map_a, &edge_map_a, &freed_a)
                    };
                    fixes.push((vv, f));
                }
                for vv in 0..gb.vcol.len() {
                    let f = if vv + nva == hv {
                        fix_v.clone()
                    } else {
                        vertex_leg_fix(
                            gb,
                            &joined,
                            vv,
                            vv + nva,
                            &hair_map_b,
                            &edge_map_b,
                            &freed_b,
                        )
                    };
                    fixes.push((vv + nva, f));
                }
                // Koszul: sequence [a-edges][a-labels][b-edges][b-labels][new]
                // reordered to [a-edges][b-edges][new][a-labels][b-labels]
                let nea = ga.edges.len();
                let neb = gb.edges.len();
                let mut degs = Vec::new();
                for &(_, _, c) in &ga.edges {
                    degs.push(self.palette.edge_deg(c));
                }
                for (vv, &(aa, ww)) in cla.slots.iter().enumerate() {
                    degs.push(menu.cell(aa, ww).unwrap().degs[ta[vv] as usize]);
                }
                for &(_, _, c) in &gb.edges {
                    degs.push(self.palette.edge_deg(c));
                }
                for (vv, &(aa, ww)) in clb.slots.iter().enumerate() {
                    degs.push(menu.cell(aa, ww).unwrap().degs[tb[vv] as usize]);
                }
                degs.push(self.palette.edge_deg(newcolor));
                let nla = cla.slots.len();
                let nlb = clb.slots.len();
                let mut perm = vec![0u8; degs.len()];
                for i in 0..nea {
                    perm[i] = i as u8;
                }
                for i in 0..nla {
                    perm[nea + i] = (nea + neb + 1 + i) as u8;
                }
                for i in 0..neb {
                    perm[nea + nla + i] = (nea + i) as u8;
                }
                for i in 0..nlb {
                    perm[nea + nla + neb + i] = (nea + neb + 1 + nla + i) as u8;
                }
                perm[nea + nla + neb + nlb] = (nea + neb) as u8;
                let sign = koszul_sign(&degs, &perm);
                // canonicalize with the new edge record LAST, labels appended
                let key = (
                    joined.hairs.len() as u8,
                    slots.iter().map(|&(_, w)| w).sum::<i64>() + joined.edges.len() as i64,
                );
                let (cg, iso, _) = joined.canonical(&flip);
                let target_classes = self.classes.get(&key).ok_or_else(|| {
                    Error::BadInput(format!("glue target cell {key:?} outside window"))
                })?;
                let target = target_classes
                    .iter()
                    .find(|cc| cc.graph == cg)
                    .ok_or_else(|| Error::BadInput("glue target class missing".into()))?;
                // expand the leg fixes into label combinations
                let mut terms: Vec<(Vec<Label>, Rat)> =
                    vec![(tuple.clone(), coeffa * coeffb * &sign)];
                for (vv, f) in &fixes {
                    let (aa, ww) = slots[*vv];
                    let cell = menu.cell(aa, ww).unwrap();
                    let mat = perm_action_left(&cell.out_gens, f, cell.dim());
                    let mut next = Vec::new();
                    for (t, cval) in &terms {
                        for (r, mv) in mat.col(t[*vv] as usize) {
                            let mut t2 = t.clone();
                            t2[*vv] = r as u32;
                            next.push((t2, cval * &mv));
                        }
                    }
                    terms = next;
                }
                let tr = MTransport::by_rank(&joined, &cg, iso.perm.clone(), &flip);
                for (t2, cval) in terms {
                    if cval.is_zero() {
                        continue;
                    }
                    let singleton = vec![t2];
                    let v0: BTreeMap<usize, Rat> = [(0usize, cval)].into_iter().collect();
                    let moved = m_transport_vector(
                        &tr,
                        &self.palette,
                        &menu,
                        &slots,
                        &singleton,
                        &target.tuple_index,
                        &v0,
                    );
                    let sym = m_symmetrize(target, &self.palette, &menu, &moved)?;
                    let coords = target.express(&sym)?;
                    for (r, val) in coords {
                        let idx = target.offset + r;
                        let e = out.entry(idx).or_insert_with(Rat::zero);
                        *e += val;
                        if e.is_zero() {
                            out.remove(&idx);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Structural self-gluing of a free basis element along hairs p < q.
    pub fn contract_free(
        &self,
        a: u8,
        wa: i64,
        xi: usize,
        p: u8,
        q: u8,
        tc: usize,
    ) -> Result<BTreeMap<usize, Rat>, Error> {
        let (ca, cola) = self
            .locate(a, wa, xi)
            .ok_or_else(|| Error::BadInput("contract_free: out of range".into()))?;
        let cla = &self.classes[&(a, wa)][ca];
        let flip = self.palette.flip_table();
        let menu = MapMenu(&self.gen_cells);
        let mut out: BTreeMap<usize, Rat> = BTreeMap::new();
        for (tia, coeffa) in &cla.coinv.col(cola) {
            let ta = &cla.tuples[*tia];
            let ga = &cla.graph;
            let hu = ga.hairs[p as usize];
            let hv = ga.hairs[q as usize];
            let newcolor = (self.palette.tdim + tc) as u8;
            let (mut eu, mut ev, mut ec) = (hu, hv, newcolor);
            let mut flip_used = false;
            if eu > ev {
                std::mem::swap(&mut eu, &mut ev);
                ec = flip[newcolor as usize];
                flip_used = true;
            }
            if eu == ev {
                let fc = flip[ec as usize];
                if fc < ec {
                    ec = fc;
                    flip_used = !flip_used;
                }
            }
            let mut edges = ga.edges.clone();
            edges.push((eu, ev, ec));
            let mut hairs = Vec::new();
            for (h, &hv0) in ga.hairs.iter().enumerate() {
                if h as u8 != p && h as u8 != q {
                    hairs.push(hv0);
                }
            }
            let joined = Multigraph { vcol: ga.vcol.clone(), edges, hairs };
            // leg fixes: hairs p, q become the two halves of the new edge;
            // the stored reading has the p-leg first unless flipped
            let new_edge_idx = ga.edges.len() as u8;
            let hair_map: BTreeMap<u8, u8> = {
                let mut mm = BTreeMap::new();
                let mut next = 0u8;
                for h in 0..ga.hairs.len() as u8 {
                    if h != p && h != q {
                        mm.insert(h, next);
                        next += 1;
                    }
                }
                mm
            };
            let edge_map: BTreeMap<u8, u8> =
                (0..ga.edges.len() as u8).map(|i| (i, i)).collect();
            let (hp, hq) = if flip_used { (1u8, 0u8) } else { (0u8, 1u8) };
            let freed: BTreeMap<u8, (u8, u8)> =
                [(p, (new_edge_idx, hp)), (q, (new_edge_idx, hq))].into_iter().collect();
            let fixes: Vec<(usize, Vec<u8>)> = (0..ga.vcol.len())
                .map(|vv| {
                    (vv, vertex_leg_fix(ga, &joined, vv, vv, &hair_map, &edge_map, &freed))
                })
                .collect();
            // Koszul: new edge appended after [edges][labels] then moved to
            // the edge block
            let nea = ga.edges.len();
            let nla = cla.slots.len();
            let mut degs = Vec::new();
            for &(_, _, c) in &ga.edges {
                degs.push(self.palette.edge_deg(c));
            }
            for (vv, &(aa, ww)) in cla.slots.iter().enumerate() {
                degs.push(menu.cell(aa, ww).unwrap().degs[ta[vv] as usize]);
            }
            degs.push(self.palette.edge_deg(newcolor));
            let mut perm = vec![0u8; degs.len()];
            for i in 0..nea {
                perm[i] = i as u8;
            }
            for i in 0..nla {
                perm[nea + i] = (nea + 1 + i) as u8;
            }
            perm[nea + nla] = nea as u8;
            let mut sign = koszul_sign(&degs, &perm);
            if flip_used {
                sign *= self.palette.flip_sign(newcolor);
            }
            let key = (
                joined.hairs.len() as u8,
                cla.slots.iter().map(|&(_, w)| w).sum::<i64>() + joined.edges.len() as i64,
            );
            let (cg, iso, _) = joined.canonical(&flip);
            let target_classes = self.classes.get(&key).ok_or_else(|| {
                Error::BadInput(format!("contract target cell {key:?} outside window"))
            })?;
            let target = target_classes
                .iter()
                .find(|cc| cc.graph == cg)
                .ok_or_else(|| Error::BadInput("contract target class missing".into()))?;
            let tr = MTransport::by_rank(&joined, &cg, iso.perm.clone(), &flip);
            let mut terms: Vec<(Vec<Label>, Rat)> = vec![(ta.clone(), coeffa * &sign)];
            for (vv, f) in &fixes {
                let (aa, ww) = cla.slots[*vv];
                let cell = menu.cell(aa, ww).unwrap();
                let mat = perm_action_left(&cell.out_gens, f, cell.dim());
                let mut next = Vec::new();
                for (t, cval) in &terms {
                    for (r, mv) in mat.col(t[*vv] as usize) {
                        let mut t2 = t.clone();
                        t2[*vv] = r as u32;
                        next.push((t2, cval * &mv));
                    }
                }
                terms = next;
            }
            for (t2, cval) in terms {
                if cval.is_zero() {
                    continue;
                }
                let singleton = vec![t2];
                let v0: BTreeMap<usize, Rat> = [(0usize, cval)].into_iter().collect();
                let moved = m_transport_vector(
                    &tr,
                    &self.palette,
                    &menu,
                    &cla.slots,
                    &singleton,
                    &target.tuple_index,
                    &v0,
                );
                let sym = m_symmetrize(target, &self.palette, &menu, &moved)?;
                let coords = target.express(&sym)?;
                for (r, val) in coords {
                    let idx = target.offset + r;
                    let e = out.entry(idx).or_insert_with(Rat::zero);
                    *e += val;
                    if e.is_zero() {
                        out.remove(&idx);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn locate(&self, m: u8, w: i64, flat: usize) -> Option<(usize, usize)> {
        let classes = self.classes.get(&(m, w))?;
        let mut rest = flat;
        for (ci, c) in classes.iter().enumerate() {
            if rest < c.dim() {
                return Some((ci, rest));
            }
            rest -= c.dim();
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Realized quotient operads
// ---------------------------------------------------------------------------

/// The data of a presentation quotient: free cells, the ideal, and the
/// quotient coordinates.
pub struct RealizedOps {
    pub free: FreeCells,
    /// Per cell: quotient section (free columns forming a complement of the
    /// ideal) and the reduction solver over [section | ideal-basis].
    quotient: BTreeMap<(u8, i64), QuotientCell>,
}

struct QuotientCell {
    section: Vec<usize>,
    reducer: Option<ColBasisSolver>,
    /// kweight per quotient basis element.
    kweights: Vec<i64>,
    degs: Vec<i64>,
}

impl RealizedOps {
    fn reduce(&self, m: u8, w: i64, free_vec: &BTreeMap<usize, Rat>) -> BTreeMap<usize, Rat> {
        let q = match self.quotient.get(&(m, w)) {
            Some(q) => q,
            None => return BTreeMap::new(),
        };
        match &q.reducer {
            Some(solver) => {
                let coords = solver.express(free_vec).expect("reduction failed");
                coords.into_iter().filter(|(i, _)| *i < q.section.len()).collect()
            }
            None => BTreeMap::new(),
        }
    }

    fn lift(&self, m: u8, w: i64, idx: usize) -> usize {
        self.quotient[&(m, w)].section[idx]
    }

    pub fn quotient_dim(&self, m: u8, w: i64) -> usize {
        self.quotient.get(&(m, w)).map_or(0, |q| q.section.len())
    }
}

impl GlueOps for RealizedOps {
    fn glue(
        &self,
        a: u8,
        wa: i64,
        p: u8,
        b: u8,
        wb: i64,
        q: u8,
        tc: usize,
    ) -> Result<SparseMat, Error> {
        let da = self.quotient_dim(a, wa);
        let db = self.quotient_dim(b, wb);
        let (m2, w2) = (a + b - 2, wa + wb + 1);
        let dr = self.quotient_dim(m2, w2);
        let mut mat = SparseMat::zero(dr, da * db);
        for x in 0..da {
            for y in 0..db {
                let fv = self.free.glue_free(
                    a,
                    wa,
                    self.lift(a, wa, x),
                    p,
                    b,
                    wb,
                    self.lift(b, wb, y),
                    q,
                    tc,
                )?;
                let red = self.reduce(m2, w2, &fv);
                for (r, v) in red {
                    mat.set(r, x * db + y, v);
                }
            }
        }
        Ok(mat)
    }

    fn contract(&self, a: u8, wa: i64, p: u8, q: u8, tc: usize) -> Result<SparseMat, Error> {
        let da = self.quotient_dim(a, wa);
        let (m2, w2) = (a - 2, wa + 1);
        let dr = self.quotient_dim(m2, w2);
        let mut mat = SparseMat::zero(dr, da);
        for x in 0..da {
            let fv = self.free.contract_free(a, wa, self.lift(a, wa, x), p, q, tc)?;
            let red = self.reduce(m2, w2, &fv);
            for (r, v) in red {
                mat.set(r, x, v);
            }
        }
        Ok(mat)
    }
}

/// Realize a presentation as a modular operad within the window: the free
/// construction modulo the ideal generated by the relations. Every ideal
/// element is a graph with one marked one-edge sub-pattern carrying a
/// relation, so the ideal of each cell is assembled by local surgery:
/// replace the pattern at every edge of every class by every relation term,
/// with arbitrary labels elsewhere.
pub fn realize(pres: &Presentation, window: &Window) -> Result<ModularOperad, Error> {
    for (&(m, w), _) in &pres.generators {
        if w < -1 || (w == -1 && m <= 2) {
            return Err(Error::BadInput(format!(
                "presentation not prestable: generator at ({m},{w})"
            )));
        }
    }
    // the ideal is local to each cell, so the free cover is only needed on
    // the requested window (extended to cover the relation cells)
    let mut win = *window;
    for r in &pres.relations {
        win.max_out = win.max_out.max(r.arity);
        win.wmin = win.wmin.min(r.weight);
        win.wmax = win.wmax.max(r.weight);
    }
    for &(a, w) in pres.generators.keys() {
        win.max_out = win.max_out.max(a);
        win.wmin = win.wmin.min(w);
        win.wmax = win.wmax.max(w);
    }
    let free = free_cells(&pres.twist, &pres.generators, &win)?;
    // symmetrize the relation spans cellwise (Σ-closure on ingestion)
    let mut rel_span: BTreeMap<(u8, i64), Vec<BTreeMap<usize, Rat>>> = BTreeMap::new();
    for r in &pres.relations {
        let key = (r.arity, r.weight);
        let sp = match free.spaces.get(&key) {
            Some(sp) => sp,
            None => continue,
        };
        let mut frontier = vec![r.coords.clone()];
        let mut seen = rel_span.entry(key).or_default();
        let mut rank = {
            let dim = sp.dim();
            let mut mat = SparseMat::zero(dim, seen.len());
            for (j, v) in seen.iter().enumerate() {
                for (&i, x) in v {
                    mat.set(i, j, x.clone());
                }
            }
            mat.rank()
        };
        while let Some(v) = frontier.pop() {
            let dim = sp.dim();
            let mut mat = SparseMat::zero(dim, seen.len() + 1);
            for (j, x) in seen.iter().enumerate() {
                for (&i, y) in x {
                    mat.set(i, j, y.clone());
                }
            }
            for (&i, y) in &v {
                mat.set(i, seen.len(), y.clone());
            }
            if mat.rank() > rank {
                rank += 1;
                for g in &sp.out_gens {
                    frontier.push(g.apply(&v));
                }
                seen.push(v);
            }
        }
        let _ = &mut seen;
    }
    // ideal per cell by surgery
    let keys: Vec<(u8, i64)> = free.spaces.keys().cloned().collect();
    let mut ideal: BTreeMap<(u8, i64), Vec<BTreeMap<usize, Rat>>> = BTreeMap::new();
    let menu = MapMenu(&free.gen_cells);
    let flip = free.palette.flip_table();
    for key in &keys {
        let classes = &free.classes[key];
        let mut vecs: Vec<BTreeMap<usize, Rat>> = Vec::new();
        for c in classes {
            let g = &c.graph;
            for e in 0..g.edges.len() {
                surgery_insert(
                    &free, &menu, &flip, c, e, &rel_span, classes, &mut vecs,
                )?;
            }
        }
        if !vecs.is_empty() {
            ideal.insert(*key, vecs);
        }
    }
    // quotient cells
    let mut quotient = BTreeMap::new();
    let mut cells = BTreeMap::new();
    for key in &keys {
        let dim = free.dim(key.0, key.1);
        if dim == 0 {
            continue;
        }
        let sp = &free.spaces[key];
        let empty = Vec::new();
        let vecs = ideal.get(key).unwrap_or(&empty);
        let mut imat = SparseMat::zero(dim, vecs.len());
        for (j, v) in vecs.iter().enumerate() {
            for (&i, x) in v {
                imat.set(i, j, x.clone());
            }
        }
        let ibasis = imat.image_basis();
        let mut have = ibasis.clone();
        let mut have_rank = have.rank();
        let mut section = Vec::new();
        for i in 0..dim {
            if have_rank == dim {
                break;
            }
            let mut cand = SparseMat::zero(dim, 1);
            cand.set(i, 0, Rat::one());
            let trial = SparseMat::hcat(&[&have, &cand]);
            let r = trial.rank();
            if r > have_rank {
                have = trial;
                have_rank = r;
                section.push(i);
            }
        }
        let mut smat = SparseMat::zero(dim, section.len());
        for (j, &i) in section.iter().enumerate() {
            smat.set(i, j, Rat::one());
        }
        let reducer = if section.is_empty() && ibasis.cols == 0 {
            None
        } else {
            Some(ColBasisSolver::new(&SparseMat::hcat(&[&smat, &ibasis])))
        };
        let free_kw = free.kweights(key.0, key.1);
        let kweights: Vec<i64> = section.iter().map(|&i| free_kw[i]).collect();
        let degs: Vec<i64> = section.iter().map(|&i| sp.degs[i]).collect();
        quotient.insert(
            *key,
            QuotientCell { section: section.clone(), reducer, kweights, degs },
        );
    }
    let ops = RealizedOps { free, quotient };
    for key in &keys {
        let q = match ops.quotient.get(key) {
            Some(q) => q,
            None => continue,
        };
        if q.section.is_empty() {
            continue;
        }
        let sp = &ops.free.spaces[key];
        let qd = q.section.len();
        let induce = |g: &SparseMat| -> SparseMat {
            let mut mat = SparseMat::zero(qd, qd);
            for (j, &i) in q.section.iter().enumerate() {
                let red = ops.reduce(key.0, key.1, &g.col(i));
                for (r, v) in red {
                    mat.set(r, j, v);
                }
            }
            mat
        };
        let out_gens: Vec<SparseMat> = sp.out_gens.iter().map(&induce).collect();
        let diff = induce(&sp.diff);
        cells.insert(
            *key,
            ModCell {
                space: GradedSpace { degs: q.degs.clone(), out_gens, in_gens: Vec::new(), diff },
                kweights: q.kweights.clone(),
            },
        );
    }
    Ok(ModularOperad {
        twist: pres.twist.clone(),
        cells,
        ops: Rc::new(ops),
        name: pres.name.clone(),
    })
}

/// Replace the one-edge pattern at edge e of class c by every relation term
/// with every far labeling, accumulating the symmetrized ideal vectors.
#[allow(clippy::too_many_arguments)]
fn surgery_insert(
    free: &FreeCells,
    menu: &MapMenu,
    flip: &[u8],
    c: &MgClass,
    e: usize,
    rel_span: &BTreeMap<(u8, i64), Vec<BTreeMap<usize, Rat>>>,
    cell_classes: &[MgClass],
    out: &mut Vec<BTreeMap<usize, Rat>>,
) -> Result<(), Error> {
    let g = &c.graph;
    let (u, v, _) = g.edges[e];
    let (u, v) = (u as usize, v as usize);
    let is_loop = u == v;
    // the local one-edge cell
    let (au, wu) = c.slots[u];
    let (a_loc, w_loc) = if is_loop {
        (au - 2, wu + 1)
    } else {
        let (av, wv) = c.slots[v];
        (au + av - 2, wu + wv + 1)
    };
    let rels = match rel_span.get(&(a_loc, w_loc)) {
        Some(r) => r,
        None => return Ok(()),
    };
    if rels.is_empty() {
        return Ok(());
    }
    // far legs of the local pattern, in glue order (u's legs minus its
    // e-endpoints, then v's): each entry is the ambient attachment
    let plan = plan_contraction(g, &c.slots, e, (a_loc, w_loc));
    // plan.leg_perm maps glue-order far legs to the derived legs of the
    // merged vertex of plan.graph; the merged vertex's derived legs will be
    // replaced by the relation term's hairs. Far labelings: all labelings of
    // the other vertices of plan.graph.
    let kept: Vec<usize> =
        (0..plan.slots.len()).filter(|&x| x != plan.merged_pos).collect();
    let mut far_options: Vec<usize> = Vec::new();
    for &x in &kept {
        let (a, w) = plan.slots[x];
        far_options.push(menu.cell(a, w).map_or(0, |cc| cc.dim()));
    }
    let total: usize = far_options.iter().product::<usize>().max(1);
    if total > TUPLE_BUDGET {
        return Err(Error::ResourceBound {
            what: "relation surgery far labels".into(),
            size: total,
            budget: TUPLE_BUDGET,
        });
    }
    // relation term expansion: vectors in the one-edge cell basis expand to
    // (one-edge class, tuple, coeff)
    let rel_classes = &free.classes[&(a_loc, w_loc)];
    let mut far = vec![0usize; kept.len()];
    loop {
        for rho in rels {
            let mut acc: BTreeMap<usize, Rat> = BTreeMap::new();
            for (&flat, rc) in rho {
                let (ci2, col2) = free.locate(a_loc, w_loc, flat).unwrap();
                let c2 = &rel_classes[ci2];
                if c2.graph.edges.len() != 1 {
                    return Err(Error::BadInput(
                        "relation vector not supported on one-edge classes".into(),
                    ));
                }
                for (ti2, c2coeff) in &c2.coinv.col(col2) {
                    let t2 = &c2.tuples[*ti2];
                    splice_relation_term(
                        free,
                        menu,
                        flip,
                        c,
                        e,
                        &plan,
                        &kept,
                        &far,
                        c2,
                        t2,
                        &(rc * c2coeff),
                        cell_classes,
                        &mut acc,
                    )?;
                }
            }
            if !acc.is_empty() {
                out.push(acc);
            }
        }
        // advance far labels
        let mut k = 0;
        loop {
            if k == kept.len() {
                return Ok(());
            }
            far[k] += 1;
            if far[k] < far_options[k] {
                break;
            }
            far[k] = 0;
            k += 1;
        }
        if kept.is_empty() {
            return Ok(());
        }
    }
}

/// Build the graph with the relation term plugged in at the excised pattern
/// and express it in the cell basis.
#[allow(clippy::too_many_arguments)]
fn splice_relation_term(
    free: &FreeCells,
    menu: &MapMenu,
    flip: &[u8],
    c: &MgClass,
    e: usize,
    plan: &ContractionPlan,
    kept: &[usize],
    far: &[usize],
    c2: &MgClass,
    t2: &[Label],
    coeff: &Rat,
    cell_classes: &[MgClass],
    acc: &mut BTreeMap<usize, Rat>,
) -> Result<(), Error> {
    let g = &c.graph;
    let (u, v, _) = g.edges[e];
    let (u, v) = (u as usize, v as usize);
    let is_loop = u == v;
    let nv = g.vcol.len();
    // result graph: kept vertices of plan.graph (minus the merged one) plus
    // c2's vertices appended; edges: plan.graph's edges with endpoints at
    // the merged position rerouted through c2's hairs, plus c2's edge
    let n_kept = kept.len();
    let kept_index: HashMap<usize, usize> =
        kept.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let off2 = n_kept;
    let mut vcol: Vec<u32> = kept.iter().map(|&x| plan.graph.vcol[x]).collect();
    vcol.extend_from_slice(&c2.graph.vcol);
    let mut slots: Vec<VSlotPub> = kept.iter().map(|&x| plan.slots[x]).collect();
    slots.extend_from_slice(&c2.slots);
    // the merged vertex's derived legs, in order, correspond through
    // plan.leg_perm⁻¹ to glue-order far legs, which match c2's hairs 0..
    let merged_legs = legs_of(&plan.graph, plan.merged_pos);
    let mut inv_perm = vec![0u8; plan.leg_perm.len()];
    for (k, &p2) in plan.leg_perm.iter().enumerate() {
        inv_perm[p2 as usize] = k as u8;
    }
    // c2 hair k attaches at c2 vertex c2.graph.hairs[k]
    let mut edges: Vec<(u8, u8, u8)> = Vec::new();
    let mut edge_src: Vec<Option<usize>> = Vec::new(); // original plan edge idx
    // plan.graph edges, rerouting merged endpoints
    for (ei, &(a, b, col)) in plan.graph.edges.iter().enumerate() {
        let mut ends = [(a as usize, 0u8), (b as usize, 1u8)];
        let mut resolved: Vec<u8> = Vec::with_capacity(2);
        for &mut (x, half) in &mut ends {
            if x == plan.merged_pos {
                // which derived leg of the merged vertex is this endpoint?
                let pos = merged_legs
                    .iter()
                    .position(|&(k, i, h)| k == 1 && i as usize == ei && h == half)
                    .expect("merged endpoint leg missing");
                let glue_leg = inv_perm[pos] as usize;
                let host = c2.graph.hairs[glue_leg] as usize;
                resolved.push((off2 + host) as u8);
            } else {
                resolved.push(kept_index[&x] as u8);
            }
        }
        edges.push((resolved[0], resolved[1], col));
        edge_src.push(Some(ei));
    }
    // c2's single edge
    let (x2, y2, col2) = c2.graph.edges[0];
    edges.push(((off2 + x2 as usize) as u8, (off2 + y2 as usize) as u8, col2));
    edge_src.push(None);
    // hairs: plan.graph hairs; those at the merged vertex reroute through c2
    let mut hairs: Vec<u8> = Vec::with_capacity(plan.graph.hairs.len());
    for (h, &hv) in plan.graph.hairs.iter().enumerate() {
        if hv as usize == plan.merged_pos {
            let pos = merged_legs
                .iter()
                .position(|&(k, i, _)| k == 0 && i as usize == h)
                .unwrap();
            let glue_leg = inv_perm[pos] as usize;
            let host = c2.graph.hairs[glue_leg] as usize;
            hairs.push((off2 + host) as u8);
        } else {
            hairs.push(kept_index[&(hv as usize)] as u8);
        }
    }
    // normalize edge records (u ≤ v with flips)
    let mut flip_sign = Rat::one();
    for rec in edges.iter_mut() {
        if rec.0 > rec.1 {
            let cflip = flip[rec.2 as usize];
            *rec = (rec.1, rec.0, cflip);
            flip_sign *= free.palette.flip_sign(rec.2);
            // sign accounting: flipping the stored reading of an edge whose
            // label transport sign is ±1; the perm-matching later treats the
            // stored form as given
        }
        if rec.0 == rec.1 {
            let cflip = flip[rec.2 as usize];
            if cflip < rec.2 {
                flip_sign *= free.palette.flip_sign(rec.2);
                rec.2 = cflip;
            }
        }
    }
    let result = Multigraph { vcol, edges, hairs };
    // tuple: kept labels from `far`, c2 labels from t2, with the leg fixes:
    // c2's vertices keep their leg orders? Their hairs become ambient
    // attachments; match by attachment identity.
    // Build leg fixes for c2's vertices: old legs (c2 graph) vs result legs.
    let mut terms: Vec<(Vec<Label>, Rat)> = {
        let mut t = vec![0u32; slots.len()];
        for (i, &x) in kept.iter().enumerate() {
            let _ = x;
            t[i] = far[i] as u32;
        }
        for (i, &l) in t2.iter().enumerate() {
            t[off2 + i] = l;
        }
        vec![(t, coeff * &flip_sign)]
    };
    for v2 in 0..c2.graph.vcol.len() {
        // old legs of v2 in c2: hairs (by hair label k) and its edge ends;
        // new legs in `result`: matched by: hair k ↦ the rerouted ambient
        // attachment; edge 0 ↦ the appended edge record
        let old_legs = legs_of(&c2.graph, v2);
        let new_legs = legs_of(&result, off2 + v2);
        let mut used = vec![false; new_legs.len()];
        let mut perm = vec![0u8; old_legs.len()];
        for (s, &(kind, idx, half)) in old_legs.iter().enumerate() {
            let target: (u8, u8, u8) = if kind == 0 {
                // c2 hair idx ↦ glue-leg idx ↦ merged derived leg
                let pos = plan.leg_perm[idx as usize] as usize;
                let (mk, mi, mh) = merged_legs[pos];
                if mk == 0 {
                    // ambient hair mi: its final index in `result` hairs
                    (0, mi, 0)
                } else {
                    // ambient edge end: edge mi of plan.graph = record mi
                    // in `result` (same position), half mh — but the record
                    // may have been flip-normalized; find by matching the
                    // actual endpoint vertex
                    let _ = mh;
                    (2, mi, mh)
                }
            } else {
                // c2's edge
                (3, 0, half)
            };
            let pos = new_legs
                .iter()
                .enumerate()
                .position(|(pp, &(k2, i2, h2))| {
                    if used[pp] {
                        return false;
                    }
                    match target.0 {
                        0 => k2 == 0 && i2 == target.1,
                        2 => {
                            // ambient edge record target.1; half may have
                            // flipped during normalization: accept the end
                            // belonging to this vertex
                            k2 == 1 && i2 == target.1 && {
                                let (ea, eb, _) = result.edges[i2 as usize];
                                if ea == eb {
                                    true
                                } else if h2 == 0 {
                                    ea as usize == off2 + v2
                                } else {
                                    eb as usize == off2 + v2
                                }
                            }
                        }
                        _ => {
                            // the appended c2 edge: last record
                            let last = (result.edges.len() - 1) as u8;
                            k2 == 1 && i2 == last && {
                                let (ea, eb, _) = result.edges[last as usize];
                                if ea == eb {
                                    // loop: match halves up to the stored flip
                                    h2 == target.2
                                        || result.edges[last as usize].2
                                            != c2.graph.edges[0].2
                                } else if target.2 == 0 {
                                    (ea as usize == off2 + x2 as usize) == (h2 == 0)
                                } else {
                                    (eb as usize == off2 + y2 as usize) == (h2 == 1)
                                }
                            }
                        }
                    }
                })
                .expect("relation splice leg fix failed");
            used[pos] = true;
            perm[s] = pos as u8;
        }
        let (aa, ww) = c2.slots[v2];
        let cell = menu.cell(aa, ww).unwrap();
        let mat = perm_action_left(&cell.out_gens, &perm, cell.dim());
        let mut next = Vec::new();
        for (t, cval) in &terms {
            for (r, mv) in mat.col(t[off2 + v2] as usize) {
                let mut tt = t.clone();
                tt[off2 + v2] = r as u32;
                next.push((tt, cval * &mv));
            }
        }
        terms = next;
    }
    let _ = (nv, is_loop, u, v, edge_src);
    // canonical transport and expression
    let key = (result.hairs.len() as u8, cell_weight(&result, &slots));
    let (cg, iso, _) = result.canonical(flip);
    let target = match cell_classes.iter().find(|cc| cc.graph == cg) {
        Some(t) => t,
        None => return Ok(()),
    };
    debug_assert_eq!(key, (c.graph.hairs.len() as u8, cell_weight(g, &c.slots)));
    let tr = MTransport::by_rank(&result, &cg, iso.perm.clone(), flip);
    for (t, cval) in terms {
        if cval.is_zero() {
            continue;
        }
        let singleton = vec![t];
        let v0: BTreeMap<usize, Rat> = [(0usize, cval)].into_iter().collect();
        let moved = m_transport_vector(
            &tr,
            &free.palette,
            menu,
            &slots,
            &singleton,
            &target.tuple_index,
            &v0,
        );
        let sym = m_symmetrize(target, &free.palette, menu, &moved)?;
        let coords = target.express(&sym)?;
        for (r, val) in coords {
            let idx = target.offset + r;
            let entry = acc.entry(idx).or_insert_with(Rat::zero);
            *entry += val;
            if entry.is_zero() {
                acc.remove(&idx);
            }
        }
    }
    Ok(())
}

/// The free modular operad on generators (empty relations).
pub fn free_modular(
    twist: &Twist,
    generators: &BTreeMap<(u8, i64), GradedSpace>,
    window: &Window,
    name: &str,
) -> Result<ModularOperad, Error> {
    realize(
        &Presentation {
            twist: twist.clone(),
            generators: generators.clone(),
            relations: Vec::new(),
            name: name.into(),
        },
        window,
    )
}

// ---------------------------------------------------------------------------
// Endomorphism, grading, duals
// ---------------------------------------------------------------------------

/// Structure maps of the fully collapsed operad: one-dimensional cells
/// (a, −1) for a ≥ 3, trivial actions, gluing with coefficient one and all
/// contractions zero.
pub struct CollapsedOps {
    pub max_arity: u8,
}

impl GlueOps for CollapsedOps {
    fn glue(
        &self,
        a: u8,
        wa: i64,
        _p: u8,
        b: u8,
        wb: i64,
        _q: u8,
        _tc: usize,
    ) -> Result<SparseMat, Error> {
        let dr = if wa == -1 && wb == -1 && a >= 3 && b >= 3 && a + b - 2 <= self.max_arity {
            1
        } else {
            0
        };
        let da = usize::from(wa == -1 && a >= 3);
        let db = usize::from(wb == -1 && b >= 3);
        let mut m = SparseMat::zero(dr, da * db);
        if dr == 1 && da * db == 1 {
            m.set(0, 0, Rat::one());
        }
        Ok(m)
    }

    fn contract(&self, a: u8, wa: i64, _p: u8, _q: u8, _tc: usize) -> Result<SparseMat, Error> {
        let da = usize::from(wa == -1 && a >= 3);
        Ok(SparseMat::zero(0, da))
    }
}

/// The collapsed operad on the closure of the window: the large-window form
/// of the one-generator fully-identified quotient, cross-validated against
/// [`builtin_com`] on small windows.
pub fn builtin_com_large(window: &Window) -> Result<ModularOperad, Error> {
    let mut cells = BTreeMap::new();
    for a in 3..=window.max_out {
        if window.wmin <= -1 && window.wmax >= -1 {
            cells.insert(
                (a, -1i64),
                ModCell {
                    space: GradedSpace::trivial(1, a, 0, 0),
                    kweights: vec![a as i64 - 3],
                },
            );
        }
    }
    Ok(ModularOperad {
        twist: Twist::one(),
        cells,
        ops: Rc::new(CollapsedOps { max_arity: window.max_out }),
        name: "com".into(),
    })
}

/// Endomorphism structure on tensor powers of a graded space: contraction
/// and gluing evaluate bilinear pairings on the chosen legs. The pairing
/// span must be swap-stable; its Σ₂-type is the twist.
pub struct EndoOps {
    pub vdim: usize,
    pub vdegs: Vec<i64>,
    /// One pairing matrix per twist component: f[tc][(i, j)] = f_tc(e_i, e_j).
    pub pairings: Vec<SparseMat>,
    /// Weight-graded wrapper bound (grade functor): cells exist for all
    /// weights ≥ −1 except the prestability-forbidden ones.
    pub graded: bool,
}

impl EndoOps {
    fn tensor_dim(&self, a: u8) -> usize {
        self.vdim.pow(a as u32)
    }

    fn decode(&self, a: u8, idx: usize) -> Vec<usize> {
        let mut out = vec![0usize; a as usize];
        let mut rest = idx;
        for k in (0..a as usize).rev() {
            out[k] = rest % self.vdim;
            rest /= self.vdim;
        }
        out
    }

    fn encode(&self, t: &[usize]) -> usize {
        t.iter().fold(0usize, |acc, &i| acc * self.vdim + i)
    }

    fn deg_of(&self, t: &[usize]) -> i64 {
        t.iter().map(|&i| self.vdegs[i]).sum()
    }
}

impl GlueOps for EndoOps {
    fn glue(
        &self,
        a: u8,
        _wa: i64,
        p: u8,
        b: u8,
        _wb: i64,
        q: u8,
        tc: usize,
    ) -> Result<SparseMat, Error> {
        let da = self.tensor_dim(a);
        let db = self.tensor_dim(b);
        let dr = self.tensor_dim(a + b - 2);
        let f = &self.pairings[tc];
        let mut mat = SparseMat::zero(dr, da * db);
        for x in 0..da {
            let tx = self.decode(a, x);
            for y in 0..db {
                let ty = self.decode(b, y);
                let val = f.get(tx[p as usize], ty[q as usize]);
                if val.is_zero() {
                    continue;
                }
                // Koszul: move the two paired factors to the front of their
                // respective tensors
                let mut sign = Rat::one();
                let before_p: i64 = tx[..p as usize].iter().map(|&i| self.vdegs[i]).sum();
                let fdeg = -(self.vdegs[tx[p as usize]] + self.vdegs[ty[q as usize]]);
                let _ = fdeg;
                if self.vdegs[tx[p as usize]].rem_euclid(2) != 0 && before_p.rem_euclid(2) != 0 {
                    sign = -sign;
                }
                let between: i64 = tx[p as usize + 1..].iter().map(|&i| self.vdegs[i]).sum::<i64>()
                    + ty[..q as usize].iter().map(|&i| self.vdegs[i]).sum::<i64>();
                if self.vdegs[ty[q as usize]].rem_euclid(2) != 0 && (before_p + between).rem_euclid(2) != 0
                {
                    sign = -sign;
                }
                let mut tr: Vec<usize> = Vec::with_capacity((a + b - 2) as usize);
                for (k, &i) in tx.iter().enumerate() {
                    if k != p as usize {
                        tr.push(i);
                    }
                }
                for (k, &i) in ty.iter().enumerate() {
                    if k != q as usize {
                        tr.push(i);
                    }
                }
                mat.add_to(self.encode(&tr), x * db + y, val * sign);
            }
        }
        Ok(mat)
    }

    fn contract(&self, a: u8, _wa: i64, p: u8, q: u8, tc: usize) -> Result<SparseMat, Error> {
        let da = self.tensor_dim(a);
        let dr = self.tensor_dim(a - 2);
        let f = &self.pairings[tc];
        let mut mat = SparseMat::zero(dr, da);
        for x in 0..da {
            let tx = self.decode(a, x);
            let val = f.get(tx[p as usize], tx[q as usize]);
            if val.is_zero() {
                continue;
            }
            let mut sign = Rat::one();
            let dp = self.vdegs[tx[p as usize]];
            let dq = self.vdegs[tx[q as usize]];
            let before_p: i64 = tx[..p as usize].iter().map(|&i| self.vdegs[i]).sum();
            let between: i64 =
                tx[p as usize + 1..q as usize].iter().map(|&i| self.vdegs[i]).sum();
            if dp.rem_euclid(2) != 0 && before_p.rem_euclid(2) != 0 {
                sign = -sign;
            }
            if dq.rem_euclid(2) != 0 && (before_p + between).rem_euclid(2) != 0 {
                sign = -sign;
            }
            let mut tr: Vec<usize> = Vec::with_capacity((a - 2) as usize);
            for (k, &i) in tx.iter().enumerate() {
                if k != p as usize && k != q as usize {
                    tr.push(i);
                }
            }
            mat.add_to(self.encode(&tr), x, val * sign);
        }
        Ok(mat)
    }
}

/// The ungraded endomorphism modular operad of a graded space with pairings,
/// made weight-graded by the copying right adjoint: every weight ≥ −1 except
/// the prestability-forbidden cells, bounded by the window.
pub fn endomorphism_modular(
    vdegs: &[i64],
    pairings: Vec<SparseMat>,
    twist: &Twist,
    window: &Window,
    name: &str,
) -> Result<ModularOperad, Error> {
    let vdim = vdegs.len();
    for f in &pairings {
        if f.rows != vdim || f.cols != vdim {
            return Err(Error::BadInput("pairing shape mismatch".into()));
        }
    }
    // swap stability: the span of {fᵀ} must equal the span of {f} via the
    // twist involution; for our monomial twists each component satisfies
    // f_tc ∘ τ = Σ ι-coefficients · f_{ι(tc)}
    let (img, sign) = twist
        .monomial_invol()
        .ok_or_else(|| Error::BadInput("endomorphism twist must be monomial".into()))?;
    for (tc, f) in pairings.iter().enumerate() {
        // fᵀ with Koszul signs = ±f_{ι(tc)}
        let mut ft = SparseMat::zero(vdim, vdim);
        for i in 0..vdim {
            for (j, v) in f.col(i) {
                // swap of arguments of degrees d_i d_j
                let ks = if vdegs[i].rem_euclid(2) != 0 && vdegs[j].rem_euclid(2) != 0 {
                    -Rat::one()
                } else {
                    Rat::one()
                };
                ft.add_to(i, j, v * ks);
            }
        }
        let expect = pairings[img[tc]].scale(&if sign[tc] < 0 { -Rat::one() } else { Rat::one() });
        if ft != expect {
            return Err(Error::BadInput("pairing span is not swap-stable".into()));
        }
    }
    let ops = EndoOps { vdim, vdegs: vdegs.to_vec(), pairings, graded: true };
    let closure = crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    let mut cells = BTreeMap::new();
    for m in 0..=closure.max_out {
        let dim = ops.tensor_dim(m);
        if dim == 0 {
            continue;
        }
        let degs: Vec<i64> = (0..dim).map(|i| ops.deg_of(&ops.decode(m, i))).collect();
        // adjacent transpositions permute tensor factors with Koszul signs
        let mut out_gens = Vec::new();
        for t in 0..m.saturating_sub(1) {
            let mut g = SparseMat::zero(dim, dim);
            for x in 0..dim {
                let mut tx = ops.decode(m, x);
                let (i, j) = (tx[t as usize], tx[t as usize + 1]);
                tx.swap(t as usize, t as usize + 1);
                let s = if ops.vdegs[i].rem_euclid(2) != 0 && ops.vdegs[j].rem_euclid(2) != 0 {
                    -Rat::one()
                } else {
                    Rat::one()
                };
                g.add_to(ops.encode(&tx), x, s);
            }
            out_gens.push(g);
        }
        let space = GradedSpace {
            degs,
            out_gens,
            in_gens: Vec::new(),
            diff: SparseMat::zero(dim, dim),
        };
        for w in -1..=closure.wmax {
            if w == -1 && m <= 2 {
                continue;
            }
            cells.insert((m, w), ModCell { space: space.clone(), kweights: vec![0; dim] });
        }
    }
    Ok(ModularOperad { twist: twist.clone(), cells, ops: Rc::new(ops), name: name.into() })
}

/// Weight-copying functor for an ungraded operad already realized at a
/// single weight: used through [`endomorphism_modular`], which grades by
/// copying directly.
pub fn grade_functor(m: &ModularOperad, window: &Window) -> Result<ModularOperad, Error> {
    // cells of m must be concentrated at one weight marker (ungraded);
    // copy to every allowed weight
    let closure = crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    let mut base: BTreeMap<u8, ModCell> = BTreeMap::new();
    for (&(a, _), cell) in &m.cells {
        base.entry(a).or_insert_with(|| cell.clone());
    }
    let mut cells = BTreeMap::new();
    for (&a, cell) in &base {
        for w in -1..=closure.wmax {
            if w == -1 && a <= 2 {
                continue;
            }
            cells.insert((a, w), cell.clone());
        }
    }
    Ok(ModularOperad {
        twist: m.twist.clone(),
        cells,
        ops: m.ops.clone(),
        name: format!("graded({})", m.name),
    })
}

/// Transposed structure maps: the modular cooperad dual to an operad of
/// finite type. Degrees are negated; co-maps are the transposes of the maps
/// with the Koszul-dual sign convention.
pub struct DualOps {
    pub of: Rc<dyn GlueOps>,
    /// degree data of the predual cells, used for dualization signs
    pub predual_degs: BTreeMap<(u8, i64), Vec<i64>>,
}

impl CoglueOps for DualOps {
    fn coglue(
        &self,
        a: u8,
        wa: i64,
        p: u8,
        b: u8,
        wb: i64,
        q: u8,
        tc: usize,
    ) -> Result<SparseMat, Error> {
        Ok(self.of.glue(a, wa, p, b, wb, q, tc)?.transpose())
    }

    fn cocontract(&self, a: u8, wa: i64, p: u8, q: u8, tc: usize) -> Result<SparseMat, Error> {
        Ok(self.of.contract(a, wa, p, q, tc)?.transpose())
    }
}

/// Dual of a modular operad: a modular cooperad over the dual twist.
pub fn dualize_modular(m: &ModularOperad) -> ModularCooperad {
    let mut cells = BTreeMap::new();
    let mut predual_degs = BTreeMap::new();
    for (&k, cell) in &m.cells {
        predual_degs.insert(k, cell.space.degs.clone());
        let mut b = SigmaBimodule::new();
        b.insert(k.0, 0, k.1, cell.space.clone());
        let d = b.dualize();
        cells.insert(
            k,
            ModCell {
                space: d.cell(k.0, 0, k.1).unwrap().clone(),
                kweights: cell.kweights.clone(),
            },
        );
    }
    ModularCooperad {
        twist: m.twist.dualize(),
        cells,
        ops: Rc::new(DualOps { of: m.ops.clone(), predual_degs }),
        name: format!("dual({})", m.name),
    }
}

/// Dual of a modular cooperad: a modular operad over the dual twist.
pub struct PredualOps {
    pub of: Rc<dyn CoglueOps>,
}

impl GlueOps for PredualOps {
    fn glue(
        &self,
        a: u8,
        wa: i64,
        p: u8,
        b: u8,
        wb: i64,
        q: u8,
        tc: usize,
    ) -> Result<SparseMat, Error> {
        Ok(self.of.coglue(a, wa, p, b, wb, q, tc)?.transpose())
    }

    fn contract(&self, a: u8, wa: i64, p: u8, q: u8, tc: usize) -> Result<SparseMat, Error> {
        Ok(self.of.cocontract(a, wa, p, q, tc)?.transpose())
    }
}

pub fn dualize_modular_coop(k: &ModularCooperad) -> ModularOperad {
    let mut cells = BTreeMap::new();
    for (&key, cell) in &k.cells {
        let mut b = SigmaBimodule::new();
        b.insert(key.0, 0, key.1, cell.space.clone());
        let d = b.dualize();
        cells.insert(
            key,
            ModCell {
                space: d.cell(key.0, 0, key.1).unwrap().clone(),
                kweights: cell.kweights.clone(),
            },
        );
    }
    ModularOperad {
        twist: k.twist.dualize(),
        cells,
        ops: Rc::new(PredualOps { of: k.ops.clone() }),
        name: format!("dual({})", k.name),
    }
}

// ---------------------------------------------------------------------------
// Edge-indexed complexes: bar, cobar, resolution, Feynman transform
// ---------------------------------------------------------------------------

fn menu_of(cells: &BTreeMap<(u8, i64), ModCell>) -> MapMenu<'_> {
    MapMenu(cells)
}

/// The bar construction of a modular operad: outer (suspended) edges over
/// M-labels with the single-edge contraction differential.
pub fn modular_bar_complex(m: &ModularOperad, window: &Window) -> Result<GraphComplex, Error> {
    let closure =
        crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    let palette = EdgePalette::new(&m.twist, [true, false])?;
    let menu = menu_of(&m.cells);
    let keys: Vec<(u8, i64)> = m.cells.keys().cloned().collect();
    let mut classes = realize_graph_cells(&palette, &menu, &keys, &closure)?;
    classes.retain(|k, _| k.0 <= window.max_out && k.1 >= window.wmin && k.1 <= window.wmax);
    let mut spaces = assemble_cells(&palette, &menu, &mut classes)?;
    for (&key, sp) in spaces.iter_mut() {
        let cls = &classes[&key];
        let contr =
            contraction_matrix(&palette, &menu, cls, &classes, key, m.ops.as_ref(), 0, true)?;
        sp.diff = sp.diff.add(&contr);
    }
    let syzygy = classes
        .iter()
        .map(|(&k, cls)| (k, cls.iter().flat_map(|c| c.col_kweights.clone()).collect()))
        .collect();
    Ok(GraphComplex { palette, cells: classes, spaces, syzygy })
}

/// The two-layer resolution complex: inner edges (free part) and outer edges
/// over M-labels, with contraction of outer edges and the recoloring twist.
pub fn omega_bar_complex(m: &ModularOperad, window: &Window) -> Result<GraphComplex, Error> {
    let closure =
        crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    let palette = EdgePalette::new(&m.twist, [true, true])?;
    let menu = menu_of(&m.cells);
    let keys: Vec<(u8, i64)> = m.cells.keys().cloned().collect();
    let mut classes = realize_graph_cells(&palette, &menu, &keys, &closure)?;
    classes.retain(|k, _| k.0 <= window.max_out && k.1 >= window.wmin && k.1 <= window.wmax);
    let mut spaces = assemble_cells(&palette, &menu, &mut classes)?;
    for (&key, sp) in spaces.iter_mut() {
        let cls = &classes[&key];
        let contr =
            contraction_matrix(&palette, &menu, cls, &classes, key, m.ops.as_ref(), 0, true)?;
        let rec = recolor_matrix(&palette, &menu, cls, &classes)?;
        sp.diff = sp.diff.add(&contr).sub(&rec);
    }
    let syzygy = classes
        .iter()
        .map(|(&k, cls)| (k, cls.iter().flat_map(|c| c.col_kweights.clone()).collect()))
        .collect();
    Ok(GraphComplex { palette, cells: classes, spaces, syzygy })
}

/// The recoloring twist of the resolution complex: one outer edge becomes an
/// inner edge through the suspension drop.
fn recolor_matrix(
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    classes: &[MgClass],
    all_cells: &BTreeMap<(u8, i64), Vec<MgClass>>,
) -> Result<SparseMat, Error> {
    let dim: usize = classes.iter().map(|c| c.dim()).sum();
    let mut mat = SparseMat::zero(dim, dim);
    let flip = palette.flip_table();
    for c in classes {
        let g = &c.graph;
        let ne = g.edges.len();
        let nv = g.vcol.len();
        for e in 0..ne {
            let (u, v, color) = g.edges[e];
            if palette.layer(color) != 0 {
                continue;
            }
            let tc = palette.comp(color);
            let mut g2 = g.clone();
            g2.edges[e] = (u, v, (palette.tdim + tc) as u8);
            let key = (g2.hairs.len() as u8, cell_weight(&g2, &c.slots));
            let (cg, iso, _) = g2.canonical(&flip);
            let target_classes = match all_cells.get(&key) {
                Some(t) => t,
                None => continue,
            };
            let target = match target_classes.iter().find(|cc| cc.graph == cg) {
                Some(t) => t,
                None => continue,
            };
            // the edge-index map of the transport starts from g2's records,
            // which coincide with g's (only the color changed)
            let tr = MTransport::by_rank(&g2, &cg, iso.perm.clone(), &flip);
            for col in 0..c.dim() {
                let x = c.coinv.col(col);
                // operator of degree −1 at edge e's factor position
                let mut signed: BTreeMap<usize, Rat> = BTreeMap::new();
                for (ti, coeff) in &x {
                    let mut prefix = 0i64;
                    for ee in 0..e {
                        prefix += palette.edge_deg(g.edges[ee].2);
                    }
                    let sign = if prefix.rem_euclid(2) == 0 { Rat::one() } else { -Rat::one() };
                    let entry = signed.entry(*ti).or_insert_with(Rat::zero);
                    *entry += coeff * &sign;
                }
                let _ = nv;
                let moved = m_transport_vector(
                    &tr,
                    palette,
                    menu,
                    &c.slots,
                    &c.tuples,
                    &target.tuple_index,
                    &signed,
                );
                let sym = m_symmetrize(target, palette, menu, &moved)?;
                let coords = target.express(&sym)?;
                for (r, val) in coords {
                    mat.add_to(target.offset + r, c.offset + col, val);
                }
            }
        }
    }
    Ok(mat)
}

fn cell_weight(g: &Multigraph, slots: &[VSlotPub]) -> i64 {
    slots.iter().map(|&(_, w)| w).sum::<i64>() + g.edges.len() as i64
}

/// The cobar construction of a modular cooperad: inner edges over K-labels
/// with the vertex-splitting differential (negated).
pub fn modular_cobar_complex(
    k: &ModularCooperad,
    window: &Window,
) -> Result<GraphComplex, Error> {
    let closure =
        crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    // inner edges carry the desuspended dual twist of the cooperad side
    let tprime = Twist::r_inv().tensor(&k.twist);
    let palette = EdgePalette::new(&tprime, [false, true])?;
    let menu = menu_of(&k.cells);
    let keys: Vec<(u8, i64)> = k.cells.keys().cloned().collect();
    let mut classes = realize_graph_cells(&palette, &menu, &keys, &closure)?;
    classes.retain(|kk, _| kk.0 <= window.max_out && kk.1 >= window.wmin && kk.1 <= window.wmax);
    let mut spaces = assemble_cells(&palette, &menu, &mut classes)?;
    for (&key, sp) in spaces.iter_mut() {
        let cls = &classes[&key];
        let split = split_matrix(&palette, &menu, cls, &classes, &k.cells, k.ops.as_ref())?;
        sp.diff = sp.diff.sub(&split);
    }
    let syzygy = classes
        .iter()
        .map(|(&kk, cls)| (kk, cls.iter().flat_map(|c| c.col_kweights.clone()).collect()))
        .collect();
    Ok(GraphComplex { palette, cells: classes, spaces, syzygy })
}

/// Vertex-splitting differential: every way a label arises from a gluing or
/// a contraction, through the co-structure maps.
fn split_matrix(
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    classes: &[MgClass],
    all_cells: &BTreeMap<(u8, i64), Vec<MgClass>>,
    kcells: &BTreeMap<(u8, i64), ModCell>,
    ops: &dyn CoglueOps,
) -> Result<SparseMat, Error> {
    let dim: usize = classes.iter().map(|c| c.dim()).sum();
    let mut mat = SparseMat::zero(dim, dim);
    let flip = palette.flip_table();
    let cell_keys: Vec<(u8, i64)> = kcells.keys().cloned().collect();
    for c in classes {
        let g = &c.graph;
        let ne = g.edges.len();
        let nv = g.vcol.len();
        for v in 0..nv {
            let (alpha, omega) = c.slots[v];
            // split templates: (a1, w1) + (a2, w2) with a1 + a2 − 2 = alpha,
            // w1 + w2 + 1 = omega
            for &(a1, w1) in &cell_keys {
                for &(a2, w2) in &cell_keys {
                    if a1 as usize + a2 as usize != alpha as usize + 2 || w1 + w2 + 1 != omega {
                        continue;
                    }
                    for p in 0..a1 {
                        for q in 0..a2 {
                            for tc in 0..palette.tdim {
                                split_one(
                                    palette, menu, c, g, ne, nv, v, a1, w1, p, a2, w2, q, tc,
                                    ops, all_cells, &flip, &mut mat, false,
                                )?;
                            }
                        }
                    }
                }
            }
            // unloop templates: (alpha + 2, omega − 1)
            if kcells.contains_key(&(alpha + 2, omega - 1)) {
                for p in 0..alpha + 2 {
                    for q in p + 1..alpha + 2 {
                        for tc in 0..palette.tdim {
                            split_one(
                                palette,
                                menu,
                                c,
                                g,
                                ne,
                                nv,
                                v,
                                alpha + 2,
                                omega - 1,
                                p,
                                0,
                                0,
                                q,
                                tc,
                                ops,
                                all_cells,
                                &flip,
                                &mut mat,
                                true,
                            )?;
                        }
                    }
                }
            }
        }
    }
    Ok(mat)
}

/// One split or unloop term at vertex v.
#[allow(clippy::too_many_arguments)]
fn split_one(
    palette: &EdgePalette,
    menu: &dyn LabelMenu,
    c: &MgClass,
    g: &Multigraph,
    ne: usize,
    nv: usize,
    v: usize,
    a1: u8,
    w1: i64,
    p: u8,
    a2: u8,
    w2: i64,
    q: u8,
    tc: usize,
    ops: &dyn CoglueOps,
    all_cells: &BTreeMap<(u8, i64), Vec<MgClass>>,
    flip: &[u8],
    mat: &mut SparseMat,
    unloop: bool,
) -> Result<(), Error> {
    let (alpha, omega) = c.slots[v];
    let op_mat = if unloop {
        // a1 = alpha + 2, w1 = omega − 1: z lives there
        ops.cocontract(a1, w1, p, q, tc)?
    } else {
        ops.coglue(a1, w1, p, a2, w2, q, tc)?
    };
    if op_mat.is_zero() {
        return Ok(());
    }
    let newcolor = (palette.tdim + tc) as u8;
    // build the new graph
    let (g2, slots2, fix1, fix2, new_edge_idx) = if unloop {
        // same vertices; v's slot becomes (alpha+2, omega−1); loop appended
        let mut vcol = g.vcol.clone();
        let mut slots2 = c.slots.to_vec();
        slots2[v] = (a1, w1);
        vcol[v] = encode_slot(a1, w1);
        let mut edges = g.edges.clone();
        // normalized loop color
        let mut ec = newcolor;
        let mut flipped = false;
        if flip[ec as usize] < ec {
            ec = flip[ec as usize];
            flipped = true;
        }
        edges.push((v as u8, v as u8, ec));
        let g2 = Multigraph { vcol, edges, hairs: g.hairs.clone() };
        // leg fix for z: z's legs minus {p,q} ↔ v's legs in order; p, q are
        // the loop halves (stored reading: p first unless flipped)
        let derived = legs_of(&g2, v);
        let old = legs_of(g, v);
        let mut perm = vec![0u8; a1 as usize];
        let mut used = vec![false; derived.len()];
        let (hp, hq) = if flipped { (1u8, 0u8) } else { (0u8, 1u8) };
        let mut old_iter = old.iter();
        for leg in 0..a1 {
            if leg == p {
                let pos = derived
                    .iter()
                    .enumerate()
                    .position(|(pp, &(kk, ii, hh))| {
                        !used[pp] && kk == 1 && ii as usize == ne && hh == hp
                    })
                    .unwrap();
                used[pos] = true;
                perm[leg as usize] = pos as u8;
            } else if leg == q {
                let pos = derived
                    .iter()
                    .enumerate()
                    .position(|(pp, &(kk, ii, hh))| {
                        !used[pp] && kk == 1 && ii as usize == ne && hh == hq
                    })
                    .unwrap();
                used[pos] = true;
                perm[leg as usize] = pos as u8;
            } else {
                let &(kk, ii, hh) = old_iter.next().unwrap();
                let pos = derived
                    .iter()
                    .enumerate()
                    .position(|(pp, &(k2, i2, h2))| {
                        !used[pp] && k2 == kk && i2 == ii && (k2 == 0 || h2 == hh)
                    })
                    .unwrap();
                used[pos] = true;
                perm[leg as usize] = pos as u8;
            }
        }
        let fsign = if flipped { palette.flip_sign(newcolor) } else { Rat::one() };
        (g2, slots2, (perm, fsign), (vec![0u8; 0], Rat::one()), ne)
    } else {
        // v1 keeps position v with slot (a1, w1); v2 appended; new edge
        // half 0 at v1
        let mut vcol = g.vcol.clone();
        let mut slots2 = c.slots.to_vec();
        slots2[v] = (a1, w1);
        vcol[v] = encode_slot(a1, w1);
        vcol.push(encode_slot(a2, w2));
        slots2.push((a2, w2));
        let v2 = nv as u8;
        // v's attachments: first a1−1 go to v1, rest to v2
        let old = legs_of(g, v);
        debug_assert_eq!(old.len(), alpha as usize);
        let to_v1: Vec<(u8, u8, u8)> = old[..(a1 as usize - 1)].to_vec();
        let to_v2: Vec<(u8, u8, u8)> = old[(a1 as usize - 1)..].to_vec();
        let mut edges = g.edges.clone();
        let mut hairs = g.hairs.clone();
        //reroute the attachments claimed by v2
        for &(kind, idx, half) in &to_v2 {
            if kind == 0 {
                hairs[idx as usize] = v2;
            } else {
                let (eu, ev, _) = edges[idx as usize];
                if half == 0 {
                    debug_assert_eq!(eu as usize, v);
                    edges[idx as usize].0 = v2;
                } else {
                    debug_assert_eq!(ev as usize, v);
                    edges[idx as usize].1 = v2;
                }
            }
        }
        edges.push((v as u8, v2, newcolor));
        let g2 = Multigraph { vcol, edges, hairs };
        // leg fixes: x1's legs: 0..a1−1 skipping p = to_v1 attachments in
        // order, p = new edge half 0; x2 similarly with half 1
        let derived1 = legs_of(&g2, v);
        let mut perm1 = vec![0u8; a1 as usize];
        let mut used1 = vec![false; derived1.len()];
        let mut it1 = to_v1.iter();
        for leg in 0..a1 {
            let target: (u8, u8, u8) = if leg == p {
                (1, ne as u8, 0)
            } else {
                let &(kk, ii, hh) = it1.next().unwrap();
                (kk, ii, hh)
            };
            let pos = derived1
                .iter()
                .enumerate()
                .position(|(pp, &(k2, i2, h2))| {
                    !used1[pp] && k2 == target.0 && i2 == target.1 && (k2 == 0 || h2 == target.2)
                })
                .unwrap();
            used1[pos] = true;
            perm1[leg as usize] = pos as u8;
        }
        let derived2 = legs_of(&g2, v2 as usize);
        let mut perm2 = vec![0u8; a2 as usize];
        let mut used2 = vec![false; derived2.len()];
        let mut it2 = to_v2.iter();
        for leg in 0..a2 {
            let target: (u8, u8, u8) = if leg == q {
                (1, ne as u8, 1)
            } else {
                let &(kk, ii, hh) = it2.next().unwrap();
                (kk, ii, hh)
            };
            let pos = derived2
                .iter()
                .enumerate()
                .position(|(pp, &(k2, i2, h2))| {
                    !used2[pp] && k2 == target.0 && i2 == target.1 && (k2 == 0 || h2 == target.2)
                })
                .unwrap();
            used2[pos] = true;
            perm2[leg as usize] = pos as u8;
        }
        (g2, slots2, (perm1, Rat::one()), (perm2, Rat::one()), ne)
    };
    let _ = new_edge_idx;
    let key = (g2.hairs.len() as u8, cell_weight(&g2, &slots2));
    let target_classes = match all_cells.get(&key) {
        Some(t) => t,
        None => return Ok(()),
    };
    let (cg, iso, _) = g2.canonical(flip);
    let target = match target_classes.iter().find(|cc| cc.graph == cg) {
        Some(t) => t,
        None => return Ok(()),
    };
    let tr = MTransport::by_rank(&g2, &cg, iso.perm.clone(), flip);
    let cell1 = menu.cell(a1, w1).unwrap();
    let cell2 = if unloop { None } else { Some(menu.cell(a2, w2).unwrap()) };
    let fix_mat1 = perm_action_left(&cell1.out_gens, &fix1.0, cell1.dim());
    let fix_mat2 = cell2.map(|c2| perm_action_left(&c2.out_gens, &fix2.0, c2.dim()));
    for col in 0..c.dim() {
        let x = c.coinv.col(col);
        let mut acc: BTreeMap<usize, Rat> = BTreeMap::new();
        for (ti, coeff) in &x {
            let tuple = &c.tuples[*ti];
            let y = tuple[v] as usize;
            let opcol = op_mat.col(y);
            if opcol.is_empty() {
                continue;
            }
            // operator of degree −1 applied at vertex v's factor position
            let mut prefix = 0i64;
            for ee in 0..ne {
                prefix += palette.edge_deg(g.edges[ee].2);
            }
            for vv in 0..v {
                let (aa, ww) = c.slots[vv];
                prefix += menu.cell(aa, ww).unwrap().degs[tuple[vv] as usize];
            }
            let base_sign = if prefix.rem_euclid(2) == 0 { Rat::one() } else { -Rat::one() };
            for (ri, opval) in &opcol {
                // decode: for splits the op matrix is indexed r = x1·d2 + x2
                let (x1s, x2s): (Vec<(usize, Rat)>, Vec<(usize, Rat)>) = if unloop {
                    let fcol = fix_mat1.col(*ri);
                    (fcol.into_iter().collect(), vec![(0usize, Rat::one())])
                } else {
                    let d2 = cell2.unwrap().dim();
                    let (i1, i2) = (*ri / d2, *ri % d2);
                    (
                        fix_mat1.col(i1).into_iter().collect(),
                        fix_mat2.as_ref().unwrap().col(i2).into_iter().collect(),
                    )
                };
                // Koszul: the split output [x1, x2, e_new] lands as
                // x1 at position v, x2 appended last (label block), e_new
                // appended last (edge block); sign from moving x2 and e_new
                // past the trailing labels. Degrees:
                let deg_y = cell1_deg(menu, a1, w1, 0).is_some(); // placeholder
                let _ = deg_y;
                for (i1, c1v) in &x1s {
                    for (i2, c2v) in &x2s {
                        let d_x2: i64 = if unloop {
                            0
                        } else {
                            cell2.unwrap().degs[*i2]
                        };
                        let d_enew = palette.edge_deg((palette.tdim + tc) as u8);
                        let mut tail = 0i64; // degrees of labels after v
                        for vv in v + 1..nv {
                            let (aa, ww) = c.slots[vv];
                            tail += menu.cell(aa, ww).unwrap().degs[tuple[vv] as usize];
                        }
                        let mut sign = base_sign.clone();
                        if !unloop && d_x2.rem_euclid(2) != 0 && tail.rem_euclid(2) != 0 {
                            sign = -sign;
                        }
                        // e_new moves past the trailing labels and all labels
                        // before it (it joins the edge block at the end):
                        // crossing = labels after v (tail) + x2 + labels
                        // before v? edges come first in normal order, so the
                        // new edge crosses every label to its left: all of
                        // them except none — total label degree of the
                        // result except... cross = all labels' degrees
                        let mut all_labels = 0i64;
                        for vv in 0..nv {
                            if vv == v {
                                all_labels += cell1.degs[*i1];
                            } else {
                                let (aa, ww) = c.slots[vv];
                                all_labels +=
                                    menu.cell(aa, ww).unwrap().degs[tuple[vv] as usize];
                            }
                        }
                        if !unloop {
                            all_labels += d_x2;
                        }
                        // e_new starts after x2 (end of everything) and moves
                        // left past all labels to the edge block
                        if d_enew.rem_euclid(2) != 0 && (all_labels - 0).rem_euclid(2) != 0 {
                            sign = -sign;
                        }
                        let mut t2: Vec<Label> = Vec::with_capacity(slots2.len());
                        for vv in 0..nv {
                            if vv == v {
                                t2.push(*i1 as u32);
                            } else {
                                t2.push(tuple[vv]);
                            }
                        }
                        if !unloop {
                            t2.push(*i2 as u32);
                        }
                        let coeffv =
                            coeff * &sign * opval * c1v * c2v * &fix1.1 * &fix2.1;
                        if coeffv.is_zero() {
                            continue;
                        }
                        let singleton = vec![t2];
                        let v0: BTreeMap<usize, Rat> =
                            [(0usize, coeffv)].into_iter().collect();
                        let moved = m_transport_vector(
                            &tr,
                            palette,
                            menu,
                            &slots2,
                            &singleton,
                            &target.tuple_index,
                            &v0,
                        );
                        let sym = m_symmetrize(target, palette, menu, &moved)?;
                        let coords = target.express(&sym)?;
                        for (r, val) in coords {
                            let idx = target.offset + r;
                            let entry = acc.entry(idx).or_insert_with(Rat::zero);
                            *entry += val;
                            if entry.is_zero() {
                                acc.remove(&idx);
                            }
                        }
                    }
                }
            }
        }
        for (r, val) in acc {
            mat.add_to(r, c.offset + col, val);
        }
    }
    Ok(())
}

fn cell1_deg(menu: &dyn LabelMenu, a: u8, w: i64, idx: usize) -> Option<i64> {
    menu.cell(a, w).map(|c| c.degs[idx])
}

/// The edge-contraction transform: dualize, then cobar.
pub fn feynman(m: &ModularOperad, window: &Window) -> Result<GraphComplex, Error> {
    let dual = dualize_modular(m);
    modular_cobar_complex(&dual, window)
}

// ---------------------------------------------------------------------------
// Koszul duals, syzygy grading, Koszulity and monomiality
// ---------------------------------------------------------------------------

/// The syzygy-graded pieces of a complex cell: basis indices per syzygy
/// degree (total Koszul weight carried by the labels).
pub fn syzygy_split(gc: &GraphComplex, m: u8, w: i64) -> BTreeMap<i64, Vec<usize>> {
    let mut out: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    if let Some(sz) = gc.syzygy.get(&(m, w)) {
        for (i, &s) in sz.iter().enumerate() {
            out.entry(s).or_default().push(i);
        }
    }
    out
}

/// The Koszul dual of a non-negatively Koszul-weighted modular operad: per
/// cell, the kernel of the bar differential on the syzygy-degree-0 part.
/// Returns the cells and the inclusion into the bar complex.
pub struct KoszulDualData {
    pub cells: BTreeMap<(u8, i64), ModCell>,
    pub inclusion: BTreeMap<(u8, i64), SparseMat>,
    pub bar: GraphComplex,
}

pub fn koszul_dual_modular(m: &ModularOperad, window: &Window) -> Result<KoszulDualData, Error> {
    for cell in m.cells.values() {
        if cell.kweights.iter().any(|&k| k < 0) {
            return Err(Error::BadInput("negative Koszul weights".into()));
        }
    }
    let bar = modular_bar_complex(m, window)?;
    let mut cells = BTreeMap::new();
    let mut inclusion = BTreeMap::new();
    for (&key, sp) in &bar.spaces {
        let split = syzygy_split(&bar, key.0, key.1);
        let zero = match split.get(&0) {
            Some(z) => z.clone(),
            None => continue,
        };
        let dim = sp.dim();
        let mut sub = SparseMat::zero(dim, zero.len());
        for (j, &i) in zero.iter().enumerate() {
            sub.set(i, j, Rat::one());
        }
        // the label differential preserves syzygy; the contraction raises it
        // by one; the kernel asked for is of the syzygy-raising part, which
        // equals d restricted to syzygy 0 composed with projection away from
        // syzygy 0
        let image = sp.diff.mul(&sub);
        // rows at syzygy ≥ 1
        let nonzero_rows: Vec<usize> = (0..dim).filter(|i| !zero.contains(i)).collect();
        let mut proj = SparseMat::zero(nonzero_rows.len(), dim);
        for (r, &i) in nonzero_rows.iter().enumerate() {
            proj.set(r, i, Rat::one());
        }
        let tw_part = proj.mul(&image);
        let ker = tw_part.kernel_basis();
        if ker.cols == 0 {
            continue;
        }
        let basis = sub.mul(&ker);
        let solver = ColBasisSolver::new(&basis);
        let degs: Vec<i64> = (0..basis.cols)
            .map(|j| {
                let (&i, _) = basis.col(j).iter().next().unwrap();
                sp.degs[i]
            })
            .collect();
        let induce = |g: &SparseMat| -> SparseMat {
            let mut mat = SparseMat::zero(basis.cols, basis.cols);
            for j in 0..basis.cols {
                let img = g.apply(&basis.col(j));
                let coords = solver.express(&img).expect("Koszul dual not stable");
                for (i, v) in coords {
                    mat.set(i, j, v);
                }
            }
            mat
        };
        let out_gens: Vec<SparseMat> = sp.out_gens.iter().map(&induce).collect();
        let diffm = {
            // the restriction of the label differential (it preserves syz 0
            // and the kernel)
            let mut matd = SparseMat::zero(basis.cols, basis.cols);
            for j in 0..basis.cols {
                let img = sp.diff.apply(&basis.col(j));
                // the contraction part leaves the kernel by construction
                if let Ok(coords) = solver.express(&img) {
                    for (i, v) in coords {
                        matd.set(i, j, v);
                    }
                }
            }
            matd
        };
        cells.insert(
            key,
            ModCell {
                space: GradedSpace { degs, out_gens, in_gens: Vec::new(), diff: diffm },
                kweights: vec![0; basis.cols],
            },
        );
        inclusion.insert(key, basis);
    }
    Ok(KoszulDualData { cells, inclusion, bar })
}

/// Bar homology concentrated in syzygy degree 0 (requires trivial
/// differentials on the twist and the operad).
pub fn koszulity_check(m: &ModularOperad, window: &Window) -> Result<bool, Error> {
    for cell in m.cells.values() {
        if !cell.space.diff.is_zero() {
            return Err(Error::BadInput("koszulity check needs a trivial differential".into()));
        }
    }
    if !m.twist.diff.is_zero() {
        return Err(Error::BadInput("koszulity check needs a trivial twist differential".into()));
    }
    let bar = modular_bar_complex(m, window)?;
    for (&key, sp) in &bar.spaces {
        if !window.contains_cell(key.0, 0, key.1) {
            continue;
        }
        // split by c = deg + syz: the differential maps (d, s) → (d−1, s+1)
        let sz = &bar.syzygy[&key];
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for i in 0..sp.dim() {
            groups.entry(sp.degs[i] + sz[i]).or_default().push(i);
        }
        for (_, idxs) in groups {
            // complex over syzygy degree
            let mut by_s: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for &i in &idxs {
                by_s.entry(sz[i]).or_default().push(i);
            }
            let mut complex = ChainComplex::default();
            for (&s, list) in &by_s {
                complex.add_space(-s, list.iter().map(|i| format!("e{i}")).collect());
            }
            for (&s, list) in &by_s {
                if let Some(next) = by_s.get(&(s + 1)) {
                    let mut mat = SparseMat::zero(next.len(), list.len());
                    for (jj, &j) in list.iter().enumerate() {
                        for (i, v) in sp.diff.col(j) {
                            if let Some(ii) = next.iter().position(|&x| x == i) {
                                mat.set(ii, jj, v);
                            }
                        }
                    }
                    complex.add_diff(-s, mat);
                }
            }
            let h = homology(&complex).map_err(crate::Error::Linalg)?;
            for (&d, &n) in &h.dims {
                if d != 0 && n > 0 {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Monomiality of a presentation: for every one-edge class, the relation
/// preimage in the labeled space is spanned by basis tuples.
pub fn monomiality_check(pres: &Presentation, window: &Window) -> Result<bool, Error> {
    let closure =
        crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    let free = free_cells(&pres.twist, &pres.generators, &closure)?;
    // relation span per cell
    let mut span: BTreeMap<(u8, i64), Vec<BTreeMap<usize, Rat>>> = BTreeMap::new();
    for r in &pres.relations {
        span.entry((r.arity, r.weight)).or_default().push(r.coords.clone());
    }
    for ((a, w), vecs) in &span {
        let classes = match free.classes.get(&(*a, *w)) {
            Some(c) => c,
            None => continue,
        };
        for c in classes {
            if c.graph.edges.len() != 1 {
                continue;
            }
            // the preimage of the relation span under big space → cell
            // coordinates: W = { v : class(v) ∈ span } = ker(q) + lifts;
            // spanned-by-basis ⟺ dim(span of basis tuples in W) = dim W
            let dim_big = c.tuples.len();
            // matrix of q: big → cell coordinates of this class block
            let mut qmat = SparseMat::zero(c.dim(), dim_big);
            for j in 0..dim_big {
                let unit: BTreeMap<usize, Rat> = [(j, Rat::one())].into_iter().collect();
                let sym = m_symmetrize(c, &free.palette, &MapMenu(&free.gen_cells), &unit)?;
                let coords = c.express(&sym)?;
                for (i, v) in coords {
                    qmat.set(i, j, v);
                }
            }
            // span inside the class block (restrict relation vectors)
            let mut rel = SparseMat::zero(c.dim(), vecs.len());
            for (j, v) in vecs.iter().enumerate() {
                for (&i, x) in v {
                    if i >= c.offset && i < c.offset + c.dim() {
                        rel.set(i - c.offset, j, x.clone());
                    }
                }
            }
            // W = q⁻¹(im rel): kernel of (proj ∘ q) where proj kills im rel:
            // compute via stacking [q ; ...]: v ∈ W ⟺ q v ∈ im rel ⟺
            // rank [rel | q v] = rank rel — solve: W = ker(P q) with P a
            // projector annihilating im rel: build from a complement basis
            let relbasis = rel.image_basis();
            let dimc = c.dim();
            // rows of a matrix whose kernel is im rel: left kernel
            let lk = relbasis.transpose().kernel_basis(); // columns: vectors λ with relᵀ λ = 0
            let pq = lk.transpose().mul(&qmat);
            let w_basis = pq.kernel_basis();
            let dim_w = w_basis.cols;
            let _ = dimc;
            if dim_w == 0 {
                continue;
            }
            // basis tuples inside W
            let wsolver = ColBasisSolver::new(&w_basis.image_basis());
            let mut count = 0;
            for j in 0..dim_big {
                let unit: BTreeMap<usize, Rat> = [(j, Rat::one())].into_iter().collect();
                if wsolver.express(&unit).is_ok() {
                    count += 1;
                }
            }
            // dim of the span of the contained basis tuples = count
            if count != dim_w {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Resolution and quasi-isomorphism checks
// ---------------------------------------------------------------------------

/// The counit of the resolution: fold all inner edges of the zero-outer-edge
/// part into the operad. Returns per-cell matrices into m's cells.
pub fn counit_matrices(
    omega_bar: &GraphComplex,
    m: &ModularOperad,
) -> Result<BTreeMap<(u8, i64), SparseMat>, Error> {
    let mut out = BTreeMap::new();
    let palette = &omega_bar.palette;
    let menu = MapMenu(&m.cells);
    for (&key, classes) in &omega_bar.cells {
        let target_dim = m.dim(key.0, key.1);
        let dim: usize = classes.iter().map(|c| c.dim()).sum();
        let mut mat = SparseMat::zero(target_dim, dim);
        for c in classes {
            if c.graph.edges.iter().any(|&(_, _, col)| palette.layer(col) == 0) {
                continue; // outer edges are annihilated
            }
            for col in 0..c.dim() {
                let folded = fold_all_edges(palette, &menu, m.ops.as_ref(), c, col)?;
                for (r, v) in folded {
                    mat.add_to(r, c.offset + col, v);
                }
            }
        }
        out.insert(key, mat);
    }
    Ok(out)
}

/// Fold every (inner) edge of a class column into the operad via repeated
/// single contractions without the suspension drop.
fn fold_all_edges(
    palette: &EdgePalette,
    menu: &MapMenu,
    ops: &dyn GlueOps,
    c: &MgClass,
    col: usize,
) -> Result<BTreeMap<usize, Rat>, Error> {
    // state: labeled graphs with coefficients, iteratively contracted
    struct State {
        graph: Multigraph,
        slots: Vec<VSlotPub>,
        tuple: Vec<Label>,
        coeff: Rat,
    }
    let mut states: Vec<State> = c
        .coinv
        .col(col)
        .into_iter()
        .map(|(ti, coeff)| State {
            graph: c.graph.clone(),
            slots: c.slots.clone(),
            tuple: c.tuples[ti].clone(),
            coeff,
        })
        .collect();
    let mut done: BTreeMap<usize, Rat> = BTreeMap::new();
    while let Some(st) = states.pop() {
        if st.graph.edges.is_empty() {
            debug_assert_eq!(st.graph.vcol.len(), 1);
            let e = done.entry(st.tuple[0] as usize).or_insert_with(Rat::zero);
            *e += &st.coeff;
            if e.is_zero() {
                done.remove(&(st.tuple[0] as usize));
            }
            continue;
        }
        // contract edge 0
        let g = &st.graph;
        let (u, v, color) = g.edges[0];
        let tc = palette.comp(color);
        let (u, v) = (u as usize, v as usize);
        let is_loop = u == v;
        let (au, wu) = st.slots[u];
        let merged_slot: VSlotPub = if is_loop {
            (au - 2, wu + 1)
        } else {
            let (av, wv) = st.slots[v];
            (au + av - 2, wu + wv + 1)
        };
        let plan = plan_contraction(g, &st.slots, 0, merged_slot);
        let op_mat = if is_loop {
            ops.contract(au, wu, plan.p, plan.q, tc)?
        } else {
            let (av, wv) = st.slots[v];
            ops.glue(au, wu, plan.p, av, wv, plan.q, tc)?
        };
        if op_mat.is_zero() {
            continue;
        }
        let result_cell = match menu.cell(merged_slot.0, merged_slot.1) {
            Some(cc) => cc,
            None => continue,
        };
        let reorder = perm_action_left(&result_cell.out_gens, &plan.leg_perm, result_cell.dim());
        let op_mat = reorder.mul(&op_mat);
        // operator degree 0 here: the structure map itself; sign only from
        // reordering factors to [e, x_u, (x_v)] with the e-factor even?
        // Inner edges may carry odd degree; fold uses the same reorder sign
        // as contraction but no suspension drop.
        let ne = g.edges.len();
        let nv = g.vcol.len();
        let mut degs: Vec<i64> = Vec::with_capacity(ne + nv);
        for ee in 0..ne {
            degs.push(palette.edge_deg(g.edges[ee].2));
        }
        for vv in 0..nv {
            let (a, w) = st.slots[vv];
            degs.push(menu.cell(a, w).unwrap().degs[st.tuple[vv] as usize]);
        }
        let mut front = vec![0usize, ne + u];
        if !is_loop {
            front.push(ne + v);
        }
        let mut perm = vec![0u8; ne + nv];
        let mut next = front.len();
        for (i, &f) in front.iter().enumerate() {
            perm[f] = i as u8;
        }
        for i in 0..ne + nv {
            if !front.contains(&i) {
                perm[i] = next as u8;
                next += 1;
            }
        }
        let mut sign = koszul_sign(&degs, &perm);
        let merged_deg = palette.edge_deg(color)
            + degs[ne + u]
            + if is_loop { 0 } else { degs[ne + v] };
        let mut crossing = 0i64;
        for ee in 1..ne {
            crossing += degs[ee];
        }
        for vv in 0..plan.merged_pos {
            let old = old_vertex_at(nv, u, v, is_loop, vv);
            if let Some(o) = old {
                if o != u && o != v {
                    crossing += degs[ne + o];
                }
            }
        }
        if merged_deg.rem_euclid(2) != 0 && crossing.rem_euclid(2) != 0 {
            sign = -sign;
        }
        let colidx = if is_loop {
            st.tuple[u] as usize
        } else {
            let (av, wv) = st.slots[v];
            let dim_v = menu.cell(av, wv).unwrap().dim();
            st.tuple[u] as usize * dim_v + st.tuple[v] as usize
        };
        for (r, opv) in op_mat.col(colidx) {
            let mut t2: Vec<Label> = Vec::with_capacity(plan.slots.len());
            for x2 in 0..plan.slots.len() {
                if x2 == plan.merged_pos {
                    t2.push(r as u32);
                } else {
                    let old = old_vertex_at(nv, u, v, is_loop, x2).unwrap();
                    t2.push(st.tuple[old]);
                }
            }
            states.push(State {
                graph: plan.graph.clone(),
                slots: plan.slots.clone(),
                tuple: t2,
                coeff: &st.coeff * &sign * &opv,
            });
        }
    }
    Ok(done)
}

/// Quasi-isomorphism of the counit per cell: mapping-cone acyclicity of
/// the resolution onto the operad.
pub fn counit_quasi_iso_check(m: &ModularOperad, window: &Window) -> Result<bool, Error> {
    let omega = omega_bar_complex(m, window)?;
    let counit = counit_matrices(&omega, m)?;
    for (&key, sp) in &omega.spaces {
        if !window.contains_cell(key.0, 0, key.1) {
            continue;
        }
        let from = degreewise_complex(sp);
        let target_sp = m
            .cells
            .get(&key)
            .map(|c| c.space.clone())
            .unwrap_or_else(|| GradedSpace::trivial(0, 1, 0, 0));
        let to = degreewise_complex(&target_sp);
        // distribute the counit matrix by degree
        let mut by_deg_from: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &d) in sp.degs.iter().enumerate() {
            by_deg_from.entry(d).or_default().push(i);
        }
        let mut by_deg_to: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &d) in target_sp.degs.iter().enumerate() {
            by_deg_to.entry(d).or_default().push(i);
        }
        let mat = &counit[&key];
        let mut maps = BTreeMap::new();
        for (&d, idxs) in &by_deg_from {
            if let Some(tidx) = by_deg_to.get(&d) {
                let mut mm = SparseMat::zero(tidx.len(), idxs.len());
                for (jj, &j) in idxs.iter().enumerate() {
                    for (i, v) in mat.col(j) {
                        let ii = tidx.iter().position(|&x| x == i).unwrap();
                        mm.set(ii, jj, v);
                    }
                }
                maps.insert(d, mm);
            }
        }
        let f = ChainMap { from, to, maps };
        if !crate::linalg::quasi_iso_check(&f).map_err(crate::Error::Linalg)? {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Builtin presentations
// ---------------------------------------------------------------------------

/// Relation vectors from a predicate on labeled one-edge classes: a
/// coinvariant column becomes a relation iff every tuple in its support is
/// flagged. Mixed columns reject the predicate as non-monomial here.
pub fn monomial_relations(
    free: &FreeCells,
    cell: (u8, i64),
    pred: &dyn Fn(&MgClass, &[Label]) -> bool,
) -> Result<Vec<RelationVec>, Error> {
    let mut out = Vec::new();
    if let Some(classes) = free.classes.get(&cell) {
        for c in classes {
            if c.graph.edges.len() != 1 {
                continue;
            }
            for col in 0..c.dim() {
                let support = c.coinv.col(col);
                let flags: Vec<bool> =
                    support.keys().map(|&ti| pred(c, &c.tuples[ti])).collect();
                if flags.iter().all(|&b| b) {
                    out.push(RelationVec {
                        arity: cell.0,
                        weight: cell.1,
                        coords: [(c.offset + col, Rat::one())].into_iter().collect(),
                    });
                } else if flags.iter().any(|&b| b) {
                    return Err(Error::BadInput(
                        "predicate mixes orbits; relations are not monomial".into(),
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// The leg of vertex-local index carried by the unique edge of a one-edge
/// class at its two ends: (vertex, leg) pairs.
pub fn one_edge_endpoints(c: &MgClass) -> ((usize, u8), (usize, u8)) {
    let e = 0;
    let (u, v, _) = c.graph.edges[e];
    let (u, v) = (u as usize, v as usize);
    let legs_u = legs_of(&c.graph, u);
    let p = legs_u.iter().position(|&(k, i, h)| k == 1 && i == 0 && h == 0).unwrap() as u8;
    let legs_v = legs_of(&c.graph, v);
    let q = legs_v.iter().position(|&(k, i, h)| k == 1 && i as usize == e && h == 1).unwrap()
        as u8;
    ((u, p), (v, q))
}

/// One trivalent generator, trivial action, Euler weight −1, degree 0; no
/// relations. The free modular operad.
pub fn builtin_free_trivalent(window: &Window) -> Result<ModularOperad, Error> {
    let mut gens = BTreeMap::new();
    gens.insert((3u8, -1i64), GradedSpace::trivial(1, 3, 0, 0));
    free_modular(&Twist::one(), &gens, window, "free:trivalent")
}

/// One trivalent generator with all one-edge gluings identified and loops
/// killed: arities collapse to a single class each.
pub fn builtin_com(window: &Window) -> Result<ModularOperad, Error> {
    let mut gens = BTreeMap::new();
    gens.insert((3u8, -1i64), GradedSpace::trivial(1, 3, 0, 0));
    let closure =
        crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    let free = free_cells(&Twist::one(), &gens, &closure)?;
    let mut relations = Vec::new();
    // loops at (1, 0): every one-edge column
    for col in free.one_edge_columns(1, 0) {
        relations.push(RelationVec {
            arity: 1,
            weight: 0,
            coords: [(col, Rat::one())].into_iter().collect(),
        });
    }
    // differences of the one-edge gluing classes at (4, −1)
    let cols = free.one_edge_columns(4, -1);
    for wpair in cols.windows(2) {
        let mut coords = BTreeMap::new();
        coords.insert(wpair[0], Rat::one());
        coords.insert(wpair[1], -Rat::one());
        relations.push(RelationVec { arity: 4, weight: -1, coords });
    }
    realize(
        &Presentation {
            twist: Twist::one(),
            generators: gens,
            relations,
            name: "com".into(),
        },
        window,
    )
}

/// Presentation of the two-colored trivalent operad: a two-dimensional
/// trivalent generator, one-edge classes joining equal colors (and all
/// loops) as relations.
pub fn builtin_bipartite_presentation(window: &Window) -> Result<Presentation, Error> {
    let mut gens = BTreeMap::new();
    gens.insert((3u8, -1i64), GradedSpace::trivial(2, 3, 0, 0));
    let closure =
        crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    let free = free_cells(&Twist::one(), &gens, &closure)?;
    let mut relations = Vec::new();
    // loops (single vertex): always a relation
    relations.extend(monomial_relations(&free, (1, 0), &|_, _| true)?);
    // two-vertex one-edge classes with equal colors
    relations.extend(monomial_relations(&free, (4, -1), &|c, t| {
        let ((u, _), (v, _)) = one_edge_endpoints(c);
        t[u] == t[v]
    })?);
    Ok(Presentation {
        twist: Twist::one(),
        generators: gens,
        relations,
        name: "bipartite-trivalent".into(),
    })
}

pub fn builtin_bipartite(window: &Window) -> Result<ModularOperad, Error> {
    realize(&builtin_bipartite_presentation(window)?, window)
}

/// Orientation bit of leg `leg` in the basis mask of an arity-a generator.
fn orientation(mask: u32, leg: u8) -> bool {
    mask & (1 << leg) != 0
}

/// Presentation of the directed-graphs operad up to the window's arity
/// closure: per arity a ≥ 3 a 2^a-dimensional generator of hair
/// orientations; relations join equal orientations.
pub fn builtin_directed_presentation(window: &Window) -> Result<Presentation, Error> {
    let closure =
        crate::bimodule::window_closure(window, crate::bimodule::ClosureContext::Modular)?;
    let mut gens = BTreeMap::new();
    for a in 3..=closure.max_out {
        let dim = 1usize << a;
        let mut out_gens = Vec::new();
        for t in 0..a - 1 {
            let mut g = SparseMat::zero(dim, dim);
            for mask in 0..dim as u32 {
                let b1 = orientation(mask, t);
                let b2 = orientation(mask, t + 1);
                let mut nm = mask & !(1 << t) & !(1 << (t + 1));
                if b1 {
                    nm |= 1 << (t + 1);
                }
                if b2 {
                    nm |= 1 << t;
                }
                g.set(nm as usize, mask as usize, Rat::one());
            }
            out_gens.push(g);
        }
        gens.insert(
            (a, -1i64),
            GradedSpace {
                degs: vec![0; dim],
                out_gens,
                in_gens: Vec::new(),
                diff: SparseMat::zero(dim, dim),
            },
        );
    }
    let free = free_cells(&Twist::one(), &gens, &closure)?;
    let mut relations = Vec::new();
    let rel_cells: Vec<(u8, i64)> = free
        .classes
        .keys()
        .cloned()
        .filter(|&(m, w)| {
            // one-edge cells: two generators (w = −1) or one with a loop (w = 0)
            (w == -1 && m >= 4) || (w == 0)
        })
        .collect();
    for cell in rel_cells {
        let rels = monomial_relations(&free, cell, &|c, t| {
            let ((u, p), (v, q)) = one_edge_endpoints(c);
            orientation(t[u], p) == orientation(t[v], q)
        })?;
        relations.extend(rels);
    }
    Ok(Presentation {
        twist: Twist::one(),
        generators: gens,
        relations,
        name: "directed-graphs".into(),
    })
}

pub fn builtin_directed(window: &Window) -> Result<ModularOperad, Error> {
    realize(&builtin_directed_presentation(window)?, window)
}

/// Endomorphism operad of a k-dimensional space in degree 0 with the
/// standard symmetric pairing (twist 1) or the standard antisymmetric
/// pairing on two dimensions (twist S).
pub fn builtin_endo(dim: usize, antisymmetric: bool, window: &Window) -> Result<ModularOperad, Error> {
    let vdegs = vec![0i64; dim];
    if antisymmetric {
        if dim != 2 {
            return Err(Error::BadInput("antisymmetric builtin needs dim 2".into()));
        }
        let mut f = SparseMat::zero(2, 2);
        f.set(0, 1, Rat::one());
        f.set(1, 0, -Rat::one());
        endomorphism_modular(&vdegs, vec![f], &Twist::s(), window, "endo:2:anti")
    } else {
        let f = SparseMat::identity(dim);
        endomorphism_modular(
            &vdegs,
            vec![f],
            &Twist::one(),
            window,
            &format!("endo:{dim}"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(max_arity: u8, wmax: i64) -> Window {
        Window::modular(max_arity, wmax)
    }

    #[test]
    fn free_trivalent_small_dims() {
        let m = builtin_free_trivalent(&w(4, 1)).unwrap();
        assert_eq!(m.dim(3, -1), 1);
        // one trivalent vertex with a loop
        assert_eq!(m.dim(1, 0), 1);
        // two trivalent vertices, one edge: three hair distributions
        assert_eq!(m.dim(4, -1), 3);
        assert!(m.prestable_check());
        assert!(m.as_bimodule().validate().is_empty());
    }

    #[test]
    fn free_matches_composition_engine() {
        // the free cells are the composition product of the pairing monoid
        // with the generators: cross-engine dims comparison
        let mut gens = BTreeMap::new();
        gens.insert((3u8, -1i64), GradedSpace::trivial(1, 3, 0, 0));
        let window = w(4, 1);
        let m = free_modular(&Twist::one(), &gens, &window, "free").unwrap();
        let bwin = Window { max_out: 4, max_in: 0, wmin: -8, wmax: 3, dmin: -4, dmax: 4 };
        let brauer = crate::properad::brauer(
            &Twist::one(),
            &Window { max_out: 4, max_in: 6, wmin: 0, wmax: 4, dmin: -4, dmax: 4 },
        )
        .unwrap();
        let mut v = SigmaBimodule::new();
        v.insert(3, 0, -1, GradedSpace::trivial(1, 3, 0, 0));
        let comp = crate::compose::compose(&brauer.underlying, &v, &bwin).unwrap();
        for (&(a, weight), cell) in &m.cells {
            if a <= 4 && weight <= 1 {
                assert_eq!(
                    cell.space.dim(),
                    comp.dim(a, 0, weight),
                    "cell ({a},{weight})"
                );
            }
        }
    }

    #[test]
    fn com_collapses_to_one_class_per_arity() {
        let m = builtin_com(&w(5, 1)).unwrap();
        assert_eq!(m.dim(3, -1), 1);
        assert_eq!(m.dim(4, -1), 1);
        assert_eq!(m.dim(5, -1), 1);
        assert_eq!(m.dim(1, 0), 0);
        assert_eq!(m.dim(2, 0), 0);
        assert_eq!(m.dim(3, 0), 0);
        assert_eq!(m.dim(4, 0), 0);
        assert_eq!(m.dim(2, 1), 0);
    }

    #[test]
    fn bipartite_dims() {
        let m = builtin_bipartite(&w(4, 0)).unwrap();
        assert_eq!(m.dim(3, -1), 2);
        assert_eq!(m.dim(4, -1), 6);
        // weight 0 at arity 2: one properly-colored edge between two
        // trivalent vertices with a second edge? (2,0): V=2, E=2: two
        // vertices joined by 2 edges: colors must differ at both ends of
        // both edges: ◦• twice: allowed: classes: hair split (1,1): the
        // double edge: 1 class × labelings {◦•}: dim: the two parallel
        // edges are interchangeable; labels (◦,•) fixed by nothing: 2
        // labelings ↔ swap vertices: 1 orbit... plus loop classes all die
        let d20 = m.dim(2, 0);
        assert!(d20 > 0, "expected surviving doubled edge at (2,0), got {d20}");
        assert!(m.prestable_check());
    }

    #[test]
    fn endo_dims_and_validity() {
        let m = builtin_endo(2, false, &w(3, 1)).unwrap();
        assert_eq!(m.dim(3, -1), 8);
        assert_eq!(m.dim(2, 0), 4);
        assert_eq!(m.dim(0, 0), 1);
        assert_eq!(m.dim(2, -1), 0);
        assert!(m.as_bimodule().validate().is_empty());
        // antisymmetric: sign flip under leg swap of the pairing
        let ma = builtin_endo(2, true, &w(3, 1)).unwrap();
        assert_eq!(ma.dim(3, -1), 8);
        // gluing legs with the antisymmetric pairing: ξ(e0⊗e1) = −ξ(e1⊗e0)
        let f = ma.ops.contract(2, 0, 0, 1, 0).unwrap();
        assert_eq!(f.get(0, 1), -f.get(0, 2));
    }

    #[test]
    fn edge_order_independence() {
        // contract the two edges of a two-edge configuration in both orders
        let m = builtin_free_trivalent(&w(4, 1)).unwrap();
        // x = arity-4 weight −1 elements (two vertices, one edge); contract
        // their legs pairwise in both orders via glue+contract coherence:
        // glue then contract vs contract-after-glue along swapped edges
        let g1 = m.ops.glue(3, -1, 0, 3, -1, 0, 0).unwrap(); // (4, −1)
        let c1 = m.ops.contract(4, -1, 0, 2, 0).unwrap(); // (2, 0)
        let path1 = c1.mul(&g1);
        let g2 = m.ops.glue(3, -1, 1, 3, -1, 1, 0).unwrap();
        let c2 = m.ops.contract(4, -1, 0, 2, 0).unwrap();
        let _ = (g2, c2);
        // both orders of contracting the theta-like double gluing agree up
        // to the leg bookkeeping; coherence is exercised structurally by
        // d² = 0 below, here we check shapes and nontriviality
        assert!(!path1.is_zero());
    }

    #[test]
    fn bar_complex_d_squares_to_zero() {
        for m in [
            builtin_free_trivalent(&w(3, 1)).unwrap(),
            builtin_com(&w(3, 1)).unwrap(),
            builtin_endo(1, false, &w(3, 1)).unwrap(),
        ] {
            let bar = modular_bar_complex(&m, &w(3, 1)).unwrap();
            for (key, sp) in &bar.spaces {
                let d2 = sp.diff.mul(&sp.diff);
                assert!(d2.is_zero(), "{} bar d² ≠ 0 at {key:?}", m.name);
                // equivariance and validity
                let mut b = SigmaBimodule::new();
                b.insert(key.0, 0, key.1, sp.clone());
                assert!(b.validate().is_empty(), "{} bar cell {key:?}", m.name);
            }
        }
    }

    #[test]
    fn omega_bar_d_squares_to_zero() {
        let m = builtin_com(&w(3, 1)).unwrap();
        let omega = omega_bar_complex(&m, &w(3, 1)).unwrap();
        let mut any = false;
        for (key, sp) in &omega.spaces {
            let d2 = sp.diff.mul(&sp.diff);
            assert!(d2.is_zero(), "omega-bar d² ≠ 0 at {key:?}");
            any = true;
        }
        assert!(any);
    }

    #[test]
    fn feynman_d_squares_to_zero() {
        let m = builtin_endo(1, false, &w(3, 1)).unwrap();
        let fm = feynman(&m, &w(3, 1)).unwrap();
        for (key, sp) in &fm.spaces {
            let d2 = sp.diff.mul(&sp.diff);
            assert!(d2.is_zero(), "feynman d² ≠ 0 at {key:?}");
        }
    }

    #[test]
    fn cobar_dual_matches_bar_transpose_dims() {
        let m = builtin_com(&w(3, 1)).unwrap();
        let bar = modular_bar_complex(&m, &w(3, 1)).unwrap();
        let dual = dualize_modular(&m);
        let cobar = modular_cobar_complex(&dual, &w(3, 1)).unwrap();
        for (key, sp) in &bar.spaces {
            let csp = cobar.spaces.get(key);
            let cdim = csp.map_or(0, |s| s.dim());
            assert_eq!(sp.dim(), cdim, "dims at {key:?}");
            // degrees mirror
            if let Some(csp) = csp {
                let mut a: Vec<i64> = sp.degs.clone();
                let mut b: Vec<i64> = csp.degs.iter().map(|&d| -d).collect();
                a.sort_unstable();
                b.sort_unstable();
                assert_eq!(a, b, "degree mirror at {key:?}");
            }
        }
    }

    #[test]
    fn koszul_dual_of_free_is_generators() {
        let m = builtin_free_trivalent(&w(4, 1)).unwrap();
        let kd = koszul_dual_modular(&m, &w(4, 1)).unwrap();
        // KD(free on V) = V: one cell at (3, −1) of dimension 1
        assert_eq!(kd.cells.len(), 1);
        let cell = &kd.cells[&(3, -1)];
        assert_eq!(cell.space.dim(), 1);
    }

    #[test]
    fn free_is_koszul() {
        let m = builtin_free_trivalent(&w(3, 1)).unwrap();
        assert!(koszulity_check(&m, &w(3, 1)).unwrap());
    }

    #[test]
    fn monomiality_verdicts() {
        let window = w(4, 1);
        assert!(monomiality_check(&builtin_bipartite_presentation(&window).unwrap(), &window)
            .unwrap());
        assert!(monomiality_check(&builtin_directed_presentation(&w(3, 0)).unwrap(), &w(3, 0))
            .unwrap());
        // com relations are differences: not monomial
        let mut gens = BTreeMap::new();
        gens.insert((3u8, -1i64), GradedSpace::trivial(1, 3, 0, 0));
        let closure =
            crate::bimodule::window_closure(&window, crate::bimodule::ClosureContext::Modular)
                .unwrap();
        let free = free_cells(&Twist::one(), &gens, &closure).unwrap();
        let cols = free.one_edge_columns(4, -1);
        let mut relations = Vec::new();
        for wpair in cols.windows(2) {
            let mut coords = BTreeMap::new();
            coords.insert(wpair[0], Rat::one());
            coords.insert(wpair[1], -Rat::one());
            relations.push(RelationVec { arity: 4, weight: -1, coords });
        }
        let pres = Presentation {
            twist: Twist::one(),
            generators: gens,
            relations,
            name: "com-partial".into(),
        };
        assert!(!monomiality_check(&pres, &window).unwrap());
    }

    #[test]
    fn counit_resolution_on_tiny_window() {
        let m = builtin_com(&w(3, 0)).unwrap();
        assert!(counit_quasi_iso_check(&m, &w(3, 0)).unwrap());
    }
}

/// A monomial presentation realized through the surviving-class filter: the
/// quotient basis is the set of labeled classes with no killed one-edge
/// pattern, with structure maps reducing to that basis. Valid exactly for
/// monomial relation spans; cross-validated against [`realize`] on overlap
/// windows in the test suite.
pub fn realize_monomial(
    twist: &Twist,
    generators: &BTreeMap<(u8, i64), GradedSpace>,
    bad_edge: Rc<dyn Fn(&Multigraph, &[VSlotPub], &[Label], usize) -> bool>,
    window: &Window,
    name: &str,
) -> Result<ModularOperad, Error> {
    let palette = EdgePalette::new(twist, [false, true])?;
    let gen_cells: BTreeMap<(u8, i64), ModCell> = generators
        .iter()
        .map(|(&k, sp)| (k, ModCell { space: sp.clone(), kweights: vec![0; sp.dim()] }))
        .collect();
    let keys: Vec<(u8, i64)> = gen_cells.keys().cloned().collect();
    let bad2 = bad_edge.clone();
    let pred = move |g: &Multigraph, slots: &[VSlotPub], t: &[Label]| -> bool {
        (0..g.edges.len()).any(|e| bad2(g, slots, t, e))
    };
    let menu = MapMenu(&gen_cells);
    let mut classes =
        realize_graph_cells_filtered(&palette, &menu, &keys, window, Some(&pred))?;
    let spaces = assemble_cells(&palette, &menu, &mut classes)?;
    let free = FreeCells {
        twist: twist.clone(),
        palette,
        gen_cells,
        classes,
        spaces,
    };
    // identity quotient over the filtered basis
    let mut quotient = BTreeMap::new();
    let mut cells = BTreeMap::new();
    for (&key, sp) in &free.spaces {
        let dim = sp.dim();
        let section: Vec<usize> = (0..dim).collect();
        let smat = SparseMat::identity(dim);
        let reducer = Some(ColBasisSolver::new(&smat));
        let free_kw = free.kweights(key.0, key.1);
        quotient.insert(
            key,
            QuotientCell {
                section,
                reducer,
                kweights: free_kw.clone(),
                degs: sp.degs.clone(),
            },
        );
        cells.insert(key, ModCell { space: sp.clone(), kweights: free_kw });
    }
    let ops = RealizedOps { free, quotient };
    Ok(ModularOperad { twist: twist.clone(), cells, ops: Rc::new(ops), name: name.into() })
}

/// Large-window builtin for the two-colored trivalent operad.
pub fn builtin_bipartite_large(window: &Window) -> Result<ModularOperad, Error> {
    let mut gens = BTreeMap::new();
    gens.insert((3u8, -1i64), GradedSpace::trivial(2, 3, 0, 0));
    let bad = Rc::new(
        |g: &Multigraph, _slots: &[VSlotPub], t: &[Label], e: usize| -> bool {
            let (u, v, _) = g.edges[e];
            u == v || t[u as usize] == t[v as usize]
        },
    );
    realize_monomial(&Twist::one(), &gens, bad, window, "bipartite-trivalent")
}

/// Large-window builtin for the oriented-legs operad.
pub fn builtin_directed_large(window: &Window) -> Result<ModularOperad, Error> {
    let mut gens = BTreeMap::new();
    for a in 3..=window.max_out {
        let dim = 1usize << a;
        let mut out_gens = Vec::new();
        for t in 0..a - 1 {
            let mut gmat = SparseMat::zero(dim, dim);
            for mask in 0..dim as u32 {
                let b1 = mask & (1 << t) != 0;
                let b2 = mask & (1 << (t + 1)) != 0;
                let mut nm = mask & !(1 << t) & !(1 << (t + 1));
                if b1 {
                    nm |= 1 << (t + 1);
                }
                if b2 {
                    nm |= 1 << t;
                }
                gmat.set(nm as usize, mask as usize, Rat::one());
            }
            out_gens.push(gmat);
        }
        gens.insert(
            (a, -1i64),
            GradedSpace {
                degs: vec![0; dim],
                out_gens,
                in_gens: Vec::new(),
                diff: SparseMat::zero(dim, dim),
            },
        );
    }
    let bad = Rc::new(
        |g: &Multigraph, _slots: &[VSlotPub], t: &[Label], e: usize| -> bool {
            let (u, v, _) = g.edges[e];
            let (u, v) = (u as usize, v as usize);
            let legs_u = legs_of(g, u);
            let p = legs_u
                .iter()
                .position(|&(k, i, h)| k == 1 && i as usize == e && h == 0)
                .unwrap();
            let legs_v = legs_of(g, v);
            let q = legs_v
                .iter()
                .position(|&(k, i, h)| k == 1 && i as usize == e && h == 1)
                .unwrap();
            (t[u] & (1 << p) != 0) == (t[v] & (1 << q) != 0)
        },
    );
    realize_monomial(&Twist::one(), &gens, bad, window, "directed-graphs")
}
