//! Hierarchical quadtree mesh over a rectangular domain.
//!
//! Elements are identified by their position in the tree: refinement level
//! plus integer cell coordinates at that level. A cell at level `l` covers
//! `[ix, ix+1] x [iy, iy+1]` in units of `h0 / 2^l`, where `h0` is the
//! level-0 element size. Parents, children and edge neighbours are therefore
//! pure index arithmetic, and node identity is an exact integer lattice
//! coordinate, so coincident corners always resolve to the same node.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use crate::error::MeshError;

/// Deepest refinement level the node lattice can represent.
pub const LATTICE_DEPTH: u8 = 24;

/// Identifier of an element in the refinement tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElemId {
    pub level: u8,
    pub ix: u32,
    pub iy: u32,
}

impl fmt::Display for ElemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}({},{})", self.level, self.ix, self.iy)
    }
}

impl ElemId {
    pub const fn new(level: u8, ix: u32, iy: u32) -> Self {
        ElemId { level, ix, iy }
    }

    pub fn parent(self) -> Option<ElemId> {
        (self.level > 0).then(|| ElemId::new(self.level - 1, self.ix / 2, self.iy / 2))
    }

    /// Quadrants in the order lower-left, lower-right, upper-left, upper-right.
    pub fn children(self) -> [ElemId; 4] {
        let (l, x, y) = (self.level + 1, self.ix * 2, self.iy * 2);
        [
            ElemId::new(l, x, y),
            ElemId::new(l, x + 1, y),
            ElemId::new(l, x, y + 1),
            ElemId::new(l, x + 1, y + 1),
        ]
    }

    /// The ancestor (or self) at `level`, which must not exceed `self.level`.
    pub fn ancestor_at(self, level: u8) -> ElemId {
        let shift = self.level - level;
        ElemId::new(level, self.ix >> shift, self.iy >> shift)
    }

    fn neighbor(self, side: Side) -> Option<ElemId> {
        let (ix, iy) = match side {
            Side::West => (self.ix.checked_sub(1)?, self.iy),
            Side::East => (self.ix + 1, self.iy),
            Side::South => (self.ix, self.iy.checked_sub(1)?),
            Side::North => (self.ix, self.iy + 1),
        };
        Some(ElemId::new(self.level, ix, iy))
    }

    /// Corner node keys, counter-clockwise from the lower-left corner.
    pub fn corner_keys(self) -> [NodeKey; 4] {
        let s = LATTICE_DEPTH - self.level;
        let (x0, y0) = ((self.ix as u64) << s, (self.iy as u64) << s);
        let (x1, y1) = (((self.ix + 1) as u64) << s, ((self.iy + 1) as u64) << s);
        [
            NodeKey(x0, y0),
            NodeKey(x1, y0),
            NodeKey(x1, y1),
            NodeKey(x0, y1),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];

    fn opposite(self) -> Side {
        match self {
            Side::West => Side::East,
            Side::East => Side::West,
            Side::South => Side::North,
            Side::North => Side::South,
        }
    }

    /// Indices (into `ElemId::children`) of the two children touching this side.
    fn child_slots(self) -> [usize; 2] {
        match self {
            Side::West => [0, 2],
            Side::East => [1, 3],
            Side::South => [0, 1],
            Side::North => [2, 3],
        }
    }

    /// Corner indices (into `ElemId::corner_keys`) bounding this side.
    fn corner_slots(self) -> [usize; 2] {
        match self {
            Side::West => [0, 3],
            Side::East => [1, 2],
            Side::South => [0, 1],
            Side::North => [3, 2],
        }
    }
}

/// Exact node position on the dyadic lattice `h0 / 2^LATTICE_DEPTH`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey(pub u64, pub u64);

impl NodeKey {
    fn midpoint(a: NodeKey, b: NodeKey) -> NodeKey {
        NodeKey((a.0 + b.0) / 2, (a.1 + b.1) / 2)
    }
}

/// Snapshot of a single element of the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub id: ElemId,
    pub level: u8,
    pub parent: Option<ElemId>,
    pub children: Option<[ElemId; 4]>,
    pub active: bool,
    pub origin: [f64; 2],
    pub size: f64,
}

/// Hanging node constrained to the midpoint of a coarse edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HangingConstraint {
    pub node: usize,
    pub parents: [usize; 2],
    pub weights: [f64; 2],
}

/// Elements selected for refinement and derefinement.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MarkSet {
    pub refine: BTreeSet<ElemId>,
    pub derefine: BTreeSet<ElemId>,
}

impl MarkSet {
    pub fn is_empty(&self) -> bool {
        self.refine.is_empty() && self.derefine.is_empty()
    }
}

/// What a call to [`AdaptiveMesh::apply_marks`] changed.
#[derive(Clone, Debug, Default)]
pub struct AdaptChange {
    pub refined: Vec<ElemId>,
    pub derefined: Vec<ElemId>,
}

impl AdaptChange {
    pub fn is_empty(&self) -> bool {
        self.refined.is_empty() && self.derefined.is_empty()
    }
}

enum Coverage {
    Leaf(ElemId),
    Refined,
    Outside,
}

#[derive(Clone, Debug)]
struct Derived {
    active: Vec<ElemId>,
    index: HashMap<ElemId, usize>,
    node_keys: Vec<NodeKey>,
    node_index: HashMap<NodeKey, usize>,
    connectivity: Vec<[usize; 4]>,
    constraints: Result<Vec<HangingConstraint>, MeshError>,
    max_level: u8,
}

#[derive(Clone, Debug)]
pub struct AdaptiveMesh {
    nx: u32,
    ny: u32,
    width: f64,
    height: f64,
    h0: f64,
    leaves: BTreeSet<ElemId>,
    refined: HashSet<ElemId>,
    derived: OnceLock<Derived>,
}

impl AdaptiveMesh {
    pub fn create_uniform(nx: u32, ny: u32, width: f64, height: f64) -> Result<Self, MeshError> {
        if nx == 0 || ny == 0 || !(width > 0.0) || !(height > 0.0) {
            return Err(MeshError::InvalidGrid {
                nx,
                ny,
                width,
                height,
            });
        }
        let dx = width / nx as f64;
        let dy = height / ny as f64;
        if ((dx - dy) / dx).abs() > 1e-12 {
            return Err(MeshError::NonSquare { dx, dy });
        }
        let leaves = (0..nx)
            .flat_map(|ix| (0..ny).map(move |iy| ElemId::new(0, ix, iy)))
            .collect();
        Ok(AdaptiveMesh {
            nx,
            ny,
            width,
            height,
            h0: dx,
            leaves,
            refined: HashSet::new(),
            derived: OnceLock::new(),
        })
    }

    pub fn initial_grid(&self) -> (u32, u32) {
        (self.nx, self.ny)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.width, self.height)
    }

    pub fn initial_size(&self) -> f64 {
        self.h0
    }

    pub fn size_at(&self, level: u8) -> f64 {
        self.h0 / (1u64 << level) as f64
    }

    pub fn max_level(&self) -> u8 {
        self.derived().max_level
    }

    pub fn is_active(&self, id: ElemId) -> bool {
        self.leaves.contains(&id)
    }

    pub fn has_children(&self, id: ElemId) -> bool {
        self.refined.contains(&id)
    }

    pub fn element(&self, id: ElemId) -> Option<Element> {
        let active = self.leaves.contains(&id);
        let has_children = self.refined.contains(&id);
        if !active && !has_children {
            return None;
        }
        let size = self.size_at(id.level);
        Some(Element {
            id,
            level: id.level,
            parent: id.parent(),
            children: has_children.then(|| id.children()),
            active,
            origin: [id.ix as f64 * size, id.iy as f64 * size],
            size,
        })
    }

    /// Active elements in canonical order; density and sensitivity vectors
    /// are indexed by position in this slice.
    pub fn active(&self) -> &[ElemId] {
        &self.derived().active
    }

    pub fn num_active(&self) -> usize {
        self.leaves.len()
    }

    pub fn active_index(&self, id: ElemId) -> Option<usize> {
        self.derived().index.get(&id).copied()
    }

    pub fn center(&self, id: ElemId) -> [f64; 2] {
        let s = self.size_at(id.level);
        [(id.ix as f64 + 0.5) * s, (id.iy as f64 + 0.5) * s]
    }

    pub fn area(&self, id: ElemId) -> f64 {
        let s = self.size_at(id.level);
        s * s
    }

    pub fn num_nodes(&self) -> usize {
        self.derived().node_keys.len()
    }

    pub fn node_keys(&self) -> &[NodeKey] {
        &self.derived().node_keys
    }

    pub fn node_id(&self, key: NodeKey) -> Option<usize> {
        self.derived().node_index.get(&key).copied()
    }

    pub fn node_coords(&self, node: usize) -> [f64; 2] {
        self.key_coords(self.derived().node_keys[node])
    }

    pub fn key_coords(&self, key: NodeKey) -> [f64; 2] {
        let unit = self.h0 / (1u64 << LATTICE_DEPTH) as f64;
        [key.0 as f64 * unit, key.1 as f64 * unit]
    }

    /// Node ids of each active element, counter-clockwise from lower-left.
    pub fn connectivity(&self) -> &[[usize; 4]] {
        &self.derived().connectivity
    }

    /// Hanging-node constraints of the current mesh.
    pub fn hanging_constraints(&self) -> Result<&[HangingConstraint], MeshError> {
        match &self.derived().constraints {
            Ok(c) => Ok(c),
            Err(e) => Err(e.clone()),
        }
    }

    /// Verifies that edge-adjacent active elements differ by at most one level.
    pub fn check_level_one(&self) -> Result<(), MeshError> {
        self.hanging_constraints().map(|_| ())
    }

    pub fn refine_element(&mut self, id: ElemId) -> Result<[ElemId; 4], MeshError> {
        if !self.leaves.contains(&id) {
            return Err(MeshError::NotActive(id));
        }
        if id.level >= LATTICE_DEPTH {
            return Err(MeshError::TooDeep(id.level + 1));
        }
        self.leaves.remove(&id);
        self.refined.insert(id);
        let children = id.children();
        self.leaves.extend(children);
        self.derived = OnceLock::new();
        Ok(children)
    }

    pub fn derefine_children(&mut self, parent: ElemId) -> Result<(), MeshError> {
        if !self.refined.contains(&parent) {
            return Err(MeshError::NotRefined(parent));
        }
        if let Some(&child) = parent.children().iter().find(|c| !self.leaves.contains(c)) {
            return Err(MeshError::ChildNotLeaf { parent, child });
        }
        for c in parent.children() {
            self.leaves.remove(&c);
        }
        self.refined.remove(&parent);
        self.leaves.insert(parent);
        self.derived = OnceLock::new();
        Ok(())
    }

    /// Applies compatibility-checked marks: derefinements first, then refinements.
    pub fn apply_marks(&mut self, marks: &MarkSet) -> Result<AdaptChange, MeshError> {
        let parents: BTreeSet<ElemId> = marks.derefine.iter().filter_map(|e| e.parent()).collect();
        let mut change = AdaptChange::default();
        for p in parents {
            self.derefine_children(p)?;
            change.derefined.push(p);
        }
        for &e in &marks.refine {
            self.refine_element(e)?;
            change.refined.push(e);
        }
        Ok(change)
    }

    /// Active elements (other than `id`) whose centre lies within `r` of the centre of `id`.
    pub fn neighbors_within_radius(&self, id: ElemId, r: f64) -> Result<Vec<ElemId>, MeshError> {
        if !self.is_active(id) {
            return Err(MeshError::NotActive(id));
        }
        if r <= 0.0 {
            return Ok(Vec::new());
        }
        let grid = CenterGrid::new(self, r);
        let c = self.center(id);
        let active = self.active();
        let mut out = Vec::new();
        grid.for_each_within(c, r, |j, _| {
            if active[j] != id {
                out.push(active[j]);
            }
        });
        out.sort();
        Ok(out)
    }

    /// Leaf containing the point; points on shared edges resolve to the upper/right element.
    pub fn locate_point(&self, x: f64, y: f64) -> ElemId {
        let fx = (x / self.h0).clamp(0.0, self.nx as f64);
        let fy = (y / self.h0).clamp(0.0, self.ny as f64);
        let mut id = ElemId::new(
            0,
            (fx.floor() as u32).min(self.nx - 1),
            (fy.floor() as u32).min(self.ny - 1),
        );
        while !self.leaves.contains(&id) {
            debug_assert!(self.refined.contains(&id));
            let scale = (1u64 << (id.level + 1)) as f64;
            let cx = ((fx * scale).floor() as u32)
                .min(id.ix * 2 + 1)
                .max(id.ix * 2);
            let cy = ((fy * scale).floor() as u32)
                .min(id.iy * 2 + 1)
                .max(id.iy * 2);
            id = ElemId::new(id.level + 1, cx, cy);
        }
        id
    }

    /// Adjusts marks so that applying them keeps the mesh level-one compatible.
    ///
    /// Refinement is closed over coarser edge neighbours first. Derefinement
    /// is then restricted to complete sibling groups, and finally any group
    /// whose coarsened parent would sit next to an element two levels finer
    /// is unmarked, repeating until no group changes.
    pub fn enforce_compatibility(&self, marks: &MarkSet) -> MarkSet {
        let mut refine: BTreeSet<ElemId> = marks
            .refine
            .iter()
            .copied()
            .filter(|e| self.leaves.contains(e))
            .collect();

        let mut work: Vec<ElemId> = refine.iter().copied().collect();
        while let Some(e) = work.pop() {
            for side in Side::ALL {
                let Some(n) = e.neighbor(side) else { continue };
                if let Coverage::Leaf(c) = self.coverage(n) {
                    if c.level < e.level && refine.insert(c) {
                        work.push(c);
                    }
                }
            }
        }

        let candidates: BTreeSet<ElemId> = marks
            .derefine
            .iter()
            .copied()
            .filter(|e| e.level > 0 && self.leaves.contains(e) && !refine.contains(e))
            .collect();
        let mut groups: BTreeSet<ElemId> = candidates
            .iter()
            .filter_map(|e| e.parent())
            .filter(|p| p.children().iter().all(|c| candidates.contains(c)))
            .collect();

        loop {
            let denied: Vec<ElemId> = groups
                .iter()
                .copied()
                .filter(|&p| !self.derefine_keeps_level_one(p, &refine, &groups))
                .collect();
            if denied.is_empty() {
                break;
            }
            for p in denied {
                groups.remove(&p);
            }
        }

        MarkSet {
            refine,
            derefine: groups.iter().flat_map(|p| p.children()).collect(),
        }
    }

    fn derefine_keeps_level_one(
        &self,
        parent: ElemId,
        refine: &BTreeSet<ElemId>,
        groups: &BTreeSet<ElemId>,
    ) -> bool {
        for side in Side::ALL {
            let Some(n) = parent.neighbor(side) else {
                continue;
            };
            if !matches!(self.coverage(n), Coverage::Refined) {
                continue;
            }
            for slot in side.opposite().child_slots() {
                let ch = n.children()[slot];
                if self.leaves.contains(&ch) {
                    if refine.contains(&ch) {
                        return false;
                    }
                } else if !groups.contains(&ch) {
                    return false;
                }
            }
        }
        true
    }

    fn coverage(&self, id: ElemId) -> Coverage {
        let shift_nx = (self.nx as u64) << id.level;
        let shift_ny = (self.ny as u64) << id.level;
        if id.ix as u64 >= shift_nx || id.iy as u64 >= shift_ny {
            return Coverage::Outside;
        }
        if self.leaves.contains(&id) {
            return Coverage::Leaf(id);
        }
        if self.refined.contains(&id) {
            return Coverage::Refined;
        }
        let mut cur = id;
        while let Some(p) = cur.parent() {
            if self.leaves.contains(&p) {
                return Coverage::Leaf(p);
            }
            cur = p;
        }
        unreachable!("cell {id} is not covered by the tree")
    }

    fn derived(&self) -> &Derived {
        self.derived.get_or_init(|| self.build_derived())
    }

    fn build_derived(&self) -> Derived {
        let active: Vec<ElemId> = self.leaves.iter().copied().collect();
        let index = active.iter().enumerate().map(|(i, &e)| (e, i)).collect();

        let mut keys: Vec<NodeKey> = active.iter().flat_map(|e| e.corner_keys()).collect();
        keys.sort_unstable();
        keys.dedup();
        let node_index: HashMap<NodeKey, usize> =
            keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let connectivity = active
            .iter()
            .map(|e| e.corner_keys().map(|k| node_index[&k]))
            .collect();
        let max_level = active.iter().map(|e| e.level).max().unwrap_or(0);

        let constraints = self.build_constraints(&active, &node_index);
        Derived {
            active,
            index,
            node_keys: keys,
            node_index,
            connectivity,
            constraints,
            max_level,
        }
    }

    fn build_constraints(
        &self,
        active: &[ElemId],
        node_index: &HashMap<NodeKey, usize>,
    ) -> Result<Vec<HangingConstraint>, MeshError> {
        let mut out = Vec::new();
        for &e in active {
            let corners = e.corner_keys();
            for side in Side::ALL {
                let Some(n) = e.neighbor(side) else { continue };
                if !matches!(self.coverage(n), Coverage::Refined) {
                    continue;
                }
                let kids = n.children();
                for slot in side.opposite().child_slots() {
                    if !self.leaves.contains(&kids[slot]) {
                        return Err(MeshError::LevelTwo {
                            coarse: e,
                            fine: kids[slot],
                        });
                    }
                }
                let [a, b] = side.corner_slots().map(|s| corners[s]);
                let mid = NodeKey::midpoint(a, b);
                out.push(HangingConstraint {
                    node: node_index[&mid],
                    parents: [node_index[&a], node_index[&b]],
                    weights: [0.5, 0.5],
                });
            }
        }
        out.sort_by_key(|c| c.node);
        let constrained: HashSet<usize> = out.iter().map(|c| c.node).collect();
        if let Some(c) = out
            .iter()
            .find(|c| c.parents.iter().any(|p| constrained.contains(p)))
        {
            return Err(MeshError::ConstrainedParent(c.node));
        }
        Ok(out)
    }
}

/// Bucket grid over element centres for fixed-radius queries.
pub struct CenterGrid {
    bucket: f64,
    nbx: usize,
    nby: usize,
    cells: Vec<Vec<usize>>,
    centers: Vec<[f64; 2]>,
}

impl CenterGrid {
    pub fn new(mesh: &AdaptiveMesh, radius: f64) -> Self {
        let finest = mesh.size_at(mesh.max_level());
        let bucket = radius.max(finest);
        let (w, h) = mesh.domain();
        let nbx = ((w / bucket).ceil() as usize).max(1);
        let nby = ((h / bucket).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); nbx * nby];
        let centers: Vec<[f64; 2]> = mesh.active().iter().map(|&e| mesh.center(e)).collect();
        for (i, c) in centers.iter().enumerate() {
            let bx = ((c[0] / bucket) as usize).min(nbx - 1);
            let by = ((c[1] / bucket) as usize).min(nby - 1);
            cells[by * nbx + bx].push(i);
        }
        CenterGrid {
            bucket,
            nbx,
            nby,
            cells,
            centers,
        }
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    /// Calls `f(index, distance)` for every active element with centre distance `<= r`.
    pub fn for_each_within(&self, p: [f64; 2], r: f64, mut f: impl FnMut(usize, f64)) {
        let lo = |v: f64| ((v - r) / self.bucket).floor().max(0.0) as usize;
        let hi = |v: f64, n: usize| (((v + r) / self.bucket).floor().max(0.0) as usize).min(n - 1);
        for by in lo(p[1]).min(self.nby - 1)..=hi(p[1], self.nby) {
            for bx in lo(p[0]).min(self.nbx - 1)..=hi(p[0], self.nbx) {
                for &j in &self.cells[by * self.nbx + bx] {
                    let c = self.centers[j];
                    let d = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)).sqrt();
                    if d <= r {
                        f(j, d);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(nx: u32, ny: u32) -> AdaptiveMesh {
        AdaptiveMesh::create_uniform(nx, ny, nx as f64, ny as f64).unwrap()
    }

    #[test]
    fn uniform_counts() {
        let m = AdaptiveMesh::create_uniform(2, 1, 2.0, 1.0).unwrap();
        assert_eq!(m.num_active(), 2);
        assert_eq!(m.num_nodes(), 6);
        assert!(m.hanging_constraints().unwrap().is_empty());
        assert_eq!(m.max_level(), 0);

        let m = AdaptiveMesh::create_uniform(64, 32, 2.0, 1.0).unwrap();
        assert_eq!(m.num_active(), 2048);
        let m = AdaptiveMesh::create_uniform(256, 128, 2.0, 1.0).unwrap();
        assert_eq!(m.num_active(), 32768);
    }

    #[test]
    fn non_square_rejected() {
        let err = AdaptiveMesh::create_uniform(2, 2, 2.0, 1.0).unwrap_err();
        assert!(matches!(err, MeshError::NonSquare { .. }));
    }

    #[test]
    fn refine_geometry() {
        let mut m = unit_grid(2, 1);
        let kids = m.refine_element(ElemId::new(0, 0, 0)).unwrap();
        assert_eq!(m.num_active(), 5);
        let origins: Vec<[f64; 2]> = kids.iter().map(|&k| m.element(k).unwrap().origin).collect();
        assert_eq!(
            origins,
            vec![[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]]
        );
        for k in kids {
            let el = m.element(k).unwrap();
            assert_eq!(el.size, 0.5);
            assert!(el.active);
            assert_eq!(el.parent, Some(ElemId::new(0, 0, 0)));
        }
        let parent = m.element(ElemId::new(0, 0, 0)).unwrap();
        assert!(!parent.active);
        assert_eq!(parent.children, Some(kids));
    }

    #[test]
    fn refine_all_of_two_by_two() {
        let mut m = unit_grid(2, 2);
        for e in m.active().to_vec() {
            m.refine_element(e).unwrap();
        }
        assert_eq!(m.num_active(), 16);
        assert_eq!(m.max_level(), 1);
        assert!(m.hanging_constraints().unwrap().is_empty());
    }

    #[test]
    fn refine_inactive_is_error() {
        let mut m = unit_grid(2, 1);
        let p = ElemId::new(0, 0, 0);
        m.refine_element(p).unwrap();
        assert_eq!(m.refine_element(p), Err(MeshError::NotActive(p)));
    }

    #[test]
    fn refine_then_derefine_restores() {
        let mut m = unit_grid(3, 3);
        let before = m.active().to_vec();
        let nodes_before = m.node_keys().to_vec();
        let p = ElemId::new(0, 1, 1);
        m.refine_element(p).unwrap();
        assert_eq!(m.hanging_constraints().unwrap().len(), 4);
        m.derefine_children(p).unwrap();
        assert_eq!(m.active(), &before[..]);
        assert_eq!(m.node_keys(), &nodes_before[..]);
        assert!(m.hanging_constraints().unwrap().is_empty());
    }

    #[test]
    fn derefine_with_refined_child_is_error() {
        let mut m = unit_grid(2, 2);
        let p = ElemId::new(0, 0, 0);
        let kids = m.refine_element(p).unwrap();
        m.refine_element(kids[3]).unwrap();
        assert!(matches!(
            m.derefine_children(p),
            Err(MeshError::ChildNotLeaf { .. })
        ));
        assert!(matches!(
            m.derefine_children(ElemId::new(0, 1, 1)),
            Err(MeshError::NotRefined(_))
        ));
    }

    #[test]
    fn one_refined_interior_element_has_four_hanging_nodes() {
        let mut m = unit_grid(3, 3);
        m.refine_element(ElemId::new(0, 1, 1)).unwrap();
        let cons = m.hanging_constraints().unwrap();
        assert_eq!(cons.len(), 4);
        for c in cons {
            let x = m.node_coords(c.node);
            let a = m.node_coords(c.parents[0]);
            let b = m.node_coords(c.parents[1]);
            assert_eq!(x[0], 0.5 * (a[0] + b[0]));
            assert_eq!(x[1], 0.5 * (a[1] + b[1]));
            assert_eq!(c.weights, [0.5, 0.5]);
        }
    }

    #[test]
    fn level_two_detected() {
        let mut m = unit_grid(2, 1);
        let kids = m.refine_element(ElemId::new(0, 0, 0)).unwrap();
        // child 1 is the lower-right quadrant, touching the right level-0 element
        m.refine_element(kids[1]).unwrap();
        assert!(matches!(
            m.check_level_one(),
            Err(MeshError::LevelTwo { .. })
        ));
    }

    #[test]
    fn shared_corners_share_node_ids() {
        let mut m = unit_grid(2, 2);
        m.refine_element(ElemId::new(0, 0, 0)).unwrap();
        // 9 coarse corners + 5 new nodes (4 mid-edge, 1 centre)
        assert_eq!(m.num_nodes(), 14);
        let conn = m.connectivity();
        for (i, &e) in m.active().iter().enumerate() {
            for (k, key) in e.corner_keys().iter().enumerate() {
                assert_eq!(m.node_id(*key), Some(conn[i][k]));
            }
        }
    }

    #[test]
    fn empty_marks_are_identity() {
        let m = unit_grid(4, 2);
        assert_eq!(
            m.enforce_compatibility(&MarkSet::default()),
            MarkSet::default()
        );
    }

    #[test]
    fn partial_sibling_group_is_unmarked() {
        let mut m = unit_grid(2, 2);
        let kids = m.refine_element(ElemId::new(0, 0, 0)).unwrap();
        let marks = MarkSet {
            refine: BTreeSet::new(),
            derefine: kids[..3].iter().copied().collect(),
        };
        let out = m.enforce_compatibility(&marks);
        assert!(out.derefine.is_empty());

        let marks = MarkSet {
            refine: BTreeSet::new(),
            derefine: kids.iter().copied().collect(),
        };
        assert_eq!(m.enforce_compatibility(&marks).derefine.len(), 4);
    }

    #[test]
    fn refining_next_to_coarse_neighbor_pulls_it_in() {
        let mut m = unit_grid(2, 1);
        let kids = m.refine_element(ElemId::new(0, 0, 0)).unwrap();
        let marks = MarkSet {
            refine: [kids[1]].into_iter().collect(),
            derefine: BTreeSet::new(),
        };
        let out = m.enforce_compatibility(&marks);
        assert!(out.refine.contains(&ElemId::new(0, 1, 0)));
        assert!(out.refine.contains(&kids[1]));
        m.apply_marks(&out).unwrap();
        m.check_level_one().unwrap();
    }

    #[test]
    fn derefine_blocked_by_fine_neighbor() {
        let mut m = unit_grid(2, 1);
        let left = m.refine_element(ElemId::new(0, 0, 0)).unwrap();
        let right = m.refine_element(ElemId::new(0, 1, 0)).unwrap();
        m.refine_element(left[1]).unwrap();
        // Coarsening the right element would put level 0 next to level 2.
        let marks = MarkSet {
            refine: BTreeSet::new(),
            derefine: right.iter().copied().collect(),
        };
        assert!(m.enforce_compatibility(&marks).derefine.is_empty());
    }

    #[test]
    fn radius_queries() {
        let m = unit_grid(5, 5);
        let e = ElemId::new(0, 2, 2);
        assert!(m.neighbors_within_radius(e, 0.0).unwrap().is_empty());
        let n = m.neighbors_within_radius(e, 1.1).unwrap();
        let expect: Vec<ElemId> = [(1, 2), (2, 1), (2, 3), (3, 2)]
            .iter()
            .map(|&(x, y)| ElemId::new(0, x, y))
            .collect();
        let mut expect = expect;
        expect.sort();
        assert_eq!(n, expect);
    }

    #[test]
    fn locate_point_descends() {
        let mut m = unit_grid(2, 1);
        m.refine_element(ElemId::new(0, 0, 0)).unwrap();
        assert_eq!(m.locate_point(0.75, 0.25), ElemId::new(1, 1, 0));
        assert_eq!(m.locate_point(1.5, 0.5), ElemId::new(0, 1, 0));
        assert_eq!(m.locate_point(2.0, 1.0), ElemId::new(0, 1, 0));
    }
}
