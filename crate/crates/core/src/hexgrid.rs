//! Hexagonal service-region geometry.
//!
//! Grids are addressed with axial coordinates `(q, r)`; the implicit third
//! cube axis is `s = -q - r`. Distances are ring counts on the infinite
//! lattice, so a courier may cut across grids outside the region.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DomainError;

/// Travel time for one unit of hex distance.
pub const MINUTES_PER_UNIT: u32 = 3;

/// Axial neighbor offsets in canonical slot order.
pub const NEIGHBOR_OFFSETS: [HexCoord; 6] = [
    HexCoord::new(1, 0),
    HexCoord::new(1, -1),
    HexCoord::new(0, -1),
    HexCoord::new(-1, 0),
    HexCoord::new(-1, 1),
    HexCoord::new(0, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct HexCoord {
    pub q: i32,
    pub r: i32,
}

impl HexCoord {
    pub const ORIGIN: Self = Self::new(0, 0);

    pub const fn new(q: i32, r: i32) -> Self {
        Self { q, r }
    }

    pub const fn s(&self) -> i32 {
        -self.q - self.r
    }

    /// The neighbor in canonical slot `slot` (0..6).
    pub const fn neighbor(&self, slot: usize) -> Self {
        let o = NEIGHBOR_OFFSETS[slot];
        Self::new(self.q + o.q, self.r + o.r)
    }

    pub fn distance(&self, other: &Self) -> u32 {
        hex_distance(*self, *other)
    }
}

impl fmt::Display for HexCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.q, self.r)
    }
}

/// Ring distance `(|dq| + |dr| + |dq + dr|) / 2`.
pub fn hex_distance(a: HexCoord, b: HexCoord) -> u32 {
    let dq = (a.q - b.q) as i64;
    let dr = (a.r - b.r) as i64;
    ((dq.abs() + dr.abs() + (dq + dr).abs()) / 2) as u32
}

pub fn travel_minutes(a: HexCoord, b: HexCoord) -> u32 {
    MINUTES_PER_UNIT * hex_distance(a, b)
}

/// One shortest path from `a` to `b`, both endpoints included.
///
/// At every step the lowest canonical slot that reduces the remaining
/// distance is taken, so the result is deterministic.
pub fn shortest_path(a: HexCoord, b: HexCoord) -> Vec<HexCoord> {
    let mut path = Vec::with_capacity(hex_distance(a, b) as usize + 1);
    let mut at = a;
    path.push(at);
    while at != b {
        let remaining = hex_distance(at, b);
        let next = (0..6)
            .map(|slot| at.neighbor(slot))
            .find(|n| hex_distance(*n, b) + 1 == remaining)
            .expect("a distance-reducing neighbor always exists on the lattice");
        path.push(next);
        at = next;
    }
    path
}

/// External grid label, stable across files and logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridId(pub u32);

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The set of hex grids a platform operates on.
///
/// Grids keep their insertion order; per-grid arrays elsewhere in the crate
/// are indexed by that position (see [`ServiceRegion::index_of`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegionDoc", into = "RegionDoc")]
pub struct ServiceRegion {
    layout_name: String,
    ids: Vec<GridId>,
    coords: Vec<HexCoord>,
    restaurant: Vec<bool>,
    by_id: BTreeMap<GridId, usize>,
    by_coord: BTreeMap<HexCoord, usize>,
    /// Per grid index, the in-region neighbor index for each canonical slot.
    adjacency: Vec<[Option<usize>; 6]>,
}

/// One row of the serialized region: `(id, q, r, is_restaurant)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub id: GridId,
    pub q: i32,
    pub r: i32,
    pub is_restaurant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionDoc {
    pub layout_name: String,
    pub grids: Vec<GridEntry>,
}

impl TryFrom<RegionDoc> for ServiceRegion {
    type Error = DomainError;

    fn try_from(doc: RegionDoc) -> Result<Self, Self::Error> {
        ServiceRegion::new(doc.layout_name, doc.grids)
    }
}

impl From<ServiceRegion> for RegionDoc {
    fn from(region: ServiceRegion) -> Self {
        RegionDoc {
            grids: region.entries().collect(),
            layout_name: region.layout_name,
        }
    }
}

impl ServiceRegion {
    pub fn new(layout_name: impl Into<String>, entries: Vec<GridEntry>) -> Result<Self, DomainError> {
        if entries.is_empty() {
            return Err(DomainError::EmptyRegion);
        }
        let mut by_id = BTreeMap::new();
        let mut by_coord = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.id, i).is_some() {
                return Err(DomainError::DuplicateGridId(e.id));
            }
            let c = HexCoord::new(e.q, e.r);
            if by_coord.insert(c, i).is_some() {
                return Err(DomainError::DuplicateCoord(c));
            }
        }
        let coords: Vec<HexCoord> = entries.iter().map(|e| HexCoord::new(e.q, e.r)).collect();
        let adjacency = coords
            .iter()
            .map(|c| {
                let mut slots = [None; 6];
                for (slot, s) in slots.iter_mut().enumerate() {
                    *s = by_coord.get(&c.neighbor(slot)).copied();
                }
                slots
            })
            .collect();
        let region = ServiceRegion {
            layout_name: layout_name.into(),
            ids: entries.iter().map(|e| e.id).collect(),
            restaurant: entries.iter().map(|e| e.is_restaurant).collect(),
            coords,
            by_id,
            by_coord,
            adjacency,
        };
        if !region.is_connected() {
            return Err(DomainError::DisconnectedRegion);
        }
        Ok(region)
    }

    /// Offset-rectangle layout (odd rows shifted right) converted to axial
    /// coordinates. Ids run row-major from 1, and the restaurant grids are
    /// all grids off the outer border.
    pub fn offset_rectangle(cols: u32, rows: u32) -> Result<Self, DomainError> {
        if cols == 0 || rows == 0 {
            return Err(DomainError::InvalidDimensions { cols, rows });
        }
        let mut entries = Vec::with_capacity((cols * rows) as usize);
        for row in 0..rows as i32 {
            for col in 0..cols as i32 {
                let q = col - (row - (row & 1)) / 2;
                let border = row == 0 || col == 0 || row == rows as i32 - 1 || col == cols as i32 - 1;
                entries.push(GridEntry {
                    id: GridId((row * cols as i32 + col + 1) as u32),
                    q,
                    r: row,
                    is_restaurant: !border,
                });
            }
        }
        Self::new(alloc::format!("offset-rect-{cols}x{rows}"), entries)
    }

    /// The default 5x5 service region with 9 central restaurant grids
    /// (labels 7, 8, 9, 12, 13, 14, 17, 18, 19).
    pub fn default_5x5() -> Self {
        Self::offset_rectangle(5, 5).expect("5x5 layout is valid")
    }

    pub fn layout_name(&self) -> &str {
        &self.layout_name
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[GridId] {
        &self.ids
    }

    pub fn coords(&self) -> &[HexCoord] {
        &self.coords
    }

    pub fn entries(&self) -> impl Iterator<Item = GridEntry> + '_ {
        self.ids.iter().enumerate().map(move |(i, id)| GridEntry {
            id: *id,
            q: self.coords[i].q,
            r: self.coords[i].r,
            is_restaurant: self.restaurant[i],
        })
    }

    pub fn index_of(&self, id: GridId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn index_at(&self, c: HexCoord) -> Option<usize> {
        self.by_coord.get(&c).copied()
    }

    pub fn id_at(&self, c: HexCoord) -> Option<GridId> {
        self.index_at(c).map(|i| self.ids[i])
    }

    pub fn contains(&self, c: HexCoord) -> bool {
        self.by_coord.contains_key(&c)
    }

    pub fn contains_id(&self, id: GridId) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Panics on an unknown id; callers validate ids at the boundary.
    pub fn coord(&self, id: GridId) -> HexCoord {
        self.coords[self.idx(id)]
    }

    pub(crate) fn idx(&self, id: GridId) -> usize {
        match self.by_id.get(&id) {
            Some(i) => *i,
            None => panic!("grid {id} is not part of region {}", self.layout_name),
        }
    }

    pub fn is_restaurant(&self, id: GridId) -> bool {
        self.index_of(id).is_some_and(|i| self.restaurant[i])
    }

    pub fn restaurant_ids(&self) -> impl Iterator<Item = GridId> + '_ {
        self.ids.iter().zip(&self.restaurant).filter(|(_, r)| **r).map(|(id, _)| *id)
    }

    pub fn restaurant_count(&self) -> usize {
        self.restaurant.iter().filter(|r| **r).count()
    }

    pub fn distance(&self, a: GridId, b: GridId) -> u32 {
        hex_distance(self.coord(a), self.coord(b))
    }

    pub fn travel_minutes(&self, a: GridId, b: GridId) -> u32 {
        MINUTES_PER_UNIT * self.distance(a, b)
    }

    /// Neighbor slots of `g`; out-of-region slots are `None`.
    pub fn neighbors(&self, g: HexCoord) -> Result<[(usize, Option<HexCoord>); 6], DomainError> {
        let i = self.index_at(g).ok_or(DomainError::OutsideRegion(g))?;
        let adj = &self.adjacency[i];
        Ok(core::array::from_fn(|slot| (slot, adj[slot].map(|j| self.coords[j]))))
    }

    /// Neighbor ids of `id` by slot.
    pub fn neighbor_ids(&self, id: GridId) -> [Option<GridId>; 6] {
        let adj = &self.adjacency[self.idx(id)];
        core::array::from_fn(|slot| adj[slot].map(|j| self.ids[j]))
    }

    pub fn adjacency(&self) -> &[[Option<usize>; 6]] {
        &self.adjacency
    }

    /// Grid indices of the immediate neighborhood, the grid itself first.
    pub fn neighborhood_indices(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        core::iter::once(index).chain(self.adjacency[index].iter().flatten().copied())
    }

    /// Path between two region grids as grid coordinates.
    pub fn path(&self, a: GridId, b: GridId) -> Vec<HexCoord> {
        shortest_path(self.coord(a), self.coord(b))
    }

    fn is_connected(&self) -> bool {
        let n = self.coords.len();
        let mut seen = alloc::vec![false; n];
        let mut stack = alloc::vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for j in self.adjacency[i].iter().flatten() {
                if !seen[*j] {
                    seen[*j] = true;
                    count += 1;
                    stack.push(*j);
                }
            }
        }
        count == n
    }
}
