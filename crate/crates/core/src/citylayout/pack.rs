//! Greedy shelf packing.
//!
//! Items are sorted by area (largest first, ties by name) and laid out
//! left to right on shelves. A shelf takes items while their summed widths
//! stay within `ceil(sqrt(total_area)) * 1.2`; gaps are not counted against
//! that target. Every item keeps a gap of [`GAP`] to its neighbours and to
//! the bounding rectangle.

use serde::{Deserialize, Serialize};

pub const GAP: f64 = 0.5;
const SHELF_WIDTH_FACTOR: f64 = 1.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub z: f64,
    pub width: f64,
    pub depth: f64,
}

impl Rect {
    pub fn new(x: f64, z: f64, width: f64, depth: f64) -> Self {
        Rect { x, z, width, depth }
    }

    pub fn max_x(&self) -> f64 {
        self.x + self.width
    }

    pub fn max_z(&self) -> f64 {
        self.z + self.depth
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.width / 2.0, self.z + self.depth / 2.0)
    }

    pub fn translated(&self, dx: f64, dz: f64) -> Rect {
        Rect {
            x: self.x + dx,
            z: self.z + dz,
            ..*self
        }
    }

    pub fn inset(&self, margin: f64) -> Rect {
        Rect {
            x: self.x + margin,
            z: self.z + margin,
            width: self.width - 2.0 * margin,
            depth: self.depth - 2.0 * margin,
        }
    }

    /// True when `other` lies inside `self`, allowing `eps` of rounding.
    pub fn contains(&self, other: &Rect, eps: f64) -> bool {
        other.x >= self.x - eps
            && other.z >= self.z - eps
            && other.max_x() <= self.max_x() + eps
            && other.max_z() <= self.max_z() + eps
    }

    /// Interiors intersect.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x < other.max_x()
            && other.x < self.max_x()
            && self.z < other.max_z()
            && other.z < self.max_z()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackItem {
    pub name: String,
    pub width: f64,
    pub depth: f64,
}

impl PackItem {
    pub fn new(name: impl Into<String>, width: f64, depth: f64) -> Self {
        PackItem {
            name: name.into(),
            width,
            depth,
        }
    }

    fn area(&self) -> f64 {
        self.width * self.depth
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Packing {
    /// One rectangle per input item, in input order, relative to the
    /// bounding rectangle's origin.
    pub placements: Vec<Rect>,
    pub width: f64,
    pub depth: f64,
}

pub fn pack(items: &[PackItem]) -> Packing {
    if items.is_empty() {
        return Packing {
            placements: Vec::new(),
            width: 2.0 * GAP,
            depth: 2.0 * GAP,
        };
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .area()
            .total_cmp(&items[a].area())
            .then_with(|| items[a].name.cmp(&items[b].name))
    });
    // Summed in sorted order so the result does not depend on input order.
    let total_area: f64 = order.iter().map(|&i| items[i].area()).sum();
    let target_width = total_area.sqrt().ceil() * SHELF_WIDTH_FACTOR;

    let mut placements = vec![Rect::default(); items.len()];
    let mut cursor_x = GAP;
    let mut shelf_z = GAP;
    let mut shelf_depth = 0.0_f64;
    let mut shelf_items_width = 0.0_f64;
    let mut width = 0.0_f64;
    for i in order {
        let item = &items[i];
        if shelf_items_width > 0.0 && shelf_items_width + item.width > target_width {
            shelf_z += shelf_depth + GAP;
            cursor_x = GAP;
            shelf_depth = 0.0;
            shelf_items_width = 0.0;
        }
        shelf_items_width += item.width;
        placements[i] = Rect::new(cursor_x, shelf_z, item.width, item.depth);
        cursor_x += item.width + GAP;
        shelf_depth = shelf_depth.max(item.depth);
        width = width.max(cursor_x);
    }
    Packing {
        placements,
        width,
        depth: shelf_z + shelf_depth + GAP,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_item_gets_gap_on_every_side() {
        let p = pack(&[PackItem::new("a", 3.0, 3.0)]);
        assert_eq!(p.width, 3.0 + 2.0 * GAP);
        assert_eq!(p.depth, 3.0 + 2.0 * GAP);
        assert_eq!(p.placements[0], Rect::new(GAP, GAP, 3.0, 3.0));
    }

    #[test]
    fn two_unit_squares_sit_side_by_side() {
        // Total area 2, target width ceil(sqrt 2) * 1.2 = 2.4 >= 1 + 1.
        let p = pack(&[PackItem::new("a", 1.0, 1.0), PackItem::new("b", 1.0, 1.0)]);
        assert!(!p.placements[0].overlaps(&p.placements[1]));
        assert_eq!(p.placements[0], Rect::new(0.5, 0.5, 1.0, 1.0));
        assert_eq!(p.placements[1], Rect::new(2.0, 0.5, 1.0, 1.0));
        assert_eq!((p.width, p.depth), (3.5, 2.0));
    }

    #[test]
    fn shelves_wrap_at_target_width() {
        // Four unit squares: target ceil(2) * 1.2 = 2.4, so two per shelf.
        let p = pack(&(0..4).map(|i| PackItem::new(format!("{i}"), 1.0, 1.0)).collect::<Vec<_>>());
        let zs: Vec<f64> = p.placements.iter().map(|r| r.z).collect();
        assert_eq!(zs, vec![0.5, 0.5, 2.0, 2.0]);
        assert_eq!((p.width, p.depth), (3.5, 3.5));
    }

    #[test]
    fn larger_items_first_then_name() {
        let p = pack(&[
            PackItem::new("small", 1.0, 1.0),
            PackItem::new("b", 2.0, 2.0),
            PackItem::new("a", 2.0, 2.0),
        ]);
        // "a" wins the tie and lands first.
        assert_eq!(p.placements[2].x, GAP);
        assert_eq!(p.placements[2].z, GAP);
        assert!(p.placements[1].x > p.placements[2].x || p.placements[1].z > p.placements[2].z);
    }

    fn items() -> impl Strategy<Value = Vec<PackItem>> {
        prop::collection::vec((0.1f64..20.0, 0.1f64..20.0), 1..60).prop_map(|dims| {
            dims.into_iter()
                .enumerate()
                .map(|(i, (w, d))| PackItem::new(format!("i{i:03}"), w, d))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn placements_are_disjoint_contained_and_deterministic(items in items()) {
            let p = pack(&items);
            let bound = Rect::new(0.0, 0.0, p.width, p.depth).inset(GAP);
            for (i, a) in p.placements.iter().enumerate() {
                prop_assert!(bound.contains(a, 1e-9));
                prop_assert_eq!((a.width, a.depth), (items[i].width, items[i].depth));
                for b in &p.placements[i + 1..] {
                    prop_assert!(!a.overlaps(b));
                }
            }
            let mut reversed = items.clone();
            reversed.reverse();
            let q = pack(&reversed);
            prop_assert_eq!((p.width, p.depth), (q.width, q.depth));
            let n = items.len();
            for i in 0..n {
                prop_assert_eq!(p.placements[i], q.placements[n - 1 - i]);
            }
        }
    }
}
