//! Software-city geometry.
//!
//! Applications become foundations, packages nested districts, classes
//! square buildings and aggregated calls arcs between building centers.
//! Layout is bottom-up: every container shelf-packs its children and is
//! sized to the packing's bounding rectangle. All iteration follows the
//! sorted order of the landscape maps, so equal landscapes yield
//! bit-identical scenes.
//!
//! Colors are not part of the geometry; each element carries a [`Role`] tag
//! that the viewer maps onto its palette.

pub mod pack;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use pack::{pack, PackItem, Packing, Rect, GAP};

use crate::landscape::{AppKey, ClassEntity, Endpoint, Landscape, Package};

/// Inset applied by every container to its children.
pub const MARGIN: f64 = GAP;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Foundation,
    DistrictEven,
    DistrictOdd,
    Building,
    Arc,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityScene {
    pub foundations: Vec<Foundation>,
    pub arcs: Vec<Arc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Foundation {
    pub id: String,
    pub service_name: String,
    pub instance_id: Option<String>,
    pub rect: Rect,
    pub role: Role,
    pub districts: Vec<District>,
    /// Classes that live outside any package.
    pub buildings: Vec<Building>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct District {
    pub id: String,
    pub name: String,
    /// Dotted package path.
    pub package: String,
    pub rect: Rect,
    pub elevation_level: u32,
    pub role: Role,
    pub synthetic: bool,
    pub children: Vec<District>,
    pub buildings: Vec<Building>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub id: String,
    pub name: String,
    pub fqn: String,
    pub rect: Rect,
    pub height: f64,
    /// Elevation level of the district (or foundation, 0) it stands on.
    pub base_level: u32,
    pub role: Role,
    pub synthetic: bool,
    pub method_count: usize,
    pub call_count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub from_building: String,
    pub to_building: String,
    pub from: Point,
    pub to: Point,
    pub width: f64,
    pub call_count: u64,
    pub cross_application: bool,
    pub caller: Endpoint,
    pub callee: Endpoint,
    pub role: Role,
}

/// Footprint side and height of a class building.
pub fn building_dimensions(class: &ClassEntity) -> (f64, f64) {
    let side = 1.0 + (class.methods.len() as f64).sqrt();
    let height = 1.0 + (class.call_count as f64).ln_1p();
    (side, height)
}

pub fn arc_width(call_count: u64) -> f64 {
    1.0 + (1.0 + call_count as f64).log10()
}

fn building_id(app: &AppKey, fqn: &str) -> String {
    format!("{}/{}", app.label(), fqn)
}

fn district_role(level: u32, synthetic: bool) -> Role {
    match (synthetic, level % 2) {
        (true, _) => Role::Synthetic,
        (false, 0) => Role::DistrictEven,
        (false, _) => Role::DistrictOdd,
    }
}

fn make_building(app: &AppKey, class: &ClassEntity, base_level: u32) -> Building {
    let (side, height) = building_dimensions(class);
    Building {
        id: building_id(app, &class.fqn),
        name: class.name.clone(),
        fqn: class.fqn.clone(),
        rect: Rect::new(0.0, 0.0, side, side),
        height,
        base_level,
        role: if class.synthetic {
            Role::Synthetic
        } else {
            Role::Building
        },
        synthetic: class.synthetic,
        method_count: class.methods.len(),
        call_count: class.call_count,
    }
}

fn translate_building(b: &mut Building, dx: f64, dz: f64) {
    b.rect = b.rect.translated(dx, dz);
}

fn translate_district(d: &mut District, dx: f64, dz: f64) {
    d.rect = d.rect.translated(dx, dz);
    for b in &mut d.buildings {
        translate_building(b, dx, dz);
    }
    for c in &mut d.children {
        translate_district(c, dx, dz);
    }
}

/// Packs districts and buildings into one container and returns its size.
/// Children end up translated into the container's local frame.
fn pack_children(districts: &mut [District], buildings: &mut [Building]) -> (f64, f64) {
    // Districts and buildings share one packing; prefixes keep their names
    // apart for tie breaking.
    let items: Vec<PackItem> = districts
        .iter()
        .map(|d| PackItem::new(format!("p:{}", d.name), d.rect.width, d.rect.depth))
        .chain(
            buildings
                .iter()
                .map(|b| PackItem::new(format!("c:{}", b.name), b.rect.width, b.rect.depth)),
        )
        .collect();
    let Packing {
        placements,
        width,
        depth,
    } = pack(&items);
    let (district_slots, building_slots) = placements.split_at(districts.len());
    for (d, slot) in districts.iter_mut().zip(district_slots) {
        translate_district(d, slot.x - d.rect.x, slot.z - d.rect.z);
    }
    for (b, slot) in buildings.iter_mut().zip(building_slots) {
        translate_building(b, slot.x - b.rect.x, slot.z - b.rect.z);
    }
    (width, depth)
}

fn layout_package(app: &AppKey, pkg: &Package, parent_path: &str, level: u32) -> District {
    let path = if parent_path.is_empty() {
        pkg.name.clone()
    } else {
        format!("{parent_path}.{}", pkg.name)
    };
    let mut children: Vec<District> = pkg
        .packages
        .values()
        .map(|p| layout_package(app, p, &path, level + 1))
        .collect();
    let mut buildings: Vec<Building> = pkg
        .classes
        .values()
        .map(|c| make_building(app, c, level))
        .collect();
    let (width, depth) = pack_children(&mut children, &mut buildings);
    District {
        id: format!("{}/{}", app.label(), path),
        name: pkg.name.clone(),
        package: path,
        rect: Rect::new(0.0, 0.0, width, depth),
        elevation_level: level,
        role: district_role(level, pkg.synthetic),
        synthetic: pkg.synthetic,
        children,
        buildings,
    }
}

fn collect_centers(d: &District, out: &mut HashMap<String, Point>) {
    for b in &d.buildings {
        let (x, z) = b.rect.center();
        out.insert(b.id.clone(), Point { x, z });
    }
    for c in &d.children {
        collect_centers(c, out);
    }
}

/// Lays out a landscape as a city. Foundations sit at level 0, top-level
/// districts at level 1.
pub fn layout(landscape: &Landscape) -> CityScene {
    let mut foundations: Vec<Foundation> = landscape
        .applications
        .values()
        .map(|app| {
            let mut districts: Vec<District> = app
                .packages
                .values()
                .map(|p| layout_package(&app.key, p, "", 1))
                .collect();
            let mut buildings: Vec<Building> = app
                .classes
                .values()
                .map(|c| make_building(&app.key, c, 0))
                .collect();
            let (width, depth) = pack_children(&mut districts, &mut buildings);
            Foundation {
                id: app.key.label(),
                service_name: app.key.service_name.clone(),
                instance_id: app.key.instance_id.clone(),
                rect: Rect::new(0.0, 0.0, width, depth),
                role: Role::Foundation,
                districts,
                buildings,
            }
        })
        .collect();

    let items: Vec<PackItem> = foundations
        .iter()
        .map(|f| PackItem::new(f.id.clone(), f.rect.width, f.rect.depth))
        .collect();
    if !items.is_empty() {
        let packing = pack(&items);
        for (f, slot) in foundations.iter_mut().zip(&packing.placements) {
            f.rect = f.rect.translated(slot.x, slot.z);
            for d in &mut f.districts {
                translate_district(d, slot.x, slot.z);
            }
            for b in &mut f.buildings {
                translate_building(b, slot.x, slot.z);
            }
        }
    }

    let mut centers = HashMap::new();
    for f in &foundations {
        for b in &f.buildings {
            let (x, z) = b.rect.center();
            centers.insert(b.id.clone(), Point { x, z });
        }
        for d in &f.districts {
            collect_centers(d, &mut centers);
        }
    }

    let arcs = landscape
        .communication_edges()
        .filter_map(|edge| {
            let from_building = building_id(&edge.caller.app, &edge.caller.class_fqn);
            let to_building = building_id(&edge.callee.app, &edge.callee.class_fqn);
            let from = *centers.get(&from_building)?;
            let to = *centers.get(&to_building)?;
            Some(Arc {
                from_building,
                to_building,
                from,
                to,
                width: arc_width(edge.call_count),
                call_count: edge.call_count,
                cross_application: edge.cross_application,
                caller: edge.caller,
                callee: edge.callee,
                role: Role::Arc,
            })
        })
        .collect();

    CityScene { foundations, arcs }
}

impl CityScene {
    pub fn building_count(&self) -> usize {
        fn count(d: &District) -> usize {
            d.buildings.len() + d.children.iter().map(count).sum::<usize>()
        }
        self.foundations
            .iter()
            .map(|f| f.buildings.len() + f.districts.iter().map(count).sum::<usize>())
            .sum()
    }

    pub fn district_count(&self) -> usize {
        fn count(d: &District) -> usize {
            1 + d.children.iter().map(count).sum::<usize>()
        }
        self.foundations
            .iter()
            .map(|f| f.districts.iter().map(count).sum::<usize>())
            .sum()
    }

    /// Checks containment, sibling disjointness, nesting levels and positive
    /// building heights. Returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        const EPS: f64 = 1e-9;

        fn check_siblings(rects: &[(&str, Rect)]) -> Result<(), String> {
            for (i, (a, ra)) in rects.iter().enumerate() {
                for (b, rb) in &rects[i + 1..] {
                    if ra.overlaps(rb) {
                        return Err(format!("{a} overlaps {b}"));
                    }
                }
            }
            Ok(())
        }

        fn check_container(
            id: &str,
            rect: &Rect,
            level: u32,
            districts: &[District],
            buildings: &[Building],
        ) -> Result<(), String> {
            let inner = rect.inset(MARGIN);
            let mut rects: Vec<(&str, Rect)> = Vec::new();
            for d in districts {
                if !inner.contains(&d.rect, EPS) {
                    return Err(format!("{} escapes {id}", d.id));
                }
                if d.elevation_level != level + 1 {
                    return Err(format!("{} has level {} under level {level}", d.id, d.elevation_level));
                }
                rects.push((&d.id, d.rect));
                check_container(&d.id, &d.rect, d.elevation_level, &d.children, &d.buildings)?;
            }
            for b in buildings {
                if !inner.contains(&b.rect, EPS) {
                    return Err(format!("{} escapes {id}", b.id));
                }
                if b.height.is_nan() || b.height <= 0.0 || b.rect.width != b.rect.depth {
                    return Err(format!("{} is not a positive square cuboid", b.id));
                }
                if b.base_level != level {
                    return Err(format!("{} stands on the wrong level", b.id));
                }
                rects.push((&b.id, b.rect));
            }
            check_siblings(&rects)
        }

        let mut ground: Vec<(&str, Rect)> = Vec::new();
        for f in &self.foundations {
            check_container(&f.id, &f.rect, 0, &f.districts, &f.buildings)?;
            ground.push((&f.id, f.rect));
        }
        check_siblings(&ground)?;
        for arc in &self.arcs {
            if arc.width.is_nan() || arc.width <= 0.0 {
                return Err("arc with non-positive width".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::Application;
    use crate::span_model::CodeLocation;

    fn class(methods: &[&str], calls: u64) -> ClassEntity {
        ClassEntity {
            name: "C".into(),
            fqn: "C".into(),
            methods: methods.iter().map(|s| s.to_string()).collect(),
            call_count: calls,
            synthetic: false,
        }
    }

    #[test]
    fn building_dimension_examples() {
        assert_eq!(building_dimensions(&class(&["a"], 0)), (2.0, 1.0));
        assert_eq!(building_dimensions(&class(&["a", "b", "c", "d"], 0)), (3.0, 1.0));
    }

    #[test]
    fn height_never_decreases_with_calls() {
        let mut last = 0.0;
        let mut calls = 0u64;
        while calls <= 1_000_000 {
            let (_, h) = building_dimensions(&class(&["a"], calls));
            assert!(h >= last, "height dropped at {calls}");
            last = h;
            calls += if calls < 1000 { 1 } else { 997 };
        }
    }

    #[test]
    fn arc_width_is_monotone_and_positive() {
        assert_eq!(arc_width(0), 1.0);
        assert!((arc_width(9) - 2.0).abs() < 1e-12);
        let mut last = 0.0;
        for n in 0..5000u64 {
            let w = arc_width(n);
            assert!(w > 0.0 && w >= last);
            last = w;
        }
    }

    #[test]
    fn empty_landscape_has_empty_scene() {
        let scene = layout(&Landscape::default());
        assert!(scene.foundations.is_empty());
        assert!(scene.arcs.is_empty());
    }

    #[test]
    fn one_class_in_one_package() {
        let key = AppKey::new("app", None);
        let mut app = Application::new(key.clone());
        let c = app.class_mut(&CodeLocation {
            package_path: vec!["org".into()],
            class_name: "Main".into(),
            method_name: "run".into(),
            synthetic: false,
        });
        c.methods.insert("run".into());
        c.call_count = 1;
        let mut l = Landscape::default();
        l.applications.insert(key, app);
        let scene = layout(&l);
        assert_eq!(scene.foundations.len(), 1);
        let f = &scene.foundations[0];
        assert_eq!(f.districts.len(), 1);
        assert_eq!(f.districts[0].buildings.len(), 1);
        assert_eq!(f.districts[0].elevation_level, 1);
        assert_eq!(f.districts[0].role, Role::DistrictOdd);
        assert_eq!(f.districts[0].buildings[0].fqn, "org.Main");
        // 2x2 building -> 3x3 district -> 4x4 foundation.
        assert_eq!(f.districts[0].rect.width, 3.0);
        assert_eq!(f.rect, Rect::new(0.5, 0.5, 4.0, 4.0));
        scene.check_invariants().unwrap();
    }
}
