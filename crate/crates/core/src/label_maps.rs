//! Instance and class label maps, connected components, IoU and
//! per-class nucleus counting.
//!
//! Class coding used throughout the crate (and in every file it reads or
//! writes): `0` background, `1` epithelial, `2` lymphocyte, `3` plasma,
//! `4` eosinophil, `5` neutrophil, `6` connective tissue.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, AddAssign, Index};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Orientation, Raster};

pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum NucleusClass {
    Epithelial = 1,
    Lymphocyte = 2,
    Plasma = 3,
    Eosinophil = 4,
    Neutrophil = 5,
    Connective = 6,
}

impl NucleusClass {
    pub const ALL: [NucleusClass; NUM_CLASSES] = [
        NucleusClass::Epithelial,
        NucleusClass::Lymphocyte,
        NucleusClass::Plasma,
        NucleusClass::Eosinophil,
        NucleusClass::Neutrophil,
        NucleusClass::Connective,
    ];

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1..=6 => Some(Self::ALL[id as usize - 1]),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Zero-based position in [`NucleusClass::ALL`].
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            NucleusClass::Epithelial => "epithelial",
            NucleusClass::Lymphocyte => "lymphocyte",
            NucleusClass::Plasma => "plasma",
            NucleusClass::Eosinophil => "eosinophil",
            NucleusClass::Neutrophil => "neutrophil",
            NucleusClass::Connective => "connective",
        }
    }
}

impl fmt::Display for NucleusClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-pixel instance ids; `0` is background. Ids need not be contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InstanceMap(Raster<u32>);

impl InstanceMap {
    pub fn new(raster: Raster<u32>) -> Self {
        InstanceMap(raster)
    }

    pub fn from_vec(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        Raster::from_vec(width, height, ids).map(InstanceMap)
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Raster::filled(width, height, 0).map(InstanceMap)
    }

    pub fn raster(&self) -> &Raster<u32> {
        &self.0
    }

    pub fn into_raster(self) -> Raster<u32> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn ids_slice(&self) -> &[u32] {
        self.0.as_slice()
    }

    /// Distinct non-zero ids, ascending.
    pub fn ids(&self) -> BTreeSet<u32> {
        self.0.as_slice().iter().copied().filter(|&v| v != 0).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.ids().len()
    }

    /// Linear pixel indices of every instance.
    pub fn pixel_sets(&self) -> BTreeMap<u32, BTreeSet<usize>> {
        let mut sets: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
        for (i, &v) in self.0.as_slice().iter().enumerate() {
            if v != 0 {
                sets.entry(v).or_default().insert(i);
            }
        }
        sets
    }

    pub fn orient(&self, o: Orientation) -> Self {
        InstanceMap(o.apply(&self.0))
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        self.0.resize_nearest(width, height).map(InstanceMap)
    }
}

/// Per-pixel class ids in `0..=6`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassMap(Raster<u8>);

impl ClassMap {
    pub fn new(raster: Raster<u8>) -> Result<Self> {
        if let Some(&bad) = raster.as_slice().iter().find(|&&v| v as usize > NUM_CLASSES) {
            return Err(Error::Range {
                what: "class map",
                value: bad as u64,
            });
        }
        Ok(ClassMap(raster))
    }

    pub fn from_vec(width: usize, height: usize, classes: Vec<u8>) -> Result<Self> {
        Self::new(Raster::from_vec(width, height, classes)?)
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Raster::filled(width, height, 0).map(ClassMap)
    }

    pub fn raster(&self) -> &Raster<u8> {
        &self.0
    }

    pub fn into_raster(self) -> Raster<u8> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn classes_slice(&self) -> &[u8] {
        self.0.as_slice()
    }

    pub fn orient(&self, o: Orientation) -> Self {
        ClassMap(o.apply(&self.0))
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        self.0.resize_nearest(width, height).map(ClassMap)
    }
}

/// Nucleus counts per class, indexed by [`NucleusClass::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Composition(pub [u64; NUM_CLASSES]);

impl Composition {
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn get(&self, class: NucleusClass) -> u64 {
        self.0[class.index()]
    }
}

impl Index<NucleusClass> for Composition {
    type Output = u64;
    fn index(&self, class: NucleusClass) -> &u64 {
        &self.0[class.index()]
    }
}

impl Add for Composition {
    type Output = Composition;
    fn add(mut self, rhs: Composition) -> Composition {
        self += rhs;
        self
    }
}

impl AddAssign for Composition {
    fn add_assign(&mut self, rhs: Composition) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl std::iter::Sum for Composition {
    fn sum<I: Iterator<Item = Composition>>(iter: I) -> Self {
        iter.fold(Composition::default(), Add::add)
    }
}

/// Inclusive pixel bounds `(min_x, min_y, max_x, max_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: usize,
    pub min_y: usize,
    pub max_x: usize,
    pub max_y: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u32,
    pub pixel_count: u64,
    pub bbox: BBox,
    pub class: NucleusClass,
}

/// An instance excluded from class assignment because every one of its
/// pixels is background in the class map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedInstance {
    pub id: u32,
    pub pixel_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassAssignment {
    /// Ascending by id.
    pub records: Vec<InstanceRecord>,
    pub dropped: Vec<DroppedInstance>,
}

/// Labels maximal 8-connected foreground regions `1..=K` in order of their
/// first pixel in a row-major scan.
pub fn connected_components(mask: &Raster<bool>) -> Result<InstanceMap> {
    let (w, h) = mask.dims();
    if w == 0 || h == 0 {
        return Err(Error::Dimension("connected components of an empty mask".into()));
    }
    let fg = mask.as_slice();
    let mut provisional = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !fg[i] {
                continue;
            }
            // Already-visited 8-neighbours: W, NW, N, NE.
            let mut neighbours = [0u32; 4];
            if x > 0 {
                neighbours[0] = provisional[i - 1];
            }
            if y > 0 {
                let up = i - w;
                if x > 0 {
                    neighbours[1] = provisional[up - 1];
                }
                neighbours[2] = provisional[up];
                if x + 1 < w {
                    neighbours[3] = provisional[up + 1];
                }
            }
            let mut label = 0;
            for &n in neighbours.iter().filter(|&&n| n != 0) {
                let root = find(&mut parent, n);
                if label == 0 {
                    label = root;
                } else if root != label {
                    let (lo, hi) = (label.min(root), label.max(root));
                    parent[hi as usize] = lo;
                    label = lo;
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            provisional[i] = label;
        }
    }

    let mut final_id = vec![0u32; parent.len()];
    let mut next = 1;
    for v in provisional.iter_mut() {
        if *v == 0 {
            continue;
        }
        let root = find(&mut parent, *v) as usize;
        if final_id[root] == 0 {
            final_id[root] = next;
            next += 1;
        }
        *v = final_id[root];
    }
    InstanceMap::from_vec(w, h, provisional)
}

/// Renumbers instances `1..=K` in order of first appearance in a row-major
/// scan, keeping the partition.
pub fn relabel_sequential(m: &InstanceMap) -> InstanceMap {
    let mut mapping: BTreeMap<u32, u32> = BTreeMap::new();
    let out = m.raster().map(|&v| {
        if v == 0 {
            return 0;
        }
        let next = mapping.len() as u32 + 1;
        *mapping.entry(v).or_insert(next)
    });
    InstanceMap(out)
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn instance_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::UndefinedIou);
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Gives every instance the plurality class of its non-background class
/// pixels, smallest class id on ties.
pub fn assign_instance_classes(inst: &InstanceMap, cls: &ClassMap) -> Result<ClassAssignment> {
    if inst.dims() != cls.dims() {
        return Err(Error::Dimension(format!(
            "instance map is {:?} but class map is {:?}",
            inst.dims(),
            cls.dims()
        )));
    }
    struct Acc {
        hist: [u64; NUM_CLASSES + 1],
        bbox: BBox,
    }
    let w = inst.dims().0;
    let mut accs: BTreeMap<u32, Acc> = BTreeMap::new();
    for (i, (&id, &c)) in inst.ids_slice().iter().zip(cls.classes_slice()).enumerate() {
        if id == 0 {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let acc = accs.entry(id).or_insert(Acc {
            hist: [0; NUM_CLASSES + 1],
            bbox: BBox {
                min_x: x,
                min_y: y,
                max_x: x,
                max_y: y,
            },
        });
        acc.hist[c as usize] += 1;
        let b = &mut acc.bbox;
        b.min_x = b.min_x.min(x);
        b.min_y = b.min_y.min(y);
        b.max_x = b.max_x.max(x);
        b.max_y = b.max_y.max(y);
    }

    let mut out = ClassAssignment::default();
    for (id, acc) in accs {
        let pixel_count = acc.hist.iter().sum();
        let mut best: Option<(u8, u64)> = None;
        for c in 1..=NUM_CLASSES as u8 {
            let n = acc.hist[c as usize];
            if n > 0 && best.is_none_or(|(_, b)| n > b) {
                best = Some((c, n));
            }
        }
        match best {
            Some((c, _)) => out.records.push(InstanceRecord {
                id,
                pixel_count,
                bbox: acc.bbox,
                class: NucleusClass::from_id(c).expect("class in 1..=6"),
            }),
            None => {
                log::warn!("instance {id} has only background-class pixels; dropped");
                out.dropped.push(DroppedInstance { id, pixel_count });
            }
        }
    }
    Ok(out)
}

pub fn composition(records: &[InstanceRecord]) -> Composition {
    let mut counts = Composition::default();
    for r in records {
        counts.0[r.class.index()] += 1;
    }
    counts
}

/// Composition of a paired instance/class map.
pub fn composition_of(inst: &InstanceMap, cls: &ClassMap) -> Result<Composition> {
    assign_instance_classes(inst, cls).map(|a| composition(&a.records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, bits: &[u8]) -> Raster<bool> {
        Raster::from_vec(w, h, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn empty_mask_has_no_instances() {
        let m = connected_components(&mask(4, 4, &[0; 16])).unwrap();
        assert_eq!(m.instance_count(), 0);
    }

    #[test]
    fn diagonal_pixels_join() {
        let m = connected_components(&mask(2, 2, &[1, 0, 0, 1])).unwrap();
        assert_eq!(m.ids_slice(), &[1, 0, 0, 1]);
    }

    #[test]
    fn u_shape_merges_and_orders_by_first_pixel() {
        #[rustfmt::skip]
        let bits = [
            1, 0, 1, 0, 0,
            1, 0, 1, 0, 1,
            1, 1, 1, 0, 0,
        ];
        let m = connected_components(&mask(5, 3, &bits)).unwrap();
        #[rustfmt::skip]
        let expect = [
            1, 0, 1, 0, 0,
            1, 0, 1, 0, 2,
            1, 1, 1, 0, 0,
        ];
        assert_eq!(m.ids_slice(), &expect);
    }

    #[test]
    fn relabel_examples() {
        let m = InstanceMap::from_vec(4, 1, vec![0, 7, 7, 3]).unwrap();
        assert_eq!(relabel_sequential(&m).ids_slice(), &[0, 1, 1, 2]);
        let s = InstanceMap::from_vec(4, 1, vec![1, 0, 2, 2]).unwrap();
        assert_eq!(relabel_sequential(&s), s);
    }

    #[test]
    fn iou_examples() {
        let a: BTreeSet<usize> = [0, 1, 2, 3].into();
        let disjoint: BTreeSet<usize> = [10, 11].into();
        let b: BTreeSet<usize> = [1, 2, 3, 4].into();
        assert_eq!(instance_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(instance_iou(&a, &disjoint).unwrap(), 0.0);
        assert!((instance_iou(&a, &b).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(
            instance_iou(&BTreeSet::new(), &BTreeSet::new()),
            Err(Error::UndefinedIou)
        ));
    }

    #[test]
    fn plurality_and_tie_break() {
        let inst = InstanceMap::from_vec(5, 1, vec![1; 5]).unwrap();
        let cls = ClassMap::from_vec(5, 1, vec![2, 2, 2, 3, 3]).unwrap();
        let a = assign_instance_classes(&inst, &cls).unwrap();
        assert_eq!(a.records[0].class, NucleusClass::Lymphocyte);
        assert_eq!(a.records[0].pixel_count, 5);

        let inst = InstanceMap::from_vec(5, 1, vec![4, 4, 4, 4, 4]).unwrap();
        let cls = ClassMap::from_vec(5, 1, vec![1, 0, 2, 2, 1]).unwrap();
        let a = assign_instance_classes(&inst, &cls).unwrap();
        assert_eq!(a.records[0].class, NucleusClass::Epithelial);
    }

    #[test]
    fn background_only_instance_is_dropped() {
        let inst = InstanceMap::from_vec(3, 1, vec![1, 2, 2]).unwrap();
        let cls = ClassMap::from_vec(3, 1, vec![5, 0, 0]).unwrap();
        let a = assign_instance_classes(&inst, &cls).unwrap();
        assert_eq!(a.records.len(), 1);
        assert_eq!(a.dropped, vec![DroppedInstance { id: 2, pixel_count: 2 }]);
    }

    #[test]
    fn bbox_covers_pixels() {
        let inst = InstanceMap::from_vec(3, 3, vec![0, 1, 0, 1, 0, 0, 0, 0, 1]).unwrap();
        let cls = ClassMap::from_vec(3, 3, vec![6; 9]).unwrap();
        let r = &assign_instance_classes(&inst, &cls).unwrap().records[0];
        assert_eq!(
            r.bbox,
            BBox {
                min_x: 0,
                min_y: 0,
                max_x: 2,
                max_y: 2
            }
        );
    }

    #[test]
    fn dimension_mismatch() {
        let inst = InstanceMap::empty(3, 3).unwrap();
        let cls = ClassMap::empty(3, 2).unwrap();
        assert!(matches!(assign_instance_classes(&inst, &cls), Err(Error::Dimension(_))));
    }

    #[test]
    fn class_map_range() {
        assert!(matches!(
            ClassMap::from_vec(2, 1, vec![0, 7]),
            Err(Error::Range { value: 7, .. })
        ));
    }

    #[test]
    fn composition_counts() {
        assert_eq!(composition(&[]), Composition([0; 6]));
        let rec = |class| InstanceRecord {
            id: 1,
            pixel_count: 1,
            bbox: BBox {
                min_x: 0,
                min_y: 0,
                max_x: 0,
                max_y: 0,
            },
            class,
        };
        let mut rs = vec![
            rec(NucleusClass::Epithelial),
            rec(NucleusClass::Epithelial),
            rec(NucleusClass::Connective),
        ];
        assert_eq!(composition(&rs), Composition([2, 0, 0, 0, 0, 1]));
        rs.reverse();
        assert_eq!(composition(&rs), Composition([2, 0, 0, 0, 0, 1]));
    }
}
