//! Fusion of instance predictions made at several input scales.
//!
//! Every prediction is brought back to the base resolution with
//! nearest-neighbour resampling. Instances from different scales are joined
//! when their IoU reaches the threshold; each connected group that was seen
//! at enough distinct scales becomes one fused nucleus whose mask is the set
//! of pixels covered by at least half of the group's members and whose class
//! is the plurality of member classes.
//!
//! Fusion works on label masks only. Box-level and probability-level fusion
//! are not provided.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_maps::{assign_instance_classes, relabel_sequential, ClassMap, InstanceMap, NucleusClass, NUM_CLASSES};
use crate::par;
use crate::raster::Raster;
use crate::DEFAULT_SCALES;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaledPrediction {
    /// Side length of the square maps.
    pub scale: usize,
    pub instances: InstanceMap,
    pub classes: ClassMap,
}

impl ScaledPrediction {
    pub fn new(scale: usize, instances: InstanceMap, classes: ClassMap) -> Result<Self> {
        let p = ScaledPrediction {
            scale,
            instances,
            classes,
        };
        p.check_dims()?;
        Ok(p)
    }

    fn check_dims(&self) -> Result<()> {
        let want = (self.scale, self.scale);
        if self.instances.dims() != want || self.classes.dims() != want {
            return Err(Error::Dimension(format!(
                "prediction at scale {} has maps {:?} / {:?}",
                self.scale,
                self.instances.dims(),
                self.classes.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub base_size: usize,
    pub iou_threshold: f64,
    pub min_votes: usize,
    pub scales: Vec<usize>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            base_size: 256,
            iou_threshold: 0.5,
            min_votes: 3,
            scales: DEFAULT_SCALES.to_vec(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_size == 0 {
            return Err(Error::Config("base size must be positive".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "IoU threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.min_votes < 1 || self.min_votes > self.scales.len() {
            return Err(Error::Config(format!(
                "min_votes must be in 1..={}, got {}",
                self.scales.len(),
                self.min_votes
            )));
        }
        Ok(())
    }
}

/// Resizes both maps of `p` to `base × base`. Instances too small to survive
/// the resampling disappear.
pub fn rescale_prediction(p: &ScaledPrediction, base: usize) -> Result<ScaledPrediction> {
    p.check_dims()?;
    if base == 0 {
        return Err(Error::Dimension("base size must be positive".into()));
    }
    let instances = p.instances.resize_nearest(base, base)?;
    let classes = p.classes.resize_nearest(base, base)?;
    if log::log_enabled!(log::Level::Debug) {
        let before = p.instances.ids();
        let after = instances.ids();
        let lost: Vec<_> = before.difference(&after).collect();
        if !lost.is_empty() {
            log::debug!("scale {} -> {base}: instances {lost:?} vanished", p.scale);
        }
    }
    Ok(ScaledPrediction {
        scale: base,
        instances,
        classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceInstance {
    pub scale: usize,
    pub id: u32,
}

/// Audit record of one fused nucleus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedInstance {
    pub id: u32,
    pub class: NucleusClass,
    pub pixel_count: u64,
    /// Number of distinct scales among the members.
    pub votes: usize,
    pub members: Vec<SourceInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fused {
    pub instances: InstanceMap,
    pub classes: ClassMap,
    /// Ascending by fused id.
    pub provenance: Vec<FusedInstance>,
}

struct Node {
    pred: usize,
    id: u32,
    class: NucleusClass,
    area: u64,
}

struct Cluster {
    members: Vec<usize>,
    class: NucleusClass,
    votes: usize,
    need: usize,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Fuses one tile's predictions. The result does not depend on the order of
/// `preds`.
pub fn fuse(preds: &[ScaledPrediction], cfg: &EnsembleConfig) -> Result<Fused> {
    cfg.validate()?;
    if preds.is_empty() {
        return Err(Error::Config("no predictions to fuse".into()));
    }
    let mut sorted: Vec<&ScaledPrediction> = preds.iter().collect();
    sorted.sort_by_key(|p| p.scale);
    for w in sorted.windows(2) {
        if w[0].scale == w[1].scale {
            return Err(Error::Config(format!("scale {} given twice", w[0].scale)));
        }
    }
    for p in &sorted {
        if !cfg.scales.contains(&p.scale) {
            return Err(Error::Config(format!(
                "scale {} is not one of the configured scales {:?}",
                p.scale, cfg.scales
            )));
        }
    }
    let base = cfg.base_size;
    let rescaled = sorted
        .iter()
        .map(|p| rescale_prediction(p, base))
        .collect::<Result<Vec<_>>>()?;
    let scales: Vec<usize> = sorted.iter().map(|p| p.scale).collect();

    // Graph nodes: classified instances of every prediction.
    let mut nodes: Vec<Node> = Vec::new();
    let mut node_of: Vec<HashMap<u32, usize>> = Vec::with_capacity(rescaled.len());
    for (pi, p) in rescaled.iter().enumerate() {
        let assignment = assign_instance_classes(&p.instances, &p.classes)?;
        let mut map = HashMap::new();
        for r in assignment.records {
            map.insert(r.id, nodes.len());
            nodes.push(Node {
                pred: pi,
                id: r.id,
                class: r.class,
                area: r.pixel_count,
            });
        }
        node_of.push(map);
    }

    // Cross-scale edges.
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    for a in 0..rescaled.len() {
        for b in (a + 1)..rescaled.len() {
            let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            let ia = rescaled[a].instances.ids_slice();
            let ib = rescaled[b].instances.ids_slice();
            for (&x, &y) in ia.iter().zip(ib) {
                if x != 0 && y != 0 {
                    *inter.entry((x, y)).or_default() += 1;
                }
            }
            for ((x, y), n) in inter {
                let (Some(&na), Some(&nb)) = (node_of[a].get(&x), node_of[b].get(&y)) else {
                    continue;
                };
                let union = nodes[na].area + nodes[nb].area - n;
                if n as f64 / union as f64 >= cfg.iou_threshold {
                    let (ra, rb) = (find(&mut parent, na), find(&mut parent, nb));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for n in 0..nodes.len() {
        let r = find(&mut parent, n);
        groups.entry(r).or_default().push(n);
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut cluster_of_node = vec![usize::MAX; nodes.len()];
    for members in groups.into_values() {
        let mut distinct: Vec<usize> = members.iter().map(|&n| nodes[n].pred).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < cfg.min_votes {
            continue;
        }
        let mut hist = [0usize; NUM_CLASSES];
        for &n in &members {
            hist[nodes[n].class.index()] += 1;
        }
        let best = (0..NUM_CLASSES).fold(0, |b, c| if hist[c] > hist[b] { c } else { b });
        for &n in &members {
            cluster_of_node[n] = clusters.len();
        }
        clusters.push(Cluster {
            need: members.len().div_ceil(2),
            class: NucleusClass::ALL[best],
            votes: distinct.len(),
            members,
        });
    }

    let npx = base * base;
    let votes_at = |i: usize, out: &mut Vec<(usize, usize)>| {
        out.clear();
        for (pi, p) in rescaled.iter().enumerate() {
            let id = p.instances.ids_slice()[i];
            if id == 0 {
                continue;
            }
            let Some(&n) = node_of[pi].get(&id) else { continue };
            let c = cluster_of_node[n];
            if c == usize::MAX {
                continue;
            }
            match out.iter_mut().find(|(k, _)| *k == c) {
                Some(slot) => slot.1 += 1,
                None => out.push((c, 1)),
            }
        }
        out.retain(|&(c, v)| v >= clusters[c].need);
    };

    // Provisional ordering: first majority pixel, then size, then members.
    let mut first_px = vec![usize::MAX; clusters.len()];
    let mut buf = Vec::new();
    for i in 0..npx {
        votes_at(i, &mut buf);
        for &(c, _) in &buf {
            if first_px[c] == usize::MAX {
                first_px[c] = i;
            }
        }
    }
    let member_key = |c: usize| -> Vec<(usize, u32)> {
        clusters[c]
            .members
            .iter()
            .map(|&n| (scales[nodes[n].pred], nodes[n].id))
            .collect()
    };
    let mut order: Vec<usize> = (0..clusters.len()).filter(|&c| first_px[c] != usize::MAX).collect();
    order.sort_by(|&a, &b| {
        first_px[a]
            .cmp(&first_px[b])
            .then(clusters[b].members.len().cmp(&clusters[a].members.len()))
            .then_with(|| member_key(a).cmp(&member_key(b)))
    });
    let mut rank = vec![usize::MAX; clusters.len()];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }

    let mut ids = vec![0u32; npx];
    let mut cls = vec![0u8; npx];
    for i in 0..npx {
        votes_at(i, &mut buf);
        let winner = buf.iter().copied().min_by(|&(a, va), &(b, vb)| {
            vb.cmp(&va)
                .then(clusters[b].members.len().cmp(&clusters[a].members.len()))
                .then(rank[a].cmp(&rank[b]))
        });
        if let Some((c, _)) = winner {
            ids[i] = rank[c] as u32 + 1;
            cls[i] = clusters[c].class.id();
        }
    }

    let provisional = InstanceMap::from_vec(base, base, ids)?;
    let instances = relabel_sequential(&provisional);
    let classes = ClassMap::new(Raster::from_vec(base, base, cls)?)?;

    let mut remap: BTreeMap<u32, (u32, u64)> = BTreeMap::new();
    for (&old, &new) in provisional.ids_slice().iter().zip(instances.ids_slice()) {
        if old != 0 {
            remap.entry(old).or_insert((new, 0)).1 += 1;
        }
    }
    let mut provenance: Vec<FusedInstance> = remap
        .into_iter()
        .map(|(old, (new, pixel_count))| {
            let c = order[old as usize - 1];
            let mut members: Vec<SourceInstance> = clusters[c]
                .members
                .iter()
                .map(|&n| SourceInstance {
                    scale: scales[nodes[n].pred],
                    id: nodes[n].id,
                })
                .collect();
            members.sort();
            FusedInstance {
                id: new,
                class: clusters[c].class,
                pixel_count,
                votes: clusters[c].votes,
                members,
            }
        })
        .collect();
    provenance.sort_by_key(|f| f.id);
    Ok(Fused {
        instances,
        classes,
        provenance,
    })
}

/// Fuses many tiles independently.
pub fn fuse_batch(tiles: &[Vec<ScaledPrediction>], cfg: &EnsembleConfig) -> Vec<Result<Fused>> {
    par::map(tiles, |preds| fuse(preds, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(side: usize, blocks: &[(usize, usize, usize, u32, u8)]) -> (InstanceMap, ClassMap) {
        let mut ids = vec![0u32; side * side];
        let mut cls = vec![0u8; side * side];
        for &(x0, y0, s, id, c) in blocks {
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    ids[y * side + x] = id;
                    cls[y * side + x] = c;
                }
            }
        }
        (
            InstanceMap::from_vec(side, side, ids).unwrap(),
            ClassMap::from_vec(side, side, cls).unwrap(),
        )
    }

    #[test]
    fn rescale_identity_and_halving() {
        let (i, c) = square(8, &[(2, 2, 4, 9, 3)]);
        let p = ScaledPrediction::new(8, i.clone(), c.clone()).unwrap();
        assert_eq!(rescale_prediction(&p, 8).unwrap(), p);
        let half = rescale_prediction(&p, 4).unwrap();
        let (ei, ec) = square(4, &[(1, 1, 2, 9, 3)]);
        assert_eq!(half.instances, ei);
        assert_eq!(half.classes, ec);
        assert_eq!(half.scale, 4);
    }

    #[test]
    fn config_validation() {
        let cfg = EnsembleConfig::default();
        assert!(cfg.validate().is_ok());
        assert!(EnsembleConfig { iou_threshold: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(EnsembleConfig { min_votes: 6, ..cfg.clone() }.validate().is_err());
        assert!(EnsembleConfig { min_votes: 0, ..cfg }.validate().is_err());
    }

    fn cfg16() -> EnsembleConfig {
        EnsembleConfig {
            base_size: 16,
            iou_threshold: 0.5,
            min_votes: 3,
            scales: vec![16, 32, 48, 64, 80],
        }
    }

    #[test]
    fn errors() {
        assert!(fuse(&[], &cfg16()).is_err());
        let (i, c) = square(16, &[]);
        let p = ScaledPrediction::new(16, i, c).unwrap();
        assert!(matches!(fuse(&[p.clone(), p.clone()], &cfg16()), Err(Error::Config(_))));
        let bad = ScaledPrediction { scale: 32, ..p.clone() };
        assert!(matches!(fuse(&[bad], &cfg16()), Err(Error::Dimension(_))));
        let (i, c) = square(24, &[]);
        let unknown = ScaledPrediction::new(24, i, c).unwrap();
        assert!(matches!(fuse(&[unknown], &cfg16()), Err(Error::Config(_))));
    }

    #[test]
    fn plurality_class_of_members() {
        let mut preds = Vec::new();
        for (k, class) in [(16, 2u8), (32, 2), (48, 3)] {
            let f = k / 16;
            let (i, c) = square(k, &[(4 * f, 4 * f, 4 * f, 1, class)]);
            preds.push(ScaledPrediction::new(k, i, c).unwrap());
        }
        let fused = fuse(&preds, &cfg16()).unwrap();
        assert_eq!(fused.provenance.len(), 1);
        assert_eq!(fused.provenance[0].class, NucleusClass::Lymphocyte);
        assert_eq!(fused.provenance[0].votes, 3);
        assert_eq!(fused.provenance[0].pixel_count, 16);
    }

    #[test]
    fn majority_mask() {
        // Three members: two cover a 4x4 block, one covers it plus a column.
        let (a, ac) = square(16, &[(2, 2, 4, 1, 1)]);
        let (b, bc) = square(16, &[(2, 2, 4, 5, 1)]);
        let (mut c, mut cc) = square(16, &[(2, 2, 4, 7, 1)]);
        let mut ids = c.into_raster();
        let mut cls = cc.into_raster();
        for y in 2..6 {
            ids.set(6, y, 7);
            cls.set(6, y, 1);
        }
        c = InstanceMap::new(ids);
        cc = ClassMap::new(cls).unwrap();
        let cfg = EnsembleConfig { scales: vec![16, 17, 18], ..cfg16() };
        let up = |s: usize, i: &InstanceMap, c: &ClassMap| {
            ScaledPrediction::new(s, i.resize_nearest(s, s).unwrap(), c.resize_nearest(s, s).unwrap()).unwrap()
        };
        let preds = vec![up(16, &a, &ac), up(17, &b, &bc), up(18, &c, &cc)];
        let fused = fuse(&preds, &cfg).unwrap();
        let (want, _) = square(16, &[(2, 2, 4, 1, 1)]);
        let fused_ids = fused.instances.ids_slice();
        let mut diff = 0;
        for (x, y) in fused_ids.iter().zip(want.ids_slice()) {
            diff += (x != y) as usize;
        }
        // Resampling 16→17→16 and 16→18→16 is exact, so only the extra
        // column (one vote of three) can differ, and it must be excluded.
        assert_eq!(diff, 0);
    }
}
