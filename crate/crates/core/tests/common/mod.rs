//! Generators and brute-force oracles shared by the integration tests.
//! Nothing here calls into the code path it is used to check.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use conic_core::augment::Sample;
use conic_core::dataset::{Manifest, ManifestEntry};
use conic_core::stain_norm::StainModel;
use conic_core::{ClassMap, Composition, InstanceMap, Raster, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub class: u8,
}

pub fn random_rects(rng: &mut ChaCha8Rng, side: usize, n: usize, max_extent: i64) -> Vec<Rect> {
    (0..n)
        .map(|_| Rect {
            x: rng.random_range(0..side as i64),
            y: rng.random_range(0..side as i64),
            w: rng.random_range(1..=max_extent),
            h: rng.random_range(1..=max_extent),
            class: rng.random_range(1..=6),
        })
        .collect()
}

/// Paints rects in order (later ones on top) with ids `first_id..`.
pub fn paint(side: usize, rects: &[Rect], first_id: u32) -> (InstanceMap, ClassMap) {
    let mut ids = vec![0u32; side * side];
    let mut cls = vec![0u8; side * side];
    for (k, r) in rects.iter().enumerate() {
        for y in r.y.max(0)..(r.y + r.h).min(side as i64) {
            for x in r.x.max(0)..(r.x + r.w).min(side as i64) {
                let i = y as usize * side + x as usize;
                ids[i] = first_id + k as u32;
                cls[i] = r.class;
            }
        }
    }
    (
        InstanceMap::from_vec(side, side, ids).unwrap(),
        ClassMap::from_vec(side, side, cls).unwrap(),
    )
}

/// Sprinkles per-pixel class noise inside instances.
pub fn noisy_classes(rng: &mut ChaCha8Rng, inst: &InstanceMap, cls: &ClassMap, p: f64) -> ClassMap {
    let v = inst
        .ids_slice()
        .iter()
        .zip(cls.classes_slice())
        .map(|(&id, &c)| if id != 0 && rng.random_bool(p) { rng.random_range(0..=6) } else { c })
        .collect();
    ClassMap::from_vec(inst.dims().0, inst.dims().1, v).unwrap()
}

/// Ground truth with up to `max_instances` rects and a jittered prediction.
pub fn gt_pred_pair(seed: u64, side: usize, max_instances: usize) -> ((InstanceMap, ClassMap), (InstanceMap, ClassMap)) {
    let mut r = rng(seed);
    let n = r.random_range(1..=max_instances);
    let rects = random_rects(&mut r, side, n, 6);
    let mut jittered = Vec::new();
    for rect in &rects {
        if r.random_bool(0.15) {
            continue;
        }
        let mut j = *rect;
        j.x += r.random_range(-1..=1);
        j.y += r.random_range(-1..=1);
        j.w = (j.w + r.random_range(-1..=1)).max(1);
        j.h = (j.h + r.random_range(-1..=1)).max(1);
        if r.random_bool(0.15) {
            j.class = r.random_range(1..=6);
        }
        jittered.push(j);
    }
    let extra = r.random_range(0..=2);
    jittered.extend(random_rects(&mut r, side, extra, 5));
    jittered.truncate(max_instances);
    let gt = paint(side, &rects, 1);
    let pred = paint(side, &jittered, 100);
    (gt, pred)
}

/// Random sample with a textured image and rect instances.
pub fn random_sample(seed: u64, side: usize, n: usize) -> Sample {
    let mut r = rng(seed);
    let rects = random_rects(&mut r, side, n, (side / 4).max(2) as i64);
    let (inst, cls) = paint(side, &rects, 1);
    let image = Raster::from_vec(side, side, (0..side * side).map(|_| [r.random(), r.random(), r.random()]).collect())
        .unwrap();
    Sample::new(image, inst, cls).unwrap()
}

/// Stack-based flood fill over the 8-neighbourhood, seeding in row-major
/// order.
pub fn flood_fill_labels(w: usize, h: usize, fg: &[bool]) -> Vec<u32> {
    let mut out = vec![0u32; w * h];
    let mut next = 0;
    for start in 0..w * h {
        if !fg[start] || out[start] != 0 {
            continue;
        }
        next += 1;
        let mut stack = vec![start];
        out[start] = next;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && out[j] == 0 {
                        out[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    out
}

/// `same[i][j]` ⇔ pixels i and j carry the same non-zero id.
pub fn same_id_pairs(ids: &[u32]) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            out.push((i, j, ids[i] != 0 && ids[i] == ids[j]));
        }
    }
    out
}

/// Plurality class per instance by explicit histogram; `None` for
/// background-only instances.
pub fn histogram_classes(inst: &InstanceMap, cls: &ClassMap) -> BTreeMap<u32, Option<u8>> {
    let mut hist: BTreeMap<u32, [usize; 7]> = BTreeMap::new();
    for (&id, &c) in inst.ids_slice().iter().zip(cls.classes_slice()) {
        if id != 0 {
            hist.entry(id).or_insert([0; 7])[c as usize] += 1;
        }
    }
    hist.into_iter()
        .map(|(id, h)| {
            let max = *h[1..].iter().max().unwrap();
            let class = if max == 0 {
                None
            } else {
                (1..=6u8).find(|&c| h[c as usize] == max)
            };
            (id, class)
        })
        .collect()
}

/// Exhaustive maximum-cardinality (then maximum total IoU) matching per
/// class, over pairs with IoU strictly above `threshold`. Returns sorted
/// `(class, pred, gt)` triples.
pub fn brute_force_matching(
    pred: (&InstanceMap, &ClassMap),
    gt: (&InstanceMap, &ClassMap),
    threshold: f64,
) -> BTreeSet<(u8, u32, u32)> {
    let pc = histogram_classes(pred.0, pred.1);
    let gc = histogram_classes(gt.0, gt.1);
    let ps = pred.0.pixel_sets();
    let gs = gt.0.pixel_sets();
    let mut out = BTreeSet::new();
    for class in 1..=6u8 {
        let preds: Vec<u32> = pc.iter().filter(|(_, c)| **c == Some(class)).map(|(id, _)| *id).collect();
        let gts: Vec<u32> = gc.iter().filter(|(_, c)| **c == Some(class)).map(|(id, _)| *id).collect();
        let iou = |p: u32, g: u32| {
            let a = &ps[&p];
            let b = &gs[&g];
            a.intersection(b).count() as f64 / a.union(b).count() as f64
        };
        #[allow(clippy::too_many_arguments)]
        fn search(
            k: usize,
            preds: &[u32],
            gts: &[u32],
            used: &mut Vec<bool>,
            cur: &mut Vec<(u32, u32, f64)>,
            best: &mut (usize, f64, Vec<(u32, u32, f64)>),
            iou: &dyn Fn(u32, u32) -> f64,
            threshold: f64,
        ) {
            if k == preds.len() {
                let s: f64 = cur.iter().map(|t| t.2).sum();
                if cur.len() > best.0 || (cur.len() == best.0 && s > best.1 + 1e-12) {
                    *best = (cur.len(), s, cur.clone());
                }
                return;
            }
            search(k + 1, preds, gts, used, cur, best, iou, threshold);
            for (j, &g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(preds[k], g);
                if v > threshold {
                    used[j] = true;
                    cur.push((preds[k], g, v));
                    search(k + 1, preds, gts, used, cur, best, iou, threshold);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (0, 0.0, Vec::new());
        search(0, &preds, &gts, &mut vec![false; gts.len()], &mut Vec::new(), &mut best, &iou, threshold);
        for (p, g, _) in best.2 {
            out.insert((class, p, g));
        }
    }
    out
}

/// H&E-like unit stain directions with a random perturbation; haematoxylin
/// keeps the larger red component.
pub fn random_stains(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let base_h = [0.5626, 0.7201, 0.4062];
    let base_e = [0.2159, 0.8012, 0.5581];
    loop {
        let mut h = base_h.map(|v| v + rng.random_range(-0.08..0.08));
        let mut e = base_e.map(|v| v + rng.random_range(-0.06..0.06));
        let (nh, ne) = (norm(h), norm(e));
        h = h.map(|v| v / nh);
        e = e.map(|v| v / ne);
        if h[0] > e[0] + 0.15 {
            return (h, e);
        }
    }
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    (d / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Ground-truth concentrations for a synthetic tile: background, pure
/// haematoxylin, pure eosin and mixed pixels.
pub fn random_concentrations(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.2 {
                [0.0, 0.0]
            } else if u < 0.35 {
                [rng.random_range(0.4..1.2), 0.0]
            } else if u < 0.5 {
                [0.0, rng.random_range(0.8..1.4)]
            } else {
                [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)]
            }
        })
        .collect()
}

/// `I = round(io · 10^(−S·c))` per pixel.
pub fn synthesize(side: usize, h: [f64; 3], e: [f64; 3], conc: &[[f64; 2]], io: f64) -> RgbImage {
    let px = conc
        .iter()
        .map(|c| {
            let mut out = [0u8; 3];
            for k in 0..3 {
                let od = h[k] * c[0] + e[k] * c[1];
                out[k] = (io * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8;
            }
            out
        })
        .collect();
    Raster::from_vec(side, side, px).unwrap()
}

/// Nearest-rank percentile by direct rank counting.
pub fn rank_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank - 1]
}

pub fn model_with(h: [f64; 3], e: [f64; 3], max: [f64; 2]) -> StainModel {
    StainModel::new(h, e, max).unwrap()
}

/// Manifest of `n` entries with binomial per-class counts; eosinophils and
/// neutrophils are rare.
pub fn synthetic_manifest(n: usize, seed: u64) -> Manifest {
    let mut r = rng(seed);
    let means = [6.0, 9.0, 2.0, 0.6, 0.4, 4.0];
    let entries = (0..n)
        .map(|i| {
            let mut counts = [0u64; 6];
            for (c, m) in means.iter().enumerate() {
                let k = (0..20).filter(|_| r.random_bool(m / 20.0)).count();
                counts[c] = k as u64;
            }
            ManifestEntry {
                id: format!("tile_{i:05}"),
                image: format!("images/tile_{i:05}.png").into(),
                instances: format!("instances/tile_{i:05}.png").into(),
                classes: format!("classes/tile_{i:05}.png").into(),
                composition: Composition(counts),
            }
        })
        .collect();
    Manifest::new(entries, "").unwrap()
}
