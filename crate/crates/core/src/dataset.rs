//! Sample manifests, sample IO, and the class-balanced train/val/test split.
//!
//! A manifest is JSON Lines: one object per sample with `id`, `image`,
//! `instances`, `classes` (paths, relative ones resolved against the
//! manifest's directory) and `composition` (six per-class nucleus counts).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{keyed_rng, Sample};
use crate::error::{Error, Result};
use crate::io::{read_classes, read_instances, read_rgb, write_atomic, write_classes, write_instances, write_rgb};
use crate::label_maps::{composition_of, Composition, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub instances: PathBuf,
    pub classes: PathBuf,
    pub composition: Composition,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Manifest {
            entries,
            base_dir: base_dir.into(),
        };
        m.check_unique_ids()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Manifest(format!("line {}: {err}", n + 1)))?;
            entries.push(e);
        }
        Self::new(entries, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("plain data serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks that every referenced file exists.
    pub fn validate_paths(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.image, &e.instances, &e.classes] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "sample {:?}: missing file {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_composition(&self) -> Composition {
        self.entries.iter().map(|e| e.composition).sum()
    }

    fn subset(&self, idx: &[usize]) -> Manifest {
        Manifest {
            entries: idx.iter().map(|&i| self.entries[i].clone()).collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

pub struct LoadedSample {
    pub sample: Sample,
    /// Composition recomputed from the maps.
    pub composition: Composition,
    pub warnings: Vec<String>,
}

/// Reads a sample's three PNGs and rechecks its cached composition.
pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry) -> Result<LoadedSample> {
    let image = read_rgb(&manifest.resolve(&entry.image))?;
    let instances = read_instances(&manifest.resolve(&entry.instances))?;
    let classes = read_classes(&manifest.resolve(&entry.classes))?;
    let sample = Sample::new(image, instances, classes)?;
    let composition = composition_of(&sample.instances, &sample.classes)?;
    let mut warnings = Vec::new();
    if composition != entry.composition {
        let msg = format!(
            "sample {:?}: manifest composition {:?} differs from maps {:?}",
            entry.id, entry.composition.0, composition.0
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(LoadedSample {
        sample,
        composition,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePaths {
    pub image: PathBuf,
    pub instances: PathBuf,
    pub classes: PathBuf,
}

impl SamplePaths {
    /// `<root>/{images,instances,classes}/<stem>.png`.
    pub fn in_dir(root: &Path, stem: &str) -> Self {
        let file = format!("{stem}.png");
        SamplePaths {
            image: root.join("images").join(&file),
            instances: root.join("instances").join(&file),
            classes: root.join("classes").join(&file),
        }
    }
}

pub fn save_sample(sample: &Sample, paths: &SamplePaths) -> Result<()> {
    write_rgb(&paths.image, &sample.image)?;
    write_instances(&paths.instances, &sample.instances)?;
    write_classes(&paths.classes, &sample.classes)
}

/// Prediction/ground-truth directory holding `instances/<name>.png` and
/// `classes/<name>.png` pairs. Returns `(name, instances, classes)` sorted by
/// name.
pub fn scan_label_dir(root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let inst_dir = root.join("instances");
    let rd = fs::read_dir(&inst_dir).map_err(|e| Error::io(&inst_dir, e))?;
    let mut out = Vec::new();
    for item in rd {
        let item = item.map_err(|e| Error::io(&inst_dir, e))?;
        let path = item.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Manifest(format!("unreadable file name {}", path.display())))?
            .to_string();
        let cls = root.join("classes").join(format!("{name}.png"));
        if !cls.is_file() {
            return Err(Error::Manifest(format!(
                "{} has no matching class map {}",
                path.display(),
                cls.display()
            )));
        }
        out.push((name, path, cls));
    }
    out.sort();
    Ok(out)
}

/// Relative partition weights, e.g. `4:1:0.1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        if r.weights().iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config(format!("split weights must be positive, got {r}")));
        }
        Ok(r)
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 4.0,
            val: 1.0,
            test: 0.1,
        }
    }
}

impl fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

impl FromStr for SplitRatios {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("expected train:val:test, got {s:?}")));
        }
        let mut w = [0.0; 3];
        for (slot, p) in w.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad split weight {p:?}")))?;
        }
        SplitRatios::new(w[0], w[1], w[2])
    }
}

pub const PARTITION_NAMES: [&str; 3] = ["train", "val", "test"];

/// Hamilton (largest-remainder) apportionment of `n` entries to the three
/// weights. Equal remainders go to the larger weight, then the earlier
/// partition.
pub fn target_sizes(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let w = ratios.weights();
    let total: f64 = w.iter().sum();
    let quotas = w.map(|x| n as f64 * x / total);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        if (ra - rb).abs() > 1e-9 {
            rb.total_cmp(&ra)
        } else {
            w[b].total_cmp(&w[a]).then(a.cmp(&b))
        }
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionBalance {
    pub name: String,
    pub size: usize,
    pub totals: Composition,
    /// Partition's size share of the global per-class totals.
    pub target_totals: [f64; NUM_CLASSES],
    /// `(total − target) / target`; `None` where the target is zero.
    pub relative_deviation: [Option<f64>; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub ratios: SplitRatios,
    pub seed: u64,
    pub global_totals: Composition,
    pub partitions: Vec<PartitionBalance>,
}

impl BalanceReport {
    pub fn max_abs_deviation(&self) -> Option<f64> {
        self.partitions
            .iter()
            .flat_map(|p| p.relative_deviation.iter().flatten())
            .map(|d| d.abs())
            .reduce(f64::max)
    }
}

pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
    pub report: BalanceReport,
}

impl Split {
    pub fn partitions(&self) -> [&Manifest; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Splits `m` into train/val/test with largest-remainder sizes while keeping
/// each partition's per-class nucleus totals close to its size share.
///
/// Entries are visited in a seeded random order. Each goes to the
/// non-full partition whose remaining per-class deficit, spread over its
/// free slots, is closest in weighted L1 to the entry's composition; ties
/// go to the partition with the most free room relative to its size, then
/// the earlier partition.
pub fn stratified_split(m: &Manifest, ratios: &SplitRatios, seed: u64) -> Result<Split> {
    let n = m.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "need at least 3 entries to split into 3 partitions, got {n}"
        )));
    }
    let sizes = target_sizes(n, ratios);
    let global = m.total_composition();
    let targets: Vec<[f64; NUM_CLASSES]> = sizes
        .iter()
        .map(|&s| global.0.map(|g| g as f64 * s as f64 / n as f64))
        .collect();

    // Inverse class frequency, so rare classes count as much as common ones.
    let weights = global.0.map(|g| if g > 0 { n as f64 / g as f64 } else { 0.0 });

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, 0));

    let mut running = [[0u64; NUM_CLASSES]; 3];
    let mut members: [Vec<usize>; 3] = Default::default();
    for &i in &order {
        let x = m.entries[i].composition.0;
        let mut best: Option<(usize, f64, f64)> = None;
        for p in 0..3 {
            if members[p].len() >= sizes[p] {
                continue;
            }
            let slots = (sizes[p] - members[p].len()) as f64;
            let cost: f64 = (0..NUM_CLASSES)
                .map(|c| {
                    let need = (targets[p][c] - running[p][c] as f64) / slots;
                    weights[c] * (x[c] as f64 - need).abs()
                })
                .sum();
            let room = slots / sizes[p] as f64;
            let better = match best {
                None => true,
                Some((_, bc, br)) => cost < bc - 1e-9 || ((cost - bc).abs() <= 1e-9 && room > br + 1e-12),
            };
            if better {
                best = Some((p, cost, room));
            }
        }
        let (p, _, _) = best.expect("sizes sum to n, so some partition has room");
        for c in 0..NUM_CLASSES {
            running[p][c] += x[c];
        }
        members[p].push(i);
    }

    let partitions = (0..3)
        .map(|p| {
            let totals = Composition(running[p]);
            let target = targets[p];
            let mut dev = [None; NUM_CLASSES];
            for c in 0..NUM_CLASSES {
                if target[c] > 0.0 {
                    dev[c] = Some((totals.0[c] as f64 - target[c]) / target[c]);
                }
            }
            PartitionBalance {
                name: PARTITION_NAMES[p].to_string(),
                size: members[p].len(),
                totals,
                target_totals: target,
                relative_deviation: dev,
            }
        })
        .collect();

    // Keep manifest order inside each partition.
    for part in members.iter_mut() {
        part.sort_unstable();
    }
    Ok(Split {
        train: m.subset(&members[0]),
        val: m.subset(&members[1]),
        test: m.subset(&members[2]),
        report: BalanceReport {
            ratios: *ratios,
            seed,
            global_totals: global,
            partitions,
        },
    })
}
