//! Fixture dataset and helpers for driving the `conic` binary.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conic_core::dataset::{Manifest, ManifestEntry};
use conic_core::io::{write_classes, write_instances, write_rgb};
use conic_core::label_maps::composition_of;
use conic_core::stain_norm::StainModel;
use conic_core::{ClassMap, InstanceMap, Raster};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn conic(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conic"))
        .args(args)
        .env("CONIC_THREADS", threads)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str], threads: &str) -> String {
    let out = conic(args, threads);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub const H: [f64; 3] = [0.5626, 0.7201, 0.4062];
pub const E: [f64; 3] = [0.2159, 0.8012, 0.5581];

/// Tile with up to `k` square nuclei on an eosin-stained background.
pub fn tile(rng: &mut StdRng, side: usize, k: usize) -> (Raster<[u8; 3]>, InstanceMap, ClassMap) {
    let mut ids = vec![0u32; side * side];
    let mut cls = vec![0u8; side * side];
    for id in 1..=k as u32 {
        let s = rng.random_range(3..side / 3);
        let (x0, y0) = (rng.random_range(0..side - s), rng.random_range(0..side - s));
        let c = rng.random_range(1..=6u8);
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                ids[y * side + x] = id;
                cls[y * side + x] = c;
            }
        }
    }
    let img = (0..side * side)
        .map(|i| {
            let (ch, ce) = if ids[i] > 0 {
                (rng.random_range(0.8..1.6), rng.random_range(0.0..0.3))
            } else {
                (rng.random_range(0.0..0.2), rng.random_range(0.3..0.8))
            };
            std::array::from_fn(|j| (255.0 * 10f64.powf(-(H[j] * ch + E[j] * ce))).round() as u8)
        })
        .collect();
    let inst = conic_core::label_maps::relabel_sequential(&InstanceMap::from_vec(side, side, ids).unwrap());
    (
        Raster::from_vec(side, side, img).unwrap(),
        inst,
        ClassMap::from_vec(side, side, cls).unwrap(),
    )
}

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
}

impl Fixture {
    pub fn p(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }
}

/// A small dataset, its manifest, per-scale predictions and empty maps.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let mut rng = StdRng::seed_from_u64(7);
    let mut entries = Vec::new();
    for i in 0..12 {
        let (img, inst, cls) = tile(&mut rng, 32, 6);
        let name = format!("t{i:02}.png");
        write_rgb(&root.join("images").join(&name), &img).unwrap();
        write_instances(&root.join("instances").join(&name), &inst).unwrap();
        write_classes(&root.join("classes").join(&name), &cls).unwrap();
        entries.push(ManifestEntry {
            id: format!("t{i:02}"),
            image: Path::new("images").join(&name),
            instances: Path::new("instances").join(&name),
            classes: Path::new("classes").join(&name),
            composition: composition_of(&inst, &cls).unwrap(),
        });
        for scale in [32usize, 48, 64, 80, 96] {
            let pi = inst.resize_nearest(scale, scale).unwrap();
            let pc = cls.resize_nearest(scale, scale).unwrap();
            let d = root.join(format!("pred{scale}"));
            write_instances(&d.join("instances").join(&name), &pi).unwrap();
            write_classes(&d.join("classes").join(&name), &pc).unwrap();
        }
    }
    Manifest::new(entries, "")
        .unwrap()
        .save(&root.join("manifest.jsonl"))
        .unwrap();
    write_instances(&root.join("empty_inst.png"), &InstanceMap::empty(8, 8).unwrap()).unwrap();
    write_classes(&root.join("empty_cls.png"), &ClassMap::empty(8, 8).unwrap()).unwrap();
    StainModel::new(H, E, [1.2, 0.6])
        .unwrap()
        .save(&root.join("reference.json"))
        .unwrap();
    Fixture { _dir: dir, root }
}

pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, d: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn commands(f: &Fixture) -> Vec<(&'static str, Vec<String>)> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        (
            "normalize",
            s(&[
                "normalize",
                "--input",
                &f.p("images"),
                "--out",
                "normalized",
                "--reference-image",
                &f.p("images/t00.png"),
                "--save-reference",
                "reference.json",
            ]),
        ),
        (
            "split",
            s(&["split", "--manifest", &f.p("manifest.jsonl"), "--ratios", "2:1:1", "--out-prefix", "split/parts"]),
        ),
        (
            "augment",
            s(&[
                "augment",
                "--manifest",
                &f.p("manifest.jsonl"),
                "--out",
                "augmented",
                "--copies",
                "3",
                "--p-resize",
                "0.5",
                "--sizes",
                "24,48",
                "--p-stain",
                "0.5",
                "--stain-reference",
                &f.p("reference.json"),
                "--min-tissue",
                "50",
            ]),
        ),
        (
            "ensemble",
            s(&[
                "ensemble",
                "--pred",
                &format!("32={}", f.p("pred32")),
                "--pred",
                &format!("96={}", f.p("pred96")),
                "--pred",
                &format!("48={}", f.p("pred48")),
                "--pred",
                &format!("80={}", f.p("pred80")),
                "--pred",
                &format!("64={}", f.p("pred64")),
                "--base",
                "32",
                "--out",
                "fused",
                "--provenance",
                "fused/provenance.json",
            ]),
        ),
        (
            "evaluate",
            s(&["evaluate", "--pred", &f.p("pred32"), "--gt", &f.p(""), "--report", "report.json"]),
        ),
        (
            "count",
            s(&[
                "count",
                "--instances",
                &f.p("instances/t03.png"),
                "--classes",
                &f.p("classes/t03.png"),
                "--report",
                "count.json",
            ]),
        ),
    ]
}
