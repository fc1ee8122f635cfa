use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use conic_core::augment::{apply, sample_spec, AugmentPolicy, AugmentSpec};
use conic_core::dataset::{load_sample, scan_label_dir, stratified_split, Manifest, ManifestEntry, PARTITION_NAMES};
use conic_core::ensemble::{fuse, EnsembleConfig, FusedInstance, ScaledPrediction};
use conic_core::io::{encode_classes, encode_instances, encode_rgb, read_classes, read_instances, read_rgb};
use conic_core::label_maps::{assign_instance_classes, composition, composition_of, DroppedInstance};
use conic_core::metrics::{evaluate, EvalPair};
use conic_core::stain_norm::{estimate_stain_model, normalize_to_reference, MacenkoParams, StainModel};
use conic_core::{par, Composition, Error, NucleusClass};

use crate::output::{RunRecord, Staged};
use crate::{Cli, Command, MacenkoArgs, UsageError};

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

impl MacenkoArgs {
    fn params(&self) -> Result<MacenkoParams> {
        let p = MacenkoParams {
            io: self.io,
            beta: self.beta,
            alpha: self.alpha,
            max_c_percentile: self.percentile,
            min_tissue_pixels: self.min_tissue,
        };
        p.validate().map_err(usage)?;
        Ok(p)
    }
}

fn shown(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(cli: &Cli) -> Result<String> {
    let g = &cli.global;
    let mut staged = Staged::new(&g.output_dir);
    let (record, summary) = match &cli.command {
        Command::Normalize {
            input,
            out,
            reference_model,
            reference_image,
            save_reference,
            macenko,
        } => normalize(
            &mut staged,
            input,
            out,
            reference_model.as_deref(),
            reference_image.as_deref(),
            save_reference.as_deref(),
            macenko,
        )?,
        Command::Split {
            manifest,
            ratios,
            out_prefix,
        } => split(&mut staged, g.seed, manifest, ratios, out_prefix)?,
        Command::Augment {
            manifest,
            out,
            copies,
            p_flip_h,
            p_flip_v,
            p_rotate,
            p_resize,
            sizes,
            p_stain,
            stain_reference,
            macenko,
        } => {
            let policy = AugmentPolicy {
                p_flip_h: *p_flip_h,
                p_flip_v: *p_flip_v,
                p_rotate: *p_rotate,
                p_resize: *p_resize,
                sizes: sizes.clone(),
                p_stain_normalize: *p_stain,
            };
            augment(
                &mut staged,
                g.seed,
                manifest,
                out,
                *copies,
                policy,
                stain_reference.as_deref(),
                macenko,
            )?
        }
        Command::Ensemble {
            preds,
            iou,
            min_votes,
            base,
            out,
            provenance,
        } => ensemble(&mut staged, preds, *iou, *min_votes, *base, out, provenance.as_deref())?,
        Command::Evaluate { pred, gt, report, iou } => evaluate_cmd(&mut staged, pred, gt, report, *iou)?,
        Command::Count {
            instances,
            classes,
            report,
        } => count(&mut staged, instances, classes, report.as_deref())?,
    };
    staged.commit(record, g.seed, &g.run_manifest)?;
    Ok(summary)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for item in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = item?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some("png") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn normalize(
    staged: &mut Staged,
    input: &Path,
    out: &Path,
    reference_model: Option<&Path>,
    reference_image: Option<&Path>,
    save_reference: Option<&Path>,
    macenko: &MacenkoArgs,
) -> Result<(RunRecord, String)> {
    let params = macenko.params()?;
    let (reference, reference_input) = match (reference_model, reference_image) {
        (Some(m), _) => (StainModel::load(m)?, m),
        (None, Some(img)) => {
            let tile = read_rgb(img)?;
            let model = estimate_stain_model(&tile, &params)
                .with_context(|| format!("estimating the reference stain model from {}", img.display()))?;
            (model, img)
        }
        (None, None) => return Err(usage("one of --reference-model or --reference-image is required")),
    };

    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        png_files(input)?
            .into_iter()
            .map(|f| {
                let name = f.file_name().expect("listed files have names").to_owned();
                (f, out.join(name))
            })
            .collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    if jobs.is_empty() {
        bail!("no PNG tiles in {}", input.display());
    }

    let results = par::map(&jobs, |(src, dst)| -> conic_core::Result<(Vec<u8>, bool)> {
        let tile = read_rgb(src)?;
        let (img, skipped) = match normalize_to_reference(&tile, &params, &reference) {
            Ok(n) => (n, false),
            Err(e @ (Error::InsufficientTissue { .. } | Error::DegenerateStain(_))) => {
                log::warn!("{}: copied unchanged, {e}", src.display());
                (tile, true)
            }
            Err(e) => return Err(e),
        };
        Ok((encode_rgb(dst, &img)?, skipped))
    });
    let mut skipped = 0;
    for ((_, dst), r) in jobs.iter().zip(results) {
        let (bytes, s) = r?;
        skipped += s as usize;
        staged.add(dst, bytes);
    }
    if let Some(p) = save_reference {
        staged.add(p, format!("{}\n", reference.to_json()).into_bytes());
    }

    let record = RunRecord {
        command: "normalize",
        inputs: vec![shown(input), shown(reference_input)],
        parameters: json!({
            "params": params,
            "reference": reference,
        }),
    };
    let summary = format!(
        "normalize: {} tiles -> {} ({} copied unchanged)",
        jobs.len(),
        out.display(),
        skipped
    );
    Ok((record, summary))
}

/// Copy of `m` whose relative paths still resolve when saved in `out_dir`.
fn rebase(m: &Manifest, out_dir: &Path) -> Result<Manifest> {
    let base = if m.base_dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        m.base_dir.as_path()
    };
    let src = fs::canonicalize(base).with_context(|| format!("resolving {}", base.display()))?;
    let dst = if out_dir.as_os_str().is_empty() { Path::new(".") } else { out_dir };
    if fs::canonicalize(dst).ok().as_deref() == Some(src.as_path()) {
        return Ok(Manifest::new(m.entries.clone(), out_dir)?);
    }
    let fix = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { src.join(p) };
    let entries = m
        .entries
        .iter()
        .map(|e| ManifestEntry {
            image: fix(&e.image),
            instances: fix(&e.instances),
            classes: fix(&e.classes),
            ..e.clone()
        })
        .collect();
    Ok(Manifest::new(entries, out_dir)?)
}

fn split(
    staged: &mut Staged,
    seed: u64,
    manifest: &Path,
    ratios: &conic_core::dataset::SplitRatios,
    out_prefix: &Path,
) -> Result<(RunRecord, String)> {
    let m = Manifest::load(manifest)?;
    let s = stratified_split(&m, ratios, seed)?;
    let prefix = out_prefix.display().to_string();
    let out_dir = staged
        .resolve(out_prefix)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    for (name, part) in PARTITION_NAMES.iter().zip(s.partitions()) {
        let rebased = rebase(part, &out_dir)?;
        staged.add(format!("{prefix}.{name}.jsonl"), rebased.to_jsonl().into_bytes());
    }
    staged.add_json(format!("{prefix}.balance.json"), &s.report)?;

    let sizes: Vec<String> = s.partitions().iter().map(|p| p.len().to_string()).collect();
    let worst = s
        .report
        .max_abs_deviation()
        .map_or("n/a".to_string(), |d| format!("{:.1}%", 100.0 * d));
    let record = RunRecord {
        command: "split",
        inputs: vec![shown(manifest)],
        parameters: json!({ "ratios": ratios.to_string() }),
    };
    let summary = format!(
        "split: {} entries -> {} (largest class deviation {worst})",
        m.len(),
        sizes.join("/")
    );
    Ok((record, summary))
}

#[derive(Serialize)]
struct AppliedSpec {
    source: String,
    copy: usize,
    stream: u64,
    spec: AugmentSpec,
    output: String,
    stain_normalized: bool,
    warnings: Vec<String>,
}

struct AugmentedCopy {
    applied: AppliedSpec,
    composition: Composition,
    files: Option<[Vec<u8>; 3]>,
}

#[allow(clippy::too_many_arguments)]
fn augment(
    staged: &mut Staged,
    seed: u64,
    manifest: &Path,
    out: &Path,
    copies: usize,
    policy: AugmentPolicy,
    stain_reference: Option<&Path>,
    macenko: &MacenkoArgs,
) -> Result<(RunRecord, String)> {
    policy.validate().map_err(usage)?;
    if copies == 0 {
        return Err(usage("--copies must be at least 1"));
    }
    let params = macenko.params()?;
    let reference = match stain_reference {
        Some(p) => Some(StainModel::load(p)?),
        None if policy.p_stain_normalize > 0.0 => {
            return Err(usage("--p-stain above 0 needs --stain-reference"));
        }
        None => None,
    };
    let m = Manifest::load(manifest)?;
    for e in &m.entries {
        if e.id.is_empty() || e.id.contains(['/', '\\']) || e.id == "." || e.id == ".." {
            bail!("sample id {:?} cannot be used as a file name", e.id);
        }
    }

    let per_entry = par::map_range(m.len(), |i| -> conic_core::Result<Vec<AugmentedCopy>> {
        let entry = &m.entries[i];
        let loaded = load_sample(&m, entry)?;
        let mut seen = BTreeSet::new();
        let mut outs = Vec::with_capacity(copies);
        for copy in 0..copies {
            let stream = (i * copies + copy) as u64;
            let spec = sample_spec(seed, stream, &policy);
            let a = apply(&loaded.sample, &spec, reference.as_ref(), &params)?;
            let (w, _) = a.sample.dims();
            let stem = spec.file_stem(&entry.id, w, a.stain_normalized);
            let files = if seen.insert(stem.clone()) {
                let p = Path::new(&stem);
                Some([
                    encode_rgb(p, &a.sample.image)?,
                    encode_instances(p, &a.sample.instances)?,
                    encode_classes(p, &a.sample.classes)?,
                ])
            } else {
                None
            };
            outs.push(AugmentedCopy {
                composition: composition_of(&a.sample.instances, &a.sample.classes)?,
                applied: AppliedSpec {
                    source: entry.id.clone(),
                    copy,
                    stream,
                    spec,
                    output: stem,
                    stain_normalized: a.stain_normalized,
                    warnings: a.warnings,
                },
                files,
            });
        }
        Ok(outs)
    });

    let mut entries = Vec::new();
    let mut specs = String::new();
    let mut skipped = 0;
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    for r in per_entry {
        for c in r? {
            let stem = c.applied.output.clone();
            if c.applied.spec.stain_normalize && !c.applied.stain_normalized {
                skipped += 1;
            }
            specs.push_str(&serde_json::to_string(&c.applied)?);
            specs.push('\n');
            let Some([img, inst, cls]) = c.files else { continue };
            if let Some(prev) = owner.insert(stem.clone(), c.applied.source.clone()) {
                bail!("output name {stem:?} produced by both {prev:?} and {:?}", c.applied.source);
            }
            let file = format!("{stem}.png");
            staged.add(out.join("images").join(&file), img);
            staged.add(out.join("instances").join(&file), inst);
            staged.add(out.join("classes").join(&file), cls);
            entries.push(ManifestEntry {
                id: stem,
                image: Path::new("images").join(&file),
                instances: Path::new("instances").join(&file),
                classes: Path::new("classes").join(&file),
                composition: c.composition,
            });
        }
    }
    let written = entries.len();
    let out_manifest = Manifest::new(entries, "")?;
    staged.add(out.join("manifest.jsonl"), out_manifest.to_jsonl().into_bytes());
    staged.add(out.join("augment_specs.jsonl"), specs.into_bytes());

    let mut inputs = vec![shown(manifest)];
    inputs.extend(stain_reference.map(shown));
    let record = RunRecord {
        command: "augment",
        inputs,
        parameters: json!({
            "copies": copies,
            "policy": policy,
            "params": params,
        }),
    };
    let summary = format!(
        "augment: {} samples -> {written} outputs in {} ({skipped} stain normalizations skipped)",
        m.len(),
        out.display()
    );
    Ok((record, summary))
}

fn ensemble(
    staged: &mut Staged,
    preds: &[(usize, PathBuf)],
    iou: f64,
    min_votes: usize,
    base: usize,
    out: &Path,
    provenance: Option<&Path>,
) -> Result<(RunRecord, String)> {
    let mut preds = preds.to_vec();
    preds.sort();
    if let Some(w) = preds.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(usage(format!("scale {} given more than once", w[0].0)));
    }
    let cfg = EnsembleConfig {
        base_size: base,
        iou_threshold: iou,
        min_votes,
        scales: preds.iter().map(|p| p.0).collect(),
    };
    cfg.validate().map_err(usage)?;

    let mut listings = Vec::new();
    for (scale, dir) in &preds {
        let list = scan_label_dir(dir)?;
        listings.push((*scale, list));
    }
    let names: Vec<String> = listings[0].1.iter().map(|t| t.0.clone()).collect();
    for (scale, list) in &listings[1..] {
        let other: Vec<&String> = list.iter().map(|t| &t.0).collect();
        if other.iter().copied().ne(names.iter()) {
            bail!(
                "tiles at scale {scale} differ from tiles at scale {}",
                listings[0].0
            );
        }
    }
    if names.is_empty() {
        bail!("no tiles found in {}", preds[0].1.display());
    }

    let fused = par::map_range(names.len(), |t| -> conic_core::Result<(Vec<u8>, Vec<u8>, Vec<FusedInstance>)> {
        let mut per_scale = Vec::with_capacity(listings.len());
        for (scale, list) in &listings {
            let (_, inst, cls) = &list[t];
            per_scale.push(ScaledPrediction::new(*scale, read_instances(inst)?, read_classes(cls)?)?);
        }
        let f = fuse(&per_scale, &cfg)?;
        let p = Path::new(&names[t]);
        Ok((encode_instances(p, &f.instances)?, encode_classes(p, &f.classes)?, f.provenance))
    });

    let mut sources: BTreeMap<&str, Vec<FusedInstance>> = BTreeMap::new();
    let mut total = 0;
    for (name, r) in names.iter().zip(fused) {
        let (inst, cls, prov) = r.with_context(|| format!("fusing tile {name}"))?;
        let file = format!("{name}.png");
        staged.add(out.join("instances").join(&file), inst);
        staged.add(out.join("classes").join(&file), cls);
        total += prov.len();
        sources.insert(name, prov);
    }
    if let Some(p) = provenance {
        staged.add_json(p, &sources)?;
    }

    let record = RunRecord {
        command: "ensemble",
        inputs: preds.iter().map(|(s, d)| format!("{s}={}", d.display())).collect(),
        parameters: json!({ "config": cfg }),
    };
    let summary = format!(
        "ensemble: {} tiles x {} scales -> {total} fused instances in {}",
        names.len(),
        preds.len(),
        out.display()
    );
    Ok((record, summary))
}

fn evaluate_cmd(staged: &mut Staged, pred: &Path, gt: &Path, report: &Path, iou: f64) -> Result<(RunRecord, String)> {
    if !(0.5..=1.0).contains(&iou) {
        return Err(usage(format!("--iou must be in [0.5, 1], got {iou}")));
    }
    let p = scan_label_dir(pred)?;
    let g = scan_label_dir(gt)?;
    let pn: BTreeSet<&String> = p.iter().map(|t| &t.0).collect();
    let gn: BTreeSet<&String> = g.iter().map(|t| &t.0).collect();
    if let Some(n) = gn.difference(&pn).next() {
        bail!("ground-truth tile {n:?} has no prediction");
    }
    if let Some(n) = pn.difference(&gn).next() {
        bail!("prediction {n:?} has no ground truth");
    }

    let pairs = par::map_range(p.len(), |i| -> conic_core::Result<EvalPair> {
        Ok(EvalPair {
            pred_instances: read_instances(&p[i].1)?,
            pred_classes: read_classes(&p[i].2)?,
            gt_instances: read_instances(&g[i].1)?,
            gt_classes: read_classes(&g[i].2)?,
        })
    })
    .into_iter()
    .collect::<conic_core::Result<Vec<_>>>()?;
    let r = evaluate(&pairs, iou)?;
    staged.add_json(report, &r)?;

    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    let record = RunRecord {
        command: "evaluate",
        inputs: vec![shown(pred), shown(gt)],
        parameters: json!({ "iou_threshold": iou }),
    };
    let summary = format!(
        "evaluate: {} images, mPQ {}, mPQ+ {}, R2 {:.4}",
        r.images,
        fmt(r.mpq),
        fmt(r.mpq_plus),
        r.mean_r2
    );
    Ok((record, summary))
}

#[derive(Serialize)]
struct CountReport {
    counts: BTreeMap<&'static str, u64>,
    composition: Composition,
    total: u64,
    dropped: Vec<DroppedInstance>,
}

fn count(staged: &mut Staged, instances: &Path, classes: &Path, report: Option<&Path>) -> Result<(RunRecord, String)> {
    let inst = read_instances(instances)?;
    let cls = read_classes(classes)?;
    let a = assign_instance_classes(&inst, &cls)?;
    let comp = composition(&a.records);
    let line: Vec<String> = NucleusClass::ALL
        .iter()
        .map(|&c| format!("{}={}", c.name(), comp.get(c)))
        .collect();
    if let Some(p) = report {
        let r = CountReport {
            counts: NucleusClass::ALL.iter().map(|&c| (c.name(), comp.get(c))).collect(),
            composition: comp,
            total: comp.total(),
            dropped: a.dropped.clone(),
        };
        staged.add_json(p, &r)?;
    }
    let record = RunRecord {
        command: "count",
        inputs: vec![shown(instances), shown(classes)],
        parameters: json!({}),
    };
    let mut summary = format!("count: {} total={}", line.join(" "), comp.total());
    if !a.dropped.is_empty() {
        summary.push_str(&format!(" ({} unclassified instances dropped)", a.dropped.len()));
    }
    Ok((record, summary))
}
