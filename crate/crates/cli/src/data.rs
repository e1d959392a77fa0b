use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use segunify::augment::{train_pipeline, AugDraws, ImageBuffer};
use segunify::catalog::{
    build_manifests, class_histogram, verify_manifest, Manifest, ManifestOptions, SplitCounts,
};
use segunify::rng::{RngStream, DOMAIN_AUGMENT};
use segunify::sampler::{
    build_schedule, catalog_sizes, manifest_sizes, RepeatPlan, ScheduleParams, DEFAULT_BATCH_SIZE,
    DEFAULT_TARGET_SIZE, DEFAULT_TOTAL_ITERS,
};
use segunify::{fsutil, Error, MaskImage, Result};

use crate::config::Ctx;
use crate::mapping::{resolve_mapping, SpaceArgs};

#[derive(Debug, Args)]
pub struct ManifestArgs {
    /// `NAME=DIR` dataset root, repeatable; NAME is matched against the catalog.
    #[arg(long = "source", value_name = "NAME=DIR", required = true)]
    pub sources: Vec<String>,
    /// Read file headers and record image dimensions.
    #[arg(long)]
    pub probe_dims: bool,
    /// Manifest file to write; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn manifest(ctx: &Ctx, args: ManifestArgs) -> Result<usize> {
    let mut jobs = Vec::new();
    for s in &args.sources {
        let (name, dir) = s
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("--source expects NAME=DIR, got `{s}`")))?;
        let desc = ctx
            .descriptor(name)
            .ok_or_else(|| Error::Argument(format!("dataset `{name}` is not in the catalog")))?;
        jobs.push((desc.clone(), PathBuf::from(dir)));
    }
    let built = build_manifests(
        &jobs,
        &ManifestOptions {
            probe_dims: args.probe_dims,
        },
        ctx.exec,
    )?;
    let mut warnings = 0;
    for w in &built.warnings {
        eprintln!("warning: {w}");
        warnings += 1;
    }
    for (desc, _) in &jobs {
        let report = verify_manifest(&built.manifest, desc);
        for m in &report.mismatches {
            warnings += 1;
            eprintln!(
                "warning: {} {}: {} records, catalog expects {} ({:+})",
                report.dataset, m.split, m.actual, m.expected, m.delta
            );
        }
    }
    match &args.out {
        Some(p) => built.manifest.save(p)?,
        None => print!("{}", built.manifest.to_jsonl()),
    }
    eprintln!("{} records, sha256 {}", built.manifest.len(), built.manifest.checksum());
    Ok(warnings)
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Take dataset sizes from this manifest's train split instead of the catalog.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Balancing target per dataset [default: 120000].
    #[arg(long)]
    pub target_size: Option<u64>,
    /// [default: 80000]
    #[arg(long)]
    pub total_iters: Option<u64>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Plan JSON file; stdout when absent (and no batches are dumped).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Stream the first N batches to stdout as JSON lines.
    #[arg(long, value_name = "N")]
    pub dump_batches: Option<u64>,
}

pub fn plan(ctx: &Ctx, args: PlanArgs) -> Result<usize> {
    let sizes = match &args.manifest {
        Some(p) => manifest_sizes(&Manifest::load(p)?),
        None => catalog_sizes(&ctx.catalog),
    };
    let target = args
        .target_size
        .or(ctx.file.target_size)
        .unwrap_or(DEFAULT_TARGET_SIZE);
    let params = ScheduleParams {
        total_iters: args
            .total_iters
            .or(ctx.file.total_iters)
            .unwrap_or(DEFAULT_TOTAL_ITERS),
        batch_size: args
            .batch_size
            .or(ctx.file.batch_size)
            .unwrap_or(DEFAULT_BATCH_SIZE),
        seed: ctx.seed,
        ..ScheduleParams::default()
    };
    let repeat = RepeatPlan::from_sizes(&sizes, target)?;
    let schedule = build_schedule(&sizes, &repeat, &params)?;
    let json = schedule.to_json();
    match (&args.out, args.dump_batches) {
        (Some(p), _) => fsutil::write_atomic(p, json.as_bytes())?,
        (None, None) => print!("{json}"),
        (None, Some(_)) => {}
    }
    if let Some(n) = args.dump_batches {
        let stdout = std::io::stdout();
        let mut out = std::io::BufWriter::new(stdout.lock());
        for b in schedule.batches().take(n as usize) {
            serde_json::to_writer(&mut out, &b)?;
            writeln!(out).map_err(|e| Error::Data(format!("writing batches: {e}")))?;
        }
        out.flush().map_err(|e| Error::Data(format!("writing batches: {e}")))?;
    }
    Ok(0)
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Number of samples; sample i uses record i modulo the selection size.
    #[arg(long, default_value_t = 1)]
    pub n: u64,
    /// Restrict to one dataset.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Output directory for `NNNNNN.png`, `NNNNNN_mask.png` and `draws.json`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct DrawLog<'a> {
    index: u64,
    dataset: &'a str,
    image: &'a std::path::Path,
    mask: &'a std::path::Path,
    draws: AugDraws,
}

pub fn augment(ctx: &Ctx, args: AugmentArgs) -> Result<usize> {
    let cfg = ctx.file.augment.clone().unwrap_or_default();
    cfg.validate()?;
    let manifest = Manifest::load(&args.manifest)?;
    let records: Vec<_> = manifest
        .records()
        .iter()
        .filter(|r| args.dataset.as_deref().is_none_or(|d| r.dataset == d))
        .collect();
    if records.is_empty() && args.n > 0 {
        return Err(Error::Data("no manifest records to augment".into()));
    }
    let out = ctx.output_dir(args.out, "augment")?;
    let indices: Vec<u64> = (0..args.n).collect();
    let draws = ctx.exec.try_map(&indices, |&i| {
        let r = records[(i % records.len() as u64) as usize];
        let img = ImageBuffer::load(&r.image_path)?;
        let mask = MaskImage::read_png(&r.mask_path, r.dataset.as_str())?;
        let mut rng = RngStream::new(ctx.seed, DOMAIN_AUGMENT, i);
        let (oi, om, d) = train_pipeline(&img, &mask, &cfg, &mut rng)?;
        fsutil::write_atomic(&out.join(format!("{i:06}.png")), &oi.encode_png())?;
        om.write_png(&out.join(format!("{i:06}_mask.png")))?;
        Ok::<_, Error>(DrawLog {
            index: i,
            dataset: &r.dataset,
            image: &r.image_path,
            mask: &r.mask_path,
            draws: d,
        })
    })?;
    let log = serde_json::json!({ "seed": ctx.seed, "config": cfg, "samples": draws });
    let mut text = serde_json::to_string_pretty(&log)?;
    text.push('\n');
    fsutil::write_atomic(&out.join("draws.json"), text.as_bytes())?;
    println!("{} samples", args.n);
    Ok(0)
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Also count mask pixels per class (needs each dataset's mapping).
    #[arg(long)]
    pub histogram: bool,
    #[command(flatten)]
    pub spaces: SpaceArgs,
}

#[derive(Debug, Serialize)]
struct DatasetStats {
    counts: SplitCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    histogram: Option<BTreeMap<u32, u64>>,
}

pub fn stats(ctx: &Ctx, args: StatsArgs) -> Result<usize> {
    let manifest = Manifest::load(&args.manifest)?;
    let mut datasets = BTreeMap::new();
    for (name, counts) in manifest.counts() {
        let histogram = if args.histogram {
            let loaded = resolve_mapping(ctx, None, Some(&name), &args.spaces)?;
            let subset = Manifest::from_records(
                manifest
                    .records()
                    .iter()
                    .filter(|r| r.dataset == name)
                    .cloned()
                    .collect(),
            );
            Some(class_histogram(&subset, loaded.forward.source(), ctx.exec)?.to_map())
        } else {
            None
        };
        datasets.insert(name, DatasetStats { counts, histogram });
    }
    let out = serde_json::json!({
        "records": manifest.len(),
        "checksum": manifest.checksum(),
        "datasets": datasets,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}
