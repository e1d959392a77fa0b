use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;

use segunify::augment::ImageBuffer;
use segunify::catalog::{Manifest, SampleRecord};
use segunify::eval::{evaluate_dataset, pair_predictions, prediction_name, EvalConfig, ReportFile};
use segunify::logits::LogitMap;
use segunify::tta::{
    run_tta, FixturePredictor, Fusion, PredictRequest, Predictor, ProcessPredictor, StubMode,
    StubPredictor,
};
use segunify::{fsutil, Error, Execution, MaskImage, Result};

use crate::config::Ctx;
use crate::mapping::{policy, resolve_mapping, SpaceArgs, UNIFIED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StubKind {
    Constant,
    Checkerboard,
    GtLeak,
}

#[derive(Debug, Args)]
pub struct TtaArgs {
    /// Images listed in this manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Restrict manifest records to one dataset.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Individual image files, repeatable.
    #[arg(long = "image", value_name = "FILE")]
    pub images: Vec<PathBuf>,
    /// Predictor program and arguments, split on whitespace.
    #[arg(long, value_name = "CMD", group = "predictor")]
    pub predictor_cmd: Option<String>,
    /// Directory of pre-generated `<stem>_<w>x<h>_<plain|flip>.sglt` logits.
    #[arg(long, value_name = "DIR", group = "predictor")]
    pub fixtures: Option<PathBuf>,
    /// In-process fake model.
    #[arg(long, value_enum, group = "predictor")]
    pub stub: Option<StubKind>,
    /// Class count of the stub model.
    #[arg(long, default_value_t = 256)]
    pub classes: u32,
    /// Comma-separated scale ratios [default: 0.5,0.75,1.0,1.25,1.5,1.75].
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Base scale as WxH [default: 2048x1024].
    #[arg(long, value_parser = parse_dims)]
    pub base_scale: Option<(u32, u32)>,
    /// Skip the mirrored pass at every scale.
    #[arg(long)]
    pub no_flip: bool,
    /// Average softmax probabilities instead of raw logits.
    #[arg(long)]
    pub prob_mean: bool,
    /// Output directory for `<image stem>.png` unified-space masks.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Mapping used by the gt-leak stub to express ground truth in unified ids.
    #[arg(long, value_name = "FILE")]
    pub mapping: Option<PathBuf>,
    #[command(flatten)]
    pub spaces: SpaceArgs,
}

fn parse_dims(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

struct Job {
    image: PathBuf,
    size: Option<(u32, u32)>,
}

pub fn tta(ctx: &Ctx, args: TtaArgs) -> Result<usize> {
    let mut cfg = ctx.file.tta.clone().unwrap_or_default();
    if let Some(r) = &args.ratios {
        cfg.ratios = r.clone();
    }
    if let Some(b) = args.base_scale {
        cfg.base_scale = b;
    }
    if args.no_flip {
        cfg.flip = false;
    }
    if args.prob_mean {
        cfg.fusion = Fusion::ProbMean;
    }
    cfg.validate()?;

    let records: Vec<SampleRecord> = match &args.manifest {
        Some(p) => Manifest::load(p)?
            .records()
            .iter()
            .filter(|r| args.dataset.as_deref().is_none_or(|d| r.dataset == d))
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    let mut jobs: Vec<Job> = records
        .iter()
        .map(|r| Job {
            image: r.image_path.clone(),
            size: r.width.zip(r.height),
        })
        .collect();
    jobs.extend(args.images.iter().map(|p| Job {
        image: p.clone(),
        size: None,
    }));

    let predictor: Box<dyn Predictor> = match (&args.predictor_cmd, &args.fixtures, args.stub) {
        (Some(cmd), _, _) => {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| Error::Argument("empty --predictor-cmd".into()))?;
            Box::new(ProcessPredictor::spawn(&program, &parts.collect::<Vec<_>>())?)
        }
        (None, Some(dir), _) => Box::new(FixturePredictor::new(dir)),
        (None, None, Some(kind)) => Box::new(StubPredictor {
            classes: args.classes,
            mode: stub_mode(ctx, kind, &records, args.mapping.as_deref(), &args.spaces)?,
        }),
        (None, None, None) => {
            return Err(Error::Argument(
                "choose a predictor: --predictor-cmd, --fixtures or --stub".into(),
            ))
        }
    };

    let out = ctx.output_dir(args.out, "tta")?;
    // A child-process predictor serves one request at a time; images are the
    // unit of parallel work for the other predictors.
    let exec = if args.predictor_cmd.is_some() {
        Execution::Sequential
    } else {
        ctx.exec
    };
    exec.try_map(&jobs, |job| {
        let size = match job.size {
            Some(s) => s,
            None => ImageBuffer::dimensions(&job.image)?,
        };
        let mask = run_tta(&job.image, size, predictor.as_ref(), &cfg, UNIFIED, Execution::Sequential)?;
        mask.write_png(&out.join(prediction_name(&job.image)))
    })?;
    println!("{} images", jobs.len());
    Ok(0)
}

/// Ground-truth masks keyed by image path, in unified ids when a mapping is known.
fn leaked_masks(
    ctx: &Ctx,
    records: &[SampleRecord],
    mapping: Option<&Path>,
    spaces: &SpaceArgs,
) -> Result<HashMap<PathBuf, MaskImage>> {
    let mut luts = HashMap::new();
    let mut out = HashMap::new();
    for r in records {
        if !luts.contains_key(&r.dataset) {
            let lut = match (mapping, ctx.mapping_dir.is_some()) {
                (Some(_), _) | (None, true) => {
                    Some(resolve_mapping(ctx, mapping, Some(&r.dataset), spaces)?.forward.build_lut())
                }
                (None, false) => None,
            };
            luts.insert(r.dataset.clone(), lut);
        }
        let mut mask = MaskImage::read_png(&r.mask_path, r.dataset.as_str())?;
        if let Some(lut) = &luts[&r.dataset] {
            mask = lut.project(&mask)?;
        }
        out.insert(r.image_path.clone(), mask);
    }
    Ok(out)
}

fn stub_mode(
    ctx: &Ctx,
    kind: StubKind,
    records: &[SampleRecord],
    mapping: Option<&Path>,
    spaces: &SpaceArgs,
) -> Result<StubMode> {
    Ok(match kind {
        StubKind::Constant => StubMode::Constant,
        StubKind::Checkerboard => StubMode::Checkerboard,
        StubKind::GtLeak => {
            if records.is_empty() {
                return Err(Error::Argument("the gt-leak stub needs --manifest".into()));
            }
            StubMode::GtLeak(leaked_masks(ctx, records, mapping, spaces)?)
        }
    })
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<image stem>.png` predictions.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Ground-truth manifest.
    #[arg(long, value_name = "FILE")]
    pub gt: PathBuf,
    /// Dataset-to-unified mapping; per-dataset files from --mapping-dir otherwise.
    #[arg(long, value_name = "FILE")]
    pub mapping: Option<PathBuf>,
    /// Restrict to one dataset.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Diagnostic scoring in the unified space instead of the dataset space.
    #[arg(long)]
    pub unified: bool,
    /// Back-projection collision rule [default: first-listed].
    #[arg(long)]
    pub policy: Option<String>,
    /// Ground-truth class to ignore [default: the space's void class].
    #[arg(long)]
    pub ignore: Option<u32>,
    /// Report file for a single dataset; JSON lines on stdout otherwise.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub spaces: SpaceArgs,
}

pub fn evaluate(ctx: &Ctx, args: EvaluateArgs) -> Result<usize> {
    let gt = Manifest::load(&args.gt)?;
    let mut names: Vec<String> = gt.counts().into_keys().collect();
    if let Some(d) = &args.dataset {
        names.retain(|n| n == d);
    }
    if names.is_empty() {
        return Err(Error::Data("no ground-truth records to evaluate".into()));
    }
    if names.len() > 1 && (args.mapping.is_some() || args.out.is_some()) {
        return Err(Error::Argument(
            "--mapping and --out need a single dataset; pass --dataset".into(),
        ));
    }
    let mut warnings = 0;
    for name in &names {
        let loaded = resolve_mapping(ctx, args.mapping.as_deref(), Some(name), &args.spaces)?;
        let mut cfg = if args.unified {
            EvalConfig::unified(loaded.forward.clone())
        } else {
            let back = loaded.forward.invert(policy(ctx, args.policy.as_deref())?)?;
            EvalConfig::new(loaded.forward.source().clone(), Some(back))
        };
        if args.ignore.is_some() {
            cfg.ignore_class = args.ignore;
        }
        cfg.strict = ctx.strict;
        let subset = Manifest::from_records(
            gt.records()
                .iter()
                .filter(|r| &r.dataset == name)
                .cloned()
                .collect(),
        );
        let pairs = pair_predictions(&args.pred, &subset);
        let outcome = evaluate_dataset(&pairs, &cfg, ctx.exec)?;
        if !outcome.missing.is_empty() {
            warnings += 1;
            eprintln!(
                "warning: {name}: {} of {} ground-truth masks have no prediction",
                outcome.missing.len(),
                pairs.len()
            );
        }
        let report = ReportFile::new(name, &cfg.space, &outcome.report);
        match &args.out {
            Some(p) => {
                let mut text = serde_json::to_string_pretty(&report)?;
                text.push('\n');
                fsutil::write_atomic(p, text.as_bytes())?;
            }
            None => println!("{}", serde_json::to_string(&report)?),
        }
        eprintln!("{name}: miou {:.4} over {} classes", report.miou, outcome.report.counted_classes);
    }
    Ok(warnings)
}

#[derive(Debug, Args)]
pub struct StubArgs {
    #[arg(long, value_enum)]
    pub stub: StubKind,
    /// Directory the SGLT replies are written to.
    #[arg(long, value_name = "DIR")]
    pub workdir: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub classes: u32,
    /// Ground-truth manifest for the gt-leak stub.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Mapping expressing leaked ground truth in unified ids.
    #[arg(long, value_name = "FILE")]
    pub mapping: Option<PathBuf>,
}

#[derive(Deserialize)]
struct WireRequest {
    id: serde_json::Value,
    #[serde(flatten)]
    rest: serde_json::Value,
}

fn reply_for(stub: &StubPredictor, workdir: &Path, line: &str) -> serde_json::Value {
    let wire: WireRequest = match serde_json::from_str(line) {
        Ok(w) => w,
        Err(e) => return serde_json::json!({ "id": null, "error": format!("malformed request: {e}") }),
    };
    let mut full = wire.rest;
    full["id"] = wire.id.clone();
    let result = serde_json::from_value::<PredictRequest>(full)
        .map_err(|e| format!("malformed request: {e}"))
        .and_then(|req| {
            let path = workdir.join(format!("{}.sglt", req.id));
            stub.logits(&req)
                .and_then(|l: LogitMap| l.write_sglt(&path))
                .map(|_| path)
                .map_err(|e| e.to_string())
        });
    match result {
        Ok(path) => serde_json::json!({ "id": wire.id, "logit_path": path }),
        Err(e) => serde_json::json!({ "id": wire.id, "error": e }),
    }
}

pub fn serve_stub(args: StubArgs) -> Result<usize> {
    let ctx = Ctx::resolve(None, Default::default())?;
    let records: Vec<SampleRecord> = match &args.manifest {
        Some(p) => Manifest::load(p)?.records().to_vec(),
        None => Vec::new(),
    };
    let stub = StubPredictor {
        classes: args.classes,
        mode: stub_mode(&ctx, args.stub, &records, args.mapping.as_deref(), &SpaceArgs::default())?,
    };
    std::fs::create_dir_all(&args.workdir).map_err(|e| crate::mapping::io_error(&args.workdir, e))?;
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| Error::Data(format!("reading requests: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = reply_for(&stub, &args.workdir, &line);
        writeln!(stdout, "{reply}")
            .and_then(|_| stdout.flush())
            .map_err(|e| Error::Data(format!("writing reply: {e}")))?;
    }
    Ok(0)
}
