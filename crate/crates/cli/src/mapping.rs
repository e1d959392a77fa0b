use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use segunify::label_space::{
    parse_mapping_rows, space_from_rows, table_from_rows, unified_space_from_rows, validate_mapping,
    MappingRow,
};
use segunify::{fsutil, parse_label_space, Error, InversionPolicy, LabelSpace, MappingTable, MaskImage, Result};

use crate::config::Ctx;

pub const UNIFIED: &str = "unified";

/// A dataset-to-unified mapping with both spaces resolved.
pub struct LoadedMapping {
    pub forward: MappingTable,
}

/// Optional label CSVs overriding the spaces implied by a mapping file.
#[derive(Debug, Clone, Default, Args)]
pub struct SpaceArgs {
    /// Dataset label CSV (`id,name`); defaults to the mapping's source column.
    #[arg(long, value_name = "FILE")]
    pub source_labels: Option<PathBuf>,
    /// Unified label CSV (`id,name`); defaults to 256 ids named from the mapping.
    #[arg(long, value_name = "FILE")]
    pub unified_labels: Option<PathBuf>,
}

/// Display name for a mapping file: the catalog entry it belongs to, else its stem.
pub fn dataset_for(ctx: &Ctx, path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = path.file_name().map(PathBuf::from);
    ctx.catalog
        .datasets
        .iter()
        .find(|d| Some(&d.mapping_file) == file.as_ref() || d.matches(&stem))
        .map(|d| d.name.clone())
        .unwrap_or(stem)
}

pub fn load_mapping(path: &Path, dataset: &str, spaces: &SpaceArgs) -> Result<LoadedMapping> {
    let text = fsutil::read_to_string(path)?;
    let rows = parse_mapping_rows(&path.display().to_string(), &text)?;
    let (source, target) = resolve_spaces(dataset, &rows, spaces)?;
    let forward = table_from_rows(&rows, &source, &target)?;
    Ok(LoadedMapping { forward })
}

fn resolve_spaces(dataset: &str, rows: &[MappingRow], spaces: &SpaceArgs) -> Result<(LabelSpace, LabelSpace)> {
    let source = match &spaces.source_labels {
        Some(p) => parse_label_space(dataset, &fsutil::read_to_string(p)?)?,
        None => space_from_rows(dataset, rows, false)?,
    };
    let target = match &spaces.unified_labels {
        Some(p) => parse_label_space(UNIFIED, &fsutil::read_to_string(p)?)?,
        None => unified_space_from_rows(UNIFIED, rows)?,
    };
    Ok((source, target))
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Mapping CSVs; defaults to every `.csv` in the mapping directory.
    pub files: Vec<PathBuf>,
    #[command(flatten)]
    pub spaces: SpaceArgs,
    /// Print one JSON object per mapping instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Serialize)]
struct ValidateLine {
    dataset: String,
    original_classes: usize,
    projected_classes: usize,
    expected: Option<(usize, usize)>,
    unmapped_sources: Vec<u32>,
    collisions: usize,
}

pub fn validate(ctx: &Ctx, args: ValidateArgs) -> Result<usize> {
    let files = if args.files.is_empty() {
        let dir = ctx.mapping_dir.as_ref().ok_or_else(|| {
            Error::Argument("validate-mapping needs mapping files or --mapping-dir".into())
        })?;
        csv_files(dir)?
    } else {
        args.files
    };
    let mut warnings = 0;
    for path in &files {
        let dataset = dataset_for(ctx, path);
        let text = fsutil::read_to_string(path)?;
        let rows = parse_mapping_rows(&path.display().to_string(), &text)?;
        // A target-side space built from the rows themselves keeps the
        // projected count independent of the unified label file.
        let (source, full) = resolve_spaces(&dataset, &rows, &args.spaces)?;
        let target = match &args.spaces.unified_labels {
            Some(_) => full,
            None => space_from_rows(UNIFIED, &rows, true)?,
        };
        let report = validate_mapping(&rows, &source, &target);
        if !report.ok {
            return Err(Error::UnknownIds {
                mapping: path.display().to_string(),
                rows: report.unknown,
            });
        }
        let table = table_from_rows(&rows, &source, &target)?;
        let original = source.non_void_len();
        let projected = table.projected_class_count();
        let expected = ctx
            .descriptor(&dataset)
            .map(|d| (d.original_classes, d.projected_classes));
        if let Some((eo, ep)) = expected {
            if (eo, ep) != (original, projected) {
                warnings += 1;
                eprintln!(
                    "warning: {dataset}: {original} -> {projected}, catalog expects {eo} -> {ep}"
                );
            }
        }
        if !report.unmapped_sources.is_empty() {
            eprintln!(
                "note: {dataset}: {} source classes unmapped: {:?}",
                report.unmapped_sources.len(),
                report.unmapped_sources
            );
        }
        if args.json {
            let line = ValidateLine {
                dataset,
                original_classes: original,
                projected_classes: projected,
                expected,
                unmapped_sources: report.unmapped_sources,
                collisions: report.collisions.len(),
            };
            println!("{}", serde_json::to_string(&line)?);
        } else {
            println!("{dataset}: {original} -> {projected}");
        }
    }
    Ok(warnings)
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_error(dir, e))? {
        let p = entry.map_err(|e| io_error(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    ToUnified,
    ToDataset,
}

#[derive(Debug, Args)]
pub struct RemapArgs {
    /// Directory of input PNG masks (searched recursively).
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    /// Output directory; relative paths and file names are preserved.
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Dataset-to-unified mapping CSV.
    #[arg(long, value_name = "FILE")]
    pub mapping: Option<PathBuf>,
    /// Dataset name; locates the mapping in --mapping-dir when --mapping is absent.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_enum, default_value = "to-unified")]
    pub direction: Direction,
    /// Collision rule for to-dataset: strict, first-listed or to-void [default: first-listed].
    #[arg(long)]
    pub policy: Option<String>,
    /// Mapping rows overriding individual source ids.
    #[arg(long, value_name = "FILE")]
    pub overlay: Option<PathBuf>,
    #[command(flatten)]
    pub spaces: SpaceArgs,
}

pub fn policy(ctx: &Ctx, flag: Option<&str>) -> Result<InversionPolicy> {
    match flag.or(ctx.file.policy.as_deref()) {
        Some(p) => p.parse(),
        None => Ok(InversionPolicy::default()),
    }
}

/// Mapping for an explicit file or a named dataset.
pub fn resolve_mapping(
    ctx: &Ctx,
    file: Option<&Path>,
    dataset: Option<&str>,
    spaces: &SpaceArgs,
) -> Result<LoadedMapping> {
    match (file, dataset) {
        (Some(f), d) => {
            let name = d.map(str::to_string).unwrap_or_else(|| dataset_for(ctx, f));
            load_mapping(f, &name, spaces)
        }
        (None, Some(d)) => load_mapping(&ctx.mapping_path(d)?, d, spaces),
        (None, None) => Err(Error::Argument("pass --mapping or --dataset".into())),
    }
}

pub fn remap(ctx: &Ctx, args: RemapArgs) -> Result<usize> {
    let loaded = resolve_mapping(ctx, args.mapping.as_deref(), args.dataset.as_deref(), &args.spaces)?;
    let mut forward = loaded.forward;
    if let Some(o) = &args.overlay {
        let rows = parse_mapping_rows(&o.display().to_string(), &fsutil::read_to_string(o)?)?;
        forward = forward.with_overlay(&rows)?;
    }
    let table = match args.direction {
        Direction::ToUnified => forward,
        Direction::ToDataset => forward.invert(policy(ctx, args.policy.as_deref())?)?,
    };
    let lut = table.build_lut();
    let output = ctx.output_dir(args.output, "remap")?;
    if same_dir(&args.input, &output) {
        return Err(Error::Argument("remap output directory must differ from its input".into()));
    }
    let files = png_files(&args.input)?;
    let source = table.source().name().to_string();
    ctx.exec.try_map(&files, |rel| {
        let mask = MaskImage::read_png(&args.input.join(rel), source.as_str())?;
        let out = lut.project(&mask).map_err(|e| match e {
            Error::InvalidPixel { x, y, value, .. } => Error::InvalidPixel {
                context: args.input.join(rel).display().to_string(),
                x,
                y,
                value,
            },
            other => other,
        })?;
        out.write_png(&output.join(rel))
    })?;
    println!("{} files", files.len());
    Ok(0)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

/// Relative paths of `.png` files under `dir`, sorted.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let p = e.path().unwrap_or(dir).to_path_buf();
            Error::Io {
                path: p,
                source: e.into(),
            }
        })?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p.strip_prefix(dir).expect("under root").to_path_buf());
        }
    }
    Ok(out)
}
