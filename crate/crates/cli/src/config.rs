use std::path::{Path, PathBuf};

use serde::Deserialize;

use segunify::augment::AugConfig;
use segunify::catalog::{builtin_catalog, Catalog, DatasetDescriptor};
use segunify::tta::TtaConfig;
use segunify::{fsutil, Error, Execution, Result};

/// Settings accepted in the `--config` file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub strict: Option<bool>,
    pub threads: Option<usize>,
    pub catalog: Option<PathBuf>,
    pub mapping_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub policy: Option<String>,
    pub target_size: Option<u64>,
    pub total_iters: Option<u64>,
    pub batch_size: Option<usize>,
    pub augment: Option<AugConfig>,
    pub tta: Option<TtaConfig>,
}

#[derive(Debug, Default)]
pub struct GlobalFlags {
    pub seed: Option<u64>,
    pub strict: bool,
    pub threads: Option<usize>,
    pub catalog: Option<PathBuf>,
    pub mapping_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub struct Ctx {
    pub seed: u64,
    pub strict: bool,
    pub exec: Execution,
    pub catalog: Catalog,
    pub mapping_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub file: FileConfig,
}

impl Ctx {
    pub fn resolve(config: Option<&Path>, flags: GlobalFlags) -> Result<Self> {
        let file: FileConfig = match config {
            Some(p) => serde_json::from_str(&fsutil::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => FileConfig::default(),
        };
        let threads = flags.threads.or(file.threads);
        let exec = configure_threads(threads)?;
        let catalog = match flags.catalog.as_ref().or(file.catalog.as_ref()) {
            Some(p) => Catalog::from_json(&fsutil::read_to_string(p)?)?,
            None => builtin_catalog(),
        };
        Ok(Self {
            seed: flags.seed.or(file.seed).unwrap_or(0),
            strict: flags.strict || file.strict.unwrap_or(false),
            exec,
            catalog,
            mapping_dir: flags.mapping_dir.or_else(|| file.mapping_dir.clone()),
            out_dir: flags.out_dir.or_else(|| file.out_dir.clone()),
            file,
        })
    }

    /// `explicit`, else the global output directory.
    pub fn output_dir(&self, explicit: Option<PathBuf>, what: &str) -> Result<PathBuf> {
        explicit
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| Error::Argument(format!("{what} needs an output directory (--out or --out-dir)")))
    }

    /// Mapping file for `dataset` inside the mapping directory.
    pub fn mapping_path(&self, dataset: &str) -> Result<PathBuf> {
        let dir = self.mapping_dir.as_ref().ok_or_else(|| {
            Error::Argument(format!("no mapping given for {dataset}; pass --mapping or --mapping-dir"))
        })?;
        let file = match self.catalog.get(dataset) {
            Some(d) => d.mapping_file.clone(),
            None => PathBuf::from(format!("{}.csv", segunify::catalog::normalize_name(dataset))),
        };
        Ok(dir.join(file))
    }

    pub fn descriptor(&self, dataset: &str) -> Option<&DatasetDescriptor> {
        self.catalog.get(dataset)
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> Result<Execution> {
    match threads {
        Some(0) => Err(Error::Argument("--threads must be at least 1".into())),
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> Result<Execution> {
    if threads == Some(0) {
        return Err(Error::Argument("--threads must be at least 1".into()));
    }
    Ok(Execution::Sequential)
}
