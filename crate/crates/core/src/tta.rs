//! Test-time augmentation over an external predictor.
//!
//! For each ratio `r` the predictor is asked for logits of the image fitted
//! (keep-aspect) into `base_scale * r`, once plain and once mirrored when
//! flipping is enabled. Mirrored logits are mirrored back, every map is
//! rescaled to the original size with half-pixel-centred bilinear
//! interpolation, maps are fused (mean of raw logits by default, or mean of
//! softmax probabilities) and the mask is the per-pixel argmax, ties going to
//! the lowest class index.
//!
//! Predictor wire protocol, one JSON object per line:
//!
//! ```text
//! request  {"id": 3, "image_path": "a.png", "scale": [w, h], "flip": true}
//! reply    {"id": 3, "logit_path": "/tmp/3.sglt"}   or   {"id": 3, "error": "..."}
//! ```

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::augment::{bilinear_taps, fitted_dims, nearest_index};
use crate::error::{Error, Result};
use crate::logits::LogitMap;
use crate::mask::MaskImage;
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    LogitMean,
    ProbMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub base_scale: (u32, u32),
    pub ratios: Vec<f64>,
    pub flip: bool,
    pub fusion: Fusion,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            base_scale: (2048, 1024),
            ratios: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75],
            flip: true,
            fusion: Fusion::LogitMean,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Argument("TTA ratios must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Predictor calls one image costs.
    pub fn calls(&self) -> usize {
        self.ratios.len() * if self.flip { 2 } else { 1 }
    }
}

/// Bilinear resample of each class plane to `w x h`.
pub fn rescale_logits(l: &LogitMap, w: u32, h: u32) -> LogitMap {
    if (w, h) == (l.width(), l.height()) {
        return l.clone();
    }
    let xt = bilinear_taps(w, l.width());
    let yt = bilinear_taps(h, l.height());
    let sw = l.width() as usize;
    let mut out = LogitMap::zeros(w, h, l.classes());
    for c in 0..l.classes() {
        let src = l.plane(c);
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, wy)) in yt.iter().enumerate() {
            let r0 = &src[y0 * sw..(y0 + 1) * sw];
            let r1 = &src[y1 * sw..(y1 + 1) * sw];
            let row = &mut dst[oy * w as usize..(oy + 1) * w as usize];
            for (o, &(x0, x1, wx)) in row.iter_mut().zip(&xt) {
                let top = r0[x0] + (r0[x1] - r0[x0]) * wx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * wx;
                *o = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Mirror every class plane left to right.
pub fn hflip_logits(l: &LogitMap) -> LogitMap {
    let mut out = l.clone();
    let w = l.width() as usize;
    if w == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Running element-wise sum used for fusion.
#[derive(Debug, Clone)]
struct FusionSum {
    shape: (u32, u32, u32),
    sum: Vec<f64>,
    count: usize,
    mismatch: bool,
}

impl FusionSum {
    fn add(mut self, l: &LogitMap, fusion: Fusion) -> Result<Self> {
        if self.count == 0 && self.sum.is_empty() {
            self.shape = l.shape();
            self.sum = vec![0.0; l.data().len()];
        } else if self.shape != l.shape() {
            return Err(Error::Argument(format!(
                "cannot fuse logit maps of shapes {:?} and {:?}",
                self.shape,
                l.shape()
            )));
        }
        match fusion {
            Fusion::LogitMean => {
                for (s, &v) in self.sum.iter_mut().zip(l.data()) {
                    *s += v as f64;
                }
            }
            Fusion::ProbMean => {
                let n = l.plane_len();
                let c = l.classes() as usize;
                let mut probs = vec![0.0f64; c];
                for p in 0..n {
                    let m = (0..c).map(|k| l.data()[k * n + p]).fold(f32::NEG_INFINITY, f32::max) as f64;
                    let mut z = 0.0;
                    for (k, pr) in probs.iter_mut().enumerate() {
                        *pr = (l.data()[k * n + p] as f64 - m).exp();
                        z += *pr;
                    }
                    for (k, pr) in probs.iter().enumerate() {
                        self.sum[k * n + p] += pr / z;
                    }
                }
            }
        }
        self.count += 1;
        Ok(self)
    }

    fn merge(mut self, other: Self) -> Self {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        if self.shape != other.shape {
            self.mismatch = true;
            return self;
        }
        self.mismatch |= other.mismatch;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.count += other.count;
        self
    }

    fn finish(self) -> Result<LogitMap> {
        if self.count == 0 {
            return Err(Error::Argument("nothing to aggregate".into()));
        }
        if self.mismatch {
            return Err(Error::Argument("cannot fuse logit maps of different shapes".into()));
        }
        let n = self.count as f64;
        let (w, h, c) = self.shape;
        LogitMap::new(w, h, c, self.sum.iter().map(|s| (s / n) as f32).collect())
    }

    fn empty() -> Self {
        Self {
            shape: (0, 0, 0),
            sum: Vec::new(),
            count: 0,
            mismatch: false,
        }
    }
}

/// Element-wise arithmetic mean of raw logits.
pub fn aggregate(ls: &[LogitMap]) -> Result<LogitMap> {
    aggregate_with(ls, Fusion::LogitMean)
}

/// Mean of raw logits or of per-pixel softmax probabilities.
pub fn aggregate_with(ls: &[LogitMap], fusion: Fusion) -> Result<LogitMap> {
    let mut acc = FusionSum::empty();
    for l in ls {
        acc = acc.add(l, fusion)?;
    }
    acc.finish()
}

/// Per-pixel index of the largest score; ties go to the lowest class.
pub fn argmax_mask(l: &LogitMap, space: &str) -> Result<MaskImage> {
    if l.classes() > 256 {
        return Err(Error::Argument(format!(
            "{} classes do not fit an 8-bit mask",
            l.classes()
        )));
    }
    l.check_finite()?;
    let n = l.plane_len();
    let mut best = l.plane(0).to_vec();
    let mut idx = vec![0u8; n];
    for c in 1..l.classes() {
        for ((b, i), &v) in best.iter_mut().zip(idx.iter_mut()).zip(l.plane(c)) {
            if v > *b {
                *b = v;
                *i = c as u8;
            }
        }
    }
    MaskImage::new(l.width(), l.height(), idx, space)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub id: u64,
    pub image_path: PathBuf,
    pub scale: (u32, u32),
    pub flip: bool,
}

/// Anything that turns an image request into a logit map.
pub trait Predictor: Sync {
    fn predict(&self, req: &PredictRequest) -> Result<LogitMap>;
}

impl<F> Predictor for F
where
    F: Fn(&PredictRequest) -> Result<LogitMap> + Sync,
{
    fn predict(&self, req: &PredictRequest) -> Result<LogitMap> {
        self(req)
    }
}

/// Requests issued for an image of `w x h`, in ratio order, plain before flipped.
pub fn tta_requests(image_path: &Path, w: u32, h: u32, cfg: &TtaConfig) -> Vec<PredictRequest> {
    let mut out = Vec::with_capacity(cfg.calls());
    for &r in &cfg.ratios {
        let scale = fitted_dims(w, h, cfg.base_scale, r);
        for flip in [false, true] {
            if flip && !cfg.flip {
                continue;
            }
            out.push(PredictRequest {
                id: out.len() as u64,
                image_path: image_path.to_path_buf(),
                scale,
                flip,
            });
        }
    }
    out
}

/// Run every TTA branch for one image and return the fused mask.
pub fn run_tta(
    image_path: &Path,
    size: (u32, u32),
    predictor: &dyn Predictor,
    cfg: &TtaConfig,
    space: &str,
    exec: Execution,
) -> Result<MaskImage> {
    let fused = run_tta_logits(image_path, size, predictor, cfg, exec)?;
    argmax_mask(&fused, space)
}

/// Fused logits (or mean probabilities) at the original image size.
pub fn run_tta_logits(
    image_path: &Path,
    (w, h): (u32, u32),
    predictor: &dyn Predictor,
    cfg: &TtaConfig,
    exec: Execution,
) -> Result<LogitMap> {
    cfg.validate()?;
    if w == 0 || h == 0 {
        return Err(Error::Argument("zero-sized image".into()));
    }
    let reqs = tta_requests(image_path, w, h, cfg);
    let acc = exec.try_fold(
        &reqs,
        FusionSum::empty,
        |acc, req| {
            let l = predict_aligned(predictor, req, w, h)?;
            acc.add(&l, cfg.fusion)
        },
        FusionSum::merge,
    )?;
    acc.finish()
}

/// One branch: predict, undo the mirror, resize back to `w x h`.
fn predict_aligned(predictor: &dyn Predictor, req: &PredictRequest, w: u32, h: u32) -> Result<LogitMap> {
    let context = format!("scale {}x{}, flip {}", req.scale.0, req.scale.1, req.flip);
    let mut l = predictor.predict(req).map_err(|e| match e {
        Error::Predictor { message, .. } => Error::Predictor {
            context: context.clone(),
            message,
        },
        other => Error::Predictor {
            context: context.clone(),
            message: other.to_string(),
        },
    })?;
    if (l.width(), l.height()) != req.scale {
        return Err(Error::Predictor {
            context,
            message: format!(
                "returned {}x{} logits for a {}x{} request",
                l.width(),
                l.height(),
                req.scale.0,
                req.scale.1
            ),
        });
    }
    if req.flip {
        l = hflip_logits(&l);
    }
    Ok(rescale_logits(&l, w, h))
}

#[derive(Debug, Serialize, Deserialize)]
struct Reply {
    id: u64,
    #[serde(default)]
    logit_path: Option<PathBuf>,
    #[serde(default)]
    error: Option<String>,
}

struct Channel {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Predictor running as a child process that speaks the line protocol.
///
/// Requests are serialised over one pipe pair; run several processes for
/// concurrency.
pub struct ProcessPredictor {
    chan: Mutex<Channel>,
    next_id: Mutex<u64>,
}

impl ProcessPredictor {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Predictor {
                context: format!("spawning {program}"),
                message: e.to_string(),
            })?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            chan: Mutex::new(Channel {
                child,
                stdin,
                stdout,
            }),
            next_id: Mutex::new(0),
        })
    }

    fn fail(chan: &mut Channel, message: String) -> Error {
        let status = chan.child.try_wait().ok().flatten();
        let message = match status {
            Some(s) if !s.success() => format!("{message} (predictor exited with {s})"),
            _ => message,
        };
        Error::Predictor {
            context: "protocol".into(),
            message,
        }
    }
}

impl Predictor for ProcessPredictor {
    fn predict(&self, req: &PredictRequest) -> Result<LogitMap> {
        let id = {
            let mut n = self.next_id.lock().expect("id lock");
            *n += 1;
            *n
        };
        let line = serde_json::to_string(&PredictRequest {
            id,
            ..req.clone()
        })?;
        let mut chan = self.chan.lock().expect("channel lock");
        let stdin = chan.stdin.as_mut().expect("stdin open while predictor alive");
        if let Err(e) = writeln!(stdin, "{line}").and_then(|_| stdin.flush()) {
            return Err(Self::fail(&mut chan, format!("write failed: {e}")));
        }
        let mut reply = String::new();
        match chan.stdout.read_line(&mut reply) {
            Ok(0) => return Err(Self::fail(&mut chan, "predictor closed its output".into())),
            Err(e) => return Err(Self::fail(&mut chan, format!("read failed: {e}"))),
            Ok(_) => {}
        }
        drop(chan);
        let reply: Reply = serde_json::from_str(reply.trim()).map_err(|e| Error::Predictor {
            context: "protocol".into(),
            message: format!("malformed reply: {e}"),
        })?;
        if reply.id != id {
            return Err(Error::Predictor {
                context: "protocol".into(),
                message: format!("reply id {} does not match request id {id}", reply.id),
            });
        }
        if let Some(err) = reply.error {
            return Err(Error::Predictor {
                context: "predictor".into(),
                message: err,
            });
        }
        let path = reply.logit_path.ok_or_else(|| Error::Predictor {
            context: "protocol".into(),
            message: "reply has neither logit_path nor error".into(),
        })?;
        LogitMap::read_sglt(&path).map_err(|e| Error::Predictor {
            context: "reading logits".into(),
            message: e.to_string(),
        })
    }
}

impl Drop for ProcessPredictor {
    fn drop(&mut self) {
        if let Ok(chan) = self.chan.get_mut() {
            chan.stdin.take();
            let _ = chan.child.wait();
        }
    }
}

/// File name under which a fixture directory stores a request's logits.
pub fn fixture_name(req: &PredictRequest) -> String {
    let stem = req
        .image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!(
        "{stem}_{}x{}_{}.sglt",
        req.scale.0,
        req.scale.1,
        if req.flip { "flip" } else { "plain" }
    )
}

/// Predictor backed by pre-generated SGLT files named by [`fixture_name`].
pub struct FixturePredictor {
    dir: PathBuf,
}

impl FixturePredictor {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Predictor for FixturePredictor {
    fn predict(&self, req: &PredictRequest) -> Result<LogitMap> {
        LogitMap::read_sglt(&self.dir.join(fixture_name(req)))
    }
}

/// Deterministic fake models for tests and pipeline checks.
#[derive(Debug, Clone)]
pub enum StubMode {
    /// All logits zero.
    Constant,
    /// One-hot logits of the ground truth, resized nearest-neighbour.
    GtLeak(HashMap<PathBuf, MaskImage>),
    /// Class `(x + y) % 2` one-hot, in the coordinates of the (possibly
    /// mirrored) request image.
    Checkerboard,
}

#[derive(Debug, Clone)]
pub struct StubPredictor {
    pub classes: u32,
    pub mode: StubMode,
}

impl StubPredictor {
    pub fn logits(&self, req: &PredictRequest) -> Result<LogitMap> {
        let (w, h) = req.scale;
        let mut l = LogitMap::zeros(w, h, self.classes);
        match &self.mode {
            StubMode::Constant => {}
            StubMode::Checkerboard => {
                for y in 0..h {
                    for x in 0..w {
                        l.set((x + y) % 2 % self.classes, x, y, 1.0);
                    }
                }
            }
            StubMode::GtLeak(masks) => {
                let gt = masks.get(&req.image_path).ok_or_else(|| {
                    Error::Data(format!("no ground truth for {}", req.image_path.display()))
                })?;
                for y in 0..h {
                    let sy = nearest_index(y, h, gt.height()) as u32;
                    for x in 0..w {
                        let sx = nearest_index(x, w, gt.width()) as u32;
                        let sx = if req.flip { gt.width() - 1 - sx } else { sx };
                        let c = gt.get(sx, sy) as u32;
                        if c >= self.classes {
                            return Err(Error::Data(format!(
                                "ground-truth class {c} outside {} stub classes",
                                self.classes
                            )));
                        }
                        l.set(c, x, y, 1.0);
                    }
                }
            }
        }
        Ok(l)
    }
}

impl Predictor for StubPredictor {
    fn predict(&self, req: &PredictRequest) -> Result<LogitMap> {
        self.logits(req)
    }
}
