//! Training-time augmentation on (image, mask) pairs.
//!
//! Stage order: random resize, random crop, random horizontal flip, then
//! photometric distortion on the image only. Every random draw is recorded in
//! [`AugDraws`] so a run can be replayed bit-exactly from its log.
//!
//! Geometry:
//! * Resize draws `r ~ U[ratio_lo, ratio_hi)` and fits the source, keeping
//!   aspect, into `(floor(base_w * r), floor(base_h * r))` treated as
//!   (long edge, short edge) limits: `s = min(L / max(w, h), S / min(w, h))`,
//!   output `(floor(w*s + 0.5), floor(h*s + 0.5))`.
//! * Images resample bilinearly with half-pixel centres
//!   (`src = (dst + 0.5) * in / out - 0.5`, clamped to the edge), rounding to
//!   the nearest integer; masks use nearest neighbour
//!   `src = floor((dst + 0.5) * in / out)`.
//! * Inputs smaller than the crop are padded on the bottom/right (image 0,
//!   mask `mask_pad`); the crop origin is then uniform over valid positions.
//!
//! Photometric distortion, each step applied with probability `apply_prob`:
//! brightness `v + d`, `d ~ U[-32, 32)`; a coin decides whether contrast
//! `v * a`, `a ~ U[0.5, 1.5)`, runs before or after the colour steps;
//! saturation `S * f`, `f ~ U[0.5, 1.5)`; hue `(H + k) mod 180`,
//! `k` uniform integer in `[-18, 18)`. Each step clamps to `[0, 255]` and
//! truncates to an integer.
//!
//! Colour steps act on an 8-bit HSV image: `V = max`, `S = round(255 * (max -
//! min) / max)` (0 when `max = 0`), `H = round(h / 2) mod 180` with `h` the
//! usual hexcone hue in degrees. Back-conversion uses `h = 2H`, `s = S / 255`,
//! `c = V s` and rounds each channel to nearest. When both colour steps fire
//! they share one HSV round trip. All arithmetic is IEEE `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskImage;
use crate::rng::{RngStream, StreamId};

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::Argument(format!(
                "image data has {} bytes, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    /// Width and height from the file header only.
    pub fn dimensions(path: &Path) -> Result<(u32, u32)> {
        image::image_dimensions(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .expect("in-memory PNG");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricParams {
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub hue_delta: i64,
    pub apply_prob: f64,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self {
            brightness_delta: 32.0,
            contrast_range: (0.5, 1.5),
            saturation_range: (0.5, 1.5),
            hue_delta: 18,
            apply_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    pub base_scale: (u32, u32),
    pub ratio_range: (f64, f64),
    pub crop: (u32, u32),
    pub flip_prob: f64,
    pub photometric: PhotometricParams,
    /// Mask value written into padding; the unified void class is 0.
    pub mask_pad: u8,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            base_scale: (2048, 1024),
            ratio_range: (0.5, 2.0),
            crop: (1024, 1024),
            flip_prob: 0.5,
            photometric: PhotometricParams::default(),
            mask_pad: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ratio_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Argument(format!("bad ratio range ({lo}, {hi})")));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Argument("crop dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Argument("flip probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Keep-aspect fit of `(w, h)` into the scale `base * ratio`.
pub fn fitted_dims(w: u32, h: u32, base: (u32, u32), ratio: f64) -> (u32, u32) {
    let sw = (base.0 as f64 * ratio).floor();
    let sh = (base.1 as f64 * ratio).floor();
    let (long, short) = (sw.max(sh), sw.min(sh));
    let s = (long / w.max(h) as f64).min(short / w.min(h) as f64);
    let nw = ((w as f64 * s + 0.5).floor() as u32).max(1);
    let nh = ((h as f64 * s + 0.5).floor() as u32).max(1);
    (nw, nh)
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear
/// resample: `(i0, i1, w1)` with value `(1 - w1) * a[i0] + w1 * a[i1]`.
pub(crate) fn bilinear_taps(out_len: u32, in_len: u32) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len as usize - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub(crate) fn nearest_index(o: u32, out_len: u32, in_len: u32) -> usize {
    let i = ((2 * o as u64 + 1) * in_len as u64) / (2 * out_len as u64);
    (i as usize).min(in_len as usize - 1)
}

/// Output window `[x0, x0 + w) x [y0, y0 + h)` in resized coordinates.
#[derive(Debug, Clone, Copy)]
struct Window {
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
}

/// Sample a window of the `rw x rh` resize of `img`; pixels outside the
/// resized extent are 0. Rows are blended vertically first, then each
/// output pixel interpolates horizontally along the blended row.
fn resize_image_window(img: &ImageBuffer, rw: u32, rh: u32, win: Window) -> ImageBuffer {
    let xt = bilinear_taps(rw, img.width);
    let yt = bilinear_taps(rh, img.height);
    let stride = img.width as usize * 3;
    let out_stride = win.w as usize * 3;
    let mut out = vec![0u8; out_stride * win.h as usize];
    // Horizontal taps restricted to the window, as channel offsets.
    let x_end = (win.x0 + win.w).min(rw);
    let taps: Vec<(usize, usize, f32)> = (win.x0..x_end)
        .map(|x| {
            let (x0, x1, wx) = xt[x as usize];
            (x0 * 3, x1 * 3, wx)
        })
        .collect();
    let mut blended = vec![0f32; stride];
    for oy in 0..win.h {
        let y = win.y0 + oy;
        if y >= rh {
            break;
        }
        let (y0, y1, wy) = yt[y as usize];
        let r0 = &img.data[y0 * stride..(y0 + 1) * stride];
        let r1 = &img.data[y1 * stride..(y1 + 1) * stride];
        for ((b, &a), &p) in blended.iter_mut().zip(r0).zip(r1) {
            let (a, p) = (a as f32, p as f32);
            *b = a + (p - a) * wy;
        }
        let row = &mut out[oy as usize * out_stride..][..taps.len() * 3];
        for (px, &(i0, i1, wx)) in row.chunks_exact_mut(3).zip(&taps) {
            let (l, r) = (&blended[i0..i0 + 3], &blended[i1..i1 + 3]);
            for c in 0..3 {
                px[c] = round_u8(l[c] + (r[c] - l[c]) * wx);
            }
        }
    }
    ImageBuffer {
        width: win.w,
        height: win.h,
        data: out,
    }
}

fn resize_mask_window(mask: &MaskImage, rw: u32, rh: u32, win: Window, pad: u8) -> MaskImage {
    let xs: Vec<usize> = (0..rw).map(|x| nearest_index(x, rw, mask.width())).collect();
    let mut out = vec![pad; win.w as usize * win.h as usize];
    let src = mask.data();
    let sw = mask.width() as usize;
    for oy in 0..win.h {
        let y = win.y0 + oy;
        if y >= rh {
            break;
        }
        let sy = nearest_index(y, rh, mask.height());
        let srow = &src[sy * sw..(sy + 1) * sw];
        let row = &mut out[oy as usize * win.w as usize..(oy as usize + 1) * win.w as usize];
        for ox in 0..win.w {
            let x = win.x0 + ox;
            if x >= rw {
                break;
            }
            row[ox as usize] = srow[xs[x as usize]];
        }
    }
    MaskImage::new(win.w, win.h, out, mask.space()).expect("window size")
}

fn full(w: u32, h: u32) -> Window {
    Window { x0: 0, y0: 0, w, h }
}

pub fn resize_image(img: &ImageBuffer, w: u32, h: u32) -> ImageBuffer {
    resize_image_window(img, w, h, full(w, h))
}

pub fn resize_mask(mask: &MaskImage, w: u32, h: u32) -> MaskImage {
    resize_mask_window(mask, w, h, full(w, h), 0)
}

fn check_pair(img: &ImageBuffer, mask: &MaskImage) -> Result<()> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Argument("zero-sized image".into()));
    }
    if (img.width, img.height) != (mask.width(), mask.height()) {
        return Err(Error::Argument(format!(
            "image is {}x{} but mask is {}x{}",
            img.width,
            img.height,
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Resize both buffers by a random ratio; returns the drawn ratio.
pub fn random_resize(
    img: &ImageBuffer,
    mask: &MaskImage,
    cfg: &AugConfig,
    rng: &mut RngStream,
) -> Result<(ImageBuffer, MaskImage, f64)> {
    check_pair(img, mask)?;
    let r = rng.uniform_range(cfg.ratio_range.0, cfg.ratio_range.1);
    let (w, h) = fitted_dims(img.width, img.height, cfg.base_scale, r);
    Ok((resize_image(img, w, h), resize_mask(mask, w, h), r))
}

/// Crop `crop` out of the pair at `origin`, padding where the source ends.
pub fn crop_pair(
    img: &ImageBuffer,
    mask: &MaskImage,
    origin: (u32, u32),
    crop: (u32, u32),
    mask_pad: u8,
) -> (ImageBuffer, MaskImage) {
    let win = Window {
        x0: origin.0,
        y0: origin.1,
        w: crop.0,
        h: crop.1,
    };
    // An identity "resize" reads pixels straight through.
    (
        resize_image_window(img, img.width, img.height, win),
        resize_mask_window(mask, mask.width(), mask.height(), win, mask_pad),
    )
}

fn draw_origin(w: u32, h: u32, crop: (u32, u32), rng: &mut RngStream) -> (u32, u32) {
    let pw = w.max(crop.0);
    let ph = h.max(crop.1);
    let x = rng.below((pw - crop.0) as u64 + 1) as u32;
    let y = rng.below((ph - crop.1) as u64 + 1) as u32;
    (x, y)
}

/// Pad to at least `crop`, then cut a uniformly placed `crop` window.
pub fn random_crop(
    img: &ImageBuffer,
    mask: &MaskImage,
    crop: (u32, u32),
    mask_pad: u8,
    rng: &mut RngStream,
) -> Result<(ImageBuffer, MaskImage, (u32, u32))> {
    check_pair(img, mask)?;
    let origin = draw_origin(img.width, img.height, crop, rng);
    let (i, m) = crop_pair(img, mask, origin, crop, mask_pad);
    Ok((i, m, origin))
}

pub fn hflip_image(img: &ImageBuffer) -> ImageBuffer {
    let w = img.width as usize;
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks(w * 3) {
        for px in row.chunks(3).rev() {
            data.extend_from_slice(px);
        }
    }
    ImageBuffer { data, ..*img }
}

pub fn hflip_mask(mask: &MaskImage) -> MaskImage {
    let w = mask.width() as usize;
    let mut data = Vec::with_capacity(mask.data().len());
    for row in mask.data().chunks(w.max(1)) {
        data.extend(row.iter().rev());
    }
    MaskImage::new(mask.width(), mask.height(), data, mask.space()).expect("same size")
}

pub fn random_flip(
    img: &ImageBuffer,
    mask: &MaskImage,
    p: f64,
    rng: &mut RngStream,
) -> (ImageBuffer, MaskImage, bool) {
    if rng.coin(p) {
        (hflip_image(img), hflip_mask(mask), true)
    } else {
        (img.clone(), mask.clone(), false)
    }
}

/// Outcome of the photometric coin flips; `None` means the step was skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhotometricDraws {
    pub brightness: Option<f64>,
    pub contrast_first: bool,
    pub contrast: Option<f64>,
    pub saturation: Option<f64>,
    pub hue: Option<i64>,
}

pub fn draw_photometric(p: &PhotometricParams, rng: &mut RngStream) -> PhotometricDraws {
    let mut d = PhotometricDraws::default();
    if rng.coin(p.apply_prob) {
        d.brightness = Some(rng.uniform_range(-p.brightness_delta, p.brightness_delta));
    }
    d.contrast_first = rng.coin(0.5);
    let contrast = |rng: &mut RngStream| {
        rng.coin(p.apply_prob)
            .then(|| rng.uniform_range(p.contrast_range.0, p.contrast_range.1))
    };
    if d.contrast_first {
        d.contrast = contrast(rng);
    }
    if rng.coin(p.apply_prob) {
        d.saturation = Some(rng.uniform_range(p.saturation_range.0, p.saturation_range.1));
    }
    if rng.coin(p.apply_prob) {
        d.hue = Some(rng.int_range(-p.hue_delta, p.hue_delta.max(-p.hue_delta + 1)));
    }
    if !d.contrast_first {
        d.contrast = contrast(rng);
    }
    d
}

/// Round half up for non-negative values, saturating at 255. Same result as
/// `v.round()` there, without the libm call.
#[inline]
fn round_u8(v: f32) -> u8 {
    (v + 0.5) as u8
}

#[inline]
fn clamp_trunc(v: f32) -> u8 {
    v.clamp(0.0, 255.0) as u8
}

fn value_lut(f: impl Fn(f32) -> f32) -> [u8; 256] {
    let mut lut = [0u8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        *slot = clamp_trunc(f(i as f32));
    }
    lut
}

fn apply_lut(data: &mut [u8], lut: &[u8; 256]) {
    for v in data {
        *v = lut[*v as usize];
    }
}

pub fn adjust_brightness(img: &mut ImageBuffer, delta: f64) {
    let d = delta as f32;
    apply_lut(&mut img.data, &value_lut(|v| v + d));
}

pub fn adjust_contrast(img: &mut ImageBuffer, alpha: f64) {
    let a = alpha as f32;
    apply_lut(&mut img.data, &value_lut(|v| v * a));
}

/// Hue branch (which channel is the maximum) and the channel difference
/// the hexcone formula divides by `delta`.
#[inline]
fn hue_key(r: u8, g: u8, b: u8, max: u8) -> (usize, i32) {
    let (r, g, b) = (r as i32, g as i32, b as i32);
    if max as i32 == r {
        (0, g - b)
    } else if max as i32 == g {
        (1, b - r)
    } else {
        (2, r - g)
    }
}

fn hue8(branch: usize, num: f32, delta: f32) -> u8 {
    let h = match branch {
        0 => 60.0 * num / delta,
        1 => 120.0 + 60.0 * num / delta,
        _ => 240.0 + 60.0 * num / delta,
    };
    let h = if h < 0.0 { h + 360.0 } else { h };
    ((h / 2.0 + 0.5) as u32 % 180) as u8
}

fn sat8(max: f32, delta: f32) -> u8 {
    if max == 0.0 {
        0
    } else {
        round_u8(255.0 * delta / max)
    }
}

#[inline]
fn chroma(v: u8, s: u8) -> f32 {
    v as f32 * (s as f32 / 255.0)
}

/// Hexcone sector of an 8-bit hue and the weight of the secondary channel.
#[inline]
fn hue_weight(h8: u8) -> (u32, f32) {
    let hp = h8 as f32 * 2.0 / 60.0;
    let sector = hp as u32;
    // Exact `hp % 2.0`.
    (sector, 1.0 - ((hp - (sector & !1) as f32) - 1.0).abs())
}

#[inline]
fn compose_rgb(sector: u32, c: f32, w: f32, v: u8) -> [u8; 3] {
    // Which of (c, x, 0) lands in r, g and b, per sector.
    const ORDER: [[usize; 3]; 6] = [[0, 1, 2], [1, 0, 2], [2, 0, 1], [2, 1, 0], [1, 2, 0], [0, 2, 1]];
    let vals = [c, c * w, 0.0];
    let m = v as f32 - c;
    ORDER[sector.min(5) as usize].map(|i| round_u8(vals[i] + m))
}

/// RGB to 8-bit HSV (`H` in `0..180`).
pub fn rgb_to_hsv8(rgb: [u8; 3]) -> [u8; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let delta = max - r.min(g).min(b);
    let h = if delta == 0 {
        0
    } else {
        let (branch, num) = hue_key(r, g, b, max);
        hue8(branch, num as f32, delta as f32)
    };
    [h, sat8(max as f32, delta as f32), max]
}

pub fn hsv8_to_rgb(hsv: [u8; 3]) -> [u8; 3] {
    let (sector, w) = hue_weight(hsv[0]);
    compose_rgb(sector, chroma(hsv[2], hsv[1]), w, hsv[2])
}

/// The scalar conversions above, tabulated over their integer arguments.
struct HsvTables {
    /// `[max][delta]`
    sat: Vec<u8>,
    /// `[branch][delta][num + 255]`
    hue: Vec<u8>,
    /// `[s][v]`
    chroma: Vec<f32>,
    sector: [u32; 180],
    weight: [f32; 180],
}

fn hsv_tables() -> &'static HsvTables {
    static TABLES: std::sync::OnceLock<HsvTables> = std::sync::OnceLock::new();
    TABLES.get_or_init(|| {
        let mut sat = vec![0u8; 256 * 256];
        let mut chroma_t = vec![0f32; 256 * 256];
        for a in 0..256usize {
            for b in 0..256usize {
                sat[a * 256 + b] = sat8(a as f32, b as f32);
                chroma_t[a * 256 + b] = chroma(b as u8, a as u8);
            }
        }
        let mut hue = vec![0u8; 3 * 256 * 511];
        for branch in 0..3 {
            for delta in 1..256i32 {
                for num in -delta..=delta {
                    hue[(branch * 256 + delta as usize) * 511 + (num + 255) as usize] =
                        hue8(branch, num as f32, delta as f32);
                }
            }
        }
        let mut sector = [0u32; 180];
        let mut weight = [0f32; 180];
        for h in 0..180 {
            (sector[h], weight[h]) = hue_weight(h as u8);
        }
        HsvTables {
            sat,
            hue,
            chroma: chroma_t,
            sector,
            weight,
        }
    })
}

/// One pixel of the colour steps: `hsv8_to_rgb` of the adjusted
/// `rgb_to_hsv8`, through the tables.
#[inline]
fn colour_px(t: &HsvTables, rgb: [u8; 3], sat: &[u8; 256], shift: &[u8; 180]) -> [u8; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let delta = max - r.min(g).min(b);
    let h = if delta == 0 {
        0
    } else {
        let (branch, num) = hue_key(r, g, b, max);
        t.hue[(branch * 256 + delta as usize) * 511 + (num + 255) as usize]
    };
    let s = sat[t.sat[max as usize * 256 + delta as usize] as usize];
    let h = shift[h as usize] as usize;
    compose_rgb(t.sector[h], t.chroma[s as usize * 256 + max as usize], t.weight[h], max)
}

fn colour_luts(saturation: Option<f64>, hue: Option<i64>) -> ([u8; 256], [u8; 180]) {
    let sat = match saturation {
        Some(f) => {
            let f = f as f32;
            value_lut(|v| v * f)
        }
        None => std::array::from_fn(|i| i as u8),
    };
    let k = hue.unwrap_or(0);
    let shift = std::array::from_fn(|h| (h as i64 + k).rem_euclid(180) as u8);
    (sat, shift)
}

fn adjust_colour(img: &mut ImageBuffer, saturation: Option<f64>, hue: Option<i64>) {
    if saturation.is_none() && hue.is_none() {
        return;
    }
    let t = hsv_tables();
    let (sat, shift) = colour_luts(saturation, hue);
    for px in img.data.chunks_exact_mut(3) {
        px.copy_from_slice(&colour_px(t, [px[0], px[1], px[2]], &sat, &shift));
    }
}

pub fn apply_photometric(img: &ImageBuffer, d: &PhotometricDraws) -> ImageBuffer {
    let mut out = img.clone();
    if let Some(delta) = d.brightness {
        adjust_brightness(&mut out, delta);
    }
    if d.contrast_first {
        if let Some(a) = d.contrast {
            adjust_contrast(&mut out, a);
        }
    }
    adjust_colour(&mut out, d.saturation, d.hue);
    if !d.contrast_first {
        if let Some(a) = d.contrast {
            adjust_contrast(&mut out, a);
        }
    }
    out
}

pub fn photometric_distortion(
    img: &ImageBuffer,
    params: &PhotometricParams,
    rng: &mut RngStream,
) -> (ImageBuffer, PhotometricDraws) {
    let d = draw_photometric(params, rng);
    (apply_photometric(img, &d), d)
}

/// Every random outcome of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugDraws {
    pub stream: StreamId,
    pub ratio: f64,
    pub resized: (u32, u32),
    pub crop_origin: (u32, u32),
    pub flipped: bool,
    pub photometric: PhotometricDraws,
}

/// Draw all random outcomes for an input of `w x h`, in stage order.
pub fn draw_pipeline(w: u32, h: u32, cfg: &AugConfig, rng: &mut RngStream) -> AugDraws {
    let stream = rng.id();
    let ratio = rng.uniform_range(cfg.ratio_range.0, cfg.ratio_range.1);
    let resized = fitted_dims(w, h, cfg.base_scale, ratio);
    let crop_origin = draw_origin(resized.0, resized.1, cfg.crop, rng);
    let flipped = rng.coin(cfg.flip_prob);
    let photometric = draw_photometric(&cfg.photometric, rng);
    AugDraws {
        stream,
        ratio,
        resized,
        crop_origin,
        flipped,
        photometric,
    }
}

/// Apply logged draws. Resize and crop are fused: only the crop window of
/// the resized pair is ever sampled.
pub fn apply_pipeline(
    img: &ImageBuffer,
    mask: &MaskImage,
    cfg: &AugConfig,
    d: &AugDraws,
) -> Result<(ImageBuffer, MaskImage)> {
    check_pair(img, mask)?;
    let win = Window {
        x0: d.crop_origin.0,
        y0: d.crop_origin.1,
        w: cfg.crop.0,
        h: cfg.crop.1,
    };
    let (rw, rh) = d.resized;
    let mut i = resize_image_window(img, rw, rh, win);
    let mut m = resize_mask_window(mask, rw, rh, win, cfg.mask_pad);
    if d.flipped {
        i = hflip_image(&i);
        m = hflip_mask(&m);
    }
    Ok((apply_photometric(&i, &d.photometric), m))
}

pub fn train_pipeline(
    img: &ImageBuffer,
    mask: &MaskImage,
    cfg: &AugConfig,
    rng: &mut RngStream,
) -> Result<(ImageBuffer, MaskImage, AugDraws)> {
    cfg.validate()?;
    check_pair(img, mask)?;
    let d = draw_pipeline(img.width, img.height, cfg, rng);
    let (i, m) = apply_pipeline(img, mask, cfg, &d)?;
    Ok((i, m, d))
}
