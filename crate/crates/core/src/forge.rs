//! Seeded synthetic plate images: white glyphs on black, then rotation,
//! box blur, additive Gaussian noise and salt-and-pepper noise, in that order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::font::{self, GLYPH_COLS, GLYPH_ROWS};
use crate::label::{LineLayout, PlateChar, PlateFormat, PlateLabel};
use crate::Error;

pub const BACKGROUND: u8 = 0;
pub const FOREGROUND: u8 = 255;
pub const MAX_ROTATION_DEG: f64 = 5.0;
pub const MAX_SALT_PEPPER: f64 = 0.5;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Option<Self> {
        (width >= 1 && height >= 1 && pixels.len() == width * height).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    /// Mean absolute per-pixel difference; `None` if the sizes differ.
    pub fn mean_abs_diff(&self, other: &GrayImage) -> Option<f64> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        let sum: u64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| u64::from(a.abs_diff(b)))
            .sum();
        Some(sum as f64 / self.pixels.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub rotation_deg: f64,
    pub blur_radius_px: f64,
    pub gaussian_sigma: f64,
    pub salt_pepper_density: f64,
}

impl DegradeParams {
    pub const NONE: DegradeParams = DegradeParams {
        rotation_deg: 0.0,
        blur_radius_px: 0.0,
        gaussian_sigma: 0.0,
        salt_pepper_density: 0.0,
    };

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |what: &str| Err(Error::InvalidDegrade(String::from(what)));
        if !self.rotation_deg.is_finite() || self.rotation_deg.abs() > MAX_ROTATION_DEG {
            return bad("rotation_deg must be within [-5, 5]");
        }
        if !self.blur_radius_px.is_finite() || self.blur_radius_px < 0.0 {
            return bad("blur_radius_px must be >= 0");
        }
        if !self.gaussian_sigma.is_finite() || self.gaussian_sigma < 0.0 {
            return bad("gaussian_sigma must be >= 0");
        }
        if !(0.0..=MAX_SALT_PEPPER).contains(&self.salt_pepper_density) {
            return bad("salt_pepper_density must be within [0, 0.5]");
        }
        Ok(())
    }
}

/// Noise settings applied to every generated image; rotation is drawn
/// uniformly from `[-max_rotation_deg, max_rotation_deg]` per image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeDefaults {
    pub max_rotation_deg: f64,
    pub blur_radius_px: f64,
    pub gaussian_sigma: f64,
    pub salt_pepper_density: f64,
}

impl Default for DegradeDefaults {
    fn default() -> Self {
        Self {
            max_rotation_deg: MAX_ROTATION_DEG,
            blur_radius_px: 1.0,
            gaussian_sigma: 12.0,
            salt_pepper_density: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgeSpec {
    pub letters: usize,
    pub digits: usize,
    pub width_px: usize,
    pub height_px: usize,
    pub seed: u64,
    pub count: usize,
    pub two_line_prob: f64,
    pub degrade: DegradeDefaults,
}

impl Default for ForgeSpec {
    fn default() -> Self {
        Self {
            letters: 3,
            digits: 4,
            width_px: 120,
            height_px: 50,
            seed: 0,
            count: 600,
            two_line_prob: 0.5,
            degrade: DegradeDefaults::default(),
        }
    }
}

impl ForgeSpec {
    pub fn validate(&self) -> Result<(), Error> {
        PlateFormat::new(LineLayout::SingleLine, self.letters, self.digits)?;
        if self.count == 0 {
            return Err(Error::InvalidSpec("count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.two_line_prob) {
            return Err(Error::InvalidSpec("two_line_prob must be within [0, 1]".into()));
        }
        for kind in [LineLayout::SingleLine, LineLayout::TwoLine] {
            let format = PlateFormat::malaysian(kind);
            let format = PlateFormat {
                letters: self.letters,
                digits: self.digits,
                ..format
            };
            layout(&format, self.width_px, self.height_px)?;
        }
        DegradeParams {
            rotation_deg: self.degrade.max_rotation_deg,
            blur_radius_px: self.degrade.blur_radius_px,
            gaussian_sigma: self.degrade.gaussian_sigma,
            salt_pepper_density: self.degrade.salt_pepper_density,
        }
        .validate()
    }
}

/// Seed for the `index`-th image of a dataset; a pure function of both inputs.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5EED)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn random_plate_text<R: Rng + ?Sized>(format: &PlateFormat, rng: &mut R) -> PlateLabel {
    let mut chars = Vec::with_capacity(format.len());
    for i in 0..format.len() {
        let index = if i < format.letters {
            rng.random_range(0..26usize)
        } else {
            26 + rng.random_range(0..10usize)
        };
        chars.extend(PlateChar::from_index(index));
    }
    PlateLabel::from_chars(chars)
}

/// Pixel rectangle occupied by one glyph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Glyph rectangles for `format` on a `width` x `height` canvas, in label order.
pub fn layout(format: &PlateFormat, width: usize, height: usize) -> Result<Vec<GlyphBox>, Error> {
    let margin = (width / 20).max(1);
    let gap = (width / 40).max(1);
    let fit = |k: usize| {
        width
            .saturating_sub(2 * margin + (k.saturating_sub(1)) * gap)
            .checked_div(k)
            .unwrap_or(0)
    };
    let line = |k: usize, y: usize, w: usize, h: usize, out: &mut Vec<GlyphBox>| {
        let total = k * w + (k - 1) * gap;
        let x0 = (width - total) / 2;
        out.extend((0..k).map(|i| GlyphBox {
            x: x0 + i * (w + gap),
            y,
            w,
            h,
        }));
    };

    let mut boxes = Vec::with_capacity(format.len());
    let (band_h, max_w) = match format.kind {
        LineLayout::SingleLine => (height * 3 / 5, fit(format.len())),
        LineLayout::TwoLine => ((height / 2) * 7 / 10, fit(format.letters.max(format.digits))),
    };
    // never wider than the font's 5:7 cell, condensed up to 1:2
    let w = max_w.min(band_h * GLYPH_COLS / GLYPH_ROWS);
    let h = band_h.min(2 * w);
    if w < GLYPH_COLS || h < GLYPH_ROWS {
        return Err(Error::InvalidSpec(format!(
            "{width}x{height} canvas too small for {} glyphs ({w}x{h} px cells, need >= {GLYPH_COLS}x{GLYPH_ROWS})",
            format.len()
        )));
    }
    match format.kind {
        LineLayout::SingleLine => line(format.len(), (height - h) / 2, w, h, &mut boxes),
        LineLayout::TwoLine => {
            let band = height / 2;
            let pad = (band - h) / 2;
            line(format.letters, pad, w, h, &mut boxes);
            line(format.digits, band + pad, w, h, &mut boxes);
        }
    }
    Ok(boxes)
}

/// Draws `label` on a black canvas; glyph pixels are 255, everything else 0.
pub fn render_plate(
    label: &PlateLabel,
    format: &PlateFormat,
    width: usize,
    height: usize,
) -> Result<GrayImage, Error> {
    if !label.matches_format(format) {
        return Err(Error::FormatMismatch {
            label: label.text(),
            letters: format.letters,
            digits: format.digits,
        });
    }
    let boxes = layout(format, width, height)?;
    let mut img = GrayImage::filled(width, height, BACKGROUND);
    for (&c, b) in label.chars().iter().zip(&boxes) {
        for dy in 0..b.h {
            let row = dy * GLYPH_ROWS / b.h;
            for dx in 0..b.w {
                if font::ink(c, dx * GLYPH_COLS / b.w, row) {
                    img.set(b.x + dx, b.y + dy, FOREGROUND);
                }
            }
        }
    }
    Ok(img)
}

/// Applies rotation, blur, Gaussian noise and salt-and-pepper noise in order.
/// A stage whose parameter is zero is skipped and draws nothing from `rng`.
pub fn degrade<R: Rng + ?Sized>(
    img: &GrayImage,
    params: &DegradeParams,
    rng: &mut R,
) -> Result<GrayImage, Error> {
    params.validate()?;
    let mut out = img.clone();
    if params.rotation_deg != 0.0 {
        out = rotate(&out, params.rotation_deg);
    }
    if params.blur_radius_px > 0.0 {
        out = box_blur(&out, params.blur_radius_px);
    }
    if params.gaussian_sigma > 0.0 {
        let normal = Normal::new(0.0, params.gaussian_sigma)
            .map_err(|e| Error::InvalidDegrade(format!("{e}")))?;
        for p in out.pixels.iter_mut() {
            *p = clamp_round(f64::from(*p) + normal.sample(rng));
        }
    }
    if params.salt_pepper_density > 0.0 {
        let half = params.salt_pepper_density / 2.0;
        for p in out.pixels.iter_mut() {
            let u: f64 = rng.random();
            if u < half {
                *p = 0;
            } else if u < params.salt_pepper_density {
                *p = 255;
            }
        }
    }
    Ok(out)
}

fn clamp_round(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 255.0)) as u8
}

/// Rotates counter-clockwise by `degrees` about the image center with
/// bilinear sampling; samples falling outside the frame read as background.
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    let theta = degrees.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= img.width as isize || y >= img.height as isize {
            f64::from(BACKGROUND)
        } else {
            f64::from(img.get(x as usize, y as usize))
        }
    };
    let mut out = GrayImage::filled(img.width, img.height, BACKGROUND);
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse mapping; image y axis points down
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (x0, y0) = (libm::floor(sx), libm::floor(sy));
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out.set(x, y, clamp_round(top * (1.0 - fy) + bottom * fy));
        }
    }
    out
}

/// Separable box blur. A fractional radius gives the outermost taps a
/// partial weight; edges are clamped.
pub fn box_blur(img: &GrayImage, radius: f64) -> GrayImage {
    let full = libm::floor(radius) as usize;
    let frac = radius - full as f64;
    let mut kernel: Vec<(isize, f64)> = (-(full as isize)..=full as isize).map(|k| (k, 1.0)).collect();
    if frac > 0.0 {
        kernel.push((-(full as isize) - 1, frac));
        kernel.push((full as isize + 1, frac));
    }
    let norm: f64 = kernel.iter().map(|(_, w)| w).sum();
    let (w, h) = (img.width as isize, img.height as isize);

    let mut tmp = vec![0.0f64; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = kernel
                .iter()
                .map(|&(k, wt)| wt * f64::from(img.get((x + k).clamp(0, w - 1) as usize, y as usize)))
                .sum();
            tmp[(y * w + x) as usize] = acc / norm;
        }
    }
    let mut out = GrayImage::filled(img.width, img.height, 0);
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = kernel
                .iter()
                .map(|&(k, wt)| wt * tmp[((y + k).clamp(0, h - 1) * w + x) as usize])
                .sum();
            out.set(x as usize, y as usize, clamp_round(acc / norm));
        }
    }
    out
}

/// One generated dataset entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgedPlate {
    pub index: usize,
    pub label: PlateLabel,
    pub format: PlateFormat,
    pub params: DegradeParams,
    pub image: GrayImage,
}

/// Generates the `index`-th image of `spec`. Depends only on `(spec, index)`.
pub fn forge_one(spec: &ForgeSpec, index: usize) -> Result<ForgedPlate, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let kind = if rng.random_bool(spec.two_line_prob) {
        LineLayout::TwoLine
    } else {
        LineLayout::SingleLine
    };
    let format = PlateFormat::new(kind, spec.letters, spec.digits)?;
    let label = random_plate_text(&format, &mut rng);
    let max = spec.degrade.max_rotation_deg;
    let rotation_deg = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let params = DegradeParams {
        rotation_deg,
        blur_radius_px: spec.degrade.blur_radius_px,
        gaussian_sigma: spec.degrade.gaussian_sigma,
        salt_pepper_density: spec.degrade.salt_pepper_density,
    };
    let clean = render_plate(&label, &format, spec.width_px, spec.height_px)?;
    let image = degrade(&clean, &params, &mut rng)?;
    Ok(ForgedPlate {
        index,
        label,
        format,
        params,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::normalize_label;

    fn single() -> PlateFormat {
        PlateFormat::malaysian(LineLayout::SingleLine)
    }

    fn two_line() -> PlateFormat {
        PlateFormat::malaysian(LineLayout::TwoLine)
    }

    /// Runs of columns containing any ink.
    fn column_clusters(img: &GrayImage) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for x in 0..=img.width() {
            let inked = x < img.width() && (0..img.height()).any(|y| img.get(x, y) > 0);
            match (inked, start) {
                (true, None) => start = Some(x),
                (false, Some(s)) => {
                    out.push((s, x));
                    start = None;
                }
                _ => {}
            }
        }
        out
    }

    #[test]
    fn plate_text_has_letters_then_digits() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let label = random_plate_text(&single(), &mut rng);
            assert_eq!(label.len(), 7);
            assert!(label.matches_format(&single()));
        }
        let a = random_plate_text(&single(), &mut ChaCha8Rng::seed_from_u64(42));
        let b = random_plate_text(&single(), &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn single_line_has_seven_clusters_in_one_band() {
        let img = render_plate(&normalize_label("ABC1234"), &single(), 120, 50).unwrap();
        assert_eq!((img.width(), img.height()), (120, 50));
        assert!(img.pixels().iter().all(|&p| p == 0 || p == 255));
        assert_eq!(column_clusters(&img).len(), 7);
        let rows: Vec<usize> = (0..50)
            .filter(|&y| (0..120).any(|x| img.get(x, y) > 0))
            .collect();
        // one contiguous band of inked rows
        assert_eq!(rows.last().unwrap() - rows[0] + 1, rows.len());
    }

    #[test]
    fn two_line_splits_letters_and_digits_about_midline() {
        let img = render_plate(&normalize_label("ABC1234"), &two_line(), 120, 50).unwrap();
        let boxes = layout(&two_line(), 120, 50).unwrap();
        let ink_centroid = |bs: &[GlyphBox]| {
            let (mut sum, mut n) = (0.0, 0.0);
            for b in bs {
                for y in b.y..b.y + b.h {
                    for x in b.x..b.x + b.w {
                        if img.get(x, y) > 0 {
                            sum += y as f64;
                            n += 1.0;
                        }
                    }
                }
            }
            sum / n
        };
        assert!(ink_centroid(&boxes[..3]) < 25.0);
        assert!(ink_centroid(&boxes[3..]) > 25.0);
        // every inked pixel belongs to some glyph box
        let total_ink = img.pixels().iter().filter(|&&p| p > 0).count();
        let boxed: usize = boxes
            .iter()
            .map(|b| {
                (b.y..b.y + b.h)
                    .flat_map(|y| (b.x..b.x + b.w).map(move |x| (x, y)))
                    .filter(|&(x, y)| img.get(x, y) > 0)
                    .count()
            })
            .sum();
        assert_eq!(total_ink, boxed);
        // each line horizontally centered (within a pixel)
        for line in [&boxes[..3], &boxes[3..]] {
            let left = line[0].x;
            let right = 120 - (line[line.len() - 1].x + line[0].w);
            assert!(left.abs_diff(right) <= 1);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let label = normalize_label("AAA1111");
        let a = render_plate(&label, &single(), 120, 50).unwrap();
        let b = render_plate(&label, &single(), 120, 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_rejects_mismatched_label() {
        let err = render_plate(&normalize_label("AB12"), &single(), 120, 50).unwrap_err();
        assert!(matches!(err, Error::FormatMismatch { .. }));
        assert!(render_plate(&normalize_label("ABC1234"), &single(), 20, 8).is_err());
    }

    #[test]
    fn zero_params_are_identity() {
        let img = render_plate(&normalize_label("XYZ9876"), &single(), 120, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(degrade(&img, &DegradeParams::NONE, &mut rng).unwrap(), img);
    }

    #[test]
    fn rejects_out_of_range_params() {
        let img = GrayImage::filled(4, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in [
            DegradeParams { rotation_deg: 5.5, ..DegradeParams::NONE },
            DegradeParams { blur_radius_px: -1.0, ..DegradeParams::NONE },
            DegradeParams { gaussian_sigma: f64::NAN, ..DegradeParams::NONE },
            DegradeParams { salt_pepper_density: 0.6, ..DegradeParams::NONE },
        ] {
            assert!(degrade(&img, &p, &mut rng).is_err());
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = GrayImage::filled(9, 7, 77);
        assert_eq!(box_blur(&img, 1.5), img);
    }

    #[test]
    fn salt_pepper_density_on_mid_gray() {
        let img = GrayImage::filled(120, 50, 128);
        let p = DegradeParams { salt_pepper_density: 0.1, ..DegradeParams::NONE };
        let out = degrade(&img, &p, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let flipped = out.pixels().iter().filter(|&&v| v == 0 || v == 255).count();
        let frac = flipped as f64 / 6000.0;
        assert!((frac - 0.1).abs() <= 0.01, "realized {frac}");
    }

    /// Frozen from a seeded measurement over clean renders of both layouts:
    /// mean 9.74, worst plate 12.42 (single-line strokes are 2-3 px wide, so
    /// two bilinear passes smear a large share of ink pixels).
    #[test]
    fn rotation_round_trip_loss_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        let mut worst: f64 = 0.0;
        for i in 0..200 {
            let format = if i % 2 == 0 { single() } else { two_line() };
            let img = render_plate(&random_plate_text(&format, &mut rng), &format, 120, 50).unwrap();
            let back = rotate(&rotate(&img, 5.0), -5.0);
            let mad = img.mean_abs_diff(&back).unwrap();
            total += mad;
            worst = worst.max(mad);
        }
        let mean = total / 200.0;
        assert!(mean < 10.0, "mean abs diff {mean}");
        assert!(worst < 13.0, "worst abs diff {worst}");
    }

    #[test]
    fn forge_one_is_a_function_of_spec_and_index() {
        let spec = ForgeSpec { seed: 7, ..ForgeSpec::default() };
        assert_eq!(forge_one(&spec, 3).unwrap(), forge_one(&spec, 3).unwrap());
        assert_ne!(forge_one(&spec, 3).unwrap().image, forge_one(&spec, 4).unwrap().image);
        spec.validate().unwrap();
    }

    #[test]
    fn seeds_differ_across_indices() {
        let seeds: alloc::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
