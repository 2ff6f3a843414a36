//! Background removal and geometric standardisation of fundus photographs.
//!
//! The fundus disc is located by thresholding the per-pixel max channel and
//! dropping small bright connected components (glints, burned-in text).
//! The tight box around what survives is cropped, padded symmetrically with
//! black to a square and resampled bilinearly to [`STANDARD_SIZE`]. The
//! aspect ratio of the crop is never changed.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the model input square.
pub const STANDARD_SIZE: usize = 512;
/// Smallest accepted raw image side.
pub const MIN_RAW_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreprocessError {
    #[error("image must be at least {MIN_RAW_SIDE}x{MIN_RAW_SIDE}, got {width}x{height}")]
    TooSmall { width: usize, height: usize },
    #[error("pixel buffer holds {actual} bytes, expected {expected} for 3-channel {width}x{height}")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("no fundus detected")]
    NoFundusDetected,
    #[error("region {0:?} lies outside the image or is empty")]
    InvalidRegion(FundusRegion),
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, PreprocessError> {
        if width < MIN_RAW_SIDE || height < MIN_RAW_SIDE {
            return Err(PreprocessError::TooSmall { width, height });
        }
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(PreprocessError::BufferSize {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(RawImage {
            width,
            height,
            data,
        })
    }

    /// Solid black image.
    pub fn black(width: usize, height: usize) -> Result<Self, PreprocessError> {
        RawImage::new(width, height, vec![0; width * height * 3])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn full_frame(&self) -> FundusRegion {
        FundusRegion {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }
}

impl From<StandardImage> for RawImage {
    fn from(img: StandardImage) -> Self {
        RawImage {
            width: STANDARD_SIZE,
            height: STANDARD_SIZE,
            data: img.data,
        }
    }
}

/// Axis-aligned box, inclusive start and exclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FundusRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl FundusRegion {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// A pixel is foreground when its max channel is strictly above this.
    pub background_threshold: u8,
    /// Bright components smaller than this fraction of the image are dropped.
    pub min_component_fraction: f64,
    /// Surviving foreground below this fraction of the image is rejected.
    pub min_region_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            background_threshold: 10,
            min_component_fraction: 0.005,
            min_region_fraction: 0.01,
        }
    }
}

/// Where a standardised image came from and how it was transformed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub region: FundusRegion,
    /// Output pixels per source pixel, identical on both axes.
    pub scale: f64,
    /// Black padding added around the crop, in source pixels.
    pub pad_left: usize,
    pub pad_top: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
    /// Output pixels whose centres fall inside the crop.
    pub content: FundusRegion,
}

/// The canonical 512x512 RGB model input.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardImage {
    data: Vec<u8>,
    provenance: Provenance,
}

impl StandardImage {
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * STANDARD_SIZE + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bounding box of pixels with any non-zero channel.
    pub fn non_black_bounds(&self) -> Option<FundusRegion> {
        bounds_where(STANDARD_SIZE, STANDARD_SIZE, |x, y| {
            self.pixel(x, y) != [0, 0, 0]
        })
    }
}

fn bounds_where(
    width: usize,
    height: usize,
    pred: impl Fn(usize, usize) -> bool,
) -> Option<FundusRegion> {
    let mut b: Option<FundusRegion> = None;
    for y in 0..height {
        for x in 0..width {
            if pred(x, y) {
                let r = b.get_or_insert(FundusRegion {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                });
                r.x0 = r.x0.min(x);
                r.x1 = r.x1.max(x + 1);
                r.y1 = r.y1.max(y + 1);
            }
        }
    }
    b
}

#[derive(Debug, Clone, Copy)]
struct Run {
    y: usize,
    start: usize,
    end: usize,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Locate the fundus disc as the tight box around large bright components.
///
/// Components are 8-connected and labelled over horizontal runs, so cost
/// scales with the number of runs rather than the number of pixels.
pub fn detect_fundus_region(
    image: &RawImage,
    config: &PreprocessConfig,
) -> Result<FundusRegion, PreprocessError> {
    let (w, h) = (image.width, image.height);
    let threshold = config.background_threshold;

    let mut runs: Vec<Run> = Vec::new();
    let mut parent: Vec<usize> = Vec::new();
    let mut prev_row = 0..0;
    for y in 0..h {
        let mut scan = prev_row.start;
        let row = &image.data[y * w * 3..(y + 1) * w * 3];
        let row_first = runs.len();
        let mut x = 0;
        while x < w {
            if !is_foreground(row, x, threshold) {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && is_foreground(row, x, threshold) {
                x += 1;
            }
            let id = runs.len();
            runs.push(Run { y, start, end: x });
            parent.push(id);
            // 8-connectivity: touching or diagonally adjacent runs merge.
            while scan < prev_row.end && runs[scan].end < start {
                scan += 1;
            }
            let mut j = scan;
            while j < prev_row.end && runs[j].start <= x {
                union(&mut parent, id, j);
                j += 1;
            }
        }
        prev_row = row_first..runs.len();
    }

    if runs.is_empty() {
        return Err(PreprocessError::NoFundusDetected);
    }

    let roots: Vec<usize> = (0..runs.len()).map(|i| find(&mut parent, i)).collect();
    let mut area = vec![0usize; runs.len()];
    for (run, &root) in runs.iter().zip(&roots) {
        area[root] += run.end - run.start;
    }

    let total = (w * h) as f64;
    let min_component = config.min_component_fraction * total;
    let mut region: Option<FundusRegion> = None;
    let mut surviving = 0usize;
    for (run, &root) in runs.iter().zip(&roots) {
        if (area[root] as f64) < min_component {
            continue;
        }
        surviving += run.end - run.start;
        let r = region.get_or_insert(FundusRegion {
            x0: run.start,
            y0: run.y,
            x1: run.end,
            y1: run.y + 1,
        });
        r.x0 = r.x0.min(run.start);
        r.x1 = r.x1.max(run.end);
        r.y1 = r.y1.max(run.y + 1);
    }

    match region {
        Some(r) if (surviving as f64) >= config.min_region_fraction * total => Ok(r),
        _ => Err(PreprocessError::NoFundusDetected),
    }
}

#[inline]
fn is_foreground(row: &[u8], x: usize, threshold: u8) -> bool {
    let p = &row[x * 3..x * 3 + 3];
    p[0].max(p[1]).max(p[2]) > threshold
}

/// Crop `region`, pad it to a square with black and resample to 512x512.
pub fn standardize(
    image: &RawImage,
    region: FundusRegion,
    source_id: &str,
) -> Result<StandardImage, PreprocessError> {
    if !region.fits(image.width, image.height) {
        return Err(PreprocessError::InvalidRegion(region));
    }
    let (w, h) = (region.width(), region.height());
    let side = w.max(h);
    let pad_left = (side - w) / 2;
    let pad_top = (side - h) / 2;
    let n = STANDARD_SIZE;

    // Output index o is content iff its centre, mapped into the padded
    // square, lands in [pad, pad + len). In integers:
    // 2n * pad <= (2o + 1) * side < 2n * (pad + len).
    let content_axis = |pad: usize, len: usize| {
        let inside = |o: usize| {
            let c = (2 * o + 1) * side;
            2 * n * pad <= c && c < 2 * n * (pad + len)
        };
        let lo = (0..n).find(|&o| inside(o)).unwrap_or(n);
        let hi = (lo..n).find(|&o| !inside(o)).unwrap_or(n);
        (lo, hi)
    };
    let (cx0, cx1) = content_axis(pad_left, w);
    let (cy0, cy1) = content_axis(pad_top, h);

    // Crop-local sample coordinate for output index o; exact for side and
    // o small enough, since the divisor is a power of two.
    let sample = |o: usize, pad: usize, len: usize| -> (usize, usize, f64) {
        let s = ((2 * o + 1) * side) as f64 / (2 * n) as f64 - 0.5 - pad as f64;
        let s = s.clamp(0.0, (len - 1) as f64);
        let lo = s as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, s - lo as f64)
    };
    let xs: Vec<(usize, usize, f64)> = (cx0..cx1).map(|o| sample(o, pad_left, w)).collect();

    let mut data = vec![0u8; n * n * 3];
    let stride = image.width * 3;
    for oy in cy0..cy1 {
        let (y_lo, y_hi, fy) = sample(oy, pad_top, h);
        let row_lo = &image.data[(region.y0 + y_lo) * stride..(region.y0 + y_lo + 1) * stride];
        let row_hi = &image.data[(region.y0 + y_hi) * stride..(region.y0 + y_hi + 1) * stride];
        let out_row = &mut data[oy * n * 3..(oy + 1) * n * 3];
        for (k, &(x_lo, x_hi, fx)) in xs.iter().enumerate() {
            let ox = cx0 + k;
            let a = (region.x0 + x_lo) * 3;
            let b = (region.x0 + x_hi) * 3;
            for c in 0..3 {
                let top = row_lo[a + c] as f64 * (1.0 - fx) + row_lo[b + c] as f64 * fx;
                let bottom = row_hi[a + c] as f64 * (1.0 - fx) + row_hi[b + c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out_row[ox * 3 + c] = (v + 0.5) as u8;
            }
        }
    }

    Ok(StandardImage {
        data,
        provenance: Provenance {
            source_id: String::from(source_id),
            region,
            scale: n as f64 / side as f64,
            pad_left,
            pad_top,
            pad_right: side - w - pad_left,
            pad_bottom: side - h - pad_top,
            content: FundusRegion {
                x0: cx0,
                y0: cy0,
                x1: cx1,
                y1: cy1,
            },
        },
    })
}

/// Detect then standardise.
pub fn preprocess(
    image: &RawImage,
    config: &PreprocessConfig,
    source_id: &str,
) -> Result<StandardImage, PreprocessError> {
    let region = detect_fundus_region(image, config)?;
    standardize(image, region, source_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(w: usize, h: usize, cx: i64, cy: i64, r: i64) -> RawImage {
        let mut img = RawImage::black(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                if dx * dx + dy * dy <= r * r {
                    img.set_pixel(x, y, [200, 90, 40]);
                }
            }
        }
        img
    }

    /// Exhaustive min/max scan over above-threshold pixels.
    fn scan_bounds(img: &RawImage, threshold: u8) -> Option<FundusRegion> {
        bounds_where(img.width(), img.height(), |x, y| {
            img.pixel(x, y).iter().any(|&c| c > threshold)
        })
    }

    #[test]
    fn rejects_small_or_malformed_buffers() {
        assert_eq!(
            RawImage::new(32, 100, vec![0; 32 * 100 * 3]),
            Err(PreprocessError::TooSmall {
                width: 32,
                height: 100
            })
        );
        assert!(matches!(
            RawImage::new(64, 64, vec![0; 10]),
            Err(PreprocessError::BufferSize { .. })
        ));
    }

    #[test]
    fn black_image_has_no_fundus() {
        let img = RawImage::black(100, 100).unwrap();
        assert_eq!(
            detect_fundus_region(&img, &PreprocessConfig::default()),
            Err(PreprocessError::NoFundusDetected)
        );
    }

    #[test]
    fn centred_disc_box_matches_scan() {
        let img = disc(100, 100, 50, 50, 30);
        let got = detect_fundus_region(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(Some(got), scan_bounds(&img, 10));
        for (v, want) in [(got.x0, 20), (got.y0, 20), (got.x1, 80), (got.y1, 80)] {
            assert!(v.abs_diff(want) <= 1, "{got:?}");
        }
    }

    #[test]
    fn fully_bright_image_is_whole_frame() {
        let img = RawImage::new(100, 100, vec![255; 100 * 100 * 3]).unwrap();
        let got = detect_fundus_region(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(got, img.full_frame());
    }

    #[test]
    fn glints_and_text_are_ignored() {
        let mut img = disc(200, 200, 100, 100, 60);
        // 3x3 glint in a corner and a short line of "text"
        for y in 2..5 {
            for x in 2..5 {
                img.set_pixel(x, y, [255, 255, 255]);
            }
        }
        for x in 150..190 {
            img.set_pixel(x, 195, [255, 255, 255]);
        }
        let got = detect_fundus_region(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!(
            got,
            FundusRegion {
                x0: 40,
                y0: 40,
                x1: 161,
                y1: 161
            }
        );
    }

    #[test]
    fn tiny_foreground_is_rejected() {
        // single 8x8 patch: kept as a component at 0.5%, but under 1% overall
        let mut img = RawImage::black(100, 100).unwrap();
        for y in 10..17 {
            for x in 10..17 {
                img.set_pixel(x, y, [255, 0, 0]);
            }
        }
        assert_eq!(
            detect_fundus_region(&img, &PreprocessConfig::default()),
            Err(PreprocessError::NoFundusDetected)
        );
    }

    #[test]
    fn diagonal_pixels_join_one_component() {
        let mut img = RawImage::black(100, 100).unwrap();
        // one pixel per row, so rows touch only diagonally
        for i in 0..80 {
            img.set_pixel(i + 10, i + 10, [255, 255, 255]);
        }
        let cfg = PreprocessConfig {
            min_region_fraction: 0.0,
            ..PreprocessConfig::default()
        };
        let got = detect_fundus_region(&img, &cfg).unwrap();
        assert_eq!((got.x0, got.y0, got.x1, got.y1), (10, 10, 90, 90));
    }

    #[test]
    fn identity_on_512_region() {
        let mut img = RawImage::black(600, 600).unwrap();
        for y in 0..600 {
            for x in 0..600 {
                img.set_pixel(x, y, [(x % 251) as u8, (y % 241) as u8, ((x * y) % 239) as u8]);
            }
        }
        let region = FundusRegion {
            x0: 40,
            y0: 30,
            x1: 552,
            y1: 542,
        };
        let out = standardize(&img, region, "id").unwrap();
        assert_eq!(out.provenance().scale, 1.0);
        assert_eq!(out.provenance().pad_left + out.provenance().pad_top, 0);
        for y in 0..512 {
            for x in 0..512 {
                assert_eq!(out.pixel(x, y), img.pixel(x + 40, y + 30));
            }
        }
    }

    #[test]
    fn wide_region_is_letterboxed() {
        let img = RawImage::new(600, 400, vec![180; 600 * 400 * 3]).unwrap();
        let out = standardize(&img, img.full_frame(), "wide").unwrap();
        let p = out.provenance();
        assert_eq!((p.pad_top, p.pad_bottom, p.pad_left, p.pad_right), (100, 100, 0, 0));
        let b = out.non_black_bounds().unwrap();
        let expected_h = 400.0 / 600.0 * 512.0;
        assert_eq!(b.width(), 512);
        assert!((b.height() as f64 - expected_h).abs() <= 1.0, "{b:?}");
        // centred
        assert!((b.y0 as i64 - (512 - b.y1) as i64).abs() <= 1);
        assert_eq!(b, p.content);
    }

    #[test]
    fn square_region_scales_uniformly() {
        let img = RawImage::new(600, 600, vec![90; 600 * 600 * 3]).unwrap();
        let out = standardize(&img, img.full_frame(), "sq").unwrap();
        let p = out.provenance();
        assert_eq!(p.scale, 512.0 / 600.0);
        assert_eq!((p.pad_left, p.pad_top, p.pad_right, p.pad_bottom), (0, 0, 0, 0));
        assert_eq!(p.content, FundusRegion { x0: 0, y0: 0, x1: 512, y1: 512 });
    }

    #[test]
    fn standardize_is_idempotent() {
        let img = disc(300, 220, 150, 110, 100);
        let once = preprocess(&img, &PreprocessConfig::default(), "x").unwrap();
        let raw: RawImage = once.clone().into();
        let twice = standardize(&raw, raw.full_frame(), "x").unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn region_outside_image_is_rejected() {
        let img = RawImage::black(100, 100).unwrap();
        let bad = FundusRegion { x0: 10, y0: 10, x1: 120, y1: 50 };
        assert_eq!(standardize(&img, bad, "x"), Err(PreprocessError::InvalidRegion(bad)));
    }
}
