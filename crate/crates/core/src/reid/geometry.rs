//! Mask moments, orientation and mugshot canonicalization.
//!
//! Angles follow the on-screen convention: positive is counter-clockwise as
//! the image is displayed (x right, y down in pixel coordinates). A rotation
//! of `r` degrees applied with [`rotate_rgb`] / [`rotate_mask`] turns the
//! content counter-clockwise by `r`.

use image::{imageops, Rgb, RgbImage};

use super::ReidError;

/// Side of the square network input.
pub const MUGSHOT_SIZE: u32 = 299;
/// Extra border around the rotated mask's bounding box, per side, as a fraction of its size.
pub const CROP_MARGIN: f64 = 0.05;
/// Masks whose major/minor axis ratio is below this are treated as circular.
pub const CIRCULAR_AXIS_RATIO: f64 = 1.05;

/// Binary animal mask aligned with its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Mask { width, height, bits }
    }

    /// Pixels brighter than `threshold` are animal.
    pub fn from_luma(img: &image::GrayImage, threshold: u8) -> Self {
        Mask::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] > threshold)
    }

    pub fn to_luma(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = (y * self.width + x) as usize;
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Inclusive `(x0, y0, x1, y1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Mask {
        Mask::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }
}

/// Area, centroid and central second moments (normalized by area) of a mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub area: f64,
    pub cx: f64,
    pub cy: f64,
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
}

impl Moments {
    pub fn of(mask: &Mask) -> Option<Moments> {
        let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    n += 1.0;
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        if n == 0.0 {
            return None;
        }
        let (cx, cy) = (sx / n, sy / n);
        let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    mu20 += dx * dx;
                    mu02 += dy * dy;
                    mu11 += dx * dy;
                }
            }
        }
        Some(Moments {
            area: n,
            cx: cx + 0.5,
            cy: cy + 0.5,
            mu20: mu20 / n,
            mu02: mu02 / n,
            mu11: mu11 / n,
        })
    }

    /// Angle of the major axis, degrees counter-clockwise from the horizontal
    /// as displayed. Pixel y grows downward, hence the sign flip on mu11.
    pub fn major_axis_degrees(&self) -> f64 {
        0.5 * (-2.0 * self.mu11).atan2(self.mu20 - self.mu02).to_degrees()
    }

    /// Ratio of the equivalent ellipse's major to minor axis length.
    pub fn axis_ratio(&self) -> f64 {
        let mean = 0.5 * (self.mu20 + self.mu02);
        let spread = (0.25 * (self.mu20 - self.mu02).powi(2) + self.mu11 * self.mu11).sqrt();
        let (major, minor) = (mean + spread, mean - spread);
        if minor <= 0.0 {
            f64::INFINITY
        } else {
            (major / minor).sqrt()
        }
    }
}

/// Folds an angle in degrees into (-90, 90].
pub fn fold_half_turn(deg: f64) -> f64 {
    let mut r = deg % 180.0;
    if r > 90.0 {
        r -= 180.0;
    } else if r <= -90.0 {
        r += 180.0;
    }
    // Keep the +90 convention when rounding noise lands just past -90.
    if (r + 90.0).abs() < 1e-9 {
        r = 90.0;
    }
    r
}

/// Rotation, in degrees within (-90, 90], that turns the mask's major axis
/// vertical. Near-circular masks return 0.
pub fn mask_orientation(mask: &Mask) -> Result<f64, ReidError> {
    let m = Moments::of(mask).ok_or(ReidError::EmptyMask)?;
    if m.axis_ratio() < CIRCULAR_AXIS_RATIO {
        return Ok(0.0);
    }
    Ok(fold_half_turn(90.0 - m.major_axis_degrees()))
}

/// Canvas size and the inverse mapping for rotating a `w`×`h` raster by `deg`.
struct RotationGeometry {
    out_w: u32,
    out_h: u32,
    cos: f64,
    sin: f64,
    src_cx: f64,
    src_cy: f64,
    dst_cx: f64,
    dst_cy: f64,
}

impl RotationGeometry {
    fn new(w: u32, h: u32, deg: f64) -> Self {
        let rad = deg.to_radians();
        let (sin, cos) = rad.sin_cos();
        let fw = w as f64;
        let fh = h as f64;
        let out_w = ((fw * cos.abs() + fh * sin.abs()) - 1e-6).ceil().max(1.0) as u32;
        let out_h = ((fw * sin.abs() + fh * cos.abs()) - 1e-6).ceil().max(1.0) as u32;
        RotationGeometry {
            out_w,
            out_h,
            cos,
            sin,
            src_cx: fw / 2.0,
            src_cy: fh / 2.0,
            dst_cx: out_w as f64 / 2.0,
            dst_cy: out_h as f64 / 2.0,
        }
    }

    /// Source coordinates sampled by output pixel (x, y).
    fn source(&self, x: u32, y: u32) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.dst_cx;
        let dy_up = self.dst_cy - (y as f64 + 0.5);
        let sx = self.cos * dx + self.sin * dy_up;
        let sy_up = -self.sin * dx + self.cos * dy_up;
        (self.src_cx + sx, self.src_cy - sy_up)
    }
}

/// Exact quarter-turn count for angles that are multiples of 90 degrees.
fn quarter_turns(deg: f64) -> Option<u32> {
    let q = deg / 90.0;
    let r = q.round();
    ((q - r).abs() < 1e-9).then(|| (r as i64).rem_euclid(4) as u32)
}

/// Rotates counter-clockwise by `deg` onto a canvas large enough to hold the
/// whole result; uncovered pixels are black.
pub fn rotate_rgb(img: &RgbImage, deg: f64) -> RgbImage {
    if let Some(q) = quarter_turns(deg) {
        return match q {
            0 => img.clone(),
            1 => imageops::rotate270(img),
            2 => imageops::rotate180(img),
            _ => imageops::rotate90(img),
        };
    }
    let g = RotationGeometry::new(img.width(), img.height(), deg);
    RgbImage::from_fn(g.out_w, g.out_h, |x, y| {
        let (sx, sy) = g.source(x, y);
        bilinear(img, sx - 0.5, sy - 0.5)
    })
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let fetch = |xi: i64, yi: i64| -> Option<[f64; 3]> {
        (xi >= 0 && yi >= 0 && xi < w && yi < h).then(|| {
            let p = img.get_pixel(xi as u32, yi as u32);
            [p[0] as f64, p[1] as f64, p[2] as f64]
        })
    };
    let taps = [
        (fetch(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (fetch(x0 + 1, y0), fx * (1.0 - fy)),
        (fetch(x0, y0 + 1), (1.0 - fx) * fy),
        (fetch(x0 + 1, y0 + 1), fx * fy),
    ];
    let mut acc = [0.0; 3];
    for (px, wgt) in taps {
        if let Some(px) = px {
            for c in 0..3 {
                acc[c] += px[c] * wgt;
            }
        }
    }
    Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

/// Nearest-neighbour counterpart of [`rotate_rgb`].
pub fn rotate_mask(mask: &Mask, deg: f64) -> Mask {
    let (w, h) = (mask.width, mask.height);
    if let Some(q) = quarter_turns(deg) {
        return match q {
            0 => mask.clone(),
            1 => Mask::from_fn(h, w, |x, y| mask.get(w - 1 - y, x)),
            2 => Mask::from_fn(w, h, |x, y| mask.get(w - 1 - x, h - 1 - y)),
            _ => Mask::from_fn(h, w, |x, y| mask.get(y, h - 1 - x)),
        };
    }
    let g = RotationGeometry::new(w, h, deg);
    Mask::from_fn(g.out_w, g.out_h, |x, y| {
        let (sx, sy) = g.source(x, y);
        sx >= 0.0 && sy >= 0.0 && mask.get(sx.floor() as u32, sy.floor() as u32)
    })
}

/// Where a mugshot was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MugshotSource {
    pub recording_id: String,
    pub frame_index: usize,
    pub detection: usize,
}

impl MugshotSource {
    /// Provider lookup key, `{recording}:{frame}:{detection}`.
    pub fn key(&self) -> String {
        format!("{}:{}:{}", self.recording_id, self.frame_index, self.detection)
    }
}

/// Vertically oriented 299×299 crop of one animal.
#[derive(Debug, Clone, PartialEq)]
pub struct Mugshot {
    pub image: RgbImage,
    /// The animal mask carried through the same transform.
    pub mask: Mask,
    pub source: MugshotSource,
    /// Degrees counter-clockwise applied to the source image.
    pub applied_rotation: f64,
}

/// Rotates the animal upright, crops it with a margin and letterboxes it
/// into a 299×299 square.
pub fn canonicalize_mugshot(image: &RgbImage, mask: &Mask, source: MugshotSource) -> Result<Mugshot, ReidError> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(ReidError::MaskOutsideImage {
            mask: (mask.width(), mask.height()),
            image: (image.width(), image.height()),
        });
    }
    let rotation = mask_orientation(mask)?;
    let rot_img = rotate_rgb(image, rotation);
    let rot_mask = rotate_mask(mask, rotation);
    let (x0, y0, x1, y1) = rot_mask.bounding_box().ok_or(ReidError::EmptyMask)?;

    let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
    let mx = (bw * CROP_MARGIN).ceil() as u32;
    let my = (bh * CROP_MARGIN).ceil() as u32;
    let cx0 = x0.saturating_sub(mx);
    let cy0 = y0.saturating_sub(my);
    let cx1 = (x1 + mx).min(rot_img.width() - 1);
    let cy1 = (y1 + my).min(rot_img.height() - 1);
    let (cw, ch) = (cx1 - cx0 + 1, cy1 - cy0 + 1);

    let crop = imageops::crop_imm(&rot_img, cx0, cy0, cw, ch).to_image();
    let crop_mask = rot_mask.crop(cx0, cy0, cw, ch);

    let scale = MUGSHOT_SIZE as f64 / cw.max(ch) as f64;
    let nw = ((cw as f64 * scale).round() as u32).clamp(1, MUGSHOT_SIZE);
    let nh = ((ch as f64 * scale).round() as u32).clamp(1, MUGSHOT_SIZE);
    let resized = imageops::resize(&crop, nw, nh, imageops::FilterType::Triangle);
    let (ox, oy) = ((MUGSHOT_SIZE - nw) / 2, (MUGSHOT_SIZE - nh) / 2);

    let mut canvas = RgbImage::new(MUGSHOT_SIZE, MUGSHOT_SIZE);
    imageops::replace(&mut canvas, &resized, ox as i64, oy as i64);
    let out_mask = Mask::from_fn(MUGSHOT_SIZE, MUGSHOT_SIZE, |x, y| {
        if x < ox || y < oy || x >= ox + nw || y >= oy + nh {
            return false;
        }
        let sx = (((x - ox) as f64 + 0.5) * cw as f64 / nw as f64) as u32;
        let sy = (((y - oy) as f64 + 0.5) * ch as f64 / nh as f64) as u32;
        crop_mask.get(sx.min(cw - 1), sy.min(ch - 1))
    });

    Ok(Mugshot {
        image: canvas,
        mask: out_mask,
        source,
        applied_rotation: rotation,
    })
}

/// Filled ellipse centred in a `w`×`h` raster with semi-axes `major` and
/// `minor`; the major axis is tilted `tilt_deg` clockwise from vertical (so
/// [`mask_orientation`] reports `tilt_deg`).
pub fn ellipse_mask(w: u32, h: u32, major: f64, minor: f64, tilt_deg: f64) -> Mask {
    let (s, c) = tilt_deg.to_radians().sin_cos();
    // Major axis direction in pixel coordinates (y down).
    let (ax, ay) = (s, -c);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    Mask::from_fn(w, h, |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let along = dx * ax + dy * ay;
        let across = -dx * ay + dy * ax;
        (along / major).powi(2) + (across / minor).powi(2) <= 1.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(w: u32, h: u32, rw: u32, rh: u32) -> Mask {
        let (x0, y0) = ((w - rw) / 2, (h - rh) / 2);
        Mask::from_fn(w, h, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh)
    }

    #[test]
    fn vertical_rectangle_needs_no_rotation() {
        assert_eq!(mask_orientation(&rect(100, 100, 20, 60)).unwrap(), 0.0);
    }

    #[test]
    fn horizontal_rectangle_is_plus_ninety() {
        assert_eq!(mask_orientation(&rect(100, 100, 60, 20)).unwrap(), 90.0);
    }

    #[test]
    fn tilted_ellipse() {
        let m = ellipse_mask(200, 200, 80.0, 30.0, 30.0);
        let r = mask_orientation(&m).unwrap();
        assert!((r - 30.0).abs() <= 0.5, "{r}");
        let m = ellipse_mask(200, 200, 80.0, 30.0, -45.0);
        let r = mask_orientation(&m).unwrap();
        assert!((r + 45.0).abs() <= 0.5, "{r}");
    }

    #[test]
    fn circle_is_zero() {
        let m = ellipse_mask(101, 101, 40.0, 40.0, 17.0);
        assert_eq!(mask_orientation(&m).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(mask_orientation(&Mask::new(10, 10)), Err(ReidError::EmptyMask)));
    }

    #[test]
    fn half_turn_does_not_change_orientation() {
        let m = ellipse_mask(150, 120, 50.0, 20.0, 22.0);
        let a = mask_orientation(&m).unwrap();
        let b = mask_orientation(&rotate_mask(&m, 180.0)).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn quarter_turn_matches_resampled_rotation() {
        let m = ellipse_mask(60, 40, 18.0, 8.0, 10.0);
        let exact = rotate_mask(&m, 90.0);
        assert_eq!((exact.width(), exact.height()), (40, 60));
        let r = mask_orientation(&exact).unwrap();
        // Quarter turns permute pixels, so the moments carry over exactly.
        let before = mask_orientation(&m).unwrap();
        assert!((r - fold_half_turn(before - 90.0)).abs() < 1e-9, "{r} vs {before}");
    }

    #[test]
    fn fold_convention() {
        assert_eq!(fold_half_turn(90.0), 90.0);
        assert_eq!(fold_half_turn(-90.0), 90.0);
        assert_eq!(fold_half_turn(180.0), 0.0);
        assert_eq!(fold_half_turn(135.0), -45.0);
        assert_eq!(fold_half_turn(-135.0), 45.0);
    }

    fn textured(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 3 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn mugshot_is_square_and_upright() {
        let mask = ellipse_mask(320, 240, 90.0, 35.0, 50.0);
        let shot = canonicalize_mugshot(&textured(320, 240), &mask, MugshotSource::default()).unwrap();
        assert_eq!(shot.image.dimensions(), (MUGSHOT_SIZE, MUGSHOT_SIZE));
        assert_eq!((shot.mask.width(), shot.mask.height()), (MUGSHOT_SIZE, MUGSHOT_SIZE));
        assert!((shot.applied_rotation - 50.0).abs() < 0.5);
        let again = canonicalize_mugshot(&shot.image, &shot.mask, MugshotSource::default()).unwrap();
        assert!(again.applied_rotation.abs() <= 0.5, "{}", again.applied_rotation);
    }

    #[test]
    fn circular_mugshot_is_not_rotated() {
        let mask = ellipse_mask(100, 100, 30.0, 30.0, 0.0);
        let shot = canonicalize_mugshot(&textured(100, 100), &mask, MugshotSource::default()).unwrap();
        assert_eq!(shot.applied_rotation, 0.0);
        assert_eq!(shot.image.dimensions(), (299, 299));
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let err = canonicalize_mugshot(&textured(10, 10), &rect(12, 10, 4, 4), MugshotSource::default()).unwrap_err();
        assert!(matches!(err, ReidError::MaskOutsideImage { .. }));
        let err = canonicalize_mugshot(&textured(10, 10), &Mask::new(10, 10), MugshotSource::default()).unwrap_err();
        assert!(matches!(err, ReidError::EmptyMask));
    }

    #[test]
    fn tiny_masks_still_fill_the_mugshot() {
        let mask = rect(50, 50, 3, 7);
        let shot = canonicalize_mugshot(&textured(50, 50), &mask, MugshotSource::default()).unwrap();
        assert_eq!(shot.image.dimensions(), (299, 299));
        let (_, y0, _, y1) = shot.mask.bounding_box().unwrap();
        assert!(y1 - y0 + 1 >= 220, "{y0}..{y1}");
    }
}
