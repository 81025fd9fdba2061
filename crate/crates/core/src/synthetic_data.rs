//! Procedural paired try-on samples with exact ground-truth warp flows.
//!
//! Garments are drawn in a fixed canonical frame. A [`WarpSpec`] (affine plus a
//! thin-plate spline over a 4×4 control grid) is the backward map from the
//! person frame into that canonical frame, so the flow is known analytically.
//! The person is a flat-shaded body posed by pushing the canonical joints
//! through the inverse map, wearing the warped garment.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data_model::{
    AgnosticMask, Array3, DenseFlow, ImageTensor, Joint, JointName, PoseKeypoints, SkeletonMap, TryOnSample,
    ValueRange, MAX_FLOW_COMPONENT, MIN_MASK_FOREGROUND,
};
use crate::error::{invalid, FiaError, Result};
use crate::flow_guider::{resize_flow, warp};
use crate::parallel::par_map;

/// Smallest image the generator accepts; patterns become unresolvable below.
pub const MIN_GENERATOR_SIZE: (usize, usize) = (32, 24);
/// Dilation margin of the agnostic mask, in pixels.
pub const MASK_DILATION_PX: usize = 2;
/// Side of the thin-plate-spline control grid.
pub const TPS_GRID: usize = 4;

pub type Point = (f64, f64);
pub type Rgb = [f32; 3];

/// Rounds to the nearest multiple of 1/255 so images survive 8-bit PNG exactly.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Silhouette {
    Tshirt,
    LongSleeve,
}

impl Silhouette {
    /// Outline in canonical normalized coordinates `(x, y)`.
    pub fn polygon(self) -> Vec<Point> {
        match self {
            Silhouette::Tshirt => vec![
                (0.42, 0.24),
                (0.50, 0.29),
                (0.58, 0.24),
                (0.70, 0.27),
                (0.82, 0.45),
                (0.72, 0.50),
                (0.66, 0.44),
                (0.66, 0.90),
                (0.34, 0.90),
                (0.34, 0.44),
                (0.28, 0.50),
                (0.18, 0.45),
                (0.30, 0.27),
            ],
            Silhouette::LongSleeve => vec![
                (0.42, 0.24),
                (0.50, 0.29),
                (0.58, 0.24),
                (0.70, 0.27),
                (0.80, 0.48),
                (0.88, 0.74),
                (0.78, 0.77),
                (0.70, 0.55),
                (0.66, 0.46),
                (0.66, 0.90),
                (0.34, 0.90),
                (0.34, 0.46),
                (0.30, 0.55),
                (0.22, 0.77),
                (0.12, 0.74),
                (0.20, 0.48),
                (0.30, 0.27),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Plain,
    /// Sinusoidal stripes, `frequency` cycles per unit along direction `angle`.
    Stripes { frequency: f64, phase: f64, angle: f64, color: Rgb },
    Checks { frequency: f64, phase: f64, color: Rgb },
    /// A ring-shaped chest logo.
    LogoPatch { cx: f64, cy: f64, radius: f64, color: Rgb },
    /// Lines of 3×5 pseudo-glyphs drawn from `glyph_seed`.
    TextGlyphs { glyph_seed: u64, lines: usize, chars: usize, color: Rgb },
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Plain => "plain",
            Pattern::Stripes { .. } => "stripes",
            Pattern::Checks { .. } => "checks",
            Pattern::LogoPatch { .. } => "logo_patch",
            Pattern::TextGlyphs { .. } => "text_glyphs",
        }
    }
}

fn valid_color(c: &Rgb) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub base_color: Rgb,
    pub pattern: Pattern,
    pub silhouette: Silhouette,
}

const TEXT_BOX: (f64, f64, f64, f64) = (0.37, 0.46, 0.63, 0.62);

impl GarmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !valid_color(&self.base_color) {
            return invalid("garment base color outside [0,1]");
        }
        let ok = match &self.pattern {
            Pattern::Plain => true,
            Pattern::Stripes {
                frequency,
                phase,
                angle,
                color,
            } => (1.0..=16.0).contains(frequency) && phase.is_finite() && angle.is_finite() && valid_color(color),
            Pattern::Checks { frequency, phase, color } => {
                (1.0..=16.0).contains(frequency) && phase.is_finite() && valid_color(color)
            }
            Pattern::LogoPatch { cx, cy, radius, color } => {
                (0.3..=0.7).contains(cx) && (0.35..=0.8).contains(cy) && *radius > 0.0 && *radius <= 0.2 && valid_color(color)
            }
            Pattern::TextGlyphs { lines, chars, color, .. } => {
                (1..=3).contains(lines) && (2..=6).contains(chars) && valid_color(color)
            }
        };
        if !ok {
            return invalid(format!("invalid parameters for pattern {}", self.pattern.name()));
        }
        if !polygon_is_simple(&self.silhouette.polygon()) {
            return invalid("garment silhouette is not a simple polygon");
        }
        Ok(())
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let color = |rng: &mut dyn rand::RngCore| -> Rgb {
            [
                quantize(rng.random_range(0.05..0.95)),
                quantize(rng.random_range(0.05..0.95)),
                quantize(rng.random_range(0.05..0.95)),
            ]
        };
        let base_color = color(rng);
        let mut accent = color(rng);
        // keep the pattern visible against the base
        if accent.iter().zip(&base_color).map(|(a, b)| (a - b).abs()).sum::<f32>() < 0.6 {
            accent = base_color.map(|v| quantize(1.0 - v));
        }
        let pattern = match rng.random_range(0..5) {
            0 => Pattern::Plain,
            1 => Pattern::Stripes {
                frequency: rng.random_range(3.0..9.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: accent,
            },
            2 => Pattern::Checks {
                frequency: rng.random_range(3.0..8.0),
                phase: rng.random_range(0.0..1.0),
                color: accent,
            },
            3 => Pattern::LogoPatch {
                cx: rng.random_range(0.42..0.58),
                cy: rng.random_range(0.45..0.65),
                radius: rng.random_range(0.07..0.13),
                color: accent,
            },
            _ => Pattern::TextGlyphs {
                glyph_seed: rng.random(),
                lines: rng.random_range(1..=2),
                chars: rng.random_range(3..=5),
                color: accent,
            },
        };
        let silhouette = if rng.random_bool(0.5) {
            Silhouette::Tshirt
        } else {
            Silhouette::LongSleeve
        };
        Self {
            base_color,
            pattern,
            silhouette,
        }
    }

    fn texture(&self, u: f64, v: f64) -> Rgb {
        match &self.pattern {
            Pattern::Plain => self.base_color,
            Pattern::Stripes {
                frequency,
                phase,
                angle,
                color,
            } => {
                let s = (std::f64::consts::TAU * frequency * (u * angle.cos() + v * angle.sin()) + phase).sin();
                if s > 0.0 {
                    *color
                } else {
                    self.base_color
                }
            }
            Pattern::Checks { frequency, phase, color } => {
                let a = (u * frequency + phase).floor() as i64;
                let b = (v * frequency + phase).floor() as i64;
                if (a + b).rem_euclid(2) == 0 {
                    *color
                } else {
                    self.base_color
                }
            }
            Pattern::LogoPatch { cx, cy, radius, color } => {
                let d = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                if d <= *radius && d > radius * 0.5 {
                    *color
                } else {
                    self.base_color
                }
            }
            Pattern::TextGlyphs {
                glyph_seed,
                lines,
                chars,
                color,
            } => {
                let (x0, y0, x1, y1) = TEXT_BOX;
                if u < x0 || u >= x1 || v < y0 || v >= y1 {
                    return self.base_color;
                }
                // each glyph cell is 4×6 units: a 3×5 bitmap plus one unit of spacing
                let gx = ((u - x0) / (x1 - x0) * (*chars * 4) as f64) as usize;
                let gy = ((v - y0) / (y1 - y0) * (*lines * 6) as f64) as usize;
                let (ci, cx) = (gx / 4, gx % 4);
                let (li, cy) = (gy / 6, gy % 6);
                if cx == 3 || cy == 5 {
                    return self.base_color;
                }
                if glyph_bit(*glyph_seed, li * chars + ci, cy * 3 + cx) {
                    *color
                } else {
                    self.base_color
                }
            }
        }
    }

    /// Garment on a white background and its binary coverage, both `h × w`.
    pub fn render(&self, h: usize, w: usize) -> Result<(ImageTensor, Array3)> {
        self.validate()?;
        let poly = self.silhouette.polygon();
        let inside = rasterize_polygon(&poly, h, w);
        let img = Array3::from_fn(3, h, w, |c, y, x| {
            if inside[y * w + x] {
                let (u, v) = pixel_center(y, x, h, w);
                quantize(self.texture(u, v)[c])
            } else {
                1.0
            }
        });
        let alpha = Array3::new(inside.iter().map(|&b| b as u8 as f32).collect(), 1, h, w)?;
        Ok((ImageTensor::new(img, ValueRange::Unit)?, alpha))
    }
}

fn glyph_bit(seed: u64, glyph: usize, bit: usize) -> bool {
    let mut z = seed ^ (glyph as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> bit) & 1 == 1
}

#[inline]
fn pixel_center(y: usize, x: usize, h: usize, w: usize) -> Point {
    ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64)
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Pixels whose centres fall inside `poly` (normalized coordinates).
pub fn rasterize_polygon(poly: &[Point], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    if poly.len() < 3 {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = point_in_polygon(pixel_center(y, x, h, w), poly);
        }
    }
    out
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let orient = |p: Point, q: Point, r: Point| (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0);
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

/// True when no two non-adjacent edges intersect.
pub fn polygon_is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Square-element dilation of a binary `h × w` field by `r` pixels.
pub fn dilate(bits: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|k| bits[y * w + k]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|k| rows[k * w + x]);
        }
    }
    out
}

/// Rasterizes `polygon` (normalized coordinates) and dilates it by
/// [`MASK_DILATION_PX`].
pub fn derive_agnostic_mask(polygon: &[Point], size: (usize, usize)) -> Result<AgnosticMask> {
    let (h, w) = size;
    if polygon.len() < 3 {
        return invalid("agnostic mask polygon needs at least three vertices");
    }
    if polygon.iter().any(|&(x, y)| !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y)) {
        return invalid("agnostic mask polygon leaves the image");
    }
    let bits = dilate(&rasterize_polygon(polygon, h, w), h, w, MASK_DILATION_PX);
    mask_from_bits(&bits, h, w)
}

fn mask_from_bits(bits: &[bool], h: usize, w: usize) -> Result<AgnosticMask> {
    let mask = AgnosticMask::new(bits.iter().map(|&b| b as u8 as f32).collect(), h, w)?;
    if mask.foreground_fraction() < MIN_MASK_FOREGROUND {
        return invalid("agnostic mask has (almost) no foreground");
    }
    Ok(mask)
}

/// Backward map from the person frame into the canonical garment frame:
/// `T(p) = A·p + b + u(p)`, with `u` the thin-plate spline interpolating
/// `tps_displacements` at the control grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    /// Rows `[a11, a12, b1]`, `[a21, a22, b2]`.
    pub affine: [[f64; 3]; 2],
    /// Row-major over the 4×4 grid, `(dx, dy)` per control point.
    pub tps_displacements: Vec<[f64; 2]>,
    pub magnitude_cap: f64,
}

/// Control point `k` of the grid, at cell centres of a 4×4 tiling.
pub fn control_point(k: usize) -> Point {
    let (i, j) = (k / TPS_GRID, k % TPS_GRID);
    ((j as f64 + 0.5) / TPS_GRID as f64, (i as f64 + 0.5) / TPS_GRID as f64)
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl WarpSpec {
    pub fn identity() -> Self {
        Self {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            tps_displacements: vec![[0.0, 0.0]; TPS_GRID * TPS_GRID],
            magnitude_cap: 0.0,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.affine[0][0] * self.affine[1][1] - self.affine[0][1] * self.affine[1][0]
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.determinant();
        if !(0.5..=2.0).contains(&det) {
            return invalid(format!("warp affine determinant {det} outside [0.5, 2]"));
        }
        if self.tps_displacements.len() != TPS_GRID * TPS_GRID {
            return invalid("warp needs one displacement per control point of the 4x4 grid");
        }
        if self.affine.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("warp affine has non-finite entries");
        }
        for d in &self.tps_displacements {
            let m = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if !(m <= self.magnitude_cap + 1e-12) {
                return invalid(format!("control displacement {m} exceeds cap {}", self.magnitude_cap));
            }
        }
        Ok(())
    }

    /// Random similarity-like transform about the image centre plus a capped
    /// local spline deformation.
    pub fn random(rng: &mut impl Rng) -> Self {
        let s: f64 = rng.random_range(0.88..1.12);
        let aspect: f64 = rng.random_range(0.95..1.05);
        let theta: f64 = rng.random_range(-0.08..0.08);
        let (tx, ty): (f64, f64) = (rng.random_range(-0.04..0.04), rng.random_range(-0.03..0.03));
        let m = [
            [s * aspect * theta.cos(), -s * theta.sin()],
            [s * aspect * theta.sin(), s * theta.cos()],
        ];
        let c = 0.5;
        let affine = [
            [m[0][0], m[0][1], c + tx - m[0][0] * c - m[0][1] * c],
            [m[1][0], m[1][1], c + ty - m[1][0] * c - m[1][1] * c],
        ];
        let cap = 0.03;
        let tps_displacements = (0..TPS_GRID * TPS_GRID)
            .map(|_| {
                let r = cap * rng.random_range(0.0f64..1.0).sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        Self {
            affine,
            tps_displacements,
            magnitude_cap: cap,
        }
    }

    pub fn map(&self) -> Result<WarpMap> {
        self.validate()?;
        let n = TPS_GRID * TPS_GRID;
        let mut l = DMatrix::<f64>::zeros(n + 3, n + 3);
        for i in 0..n {
            let pi = control_point(i);
            for j in 0..n {
                let pj = control_point(j);
                l[(i, j)] = tps_kernel((pi.0 - pj.0).powi(2) + (pi.1 - pj.1).powi(2));
            }
            l[(i, n)] = 1.0;
            l[(i, n + 1)] = pi.0;
            l[(i, n + 2)] = pi.1;
            l[(n, i)] = 1.0;
            l[(n + 1, i)] = pi.0;
            l[(n + 2, i)] = pi.1;
        }
        let lu = l.lu();
        let mut coeffs = [vec![], vec![]];
        for (axis, out) in coeffs.iter_mut().enumerate() {
            let mut rhs = DVector::<f64>::zeros(n + 3);
            for i in 0..n {
                rhs[i] = self.tps_displacements[i][axis];
            }
            let sol = lu
                .solve(&rhs)
                .ok_or_else(|| FiaError::InvalidInput("thin-plate spline system is singular".into()))?;
            *out = sol.iter().copied().collect();
        }
        Ok(WarpMap {
            affine: self.affine,
            coeffs,
        })
    }
}

/// Evaluable form of a [`WarpSpec`].
#[derive(Debug, Clone)]
pub struct WarpMap {
    affine: [[f64; 3]; 2],
    coeffs: [Vec<f64>; 2],
}

impl WarpMap {
    /// Person-frame point to canonical garment frame.
    pub fn apply(&self, p: Point) -> Point {
        let n = TPS_GRID * TPS_GRID;
        let mut u = [0.0; 2];
        for (axis, c) in self.coeffs.iter().enumerate() {
            let mut acc = c[n] + c[n + 1] * p.0 + c[n + 2] * p.1;
            for (k, ck) in c.iter().take(n).enumerate() {
                let q = control_point(k);
                acc += ck * tps_kernel((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2));
            }
            u[axis] = acc;
        }
        let a = &self.affine;
        (
            a[0][0] * p.0 + a[0][1] * p.1 + a[0][2] + u[0],
            a[1][0] * p.0 + a[1][1] * p.1 + a[1][2] + u[1],
        )
    }

    /// Canonical point to person frame, by Newton iteration on `apply`.
    pub fn invert(&self, v: Point) -> Point {
        let a = &self.affine;
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        // affine-only inverse as the starting guess
        let (rx, ry) = (v.0 - a[0][2], v.1 - a[1][2]);
        let mut p = ((a[1][1] * rx - a[0][1] * ry) / det, (-a[1][0] * rx + a[0][0] * ry) / det);
        const H: f64 = 1e-6;
        for _ in 0..30 {
            let f = self.apply(p);
            let (ex, ey) = (f.0 - v.0, f.1 - v.1);
            if ex.abs() < 1e-13 && ey.abs() < 1e-13 {
                break;
            }
            let fx = self.apply((p.0 + H, p.1));
            let fy = self.apply((p.0, p.1 + H));
            let (j00, j10) = ((fx.0 - f.0) / H, (fx.1 - f.1) / H);
            let (j01, j11) = ((fy.0 - f.0) / H, (fy.1 - f.1) / H);
            let d = j00 * j11 - j01 * j10;
            p = (p.0 - (j11 * ex - j01 * ey) / d, p.1 - (-j10 * ex + j00 * ey) / d);
        }
        p
    }

    /// Exact normalized backward flow `T(p) − p` sampled at pixel centres.
    pub fn flow(&self, h: usize, w: usize) -> Result<DenseFlow> {
        DenseFlow::from_fn(h, w, |y, x| {
            let p = pixel_center(y, x, h, w);
            let q = self.apply(p);
            let clip = |v: f64| (v as f32).clamp(-MAX_FLOW_COMPONENT, MAX_FLOW_COMPONENT);
            (clip(q.0 - p.0), clip(q.1 - p.1))
        })
    }
}

/// Joint positions in the canonical garment frame.
pub fn canonical_pose() -> Vec<(JointName, Point)> {
    use JointName::*;
    vec![
        (Head, (0.50, 0.11)),
        (Neck, (0.50, 0.25)),
        (LeftShoulder, (0.32, 0.30)),
        (RightShoulder, (0.68, 0.30)),
        (LeftElbow, (0.23, 0.52)),
        (RightElbow, (0.77, 0.52)),
        (LeftWrist, (0.17, 0.74)),
        (RightWrist, (0.83, 0.74)),
        (LeftHip, (0.38, 0.86)),
        (RightHip, (0.62, 0.86)),
    ]
}

/// Limb sticks of the skeleton rendering, each with a fixed colour.
pub const LIMBS: [(JointName, JointName, Rgb); 9] = {
    use JointName::*;
    [
        (Head, Neck, [1.0, 0.0, 0.0]),
        (Neck, LeftShoulder, [1.0, 0.5, 0.0]),
        (Neck, RightShoulder, [1.0, 1.0, 0.0]),
        (LeftShoulder, LeftElbow, [0.5, 1.0, 0.0]),
        (LeftElbow, LeftWrist, [0.0, 1.0, 0.0]),
        (RightShoulder, RightElbow, [0.0, 1.0, 0.5]),
        (RightElbow, RightWrist, [0.0, 1.0, 1.0]),
        (Neck, LeftHip, [0.0, 0.5, 1.0]),
        (Neck, RightHip, [0.0, 0.0, 1.0]),
    ]
};

fn joint_color(name: JointName) -> Rgb {
    const PALETTE: [Rgb; 10] = [
        [1.0, 0.0, 0.0],
        [1.0, 0.33, 0.0],
        [1.0, 0.67, 0.0],
        [1.0, 1.0, 0.0],
        [0.67, 1.0, 0.0],
        [0.33, 1.0, 0.0],
        [0.0, 1.0, 0.33],
        [0.0, 1.0, 0.67],
        [0.0, 0.67, 1.0],
        [0.33, 0.0, 1.0],
    ];
    PALETTE[name.index()]
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Alpha-blends an anti-aliased capsule (pixel units) onto a `[3, h, w]` buffer.
fn draw_capsule(buf: &mut [f32], h: usize, w: usize, a: Point, b: Point, radius: f64, color: Rgb) {
    let x_lo = (a.0.min(b.0) - radius - 1.0).floor().max(0.0) as usize;
    let x_hi = ((a.0.max(b.0) + radius + 1.0).ceil().max(0.0) as usize).min(w);
    let y_lo = (a.1.min(b.1) - radius - 1.0).floor().max(0.0) as usize;
    let y_hi = ((a.1.max(b.1) + radius + 1.0).ceil().max(0.0) as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let d = segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
            let alpha = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
            if alpha > 0.0 {
                for (c, col) in color.iter().enumerate() {
                    let v = &mut buf[(c * h + y) * w + x];
                    *v = *v * (1.0 - alpha) + col * alpha;
                }
            }
        }
    }
}

/// OpenPose-style rendering: a coloured stick per limb whose endpoints are
/// both visible, then a coloured disc per visible joint. Black background.
pub fn render_skeleton(pose: &PoseKeypoints, size: (usize, usize)) -> Result<SkeletonMap> {
    let (h, w) = size;
    let mut buf = vec![0f32; 3 * h * w];
    let stick = (0.025 * h.min(w) as f64).max(0.75);
    let to_px = |j: &Joint| (j.x as f64 * w as f64, j.y as f64 * h as f64);
    for (a, b, color) in LIMBS {
        if let (Some(ja), Some(jb)) = (pose.get(a), pose.get(b)) {
            if ja.visible && jb.visible {
                draw_capsule(&mut buf, h, w, to_px(ja), to_px(jb), stick, color);
            }
        }
    }
    for j in pose.joints().iter().filter(|j| j.visible) {
        let p = to_px(j);
        draw_capsule(&mut buf, h, w, p, p, stick * 1.6, joint_color(j.name));
    }
    let arr = Array3::new(buf.into_iter().map(quantize).collect(), 3, h, w)?;
    SkeletonMap::new(ImageTensor::new(arr, ValueRange::Unit)?)
}

/// Everything needed to render one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub garment: GarmentSpec,
    pub warp: WarpSpec,
    pub skin: Rgb,
    pub background: Rgb,
}

impl SampleSpec {
    pub fn random(rng: &mut impl Rng) -> Self {
        const SKINS: [Rgb; 5] = [
            [0.96, 0.80, 0.69],
            [0.87, 0.67, 0.52],
            [0.71, 0.51, 0.37],
            [0.55, 0.37, 0.25],
            [0.36, 0.23, 0.15],
        ];
        let garment = GarmentSpec::random(rng);
        let warp = WarpSpec::random(rng);
        let skin = SKINS[rng.random_range(0..SKINS.len())].map(quantize);
        let g = rng.random_range(0.72..0.92);
        let background = [g, g + rng.random_range(-0.05..0.05), g + rng.random_range(-0.05..0.05)].map(|v: f64| quantize(v as f32));
        Self {
            garment,
            warp,
            skin,
            background,
        }
    }
}

/// Inserts points so no edge of `poly` is longer than `max_len`.
fn densify(poly: &[Point], max_len: f64) -> Vec<Point> {
    let mut out = Vec::new();
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let k = (len / max_len).ceil().max(1.0) as usize;
        for s in 0..k {
            let t = s as f64 / k as f64;
            out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
        }
    }
    out
}

/// Renders one paired sample from an explicit spec.
///
/// The target garment region is `warp(garment, F)` where `F` is `flow_gt`
/// resized to image resolution, restricted to pixels covered by the warped
/// garment and by the agnostic mask. The person image is the target.
pub fn render_sample(sample_id: &str, spec: &SampleSpec, config: &ModelConfig) -> Result<TryOnSample> {
    let (h, w) = config.image_size;
    if h < MIN_GENERATOR_SIZE.0 || w < MIN_GENERATOR_SIZE.1 {
        return Err(FiaError::Config(format!(
            "image size {h}x{w} is below the generator minimum {}x{}",
            MIN_GENERATOR_SIZE.0, MIN_GENERATOR_SIZE.1
        )));
    }
    let map = spec.warp.map()?;
    let (lh, lw) = config.latent_size();
    let flow_gt = map.flow(lh, lw)?;
    let flow_img = resize_flow(&flow_gt, h, w)?;

    let (garment, alpha) = spec.garment.render(h, w)?;
    let warped = warp(garment.array(), &flow_img)?;
    let warped_alpha = warp(&alpha, &flow_img)?;

    let outline: Vec<Point> = densify(&spec.garment.silhouette.polygon(), 0.02)
        .into_iter()
        .map(|v| {
            let p = map.invert(v);
            (p.0.clamp(0.0, 1.0), p.1.clamp(0.0, 1.0))
        })
        .collect();
    let mask = derive_agnostic_mask(&outline, (h, w))?;

    let joints: Vec<Joint> = canonical_pose()
        .into_iter()
        .map(|(name, q)| {
            let p = map.invert(q);
            let inside = (0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1);
            Joint {
                name,
                x: p.0.clamp(0.0, 1.0) as f32,
                y: p.1.clamp(0.0, 1.0) as f32,
                visible: inside,
            }
        })
        .collect();
    let pose = PoseKeypoints::new(joints)?;
    let skeleton = render_skeleton(&pose, (h, w))?;

    // body: background, then torso, arms, neck and head in skin tone
    let mut body = vec![0f32; 3 * h * w];
    for c in 0..3 {
        body[c * h * w..(c + 1) * h * w].fill(spec.background[c]);
    }
    let px = |n: JointName| {
        let j = pose.get(n).expect("full pose");
        (j.x as f64 * w as f64, j.y as f64 * h as f64)
    };
    use JointName::*;
    let limb_r = 0.045 * w as f64;
    let torso = [px(LeftShoulder), px(RightShoulder), px(RightHip), px(LeftHip)];
    let torso_n: Vec<Point> = torso.iter().map(|p| (p.0 / w as f64, p.1 / h as f64)).collect();
    for (i, inside) in rasterize_polygon(&torso_n, h, w).into_iter().enumerate() {
        if inside {
            for c in 0..3 {
                body[c * h * w + i] = spec.skin[c];
            }
        }
    }
    for (a, b) in [
        (LeftShoulder, LeftElbow),
        (LeftElbow, LeftWrist),
        (RightShoulder, RightElbow),
        (RightElbow, RightWrist),
        (LeftShoulder, RightShoulder),
        (LeftHip, RightHip),
        (Neck, Head),
    ] {
        draw_capsule(&mut body, h, w, px(a), px(b), limb_r, spec.skin);
    }
    let head = px(Head);
    draw_capsule(&mut body, h, w, head, head, 0.09 * w as f64, spec.skin);

    let mut region = vec![false; h * w];
    for (i, r) in region.iter_mut().enumerate() {
        *r = warped_alpha.data()[i] >= 0.5 && mask.data()[i] == 1.0;
    }
    let target = Array3::from_fn(3, h, w, |c, y, x| {
        if region[y * w + x] {
            quantize(warped.get(c, y, x))
        } else {
            quantize(body[(c * h + y) * w + x])
        }
    });
    let target = ImageTensor::new(target, ValueRange::Unit)?;
    Ok(TryOnSample {
        sample_id: sample_id.to_string(),
        person: target.clone(),
        garment,
        mask,
        skeleton,
        flow_gt: Some(flow_gt),
        target: Some(target),
    })
}

/// Pixels of the target that carry warped garment content: inside the mask
/// and covered by the warped garment silhouette.
pub fn garment_region(sample: &TryOnSample) -> Result<Vec<bool>> {
    let (h, w) = (sample.person.height(), sample.person.width());
    let flow = sample
        .flow_gt
        .as_ref()
        .ok_or_else(|| FiaError::InvalidInput("garment region needs flow_gt".into()))?;
    let flow = resize_flow(flow, h, w)?;
    // the garment background is pure white, so coverage is recovered from it
    let g = sample.garment.to_unit();
    let cover = Array3::from_fn(1, h, w, |_, y, x| {
        let white = (0..3).all(|c| g.array().get(c, y, x) == 1.0);
        if white {
            0.0
        } else {
            1.0
        }
    });
    let warped = warp(&cover, &flow)?;
    Ok((0..h * w)
        .map(|i| warped.data()[i] >= 0.5 && sample.mask.data()[i] == 1.0)
        .collect())
}

/// Per-sample seed, a SplitMix64 finalizer over `(seed, index)` so that
/// datasets drawn with different seeds do not share samples.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

pub fn generate_spec(index: usize, seed: u64) -> SampleSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    SampleSpec::random(&mut rng)
}

pub fn generate_sample(index: usize, config: &ModelConfig, seed: u64) -> Result<TryOnSample> {
    render_sample(&sample_id(index), &generate_spec(index, seed), config)
}

/// `n` paired samples, generated in parallel; output is independent of the
/// worker count.
pub fn generate_dataset(n: usize, config: &ModelConfig, seed: u64) -> Result<Vec<TryOnSample>> {
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    let (h, w) = config.image_size;
    if h < MIN_GENERATOR_SIZE.0 || w < MIN_GENERATOR_SIZE.1 {
        return Err(FiaError::Config(format!(
            "image size {h}x{w} is below the generator minimum {}x{}",
            MIN_GENERATOR_SIZE.0, MIN_GENERATOR_SIZE.1
        )));
    }
    par_map(n, |i| generate_sample(i, config, seed)).into_iter().collect()
}

/// Garment of `garment` on the person of `person`, without a target. Every
/// garment lives in the same canonical frame, so the person's flow and mask
/// apply.
pub fn swap_garment(garment: &TryOnSample, person: &TryOnSample) -> TryOnSample {
    TryOnSample {
        sample_id: format!("{}_on_{}", garment.sample_id, person.sample_id),
        person: person.person.clone(),
        garment: garment.garment.clone(),
        mask: person.mask.clone(),
        skeleton: person.skeleton.clone(),
        flow_gt: person.flow_gt.clone(),
        target: None,
    }
}

/// Unpaired samples: garment `i` on person `(i + shift) mod n`.
pub fn make_unpaired(samples: &[TryOnSample], shift: usize) -> Result<Vec<TryOnSample>> {
    let n = samples.len();
    if n < 2 || shift % n == 0 {
        return invalid("unpaired construction needs at least two samples and a nonzero shift");
    }
    Ok((0..n).map(|i| swap_garment(&samples[i], &samples[(i + shift) % n])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::validate_sample;

    fn desk() -> ModelConfig {
        ModelConfig::desk()
    }

    #[test]
    fn generated_samples_validate() {
        let cfg = desk();
        let ds = generate_dataset(4, &cfg, 7).unwrap();
        assert_eq!(ds.len(), 4);
        for s in &ds {
            assert_eq!(validate_sample(s, &cfg), Vec::<String>::new());
        }
    }

    #[test]
    fn identity_warp_gives_zero_flow_and_pasted_crop() {
        let cfg = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut spec = SampleSpec::random(&mut rng);
        spec.warp = WarpSpec::identity();
        let s = render_sample("id", &spec, &cfg).unwrap();
        assert!(s.flow_gt.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        let region = garment_region(&s).unwrap();
        let (h, w) = cfg.image_size;
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                if region[y * w + x] {
                    n += 1;
                    for c in 0..3 {
                        assert_eq!(s.target.as_ref().unwrap().array().get(c, y, x), s.garment.array().get(c, y, x));
                    }
                }
            }
        }
        assert!(n > 100);
    }

    #[test]
    fn generation_is_deterministic_and_worker_independent() {
        let cfg = desk();
        let a = generate_dataset(3, &cfg, 11).unwrap();
        let b: Vec<_> = (0..3).map(|i| generate_sample(i, &cfg, 11).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_is_rejected() {
        let mut cfg = desk();
        cfg.image_size = (16, 12);
        assert!(generate_dataset(1, &cfg, 0).is_err());
    }

    #[test]
    fn warp_inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = WarpSpec::random(&mut rng).map().unwrap();
        for &(x, y) in &[(0.3, 0.4), (0.5, 0.5), (0.7, 0.85)] {
            let p = m.invert((x, y));
            let q = m.apply(p);
            assert!((q.0 - x).abs() < 1e-9 && (q.1 - y).abs() < 1e-9);
        }
    }

    #[test]
    fn tps_interpolates_control_displacements() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = WarpSpec::random(&mut rng);
        let m = spec.map().unwrap();
        let id = WarpSpec {
            tps_displacements: vec![[0.0; 2]; 16],
            ..spec.clone()
        }
        .map()
        .unwrap();
        for k in 0..16 {
            let c = control_point(k);
            let (a, b) = (m.apply(c), id.apply(c));
            assert!((a.0 - b.0 - spec.tps_displacements[k][0]).abs() < 1e-9);
            assert!((a.1 - b.1 - spec.tps_displacements[k][1]).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_spec_rejects_bad_determinant_and_cap() {
        let mut s = WarpSpec::identity();
        s.affine[0][0] = 0.3;
        assert!(s.validate().is_err());
        let mut s = WarpSpec::identity();
        s.tps_displacements[0] = [0.1, 0.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn skeleton_all_invisible_is_black() {
        let joints = canonical_pose()
            .into_iter()
            .map(|(name, (x, y))| Joint {
                name,
                x: x as f32,
                y: y as f32,
                visible: false,
            })
            .collect();
        let sk = render_skeleton(&PoseKeypoints::new(joints).unwrap(), (64, 48)).unwrap();
        assert!(sk.image().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_edge_cases() {
        assert!(derive_agnostic_mask(&[], (64, 48)).is_err());
        let full = derive_agnostic_mask(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)], (64, 48)).unwrap();
        assert!(full.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn silhouettes_are_simple() {
        assert!(polygon_is_simple(&Silhouette::Tshirt.polygon()));
        assert!(polygon_is_simple(&Silhouette::LongSleeve.polygon()));
        assert!(!polygon_is_simple(&[(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]));
    }

    #[test]
    fn unpaired_has_no_target() {
        let cfg = desk();
        let ds = generate_dataset(3, &cfg, 1).unwrap();
        let u = make_unpaired(&ds, 1).unwrap();
        assert!(u.iter().all(|s| s.target.is_none()));
        assert_eq!(u[0].garment, ds[0].garment);
        assert_eq!(u[0].person, ds[1].person);
        for s in &u {
            assert!(validate_sample(s, &cfg).is_empty());
        }
    }
}
