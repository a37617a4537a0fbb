//! Procedural piecewise-planar indoor scenes with exact depth and instance
//! labels, plus controlled corruption of instance boundaries.
//!
//! Camera frame: x right, y down, z forward. Pixel `(row, col)` looks along
//! the ray `((col - cx) / fx, (row - cy) / fy, 1)`; depth is the z of the hit.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::raster;

pub type Label = u16;
pub type Vec3 = [f64; 3];

/// Polygons are clipped to this near plane before rendering.
pub const NEAR_Z: f64 = 0.05;
/// Minimum fraction of the image an instance must cover to count as visible.
pub const MIN_COVERAGE: f64 = 0.005;
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Centred principal point and a horizontal field of view of about 70°.
    pub fn default_for(height: usize, width: usize) -> Self {
        let f = width as f64 * 0.72;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(config_err!("focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(config_err!("principal point outside the image"));
        }
        Ok(())
    }

    pub fn ray(&self, row: usize, col: usize) -> Vec3 {
        [
            (col as f64 - self.cx) / self.fx,
            (row as f64 - self.cy) / self.fy,
            1.0,
        ]
    }

    /// Downscaled intrinsics for a `factor`-times smaller image.
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        CameraIntrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// A bounded planar patch `normal · X = offset` in the camera frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanePrimitive {
    pub normal: Vec3,
    pub offset: f64,
    pub polygon: Vec<Vec3>,
    pub albedo: [f64; 3],
}

impl PlanePrimitive {
    /// Builds a plane through `polygon`, with the normal facing the camera.
    pub fn from_polygon(polygon: Vec<Vec3>, albedo: [f64; 3]) -> Result<Self> {
        if polygon.len() < 3 {
            return Err(Error::Precondition("polygon needs at least 3 vertices".into()));
        }
        // Newell's method is robust for any planar polygon.
        let mut n = [0.0; 3];
        for i in 0..polygon.len() {
            let a = polygon[i];
            let b = polygon[(i + 1) % polygon.len()];
            n[0] += (a[1] - b[1]) * (a[2] + b[2]);
            n[1] += (a[2] - b[2]) * (a[0] + b[0]);
            n[2] += (a[0] - b[0]) * (a[1] + b[1]);
        }
        let len = norm(n);
        if len < 1e-12 {
            return Err(Error::Precondition("degenerate polygon".into()));
        }
        let mut normal = scale(n, 1.0 / len);
        let centroid = scale(
            polygon.iter().fold([0.0; 3], |acc, p| add(acc, *p)),
            1.0 / polygon.len() as f64,
        );
        let mut offset = dot(normal, centroid);
        if offset > 0.0 {
            normal = scale(normal, -1.0);
            offset = -offset;
        }
        Ok(PlanePrimitive {
            normal,
            offset,
            polygon,
            albedo,
        })
    }

    /// Depth (z) of the ray hit inside the polygon, if any.
    pub fn intersect(&self, ray: Vec3) -> Option<f64> {
        let denom = dot(self.normal, ray);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.offset / denom;
        if t <= 0.0 {
            return None;
        }
        let hit = scale(ray, t);
        self.contains(hit).then_some(t * ray[2])
    }

    /// Crossing-number point-in-polygon test after projecting onto the
    /// plane's dominant axis pair.
    fn contains(&self, p: Vec3) -> bool {
        let n = self.normal;
        let drop = if n[0].abs() >= n[1].abs() && n[0].abs() >= n[2].abs() {
            0
        } else if n[1].abs() >= n[2].abs() {
            1
        } else {
            2
        };
        let (a, b) = match drop {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (px, py) = (p[a], p[b]);
        let mut inside = false;
        let poly = &self.polygon;
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let (xi, yi) = (poly[i][a], poly[i][b]);
            let (xj, yj) = (poly[j][a], poly[j][b]);
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Clips the polygon to `z >= near` (Sutherland–Hodgman). Returns `None`
    /// when nothing remains in front of the camera.
    pub fn clipped_to_near(&self, near: f64) -> Option<PlanePrimitive> {
        let poly = &self.polygon;
        let mut out = Vec::with_capacity(poly.len() + 2);
        for i in 0..poly.len() {
            let cur = poly[i];
            let prev = poly[(i + poly.len() - 1) % poly.len()];
            let (cin, pin) = (cur[2] >= near, prev[2] >= near);
            if cin != pin {
                let t = (near - prev[2]) / (cur[2] - prev[2]);
                out.push(add(prev, scale(sub(cur, prev), t)));
            }
            if cin {
                out.push(cur);
            }
        }
        (out.len() >= 3).then(|| PlanePrimitive {
            polygon: out,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanarScene {
    /// `(row, col, 3)`, values in `[0, 1]`.
    pub rgb: Array3<f64>,
    /// Metres; 0 marks invalid pixels.
    pub depth: Array2<f64>,
    /// 0 is background, `k >= 1` indexes `planes[k - 1]`.
    pub labels: Array2<Label>,
    pub intrinsics: CameraIntrinsics,
    pub planes: Vec<PlanePrimitive>,
    pub seed: u64,
}

impl PlanarScene {
    pub fn instance_ids(&self) -> Vec<Label> {
        instance_ids(&self.labels)
    }
}

/// Sorted set of non-zero ids in a label map.
pub fn instance_ids(labels: &Array2<Label>) -> Vec<Label> {
    let mut seen = std::collections::BTreeSet::new();
    for &l in labels.iter() {
        if l > 0 {
            seen.insert(l);
        }
    }
    seen.into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Visible plane instances per scene.
    pub num_planes: Range<usize>,
    /// Depth of the back wall in metres.
    pub depth: Range<f64>,
    pub height: usize,
    pub width: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_planes: Range { min: 3, max: 8 },
            depth: Range { min: 3.0, max: 6.0 },
            height: 192,
            width: 256,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_planes.min == 0 || self.num_planes.min > self.num_planes.max {
            return Err(config_err!(
                "num_planes range {}..={} is empty or zero",
                self.num_planes.min,
                self.num_planes.max
            ));
        }
        if !(self.depth.min > 0.0 && self.depth.min <= self.depth.max) {
            return Err(config_err!(
                "depth range {}..={} must be positive and non-empty",
                self.depth.min,
                self.depth.max
            ));
        }
        if self.height < 32 || self.width < 32 {
            return Err(config_err!(
                "image must be at least 32x32, got {}x{}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::default_for(self.height, self.width)
    }
}

/// Ray-casts every pixel centre against all polygons; nearest hit wins.
/// Labels are 1-based plane indices, 0 where nothing is hit.
pub fn render_depth(
    planes: &[PlanePrimitive],
    intrinsics: &CameraIntrinsics,
) -> Result<(Array2<f64>, Array2<Label>)> {
    intrinsics.validate()?;
    for (i, p) in planes.iter().enumerate() {
        if p.polygon.len() < 3 {
            return Err(Error::Precondition(format!("plane {i} has fewer than 3 vertices")));
        }
        if p.polygon.iter().any(|v| v[2] <= NEAR_Z) {
            return Err(Error::Precondition(format!(
                "plane {i} has a vertex at or behind z = {NEAR_Z}"
            )));
        }
    }
    if planes.len() > Label::MAX as usize {
        return Err(config_err!("too many planes: {}", planes.len()));
    }
    let (h, w) = (intrinsics.height, intrinsics.width);
    let mut depth = Array2::zeros((h, w));
    let mut labels = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let ray = intrinsics.ray(r, c);
            let mut best: Option<(f64, usize)> = None;
            for (i, p) in planes.iter().enumerate() {
                if let Some(z) = p.intersect(ray) {
                    if best.is_none_or(|(bz, _)| z < bz) {
                        best = Some((z, i));
                    }
                }
            }
            if let Some((z, i)) = best {
                depth[[r, c]] = z;
                labels[[r, c]] = (i + 1) as Label;
            }
        }
    }
    Ok((depth, labels))
}

/// Lambertian shading: fixed directional light plus per-plane albedo.
pub fn shade(
    planes: &[PlanePrimitive],
    labels: &Array2<Label>,
    background: [f64; 3],
) -> Array3<f64> {
    let light = normalize([0.3, -0.8, -0.5]);
    let (h, w) = labels.dim();
    let mut rgb = Array3::zeros((h, w, 3));
    for ((r, c), &l) in labels.indexed_iter() {
        let color = if l == 0 {
            background
        } else {
            let p = &planes[l as usize - 1];
            let lambert = dot(p.normal, scale(light, -1.0)).abs();
            let s = 0.35 + 0.65 * lambert;
            [p.albedo[0] * s, p.albedo[1] * s, p.albedo[2] * s]
        };
        for k in 0..3 {
            rgb[[r, c, k]] = color[k].clamp(0.0, 1.0);
        }
    }
    rgb
}

/// Deterministic function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<PlanarScene> {
    config.validate()?;
    let intrinsics = config.intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (config.height * config.width) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let candidates: Vec<PlanePrimitive> = room_layout(&mut rng, config)
            .into_iter()
            .filter_map(|p| p.clipped_to_near(NEAR_Z * 1.2))
            .collect();
        let (depth, raw_labels) = render_depth(&candidates, &intrinsics)?;
        let mut counts = vec![0usize; candidates.len() + 1];
        for &l in raw_labels.iter() {
            counts[l as usize] += 1;
        }
        // Keep instances above the coverage floor; tiny slivers become
        // background (label 0, depth still valid).
        let mut remap = vec![0 as Label; candidates.len() + 1];
        let mut planes = Vec::new();
        for (i, p) in candidates.iter().enumerate() {
            if counts[i + 1] as f64 >= MIN_COVERAGE * total {
                planes.push(p.clone());
                remap[i + 1] = planes.len() as Label;
            }
        }
        if !(config.num_planes.min..=config.num_planes.max).contains(&planes.len()) {
            continue;
        }
        let labels = raw_labels.mapv(|l| remap[l as usize]);
        let rgb = shade(&planes, &labels, [0.55, 0.55, 0.6]);
        return Ok(PlanarScene {
            rgb,
            depth,
            labels,
            intrinsics,
            planes,
            seed,
        });
    }
    Err(Error::Generation(format!(
        "no arrangement with {}..={} visible planes after {MAX_ATTEMPTS} attempts (seed {seed})",
        config.num_planes.min, config.num_planes.max
    )))
}

/// A room (floor + walls) and up to two boxes, expressed in the camera frame.
fn room_layout(rng: &mut ChaCha8Rng, config: &SceneConfig) -> Vec<PlanePrimitive> {
    let cam_height = rng.random_range(1.2..1.7);
    let pitch: f64 = rng.random_range(0.12..0.4); // looking down, radians
    let yaw: f64 = rng.random_range(-0.35..0.35);
    let back = rng.random_range(config.depth.min..=config.depth.max);
    let left = -rng.random_range(1.2..2.8);
    let right = rng.random_range(1.2..2.8);
    let front = -rng.random_range(0.5..2.0);
    let top = rng.random_range(2.6..3.2);

    // World: x right, y up, z forward; camera at (0, cam_height, 0).
    let to_cam = |p: Vec3| -> Vec3 {
        let rel = [p[0], p[1] - cam_height, p[2]];
        let (sy, cy) = yaw.sin_cos();
        let yawed = [cy * rel[0] - sy * rel[2], rel[1], sy * rel[0] + cy * rel[2]];
        let (sp, cp) = pitch.sin_cos();
        // Pitch down, then flip y so that it points down in the image.
        let y = cp * yawed[1] + sp * yawed[2];
        let z = -sp * yawed[1] + cp * yawed[2];
        [yawed[0], -y, z]
    };
    let quad = |pts: [Vec3; 4], albedo: [f64; 3]| {
        PlanePrimitive::from_polygon(pts.iter().map(|&p| to_cam(p)).collect(), albedo)
            .expect("axis-aligned quads are non-degenerate")
    };

    let mut planes = vec![
        quad(
            [[left, 0.0, front], [right, 0.0, front], [right, 0.0, back], [left, 0.0, back]],
            random_albedo(rng),
        ),
        quad(
            [[left, 0.0, back], [right, 0.0, back], [right, top, back], [left, top, back]],
            random_albedo(rng),
        ),
        quad(
            [[left, 0.0, front], [left, 0.0, back], [left, top, back], [left, top, front]],
            random_albedo(rng),
        ),
        quad(
            [[right, 0.0, front], [right, 0.0, back], [right, top, back], [right, top, front]],
            random_albedo(rng),
        ),
    ];
    let n_boxes = rng.random_range(0..=2);
    for _ in 0..n_boxes {
        let bw = rng.random_range(0.4..1.2);
        let bd = rng.random_range(0.4..1.0);
        let bh = rng.random_range(0.3..0.9);
        let x0 = rng.random_range(left + 0.1..(right - bw - 0.1).max(left + 0.2));
        let z0 = rng.random_range(1.5..(back - bd - 0.2).max(1.6));
        let (x1, z1) = (x0 + bw, z0 + bd);
        let c = random_albedo(rng);
        let c2 = [c[0] * 0.8, c[1] * 0.8, c[2] * 0.8];
        // Top face and the face towards the camera.
        planes.push(quad(
            [[x0, bh, z0], [x1, bh, z0], [x1, bh, z1], [x0, bh, z1]],
            c,
        ));
        planes.push(quad(
            [[x0, 0.0, z0], [x1, 0.0, z0], [x1, bh, z0], [x0, bh, z0]],
            c2,
        ));
    }
    planes
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.15..0.95),
        rng.random_range(0.15..0.95),
        rng.random_range(0.15..0.95),
    ]
}

/// Moves instance boundaries by a smooth random displacement field of
/// per-pixel magnitude at most `radius`: each output pixel takes the label at
/// its displaced position. Instance ids that would vanish are restored.
pub fn corrupt_boundaries(labels: &Array2<Label>, radius: usize, seed: u64) -> Result<Array2<Label>> {
    let (h, w) = labels.dim();
    if 2 * radius > h.min(w) {
        return Err(config_err!(
            "corruption radius {radius} exceeds half the smaller image side ({h}x{w})"
        ));
    }
    if radius == 0 {
        return Ok(labels.clone());
    }
    let field = displacement_field(h, w, radius as f64, seed);
    let mut out = Array2::from_shape_fn((h, w), |(r, c)| {
        let (dr, dc) = field[[r, c]];
        let rr = (r as f64 + dr).round().clamp(0.0, (h - 1) as f64) as usize;
        let cc = (c as f64 + dc).round().clamp(0.0, (w - 1) as f64) as usize;
        labels[[rr, cc]]
    });
    let want = instance_ids(labels);
    for _ in 0..want.len() + 1 {
        let have = instance_ids(&out);
        let missing: Vec<Label> = want.iter().copied().filter(|id| !have.contains(id)).collect();
        if missing.is_empty() {
            break;
        }
        for (o, &l) in out.iter_mut().zip(labels.iter()) {
            if missing.contains(&l) {
                *o = l;
            }
        }
    }
    Ok(out)
}

/// Bilinear interpolation of random vectors drawn uniformly from the disc of
/// radius `radius` on a coarse lattice. Convex combinations stay in the disc,
/// so every interpolated vector has length <= `radius`.
fn displacement_field(h: usize, w: usize, radius: f64, seed: u64) -> Array2<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_b0a7_d15c);
    let spacing = ((h.min(w) as f64) / 4.0).max(8.0);
    let gh = (h as f64 / spacing).ceil() as usize + 2;
    let gw = (w as f64 / spacing).ceil() as usize + 2;
    let lattice = Array2::from_shape_simple_fn((gh, gw), || loop {
        let x: f64 = rng.random_range(-1.0..=1.0);
        let y: f64 = rng.random_range(-1.0..=1.0);
        if x * x + y * y <= 1.0 {
            break (y * radius, x * radius);
        }
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        let fy = r as f64 / spacing;
        let fx = c as f64 / spacing;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let mut acc = (0.0, 0.0);
        for (yy, wy) in [(y0, 1.0 - ty), (y0 + 1, ty)] {
            for (xx, wx) in [(x0, 1.0 - tx), (x0 + 1, tx)] {
                let v = lattice[[yy, xx]];
                acc.0 += wy * wx * v.0;
                acc.1 += wy * wx * v.1;
            }
        }
        acc
    })
}

/// Labels and depth brought down to mask resolution.
pub fn to_mask_resolution(
    labels: &Array2<Label>,
    depth: &Array2<f64>,
    factor: usize,
) -> Result<(Array2<Label>, Array2<f64>)> {
    Ok((
        raster::downsample_labels(labels, factor)?,
        raster::pool_depth(depth, factor)?,
    ))
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}
fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}
fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fronto(z: f64, half: f64, albedo: [f64; 3]) -> PlanePrimitive {
        PlanePrimitive::from_polygon(
            vec![[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]],
            albedo,
        )
        .unwrap()
    }

    #[test]
    fn single_fronto_plane_fills_frame() {
        let k = CameraIntrinsics::default_for(32, 40);
        let p = fronto(2.0, 100.0, [0.5; 3]);
        assert!((p.normal[2] + 1.0).abs() < 1e-12 && (p.offset + 2.0).abs() < 1e-12);
        let (d, l) = render_depth(&[p], &k).unwrap();
        assert!(d.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(l.iter().all(|&v| v == 1));
    }

    #[test]
    fn empty_plane_list_renders_nothing() {
        let k = CameraIntrinsics::default_for(32, 32);
        let (d, l) = render_depth(&[], &k).unwrap();
        assert!(d.iter().all(|&v| v == 0.0) && l.iter().all(|&v| v == 0));
    }

    #[test]
    fn occluder_wins_over_backdrop() {
        let k = CameraIntrinsics::default_for(32, 32);
        let back = fronto(3.0, 100.0, [0.2; 3]);
        let near = fronto(1.0, 0.2, [0.8; 3]);
        let (d, l) = render_depth(&[back, near], &k).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                // Brute-force oracle: the near patch covers |x|, |y| <= 0.2 at z = 1.
                let ray = k.ray(r, c);
                let inside = ray[0].abs() < 0.2 && ray[1].abs() < 0.2;
                if inside {
                    assert_eq!((d[[r, c]], l[[r, c]]), (1.0, 2));
                } else if ray[0].abs() > 0.2 || ray[1].abs() > 0.2 {
                    assert_eq!((d[[r, c]], l[[r, c]]), (3.0, 1));
                }
            }
        }
    }

    #[test]
    fn tilted_plane_matches_symbolic_intersection() {
        let k = CameraIntrinsics::default_for(32, 64);
        // z = 2 + a x  <=>  -a x + z = 2, with z increasing 0.01 per column near cx.
        let a = 0.01 * k.fx / 2.0;
        let normal = normalize([-a, 0.0, 1.0]);
        let off = 2.0 / norm([-a, 0.0, 1.0]);
        let poly: Vec<Vec3> = [[-3.0, -5.0], [3.0, -5.0], [3.0, 5.0], [-3.0, 5.0]]
            .iter()
            .map(|&[x, y]| [x, y, 2.0 + a * x])
            .collect();
        let plane = PlanePrimitive {
            normal: scale(normal, -1.0),
            offset: -off,
            polygon: poly,
            albedo: [0.5; 3],
        };
        let (d, _) = render_depth(&[plane], &k).unwrap();
        let row = 16;
        for c in 0..64 {
            let u = (c as f64 - k.cx) / k.fx;
            let want = 2.0 / (1.0 - a * u);
            assert!((d[[row, c]] - want).abs() < 1e-9, "col {c}");
        }
        let mid = CameraIntrinsics { cx: 31.0, ..k };
        let (d, _) = render_depth(
            &[PlanePrimitive {
                normal: scale(normal, -1.0),
                offset: -off,
                polygon: [[-3.0, -5.0], [3.0, -5.0], [3.0, 5.0], [-3.0, 5.0]]
                    .iter()
                    .map(|&[x, y]| [x, y, 2.0 + a * x])
                    .collect(),
                albedo: [0.5; 3],
            }],
            &mid,
        )
        .unwrap();
        assert_eq!(d[[row, 31]], 2.0);
    }

    #[test]
    fn plane_behind_camera_is_precondition_error() {
        let k = CameraIntrinsics::default_for(32, 32);
        let p = fronto(-1.0, 1.0, [0.5; 3]);
        assert!(matches!(render_depth(&[p], &k), Err(Error::Precondition(_))));
    }

    #[test]
    fn ray_parallel_to_plane_is_a_miss() {
        let floor = PlanePrimitive::from_polygon(
            vec![[-1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 5.0], [-1.0, 1.0, 5.0]],
            [0.5; 3],
        )
        .unwrap();
        assert_eq!(floor.intersect([0.0, 0.0, 1.0]), None);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = SceneConfig {
            height: 48,
            width: 64,
            ..Default::default()
        };
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a, b);
        let n = a.instance_ids().len();
        assert!((cfg.num_planes.min..=cfg.num_planes.max).contains(&n));
        assert_eq!(a.instance_ids(), (1..=a.planes.len() as Label).collect::<Vec<_>>());
        for ((r, c), &l) in a.labels.indexed_iter() {
            if l > 0 {
                let z = a.planes[l as usize - 1].intersect(a.intrinsics.ray(r, c)).unwrap();
                assert!((a.depth[[r, c]] - z).abs() < 1e-6);
            }
            assert!(a.rgb.slice(ndarray::s![r, c, ..]).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for p in &a.planes {
            assert!((norm(p.normal) - 1.0).abs() < 1e-9);
            for v in &p.polygon {
                assert!((dot(p.normal, *v) - p.offset).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let zero = SceneConfig {
            num_planes: Range { min: 0, max: 0 },
            ..Default::default()
        };
        assert!(matches!(generate_scene(1, &zero), Err(Error::Config(_))));
        let neg = SceneConfig {
            depth: Range { min: -1.0, max: 2.0 },
            ..Default::default()
        };
        assert!(matches!(generate_scene(1, &neg), Err(Error::Config(_))));
        let small = SceneConfig {
            height: 16,
            ..Default::default()
        };
        assert!(matches!(generate_scene(1, &small), Err(Error::Config(_))));
    }

    #[test]
    fn impossible_plane_count_is_generation_error() {
        let cfg = SceneConfig {
            num_planes: Range { min: 40, max: 50 },
            height: 32,
            width: 32,
            ..Default::default()
        };
        assert!(matches!(generate_scene(3, &cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn corruption_radius_zero_is_identity() {
        let l = Array2::from_shape_fn((32, 32), |(_, c)| if c < 16 { 1 } else { 0 });
        assert_eq!(corrupt_boundaries(&l, 0, 9).unwrap(), l);
    }

    #[test]
    fn corruption_stays_near_dividing_line() {
        let l = Array2::from_shape_fn((40, 40), |(_, c)| if c < 20 { 1 } else { 0 });
        let out = corrupt_boundaries(&l, 4, 11).unwrap();
        assert_ne!(out, l);
        for ((r, c), &a) in out.indexed_iter() {
            if a != l[[r, c]] {
                assert!((16..24).contains(&c), "changed pixel at column {c}");
            }
        }
    }

    #[test]
    fn corruption_radius_too_large() {
        let l = Array2::zeros((20, 30));
        assert!(matches!(corrupt_boundaries(&l, 11, 0), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn corruption_is_local_and_keeps_ids(seed in 0u64..1000, radius in 1usize..6) {
            let scene = generate_scene(seed, &SceneConfig { height: 48, width: 64, ..Default::default() }).unwrap();
            let out = corrupt_boundaries(&scene.labels, radius, seed).unwrap();
            prop_assert_eq!(instance_ids(&out), instance_ids(&scene.labels));
            let dist = raster::chebyshev_distance(&raster::label_transitions(&scene.labels));
            for ((p, &a), &b) in out.indexed_iter().zip(scene.labels.iter()) {
                if a != b {
                    prop_assert!(dist[p] as usize <= radius);
                }
            }
            prop_assert_eq!(&out, &corrupt_boundaries(&scene.labels, radius, seed).unwrap());
        }
    }
}
