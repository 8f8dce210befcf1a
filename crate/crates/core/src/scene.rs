//! Procedural planar scenes and a deterministic pinhole ray caster.
//!
//! Everything lives on the world `z = 0` plane: a tiled texture, the target
//! rectangle and a handful of flat convex distractors. Rendering casts one
//! ray per pixel center and samples the nearest texel, so output is a pure
//! function of `(scene, camera pose, intrinsics)`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::rng::Stream;

pub type Rgb = [f64; 3];

pub const TEXTURE_TABLE: usize = 16;
pub const MIN_CAMERA_HEIGHT: f64 = 0.05;
const PARALLEL_TOL: f64 = 1e-6;
const SKY: Rgb = [0.55, 0.6, 0.7];

/// Domain-randomization toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DrConfig {
    pub randomize_texture: bool,
    pub include_distractors: bool,
    pub randomize_lighting: bool,
}

impl Default for DrConfig {
    fn default() -> Self {
        Self {
            randomize_texture: true,
            include_distractors: true,
            randomize_lighting: true,
        }
    }
}

impl DrConfig {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn no_texture() -> Self {
        Self {
            randomize_texture: false,
            ..Self::default()
        }
    }

    pub fn no_distractors() -> Self {
        Self {
            include_distractors: false,
            ..Self::default()
        }
    }

    pub fn no_lighting() -> Self {
        Self {
            randomize_lighting: false,
            ..Self::default()
        }
    }

    pub fn name(&self) -> &'static str {
        match (
            self.randomize_texture,
            self.include_distractors,
            self.randomize_lighting,
        ) {
            (true, true, true) => "full",
            (false, true, true) => "no-texture",
            (true, false, true) => "no-distractors",
            (true, true, false) => "no-lighting",
            _ => "custom",
        }
    }

    pub(crate) fn to_bits(self) -> u8 {
        (self.randomize_texture as u8)
            | (self.include_distractors as u8) << 1
            | (self.randomize_lighting as u8) << 2
    }

    pub(crate) fn from_bits(b: u8) -> Self {
        Self {
            randomize_texture: b & 1 != 0,
            include_distractors: b & 2 != 0,
            randomize_lighting: b & 4 != 0,
        }
    }
}

/// Tiled plane texture: cell `(i, j)` of size `period` takes
/// `palette[table[(j mod N) * N + (i mod N)]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub palette: Vec<Rgb>,
    pub period: f64,
    pub table: Vec<u8>,
}

impl Texture {
    fn canonical() -> Self {
        // two-tone checkerboard
        let table = (0..TEXTURE_TABLE * TEXTURE_TABLE)
            .map(|k| (((k / TEXTURE_TABLE) + (k % TEXTURE_TABLE)) % 2) as u8)
            .collect();
        Self {
            palette: vec![[0.8, 0.78, 0.7], [0.35, 0.4, 0.45]],
            period: 0.08,
            table,
        }
    }

    fn random(s: &mut Stream) -> Self {
        let base: Rgb = [0, 1, 2].map(|_| s.random_range(0.2..0.8));
        let spread = s.random_range(0.05..0.25);
        let n_colors = s.random_range(3..=6);
        let palette = (0..n_colors)
            .map(|_| base.map(|b| (b + s.random_range(-spread..spread)).clamp(0.0, 1.0)))
            .collect();
        let period = s.random_range(0.06..0.12);
        let table = (0..TEXTURE_TABLE * TEXTURE_TABLE)
            .map(|_| s.random_range(0..n_colors) as u8)
            .collect();
        Self {
            palette,
            period,
            table,
        }
    }

    #[inline]
    fn sample(&self, x: f64, y: f64) -> Rgb {
        let i = (x / self.period).floor() as i64;
        let j = (y / self.period).floor() as i64;
        let n = TEXTURE_TABLE as i64;
        let idx = (j.rem_euclid(n) * n + i.rem_euclid(n)) as usize;
        self.palette[self.table[idx] as usize]
    }
}

fn random_color(s: &mut Stream) -> Rgb {
    [s.random::<f64>(), s.random::<f64>(), s.random::<f64>()]
}

/// Axis-aligned rectangle on the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Rect {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub color: Rgb,
}

impl Rect {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center[0]).abs() <= 0.5 * self.size[0]
            && (y - self.center[1]).abs() <= 0.5 * self.size[1]
    }
}

/// Convex polygon with counter-clockwise vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
    pub color: Rgb,
}

impl Polygon {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        (0..n).all(|k| {
            let a = self.vertices[k];
            let b = self.vertices[(k + 1) % n];
            (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) >= 0.0
        })
    }
}

/// Global per-channel affine lighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lighting {
    pub gain: Rgb,
    pub bias: Rgb,
}

impl Lighting {
    pub const GAIN_RANGE: (f64, f64) = (0.3, 1.7);
    pub const BIAS_RANGE: (f64, f64) = (-0.2, 0.2);

    pub fn unit() -> Self {
        Self {
            gain: [1.0; 3],
            bias: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub texture: Texture,
    pub target: Rect,
    pub distractors: Vec<Polygon>,
    pub lighting: Lighting,
    pub seed: u64,
}

/// Which primitive a pixel ray hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Hit {
    Sky,
    Plane,
    Target,
    Distractor(u16),
}

/// Builds the scene for `seed`. Every attribute draws from its own
/// sub-stream, so toggling one never shifts the others.
pub fn make_scene(seed: u64, dr: DrConfig) -> Scene {
    let root = Stream::from_seed(seed).derive("scene");

    let texture = if dr.randomize_texture {
        Texture::random(&mut root.derive("texture"))
    } else {
        Texture::canonical()
    };

    let target_color = if dr.randomize_texture {
        let s = &mut root.derive("target");
        let base = texture.palette[0];
        base.map(|b| (1.0 - b + s.random_range(-0.1..0.1)).clamp(0.0, 1.0))
    } else {
        [0.75, 0.2, 0.15]
    };
    let target = Rect {
        center: [0.0, 0.0],
        size: [0.20, 0.10],
        color: target_color,
    };

    let mut distractors = Vec::new();
    if dr.include_distractors {
        let s = &mut root.derive("distractors");
        let count = s.random_range(2..=5);
        for _ in 0..count {
            let n = s.random_range(3..=6);
            let ring = s.random_range(0.1..0.35);
            let phi = s.random_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = (ring * phi.cos(), ring * phi.sin());
            let radius = s.random_range(0.03..0.08);
            let spin = s.random_range(0.0..std::f64::consts::TAU);
            let vertices = (0..n)
                .map(|k| {
                    let a = spin + std::f64::consts::TAU * k as f64 / n as f64;
                    [cx + radius * a.cos(), cy + radius * a.sin()]
                })
                .collect();
            distractors.push(Polygon {
                vertices,
                color: random_color(s),
            });
        }
    }

    let lighting = if dr.randomize_lighting {
        let s = &mut root.derive("lighting");
        let mut l = Lighting::unit();
        for c in 0..3 {
            l.gain[c] = s.random_range(Lighting::GAIN_RANGE.0..=Lighting::GAIN_RANGE.1);
        }
        for c in 0..3 {
            l.bias[c] = s.random_range(Lighting::BIAS_RANGE.0..=Lighting::BIAS_RANGE.1);
        }
        l
    } else {
        Lighting::unit()
    };

    Scene {
        texture,
        target,
        distractors,
        lighting,
        seed,
    }
}

impl Scene {
    #[inline]
    fn hit_at(&self, x: f64, y: f64) -> Hit {
        if self.target.contains(x, y) {
            return Hit::Target;
        }
        for (k, d) in self.distractors.iter().enumerate().rev() {
            if d.contains(x, y) {
                return Hit::Distractor(k as u16);
            }
        }
        Hit::Plane
    }

    fn albedo(&self, hit: Hit, x: f64, y: f64) -> Rgb {
        match hit {
            Hit::Sky => SKY,
            Hit::Plane => self.texture.sample(x, y),
            Hit::Target => self.target.color,
            Hit::Distractor(k) => self.distractors[k as usize].color,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self::square(48)
    }
}

impl CameraIntrinsics {
    /// Square image with a ~53° field of view.
    pub fn square(size: usize) -> Self {
        Self {
            focal: size as f64,
            principal: [size as f64 / 2.0, size as f64 / 2.0],
            width: size,
            height: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.focal > 0.0
            && self.width > 0
            && self.height > 0
            && self.principal[0] >= 0.0
            && self.principal[0] <= self.width as f64
            && self.principal[1] >= 0.0
            && self.principal[1] <= self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad intrinsics {self:?}")))
        }
    }
}

/// Float RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    /// 8-bit quantization.
    pub fn pack(&self) -> PackedImage {
        PackedImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.pack().save_png(path)
    }
}

/// 8-bit RGB image as stored in datasets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl PackedImage {
    pub fn unpack(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_png(path.as_ref(), self.width, self.height, &self.data)
    }
}

pub(crate) fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_image_data(rgb)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Checks that the camera sits above the plane and looks down at it.
pub fn check_view(camera: &Pose) -> Result<()> {
    let c = camera.translation;
    if !(c.z > MIN_CAMERA_HEIGHT) {
        return Err(Error::DegenerateView(format!(
            "camera height {:.4} m below minimum {MIN_CAMERA_HEIGHT}",
            c.z
        )));
    }
    let axis = camera.rotation * Vec3::z();
    if !(axis.z < -PARALLEL_TOL.sin()) {
        return Err(Error::DegenerateView(
            "optical axis does not intersect the plane".into(),
        ));
    }
    Ok(())
}

/// Per-pixel primitive ids, row-major.
pub fn render_hits(scene: &Scene, camera: &Pose, intr: &CameraIntrinsics) -> Result<Vec<Hit>> {
    check_view(camera)?;
    let mut out = Vec::with_capacity(intr.width * intr.height);
    cast(scene, camera, intr, |hit, _, _| out.push(hit));
    Ok(out)
}

pub fn render(scene: &Scene, camera: &Pose, intr: &CameraIntrinsics) -> Result<Image> {
    check_view(camera)?;
    let mut img = Image::new(intr.width, intr.height);
    let l = scene.lighting;
    let mut k = 0;
    cast(scene, camera, intr, |hit, x, y| {
        let a = scene.albedo(hit, x, y);
        for c in 0..3 {
            img.data[k + c] = (a[c] * l.gain[c] + l.bias[c]).clamp(0.0, 1.0);
        }
        k += 3;
    });
    Ok(img)
}

#[inline]
fn cast(scene: &Scene, camera: &Pose, intr: &CameraIntrinsics, mut f: impl FnMut(Hit, f64, f64)) {
    let r = &camera.rotation;
    let o = camera.translation;
    let inv_f = 1.0 / intr.focal;
    for v in 0..intr.height {
        let yc = (v as f64 + 0.5 - intr.principal[1]) * inv_f;
        for u in 0..intr.width {
            let xc = (u as f64 + 0.5 - intr.principal[0]) * inv_f;
            let d = r * Vec3::new(xc, yc, 1.0);
            if d.z >= 0.0 {
                f(Hit::Sky, 0.0, 0.0);
                continue;
            }
            let s = -o.z / d.z;
            let x = o.x + s * d.x;
            let y = o.y + s * d.y;
            f(scene.hit_at(x, y), x, y);
        }
    }
}

/// Camera looking straight down at `(x, y)` from `height`, image x along
/// world x.
pub fn fronto_parallel(x: f64, y: f64, height: f64) -> Pose {
    Pose {
        rotation: crate::geometry::Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0)),
        translation: Vec3::new(x, y, height),
    }
}
