//! LSD / SSD image-pair datasets with relative-pose labels.
//!
//! Each slot gets its own scene and its own offset, derived from the master
//! seed and the slot index only. The on-disk layout is a fixed-width
//! little-endian binary file:
//!
//! ```text
//! "VSDS"  u16 version
//! u8 kind  u8 dr-bits  u32 n
//! 8 × f64 limits  (−b, +b) for xy-trans, z-trans, xy-rot, z-rot
//! u64 master_seed  u16 width  u16 height
//! n × { ref RGB u8[w·h·3], cur RGB u8[w·h·3], 6 × f64 label, u8 origin, u8 sampler }
//! u32 CRC32 of everything above
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{compose, relative_pose, Pose, ThetaU, Vec3};
use crate::rng::Stream;
use crate::scene::{fronto_parallel, make_scene, render, CameraIntrinsics, DrConfig, PackedImage};

pub const MAGIC: &[u8; 4] = b"VSDS";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_RETRIES: usize = 16;

/// Symmetric per-component bounds for camera offsets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetLimits {
    pub xy_translation: f64,
    pub z_translation: f64,
    pub xy_rotation: f64,
    pub z_rotation: f64,
}

impl OffsetLimits {
    pub const LSD: OffsetLimits = OffsetLimits {
        xy_translation: 0.30,
        z_translation: 0.20,
        xy_rotation: 0.15,
        z_rotation: 0.40,
    };
    pub const SSD: OffsetLimits = OffsetLimits {
        xy_translation: 0.05,
        z_translation: 0.04,
        xy_rotation: 0.05,
        z_rotation: 0.10,
    };

    pub fn new(
        xy_translation: f64,
        z_translation: f64,
        xy_rotation: f64,
        z_rotation: f64,
    ) -> Result<Self> {
        let l = Self {
            xy_translation,
            z_translation,
            xy_rotation,
            z_rotation,
        };
        if l.bounds().iter().all(|b| *b > 0.0 && b.is_finite()) {
            Ok(l)
        } else {
            Err(Error::InvalidConfig(format!("offset bounds must be > 0: {l:?}")))
        }
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(
            self.xy_translation * k,
            self.z_translation * k,
            self.xy_rotation * k,
            self.z_rotation * k,
        )
    }

    /// Bounds in label order `(tx, ty, tz, ux, uy, uz)`.
    pub fn bounds(&self) -> [f64; 6] {
        [
            self.xy_translation,
            self.xy_translation,
            self.z_translation,
            self.xy_rotation,
            self.xy_rotation,
            self.z_rotation,
        ]
    }

    pub fn contains(&self, label: &[f64; 6]) -> bool {
        label
            .iter()
            .zip(self.bounds())
            .all(|(v, b)| v.abs() <= b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Lsd,
    Ssd,
}

impl DatasetKind {
    pub fn limits(self) -> OffsetLimits {
        match self {
            DatasetKind::Lsd => OffsetLimits::LSD,
            DatasetKind::Ssd => OffsetLimits::SSD,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DatasetKind::Lsd => "lsd",
            DatasetKind::Ssd => "ssd",
        }
    }

    /// Class index used by the classification head.
    pub fn class_index(self) -> usize {
        match self {
            DatasetKind::Lsd => 0,
            DatasetKind::Ssd => 1,
        }
    }

    fn to_byte(self) -> u8 {
        self.class_index() as u8
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DatasetKind::Lsd),
            1 => Ok(DatasetKind::Ssd),
            _ => Err(Error::Format(format!("bad dataset kind {b}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sampler {
    Uniform,
    Gaussian,
}

impl Sampler {
    fn to_byte(self) -> u8 {
        match self {
            Sampler::Uniform => 0,
            Sampler::Gaussian => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Sampler::Uniform),
            1 => Ok(Sampler::Gaussian),
            _ => Err(Error::Format(format!("bad sampler tag {b}"))),
        }
    }
}

/// Camera offset in the reference camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Offset {
    pub translation: Vec3,
    pub rotation: ThetaU,
    pub sampler: Sampler,
}

impl Offset {
    pub fn zero() -> Self {
        Self {
            translation: Vec3::zeros(),
            rotation: ThetaU::zero(),
            sampler: Sampler::Uniform,
        }
    }

    pub fn from_label(label: [f64; 6], sampler: Sampler) -> Result<Self> {
        Ok(Self {
            translation: Vec3::new(label[0], label[1], label[2]),
            rotation: ThetaU::new(Vec3::new(label[3], label[4], label[5]))?,
            sampler,
        })
    }

    pub fn label(&self) -> [f64; 6] {
        let t = self.translation;
        let u = self.rotation.vector();
        [t.x, t.y, t.z, u.x, u.y, u.z]
    }

    pub fn pose(&self) -> Pose {
        Pose::from_thetau(self.translation, &self.rotation)
    }
}

/// One component drawn by the given sampler branch.
pub fn sample_component(bound: f64, sampler: Sampler, rng: &mut Stream) -> f64 {
    match sampler {
        Sampler::Uniform => rng.random_range(-bound..=bound),
        Sampler::Gaussian => {
            // σ uniform in (0, bound/3]
            let sigma = (1.0 - rng.random::<f64>()) * bound / 3.0;
            let z: f64 = rng.sample(StandardNormal);
            (sigma * z).clamp(-bound, bound)
        }
    }
}

/// Draws one offset: with probability ½ all six components are uniform,
/// otherwise all six are clipped zero-mean Gaussians.
pub fn sample_offset(limits: &OffsetLimits, rng: &mut Stream) -> Offset {
    let sampler = if rng.random_bool(0.5) {
        Sampler::Uniform
    } else {
        Sampler::Gaussian
    };
    let b = limits.bounds();
    let mut c = [0.0; 6];
    for k in 0..6 {
        c[k] = sample_component(b[k], sampler, rng);
    }
    Offset {
        translation: Vec3::new(c[0], c[1], c[2]),
        // |u| ≤ ‖bounds‖ < π for any sensible limits
        rotation: ThetaU::wrapped(Vec3::new(c[3], c[4], c[5])),
        sampler,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub reference_image: PackedImage,
    pub current_image: PackedImage,
    /// `(tx, ty, tz, ux, uy, uz)`: current camera in the reference frame.
    pub label: [f64; 6],
    pub origin: DatasetKind,
    pub sampler: Sampler,
}

/// Renders the reference view at `base_pose` and the current view at
/// `base_pose · offset`.
pub fn generate_pair(
    scene: &crate::scene::Scene,
    base_pose: &Pose,
    offset: &Offset,
    intr: &CameraIntrinsics,
    origin: DatasetKind,
) -> Result<Sample> {
    let current_pose = compose(base_pose, &offset.pose());
    let reference = render(scene, base_pose, intr)?;
    let current = render(scene, &current_pose, intr)?;
    let label = offset.label();
    debug_assert!({
        let rel = relative_pose(base_pose, &current_pose);
        let u = rel.thetau().vector();
        (rel.translation - offset.translation).amax() < 1e-12
            && (u - offset.rotation.vector()).amax() < 1e-12
    });
    Ok(Sample {
        reference_image: reference.pack(),
        current_image: current.pack(),
        label,
        origin,
        sampler: offset.sampler,
    })
}

/// Geometry of dataset generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub height: f64,
    pub lateral_jitter: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 0.6,
            lateral_jitter: 0.05,
            intrinsics: CameraIntrinsics::default(),
        }
    }
}

/// Everything drawn for one dataset slot attempt.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotDraw {
    pub scene_seed: u64,
    pub base_pose: Pose,
    pub offset: Offset,
}

impl SlotDraw {
    pub fn current_pose(&self) -> Pose {
        compose(&self.base_pose, &self.offset.pose())
    }
}

pub fn slot_draw(
    kind: DatasetKind,
    master_seed: u64,
    index: u64,
    attempt: u64,
    cfg: &GenConfig,
) -> SlotDraw {
    let mut s = Stream::from_seed(master_seed)
        .derive("dataset")
        .derive(kind.label())
        .derive_index(index)
        .derive_index(attempt);
    let scene_seed = s.next_seed();
    let j = cfg.lateral_jitter;
    let (jx, jy) = if j > 0.0 {
        (s.random_range(-j..=j), s.random_range(-j..=j))
    } else {
        (0.0, 0.0)
    };
    let base_pose = fronto_parallel(jx, jy, cfg.height);
    let offset = sample_offset(&kind.limits(), &mut s);
    SlotDraw {
        scene_seed,
        base_pose,
        offset,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub limits: OffsetLimits,
    pub master_seed: u64,
    pub dr: DrConfig,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn generate_dataset(kind: DatasetKind, n: usize, master_seed: u64, dr: DrConfig) -> Result<Dataset> {
    generate_dataset_with(kind, n, master_seed, dr, &GenConfig::default())
}

/// Generates one slot, retrying degenerate views.
pub fn generate_slot(
    kind: DatasetKind,
    master_seed: u64,
    index: u64,
    dr: DrConfig,
    cfg: &GenConfig,
) -> Result<(Sample, SlotDraw)> {
    for attempt in 0..MAX_RETRIES as u64 {
        let draw = slot_draw(kind, master_seed, index, attempt, cfg);
        let scene = make_scene(draw.scene_seed, dr);
        match generate_pair(&scene, &draw.base_pose, &draw.offset, &cfg.intrinsics, kind) {
            Ok(s) => return Ok((s, draw)),
            Err(Error::DegenerateView(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RejectionExhausted(MAX_RETRIES))
}

pub fn generate_dataset_with(
    kind: DatasetKind,
    n: usize,
    master_seed: u64,
    dr: DrConfig,
    cfg: &GenConfig,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    cfg.intrinsics.validate()?;
    let samples = (0..n as u64)
        .map(|i| generate_slot(kind, master_seed, i, dr, cfg).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        kind,
        limits: kind.limits(),
        master_seed,
        dr,
        width: cfg.intrinsics.width,
        height: cfg.intrinsics.height,
        samples,
    })
}

struct CrcWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn header_len() -> usize {
    4 + 2 + 1 + 1 + 4 + 8 * 8 + 8 + 2 + 2
}

fn record_len(w: usize, h: usize) -> usize {
    2 * w * h * 3 + 6 * 8 + 2
}

pub fn write_dataset<W: Write>(d: &Dataset, out: W) -> Result<()> {
    if d.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if d.width > u16::MAX as usize || d.height > u16::MAX as usize || d.samples.len() > u32::MAX as usize {
        return Err(Error::InvalidConfig("dataset too large for format".into()));
    }
    let mut w = CrcWriter {
        inner: out,
        hasher: crc32fast::Hasher::new(),
    };
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[d.kind.to_byte(), d.dr.to_bits()])?;
    w.write_all(&(d.samples.len() as u32).to_le_bytes())?;
    for b in [
        d.limits.xy_translation,
        d.limits.z_translation,
        d.limits.xy_rotation,
        d.limits.z_rotation,
    ] {
        w.write_all(&(-b).to_le_bytes())?;
        w.write_all(&b.to_le_bytes())?;
    }
    w.write_all(&d.master_seed.to_le_bytes())?;
    w.write_all(&(d.width as u16).to_le_bytes())?;
    w.write_all(&(d.height as u16).to_le_bytes())?;
    let img_len = d.width * d.height * 3;
    for s in &d.samples {
        for img in [&s.reference_image, &s.current_image] {
            if img.data.len() != img_len {
                return Err(Error::ShapeMismatch("sample image size differs from header".into()));
            }
            w.write_all(&img.data)?;
        }
        for v in s.label {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[s.origin.to_byte(), s.sampler.to_byte()])?;
    }
    let crc = w.hasher.finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

pub fn dataset_to_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf)?;
    Ok(buf)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if d.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let f = BufWriter::new(File::create(path)?);
    write_dataset(d, f)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    dataset_from_bytes(&buf)
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::ChecksumMismatch);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Verifies magic, version and trailing CRC; returns the payload.
pub(crate) fn checked_payload<'a>(buf: &'a [u8], magic: &[u8; 4], version: u16) -> Result<&'a [u8]> {
    if buf.len() < 6 || &buf[..4] != magic {
        if buf.len() >= 4 && &buf[..4] != magic {
            return Err(Error::Format("bad magic".into()));
        }
        return Err(Error::ChecksumMismatch);
    }
    let found = u16::from_le_bytes([buf[4], buf[5]]);
    if found != version {
        return Err(Error::FormatVersionMismatch {
            found,
            expected: version,
        });
    }
    if buf.len() < 10 {
        return Err(Error::ChecksumMismatch);
    }
    let (payload, crc) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(payload) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::ChecksumMismatch);
    }
    Ok(payload)
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Dataset> {
    let payload = checked_payload(buf, MAGIC, FORMAT_VERSION)?;
    let mut c = Cursor::new(payload);
    c.take(6)?;
    let kind = DatasetKind::from_byte(c.u8()?)?;
    let dr = DrConfig::from_bits(c.u8()?);
    let n = c.u32()? as usize;
    let mut b = [0.0; 4];
    for v in b.iter_mut() {
        let lo = c.f64()?;
        let hi = c.f64()?;
        if lo != -hi {
            return Err(Error::Format("asymmetric limits".into()));
        }
        *v = hi;
    }
    let limits = OffsetLimits::new(b[0], b[1], b[2], b[3])?;
    let master_seed = c.u64()?;
    let width = c.u16()? as usize;
    let height = c.u16()? as usize;
    debug_assert_eq!(c.pos, header_len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if c.remaining() != n * record_len(width, height) {
        return Err(Error::Format("record section length disagrees with header".into()));
    }
    let img_len = width * height * 3;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let r = c.take(img_len)?.to_vec();
        let k = c.take(img_len)?.to_vec();
        let mut label = [0.0; 6];
        for v in label.iter_mut() {
            *v = c.f64()?;
        }
        let origin = DatasetKind::from_byte(c.u8()?)?;
        let sampler = Sampler::from_byte(c.u8()?)?;
        samples.push(Sample {
            reference_image: PackedImage {
                width,
                height,
                data: r,
            },
            current_image: PackedImage {
                width,
                height,
                data: k,
            },
            label,
            origin,
            sampler,
        });
    }
    Ok(Dataset {
        kind,
        limits,
        master_seed,
        dr,
        width,
        height,
        samples,
    })
}
