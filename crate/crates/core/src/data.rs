//! Synthetic paired-view dataset and NetPBM image I/O.
//!
//! Every class owns a latent layout of colored shapes. Its satellite image
//! renders the layout as is; drone views render it through a seeded
//! rotation, scale, shift and brightness change. Files are named
//! `<class>_<view>_<idx>.ppm` with `view` either `sat` or `drone`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 8-bit interleaved image, `channels` is 1 or 3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !matches!(channels, 1 | 3) || data.len() != width * height * channels {
            return Err(Error::Format(format!(
                "{width}x{height}x{channels} image cannot hold {} bytes",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Planar `C×H×W` tensor scaled to `[0, 1]`; gray images are
    /// replicated to three channels.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = if self.channels == 1 { 0 } else { i / (h * w) };
            let p = i % (h * w);
            T::lit(self.data[p * self.channels + c] as f64 / 255.0)
        })
    }

    /// Inverse of [`Image::to_tensor`] for three-channel tensors.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(Error::shape("image", t.shape(), &[3, 0, 0]));
        };
        let mut data = vec![0u8; h * w * 3];
        for (i, v) in t.data().iter().enumerate() {
            let (c, p) = (i / (h * w), i % (h * w));
            data[p * 3 + c] = to_byte(v.to_f64().unwrap_or(0.0));
        }
        Self::new(w, h, 3, data)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    Satellite,
    Drone,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Satellite => "sat",
            View::Drone => "drone",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub class: usize,
    pub view: View,
    pub index: usize,
    pub image: Image,
}

impl Sample {
    pub fn file_name(&self) -> String {
        format!("{:04}_{}_{}.ppm", self.class, self.view, self.index)
    }

    /// Identifier used in embedding files: the file name without extension.
    pub fn id(&self) -> String {
        format!("{:04}_{}_{}", self.class, self.view, self.index)
    }
}

/// Parses `<class>_<view>_<idx>[.ppm|.pgm]`.
pub fn parse_name(name: &str) -> Option<(usize, View, usize)> {
    let stem = name.strip_suffix(".ppm").or_else(|| name.strip_suffix(".pgm")).unwrap_or(name);
    let mut parts = stem.split('_');
    let class = parts.next()?.parse().ok()?;
    let view = match parts.next()? {
        "sat" => View::Satellite,
        "drone" => View::Drone,
        _ => return None,
    };
    let index = parts.next()?.parse().ok()?;
    parts.next().is_none().then_some((class, view, index))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.class + 1).max().unwrap_or(0)
    }

    pub fn view(&self, view: View) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.view == view)
    }

    /// Satellite image of `class`, if present.
    pub fn satellite(&self, class: usize) -> Option<&Sample> {
        self.samples.iter().find(|s| s.view == View::Satellite && s.class == class)
    }

    fn sort(&mut self) {
        self.samples.sort_by_key(|a| (a.class, a.view, a.index));
    }
}

/// Shape of the synthetic dataset and its view-transform ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub drone_views: usize,
    pub image_size: usize,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_shift: f64,
    pub brightness_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 64,
            drone_views: 4,
            image_size: 32,
            max_rotation_deg: 30.0,
            scale_range: (0.85, 1.15),
            max_shift: 0.1,
            brightness_range: (0.8, 1.2),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.drone_views == 0 || self.image_size == 0 {
            return Err(Error::Config("dataset needs at least one class, one drone view and a positive size".into()));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.0 > self.scale_range.1 {
            return Err(Error::Config("scale range must be positive and ordered".into()));
        }
        if self.brightness_range.0 < 0.0 || self.brightness_range.0 > self.brightness_range.1 {
            return Err(Error::Config("brightness range must be non-negative and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Ring { cx: f64, cy: f64, r: f64, width: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (c * dx + s * dy).abs() <= hw && (-s * dx + c * dy).abs() <= hh
            }
            Shape::Ring { cx, cy, r, width } => (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r).abs() <= width,
        }
    }
}

/// Latent scene of one class in normalized `[−1, 1]²` coordinates.
#[derive(Clone, Debug)]
pub struct Layout {
    background: [f64; 3],
    stripe: Option<(f64, [f64; 3])>,
    shapes: Vec<(Shape, [f64; 3])>,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

impl Layout {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let background = color(rng).map(|c| 0.15 + 0.5 * c);
        let stripe = rng.random_bool(0.5).then(|| (rng.random_range(0.0..std::f64::consts::PI), color(rng)));
        let n = rng.random_range(3..=5);
        let shapes = (0..n)
            .map(|_| {
                let cx = rng.random_range(-0.6..0.6);
                let cy = rng.random_range(-0.6..0.6);
                let shape = match rng.random_range(0..3) {
                    0 => Shape::Disc { cx, cy, r: rng.random_range(0.15..0.4) },
                    1 => Shape::Rect {
                        cx,
                        cy,
                        hw: rng.random_range(0.1..0.4),
                        hh: rng.random_range(0.1..0.4),
                        angle: rng.random_range(0.0..std::f64::consts::PI),
                    },
                    _ => Shape::Ring {
                        cx,
                        cy,
                        r: rng.random_range(0.2..0.45),
                        width: rng.random_range(0.04..0.1),
                    },
                };
                (shape, color(rng))
            })
            .collect();
        Self { background, stripe, shapes }
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.background;
        if let Some((angle, sc)) = self.stripe {
            let (s, co) = angle.sin_cos();
            if ((co * x + s * y) * 4.0).rem_euclid(2.0) < 1.0 {
                c = [0.5 * (c[0] + sc[0]), 0.5 * (c[1] + sc[1]), 0.5 * (c[2] + sc[2])];
            }
        }
        for (shape, sc) in &self.shapes {
            if shape.contains(x, y) {
                c = *sc;
            }
        }
        c
    }
}

/// Similarity transform plus brightness applied when rendering a view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTransform {
    pub rotation: f64,
    pub scale: f64,
    pub shift: (f64, f64),
    pub brightness: f64,
}

impl ViewTransform {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        scale: 1.0,
        shift: (0.0, 0.0),
        brightness: 1.0,
    };

    fn random(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Self {
        let max_rot = spec.max_rotation_deg.to_radians();
        Self {
            rotation: if max_rot > 0.0 { rng.random_range(-max_rot..=max_rot) } else { 0.0 },
            scale: rng.random_range(spec.scale_range.0..=spec.scale_range.1),
            shift: if spec.max_shift > 0.0 {
                (rng.random_range(-spec.max_shift..=spec.max_shift), rng.random_range(-spec.max_shift..=spec.max_shift))
            } else {
                (0.0, 0.0)
            },
            brightness: rng.random_range(spec.brightness_range.0..=spec.brightness_range.1),
        }
    }
}

/// Renders `layout` seen through `t` by inverse-mapping each pixel centre.
pub fn render(layout: &Layout, t: &ViewTransform, size: usize) -> Image {
    let (s, c) = t.rotation.sin_cos();
    let mut data = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let x = (px as f64 + 0.5) / size as f64 * 2.0 - 1.0 - t.shift.0;
            let y = (py as f64 + 0.5) / size as f64 * 2.0 - 1.0 - t.shift.1;
            let lx = (c * x + s * y) / t.scale;
            let ly = (-s * x + c * y) / t.scale;
            let rgb = layout.color_at(lx, ly);
            data.extend(rgb.iter().map(|v| to_byte(v * t.brightness)));
        }
    }
    Image::new(size, size, 3, data).expect("rendered buffer matches its extents")
}

/// Generates one satellite image and `drone_views` drone images per class.
/// Each class draws from its own generator so the output is independent of
/// generation order.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.classes * (spec.drone_views + 1));
    for class in 0..spec.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let layout = Layout::random(&mut rng);
        samples.push(Sample {
            class,
            view: View::Satellite,
            index: 0,
            image: render(&layout, &ViewTransform::IDENTITY, spec.image_size),
        });
        for index in 0..spec.drone_views {
            let t = ViewTransform::random(&mut rng, spec);
            samples.push(Sample {
                class,
                view: View::Drone,
                index,
                image: render(&layout, &t, spec.image_size),
            });
        }
    }
    Ok(Dataset { samples })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses binary P5/P6 data with an 8-bit maximum value.
pub fn parse_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated NetPBM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Format(format!("unsupported NetPBM magic {other:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad NetPBM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit NetPBM is supported, max value {maxval}")));
    }
    let need = w * h * channels;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| Error::Format("truncated NetPBM raster".into()))?;
    Image::new(w, h, channels, raster.to_vec())
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &ds.samples {
        write_ppm(&dir.join(s.file_name()), &s.image)?;
    }
    Ok(())
}

/// Image files in `dir` sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every well-named image; unreadable or misnamed files are reported
/// alongside the dataset instead of aborting the load.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<(PathBuf, Error)>)> {
    let mut ds = Dataset::default();
    let mut failures = Vec::new();
    for path in list_images(dir)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some((class, view, index)) = parse_name(name) else {
            failures.push((path.clone(), Error::Format(format!("file name {name:?} is not <class>_<view>_<idx>"))));
            continue;
        };
        match read_pnm(&path) {
            Ok(image) => ds.samples.push(Sample { class, view, index, image }),
            Err(e) => failures.push((path, e)),
        }
    }
    ds.sort();
    Ok((ds, failures))
}

/// Stacks images into a `B×3×H×W` tensor; all images must share extents.
pub fn stack_images<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Usage("cannot stack zero images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::shape("stack_images", &[h, w], &[img.height, img.width]));
        }
        data.extend_from_slice(img.to_tensor::<T>().data());
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}
