//! Synthetic rotated-rectangle scenes and their on-disk formats.
//!
//! Images are raw `AO2I` files: magic, `u32` H, W, C, then little-endian
//! `f64` pixels in row-major `[H, W, C]` order. Each image has a text
//! sidecar with one object per line: `class cx cy w h theta`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{rotated_iou, OrientedBox};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"AO2I";
/// Placement attempts per object before the scene is redrawn.
pub const MAX_RETRIES: usize = 100;
/// Largest allowed rotated IoU between two objects of a scene.
pub const MAX_OVERLAP: f64 = 0.3;

/// An image with its annotations `(class, canonical box)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub objects: Vec<(usize, OrientedBox)>,
}

/// Generator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub classes: usize,
    pub max_objects: usize,
    /// Range of the short side.
    pub short_side: (f64, f64),
    /// Range of long side / short side.
    pub aspect: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 128,
            classes: 3,
            max_objects: 5,
            short_side: (0.08, 0.3),
            aspect: (1.0, 4.0),
        }
    }
}

/// Fill color of `class` out of `n`: evenly spaced hues.
pub fn class_color(class: usize, n: usize) -> [f64; 3] {
    let hue = class as f64 / n.max(1) as f64 * 6.0;
    let (s, v) = (0.85, 0.95);
    let c = v * s;
    let x = c * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn draw_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Option<Vec<(usize, OrientedBox)>> {
    let k = rng.random_range(1..=spec.max_objects);
    let mut objects: Vec<(usize, OrientedBox)> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut placed = false;
        for _ in 0..MAX_RETRIES {
            let class = rng.random_range(0..spec.classes);
            let w = rng.random_range(spec.short_side.0..=spec.short_side.1);
            let h = w * rng.random_range(spec.aspect.0..=spec.aspect.1);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let b = OrientedBox::new(rng.random(), rng.random(), w, h, theta).canonicalize();
            if !b.is_inside_unit() || objects.iter().any(|(_, o)| rotated_iou(o, &b) > MAX_OVERLAP) {
                continue;
            }
            objects.push((class, b));
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Paints `objects` in order over uniform noise.
pub fn render(rng: &mut ChaCha8Rng, spec: &SceneSpec, objects: &[(usize, OrientedBox)]) -> Tensor {
    let n = spec.size;
    let mut data = Vec::with_capacity(n * n * 3);
    for _ in 0..n * n * 3 {
        data.push(rng.random_range(0.0..0.35));
    }
    for (class, b) in objects {
        let col = class_color(*class, spec.classes);
        for i in 0..n {
            let y = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let x = (j as f64 + 0.5) / n as f64;
                if b.contains(x, y) {
                    let px = &mut data[(i * n + j) * 3..(i * n + j + 1) * 3];
                    for (p, c) in px.iter_mut().zip(col) {
                        *p = (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, n, 3], data)
}

/// Scene `index` of the dataset with `seed`; independent of every other
/// index.
pub fn generate_scene(seed: u64, index: u64, spec: &SceneSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        if let Some(objects) = draw_objects(&mut rng, spec) {
            let image = render(&mut rng, spec, &objects);
            return Scene { image, objects };
        }
    }
}

pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() != 3 {
        return Err(Error::dim("encode_image", format!("{:?}", t.shape())));
    }
    let mut buf = Vec::with_capacity(16 + t.numel() * 8);
    buf.extend_from_slice(IMAGE_MAGIC);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format("image dimension too large".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_image(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 16 || &buf[..4] != IMAGE_MAGIC {
        return Err(Error::Format("not an AO2I image".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if buf.len() != 16 + n * 8 {
        return Err(Error::Format(format!("AO2I image {shape:?} needs {} bytes, got {}", 16 + n * 8, buf.len())));
    }
    let data = buf[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

/// Annotation text; values use the shortest representation that parses
/// back to the same `f64`.
pub fn format_annotations(objects: &[(usize, OrientedBox)]) -> String {
    let mut s = String::new();
    for (c, b) in objects {
        let _ = writeln!(s, "{c} {} {} {} {} {}", b.cx, b.cy, b.w, b.h, b.theta);
    }
    s
}

pub fn parse_annotations(text: &str) -> Result<Vec<(usize, OrientedBox)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("annotation line {}: {line:?}", n + 1));
        let (c, rest) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
        let class = c.parse().map_err(|_| bad())?;
        let b: OrientedBox = rest.parse().map_err(|_| bad())?;
        out.push((class, b));
    }
    Ok(out)
}

fn scene_stem(i: usize) -> String {
    format!("scene_{i:05}")
}

/// Writes `count` scenes to `dir` as `scene_NNNNN.ao2i` / `.txt` pairs.
pub fn gen_dataset(dir: &Path, seed: u64, count: usize, spec: &SceneSpec) -> Result<()> {
    if spec.size == 0 || spec.size % 64 != 0 {
        return Err(Error::Usage(format!("image size {} must be a positive multiple of 64", spec.size)));
    }
    if spec.classes == 0 {
        return Err(Error::Usage("need at least one class".into()));
    }
    fs::create_dir_all(dir)?;
    super::par_map(count, |i| -> Result<()> {
        let scene = generate_scene(seed, i as u64, spec);
        let stem = scene_stem(i);
        fs::write(dir.join(format!("{stem}.ao2i")), encode_image(&scene.image)?)?;
        fs::write(dir.join(format!("{stem}.txt")), format_annotations(&scene.objects))?;
        Ok(())
    })
    .into_iter()
    .collect()
}

/// Every `*.ao2i` image in `dir` with its sidecar, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(PathBuf, Scene)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ao2i"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let image = read_image(&p)?;
            let objects = parse_annotations(&fs::read_to_string(p.with_extension("txt"))?)?;
            Ok((p, Scene { image, objects }))
        })
        .collect()
}
