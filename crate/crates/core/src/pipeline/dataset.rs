//! Procedural photo/sketch/exemplar triples: one filled shape on a shaded
//! background, its edge sketch, and an independently drawn exemplar.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::energy::EdgeExtractor;
use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};
use crate::tensor::{luminance_weights, Image, Shape};

use super::io::{read_image_ivit, write_image_ivit, write_pnm};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Triangle,
    Rectangle,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Ellipse,
        ShapeKind::Triangle,
        ShapeKind::Rectangle,
        ShapeKind::Blob,
    ];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Blob => "blob",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape kind `{s}`")))
    }
}

/// Fill colours, RGB in [-1, 1].
pub const PALETTE: [[f64; 3]; 8] = [
    [0.8, -0.7, -0.6],
    [-0.6, 0.6, -0.5],
    [-0.6, -0.4, 0.8],
    [0.8, 0.7, -0.7],
    [0.9, 0.1, -0.8],
    [0.2, -0.6, 0.6],
    [-0.7, 0.4, 0.4],
    [-0.1, -0.1, -0.1],
];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetSpec {
    /// Height and width in pixels.
    pub size: usize,
    pub channels: usize,
    pub shapes: Vec<ShapeKind>,
    pub palette: Vec<[f64; 3]>,
    /// Peak displacement of the freehand warp, in pixels (0 = clean sketch).
    pub jitter: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 3,
            shapes: ShapeKind::ALL.to_vec(),
            palette: PALETTE.to_vec(),
            jitter: 0.0,
            count: 64,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be >= 1".into()));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("image size must be >= 8, got {}", self.size)));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.shapes.is_empty() || self.palette.len() < 2 {
            return Err(Error::Config(
                "need at least one shape kind and two palette colours".into(),
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.size, self.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyItem {
    pub id: usize,
    pub kind: ShapeKind,
    pub exemplar_kind: ShapeKind,
    pub photo: Image,
    /// Single channel in [0, 1], white background.
    pub sketch: Image,
    pub exemplar: Image,
}

struct Geometry {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rot: f64,
    wobble: [f64; 4],
}

impl Geometry {
    fn draw(kind: ShapeKind, size: f64, rng: &mut Stream) -> Self {
        Self {
            kind,
            cx: size * rng.uniform_range(0.38, 0.62),
            cy: size * rng.uniform_range(0.38, 0.62),
            a: size * rng.uniform_range(0.2, 0.34),
            b: size * rng.uniform_range(0.14, 0.3),
            rot: rng.uniform_range(0.0, PI),
            wobble: [
                rng.uniform_range(0.1, 0.25),
                rng.uniform_range(0.0, 2.0 * PI),
                rng.uniform_range(0.05, 0.15),
                rng.uniform_range(0.0, 2.0 * PI),
            ],
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.rot.cos(), self.rot.sin());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match self.kind {
            ShapeKind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 0.85 * self.a && v.abs() <= 0.85 * self.b,
            ShapeKind::Triangle => {
                let r = self.a.max(self.b) * 1.1;
                let pts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let ang = 2.0 * PI * k as f64 / 3.0;
                        (r * ang.cos(), r * ang.sin())
                    })
                    .collect();
                let side = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
                let s0 = side(pts[0], pts[1]);
                let s1 = side(pts[1], pts[2]);
                let s2 = side(pts[2], pts[0]);
                (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
            }
            ShapeKind::Blob => {
                let phi = v.atan2(u);
                let [a1, p1, a2, p2] = self.wobble;
                let r = 0.5 * (self.a + self.b) * (1.0 + a1 * (3.0 * phi + p1).sin() + a2 * (5.0 * phi + p2).sin());
                u * u + v * v <= r * r
            }
        }
    }
}

fn colour(rgb: [f64; 3], channels: usize) -> Vec<f64> {
    if channels == 3 {
        rgb.to_vec()
    } else {
        let w = luminance_weights(3);
        vec![rgb.iter().zip(&w).map(|(a, b)| a * b).sum()]
    }
}

/// Render one random photo: shaded background, one anti-aliased shape
/// (4 x 4 supersampling), values in [-1, 1] rounded to f32.
fn render_photo(spec: &ToyDatasetSpec, rng: &mut Stream) -> (ShapeKind, Image) {
    let kind = spec.shapes[rng.below(spec.shapes.len())];
    let bg = rng.below(spec.palette.len());
    let mut fg = rng.below(spec.palette.len() - 1);
    if fg >= bg {
        fg += 1;
    }
    let shade = rng.uniform_range(-0.15, 0.15);
    let n = spec.size;
    let geo = Geometry::draw(kind, n as f64, rng);
    let bgc = colour(spec.palette[bg], spec.channels);
    let fgc = colour(spec.palette[fg], spec.channels);
    let shape = spec.shape();
    let mut img = Image::zeros(shape);
    let plane = shape.plane();
    for i in 0..n {
        for j in 0..n {
            let mut hits = 0;
            for si in 0..4 {
                for sj in 0..4 {
                    let y = i as f64 + (si as f64 + 0.5) / 4.0;
                    let x = j as f64 + (sj as f64 + 0.5) / 4.0;
                    hits += geo.contains(x, y) as usize;
                }
            }
            let cov = hits as f64 / 16.0;
            let grad = shade * (i as f64 / (n - 1) as f64 - 0.5);
            for c in 0..spec.channels {
                let v = (1.0 - cov) * (bgc[c] + grad) + cov * fgc[c];
                img.data_mut()[c * plane + i * n + j] = (v.clamp(-1.0, 1.0) as f32) as f64;
            }
        }
    }
    (kind, img)
}

/// Warp a single-channel image by a smooth random displacement field with
/// peak magnitude `amplitude` pixels (bilinear, replicate boundary).
pub fn freehand_warp(sketch: &Image, amplitude: f64, rng: &mut Stream) -> Image {
    let (h, w) = (sketch.height(), sketch.width());
    let mut waves = [[0.0; 4]; 4];
    for wv in waves.iter_mut() {
        *wv = [
            rng.uniform_range(0.5, 2.0),
            rng.uniform_range(0.5, 2.0),
            rng.uniform_range(0.0, 2.0 * PI),
            rng.uniform_range(0.5, 1.0),
        ];
    }
    let field = |i: f64, j: f64, k: usize| -> f64 {
        let (a, b) = (&waves[2 * k], &waves[2 * k + 1]);
        let wave = |p: &[f64; 4]| p[3] * (2.0 * PI * (p[0] * i / h as f64 + p[1] * j / w as f64) + p[2]).sin();
        0.5 * amplitude * (wave(a) + wave(b))
    };
    let src = sketch.channel(0);
    let at = |i: isize, j: isize| src[i.clamp(0, h as isize - 1) as usize * w + j.clamp(0, w as isize - 1) as usize];
    let mut out = Image::zeros(sketch.shape());
    for i in 0..h {
        for j in 0..w {
            let y = i as f64 + field(i as f64, j as f64, 0);
            let x = j as f64 + field(i as f64, j as f64, 1);
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (yi, xi) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(yi, xi) + fx * at(yi, xi + 1))
                + fy * ((1.0 - fx) * at(yi + 1, xi) + fx * at(yi + 1, xi + 1));
            out.data_mut()[i * w + j] = v;
        }
    }
    out
}

pub fn generate_item(spec: &ToyDatasetSpec, id: usize) -> Result<ToyItem> {
    let mut rng = Stream::for_purpose(spec.seed, purpose::DATASET_ITEM, id as u32);
    let (kind, photo) = render_photo(spec, &mut rng);
    let (exemplar_kind, exemplar) = render_photo(spec, &mut rng);
    let mut sketch = EdgeExtractor::default().phi_sketch(&photo)?;
    if spec.jitter > 0.0 {
        sketch = freehand_warp(&sketch, spec.jitter, &mut rng);
    }
    let sketch = sketch.map(|v| (v as f32) as f64);
    Ok(ToyItem {
        id,
        kind,
        exemplar_kind,
        photo,
        sketch,
        exemplar,
    })
}

pub fn generate_items(spec: &ToyDatasetSpec) -> Result<Vec<ToyItem>> {
    spec.validate()?;
    (0..spec.count).map(|id| generate_item(spec, id)).collect()
}

pub const INDEX_FILE: &str = "index.csv";
pub const INDEX_COLUMNS: [&str; 6] = ["id", "shape", "exemplar_shape", "photo", "sketch", "exemplar"];

fn item_file(kind: &str, id: usize, ext: &str) -> String {
    format!("{kind}_{id:04}.{ext}")
}

/// Write every item as IVIT tensors plus PPM/PGM previews, and `index.csv`.
pub fn write_dataset(dir: &Path, spec: &ToyDatasetSpec) -> Result<Vec<ToyItem>> {
    let items = generate_items(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index)?;
    w.write_record(INDEX_COLUMNS)?;
    for it in &items {
        for (kind, img) in [("photo", &it.photo), ("sketch", &it.sketch), ("exemplar", &it.exemplar)] {
            write_image_ivit(&dir.join(item_file(kind, it.id, "ivit")), img)?;
            let (preview, ext) = match (kind, img.channels()) {
                ("sketch", _) => (img.map(|v| 2.0 * v - 1.0), "pgm"),
                (_, 1) => (img.clone(), "pgm"),
                _ => (img.clone(), "ppm"),
            };
            write_pnm(&dir.join(item_file(kind, it.id, ext)), &preview)?;
        }
        w.write_record([
            it.id.to_string(),
            it.kind.to_string(),
            it.exemplar_kind.to_string(),
            item_file("photo", it.id, "ivit"),
            item_file("sketch", it.id, "ivit"),
            item_file("exemplar", it.id, "ivit"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    Ok(items)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ToyItem>> {
    let index: PathBuf = dir.join(INDEX_FILE);
    let mut r = csv::Reader::from_path(&index)?;
    let mut items = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != INDEX_COLUMNS.len() {
            return Err(Error::Config(format!(
                "{}: expected {} columns",
                index.display(),
                INDEX_COLUMNS.len()
            )));
        }
        let id = rec[0]
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad id `{}`", index.display(), &rec[0])))?;
        items.push(ToyItem {
            id,
            kind: rec[1].parse()?,
            exemplar_kind: rec[2].parse()?,
            photo: read_image_ivit(&dir.join(&rec[3]))?,
            sketch: read_image_ivit(&dir.join(&rec[4]))?,
            exemplar: read_image_ivit(&dir.join(&rec[5]))?,
        });
    }
    if items.is_empty() {
        return Err(Error::Config(format!("{}: no items", index.display())));
    }
    Ok(items)
}
