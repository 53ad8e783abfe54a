//! Procedural toy corpus.
//!
//! Content images are muted two-colour linear gradients with a few solid
//! circles and rectangles. Style images are textures in saturated palettes:
//! sinusoidal stripes, checkers or smooth blobs. Image `i` depends only
//! on `(seed, i, image_size, content_fraction)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::ppm::{write_pnm, ImageBuffer};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusSpec {
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Probability that an image belongs to the content family.
    pub content_fraction: f64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            count: 512,
            image_size: 32,
            seed: 2024,
            content_fraction: 0.5,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.image_size < 4 || !(0.0..=1.0).contains(&self.content_fraction) {
            return Err(Error::InvalidArgument(format!(
                "corpus needs count > 0, image_size >= 4 and content_fraction in [0,1], got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Content,
    Style,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Shapes,
    Stripes,
    Checker,
    Blobs,
}

impl Kind {
    pub fn family(self) -> Family {
        match self {
            Kind::Shapes => Family::Content,
            _ => Family::Style,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Shapes => "shapes",
            Kind::Stripes => "stripes",
            Kind::Checker => "checker",
            Kind::Blobs => "blobs",
        }
    }
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Content => "content",
            Family::Style => "style",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub index: usize,
    pub kind: Kind,
    /// Generator parameters as `name=value` pairs joined by `;`.
    pub params: String,
    pub image: ImageBuffer,
}

impl ToyImage {
    pub fn family(&self) -> Family {
        self.kind.family()
    }

    pub fn file_name(&self) -> String {
        format!("img_{:05}.ppm", self.index)
    }
}

type Rgb = [f64; 3];

/// Muted colour near gray, used by the content family.
fn muted(rng: &mut Rng) -> Rgb {
    let g = rng.uniform_range(50.0, 205.0);
    [0, 1, 2].map(|_| g + rng.uniform_range(-40.0, 40.0))
}

/// Saturated colour from a random hue, used by the style family.
fn vivid(rng: &mut Rng) -> Rgb {
    let h = rng.uniform_range(0.0, 6.0);
    let s = rng.uniform_range(0.7, 1.0);
    let v = rng.uniform_range(150.0, 255.0);
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn mix(a: Rgb, b: Rgb, s: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

fn render(size: usize, mut f: impl FnMut(f64, f64) -> Rgb) -> ImageBuffer {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            for v in f(x as f64 + 0.5, y as f64 + 0.5) {
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::new(size, size, 3, data).expect("square RGB")
}

fn shapes(rng: &mut Rng, size: usize, params: &mut String) -> ImageBuffer {
    let n = size as f64;
    let (c1, c2) = (muted(rng), muted(rng));
    let angle = rng.uniform_range(0.0, 2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let count = 1 + rng.below(3);
    let _ = write!(params, "angle={angle:.4};shapes={count}");
    struct Shape {
        circle: bool,
        cx: f64,
        cy: f64,
        r: f64,
        color: Rgb,
    }
    let list: Vec<Shape> = (0..count)
        .map(|_| Shape {
            circle: rng.uniform() < 0.5,
            cx: rng.uniform_range(0.2, 0.8) * n,
            cy: rng.uniform_range(0.2, 0.8) * n,
            r: rng.uniform_range(0.12, 0.3) * n,
            color: muted(rng),
        })
        .collect();
    render(size, |x, y| {
        let s = (((x - n / 2.0) * dx + (y - n / 2.0) * dy) / n + 0.5).clamp(0.0, 1.0);
        let mut c = mix(c1, c2, s);
        for sh in &list {
            let inside = if sh.circle {
                (x - sh.cx).powi(2) + (y - sh.cy).powi(2) <= sh.r * sh.r
            } else {
                (x - sh.cx).abs() <= sh.r && (y - sh.cy).abs() <= sh.r * 0.7
            };
            if inside {
                c = sh.color;
            }
        }
        c
    })
}

fn stripes(rng: &mut Rng, size: usize, params: &mut String) -> ImageBuffer {
    let (c1, c2) = (vivid(rng), vivid(rng));
    let period = rng.uniform_range(3.0, 10.0);
    let angle = rng.uniform_range(0.0, PI);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let _ = write!(params, "period={period:.4};angle={angle:.4}");
    let (dx, dy) = (angle.cos(), angle.sin());
    render(size, |x, y| {
        let s = 0.5 + 0.5 * (2.0 * PI * (x * dx + y * dy) / period + phase).sin();
        mix(c1, c2, s)
    })
}

fn checker(rng: &mut Rng, size: usize, params: &mut String) -> ImageBuffer {
    let (c1, c2) = (vivid(rng), vivid(rng));
    let cell = [2.0, 3.0, 4.0, 6.0, 8.0][rng.below(5)];
    let (ox, oy) = (rng.uniform_range(0.0, cell), rng.uniform_range(0.0, cell));
    let _ = write!(params, "cell={cell}");
    render(size, |x, y| {
        let parity = (((x + ox) / cell).floor() + ((y + oy) / cell).floor()) as i64 % 2;
        if parity == 0 {
            c1
        } else {
            c2
        }
    })
}

fn blobs(rng: &mut Rng, size: usize, params: &mut String) -> ImageBuffer {
    let n = size as f64;
    let (c1, c2, c3) = (vivid(rng), vivid(rng), vivid(rng));
    let count = 4 + rng.below(7);
    let radius = rng.uniform_range(0.06, 0.14) * n;
    let _ = write!(params, "blobs={count};radius={radius:.4}");
    let centers: Vec<(f64, f64)> = (0..count).map(|_| (rng.uniform() * n, rng.uniform() * n)).collect();
    render(size, |x, y| {
        let field: f64 = centers
            .iter()
            .map(|&(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * radius * radius)).exp())
            .sum();
        let s = field.min(2.0);
        if s < 1.0 {
            mix(c1, c2, s)
        } else {
            mix(c2, c3, s - 1.0)
        }
    })
}

/// Image `index` of the corpus.
pub fn generate_image(spec: &ToyCorpusSpec, index: usize) -> ToyImage {
    let mut rng = Rng::with_stream(spec.seed, 1_000 + index as u64);
    let kind = if rng.uniform() < spec.content_fraction {
        Kind::Shapes
    } else {
        [Kind::Stripes, Kind::Checker, Kind::Blobs][rng.below(3)]
    };
    let mut params = String::new();
    let image = match kind {
        Kind::Shapes => shapes(&mut rng, spec.image_size, &mut params),
        Kind::Stripes => stripes(&mut rng, spec.image_size, &mut params),
        Kind::Checker => checker(&mut rng, spec.image_size, &mut params),
        Kind::Blobs => blobs(&mut rng, spec.image_size, &mut params),
    };
    ToyImage {
        index,
        kind,
        params,
        image,
    }
}

pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<Vec<ToyImage>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| generate_image(spec, i)).collect())
}

/// `file,family,kind,params` with one row per image.
pub fn manifest(images: &[ToyImage]) -> String {
    let mut out = String::from("file,family,kind,params\n");
    for img in images {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            img.file_name(),
            img.family().as_str(),
            img.kind.as_str(),
            img.params
        );
    }
    out
}

/// Generate the corpus into `dir` with a `manifest.csv`.
pub fn write_toy_corpus(spec: &ToyCorpusSpec, dir: &Path) -> Result<Vec<ToyImage>> {
    let images = generate_toy_corpus(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for img in &images {
        write_pnm(&dir.join(img.file_name()), &img.image)?;
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest(&images)).map_err(|e| Error::io(&path, e))?;
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyCorpusSpec {
        ToyCorpusSpec {
            count: 40,
            image_size: 16,
            seed: 5,
            content_fraction: 0.5,
        }
    }

    #[test]
    fn generation_is_pure() {
        let a = generate_toy_corpus(&small()).unwrap();
        let b = generate_toy_corpus(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_image(&small(), 17), a[17]);
        let kinds: std::collections::HashSet<Kind> = a.iter().map(|i| i.kind).collect();
        assert_eq!(kinds.len(), 4);
    }

    #[test]
    fn files_and_manifest_are_identical_across_runs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let imgs = write_toy_corpus(&small(), d1.path()).unwrap();
        write_toy_corpus(&small(), d2.path()).unwrap();
        for img in &imgs {
            let a = std::fs::read(d1.path().join(img.file_name())).unwrap();
            let b = std::fs::read(d2.path().join(img.file_name())).unwrap();
            assert_eq!(a, b);
        }
        let m = std::fs::read_to_string(d1.path().join("manifest.csv")).unwrap();
        assert_eq!(m.lines().count(), 41);
        assert!(m.starts_with("file,family,kind,params\nimg_00000.ppm,"));
    }

    #[test]
    fn fraction_extremes() {
        let all_content = ToyCorpusSpec {
            content_fraction: 1.0,
            ..small()
        };
        assert!(generate_toy_corpus(&all_content).unwrap().iter().all(|i| i.family() == Family::Content));
        let bad = ToyCorpusSpec { count: 0, ..small() };
        assert!(generate_toy_corpus(&bad).is_err());
    }
}
