//! Synthetic shape-caption corpus: rendering, captions, files and audit.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::fnv1a;
use crate::tensor::Tensor;

pub const SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
const COLORS: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

/// Every word the caption grammar can produce.
pub const WORDS: [&str; 10] = ["a", "red", "green", "blue", "square", "circle", "triangle", "above", "left", "of"];

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the pixel at offset `(dx, dy)` from the center is covered.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= (r + 0.5) * (r + 0.5),
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r + 0.5) / 2.0,
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    fn channel(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub cx: i32,
    pub cy: i32,
    pub r: i32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Above,
    LeftOf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub first: Object,
    pub second: Option<(Relation, Object)>,
}

impl Scene {
    pub fn caption(&self) -> String {
        let np = |o: &Object| format!("a {} {}", o.color.word(), o.shape.word());
        match &self.second {
            None => np(&self.first),
            Some((Relation::Above, o)) => format!("{} above {}", np(&self.first), np(o)),
            Some((Relation::LeftOf, o)) => format!("{} left of {}", np(&self.first), np(o)),
        }
    }

    /// `[32, 32, 3]` image on black, pure colors, values in {0, 1}.
    pub fn render(&self) -> Tensor {
        let mut img = Tensor::zeros(&[SIZE, SIZE, 3]);
        let objs = std::iter::once(&self.first).chain(self.second.as_ref().map(|(_, o)| o));
        for o in objs {
            for y in 0..SIZE {
                for x in 0..SIZE {
                    if o.shape.covers(x as f64 - o.cx as f64, y as f64 - o.cy as f64, o.r as f64) {
                        img.set(&[y, x, o.color.channel()], 1.0);
                    }
                }
            }
        }
        img
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub caption: String,
}

fn random_object(rng: &mut ChaCha8Rng, color: Color) -> Object {
    let shape = SHAPES[rng.random_range(0..3)];
    let r = rng.random_range(4..=6);
    Object { shape, color, cx: 0, cy: 0, r }
}

fn place(rng: &mut ChaCha8Rng, o: &mut Object) {
    let lo = o.r + 1;
    let hi = SIZE as i32 - 2 - o.r;
    o.cx = rng.random_range(lo..=hi);
    o.cy = rng.random_range(lo..=hi);
}

/// One random scene. Two shapes always differ in color; "above" pairs are
/// vertically stacked (|dx| ≤ 6, dy ≥ 14) and "left of" pairs side by side
/// (dx ≥ 14, |dy| ≤ 8), the named-first shape being the upper or left one.
pub fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let c1 = COLORS[rng.random_range(0..3)];
    let mut first = random_object(rng, c1);
    if rng.random_bool(0.3) {
        place(rng, &mut first);
        return Scene { first, second: None };
    }
    let c2 = loop {
        let c = COLORS[rng.random_range(0..3)];
        if c != c1 {
            break c;
        }
    };
    let mut second = random_object(rng, c2);
    let relation = if rng.random_bool(0.5) { Relation::Above } else { Relation::LeftOf };
    loop {
        place(rng, &mut first);
        place(rng, &mut second);
        let (dx, dy) = (second.cx - first.cx, second.cy - first.cy);
        let ok = match relation {
            Relation::Above => dx.abs() <= 6 && dy >= 14,
            Relation::LeftOf => dx >= 14 && dy.abs() <= 8,
        };
        if ok {
            return Scene { first, second: Some((relation, second)) };
        }
    }
}

/// `n` samples, bitwise reproducible for a seed.
pub fn generate_corpus(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let scene = random_scene(&mut rng);
            Sample { image: scene.render(), caption: scene.caption() }
        })
        .collect()
}

/// Seed of a named split derived from the run seed.
pub fn split_seed(seed: u64, split: &str) -> u64 {
    fnv1a(format!("corpus/{seed}/{split}").as_bytes())
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::Shape(format!("png export wants [H,W,3], got {:?}", image.shape())));
    };
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// Loads a PNG or PPM as a `[H, W, 3]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub file: String,
    pub image: Tensor,
    pub caption: String,
}

/// Writes `images/<split>_NNNNN.png` and `<split>.tsv` under `dir`.
pub fn write_split(dir: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut tsv = fs::File::create(dir.join(format!("{split}.tsv")))?;
    for (i, s) in samples.iter().enumerate() {
        let file = format!("images/{split}_{i:05}.png");
        save_png(&s.image, &dir.join(&file))?;
        writeln!(tsv, "{file}\t{}", s.caption)?;
    }
    Ok(())
}

/// Reads `<split>.tsv` lines `file<TAB>caption` and their images.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Item>> {
    let path = dir.join(format!("{split}.tsv"));
    let f = fs::File::open(&path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut items = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((file, caption)) = line.split_once('\t') else {
            return Err(Error::Format(format!("{}:{}: expected file<TAB>caption", path.display(), n + 1)));
        };
        items.push(Item { file: file.to_string(), image: load_image(&dir.join(file))?, caption: caption.to_string() });
    }
    Ok(items)
}

/// Classifies the single shape drawn in `channel` by its bounding-box fill.
fn classify(image: &Tensor, channel: usize) -> Option<(Shape, f64, f64)> {
    let (mut x0, mut y0, mut x1, mut y1, mut count) = (usize::MAX, usize::MAX, 0, 0, 0usize);
    for y in 0..image.shape()[0] {
        for x in 0..image.shape()[1] {
            if image.at(&[y, x, channel]) > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                count += 1;
            }
        }
    }
    if count == 0 {
        return None;
    }
    let fill = count as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    let shape = if fill > 0.93 {
        Shape::Square
    } else if fill > 0.65 {
        Shape::Circle
    } else {
        Shape::Triangle
    };
    Some((shape, (x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0))
}

/// Checks that every color/shape named in `caption` is drawn in `image`
/// and that the named relation holds.
pub fn audit(image: &Tensor, caption: &str) -> std::result::Result<(), String> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let mut found = Vec::new();
    let mut i = 0;
    while i < words.len() {
        if words[i] == "a" {
            let color = COLORS.iter().find(|c| c.word() == words.get(i + 1).copied().unwrap_or(""));
            let shape = SHAPES.iter().find(|s| s.word() == words.get(i + 2).copied().unwrap_or(""));
            let (Some(color), Some(shape)) = (color, shape) else {
                return Err(format!("malformed noun phrase at word {i} of `{caption}`"));
            };
            let Some((seen, cx, cy)) = classify(image, color.channel()) else {
                return Err(format!("no {} pixels for `{caption}`", color.word()));
            };
            if seen != *shape {
                return Err(format!("{} shape looks like a {} in `{caption}`", color.word(), seen.word()));
            }
            found.push((cx, cy));
            i += 3;
        } else {
            i += 1;
        }
    }
    match (found.as_slice(), words.contains(&"above"), words.contains(&"left")) {
        ([_], false, false) => Ok(()),
        ([a, b], true, false) if a.1 < b.1 => Ok(()),
        ([a, b], false, true) if a.0 < b.0 => Ok(()),
        _ => Err(format!("relation does not hold for `{caption}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_reproducible() {
        assert_eq!(generate_corpus(20, 5), generate_corpus(20, 5));
        assert_ne!(generate_corpus(5, 5), generate_corpus(5, 6));
    }

    #[test]
    fn captions_use_the_template_words() {
        for s in generate_corpus(200, 1) {
            for w in s.caption.split(' ') {
                assert!(WORDS.contains(&w), "{w}");
            }
        }
    }

    #[test]
    fn fill_ratios_separate_shapes() {
        for r in 4..=6 {
            for shape in SHAPES {
                let o = Object { shape, color: Color::Green, cx: 15, cy: 15, r };
                let img = Scene { first: o, second: None }.render();
                assert_eq!(classify(&img, 1).unwrap().0, shape, "r={r}");
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = &generate_corpus(1, 3)[0];
        let p = dir.path().join("x.png");
        save_png(&s.image, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), s.image);
    }

    #[test]
    fn split_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_corpus(4, 9);
        write_split(dir.path(), "train", &samples).unwrap();
        let items = read_split(dir.path(), "train").unwrap();
        assert_eq!(items.len(), 4);
        for (it, s) in items.iter().zip(&samples) {
            assert_eq!(it.caption, s.caption);
            assert_eq!(it.image, s.image);
        }
    }
}
