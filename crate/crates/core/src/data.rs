//! Procedural annotated tiles: tagged shapes rendered with exact color
//! signatures, point-prompt sampling from the annotations, and the
//! color-based conditioning-fidelity oracle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{PointQuery, PointSet};
use crate::error::{Error, Result};
use crate::image::{write_png, ImageGrid};

pub const TAG_NAMES: [&str; 8] = ["building", "road", "water", "tree", "field", "parking", "roof-red", "roof-gray"];

/// RGB signature per tag, in `[-1, 1]`.
pub const TAG_COLORS: [[f64; 3]; 8] = [
    [0.85, 0.85, 0.80],
    [-0.05, -0.05, -0.05],
    [-0.75, -0.35, 0.75],
    [-0.55, 0.35, -0.60],
    [0.55, 0.75, -0.35],
    [0.35, -0.45, 0.65],
    [0.85, -0.60, -0.55],
    [0.40, 0.40, 0.45],
];

pub const BACKGROUND_COLOR: [f64; 3] = [-0.45, -0.75, -0.85];
pub const NOISE_AMPLITUDE: f64 = 0.05;

/// A scene family: one caption id, a nominal tag mix, and a latitude band.
#[derive(Clone, Copy, Debug)]
pub struct Archetype {
    pub name: &'static str,
    pub mix: [f64; 8],
    pub lat_band: (f64, f64),
}

pub const ARCHETYPES: [Archetype; 6] = [
    Archetype { name: "dense urban blocks", mix: [0.30, 0.25, 0.0, 0.0, 0.0, 0.15, 0.15, 0.15], lat_band: (-60.0, -45.0) },
    Archetype { name: "suburban housing", mix: [0.15, 0.20, 0.0, 0.25, 0.0, 0.0, 0.20, 0.20], lat_band: (-40.0, -25.0) },
    Archetype { name: "farmland", mix: [0.0, 0.15, 0.15, 0.20, 0.50, 0.0, 0.0, 0.0], lat_band: (-20.0, -5.0) },
    Archetype { name: "forest", mix: [0.0, 0.10, 0.20, 0.60, 0.10, 0.0, 0.0, 0.0], lat_band: (0.0, 15.0) },
    Archetype { name: "coastal town", mix: [0.15, 0.15, 0.50, 0.10, 0.0, 0.10, 0.0, 0.0], lat_band: (20.0, 35.0) },
    Archetype { name: "industrial park", mix: [0.15, 0.25, 0.0, 0.0, 0.0, 0.30, 0.0, 0.30], lat_band: (40.0, 55.0) },
];

pub fn tag_id(name: &str) -> Option<usize> {
    TAG_NAMES.iter().position(|t| *t == name)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rectangle { cx: f64, cy: f64, half_w: f64, half_h: f64, angle: f64 },
    Line { x0: f64, y0: f64, x1: f64, y1: f64, width: f64 },
}

impl Shape {
    /// Whether the pixel-center point `(x, y)` is covered.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rectangle { cx, cy, half_w, half_h, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= half_w && v.abs() <= half_h
            }
            Shape::Line { x0, y0, x1, y1, width } => {
                let (lx, ly) = (x1 - x0, y1 - y0);
                let len = (lx * lx + ly * ly).sqrt();
                let dist = ((x - x0) * ly - (y - y0) * lx).abs() / len;
                dist <= width / 2.0
            }
        }
    }

    fn describe(&self) -> String {
        match *self {
            Shape::Disc { cx, cy, r } => format!("disc {cx:.6} {cy:.6} {r:.6}"),
            Shape::Rectangle { cx, cy, half_w, half_h, angle } => {
                format!("rectangle {cx:.6} {cy:.6} {half_w:.6} {half_h:.6} {angle:.6}")
            }
            Shape::Line { x0, y0, x1, y1, width } => format!("line {x0:.6} {y0:.6} {x1:.6} {y1:.6} {width:.6}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub shape: Shape,
    pub tag_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub archetype_id: usize,
    pub size: usize,
    /// Painted in order; later shapes cover earlier ones.
    pub annotations: Vec<Annotation>,
    pub latlon: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedTile {
    pub image: ImageGrid,
    pub spec: SceneSpec,
    /// Visible tag per pixel, row-major; `None` is background.
    pub labels: Vec<Option<usize>>,
}

impl AnnotatedTile {
    pub fn size(&self) -> usize {
        self.spec.size
    }

    pub fn label(&self, x: usize, y: usize) -> Option<usize> {
        self.labels[y * self.size() + x]
    }

    /// Pixel coordinates `(x, y)` of every annotated cell.
    pub fn annotated_cells(&self) -> Vec<(usize, usize)> {
        let n = self.size();
        (0..n * n).filter(|i| self.labels[*i].is_some()).map(|i| (i % n, i / n)).collect()
    }
}

fn layer(tag: usize) -> u8 {
    match TAG_NAMES[tag] {
        "field" => 0,
        "water" => 1,
        "road" => 2,
        "tree" | "parking" => 3,
        _ => 4,
    }
}

fn draw_tag(mix: &[f64; 8], rng: &mut impl Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in mix.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    mix.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn draw_shape(tag: usize, size: f64, rng: &mut impl Rng) -> Shape {
    let cx = rng.random_range(1.0..size - 1.0);
    let cy = rng.random_range(1.0..size - 1.0);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let scale = size / 16.0;
    match TAG_NAMES[tag] {
        "road" => {
            let (s, c) = angle.sin_cos();
            Shape::Line { x0: cx - c * size, y0: cy - s * size, x1: cx + c * size, y1: cy + s * size, width: rng.random_range(1.0..2.0) * scale }
        }
        "water" => Shape::Disc { cx, cy, r: rng.random_range(2.0..4.5) * scale },
        "tree" => Shape::Disc { cx, cy, r: rng.random_range(1.0..2.5) * scale },
        "field" => Shape::Rectangle {
            cx,
            cy,
            half_w: rng.random_range(3.0..6.0) * scale,
            half_h: rng.random_range(3.0..6.0) * scale,
            angle,
        },
        _ => Shape::Rectangle {
            cx,
            cy,
            half_w: rng.random_range(1.0..3.0) * scale,
            half_h: rng.random_range(1.0..3.0) * scale,
            angle,
        },
    }
}

/// Draws the scene description for `(seed, archetype_id)`.
pub fn scene_spec(seed: u64, archetype_id: usize, size: usize) -> Result<SceneSpec> {
    let arch = ARCHETYPES
        .get(archetype_id)
        .ok_or_else(|| Error::OutOfRange(format!("archetype {archetype_id} outside {} archetypes", ARCHETYPES.len())))?;
    if size < 4 {
        return Err(Error::OutOfRange(format!("tile size {size} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((archetype_id as u64) << 48) ^ 0x7113);
    let count = rng.random_range(3..=7);
    let mut annotations: Vec<Annotation> = (0..count)
        .map(|_| {
            let tag = draw_tag(&arch.mix, &mut rng);
            Annotation { shape: draw_shape(tag, size as f64, &mut rng), tag_id: tag }
        })
        .collect();
    annotations.sort_by_key(|a| layer(a.tag_id));
    let lat = rng.random_range(arch.lat_band.0..arch.lat_band.1);
    let lon = rng.random_range(-180.0..180.0);
    Ok(SceneSpec { seed, archetype_id, size, annotations, latlon: (lat, lon) })
}

/// Renders a scene: signature colors over a background, plus seeded
/// uniform noise of amplitude [`NOISE_AMPLITUDE`] on every pixel.
pub fn rasterize(spec: &SceneSpec) -> AnnotatedTile {
    let n = spec.size;
    let mut labels = vec![None; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for a in &spec.annotations {
                if a.shape.contains(px, py) {
                    labels[y * n + x] = Some(a.tag_id);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x005e_ed0f_7e27));
    let mut image = ImageGrid::zeros(n, n, 3);
    for y in 0..n {
        for x in 0..n {
            let base = labels[y * n + x].map_or(BACKGROUND_COLOR, |t| TAG_COLORS[t]);
            for (c, b) in base.iter().enumerate() {
                image.set(y, x, c, b + rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE));
            }
        }
    }
    AnnotatedTile { image, spec: spec.clone(), labels }
}

/// Deterministic tile for `(seed, archetype_id)`, always with at least one
/// annotated cell.
pub fn generate_tile(seed: u64, archetype_id: usize, size: usize) -> Result<AnnotatedTile> {
    let mut sub = seed;
    loop {
        let mut spec = scene_spec(sub, archetype_id, size)?;
        spec.seed = sub;
        let tile = rasterize(&spec);
        if tile.labels.iter().any(Option::is_some) {
            return Ok(tile);
        }
        sub = sub.wrapping_add(0x1_0000_0000);
    }
}

/// Samples `n ~ U{lo..=hi}` (clamped to `capacity`) annotated cells
/// uniformly with replacement, converting pixel coordinates to token units
/// by dividing by `stride`.
pub fn sample_point_prompts(
    tile: &AnnotatedTile,
    rng: &mut impl Rng,
    n_range: (usize, usize),
    stride: usize,
    capacity: usize,
) -> Result<PointSet> {
    let cells = tile.annotated_cells();
    if cells.is_empty() {
        return Err(Error::Empty("tile has no annotated cells".into()));
    }
    let n = rng.random_range(n_range.0..=n_range.1).min(capacity);
    let points = (0..n)
        .map(|_| {
            let (x, y) = cells[rng.random_range(0..cells.len())];
            let tag_id = tile.label(x, y).expect("annotated cell");
            PointQuery { x: x as f64 / stride as f64, y: y as f64 / stride as f64, tag_id }
        })
        .collect();
    PointSet::new(points, capacity)
}

/// Nearest signature among the tags and the background; `None` is background.
pub fn classify_pixel(px: &[f64]) -> Option<usize> {
    let d2 = |c: &[f64; 3]| c.iter().zip(px).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = None;
    let mut best_d = d2(&BACKGROUND_COLOR);
    for (t, c) in TAG_COLORS.iter().enumerate() {
        let d = d2(c);
        if d < best_d {
            best_d = d;
            best = Some(t);
        }
    }
    best
}

/// Fraction of points whose tag appears among the classified pixels within
/// `radius` tokens of the point. An empty set scores 1.
pub fn fidelity_oracle(generated: &ImageGrid, points: &PointSet, radius: f64, stride: usize) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let hits = points.points().iter().filter(|p| point_hit(generated, p, radius, stride)).count();
    hits as f64 / points.len() as f64
}

fn point_hit(img: &ImageGrid, p: &PointQuery, radius: f64, stride: usize) -> bool {
    let s = stride as f64;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (tx, ty) = (x as f64 / s, y as f64 / s);
            if (tx - p.x).powi(2) + (ty - p.y).powi(2) <= radius * radius && classify_pixel(img.pixel(y, x)) == Some(p.tag_id) {
                return true;
            }
        }
    }
    false
}

/// Writes `image.png`, `labels.csv` (tag id per cell, `-1` background) and
/// `scene.txt` (flat `key = value`).
pub fn dump_tile(dir: &Path, tile: &AnnotatedTile) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join("image.png"), &tile.image)?;
    let n = tile.size();
    let mut csv = String::new();
    for y in 0..n {
        let row: Vec<String> = (0..n).map(|x| tile.label(x, y).map_or(-1, |t| t as i64).to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let p = dir.join("labels.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let s = &tile.spec;
    let mut txt = String::new();
    let _ = writeln!(txt, "seed = {}", s.seed);
    let _ = writeln!(txt, "archetype_id = {}", s.archetype_id);
    let _ = writeln!(txt, "size = {}", s.size);
    let _ = writeln!(txt, "lat = {}", s.latlon.0);
    let _ = writeln!(txt, "lon = {}", s.latlon.1);
    for (i, a) in s.annotations.iter().enumerate() {
        let _ = writeln!(txt, "annotation.{i} = {} {}", TAG_NAMES[a.tag_id], a.shape.describe());
    }
    let p = dir.join("scene.txt");
    std::fs::write(&p, txt).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Parses a tag vocabulary file of `tag_id tag_name` lines.
pub fn parse_vocab(text: &str) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(id), Some(name), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Parse { location: format!("vocab:{}", n + 1), reason: "expected `tag_id tag_name`".into() });
        };
        let id: usize = id
            .parse()
            .map_err(|_| Error::Parse { location: format!("vocab:{}", n + 1), reason: format!("bad tag id `{id}`") })?;
        out.insert(name.to_string(), id);
    }
    Ok(out)
}

pub fn default_vocab_text() -> String {
    TAG_NAMES.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect()
}

/// Parses a point file of `x y tag_name` lines in token-grid coordinates.
pub fn parse_points(text: &str, vocab: &BTreeMap<String, usize>, capacity: usize) -> Result<PointSet> {
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let loc = || format!("points:{}", n + 1);
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::Parse { location: loc(), reason: "expected `x y tag_name`".into() });
        }
        let x: f64 = f[0].parse().map_err(|_| Error::Parse { location: loc(), reason: format!("bad x `{}`", f[0]) })?;
        let y: f64 = f[1].parse().map_err(|_| Error::Parse { location: loc(), reason: format!("bad y `{}`", f[1]) })?;
        let tag_id = *vocab
            .get(f[2])
            .ok_or_else(|| Error::Parse { location: loc(), reason: format!("unknown tag `{}`", f[2]) })?;
        pts.push(PointQuery { x, y, tag_id });
    }
    PointSet::new(pts, capacity)
}

pub fn format_points(points: &PointSet) -> String {
    points
        .points()
        .iter()
        .map(|p| format!("{} {} {}\n", p.x, p.y, TAG_NAMES.get(p.tag_id).copied().unwrap_or("unknown")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_are_deterministic() {
        for a in 0..ARCHETYPES.len() {
            assert_eq!(generate_tile(42, a, 16).unwrap(), generate_tile(42, a, 16).unwrap());
        }
        assert!(generate_tile(0, ARCHETYPES.len(), 16).is_err());
    }

    #[test]
    fn colors_follow_labels_within_noise() {
        for seed in 0..50 {
            let tile = generate_tile(seed, (seed % 6) as usize, 16).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let sig = tile.label(x, y).map_or(BACKGROUND_COLOR, |t| TAG_COLORS[t]);
                    for c in 0..3 {
                        assert!((tile.image.get(y, x, c) - sig[c]).abs() <= NOISE_AMPLITUDE);
                    }
                    assert_eq!(classify_pixel(tile.image.pixel(y, x)), tile.label(x, y));
                }
            }
        }
    }

    #[test]
    fn signatures_are_well_separated() {
        let mut all: Vec<[f64; 3]> = TAG_COLORS.to_vec();
        all.push(BACKGROUND_COLOR);
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(d > 0.5, "{i} vs {j}: {d}");
            }
        }
    }

    #[test]
    fn pixel_to_token_conversion() {
        let mut spec = scene_spec(0, 0, 64).unwrap();
        spec.annotations = vec![Annotation { shape: Shape::Disc { cx: 32.5, cy: 48.5, r: 0.4 }, tag_id: 2 }];
        let tile = rasterize(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = sample_point_prompts(&tile, &mut rng, (3, 3), 2, 50).unwrap();
        for p in pts.points() {
            assert_eq!((p.x, p.y, p.tag_id), (16.0, 24.0, 2));
        }
    }

    #[test]
    fn empty_tile_is_rejected() {
        let mut spec = scene_spec(0, 0, 16).unwrap();
        spec.annotations.clear();
        let tile = rasterize(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_point_prompts(&tile, &mut rng, (1, 5), 2, 50).is_err());
    }

    #[test]
    fn point_files_parse() {
        let vocab = parse_vocab(&default_vocab_text()).unwrap();
        let pts = parse_points("# comment\n1.5 2 water\n0 7.5 roof-red\n", &vocab, 50).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts.points()[1].tag_id, 6);
        assert!(parse_points("1 2 lava\n", &vocab, 50).is_err());
        assert!(parse_points("1 2\n", &vocab, 50).is_err());
        let back = parse_points(&format_points(&pts), &vocab, 50).unwrap();
        assert_eq!(back, pts);
    }
}
