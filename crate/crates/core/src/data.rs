//! Synthetic road scenes, PGM raster I/O, dataset manifests, tiling and
//! the 8:1:1 split.

use std::fs;
use std::path::{Path, PathBuf};

use dbswin_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};

/// Fixed input normalization. Plain SGD stalls on the class prior for
/// hundreds of steps when pixels arrive in `[0, 1]`.
pub const PIXEL_MEAN: f64 = 127.5;
pub const PIXEL_SCALE: f64 = 63.75;

/// 8-bit raster, channel planes stored one after another, each row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Data(format!(
                "raster dimensions {height}x{width}x{channels} must be positive"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Data(format!(
                "raster {height}x{width}x{channels} needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Raster::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `[C, H, W]` tensor with bytes mapped to `(v − PIXEL_MEAN) / PIXEL_SCALE`,
    /// roughly zero-centred with unit spread.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&v| (f64::from(v) - PIXEL_MEAN) / PIXEL_SCALE)
            .collect();
        Tensor::new([self.channels, self.height, self.width], data).expect("raster shape")
    }

    /// Copies the `h × w` window at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Raster> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::Data(format!(
                "crop {h}x{w} at ({y}, {x}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            for row in y..y + h {
                let start = (c * self.height + row) * self.width + x;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Raster::new(h, w, self.channels, data)
    }
}

/// An image with its binary road mask (0 = background, 1 = road).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Raster,
    pub mask: Raster,
}

impl Sample {
    pub fn new(image: Raster, mask: Raster) -> Result<Self> {
        if (image.height, image.width) != (mask.height, mask.width) || mask.channels != 1 {
            return Err(Error::Data(format!(
                "image {}x{} and mask {}x{}x{} do not match",
                image.height, image.width, mask.height, mask.width, mask.channels
            )));
        }
        if mask.data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Sample { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn image_tensor(&self) -> Tensor {
        self.image.to_tensor()
    }

    /// `[1, H, W]` tensor of 0.0 / 1.0.
    pub fn mask_tensor(&self) -> Tensor {
        let data = self.mask.data.iter().map(|&v| f64::from(v)).collect();
        Tensor::new([1, self.mask.height, self.mask.width], data).expect("mask shape")
    }

    pub fn road_pixels(&self) -> usize {
        self.mask.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Parameters of the synthetic occluded-road generator. Ranges are
/// inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRoadConfig {
    pub size: usize,
    pub roads: (usize, usize),
    pub width: (usize, usize),
    pub occluders: (usize, usize),
    pub occluder_radius: (usize, usize),
    /// Bright rectangles that resemble road surface locally.
    pub buildings: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticRoadConfig {
    fn default() -> Self {
        SyntheticRoadConfig {
            size: 64,
            roads: (1, 3),
            width: (2, 5),
            occluders: (2, 6),
            occluder_radius: (3, 7),
            buildings: (0, 3),
            noise_std: 8.0,
            seed: 0,
        }
    }
}

impl SyntheticRoadConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticRoadConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("roads", self.roads),
            ("width", self.width),
            ("occluders", self.occluders),
            ("occluder_radius", self.occluder_radius),
            ("buildings", self.buildings),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Config(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        if self.width.0 == 0 {
            return Err(Error::Config("road width must be at least 1".into()));
        }
        if self.size < 2 * self.width.0 {
            return Err(Error::Config(format!(
                "image size {} is too small for road width {}",
                self.size, self.width.0
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std {} is invalid", self.noise_std)));
        }
        Ok(())
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
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

/// A polyline from one image edge to the opposite one with two interior
/// bends, so every road crosses the whole image.
fn random_polyline(rng: &mut impl Rng, size: f64) -> Vec<(f64, f64)> {
    let horizontal = rng.random_bool(0.5);
    let across = |t: f64, v: f64| if horizontal { (t, v) } else { (v, t) };
    let mut v = rng.random_range(0.1 * size..0.9 * size);
    let mut pts = vec![across(0.0, v)];
    for t in [size / 3.0, 2.0 * size / 3.0] {
        v = (v + rng.random_range(-0.3 * size..0.3 * size)).clamp(0.05 * size, 0.95 * size);
        pts.push(across(t + rng.random_range(-0.1 * size..0.1 * size), v));
    }
    v = (v + rng.random_range(-0.3 * size..0.3 * size)).clamp(0.05 * size, 0.95 * size);
    pts.push(across(size, v));
    pts
}

/// Draws one synthetic scene: textured background, bright buildings,
/// roads rasterized into both image and mask, then occluder disks and
/// noise on the image alone.
pub fn generate_synthetic(cfg: &SyntheticRoadConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let size = n as f64;
    let mut img = vec![0.0f64; n * n];
    let mut mask = vec![0u8; n * n];

    let (fx, fy) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let base = rng.random_range(85.0..115.0);
    for y in 0..n {
        for x in 0..n {
            let wave = (fx * x as f64 + px).sin() * (fy * y as f64 + py).sin();
            img[y * n + x] = base + 20.0 * wave;
        }
    }

    for _ in 0..rng.random_range(cfg.buildings.0..=cfg.buildings.1) {
        let (bh, bw) = (rng.random_range(3..=n / 6 + 3), rng.random_range(3..=n / 6 + 3));
        let (y0, x0) = (rng.random_range(0..n), rng.random_range(0..n));
        let shade = rng.random_range(150.0..195.0);
        for y in y0..(y0 + bh).min(n) {
            for x in x0..(x0 + bw).min(n) {
                img[y * n + x] = shade;
            }
        }
    }

    for _ in 0..rng.random_range(cfg.roads.0..=cfg.roads.1) {
        let width = rng.random_range(cfg.width.0..=cfg.width.1) as f64;
        let shade = rng.random_range(160.0..195.0);
        let pts = random_polyline(&mut rng, size);
        for y in 0..n {
            for x in 0..n {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                if pts.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= width / 2.0) {
                    mask[y * n + x] = 1;
                    img[y * n + x] = shade;
                }
            }
        }
    }

    // Occluders favour road pixels so that they actually hide roads.
    let road: Vec<usize> = (0..n * n).filter(|&i| mask[i] == 1).collect();
    for _ in 0..rng.random_range(cfg.occluders.0..=cfg.occluders.1) {
        let r = rng.random_range(cfg.occluder_radius.0..=cfg.occluder_radius.1) as f64;
        let centre = if !road.is_empty() && rng.random_bool(0.75) {
            road[rng.random_range(0..road.len())]
        } else {
            rng.random_range(0..n * n)
        };
        let (cy, cx) = ((centre / n) as f64 + 0.5, (centre % n) as f64 + 0.5);
        let shade = rng.random_range(35.0..75.0);
        for y in 0..n {
            for x in 0..n {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= r {
                    img[y * n + x] = shade;
                }
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for v in &mut img {
            *v += noise.sample(&mut rng);
        }
    }
    let pixels = img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Sample::new(Raster::new(n, n, 1, pixels)?, Raster::new(n, n, 1, mask)?)
}

/// Seed of sample `index` in a set generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `count` independent samples sharing `cfg` apart from their seeds.
pub fn generate_set(cfg: &SyntheticRoadConfig, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| generate_synthetic(&cfg.with_seed(sample_seed(cfg.seed, i))))
        .collect()
}

// ---------------------------------------------------------------- PGM

/// Encodes a single-channel raster as binary PGM (P5, maxval 255).
pub fn encode_pgm(raster: &Raster) -> Result<Vec<u8>> {
    if raster.channels != 1 {
        return Err(Error::Data(format!(
            "PGM holds one channel, raster has {}",
            raster.channels
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Pgm {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} is out of range")))
    }
}

/// Decodes a binary PGM. `path` only labels errors.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let mut h = Header { bytes, pos: 0, path };
    match bytes.get(..2) {
        Some(b"P5") => h.pos = 2,
        Some(b"P2") => return Err(h.err("ASCII PGM (P2) is not supported; use binary P5")),
        _ => return Err(h.err("missing P5 magic number")),
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(h.err(format!("image size {width}x{height} is empty")));
    }
    if maxval != 255 {
        return Err(h.err(format!("maxval {maxval} is not supported; expected 255")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected whitespace after maxval"));
    }
    h.pos += 1;
    let need = width * height;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        h.pos = bytes.len();
        return Err(h.err(format!("truncated payload: {} of {need} pixel bytes", payload.len())));
    }
    Raster::new(height, width, 1, payload[..need].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    decode_pgm(&read(path)?, path)
}

pub fn save_pgm(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_pgm(raster)?)
}

/// Loads a mask stored as 0/255, binarizing at 128.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Raster> {
    let r = load_pgm(path)?;
    let data = r.data.iter().map(|&v| u8::from(v >= 128)).collect();
    Raster::new(r.height, r.width, 1, data)
}

/// Saves a 0/1 mask as 0/255.
pub fn save_mask(mask: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let data = mask.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    save_pgm(&Raster::new(mask.height, mask.width, 1, data)?, path)
}

fn resolve(base: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a PGM, or a `.plan` file listing one PGM plane per line.
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    if path.extension().is_none_or(|e| e != "plan") {
        return load_pgm(path);
    }
    let text = String::from_utf8(read(path)?)
        .map_err(|_| Error::Data(format!("{}: plan file is not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let planes = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| load_pgm(resolve(base, l)))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = planes.first() else {
        return Err(Error::Data(format!("{}: plan lists no planes", path.display())));
    };
    let (h, w) = (first.height, first.width);
    if planes.iter().any(|p| (p.height, p.width) != (h, w)) {
        return Err(Error::Data(format!("{}: planes differ in size", path.display())));
    }
    let data = planes.iter().flat_map(|p| p.data.iter().copied()).collect();
    Raster::new(h, w, planes.len(), data)
}

/// Saves a one-channel raster as PGM. Multi-channel rasters must use a
/// `.plan` path; planes go next to it as `<stem>.<c>.pgm`.
pub fn save_image(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_none_or(|e| e != "plan") {
        return save_pgm(raster, path);
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("{}: bad plan file name", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut listing = String::new();
    for c in 0..raster.channels {
        let name = format!("{stem}.{c}.pgm");
        let plane = Raster::new(raster.height, raster.width, 1, raster.plane(c).to_vec())?;
        save_pgm(&plane, dir.join(&name))?;
        listing.push_str(&name);
        listing.push('\n');
    }
    write(path, listing.as_bytes())
}

// ---------------------------------------------------------------- manifests

/// Reads `image<TAB>mask` lines; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = String::from_utf8(read(path)?)
        .map_err(|_| Error::Data(format!("{}: manifest is not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split('\t').collect::<Vec<_>>()[..] {
            [img, mask] => Ok((resolve(base, img), resolve(base, mask))),
            _ => Err(Error::Data(format!(
                "{}:{}: expected image<TAB>mask",
                path.display(),
                i + 1
            ))),
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (img, mask) in entries {
        text.push_str(img);
        text.push('\t');
        text.push_str(mask);
        text.push('\n');
    }
    write(path.as_ref(), text.as_bytes())
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<Sample>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|(img, mask)| Sample::new(load_image(&img)?, load_mask(&mask)?))
        .collect()
}

/// Writes `count` synthetic samples plus `manifest.tsv` into `dir`.
pub fn write_synthetic_dataset(dir: impl AsRef<Path>, cfg: &SyntheticRoadConfig, count: usize) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for (i, s) in generate_set(cfg, count)?.iter().enumerate() {
        let (img, mask) = (format!("image_{i:04}.pgm"), format!("mask_{i:04}.pgm"));
        save_pgm(&s.image, dir.join(&img))?;
        save_mask(&s.mask, dir.join(&mask))?;
        entries.push((img, mask));
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- tiling and splits

fn tile_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut at = 0;
    loop {
        if at + tile >= extent {
            origins.push(extent - tile);
            return origins;
        }
        origins.push(at);
        at += stride;
    }
}

/// Row-major sliding tiles; the last row and column are clamped to the
/// image edge so every pixel is covered. A stride beyond the tile size
/// would leave gaps and is rejected.
pub fn tile(raster: &Raster, tile: usize, stride: usize) -> Result<Vec<((usize, usize), Raster)>> {
    if tile == 0 || stride == 0 || stride > tile || tile > raster.height || tile > raster.width {
        return Err(Error::Data(format!(
            "cannot cut {tile}px tiles at stride {stride} from {}x{}",
            raster.height, raster.width
        )));
    }
    let mut out = Vec::new();
    for &y in &tile_origins(raster.height, tile, stride) {
        for &x in &tile_origins(raster.width, tile, stride) {
            out.push(((y, x), raster.crop(y, x, tile, tile)?));
        }
    }
    Ok(out)
}

/// Tiles image and mask together.
pub fn tile_sample(sample: &Sample, size: usize, stride: usize) -> Result<Vec<Sample>> {
    let images = tile(&sample.image, size, stride)?;
    let masks = tile(&sample.mask, size, stride)?;
    images
        .into_iter()
        .zip(masks)
        .map(|((_, i), (_, m))| Sample::new(i, m))
        .collect()
}

/// Seeded shuffle into ⌊0.8n⌋ / ⌊0.1n⌋ / remainder.
pub fn split_811<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 10 {
        return Err(Error::Data(format!(
            "an 8:1:1 split needs at least 10 samples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Xoshiro256StarStar::seed_from_u64(seed));
    let (n_train, n_val) = (n * 8 / 10, n / 10);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}
