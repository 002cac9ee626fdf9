//! Datasets: PNG image/mask directories, preprocessing (bilinear resize,
//! non-overlapping tiling) and a deterministic synthetic cell generator.
//!
//! On-disk layout, shared by real and synthetic data:
//!
//! ```text
//! root/
//!   images/<stem>.png   RGB (grayscale and palette PNGs are expanded)
//!   masks/<stem>.png    colors mapped to classes through a palette
//!   index.txt           one `stem<TAB>images/..<TAB>masks/..` line per sample
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::bilinear_resize;

pub const INDEX_FILE: &str = "index.txt";

/// One image with its label mask. `image` is channel-major `(3, h, w)` with
/// values in `[0, 1]`; `mask` is row-major `(h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

/// Stacked tensors for a minibatch.
#[derive(Debug, Clone)]
pub struct SegBatch {
    /// `(n, 3, H, W)` in `[0, 1]`.
    pub images: Tensor,
    pub labels: LabelMap,
}

impl SegBatch {
    pub fn len(&self) -> usize {
        self.labels.dims().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<SegBatch> {
        let first = indices
            .first()
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut pixels = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = &self.samples[i];
            if (s.height, s.width) != (h, w) {
                return Err(Error::Data(format!(
                    "`{}` is {}x{}, batch expects {h}x{w}",
                    s.stem, s.height, s.width
                )));
            }
            pixels.extend_from_slice(&s.image);
            labels.extend_from_slice(&s.mask);
        }
        let n = indices.len();
        let images = Tensor::from_vec(pixels, (n, 3, h, w), &Device::Cpu)?.to_dtype(dtype)?;
        let labels = LabelMap::new(labels, n, h, w, self.num_classes, dtype)?;
        Ok(SegBatch { images, labels })
    }

    /// Pixel count per class over all masks.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.num_classes];
        for s in &self.samples {
            for &l in &s.mask {
                hist[l as usize] += 1;
            }
        }
        hist
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub color: [u8; 3],
    pub class: u8,
}

/// Mask color to class index mapping. Gray levels are colors with equal
/// channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Palette(pub Vec<PaletteEntry>);

impl Default for Palette {
    /// Black background, gray cytoplasm, white nucleus.
    fn default() -> Self {
        Palette(vec![
            PaletteEntry { color: [0, 0, 0], class: 0 },
            PaletteEntry { color: [128, 128, 128], class: 1 },
            PaletteEntry { color: [255, 255, 255], class: 2 },
        ])
    }
}

impl Palette {
    pub fn class_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.0.iter().find(|e| e.color == rgb).map(|e| e.class)
    }

    pub fn color_of(&self, class: u8) -> Option<[u8; 3]> {
        self.0.iter().find(|e| e.class == class).map(|e| e.color)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for class in 0..num_classes as u8 {
            if self.color_of(class).is_none() {
                return Err(Error::Config(format!("palette has no color for class {class}")));
            }
        }
        if let Some(e) = self.0.iter().find(|e| e.class as usize >= num_classes) {
            return Err(Error::Config(format!(
                "palette maps {:?} to class {} but there are only {num_classes} classes",
                e.color, e.class
            )));
        }
        Ok(())
    }
}

/// Decoded 8-bit RGB raster.
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn read_png_rgb(path: &Path) -> Result<Rgb8> {
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(img_err(format!("unsupported color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in src.chunks_exact(channels) {
        match channels {
            1 | 2 => data.extend_from_slice(&[px[0], px[0], px[0]]),
            _ => data.extend_from_slice(&px[..3]),
        }
    }
    Ok(Rgb8 {
        width: w,
        height: h,
        data,
    })
}

/// Writes an 8-bit PNG (1 or 3 channels) with optional `tEXt` metadata.
pub fn write_png(path: &Path, width: usize, height: usize, channels: usize, data: &[u8], text: &[(&str, &str)]) -> Result<()> {
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(if channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(|e| img_err(e.to_string()))?;
    }
    let mut writer = enc.write_header().map_err(|e| img_err(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| img_err(e.to_string()))?;
    writer.finish().map_err(|e| img_err(e.to_string()))?;
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut stems = BTreeSet::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(stems),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    Ok(stems)
}

fn load_pair(image_path: &Path, mask_path: &Path, stem: &str, palette: &Palette) -> Result<Sample> {
    let img = read_png_rgb(image_path)?;
    let mask = read_png_rgb(mask_path)?;
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::Data(format!(
            "`{stem}`: image is {}x{} but mask is {}x{}",
            img.width, img.height, mask.width, mask.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut image = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            image[c * h * w + p] = img.data[p * 3 + c] as f32 / 255.0;
        }
    }
    let mut labels = Vec::with_capacity(h * w);
    for (p, px) in mask.data.chunks_exact(3).enumerate() {
        let rgb = [px[0], px[1], px[2]];
        let class = palette.class_of(rgb).ok_or_else(|| {
            Error::Data(format!(
                "{}: unknown mask color {rgb:?} at (row {}, col {})",
                mask_path.display(),
                p / w,
                p % w
            ))
        })?;
        labels.push(class);
    }
    Ok(Sample {
        stem: stem.to_string(),
        height: h,
        width: w,
        image,
        mask: labels,
    })
}

/// Loads every `<stem>.png` pair from two directories, in lexicographic stem
/// order.
pub fn load_image_mask_dir(images_dir: &Path, masks_dir: &Path, palette: &Palette, num_classes: usize) -> Result<Dataset> {
    palette.validate(num_classes)?;
    let images = png_stems(images_dir)?;
    let masks = png_stems(masks_dir)?;
    let unpaired: Vec<&String> = images.symmetric_difference(&masks).collect();
    if !unpaired.is_empty() {
        return Err(Error::Data(format!("unpaired image/mask stems: {unpaired:?}")));
    }
    let samples = images
        .iter()
        .map(|stem| {
            load_pair(
                &images_dir.join(format!("{stem}.png")),
                &masks_dir.join(format!("{stem}.png")),
                stem,
                palette,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { num_classes, samples })
}

/// Loads a dataset root: through `index.txt` when present, otherwise from
/// the `images/` and `masks/` subdirectories.
pub fn load_dataset(root: &Path, palette: &Palette, num_classes: usize) -> Result<Dataset> {
    let index = root.join(INDEX_FILE);
    if !index.exists() {
        return load_image_mask_dir(&root.join("images"), &root.join("masks"), palette, num_classes);
    }
    palette.validate(num_classes)?;
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "{}:{}: expected `stem<TAB>image<TAB>mask`",
                index.display(),
                lineno + 1
            )));
        }
        samples.push(load_pair(&root.join(fields[1]), &root.join(fields[2]), fields[0], palette)?);
    }
    Ok(Dataset { num_classes, samples })
}

/// Writes the dataset in the standard layout. Image values are quantized to
/// 8 bits; masks are colored through `palette`.
pub fn save_dataset(root: &Path, ds: &Dataset, palette: &Palette, digest: Option<&str>) -> Result<()> {
    palette.validate(ds.num_classes)?;
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for d in [&images_dir, &masks_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let text: Vec<(&str, &str)> = digest.map(|d| vec![("config_digest", d)]).unwrap_or_default();
    let index_path = root.join(INDEX_FILE);
    let file = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut index = BufWriter::new(file);
    if let Some(d) = digest {
        writeln!(index, "# config_digest {d}").map_err(|e| Error::io(&index_path, e))?;
    }
    for s in &ds.samples {
        let (h, w) = (s.height, s.width);
        let mut rgb = vec![0u8; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                rgb[p * 3 + c] = (s.image[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let mut mask = Vec::with_capacity(3 * h * w);
        for &l in &s.mask {
            mask.extend_from_slice(&palette.color_of(l).expect("validated palette"));
        }
        let image_rel = format!("images/{}.png", s.stem);
        let mask_rel = format!("masks/{}.png", s.stem);
        write_png(&root.join(&image_rel), w, h, 3, &rgb, &text)?;
        write_png(&root.join(&mask_rel), w, h, 3, &mask, &text)?;
        writeln!(index, "{}\t{image_rel}\t{mask_rel}", s.stem).map_err(|e| Error::io(&index_path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

/// Bilinear for images, nearest-neighbour for masks.
pub fn resize_dataset(ds: &Dataset, out_h: usize, out_w: usize) -> Result<Dataset> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("resize target {out_h}x{out_w} is empty")));
    }
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let t = Tensor::from_vec(s.image.clone(), (1, 3, s.height, s.width), &Device::Cpu)?;
            let image = bilinear_resize(&t, out_h, out_w)?
                .clamp(0f32, 1f32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            let near = |o: usize, inl: usize, outl: usize| (((o as f64 + 0.5) * inl as f64 / outl as f64) as usize).min(inl - 1);
            let mut mask = Vec::with_capacity(out_h * out_w);
            for y in 0..out_h {
                let sy = near(y, s.height, out_h);
                for x in 0..out_w {
                    mask.push(s.mask[sy * s.width + near(x, s.width, out_w)]);
                }
            }
            Ok(Sample {
                stem: s.stem.clone(),
                height: out_h,
                width: out_w,
                image,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        num_classes: ds.num_classes,
        samples,
    })
}

fn crop(s: &Sample, top: usize, left: usize, h: usize, w: usize, stem: String) -> Sample {
    let mut image = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in top..top + h {
            let row = c * s.height * s.width + y * s.width;
            image.extend_from_slice(&s.image[row + left..row + left + w]);
        }
    }
    let mut mask = Vec::with_capacity(h * w);
    for y in top..top + h {
        mask.extend_from_slice(&s.mask[y * s.width + left..y * s.width + left + w]);
    }
    Sample {
        stem,
        height: h,
        width: w,
        image,
        mask,
    }
}

/// Splits every sample into non-overlapping `tile x tile` crops, row-major.
pub fn tile_dataset(ds: &Dataset, tile: usize) -> Result<Dataset> {
    if tile == 0 {
        return Err(Error::Config("tile size must be positive".into()));
    }
    let mut samples = Vec::new();
    for s in &ds.samples {
        if s.height % tile != 0 || s.width % tile != 0 {
            return Err(Error::Data(format!(
                "`{}` is {}x{}, not divisible into {tile}x{tile} tiles",
                s.stem, s.height, s.width
            )));
        }
        for r in 0..s.height / tile {
            for c in 0..s.width / tile {
                samples.push(crop(s, r * tile, c * tile, tile, tile, format!("{}_r{r}_c{c}", s.stem)));
            }
        }
    }
    Ok(Dataset {
        num_classes: ds.num_classes,
        samples,
    })
}

/// Inverse of [`tile_dataset`] for one image: `tiles` in row-major order.
pub fn untile(tiles: &[Sample], rows: usize, cols: usize, stem: &str) -> Result<Sample> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::Data(format!("{} tiles cannot form a {rows}x{cols} grid", tiles.len())));
    }
    let (th, tw) = (tiles[0].height, tiles[0].width);
    let (h, w) = (rows * th, cols * tw);
    let mut image = vec![0f32; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for (i, t) in tiles.iter().enumerate() {
        let (top, left) = ((i / cols) * th, (i % cols) * tw);
        for y in 0..th {
            for x in 0..tw {
                mask[(top + y) * w + left + x] = t.mask[y * tw + x];
                for c in 0..3 {
                    image[c * h * w + (top + y) * w + left + x] = t.image[c * th * tw + y * tw + x];
                }
            }
        }
    }
    Ok(Sample {
        stem: stem.to_string(),
        height: h,
        width: w,
        image,
        mask,
    })
}

/// Parameters of the synthetic white-blood-cell-like generator.
///
/// Each image holds one cell: a cytoplasm ellipse (class 1) containing an
/// offset nucleus ellipse (class 2), on a background (class 0) strewn with
/// round distractor blobs that are labelled background but rendered with the
/// cytoplasm's color statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_images: usize,
    pub seed: u64,
    pub cytoplasm_radius: [u32; 2],
    pub nucleus_radius: [u32; 2],
    pub nucleus_offset: u32,
    pub distractors: [u32; 2],
    pub distractor_radius: [u32; 2],
    /// Uniform per-channel noise in `[-noise, noise]` gray levels.
    pub noise: u8,
    pub background_rgb: [u8; 3],
    pub cytoplasm_rgb: [u8; 3],
    pub nucleus_rgb: [u8; 3],
    /// Per-image `[min, max]` pixel share of each class.
    pub class_share_bounds: [[f64; 2]; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_images: 80,
            seed: 0,
            cytoplasm_radius: [14, 20],
            nucleus_radius: [5, 8],
            nucleus_offset: 3,
            distractors: [2, 4],
            distractor_radius: [5, 8],
            noise: 12,
            background_rgb: [232, 218, 224],
            cytoplasm_rgb: [196, 150, 184],
            nucleus_rgb: [108, 62, 142],
            class_share_bounds: [[0.3, 0.98], [0.03, 0.6], [0.01, 0.3]],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, r) in [
            ("cytoplasm_radius", self.cytoplasm_radius),
            ("nucleus_radius", self.nucleus_radius),
            ("distractor_radius", self.distractor_radius),
            ("distractors", self.distractors),
        ] {
            if r[0] > r[1] {
                return bad(format!("synth.{name} range {r:?} is reversed"));
            }
        }
        if self.nucleus_radius[0] == 0 || self.cytoplasm_radius[0] == 0 {
            return bad("synth radii must be positive".into());
        }
        // The nucleus lies in a disc of radius r_n around a centre displaced by
        // at most offset*sqrt(2); keep that disc (plus one pixel) inside the
        // smallest cytoplasm disc.
        let reach = self.nucleus_radius[1] as f64 + self.nucleus_offset as f64 * std::f64::consts::SQRT_2 + 1.0;
        if reach > self.cytoplasm_radius[0] as f64 {
            return bad(format!(
                "degenerate geometry: nucleus radius {} with offset {} does not fit inside cytoplasm radius {}",
                self.nucleus_radius[1], self.nucleus_offset, self.cytoplasm_radius[0]
            ));
        }
        if 2 * self.cytoplasm_radius[1] as usize + 2 > self.image_size {
            return bad(format!(
                "cytoplasm radius {} does not fit a {} pixel image",
                self.cytoplasm_radius[1], self.image_size
            ));
        }
        for (c, b) in self.class_share_bounds.iter().enumerate() {
            if !(0.0..=1.0).contains(&b[0]) || !(0.0..=1.0).contains(&b[1]) || b[0] > b[1] {
                return bad(format!("synth.class_share_bounds[{c}] = {b:?} is not a valid range"));
            }
        }
        Ok(())
    }
}

fn inside_ellipse(x: i64, y: i64, cx: i64, cy: i64, a: i64, b: i64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    dx * dx * b * b + dy * dy * a * a <= a * a * b * b
}

fn render_one(spec: &SynthSpec, rng: &mut ChaCha8Rng, stem: String) -> Option<Sample> {
    let n = spec.image_size as i64;
    let mut mask = vec![0u8; (n * n) as usize];
    // Painter order: distractors, then the cell on top.
    let mut source = vec![0u8; (n * n) as usize]; // 0 bg, 1 cytoplasm-like, 2 nucleus
    let count = rng.random_range(spec.distractors[0]..=spec.distractors[1]);
    for _ in 0..count {
        let r = rng.random_range(spec.distractor_radius[0]..=spec.distractor_radius[1]) as i64;
        let cx = rng.random_range(0..n);
        let cy = rng.random_range(0..n);
        for y in (cy - r).max(0)..(cy + r + 1).min(n) {
            for x in (cx - r).max(0)..(cx + r + 1).min(n) {
                if inside_ellipse(x, y, cx, cy, r, r) {
                    source[(y * n + x) as usize] = 1;
                }
            }
        }
    }
    let a = rng.random_range(spec.cytoplasm_radius[0]..=spec.cytoplasm_radius[1]) as i64;
    let b = rng.random_range(spec.cytoplasm_radius[0]..=spec.cytoplasm_radius[1]) as i64;
    let cx = rng.random_range(a + 1..=n - a - 2);
    let cy = rng.random_range(b + 1..=n - b - 2);
    let na = rng.random_range(spec.nucleus_radius[0]..=spec.nucleus_radius[1]) as i64;
    let nb = rng.random_range(spec.nucleus_radius[0]..=spec.nucleus_radius[1]) as i64;
    let off = spec.nucleus_offset as i64;
    let ncx = cx + rng.random_range(-off..=off);
    let ncy = cy + rng.random_range(-off..=off);
    for y in 0..n {
        for x in 0..n {
            let p = (y * n + x) as usize;
            if inside_ellipse(x, y, cx, cy, a, b) {
                let nucleus = inside_ellipse(x, y, ncx, ncy, na, nb);
                mask[p] = if nucleus { 2 } else { 1 };
                source[p] = mask[p];
            }
        }
    }

    let total = (n * n) as f64;
    for (class, bounds) in spec.class_share_bounds.iter().enumerate() {
        let share = mask.iter().filter(|&&l| l as usize == class).count() as f64 / total;
        if share < bounds[0] || share > bounds[1] {
            return None;
        }
    }

    let npx = (n * n) as usize;
    let mut image = vec![0f32; 3 * npx];
    let amp = spec.noise as i32;
    for p in 0..npx {
        let base = match source[p] {
            0 => spec.background_rgb,
            1 => spec.cytoplasm_rgb,
            _ => spec.nucleus_rgb,
        };
        for c in 0..3 {
            let jitter = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
            let v = (base[c] as i32 + jitter).clamp(0, 255);
            image[c * npx + p] = v as f32 / 255.0;
        }
    }
    Some(Sample {
        stem,
        height: spec.image_size,
        width: spec.image_size,
        image,
        mask,
    })
}

/// Deterministic synthetic dataset; identical bits for identical specs.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let stem = format!("synth_{i:04}");
        let sample = (0..256)
            .find_map(|_| render_one(spec, &mut rng, stem.clone()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "could not draw image {i} within class_share_bounds {:?}",
                    spec.class_share_bounds
                ))
            })?;
        samples.push(sample);
    }
    Ok(Dataset {
        num_classes: 3,
        samples,
    })
}

pub fn ensure_dir(p: &Path) -> Result<PathBuf> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    Ok(p.to_path_buf())
}
