//! Synthetic component-fault detection data.
//!
//! Each image has a textured background with optional distractor clutter,
//! plus up to four components placed one per image quadrant. A component is a
//! rectangular bracket with a small key at its centre; a faulty component
//! has the key missing or knocked towards a corner. Class 0 is normal,
//! class 1 is faulty.
//!
//! Layout on disk: `images/{id}.png`, `annotations.jsonl` (one object per
//! line) and `meta.json`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::data::{normalize_channels, Sample, Split};
use crate::error::{Error, Result};
use crate::label_encoder::LabelDescriptor;

pub const FORMAT_VERSION: u32 = 1;
pub const NORMAL: usize = 0;
pub const FAULT: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub first_id: u64,
    pub count: usize,
}

impl SplitRange {
    pub fn contains(&self, id: u64) -> bool {
        id >= self.first_id && id < self.first_id + self.count as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format_version: u32,
    pub seed: u64,
    pub config: SynthConfig,
    pub train: SplitRange,
    pub test: SplitRange,
}

impl Meta {
    pub fn range(&self, split: Split) -> SplitRange {
        match split {
            Split::Train => self.train,
            Split::Test => self.test,
        }
    }
}

/// Counts written by [`generate`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub images: usize,
    pub objects: usize,
    pub normal: usize,
    pub fault: usize,
}

/// An RGB raster with its annotations, before normalisation.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub labels: Vec<LabelDescriptor>,
}

fn image_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id.wrapping_add(1));
    rng
}

struct Canvas {
    size: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let n = self.size as i64;
        for y in y0.max(0)..y1.min(n) {
            for x in x0.max(0)..x1.min(n) {
                let p = (y as usize * self.size + x as usize) * 3;
                self.rgb[p..p + 3].copy_from_slice(&color);
            }
        }
    }

    fn frame(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, t: i64, color: [u8; 3]) {
        self.fill_rect(x0, y0, x1, y0 + t, color);
        self.fill_rect(x0, y1 - t, x1, y1, color);
        self.fill_rect(x0, y0, x0 + t, y1, color);
        self.fill_rect(x1 - t, y0, x1, y1, color);
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i32) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8)
}

/// Renders one image; deterministic in `(cfg.seed, image_id)`.
pub fn render(cfg: &SynthConfig, image_id: u64) -> Rendered {
    let mut rng = image_rng(cfg.seed, image_id);
    let n = cfg.image_size;
    let s = n as f64;

    // Background: low-frequency stripes plus per-pixel noise.
    let base = [
        rng.gen_range(60..110u8),
        rng.gen_range(60..110u8),
        rng.gen_range(60..110u8),
    ];
    let fx = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / s;
    let fy = rng.gen_range(1.0..4.0) * std::f64::consts::TAU / s;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut rgb = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let wave = 18.0 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-12.0..12.0);
                rgb[(y * n + x) * 3 + c] = (base[c] as f64 + wave + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
    let mut canvas = Canvas { size: n, rgb };

    // Clutter: thin bars and blobs that never form a bracket around a key.
    let distractors = (cfg.clutter * 8.0).round() as usize;
    for _ in 0..distractors {
        let color = jitter(&mut rng, [150, 140, 120], 60);
        let x = rng.gen_range(0..n) as i64;
        let y = rng.gen_range(0..n) as i64;
        let t = (n / 64).max(1) as i64;
        if rng.gen_bool(0.5) {
            let len = rng.gen_range(n / 8..n / 3) as i64;
            if rng.gen_bool(0.5) {
                canvas.fill_rect(x, y, x + len, y + t, color);
            } else {
                canvas.fill_rect(x, y, x + t, y + len, color);
            }
        } else {
            let r = rng.gen_range(n / 32..n / 12).max(1) as i64;
            canvas.fill_rect(x, y, x + r, y + r, color);
        }
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(&mut rng);
    let half = n / 2;
    let min_side = (0.25 * s).ceil() as usize;
    let max_side = ((0.45 * s).floor() as usize).max(min_side);
    let bracket_color = jitter(&mut rng, [200, 200, 210], 30);
    let key_color = [230, 60, 40];
    let mut labels = Vec::with_capacity(count);
    for &q in quadrants.iter().take(count) {
        let w = rng.gen_range(min_side..=max_side);
        let h = rng.gen_range(min_side..=max_side);
        let ox = (q % 2) * half;
        let oy = (q / 2) * half;
        let x0 = ox + rng.gen_range(0..=half - w);
        let y0 = oy + rng.gen_range(0..=half - h);
        let (x1, y1) = (x0 + w, y0 + h);
        let fault = rng.gen_bool(cfg.fault_rate);
        let t = (w.min(h) / 8).max(1) as i64;
        canvas.frame(x0 as i64, y0 as i64, x1 as i64, y1 as i64, t, bracket_color);
        let k = (w.min(h) / 4).max(2) as i64;
        let (cx, cy) = ((x0 + x1) as i64 / 2, (y0 + y1) as i64 / 2);
        let key_at = if !fault {
            Some((cx - k / 2, cy - k / 2))
        } else if rng.gen_bool(0.5) {
            None
        } else {
            let dx = if rng.gen_bool(0.5) { -1 } else { 1 };
            let dy = if rng.gen_bool(0.5) { -1 } else { 1 };
            let reach_x = (w as i64 / 2 - t - k).max(0);
            let reach_y = (h as i64 / 2 - t - k).max(0);
            Some((cx - k / 2 + dx * reach_x, cy - k / 2 + dy * reach_y))
        };
        if let Some((kx, ky)) = key_at {
            canvas.fill_rect(kx, ky, kx + k, ky + k, key_color);
        }
        labels.push(LabelDescriptor::new(
            [x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s],
            if fault { FAULT } else { NORMAL },
        ));
    }
    Rendered {
        size: n,
        rgb: canvas.rgb,
        labels,
    }
}

fn write_png(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e.into()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e.into()))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let bad = |e: png::DecodingError| Error::Input(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Input(format!("{}: expected 8-bit RGB", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn image_path(dir: &Path, image_id: u64) -> PathBuf {
    dir.join("images").join(format!("{image_id}.png"))
}

/// Writes a full dataset to `dir`, which must not already hold one unless
/// `overwrite` is set.
pub fn generate(cfg: &SynthConfig, dir: &Path, overwrite: bool) -> Result<Summary> {
    cfg.validate()?;
    let meta_path = dir.join("meta.json");
    if meta_path.exists() && !overwrite {
        return Err(Error::Input(format!(
            "{} already contains a dataset; pass --overwrite to replace it",
            dir.display()
        )));
    }
    let images = dir.join("images");
    if overwrite && images.exists() {
        fs::remove_dir_all(&images).map_err(|e| Error::io(format!("clearing {}", images.display()), e))?;
    }
    fs::create_dir_all(&images).map_err(|e| Error::io(format!("creating {}", images.display()), e))?;

    let ann_path = dir.join("annotations.jsonl");
    let file = File::create(&ann_path).map_err(|e| Error::io(format!("creating {}", ann_path.display()), e))?;
    let mut ann = BufWriter::new(file);
    let total = cfg.train_count + cfg.test_count;
    let mut summary = Summary::default();
    for id in 0..total as u64 {
        let r = render(cfg, id);
        write_png(&image_path(dir, id), r.size, &r.rgb)?;
        for l in &r.labels {
            let rec = AnnotationRecord {
                image_id: id,
                class_id: l.class_id,
                bbox: l.bbox,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(ann, "{line}").map_err(|e| Error::io("writing annotations", e))?;
            summary.objects += 1;
            if l.class_id == FAULT {
                summary.fault += 1;
            } else {
                summary.normal += 1;
            }
        }
        summary.images += 1;
    }
    ann.flush().map_err(|e| Error::io("writing annotations", e))?;

    let meta = Meta {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        config: cfg.clone(),
        train: SplitRange {
            first_id: 0,
            count: cfg.train_count,
        },
        test: SplitRange {
            first_id: cfg.train_count as u64,
            count: cfg.test_count,
        },
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text).map_err(|e| Error::io(format!("writing {}", meta_path.display()), e))?;
    Ok(summary)
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.clone(),
        index: 0,
        reason: e.to_string(),
    })?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            path,
            found,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Record {
        path,
        index: 0,
        reason: e.to_string(),
    })
}

/// All annotation records, validated, in file order.
pub fn read_annotations(dir: &Path, num_classes: usize) -> Result<Vec<AnnotationRecord>> {
    let path = dir.join("annotations.jsonl");
    let file = File::open(&path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Record {
            path: path.clone(),
            index,
            reason,
        };
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        LabelDescriptor::new(rec.bbox, rec.class_id)
            .validate(num_classes)
            .map_err(|e| bad(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads one split in ascending image-id order with normalised pixels.
pub fn load(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let meta = read_meta(dir)?;
    let range = meta.range(split);
    let records = read_annotations(dir, meta.config.num_classes)?;
    let mut labels: Vec<Vec<LabelDescriptor>> = vec![Vec::new(); range.count];
    for r in records.iter().filter(|r| range.contains(r.image_id)) {
        labels[(r.image_id - range.first_id) as usize].push(LabelDescriptor::new(r.bbox, r.class_id));
    }
    let mut out = Vec::with_capacity(range.count);
    for (k, labels) in labels.into_iter().enumerate() {
        let id = range.first_id + k as u64;
        let (w, h, rgb) = read_png(&image_path(dir, id))?;
        let mut px: Vec<f32> = rgb.iter().map(|&v| f32::from(v) / 255.0).collect();
        normalize_channels(&mut px, 3);
        out.push(Sample {
            image_id: id,
            split,
            height: h,
            width: w,
            channels: 3,
            pixels: Arc::from(px),
            labels,
        });
    }
    Ok(out)
}
