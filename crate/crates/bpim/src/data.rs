//! Dataset ingestion, letterboxing, and the deterministic synthetic
//! small-object dataset used for desk-scale training runs.
//!
//! On-disk layout: `images/*.png` plus `labels/*.txt` with one
//! `class cx cy w h` line per box (normalized center format, LF endings),
//! and a `dataset.json` manifest carrying class names and counts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Arr;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

pub const CLASS_NAMES: [&str; 2] = ["disc", "square"];

/// One image with its ground truth, pixels in [0,1], layout [3, h, w].
pub struct AnnotatedImage<T: Scalar> {
    pub image: Arr<T>,
    pub boxes: Vec<(usize, BBox<T>)>,
    pub source_id: String,
}

pub struct Dataset<T: Scalar> {
    pub items: Vec<AnnotatedImage<T>>,
    pub class_names: Vec<String>,
    /// Per-line diagnostics for anything skipped during loading.
    pub warnings: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub num_images: usize,
    pub num_boxes: usize,
    pub image_size: usize,
    pub seed: Option<u64>,
}

/// Parameters of the synthetic shape dataset. The same spec always renders
/// byte-identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_images: usize,
    pub image_size: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object extents in pixels (small-object regime).
    pub object_size_px: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            num_images: 16,
            image_size: 256,
            objects_per_image: (2, 5),
            object_size_px: (6, 24),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.num_images == 0 {
            return Err(Error::Config("num_images must be >= 1".into()));
        }
        let (lo, hi) = self.object_size_px;
        if lo < 2 || hi < lo || hi >= self.image_size / 2 {
            return Err(Error::Config(format!(
                "object_size_px range ({lo}, {hi}) invalid for image_size {}",
                self.image_size
            )));
        }
        let (olo, ohi) = self.objects_per_image;
        if olo == 0 || ohi < olo {
            return Err(Error::Config(
                "objects_per_image range must be >= 1 and ordered".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// label parsing
// ---------------------------------------------------------------------------

/// Parse one label line: `class cx cy w h [conf]`. The optional trailing
/// confidence lets detection outputs round-trip through the same parser.
pub fn parse_label_line<T: Scalar>(line: &str) -> std::result::Result<(usize, BBox<T>, Option<T>), String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 && fields.len() != 6 {
        return Err(format!("expected 5 or 6 fields, got {}", fields.len()));
    }
    let class: usize = fields[0]
        .parse()
        .map_err(|_| format!("bad class index {:?}", fields[0]))?;
    let mut vals = [0f64; 4];
    for (k, f) in fields[1..5].iter().enumerate() {
        vals[k] = f
            .parse()
            .map_err(|_| format!("bad numeric field {f:?}"))?;
    }
    let (cx, cy, w, h) = (vals[0], vals[1], vals[2], vals[3]);
    if !(w > 0.0 && h > 0.0) {
        return Err(format!("non-positive box size {w}x{h}"));
    }
    let eps = 1e-6;
    if cx - w / 2.0 < -eps || cx + w / 2.0 > 1.0 + eps || cy - h / 2.0 < -eps || cy + h / 2.0 > 1.0 + eps
    {
        return Err("box extends outside the unit frame".into());
    }
    let conf = if fields.len() == 6 {
        let c: f64 = fields[5]
            .parse()
            .map_err(|_| format!("bad confidence {:?}", fields[5]))?;
        Some(T::c(c))
    } else {
        None
    };
    Ok((class, BBox::new(T::c(cx), T::c(cy), T::c(w), T::c(h)), conf))
}

pub fn format_label_line<T: Scalar>(class: usize, b: &BBox<T>, conf: Option<T>) -> String {
    let base = format!(
        "{class} {:.6} {:.6} {:.6} {:.6}",
        b.cx.to_f64_lossy(),
        b.cy.to_f64_lossy(),
        b.w.to_f64_lossy(),
        b.h.to_f64_lossy()
    );
    match conf {
        Some(c) => format!("{base} {:.6}", c.to_f64_lossy()),
        None => base,
    }
}

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

fn decode_png<T: Scalar>(path: &Path) -> Result<Arr<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Arr::zeros(IxDyn(&[3, h, w]));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = T::c(p.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

pub fn encode_png<T: Scalar>(image: &Arr<T>, path: &Path) -> Result<()> {
    let s = image.shape();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0], 3);
    let (h, w) = (s[1], s[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (image[[c, y, x]].to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Load `images/*.png` + `labels/*.txt`, order-stable by sorted file stem.
/// Malformed or out-of-range label lines are skipped with a diagnostic;
/// a missing label file yields an image with zero boxes plus a warning.
pub fn load_dataset<T: Scalar>(root: &Path) -> Result<Dataset<T>> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing images/ directory under {}",
            root.display()
        )));
    }
    let mut image_paths: Vec<PathBuf> = fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no .png images under {}",
            images_dir.display()
        )));
    }

    let manifest: Option<DatasetManifest> = fs::read_to_string(root.join("dataset.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());

    let mut items = Vec::with_capacity(image_paths.len());
    let mut warnings = Vec::new();
    let mut max_class = 0usize;
    for path in &image_paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let image = decode_png::<T>(path)?;
        let label_path = root.join("labels").join(format!("{stem}.txt"));
        let mut boxes = Vec::new();
        match fs::read_to_string(&label_path) {
            Ok(text) => {
                for (ln, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match parse_label_line::<T>(line) {
                        Ok((class, bbox, _conf)) => {
                            max_class = max_class.max(class);
                            boxes.push((class, bbox));
                        }
                        Err(msg) => warnings.push(format!(
                            "{}:{}: rejected line: {msg}",
                            label_path.display(),
                            ln + 1
                        )),
                    }
                }
            }
            Err(_) => warnings.push(format!(
                "{}: missing label file, treating as empty",
                label_path.display()
            )),
        }
        items.push(AnnotatedImage {
            image,
            boxes,
            source_id: stem,
        });
    }
    items.sort_by(|a, b| a.source_id.cmp(&b.source_id));

    let class_names = match manifest {
        Some(m) => m.classes,
        None => (0..=max_class).map(|c| format!("class{c}")).collect(),
    };
    for item in &items {
        for (c, _) in &item.boxes {
            if *c >= class_names.len() {
                return Err(Error::Dataset(format!(
                    "{}: class index {} out of range for {} classes",
                    item.source_id,
                    c,
                    class_names.len()
                )));
            }
        }
    }
    Ok(Dataset {
        items,
        class_names,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// letterbox
// ---------------------------------------------------------------------------

/// Maps normalized boxes between the original frame and the padded square
/// frame. `apply` then `invert` is the identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LetterboxTransform {
    /// Resized content size in target pixels.
    pub content_w: f64,
    pub content_h: f64,
    /// Top-left corner of the content inside the target frame.
    pub pad_x: f64,
    pub pad_y: f64,
    pub target: f64,
}

impl LetterboxTransform {
    pub fn is_identity(&self) -> bool {
        self.pad_x == 0.0
            && self.pad_y == 0.0
            && self.content_w == self.target
            && self.content_h == self.target
    }

    pub fn apply<T: Scalar>(&self, b: &BBox<T>) -> BBox<T> {
        BBox::new(
            T::c((b.cx.to_f64_lossy() * self.content_w + self.pad_x) / self.target),
            T::c((b.cy.to_f64_lossy() * self.content_h + self.pad_y) / self.target),
            T::c(b.w.to_f64_lossy() * self.content_w / self.target),
            T::c(b.h.to_f64_lossy() * self.content_h / self.target),
        )
    }

    pub fn invert<T: Scalar>(&self, b: &BBox<T>) -> BBox<T> {
        BBox::new(
            T::c((b.cx.to_f64_lossy() * self.target - self.pad_x) / self.content_w),
            T::c((b.cy.to_f64_lossy() * self.target - self.pad_y) / self.content_h),
            T::c(b.w.to_f64_lossy() * self.target / self.content_w),
            T::c(b.h.to_f64_lossy() * self.target / self.content_h),
        )
    }
}

fn bilinear_sample<T: Scalar>(src: &Arr<T>, c: usize, x: f64, y: f64) -> T {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let x = x.clamp(0.0, w as f64 - 1.0);
    let y = y.clamp(0.0, h as f64 - 1.0);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (dx, dy) = (T::c(x - x0 as f64), T::c(y - y0 as f64));
    let one = T::one();
    let top = src[[c, y0, x0]] * (one - dx) + src[[c, y0, x1]] * dx;
    let bot = src[[c, y1, x0]] * (one - dx) + src[[c, y1, x1]] * dx;
    top * (one - dy) + bot * dy
}

/// Aspect-preserving bilinear resize onto a `target`x`target` canvas with
/// symmetric gray padding.
pub fn letterbox<T: Scalar>(image: &Arr<T>, target: usize) -> Result<(Arr<T>, LetterboxTransform)> {
    if target == 0 || target % 32 != 0 {
        return Err(Error::Config(format!(
            "letterbox target must be a positive multiple of 32, got {target}"
        )));
    }
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract("letterbox: image must be [3,h,w]".into()));
    }
    let (h, w) = (s[1], s[2]);
    let scale = (target as f64 / w as f64).min(target as f64 / h as f64);
    let rw = ((w as f64 * scale).round() as usize).clamp(1, target);
    let rh = ((h as f64 * scale).round() as usize).clamp(1, target);
    let pad_x = (target - rw) / 2;
    let pad_y = (target - rh) / 2;

    let gray = T::c(114.0 / 255.0);
    let mut out = Arr::from_elem(IxDyn(&[3, target, target]), gray);
    for c in 0..3 {
        for oy in 0..rh {
            let sy = (oy as f64 + 0.5) * (h as f64 / rh as f64) - 0.5;
            for ox in 0..rw {
                let sx = (ox as f64 + 0.5) * (w as f64 / rw as f64) - 0.5;
                out[[c, pad_y + oy, pad_x + ox]] = bilinear_sample(image, c, sx, sy);
            }
        }
    }
    Ok((
        out,
        LetterboxTransform {
            content_w: rw as f64,
            content_h: rh as f64,
            pad_x: pad_x as f64,
            pad_y: pad_y as f64,
            target: target as f64,
        },
    ))
}

/// Horizontal flip of an image and its boxes (optional train-time
/// augmentation; off by default).
pub fn hflip<T: Scalar>(item: &AnnotatedImage<T>) -> AnnotatedImage<T> {
    let mut image = item.image.clone();
    image.invert_axis(ndarray::Axis(2));
    AnnotatedImage {
        image,
        boxes: item
            .boxes
            .iter()
            .map(|(c, b)| (*c, BBox::new(T::one() - b.cx, b.cy, b.w, b.h)))
            .collect(),
        source_id: item.source_id.clone(),
    }
}

// ---------------------------------------------------------------------------
// synthetic generation
// ---------------------------------------------------------------------------

struct PlacedObject {
    class: usize,
    /// Pixel-space extent [x0, x1) x [y0, y1) of the rendered mask.
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn overlaps(a: &PlacedObject, b: &PlacedObject, margin: usize) -> bool {
    !(a.x1 + margin <= b.x0
        || b.x1 + margin <= a.x0
        || a.y1 + margin <= b.y0
        || b.y1 + margin <= a.y0)
}

/// Render the dataset to `out_dir` (images/, labels/, dataset.json).
/// Deterministic: one RNG stream seeded from the spec drives every draw.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("labels"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let mut total_boxes = 0usize;

    for idx in 0..spec.num_images {
        // muted textured background: base tint + linear ramp + pixel noise
        let base: [f64; 3] = [
            rng.random_range(0.25..0.55),
            rng.random_range(0.25..0.55),
            rng.random_range(0.25..0.55),
        ];
        let ramp_x = rng.random_range(-0.08..0.08);
        let ramp_y = rng.random_range(-0.08..0.08);
        let mut img = Arr::<f64>::zeros(IxDyn(&[3, size, size]));
        for y in 0..size {
            for x in 0..size {
                let ramp = ramp_x * x as f64 / size as f64 + ramp_y * y as f64 / size as f64;
                for c in 0..3 {
                    let noise = rng.random_range(-0.03..0.03);
                    img[[c, y, x]] = (base[c] + ramp + noise).clamp(0.0, 1.0);
                }
            }
        }

        let count = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
        let mut placed: Vec<PlacedObject> = Vec::new();
        for _ in 0..count {
            let class = rng.random_range(0..2usize);
            let extent = rng.random_range(spec.object_size_px.0..=spec.object_size_px.1);
            let mut attempt = 0;
            let slot = loop {
                attempt += 1;
                if attempt > 50 {
                    break None;
                }
                let x0 = rng.random_range(1..size - extent - 1);
                let y0 = rng.random_range(1..size - extent - 1);
                let cand = PlacedObject {
                    class,
                    x0,
                    y0,
                    x1: x0 + extent,
                    y1: y0 + extent,
                };
                if placed.iter().all(|p| !overlaps(p, &cand, 2)) {
                    break Some(cand);
                }
            };
            let Some(obj) = slot else { continue };

            // saturated class-specific colors against the muted background
            let color: [f64; 3] = if class == 0 {
                [
                    rng.random_range(0.75..1.0),
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.05..0.3),
                ]
            } else {
                [
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.2..0.5),
                    rng.random_range(0.75..1.0),
                ]
            };
            let (mut mnx, mut mny, mut mxx, mut mxy) = (usize::MAX, usize::MAX, 0usize, 0usize);
            for y in obj.y0..obj.y1 {
                for x in obj.x0..obj.x1 {
                    let inside = if class == 0 {
                        let r = extent as f64 / 2.0;
                        let cx = obj.x0 as f64 + r;
                        let cy = obj.y0 as f64 + r;
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        dx * dx + dy * dy <= r * r
                    } else {
                        true
                    };
                    if inside {
                        for c in 0..3 {
                            img[[c, y, x]] = color[c];
                        }
                        mnx = mnx.min(x);
                        mny = mny.min(y);
                        mxx = mxx.max(x);
                        mxy = mxy.max(y);
                    }
                }
            }
            if mnx == usize::MAX {
                continue; // nothing rasterized (cannot happen for extent >= 2)
            }
            placed.push(PlacedObject {
                class,
                x0: mnx,
                y0: mny,
                x1: mxx + 1,
                y1: mxy + 1,
            });
        }

        let stem = format!("img_{idx:04}");
        encode_png(&img, &out_dir.join("images").join(format!("{stem}.png")))?;
        let mut label = fs::File::create(out_dir.join("labels").join(format!("{stem}.txt")))?;
        for obj in &placed {
            // annotate the rendered pixel extent, normalized center format
            let w = (obj.x1 - obj.x0) as f64 / size as f64;
            let h = (obj.y1 - obj.y0) as f64 / size as f64;
            let cx = (obj.x0 + obj.x1) as f64 / 2.0 / size as f64;
            let cy = (obj.y0 + obj.y1) as f64 / 2.0 / size as f64;
            let line = format_label_line::<f64>(obj.class, &BBox::new(cx, cy, w, h), None);
            label.write_all(line.as_bytes())?;
            label.write_all(b"\n")?;
        }
        total_boxes += placed.len();
    }

    let manifest = DatasetManifest {
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        num_images: spec.num_images,
        num_boxes: total_boxes,
        image_size: size,
        seed: Some(spec.seed),
    };
    let mut f = fs::File::create(out_dir.join("dataset.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Dataset(format!("json: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn parse_label_line_basics() {
        let (class, b, conf) = parse_label_line::<f64>("0 0.5 0.5 0.1 0.1").unwrap();
        assert_eq!(class, 0);
        assert_eq!(conf, None);
        assert_eq!(b, BBox::new(0.5, 0.5, 0.1, 0.1));
        let (_, _, conf) = parse_label_line::<f64>("1 0.5 0.5 0.1 0.1 0.875").unwrap();
        assert_eq!(conf, Some(0.875));
        assert!(parse_label_line::<f64>("0 0.5 0.5").is_err());
        assert!(parse_label_line::<f64>("0 0.99 0.5 0.1 0.1").is_err()); // runs outside
        assert!(parse_label_line::<f64>("0 0.5 0.5 0.0 0.1").is_err());
        assert!(parse_label_line::<f64>("x 0.5 0.5 0.1 0.1").is_err());
    }

    #[test]
    fn letterbox_identity_on_square_target_size() {
        let img = Arr::<f64>::from_elem(IxDyn(&[3, 64, 64]), 0.5);
        let (out, tf) = letterbox(&img, 64).unwrap();
        assert!(tf.is_identity());
        assert_eq!(out.shape(), &[3, 64, 64]);
        assert!((out[[0, 10, 10]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn letterbox_two_to_one_pads_symmetrically() {
        let img = Arr::<f64>::from_elem(IxDyn(&[3, 32, 64]), 1.0);
        let (out, tf) = letterbox(&img, 64).unwrap();
        assert_eq!(tf.pad_y, 16.0);
        assert_eq!(tf.pad_x, 0.0);
        let gray = 114.0 / 255.0;
        assert!((out[[0, 0, 0]] - gray).abs() < 1e-12);
        assert!((out[[0, 63, 0]] - gray).abs() < 1e-12);
        assert!((out[[0, 32, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn letterbox_transform_roundtrips() {
        use rand::Rng;
        let img = Arr::<f64>::zeros(IxDyn(&[3, 48, 96]));
        let (_, tf) = letterbox(&img, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let b = BBox::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.01..0.3),
                rng.random_range(0.01..0.3),
            );
            let round = tf.invert::<f64>(&tf.apply(&b));
            assert!((round.cx - b.cx).abs() < 1e-6);
            assert!((round.cy - b.cy).abs() < 1e-6);
            assert!((round.w - b.w).abs() < 1e-6);
            assert!((round.h - b.h).abs() < 1e-6);
        }
    }

    #[test]
    fn synthetic_dataset_roundtrips_through_loader() {
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec {
            seed: 7,
            num_images: 3,
            image_size: 64,
            ..Default::default()
        };
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(manifest.num_images, 3);
        let ds = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(ds.items.len(), 3);
        assert_eq!(ds.class_names, vec!["disc", "square"]);
        assert!(ds.warnings.is_empty());
        let total: usize = ds.items.iter().map(|i| i.boxes.len()).sum();
        assert_eq!(total, manifest.num_boxes);
        for item in &ds.items {
            assert_eq!(item.image.shape(), &[3, 64, 64]);
            let n = item.boxes.len();
            assert!((1..=5).contains(&n), "box count {n}");
        }
    }

    #[test]
    fn synthetic_boxes_are_pixel_tight() {
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec {
            seed: 11,
            num_images: 4,
            image_size: 96,
            ..Default::default()
        };
        generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset::<f64>(dir.path()).unwrap();
        for item in &ds.items {
            for (class, b) in &item.boxes {
                // scan the rendered pixels for the saturated class color
                let size = 96usize;
                let (x0, y0, x1, y1) = (
                    ((b.cx - b.w / 2.0) * size as f64).round() as isize,
                    ((b.cy - b.h / 2.0) * size as f64).round() as isize,
                    ((b.cx + b.w / 2.0) * size as f64).round() as isize,
                    ((b.cy + b.h / 2.0) * size as f64).round() as isize,
                );
                let is_obj = |x: usize, y: usize| {
                    let (r, g, bch) = (
                        item.image[[0, y, x]],
                        item.image[[1, y, x]],
                        item.image[[2, y, x]],
                    );
                    if *class == 0 {
                        r > 0.7 && g < 0.35 && bch < 0.35
                    } else {
                        bch > 0.7 && r < 0.35
                    }
                };
                let (mut mnx, mut mny, mut mxx, mut mxy) =
                    (usize::MAX, usize::MAX, 0usize, 0usize);
                for y in y0.max(0) as usize..(y1.max(0) as usize).min(size) {
                    for x in x0.max(0) as usize..(x1.max(0) as usize).min(size) {
                        if is_obj(x, y) {
                            mnx = mnx.min(x);
                            mny = mny.min(y);
                            mxx = mxx.max(x);
                            mxy = mxy.max(y);
                        }
                    }
                }
                assert!(mnx != usize::MAX, "no rendered pixels inside the box");
                for (got, want) in [
                    (mnx as f64, x0 as f64),
                    (mny as f64, y0 as f64),
                    (mxx as f64 + 1.0, x1 as f64),
                    (mxy as f64 + 1.0, y1 as f64),
                ] {
                    assert!(
                        (got - want).abs() <= 1.0,
                        "extent {got} vs annotation {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn synthetic_object_sizes_within_spec() {
        let dir = TempDir::new().unwrap();
        let spec = SyntheticSpec {
            seed: 3,
            num_images: 4,
            image_size: 128,
            ..Default::default()
        };
        generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset::<f64>(dir.path()).unwrap();
        for item in &ds.items {
            for (_, b) in &item.boxes {
                let wpx = b.w * 128.0;
                let hpx = b.h * 128.0;
                assert!(
                    wpx >= 4.0 && wpx <= 25.0 && hpx >= 4.0 && hpx <= 25.0,
                    "object {wpx}x{hpx}px outside the configured range"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (d1, d2) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        let spec = SyntheticSpec {
            seed: 21,
            num_images: 2,
            image_size: 64,
            ..Default::default()
        };
        generate_synthetic(&spec, d1.path()).unwrap();
        generate_synthetic(&spec, d2.path()).unwrap();
        for sub in ["images/img_0000.png", "labels/img_0000.txt", "dataset.json"] {
            let a = fs::read(d1.path().join(sub)).unwrap();
            let b = fs::read(d2.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs between identical runs");
        }
    }

    #[test]
    fn loader_reports_missing_labels_and_bad_lines() {
        let dir = TempDir::new().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("labels")).unwrap();
        let img = Arr::<f64>::from_elem(IxDyn(&[3, 32, 32]), 0.3);
        encode_png(&img, &dir.path().join("images/a.png")).unwrap();
        encode_png(&img, &dir.path().join("images/b.png")).unwrap();
        fs::write(
            dir.path().join("labels/a.txt"),
            "0 0.5 0.5 0.1 0.1\nnot a line\n1 2.0 0.5 0.1 0.1\n",
        )
        .unwrap();
        // b.txt intentionally missing
        let ds = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(ds.items[0].boxes.len(), 1);
        assert_eq!(ds.items[1].boxes.len(), 0);
        assert_eq!(ds.warnings.len(), 3); // two bad lines + one missing file
        assert!(ds.warnings[0].contains("a.txt:2"));
    }

    #[test]
    fn empty_label_file_is_fine() {
        let dir = TempDir::new().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("labels")).unwrap();
        let img = Arr::<f64>::from_elem(IxDyn(&[3, 32, 32]), 0.3);
        encode_png(&img, &dir.path().join("images/a.png")).unwrap();
        fs::write(dir.path().join("labels/a.txt"), "").unwrap();
        let ds = load_dataset::<f32>(dir.path()).unwrap();
        assert!(ds.items[0].boxes.is_empty());
        assert!(ds.warnings.is_empty());
    }

    #[test]
    fn hflip_mirrors_boxes() {
        let mut img = Arr::<f64>::zeros(IxDyn(&[3, 4, 4]));
        img[[0, 0, 0]] = 1.0;
        let item = AnnotatedImage {
            image: img,
            boxes: vec![(0, BBox::new(0.25, 0.5, 0.1, 0.2))],
            source_id: "t".into(),
        };
        let flipped = hflip(&item);
        assert_eq!(flipped.image[[0, 0, 3]], 1.0);
        assert!((flipped.boxes[0].1.cx - 0.75).abs() < 1e-12);
    }
}
