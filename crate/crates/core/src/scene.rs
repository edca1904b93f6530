//! Synthetic scenes: coloured shapes on a textured background, a
//! parametric domain shift, the weak-label oracle and label-noise injection.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adaptation::{multi_hot, WeakLabel};
use crate::detector::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CATEGORIES: [&str; 3] = ["disc", "triangle", "square"];
pub const IMAGE_SIZE: usize = 64;

// Keeps the pixel-noise stream independent of the geometry stream.
const NOISE_SEED_SALT: u64 = 0x6e6f_6973_6500_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Triangle,
    Square,
}

impl Shape {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Shape> {
        [Shape::Disc, Shape::Triangle, Shape::Square].get(i).copied()
    }

    pub fn name(self) -> &'static str {
        CATEGORIES[self.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Top-left corner of the `size × size` cell the shape is drawn in.
    pub origin: (usize, usize),
    pub size: usize,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: IMAGE_SIZE,
            min_objects: 1,
            max_objects: 4,
            min_size: 8,
            max_size: 28,
        }
    }
}

/// Parametric appearance shift. All-zero is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub fog_alpha: f64,
    pub brightness_shift: f64,
    pub noise_sigma: f64,
    /// Degrees.
    pub hue_rotation: f64,
}

impl DomainSpec {
    pub const SOURCE: DomainSpec = DomainSpec {
        fog_alpha: 0.0,
        brightness_shift: 0.0,
        noise_sigma: 0.0,
        hue_rotation: 0.0,
    };

    pub const TARGET: DomainSpec = DomainSpec {
        fog_alpha: 0.5,
        brightness_shift: -0.1,
        noise_sigma: 0.05,
        hue_rotation: 40.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.fog_alpha)
            && self.noise_sigma >= 0.0
            && self.brightness_shift.is_finite()
            && self.hue_rotation.is_finite()
            && self.noise_sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!("invalid domain spec {self:?}")))
        }
    }
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::SOURCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt_boxes: Vec<(BBox, usize)>,
}

impl Frame {
    /// The image as a `[1, 3, S, S]` batch.
    pub fn batch(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.image.shape());
        self.image.clone().reshape(shape).expect("same length")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SourceTrain,
    SourceTest,
    TargetStream,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::SourceTest,
        Split::TargetStream,
        Split::TargetTest,
    ];

    /// First frame id of the split; splits never share geometry.
    pub fn first_id(self) -> u64 {
        match self {
            Split::SourceTrain => 0,
            Split::SourceTest => 1_000_000,
            Split::TargetStream => 2_000_000,
            Split::TargetTest => 3_000_000,
        }
    }

    pub fn default_count(self) -> usize {
        match self {
            Split::SourceTrain => 2000,
            Split::SourceTest => 500,
            Split::TargetStream => 1000,
            Split::TargetTest => 500,
        }
    }

    pub fn domain(self) -> DomainSpec {
        match self {
            Split::SourceTrain | Split::SourceTest => DomainSpec::SOURCE,
            Split::TargetStream | Split::TargetTest => DomainSpec::TARGET,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source-train",
            Split::SourceTest => "source-test",
            Split::TargetStream => "target-stream",
            Split::TargetTest => "target-test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown split {s:?}")))
    }
}

/// Generator state for frame `frame_id`: ChaCha8 keyed by `seed`, one stream
/// per frame, so any frame can be produced without rendering its predecessors.
pub fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    rng
}

fn sample_color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    // saturated colour: one channel high, the others spread below it
    let value = rng.random_range(lo..hi);
    let mut c = [0.0; 3];
    let lead = rng.random_range(0..3);
    for (i, v) in c.iter_mut().enumerate() {
        *v = if i == lead {
            value
        } else {
            value * rng.random_range(0.0..0.8)
        };
    }
    c
}

/// Samples the objects of one scene. Cells do not touch, so each shape is
/// fully visible.
pub fn sample_objects<R: Rng>(config: &SceneConfig, rng: &mut R) -> Vec<SceneObject> {
    let wanted = rng.random_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while objects.len() < wanted && attempts < 200 {
        attempts += 1;
        let shape = Shape::from_index(rng.random_range(0..CATEGORIES.len())).unwrap();
        let size = rng.random_range(config.min_size..=config.max_size);
        let x = rng.random_range(0..=config.image_size - size);
        let y = rng.random_range(0..=config.image_size - size);
        let color = sample_color(rng, 0.65, 1.0);
        let clear = objects.iter().all(|o| {
            x + size < o.origin.0
                || o.origin.0 + o.size < x
                || y + size < o.origin.1
                || o.origin.1 + o.size < y
        });
        if clear {
            objects.push(SceneObject {
                shape,
                origin: (x, y),
                size,
                color,
            });
        }
    }
    objects
}

/// Whether pixel `(px, py)` is covered by `obj` (pixel-centre sampling).
pub fn covers(obj: &SceneObject, px: usize, py: usize) -> bool {
    let (x0, y0) = (obj.origin.0 as f64, obj.origin.1 as f64);
    let s = obj.size as f64;
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    if x < x0 || y < y0 || x > x0 + s || y > y0 + s {
        return false;
    }
    match obj.shape {
        Shape::Square => true,
        Shape::Disc => {
            let r = s / 2.0;
            let (dx, dy) = (x - x0 - r, y - y0 - r);
            dx * dx + dy * dy <= r * r
        }
        Shape::Triangle => {
            let half = (y - y0) / 2.0;
            (x - (x0 + s / 2.0)).abs() <= half
        }
    }
}

fn tight_box(obj: &SceneObject) -> BBox {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for py in obj.origin.1..obj.origin.1 + obj.size {
        for px in obj.origin.0..obj.origin.0 + obj.size {
            if covers(obj, px, py) {
                x1 = x1.min(px);
                y1 = y1.min(py);
                x2 = x2.max(px + 1);
                y2 = y2.max(py + 1);
            }
        }
    }
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// Renders one source-domain frame from generator state.
pub fn render_frame<R: Rng>(config: &SceneConfig, frame_id: u64, rng: &mut R) -> Frame {
    let s = config.image_size;
    let base = sample_color(rng, 0.15, 0.5);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    let freq = rng.random_range(0.15..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let objects = sample_objects(config, rng);

    let plane = s * s;
    let mut data = vec![0.0; 3 * plane];
    for py in 0..s {
        for px in 0..s {
            let u = (px as f64 / s as f64 - 0.5, py as f64 / s as f64 - 0.5);
            let shade = 0.15 * (u.0 * gx + u.1 * gy)
                + 0.05 * (freq * (px as f64 * gy - py as f64 * gx) + phase).sin();
            let grain = rng.random_range(-0.03..0.03);
            let mut px_color = base.map(|b| b + shade + grain);
            for obj in &objects {
                if covers(obj, px, py) {
                    px_color = obj.color.map(|c| c + 0.5 * grain);
                }
            }
            for (c, v) in px_color.iter().enumerate() {
                data[c * plane + py * s + px] = v.clamp(0.0, 1.0);
            }
        }
    }
    Frame {
        frame_id,
        image: Tensor::new([3, s, s], data).expect("sized"),
        gt_boxes: objects
            .iter()
            .map(|o| (tight_box(o), o.shape.index()))
            .collect(),
    }
}

fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (sin, cos) = degrees.to_radians().sin_cos();
    [
        [
            0.213 + cos * 0.787 - sin * 0.213,
            0.715 - cos * 0.715 - sin * 0.715,
            0.072 - cos * 0.072 + sin * 0.928,
        ],
        [
            0.213 - cos * 0.213 + sin * 0.143,
            0.715 + cos * 0.285 + sin * 0.140,
            0.072 - cos * 0.072 - sin * 0.283,
        ],
        [
            0.213 - cos * 0.213 - sin * 0.787,
            0.715 - cos * 0.715 + sin * 0.715,
            0.072 + cos * 0.928 + sin * 0.072,
        ],
    ]
}

/// `clamp(hue(image)·(1 − fog) + 0.5·fog + brightness + N(0, σ²))` on a
/// `[3, H, W]` image.
pub fn apply_domain_shift<R: Rng>(image: &Tensor, spec: &DomainSpec, rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape {
            op: "apply_domain_shift",
            shape: shape.to_vec(),
            reason: "expected [3, H, W]".into(),
        });
    }
    let plane = shape[1] * shape[2];
    let src = image.data();
    let mut out = src.to_vec();
    if spec.hue_rotation != 0.0 {
        let m = hue_matrix(spec.hue_rotation);
        for p in 0..plane {
            let rgb = [src[p], src[plane + p], src[2 * plane + p]];
            for (c, row) in m.iter().enumerate() {
                out[c * plane + p] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
            }
        }
    }
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma"));
    for v in out.iter_mut() {
        let mut x = *v * (1.0 - spec.fog_alpha) + 0.5 * spec.fog_alpha + spec.brightness_shift;
        if let Some(n) = &noise {
            x += n.sample(rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
    Tensor::new(shape.to_vec(), out)
}

/// Frame `frame_id` of the stream keyed by `seed`, seen through `domain`.
/// The geometry depends only on `(seed, frame_id)`.
pub fn generate_frame(config: &SceneConfig, seed: u64, frame_id: u64, domain: &DomainSpec) -> Result<Frame> {
    let mut rng = frame_rng(seed, frame_id);
    let mut frame = render_frame(config, frame_id, &mut rng);
    if *domain != DomainSpec::SOURCE {
        let mut noise_rng = frame_rng(seed ^ NOISE_SEED_SALT, frame_id);
        frame.image = apply_domain_shift(&frame.image, domain, &mut noise_rng)?;
    }
    Ok(frame)
}

/// `count` consecutive frames of `split`.
pub fn generate_split(
    config: &SceneConfig,
    seed: u64,
    split: Split,
    count: usize,
    domain: &DomainSpec,
) -> Result<Vec<Frame>> {
    (0..count as u64)
        .map(|i| generate_frame(config, seed, split.first_id() + i, domain))
        .collect()
}

/// The set of categories present in the frame's ground truth.
pub fn weak_label_oracle(frame: &Frame) -> WeakLabel {
    WeakLabel::new(frame.gt_boxes.iter().map(|(_, c)| *c))
}

/// Flips each entry of a 0/1 vector independently with probability `rho`.
pub fn inject_label_noise<R: Rng>(target: &[f64], rho: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::usage(format!("noise rate {rho} outside [0, 1]")));
    }
    Ok(target
        .iter()
        .map(|&t| if rng.random::<f64>() < rho { 1.0 - t } else { t })
        .collect())
}

/// Oracle weak label after independent bit flips with probability `rho`.
pub fn noisy_weak_label<R: Rng>(
    truth: &WeakLabel,
    num_categories: usize,
    rho: f64,
    rng: &mut R,
) -> Result<WeakLabel> {
    let flipped = inject_label_noise(&multi_hot(truth, num_categories), rho, rng)?;
    Ok(WeakLabel::from_multi_hot(&flipped))
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    frame_id: u64,
    file: String,
    boxes: Vec<[f64; 4]>,
    categories: Vec<String>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.ndjson";

fn frame_file(frame_id: u64) -> String {
    format!("frame_{frame_id:07}.png")
}

/// Encodes `image` (`[3, H, W]`, `[0, 1]`) as an 8-bit RGB PNG.
pub fn png_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        other => {
            return Err(Error::Shape {
                op: "png_bytes",
                shape: other.to_vec(),
                reason: "expected [3, H, W]".into(),
            })
        }
    };
    let plane = h * w;
    let d = image.data();
    let mut pixels = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            pixels.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(out)
}

pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, png_bytes(image)?)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    decode_png(&std::fs::read(path)?).map_err(|e| match e {
        Error::Png(m) => Error::Png(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Decodes an 8-bit RGB PNG into a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit RGB, got {:?} {:?}",
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = buf[p * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Writes one PNG per frame plus `annotations.ndjson` into `dir`.
pub fn export_frames(frames: &[Frame], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut ann = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
    for f in frames {
        let file = frame_file(f.frame_id);
        write_png(&f.image, &dir.join(&file))?;
        let rec = AnnotationRecord {
            frame_id: f.frame_id,
            file,
            boxes: f.gt_boxes.iter().map(|(b, _)| b.to_array()).collect(),
            categories: f
                .gt_boxes
                .iter()
                .map(|(_, c)| CATEGORIES[*c].to_string())
                .collect(),
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

/// Reads a directory written by [`export_frames`]. Pixels come back quantized
/// to 8 bits.
pub fn import_frames(dir: &Path) -> Result<Vec<Frame>> {
    let ann = BufReader::new(File::open(dir.join(ANNOTATIONS_FILE))?);
    let mut frames = Vec::new();
    for (n, line) in ann.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)?;
        if rec.boxes.len() != rec.categories.len() {
            return Err(Error::usage(format!(
                "annotation line {}: {} boxes but {} categories",
                n + 1,
                rec.boxes.len(),
                rec.categories.len()
            )));
        }
        let mut gt_boxes = Vec::with_capacity(rec.boxes.len());
        for (b, name) in rec.boxes.iter().zip(&rec.categories) {
            let c = CATEGORIES
                .iter()
                .position(|x| x == name)
                .ok_or_else(|| Error::usage(format!("annotation line {}: unknown category {name:?}", n + 1)))?;
            gt_boxes.push((BBox::new(b[0], b[1], b[2], b[3]), c));
        }
        frames.push(Frame {
            frame_id: rec.frame_id,
            image: read_png(&dir.join(&rec.file))?,
            gt_boxes,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_tight_and_in_bounds() {
        let cfg = SceneConfig::default();
        for id in 0..200 {
            let f = generate_frame(&cfg, 5, id, &DomainSpec::SOURCE).unwrap();
            assert!((1..=4).contains(&f.gt_boxes.len()));
            for (b, _) in &f.gt_boxes {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                assert!(b.width() >= 7.0 && b.height() >= 7.0);
            }
        }
    }

    #[test]
    fn square_box_is_exact() {
        let o = SceneObject {
            shape: Shape::Square,
            origin: (3, 5),
            size: 10,
            color: [1.0; 3],
        };
        assert_eq!(tight_box(&o), BBox::new(3.0, 5.0, 13.0, 15.0));
    }

    #[test]
    fn identity_shift_is_noop() {
        let f = generate_frame(&SceneConfig::default(), 1, 0, &DomainSpec::SOURCE).unwrap();
        let mut rng = frame_rng(0, 0);
        let out = apply_domain_shift(&f.image, &DomainSpec::SOURCE, &mut rng).unwrap();
        assert_eq!(out, f.image);
        assert_eq!(hue_matrix(0.0).map(|r| r.iter().sum::<f64>().round()), [1.0; 3]);
    }

    #[test]
    fn full_fog_is_gray() {
        let f = generate_frame(&SceneConfig::default(), 1, 0, &DomainSpec::SOURCE).unwrap();
        let spec = DomainSpec {
            fog_alpha: 1.0,
            ..DomainSpec::SOURCE
        };
        let out = apply_domain_shift(&f.image, &spec, &mut frame_rng(0, 0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn noise_extremes() {
        let t = [1.0, 0.0, 1.0];
        let mut rng = frame_rng(0, 0);
        assert_eq!(inject_label_noise(&t, 0.0, &mut rng).unwrap(), t);
        assert_eq!(inject_label_noise(&t, 1.0, &mut rng).unwrap(), [0.0, 1.0, 0.0]);
        assert!(inject_label_noise(&t, 1.5, &mut rng).is_err());
    }
}
