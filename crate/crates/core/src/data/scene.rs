//! Scene sampling, rasterization and the appearance-only domain shift.

use crate::backbone::Domain;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MAX_SHAPE_CLASSES: usize = 5;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

impl ShapeClass {
    pub fn from_index(i: usize) -> Self {
        match i {
            0 => ShapeClass::Disk,
            1 => ShapeClass::Square,
            2 => ShapeClass::Triangle,
            3 => ShapeClass::Ring,
            _ => ShapeClass::Cross,
        }
    }

    /// Point-inside test in object-local coordinates, `half` being half
    /// the shape extent. Used for both fill and outline rendering.
    fn contains(self, dx: f64, dy: f64, half: f64) -> bool {
        match self {
            ShapeClass::Disk => dx * dx + dy * dy <= half * half,
            ShapeClass::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeClass::Triangle => {
                dy.abs() <= half && dx.abs() <= (dy + half) / 2.0
            }
            ShapeClass::Ring => {
                let r2 = dx * dx + dy * dy;
                let inner = 0.55 * half;
                r2 <= half * half && r2 >= inner * inner
            }
            ShapeClass::Cross => {
                let arm = 0.3 * half;
                (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
            }
        }
    }
}

/// Benchmark generator settings. Geometry ranges are in pixels.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub class_count: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            class_count: 5,
            min_objects: 1,
            max_objects: 4,
            min_extent: 16,
            max_extent: 30,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.class_count > MAX_SHAPE_CLASSES {
            return Err(Error::config(format!(
                "class_count must be 1..={MAX_SHAPE_CLASSES}, got {}",
                self.class_count
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("objects_per_image range is empty"));
        }
        if self.max_extent + 2 >= self.image_size || self.min_extent < 6 {
            return Err(Error::config(format!(
                "extent range {}..{} does not fit image size {}",
                self.min_extent, self.max_extent, self.image_size
            )));
        }
        Ok(())
    }
}

/// One placed object; geometry only, appearance is domain business.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub extent: f64,
    /// Palette slot; the shift remaps it, never the class.
    pub color_pick: usize,
}

impl SceneObject {
    pub fn bbox(&self) -> [f64; 4] {
        let h = self.extent / 2.0;
        [self.cx - h, self.cy - h, self.cx + h, self.cy + h]
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct PixelBox {
    pub class: usize,
    pub xyxy: [f64; 4],
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        Image { width, height, rgb }
    }

    pub fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    /// Channel-first float values in [0, 1].
    pub fn to_chw_f64(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = f64::from(self.rgb[p * 3 + c]) / 255.0;
            }
        }
        out
    }

    pub fn mean_per_channel(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        let hw = self.width * self.height;
        for p in 0..hw {
            for c in 0..3 {
                sums[c] += f64::from(self.rgb[p * 3 + c]);
            }
        }
        sums.map(|s| s / (hw as f64 * 255.0))
    }
}

/// Appearance transform parameters for the target domain.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShiftConfig {
    pub palette: Vec<[u8; 3]>,
    pub stripe_period: usize,
    pub stripe_tone_a: [u8; 3],
    pub stripe_tone_b: [u8; 3],
    pub outline_px: f64,
    pub outline_color: [u8; 3],
    pub contrast_gain: f64,
    pub contrast_bias: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            palette: vec![
                [40, 90, 160],
                [45, 150, 140],
                [95, 70, 170],
                [30, 120, 90],
                [70, 100, 130],
                [50, 60, 110],
            ],
            stripe_period: 8,
            stripe_tone_a: [88, 94, 104],
            stripe_tone_b: [122, 128, 140],
            outline_px: 2.0,
            outline_color: [16, 14, 22],
            contrast_gain: 0.9,
            contrast_bias: 8.0,
        }
    }
}

const SOURCE_PALETTE: [[u8; 3]; 6] = [
    [205, 60, 55],
    [230, 150, 40],
    [215, 200, 60],
    [190, 70, 160],
    [150, 95, 50],
    [235, 120, 95],
];
const SOURCE_BG: [u8; 3] = [232, 229, 224];

/// A generated image with its annotations. `boxes` is populated only for
/// source-domain samples; `eval_boxes` always carries the geometry for
/// evaluation. The scene is retained so the shift can re-render the same
/// geometry under target appearance.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub domain: Domain,
    pub image: Image,
    pub tags: Vec<bool>,
    pub boxes: Option<Vec<PixelBox>>,
    pub eval_boxes: Vec<PixelBox>,
    pub scene: Vec<SceneObject>,
    pub bg_jitter: i16,
}

fn mix_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0xff51afd7ed558ccd);
        h ^= h >> 33;
    }
    h ^= index.wrapping_mul(0xc4ceb9fe1a85ec53);
    h ^= h >> 29;
    h
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    crate::matching::iou_xyxy(a, b)
}

/// Samples the scene geometry; fully deterministic in (spec.seed, stream,
/// index). Placement retries a bounded number of times before settling
/// for fewer objects.
pub fn generate_scene(spec: &SceneSpec, stream: &str, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, stream, index as u64));
    let n_objects = rng.gen_range(spec.min_objects..=spec.max_objects);
    let size = spec.image_size as f64;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut placed = false;
        for _retry in 0..40 {
            let extent = rng.gen_range(spec.min_extent as f64..=spec.max_extent as f64);
            let half = extent / 2.0;
            let cx = rng.gen_range(half + 1.0..size - half - 1.0);
            let cy = rng.gen_range(half + 1.0..size - half - 1.0);
            let class = rng.gen_range(0..spec.class_count);
            let color_pick = rng.gen_range(0..SOURCE_PALETTE.len());
            let candidate = SceneObject {
                class,
                cx,
                cy,
                extent,
                color_pick,
            };
            if objects
                .iter()
                .all(|o| box_iou(o.bbox(), candidate.bbox()) <= 0.15)
            {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            break;
        }
    }
    let bg_jitter = rng.gen_range(-8i16..=8);

    let mut tags = vec![false; spec.class_count];
    let mut boxes = Vec::with_capacity(objects.len());
    for o in &objects {
        tags[o.class] = true;
        boxes.push(PixelBox {
            class: o.class,
            xyxy: o.bbox(),
        });
    }
    let image = render(&objects, spec.image_size, bg_jitter, None);
    Ok(Sample {
        id: index,
        domain: Domain::Source,
        image,
        tags,
        boxes: Some(boxes.clone()),
        eval_boxes: boxes,
        scene: objects,
        bg_jitter,
    })
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn render(
    objects: &[SceneObject],
    size: usize,
    bg_jitter: i16,
    shift: Option<&ShiftConfig>,
) -> Image {
    let mut image = match shift {
        None => {
            let bg = SOURCE_BG.map(|c| clamp_u8(f64::from(c) + f64::from(bg_jitter)));
            Image::filled(size, size, bg)
        }
        Some(cfg) => {
            // Diagonal stripes replace the plain background.
            let mut img = Image::filled(size, size, cfg.stripe_tone_a);
            for y in 0..size {
                for x in 0..size {
                    if ((x + y) / cfg.stripe_period) % 2 == 1 {
                        img.put(x, y, cfg.stripe_tone_b);
                    }
                }
            }
            img
        }
    };
    for obj in objects {
        let shape = ShapeClass::from_index(obj.class);
        let half = obj.extent / 2.0;
        let fill = match shift {
            None => SOURCE_PALETTE[obj.color_pick % SOURCE_PALETTE.len()],
            Some(cfg) => cfg.palette[obj.color_pick % cfg.palette.len()],
        };
        let [x1, y1, x2, y2] = obj.bbox();
        let (x1, y1) = (x1.floor().max(0.0) as usize, y1.floor().max(0.0) as usize);
        let (x2, y2) = (
            (x2.ceil() as usize).min(size - 1),
            (y2.ceil() as usize).min(size - 1),
        );
        for y in y1..=y2 {
            for x in x1..=x2 {
                let dx = x as f64 + 0.5 - obj.cx;
                let dy = y as f64 + 0.5 - obj.cy;
                if !shape.contains(dx, dy, half) {
                    continue;
                }
                let color = match shift {
                    Some(cfg) if !shape.contains(dx, dy, half - cfg.outline_px) => {
                        cfg.outline_color
                    }
                    _ => fill,
                };
                image.put(x, y, color);
            }
        }
    }
    if let Some(cfg) = shift {
        for v in &mut image.rgb {
            *v = clamp_u8(128.0 + (f64::from(*v) - 128.0) * cfg.contrast_gain + cfg.contrast_bias);
        }
    }
    image
}

/// Re-renders a sample under the chosen appearance, for diagnostics.
pub fn render_sample(sample: &Sample, size: usize, shift: Option<&ShiftConfig>) -> Image {
    render(&sample.scene, size, sample.bg_jitter, shift)
}

/// Appearance-only transform to the target domain: palette remap, striped
/// background, outline stylization and a mild contrast shift. Geometry is
/// untouched; boxes move to the hidden evaluation channel. Applying the
/// shift to an already-target sample returns it unchanged.
pub fn apply_domain_shift(sample: &Sample, shift: &ShiftConfig, size: usize) -> Sample {
    if sample.domain == Domain::Target {
        return sample.clone();
    }
    let image = render(&sample.scene, size, sample.bg_jitter, Some(shift));
    Sample {
        id: sample.id,
        domain: Domain::Target,
        image,
        tags: sample.tags.clone(),
        boxes: None,
        eval_boxes: sample.eval_boxes.clone(),
        scene: sample.scene.clone(),
        bg_jitter: sample.bg_jitter,
    }
}
