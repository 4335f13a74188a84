//! Deterministic multi-view generator with the same shape as the real crops.
//!
//! Each class renders a parametric silhouette (car: low wide body with a cabin,
//! bus: tall wide box with a window band, person: narrow body with a head).
//! Each device looks at the object through its own fixed transform, and every
//! nuisance factor (pixel noise, position and colour jitter, clutter) scales
//! with `noise_sigma`, so a zero sigma yields one exact template per
//! (class, device).

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::{Dataset, Image, MultiViewSample, SplitTag, ABSENT, BLANK_LEVEL, IMAGE_SIDE, NUM_CLASSES};
use crate::error::{Error, Result};

/// How one device sees the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTransform {
    /// Object offset from the image centre, in pixels.
    pub dx: i32,
    pub dy: i32,
    /// Silhouette scale.
    pub scale: f64,
    /// Per-channel colour gain.
    pub tint: [f64; 3],
    /// Multiplier on every nuisance factor for this device.
    pub noise_scale: f64,
    /// Distractor rectangles drawn when noise is enabled.
    pub clutter: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub n_samples: usize,
    /// Per device probability that the object is absent.
    pub absence_prob: Vec<f64>,
    /// Pixel noise standard deviation (0-255 scale) before device scaling.
    pub noise_sigma: f64,
    /// Relative class frequencies (car, bus, person).
    pub class_weights: [f64; NUM_CLASSES],
    /// One transform per device.
    pub views: Vec<ViewTransform>,
}

impl SynthParams {
    pub fn num_devices(&self) -> usize {
        self.views.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        if self.views.is_empty() {
            return Err(Error::InvalidArgument("at least one device view is required".into()));
        }
        if self.absence_prob.len() != self.views.len() {
            return Err(Error::InvalidArgument(format!(
                "{} absence probabilities for {} devices",
                self.absence_prob.len(),
                self.views.len()
            )));
        }
        if let Some(p) = self.absence_prob.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("absence probability {} outside [0, 1)", p)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma {}", self.noise_sigma)));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument("class weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }

    /// Six devices from a poorly placed, cluttered camera to a clear frontal one.
    pub fn default_views() -> Vec<ViewTransform> {
        vec![
            ViewTransform { dx: -5, dy: 3, scale: 0.75, tint: [0.8, 1.0, 1.15], noise_scale: 1.5, clutter: 3 },
            ViewTransform { dx: 4, dy: -4, scale: 0.7, tint: [1.1, 0.85, 0.9], noise_scale: 1.7, clutter: 4 },
            ViewTransform { dx: 3, dy: 4, scale: 0.85, tint: [0.95, 1.1, 0.8], noise_scale: 1.3, clutter: 3 },
            ViewTransform { dx: -3, dy: -2, scale: 0.9, tint: [1.0, 0.9, 1.05], noise_scale: 1.15, clutter: 2 },
            ViewTransform { dx: 2, dy: 1, scale: 1.0, tint: [0.9, 0.95, 1.0], noise_scale: 1.0, clutter: 2 },
            ViewTransform { dx: 0, dy: 0, scale: 1.1, tint: [1.0, 1.0, 1.0], noise_scale: 0.95, clutter: 2 },
        ]
    }
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 851,
            absence_prob: vec![0.55, 0.6, 0.5, 0.45, 0.4, 0.4],
            noise_sigma: 48.0,
            class_weights: [0.45, 0.2, 0.35],
            views: SynthParams::default_views(),
        }
    }
}

pub fn synth_generate(params: &SynthParams) -> Result<Dataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let classes = WeightedIndex::new(params.class_weights).expect("validated weights");
    let n_dev = params.num_devices();
    let width = (params.n_samples.max(1) as f64).log10() as usize + 1;
    let mut samples = Vec::with_capacity(params.n_samples);
    for i in 0..params.n_samples {
        let class = classes.sample(&mut rng);
        let mut present: Vec<bool> = params
            .absence_prob
            .iter()
            .map(|&p| rng.gen::<f64>() >= p)
            .collect();
        if !present.iter().any(|&p| p) {
            present[rng.gen_range(0..n_dev)] = true;
        }
        let mut views = Vec::with_capacity(n_dev);
        let mut labels = Vec::with_capacity(n_dev);
        for (d, view) in params.views.iter().enumerate() {
            if present[d] {
                views.push(render(class, view, params.noise_sigma, &mut rng));
                labels.push(class as i8);
            } else {
                views.push(Image::blank());
                labels.push(ABSENT);
            }
        }
        samples.push(MultiViewSample {
            id: format!("s{:0width$}", i, width = width),
            views,
            device_labels: labels,
            global_label: class as u8,
        });
    }
    Ok(Dataset::new(samples, SplitTag::Full))
}

const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [[180.0, 60.0, 50.0], [190.0, 160.0, 50.0], [70.0, 80.0, 170.0]];

/// `(cx, cy, w, h, shade)` rectangles relative to the object centre.
fn silhouette(class: usize) -> &'static [(f64, f64, f64, f64, f64)] {
    match class {
        0 => &[(0.0, 2.0, 20.0, 8.0, 1.0), (0.0, -4.0, 10.0, 5.0, 0.8)],
        1 => &[(0.0, 0.0, 26.0, 16.0, 1.0), (0.0, -3.0, 22.0, 4.0, 0.5)],
        _ => &[(0.0, 3.0, 6.0, 16.0, 1.0), (0.0, -8.0, 6.0, 5.0, 0.9)],
    }
}

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn fill_rect(&mut self, cx: f64, cy: f64, w: f64, h: f64, color: [f64; 3]) {
        let x0 = (cx - w / 2.0).round().max(0.0) as usize;
        let x1 = ((cx + w / 2.0).round().max(0.0) as usize).min(IMAGE_SIDE);
        let y0 = (cy - h / 2.0).round().max(0.0) as usize;
        let y1 = ((cy + h / 2.0).round().max(0.0) as usize).min(IMAGE_SIDE);
        for y in y0..y1 {
            for x in x0..x1 {
                self.px[(y * IMAGE_SIDE + x) * 3..][..3].copy_from_slice(&color);
            }
        }
    }
}

fn render(class: usize, view: &ViewTransform, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let nuisance = sigma * view.noise_scale;
    let mut canvas = Canvas {
        px: vec![0.0; IMAGE_SIDE * IMAGE_SIDE * 3],
    };
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let base = [95.0 + y as f64, 105.0, 95.0 - y as f64 * 0.5];
            for ch in 0..3 {
                canvas.px[(y * IMAGE_SIDE + x) * 3 + ch] = base[ch] * view.tint[ch];
            }
        }
    }
    if nuisance > 0.0 {
        for _ in 0..view.clutter {
            let color = [rng.gen_range(40.0..220.0), rng.gen_range(40.0..220.0), rng.gen_range(40.0..220.0)];
            canvas.fill_rect(
                rng.gen_range(0.0..32.0),
                rng.gen_range(0.0..32.0),
                rng.gen_range(3.0..10.0),
                rng.gen_range(3.0..10.0),
                color,
            );
        }
    }
    let jitter = (nuisance / 8.0).min(6.0);
    let (jx, jy) = if jitter > 0.0 {
        (rng.gen_range(-jitter..=jitter), rng.gen_range(-jitter..=jitter))
    } else {
        (0.0, 0.0)
    };
    let color_amp = (nuisance * 1.2).min(90.0);
    let mut color = CLASS_COLORS[class];
    for (ch, c) in color.iter_mut().enumerate() {
        let j = if color_amp > 0.0 { rng.gen_range(-color_amp..=color_amp) } else { 0.0 };
        *c = (*c + j) * view.tint[ch];
    }
    let cx = IMAGE_SIDE as f64 / 2.0 + view.dx as f64 + jx;
    let cy = IMAGE_SIDE as f64 / 2.0 + view.dy as f64 + jy;
    for &(ox, oy, w, h, shade) in silhouette(class) {
        let s = view.scale;
        canvas.fill_rect(cx + ox * s, cy + oy * s, w * s, h * s, color.map(|c| c * shade));
    }
    if nuisance > 0.0 {
        let noise = Normal::new(0.0, nuisance).expect("finite sigma");
        for v in canvas.px.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    let mut rgb: Vec<u8> = canvas.px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    // a rendered view must never collide with the blank marker image
    if rgb.iter().all(|&b| b == BLANK_LEVEL) {
        rgb[0] = BLANK_LEVEL + 1;
    }
    Image::from_rgb(rgb).expect("fixed size")
}
