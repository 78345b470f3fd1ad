//! Concept datasets and the synthetic image generator.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EnvError;

pub const ANIMAL_CLASSES: [&str; 40] = [
    "armadillo", "bear", "bull", "butterfly", "camel", "cat", "chicken", "cobra", "condor", "cow",
    "crab", "crocodile", "deer", "dog", "donkey", "duck", "elephant", "fish", "frog", "giraffe",
    "goat", "hedgehog", "kangaroo", "koala", "lion", "monkey", "octopus", "ostrich", "panda",
    "peacock", "penguin", "pig", "rhinoceros", "rooster", "seahorse", "snail", "spider",
    "squirrel", "tiger", "turtle",
];

pub const FRUIT_CLASSES: [&str; 16] = [
    "apple", "avocado", "banana", "blueberry", "cabbage", "cherry", "coconut", "cucumber", "fig",
    "grape", "lemon", "orange", "pineapple", "pumpkin", "strawberry", "watermelon",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Parameters of the synthetic image generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSpec {
    /// Side length in pixels.
    pub size: usize,
    pub seed: u64,
    /// Per-channel color jitter half-width for non-canonical instances.
    pub color_jitter: f64,
    /// Maximum translation in pixels.
    pub max_shift: i32,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            size: 32,
            seed: 0,
            color_jitter: 0.08,
            max_shift: 2,
            noise: 0.03,
        }
    }
}

/// An RGB image stored row-major as height × width × 3, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.size + x) * 3 + c]
    }

    /// Channel-major copy (3 × size × size) for convolution.
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        libm::sqrt(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum(),
        )
    }
}

/// A named set of object classes with a fixed number of image instances each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDataset {
    pub name: String,
    pub split: Split,
    pub classes: Vec<String>,
    /// Instance count per class; instance `i` of a class uses seed `i`, and
    /// instance 0 is the canonical one.
    pub instances: Vec<usize>,
    #[serde(default)]
    pub image: ImageSpec,
}

impl ConceptDataset {
    pub fn new(
        name: &str,
        split: Split,
        classes: &[&str],
        instances: Vec<usize>,
        image: ImageSpec,
    ) -> Result<Self, EnvError> {
        let ds = ConceptDataset {
            name: name.to_string(),
            split,
            classes: classes.iter().map(|s| s.to_string()).collect(),
            instances,
            image,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.classes.len() != self.instances.len() {
            return Err(EnvError::Dataset(alloc::format!(
                "{} classes but {} instance counts",
                self.classes.len(),
                self.instances.len()
            )));
        }
        if let Some(i) = self.instances.iter().position(|&n| n == 0) {
            return Err(EnvError::Dataset(alloc::format!(
                "class `{}` has no instances",
                self.classes[i]
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(EnvError::Dataset(alloc::format!("class `{c}` listed twice")));
            }
        }
        if self.image.size < 4 {
            return Err(EnvError::Dataset(String::from("image size must be at least 4")));
        }
        Ok(())
    }

    /// 40 animal classes, 408 images: eight classes with 11 instances and
    /// the rest with 10.
    pub fn animal() -> Self {
        let instances = (0..40).map(|i| if i < 8 { 11 } else { 10 }).collect();
        Self::new("animal", Split::Train, &ANIMAL_CLASSES, instances, ImageSpec::default())
            .expect("valid preset")
    }

    /// 16 fruit classes with 3 instances each.
    pub fn fruit() -> Self {
        let image = ImageSpec {
            seed: 1,
            ..ImageSpec::default()
        };
        Self::new("fruit", Split::Test, &FRUIT_CLASSES, vec![3; 16], image).expect("valid preset")
    }

    /// Small training pool for quick runs: eight animal classes, 16×16 images.
    pub fn desk_train() -> Self {
        let image = ImageSpec {
            size: 16,
            max_shift: 1,
            ..ImageSpec::default()
        };
        Self::new("desk-train", Split::Train, &ANIMAL_CLASSES[..8], vec![10; 8], image)
            .expect("valid preset")
    }

    /// Held-out pool matching [`ConceptDataset::desk_train`]: four fruit classes.
    pub fn desk_test() -> Self {
        let image = ImageSpec {
            size: 16,
            seed: 1,
            max_shift: 1,
            ..ImageSpec::default()
        };
        Self::new("desk-test", Split::Test, &FRUIT_CLASSES[..4], vec![3; 4], image)
            .expect("valid preset")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_images(&self) -> usize {
        self.instances.iter().sum()
    }

    /// Deterministic image of `class`, instance `instance`.
    pub fn synth_image(&self, class: usize, instance: usize) -> Image {
        synth_image(&self.image, &self.classes[class], instance as u64)
    }

    /// Canonical instance with probability `1 - ratio`, otherwise one of the
    /// other instances uniformly.
    pub fn sample_instance<R: Rng + ?Sized>(&self, class: usize, ratio: f64, rng: &mut R) -> usize {
        let n = self.instances[class];
        if n < 2 || !rng.gen_bool(ratio.clamp(0.0, 1.0)) {
            0
        } else {
            rng.gen_range(1..n)
        }
    }
}

/// Classes present in both datasets.
pub fn class_overlap(a: &ConceptDataset, b: &ConceptDataset) -> Vec<String> {
    a.classes
        .iter()
        .filter(|c| b.classes.contains(c))
        .cloned()
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f64; 3],
}

struct ClassPattern {
    background: [f64; 3],
    stripe_dir: [f64; 2],
    stripe_freq: f64,
    stripe_phase: f64,
    stripe_color: [f64; 3],
    blobs: Vec<Blob>,
}

impl ClassPattern {
    fn new(spec: &ImageSpec, class_name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(class_name.as_bytes()) ^ spec.seed.rotate_left(17));
        let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let background = color(&mut rng);
        let angle = rng.gen_range(0.0..core::f64::consts::PI);
        let stripe_freq = rng.gen_range(1.5..4.5);
        let stripe_phase = rng.gen_range(0.0..core::f64::consts::TAU);
        let stripe_color = color(&mut rng);
        let n_blobs = rng.gen_range(2..=3);
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                cy: rng.gen_range(0.2..0.8),
                cx: rng.gen_range(0.2..0.8),
                ry: rng.gen_range(0.08..0.25),
                rx: rng.gen_range(0.08..0.25),
                color: color(&mut rng),
            })
            .collect();
        ClassPattern {
            background,
            stripe_dir: [libm::cos(angle), libm::sin(angle)],
            stripe_freq,
            stripe_phase,
            stripe_color,
            blobs,
        }
    }

    fn color_at(&self, y: f64, x: f64) -> [f64; 3] {
        let t = (y * self.stripe_dir[0] + x * self.stripe_dir[1]) * self.stripe_freq * core::f64::consts::TAU
            + self.stripe_phase;
        let s = 0.5 * (1.0 + libm::sin(t)) * 0.45;
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = self.background[k] * (1.0 - s) + self.stripe_color[k] * s;
        }
        for b in &self.blobs {
            let dy = (y - b.cy) / b.ry;
            let dx = (x - b.cx) / b.rx;
            let w = libm::exp(-0.5 * (dy * dy + dx * dx) * 2.0);
            for k in 0..3 {
                c[k] = c[k] * (1.0 - w) + b.color[k] * w;
            }
        }
        c
    }
}

/// Renders instance `instance` of the class called `class_name`. The class
/// determines palette, stripes and blobs; non-zero instances add color
/// jitter, a small translation and pixel noise.
pub fn synth_image(spec: &ImageSpec, class_name: &str, instance: u64) -> Image {
    let pattern = ClassPattern::new(spec, class_name);
    let n = spec.size;
    let mut data = vec![0.0; n * n * 3];
    let mut jitter = [0.0; 3];
    let (mut sy, mut sx) = (0i32, 0i32);
    let mut rng = ChaCha8Rng::seed_from_u64(
        fnv1a(class_name.as_bytes()) ^ spec.seed.rotate_left(17) ^ instance.wrapping_mul(0x9e37_79b9_7f4a_7c15),
    );
    let perturb = instance != 0;
    if perturb {
        for j in jitter.iter_mut() {
            *j = rng.gen_range(-spec.color_jitter..=spec.color_jitter);
        }
        sy = rng.gen_range(-spec.max_shift..=spec.max_shift);
        sx = rng.gen_range(-spec.max_shift..=spec.max_shift);
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise level");
    for y in 0..n {
        for x in 0..n {
            let fy = (y as f64 - sy as f64 + 0.5) / n as f64;
            let fx = (x as f64 - sx as f64 + 0.5) / n as f64;
            let c = pattern.color_at(fy, fx);
            for k in 0..3 {
                let mut v = c[k] + jitter[k];
                if perturb && spec.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data[(y * n + x) * 3 + k] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image { size: n, data }
}
