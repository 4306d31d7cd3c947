//! Labelled image datasets and a seeded generator of factored pattern tasks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Real, Tensor};

/// Images `[N, C, side, side]` stored as bytes (pixel value `k / 255`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        pixels: Vec<u8>,
        labels: Vec<usize>,
        channels: usize,
        side: usize,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let per = channels * side * side;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: vec![pixels.len()],
                rhs: vec![labels.len(), channels, side, side],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self { pixels, labels, channels, side, classes, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    /// Images at `indices` as a `[n, C, side, side]` tensor in `[0, 1]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let per = self.sample_len();
        let scale = T::one() / T::of(255.0);
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| T::of(p as f64) * scale));
        }
        Tensor::from_parts(vec![indices.len(), self.channels, self.side, self.side], data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let per = self.sample_len();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        Self {
            pixels,
            labels: self.batch_labels(indices),
            channels: self.channels,
            side: self.side,
            classes: self.classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Factor {
    Shape,
    Orientation,
    Color,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Shape, Factor::Orientation, Factor::Color];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Shape => "shape",
            Factor::Orientation => "orientation",
            Factor::Color => "color",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Factor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Spec(format!("unknown factor `{s}`")))
    }
}

/// Distinct values every factor can take.
pub const FACTOR_LEVELS: usize = 4;

/// Parameters of a synthetic classification task.
///
/// Every class is a combination of values of the active factors (the first
/// `levels` values of each, mixed radix in the order of `factors`), passed
/// through `class_map` when one is given. Inactive factors vary at random.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub factors: Vec<Factor>,
    pub levels: usize,
    pub class_map: Option<Vec<usize>>,
    pub noise: f64,
    pub samples_per_class: usize,
    pub side: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn single(factor: Factor, samples_per_class: usize, seed: u64) -> Self {
        Self {
            factors: vec![factor],
            levels: FACTOR_LEVELS,
            class_map: None,
            noise: 0.1,
            samples_per_class,
            side: 16,
            seed,
        }
    }

    /// Two values of each of the three factors: eight classes whose
    /// evidence is split across the single-factor tasks.
    pub fn composite(samples_per_class: usize, seed: u64) -> Self {
        Self { factors: Factor::ALL.to_vec(), levels: 2, ..Self::single(Factor::Shape, samples_per_class, seed) }
    }

    pub fn configurations(&self) -> usize {
        self.levels.pow(self.factors.len() as u32)
    }

    pub fn classes(&self) -> usize {
        match &self.class_map {
            Some(m) => m.iter().max().map_or(0, |&c| c + 1),
            None => self.configurations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.factors.is_empty() {
            return bad("at least one active factor required".into());
        }
        let mut sorted = self.factors.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.factors.len() {
            return bad("factors must be distinct".into());
        }
        if !(2..=FACTOR_LEVELS).contains(&self.levels) {
            return bad(format!("levels must be in 2..={FACTOR_LEVELS}"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5]", self.noise));
        }
        if self.samples_per_class == 0 {
            return bad("samples per class must be positive".into());
        }
        if self.side < 8 {
            return bad("side must be at least 8".into());
        }
        if let Some(m) = &self.class_map {
            if m.len() != self.configurations() {
                return bad(format!("class map has {} entries for {} configurations", m.len(), self.configurations()));
            }
            let classes = self.classes();
            if let Some(c) = (0..classes).find(|c| !m.contains(c)) {
                return bad(format!("class {c} has no configuration"));
            }
        }
        Ok(())
    }

    /// Canonical one-line description, also used as dataset provenance.
    pub fn describe(&self) -> String {
        let factors: Vec<&str> = self.factors.iter().map(|f| f.name()).collect();
        let map = match &self.class_map {
            Some(m) => m.iter().map(|c| format!("{c}")).collect::<Vec<_>>().join(","),
            None => "identity".into(),
        };
        format!(
            "synthetic factors={} levels={} map={} noise={} per_class={} side={} seed={}",
            factors.join("+"),
            self.levels,
            map,
            self.noise,
            self.samples_per_class,
            self.side,
            self.seed
        )
    }
}

const TINTS: [[f64; 3]; FACTOR_LEVELS] = [[0.95, 0.2, 0.2], [0.2, 0.9, 0.25], [0.25, 0.3, 0.95], [0.9, 0.85, 0.2]];

fn shape_mask(shape: usize, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (libm::fabs(dy), libm::fabs(dx));
    let bar = r * 0.3;
    match shape {
        // filled square
        0 => ay <= r && ax <= r,
        // square outline
        1 => ay <= r && ax <= r && (ay >= r - 2.0 * bar || ax >= r - 2.0 * bar),
        // plus
        2 => (ay <= bar && ax <= r) || (ax <= bar && ay <= r),
        // diagonal cross
        _ => ay <= r && ax <= r && (libm::fabs(dy - dx) <= 1.5 * bar || libm::fabs(dy + dx) <= 1.5 * bar),
    }
}

fn stripe(orientation: usize, y: usize, x: usize, phase: usize) -> bool {
    let t = match orientation {
        0 => y,
        1 => x,
        2 => x + y,
        _ => x + 64 - y,
    };
    (t + phase) % 4 < 2
}

fn render<R: Rng>(values: [usize; 3], side: usize, noise: f64, rng: &mut R, out: &mut Vec<u8>) {
    let [shape, orientation, color] = values;
    let phase = rng.random_range(0..4);
    let mid = (side as f64 - 1.0) / 2.0;
    let jitter = side as f64 / 8.0;
    let cy = mid + rng.random_range(-jitter..=jitter);
    let cx = mid + rng.random_range(-jitter..=jitter);
    let r = side as f64 * rng.random_range(0.25..0.32);
    let tint = TINTS[color];
    let mut img = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let inside = shape_mask(shape, y as f64 - cy, x as f64 - cx, r);
            let bg = if stripe(orientation, y, x, phase) { 0.55 } else { 0.15 };
            for (c, &t) in tint.iter().enumerate() {
                img[(c * side + y) * side + x] = if inside { t } else { bg };
            }
        }
    }
    for v in img {
        let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
        out.push(libm::round((v + n).clamp(0.0, 1.0) * 255.0) as u8);
    }
}

/// Renders every class `samples_per_class` times, classes in order.
pub fn gen_synthetic_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Synthesis);
    let configs = spec.configurations();
    let classes = spec.classes();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for cfg in 0..configs {
        let label = spec.class_map.as_ref().map_or(cfg, |m| m[cfg]);
        for _ in 0..spec.samples_per_class {
            let mut values = [0; 3];
            for slot in values.iter_mut() {
                *slot = rng.random_range(0..FACTOR_LEVELS);
            }
            let mut rest = cfg;
            for f in spec.factors.iter().rev() {
                values[*f as usize] = rest % spec.levels;
                rest /= spec.levels;
            }
            render(values, spec.side, spec.noise, &mut rng, &mut pixels);
            labels.push(label);
        }
    }
    Dataset::new(pixels, labels, 3, spec.side, classes, spec.describe())
}

/// Seeded stratified split: `floor(n_c * train_fraction)` items of every
/// class go to the first part, the rest to the second. Each part keeps
/// the original order.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut rng = stream(seed, Stream::Split);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = libm::floor(idx.len() as f64 * train_fraction) as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}

/// Generates a task and returns its 80/20 train/test split.
pub fn gen_synthetic_split(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    split(&gen_synthetic_task(spec)?, 0.8, spec.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let s = TaskSpec::composite(5, 9);
        let a = gen_synthetic_task(&s).unwrap();
        assert_eq!(a, gen_synthetic_task(&s).unwrap());
        assert_eq!(a.classes, 8);
        assert_eq!(a.class_counts(), vec![5; 8]);
        let b = gen_synthetic_task(&TaskSpec { seed: 10, ..s }).unwrap();
        assert_ne!(a.pixels, b.pixels);
    }

    #[test]
    fn noise_free_single_sample_classes_are_clean() {
        let s = TaskSpec { noise: 0.0, samples_per_class: 1, ..TaskSpec::single(Factor::Shape, 1, 0) };
        let d = gen_synthetic_task(&s).unwrap();
        assert_eq!(d.len(), 4);
        let x = d.batch::<f64>(&[0, 1, 2, 3]);
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn spec_errors() {
        let mut s = TaskSpec::single(Factor::Color, 2, 0);
        s.class_map = Some(vec![0, 0, 2, 2]);
        assert!(matches!(gen_synthetic_task(&s), Err(Error::Spec(_))));
        s.class_map = Some(vec![0, 1]);
        assert!(gen_synthetic_task(&s).is_err());
        s.class_map = Some(vec![0, 1, 1, 0]);
        assert_eq!(gen_synthetic_task(&s).unwrap().classes, 2);
        assert!(gen_synthetic_task(&TaskSpec { noise: 0.6, ..TaskSpec::single(Factor::Color, 2, 0) }).is_err());
        assert!(gen_synthetic_task(&TaskSpec { factors: vec![], ..TaskSpec::single(Factor::Color, 2, 0) }).is_err());
    }

    #[test]
    fn split_is_disjoint_and_stratified() {
        let d = gen_synthetic_task(&TaskSpec::single(Factor::Orientation, 10, 1)).unwrap();
        let (tr, te) = split(&d, 0.8, 4).unwrap();
        assert_eq!(tr.class_counts(), vec![8; 4]);
        assert_eq!(te.class_counts(), vec![2; 4]);
        let per = d.sample_len();
        for i in 0..te.len() {
            let img = &te.pixels[i * per..(i + 1) * per];
            assert!((0..tr.len()).all(|j| &tr.pixels[j * per..(j + 1) * per] != img));
        }
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(matches!(Dataset::new(vec![0; 3], vec![2], 3, 1, 2, ""), Err(Error::Label { label: 2, classes: 2 })));
        assert!(Dataset::new(vec![0; 4], vec![0], 3, 1, 2, "").is_err());
    }
}
