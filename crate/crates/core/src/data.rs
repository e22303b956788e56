//! Synthetic desk-scale datasets: Gaussian blobs for classification and
//! noisy ellipse images for binary segmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain, Result};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Task {
    Classification,
    Segmentation,
}

/// One split: inputs with a leading example axis and one label per position
/// (per example, or per pixel in row-major order for segmentation).
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions_per_example(&self) -> usize {
        self.labels.len() / self.len()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.positions_per_example();
        let inputs = self.inputs.gather_batch(indices);
        let mut labels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            labels.extend_from_slice(&self.labels[i * per..(i + 1) * per]);
        }
        (inputs, labels)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub classes: usize,
    pub seed: u64,
    pub train: Split,
    pub eval: Split,
}

/// Parameters of [`gen_blobs`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub train_per_class: Vec<usize>,
    pub eval_per_class: Vec<usize>,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Gaussian clusters; class `k` is centred at angle `2*pi*k/C` on the unit
/// circle in the first two coordinates (remaining coordinates centred at 0).
///
/// Train and eval are drawn from independent streams of the same seed.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(domain("blobs need at least two classes"));
    }
    if spec.dim < 2 {
        return Err(domain("blobs need at least two input dimensions"));
    }
    for counts in [&spec.train_per_class, &spec.eval_per_class] {
        if counts.len() != spec.classes || counts.contains(&0) {
            return Err(domain(format!(
                "per-class counts must list {} positive entries",
                spec.classes
            )));
        }
    }
    if !(spec.spread >= 0.0) {
        return Err(domain("spread must be nonnegative"));
    }
    let train = blob_split(spec, &spec.train_per_class, Stream::TrainData);
    let eval = blob_split(spec, &spec.eval_per_class, Stream::EvalData);
    Ok(Dataset {
        name: format!("blobs-c{}-d{}", spec.classes, spec.dim),
        task: Task::Classification,
        classes: spec.classes,
        seed: spec.seed,
        train,
        eval,
    })
}

pub fn blob_center(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    let angle = core::f64::consts::TAU * class as f64 / classes as f64;
    let mut c = vec![0.0; dim];
    c[0] = libm::cos(angle);
    c[1] = libm::sin(angle);
    c
}

fn blob_split(spec: &BlobSpec, counts: &[usize], stream: Stream) -> Split {
    let mut rng = SeededRng::new(spec.seed, stream);
    let total: usize = counts.iter().sum();
    let mut order: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| core::iter::repeat_n(k, n))
        .collect();
    rng.shuffle(&mut order);
    let mut data = Vec::with_capacity(total * spec.dim);
    for &k in &order {
        let center = blob_center(k, spec.classes, spec.dim);
        for c in center {
            data.push(c + spec.spread * rng.normal());
        }
    }
    Split {
        inputs: Tensor::new(vec![total, spec.dim], data).expect("sized above"),
        labels: order,
    }
}

/// Parameters of [`gen_seg_blobs`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegSpec {
    pub n_train: usize,
    pub n_eval: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the background noise.
    pub noise: f64,
    pub seed: u64,
}

/// A filled, rotated ellipse in pixel coordinates (pixel centres at integer
/// row/column positions).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 - self.cy;
        let dx = col as f64 - self.cx;
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let u = (dy * c + dx * s) / self.ry;
        let v = (-dy * s + dx * c) / self.rx;
        u * u + v * v <= 1.0
    }
}

/// Grayscale images with 0 to 3 bright ellipses on Gaussian noise; the
/// label map marks ellipse interiors (class 1) against background (class 0).
///
/// Returns the dataset plus the ellipses drawn in each train and eval image.
pub fn gen_seg_blobs(spec: &SegSpec) -> Result<(Dataset, Vec<Vec<Ellipse>>, Vec<Vec<Ellipse>>)> {
    if spec.height < 8 || spec.width < 8 {
        return Err(domain("segmentation images must be at least 8x8"));
    }
    if spec.n_train == 0 || spec.n_eval == 0 {
        return Err(domain("segmentation splits must be nonempty"));
    }
    let (train, train_shapes) = seg_split(spec, spec.n_train, Stream::TrainData);
    let (eval, eval_shapes) = seg_split(spec, spec.n_eval, Stream::EvalData);
    let ds = Dataset {
        name: format!("seg-blobs-{}x{}", spec.height, spec.width),
        task: Task::Segmentation,
        classes: 2,
        seed: spec.seed,
        train,
        eval,
    };
    Ok((ds, train_shapes, eval_shapes))
}

fn random_ellipse(spec: &SegSpec, rng: &mut SeededRng) -> Ellipse {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let max_r = (h.min(w) / 4.0).max(2.0);
    Ellipse {
        cy: rng.uniform_in(0.0, h - 1.0),
        cx: rng.uniform_in(0.0, w - 1.0),
        ry: rng.uniform_in(1.5, max_r),
        rx: rng.uniform_in(1.5, max_r),
        angle: rng.uniform_in(0.0, core::f64::consts::PI),
        intensity: rng.uniform_in(0.6, 1.2),
    }
}

/// Rasterizes ellipses into an image (given background) and its label map.
pub fn render(ellipses: &[Ellipse], height: usize, width: usize, background: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut image = background.to_vec();
    let mut labels = vec![0; height * width];
    for e in ellipses {
        for r in 0..height {
            for c in 0..width {
                if e.contains(r, c) {
                    image[r * width + c] += e.intensity;
                    labels[r * width + c] = 1;
                }
            }
        }
    }
    (image, labels)
}

fn seg_split(spec: &SegSpec, n: usize, stream: Stream) -> (Split, Vec<Vec<Ellipse>>) {
    let mut rng = SeededRng::new(spec.seed, stream);
    let plane = spec.height * spec.width;
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n * plane);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let count = rng.index(4);
        let ellipses: Vec<Ellipse> = (0..count).map(|_| random_ellipse(spec, &mut rng)).collect();
        let background: Vec<f64> = (0..plane).map(|_| spec.noise * rng.normal()).collect();
        let (image, mask) = render(&ellipses, spec.height, spec.width, &background);
        data.extend(image);
        labels.extend(mask);
        shapes.push(ellipses);
    }
    let inputs = Tensor::new(vec![n, 1, spec.height, spec.width], data).expect("sized above");
    (Split { inputs, labels }, shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(counts: Vec<usize>, spread: f64) -> BlobSpec {
        BlobSpec {
            classes: counts.len(),
            train_per_class: counts.clone(),
            eval_per_class: counts,
            dim: 2,
            spread,
            seed: 3,
        }
    }

    #[test]
    fn per_class_counts_match_request() {
        let ds = gen_blobs(&blobs(vec![100, 100, 10], 0.2)).unwrap();
        assert_eq!(ds.train.class_counts(3), vec![100, 100, 10]);
        assert_eq!(ds.eval.class_counts(3), vec![100, 100, 10]);
        assert_ne!(ds.train.inputs, ds.eval.inputs);
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = gen_blobs(&blobs(vec![20, 30], 0.3)).unwrap();
        let b = gen_blobs(&blobs(vec![20, 30], 0.3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_spread_puts_points_on_centres() {
        let ds = gen_blobs(&blobs(vec![5, 5, 5, 5], 0.0)).unwrap();
        for (i, &y) in ds.train.labels.iter().enumerate() {
            let c = blob_center(y, 4, 2);
            assert_eq!(&ds.train.inputs.data()[i * 2..i * 2 + 2], c.as_slice());
        }
    }

    #[test]
    fn blob_spec_validation() {
        assert!(gen_blobs(&blobs(vec![5], 0.1)).is_err());
        assert!(gen_blobs(&blobs(vec![5, 0], 0.1)).is_err());
    }

    #[test]
    fn empty_image_has_background_mask() {
        let (_, labels) = render(&[], 8, 8, &[0.0; 64]);
        assert!(labels.iter().all(|&y| y == 0));
    }

    #[test]
    fn seg_masks_match_ellipse_rasterization() {
        let spec = SegSpec { n_train: 10, n_eval: 4, height: 16, width: 16, noise: 0.3, seed: 5 };
        let (ds, train_shapes, _) = gen_seg_blobs(&spec).unwrap();
        for (i, shapes) in train_shapes.iter().enumerate() {
            let mut expected = 0;
            for r in 0..16 {
                for c in 0..16 {
                    let inside = shapes.iter().any(|e| {
                        let (dy, dx) = (r as f64 - e.cy, c as f64 - e.cx);
                        let u = (dy * e.angle.cos() + dx * e.angle.sin()) / e.ry;
                        let v = (-dy * e.angle.sin() + dx * e.angle.cos()) / e.rx;
                        u * u + v * v <= 1.0
                    });
                    expected += inside as usize;
                }
            }
            let got = ds.train.labels[i * 256..(i + 1) * 256].iter().sum::<usize>();
            assert_eq!(got, expected, "image {i}");
        }
        let (again, _, _) = gen_seg_blobs(&spec).unwrap();
        assert_eq!(ds, again);
        assert!(gen_seg_blobs(&SegSpec { height: 4, ..spec }).is_err());
    }
}
