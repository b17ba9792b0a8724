//! In-memory labelled image sets and batch assembly.

use rand::Rng as _;

use crate::blocks::Shape3;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Images stored contiguously as C×H×W f32 planes with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: Shape3,
    num_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: Shape3, num_classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || num_classes == 0 {
            return Err(Error::Data("image shape and class count must be positive".into()));
        }
        if images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel values do not make {} images of {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            shape,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    /// Samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// The first `k` samples of every class, in their original order.
    pub fn subset_per_class(&self, k: usize) -> Self {
        let mut taken = vec![0; self.num_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let y = self.labels[i];
                taken[y] += 1;
                taken[y] <= k
            })
            .collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stacks the given samples into an N×C×H×W tensor. With `augment`, each
    /// image is randomly flipped horizontally and cropped from a zero-padded copy.
    pub fn batch(&self, indices: &[usize], augment: Option<(&mut Rng, usize)>) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let per = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        match augment {
            None => {
                for &i in indices {
                    data.extend_from_slice(self.image(i));
                }
            }
            Some((rng, pad)) => {
                for &i in indices {
                    let flip = rng.random_bool(0.5);
                    let dy = rng.random_range(0..=2 * pad);
                    let dx = rng.random_range(0..=2 * pad);
                    data.extend(shift_flip(self.image(i), self.shape, pad, dy, dx, flip));
                }
            }
        }
        let [c, h, w] = self.shape;
        let x = Tensor::new(vec![indices.len(), c, h, w], data)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Crop at offset `(dy, dx)` of the image zero-padded by `pad`, optionally mirrored.
fn shift_flip(img: &[f32], shape: Shape3, pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;

    fn toy() -> Dataset {
        let labels = vec![0, 1, 0, 2, 1, 0];
        let images = (0..6 * 4).map(|v| v as f32).collect();
        Dataset::new([1, 2, 2], 3, images, labels).unwrap()
    }

    #[test]
    fn validation() {
        assert!(Dataset::new([1, 2, 2], 3, vec![0.0; 7], vec![0, 1]).is_err());
        assert!(matches!(Dataset::new([1, 2, 2], 3, vec![0.0; 4], vec![3]), Err(Error::Data(_))));
    }

    #[test]
    fn subset_takes_first_per_class() {
        let d = toy();
        let s = d.subset_per_class(1);
        assert_eq!(s.labels(), &[0, 1, 2]);
        assert_eq!(s.image(2), d.image(3));
        assert_eq!(d.class_histogram(), [3, 2, 1]);
    }

    #[test]
    fn batch_stacks_images() {
        let d = toy();
        let (x, y) = d.batch(&[3, 0], None).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(&x.data()[..4], d.image(3));
        assert_eq!(y, [2, 0]);
    }

    #[test]
    fn shift_flip_geometry() {
        let img: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let shape = [1, 3, 3];
        assert_eq!(shift_flip(&img, shape, 1, 1, 1, false), img);
        let flipped = shift_flip(&img, shape, 1, 1, 1, true);
        assert_eq!(flipped, [3.0, 2.0, 1.0, 6.0, 5.0, 4.0, 9.0, 8.0, 7.0]);
        let down = shift_flip(&img, shape, 1, 0, 1, false);
        assert_eq!(down, [0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn augmentation_is_seeded() {
        let d = toy();
        let mut a = rng_from_seed(1);
        let mut b = rng_from_seed(1);
        assert_eq!(d.batch(&[0, 1, 2], Some((&mut a, 1))).unwrap(), d.batch(&[0, 1, 2], Some((&mut b, 1))).unwrap());
    }
}
