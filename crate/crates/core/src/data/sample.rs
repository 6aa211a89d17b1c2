use hmer_tensor::Tensor;

use super::Vocabulary;
use crate::counting::CountVector;
use crate::error::{Error, Result};

/// Smallest accepted image side, in pixels.
pub const MIN_SIDE: usize = 8;

/// Grayscale image, row-major, ink = 1 on background = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(height * width, pixels.len(), "image buffer size mismatch");
        Image { height, width, pixels }
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Image { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel-centre coordinates; zero outside.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let at = |yy: isize, xx: isize| {
            if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                0.0
            } else {
                self.pixels[yy as usize * self.width + xx as usize]
            }
        };
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn ink(&self) -> f64 {
        self.pixels.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Labeled,
    Unlabeled,
}

/// One training or evaluation example. Labels exclude `sos` and end with
/// exactly one `eos`; unlabeled samples carry an empty label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: Vec<usize>,
    pub source: Source,
}

impl Sample {
    pub fn labeled(image: Image, label: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        check_image(&image)?;
        check_label(&label, vocab)?;
        Ok(Sample { image, label, source: Source::Labeled })
    }

    pub fn unlabeled(image: Image) -> Result<Self> {
        check_image(&image)?;
        Ok(Sample { image, label: Vec::new(), source: Source::Unlabeled })
    }

    pub fn is_labeled(&self) -> bool {
        self.source == Source::Labeled
    }

    /// Label content without the terminating `eos`.
    pub fn content(&self) -> &[usize] {
        self.label.split_last().map_or(&[][..], |(_, rest)| rest)
    }
}

fn check_image(image: &Image) -> Result<()> {
    if image.height() < MIN_SIDE || image.width() < MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "image {}x{} smaller than {MIN_SIDE}x{MIN_SIDE}",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// Checks the label contract: ids in range, no `sos`/`pad`, one trailing `eos`.
pub fn check_label(label: &[usize], vocab: &Vocabulary) -> Result<()> {
    let c = vocab.len();
    if let Some(&id) = label.iter().find(|&&id| id >= c) {
        return Err(Error::IdOutOfRange { id, classes: c });
    }
    if label.last() != Some(&vocab.eos()) {
        return Err(Error::InvalidLabel("label must end with eos".into()));
    }
    let body = &label[..label.len() - 1];
    if body.iter().any(|&id| vocab.is_special(id)) {
        return Err(Error::InvalidLabel("special token inside label".into()));
    }
    Ok(())
}

/// Per-class occurrence counts of a label; `sos`, `eos` and `pad` are not counted.
pub fn counting_ground_truth(label: &[usize], vocab: &Vocabulary) -> Result<CountVector> {
    let c = vocab.len();
    let mut counts = vec![0.0; c];
    for &id in label {
        if id >= c {
            return Err(Error::IdOutOfRange { id, classes: c });
        }
        if !vocab.is_special(id) {
            counts[id] += 1.0;
        }
    }
    Ok(CountVector::new(counts))
}

/// Zero-padded images and labels with validity masks.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[batch, h_max, w_max]`
    pub images: Tensor,
    /// 1 on original extents, 0 on padding; same shape as `images`.
    pub image_mask: Tensor,
    /// `[batch, l_max]`, padded with `pad`.
    pub labels: Vec<Vec<usize>>,
    /// 1 on real label positions.
    pub label_mask: Vec<Vec<f64>>,
    /// Original `(height, width)` per sample.
    pub sizes: Vec<(usize, usize)>,
    pub label_lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.dim(1)
    }

    pub fn width(&self) -> usize {
        self.images.dim(2)
    }

    pub fn max_label_len(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Recovers sample `i` (image and label) using the masks.
    pub fn uncollate(&self, i: usize) -> (Image, Vec<usize>) {
        let (hm, wm) = (self.height(), self.width());
        let plane = &self.images.data()[i * hm * wm..(i + 1) * hm * wm];
        let mplane = &self.image_mask.data()[i * hm * wm..(i + 1) * hm * wm];
        let h = (0..hm).filter(|&y| mplane[y * wm] > 0.5).count();
        let w = (0..wm).filter(|&x| mplane[x] > 0.5).count();
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            pixels.extend_from_slice(&plane[y * wm..y * wm + w]);
        }
        let label = self.labels[i]
            .iter()
            .zip(&self.label_mask[i])
            .filter(|(_, m)| **m > 0.5)
            .map(|(id, _)| *id)
            .collect();
        (Image::new(h, w, pixels), label)
    }
}

/// Pads images to the batch maximum and labels to the longest label.
pub fn collate(samples: &[&Sample], vocab: &Vocabulary) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot collate an empty list".into()));
    }
    let hm = samples.iter().map(|s| s.image.height()).max().unwrap_or(0);
    let wm = samples.iter().map(|s| s.image.width()).max().unwrap_or(0);
    let lm = samples.iter().map(|s| s.label.len()).max().unwrap_or(0);
    let b = samples.len();
    let mut images = vec![0.0; b * hm * wm];
    let mut mask = vec![0.0; b * hm * wm];
    let mut labels = Vec::with_capacity(b);
    let mut label_mask = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.image.height(), s.image.width());
        for y in 0..h {
            let dst = i * hm * wm + y * wm;
            images[dst..dst + w].copy_from_slice(&s.image.pixels()[y * w..(y + 1) * w]);
            mask[dst..dst + w].iter_mut().for_each(|m| *m = 1.0);
        }
        let mut l = s.label.clone();
        let mut lmask = vec![1.0; l.len()];
        l.resize(lm, vocab.pad());
        lmask.resize(lm, 0.0);
        labels.push(l);
        label_mask.push(lmask);
    }
    Ok(Batch {
        images: Tensor::new(&[b, hm, wm], images),
        image_mask: Tensor::new(&[b, hm, wm], mask),
        labels,
        label_mask,
        sizes: samples.iter().map(|s| (s.image.height(), s.image.width())).collect(),
        label_lengths: samples.iter().map(|s| s.label.len()).collect(),
    })
}
