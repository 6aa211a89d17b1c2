//! Weak (identity) and strong (distort / stretch / perspective) image
//! augmentation, and the per-epoch assignment of policies to the branches.

use nalgebra::{SMatrix, SVector};
use rand::Rng;

use crate::data::{Image, MIN_SIDE};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Weak,
    Strong,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Weak => "weak",
            PolicyKind::Strong => "strong",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub kind: PolicyKind,
    pub p_distort: f64,
    pub p_stretch: f64,
    pub p_perspective: f64,
    /// Control points per side of the distortion mesh.
    pub grid: usize,
    /// Largest control-point displacement, as a fraction of image height.
    pub max_disp_frac: f64,
    pub stretch_lo: f64,
    pub stretch_hi: f64,
    /// Largest corner displacement, as a fraction of the matching side.
    pub persp_frac: f64,
}

impl AugmentationPolicy {
    pub fn weak() -> Self {
        AugmentationPolicy { kind: PolicyKind::Weak, p_distort: 0.0, p_stretch: 0.0, p_perspective: 0.0, ..Self::strong() }
    }

    pub fn strong() -> Self {
        AugmentationPolicy {
            kind: PolicyKind::Strong,
            p_distort: 1.0,
            p_stretch: 0.5,
            p_perspective: 0.3,
            grid: 4,
            max_disp_frac: 0.08,
            stretch_lo: 0.75,
            stretch_hi: 1.25,
            persp_frac: 0.1,
        }
    }
}

/// Random choices for one strong augmentation; drawing it is separate from
/// applying it so application rates can be measured cheaply.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    /// Row-major `grid × grid` control displacements `(dy, dx)` in units of image height.
    pub distort: Option<Vec<(f64, f64)>>,
    /// `(sy, sx)` scale factors.
    pub stretch: Option<(f64, f64)>,
    /// Corner offsets `(dy, dx)` for top-left, top-right, bottom-right,
    /// bottom-left, as fractions of the height and width.
    pub perspective: Option<[(f64, f64); 4]>,
}

pub fn sample_plan(seed: u64, policy: &AugmentationPolicy) -> AugmentPlan {
    let mut rng = seed::rng_for(&[seed, 0xa06]);
    let do_distort = rng.gen::<f64>() < policy.p_distort;
    let do_stretch = rng.gen::<f64>() < policy.p_stretch;
    let do_persp = rng.gen::<f64>() < policy.p_perspective;
    let m = policy.max_disp_frac;
    let distort = (do_distort && policy.grid >= 2 && m > 0.0).then(|| {
        (0..policy.grid * policy.grid).map(|_| (rng.gen_range(-m..=m), rng.gen_range(-m..=m))).collect()
    });
    let stretch = do_stretch.then(|| {
        let (lo, hi) = (policy.stretch_lo, policy.stretch_hi);
        (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
    });
    let p = policy.persp_frac;
    let perspective = do_persp.then(|| std::array::from_fn(|_| (rng.gen_range(-p..=p), rng.gen_range(-p..=p))));
    AugmentPlan { distort, stretch, perspective }
}

/// The weak policy: returns the image unchanged.
pub fn weak_augment(image: &Image) -> Image {
    image.clone()
}

pub fn strong_augment(image: &Image, seed: u64, policy: &AugmentationPolicy) -> Image {
    apply_plan(image, &sample_plan(seed, policy))
}

/// Dispatches on the policy kind.
pub fn augment(image: &Image, seed: u64, policy: &AugmentationPolicy) -> Image {
    match policy.kind {
        PolicyKind::Weak => weak_augment(image),
        PolicyKind::Strong => strong_augment(image, seed, policy),
    }
}

pub fn apply_plan(image: &Image, plan: &AugmentPlan) -> Image {
    let mut out = image.clone();
    if let Some(d) = &plan.distort {
        out = distort(&out, d);
    }
    if let Some((sy, sx)) = plan.stretch {
        out = stretch(&out, sy, sx);
    }
    if let Some(c) = &plan.perspective {
        out = perspective(&out, c);
    }
    out.pixels_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

fn resample(h: usize, w: usize, src: &Image, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut out = Image::blank(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            out.set(y, x, src.sample_bilinear(sy, sx));
        }
    }
    out
}

fn distort(img: &Image, disp: &[(f64, f64)]) -> Image {
    let g = (disp.len() as f64).sqrt().round() as usize;
    let (h, w) = (img.height(), img.width());
    let scale = h as f64;
    resample(h, w, img, |y, x| {
        let gy = (y + 0.5) / h as f64 * (g - 1) as f64;
        let gx = (x + 0.5) / w as f64 * (g - 1) as f64;
        let (iy, ix) = ((gy.floor() as usize).min(g - 2), (gx.floor() as usize).min(g - 2));
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let at = |r: usize, c: usize| disp[r * g + c];
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(at(iy, ix), at(iy, ix + 1), fx);
        let bot = lerp(at(iy + 1, ix), at(iy + 1, ix + 1), fx);
        let (dy, dx) = lerp(top, bot, fy);
        (y + dy * scale, x + dx * scale)
    })
}

fn stretch(img: &Image, sy: f64, sx: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let nh = ((h as f64 * sy).round() as usize).max(MIN_SIDE);
    let nw = ((w as f64 * sx).round() as usize).max(MIN_SIDE);
    let (ry, rx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    resample(nh, nw, img, |y, x| ((y + 0.5) * ry - 0.5, (x + 0.5) * rx - 0.5))
}

/// Homography `H` with `H · (x, y, 1) ∝ (x', y', 1)` for four correspondences.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<SMatrix<f64, 3, 3>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ((x, y), (u, v)) = (from[i], to[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let s = a.lu().solve(&b)?;
    Some(SMatrix::<f64, 3, 3>::new(s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7], 1.0))
}

fn perspective(img: &Image, offsets: &[(f64, f64); 4]) -> Image {
    let (h, w) = (img.height(), img.width());
    let (hf, wf) = ((h - 1) as f64, (w - 1) as f64);
    let src = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let dst: [(f64, f64); 4] = std::array::from_fn(|i| (src[i].0 + offsets[i].1 * wf, src[i].1 + offsets[i].0 * hf));
    // Map output pixels back into the source.
    let Some(hm) = homography(&dst, &src) else { return img.clone() };
    resample(h, w, img, |y, x| {
        let p = hm * nalgebra::Vector3::new(x, y, 1.0);
        if p[2].abs() < 1e-12 {
            (-1e9, -1e9)
        } else {
            (p[1] / p[2], p[0] / p[2])
        }
    })
}

/// Which policy each decoder branch gets in an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchAssignment {
    pub epoch: usize,
    pub decoder1: PolicyKind,
    pub decoder2: PolicyKind,
}

impl BranchAssignment {
    /// Index (0 or 1) of the branch on the weak policy.
    pub fn weak_branch(&self) -> usize {
        if self.decoder1 == PolicyKind::Weak {
            0
        } else {
            1
        }
    }
}

/// Fixed weak/strong before `warmup_epochs`; afterwards alternates every
/// epoch starting with decoder 1 weak.
pub fn assign_branch_policies(epoch: usize, warmup_epochs: usize) -> BranchAssignment {
    let swapped = epoch >= warmup_epochs && (epoch - warmup_epochs) % 2 == 1;
    let (decoder1, decoder2) = if swapped {
        (PolicyKind::Strong, PolicyKind::Weak)
    } else {
        (PolicyKind::Weak, PolicyKind::Strong)
    };
    BranchAssignment { epoch, decoder1, decoder2 }
}
