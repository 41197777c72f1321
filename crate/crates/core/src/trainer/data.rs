use crate::error::Result;
use crate::imaging::{bicubic_resize, degrade, ImagePlane};

/// Which augmentations to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flips: bool,
    pub rotations: bool,
    pub downscales: bool,
}

impl Augment {
    pub const ALL: Augment = Augment {
        flips: true,
        rotations: true,
        downscales: true,
    };

    pub const NONE: Augment = Augment {
        flips: false,
        rotations: false,
        downscales: false,
    };
}

pub const DOWNSCALE_FACTORS: [f64; 2] = [0.7, 0.5];

/// The dihedral closure of flips and rotations of `image`, followed by
/// bicubic downscales of the original. Duplicates are not removed.
pub fn augment(image: &ImagePlane, opts: Augment) -> Vec<ImagePlane> {
    let mut bases = vec![image.clone()];
    if opts.flips {
        bases.push(image.flip_horizontal());
    }
    let mut out = Vec::new();
    for b in &bases {
        out.push(b.clone());
        if opts.rotations {
            out.push(b.rotate90());
            out.push(b.rotate180());
            out.push(b.rotate270());
        }
    }
    if opts.downscales {
        for f in DOWNSCALE_FACTORS {
            let w = (image.width() as f64 * f).ceil() as usize;
            let h = (image.height() as f64 * f).ceil() as usize;
            if let Ok(small) = bicubic_resize(image, w.max(1), h.max(1), true) {
                out.push(small);
            }
        }
    }
    out
}

/// Co-located, non-overlapping `patch × patch` tiles. Partial tiles at the
/// right and bottom edges are dropped.
pub fn extract_patches(lr: &ImagePlane, hr: &ImagePlane, patch: usize) -> Result<Vec<(ImagePlane, ImagePlane)>> {
    if (lr.width(), lr.height()) != (hr.width(), hr.height()) {
        return Err(crate::error::Error::invalid(format!(
            "LR {}x{} and HR {}x{} differ in size",
            lr.width(),
            lr.height(),
            hr.width(),
            hr.height()
        )));
    }
    if patch == 0 {
        return Err(crate::error::Error::invalid("patch size must be positive"));
    }
    let mut out = Vec::new();
    for ty in 0..hr.height() / patch {
        for tx in 0..hr.width() / patch {
            let (x, y) = (tx * patch, ty * patch);
            out.push((lr.crop(x, y, patch, patch)?, hr.crop(x, y, patch, patch)?));
        }
    }
    Ok(out)
}

/// A training pair stored as flat row-major `patch × patch` arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub lr: Vec<f64>,
    pub hr: Vec<f64>,
}

/// Every LR/HR patch of every augmented variant at every scale, in a fixed
/// order (image, variant, scale, raster tile).
pub fn build_pool(images: &[ImagePlane], scales: &[usize], patch: usize, opts: Augment) -> Result<Vec<Sample>> {
    let mut pool = Vec::new();
    for image in images {
        for variant in augment(image, opts) {
            for &scale in scales {
                if variant.width() < patch || variant.height() < patch {
                    continue;
                }
                let (lr, hr) = degrade(&variant, scale)?;
                for (l, h) in extract_patches(&lr, &hr, patch)? {
                    pool.push(Sample {
                        lr: l.into_values(),
                        hr: h.into_values(),
                    });
                }
            }
        }
    }
    Ok(pool)
}
