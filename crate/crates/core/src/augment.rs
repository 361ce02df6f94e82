//! Training-time augmentation. Geometric transforms act exactly on the u8
//! image and mask together; photometric jitter acts on the normalized float
//! image only.

use crate::error::PipelineError;
use crate::raster::{GrayRaster, RgbRaster};
use crate::tensor::{lit, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub rot90: bool,
    pub hflip: bool,
    pub vflip: bool,
    /// Additive brightness drawn from [-delta, delta].
    pub brightness_delta: f64,
    /// Multiplicative contrast drawn from [lo, hi].
    pub contrast_range: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            rot90: true,
            hflip: true,
            vflip: true,
            brightness_delta: 0.2,
            contrast_range: (0.8, 1.2),
        }
    }
}

impl AugConfig {
    /// No-op augmentation.
    pub fn none() -> Self {
        AugConfig {
            rot90: false,
            hflip: false,
            vflip: false,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(0.0..=1.0).contains(&self.brightness_delta) {
            return Err(PipelineError::Invalid(format!(
                "brightness_delta {} outside [0, 1]",
                self.brightness_delta
            )));
        }
        let (lo, hi) = self.contrast_range;
        if !(0.0 < lo && lo <= hi) {
            return Err(PipelineError::Invalid(format!(
                "contrast range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }
}

/// The geometric part of a draw, applicable to any raster pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeomDraw {
    /// Quarter turns, counter-clockwise.
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl GeomDraw {
    pub const IDENTITY: GeomDraw = GeomDraw {
        quarter_turns: 0,
        hflip: false,
        vflip: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugDraw {
    pub geom: GeomDraw,
    pub contrast: f64,
    pub brightness: f64,
}

/// Sample one augmentation. Draw order is fixed, so a given rng state always
/// produces the same transform.
pub fn draw(config: &AugConfig, rng: &mut ChaCha8Rng) -> AugDraw {
    let quarter_turns = if config.rot90 { rng.gen_range(0..4u8) } else { 0 };
    let hflip = config.hflip && rng.gen_bool(0.5);
    let vflip = config.vflip && rng.gen_bool(0.5);
    let (lo, hi) = config.contrast_range;
    let contrast = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let brightness = if config.brightness_delta == 0.0 {
        0.0
    } else {
        rng.gen_range(-config.brightness_delta..=config.brightness_delta)
    };
    AugDraw {
        geom: GeomDraw {
            quarter_turns,
            hflip,
            vflip,
        },
        contrast,
        brightness,
    }
}

fn map_index(geom: GeomDraw, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
    // Destination (y, x) pulls from this source position; each step inverts
    // one stage of the forward transform (rotate, then hflip, then vflip).
    let (mut sy, mut sx) = (y, x);
    if geom.vflip {
        sy = h - 1 - sy;
    }
    if geom.hflip {
        sx = w - 1 - sx;
    }
    // Inverse of a CCW quarter turn is a CW one. Extents before rotation are
    // the transposed ones when turns are odd.
    // CCW forward maps src (y, x) to dst (srcW-1-x, y); pull back through
    // the inverse, remembering dst h = src w on odd turns.
    match geom.quarter_turns % 4 {
        0 => (sy, sx),
        1 => (sx, h - 1 - sy),
        2 => (h - 1 - sy, w - 1 - sx),
        _ => (w - 1 - sx, sy),
    }
}

/// Output extents after the geometric transform of an h x w raster.
fn out_extents(geom: GeomDraw, h: usize, w: usize) -> (usize, usize) {
    if geom.quarter_turns % 2 == 1 {
        (w, h)
    } else {
        (h, w)
    }
}

pub fn apply_geom_rgb(geom: GeomDraw, img: &RgbRaster) -> RgbRaster {
    let (oh, ow) = out_extents(geom, img.h, img.w);
    let mut out = RgbRaster::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = map_index(geom, oh, ow, y, x);
            out.set(y, x, img.at(sy, sx));
        }
    }
    out
}

pub fn apply_geom_gray(geom: GeomDraw, mask: &GrayRaster) -> GrayRaster {
    let (oh, ow) = out_extents(geom, mask.h, mask.w);
    let mut out = GrayRaster::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = map_index(geom, oh, ow, y, x);
            out.set(y, x, mask.at(sy, sx));
        }
    }
    out
}

/// Photometric jitter on a [1,3,H,W] tensor in [0,1]: clamp(c*x + b, 0, 1).
pub fn apply_photometric<T: Scalar>(t: &mut Tensor<T>, contrast: f64, brightness: f64) {
    let c = lit::<T>(contrast);
    let b = lit::<T>(brightness);
    for v in t.data_mut() {
        let x = c * *v + b;
        *v = x.max(T::zero()).min(T::one());
    }
}

/// Augment an image/mask pair: geometry on both, photometrics on the image
/// tensor only. Returns the normalized image tensor and transformed mask.
pub fn apply<T: Scalar>(
    d: AugDraw,
    image: &RgbRaster,
    mask: &GrayRaster,
) -> (Tensor<T>, GrayRaster) {
    let img = apply_geom_rgb(d.geom, image);
    let mask = apply_geom_gray(d.geom, mask);
    let mut t = img.to_tensor::<T>();
    apply_photometric(&mut t, d.contrast, d.brightness);
    (t, mask)
}
