//! Sliding-window tiling for inference on rasters larger than one crop, and
//! the probability-averaging stitcher that reassembles full-extent output.

use crate::error::PipelineError;
use crate::raster::GrayRaster;

/// Row-major crop origins covering an `extent`-long axis with `crop`-sized
/// windows every `stride` pixels; a final edge-aligned window guarantees
/// full coverage.
fn axis_positions(extent: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut pos = Vec::new();
    let last = extent - crop;
    let mut p = 0;
    while p < last {
        pos.push(p);
        p += stride;
    }
    pos.push(last);
    pos
}

/// Crop origins (y, x), row-major.
pub fn tile_coords(
    extent_h: usize,
    extent_w: usize,
    crop: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>, PipelineError> {
    if crop == 0 || stride == 0 {
        return Err(PipelineError::Invalid("crop and stride must be positive".into()));
    }
    if stride > crop {
        return Err(PipelineError::Invalid(format!(
            "stride {stride} exceeds crop {crop}: tiles would leave gaps"
        )));
    }
    if crop > extent_h || crop > extent_w {
        return Err(PipelineError::Invalid(format!(
            "crop {crop} exceeds raster extents {extent_w}x{extent_h}"
        )));
    }
    let ys = axis_positions(extent_h, crop, stride);
    let xs = axis_positions(extent_w, crop, stride);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push((y, x));
        }
    }
    Ok(out)
}

/// Accumulates per-class probability planes of overlapping crops; `finish`
/// averages and takes the argmax.
pub struct Stitcher {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl Stitcher {
    pub fn new(k: usize, h: usize, w: usize) -> Self {
        Stitcher {
            k,
            h,
            w,
            sums: vec![0.0; k * h * w],
            counts: vec![0; h * w],
        }
    }

    /// Add one crop's class planes (plane-major, `ch` x `cw` each) at origin
    /// (y0, x0).
    pub fn add(
        &mut self,
        y0: usize,
        x0: usize,
        ch: usize,
        cw: usize,
        planes: &[f32],
    ) -> Result<(), PipelineError> {
        if planes.len() != self.k * ch * cw {
            return Err(PipelineError::Invalid(format!(
                "crop carries {} values, expected {} ({} planes of {cw}x{ch})",
                planes.len(),
                self.k * ch * cw,
                self.k
            )));
        }
        if y0 + ch > self.h || x0 + cw > self.w {
            return Err(PipelineError::Invalid(format!(
                "crop {cw}x{ch} at ({y0}, {x0}) leaves the {}x{} canvas",
                self.w, self.h
            )));
        }
        let plane = self.h * self.w;
        let crop_plane = ch * cw;
        for y in 0..ch {
            for x in 0..cw {
                let dst = (y0 + y) * self.w + (x0 + x);
                self.counts[dst] += 1;
                for c in 0..self.k {
                    self.sums[c * plane + dst] += planes[c * crop_plane + y * cw + x] as f64;
                }
            }
        }
        Ok(())
    }

    /// Mean probabilities and their argmax mask. Every pixel must have been
    /// covered by at least one crop.
    pub fn finish(self) -> Result<(Vec<f32>, GrayRaster), PipelineError> {
        let holes: Vec<usize> = self
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect();
        if !holes.is_empty() {
            let coords: Vec<String> = holes
                .iter()
                .take(5)
                .map(|&i| format!("({}, {})", i / self.w, i % self.w))
                .collect();
            return Err(PipelineError::Invalid(format!(
                "{} uncovered pixels after stitching, first at {}",
                holes.len(),
                coords.join(", ")
            )));
        }
        let plane = self.h * self.w;
        let mut probs = vec![0.0f32; self.k * plane];
        for c in 0..self.k {
            for i in 0..plane {
                probs[c * plane + i] = (self.sums[c * plane + i] / self.counts[i] as f64) as f32;
            }
        }
        let mask = crate::metrics::argmax_planes(&probs, self.k, self.h, self.w);
        Ok((probs, mask))
    }
}
