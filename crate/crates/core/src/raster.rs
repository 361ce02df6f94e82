//! In-memory rasters and binary netpbm (P6/P5) serialization.
//!
//! Images travel as 8-bit RGB (`P6`), masks as 8-bit gray (`P5`) holding
//! only 0 and 255, decoded back to class ids {0, 1}.

use crate::error::PipelineError;
use crate::tensor::{lit, Scalar, Shape, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbRaster {
    pub w: usize,
    pub h: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn new(w: usize, h: usize) -> Self {
        RgbRaster {
            w,
            h,
            data: vec![0; 3 * w * h],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.w + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, px: [u8; 3]) {
        let i = 3 * (y * self.w + x);
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> RgbRaster {
        assert!(y0 + h <= self.h && x0 + w <= self.w, "crop out of bounds");
        let mut out = RgbRaster::new(w, h);
        for y in 0..h {
            let src = 3 * ((y0 + y) * self.w + x0);
            let dst = 3 * (y * w);
            out.data[dst..dst + 3 * w].copy_from_slice(&self.data[src..src + 3 * w]);
        }
        out
    }

    /// [1, 3, H, W] tensor scaled to [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(Shape::new(1, 3, self.h, self.w));
        let plane = self.h * self.w;
        {
            let d = t.data_mut();
            for i in 0..plane {
                for c in 0..3 {
                    d[c * plane + i] = lit::<T>(self.data[3 * i + c] as f64 / 255.0);
                }
            }
        }
        t
    }
}

/// Single-channel class-id raster; values are {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayRaster {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl GrayRaster {
    pub fn new(w: usize, h: usize) -> Self {
        GrayRaster {
            w,
            h,
            data: vec![0; w * h],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> GrayRaster {
        assert!(y0 + h <= self.h && x0 + w <= self.w, "crop out of bounds");
        let mut out = GrayRaster::new(w, h);
        for y in 0..h {
            let src = (y0 + y) * self.w + x0;
            out.data[y * w..(y + 1) * w].copy_from_slice(&self.data[src..src + w]);
        }
        out
    }

    pub fn count_of(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> PipelineError {
    PipelineError::RasterFormat {
        path: path.display().to_string(),
        detail: msg.into(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::io(path.display().to_string(), e)
}

/// Pull the next whitespace-delimited token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn read_header(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize), PipelineError> {
    let mut pos = 0;
    let tok = next_token(bytes, &mut pos).ok_or_else(|| fmt_err(path, "empty file"))?;
    if tok != magic {
        return Err(fmt_err(path, format!("magic '{tok}', expected '{magic}'")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let t = next_token(bytes, &mut pos).ok_or_else(|| fmt_err(path, "truncated header"))?;
        *d = t
            .parse()
            .map_err(|_| fmt_err(path, format!("header field {} is '{t}', not a number", i + 1)))?;
    }
    let [w, h, maxval] = dims;
    if w == 0 || h == 0 {
        return Err(fmt_err(path, format!("degenerate extents {w}x{h}")));
    }
    if maxval != 255 {
        return Err(fmt_err(path, format!("maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates header and payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err(path, "missing header terminator"));
    }
    Ok((w, h, pos + 1))
}

pub fn write_ppm(path: &Path, img: &RgbRaster) -> Result<(), PipelineError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P6\n{} {}\n255\n", img.w, img.h).map_err(|e| io_err(path, e))?;
    w.write_all(&img.data).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbRaster, PipelineError> {
    let mut bytes = Vec::new();
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    BufReader::new(f).read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    let (w, h, payload) = read_header(path, &bytes, "P6")?;
    let need = 3 * w * h;
    let data = &bytes[payload..];
    if data.len() < need {
        return Err(fmt_err(path, format!("payload {} bytes, need {need}", data.len())));
    }
    if data.len() > need {
        return Err(fmt_err(path, format!("{} trailing bytes", data.len() - need)));
    }
    Ok(RgbRaster {
        w,
        h,
        data: data.to_vec(),
    })
}

/// Store a {0,1} mask as P5 with 0 -> 0 and 1 -> 255.
pub fn write_mask_pgm(path: &Path, mask: &GrayRaster) -> Result<(), PipelineError> {
    if let Some(v) = mask.data.iter().find(|&&v| v > 1) {
        return Err(fmt_err(path, format!("mask holds class id {v}, expected 0 or 1")));
    }
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{} {}\n255\n", mask.w, mask.h).map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Store arbitrary 8-bit grayscale as P5, values written verbatim.
pub fn write_gray_pgm(path: &Path, gray: &GrayRaster) -> Result<(), PipelineError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{} {}\n255\n", gray.w, gray.h).map_err(|e| io_err(path, e))?;
    w.write_all(&gray.data).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a P5 mask; any sample other than 0 or 255 is an error.
pub fn read_mask_pgm(path: &Path) -> Result<GrayRaster, PipelineError> {
    let mut bytes = Vec::new();
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    BufReader::new(f).read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    let (w, h, payload) = read_header(path, &bytes, "P5")?;
    let need = w * h;
    let data = &bytes[payload..];
    if data.len() < need {
        return Err(fmt_err(path, format!("payload {} bytes, need {need}", data.len())));
    }
    if data.len() > need {
        return Err(fmt_err(path, format!("{} trailing bytes", data.len() - need)));
    }
    let mut out = GrayRaster::new(w, h);
    for (i, &v) in data.iter().enumerate() {
        out.data[i] = match v {
            0 => 0,
            255 => 1,
            other => {
                return Err(fmt_err(
                    path,
                    format!("non-binary mask value {other} at ({}, {})", i / w, i % w),
                ))
            }
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ramp_rgb(w: usize, h: usize) -> RgbRaster {
        let mut img = RgbRaster::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, [(x * 7) as u8, (y * 11) as u8, ((x + y) * 3) as u8]);
            }
        }
        img
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = ramp_rgb(13, 9);
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn gray_pgm_writes_values_verbatim() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let mut gray = GrayRaster::new(3, 2);
        for (i, v) in [0u8, 17, 130, 255, 4, 99].iter().enumerate() {
            gray.set(i / 3, i % 3, *v);
        }
        write_gray_pgm(&p, &gray).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0u8, 17, 130, 255, 4, 99]);
    }

    #[test]
    fn pgm_round_trip_maps_255_to_class_1() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut mask = GrayRaster::new(5, 4);
        mask.set(2, 3, 1);
        mask.set(0, 0, 1);
        write_mask_pgm(&p, &mask).unwrap();
        let back = read_mask_pgm(&p).unwrap();
        assert_eq!(back, mask);
        // On disk the foreground byte is 255.
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(*bytes.last().unwrap(), 0);
        assert_eq!(bytes[bytes.len() - 20], 255); // (0,0) of a 5x4 payload
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        let mut payload = b"P6 # format\n# extents follow\n2 1\n255\n".to_vec();
        payload.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        std::fs::write(&p, &payload).unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!((img.w, img.h), (2, 1));
        assert_eq!(img.at(0, 1), [4, 5, 6]);
    }

    #[test]
    fn gray_128_is_rejected_with_location() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut payload = b"P5\n3 2\n255\n".to_vec();
        payload.extend_from_slice(&[0, 255, 0, 0, 128, 255]);
        std::fs::write(&p, &payload).unwrap();
        let err = read_mask_pgm(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("128") && msg.contains("(1, 1)"), "{msg}");
    }

    #[test]
    fn wrong_maxval_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        std::fs::write(&p, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(read_mask_pgm(&p).unwrap_err().to_string().contains("maxval"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        std::fs::write(&p, b"P6\n4 4\n255\nshort").unwrap();
        assert!(read_ppm(&p).unwrap_err().to_string().contains("payload"));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(read_ppm(&p).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn crop_matches_direct_indexing() {
        let img = ramp_rgb(10, 8);
        let c = img.crop(2, 3, 4, 5);
        assert_eq!((c.w, c.h), (5, 4));
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(c.at(y, x), img.at(y + 2, x + 3));
            }
        }
    }

    #[test]
    fn tensor_conversion_is_normalized_chw() {
        let mut img = RgbRaster::new(2, 1);
        img.set(0, 0, [255, 0, 51]);
        img.set(0, 1, [0, 255, 102]);
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 1, 0, 1), 1.0);
        assert!((t.at(0, 2, 0, 0) - 0.2).abs() < 1e-6);
    }
}
