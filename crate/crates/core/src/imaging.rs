//! Image planes, PNG I/O, BT.601 colour conversion and MATLAB-style bicubic
//! resampling.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Y,
    R,
    G,
    B,
    Cb,
    Cr,
}

/// A single-channel image with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    values: Vec<f64>,
    space: ColorSpace,
}

impl ImagePlane {
    /// Values are clamped into `[0, 1]`.
    pub fn new(width: usize, height: usize, mut values: Vec<f64>, space: ColorSpace) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} plane needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        clamp_unit(&mut values);
        Ok(ImagePlane {
            width,
            height,
            values,
            space,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64, space: ColorSpace) -> Self {
        ImagePlane {
            width,
            height,
            values: vec![value.clamp(0.0, 1.0); width * height],
            space,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn with_space(mut self, space: ColorSpace) -> Self {
        self.space = space;
        self
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> ImagePlane {
        ImagePlane {
            values: self.values.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    /// The `w × h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImagePlane> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{} plane",
                self.width, self.height
            )));
        }
        let values = (y0..y0 + h)
            .flat_map(|y| self.values[y * self.width + x0..y * self.width + x0 + w].iter().copied())
            .collect();
        Ok(ImagePlane {
            width: w,
            height: h,
            values,
            space: self.space,
        })
    }

    /// Largest top-left window whose sides are multiples of `scale`.
    pub fn crop_to_multiple(&self, scale: usize) -> Result<ImagePlane> {
        if scale == 0 {
            return Err(Error::invalid("scale must be positive"));
        }
        let w = self.width - self.width % scale;
        let h = self.height - self.height % scale;
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!(
                "{}x{} image is smaller than scale {scale}",
                self.width, self.height
            )));
        }
        self.crop(0, 0, w, h)
    }

    pub fn flip_horizontal(&self) -> ImagePlane {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        ImagePlane { values, ..self.clone() }
    }

    /// Rotation by 90° clockwise; the result is `height × width`.
    pub fn rotate90(&self) -> ImagePlane {
        let (w, h) = (self.width, self.height);
        let mut values = Vec::with_capacity(w * h);
        for y in 0..w {
            for x in 0..h {
                values.push(self.values[(h - 1 - x) * w + y]);
            }
        }
        ImagePlane {
            width: h,
            height: w,
            values,
            space: self.space,
        }
    }

    pub fn rotate180(&self) -> ImagePlane {
        ImagePlane {
            values: self.values.iter().rev().copied().collect(),
            ..self.clone()
        }
    }

    pub fn rotate270(&self) -> ImagePlane {
        self.rotate180().rotate90()
    }
}

fn clamp_unit(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(0.0, 1.0);
    }
}

/// `[0, 1]` to 8 bits, rounding half away from zero.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Three equally sized planes. Grayscale sources are replicated into all
/// three and remembered as such.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub r: ImagePlane,
    pub g: ImagePlane,
    pub b: ImagePlane,
    pub grayscale: bool,
    /// Source carried an alpha channel that was dropped on load.
    pub alpha_dropped: bool,
}

impl RgbImage {
    pub fn new(r: ImagePlane, g: ImagePlane, b: ImagePlane) -> Result<Self> {
        if (r.width, r.height) != (g.width, g.height) || (r.width, r.height) != (b.width, b.height) {
            return Err(Error::invalid("RGB planes must have equal dimensions"));
        }
        Ok(RgbImage {
            r: r.with_space(ColorSpace::R),
            g: g.with_space(ColorSpace::G),
            b: b.with_space(ColorSpace::B),
            grayscale: false,
            alpha_dropped: false,
        })
    }

    pub fn from_gray(plane: ImagePlane) -> Self {
        RgbImage {
            r: plane.clone().with_space(ColorSpace::R),
            g: plane.clone().with_space(ColorSpace::G),
            b: plane.with_space(ColorSpace::B),
            grayscale: true,
            alpha_dropped: false,
        }
    }

    pub fn width(&self) -> usize {
        self.r.width
    }

    pub fn height(&self) -> usize {
        self.r.height
    }

    /// The luminance plane used for super-resolution and scoring; for
    /// grayscale sources this is the gray plane itself.
    pub fn luma(&self) -> ImagePlane {
        if self.grayscale {
            self.r.clone().with_space(ColorSpace::Y)
        } else {
            rgb_to_ycbcr(self).0
        }
    }
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Every `*.png` directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", dir.display())));
    }
    out.sort();
    Ok(out)
}

/// Reads an 8-bit (or lower) grayscale or RGB PNG; alpha is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|m| image_err(path, m))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format!("malformed PNG: {e}"))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err("16-bit PNG is not supported".into());
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "PNG too large".to_string())?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format!("malformed PNG: {e}"))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format!("unsupported color type {other:?}")),
    };
    let mut planes = vec![Vec::with_capacity(w * h); channels.min(3)];
    for row in buf[..info.line_size * h].chunks(info.line_size) {
        for px in row[..w * channels].chunks(channels) {
            for (c, plane) in planes.iter_mut().enumerate() {
                plane.push(px[c] as f64 / 255.0);
            }
        }
    }
    let alpha = channels == 2 || channels == 4;
    let plane = |v: Vec<f64>, s| ImagePlane::new(w, h, v, s).map_err(|e| e.to_string());
    let mut img = if planes.len() == 1 {
        RgbImage::from_gray(plane(planes.pop().unwrap(), ColorSpace::Y)?)
    } else {
        let b = plane(planes.pop().unwrap(), ColorSpace::B)?;
        let g = plane(planes.pop().unwrap(), ColorSpace::G)?;
        let r = plane(planes.pop().unwrap(), ColorSpace::R)?;
        RgbImage::new(r, g, b).map_err(|e| e.to_string())?
    };
    img.alpha_dropped = alpha;
    Ok(img)
}

/// Writes an 8-bit PNG: grayscale when the image is marked grayscale,
/// otherwise RGB.
pub fn save_png(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (image.width(), image.height());
    let (color, data) = if image.grayscale {
        (png::ColorType::Grayscale, image.r.values.iter().map(|&v| to_u8(v)).collect::<Vec<_>>())
    } else {
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            data.extend([image.r.values[i], image.g.values[i], image.b.values[i]].map(to_u8));
        }
        (png::ColorType::Rgb, data)
    };
    let bytes = encode_png(w, h, color, &data).map_err(|m| image_err(path, m))?;
    write_atomic(path, &bytes)
}

pub fn save_gray_png(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    save_png(&RgbImage::from_gray(plane.clone()), path)
}

fn encode_png(w: usize, h: usize, color: png::ColorType, data: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(data).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

// ITU-R BT.601 "studio swing" on [0, 1] inputs: rows give 255·(Y, Cb, Cr).
const YCC_OFFSET: [f64; 3] = [16.0, 128.0, 128.0];
const YCC_MATRIX: [[f64; 3]; 3] = [
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Unclamped BT.601 forward transform of one pixel, all in `[0, 1]` units.
pub fn rgb_to_ycbcr_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let m = &YCC_MATRIX[k];
        *o = (YCC_OFFSET[k] + m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2]) / 255.0;
    }
    out
}

/// Exact inverse of [`rgb_to_ycbcr_pixel`], unclamped.
pub fn ycbcr_to_rgb_pixel(ycc: [f64; 3]) -> [f64; 3] {
    let inv = invert3(&YCC_MATRIX);
    let centered = [0, 1, 2].map(|k| ycc[k] * 255.0 - YCC_OFFSET[k]);
    [0, 1, 2].map(|i| inv[i][0] * centered[0] + inv[i][1] * centered[1] + inv[i][2] * centered[2])
}

pub fn rgb_to_ycbcr(img: &RgbImage) -> (ImagePlane, ImagePlane, ImagePlane) {
    let n = img.width() * img.height();
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for i in 0..n {
        let ycc = rgb_to_ycbcr_pixel([img.r.values[i], img.g.values[i], img.b.values[i]]);
        for k in 0..3 {
            planes[k].push(ycc[k]);
        }
    }
    let [y, cb, cr] = planes;
    let (w, h) = (img.width(), img.height());
    let mk = |v, s| ImagePlane::new(w, h, v, s).expect("sizes match");
    (mk(y, ColorSpace::Y), mk(cb, ColorSpace::Cb), mk(cr, ColorSpace::Cr))
}

pub fn ycbcr_to_rgb(y: &ImagePlane, cb: &ImagePlane, cr: &ImagePlane) -> Result<RgbImage> {
    if (y.width, y.height) != (cb.width, cb.height) || (y.width, y.height) != (cr.width, cr.height) {
        return Err(Error::invalid("Y, Cb and Cr planes must have equal dimensions"));
    }
    let n = y.values.len();
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for i in 0..n {
        let rgb = ycbcr_to_rgb_pixel([y.values[i], cb.values[i], cr.values[i]]);
        for k in 0..3 {
            planes[k].push(rgb[k]);
        }
    }
    let [r, g, b] = planes;
    let (w, h) = (y.width, y.height);
    RgbImage::new(
        ImagePlane::new(w, h, r, ColorSpace::R)?,
        ImagePlane::new(w, h, g, ColorSpace::G)?,
        ImagePlane::new(w, h, b, ColorSpace::B)?,
    )
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source taps and normalized weights for every output position along one
/// axis, following MATLAB `imresize`'s contribution rule. Indices outside
/// the axis are clamped to the edge.
struct AxisWeights {
    taps: usize,
    index: Vec<usize>,
    weight: Vec<f64>,
}

fn axis_weights(in_len: usize, out_len: usize, antialias: bool) -> AxisWeights {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if scale < 1.0 && antialias {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    let taps = width.ceil() as usize + 2;
    let mut index = Vec::with_capacity(out_len * taps);
    let mut weight = Vec::with_capacity(out_len * taps);
    for i in 0..out_len {
        // 1-based coordinates, as in the reference implementation
        let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as i64;
        let start = weight.len();
        for j in 0..taps as i64 {
            let pos = left + j;
            weight.push(kscale * cubic(kscale * (u - pos as f64)));
            index.push((pos - 1).clamp(0, in_len as i64 - 1) as usize);
        }
        let sum: f64 = weight[start..].iter().sum();
        for w in &mut weight[start..] {
            *w /= sum;
        }
    }
    AxisWeights { taps, index, weight }
}

/// Resamples along rows (`vertical == false`) or columns.
fn resize_axis(src: &[f64], w: usize, h: usize, out: usize, vertical: bool, antialias: bool) -> Vec<f64> {
    let in_len = if vertical { h } else { w };
    let aw = axis_weights(in_len, out, antialias);
    let (ow, oh) = if vertical { (w, out) } else { (out, h) };
    let mut dst = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let (i, fixed) = if vertical { (y, x) } else { (x, y) };
            let base = i * aw.taps;
            let mut acc = 0.0;
            for t in 0..aw.taps {
                let s = aw.index[base + t];
                let v = if vertical { src[s * w + fixed] } else { src[fixed * w + s] };
                acc += aw.weight[base + t] * v;
            }
            dst[y * ow + x] = acc;
        }
    }
    dst
}

/// Separable bicubic resampling. When shrinking with `antialias`, the kernel
/// is stretched by the inverse scale. The axis with the smaller scale factor
/// is processed first; no rounding happens between passes.
pub fn bicubic_resize(plane: &ImagePlane, out_w: usize, out_h: usize, antialias: bool) -> Result<ImagePlane> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(format!("target size {out_w}x{out_h} is empty")));
    }
    if plane.width == 0 || plane.height == 0 {
        return Err(Error::invalid("cannot resize an empty plane"));
    }
    let (w, h) = (plane.width, plane.height);
    let sx = out_w as f64 / w as f64;
    let sy = out_h as f64 / h as f64;
    let values = if sy <= sx {
        let tmp = resize_axis(&plane.values, w, h, out_h, true, antialias);
        resize_axis(&tmp, w, out_h, out_w, false, antialias)
    } else {
        let tmp = resize_axis(&plane.values, w, h, out_w, false, antialias);
        resize_axis(&tmp, out_w, h, out_h, true, antialias)
    };
    ImagePlane::new(out_w, out_h, values, plane.space)
}

/// Crops `hr` to a multiple of `scale`, then shrinks it by `scale` (with
/// antialiasing) and enlarges it back. Returns `(lr, cropped_hr)`, both the
/// cropped size.
pub fn degrade(hr: &ImagePlane, scale: usize) -> Result<(ImagePlane, ImagePlane)> {
    if scale == 0 {
        return Err(Error::invalid("scale must be positive"));
    }
    if hr.width < scale || hr.height < scale {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than scale {scale}",
            hr.width, hr.height
        )));
    }
    let hr = hr.crop_to_multiple(scale)?;
    let small = bicubic_resize(&hr, hr.width / scale, hr.height / scale, true)?;
    let lr = bicubic_resize(&small, hr.width, hr.height, true)?;
    Ok((lr, hr))
}

/// Drops `s` pixels from every side.
pub fn shave_border(plane: &ImagePlane, s: usize) -> Result<ImagePlane> {
    if 2 * s >= plane.width.min(plane.height) && s > 0 {
        return Err(Error::invalid(format!(
            "cannot shave {s} pixels from a {}x{} plane",
            plane.width, plane.height
        )));
    }
    plane.crop(s, s, plane.width - 2 * s, plane.height - 2 * s)
}
