//! PSNR / SSIM on luminance planes and the dataset evaluation protocol.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{
    bicubic_resize, degrade, list_pngs, load_png, rgb_to_ycbcr, shave_border, ycbcr_to_rgb, ColorSpace, ImagePlane,
    RgbImage,
};
use crate::model::CmscModel;
use crate::numerics::{Mode, Shape, Tensor};

fn check_dims(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::invalid(format!(
            "plane sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical planes.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, peak: f64) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.values().len() as f64;
    let mse = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Filters with the separable window, keeping only fully covered positions.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, g)| g * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, g)| g * rows[(y + t) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity over every fully covered 11×11 Gaussian
/// window (σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (av, bv) = (a.values(), b.values());
    let prod = |f: &dyn Fn(usize) -> f64| (0..av.len()).map(f).collect::<Vec<f64>>();
    let (mu_a, ..) = filter_valid(av, w, h, &taps);
    let (mu_b, ..) = filter_valid(bv, w, h, &taps);
    let (aa, ..) = filter_valid(&prod(&|i| av[i] * av[i]), w, h, &taps);
    let (bb, ..) = filter_valid(&prod(&|i| bv[i] * bv[i]), w, h, &taps);
    let (ab, ..) = filter_valid(&prod(&|i| av[i] * bv[i]), w, h, &taps);

    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| ssim_window(mu_a[i], mu_b[i], aa[i], bb[i], ab[i], c1, c2))
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// SSIM of one window from its weighted first and second moments.
pub(crate) fn ssim_window(mu_a: f64, mu_b: f64, aa: f64, bb: f64, ab: f64, c1: f64, c2: f64) -> f64 {
    let var_a = aa - mu_a * mu_a;
    let var_b = bb - mu_b * mu_b;
    let cov = ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub scale: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores for one method plus their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    /// CSV body rows (no header): one per image and a trailing mean row.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6},{:.6}", self.method, r.name, r.scale, r.psnr, r.ssim);
        }
        let scale = self.rows.first().map_or(0, |r| r.scale);
        let _ = writeln!(
            out,
            "{},mean,{},{:.6},{:.6}",
            self.method,
            scale,
            self.mean_psnr(),
            self.mean_ssim()
        );
        out
    }
}

pub const CSV_HEADER: &str = "method,image,scale,psnr_db,ssim";

pub fn reports_to_csv(reports: &[&MetricReport]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    out
}

/// Aligned plain-text rendering of one or more reports.
pub fn reports_to_table(reports: &[&MetricReport]) -> String {
    let name_w = reports
        .iter()
        .flat_map(|r| r.rows.iter().map(|row| row.name.len()))
        .chain([5])
        .max()
        .unwrap_or(5);
    let method_w = reports.iter().map(|r| r.method.len()).chain([6]).max().unwrap_or(6);
    let mut out = format!(
        "{:<method_w$}  {:<name_w$}  {:>5}  {:>9}  {:>7}\n",
        "method", "image", "scale", "PSNR (dB)", "SSIM"
    );
    for r in reports {
        for row in &r.rows {
            let _ = writeln!(
                out,
                "{:<method_w$}  {:<name_w$}  {:>5}  {:>9.2}  {:>7.4}",
                r.method, row.name, row.scale, row.psnr, row.ssim
            );
        }
        let scale = r.rows.first().map_or(0, |row| row.scale);
        let _ = writeln!(
            out,
            "{:<method_w$}  {:<name_w$}  {:>5}  {:>9.2}  {:>7.4}",
            r.method,
            "mean",
            scale,
            r.mean_psnr(),
            r.mean_ssim()
        );
    }
    out
}

/// One evaluation image: the 8-bit luminance of the HR image cropped to a
/// multiple of the scale, and its bicubic degradation.
pub struct EvalPair {
    pub name: String,
    pub hr: ImagePlane,
    pub lr: ImagePlane,
}

pub fn load_eval_pairs(dataset_dir: &Path, scale: usize) -> Result<Vec<EvalPair>> {
    list_pngs(dataset_dir)?
        .into_iter()
        .map(|path| {
            let luma = load_png(&path)?.luma().quantized();
            let (lr, hr) = degrade(&luma, scale)?;
            Ok(EvalPair {
                name: file_stem(&path),
                hr,
                lr,
            })
        })
        .collect()
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scores a prediction: quantize to 8 bits, shave `scale` pixels per side.
pub fn score(prediction: &ImagePlane, hr: &ImagePlane, scale: usize) -> Result<(f64, f64)> {
    let pred = shave_border(&prediction.quantized(), scale)?;
    let hr = shave_border(hr, scale)?;
    Ok((psnr(&pred, &hr, 1.0)?, ssim(&pred, &hr)?))
}

pub fn plane_to_tensor(plane: &ImagePlane) -> Tensor {
    Tensor::from_vec(Shape::new(1, 1, plane.height(), plane.width()), plane.values().to_vec())
        .expect("plane dims match")
}

/// Model output to a clamped luminance plane.
pub fn tensor_to_plane(t: &Tensor) -> Result<ImagePlane> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::invalid(format!("expected a single-image tensor, got {s}")));
    }
    ImagePlane::new(s.w, s.h, t.data().to_vec(), ColorSpace::Y)
}

/// Super-resolves one bicubic-upscaled luminance plane.
pub fn super_resolve(model: &CmscModel, lr: &ImagePlane) -> Result<ImagePlane> {
    tensor_to_plane(&model.predict(&plane_to_tensor(lr))?)
}

pub fn evaluate_bicubic(dataset_dir: &Path, scale: usize) -> Result<MetricReport> {
    let pairs = load_eval_pairs(dataset_dir, scale)?;
    report("bicubic", &pairs, scale, |p| Ok(p.lr.clone()))
}

/// Scores `model` on every PNG of `dataset_dir`.
pub fn evaluate(model: &CmscModel, dataset_dir: &Path, scale: usize) -> Result<MetricReport> {
    let pairs = load_eval_pairs(dataset_dir, scale)?;
    report("cmsc", &pairs, scale, |p| super_resolve(model, &p.lr))
}

/// Model and bicubic reports over the same loaded pairs.
pub fn evaluate_with_baseline(model: &CmscModel, dataset_dir: &Path, scale: usize) -> Result<(MetricReport, MetricReport)> {
    let pairs = load_eval_pairs(dataset_dir, scale)?;
    Ok((
        report("cmsc", &pairs, scale, |p| super_resolve(model, &p.lr))?,
        report("bicubic", &pairs, scale, |p| Ok(p.lr.clone()))?,
    ))
}

/// An upscaled image and, when a model ran, its per-stage luminance
/// predictions.
pub struct Upscaled {
    pub image: RgbImage,
    pub stages: Vec<ImagePlane>,
}

/// Enlarges `input` by `scale` with bicubic interpolation, then replaces the
/// luminance with the network prediction when a model is given. Colour
/// inputs keep their bicubic chroma; grayscale inputs stay grayscale.
pub fn upscale_image(model: Option<&CmscModel>, input: &RgbImage, scale: usize) -> Result<Upscaled> {
    if scale == 0 {
        return Err(Error::invalid("scale must be positive"));
    }
    let (w, h) = (input.width() * scale, input.height() * scale);
    let up = |p: &ImagePlane| bicubic_resize(p, w, h, true);
    let (luma, chroma) = if input.grayscale {
        (up(&input.luma())?, None)
    } else {
        let (y, cb, cr) = rgb_to_ycbcr(input);
        (up(&y)?, Some((up(&cb)?, up(&cr)?)))
    };
    let (luma, stages) = match model {
        Some(m) => {
            let fwd = m.forward(&plane_to_tensor(&luma), Mode::Eval)?;
            let stages = fwd.intermediates.iter().map(tensor_to_plane).collect::<Result<Vec<_>>>()?;
            (tensor_to_plane(&fwd.output)?, stages)
        }
        None => (luma, Vec::new()),
    };
    let image = match chroma {
        None => RgbImage::from_gray(luma),
        Some((cb, cr)) => ycbcr_to_rgb(&luma, &cb, &cr)?,
    };
    Ok(Upscaled { image, stages })
}

fn report(
    method: &str,
    pairs: &[EvalPair],
    scale: usize,
    predict: impl Fn(&EvalPair) -> Result<ImagePlane>,
) -> Result<MetricReport> {
    let rows = pairs
        .iter()
        .map(|p| {
            let (psnr, ssim) = score(&predict(p)?, &p.hr, scale)?;
            Ok(MetricRow {
                name: p.name.clone(),
                scale,
                psnr,
                ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        method: method.to_string(),
        rows,
    })
}
