//! Image-quality metrics and the face-verification harness.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// PSNR cap returned for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Operating points reported by [`verify_protocol`].
pub const REPORTED_FPRS: [f64; 3] = [0.01, 0.001, 0.0001];

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` with peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 11-tap Gaussian, sigma 1.5.
pub fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0f64; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering: output is `(h - 10) x (w - 10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0f64; h * ow];
    for r in 0..h {
        let line = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = k.iter().zip(&line[c..c + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = k.iter().enumerate().map(|(i, kv)| kv * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, K1 0.01,
/// K2 0.03, L 1). Color inputs are converted to luma first.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { height: h, width: w, window: SSIM_WINDOW });
    }
    let ga: Vec<f64> = a.to_gray().data().iter().map(|&v| v as f64).collect();
    let gb: Vec<f64> = b.to_gray().data().iter().map(|&v| v as f64).collect();
    let k = ssim_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(&ga, h, w, &k);
    let mu_b = filter_valid(&gb, h, w, &k);
    let e_aa = filter_valid(&prod(&ga, &ga), h, w, &k);
    let e_bb = filter_valid(&prod(&gb, &gb), h, w, &k);
    let e_ab = filter_valid(&prod(&ga, &gb), h, w, &k);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Unit-norm feature vector tagged with the embedder that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Vec<f64>,
    embedder: String,
}

impl Embedding {
    /// Normalizes `v`; fails on a zero vector.
    pub fn new(mut v: Vec<f64>, embedder: impl Into<String>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= 1e-12 || !norm.is_finite() {
            return Err(Error::DegenerateEmbedding);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self { vector: v, embedder: embedder.into() })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }
}

/// Dot product of two unit vectors.
pub fn cosine_score(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.vector.len() != b.vector.len() {
        return Err(Error::Shape(format!("embedding lengths {} vs {}", a.vector.len(), b.vector.len())));
    }
    Ok(a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

pub trait Embedder {
    fn name(&self) -> &str;
    fn embed(&self, img: &ImageTensor) -> Result<Embedding>;
}

/// Mean-subtracted 32x32 grayscale pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelEmbedder;

pub const PIXEL_EMBED_SIDE: usize = 32;

pub fn embed_pixel(img: &ImageTensor) -> Result<Embedding> {
    let small = img.to_gray().resize(PIXEL_EMBED_SIDE, PIXEL_EMBED_SIDE);
    let v: Vec<f64> = small.data().iter().map(|&x| x as f64).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Embedding::new(v.into_iter().map(|x| x - mean).collect(), "pixel")
}

impl Embedder for PixelEmbedder {
    fn name(&self) -> &str {
        "pixel"
    }

    fn embed(&self, img: &ImageTensor) -> Result<Embedding> {
        embed_pixel(img)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    /// Higher means more similar.
    pub score: f64,
    pub same_identity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Operating points ordered by decreasing threshold; the first is
/// `(+inf, 0, 0)` and the last is `(min score, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Predict "same" when `score >= threshold`, sweeping every distinct score.
pub fn roc(pairs: &[ScoredPair]) -> Result<RocCurve> {
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {}", p.score)));
    }
    let positives = pairs.iter().filter(|p| p.same_identity).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].same_identity {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold, fpr: fp as f64 / negatives as f64, tpr: tp as f64 / positives as f64 });
    }
    Ok(RocCurve { points })
}

/// Largest TPR among operating points with `FPR <= target`. No interpolation.
pub fn tpr_at_fpr(curve: &RocCurve, target_fpr: f64) -> f64 {
    curve.points.iter().filter(|p| p.fpr <= target_fpr).map(|p| p.tpr).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub identity: String,
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub pairs: Vec<ScoredPair>,
    pub curve: RocCurve,
    /// `(target FPR, TPR)` for each of [`REPORTED_FPRS`].
    pub tpr: Vec<(f64, f64)>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Scores every gallery x probe pair. When `clean_probes` is given (aligned
/// with `probe`), mean PSNR/SSIM of each probe against its clean version is
/// reported too.
pub fn verify_protocol(
    gallery: &[LabeledImage],
    probe: &[LabeledImage],
    embedder: &dyn Embedder,
    clean_probes: Option<&[ImageTensor]>,
) -> Result<VerificationReport> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery set".into()));
    }
    if probe.is_empty() {
        return Err(Error::Empty("probe set".into()));
    }
    let g_emb = gallery.iter().map(|g| embedder.embed(&g.image)).collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(gallery.len() * probe.len());
    for p in probe {
        let pe = embedder.embed(&p.image)?;
        for (g, ge) in gallery.iter().zip(&g_emb) {
            pairs.push(ScoredPair { score: cosine_score(ge, &pe)?, same_identity: g.identity == p.identity });
        }
    }
    let curve = roc(&pairs)?;
    let tpr = REPORTED_FPRS.iter().map(|&f| (f, tpr_at_fpr(&curve, f))).collect();
    let (psnr_mean, ssim_mean) = match clean_probes {
        Some(clean) => {
            if clean.len() != probe.len() {
                return Err(Error::Shape(format!("{} clean probes for {} probes", clean.len(), probe.len())));
            }
            let mut ps = 0.0;
            let mut ss = 0.0;
            for (p, c) in probe.iter().zip(clean) {
                ps += psnr(&p.image, c)?;
                ss += ssim(&p.image, c)?;
            }
            let n = probe.len() as f64;
            (Some(ps / n), Some(ss / n))
        }
        None => (None, None),
    };
    Ok(VerificationReport { pairs, curve, tpr, psnr: psnr_mean, ssim: ssim_mean })
}

pub const RESULTS_CSV_HEADER: &str = "method,psnr,ssim,tpr@1%,tpr@0.1%,tpr@0.01%";
pub const ROC_CSV_HEADER: &str = "threshold,fpr,tpr";

/// One row of the results table.
pub fn results_csv_row(method: &str, report: &VerificationReport) -> String {
    let opt = |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_default();
    let mut row = format!("{method},{},{}", opt(report.psnr, 4), opt(report.ssim, 6));
    for (_, t) in &report.tpr {
        let _ = write!(row, ",{t:.6}");
    }
    row
}

pub fn results_csv(rows: &[(&str, &VerificationReport)]) -> String {
    let mut out = String::from(RESULTS_CSV_HEADER);
    out.push('\n');
    for (m, r) in rows {
        out.push_str(&results_csv_row(m, r));
        out.push('\n');
    }
    out
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from(ROC_CSV_HEADER);
    out.push('\n');
    for p in &curve.points {
        let _ = writeln!(out, "{},{:.8},{:.8}", p.threshold, p.fpr, p.tpr);
    }
    out
}
