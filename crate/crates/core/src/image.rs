//! Image tensors, PNG I/O, eye alignment, augmentation and the toy-face corpus.
//!
//! [`ImageTensor`] stores `f32` samples in `[0, 1]`, row-major with channels
//! interleaved (`HWC`). That layout is used everywhere in the crate; model
//! tensors convert to `NCHW` only at the network boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if height * width * channels != data.len() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(channels == 1 || channels == 3);
        assert!((0.0..=1.0).contains(&value));
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Builds an image from arbitrary floats, clamping into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Pixel values at `(row, col)`, one per channel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Luma (0.299, 0.587, 0.114) for RGB; a copy for grayscale.
    pub fn to_gray(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).clamp(0.0, 1.0) as f32)
            .collect();
        ImageTensor { height: self.height, width: self.width, channels: 1, data }
    }

    /// Window `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!("crop {h}x{w}+{top}+{left} exceeds {}x{}", self.height, self.width)));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for r in top..top + h {
            let start = (r * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(ImageTensor { height: h, width: w, channels: c, data })
    }

    /// Centered `size x size` window.
    pub fn center_crop(&self, size: usize) -> Result<ImageTensor> {
        if size > self.height || size > self.width {
            return Err(Error::CropTooLarge { crop: size, height: self.height, width: self.width });
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    pub fn mirror_horizontal(&self) -> ImageTensor {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            for col in (0..self.width).rev() {
                let i = (r * self.width + col) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        ImageTensor { data, ..*self }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers sit on
    /// integers). Neighbors outside the image contribute 0.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f32]) {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut acc = [0f64; 3];
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (r, c) = (y0 + dy, x0 + dx);
                if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
                    continue;
                }
                for (ch, a) in acc.iter_mut().enumerate().take(self.channels) {
                    *a += w * self.get(r as usize, c as usize, ch) as f64;
                }
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a.clamp(0.0, 1.0) as f32;
        }
    }

    /// Bilinear resize using pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        let c = self.channels;
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = vec![0f32; height * width * c];
        for r in 0..height {
            let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for col in 0..width {
                let x = ((col as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let i = (r * width + col) * c;
                self.sample_bilinear(x, y, &mut data[i..i + c]);
            }
        }
        ImageTensor { height, width, channels: c, data }
    }
}

/// Reads an 8-bit grayscale or RGB PNG; sample `p` becomes `p / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader =
        decoder.read_info().map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    let info = reader.info();
    let unsupported = |reason: String| Error::UnsupportedImage { path: path.to_path_buf(), reason };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(format!("bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(unsupported(format!("color type {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(height * width * channels)];
    let frame =
        reader.next_frame(&mut buf).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    let bytes = &buf[..frame.buffer_size()];
    let row_bytes = width * channels;
    let mut data = Vec::with_capacity(height * row_bytes);
    for row in bytes.chunks_exact(frame.line_size).take(height) {
        data.extend(row[..row_bytes].iter().map(|&p| p as f32 / 255.0));
    }
    ImageTensor::new(height, width, channels, data)
}

/// `round(v * 255)` per sample.
pub fn quantize(img: &ImageTensor) -> Vec<u8> {
    img.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
}

/// Writes an 8-bit PNG with `round(v * 255)` quantization.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&quantize(img)).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

/// Eye centers in source-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeLandmarks {
    pub left_eye: (f64, f64),
    pub right_eye: (f64, f64),
}

impl EyeLandmarks {
    pub fn inside(&self, height: usize, width: usize) -> bool {
        let ok = |(x, y): (f64, f64)| x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64;
        ok(self.left_eye) && ok(self.right_eye)
    }
}

/// Canonical eye positions as fractions of the output side.
pub const CANONICAL_LEFT_EYE: (f64, f64) = (0.315, 0.40);
pub const CANONICAL_RIGHT_EYE: (f64, f64) = (0.685, 0.40);

pub fn canonical_eyes(size: usize) -> EyeLandmarks {
    let s = size as f64;
    EyeLandmarks {
        left_eye: (CANONICAL_LEFT_EYE.0 * s, CANONICAL_LEFT_EYE.1 * s),
        right_eye: (CANONICAL_RIGHT_EYE.0 * s, CANONICAL_RIGHT_EYE.1 * s),
    }
}

/// Similarity transform `p -> s R p + t`, stored as `[a, -b; b, a]` plus `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    a: f64,
    b: f64,
    tx: f64,
    ty: f64,
}

impl Similarity {
    /// The unique similarity taking `src.0 -> dst.0` and `src.1 -> dst.1`.
    pub fn from_point_pairs(src: [(f64, f64); 2], dst: [(f64, f64); 2]) -> Result<Self> {
        let (sx, sy) = (src[1].0 - src[0].0, src[1].1 - src[0].1);
        let (dx, dy) = (dst[1].0 - dst[0].0, dst[1].1 - dst[0].1);
        let n = sx * sx + sy * sy;
        if n < 1e-12 {
            return Err(Error::CoincidentEyes);
        }
        // (a + ib) = d / s in complex arithmetic.
        let a = (dx * sx + dy * sy) / n;
        let b = (dy * sx - dx * sy) / n;
        let tx = dst[0].0 - (a * src[0].0 - b * src[0].1);
        let ty = dst[0].1 - (b * src[0].0 + a * src[0].1);
        Ok(Self { a, b, tx, ty })
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }

    pub fn inverse(&self) -> Self {
        let n = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / n, -self.b / n);
        Self { a, b, tx: -(a * self.tx - b * self.ty), ty: -(b * self.tx + a * self.ty) }
    }
}

/// The transform [`align_by_eyes`] applies, mapping source pixels to output pixels.
pub fn eye_alignment(lm: &EyeLandmarks, out_size: usize) -> Result<Similarity> {
    let canon = canonical_eyes(out_size);
    Similarity::from_point_pairs([lm.left_eye, lm.right_eye], [canon.left_eye, canon.right_eye])
}

/// Warps `img` so the eyes land on the canonical positions of an
/// `out_size x out_size` frame. Bilinear resampling, zero fill outside.
pub fn align_by_eyes(img: &ImageTensor, lm: &EyeLandmarks, out_size: usize) -> Result<ImageTensor> {
    if out_size < 8 {
        return Err(Error::InvalidArgument(format!("out_size {out_size} < 8")));
    }
    let inv = eye_alignment(lm, out_size)?.inverse();
    let c = img.channels;
    let mut data = vec![0f32; out_size * out_size * c];
    for r in 0..out_size {
        for col in 0..out_size {
            let (x, y) = inv.apply((col as f64, r as f64));
            let i = (r * out_size + col) * c;
            img.sample_bilinear(x, y, &mut data[i..i + c]);
        }
    }
    ImageTensor::new(out_size, out_size, c, data)
}

/// Geometric augmentation decision, shared by all members of a synthesized triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub top: usize,
    pub left: usize,
    pub crop: usize,
    pub mirror: bool,
}

impl AugmentParams {
    /// Mirror with probability 1/2, then uniform crop offsets.
    pub fn draw(height: usize, width: usize, crop: usize, rng: &mut SeededRng) -> Result<Self> {
        if crop > height || crop > width || crop == 0 {
            return Err(Error::CropTooLarge { crop, height, width });
        }
        let mirror = rng.bernoulli(0.5);
        let top = rng.index(height - crop + 1);
        let left = rng.index(width - crop + 1);
        Ok(Self { top, left, crop, mirror })
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let src = if self.mirror { img.mirror_horizontal() } else { img.clone() };
        src.crop(self.top, self.left, self.crop, self.crop)
    }
}

/// Random horizontal mirror and `crop x crop` window.
pub fn augment(img: &ImageTensor, crop: usize, rng: &mut SeededRng) -> Result<ImageTensor> {
    AugmentParams::draw(img.height, img.width, crop, rng)?.apply(img)
}

/// `[0,1] -> [-1,1]`, matching the networks' tanh range.
pub fn to_model_range(v: f32) -> f32 {
    2.0 * v - 1.0
}

/// `[-1,1] -> [0,1]` with clamping.
pub fn from_model_range(t: f32) -> f32 {
    if t.is_nan() {
        return 0.0;
    }
    ((t + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Stacks same-shaped images into an `NCHW` model-range tensor.
pub fn images_to_tensor(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} and {}x{}x{}",
                h, w, c, img.height, img.width, img.channels
            )));
        }
        for ch in 0..c {
            data.extend(img.data.iter().skip(ch).step_by(c).map(|&v| to_model_range(v)));
        }
    }
    Ok(Tensor::new([images.len(), c, h, w], data))
}

/// Splits an `NCHW` model-range tensor back into images.
pub fn tensor_to_images(t: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
    let [n, c, h, w] = t.shape();
    (0..n)
        .map(|i| {
            let item = t.item(i);
            let mut data = vec![0.0; h * w * c];
            for ch in 0..c {
                for (p, &v) in item[ch * h * w..(ch + 1) * h * w].iter().enumerate() {
                    data[p * c + ch] = from_model_range(v);
                }
            }
            ImageTensor::new(h, w, c, data)
        })
        .collect()
}

/// Per-image nuisance: illumination and a small pose jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nuisance {
    pub gain: f64,
    /// Horizontal illumination slope, added as `slope * (x - 0.5)`.
    pub shading: f64,
    pub shift: (f64, f64),
    pub rotation: f64,
    pub scale: f64,
}

impl Nuisance {
    /// Frontal, evenly lit; the gallery pose.
    pub fn neutral() -> Self {
        Self { gain: 1.0, shading: 0.0, shift: (0.0, 0.0), rotation: 0.0, scale: 1.0 }
    }

    pub fn draw(rng: &mut SeededRng) -> Self {
        Self {
            gain: rng.uniform_range(0.85, 1.15),
            shading: rng.uniform_range(-0.12, 0.12),
            shift: (rng.uniform_range(-0.03, 0.03), rng.uniform_range(-0.03, 0.03)),
            rotation: rng.uniform_range(-6.0, 6.0).to_radians(),
            scale: rng.uniform_range(0.96, 1.04),
        }
    }
}

/// Identity-level appearance of a toy face, in canonical unit coordinates.
#[derive(Debug, Clone, PartialEq)]
struct FaceGeometry {
    background: [[f64; 3]; 2],
    bg_freq: f64,
    bg_angle: f64,
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    head_center: (f64, f64),
    head_axes: (f64, f64),
    hairline: f64,
    eye_y: f64,
    eye_half_gap: f64,
    eye_radius: f64,
    brow_lift: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_half_width: f64,
}

/// Stream tag for identity parameters.
const IDENTITY_STREAM: u64 = 0x1d;

impl FaceGeometry {
    fn for_identity(identity: u64) -> Self {
        let mut r = SeededRng::derive(IDENTITY_STREAM, &[identity]);
        let color = |lo: f64, hi: f64, r: &mut SeededRng| {
            [r.uniform_range(lo, hi), r.uniform_range(lo, hi), r.uniform_range(lo, hi)]
        };
        let background = [color(0.1, 0.6, &mut r), color(0.1, 0.6, &mut r)];
        let tone = r.uniform_range(0.45, 0.9);
        let skin = [tone, tone * r.uniform_range(0.68, 0.85), tone * r.uniform_range(0.5, 0.72)];
        let hair_level = r.uniform_range(0.05, 0.55);
        let hair = [hair_level, hair_level * r.uniform_range(0.6, 0.95), hair_level * r.uniform_range(0.4, 0.8)];
        let iris = color(0.05, 0.5, &mut r);
        let lips = [r.uniform_range(0.45, 0.8), r.uniform_range(0.15, 0.35), r.uniform_range(0.15, 0.35)];
        Self {
            background,
            bg_freq: r.uniform_range(1.0, 3.0),
            bg_angle: r.uniform_range(0.0, std::f64::consts::PI),
            skin,
            hair,
            iris,
            lips,
            head_center: (0.5, r.uniform_range(0.5, 0.55)),
            head_axes: (r.uniform_range(0.27, 0.34), r.uniform_range(0.35, 0.42)),
            hairline: r.uniform_range(0.3, 0.6),
            eye_y: r.uniform_range(0.39, 0.44),
            eye_half_gap: r.uniform_range(0.15, 0.2),
            eye_radius: r.uniform_range(0.032, 0.05),
            brow_lift: r.uniform_range(0.05, 0.08),
            nose_len: r.uniform_range(0.08, 0.14),
            mouth_y: r.uniform_range(0.66, 0.73),
            mouth_half_width: r.uniform_range(0.07, 0.11),
        }
    }

    fn eyes(&self) -> [(f64, f64); 2] {
        let cx = self.head_center.0;
        [(cx - self.eye_half_gap, self.eye_y), (cx + self.eye_half_gap, self.eye_y)]
    }

    /// Color at canonical point `(u, v)`; `aa` is the edge softness in canonical units.
    fn shade(&self, u: f64, v: f64, aa: f64) -> [f64; 3] {
        let cover = |d: f64| smoothstep(aa, -aa, d);
        let mix = |a: [f64; 3], b: [f64; 3], t: f64| {
            [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
        };

        let wave = 0.5
            + 0.5 * (std::f64::consts::TAU * self.bg_freq * (u * self.bg_angle.cos() + v * self.bg_angle.sin())).sin();
        let mut c = mix(self.background[0], self.background[1], 0.35 * v + 0.65 * wave);

        let (hx, hy) = self.head_center;
        let (ax, ay) = self.head_axes;
        let head_d = ((u - hx) / ax).hypot((v - hy) / ay) - 1.0;
        // Hair: a slightly larger ellipse above the hairline.
        let hair_d = ((u - hx) / (ax * 1.08)).hypot((v - hy + 0.02) / (ay * 1.06)) - 1.0;
        let above = (hy - ay * self.hairline) - v;
        c = mix(c, self.hair, cover(hair_d * ay) * smoothstep(-aa, aa, above + 0.04));
        let face_t = cover(head_d * ax.min(ay));
        let skin_lit = mix(
            self.skin,
            [self.skin[0] * 0.8, self.skin[1] * 0.8, self.skin[2] * 0.8],
            ((u - hx) / ax).powi(2).min(1.0),
        );
        c = mix(c, skin_lit, face_t * smoothstep(-aa, aa, -above));
        c = mix(c, self.hair, face_t * smoothstep(-aa, aa, above));

        for (ex, ey) in self.eyes() {
            let r = self.eye_radius;
            let sclera_d = ((u - ex) / (1.6 * r)).hypot((v - ey) / r) - 1.0;
            c = mix(c, [0.92, 0.92, 0.9], cover(sclera_d * r));
            let iris_d = (u - ex).hypot(v - ey) - 0.65 * r;
            c = mix(c, self.iris, cover(iris_d));
            let pupil_d = (u - ex).hypot(v - ey) - 0.3 * r;
            c = mix(c, [0.03, 0.03, 0.03], cover(pupil_d));
            // Brow: a short horizontal bar above the eye.
            let by = ey - self.brow_lift;
            let brow_d = ((u - ex) / (1.9 * r)).abs().max(((v - by) / (0.28 * r)).abs()) - 1.0;
            c = mix(c, self.hair, cover(brow_d * 0.28 * r));
        }

        let nose_top = self.eye_y + 0.04;
        let nose_bottom = nose_top + self.nose_len;
        let nose_d = if v < nose_top {
            (u - hx).hypot(v - nose_top)
        } else if v > nose_bottom {
            (u - hx).hypot(v - nose_bottom)
        } else {
            (u - hx).abs()
        } - 0.012;
        let shadow = [self.skin[0] * 0.6, self.skin[1] * 0.55, self.skin[2] * 0.55];
        c = mix(c, shadow, cover(nose_d));

        let mouth_d = ((u - hx) / self.mouth_half_width).hypot((v - self.mouth_y) / 0.022) - 1.0;
        c = mix(c, self.lips, cover(mouth_d * 0.022));
        c
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// A rendered toy face.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFace {
    pub image: ImageTensor,
    pub landmarks: EyeLandmarks,
    pub identity: u64,
}

/// Renders identity `identity` with nuisance drawn from `rng`.
pub fn toy_face(identity: u64, rng: &mut SeededRng, size: usize) -> Result<ToyFace> {
    let nuisance = Nuisance::draw(rng);
    toy_face_with(identity, &nuisance, size)
}

/// Renders identity `identity` under an explicit nuisance.
pub fn toy_face_with(identity: u64, nuisance: &Nuisance, size: usize) -> Result<ToyFace> {
    if size < 32 {
        return Err(Error::InvalidArgument(format!("toy face size {size} < 32")));
    }
    let geo = FaceGeometry::for_identity(identity);
    let s = size as f64;
    // Pose: canonical unit coords -> pixels, rotating and scaling about the center.
    let (cos, sin) = (nuisance.rotation.cos(), nuisance.rotation.sin());
    let to_pixels = |(u, v): (f64, f64)| {
        let (du, dv) = (u - 0.5, v - 0.5);
        let k = nuisance.scale;
        (
            (0.5 + k * (cos * du - sin * dv) + nuisance.shift.0) * s - 0.5,
            (0.5 + k * (sin * du + cos * dv) + nuisance.shift.1) * s - 0.5,
        )
    };
    let to_unit = |(x, y): (f64, f64)| {
        let (px, py) = ((x + 0.5) / s - 0.5 - nuisance.shift.0, (y + 0.5) / s - 0.5 - nuisance.shift.1);
        let k = nuisance.scale;
        (0.5 + (cos * px + sin * py) / k, 0.5 + (-sin * px + cos * py) / k)
    };
    let aa = 0.75 / s;
    let mut data = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let (u, v) = to_unit((c as f64, r as f64));
            let light = nuisance.gain * (1.0 + nuisance.shading * (u - 0.5));
            for ch in geo.shade(u, v, aa) {
                data.push((ch * light).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let [le, re] = geo.eyes();
    let landmarks = EyeLandmarks { left_eye: to_pixels(le), right_eye: to_pixels(re) };
    Ok(ToyFace { image: ImageTensor::new(size, size, 3, data)?, landmarks, identity })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize, c: usize) -> ImageTensor {
        let data = (0..h * w * c).map(|i| ((i * 37) % 251) as f32 / 250.0).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_bad_shape() {
        assert!(ImageTensor::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
    }

    #[test]
    fn png_zero_and_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        save_image(&ImageTensor::filled(3, 4, 1, 0.0), &p).unwrap();
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 0.0));

        let p = dir.path().join("one.png");
        save_image(&ImageTensor::filled(1, 1, 1, 1.0), &p).unwrap();
        assert_eq!(quantize(&ImageTensor::filled(1, 1, 1, 1.0)), vec![255]);
        assert_eq!(load_image(&p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn png_128_is_exact_rational() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let v = 128.0f32 / 255.0;
        save_image(&ImageTensor::filled(2, 2, 3, v), &p).unwrap();
        let img = load_image(&p).unwrap();
        assert!(img.data().iter().all(|&x| x == 128.0f32 / 255.0));
        assert!((img.data()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn png_half_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        save_image(&ImageTensor::filled(5, 5, 3, 0.5), &p).unwrap();
        let img = load_image(&p).unwrap();
        assert!(img.data().iter().all(|&x| (x - 0.5).abs() <= 1.0 / 510.0 + 1e-6));
    }

    #[test]
    fn png_lattice_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let img = ImageTensor::new(4, 3, 3, (0..36).map(|i| (i * 7 % 256) as f32 / 255.0).collect()).unwrap();
        save_image(&img, &a).unwrap();
        let loaded = load_image(&a).unwrap();
        save_image(&loaded, &b).unwrap();
        assert_eq!(quantize(&loaded), quantize(&load_image(&b).unwrap()));
        assert_eq!(loaded, img);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("missing.png")), Err(Error::Io { .. })));

        let p = dir.path().join("sixteen.png");
        let file = File::create(&p).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0u8; 8]).unwrap();
        w.finish().unwrap();
        assert!(matches!(load_image(&p), Err(Error::UnsupportedImage { .. })));

        let p = dir.path().join("text.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(load_image(&p).is_err());
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let img = ImageTensor::filled(2, 2, 1, 0.5);
        assert!(save_image(&img, "/nonexistent-dir/x.png").is_err());
    }

    #[test]
    fn align_identity_when_eyes_canonical() {
        let img = gradient_image(40, 40, 3);
        let lm = canonical_eyes(40);
        let out = align_by_eyes(&img, &lm, 40).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn align_output_size() {
        let face = toy_face_with(3, &Nuisance::neutral(), 160).unwrap();
        let out = align_by_eyes(&face.image, &face.landmarks, 148).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (148, 148, 3));
    }

    #[test]
    fn align_swapped_eyes_rotates_half_turn() {
        // At S=200 the canonical eyes sit on integer pixels (63, 80) and (137, 80).
        let size = 200;
        let canon = canonical_eyes(size);
        let swapped = EyeLandmarks { left_eye: canon.right_eye, right_eye: canon.left_eye };
        let t = eye_alignment(&swapped, size).unwrap();
        // Closed form: a half turn about the eye midpoint (100, 80).
        for p in [(10.0, 33.0), (63.0, 80.0), (150.5, 7.25)] {
            let q = t.apply(p);
            assert!((q.0 - (200.0 - p.0)).abs() < 1e-9);
            assert!((q.1 - (160.0 - p.1)).abs() < 1e-9);
        }

        let mut data = vec![0f32; size * size];
        data[80 * size + 137] = 1.0; // source left eye
        data[80 * size + 63] = 0.5; // source right eye
        let img = ImageTensor::new(size, size, 1, data).unwrap();
        let out = align_by_eyes(&img, &swapped, size).unwrap();
        assert!((out.get(80, 63, 0) - 1.0).abs() < 1e-6);
        assert!((out.get(80, 137, 0) - 0.5).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn landmarks_land_on_canonical_points(
            lx in 5.0f64..60.0, ly in 5.0f64..60.0, dx in 4.0f64..40.0, dy in -20.0f64..20.0, size in 8usize..200
        ) {
            let lm = EyeLandmarks { left_eye: (lx, ly), right_eye: (lx + dx, ly + dy) };
            let t = eye_alignment(&lm, size).unwrap();
            let canon = canonical_eyes(size);
            for (p, c) in [(lm.left_eye, canon.left_eye), (lm.right_eye, canon.right_eye)] {
                let q = t.apply(p);
                proptest::prop_assert!((q.0 - c.0).hypot(q.1 - c.1) < 0.5);
            }
        }

        #[test]
        fn paired_augmentation_keeps_unoccluded_pixels_identical(seed in 0u64..1000) {
            let y = gradient_image(20, 20, 3);
            let mut xd = y.data().to_vec();
            // Occlude every fifth pixel.
            for (i, px) in xd.chunks_exact_mut(3).enumerate() {
                if i % 5 == 0 { px.iter_mut().for_each(|v| *v *= 0.5); }
            }
            let x = ImageTensor::new(20, 20, 3, xd).unwrap();
            let params = AugmentParams::draw(20, 20, 16, &mut SeededRng::new(seed)).unwrap();
            let (ax, ay) = (params.apply(&x).unwrap(), params.apply(&y).unwrap());
            let mask = {
                let m: Vec<f32> = (0..400).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
                params.apply(&ImageTensor::new(20, 20, 1, m).unwrap()).unwrap()
            };
            for r in 0..16 {
                for c in 0..16 {
                    if mask.get(r, c, 0) == 1.0 {
                        proptest::prop_assert_eq!(ax.pixel(r, c), ay.pixel(r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn align_rejects_coincident_eyes() {
        let img = gradient_image(20, 20, 1);
        let lm = EyeLandmarks { left_eye: (5.0, 5.0), right_eye: (5.0, 5.0) };
        assert!(matches!(align_by_eyes(&img, &lm, 20), Err(Error::CoincidentEyes)));
    }

    #[test]
    fn augment_identity_and_size() {
        let img = gradient_image(16, 16, 3);
        // Find a seed whose mirror draw is false.
        let seed = (0..100).find(|&s| !SeededRng::new(s).bernoulli(0.5)).unwrap();
        let out = augment(&img, 16, &mut SeededRng::new(seed)).unwrap();
        assert_eq!(out, img);

        let big = gradient_image(148, 148, 3);
        let out = augment(&big, 128, &mut SeededRng::new(1)).unwrap();
        assert_eq!((out.height(), out.width()), (128, 128));
        let again = augment(&big, 128, &mut SeededRng::new(1)).unwrap();
        assert_eq!(out, again);
        assert!(matches!(augment(&img, 17, &mut SeededRng::new(1)), Err(Error::CropTooLarge { .. })));
    }

    #[test]
    fn model_range_maps() {
        assert_eq!(to_model_range(0.5), 0.0);
        assert_eq!(from_model_range(-1.2), 0.0);
        assert_eq!(from_model_range(1.5), 1.0);
        for i in 0..=255 {
            let v = i as f32 / 255.0;
            assert!((from_model_range(to_model_range(v)) - v).abs() < 1e-7);
        }
    }

    #[test]
    fn toy_face_is_deterministic_with_landmarks_inside() {
        let a = toy_face(5, &mut SeededRng::new(9), 64).unwrap();
        let b = toy_face(5, &mut SeededRng::new(9), 64).unwrap();
        assert_eq!(a, b);
        for id in 0..20 {
            let f = toy_face(id, &mut SeededRng::new(id + 100), 48).unwrap();
            assert!(f.landmarks.inside(48, 48));
        }
        assert!(toy_face(1, &mut SeededRng::new(0), 31).is_err());
    }

    fn centered_cosine(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let center = |x: &ImageTensor| {
            let m = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.data().len() as f64;
            x.data().iter().map(|&v| v as f64 - m).collect::<Vec<_>>()
        };
        let (u, v) = (center(a), center(b));
        let dot: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
        dot / (u.iter().map(|p| p * p).sum::<f64>().sqrt() * v.iter().map(|q| q * q).sum::<f64>().sqrt())
    }

    #[test]
    fn toy_faces_cluster_by_identity() {
        let n = 100u64;
        let faces: Vec<_> = (0..n)
            .map(|id| {
                let a = toy_face(id, &mut SeededRng::derive(11, &[id, 0]), 48).unwrap().image;
                let b = toy_face(id, &mut SeededRng::derive(11, &[id, 1]), 48).unwrap().image;
                (a, b)
            })
            .collect();
        let same: f64 = faces.iter().map(|(a, b)| centered_cosine(a, b)).sum::<f64>() / n as f64;
        let cross: f64 =
            (0..n as usize).map(|i| centered_cosine(&faces[i].0, &faces[(i + 1) % n as usize].1)).sum::<f64>()
                / n as f64;
        assert!(same > cross + 0.1, "same-identity {same:.3} vs cross-identity {cross:.3}");
    }

    #[test]
    fn all_outputs_in_unit_range() {
        let f = toy_face(2, &mut SeededRng::new(4), 40).unwrap();
        let aligned = align_by_eyes(&f.image, &f.landmarks, 37).unwrap();
        let aug = augment(&aligned, 32, &mut SeededRng::new(5)).unwrap();
        for img in [&f.image, &aligned, &aug] {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn tensor_conversion_roundtrip() {
        let a = toy_face_with(3, &Nuisance::neutral(), 32).unwrap().image;
        let b = toy_face_with(4, &Nuisance::neutral(), 32).unwrap().image;
        let t = images_to_tensor(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), [2, 3, 32, 32]);
        assert_eq!(t.item(0)[32 * 32 + 5], to_model_range(a.get(0, 5, 1)));
        let back = tensor_to_images(&t).unwrap();
        for (x, y) in back.iter().zip([&a, &b]) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-6));
        }
        assert!(images_to_tensor(&[a, ImageTensor::filled(32, 32, 1, 0.0)]).is_err());
        assert!(images_to_tensor(&[]).is_err());
    }
}
