//! Disentangling network G, fusing network F, the three domain
//! discriminators, latent arithmetic, and checkpoints.
//!
//! Layout of every encoder: conv3 stem, two stride-2 conv3 downsamples,
//! residual blocks, then a conv3 head (with bias) that emits the latent.
//! Decoders mirror it: conv3 into the trunk width, residual blocks, two
//! nearest-upsample + conv3 stages and a tanh conv3 output head.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::rng::SeededRng;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Slope of the discriminators' leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    /// Channels of domain X and Y images (domain Z is always 1).
    pub channels: usize,
    /// Width of the first encoder stage; the trunk runs at 4x this.
    pub base_channels: usize,
    /// Residual blocks in G_Enc, G_Dec-Y, F_Enc-Y and F_Dec.
    pub res_blocks_face: usize,
    /// Residual blocks in G_Dec-Z and F_Enc-Z.
    pub res_blocks_mesh: usize,
    /// Face slice of the latent (C_y).
    pub latent_face: usize,
    /// Mesh slice of the latent (C_z).
    pub latent_mesh: usize,
    pub norm: Norm,
    /// Conv layers per discriminator, the sigmoid output layer included.
    pub disc_layers: usize,
    pub disc_channels: usize,
}

impl NetConfig {
    /// 128x128 input, 255 + 1 latent channels at 32x32.
    pub fn full() -> Self {
        Self {
            image_size: 128,
            channels: 3,
            base_channels: 64,
            res_blocks_face: 5,
            res_blocks_mesh: 1,
            latent_face: 255,
            latent_mesh: 1,
            norm: Norm::Instance,
            disc_layers: 4,
            disc_channels: 64,
        }
    }

    /// 64x64 input, 63 + 1 latent channels at 16x16.
    pub fn desk() -> Self {
        Self { image_size: 64, base_channels: 8, latent_face: 63, disc_channels: 8, ..Self::full() }
    }

    /// 8x8 input with a few thousand parameters, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            base_channels: 1,
            res_blocks_face: 1,
            res_blocks_mesh: 1,
            latent_face: 3,
            latent_mesh: 1,
            norm: Norm::Instance,
            disc_layers: 2,
            disc_channels: 4,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    /// Side of a discriminator score map.
    pub fn score_size(&self) -> usize {
        self.image_size >> (self.disc_layers - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return bad(format!("image_size must be a multiple of 4 and at least 8, got {}", self.image_size));
        }
        if self.base_channels == 0 || self.latent_face == 0 || self.latent_mesh == 0 || self.disc_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.disc_layers < 2 {
            return bad(format!("disc_layers must be at least 2, got {}", self.disc_layers));
        }
        let stride = 1usize << (self.disc_layers - 1);
        if !self.image_size.is_multiple_of(stride) {
            return bad(format!(
                "image_size {} is not divisible by the discriminator stride {stride}",
                self.image_size
            ));
        }
        Ok(())
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
    Z,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::X => "x",
            Domain::Y => "y",
            Domain::Z => "z",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv,
    down: [Conv; 2],
    res: Vec<[Conv; 2]>,
    head: Conv,
}

#[derive(Debug, Clone)]
struct Decoder {
    entry: Conv,
    res: Vec<[Conv; 2]>,
    up: [Conv; 2],
    out: Conv,
}

#[derive(Debug, Clone)]
struct Discriminator {
    layers: Vec<Conv>,
}

#[derive(Debug, Clone)]
struct Nets {
    g_enc: Encoder,
    g_dec_y: Decoder,
    g_dec_z: Decoder,
    f_enc_y: Encoder,
    f_enc_z: Encoder,
    f_dec: Decoder,
    d_x: Discriminator,
    d_y: Discriminator,
    d_z: Discriminator,
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    rng: &'a mut SeededRng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let w = self.store.add_normal(format!("{name}.w"), [cout, cin, k, k], INIT_STD, self.rng);
        let b = bias.then(|| self.store.add_zeros(format!("{name}.b"), [1, cout, 1, 1]));
        Conv { w, b, stride, pad: (k - 1) / 2 }
    }

    fn res(&mut self, name: &str, width: usize, n: usize) -> Vec<[Conv; 2]> {
        (0..n)
            .map(|i| {
                [
                    self.conv(&format!("{name}.res{i}.a"), width, width, 3, 1, false),
                    self.conv(&format!("{name}.res{i}.b"), width, width, 3, 1, false),
                ]
            })
            .collect()
    }

    fn encoder(&mut self, name: &str, b: usize, cin: usize, cout: usize, res: usize) -> Encoder {
        Encoder {
            stem: self.conv(&format!("{name}.stem"), cin, b, 3, 1, false),
            down: [
                self.conv(&format!("{name}.down0"), b, 2 * b, 3, 2, false),
                self.conv(&format!("{name}.down1"), 2 * b, 4 * b, 3, 2, false),
            ],
            res: self.res(name, 4 * b, res),
            head: self.conv(&format!("{name}.head"), 4 * b, cout, 3, 1, true),
        }
    }

    fn decoder(&mut self, name: &str, b: usize, cin: usize, cout: usize, res: usize) -> Decoder {
        Decoder {
            entry: self.conv(&format!("{name}.entry"), cin, 4 * b, 3, 1, false),
            res: self.res(name, 4 * b, res),
            up: [
                self.conv(&format!("{name}.up0"), 4 * b, 2 * b, 3, 1, false),
                self.conv(&format!("{name}.up1"), 2 * b, b, 3, 1, false),
            ],
            out: self.conv(&format!("{name}.out"), b, cout, 3, 1, true),
        }
    }

    fn discriminator(&mut self, name: &str, cin: usize, width: usize, layers: usize) -> Discriminator {
        let mut convs = Vec::with_capacity(layers);
        let mut c = cin;
        for i in 0..layers - 1 {
            let out = width << i.min(3);
            // Conv4 stride 2 pad 1 halves the side exactly.
            let mut conv = self.conv(&format!("{name}.l{i}"), c, out, 4, 2, i == 0);
            conv.pad = 1;
            convs.push(conv);
            c = out;
        }
        convs.push(self.conv(&format!("{name}.out"), c, 1, 3, 1, true));
        Discriminator { layers: convs }
    }
}

fn build<T: Real>(config: &NetConfig, rng: &mut SeededRng) -> (ParamStore<T>, Nets) {
    let c = config;
    let (b, ch) = (c.base_channels, c.channels);
    let lat = c.latent_face + c.latent_mesh;
    let mut bd = Builder { store: ParamStore::new(), rng };
    let nets = Nets {
        g_enc: bd.encoder("g_enc", b, ch, lat, c.res_blocks_face),
        g_dec_y: bd.decoder("g_dec_y", b, c.latent_face, ch, c.res_blocks_face),
        g_dec_z: bd.decoder("g_dec_z", b, c.latent_mesh, 1, c.res_blocks_mesh),
        f_enc_y: bd.encoder("f_enc_y", b, ch, c.latent_face, c.res_blocks_face),
        f_enc_z: bd.encoder("f_enc_z", b, 1, c.latent_mesh, c.res_blocks_mesh),
        f_dec: bd.decoder("f_dec", b, lat, ch, c.res_blocks_face),
        d_x: bd.discriminator("d_x", ch, c.disc_channels, c.disc_layers),
        d_y: bd.discriminator("d_y", ch, c.disc_channels, c.disc_layers),
        d_z: bd.discriminator("d_z", 1, c.disc_channels, c.disc_layers),
    };
    (bd.store, nets)
}

/// Channel-partitioned latent: the face slice and the mesh slice of one map.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub face: Tensor<T>,
    pub mesh: Tensor<T>,
}

impl<T: Real> LatentCode<T> {
    /// The full `(C_y + C_z)`-channel map.
    pub fn joined(&self) -> Tensor<T> {
        let [n, cy, h, w] = self.face.shape();
        let cz = self.mesh.channels();
        let mut data = Vec::with_capacity(n * (cy + cz) * h * w);
        for i in 0..n {
            data.extend_from_slice(self.face.item(i));
            data.extend_from_slice(self.mesh.item(i));
        }
        Tensor::new([n, cy + cz, h, w], data)
    }
}

#[derive(Debug, Clone)]
pub struct Disentangled<T> {
    pub y_hat: Tensor<T>,
    pub z_hat: Tensor<T>,
    pub code: LatentCode<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentOp {
    Add,
    Sub,
    Scale(f64),
}

/// All parameters of G, F and the discriminators, plus the step counter.
#[derive(Debug, Clone)]
pub struct ModelBundle<T: Real = f32> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    pub step: u64,
    nets: Nets,
}

impl<T: Real> ModelBundle<T> {
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(seed, &[0x1417]);
        let (params, nets) = build(config, &mut rng);
        Ok(Self { config: config.clone(), params, step: 0, nets })
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            params: self.params.cast(),
            step: self.step,
            nets: self.nets.clone(),
        }
    }

    fn is_disc(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("d_")
    }

    /// Parameters of G and F, optimized jointly.
    pub fn generator_params(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| !self.is_disc(id)).collect()
    }

    /// Parameters of D_X, D_Y and D_Z.
    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.is_disc(id)).collect()
    }

    fn conv(&self, g: &mut Graph<T>, c: &Conv, x: Var) -> Var {
        let w = g.param(&self.params, c.w);
        let b = c.b.map(|b| g.param(&self.params, b));
        g.conv2d(x, w, b, c.stride, c.pad)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var) -> Var {
        match self.config.norm {
            Norm::Instance => g.instance_norm(x),
            Norm::None => x,
        }
    }

    fn conv_norm_relu(&self, g: &mut Graph<T>, c: &Conv, x: Var) -> Var {
        let h = self.conv(g, c, x);
        let h = self.norm(g, h);
        g.relu(h)
    }

    fn res_blocks(&self, g: &mut Graph<T>, blocks: &[[Conv; 2]], mut x: Var) -> Var {
        for [a, b] in blocks {
            let h = self.conv_norm_relu(g, a, x);
            let h = self.conv(g, b, h);
            let h = self.norm(g, h);
            x = g.add(x, h);
        }
        x
    }

    fn encoder(&self, g: &mut Graph<T>, e: &Encoder, x: Var) -> Var {
        let mut h = self.conv_norm_relu(g, &e.stem, x);
        for d in &e.down {
            h = self.conv_norm_relu(g, d, h);
        }
        let h = self.res_blocks(g, &e.res, h);
        self.conv(g, &e.head, h)
    }

    fn decoder(&self, g: &mut Graph<T>, d: &Decoder, x: Var) -> Var {
        let h = self.conv_norm_relu(g, &d.entry, x);
        let mut h = self.res_blocks(g, &d.res, h);
        for u in &d.up {
            h = g.upsample2x(h);
            h = self.conv_norm_relu(g, u, h);
        }
        let h = self.conv(g, &d.out, h);
        g.tanh(h)
    }

    /// G on the tape: `(y_hat, z_hat, face_part, mesh_part)`.
    pub fn disentangle_var(&self, g: &mut Graph<T>, x: Var) -> (Var, Var, Var, Var) {
        let code = self.encoder(g, &self.nets.g_enc, x);
        let cy = self.config.latent_face;
        let face = g.slice_channels(code, 0, cy);
        let mesh = g.slice_channels(code, cy, self.config.latent_mesh);
        let y = self.decoder(g, &self.nets.g_dec_y, face);
        let z = self.decoder(g, &self.nets.g_dec_z, mesh);
        (y, z, face, mesh)
    }

    pub fn encode_face_var(&self, g: &mut Graph<T>, y: Var) -> Var {
        self.encoder(g, &self.nets.f_enc_y, y)
    }

    pub fn encode_mesh_var(&self, g: &mut Graph<T>, z: Var) -> Var {
        self.encoder(g, &self.nets.f_enc_z, z)
    }

    pub fn decode_fused_var(&self, g: &mut Graph<T>, face: Var, mesh: Var) -> Var {
        let code = g.concat(face, mesh);
        self.decoder(g, &self.nets.f_dec, code)
    }

    /// F on the tape.
    pub fn fuse_var(&self, g: &mut Graph<T>, y: Var, z: Var) -> Var {
        let face = self.encode_face_var(g, y);
        let mesh = self.encode_mesh_var(g, z);
        self.decode_fused_var(g, face, mesh)
    }

    /// Patch score map in (0, 1).
    pub fn discriminate_var(&self, g: &mut Graph<T>, which: Domain, img: Var) -> Var {
        let d = match which {
            Domain::X => &self.nets.d_x,
            Domain::Y => &self.nets.d_y,
            Domain::Z => &self.nets.d_z,
        };
        let last = d.layers.len() - 1;
        let mut h = img;
        for (i, c) in d.layers.iter().enumerate() {
            h = self.conv(g, c, h);
            if i == last {
                break;
            }
            if i > 0 {
                h = self.norm(g, h);
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        g.sigmoid(h)
    }

    fn check_input(&self, t: &Tensor<T>, channels: usize, side: usize, what: &str) -> Result<()> {
        let [n, c, h, w] = t.shape();
        if n == 0 || c != channels || h != side || w != side {
            return Err(Error::Shape(format!(
                "{what} must be [n>=1, {channels}, {side}, {side}], got {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }

    fn check_params(&self) -> Result<()> {
        if self.params.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".into()))
        }
    }

    fn run(&self, f: impl FnOnce(&Self, &mut Graph<T>) -> Var, what: &str) -> Result<Tensor<T>> {
        self.check_params()?;
        let mut g = Graph::inference();
        let v = f(self, &mut g);
        finite(g.value(v).clone(), what)
    }

    fn image_input(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        self.check_input(t, self.config.channels, self.config.image_size, what)
    }

    fn mesh_input(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        self.check_input(t, 1, self.config.image_size, what)
    }

    pub fn disentangle(&self, x: &Tensor<T>) -> Result<Disentangled<T>> {
        self.image_input(x, "x")?;
        self.check_params()?;
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let (y, z, face, mesh) = self.disentangle_var(&mut g, xv);
        Ok(Disentangled {
            y_hat: finite(g.value(y).clone(), "y_hat")?,
            z_hat: finite(g.value(z).clone(), "z_hat")?,
            code: LatentCode { face: g.value(face).clone(), mesh: g.value(mesh).clone() },
        })
    }

    /// G_Dec-Y applied to a face slice.
    pub fn decode_face_part(&self, face: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(face, self.config.latent_face, self.config.latent_size(), "face latent")?;
        self.run(
            |m, g| {
                let v = g.constant(face.clone());
                m.decoder(g, &m.nets.g_dec_y, v)
            },
            "y_hat",
        )
    }

    /// G_Dec-Z applied to a mesh slice.
    pub fn decode_mesh_part(&self, mesh: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(mesh, self.config.latent_mesh, self.config.latent_size(), "mesh latent")?;
        self.run(
            |m, g| {
                let v = g.constant(mesh.clone());
                m.decoder(g, &m.nets.g_dec_z, v)
            },
            "z_hat",
        )
    }

    /// Both decoders from a full code; each reads only its own channel slice.
    pub fn decode_code(&self, code: &LatentCode<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let joined = code.joined();
        let s = self.config.latent_size();
        self.check_input(&joined, self.config.latent_face + self.config.latent_mesh, s, "latent code")?;
        self.check_params()?;
        let mut g = Graph::inference();
        let v = g.constant(joined);
        let cy = self.config.latent_face;
        let face = g.slice_channels(v, 0, cy);
        let mesh = g.slice_channels(v, cy, self.config.latent_mesh);
        let y = self.decoder(&mut g, &self.nets.g_dec_y, face);
        let z = self.decoder(&mut g, &self.nets.g_dec_z, mesh);
        Ok((finite(g.value(y).clone(), "y_hat")?, finite(g.value(z).clone(), "z_hat")?))
    }

    pub fn encode_face(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.image_input(y, "y")?;
        self.run(
            |m, g| {
                let v = g.constant(y.clone());
                m.encode_face_var(g, v)
            },
            "face latent",
        )
    }

    pub fn encode_mesh(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.mesh_input(z, "z")?;
        self.run(
            |m, g| {
                let v = g.constant(z.clone());
                m.encode_mesh_var(g, v)
            },
            "mesh latent",
        )
    }

    pub fn decode_fused(&self, face: &Tensor<T>, mesh: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config.latent_size();
        self.check_input(face, self.config.latent_face, s, "face latent")?;
        self.check_input(mesh, self.config.latent_mesh, s, "mesh latent")?;
        if face.batch() != mesh.batch() {
            return Err(Error::Shape(format!("batch {} vs {}", face.batch(), mesh.batch())));
        }
        self.run(
            |m, g| {
                let (f, z) = (g.constant(face.clone()), g.constant(mesh.clone()));
                m.decode_fused_var(g, f, z)
            },
            "x_hat",
        )
    }

    pub fn fuse(&self, y: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.image_input(y, "y")?;
        self.mesh_input(z, "z")?;
        if y.batch() != z.batch() {
            return Err(Error::Shape(format!("batch {} vs {}", y.batch(), z.batch())));
        }
        self.run(
            |m, g| {
                let (yv, zv) = (g.constant(y.clone()), g.constant(z.clone()));
                m.fuse_var(g, yv, zv)
            },
            "x_hat",
        )
    }

    pub fn discriminate(&self, which: Domain, img: &Tensor<T>) -> Result<Tensor<T>> {
        match which {
            Domain::Z => self.mesh_input(img, "z")?,
            _ => self.image_input(img, "image")?,
        }
        self.run(
            |m, g| {
                let v = g.constant(img.clone());
                m.discriminate_var(g, which, v)
            },
            "scores",
        )
    }

    /// `(1 - t) * e(z1) + t * e(z2)` on mesh latents; the endpoints are exact.
    pub fn latent_interp(&self, z1: &Tensor<T>, z2: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("interpolation weight {t} outside [0, 1]")));
        }
        if t == 0.0 {
            return self.encode_mesh(z1);
        }
        if t == 1.0 {
            return self.encode_mesh(z2);
        }
        let (e1, e2) = (self.encode_mesh(z1)?, self.encode_mesh(z2)?);
        check_same(&e1, &e2)?;
        let (a, b) = (T::of(1.0 - t), T::of(t));
        Ok(e1.zip_map(&e2, |p, q| a * p + b * q))
    }

    /// Elementwise arithmetic on mesh latents. `Scale` ignores `z2`.
    pub fn latent_arith(&self, z1: &Tensor<T>, z2: &Tensor<T>, op: LatentOp) -> Result<Tensor<T>> {
        let e1 = self.encode_mesh(z1)?;
        match op {
            LatentOp::Scale(alpha) => Ok(scale_latent(&e1, alpha)),
            LatentOp::Add | LatentOp::Sub => {
                let e2 = self.encode_mesh(z2)?;
                check_same(&e1, &e2)?;
                Ok(combine_latents(&e1, &e2, op))
            }
        }
    }
}

/// `a + b` or `a - b`; `Scale` applies to `a` alone.
pub fn combine_latents<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: LatentOp) -> Tensor<T> {
    match op {
        LatentOp::Add => a.zip_map(b, |p, q| p + q),
        LatentOp::Sub => a.zip_map(b, |p, q| p - q),
        LatentOp::Scale(alpha) => scale_latent(a, alpha),
    }
}

pub fn scale_latent<T: Real>(a: &Tensor<T>, alpha: f64) -> Tensor<T> {
    if alpha == 1.0 {
        return a.clone();
    }
    let s = T::of(alpha);
    a.map(|v| s * v)
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn finite<T: Real>(t: Tensor<T>, what: &str) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

// ---- checkpoints ----

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset into the params file.
    pub offset: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub config: NetConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined state stored alongside the parameters (optimizer counters).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// Contents of a checkpoint directory: every named tensor plus metadata.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub config: NetConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub extra: serde_json::Value,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes `manifest.json` and `params.bin` into `dir`, creating it if needed.
pub fn write_checkpoint(dir: &Path, ck: &RawCheckpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(ck.tensors.len());
    for (name, t) in &ck.tensors {
        let start = bytes.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            offset: start as u64,
            crc32: crc32fast::hash(&bytes[start..]),
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT,
        config: ck.config.clone(),
        step: ck.step,
        tensors: entries,
        extra: ck.extra.clone(),
    };
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, &bytes).map_err(|e| Error::io(&params_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)
        .map_err(|e| Error::Json { path: manifest_path.clone(), source: e })?;
    f.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Reads a checkpoint directory, verifying every tensor's checksum.
pub fn read_checkpoint(dir: &Path) -> Result<RawCheckpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: manifest_path.clone(), source: e })?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(ck_err(&manifest_path, format!("format {} (expected {CHECKPOINT_FORMAT})", m.format)));
    }
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let mut tensors = Vec::with_capacity(m.tensors.len());
    let mut expected_offset = 0u64;
    for e in &m.tensors {
        let len = e.shape.iter().product::<usize>() * 4;
        if e.offset != expected_offset {
            return Err(ck_err(
                &params_path,
                format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset),
            ));
        }
        let start = e.offset as usize;
        let Some(chunk) = bytes.get(start..start + len) else {
            return Err(ck_err(&params_path, format!("truncated at tensor {}", e.name)));
        };
        if crc32fast::hash(chunk) != e.crc32 {
            return Err(ck_err(&params_path, format!("checksum mismatch in tensor {}", e.name)));
        }
        let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape, data)));
        expected_offset += len as u64;
    }
    if expected_offset as usize != bytes.len() {
        return Err(ck_err(&params_path, format!("{} trailing bytes", bytes.len() - expected_offset as usize)));
    }
    Ok(RawCheckpoint { config: m.config, step: m.step, tensors, extra: m.extra })
}

impl ModelBundle<f32> {
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.ids().map(|id| (self.params.name(id).to_string(), self.params.get(id).clone())).collect()
    }

    /// Rebuilds a bundle from checkpoint tensors; extra tensors are ignored.
    pub fn from_raw(ck: &RawCheckpoint, path: &Path) -> Result<Self> {
        let mut bundle = Self::init(&ck.config, 0)?;
        bundle.step = ck.step;
        let ids: Vec<ParamId> = bundle.params.ids().collect();
        for id in ids {
            let name = bundle.params.name(id).to_string();
            let Some((_, t)) = ck.tensors.iter().find(|(n, _)| *n == name) else {
                return Err(ck_err(path, format!("missing tensor {name}")));
            };
            let slot = bundle.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(ck_err(
                    path,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        if !bundle.params.all_finite() {
            return Err(ck_err(path, "non-finite parameters"));
        }
        Ok(bundle)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(
            dir.as_ref(),
            &RawCheckpoint {
                config: self.config.clone(),
                step: self.step,
                tensors: self.named_tensors(),
                extra: serde_json::Value::Null,
            },
        )
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let raw = read_checkpoint(dir)?;
        Self::from_raw(&raw, &dir.join(PARAMS_FILE))
    }
}

/// Path of the params file inside a checkpoint directory.
pub fn params_path(dir: &Path) -> PathBuf {
    dir.join(PARAMS_FILE)
}
