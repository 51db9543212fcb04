//! Command implementations behind the `meshface` binary.
//!
//! Every command resolves a [`RunConfig`], does its work and writes
//! `run_meta.json` into its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use meshface::data::{
    file_stem, heldout_faces, identity_of, ingest_dir, parse_manifest, png_files, pools_from_triples, read_faces,
    read_triples, synth_triples, toy_corpus, write_faces, write_triples, Triple, MANIFEST,
};
use meshface::image::{images_to_tensor, load_image, save_image, tensor_to_images, ImageTensor};
use meshface::mesh::MeshParams;
use meshface::metrics::{
    psnr, results_csv, roc_csv, ssim, verify_protocol, LabeledImage, PixelEmbedder, VerificationReport,
};
use meshface::model::{combine_latents, LatentOp, ModelBundle, NetConfig};
use meshface::nn::Tensor;
use meshface::rng::derive_seed;
use meshface::train::{train, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const DATA_ROOT_ENV: &str = "MESHFACE_DATA_ROOT";
pub const RUN_META: &str = "run_meta.json";
/// Images per forward pass at inference.
const INFER_BATCH: usize = 16;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Default root for `train/`, `heldout/` and `gallery/`.
    pub root: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
}

/// One JSON document holding every setting of a run. Missing sections take
/// the full-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mesh: MeshParams,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            net: NetConfig::full(),
            train: TrainConfig::default(),
            mesh: MeshParams::default(),
            data: DataPaths::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self { net: NetConfig::desk(), train: TrainConfig::desk(), ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("{}: not a valid run config (see README for the schema)", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            bail!("{}: config version {} is not supported (expected {CONFIG_VERSION})", path.display(), cfg.version);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.mesh.validate()?;
        Ok(())
    }

    fn data_root(&self) -> Option<PathBuf> {
        self.data.root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    fn data_dir(&self, explicit: Option<&Path>, configured: &Option<PathBuf>, sub: &str) -> Result<PathBuf> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| configured.clone())
            .or_else(|| self.data_root().map(|r| r.join(sub)))
            .ok_or_else(|| {
                anyhow!(
                    "no {sub} data directory: pass it explicitly, set data.{sub} in the config, or set {DATA_ROOT_ENV}"
                )
            })
    }
}

#[derive(Debug, Parser)]
#[command(name = "meshface", version, about = "Face completion under mesh occlusions")]
pub struct Cli {
    /// Run config (JSON). Missing fields take full-scale defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy corpus (or ingest a directory) and write MeshFace triples.
    Synth(SynthArgs),
    /// Train G, F and the discriminators on a triple directory.
    Train(TrainArgs),
    /// Recover clean faces and meshes from MeshFaces.
    Complete(CompleteArgs),
    /// Latent-space interpolation and arithmetic on mesh codes.
    Latent(LatentArgs),
    /// PSNR/SSIM and verification tables for a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Toy identities to render.
    #[arg(long, default_value_t = 200)]
    pub identities: usize,
    /// Clean images per identity; image 0 is the neutral gallery pose.
    #[arg(long, default_value_t = 1)]
    pub images: usize,
    /// MeshFaces per clean face.
    #[arg(long, default_value_t = 1)]
    pub per_face: usize,
    /// Extra faces with unseen nuisance and meshes, written to `heldout/`.
    #[arg(long, default_value_t = 0)]
    pub heldout: usize,
    /// Aligned side in pixels; defaults to image_size * 148 / 128.
    #[arg(long)]
    pub size: Option<usize>,
    /// Ingest PNG faces from this directory instead of rendering toy faces.
    #[arg(long, requires = "landmarks")]
    pub from: Option<PathBuf>,
    /// Landmark sidecar for `--from`: `<filename> <lx> <ly> <rx> <ry>` per line.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// Use the desk-scale network preset (64x64 images).
    #[arg(long)]
    pub desk_scale: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Triple directory (with manifest.txt).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use the desk-scale network and schedule presets.
    #[arg(long)]
    pub desk_scale: bool,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Save a checkpoint every this many steps (overrides the config).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    /// Checkpoint directory (holds manifest.json and params.bin).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of MeshFace PNGs, or a triple directory (its `_x` images are used).
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LatentKind {
    Interp,
    Scale,
    Add,
    Sub,
}

#[derive(Debug, Args)]
pub struct LatentArgs {
    #[arg(value_enum)]
    pub op: LatentKind,
    /// Checkpoint directory (holds manifest.json and params.bin).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Clean face fused with every resulting mesh code.
    #[arg(long)]
    pub face: PathBuf,
    /// First mesh image.
    #[arg(long)]
    pub z1: PathBuf,
    /// Second mesh image (interp, add, sub).
    #[arg(long)]
    pub z2: Option<PathBuf>,
    /// Interpolation points, endpoints included.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Scale factors, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.0,2.0")]
    pub alpha: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory (holds manifest.json and params.bin).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Triple directory used as the probe set.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of gallery PNGs named `<identity>_...png`.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    details: serde_json::Value,
}

fn write_meta(out: &Path, command: &str, cfg: &RunConfig, details: serde_json::Value) -> Result<()> {
    let meta = RunMeta {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.train.seed,
        config: cfg,
        details,
    };
    let path = out.join(RUN_META);
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Config from `--config` (or defaults) with command-line overrides applied.
pub fn resolve_config(cli: &Cli, desk_scale: bool) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if desk_scale {
        let seed = cfg.train.seed;
        cfg.net = NetConfig::desk();
        cfg.train = TrainConfig { seed, ..TrainConfig::desk() };
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().ok_or_else(|| anyhow!("no output directory: pass --out or set `out` in the config"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(&resolve_config(&cli, a.desk_scale)?, a).map(|_| ()),
        Command::Train(a) => cmd_train(&resolve_config(&cli, a.desk_scale)?, a),
        Command::Complete(a) => cmd_complete(&resolve_config(&cli, false)?, a).map(|_| ()),
        Command::Latent(a) => cmd_latent(&resolve_config(&cli, false)?, a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&resolve_config(&cli, false)?, a).map(|_| ()),
    }
}

/// Aligned side used when none is given: the image size scaled by 148/128.
pub fn default_aligned_size(image_size: usize) -> usize {
    (image_size * 148).div_ceil(128)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub triples: usize,
    pub heldout: usize,
    pub gallery: usize,
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<SynthSummary> {
    let out = out_dir(cfg)?;
    let size = a.size.unwrap_or_else(|| default_aligned_size(cfg.net.image_size));
    let seed = cfg.train.seed;
    let faces = match (&a.from, &a.landmarks) {
        (Some(dir), Some(lm)) => ingest_dir(dir, lm, size)?,
        _ => toy_corpus(a.identities, a.images, size, seed)?,
    };
    let triples = synth_triples(&faces, &cfg.mesh, a.per_face, derive_seed(seed, &[1]))?;
    write_triples(&out.join("train"), &triples)?;
    let mut summary = SynthSummary { triples: triples.len(), heldout: 0, gallery: 0 };
    if a.from.is_none() {
        let gallery: Vec<_> = faces.iter().filter(|f| f.stem.ends_with("_img00")).cloned().collect();
        write_faces(&out.join("gallery"), &gallery)?;
        summary.gallery = gallery.len();
        if a.heldout > 0 {
            let held = heldout_faces(a.heldout, a.identities, size, seed)?;
            let held = synth_triples(&held, &cfg.mesh, 1, derive_seed(seed, &[2]))?;
            write_triples(&out.join("heldout"), &held)?;
            summary.heldout = held.len();
        }
    }
    write_meta(
        &out,
        "synth",
        cfg,
        serde_json::json!({
            "identities": a.identities, "images": a.images, "per_face": a.per_face, "heldout": a.heldout,
            "size": size, "from": a.from, "landmarks": a.landmarks,
            "triples": summary.triples,
        }),
    )?;
    Ok(summary)
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let out = out_dir(cfg)?;
    let mut tc = cfg.train.clone();
    if a.max_steps.is_some() {
        tc.max_steps = a.max_steps;
    }
    if let Some(k) = a.checkpoint_every {
        tc.checkpoint_every = k;
    }
    let data = cfg.data_dir(a.data.as_deref(), &cfg.data.train, "train")?;
    let triples = read_triples(&data).with_context(|| format!("loading triples from {}", data.display()))?;
    let pools = pools_from_triples(&triples)?;
    let resolved = RunConfig { train: tc.clone(), ..cfg.clone() };
    write_meta(&out, "train", &resolved, serde_json::json!({ "data": data, "resume": a.resume }))?;
    let outcome = train(&tc, &cfg.net, &pools, &out, a.resume.as_deref())?;
    eprintln!(
        "trained to step {}; log {}; checkpoint {}",
        outcome.trainer.bundle.step,
        outcome.log_path.display(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

/// Center-crops to the model size when larger; smaller images are an error.
fn fit(img: &ImageTensor, size: usize, path: &Path) -> Result<ImageTensor> {
    if img.height() < size || img.width() < size {
        bail!("{}: image is {}x{}, the model needs at least {size}x{size}", path.display(), img.height(), img.width());
    }
    Ok(img.center_crop(size)?)
}

fn load_fit(path: &Path, size: usize, channels: usize) -> Result<ImageTensor> {
    let img = fit(&load_image(path)?, size, path)?;
    if img.channels() != channels {
        bail!("{}: expected {channels} channel(s), got {}", path.display(), img.channels());
    }
    Ok(img)
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    ModelBundle::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// `G_Dec-Y(G_Enc|Y(x))` and `G_Dec-Z(G_Enc|Z(x))` for every image, batched.
pub fn recover(bundle: &ModelBundle, xs: &[ImageTensor]) -> Result<(Vec<ImageTensor>, Vec<ImageTensor>)> {
    let mut ys = Vec::with_capacity(xs.len());
    let mut zs = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(INFER_BATCH) {
        let d = bundle.disentangle(&images_to_tensor(chunk)?)?;
        ys.extend(tensor_to_images(&d.y_hat)?);
        zs.extend(tensor_to_images(&d.z_hat)?);
    }
    Ok((ys, zs))
}

pub fn cmd_complete(cfg: &RunConfig, a: &CompleteArgs) -> Result<usize> {
    let out = out_dir(cfg)?;
    let bundle = load_bundle(&a.checkpoint)?;
    let size = bundle.config.image_size;
    let manifest = a.input.join(MANIFEST);
    let inputs: Vec<(String, PathBuf)> = if manifest.exists() {
        parse_manifest(&manifest)?
            .into_iter()
            .map(|e| {
                let p = a.input.join(format!("{}_x.png", e.stem));
                (e.stem, p)
            })
            .collect()
    } else {
        png_files(&a.input)?.into_iter().map(|p| (file_stem(&p), p)).collect()
    };
    if inputs.is_empty() {
        bail!("{}: no input images", a.input.display());
    }
    let xs = inputs.iter().map(|(_, p)| load_fit(p, size, bundle.config.channels)).collect::<Result<Vec<_>>>()?;
    let (ys, zs) = recover(&bundle, &xs)?;
    for ((stem, _), (y, z)) in inputs.iter().zip(ys.iter().zip(&zs)) {
        save_image(y, out.join(format!("{stem}_yhat.png")))?;
        save_image(z, out.join(format!("{stem}_zhat.png")))?;
    }
    write_meta(
        &out,
        "complete",
        cfg,
        serde_json::json!({ "checkpoint": a.checkpoint, "input": a.input, "images": inputs.len() }),
    )?;
    Ok(inputs.len())
}

fn single(path: &Path, size: usize, channels: usize) -> Result<Tensor<f32>> {
    Ok(images_to_tensor(&[load_fit(path, size, channels)?])?)
}

/// Writes the latent demo images; returns their paths in order.
pub fn cmd_latent(cfg: &RunConfig, a: &LatentArgs) -> Result<Vec<PathBuf>> {
    let out = out_dir(cfg)?;
    let bundle = load_bundle(&a.checkpoint)?;
    let (size, ch) = (bundle.config.image_size, bundle.config.channels);
    let y = single(&a.face, size, ch)?;
    let z1 = single(&a.z1, size, 1)?;
    let z2 = match &a.z2 {
        Some(p) => Some(single(p, size, 1)?),
        None => None,
    };
    let need_z2 = || z2.as_ref().ok_or_else(|| anyhow!("this operation needs --z2"));
    let face = bundle.encode_face(&y)?;
    let mut written = Vec::new();
    let mut emit = |name: String, mesh: &Tensor<f32>| -> Result<()> {
        let x = bundle.decode_fused(&face, mesh)?;
        let path = out.join(name);
        save_image(&tensor_to_images(&x)?[0], &path)?;
        written.push(path);
        Ok(())
    };
    match a.op {
        LatentKind::Interp => {
            let z2 = need_z2()?;
            if a.steps < 2 {
                bail!("--steps must be at least 2 to include both endpoints");
            }
            for i in 0..a.steps {
                let t = i as f64 / (a.steps - 1) as f64;
                emit(format!("interp_{i:02}.png"), &bundle.latent_interp(&z1, z2, t)?)?;
            }
        }
        LatentKind::Scale => {
            if a.alpha.is_empty() {
                bail!("--alpha needs at least one value");
            }
            let e1 = bundle.encode_mesh(&z1)?;
            for (i, &alpha) in a.alpha.iter().enumerate() {
                emit(format!("scale_{i:02}.png"), &combine_latents(&e1, &e1, LatentOp::Scale(alpha)))?;
            }
        }
        LatentKind::Add | LatentKind::Sub => {
            let z2 = need_z2()?;
            let (e1, e2) = (bundle.encode_mesh(&z1)?, bundle.encode_mesh(z2)?);
            let (op, tag) = if a.op == LatentKind::Add { (LatentOp::Add, "add") } else { (LatentOp::Sub, "sub") };
            // Panel layout: fuse(y, z1), fuse(y, z2), then the combined code.
            emit(format!("{tag}_z1.png"), &e1)?;
            emit(format!("{tag}_z2.png"), &e2)?;
            emit(format!("{tag}_result.png"), &combine_latents(&e1, &e2, op))?;
        }
    }
    write_meta(
        &out,
        "latent",
        cfg,
        serde_json::json!({ "op": format!("{:?}", a.op).to_lowercase(), "checkpoint": a.checkpoint, "face": a.face,
            "z1": a.z1, "z2": a.z2, "steps": a.steps, "alpha": a.alpha }),
    )?;
    Ok(written)
}

/// The three verification rows plus the probe triples they were computed on.
#[derive(Debug, Clone)]
pub struct EvalTables {
    pub corrupted: VerificationReport,
    pub recovered: VerificationReport,
    pub clean: VerificationReport,
}

/// Scores corrupted (x), recovered (y_hat) and clean (y) probes against the
/// gallery. Triples are center-cropped to the model size.
pub fn evaluate(bundle: &ModelBundle, triples: &[Triple], gallery: &[LabeledImage]) -> Result<EvalTables> {
    let size = bundle.config.image_size;
    let probes = triples.iter().map(|t| Ok(t.center_crop(size)?)).collect::<Result<Vec<_>>>()?;
    let clean: Vec<ImageTensor> = probes.iter().map(|t| t.y.clone()).collect();
    let xs: Vec<ImageTensor> = probes.iter().map(|t| t.x.clone()).collect();
    let (ys, _) = recover(bundle, &xs)?;
    let label = |imgs: &[ImageTensor]| -> Vec<LabeledImage> {
        imgs.iter()
            .zip(&probes)
            .map(|(i, t)| LabeledImage { image: i.clone(), identity: identity_of(&t.stem).to_string() })
            .collect()
    };
    let run = |imgs: &[ImageTensor]| verify_protocol(gallery, &label(imgs), &PixelEmbedder, Some(&clean));
    Ok(EvalTables { corrupted: run(&xs)?, recovered: run(&ys)?, clean: run(&clean)? })
}

pub fn load_gallery(dir: &Path, size: usize) -> Result<Vec<LabeledImage>> {
    read_faces(dir)?
        .into_iter()
        .map(|f| {
            let image = fit(&f.image, size, &dir.join(format!("{}.png", f.stem)))?;
            Ok(LabeledImage { image, identity: identity_of(&f.stem).to_string() })
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<EvalTables> {
    let out = out_dir(cfg)?;
    let bundle = load_bundle(&a.checkpoint)?;
    let data = cfg.data_dir(a.data.as_deref(), &cfg.data.eval, "heldout")?;
    let gallery_dir = cfg.data_dir(a.gallery.as_deref(), &cfg.data.gallery, "gallery")?;
    let triples = read_triples(&data).with_context(|| format!("loading probes from {}", data.display()))?;
    let gallery = load_gallery(&gallery_dir, bundle.config.image_size)?;
    let tables = evaluate(&bundle, &triples, &gallery)?;
    let csv =
        results_csv(&[("Corrupted", &tables.corrupted), ("Recovered", &tables.recovered), ("Clean", &tables.clean)]);
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("results.csv", csv)?;
    write("roc_corrupted.csv", roc_csv(&tables.corrupted.curve))?;
    write("roc_recovered.csv", roc_csv(&tables.recovered.curve))?;
    write("roc_clean.csv", roc_csv(&tables.clean.curve))?;
    write_meta(
        &out,
        "eval",
        cfg,
        serde_json::json!({ "checkpoint": a.checkpoint, "data": data, "gallery": gallery_dir }),
    )?;
    Ok(tables)
}

/// Mean PSNR and SSIM of `a[i]` against `b[i]`.
pub fn mean_quality(a: &[ImageTensor], b: &[ImageTensor]) -> Result<(f64, f64)> {
    if a.is_empty() || a.len() != b.len() {
        bail!("need equal, nonempty image lists ({} vs {})", a.len(), b.len());
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        p += psnr(x, y)?;
        s += ssim(x, y)?;
    }
    let n = a.len() as f64;
    Ok((p / n, s / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"version": 1, "net": {"image_size": 64}}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.net.image_size, 64);
        assert_eq!(c.net.base_channels, NetConfig::full().base_channels);
        fs::write(&p, r#"{"version": 1, "trian": {}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        fs::write(&p, r#"{"version": 1, "train": {"epoch": 3}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        fs::write(&p, r#"{"version": 2}"#).unwrap();
        assert!(format!("{:#}", RunConfig::load(&p).unwrap_err()).contains("version"));
        fs::write(&p, r#"{"net": {}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn defaults_are_full_scale() {
        let c = RunConfig::default();
        assert_eq!((c.train.epochs, c.train.batch_size, c.train.lr0, c.train.lambda), (100, 16, 1e-4, 10.0));
        assert_eq!(c.net.image_size, 128);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(default_aligned_size(128), 148);
        assert_eq!(default_aligned_size(64), 74);
    }
}
