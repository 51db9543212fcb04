//! Corpus generation, MeshFace triple files and directory ingestion.
//!
//! On disk a triple set is a directory of `<stem>_x.png`, `<stem>_y.png`,
//! `<stem>_z.png` plus `manifest.txt` with one `<stem> <beta> <seed>` line per
//! triple. Identities are the stem prefix before the first `_`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{align_by_eyes, load_image, save_image, toy_face_with, EyeLandmarks, ImageTensor, Nuisance};
use crate::mesh::{synth_meshface, MeshParams, MeshPattern};
use crate::rng::{derive_seed, SeededRng};
use crate::train::DomainPools;

pub const MANIFEST: &str = "manifest.txt";

const NUISANCE_STREAM: u64 = 0x6e;
const HELDOUT_STREAM: u64 = 0x40;
const MESH_STREAM: u64 = 0x3e;

/// An aligned clean face.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanFace {
    pub stem: String,
    pub image: ImageTensor,
}

impl CleanFace {
    pub fn identity(&self) -> &str {
        identity_of(&self.stem)
    }
}

pub fn identity_of(stem: &str) -> &str {
    stem.split('_').next().unwrap_or(stem)
}

fn render(identity: u64, nuisance: &Nuisance, index: usize, size: usize) -> Result<CleanFace> {
    let face = toy_face_with(identity, nuisance, size)?;
    Ok(CleanFace {
        stem: format!("id{identity:04}_img{index:02}"),
        image: align_by_eyes(&face.image, &face.landmarks, size)?,
    })
}

/// `identities x images_per_identity` aligned toy faces. Image 0 of every
/// identity has neutral nuisance and serves as the gallery image.
pub fn toy_corpus(identities: usize, images_per_identity: usize, size: usize, seed: u64) -> Result<Vec<CleanFace>> {
    let mut out = Vec::with_capacity(identities * images_per_identity);
    for id in 0..identities as u64 {
        for k in 0..images_per_identity {
            let nuisance = if k == 0 {
                Nuisance::neutral()
            } else {
                Nuisance::draw(&mut SeededRng::derive(seed, &[NUISANCE_STREAM, id, k as u64]))
            };
            out.push(render(id, &nuisance, k, size)?);
        }
    }
    Ok(out)
}

/// `count` faces of identities `0..identities` (round robin) under fresh
/// nuisance, indexed after any training image.
pub fn heldout_faces(count: usize, identities: usize, size: usize, seed: u64) -> Result<Vec<CleanFace>> {
    if identities == 0 {
        return Err(Error::InvalidArgument("held-out set needs at least one identity".into()));
    }
    (0..count)
        .map(|j| {
            let id = (j % identities) as u64;
            let nuisance = Nuisance::draw(&mut SeededRng::derive(seed, &[HELDOUT_STREAM, j as u64]));
            render(id, &nuisance, 50 + j / identities, size)
        })
        .collect()
}

/// One synthesized (MeshFace, clean face, mesh) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub stem: String,
    pub x: ImageTensor,
    pub y: ImageTensor,
    pub z: ImageTensor,
    pub beta: f64,
    /// Seed that regenerates this triple's mesh from its clean face.
    pub seed: u64,
}

impl Triple {
    /// Same window of all three images.
    pub fn center_crop(&self, size: usize) -> Result<Triple> {
        Ok(Triple {
            x: self.x.center_crop(size)?,
            y: self.y.center_crop(size)?,
            z: self.z.center_crop(size)?,
            ..self.clone()
        })
    }
}

/// `per_face` MeshFaces for every clean face.
pub fn synth_triples(faces: &[CleanFace], params: &MeshParams, per_face: usize, seed: u64) -> Result<Vec<Triple>> {
    params.validate()?;
    let mut out = Vec::with_capacity(faces.len() * per_face);
    for (i, face) in faces.iter().enumerate() {
        for r in 0..per_face {
            let s = derive_seed(seed, &[MESH_STREAM, i as u64, r as u64]);
            let b = synth_meshface(&face.image, params, &mut SeededRng::new(s))?;
            out.push(Triple {
                stem: format!("{}_m{r:02}", face.stem),
                x: b.meshface,
                y: face.image.clone(),
                z: b.mesh.to_image(),
                beta: b.beta,
                seed: s,
            });
        }
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_triples(dir: &Path, triples: &[Triple]) -> Result<()> {
    create_dir(dir)?;
    let mut manifest = String::new();
    for t in triples {
        save_image(&t.x, dir.join(format!("{}_x.png", t.stem)))?;
        save_image(&t.y, dir.join(format!("{}_y.png", t.stem)))?;
        save_image(&t.z, dir.join(format!("{}_z.png", t.stem)))?;
        writeln!(manifest, "{} {} {}", t.stem, t.beta, t.seed).expect("writing to a String");
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub stem: String,
    pub beta: f64,
    pub seed: u64,
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::Parse { path: path.to_path_buf(), line: i + 1, reason };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(bad(format!("expected `<stem> <beta> <seed>`, got {} fields", f.len())));
        }
        out.push(ManifestEntry {
            stem: f[0].to_string(),
            beta: f[1].parse().map_err(|e| bad(format!("beta {:?}: {e}", f[1])))?,
            seed: f[2].parse().map_err(|e| bad(format!("seed {:?}: {e}", f[2])))?,
        });
    }
    Ok(out)
}

pub fn read_triples(dir: &Path) -> Result<Vec<Triple>> {
    let entries = parse_manifest(&dir.join(MANIFEST))?;
    if entries.is_empty() {
        return Err(Error::Empty(format!("{}", dir.join(MANIFEST).display())));
    }
    entries
        .into_iter()
        .map(|e| {
            let z = load_image(dir.join(format!("{}_z.png", e.stem)))?;
            MeshPattern::from_image(&z)?;
            Ok(Triple {
                x: load_image(dir.join(format!("{}_x.png", e.stem)))?,
                y: load_image(dir.join(format!("{}_y.png", e.stem)))?,
                z,
                beta: e.beta,
                seed: e.seed,
                stem: e.stem,
            })
        })
        .collect()
}

/// The three training pools; pairing is dropped here.
pub fn pools_from_triples(triples: &[Triple]) -> Result<DomainPools> {
    DomainPools::new(
        triples.iter().map(|t| t.x.clone()).collect(),
        triples.iter().map(|t| t.y.clone()).collect(),
        triples.iter().map(|t| t.z.clone()).collect(),
    )
}

pub fn write_faces(dir: &Path, faces: &[CleanFace]) -> Result<()> {
    create_dir(dir)?;
    for f in faces {
        save_image(&f.image, dir.join(format!("{}.png", f.stem)))?;
    }
    Ok(())
}

/// Every `*.png` in `dir`, sorted by file name.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every PNG in `dir` as a face, named by file stem.
pub fn read_faces(dir: &Path) -> Result<Vec<CleanFace>> {
    let faces = png_files(dir)?
        .iter()
        .map(|p| Ok(CleanFace { stem: file_stem(p), image: load_image(p)? }))
        .collect::<Result<Vec<_>>>()?;
    if faces.is_empty() {
        return Err(Error::Empty(format!("no PNG files in {}", dir.display())));
    }
    Ok(faces)
}

/// Landmark sidecar: `<filename> <lx> <ly> <rx> <ry>` per line.
pub fn parse_landmarks(path: &Path) -> Result<Vec<(String, EyeLandmarks)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::Parse { path: path.to_path_buf(), line: i + 1, reason };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(format!("expected `<filename> <lx> <ly> <rx> <ry>`, got {} fields", f.len())));
        }
        let mut v = [0.0f64; 4];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|e| bad(format!("coordinate {s:?}: {e}")))?;
        }
        out.push((f[0].to_string(), EyeLandmarks { left_eye: (v[0], v[1]), right_eye: (v[2], v[3]) }));
    }
    Ok(out)
}

/// Loads and eye-aligns every image listed in the landmark sidecar.
pub fn ingest_dir(dir: &Path, landmarks: &Path, size: usize) -> Result<Vec<CleanFace>> {
    let entries = parse_landmarks(landmarks)?;
    if entries.is_empty() {
        return Err(Error::Empty(format!("no landmark lines in {}", landmarks.display())));
    }
    entries
        .into_iter()
        .map(|(name, lm)| {
            let path = dir.join(&name);
            let img = load_image(&path)?;
            if !lm.inside(img.height(), img.width()) {
                return Err(Error::InvalidArgument(format!("{}: landmarks outside the image", path.display())));
            }
            Ok(CleanFace { stem: file_stem(Path::new(&name)), image: align_by_eyes(&img, &lm, size)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_layout_and_determinism() {
        let a = toy_corpus(3, 2, 40, 7).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a[3].stem, "id0001_img01");
        assert_eq!(a[3].identity(), "id0001");
        assert_eq!(a, toy_corpus(3, 2, 40, 7).unwrap());
        assert_ne!(a[1].image, toy_corpus(3, 2, 40, 8).unwrap()[1].image);
        // Gallery images do not depend on the corpus seed.
        assert_eq!(a[0].image, toy_corpus(3, 2, 40, 8).unwrap()[0].image);
        let h = heldout_faces(4, 3, 40, 7).unwrap();
        assert_eq!(h[3].identity(), "id0000");
        assert!(h.iter().all(|f| !a.iter().any(|g| g.stem == f.stem)));
    }

    #[test]
    fn triples_roundtrip_through_disk() {
        let faces = toy_corpus(2, 1, 32, 1).unwrap();
        let t = synth_triples(&faces, &MeshParams::default(), 3, 4).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t[4].stem, "id0001_img00_m01");
        let dir = tempfile::tempdir().unwrap();
        write_triples(dir.path(), &t).unwrap();
        let back = read_triples(dir.path()).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in t.iter().zip(&back) {
            assert_eq!((a.stem.as_str(), a.beta, a.seed), (b.stem.as_str(), b.beta, b.seed));
            assert!(a.x.data().iter().zip(b.x.data()).all(|(p, q)| (p - q).abs() <= 1.0 / 510.0 + 1e-6));
        }
        // The manifest seed regenerates the triple.
        let again = synth_meshface(&faces[1].image, &MeshParams::default(), &mut SeededRng::new(t[4].seed)).unwrap();
        assert_eq!(again.meshface, t[4].x);
        let c = t[0].center_crop(24).unwrap();
        assert_eq!((c.x.height(), c.z.width()), (24, 24));
    }

    #[test]
    fn manifest_and_landmark_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        fs::write(&m, "a 0.5 1\nb x 2\n").unwrap();
        match parse_manifest(&m) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let l = dir.path().join("l.txt");
        fs::write(&l, "# comment\nf.png 1 2 3\n").unwrap();
        assert!(matches!(parse_landmarks(&l), Err(Error::Parse { line: 2, .. })));
        fs::write(&l, "f.png 10.5 20 30 20.25\n").unwrap();
        let lm = parse_landmarks(&l).unwrap();
        assert_eq!(lm[0].1.right_eye, (30.0, 20.25));
        assert!(matches!(read_triples(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn ingest_aligns_listed_images() {
        let dir = tempfile::tempdir().unwrap();
        let face = toy_face_with(5, &Nuisance::neutral(), 48).unwrap();
        save_image(&face.image, dir.path().join("p01_a.png")).unwrap();
        let lm = face.landmarks;
        let side = dir.path().join("landmarks.txt");
        fs::write(
            &side,
            format!("p01_a.png {} {} {} {}\n", lm.left_eye.0, lm.left_eye.1, lm.right_eye.0, lm.right_eye.1),
        )
        .unwrap();
        let faces = ingest_dir(dir.path(), &side, 40).unwrap();
        assert_eq!(faces.len(), 1);
        assert_eq!(faces[0].identity(), "p01");
        assert_eq!(faces[0].image.height(), 40);
        fs::write(&side, "p01_a.png 1 1 100 1\n").unwrap();
        assert!(ingest_dir(dir.path(), &side, 40).is_err());
    }
}
