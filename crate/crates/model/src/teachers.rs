//! Synthetic feature teachers with structurally distinct receptive fields,
//! plus the on-disk feature exchange format.
//!
//! Three kinds, in increasing difficulty for a patch-level student:
//! * local: nonlinear projection of each patch alone,
//! * mixing: same, but over a neighborhood average on the patch grid,
//! * global: local projection additively modulated by an image-global
//!   statistic, so every patch influences every token.

use std::io::{Read, Write};
use std::path::Path;

use ver_core::rng::{normal_vec, substream};

use crate::backbone::{extract_patches, Image};
use crate::error::{config_err, ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    Local,
    Mixing,
    Global,
}

impl std::fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TeacherKind::Local => write!(f, "local"),
            TeacherKind::Mixing => write!(f, "mixing"),
            TeacherKind::Global => write!(f, "global"),
        }
    }
}

impl std::str::FromStr for TeacherKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(TeacherKind::Local),
            "mixing" => Ok(TeacherKind::Mixing),
            "global" => Ok(TeacherKind::Global),
            other => Err(ModelError::Config(format!(
                "unknown teacher kind '{other}' (expected local, mixing, or global)"
            ))),
        }
    }
}

/// Deterministic feature teacher: weights are a pure function of
/// (seed, kind, dims), features a pure function of those plus the image.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    pub kind: TeacherKind,
    pub dim: usize,
    pub seed: u64,
    patch: usize,
    patch_dim: usize,
    w: Vec<f64>,      // [patch_dim, dim]
    b: Vec<f64>,      // [dim]
    w_glob: Vec<f64>, // [patch_dim, dim], global kind only
}

impl SyntheticTeacher {
    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn new(kind: TeacherKind, dim: usize, seed: u64, patch: usize, channels: usize) -> Result<Self> {
        if dim == 0 || patch == 0 || channels == 0 {
            return config_err("teacher dims must be positive");
        }
        let patch_dim = patch * patch * channels;
        let mut rng = substream(seed, "teacher-weights");
        let std = 1.0 / (patch_dim as f64).sqrt();
        let w = normal_vec(&mut rng, patch_dim * dim, 0.0, std);
        // Bias std is large on purpose: it gives each teacher a distinct
        // feature mean, which keeps the kinds linearly separable.
        let b = normal_vec(&mut rng, dim, 0.0, 0.6);
        let w_glob = normal_vec(&mut rng, patch_dim * dim, 0.0, std);
        Ok(Self {
            kind,
            dim,
            seed,
            patch,
            patch_dim,
            w,
            b,
            w_glob,
        })
    }

    /// `[T, dim]` features for one image.
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let (patches, t, pdim) = extract_patches(image, self.patch)?;
        if pdim != self.patch_dim {
            return config_err(format!(
                "image patch dim {pdim} does not match teacher patch dim {}",
                self.patch_dim
            ));
        }
        let grid_w = image.width / self.patch;
        let grid_h = image.height / self.patch;

        // The per-kind input each token projects from.
        let inputs: Vec<f64> = match self.kind {
            TeacherKind::Local => patches.clone(),
            TeacherKind::Mixing => {
                // Half the patch itself, half the mean of its grid
                // neighbors: perturbing one patch moves itself and every
                // neighbor.
                let mut mixed = vec![0.0; t * pdim];
                for gy in 0..grid_h {
                    for gx in 0..grid_w {
                        let ti = gy * grid_w + gx;
                        let mut neigh: Vec<usize> = Vec::with_capacity(4);
                        if gy > 0 {
                            neigh.push((gy - 1) * grid_w + gx);
                        }
                        if gy + 1 < grid_h {
                            neigh.push((gy + 1) * grid_w + gx);
                        }
                        if gx > 0 {
                            neigh.push(gy * grid_w + gx - 1);
                        }
                        if gx + 1 < grid_w {
                            neigh.push(gy * grid_w + gx + 1);
                        }
                        for j in 0..pdim {
                            let own = patches[ti * pdim + j];
                            let avg: f64 = neigh.iter().map(|&ni| patches[ni * pdim + j]).sum::<f64>()
                                / neigh.len() as f64;
                            mixed[ti * pdim + j] = 0.5 * own + 0.5 * avg;
                        }
                    }
                }
                mixed
            }
            TeacherKind::Global => patches.clone(),
        };

        // Global kind: add W_g·mean(patches) to every token's pre-activation.
        let global_shift: Option<Vec<f64>> = match self.kind {
            TeacherKind::Global => {
                let mut mean_patch = vec![0.0; pdim];
                for row in patches.chunks(pdim) {
                    for (j, v) in row.iter().enumerate() {
                        mean_patch[j] += v;
                    }
                }
                mean_patch.iter_mut().for_each(|v| *v /= t as f64);
                let mut shift = vec![0.0; self.dim];
                for (j, pv) in mean_patch.iter().enumerate() {
                    for d in 0..self.dim {
                        shift[d] += pv * self.w_glob[j * self.dim + d];
                    }
                }
                Some(shift)
            }
            _ => None,
        };

        let mut out = vec![0.0; t * self.dim];
        for ti in 0..t {
            for d in 0..self.dim {
                let mut acc = self.b[d];
                for j in 0..pdim {
                    acc += inputs[ti * pdim + j] * self.w[j * self.dim + d];
                }
                if let Some(shift) = &global_shift {
                    acc += shift[d];
                }
                out[ti * self.dim + d] = acc.tanh();
            }
        }
        Ok(out)
    }
}

/// Ordered collection of teachers sharing one patch grid.
#[derive(Debug, Clone)]
pub struct TeacherBank {
    pub teachers: Vec<SyntheticTeacher>,
}

impl TeacherBank {
    pub fn new(teachers: Vec<SyntheticTeacher>) -> Result<Self> {
        if teachers.is_empty() {
            return config_err("teacher bank must not be empty");
        }
        if teachers.windows(2).any(|w| w[0].patch != w[1].patch) {
            return config_err("all teachers must share one patch size");
        }
        Ok(Self { teachers })
    }

    /// The reference bank: one teacher of each kind, dims matching `dims`.
    pub fn reference(dims: &[usize], seed: u64, patch: usize, channels: usize) -> Result<Self> {
        let kinds = [TeacherKind::Local, TeacherKind::Mixing, TeacherKind::Global];
        if dims.len() != kinds.len() {
            return config_err(format!(
                "reference bank wants {} teacher dims, got {}",
                kinds.len(),
                dims.len()
            ));
        }
        let teachers = dims
            .iter()
            .zip(kinds)
            .enumerate()
            .map(|(i, (&dim, kind))| SyntheticTeacher::new(kind, dim, seed.wrapping_add(i as u64), patch, channels))
            .collect::<Result<Vec<_>>>()?;
        Self::new(teachers)
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.teachers.iter().map(|t| t.dim).collect()
    }

    pub fn features(&self, i: usize, image: &Image) -> Result<Vec<f64>> {
        self.teachers
            .get(i)
            .ok_or_else(|| ModelError::Config(format!("teacher index {i} out of range")))?
            .features(image)
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"VERFEAT1";

/// Writes a `[tokens, dim]` feature block: 8-byte magic, u32 tokens, u32
/// dim (little-endian), then fp64 little-endian payload.
pub fn save_features(path: &Path, tokens: usize, dim: usize, data: &[f64]) -> Result<()> {
    if data.len() != tokens * dim {
        return config_err(format!(
            "feature payload {} does not match {tokens}x{dim}",
            data.len()
        ));
    }
    let mut buf = Vec::with_capacity(16 + data.len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(tokens as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))?;
    tmp.write_all(&buf)?;
    tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
    Ok(())
}

fn format_err<T>(path: &Path, offset: u64, msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    })
}

/// Reads a feature block written by [`save_features`]. Errors name the
/// byte offset at which parsing failed.
pub fn load_features(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return format_err(path, bytes.len() as u64, "truncated magic");
    }
    if &bytes[0..8] != FEATURE_MAGIC {
        return format_err(path, 0, "bad magic (expected VERFEAT1)");
    }
    if bytes.len() < 16 {
        return format_err(path, bytes.len() as u64, "truncated header");
    }
    let tokens = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let want = 16 + tokens * dim * 8;
    if bytes.len() < want {
        return format_err(
            path,
            bytes.len() as u64,
            format!("payload ends early (want {want} bytes total)"),
        );
    }
    if bytes.len() > want {
        return format_err(path, want as u64, "trailing bytes after payload");
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((tokens, dim, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ver_core::rng::uniform_vec;

    fn rand_image(seed: u64) -> Image {
        let mut rng = substream(seed, "data");
        Image::new(16, 16, 2, uniform_vec(&mut rng, 16 * 16 * 2, -1.0, 1.0)).unwrap()
    }

    fn zero_patch(img: &Image, patch: usize, idx: usize) -> Image {
        let grid_w = img.width / patch;
        let (gy, gx) = (idx / grid_w, idx % grid_w);
        let mut out = img.clone();
        for y in gy * patch..(gy + 1) * patch {
            for x in gx * patch..(gx + 1) * patch {
                for c in 0..img.channels {
                    out.data[(y * img.width + x) * img.channels + c] = 0.0;
                }
            }
        }
        out
    }

    fn changed_tokens(a: &[f64], b: &[f64], dim: usize) -> Vec<usize> {
        a.chunks(dim)
            .zip(b.chunks(dim))
            .enumerate()
            .filter(|(_, (ra, rb))| ra != rb)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn determinism_per_seed_and_kind() {
        let img = rand_image(1);
        let t1 = SyntheticTeacher::new(TeacherKind::Local, 12, 5, 4, 2).unwrap();
        let t2 = SyntheticTeacher::new(TeacherKind::Local, 12, 5, 4, 2).unwrap();
        assert_eq!(t1.features(&img).unwrap(), t2.features(&img).unwrap());
        let t3 = SyntheticTeacher::new(TeacherKind::Local, 12, 6, 4, 2).unwrap();
        assert_ne!(t1.features(&img).unwrap(), t3.features(&img).unwrap());
    }

    #[test]
    fn local_teacher_perturbation_stays_local() {
        let img = rand_image(2);
        let t = SyntheticTeacher::new(TeacherKind::Local, 10, 7, 4, 2).unwrap();
        let base = t.features(&img).unwrap();
        let poked = t.features(&zero_patch(&img, 4, 5)).unwrap();
        assert_eq!(changed_tokens(&base, &poked, 10), vec![5]);
    }

    #[test]
    fn mixing_teacher_perturbation_spreads() {
        let img = rand_image(3);
        let t = SyntheticTeacher::new(TeacherKind::Mixing, 10, 7, 4, 2).unwrap();
        let base = t.features(&img).unwrap();
        let poked = t.features(&zero_patch(&img, 4, 5)).unwrap();
        let changed = changed_tokens(&base, &poked, 10);
        assert!(changed.len() >= 2, "changed {changed:?}");
        assert!(changed.contains(&5));
    }

    #[test]
    fn global_teacher_perturbation_touches_every_token() {
        let img = rand_image(4);
        let t = SyntheticTeacher::new(TeacherKind::Global, 10, 7, 4, 2).unwrap();
        let base = t.features(&img).unwrap();
        let poked = t.features(&zero_patch(&img, 4, 5)).unwrap();
        assert_eq!(changed_tokens(&base, &poked, 10).len(), 16);
    }

    #[test]
    fn kinds_are_nearly_orthogonal_on_average() {
        let bank = TeacherBank::reference(&[16, 16, 16], 11, 4, 2).unwrap();
        let mut sums = [0.0; 3];
        let mut count = 0.0;
        for s in 0..20 {
            let img = rand_image(100 + s);
            let feats: Vec<Vec<f64>> = (0..3).map(|i| bank.features(i, &img).unwrap()).collect();
            for ti in 0..16 {
                let row = |i: usize| &feats[i][ti * 16..(ti + 1) * 16];
                let cos = |a: &[f64], b: &[f64]| {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    dot / (na * nb).max(1e-12)
                };
                sums[0] += cos(row(0), row(1)).abs();
                sums[1] += cos(row(0), row(2)).abs();
                sums[2] += cos(row(1), row(2)).abs();
                count += 1.0;
            }
        }
        for (pair, s) in sums.iter().enumerate() {
            let mean = s / count;
            assert!(mean < 0.5, "pair {pair}: mean |cos| = {mean}");
        }
    }

    #[test]
    fn feature_files_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t0.feat");
        let data: Vec<f64> = (0..24).map(|i| (i as f64).sin() * 1e-3).collect();
        save_features(&path, 4, 6, &data).unwrap();
        let (t, d, loaded) = load_features(&path).unwrap();
        assert_eq!((t, d), (4, 6));
        assert_eq!(
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            loaded.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn malformed_feature_files_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");

        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        match load_features(&path) {
            Err(ModelError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut ok = Vec::new();
        ok.extend_from_slice(b"VERFEAT1");
        ok.extend_from_slice(&2u32.to_le_bytes());
        ok.extend_from_slice(&3u32.to_le_bytes());
        ok.extend_from_slice(&[0u8; 5]); // payload should be 48 bytes
        std::fs::write(&path, &ok).unwrap();
        match load_features(&path) {
            Err(ModelError::Format { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
