//! Dataset handling: aligned RGB/NIR/TIR triples, the on-disk layout, a
//! deterministic synthetic generator, identity-balanced batch sampling, and
//! registration-preserving augmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{AugmentConfig, SamplerConfig};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Spectrum {
    R,
    N,
    T,
}

impl Spectrum {
    pub const ALL: [Spectrum; 3] = [Spectrum::R, Spectrum::N, Spectrum::T];

    pub fn index(self) -> usize {
        match self {
            Spectrum::R => 0,
            Spectrum::N => 1,
            Spectrum::T => 2,
        }
    }

    pub fn from_index(i: usize) -> Spectrum {
        Self::ALL[i]
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Spectrum::R => "RGB",
            Spectrum::N => "NIR",
            Spectrum::T => "TIR",
        }
    }

    pub fn parse(s: &str) -> Option<Spectrum> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R" | "RGB" => Some(Spectrum::R),
            "N" | "NIR" => Some(Spectrum::N),
            "T" | "TIR" => Some(Spectrum::T),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Spectrum::R => "R",
            Spectrum::N => "N",
            Spectrum::T => "T",
        }
    }
}

/// One sample: up to three spatially registered `[H, W, 3]` images.
#[derive(Debug, Clone)]
pub struct SpectralTriple {
    pub images: [Option<Array<f64>>; 3],
    pub identity: u32,
    pub camera: u32,
}

impl SpectralTriple {
    pub fn present(&self) -> Vec<Spectrum> {
        Spectrum::ALL
            .into_iter()
            .filter(|s| self.images[s.index()].is_some())
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset at {0} is empty")]
    Empty(PathBuf),
    #[error("unparseable sample filename {0:?}: expected <identity>_<camera>_<index>.<ext>")]
    BadFilename(String),
    #[error("failed to read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("inconsistent image sizes: {0}")]
    Inconsistent(String),
    #[error("{0}")]
    Contract(String),
}

/// Immutable after load. Channel statistics are computed once over all
/// present images and reused for normalization.
#[derive(Debug)]
pub struct Dataset {
    pub triples: Vec<SpectralTriple>,
    pub height: usize,
    pub width: usize,
    /// Distinct identities, sorted; classifier class = position here.
    pub identities: Vec<u32>,
    /// Per spectrum, per channel (mean, std).
    pub stats: [[(f64, f64); 3]; 3],
}

impl Dataset {
    fn build(triples: Vec<SpectralTriple>, height: usize, width: usize) -> Dataset {
        let mut ids: Vec<u32> = triples.iter().map(|t| t.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut stats = [[(0.0, 1.0); 3]; 3];
        for s in 0..3 {
            for c in 0..3 {
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                let mut n = 0usize;
                for t in &triples {
                    if let Some(img) = &t.images[s] {
                        for px in img.data().chunks_exact(3) {
                            sum += px[c];
                            sumsq += px[c] * px[c];
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    let mean = sum / n as f64;
                    let var = (sumsq / n as f64 - mean * mean).max(0.0);
                    stats[s][c] = (mean, var.sqrt().max(1e-6));
                }
            }
        }
        Dataset {
            triples,
            height,
            width,
            identities: ids,
            stats,
        }
    }

    pub fn class_of(&self, identity: u32) -> usize {
        self.identities
            .binary_search(&identity)
            .expect("identity present in dataset")
    }

    pub fn num_classes(&self) -> usize {
        self.identities.len()
    }

    /// Zero-mean / unit-variance copy of one spectrum image using the
    /// load-time channel statistics.
    pub fn normalize(&self, spectrum: Spectrum, image: &Array<f64>) -> Array<f64> {
        let st = &self.stats[spectrum.index()];
        let mut data = Vec::with_capacity(image.numel());
        for px in image.data().chunks_exact(3) {
            for c in 0..3 {
                data.push((px[c] - st[c].0) / st[c].1);
            }
        }
        Array::new(image.shape().to_vec(), data).unwrap()
    }

    /// Same dataset view over a different triple list: normalization stats
    /// and the identity table stay those of the parent.
    pub fn with_triples(&self, triples: Vec<SpectralTriple>) -> Dataset {
        Dataset {
            triples,
            height: self.height,
            width: self.width,
            identities: self.identities.clone(),
            stats: self.stats,
        }
    }

    /// Split each (identity, camera) group: the first `keep` samples stay,
    /// the rest form the second dataset. Used for train / held-out splits.
    pub fn split_per_group(&self, keep: usize) -> (Dataset, Dataset) {
        let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for t in &self.triples {
            let c = counts.entry((t.identity, t.camera)).or_insert(0);
            if *c < keep {
                first.push(t.clone());
            } else {
                second.push(t.clone());
            }
            *c += 1;
        }
        (
            Dataset::build(first, self.height, self.width),
            Dataset::build(second, self.height, self.width),
        )
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Deterministic-per-seed multi-spectral set. Each identity owns a latent
/// appearance vector; each spectrum renders it through its own fixed
/// sinusoidal basis and channel mixing, so spectra are correlated but
/// distribution-shifted. Cameras add a brightness shift; samples add noise.
pub fn synth_dataset(
    num_ids: usize,
    cams: usize,
    samples_per_id_cam: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Dataset {
    const LATENT: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);

    // Per-spectrum render maps: LATENT sinusoidal bases and a channel mixer.
    struct RenderMap {
        freq: Vec<[f64; 2]>,
        phase: Vec<f64>,
        chan_amp: Vec<[f64; 3]>,
        mix: [[f64; 3]; 3],
    }
    let maps: Vec<RenderMap> = (0..3)
        .map(|_| RenderMap {
            freq: (0..LATENT)
                .map(|_| [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)])
                .collect(),
            phase: (0..LATENT).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
            chan_amp: (0..LATENT)
                .map(|_| [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)])
                .collect(),
            mix: {
                let mut m = [[0.0; 3]; 3];
                for row in &mut m {
                    for v in row.iter_mut() {
                        *v = rng.gen_range(-0.6..0.6);
                    }
                }
                for (i, row) in m.iter_mut().enumerate() {
                    row[i] += 1.0;
                }
                m
            },
        })
        .collect();

    let latents: Vec<Vec<f64>> = (0..num_ids)
        .map(|_| (0..LATENT).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let cam_shift: Vec<f64> = (0..cams).map(|_| rng.gen_range(-0.25..0.25)).collect();

    let mut triples = Vec::with_capacity(num_ids * cams * samples_per_id_cam);
    for (id, z) in latents.iter().enumerate() {
        for cam in 0..cams {
            for _ in 0..samples_per_id_cam {
                let mut images: [Option<Array<f64>>; 3] = [None, None, None];
                for (s, map) in maps.iter().enumerate() {
                    let mut data = Vec::with_capacity(h * w * 3);
                    for y in 0..h {
                        for x in 0..w {
                            let fy = y as f64 / h as f64;
                            let fx = x as f64 / w as f64;
                            let mut raw = [0.0f64; 3];
                            for j in 0..LATENT {
                                let wave = (std::f64::consts::TAU
                                    * (map.freq[j][0] * fy + map.freq[j][1] * fx)
                                    + map.phase[j])
                                    .sin();
                                for c in 0..3 {
                                    raw[c] += z[j] * map.chan_amp[j][c] * wave;
                                }
                            }
                            for c in 0..3 {
                                let mixed: f64 = (0..3).map(|k| map.mix[c][k] * raw[k].tanh()).sum();
                                let noise: f64 = rng.gen_range(-0.05..0.05);
                                data.push(mixed + cam_shift[cam] + noise);
                            }
                        }
                    }
                    images[s] = Some(Array::new(vec![h, w, 3], data).unwrap());
                }
                triples.push(SpectralTriple {
                    images,
                    identity: id as u32,
                    camera: cam as u32,
                });
            }
        }
    }
    Dataset::build(triples, h, w)
}

// ---------------------------------------------------------------------------
// Disk loader
// ---------------------------------------------------------------------------

/// Load an RGB/ NIR/ TIR/ directory tree. Files are grouped by filename stem
/// `<identity>_<camera>_<index>`; stems absent from some spectrum yield a
/// triple with a reduced presence set. Accepts PNG and the raw `.tns` dump.
pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let mut stems: BTreeMap<String, [Option<PathBuf>; 3]> = BTreeMap::new();
    for s in Spectrum::ALL {
        let dir = root.join(s.dir_name());
        let Ok(entries) = std::fs::read_dir(&dir) else {
            continue;
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if !path.is_file() {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|v| v.to_str())
                .unwrap_or_default()
                .to_string();
            stems.entry(stem).or_default()[s.index()] = Some(path);
        }
    }
    if stems.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }

    let mut size: Option<(usize, usize)> = None;
    let mut triples = Vec::with_capacity(stems.len());
    for (stem, paths) in stems {
        let (identity, camera) = parse_stem(&stem)?;
        let mut images: [Option<Array<f64>>; 3] = [None, None, None];
        for (i, path) in paths.iter().enumerate() {
            let Some(path) = path else { continue };
            let img = load_image(path)?;
            let sh = (img.shape()[0], img.shape()[1]);
            match size {
                None => size = Some(sh),
                Some(expected) if expected != sh => {
                    return Err(DataError::Inconsistent(format!(
                        "{} is {}x{}, expected {}x{}",
                        path.display(),
                        sh.0,
                        sh.1,
                        expected.0,
                        expected.1
                    )))
                }
                _ => {}
            }
            images[i] = Some(img);
        }
        triples.push(SpectralTriple {
            images,
            identity,
            camera,
        });
    }
    let (h, w) = size.ok_or_else(|| DataError::Empty(root.to_path_buf()))?;
    Ok(Dataset::build(triples, h, w))
}

fn parse_stem(stem: &str) -> Result<(u32, u32), DataError> {
    let mut it = stem.split('_');
    let id = it.next().and_then(|v| v.parse().ok());
    let cam = it.next().and_then(|v| v.parse().ok());
    let idx = it.next().map(|v| v.parse::<u64>().is_ok());
    match (id, cam, idx) {
        (Some(id), Some(cam), Some(true)) => Ok((id, cam)),
        _ => Err(DataError::BadFilename(stem.to_string())),
    }
}

const TNS_MAGIC: &[u8; 4] = b"TNSR";

fn load_image(path: &Path) -> Result<Array<f64>, DataError> {
    let read_err = |reason: String| DataError::Read {
        path: path.to_path_buf(),
        reason,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("tns") => {
            let bytes = std::fs::read(path).map_err(|e| read_err(e.to_string()))?;
            read_tns(&bytes).map_err(read_err)
        }
        Some("png") => {
            let img = image::open(path).map_err(|e| read_err(e.to_string()))?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img
                .pixels()
                .flat_map(|p| p.0.into_iter().map(|v| v as f64 / 255.0))
                .collect();
            Ok(Array::new(vec![h, w, 3], data).unwrap())
        }
        other => Err(read_err(format!("unsupported extension {other:?}"))),
    }
}

/// Raw dump: magic "TNSR", dtype byte (4 = f32), then H, W, C as u32 LE,
/// then row-major f32 LE data.
fn read_tns(bytes: &[u8]) -> Result<Array<f64>, String> {
    if bytes.len() < 17 || &bytes[..4] != TNS_MAGIC {
        return Err("bad .tns header".into());
    }
    if bytes[4] != 4 {
        return Err(format!("unsupported .tns dtype tag {}", bytes[4]));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(5), dim(9), dim(13));
    if c != 3 {
        return Err(format!("expected 3 channels, got {c}"));
    }
    let need = 17 + h * w * c * 4;
    if bytes.len() != need {
        return Err(format!("payload size mismatch: {} != {need}", bytes.len()));
    }
    let data = bytes[17..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Array::new(vec![h, w, 3], data).map_err(|e| e.to_string())
}

/// Companion writer for the raw dump format.
pub fn write_tns(path: &Path, image: &Array<f64>) -> std::io::Result<()> {
    let sh = image.shape();
    let mut out = Vec::with_capacity(17 + image.numel() * 4);
    out.extend_from_slice(TNS_MAGIC);
    out.push(4);
    for d in [sh[0], sh[1], sh[2]] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)
}

// ---------------------------------------------------------------------------
// Sampling and augmentation
// ---------------------------------------------------------------------------

/// P identities x K samples, deterministic in (seed, step). Identities are
/// drawn without replacement; samples with replacement when an identity has
/// fewer than K.
pub fn sample_batch(
    dataset: &Dataset,
    cfg: &SamplerConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<usize>, DataError> {
    if dataset.identities.len() < cfg.ids_per_batch {
        return Err(DataError::Contract(format!(
            "need at least {} identities, dataset has {}",
            cfg.ids_per_batch,
            dataset.identities.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step));
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, t) in dataset.triples.iter().enumerate() {
        by_id.entry(t.identity).or_default().push(i);
    }
    let ids: Vec<u32> = by_id.keys().copied().collect();
    let chosen: Vec<u32> = ids
        .choose_multiple(&mut rng, cfg.ids_per_batch)
        .copied()
        .collect();
    let mut batch = Vec::with_capacity(cfg.batch_size());
    for id in chosen {
        let pool = &by_id[&id];
        if pool.len() >= cfg.samples_per_id {
            batch.extend(
                pool.choose_multiple(&mut rng, cfg.samples_per_id)
                    .copied(),
            );
        } else {
            for _ in 0..cfg.samples_per_id {
                batch.push(*pool.choose(&mut rng).unwrap());
            }
        }
    }
    Ok(batch)
}

/// Flip + pad-and-crop are shared across the three spectra (they are
/// spatially registered); random erasing is drawn independently per spectrum.
pub fn augment(triple: &SpectralTriple, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> SpectralTriple {
    if !cfg.enabled {
        return triple.clone();
    }
    let (h, w) = match triple.images.iter().flatten().next() {
        Some(img) => (img.shape()[0], img.shape()[1]),
        None => return triple.clone(),
    };
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let pad = cfg.crop_pad;
    let (oy, ox) = if pad > 0 {
        (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad))
    } else {
        (pad, pad)
    };

    let mut out = triple.clone();
    for s in 0..3 {
        let Some(img) = &triple.images[s] else { continue };
        let mut cur = img.clone();
        if flip {
            cur = flip_horizontal(&cur);
        }
        if pad > 0 {
            cur = pad_crop(&cur, pad, oy, ox);
        }
        if rng.gen::<f64>() < cfg.erase_prob {
            cur = erase_random(&cur, rng);
        }
        debug_assert_eq!(cur.shape(), &[h, w, 3]);
        out.images[s] = Some(cur);
    }
    out
}

pub fn flip_horizontal(img: &Array<f64>) -> Array<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut data = Vec::with_capacity(img.numel());
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + (w - 1 - x)) * 3;
            data.extend_from_slice(&img.data()[src..src + 3]);
        }
    }
    Array::new(img.shape().to_vec(), data).unwrap()
}

/// Zero-pad by `pad` on each side, then crop back to the original size at
/// offset (oy, ox) in 0..=2*pad.
fn pad_crop(img: &Array<f64>, pad: usize, oy: usize, ox: usize) -> Array<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut data = Vec::with_capacity(img.numel());
    for y in 0..h {
        for x in 0..w {
            let sy = (y + oy) as isize - pad as isize;
            let sx = (x + ox) as isize - pad as isize;
            if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                let src = (sy as usize * w + sx as usize) * 3;
                data.extend_from_slice(&img.data()[src..src + 3]);
            } else {
                data.extend_from_slice(&[0.0, 0.0, 0.0]);
            }
        }
    }
    Array::new(img.shape().to_vec(), data).unwrap()
}

fn erase_random(img: &Array<f64>, rng: &mut ChaCha8Rng) -> Array<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(0.02..0.2);
        let aspect = rng.gen_range(0.3..3.3);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.gen_range(0..h - eh);
        let x0 = rng.gen_range(0..w - ew);
        let mut out = img.clone();
        let mean: f64 = img.data().iter().sum::<f64>() / img.numel() as f64;
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                let base = (y * w + x) * 3;
                out.data_mut()[base..base + 3].fill(mean);
            }
        }
        return out;
    }
    img.clone()
}
