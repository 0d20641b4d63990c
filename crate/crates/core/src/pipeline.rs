//! File-level commands: encode, decode, train, metrics, consistency maps
//! and synthetic data.

use std::fs::{self, File};
use std::hash::{DefaultHasher, Hasher};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::coder::Bitstream;
use crate::config::{lambda_index, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::{bdbr, psnr, RdPoint};
use crate::model::Codec;
use crate::nn::ParamStore;
use crate::opam::Opam;
use crate::pnm::{read_ppm, write_pgm, write_ppm};
use crate::synthetic::{gen_dataset, SceneSpec};
use crate::tensor::Tensor;
use crate::train::{train, LogEntry, TrainConfig};

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn load_codec(path: &Path) -> Result<Codec> {
    Codec::load(BufReader::new(File::open(path).map_err(io_at(path))?))
}

pub fn save_codec(codec: &Codec, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_at(path))?);
    codec.save(&mut w)?;
    w.flush().map_err(io_at(path))
}

/// Order-sensitive hash of the exact bit patterns of a latent.
pub fn latent_hash(t: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    for v in t.data() {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

#[derive(Clone, Debug)]
pub struct EncodeReport {
    pub bytes: usize,
    pub height: usize,
    pub width: usize,
    /// Payload bits of each view (hyper-latent and all slices) per pixel.
    pub view_bpp: Vec<f64>,
    /// File size in bits over `K * H * W`.
    pub total_bpp: f64,
    pub latent_hashes: Vec<u64>,
}

pub fn encode_files(weights: &Path, images: &[PathBuf], output: &Path, lambda: f64) -> Result<EncodeReport> {
    let codec = load_codec(weights)?;
    let views = images.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
    let enc = codec.encode(&views, lambda_index(lambda))?;
    let bytes = enc.bitstream.to_bytes()?;
    fs::write(output, &bytes).map_err(io_at(output))?;
    let (h, w) = (views[0].dim(2), views[0].dim(3));
    let pixels = (h * w) as f64;
    let view_bpp = enc
        .bitstream
        .views
        .iter()
        .map(|v| {
            let n = v.z.len() + v.slices.iter().map(|(a, b)| a.len() + b.len()).sum::<usize>();
            8.0 * n as f64 / pixels
        })
        .collect();
    Ok(EncodeReport {
        bytes: bytes.len(),
        height: h,
        width: w,
        view_bpp,
        total_bpp: 8.0 * bytes.len() as f64 / (views.len() as f64 * pixels),
        latent_hashes: enc.latents.iter().map(latent_hash).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct DecodeReport {
    pub outputs: Vec<PathBuf>,
    pub latent_hashes: Vec<u64>,
}

/// Path of reconstructed view `k` inside `dir`.
pub fn view_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("view{k}.ppm"))
}

pub fn decode_file(weights: &Path, input: &Path, out_dir: &Path) -> Result<DecodeReport> {
    let codec = load_codec(weights)?;
    let bytes = fs::read(input).map_err(io_at(input))?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let latents = codec.decode_latents(&bs)?;
    let images = codec.reconstruct(&latents, bs.height as usize, bs.width as usize)?;
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let mut outputs = Vec::with_capacity(images.len());
    for (k, img) in images.iter().enumerate() {
        let p = view_path(out_dir, k);
        write_ppm(&p, img)?;
        outputs.push(p);
    }
    Ok(DecodeReport { outputs, latent_hashes: latents.iter().map(latent_hash).collect() })
}

/// Synthetic training set and trainer settings.
#[derive(Clone, Debug)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub scenes: usize,
    pub scene: SceneSpec,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl TrainJob {
    /// Two 64x64 views per scene, eight scenes, the desk model.
    pub fn toy() -> Self {
        TrainJob {
            model: ModelConfig::desk(),
            scenes: 8,
            scene: SceneSpec::new(2, 64, 64, 4),
            data_seed: 7,
            train: TrainConfig::default(),
        }
    }
}

/// Trains from scratch, writing the loss log line by line and the weights
/// at the end.
pub fn train_to_files(job: &TrainJob, weights: &Path, log_path: &Path) -> Result<Vec<LogEntry>> {
    let data = gen_dataset(job.data_seed, job.scenes, &job.scene)?;
    let mut codec = Codec::new(&job.model, job.train.seed)?;
    let mut log = BufWriter::new(File::create(log_path).map_err(io_at(log_path))?);
    writeln!(log, "{}", LogEntry::CSV_HEADER)?;
    let entries = train(&mut codec, &data, &job.train, |e| {
        writeln!(log, "{}", e.csv())?;
        Ok(())
    });
    log.flush().map_err(io_at(log_path))?;
    let entries = entries?;
    save_codec(&codec, weights)?;
    Ok(entries)
}

/// PSNR of each image pair.
pub fn psnr_files(a: &[PathBuf], b: &[PathBuf]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("{} reference images for {} test images", a.len(), b.len())));
    }
    a.iter().zip(b).map(|(x, y)| psnr(&read_ppm(x)?, &read_ppm(y)?)).collect()
}

/// Reads `bpp,psnr` lines; a non-numeric first line is taken as a header.
pub fn read_curve(path: &Path) -> Result<Vec<RdPoint>> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some((bpp, psnr_db)) => out.push(RdPoint { bpp, psnr_db }),
            None if i == 0 => continue,
            None => return Err(Error::Format(format!("{}:{}: expected `bpp,psnr`", path.display(), i + 1))),
        }
    }
    Ok(out)
}

pub fn bdbr_files(anchor: &Path, test: &Path) -> Result<f64> {
    bdbr(&read_curve(anchor)?, &read_curve(test)?)
}

/// Where consistency is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// First joint-decoder fusion on the decoded latents (needs weights).
    Latent,
    /// Raw-attention fusion on normalized pixel patches.
    Pixel,
}

/// Side of the square pixel patches used by the pixel probe.
pub const PROBE_PATCH: usize = 4;
/// Scale of the patch cosine similarities fed to the attention.
pub const PROBE_TEMPERATURE: f64 = 20.0;

/// Non-overlapping `p x p` patches of `[1,3,H,W]` as `[1, 3p^2, H/p, W/p]`
/// feature vectors, centred at mid-grey, unit length, scaled so that dot
/// products are temperature-scaled cosines.
pub fn patch_features(img: &Tensor, p: usize) -> Result<Tensor> {
    if img.ndim() != 4 || img.dim(0) != 1 || img.dim(2) < p || img.dim(3) < p || p == 0 {
        return Err(Error::Input(format!("cannot cut {p}x{p} patches from {:?}", img.shape())));
    }
    let (c, h, w) = (img.dim(1), img.dim(2), img.dim(3));
    let (gh, gw) = (h / p, w / p);
    let d = c * p * p;
    let src = img.data();
    let mut out = vec![0.0; d * gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut v = Vec::with_capacity(d);
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        v.push(src[(ch * h + gy * p + dy) * w + gx * p + dx] - 0.5);
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            let s = PROBE_TEMPERATURE.sqrt() / norm;
            for (i, x) in v.iter().enumerate() {
                out[(i * gh + gy) * gw + gx] = x * s;
            }
        }
    }
    Tensor::new(out, &[1, d, gh, gw])
}

/// Consistency maps `[H', W']` of `main` against each side image.
pub fn consistency_maps(codec: Option<&Codec>, main: &Tensor, sides: &[Tensor], probe: Probe) -> Result<Vec<Tensor>> {
    if sides.is_empty() {
        return Err(Error::Input("need at least one side view".into()));
    }
    let maps = match probe {
        Probe::Pixel => {
            let m = patch_features(main, PROBE_PATCH)?;
            let opam = Opam::identity();
            let ps = ParamStore::default();
            sides
                .iter()
                .map(|s| Ok(opam.forward(&ps, &m, &patch_features(s, PROBE_PATCH)?)?.consistency))
                .collect::<Result<Vec<_>>>()?
        }
        Probe::Latent => {
            let codec = codec.ok_or_else(|| Error::Input("the latent probe needs weights".into()))?;
            let mut all = vec![main.clone()];
            all.extend(sides.iter().cloned());
            let latents = codec.encode(&all, 255)?.latents;
            codec.model.joint_decoder().stage1_pmifm().consistency_probe(&codec.params, &latents[0], &latents[1..])?
        }
    };
    maps.iter().map(|m| m.reshape(&[m.dim(1), m.dim(2)])).collect()
}

/// Min-max normalized 8-bit rendering; a constant map renders white.
pub fn to_grey(map: &Tensor) -> Vec<u8> {
    let d = map.data();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![255; d.len()];
    }
    d.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes `consistency{j}.pgm` and `consistency{j}.txt` for each side view.
pub fn visualize_files(
    weights: Option<&Path>,
    main: &Path,
    sides: &[PathBuf],
    out_dir: &Path,
    probe: Probe,
) -> Result<Vec<PathBuf>> {
    let codec = weights.map(load_codec).transpose()?;
    let main = read_ppm(main)?;
    let sides = sides.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
    let maps = consistency_maps(codec.as_ref(), &main, &sides, probe)?;
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let mut written = Vec::new();
    for (j, m) in maps.iter().enumerate() {
        let (h, w) = (m.dim(0), m.dim(1));
        let img = out_dir.join(format!("consistency{j}.pgm"));
        write_pgm(&img, w, h, &to_grey(m))?;
        let txt = out_dir.join(format!("consistency{j}.txt"));
        let mut body = String::new();
        for row in m.data().chunks(w) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            body.push_str(&line.join(" "));
            body.push('\n');
        }
        fs::write(&txt, body).map_err(io_at(&txt))?;
        written.push(img);
    }
    Ok(written)
}

/// Writes `scene{s}_view{k}.ppm` for every scene and view.
pub fn gen_data_files(seed: u64, scenes: usize, spec: &SceneSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let data = gen_dataset(seed, scenes, spec)?;
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let mut paths = Vec::new();
    for (s, views) in data.iter().enumerate() {
        for (k, v) in views.iter().enumerate() {
            let p = out_dir.join(format!("scene{s}_view{k}.ppm"));
            write_ppm(&p, v)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grey_normalization() {
        let m = Tensor::new(vec![0.2, 0.4, 0.6], &[1, 3]).unwrap();
        assert_eq!(to_grey(&m), vec![0, 128, 255]);
        assert_eq!(to_grey(&Tensor::full(&[2, 2], 0.3)), vec![255; 4]);
    }

    #[test]
    fn identical_views_give_bright_pixel_map() {
        let views = crate::synthetic::gen_synthetic_views(2, &SceneSpec::new(2, 32, 32, 0)).unwrap();
        let maps = consistency_maps(None, &views[0], &views[1..], Probe::Pixel).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].shape(), &[8, 8]);
        let mean = maps[0].data().iter().sum::<f64>() / 64.0;
        assert!(mean > 0.5, "{mean}");
    }

    #[test]
    fn hash_sees_every_bit() {
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![1.0, f64::from_bits(2f64.to_bits() + 1)], &[2]).unwrap();
        assert_ne!(latent_hash(&a), latent_hash(&b));
    }
}
