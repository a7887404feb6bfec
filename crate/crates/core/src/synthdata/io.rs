use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::numerics::serialize::{read_tensor, write_tensor};
use crate::numerics::Tensor;
use crate::schedule::derive_seed;
use crate::synthdata::puppet::{generate_clip, random_modes, Clip, PuppetSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub modes: Vec<Mode>,
    pub amplitude: Vec<f64>,
    pub phase: f64,
    pub spec: PuppetSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub name: String,
    pub split: String,
    /// SHA-256 over the frames, audio and sidecar files, in that order.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: PuppetSpec,
    pub seed: u64,
    pub clips: Vec<ClipEntry>,
}

impl Manifest {
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clips {
            h.update(c.name.as_bytes());
            h.update(c.split.as_bytes());
            h.update(c.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    Ok(buf)
}

/// Write `<name>.frames.bin`, `<name>.audio.bin` and `<name>.json`.
pub fn write_clip(dir: &Path, name: &str, clip: &Clip, spec: &PuppetSpec) -> Result<String> {
    let frames = tensor_bytes(&clip.frames)?;
    let audio = tensor_bytes(&clip.audio)?;
    let meta = ClipMeta {
        modes: clip.modes.clone(),
        amplitude: clip.amplitude.clone(),
        phase: clip.phase,
        spec: spec.clone(),
        seed: clip.seed,
    };
    let json = serde_json::to_vec_pretty(&meta)?;
    fs::write(dir.join(format!("{name}.frames.bin")), &frames)?;
    fs::write(dir.join(format!("{name}.audio.bin")), &audio)?;
    fs::write(dir.join(format!("{name}.json")), &json)?;
    let mut h = Sha256::new();
    h.update(&frames);
    h.update(&audio);
    h.update(&json);
    Ok(hex::encode(h.finalize()))
}

pub fn read_clip(dir: &Path, name: &str) -> Result<(Clip, PuppetSpec)> {
    let frames = read_tensor(&mut BufReader::new(File::open(dir.join(format!("{name}.frames.bin")))?))?;
    let audio = read_tensor(&mut BufReader::new(File::open(dir.join(format!("{name}.audio.bin")))?))?;
    let meta: ClipMeta = serde_json::from_reader(BufReader::new(File::open(dir.join(format!("{name}.json")))?))?;
    let f = frames.shape()[0];
    if meta.modes.len() != f || meta.amplitude.len() != f || audio.shape()[0] != f {
        return Err(Error::Format(format!("clip `{name}` has inconsistent frame counts")));
    }
    Ok((
        Clip {
            frames,
            audio,
            modes: meta.modes,
            amplitude: meta.amplitude,
            phase: meta.phase,
            seed: meta.seed,
        },
        meta.spec,
    ))
}

/// Dataset generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub clips: usize,
    pub seed: u64,
    /// Probability that a clip contains a Silence run.
    pub silence_prob: f64,
    pub val_fraction: f64,
    pub spec: PuppetSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            clips: 500,
            seed: 0,
            silence_prob: 0.5,
            val_fraction: 0.1,
            spec: PuppetSpec::default(),
        }
    }
}

/// Clips of a dataset, generated in memory.
pub fn generate_clips(cfg: &DatasetConfig) -> Result<Vec<Clip>> {
    cfg.spec.validate()?;
    (0..cfg.clips)
        .map(|i| {
            let s = derive_seed(cfg.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x30DE);
            let modes = random_modes(&mut rng, cfg.spec.frames, cfg.silence_prob, 8.min(cfg.spec.frames));
            generate_clip(&cfg.spec, s, &modes)
        })
        .collect()
}

/// Generate and write a dataset with its `manifest.json`.
pub fn write_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let clips = generate_clips(cfg)?;
    let n_val = ((cfg.clips as f64) * cfg.val_fraction).round() as usize;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}");
        let sha256 = write_clip(dir, &name, clip, &cfg.spec)?;
        let split = if i >= cfg.clips - n_val { "val" } else { "train" };
        entries.push(ClipEntry {
            name,
            split: split.into(),
            sha256,
        });
    }
    let manifest = Manifest {
        spec: cfg.spec.clone(),
        seed: cfg.seed,
        clips: entries,
    };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush()?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let f = File::open(dir.join("manifest.json"))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Load every clip of a split (`None` for all).
pub fn load_dataset(dir: &Path, split: Option<&str>) -> Result<(Manifest, Vec<Clip>)> {
    let m = read_manifest(dir)?;
    let clips = m
        .clips
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| read_clip(dir, &e.name).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_and_checksums() {
        let cfg = DatasetConfig {
            clips: 6,
            seed: 3,
            ..DatasetConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_dataset(a.path(), &cfg).unwrap();
        let mb = write_dataset(b.path(), &cfg).unwrap();
        assert_eq!(ma.checksum(), mb.checksum());
        assert_eq!(ma.clips.len(), 6);
        assert_eq!(ma.clips.iter().filter(|c| c.split == "val").count(), 1);
        let (m, clips) = load_dataset(a.path(), None).unwrap();
        assert_eq!(m, ma);
        assert_eq!(clips, generate_clips(&cfg).unwrap());
    }
}
