//! On-disk dataset layout: `manifest.json` plus `samples.bin`.
//!
//! `samples.bin` starts with the magic `DLDDATA1`; each sample record holds
//! its instances (box, glyph height, token ids) followed by the high-res
//! image tensor as a (rank, dims...) u32 header and little-endian f32 data.
//! Down-sampled variants are reconstructed from the manifest's scale list on
//! read; the area downsampler is deterministic, so a round-trip reproduces
//! every field bit for bit without storing k near-duplicates of each image.

use super::{area_downsample, render_sample, BoxPx, GenConfig, GlyphFont, Instance, SpottingSample};
use crate::error::{Error, Result};
use crate::tensor::Array;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

pub const DATA_MAGIC: &[u8; 8] = b"DLDDATA1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Regeneration {
    pub index: usize,
    pub attempts: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_samples: usize,
    pub scales: Vec<f64>,
    pub alphabet_hash: String,
    /// Byte offset of each sample record in samples.bin, strictly increasing.
    pub offsets: Vec<u64>,
    /// Samples that needed rejection-sampling restarts, with their sub-seed.
    pub regenerations: Vec<Regeneration>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.offsets.len() != self.num_samples {
            return Err(Error::Format(format!(
                "manifest lists {} offsets for {} samples",
                self.offsets.len(),
                self.num_samples
            )));
        }
        if !self.offsets.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Format("manifest offsets are not strictly increasing".into()));
        }
        if !self.scales.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Format("manifest scales are not strictly increasing".into()));
        }
        Ok(())
    }

    /// Hash of the manifest's canonical JSON bytes; printed by data
    /// generation and compared by reproducibility checks.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("manifest serializes");
        crate::checkpoint::hex_string(&Sha256::digest(&json))
    }
}

/// Generate `count` samples with per-sample seeds derived from the root seed
/// and a split tag ("train" or "eval").
pub fn generate_split(config: &GenConfig, split: &str, count: usize) -> Result<Vec<SpottingSample>> {
    use rayon::prelude::*;
    let seeds: Vec<u64> = (0..count)
        .map(|i| crate::rng::splitmix64(config.seed ^ crate::rng::splitmix64(split_tag(split) ^ i as u64)))
        .collect();
    seeds.par_iter().map(|&s| render_sample(s, config)).collect()
}

fn split_tag(split: &str) -> u64 {
    let mut h: u64 = 0x51_7cc1b727220a95;
    for b in split.as_bytes() {
        h = h.rotate_left(5) ^ (*b as u64);
        h = h.wrapping_mul(0x2545f4914f6cdd1d);
    }
    h
}

pub fn write_dataset(samples: &[SpottingSample], config: &GenConfig, dir: &Path) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(Error::Contract("write_dataset requires a non-empty sample list".into()));
    }
    std::fs::create_dir_all(dir)?;
    let bin_path = dir.join("samples.bin");
    let mut w = BufWriter::new(File::create(&bin_path)?);
    w.write_all(DATA_MAGIC)?;
    let mut cursor = DATA_MAGIC.len() as u64;
    let mut offsets = Vec::with_capacity(samples.len());
    let mut regenerations = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        offsets.push(cursor);
        cursor += write_sample(&mut w, s)?;
        if s.regen_attempts > 0 {
            regenerations.push(Regeneration { index: i, attempts: s.regen_attempts });
        }
    }
    w.flush()?;

    let manifest = DatasetManifest {
        seed: config.seed,
        num_samples: samples.len(),
        scales: config.scales.clone(),
        alphabet_hash: GlyphFont::default().alphabet_hash(),
        offsets,
        regenerations,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

fn write_sample(w: &mut impl Write, s: &SpottingSample) -> Result<u64> {
    let mut bytes: u64 = 0;
    let put = |w: &mut dyn Write, b: &[u8], n: &mut u64| -> Result<()> {
        w.write_all(b)?;
        *n += b.len() as u64;
        Ok(())
    };
    put(w, &(s.instances.len() as u32).to_le_bytes(), &mut bytes)?;
    put(w, &s.regen_attempts.to_le_bytes(), &mut bytes)?;
    for inst in &s.instances {
        for v in [inst.box_px.x, inst.box_px.y, inst.box_px.w, inst.box_px.h, inst.glyph_height] {
            put(w, &v.to_le_bytes(), &mut bytes)?;
        }
        put(w, &(inst.text.len() as u32).to_le_bytes(), &mut bytes)?;
        for &t in &inst.text {
            put(w, &(t as u32).to_le_bytes(), &mut bytes)?;
        }
    }
    put(w, &(s.image_hi.shape.len() as u32).to_le_bytes(), &mut bytes)?;
    for &d in &s.image_hi.shape {
        put(w, &(d as u32).to_le_bytes(), &mut bytes)?;
    }
    for &v in s.image_hi.data.iter() {
        put(w, &v.to_le_bytes(), &mut bytes)?;
    }
    Ok(bytes)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SpottingSample>)> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    manifest.validate()?;
    if manifest.alphabet_hash != GlyphFont::default().alphabet_hash() {
        return Err(Error::Format("dataset was generated with a different alphabet/font".into()));
    }

    let mut r = BufReader::new(File::open(dir.join("samples.bin"))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::Format(format!("samples.bin magic: {e}")))?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format(format!("bad samples.bin magic {magic:?}")));
    }

    let mut samples = Vec::with_capacity(manifest.num_samples);
    for (i, &off) in manifest.offsets.iter().enumerate() {
        r.seek(SeekFrom::Start(off)).map_err(|e| Error::Format(format!("sample {i}: seek failed: {e}")))?;
        samples.push(read_sample(&mut r, i, &manifest.scales)?);
    }
    Ok((manifest, samples))
}

fn read_sample(r: &mut impl Read, index: usize, scales: &[f64]) -> Result<SpottingSample> {
    let ctx = |what: &str| format!("sample record {index}: {what}");
    let n_inst = read_u32(r, &ctx("instance count"))? as usize;
    if n_inst > 64 {
        return Err(Error::Format(ctx(&format!("implausible instance count {n_inst}"))));
    }
    let regen_attempts = read_u32(r, &ctx("regen attempts"))?;
    let mut instances = Vec::with_capacity(n_inst);
    for _ in 0..n_inst {
        let x = read_u32(r, &ctx("box"))?;
        let y = read_u32(r, &ctx("box"))?;
        let w = read_u32(r, &ctx("box"))?;
        let h = read_u32(r, &ctx("box"))?;
        let glyph_height = read_u32(r, &ctx("glyph height"))?;
        let len = read_u32(r, &ctx("text length"))? as usize;
        if len > 64 {
            return Err(Error::Format(ctx(&format!("implausible text length {len}"))));
        }
        let mut text = Vec::with_capacity(len);
        for _ in 0..len {
            let t = read_u32(r, &ctx("token"))? as usize;
            if t >= super::ALPHABET_LEN {
                return Err(Error::Format(ctx(&format!("reserved or invalid token id {t}"))));
            }
            text.push(t);
        }
        instances.push(Instance { box_px: BoxPx { x, y, w, h }, text, glyph_height });
    }
    let rank = read_u32(r, &ctx("image rank"))? as usize;
    if rank != 3 {
        return Err(Error::Format(ctx(&format!("image rank {rank}, expected 3"))));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, &ctx("image dims"))? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::Format(ctx(&format!("image data: {e}"))))?;
    let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let image_hi = Array::new(data, shape);
    let images_lo = scales.iter().map(|&s| area_downsample(&image_hi, s)).collect::<Result<Vec<_>>>()?;
    Ok(SpottingSample { image_hi, instances, images_lo, regen_attempts })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated dataset while reading {what}: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig { num_samples: 6, scales: vec![0.4, 0.7], ..GenConfig::default() }
    }

    #[test]
    fn roundtrip_is_lossless() {
        let config = small_config();
        let samples = generate_split(&config, "train", 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&samples, &config, dir.path()).unwrap();
        let (m2, loaded) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest.hash(), m2.hash());
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.image_hi.data, b.image_hi.data);
            assert_eq!(a.instances.len(), b.instances.len());
            for (x, y) in a.instances.iter().zip(&b.instances) {
                assert_eq!(x.box_px, y.box_px);
                assert_eq!(x.text, y.text);
                assert_eq!(x.glyph_height, y.glyph_height);
            }
            for (x, y) in a.images_lo.iter().zip(&b.images_lo) {
                assert_eq!(x.data, y.data);
            }
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let config = small_config();
        let samples = generate_split(&config, "train", 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, &config, dir.path()).unwrap();
        let bin = dir.path().join("samples.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format(msg)) => assert!(msg.contains("sample record"), "{msg}"),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn reordered_scales_are_rejected() {
        let config = small_config();
        let samples = generate_split(&config, "train", 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, &config, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let json = std::fs::read_to_string(&mpath).unwrap();
        let mut m: DatasetManifest = serde_json::from_str(&json).unwrap();
        m.scales.reverse();
        std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn generation_is_reproducible_across_runs() {
        let config = small_config();
        let a = generate_split(&config, "train", 6).unwrap();
        let b = generate_split(&config, "train", 6).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ma = write_dataset(&a, &config, dir_a.path()).unwrap();
        let mb = write_dataset(&b, &config, dir_b.path()).unwrap();
        assert_eq!(ma.hash(), mb.hash());
        let ha = crate::checkpoint::file_sha256(&dir_a.path().join("samples.bin")).unwrap();
        let hb = crate::checkpoint::file_sha256(&dir_b.path().join("samples.bin")).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn empty_write_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_dataset(&[], &small_config(), dir.path()),
            Err(Error::Contract(_))
        ));
    }
}
