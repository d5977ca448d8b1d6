use super::image::load_image;
use super::manifest::DatasetManifest;
use crate::adapters::FeatureSet;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vit::{encode_batch, write_atomic, EncoderOutput, ViTConfig};
use std::path::Path;

pub const FEATURE_MAGIC: &[u8; 8] = b"XRSSFEAT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub cls: Vec<f32>,
    /// Row-major `[rows, cols, patch_dim]`.
    pub patches: Vec<f32>,
}

/// Cached encoder outputs stored as 32-bit floats.
///
/// Layout (little-endian): magic `XRSSFEAT`, `u32` version, `u64` count,
/// `u32` cls dim, `u32` grid rows, `u32` grid cols, `u32` patch dim; then
/// per record a `u32` id length, the UTF-8 id, the CLS vector and the
/// patch grid as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub cls_dim: usize,
    pub grid: (usize, usize),
    pub patch_dim: usize,
    pub records: Vec<FeatureRecord>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated feature cache"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "record too large"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl FeatureCache {
    pub fn new(cls_dim: usize, grid: (usize, usize), patch_dim: usize) -> Self {
        FeatureCache { cls_dim, grid, patch_dim, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push_output(&mut self, id: impl Into<String>, out: &EncoderOutput) -> Result<()> {
        if out.cls.len() != self.cls_dim || out.grid() != self.grid || out.dim() != self.patch_dim {
            return Err(Error::shape("feature_cache", "encoder output does not match the cache header"));
        }
        self.records.push(FeatureRecord {
            id: id.into(),
            cls: out.cls.iter().map(|&v| v as f32).collect(),
            patches: out.patches.data().iter().map(|&v| v as f32).collect(),
        });
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(FEATURE_MAGIC);
        b.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for v in [self.cls_dim, self.grid.0, self.grid.1, self.patch_dim] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for r in &self.records {
            b.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
            b.extend_from_slice(r.id.as_bytes());
            r.cls.iter().chain(&r.patches).for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0, path };
        if c.take(8).ok() != Some(FEATURE_MAGIC.as_slice()) {
            return Err(Error::format(path, "bad magic; not a feature cache"));
        }
        let version = c.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::format(path, format!("unsupported feature cache version {}", version)));
        }
        let count = c.u64()? as usize;
        let cls_dim = c.u32()? as usize;
        let grid = (c.u32()? as usize, c.u32()? as usize);
        let patch_dim = c.u32()? as usize;
        let per = grid.0 * grid.1 * patch_dim;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = c.u32()? as usize;
            let id = std::str::from_utf8(c.take(n)?).map_err(|_| Error::format(path, "record id is not UTF-8"))?.to_string();
            let cls = c.f32s(cls_dim)?;
            let patches = c.f32s(per)?;
            records.push(FeatureRecord { id, cls, patches });
        }
        if c.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last record"));
        }
        Ok(FeatureCache { cls_dim, grid, patch_dim, records })
    }

    /// Written to a temporary sibling first and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Records `idx` promoted to 64-bit.
    pub fn feature_set(&self, idx: &[usize]) -> Result<FeatureSet> {
        let p = self.grid.0 * self.grid.1;
        let mut cls = Vec::with_capacity(idx.len() * self.cls_dim);
        let mut tokens = Vec::with_capacity(idx.len() * p * self.patch_dim);
        for &i in idx {
            let r = self.records.get(i).ok_or_else(|| Error::invalid(format!("record {} out of range", i)))?;
            cls.extend(r.cls.iter().map(|&v| v as f64));
            tokens.extend(r.patches.iter().map(|&v| v as f64));
        }
        Ok(FeatureSet {
            cls: Tensor::new([idx.len(), self.cls_dim], cls)?,
            tokens: Tensor::new([idx.len(), p, self.patch_dim], tokens)?,
            grid: self.grid,
        })
    }

    pub fn all(&self) -> Result<FeatureSet> {
        self.feature_set(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Encodes every manifest image once at `resolution × resolution`
/// (bilinear resize when needed). Record ids are the manifest image paths.
/// Images are split across worker threads; records keep manifest order.
pub fn extract_features(
    cfg: &ViTConfig,
    backbone: &ParamStore,
    manifest: &DatasetManifest,
    resolution: usize,
) -> Result<FeatureCache> {
    if resolution == 0 || resolution % cfg.patch_size != 0 {
        return Err(Error::invalid(format!(
            "resolution {} is not a positive multiple of the patch size {}",
            resolution, cfg.patch_size
        )));
    }
    let g = resolution / cfg.patch_size;
    let encode_rows = |rows: &[super::manifest::ManifestRow]| -> Result<Vec<EncoderOutput>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(16) {
            let images = chunk
                .iter()
                .map(|r| {
                    let img = load_image(&r.image)?;
                    Ok(if img.width() == resolution && img.height() == resolution {
                        img
                    } else {
                        img.resize_bilinear(resolution, resolution)?
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = images.iter().collect();
            out.extend(encode_batch(&refs, cfg, backbone)?);
        }
        Ok(out)
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(manifest.len().max(1));
    let share = manifest.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<EncoderOutput>>> = std::thread::scope(|s| {
        let handles: Vec<_> = manifest.rows.chunks(share).map(|rows| s.spawn(move || encode_rows(rows))).collect();
        handles.into_iter().map(|h| h.join().expect("encoder worker panicked")).collect()
    });
    let mut cache = FeatureCache::new(cfg.embed_dim, (g, g), cfg.embed_dim);
    let outputs = parts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten();
    for (r, out) in manifest.rows.iter().zip(outputs) {
        cache.push_output(r.id(), &out)?;
    }
    Ok(cache)
}
