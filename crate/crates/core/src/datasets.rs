//! Aligned reference/query pairs and seeded query sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image_with, GrayImage, PixelPos, PreprocessConfig};

/// Smallest overlap side accepted after applying a manifest offset.
pub const MIN_OVERLAP: usize = 3;

/// Reference and query maps of the same area, pixel-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub name: String,
    pub reference: GrayImage,
    pub query: GrayImage,
    /// Offset declared by the source; the stored maps are already cropped
    /// to the overlap, so query pixel `(x, y)` is reference pixel `(x, y)`.
    pub offset: (i64, i64),
    pub provenance: String,
}

impl AlignedPair {
    pub fn width(&self) -> usize {
        self.reference.width().min(self.query.width())
    }

    pub fn height(&self) -> usize {
        self.reference.height().min(self.query.height())
    }

    /// Number of centers admitting a patch of `radius` in both maps.
    pub fn admissible_count(&self, radius: usize) -> usize {
        let side = 2 * radius + 1;
        if side > self.width() || side > self.height() {
            0
        } else {
            (self.width() - 2 * radius) * (self.height() - 2 * radius)
        }
    }
}

/// On-disk description of a pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub reference: PathBuf,
    pub query: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<[i64; 2]>,
    pub preprocess: PreprocessConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let malformed = |reason: String| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| malformed(e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    manifest.preprocess.validate().map_err(|e| malformed(e.to_string()))?;
    Ok(manifest)
}

/// Loads both maps named by a manifest, crops them to their overlap and
/// applies the manifest's preprocessing. Relative image paths resolve
/// against the manifest's directory.
///
/// The offset `[dx, dy]` says query pixel `(x, y)` shows reference pixel
/// `(x + dx, y + dy)`; it is applied before resampling.
pub fn load_pair(manifest_path: impl AsRef<Path>) -> Result<AlignedPair> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let convert = manifest.preprocess.convert_grayscale;
    let reference = load_image_with(resolve(&manifest.reference), convert)?;
    let query = load_image_with(resolve(&manifest.query), convert)?;

    let [dx, dy] = manifest.offset.unwrap_or([0, 0]);
    let (reference, query) = crop_to_overlap(&reference, &query, dx, dy)?;

    Ok(AlignedPair {
        name: manifest.name.clone(),
        reference: manifest.preprocess.apply(&reference)?,
        query: manifest.preprocess.apply(&query)?,
        offset: (dx, dy),
        provenance: manifest.notes.clone().unwrap_or_default(),
    })
}

fn crop_to_overlap(reference: &GrayImage, query: &GrayImage, dx: i64, dy: i64) -> Result<(GrayImage, GrayImage)> {
    let span = |ref_len: usize, query_len: usize, d: i64| {
        let lo = d.max(0);
        let hi = (ref_len as i64).min(query_len as i64 + d);
        (lo, hi - lo)
    };
    let (rx, ow) = span(reference.width(), query.width(), dx);
    let (ry, oh) = span(reference.height(), query.height(), dy);
    if ow < MIN_OVERLAP as i64 || oh < MIN_OVERLAP as i64 {
        return Err(Error::Geometry(format!(
            "offset ({dx}, {dy}) leaves a {}x{} overlap",
            ow.max(0),
            oh.max(0)
        )));
    }
    let (ow, oh) = (ow as usize, oh as usize);
    Ok((
        reference.crop(rx as usize, ry as usize, ow, oh)?,
        query.crop((rx - dx) as usize, (ry - dy) as usize, ow, oh)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePurpose {
    Calibration,
    Validation,
}

/// Query centers drawn for one radius.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub centers: Vec<PixelPos>,
    pub seed: u64,
    pub radius: usize,
    pub purpose: SamplePurpose,
}

/// Draws `n` distinct centers admitting a patch of `radius` in both maps.
///
/// One permutation of the admissible centers is derived from
/// `(seed, radius)`; calibration plans read it from the front and
/// validation plans from the back, so the two are disjoint whenever their
/// sizes sum to at most the number of admissible centers.
pub fn plan_samples(
    pair: &AlignedPair,
    radius: usize,
    n: usize,
    seed: u64,
    purpose: SamplePurpose,
) -> Result<SamplePlan> {
    let count = pair.admissible_count(radius);
    if n > count {
        return Err(Error::Geometry(format!(
            "{n} samples requested but only {count} centers admit radius {radius} in a {}x{} pair",
            pair.width(),
            pair.height()
        )));
    }
    let cols = pair.width() - 2 * radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(radius as u64);
    let mut order: Vec<u32> = (0..count as u32).collect();
    for i in 0..count.saturating_sub(1) {
        let j = rng.gen_range(i..count);
        order.swap(i, j);
    }
    let picked: Box<dyn Iterator<Item = &u32>> = match purpose {
        SamplePurpose::Calibration => Box::new(order.iter()),
        SamplePurpose::Validation => Box::new(order.iter().rev()),
    };
    let centers = picked
        .take(n)
        .map(|&k| {
            let k = k as usize;
            PixelPos::new(k % cols + radius, k / cols + radius)
        })
        .collect();
    Ok(SamplePlan {
        centers,
        seed,
        radius,
        purpose,
    })
}
