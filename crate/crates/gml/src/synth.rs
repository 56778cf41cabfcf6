//! Seeded synthetic segmentation data with controllable site heterogeneity.
//!
//! Each site draws elliptical "tumor" blobs onto a flat background, offsets
//! them by a site-specific intensity, scales by a site contrast factor, and
//! adds Gaussian noise. Masks are the exact blob geometry (noise-free).
//! Images are standardized per case to zero mean and unit variance. Distinct
//! site profiles produce measurably different intensity marginals, which is
//! the non-IID property the protocol experiments rely on.
//!
//! Datasets serialize to the little-endian `GMLD` container; the round trip
//! is bitwise exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GmlError, Result};
use crate::grid::{Grid, MaskGrid};
use crate::rng::Rng;

/// Generation profile for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteGenSpec {
    pub site_id: String,
    pub n_cases: usize,
    /// Semi-axis range `[min, max]` in cells; both axes drawn independently.
    pub blob_radius_range: [f64; 2],
    /// Additive intensity of tumor cells before contrast scaling.
    pub tumor_intensity: f64,
    pub background_noise_sigma: f64,
    #[serde(default = "default_contrast")]
    pub contrast_scale: f64,
    /// Probability that a case carries no tumor at all.
    #[serde(default)]
    pub tumor_free_fraction: f64,
}

fn default_contrast() -> f64 {
    1.0
}

impl SiteGenSpec {
    /// Checks the spec against the target image extent.
    pub fn validate(&self, image_extent: usize) -> Result<()> {
        let invalid = |reason: String| GmlError::InvalidSpec {
            site: self.site_id.clone(),
            reason,
        };
        if self.site_id.is_empty() {
            return Err(invalid("site_id must be non-empty".into()));
        }
        if self.n_cases == 0 {
            return Err(invalid("n_cases must be >= 1".into()));
        }
        if image_extent < 8 {
            return Err(invalid(format!(
                "image_extent must be >= 8, got {image_extent}"
            )));
        }
        let [lo, hi] = self.blob_radius_range;
        if !(lo > 0.0 && lo <= hi && hi < image_extent as f64 / 2.0) {
            return Err(invalid(format!(
                "blob radius range [{lo}, {hi}] must satisfy 0 < min <= max < extent/2 = {}",
                image_extent as f64 / 2.0
            )));
        }
        if self.background_noise_sigma < 0.0 {
            return Err(invalid("background_noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.tumor_free_fraction) {
            return Err(invalid("tumor_free_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One labeled case.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub image: Grid,
    pub mask: MaskGrid,
}

/// All cases of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub site_id: String,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

/// Train/val/test fractions; must be non-negative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| GmlError::SplitTooSmall(reason.to_string());
        if self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(bad("split ratios must be non-negative"));
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(bad("split ratios must sum to 1"));
        }
        Ok(())
    }
}

/// Generates `spec.n_cases` square cases of side `image_extent`.
///
/// Per case, in a fixed draw order for determinism: the tumor-free coin,
/// then (for tumor cases) the two semi-axes, the two center coordinates,
/// then one Gaussian noise draw per cell in row-major order. The mask is the
/// inclusive ellipse test on cell centers, evaluated before any noise, so
/// masks are exact.
pub fn generate_site(spec: &SiteGenSpec, image_extent: usize, rng: &mut Rng) -> Result<Dataset> {
    spec.validate(image_extent)?;
    let e = image_extent;
    let ef = e as f64;
    let [r_lo, r_hi] = spec.blob_radius_range;
    let mut cases = Vec::with_capacity(spec.n_cases);
    for i in 0..spec.n_cases {
        let tumor_free = rng.bernoulli(spec.tumor_free_fraction);
        let mut mask = Grid::zeros(&[e, e])?;
        if !tumor_free {
            let ay = rng.uniform_in(r_lo, r_hi);
            let ax = rng.uniform_in(r_lo, r_hi);
            let cy = rng.uniform_in(ay, ef - ay);
            let cx = rng.uniform_in(ax, ef - ax);
            for y in 0..e {
                for x in 0..e {
                    let dy = (y as f64 + 0.5 - cy) / ay;
                    let dx = (x as f64 + 0.5 - cx) / ax;
                    if dy * dy + dx * dx <= 1.0 {
                        mask[y * e + x] = 1.0;
                    }
                }
            }
        }
        let mut image = Grid::zeros(&[e, e])?;
        for idx in 0..e * e {
            let noise = spec.background_noise_sigma * rng.normal();
            image[idx] = spec.contrast_scale * (spec.tumor_intensity * mask[idx]) + noise;
        }
        standardize(&mut image);
        cases.push(Case {
            case_id: format!("{}-{:03}", spec.site_id, i),
            image,
            mask,
        });
    }
    Ok(Dataset {
        site_id: spec.site_id.clone(),
        cases,
    })
}

/// Shifts/scales to zero mean and unit variance; a flat image stays centered.
fn standardize(image: &mut Grid) {
    let n = image.len() as f64;
    let mean = image.sum() / n;
    let var = image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        for v in image.data_mut() {
            *v -= mean;
        }
    } else {
        for v in image.data_mut() {
            *v = (*v - mean) / std;
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Random disjoint, exhaustive partition into train/val/test.
///
/// Sizes: `round_half_up(train*n)` and `round_half_up(val*n)`, test takes the
/// remainder; if the rounded sizes oversubscribe, the excess comes out of
/// train. Every partition must end up non-empty.
pub fn split_dataset(
    d: &Dataset,
    r: &SplitRatios,
    rng: &mut Rng,
) -> Result<(Dataset, Dataset, Dataset)> {
    r.validate()?;
    let n = d.len();
    if n < 3 {
        return Err(GmlError::SplitTooSmall(format!(
            "site {} has {n} cases; need at least 3 to split",
            d.site_id
        )));
    }
    let mut n_train = round_half_up(r.train * n as f64);
    let n_val = round_half_up(r.val * n as f64);
    if n_train + n_val > n {
        n_train = n - n_val;
    }
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(GmlError::SplitTooSmall(format!(
            "site {}: split sizes ({n_train}, {n_val}, {n_test}) of {n} leave a partition empty",
            d.site_id
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let take = |ix: &[usize]| Dataset {
        site_id: d.site_id.clone(),
        cases: ix.iter().map(|&i| d.cases[i].clone()).collect(),
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}

const DATASET_MAGIC: &[u8; 4] = b"GMLD";
const DATASET_VERSION: u16 = 1;

/// Serializes a dataset to the `GMLD` byte format.
///
/// All cases must share one shape (it is stored once in the header) and all
/// masks must be strictly binary (they are stored as one byte per cell).
pub fn dataset_to_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let shape = match d.cases.first() {
        Some(c) => c.image.shape().to_vec(),
        None => return Err(GmlError::NoData),
    };
    if d.site_id.len() > usize::from(u16::MAX) || d.cases.len() > u32::MAX as usize {
        return Err(GmlError::InvalidShape("dataset too large for format".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.site_id.len() as u16).to_le_bytes());
    buf.extend_from_slice(d.site_id.as_bytes());
    buf.extend_from_slice(&(d.cases.len() as u32).to_le_bytes());
    buf.push(shape.len() as u8);
    for &ext in &shape {
        buf.extend_from_slice(&(ext as u32).to_le_bytes());
    }
    for c in &d.cases {
        if c.image.shape() != shape.as_slice() {
            return Err(GmlError::ShapeMismatch(format!(
                "case {} shape {:?} differs from dataset shape {shape:?}",
                c.case_id,
                c.image.shape()
            )));
        }
        if !c.image.same_shape(&c.mask) {
            return Err(GmlError::ShapeMismatch(format!(
                "case {}: image and mask shapes differ",
                c.case_id
            )));
        }
        if !c.mask.is_binary() {
            return Err(GmlError::NotBinary(format!("mask of case {}", c.case_id)));
        }
        buf.extend_from_slice(&(c.case_id.len() as u16).to_le_bytes());
        buf.extend_from_slice(c.case_id.as_bytes());
        for &v in c.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &m in c.mask.data() {
            buf.push(m as u8);
        }
    }
    Ok(buf)
}

/// Parses the `GMLD` byte format back into a [`Dataset`].
pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let corrupt = |why: &str| GmlError::CorruptDataset(why.to_string());
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(corrupt("truncated file"));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    if take(4)? != DATASET_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(GmlError::CorruptDataset(format!(
            "unsupported version {version}"
        )));
    }
    let id_len = usize::from(u16::from_le_bytes(take(2)?.try_into().unwrap()));
    let site_id = std::str::from_utf8(take(id_len)?)
        .map_err(|_| corrupt("site_id is not UTF-8"))?
        .to_string();
    let n_cases = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let rank = usize::from(take(1)?[0]);
    if rank == 0 || rank > 4 {
        return Err(corrupt("implausible rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
    }
    if shape.contains(&0) {
        return Err(corrupt("zero extent"));
    }
    let cells: usize = shape.iter().product();
    let mut cases = Vec::with_capacity(n_cases);
    for _ in 0..n_cases {
        let id_len = usize::from(u16::from_le_bytes(take(2)?.try_into().unwrap()));
        let case_id = std::str::from_utf8(take(id_len)?)
            .map_err(|_| corrupt("case_id is not UTF-8"))?
            .to_string();
        let mut image = Vec::with_capacity(cells);
        for chunk in take(8 * cells)?.chunks_exact(8) {
            image.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut mask = Vec::with_capacity(cells);
        for &b in take(cells)? {
            if b > 1 {
                return Err(corrupt("mask byte outside {0, 1}"));
            }
            mask.push(f64::from(b));
        }
        cases.push(Case {
            case_id,
            image: Grid::from_vec(&shape, image)?,
            mask: Grid::from_vec(&shape, mask)?,
        });
    }
    if at != bytes.len() {
        return Err(corrupt("trailing bytes after last case"));
    }
    Ok(Dataset { site_id, cases })
}

/// Writes a dataset file; see [`dataset_to_bytes`] for the format.
pub fn dataset_write(d: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset_to_bytes(d)?;
    std::fs::write(path, bytes).map_err(|e| GmlError::io(path, e))
}

/// Reads a dataset file written by [`dataset_write`].
pub fn dataset_read(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| GmlError::io(path, e))?;
    dataset_from_bytes(&bytes)
}
