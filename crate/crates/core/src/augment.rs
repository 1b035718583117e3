//! Synthetic lesion compositing and geometric augmentation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{standardize, write_tensor, CtSlice, DType};
use crate::error::{Error, Result};
use crate::metrics::infection_rate;
use crate::tensor::Tensor;

/// Synthetic pairs must have an infection rate strictly above this.
pub const MIN_SYNTHETIC_RATE: f64 = 0.01;

/// `(x - mean) / std` with the population standard deviation.
pub fn normalize(image: &Tensor) -> Result<Tensor> {
    standardize(image)
}

/// Inputs to [`composite`]. Images are expected to be normalized already.
#[derive(Clone, Copy, Debug)]
pub struct CompositeInputs<'a> {
    pub infected_image: &'a Tensor,
    pub infection_mask: &'a Tensor,
    pub healthy_image: &'a Tensor,
    pub healthy_lung_mask: &'a Tensor,
}

impl CompositeInputs<'_> {
    fn validate(&self) -> Result<()> {
        let shape = self.healthy_image.shape();
        if shape.len() != 2 {
            return Err(Error::validation(format!(
                "composite inputs must be (H,W), got {shape:?}"
            )));
        }
        for t in [self.infected_image, self.infection_mask, self.healthy_lung_mask] {
            if t.shape() != shape {
                return Err(Error::validation(format!(
                    "composite input shapes differ: {:?} vs {shape:?}",
                    t.shape()
                )));
            }
        }
        if !self.infection_mask.is_binary() || !self.healthy_lung_mask.is_binary() {
            return Err(Error::validation("composite masks must be binary"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub image: Tensor,
    pub mask: Tensor,
    /// Lesion area over the healthy lung area.
    pub infection_rate: f64,
}

/// Inserts the infected slice's lesions into the healthy slice's lungs.
///
/// The lesion keeps its pixel coordinates; the parts falling outside the
/// healthy lung are trimmed and everything outside that lung is zeroed.
pub fn composite(inputs: &CompositeInputs<'_>) -> Result<SyntheticPair> {
    inputs.validate()?;
    let lung = inputs.healthy_lung_mask.data();
    let inf = inputs.infection_mask.data();
    let healthy = inputs.healthy_image.data();
    let infected = inputs.infected_image.data();
    let shape = inputs.healthy_image.shape().to_vec();

    let mut image = vec![0.0f32; lung.len()];
    let mut mask = vec![0.0f32; lung.len()];
    for i in 0..lung.len() {
        if lung[i] == 0.0 {
            continue;
        }
        if inf[i] != 0.0 {
            image[i] = infected[i];
            mask[i] = 1.0;
        } else {
            image[i] = healthy[i];
        }
    }
    let mask = Tensor::new(shape.clone(), mask)?;
    let rate = infection_rate(&mask, inputs.healthy_lung_mask)?;
    Ok(SyntheticPair {
        image: Tensor::new(shape, image)?,
        mask,
        infection_rate: rate,
    })
}

/// Whether a synthetic pair carries enough lesion to be kept.
pub fn filter_synthetic(pair: &SyntheticPair, min_rate: f64) -> bool {
    pair.infection_rate > min_rate
}

/// Sampling ranges for [`AffineParams::sample`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRanges {
    pub zoom_min: f64,
    pub zoom_max: f64,
    /// Maximum shift as a fraction of the image side.
    pub shift_fraction: f64,
    pub shear_degrees: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            zoom_min: 0.9,
            zoom_max: 1.1,
            shift_fraction: 0.05,
            shear_degrees: 5.0,
        }
    }
}

impl AffineRanges {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.zoom_min > 0.0 && self.zoom_min <= self.zoom_max && self.zoom_max.is_finite()) {
            out.push(format!("{prefix}.zoom_min/zoom_max: need 0 < zoom_min <= zoom_max"));
        }
        if !(0.0..0.5).contains(&self.shift_fraction) {
            out.push(format!("{prefix}.shift_fraction: must be in [0, 0.5)"));
        }
        if !(0.0..45.0).contains(&self.shear_degrees) {
            out.push(format!("{prefix}.shear_degrees: must be in [0, 45)"));
        }
        out
    }
}

/// One geometric transform about the image centre. Shifts are in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub zoom: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear_degrees: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        zoom: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
        shear_degrees: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(ranges: &AffineRanges, height: usize, width: usize, rng: &mut R) -> Self {
        let zoom = if ranges.zoom_max > ranges.zoom_min {
            rng.gen_range(ranges.zoom_min..=ranges.zoom_max)
        } else {
            ranges.zoom_min
        };
        let mut sym = |limit: f64| {
            if limit > 0.0 {
                rng.gen_range(-limit..=limit)
            } else {
                0.0
            }
        };
        let shift_x = sym(ranges.shift_fraction * width as f64);
        let shift_y = sym(ranges.shift_fraction * height as f64);
        let shear_degrees = sym(ranges.shear_degrees);
        Self {
            zoom,
            shift_x,
            shift_y,
            shear_degrees,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Maps an output pixel to its source coordinate `(y, x)`.
    fn source(&self, y: usize, x: usize, cy: f64, cx: f64) -> (f64, f64) {
        // forward: out = zoom * [[1, t], [0, 1]] (src - c) + c + shift
        let t = self.shear_degrees.to_radians().tan();
        let v = (y as f64 - cy - self.shift_y) / self.zoom;
        let u = (x as f64 - cx - self.shift_x) / self.zoom;
        (v + cy, u - t * v + cx)
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> Option<f32> {
    const EDGE: f64 = 1e-9;
    if sy < -EDGE || sx < -EDGE || sy > (h - 1) as f64 + EDGE || sx > (w - 1) as f64 + EDGE {
        return None;
    }
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| f64::from(plane[y * w + x]);
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    Some((top * (1.0 - fy) + bottom * fy) as f32)
}

fn nearest(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> Option<f32> {
    let (ry, rx) = (sy.round(), sx.round());
    if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
        return None;
    }
    Some(plane[ry as usize * w + rx as usize])
}

/// Applies the same transform to an image (bilinear) and its mask (nearest
/// neighbour). Uncovered image pixels take the image minimum, uncovered
/// mask pixels are 0. Accepts `(H, W)` or `(1, H, W)`.
pub fn affine_augment(image: &Tensor, mask: &Tensor, params: &AffineParams) -> Result<(Tensor, Tensor)> {
    if image.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "image {:?} and mask {:?} differ",
            image.shape(),
            mask.shape()
        )));
    }
    let (h, w) = match image.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        other => return Err(Error::shape(format!("expected (H,W) or (1,H,W), got {other:?}"))),
    };
    if params.is_identity() || image.is_empty() {
        return Ok((image.clone(), mask.clone()));
    }
    if !(params.zoom > 0.0) {
        return Err(Error::Parameter(format!("zoom must be positive, got {}", params.zoom)));
    }
    let fill = image.data().iter().copied().fold(f32::INFINITY, f32::min);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out_img = vec![fill; h * w];
    let mut out_mask = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = params.source(y, x, cy, cx);
            if let Some(v) = bilinear(image.data(), h, w, sy, sx) {
                out_img[y * w + x] = v;
            }
            if let Some(m) = nearest(mask.data(), h, w, sy, sx) {
                out_mask[y * w + x] = if m >= 0.5 { 1.0 } else { 0.0 };
            }
        }
    }
    Ok((
        Tensor::new(image.shape().to_vec(), out_img)?,
        Tensor::new(mask.shape().to_vec(), out_mask)?,
    ))
}

/// A kept synthetic pair with the slices it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub pair: SyntheticPair,
    /// Healthy lung mask the pair was trimmed against.
    pub lung_mask: Tensor,
    pub infected: (String, String),
    pub healthy: (String, String),
    /// Output index; the generator for this entry is seeded by
    /// `(seed, index)`.
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub min_rate: f64,
    pub entries: Vec<CorpusEntry>,
    /// Requested samples for which no pairing passed the rate filter.
    pub shortfall: usize,
}

struct Prepared<'a> {
    slice: &'a CtSlice,
    image: Tensor,
}

fn prepare<'a>(slices: &'a [CtSlice], need_infection: bool) -> Result<Vec<Prepared<'a>>> {
    slices
        .iter()
        .map(|s| {
            s.validate()?;
            if need_infection && s.infection_mask.is_none() {
                return Err(Error::validation(format!(
                    "{}/{}: infected slice has no infection mask",
                    s.patient_id, s.slice_id
                )));
            }
            if !need_infection && !s.has_lung() {
                return Err(Error::validation(format!(
                    "{}/{}: healthy slice has an empty lung mask",
                    s.patient_id, s.slice_id
                )));
            }
            Ok(Prepared {
                slice: s,
                image: normalize(&s.image)?,
            })
        })
        .collect()
}

/// Per-sample generator; independent of how many samples precede it.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Builds up to `count` synthetic pairs. Each sample draws an infected
/// slice uniformly, then tries healthy partners in a random order until one
/// yields a rate above `min_rate`.
pub fn generate_corpus(
    infected: &[CtSlice],
    healthy: &[CtSlice],
    count: usize,
    seed: u64,
    min_rate: f64,
) -> Result<Corpus> {
    let mut corpus = Corpus {
        seed,
        min_rate,
        entries: Vec::with_capacity(count),
        shortfall: 0,
    };
    if count == 0 {
        return Ok(corpus);
    }
    if infected.is_empty() || healthy.is_empty() {
        return Err(Error::validation("corpus generation needs infected and healthy slices"));
    }
    let inf = prepare(infected, true)?;
    let hea = prepare(healthy, false)?;

    for index in 0..count as u64 {
        let mut rng = sample_rng(seed, index);
        let source = &inf[rng.gen_range(0..inf.len())];
        let mut order: Vec<usize> = (0..hea.len()).collect();
        order.shuffle(&mut rng);
        let mut kept = None;
        for h in order {
            let partner = &hea[h];
            let pair = composite(&CompositeInputs {
                infected_image: &source.image,
                infection_mask: source.slice.infection_mask.as_ref().expect("checked in prepare"),
                healthy_image: &partner.image,
                healthy_lung_mask: &partner.slice.lung_mask,
            })?;
            if filter_synthetic(&pair, min_rate) {
                kept = Some((pair, partner));
                break;
            }
        }
        match kept {
            Some((pair, partner)) => corpus.entries.push(CorpusEntry {
                pair,
                lung_mask: partner.slice.lung_mask.clone(),
                infected: source.slice.key(),
                healthy: partner.slice.key(),
                index,
            }),
            None => corpus.shortfall += 1,
        }
    }
    if corpus.shortfall > 0 {
        log::warn!(
            "{} of {count} synthetic samples found no pairing above rate {min_rate}",
            corpus.shortfall
        );
    }
    Ok(corpus)
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes image, mask and lung mask tensors, a dataset manifest
    /// (`manifest.tsv`) and a provenance table (`provenance.tsv`).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("# source: synthetic\n");
        let mut provenance = format!(
            "# seed {}\tmin_rate {}\tshortfall {}\torder normalize-then-mask\n\
             slice\tinfected_patient\tinfected_slice\thealthy_patient\thealthy_slice\tindex\trate\n",
            self.seed, self.min_rate, self.shortfall
        );
        for e in &self.entries {
            let id = format!("syn{:05}", e.index);
            write_tensor(dir.join(format!("{id}.image.ctt")), &e.pair.image, DType::F32)?;
            write_tensor(dir.join(format!("{id}.mask.ctt")), &e.pair.mask, DType::U8)?;
            write_tensor(dir.join(format!("{id}.lung.ctt")), &e.lung_mask, DType::U8)?;
            let _ = writeln!(
                manifest,
                "synthetic\t{id}\t{id}.image.ctt\t{id}.lung.ctt\t{id}.mask.ctt\t1"
            );
            let _ = writeln!(
                provenance,
                "{id}\t{}\t{}\t{}\t{}\t{}\t{:.9}",
                e.infected.0, e.infected.1, e.healthy.0, e.healthy.1, e.index, e.pair.infection_rate
            );
        }
        let manifest_path = dir.join("manifest.tsv");
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
        let prov_path = dir.join("provenance.tsv");
        fs::write(&prov_path, provenance).map_err(|e| Error::io(&prov_path, e))?;
        Ok(())
    }
}
