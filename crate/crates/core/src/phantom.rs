//! Synthetic chest CT phantoms: a body ellipse, two lung ellipses and
//! optional lesion blobs inside the lungs. Used for tests, benchmarks and
//! toy datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::augment::sample_rng;
use crate::data_io::{standardize, write_tensor, CtSlice, DType};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::Sample;

const AIR: f32 = -1000.0;
const TISSUE: f32 = 40.0;
const LUNG: f32 = -850.0;
const LESION: f32 = -300.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Number of lesion blobs; 0 gives a clean slice.
    pub lesions: usize,
    /// Amplitude of uniform intensity noise.
    pub noise: f32,
}

impl PhantomSpec {
    pub fn new(height: usize, width: usize, lesions: usize) -> Self {
        Self {
            height,
            width,
            lesions,
            noise: 20.0,
        }
    }
}

fn inside(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
    dy * dy + dx * dx <= 1.0
}

/// One phantom slice drawn from `rng`.
pub fn phantom_slice<R: Rng + ?Sized>(patient_id: &str, slice_id: &str, spec: PhantomSpec, rng: &mut R) -> CtSlice {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let jitter = |rng: &mut R, v: f64| v * rng.gen_range(0.9..1.1);
    let body = (h / 2.0, w / 2.0, jitter(rng, 0.45 * h), jitter(rng, 0.47 * w));
    let lung_ry = jitter(rng, 0.32 * h);
    let lung_rx = jitter(rng, 0.15 * w);
    let lungs = [
        (h / 2.0, 0.31 * w, lung_ry, lung_rx),
        (h / 2.0, 0.69 * w, lung_ry, lung_rx),
    ];
    let mut blobs = Vec::with_capacity(spec.lesions);
    for _ in 0..spec.lesions {
        let (cy, cx, ry, rx) = lungs[rng.gen_range(0..2)];
        let r = rng.gen_range(0.06..0.12) * h.min(w);
        let oy = rng.gen_range(-0.6..0.6) * ry;
        let ox = rng.gen_range(-0.5..0.5) * rx;
        blobs.push((cy + oy, cx + ox, r * rng.gen_range(0.7..1.3), r));
    }

    let n = spec.height * spec.width;
    let mut image = vec![AIR; n];
    let mut lung = vec![0.0f32; n];
    let mut lesion = vec![0.0f32; n];
    for i in 0..n {
        let (y, x) = ((i / spec.width) as f64, (i % spec.width) as f64);
        let hit = |e: &(f64, f64, f64, f64)| inside(y, x, e.0, e.1, e.2, e.3);
        if hit(&body) {
            image[i] = TISSUE;
        }
        if lungs.iter().any(hit) {
            image[i] = LUNG;
            lung[i] = 1.0;
            if blobs.iter().any(hit) {
                image[i] = LESION;
                lesion[i] = 1.0;
            }
        }
        image[i] += rng.gen_range(-1.0..1.0) * spec.noise;
    }
    let shape = vec![spec.height, spec.width];
    let lesion = Tensor::new(shape.clone(), lesion).expect("sized above");
    let infected = lesion.count_nonzero() > 0;
    CtSlice {
        patient_id: patient_id.to_string(),
        slice_id: slice_id.to_string(),
        image: Tensor::new(shape.clone(), image).expect("sized above"),
        lung_mask: Tensor::new(shape, lung).expect("sized above"),
        infection_mask: Some(lesion),
        infected_label: Some(infected),
    }
}

/// Standardized `(1, H, W)` training samples, each with at least one lesion
/// pixel.
pub fn lesion_samples(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    let mut index = 0u64;
    while out.len() < count {
        let mut rng = sample_rng(seed, index);
        index += 1;
        let lesions = rng.gen_range(1..=3);
        let slice = phantom_slice(
            "probe",
            &index.to_string(),
            PhantomSpec::new(size, size, lesions),
            &mut rng,
        );
        let mask = slice.infection_mask.expect("phantoms carry masks");
        if mask.count_nonzero() == 0 {
            continue;
        }
        let image = standardize(&slice.image)?.reshape(vec![1, size, size])?;
        out.push(Sample::new(image, mask.reshape(vec![1, size, size])?)?);
    }
    Ok(out)
}

/// Layout of a toy dataset written by [`write_dataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub patients: usize,
    pub slices_per_patient: usize,
    pub size: usize,
    /// Share of slices that receive lesions.
    pub infected_fraction: f64,
    pub seed: u64,
}

/// Writes phantom slices as tensor files plus `manifest.tsv` into `dir`;
/// returns the manifest path.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# source: phantom\n");
    for p in 0..spec.patients {
        for s in 0..spec.slices_per_patient {
            let key = (p * spec.slices_per_patient + s) as u64;
            let mut rng = sample_rng(spec.seed, key);
            let lesions = if rng.gen_bool(spec.infected_fraction.clamp(0.0, 1.0)) {
                rng.gen_range(1..=3)
            } else {
                0
            };
            let (pid, sid) = (format!("p{p:03}"), format!("s{s:03}"));
            let slice = phantom_slice(&pid, &sid, PhantomSpec::new(spec.size, spec.size, lesions), &mut rng);
            let stem = format!("{pid}_{sid}");
            write_tensor(dir.join(format!("{stem}.image.ctt")), &slice.image, DType::F32)?;
            write_tensor(dir.join(format!("{stem}.lung.ctt")), &slice.lung_mask, DType::U8)?;
            let mask = slice.infection_mask.as_ref().expect("phantoms carry masks");
            write_tensor(dir.join(format!("{stem}.mask.ctt")), mask, DType::U8)?;
            let label = u8::from(slice.infected_label == Some(true));
            let _ = writeln!(
                manifest,
                "{pid}\t{sid}\t{stem}.image.ctt\t{stem}.lung.ctt\t{stem}.mask.ctt\t{label}"
            );
        }
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
