//! Dataset ingestion, normalization, deterministic batching and procedural
//! synthetic face datasets.
//!
//! Images are carried as `(3, S, S)` f64 arrays with values in [-1, 1]
//! ([`ImageTensor`]). Datasets are either backed by PNG files listed in a
//! JSON-lines manifest or by procedural face parameters, so a synthetic
//! dataset needs no disk at all and is a pure function of
//! `(count, resolution, seed)`.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::io::BufRead;
use std::path::{Path, PathBuf};

/// Side lengths a valid image may have.
pub const VALID_SIDES: [usize; 5] = [4, 8, 16, 32, 64];
pub const HR_SIDE: usize = 64;
pub const LR_SIDE: usize = 16;

/// A 3×S×S image with intensities in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h != w {
            return Err(Error::Shape(format!("expected square image, got {h}×{w}")));
        }
        if !VALID_SIDES.contains(&h) {
            return Err(Error::Shape(format!(
                "side length {h} not in {VALID_SIDES:?}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidInput(format!(
                "image value {v} outside [-1, 1]"
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn side(&self) -> usize {
        self.data.dim().1
    }

    /// `(1, 3, S, S)` copy for feeding networks.
    pub fn to_batch(&self) -> Array4<f64> {
        let (c, h, w) = self.data.dim();
        self.data
            .clone()
            .into_shape_with_order((1, c, h, w))
            .expect("to_batch")
    }

    /// Extracts image `idx` from a `(N, 3, S, S)` batch, clamping values into
    /// range (network outputs can exceed [-1, 1] by rounding noise).
    pub fn from_batch(batch: &Array4<f64>, idx: usize) -> Result<Self> {
        let (_, c, h, w) = batch.dim();
        let mut img = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img[(ci, y, x)] = batch[(idx, ci, y, x)].clamp(-1.0, 1.0);
                }
            }
        }
        Self::new(img)
    }

    pub fn l1_to(&self, other: &ImageTensor) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }
}

/// Maps 8-bit intensities onto [-1, 1] via v ↦ v/127.5 − 1.
pub fn normalize(image: &Array3<u8>) -> Result<ImageTensor> {
    let f = image.mapv(|v| v as f64);
    normalize_real(&f)
}

/// Real-valued variant of [`normalize`] (e.g. the exact midpoint 127.5 ↦ 0).
pub fn normalize_real(image: &Array3<f64>) -> Result<ImageTensor> {
    let (c, h, w) = image.dim();
    if c != 3 || h != w || !VALID_SIDES.contains(&h) {
        return Err(Error::Shape(format!(
            "normalize expects (3, S, S) with S in {VALID_SIDES:?}, got ({c}, {h}, {w})"
        )));
    }
    ImageTensor::new(image.mapv(|v| v / 127.5 - 1.0))
}

/// Inverse of [`normalize`]: affine map back to [0, 255], round half away
/// from zero, clamp. Total on any input.
pub fn denormalize(image: &ImageTensor) -> Array3<u8> {
    image
        .data
        .mapv(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
}

// ---- PNG I/O ----

pub fn read_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<u8>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c];
        }
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("write_png expects 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ci in 0..3 {
            px.0[ci] = image[(ci, y as usize, x as usize)];
        }
    }
    buf.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn load_image_file(path: &Path) -> Result<ImageTensor> {
    normalize(&read_png(path)?)
}

pub fn save_image_file(path: &Path, image: &ImageTensor) -> Result<()> {
    write_png(path, &denormalize(image))
}

// ---- datasets ----

/// Dataset role; fixes the expected resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "HR")]
    Hr,
    #[serde(rename = "LR")]
    Lr,
}

impl Role {
    pub fn resolution(self) -> usize {
        match self {
            Role::Hr => HR_SIDE,
            Role::Lr => LR_SIDE,
        }
    }
}

/// Parameters that fully determine one procedural face image.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    bg: [f64; 3],
    skin: [f64; 3],
    center: (f64, f64),
    radii: (f64, f64),
    tilt: f64,
    eye_offset: (f64, f64),
    eye_radius: f64,
    eye_color: f64,
    mouth_y: f64,
    mouth_half: (f64, f64),
    mouth_color: f64,
    illum_dir: (f64, f64),
    illum_strength: f64,
}

impl FaceParams {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut c = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        FaceParams {
            bg: [c(-0.9, 0.9), c(-0.9, 0.9), c(-0.9, 0.9)],
            skin: [c(0.2, 0.8), c(-0.1, 0.5), c(-0.3, 0.3)],
            center: (c(0.42, 0.58), c(0.42, 0.58)),
            radii: (c(0.24, 0.36), c(0.30, 0.44)),
            tilt: c(-0.30, 0.30),
            eye_offset: (c(0.09, 0.15), c(0.06, 0.13)),
            eye_radius: c(0.030, 0.065),
            eye_color: c(-0.95, -0.5),
            mouth_y: c(0.12, 0.22),
            mouth_half: (c(0.06, 0.12), c(0.015, 0.035)),
            mouth_color: c(-0.8, -0.2),
            illum_dir: (c(-1.0, 1.0), c(-1.0, 1.0)),
            illum_strength: c(0.0, 0.35),
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders a face (ellipse head, two eye blobs, mouth bar) at the given
/// resolution. Pure function of its arguments.
pub fn render_face(p: &FaceParams, resolution: usize) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((3, resolution, resolution));
    let (sin_t, cos_t) = p.tilt.sin_cos();
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 + 0.5) / resolution as f64;
            let v = (y as f64 + 0.5) / resolution as f64;
            // face frame
            let dx = u - p.center.0;
            let dy = v - p.center.1;
            let fx = dx * cos_t + dy * sin_t;
            let fy = -dx * sin_t + dy * cos_t;
            let d = (fx / p.radii.0).powi(2) + (fy / p.radii.1).powi(2);
            let head = smoothstep(1.15, 0.85, d);

            let eye = {
                let mut m: f64 = 0.0;
                for side in [-1.0, 1.0] {
                    let ex = fx - side * p.eye_offset.0;
                    let ey = fy + p.eye_offset.1;
                    let r2 = ex * ex + ey * ey;
                    m = m.max((-r2 / (2.0 * p.eye_radius * p.eye_radius)).exp());
                }
                m.min(1.0)
            };
            let mouth = {
                let mx = smoothstep(p.mouth_half.0 + 0.01, p.mouth_half.0 - 0.01, fx.abs());
                let my = smoothstep(
                    p.mouth_half.1 + 0.01,
                    p.mouth_half.1 - 0.01,
                    (fy - p.mouth_y).abs(),
                );
                mx * my
            };

            let illum =
                1.0 + p.illum_strength * ((u - 0.5) * p.illum_dir.0 + (v - 0.5) * p.illum_dir.1);
            for c in 0..3 {
                let mut val = p.bg[c] * (1.0 - head) + p.skin[c] * head;
                val = val * (1.0 - head * eye) + p.eye_color * head * eye;
                val = val * (1.0 - head * mouth) + p.mouth_color * head * mouth;
                img[(c, y, x)] = (val * illum).clamp(-1.0, 1.0);
            }
        }
    }
    img
}

/// Where an item's pixels come from.
#[derive(Clone, Debug)]
pub enum ImageSource {
    File(PathBuf),
    Synthetic(FaceParams),
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub id: String,
    pub source: ImageSource,
}

/// An ordered, single-resolution image collection.
#[derive(Clone, Debug)]
pub struct Dataset {
    role: Role,
    items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn resolution(&self) -> usize {
        self.role.resolution()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn load_image(&self, idx: usize) -> Result<ImageTensor> {
        let item = &self.items[idx];
        let img = match &item.source {
            ImageSource::File(path) => {
                let img = load_image_file(path)?;
                if img.side() != self.resolution() {
                    return Err(Error::Manifest(format!(
                        "item {}: image is {got}×{got} but dataset role requires {want}×{want}",
                        item.id,
                        got = img.side(),
                        want = self.resolution()
                    )));
                }
                img
            }
            ImageSource::Synthetic(params) => {
                ImageTensor::new(render_face(params, self.resolution()))?
            }
        };
        Ok(img)
    }
}

#[derive(Deserialize)]
struct ManifestHeader {
    role: Role,
    resolution: usize,
}

#[derive(Deserialize)]
struct ManifestRecord {
    id: String,
    path: String,
}

/// Loads a JSON-lines manifest: a header line
/// `{"role": "HR"|"LR", "resolution": 64|16}` followed by one
/// `{"id": ..., "path": ...}` per line. Relative paths resolve against the
/// manifest's directory. Every referenced PNG must exist and match the
/// declared resolution.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Manifest("empty manifest".into()))?
        .map_err(|e| Error::Manifest(e.to_string()))?;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Manifest(format!("bad header: {e}")))?;
    if header.resolution != header.role.resolution() {
        return Err(Error::Manifest(format!(
            "role {:?} requires resolution {}, header declares {}",
            header.role,
            header.role.resolution(),
            header.resolution
        )));
    }

    let mut items = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Manifest(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 2)))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Manifest(format!("duplicate id: {}", rec.id)));
        }
        let img_path = base.join(&rec.path);
        let (w, h) = image::image_dimensions(&img_path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", img_path.display())))?;
        if w as usize != header.resolution || h as usize != header.resolution {
            return Err(Error::Manifest(format!(
                "id {}: image is {w}×{h} but role {:?} requires {res}×{res}",
                rec.id,
                header.role,
                res = header.resolution
            )));
        }
        items.push(DatasetItem {
            id: rec.id,
            source: ImageSource::File(img_path),
        });
    }
    Ok(Dataset { role: header.role, items })
}

/// Procedurally generated face dataset; a pure function of
/// `(count, resolution, seed)`. Resolution must be 16 (LR) or 64 (HR).
pub fn synth_dataset(count: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    let role = match resolution {
        HR_SIDE => Role::Hr,
        LR_SIDE => Role::Lr,
        other => {
            return Err(Error::InvalidInput(format!(
                "synthetic datasets support resolutions 16 and 64, got {other}"
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..count)
        .map(|i| DatasetItem {
            id: format!("synth_{seed}_{i:05}"),
            source: ImageSource::Synthetic(FaceParams::sample(&mut rng)),
        })
        .collect();
    Ok(Dataset { role, items })
}

/// One batch of materialized images.
pub struct Batch {
    pub ids: Vec<String>,
    pub data: Array4<f64>,
}

/// Seeded epoch-shuffled batch iterator. The final short batch is kept.
/// Single consumer; epochs continue indefinitely via [`BatchStream::next_batch`].
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl<'a> BatchStream<'a> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Number of batches per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    fn reshuffle(&mut self) {
        // Fisher–Yates on the index vector.
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    /// Ids of the next batch without materializing pixels.
    pub fn next_batch_ids(&mut self) -> Vec<String> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let ids = self.order[self.pos..end]
            .iter()
            .map(|&i| self.dataset.items()[i].id.clone())
            .collect();
        self.pos = end;
        ids
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;

        let res = self.dataset.resolution();
        let mut data = Array4::<f64>::zeros((indices.len(), 3, res, res));
        let mut ids = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            let img = self.dataset.load_image(idx)?;
            data.index_axis_mut(ndarray::Axis(0), row).assign(img.data());
            ids.push(self.dataset.items()[idx].id.clone());
        }
        Ok(Batch { ids, data })
    }
}

/// Seeded shuffled batching over a dataset. Errors on an empty dataset.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be >= 1".into()));
    }
    let mut stream = BatchStream {
        dataset,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
        order: (0..dataset.len()).collect(),
        pos: 0,
        epoch: 0,
    };
    stream.reshuffle();
    Ok(stream)
}
