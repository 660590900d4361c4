//! Procedural two-domain cerebellum-like benchmark and PNG patch I/O.
//!
//! Geometry: a folded tissue mask (tissue lies below a boundary built from
//! sinusoids at the foliation frequency, in a randomly rotated frame) is
//! layered by Euclidean distance to the background: molecular at the
//! surface, then a thin Purkinje line, a granular band, and a white-matter
//! core. Rendering draws class intensities, applies the stain gamma and adds
//! speckle; tears overwrite a thin polyline strip with background.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::selftrain::{DatasetSplit, UnlabeledPatch};
use crate::tensor::Tensor;
use crate::{derive_seed, seeded, Rng};

pub const NUM_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "molecular", "purkinje", "granular", "white_matter"];

pub const BACKGROUND: u8 = 0;
pub const MOLECULAR: u8 = 1;
pub const PURKINJE: u8 = 2;
pub const GRANULAR: u8 = 3;
pub const WHITE_MATTER: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassIntensity {
    pub mean: f64,
    pub std: f64,
}

const fn ci(mean: f64, std: f64) -> ClassIntensity {
    ClassIntensity { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Gray-level statistics in class order background, molecular, Purkinje,
    /// granular, white matter. `std` is per-pixel texture.
    pub class_intensity: Vec<ClassIntensity>,
    /// Stain response: rendered value is `intensity^gamma`.
    pub contrast_gamma: f64,
    /// Additive Gaussian speckle after the stain curve.
    pub noise_std: f64,
    /// Probability that a patch carries a tear.
    pub tear_rate: f64,
    /// Folds per patch width.
    pub foliation_freq: f64,
    pub purkinje_thickness_px: usize,
    pub molecular_thickness_px: usize,
    pub granular_thickness_px: usize,
}

impl DomainSpec {
    /// Nissl-like labelled source domain: noisy, no tears, linear stain.
    pub fn default_source() -> Self {
        Self {
            class_intensity: vec![ci(0.92, 0.02), ci(0.66, 0.05), ci(0.22, 0.05), ci(0.40, 0.06), ci(0.80, 0.04)],
            contrast_gamma: 1.0,
            noise_std: 0.08,
            tear_rate: 0.0,
            foliation_freq: 2.5,
            purkinje_thickness_px: 1,
            molecular_thickness_px: 7,
            granular_thickness_px: 9,
        }
    }

    /// Silver-stain-like unlabelled target domain: different contrast curve,
    /// cleaner, frequently torn.
    pub fn default_target() -> Self {
        Self {
            class_intensity: vec![ci(0.88, 0.02), ci(0.58, 0.04), ci(0.30, 0.05), ci(0.48, 0.05), ci(0.76, 0.03)],
            contrast_gamma: 1.5,
            noise_std: 0.03,
            tear_rate: 0.5,
            foliation_freq: 3.0,
            purkinje_thickness_px: 1,
            molecular_thickness_px: 7,
            granular_thickness_px: 9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_intensity.len() != NUM_CLASSES {
            return bad(format!("class_intensity needs {NUM_CLASSES} entries, got {}", self.class_intensity.len()));
        }
        for (c, ci) in self.class_intensity.iter().enumerate() {
            if !(0.0..=1.0).contains(&ci.mean) || !(ci.std >= 0.0) {
                return bad(format!("class {c}: mean must lie in [0,1] and std must be >= 0"));
            }
        }
        if !(self.contrast_gamma > 0.0) {
            return bad("contrast_gamma must be positive".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.tear_rate) {
            return bad("tear_rate must lie in [0,1]".into());
        }
        if !(self.foliation_freq > 0.0) {
            return bad("foliation_freq must be positive".into());
        }
        if self.purkinje_thickness_px < 1 || self.molecular_thickness_px < 1 || self.granular_thickness_px < 1 {
            return bad("layer thicknesses must be >= 1 px".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainId {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePatch {
    /// `[1, H, W]` gray levels in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub domain: DomainId,
    pub patch_id: String,
}

impl ScenePatch {
    pub fn unlabeled(&self) -> UnlabeledPatch {
        UnlabeledPatch { image: self.image.clone(), domain: self.domain, patch_id: self.patch_id.clone() }
    }
}

/// Squared Euclidean distance from every pixel to the nearest `feature` pixel
/// (Felzenszwalb–Huttenlocher lower-envelope transform). Infinite when the
/// mask has no feature pixels.
pub fn squared_distance_transform(feature: &[bool], h: usize, w: usize) -> Vec<f64> {
    const INF: f64 = 1e20;
    fn pass(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
        let meet =
            |q: usize, p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..f.len() {
            let mut s = meet(q, v[k]);
            while s <= z[k] {
                k -= 1;
                s = meet(q, v[k]);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            *o = d * d + f[v[k]];
        }
    }

    let mut grid: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { INF }).collect();
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut buf = vec![0.0; n];
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        pass(&col, &mut buf[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = buf[y];
        }
    }
    for y in 0..h {
        let row: Vec<f64> = grid[y * w..(y + 1) * w].to_vec();
        pass(&row, &mut grid[y * w..(y + 1) * w], &mut v, &mut z);
    }
    grid.iter().map(|&d| if d >= INF / 2.0 { f64::INFINITY } else { d }).collect()
}

/// Chebyshev radius within which every Purkinje pixel sees both neighbours.
pub fn purkinje_neighbourhood(spec: &DomainSpec) -> usize {
    spec.purkinje_thickness_px + 1
}

fn has_class_within(label: &LabelMap, y: usize, x: usize, r: usize, class: u8) -> bool {
    let (h, w) = label.dims();
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    (y0..=y1).any(|yy| (x0..=x1).any(|xx| label.get(yy, xx) == class))
}

/// Clean layered label map for one patch.
fn layered_labels(spec: &DomainSpec, size: usize, rng: &mut Rng) -> LabelMap {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let offset = rng.random_range(-0.12..0.12);
    let f1 = spec.foliation_freq * rng.random_range(0.85..1.15);
    let f2 = f1 * rng.random_range(1.7..2.3);
    let a1 = rng.random_range(0.14..0.24);
    let a2 = rng.random_range(0.03..0.07);
    let (p1, p2) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    let (c, s) = (theta.cos(), theta.sin());

    let mut background = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = ((x as f64 + 0.5) / size as f64 - 0.5, (y as f64 + 0.5) / size as f64 - 0.5);
            let (u, v) = (c * px + s * py, -s * px + c * py);
            let boundary = offset
                + a1 * (std::f64::consts::TAU * f1 * u + p1).sin()
                + a2 * (std::f64::consts::TAU * f2 * u + p2).sin();
            background[y * size + x] = v > boundary;
        }
    }
    let dist = squared_distance_transform(&background, size, size);
    let mol = spec.molecular_thickness_px as f64;
    let purk = mol + spec.purkinje_thickness_px as f64;
    let gran = purk + spec.granular_thickness_px as f64;
    let data = background
        .iter()
        .zip(&dist)
        .map(|(&bg, &d2)| {
            let d = d2.sqrt();
            if bg {
                BACKGROUND
            } else if d <= mol {
                MOLECULAR
            } else if d <= purk {
                PURKINJE
            } else if d <= gran {
                GRANULAR
            } else {
                WHITE_MATTER
            }
        })
        .collect();
    let mut label = LabelMap::new(size, size, data).expect("size matches");

    // A Purkinje pixel must border both the molecular and the granular layer;
    // where a fold is too thin for a granular band it becomes molecular.
    let r = purkinje_neighbourhood(spec);
    let mut fixes = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if label.get(y, x) != PURKINJE {
                continue;
            }
            if !has_class_within(&label, y, x, r, GRANULAR) {
                fixes.push((y, x, MOLECULAR));
            } else if !has_class_within(&label, y, x, r, MOLECULAR) {
                fixes.push((y, x, GRANULAR));
            }
        }
    }
    for (y, x, c) in fixes {
        label.set(y, x, c);
    }
    label
}

/// Relabels a random thin polyline strip to background.
fn tear(label: &mut LabelMap, rng: &mut Rng) {
    let size = label.height() as f64;
    let mut pts = vec![(rng.random_range(0.0..size), rng.random_range(0.0..size))];
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    for _ in 0..3 {
        heading += rng.random_range(-0.6..0.6);
        let len = rng.random_range(0.2..0.45) * size;
        let (x, y) = *pts.last().expect("nonempty");
        pts.push((x + len * heading.cos(), y + len * heading.sin()));
    }
    let half_width = rng.random_range(1.0..3.0);
    let (h, w) = label.dims();
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let near = pts.windows(2).any(|seg| point_segment_distance(p, seg[0], seg[1]) <= half_width);
            if near {
                label.set(y, x, BACKGROUND);
            }
        }
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders gray levels for a label map.
pub fn render(spec: &DomainSpec, label: &LabelMap, rng: &mut Rng) -> Tensor<f32> {
    let (h, w) = label.dims();
    let data = label
        .data()
        .iter()
        .map(|&c| {
            let ci = spec.class_intensity[c as usize];
            let mut v = ci.mean;
            if ci.std > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v += ci.std * z;
            }
            v = v.clamp(0.0, 1.0).powf(spec.contrast_gamma);
            if spec.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v += spec.noise_std * z;
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(vec![1, h, w], data).expect("size matches")
}

/// Clean (pre-tear) label map for the given scene seed.
pub fn clean_labels(spec: &DomainSpec, size: usize, scene_seed: u64) -> LabelMap {
    layered_labels(spec, size, &mut seeded(derive_seed(scene_seed, "geometry")))
}

/// Deterministic patch for `(spec, size, scene_seed)`. Geometry, tears and
/// rendering use separate streams, so changing the render statistics keeps
/// the label map fixed.
pub fn render_scene(spec: &DomainSpec, size: usize, scene_seed: u64, domain: DomainId, patch_id: &str) -> ScenePatch {
    let mut label = clean_labels(spec, size, scene_seed);
    let mut tear_rng = seeded(derive_seed(scene_seed, "tear"));
    if tear_rng.random::<f64>() < spec.tear_rate {
        tear(&mut label, &mut tear_rng);
    }
    let image = render(spec, &label, &mut seeded(derive_seed(scene_seed, "render")));
    ScenePatch { image, label, domain, patch_id: patch_id.to_string() }
}

pub fn generate_scene(spec: &DomainSpec, size: usize, rng: &mut Rng) -> ScenePatch {
    let seed = rng.random::<u64>();
    render_scene(spec, size, seed, DomainId::Source, &format!("scene-{seed:016x}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    pub patch_size: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
            n_source: 100,
            n_target: 60,
            n_eval: 15,
            patch_size: 128,
        }
    }
}

/// Source, unlabelled target and held-out target evaluation patches. Every
/// patch is seeded from `(master_seed, patch_id)`.
pub fn make_benchmark(spec: &BenchmarkSpec, master_seed: u64) -> Result<DatasetSplit> {
    spec.source.validate()?;
    spec.target.validate()?;
    if spec.source == spec.target {
        return Err(Error::IdenticalDomains);
    }
    if spec.patch_size == 0 {
        return Err(Error::Config("patch_size must be positive".into()));
    }
    let make = |domain_spec: &DomainSpec, prefix: &str, i: usize, domain: DomainId| {
        let id = format!("{prefix}-{i:04}");
        render_scene(domain_spec, spec.patch_size, derive_seed(master_seed, &id), domain, &id)
    };
    let source_labeled = (0..spec.n_source).map(|i| make(&spec.source, "src", i, DomainId::Source)).collect();
    let target_unlabeled =
        (0..spec.n_target).map(|i| make(&spec.target, "tgt", i, DomainId::Target).unlabeled()).collect();
    let target_eval = (0..spec.n_eval).map(|i| make(&spec.target, "eval", i, DomainId::Target)).collect();
    DatasetSplit::new(source_labeled, target_unlabeled, target_eval)
}

/// A patch read from disk; `label` is present when a label directory was given.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedPatch {
    pub patch_id: String,
    pub image: Tensor<f32>,
    pub label: Option<LabelMap>,
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

/// Gray levels in `[0, 1]`; RGB is converted with Rec. 709 luminance weights.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| (0.2126 * p[0] as f32 + 0.7152 * p[1] as f32 + 0.0722 * p[2] as f32) / 255.0)
            .collect(),
    };
    Tensor::new(vec![1, h, w], data)
}

pub fn read_label(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .into_luma8();
    let (w, h) = img.dimensions();
    if let Some((x, y, p)) = img.enumerate_pixels().find(|(_, _, p)| p[0] as usize >= num_classes) {
        return Err(Error::LabelOutOfRange { path: path.to_path_buf(), x, y, value: p[0], num_classes });
    }
    LabelMap::new(h as usize, w as usize, img.into_raw())
}

pub fn ingest_patches(image_dir: &Path, label_dir: Option<&Path>, num_classes: usize) -> Result<Vec<IngestedPatch>> {
    let images = png_files(image_dir)?;
    let labels = match label_dir {
        Some(d) => Some(png_files(d)?),
        None => None,
    };
    if let Some(labels) = &labels {
        if let Some((_, p)) = images.iter().find(|(k, _)| !labels.contains_key(*k)) {
            return Err(Error::UnmatchedFile(p.clone()));
        }
        if let Some((_, p)) = labels.iter().find(|(k, _)| !images.contains_key(*k)) {
            return Err(Error::UnmatchedFile(p.clone()));
        }
    }
    let mut out = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let image = read_image(path)?;
        let label = match &labels {
            Some(l) => {
                let lp = &l[stem];
                let label = read_label(lp, num_classes)?;
                if label.dims() != (image.shape()[1], image.shape()[2]) {
                    return Err(Error::shape(
                        "ingest_patches",
                        format!("{} and its label differ in size", path.display()),
                    ));
                }
                Some(label)
            }
            None => None,
        };
        out.push(IngestedPatch { patch_id: stem.clone(), image, label });
    }
    Ok(out)
}

pub fn write_image(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(image.data()[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

pub fn write_label(label: &LabelMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(label.width() as u32, label.height() as u32, label.data().to_vec())
        .expect("buffer matches dims");
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    SourceLabeled,
    TargetUnlabeled,
    TargetEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patch_id: String,
    pub image: String,
    pub label: Option<String>,
    pub domain: DomainId,
    pub split: SplitRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub patch_size: usize,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `images/`, `labels/` and `manifest.json` under `dir`. Labels of the
/// unlabelled target split are never written.
pub fn write_split(split: &DatasetSplit, dir: &Path, seed: u64) -> Result<Manifest> {
    let (img_dir, lbl_dir) = (dir.join("images"), dir.join("labels"));
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::new();
    let mut put = |id: &str, image: &Tensor<f32>, label: Option<&LabelMap>, domain, role| -> Result<()> {
        let image_rel = format!("images/{id}.png");
        write_image(image, &dir.join(&image_rel))?;
        let label_rel = match label {
            Some(l) => {
                let rel = format!("labels/{id}.png");
                write_label(l, &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            patch_id: id.to_string(),
            image: image_rel,
            label: label_rel,
            domain,
            split: role,
        });
        Ok(())
    };
    for p in &split.source_labeled {
        put(&p.patch_id, &p.image, Some(&p.label), p.domain, SplitRole::SourceLabeled)?;
    }
    for p in &split.target_unlabeled {
        put(&p.patch_id, &p.image, None, p.domain, SplitRole::TargetUnlabeled)?;
    }
    for p in &split.target_eval {
        put(&p.patch_id, &p.image, Some(&p.label), p.domain, SplitRole::TargetEval)?;
    }
    let patch_size = split.source_labeled.first().map_or(0, |p| p.image.shape()[1]);
    let manifest = Manifest { seed, patch_size, num_classes: NUM_CLASSES, entries };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads a split written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let manifest = read_manifest(dir)?;
    let (mut src, mut tgt, mut eval) = (Vec::new(), Vec::new(), Vec::new());
    for e in &manifest.entries {
        let image = read_image(&dir.join(&e.image))?;
        let label = || -> Result<LabelMap> {
            let rel = e.label.as_ref().ok_or_else(|| Error::Config(format!("{} lacks a label", e.patch_id)))?;
            read_label(&dir.join(rel), manifest.num_classes)
        };
        match e.split {
            SplitRole::SourceLabeled => {
                src.push(ScenePatch { image, label: label()?, domain: e.domain, patch_id: e.patch_id.clone() })
            }
            SplitRole::TargetEval => {
                eval.push(ScenePatch { image, label: label()?, domain: e.domain, patch_id: e.patch_id.clone() })
            }
            SplitRole::TargetUnlabeled => {
                tgt.push(UnlabeledPatch { image, domain: e.domain, patch_id: e.patch_id.clone() })
            }
        }
    }
    DatasetSplit::new(src, tgt, eval)
}
