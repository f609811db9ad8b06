//! Synthetic multi-angle polarized thin-section groups and the on-disk
//! dataset layout.
//!
//! Grains are Voronoi cells of random seed points. Each grain carries a
//! lithology class and an extinction phase; cross-polarized views scale the
//! grain color by `0.5 * (1 + cos(2 * (theta_k - phase)))`. Pixels outside the
//! inscribed disk form the background region (class 0).
//!
//! Layout of one group on disk:
//!
//! ```text
//! <root>/<group_id>/angle_0.png .. angle_6.png   8-bit RGB
//! <root>/<group_id>/edge.png                     8-bit gray, {0, 255}
//! <root>/<group_id>/semantic.png                 8-bit gray, class * 60
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

pub const ANGLE_COUNT: usize = 7;
pub const CLASS_COUNT: usize = 4;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["background", "feldspar", "debris", "quartz"];
/// Gray-level step used to store class indices in `semantic.png`.
pub const SEMANTIC_PNG_STEP: u8 = 60;
/// Polarizer step between consecutive cross-polarized views, in degrees.
pub const CROSS_POLAR_STEP_DEG: f64 = 15.0;
/// Background covers pixels farther than this fraction of the image size
/// from the image center.
pub const BACKGROUND_RADIUS: f64 = 0.48;

/// Plane-polarized base colors per class (index 0 = background).
const BASE_COLORS: [[f64; 3]; CLASS_COUNT] = [
    [0.78, 0.84, 0.95],
    [0.74, 0.70, 0.64],
    [0.55, 0.42, 0.30],
    [0.93, 0.92, 0.88],
];
/// Background brightness under crossed polars (isotropic, stays dark).
const BACKGROUND_CROSSED: [f64; 3] = [0.06, 0.06, 0.08];
const COLOR_JITTER: f64 = 0.06;

/// Parameters of one synthetic group.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub n_grains: usize,
    pub class_count: usize,
    pub angle_count: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_grains: 30,
            class_count: CLASS_COUNT,
            angle_count: ANGLE_COUNT,
            seed: 0,
            noise_sigma: 0.02,
        }
    }
}

impl SynthSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid("image_size", format!("must be >= 16, got {}", self.image_size)));
        }
        if self.n_grains < 2 {
            return Err(Error::invalid("n_grains", format!("must be >= 2, got {}", self.n_grains)));
        }
        if self.angle_count != ANGLE_COUNT {
            return Err(Error::invalid("angle_count", format!("must be exactly 7, got {}", self.angle_count)));
        }
        if self.class_count != CLASS_COUNT {
            return Err(Error::invalid("class_count", format!("must be exactly 4, got {}", self.class_count)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", format!("must be finite and >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// One sample: seven co-registered views, `[7, H, W, 3]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarizedGroup {
    pub group_id: String,
    pub views: Array4<f64>,
}

impl PolarizedGroup {
    pub fn new(group_id: impl Into<String>, views: Array4<f64>) -> Result<Self> {
        let g = Self { group_id: group_id.into(), views };
        g.validate()?;
        Ok(g)
    }

    pub fn height(&self) -> usize {
        self.views.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.views.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.views.shape();
        if s[0] != ANGLE_COUNT || s[3] != 3 {
            return Err(Error::Shape(format!("group views must be 7xHxWx3, got {s:?}")));
        }
        if self.views.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("views", "non-finite value"));
        }
        Ok(())
    }

    /// View `k` quantized to 8-bit RGB, `[H, W, 3]`.
    pub fn view_u8(&self, k: usize) -> Array3<u8> {
        self.views
            .index_axis(ndarray::Axis(0), k)
            .mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    BinaryGt,
    Probability,
}

/// Grain-boundary map, `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMask {
    pub values: Array2<f64>,
    pub kind: EdgeKind,
}

impl EdgeMask {
    pub fn binary(values: Array2<f64>) -> Self {
        Self { values, kind: EdgeKind::BinaryGt }
    }

    pub fn probability(values: Array2<f64>) -> Self {
        Self { values, kind: EdgeKind::Probability }
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }
}

/// Lithology map: either class indices `[H, W]` or probabilities `[H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub enum SemanticMask {
    Index(Array2<u8>),
    Probability(Array3<f64>),
}

impl SemanticMask {
    /// Per-pixel argmax (ties resolve to the lower class).
    pub fn to_index(&self) -> Array2<u8> {
        match self {
            SemanticMask::Index(m) => m.clone(),
            SemanticMask::Probability(p) => {
                let (h, w, c) = p.dim();
                Array2::from_shape_fn((h, w), |(y, x)| {
                    let mut best = 0;
                    for k in 1..c {
                        if p[[y, x, k]] > p[[y, x, best]] {
                            best = k;
                        }
                    }
                    best as u8
                })
            }
        }
    }
}

/// Seed points and per-grain attributes of one synthetic group.
#[derive(Clone, Debug)]
pub struct GrainLayout {
    /// Seed coordinates `(row, col)` in pixel units.
    pub seeds: Vec<(f64, f64)>,
    /// Class in `1..=3` per grain.
    pub classes: Vec<u8>,
    /// Extinction phase in `[0, pi)` per grain.
    pub phases: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl GrainLayout {
    /// Label used for the background region.
    pub fn background_label(&self) -> usize {
        self.seeds.len()
    }
}

/// Cross-polarizer angle of view `k` (1..=6), in radians.
pub fn cross_polar_angle(k: usize) -> f64 {
    assert!((1..ANGLE_COUNT).contains(&k), "view {k} is not cross-polarized");
    ((k - 1) as f64 * CROSS_POLAR_STEP_DEG).to_radians()
}

/// Brightness factor of a grain with extinction phase `phase` in view `k`.
pub fn extinction_factor(k: usize, phase: f64) -> f64 {
    0.5 * (1.0 + (2.0 * (cross_polar_angle(k) - phase)).cos())
}

/// Draws the grain layout for `spec`. Consumes the head of the seeded stream
/// that [`generate_group`] continues with the pixel noise.
fn draw_layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> GrainLayout {
    let size = spec.image_size as f64;
    let mut layout = GrainLayout { seeds: Vec::new(), classes: Vec::new(), phases: Vec::new(), colors: Vec::new() };
    for _ in 0..spec.n_grains {
        let row = rng.random_range(0.0..size);
        let col = rng.random_range(0.0..size);
        let class = rng.random_range(1..CLASS_COUNT as u8);
        let phase = rng.random_range(0.0..PI);
        let base = BASE_COLORS[class as usize];
        let color = base.map(|c| (c + rng.random_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0));
        layout.seeds.push((row, col));
        layout.classes.push(class);
        layout.phases.push(phase);
        layout.colors.push(color);
    }
    layout
}

/// The grain layout `generate_group(spec)` uses.
pub fn grain_layout(spec: &SynthSpec) -> Result<GrainLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(draw_layout(spec, &mut rng))
}

/// Whether pixel `(row, col)` lies in the background region.
pub fn is_background(row: usize, col: usize, size: usize) -> bool {
    let c = size as f64 / 2.0;
    let (dy, dx) = (row as f64 + 0.5 - c, col as f64 + 0.5 - c);
    (dy * dy + dx * dx).sqrt() > BACKGROUND_RADIUS * size as f64
}

/// Per-pixel grain label: nearest seed (lowest index on ties), or the
/// background label.
pub fn label_map(layout: &GrainLayout, size: usize) -> Array2<usize> {
    Array2::from_shape_fn((size, size), |(r, c)| {
        if is_background(r, c, size) {
            return layout.background_label();
        }
        let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &(sy, sx)) in layout.seeds.iter().enumerate() {
            let d = (py - sy).powi(2) + (px - sx).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    })
}

/// 1 where any 4-neighbor carries a different label.
pub fn boundary_of<T: PartialEq>(labels: &Array2<T>) -> Array2<f64> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let here = &labels[[r, c]];
        let differs = (r > 0 && labels[[r - 1, c]] != *here)
            || (r + 1 < h && labels[[r + 1, c]] != *here)
            || (c > 0 && labels[[r, c - 1]] != *here)
            || (c + 1 < w && labels[[r, c + 1]] != *here);
        if differs {
            1.0
        } else {
            0.0
        }
    })
}

/// Generates one group with its edge and semantic ground truth.
pub fn generate_group(spec: &SynthSpec) -> Result<(PolarizedGroup, EdgeMask, SemanticMask)> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = draw_layout(spec, &mut rng);
    let labels = label_map(&layout, size);
    let bg = layout.background_label();

    let mut views = Array4::<f64>::zeros((ANGLE_COUNT, size, size, 3));
    for ((r, c), &label) in labels.indexed_iter() {
        for k in 0..ANGLE_COUNT {
            let rgb = if label == bg {
                if k == 0 {
                    BASE_COLORS[0]
                } else {
                    BACKGROUND_CROSSED
                }
            } else {
                let color = layout.colors[label];
                let factor = if k == 0 { 1.0 } else { extinction_factor(k, layout.phases[label]) };
                color.map(|v| v * factor)
            };
            for ch in 0..3 {
                views[[k, r, c, ch]] = rgb[ch];
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in views.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let edge = EdgeMask::binary(boundary_of(&labels));
    let semantic = labels.mapv(|l| if l == bg { 0 } else { layout.classes[l] });
    let group = PolarizedGroup { group_id: format!("s{:016x}", spec.seed), views };
    Ok((group, edge, SemanticMask::Index(semantic)))
}

/// Whether `read_group` requires `semantic.png`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadMode {
    Full,
    /// Edge-only datasets: a missing `semantic.png` yields `None`.
    EdgeOnly,
}

fn group_dir(root: &Path, group_id: &str) -> PathBuf {
    root.join(group_id)
}

fn save_png<P: image::Pixel<Subpixel = u8> + image::PixelWithColorType>(
    img: &image::ImageBuffer<P, Vec<u8>>,
    path: &Path,
) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a group, its edge mask and semantic mask under `root/<group_id>/`.
pub fn write_group(group: &PolarizedGroup, edge: &EdgeMask, semantic: Option<&SemanticMask>, root: &Path) -> Result<()> {
    group.validate()?;
    let (h, w) = (group.height(), group.width());
    if edge.values.dim() != (h, w) {
        return Err(Error::Shape(format!("edge mask {:?} does not match views {h}x{w}", edge.values.dim())));
    }
    let dir = group_dir(root, &group.group_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for k in 0..ANGLE_COUNT {
        let v = group.view_u8(k);
        let img = RgbImage::from_raw(w as u32, h as u32, v.into_raw_vec_and_offset().0).expect("buffer sized from view");
        save_png(&img, &dir.join(format!("angle_{k}.png")))?;
    }
    let edge_px: Vec<u8> = edge.values.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    save_png(&GrayImage::from_raw(w as u32, h as u32, edge_px).unwrap(), &dir.join("edge.png"))?;
    if let Some(sem) = semantic {
        let idx = sem.to_index();
        if idx.dim() != (h, w) {
            return Err(Error::Shape(format!("semantic mask {:?} does not match views {h}x{w}", idx.dim())));
        }
        let px: Vec<u8> = idx.iter().map(|&c| c * SEMANTIC_PNG_STEP).collect();
        save_png(&GrayImage::from_raw(w as u32, h as u32, px).unwrap(), &dir.join("semantic.png"))?;
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(format!("reading {}", path.display()), e),
        source => Error::Image { path: path.to_path_buf(), source },
    })
}

/// Reads a group written by [`write_group`].
pub fn read_group(root: &Path, group_id: &str, mode: ReadMode) -> Result<(PolarizedGroup, EdgeMask, Option<SemanticMask>)> {
    let dir = group_dir(root, group_id);
    let mut views: Option<Array4<f64>> = None;
    for k in 0..ANGLE_COUNT {
        let path = dir.join(format!("angle_{k}.png"));
        if !path.is_file() {
            return Err(Error::MissingView(k));
        }
        let img = open_image(&path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let v = views.get_or_insert_with(|| Array4::zeros((ANGLE_COUNT, h, w, 3)));
        if v.shape()[1] != h || v.shape()[2] != w {
            return Err(Error::Shape(format!("view {k} is {h}x{w}, view 0 is {}x{}", v.shape()[1], v.shape()[2])));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                v[[k, y as usize, x as usize, ch]] = px[ch] as f64 / 255.0;
            }
        }
    }
    let views = views.expect("seven views read");
    let (h, w) = (views.shape()[1], views.shape()[2]);

    let edge_img = open_image(&dir.join("edge.png"))?.to_luma8();
    if (edge_img.height() as usize, edge_img.width() as usize) != (h, w) {
        return Err(Error::Shape(format!("edge.png does not match views {h}x{w}")));
    }
    let edge = Array2::from_shape_fn((h, w), |(r, c)| if edge_img.get_pixel(c as u32, r as u32)[0] >= 128 { 1.0 } else { 0.0 });

    let sem_path = dir.join("semantic.png");
    let semantic = if sem_path.is_file() {
        let img = open_image(&sem_path)?.to_luma8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::Shape(format!("semantic.png does not match views {h}x{w}")));
        }
        let mut idx = Array2::<u8>::zeros((h, w));
        for (x, y, px) in img.enumerate_pixels() {
            let class = px[0] / SEMANTIC_PNG_STEP;
            if class as usize >= CLASS_COUNT {
                return Err(Error::format("semantic.png", format!("value {} decodes to class {class}", px[0])));
            }
            idx[[y as usize, x as usize]] = class;
        }
        Some(SemanticMask::Index(idx))
    } else if mode == ReadMode::EdgeOnly {
        None
    } else {
        return Err(Error::io(format!("reading {}", sem_path.display()), std::io::ErrorKind::NotFound.into()));
    };

    Ok((PolarizedGroup { group_id: group_id.to_string(), views }, EdgeMask::binary(edge), semantic))
}

/// Group directories under `root` (those containing `angle_0.png`), sorted.
pub fn list_groups(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
        if entry.path().join("angle_0.png").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Deterministic shuffled split into disjoint, exhaustive train/test lists.
pub fn split_dataset(group_ids: &[String], train_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if group_ids.is_empty() {
        return Err(Error::invalid("group_ids", "empty id list"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction", format!("must lie in (0, 1), got {train_fraction}")));
    }
    let mut ids = group_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let test = ids.split_off(n_train.min(ids.len()));
    Ok((ids, test))
}
