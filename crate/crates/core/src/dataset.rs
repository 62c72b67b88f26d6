//! Posed multi-view datasets: generation from analytic scenes, the JSON
//! manifest, and loading.
//!
//! Directory layout:
//!
//! ```text
//! manifest.json
//! lr/NNN.png   lr/NNN.f64img     training-resolution images
//! hr/NNN.png   hr/NNN.f64img     s× resolution images
//! hr/NNN.depth.f64img            oracle depth at HR (single channel)
//! ```
//!
//! Paths inside the manifest are relative to its directory. The `.f64img`
//! sidecars are preferred when present; the PNGs are 8-bit copies for
//! viewing.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Bounds, Camera, CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::image::{load_depth_float, save_depth_float, Image};
use crate::metrics::Kernel;
use crate::scene::{hemisphere_pose, oracle_render, AnalyticScene, MIN_ORACLE_STEPS};
use crate::train::TrainData;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "subnerf-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub id: usize,
    pub split: Split,
    pub cam_to_world: CameraPose,
    pub lr_png: String,
    pub hr_png: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_float: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_float: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_depth: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub scale: usize,
    pub kernel: Kernel,
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
    pub lr_intrinsics: Intrinsics,
    pub hr_intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<AnalyticScene>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Dataset(format!("unknown format {:?}", self.format)));
        }
        if self.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", self.version)));
        }
        if self.scale < 1 {
            return Err(Error::Dataset("scale must be >= 1".into()));
        }
        Bounds::new(self.near, self.far).map_err(|e| Error::Dataset(e.to_string()))?;
        self.lr_intrinsics.validate()?;
        self.hr_intrinsics.validate()?;
        let (l, h) = (self.lr_intrinsics, self.hr_intrinsics);
        if h.width != l.width * self.scale || h.height != l.height * self.scale {
            return Err(Error::Dataset(format!(
                "HR size {}x{} is not {}x the LR size {}x{}",
                h.width, h.height, self.scale, l.width, l.height
            )));
        }
        let mut ids: Vec<usize> = self.frames.iter().map(|f| f.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Dataset("duplicate frame ids".into()));
        }
        if !self.frames.iter().any(|f| f.split == Split::Train) {
            return Err(Error::Dataset("no training frames".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            near: self.near,
            far: self.far,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetOptions {
    pub n_views: usize,
    pub n_test: usize,
    /// HR width and height (square images).
    pub hr_res: usize,
    pub scale: usize,
    pub kernel: Kernel,
    pub seed: u64,
    pub steps: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub distance: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            n_views: 16,
            n_test: 8,
            hr_res: 64,
            scale: 2,
            kernel: Kernel::Average,
            seed: 0,
            steps: MIN_ORACLE_STEPS,
            fov_deg: 40.0,
            distance: 3.0,
            min_elevation_deg: 10.0,
            max_elevation_deg: 60.0,
        }
    }
}

impl DatasetOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::invalid("n_views must be >= 1"));
        }
        if self.scale == 0 || self.hr_res == 0 || !self.hr_res.is_multiple_of(self.scale) {
            return Err(Error::invalid(format!(
                "hr_res {} must be a positive multiple of scale {}",
                self.hr_res, self.scale
            )));
        }
        if self.steps < MIN_ORACLE_STEPS {
            return Err(Error::invalid(format!("steps must be >= {MIN_ORACLE_STEPS}")));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || !(self.distance > 0.0) {
            return Err(Error::invalid("fov must be in (0, 180) degrees and distance positive"));
        }
        if !(0.0..=90.0).contains(&self.min_elevation_deg)
            || self.max_elevation_deg < self.min_elevation_deg
            || self.max_elevation_deg > 90.0
        {
            return Err(Error::invalid("elevations must satisfy 0 <= min <= max <= 90"));
        }
        Ok(())
    }
}

fn write_image(root: &Path, rel: &str, img: &Image, float: bool) -> Result<()> {
    let p = root.join(rel);
    if float {
        img.save_float(&p)
    } else {
        img.save_png(&p)
    }
}

/// Renders the scene from hemisphere cameras and writes a dataset to `out_dir`.
pub fn make_dataset(scene: &AnalyticScene, opts: &DatasetOptions, out_dir: &Path) -> Result<DatasetManifest> {
    opts.validate()?;
    scene.validate()?;
    let radius = scene.bounding_radius().max(1e-3);
    if opts.distance <= radius {
        return Err(Error::invalid(format!(
            "camera distance {} must exceed the scene radius {radius:.3}",
            opts.distance
        )));
    }
    let bounds = Bounds::new(opts.distance - radius, opts.distance + radius)?;
    let hr = Intrinsics::from_fov(opts.hr_res, opts.hr_res, opts.fov_deg.to_radians())?;
    let lr_res = opts.hr_res / opts.scale;
    let lr = Intrinsics::from_fov(lr_res, lr_res, opts.fov_deg.to_radians())?;
    for sub in ["lr", "hr"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (lo, hi) = (opts.min_elevation_deg.to_radians(), opts.max_elevation_deg.to_radians());
    let mut frames = Vec::new();
    for id in 0..opts.n_views + opts.n_test {
        let split = if id < opts.n_views { Split::Train } else { Split::Test };
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        // uniform in solid angle between the two elevations
        let el = rng.gen_range(lo.sin()..=hi.sin()).asin();
        let pose = hemisphere_pose(opts.distance, az, el)?;
        let oracle = oracle_render(scene, &pose, &hr, bounds, opts.steps)?;
        let low = opts.kernel.apply(&oracle.image, opts.scale)?;
        let frame = Frame {
            id,
            split,
            cam_to_world: pose,
            lr_png: format!("lr/{id:03}.png"),
            hr_png: format!("hr/{id:03}.png"),
            lr_float: Some(format!("lr/{id:03}.f64img")),
            hr_float: Some(format!("hr/{id:03}.f64img")),
            hr_depth: Some(format!("hr/{id:03}.depth.f64img")),
        };
        write_image(out_dir, &frame.lr_png, &low, false)?;
        write_image(out_dir, frame.lr_float.as_deref().unwrap(), &low, true)?;
        write_image(out_dir, &frame.hr_png, &oracle.image, false)?;
        write_image(out_dir, frame.hr_float.as_deref().unwrap(), &oracle.image, true)?;
        // rays that miss everything get depth 0, which downstream reads as undefined
        let depth: Vec<f64> = oracle
            .depth
            .iter()
            .zip(&oracle.acc)
            .map(|(&d, &a)| if a > 0.5 { d } else { 0.0 })
            .collect();
        save_depth_float(
            &out_dir.join(frame.hr_depth.as_deref().unwrap()),
            hr.width,
            hr.height,
            &depth,
        )?;
        frames.push(frame);
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        scale: opts.scale,
        kernel: opts.kernel,
        near: bounds.near,
        far: bounds.far,
        white_background: scene.white_background(),
        lr_intrinsics: lr,
        hr_intrinsics: hr,
        frames,
        scene: Some(scene.clone()),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: usize,
    pub split: Split,
    pub lr_camera: Camera,
    pub hr_camera: Camera,
    pub lr: Image,
    pub hr: Image,
    pub hr_depth: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub views: Vec<View>,
}

fn load_view_image(root: &Path, float: Option<&str>, png: &str, dims: (usize, usize)) -> Result<Image> {
    let img = match float {
        Some(rel) if root.join(rel).exists() => Image::load_float(&root.join(rel))?,
        _ => Image::load_png(&root.join(png))?,
    };
    if img.dims() != dims {
        return Err(Error::Dataset(format!(
            "{}: image is {}x{}, manifest declares {}x{}",
            root.join(float.unwrap_or(png)).display(),
            img.width(),
            img.height(),
            dims.0,
            dims.1
        )));
    }
    Ok(img)
}

/// Reads and validates a dataset directory (or a path to its manifest).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (root, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let manifest = DatasetManifest::load(&manifest_path)?;
    let bounds = manifest.bounds();
    let (l, h) = (manifest.lr_intrinsics, manifest.hr_intrinsics);
    let mut views = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let lr = load_view_image(&root, f.lr_float.as_deref(), &f.lr_png, (l.width, l.height))?;
        let hr = load_view_image(&root, f.hr_float.as_deref(), &f.hr_png, (h.width, h.height))?;
        let hr_depth = match &f.hr_depth {
            Some(rel) => {
                let (w, hh, d) = load_depth_float(&root.join(rel))?;
                if (w, hh) != (h.width, h.height) {
                    return Err(Error::Dataset(format!("{rel}: depth map size mismatch")));
                }
                Some(d)
            }
            None => None,
        };
        views.push(View {
            id: f.id,
            split: f.split,
            lr_camera: Camera {
                pose: f.cam_to_world,
                intr: l,
                bounds,
            },
            hr_camera: Camera {
                pose: f.cam_to_world,
                intr: h,
                bounds,
            },
            lr,
            hr,
            hr_depth,
        });
    }
    Ok(Dataset { root, manifest, views })
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn view(&self, id: usize) -> Result<&View> {
        self.views
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::Dataset(format!("no frame with id {id}")))
    }

    /// Training views at LR; the first test view, if any, is the validation view.
    pub fn train_data(&self) -> TrainData {
        let train: Vec<&View> = self.split(Split::Train).collect();
        TrainData {
            cameras: train.iter().map(|v| v.lr_camera).collect(),
            images: train.iter().map(|v| v.lr.clone()).collect(),
            validation: self.split(Split::Test).next().map(|v| (v.lr_camera, v.lr.clone())),
            white_background: self.manifest.white_background,
        }
    }
}
