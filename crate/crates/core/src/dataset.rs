//! On-disk dataset layout.
//!
//! ```text
//! manifest.txt                 one "scene_kkkk train|test" line per scene
//! scene_kkkk/view_iii/img_jj.pfm
//!                     lights.txt
//!                     cam.txt
//!                     gt_depth.pfm
//!                     gt_normal.pfm
//!                     mask.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use diffcore::Tensor;

use crate::error::{config, format_err, IoContext, Result};
use crate::io;
use crate::render::{render_scene, MultiLightView, RenderConfig};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub scenes: Vec<(String, Split)>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).at(&path)?;
        let mut scenes = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let split = match parts.as_slice() {
                [_, "train"] => Split::Train,
                [_, "test"] => Split::Test,
                _ => return Err(format_err("manifest", format!("bad line {line:?}"))),
            };
            scenes.push((parts[0].to_string(), split));
        }
        if scenes.is_empty() {
            return Err(format_err("manifest", format!("{} lists no scenes", path.display())));
        }
        Ok(Self { scenes })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let mut text = format!("# {} scenes\n", self.scenes.len());
        for (name, split) in &self.scenes {
            text.push_str(&format!("{name} {}\n", split.as_str()));
        }
        let path = root.join(MANIFEST);
        fs::write(&path, text).at(&path)
    }

    pub fn split(&self, split: Split) -> Vec<&str> {
        self.scenes
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

pub fn scene_name(k: usize) -> String {
    format!("scene_{k:04}")
}

pub fn view_dir(root: &Path, scene: &str, view: usize) -> PathBuf {
    root.join(scene).join(format!("view_{view:03}"))
}

pub fn write_view(dir: &Path, view: &MultiLightView) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for (j, img) in view.images.iter().enumerate() {
        io::write_pfm(&dir.join(format!("img_{j:02}.pfm")), img)?;
    }
    io::write_lights(&dir.join("lights.txt"), &view.light_dirs)?;
    io::write_camera(&dir.join("cam.txt"), &view.camera)?;
    io::write_pfm(&dir.join("gt_depth.pfm"), &view.gt_depth)?;
    io::write_pfm(&dir.join("gt_normal.pfm"), &view.gt_normal)?;
    io::write_pgm(&dir.join("mask.pgm"), &view.mask, view.camera.size)
}

pub fn read_view(dir: &Path) -> Result<MultiLightView> {
    let light_dirs = io::read_lights(&dir.join("lights.txt"))?;
    let camera = io::read_camera(&dir.join("cam.txt"))?;
    let images = (0..light_dirs.len())
        .map(|j| io::read_pfm(&dir.join(format!("img_{j:02}.pfm"))))
        .collect::<Result<Vec<_>>>()?;
    let gt_depth = io::read_pfm(&dir.join("gt_depth.pfm"))?;
    let gt_normal = io::read_pfm(&dir.join("gt_normal.pfm"))?;
    let (mask, size) = io::read_pgm(&dir.join("mask.pgm"))?;
    let (h, w) = camera.size;
    let consistent = size == camera.size
        && gt_depth.shape() == [h, w]
        && gt_normal.shape() == [3, h, w]
        && images.iter().all(|i| i.shape() == [3, h, w]);
    if !consistent {
        return Err(format_err("view", format!("{}: inconsistent image sizes", dir.display())));
    }
    Ok(MultiLightView {
        images,
        light_dirs,
        camera,
        gt_depth,
        gt_normal,
        mask,
    })
}

/// Reads all views of one scene in index order.
pub fn read_scene(root: &Path, scene: &str) -> Result<Vec<MultiLightView>> {
    let mut views = Vec::new();
    while view_dir(root, scene, views.len()).is_dir() {
        views.push(read_view(&view_dir(root, scene, views.len()))?);
    }
    if views.len() < 2 {
        return Err(format_err("dataset", format!("scene {scene} has {} view(s)", views.len())));
    }
    Ok(views)
}

/// Renders `train_scenes + test_scenes` scenes into `root`. Test scenes
/// follow the training scenes in index order.
pub fn generate_dataset(cfg: &RenderConfig, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let total = cfg.train_scenes + cfg.test_scenes;
    if total == 0 {
        return Err(config("dataset needs at least one scene"));
    }
    fs::create_dir_all(root).at(root)?;
    let mut manifest = Manifest { scenes: Vec::new() };
    for k in 0..total {
        let name = scene_name(k);
        let (_, views) = render_scene(cfg, k)?;
        for (i, view) in views.iter().enumerate() {
            write_view(&view_dir(root, &name, i), view)?;
        }
        let split = if k < cfg.train_scenes { Split::Train } else { Split::Test };
        log::info!("rendered {name} ({})", split.as_str());
        manifest.scenes.push((name, split));
    }
    manifest.write(root)?;
    Ok(manifest)
}

/// Keeps the first `count` lights of a view.
pub fn with_lights(view: &MultiLightView, count: usize) -> MultiLightView {
    let n = count.min(view.images.len()).max(1);
    MultiLightView {
        images: view.images[..n].to_vec(),
        light_dirs: view.light_dirs[..n].to_vec(),
        ..view.clone()
    }
}

/// Mask as a `[H, W]` 0/1 tensor.
pub fn mask_tensor(mask: &[bool], size: (usize, usize)) -> Tensor<f32> {
    Tensor::new(vec![size.0, size.1], mask.iter().map(|&m| m as u8 as f32).collect()).expect("mask length matches size")
}
