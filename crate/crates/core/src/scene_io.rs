//! One-directory-per-scene storage: `rgb.png` (8-bit RGB), `depth.png`
//! (16-bit, millimetres, 0 = invalid), `labels.png` (8-bit instance ids) and
//! `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CameraIntrinsics, Label, PlanarScene, PlanePrimitive};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub format_version: u32,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub planes: Vec<PlaneMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneMeta {
    pub normal: [f64; 3],
    pub offset: f64,
    #[serde(default)]
    pub polygon: Vec<[f64; 3]>,
    #[serde(default)]
    pub albedo: [f64; 3],
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_labels_png(labels: &Array2<Label>, path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    if let Some(&l) = labels.iter().find(|&&l| l > u8::MAX as Label) {
        return Err(Error::Format(format!("label {l} does not fit in 8 bits")));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([labels[[y as usize, x as usize]] as u8])
    });
    img.save(path).map_err(image_err(path))
}

pub fn load_labels_png(path: &Path) -> Result<Array2<Label>> {
    let img = image::open(path).map_err(image_err(path))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8-bit grayscale labels, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] as Label
    }))
}

pub fn save_depth_png(depth: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = depth.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let d = depth[[y as usize, x as usize]];
        Luma([(d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16])
    });
    img.save(path).map_err(image_err(path))
}

pub fn load_depth_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(image_err(path))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 16-bit grayscale depth, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] as f64 / 1000.0
    }))
}

pub fn rgb_to_image(rgb: &Array3<f64>) -> RgbImage {
    let (h, w, _) = rgb.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k| (rgb[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_rgb_png(rgb: &Array3<f64>, path: &Path) -> Result<()> {
    rgb_to_image(rgb).save(path).map_err(image_err(path))
}

pub fn load_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        img.get_pixel(c as u32, r as u32)[k] as f64 / 255.0
    }))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_scene(scene: &PlanarScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_rgb_png(&scene.rgb, &dir.join("rgb.png"))?;
    save_depth_png(&scene.depth, &dir.join("depth.png"))?;
    save_labels_png(&scene.labels, &dir.join("labels.png"))?;
    let meta = SceneMeta {
        format_version: FORMAT_VERSION,
        seed: scene.seed,
        intrinsics: scene.intrinsics,
        planes: scene
            .planes
            .iter()
            .map(|p| PlaneMeta {
                normal: p.normal,
                offset: p.offset,
                polygon: p.polygon.clone(),
                albedo: p.albedo,
            })
            .collect(),
    };
    write_json(&meta, &dir.join("meta.json"))
}

pub fn load_scene(dir: &Path) -> Result<PlanarScene> {
    let meta: SceneMeta = read_json(&dir.join("meta.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {}",
            dir.display(),
            meta.format_version
        )));
    }
    let rgb = load_rgb_png(&dir.join("rgb.png"))?;
    let depth = load_depth_png(&dir.join("depth.png"))?;
    let labels = load_labels_png(&dir.join("labels.png"))?;
    let shape = (meta.intrinsics.height, meta.intrinsics.width);
    if depth.dim() != shape || labels.dim() != shape || (rgb.dim().0, rgb.dim().1) != shape {
        return Err(Error::Format(format!(
            "{}: image sizes disagree with intrinsics {shape:?}",
            dir.display()
        )));
    }
    Ok(PlanarScene {
        rgb,
        depth,
        labels,
        intrinsics: meta.intrinsics,
        planes: meta
            .planes
            .into_iter()
            .map(|p| PlanePrimitive {
                normal: p.normal,
                offset: p.offset,
                polygon: p.polygon,
                albedo: p.albedo,
            })
            .collect(),
        seed: meta.seed,
    })
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join("scenes").join(format!("{index:05}"))
}
