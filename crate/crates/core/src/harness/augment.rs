//! Training-time augmentation. Flips act on image, depth and labels alike;
//! photometric jitter and noise touch the image only.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::AugmentConfig;
use crate::scene::Label;

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub rgb: Array3<f64>,
    pub depth: Array2<f64>,
    pub labels: Array2<Label>,
}

pub fn flip_h<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.slice(ndarray::s![.., ..;-1]).to_owned()
}

pub fn flip_v<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.slice(ndarray::s![..;-1, ..]).to_owned()
}

pub fn augment(
    rgb: &Array3<f64>,
    depth: &Array2<f64>,
    labels: &Array2<Label>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Augmented {
    let mut rgb = rgb.clone();
    let mut depth = depth.clone();
    let mut labels = labels.clone();
    // Draw every random number unconditionally so the stream does not depend
    // on which augmentations are enabled.
    let (fh, fv) = (rng.random::<f64>(), rng.random::<f64>());
    let b = rng.random_range(-1.0..=1.0) * cfg.brightness;
    let c = rng.random_range(-1.0..=1.0) * cfg.contrast;
    if fh < cfg.hflip {
        rgb.invert_axis(Axis(1));
        depth = flip_h(&depth);
        labels = flip_h(&labels);
    }
    if fv < cfg.vflip {
        rgb.invert_axis(Axis(0));
        depth = flip_v(&depth);
        labels = flip_v(&labels);
    }
    let mut rgb = rgb.as_standard_layout().to_owned();
    if b != 0.0 || c != 0.0 {
        let mean = rgb.mean().unwrap_or(0.0);
        rgb.mapv_inplace(|v| ((v - mean) * (1.0 + c) + mean) * (1.0 + b));
    }
    if cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        rgb.mapv_inplace(|v| v + n.sample(rng));
    }
    rgb.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Augmented { rgb, depth, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs() -> (Array3<f64>, Array2<f64>, Array2<Label>) {
        let rgb = Array3::from_shape_fn((4, 6, 3), |(r, c, k)| (r * 6 + c) as f64 / 30.0 + 0.01 * k as f64);
        let depth = Array2::from_shape_fn((4, 6), |(r, c)| 1.0 + (r * 6 + c) as f64);
        let labels = Array2::from_shape_fn((4, 6), |(_, c)| if c < 2 { 1 } else { 2 });
        (rgb, depth, labels)
    }

    #[test]
    fn disabled_is_identity() {
        let (rgb, d, l) = inputs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&rgb, &d, &l, &AugmentConfig::none(), &mut rng);
        assert_eq!(a.rgb, rgb);
        assert_eq!(a.depth, d);
        assert_eq!(a.labels, l);
    }

    #[test]
    fn flips_are_consistent() {
        let (rgb, d, l) = inputs();
        let cfg = AugmentConfig {
            hflip: 1.0,
            vflip: 1.0,
            ..AugmentConfig::none()
        };
        let a = augment(&rgb, &d, &l, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for r in 0..4 {
            for c in 0..6 {
                let (sr, sc) = (3 - r, 5 - c);
                assert_eq!(a.depth[[r, c]], d[[sr, sc]]);
                assert_eq!(a.labels[[r, c]], l[[sr, sc]]);
                assert_eq!(a.rgb[[r, c, 1]], rgb[[sr, sc, 1]]);
            }
        }
    }

    #[test]
    fn photometric_only_touches_rgb_and_stays_in_range() {
        let (rgb, d, l) = inputs();
        let cfg = AugmentConfig {
            hflip: 0.0,
            vflip: 0.0,
            ..Default::default()
        };
        let a = augment(&rgb, &d, &l, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.depth, d);
        assert_eq!(a.labels, l);
        assert_ne!(a.rgb, rgb);
        assert!(a.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        let b = augment(&rgb, &d, &l, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
