//! Train-time image augmentation.

use std::str::FromStr;

use rand::Rng;

use super::image::ImageTensor;

/// Augmentation menu. Flip mirrors horizontally with probability 0.5; crop
/// zero-pads 4 pixels on every side and cuts a random window of the original
/// size back out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    Flip,
    Crop,
    FlipCrop,
}

impl Augmentation {
    fn flips(self) -> bool {
        matches!(self, Augmentation::Flip | Augmentation::FlipCrop)
    }

    fn crops(self) -> bool {
        matches!(self, Augmentation::Crop | Augmentation::FlipCrop)
    }
}

impl FromStr for Augmentation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Augmentation::None),
            "flip" => Ok(Augmentation::Flip),
            "crop" => Ok(Augmentation::Crop),
            "flip+crop" => Ok(Augmentation::FlipCrop),
            other => Err(format!(
                "unknown augmentation `{other}` (expected none, flip, crop, or flip+crop)"
            )),
        }
    }
}

const CROP_PAD: usize = 4;

/// Applies the configured augmentations. Random draws happen in a fixed
/// order (flip coin, then crop row offset, then column offset) so a seeded
/// generator reproduces the same transform sequence.
pub fn augment<R: Rng>(img: &ImageTensor, spec: Augmentation, rng: &mut R) -> ImageTensor {
    let mut out = img.clone();
    if spec.flips() && rng.gen_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if spec.crops() {
        let dy = rng.gen_range(0..=2 * CROP_PAD);
        let dx = rng.gen_range(0..=2 * CROP_PAD);
        out = crop_at(&out, dy, dx);
    }
    out
}

fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in (0..img.width).rev() {
                data.push(img.at(c, y, x));
            }
        }
    }
    ImageTensor::new(img.channels, img.height, img.width, data)
}

/// Reads the original-size window whose top-left corner sits at (dy, dx) of
/// the 4-pixel zero-padded image; positions outside the source are zero.
pub(crate) fn crop_at(img: &ImageTensor, dy: usize, dx: usize) -> ImageTensor {
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        for y in 0..img.height {
            let sy = y as isize + dy as isize - CROP_PAD as isize;
            for x in 0..img.width {
                let sx = x as isize + dx as isize - CROP_PAD as isize;
                let inside = sy >= 0 && sy < img.height as isize && sx >= 0 && sx < img.width as isize;
                data.push(if inside { img.at(c, sy as usize, sx as usize) } else { 0.0 });
            }
        }
    }
    ImageTensor::new(img.channels, img.height, img.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image() -> ImageTensor {
        let data: Vec<f32> = (0..16 * 16).map(|i| i as f32 / 255.0).collect();
        ImageTensor::new(1, 16, 16, data)
    }

    #[test]
    fn none_is_identity() {
        let img = gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, Augmentation::None, &mut rng);
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn flip_leaves_symmetric_image_unchanged() {
        let mut data = vec![0f32; 4 * 4];
        for y in 0..4 {
            for x in 0..4 {
                let v = [0.1, 0.9, 0.9, 0.1][x];
                data[y * 4 + x] = v + y as f32 * 0.01;
            }
        }
        let img = ImageTensor::new(1, 4, 4, data.clone());
        let flipped = flip_horizontal(&img);
        assert_eq!(flipped.data, data);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = gradient_image();
        let back = flip_horizontal(&flip_horizontal(&img));
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn flip_fires_about_half_the_time() {
        let img = gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flips = (0..2000)
            .filter(|_| augment(&img, Augmentation::Flip, &mut rng).data != img.data)
            .count();
        assert!((800..=1200).contains(&flips), "flips {flips}");
    }

    #[test]
    fn crop_preserves_dimensions_for_every_offset() {
        let img = gradient_image();
        for dy in 0..=8 {
            for dx in 0..=8 {
                let out = crop_at(&img, dy, dx);
                assert_eq!((out.channels, out.height, out.width), (1, 16, 16));
            }
        }
    }

    #[test]
    fn center_crop_is_identity() {
        let img = gradient_image();
        let out = crop_at(&img, CROP_PAD, CROP_PAD);
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn corner_crop_injects_zero_border() {
        let img = ImageTensor::new(1, 4, 4, vec![1.0; 16]);
        // window at (0,0) reads source coordinates shifted by -4: fully padding
        let out = crop_at(&img, 0, 0);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_offsets_cover_full_range() {
        let img = gradient_image();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..3000 {
            let dy = rng.gen_range(0..=8);
            let dx = rng.gen_range(0..=8);
            seen.insert((dy, dx));
            let out = crop_at(&img, dy, dx);
            assert_eq!(out.data.len(), img.data.len());
        }
        assert_eq!(seen.len(), 81);
    }

    #[test]
    fn augmentation_parses_menu() {
        assert_eq!("none".parse::<Augmentation>().unwrap(), Augmentation::None);
        assert_eq!("flip+crop".parse::<Augmentation>().unwrap(), Augmentation::FlipCrop);
        assert!("rotate".parse::<Augmentation>().is_err());
    }
}
