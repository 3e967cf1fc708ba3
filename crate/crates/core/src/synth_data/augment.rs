//! Label-preserving spatial symmetries for training-time augmentation.
//!
//! Flips and transposes move block boundaries and change motion direction but
//! leave blur, quantization and frame-drop statistics, and hence the label,
//! unchanged.

use ndarray::{s, Axis};

use crate::model_zoo::VideoClip;

/// Number of spatial symmetries of a square frame.
pub const DIHEDRAL_VARIANTS: u8 = 8;

/// Applies symmetry `variant` in `0..8`: bit 0 flips horizontally, bit 1
/// flips vertically, bit 2 transposes height and width (skipped on
/// non-square frames). Variant 0 is the identity.
pub fn dihedral(clip: &VideoClip, variant: u8) -> VideoClip {
    let mut view = clip.data().view();
    if variant & 1 != 0 {
        view.slice_axis_inplace(Axis(3), ndarray::Slice::new(0, None, -1));
    }
    if variant & 2 != 0 {
        view = view.slice_move(s![.., .., ..;-1, ..]);
    }
    if variant & 4 != 0 && clip.height() == clip.width() {
        view.swap_axes(2, 3);
    }
    VideoClip::from_array_unchecked(view.as_standard_layout().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn ramp(h: usize, w: usize) -> VideoClip {
        VideoClip::new(Array4::from_shape_fn((2, 3, h, w), |(t, c, y, x)| {
            (t * 1000 + c * 100 + y * 10 + x) as f64 / 4096.0
        }))
        .unwrap()
    }

    #[test]
    fn identity_and_involutions() {
        let c = ramp(4, 4);
        assert_eq!(dihedral(&c, 0), c);
        for v in [1, 2, 4] {
            assert_eq!(dihedral(&dihedral(&c, v), v), c);
        }
    }

    #[test]
    fn flips_and_transpose_move_pixels() {
        let c = ramp(4, 4);
        let d = c.data();
        assert_eq!(dihedral(&c, 1).data()[[1, 2, 3, 0]], d[[1, 2, 3, 3]]);
        assert_eq!(dihedral(&c, 2).data()[[1, 2, 0, 1]], d[[1, 2, 3, 1]]);
        assert_eq!(dihedral(&c, 4).data()[[0, 1, 2, 3]], d[[0, 1, 3, 2]]);
    }

    #[test]
    fn variants_preserve_pixel_multiset() {
        let c = ramp(4, 6);
        let mut want: Vec<f64> = c.data().iter().copied().collect();
        want.sort_by(f64::total_cmp);
        for v in 0..DIHEDRAL_VARIANTS {
            let out = dihedral(&c, v);
            assert_eq!(out.geometry(), c.geometry());
            let mut got: Vec<f64> = out.data().iter().copied().collect();
            got.sort_by(f64::total_cmp);
            assert_eq!(got, want);
        }
    }
}
