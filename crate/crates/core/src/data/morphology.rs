//! Binary morphology with the 3×3 cross structuring element.

use super::Mask;

const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

fn cross_hits(mask: &Mask, i: usize, j: usize) -> impl Iterator<Item = Option<bool>> + '_ {
    CROSS.iter().map(move |&(di, dj)| {
        let (r, c) = (i as isize + di, j as isize + dj);
        (r >= 0 && c >= 0 && (r as usize) < mask.height && (c as usize) < mask.width)
            .then(|| mask.get(r as usize, c as usize))
    })
}

/// Pixels with any cross neighbor set.
pub fn dilate(mask: &Mask) -> Mask {
    Mask::from_fn(mask.height, mask.width, |i, j| cross_hits(mask, i, j).any(|v| v == Some(true)))
}

/// Pixels whose whole cross is set; pixels outside the image count as unset.
pub fn erode(mask: &Mask) -> Mask {
    Mask::from_fn(mask.height, mask.width, |i, j| cross_hits(mask, i, j).all(|v| v == Some(true)))
}

/// Morphological gradient: dilation minus erosion.
pub fn make_boundary(mask: &Mask) -> Mask {
    let (d, e) = (dilate(mask), erode(mask));
    Mask::from_fn(mask.height, mask.width, |i, j| d.get(i, j) && !e.get(i, j))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_has_empty_boundary() {
        assert_eq!(make_boundary(&Mask::empty(6, 7)).count(), 0);
    }

    #[test]
    fn single_pixel_boundary_is_a_cross() {
        let mut m = Mask::empty(5, 5);
        m.set(2, 2, true);
        let b = make_boundary(&m);
        assert_eq!(b.count(), 5);
        for (i, j) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(b.get(i, j));
        }
    }

    #[test]
    fn border_pixels_are_eroded() {
        let full = Mask::from_fn(3, 3, |_, _| true);
        let e = erode(&full);
        assert_eq!(e.count(), 1);
        assert!(e.get(1, 1));
    }
}
