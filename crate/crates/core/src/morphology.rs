//! Binary erosion and dilation with a square structuring element of ones.
//!
//! Pixels outside the mask count as 0, so erosion clears a border of
//! `kernel / 2` pixels while dilation is unaffected by the edge.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Mask, Result};

fn check_kernel(kernel: usize) -> Result<usize> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidConfig(format!("morphology kernel must be odd and at least 1, got {kernel}")));
    }
    Ok(kernel / 2)
}

/// One separable pass along rows (`horizontal`) or columns. A window reports
/// its count of ones among in-bounds pixels and whether it was fully inside.
fn pass(src: &[u8], h: usize, w: usize, radius: usize, horizontal: bool, keep: impl Fn(usize, bool) -> bool) -> Vec<u8> {
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    let mut out = vec![0u8; h * w];
    let mut prefix = vec![0usize; len + 1];
    for line in 0..lines {
        for i in 0..len {
            prefix[i + 1] = prefix[i] + usize::from(src[at(line, i)]);
        }
        for i in 0..len {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(len);
            let inside = i >= radius && i + radius < len;
            out[at(line, i)] = u8::from(keep(prefix[hi] - prefix[lo], inside));
        }
    }
    out
}

/// 1 iff every pixel under the kernel is inside the mask and set.
pub fn erode(mask: &Mask, kernel: usize) -> Result<Mask> {
    let r = check_kernel(kernel)?;
    let (h, w) = mask.shape();
    let full = |count: usize, inside: bool| inside && count == kernel;
    let rows = pass(mask.data(), h, w, r, true, full);
    Ok(Mask::from_raw(h, w, pass(&rows, h, w, r, false, full)))
}

/// 1 iff any in-bounds pixel under the kernel is set.
pub fn dilate(mask: &Mask, kernel: usize) -> Result<Mask> {
    let r = check_kernel(kernel)?;
    let (h, w) = mask.shape();
    let any = |count: usize, _| count > 0;
    let rows = pass(mask.data(), h, w, r, true, any);
    Ok(Mask::from_raw(h, w, pass(&rows, h, w, r, false, any)))
}

/// Erosion followed by dilation.
pub fn open(mask: &Mask, kernel: usize) -> Result<Mask> {
    dilate(&erode(mask, kernel)?, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_stays_empty() {
        let z = Mask::zeros(6, 5);
        assert_eq!(erode(&z, 3).unwrap(), z);
        assert_eq!(dilate(&z, 3).unwrap(), z);
    }

    #[test]
    fn single_pixel() {
        let mut rows = [[0u8; 5]; 5];
        rows[2][2] = 1;
        let m = Mask::from_rows(&rows).unwrap();
        assert_eq!(erode(&m, 3).unwrap(), Mask::zeros(5, 5));
        let expected = Mask::from_rows(&[
            [0, 0, 0, 0, 0],
            [0, 1, 1, 1, 0],
            [0, 1, 1, 1, 0],
            [0, 1, 1, 1, 0],
            [0, 0, 0, 0, 0],
        ])
        .unwrap();
        assert_eq!(dilate(&m, 3).unwrap(), expected);
    }

    #[test]
    fn all_ones_border() {
        let ones = Mask::ones(4, 5);
        let eroded = erode(&ones, 3).unwrap();
        let expected = Mask::from_rows(&[[0, 0, 0, 0, 0], [0, 1, 1, 1, 0], [0, 1, 1, 1, 0], [0, 0, 0, 0, 0]]).unwrap();
        assert_eq!(eroded, expected);
        assert_eq!(dilate(&ones, 3).unwrap(), ones);
    }

    #[test]
    fn kernel_one_is_identity_and_even_rejected() {
        let m = Mask::from_rows(&[[1, 0, 1], [0, 1, 1]]).unwrap();
        assert_eq!(erode(&m, 1).unwrap(), m);
        assert_eq!(dilate(&m, 1).unwrap(), m);
        assert!(erode(&m, 2).is_err());
        assert!(dilate(&m, 0).is_err());
    }

    #[test]
    fn opening_removes_speckle_keeps_blocks() {
        let mut rows = [[0u8; 8]; 8];
        rows[0][7] = 1;
        for r in rows.iter_mut().take(6).skip(2) {
            r[1..5].fill(1);
        }
        let m = Mask::from_rows(&rows).unwrap();
        let opened = open(&m, 3).unwrap();
        assert_eq!(opened.get(0, 7), 0);
        assert_eq!(opened.count_ones(), 16);
    }
}
