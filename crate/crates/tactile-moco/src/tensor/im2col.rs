//! Patch extraction for convolution: one sample at a time.
//!
//! `im2col` lays out every kernel-sized window of a padded C,H,W image as a
//! column so the convolution becomes a single matrix product. `col2im`
//! scatter-adds the columns back, which is exactly the input-gradient rule.

use super::Scalar;

pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn kernel_cols(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// cols has layout [C*kh*kw, out_h*out_w].
pub fn im2col<E: Scalar>(img: &[E], g: &ConvGeom, cols: &mut [E]) {
    debug_assert_eq!(img.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.kernel_cols() * g.out_spatial());
    let os = g.out_spatial();
    let mut row = 0usize;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * os..(row + 1) * os];
                let mut idx = 0usize;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        for _ in 0..g.out_w {
                            dst[idx] = E::zero();
                            idx += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        dst[idx] = if iw < 0 || iw >= g.width as isize {
                            E::zero()
                        } else {
                            src_row[iw as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of `cols` back into an image buffer (accumulates).
pub fn col2im_acc<E: Scalar>(cols: &[E], g: &ConvGeom, img: &mut [E]) {
    debug_assert_eq!(img.len(), g.channels * g.height * g.width);
    let os = g.out_spatial();
    let mut row = 0usize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * os..(row + 1) * os];
                let mut idx = 0usize;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        idx += g.out_w;
                        continue;
                    }
                    let dst_row =
                        &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst_row[iw as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_identity_kernel_geometry() {
        // 1 channel, 3x3 image, 2x2 kernel, stride 1, no padding -> 4 windows
        let g = ConvGeom {
            channels: 1,
            height: 3,
            width: 3,
            kh: 2,
            kw: 2,
            stride: 1,
            padding: 0,
            out_h: 2,
            out_w: 2,
        };
        let img: Vec<f64> = (1..=9).map(|x| x as f64).collect();
        let mut cols = vec![0.0; g.kernel_cols() * g.out_spatial()];
        im2col(&img, &g, &mut cols);
        // first row of cols = top-left element of each window
        assert_eq!(&cols[0..4], &[1.0, 2.0, 4.0, 5.0]);
        // last row = bottom-right element of each window
        assert_eq!(&cols[12..16], &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn col2im_roundtrip_counts_window_coverage() {
        let g = ConvGeom {
            channels: 1,
            height: 3,
            width: 3,
            kh: 2,
            kw: 2,
            stride: 1,
            padding: 0,
            out_h: 2,
            out_w: 2,
        };
        let img = vec![1.0f64; 9];
        let mut cols = vec![0.0; g.kernel_cols() * g.out_spatial()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0f64; 9];
        col2im_acc(&cols, &g, &mut back);
        // each pixel accumulates once per window covering it
        assert_eq!(
            back,
            vec![1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]
        );
    }
}
