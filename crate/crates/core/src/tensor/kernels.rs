//! Dense kernels shared by the tape ops. All loops run in a fixed order so
//! results are reproducible bit for bit.

use super::Real;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn matmul_tn_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn matmul_nt_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    // Eight independent partial sums keep the loop vectorizable while the
    // combination order stays fixed.
    let mut acc = [0.0 as Real; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a 3x3, padding-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * 9
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold one image `[C,H,W]` into columns `[C*9, Ho*Wo]`.
pub fn im2col(img: &[Real], g: ConvGeom, cols: &mut [Real]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        cols[row + oy * wo + ox] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub fn col2im_acc(cols: &[Real], g: ConvGeom, img: &mut [Real]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let p = ho * wo;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        plane[iy as usize * g.width + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}
