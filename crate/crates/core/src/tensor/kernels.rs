// Slice-level kernels shared by the eager tensor API and the tape.
// All gemm variants accumulate into `out`.

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (ov, bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
}

/// Max-shifted softmax. Entries at -inf get exactly zero mass.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one [C,H,W] image into a [C*kh*kw, out_h*out_w] patch matrix.
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * ncol..(r + 1) * ncol];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if y >= 0
                            && x >= 0
                            && (y as usize) < g.height
                            && (x as usize) < g.width
                        {
                            img[(c * g.height + y as usize) * g.width + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters patch gradients back onto the image.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * ncol..(r + 1) * ncol];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x < 0 || x as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + y as usize) * g.width + x as usize] +=
                            src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}
