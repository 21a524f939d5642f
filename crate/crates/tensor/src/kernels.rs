//! Inner loops shared by forward and backward passes.

/// Dot product with four independent accumulators. The summation order is
/// fixed, so results are reproducible bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
    c
}

/// `y[b,o] = x[b,:] · w[o,:] + bias[o]` with `w` stored as `[out, in]`.
pub fn affine(x: &[f64], w: &[f64], bias: &[f64], batch: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    for b in 0..batch {
        let xr = &x[b * inp..(b + 1) * inp];
        for o in 0..out {
            y[b * out + o] = dot(xr, &w[o * inp..(o + 1) * inp]) + bias[o];
        }
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Input coordinate for output position `o` and kernel tap `k`, if it
    /// falls inside the (unpadded) input.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = bias[o];
                    for c in 0..g.in_ch {
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.height) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.width) else { continue };
                                acc += x[((b * g.in_ch + c) * g.height + iy) * g.width + ix]
                                    * w[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    y[((b * g.out_ch + o) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    y
}

/// Accumulates input, weight and bias gradients of [`conv2d`].
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let grad = dy[((b * g.out_ch + o) * g.out_h + oy) * g.out_w + ox];
                    if grad == 0.0 {
                        continue;
                    }
                    if let Some(db) = db.as_deref_mut() {
                        db[o] += grad;
                    }
                    for c in 0..g.in_ch {
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.height) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.width) else { continue };
                                let xi = ((b * g.in_ch + c) * g.height + iy) * g.width + ix;
                                let wi = ((o * g.in_ch + c) * g.kh + ky) * g.kw + kx;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += grad * w[wi];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += grad * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
