//! Spatial kernels on `[C, H, W]` buffers: im2col convolution lowering,
//! bilinear resampling, reflect padding and cropping.

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let plane = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let in_row = (c * self.height + iy as usize) * self.width;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(row * plane + oy * ow + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

pub fn im2col(input: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let mut col = vec![0.0; geom.col_rows() * geom.col_cols()];
    geom.for_each_tap(|ci, ii| col[ci] = input[ii]);
    col
}

pub fn col2im(col: &[f64], geom: &ConvGeometry, grad_input: &mut [f64]) {
    geom.for_each_tap(|ci, ii| grad_input[ii] += col[ci]);
}

/// Per-axis source taps for bilinear resampling with half-pixel centres
/// (`align_corners = false`): `(low, high, weight_of_high)`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn resize_bilinear(
    input: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(height, out_h);
    let tx = bilinear_taps(width, out_w);
    let mut out = vec![0.0; channels * out_h * out_w];
    for c in 0..channels {
        let src = &input[c * height * width..(c + 1) * height * width];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * width + x0] * (1.0 - fx) + src[y0 * width + x1] * fx;
                let bottom = src[y1 * width + x0] * (1.0 - fx) + src[y1 * width + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(
    grad_out: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    grad_input: &mut [f64],
) {
    let ty = bilinear_taps(height, out_h);
    let tx = bilinear_taps(width, out_w);
    for c in 0..channels {
        let g = &grad_out[c * out_h * out_w..(c + 1) * out_h * out_w];
        let dst = &mut grad_input[c * height * width..(c + 1) * height * width];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[y0 * width + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * width + x1] += v * (1.0 - fy) * fx;
                dst[y1 * width + x0] += v * fy * (1.0 - fx);
                dst[y1 * width + x1] += v * fy * fx;
            }
        }
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let i = i % period;
    if i < n {
        i
    } else {
        period - i
    }
}

/// Extends each plane to `out_h × out_w` by mirroring across the bottom
/// and right edges (the edge row/column itself is not repeated). Pads
/// longer than the input fold back and forth.
pub fn reflect_pad(
    input: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert!(out_h >= height && out_w >= width);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        for y in 0..out_h {
            let sy = reflect(y, height);
            for x in 0..out_w {
                out.push(input[(c * height + sy) * width + reflect(x, width)]);
            }
        }
    }
    out
}

/// Keeps the top-left `out_h × out_w` window of each plane.
pub fn crop(input: &[f64], channels: usize, height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        for y in 0..out_h {
            let start = (c * height + y) * width;
            out.extend_from_slice(&input[start..start + out_w]);
        }
    }
    out
}
