//! Forward and backward kernels shared by the autograd tape and the
//! inference paths. All feature maps are `N, C, H, W`.

use crate::error::{Error, Result};

use super::Tensor;

/// Output extent of a convolution or pooling window along one axis.
pub fn window_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if kernel == 0 || kernel > extent + 2 * padding {
        return Err(Error::shape(format!(
            "window {kernel} does not fit extent {extent} with padding {padding}"
        )));
    }
    Ok((extent + 2 * padding - kernel) / stride + 1)
}

/// Geometry of a single 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Ok(ConvGeometry {
            in_channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: window_output_extent(height, kernel, stride, padding)?,
            out_width: window_output_extent(width, kernel, stride, padding)?,
        })
    }

    /// Rows of the unfolded patch matrix: `in_channels * kernel * kernel`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Number of output positions: `out_height * out_width`.
    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*f*f, P]` column matrix. Padding
/// cells are filled with `T::default()`.
pub fn im2col<T: Copy + Default>(image: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::default(); g.patch_len() * p];
    let f = g.kernel;
    for c in 0..g.in_channels {
        for ky in 0..f {
            for kx in 0..f {
                let row = (c * f + ky) * f + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[oy * g.out_width + ox] = image[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an image, summing overlaps.
pub fn col2im(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let p = g.positions();
    let f = g.kernel;
    for c in 0..g.in_channels {
        for ky in 0..f {
            for kx in 0..f {
                let row = (c * f + ky) * f + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            image[dst_row + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`, all row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Checks operand shapes and returns the geometry of `conv2d(x, w, bias)`.
pub fn conv2d_geometry(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    expect_rank(x, 4, "conv2d input")?;
    expect_rank(w, 4, "conv2d kernel")?;
    let (ci, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, fh, fw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wci != ci {
        return Err(Error::shape(format!(
            "conv2d kernel expects {wci} input channels but input has {ci}"
        )));
    }
    if fh != fw {
        return Err(Error::shape(format!("conv2d kernel must be square, got {fh}x{fw}")));
    }
    if bias.shape() != [co] {
        return Err(Error::shape(format!(
            "conv2d bias must have shape [{co}], got {:?}",
            bias.shape()
        )));
    }
    ConvGeometry::new(ci, h, wd, fh, stride, padding)
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv2d_geometry(x, w, bias, stride, padding)?;
    let n = x.shape()[0];
    let co = w.shape()[0];
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; n * co * p];
    for b in 0..n {
        let cols = im2col(&x.data()[b * g.input_len()..(b + 1) * g.input_len()], &g);
        let dst = &mut out[b * co * p..(b + 1) * co * p];
        for (c, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[c]);
        }
        matmul_acc(w.data(), &cols, dst, co, k, p);
    }
    Tensor::new(vec![n, co, g.out_height, g.out_width], out)
}

/// Returns `(dx, dw, dbias)` for `conv2d` given the upstream gradient.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, g: &ConvGeometry, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.shape()[0];
    let co = w.shape()[0];
    let (k, p) = (g.patch_len(), g.positions());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for b in 0..n {
        let cols = im2col(&x.data()[b * g.input_len()..(b + 1) * g.input_len()], g);
        let go = &grad_out.data()[b * co * p..(b + 1) * co * p];
        for c in 0..co {
            let go_row = &go[c * p..(c + 1) * p];
            db[c] += go_row.iter().sum::<f64>();
            let dw_row = &mut dw[c * k..(c + 1) * k];
            for (kk, dwv) in dw_row.iter_mut().enumerate() {
                let col = &cols[kk * p..(kk + 1) * p];
                *dwv += col.iter().zip(go_row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        // dcols[k, p] = sum_c w[c, k] * go[c, p]
        let mut dcols = vec![0.0; k * p];
        for c in 0..co {
            let go_row = &go[c * p..(c + 1) * p];
            for kk in 0..k {
                let wv = w.data()[c * k + kk];
                if wv == 0.0 {
                    continue;
                }
                for (d, &gv) in dcols[kk * p..(kk + 1) * p].iter_mut().zip(go_row) {
                    *d += wv * gv;
                }
            }
        }
        col2im(&dcols, g, &mut dx[b * g.input_len()..(b + 1) * g.input_len()]);
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![co], db).expect("db shape"),
    )
}

/// Flattens everything but the leading batch axis.
pub fn flatten_batch(x: &Tensor) -> (usize, usize) {
    let n = x.shape().first().copied().unwrap_or(1);
    (n, x.len().checked_div(n).unwrap_or(0))
}

pub fn dense_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(w, 2, "dense weight")?;
    let (n, features) = flatten_batch(x);
    let (wi, wo) = (w.shape()[0], w.shape()[1]);
    if features != wi {
        return Err(Error::shape(format!(
            "dense expects {wi} input features but got {features} (input shape {:?})",
            x.shape()
        )));
    }
    if bias.shape() != [wo] {
        return Err(Error::shape(format!(
            "dense bias must have shape [{wo}], got {:?}",
            bias.shape()
        )));
    }
    let mut out: Vec<f64> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    matmul_acc(x.data(), w.data(), &mut out, n, wi, wo);
    Tensor::new(vec![n, wo], out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, wi) = flatten_batch(x);
    let wo = w.shape()[1];
    let go = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; wo];
    for b in 0..n {
        let xr = &x.data()[b * wi..(b + 1) * wi];
        let gr = &go[b * wo..(b + 1) * wo];
        for (d, &gv) in db.iter_mut().zip(gr) {
            *d += gv;
        }
        for i in 0..wi {
            let wrow = &w.data()[i * wo..(i + 1) * wo];
            dx[b * wi + i] = wrow.iter().zip(gr).map(|(a, b)| a * b).sum();
            let dwrow = &mut dw[i * wo..(i + 1) * wo];
            for (d, &gv) in dwrow.iter_mut().zip(gr) {
                *d += xr[i] * gv;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![wo], db).expect("db shape"),
    )
}

pub fn avgpool_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    expect_rank(x, 4, "avgpool input")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if kernel > h || kernel > w {
        return Err(Error::shape(format!(
            "pooling window {kernel} exceeds spatial extent {h}x{w}"
        )));
    }
    let oh = window_output_extent(h, kernel, stride, 0)?;
    let ow = window_output_extent(w, kernel, stride, 0)?;
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kernel {
                    let row = (oy * stride + ky) * w + ox * stride;
                    acc += plane[row..row + kernel].iter().sum::<f64>();
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avgpool_backward(input_shape: &[usize], kernel: usize, stride: usize, grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut dx = Tensor::zeros(input_shape);
    for (plane, go) in dx.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[oy * ow + ox] * inv;
                for ky in 0..kernel {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for v in &mut plane[row..row + kernel] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy. Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    expect_rank(logits, 2, "logits")?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[label];
        probs.extend(row.iter().map(|v| (v - log_sum).exp()));
    }
    Ok((loss / n as f64, probs))
}
