//! Differentiable tensor operations.
//!
//! Every operation validates shapes, computes its forward value, and records
//! a pull-back closure on the tape when any input participates in
//! differentiation. Passing `None` for the tape runs the pure value path.

use rand::Rng;

use super::{Mode, Tape, Tensor, TensorError};

fn track(tape: Option<&Tape>, inputs: &[&Tensor]) -> bool {
    tape.is_some() && inputs.iter().any(|t| t.grad_enabled())
}

/// Elementwise addition of same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimensionMismatch(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<f32> = {
        let (av, bv) = (a.data(), b.data());
        av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
    };
    let recorded = track(tape, &[a, b]);
    let y = Tensor::from_parts(a.shape().to_vec(), out, recorded);
    if recorded {
        let (a, b, y2) = (a.clone(), b.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            if a.grad_enabled() {
                a.accumulate_grad(&gy);
            }
            if b.grad_enabled() {
                b.accumulate_grad(&gy);
            }
        }));
    }
    Ok(y)
}

/// Elementwise (Hadamard) product of same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::DimensionMismatch(format!(
            "mul: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<f32> = {
        let (av, bv) = (a.data(), b.data());
        av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
    };
    let recorded = track(tape, &[a, b]);
    let y = Tensor::from_parts(a.shape().to_vec(), out, recorded);
    if recorded {
        let (a, b, y2) = (a.clone(), b.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            if a.grad_enabled() {
                let bv = b.data();
                let ga: Vec<f32> = gy.iter().zip(bv.iter()).map(|(g, v)| g * v).collect();
                drop(bv);
                a.accumulate_grad(&ga);
            }
            if b.grad_enabled() {
                let av = a.data();
                let gb: Vec<f32> = gy.iter().zip(av.iter()).map(|(g, v)| g * v).collect();
                drop(av);
                b.accumulate_grad(&gb);
            }
        }));
    }
    Ok(y)
}

/// Sum of all elements, as a scalar.
pub fn sum(x: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    let total: f64 = x.data().iter().map(|&v| v as f64).sum();
    let recorded = track(tape, &[x]);
    let y = Tensor::from_parts(vec![1], vec![total as f32], recorded);
    if recorded {
        let (x, y2) = (x.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            x.accumulate_grad(&vec![gy[0]; x.numel()]);
        }));
    }
    Ok(y)
}

/// Mean of all elements, as a scalar.
pub fn mean(x: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    let n = x.numel();
    let total: f64 = x.data().iter().map(|&v| v as f64).sum();
    let recorded = track(tape, &[x]);
    let y = Tensor::from_parts(vec![1], vec![(total / n as f64) as f32], recorded);
    if recorded {
        let (x, y2) = (x.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            x.accumulate_grad(&vec![gy[0] / n as f32; n]);
        }));
    }
    Ok(y)
}

fn linear_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
        return Err(TensorError::DimensionMismatch(format!(
            "linear expects x [batch, in], w [in, out], b [out]; got {xs:?}, {ws:?}, {bs:?}"
        )));
    }
    if xs[1] != ws[0] || ws[1] != bs[0] {
        return Err(TensorError::DimensionMismatch(format!(
            "linear: x {xs:?} incompatible with w {ws:?} / b {bs:?}"
        )));
    }
    Ok((xs[0], xs[1], ws[1]))
}

/// Fully connected layer: `y = x·w + b`, bias broadcast over the batch.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    let (batch, n_in, n_out) = linear_shapes(x, w, b)?;
    let mut out = vec![0f32; batch * n_out];
    {
        let (xv, wv, bv) = (x.data(), w.data(), b.data());
        for i in 0..batch {
            let row = &xv[i * n_in..(i + 1) * n_in];
            let dst = &mut out[i * n_out..(i + 1) * n_out];
            dst.copy_from_slice(&bv);
            for (k, &xk) in row.iter().enumerate() {
                let wrow = &wv[k * n_out..(k + 1) * n_out];
                for (d, &wkj) in dst.iter_mut().zip(wrow) {
                    *d += xk * wkj;
                }
            }
        }
    }
    let recorded = track(tape, &[x, w, b]);
    let y = Tensor::from_parts(vec![batch, n_out], out, recorded);
    if recorded {
        let (x, w, b, y2) = (x.clone(), w.clone(), b.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            if x.grad_enabled() {
                let wv = w.data();
                let mut gx = vec![0f32; batch * n_in];
                for i in 0..batch {
                    let grow = &gy[i * n_out..(i + 1) * n_out];
                    let dst = &mut gx[i * n_in..(i + 1) * n_in];
                    for (k, d) in dst.iter_mut().enumerate() {
                        let wrow = &wv[k * n_out..(k + 1) * n_out];
                        *d = grow.iter().zip(wrow).map(|(g, wkj)| g * wkj).sum();
                    }
                }
                drop(wv);
                x.accumulate_grad(&gx);
            }
            if w.grad_enabled() {
                let xv = x.data();
                let mut gw = vec![0f32; n_in * n_out];
                for i in 0..batch {
                    let row = &xv[i * n_in..(i + 1) * n_in];
                    let grow = &gy[i * n_out..(i + 1) * n_out];
                    for (k, &xk) in row.iter().enumerate() {
                        let dst = &mut gw[k * n_out..(k + 1) * n_out];
                        for (d, &g) in dst.iter_mut().zip(grow) {
                            *d += xk * g;
                        }
                    }
                }
                drop(xv);
                w.accumulate_grad(&gw);
            }
            if b.grad_enabled() {
                let mut gb = vec![0f32; n_out];
                for i in 0..batch {
                    let grow = &gy[i * n_out..(i + 1) * n_out];
                    for (d, &g) in gb.iter_mut().zip(grow) {
                        *d += g;
                    }
                }
                b.accumulate_grad(&gb);
            }
        }));
    }
    Ok(y)
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_shapes(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvDims, TensorError> {
    let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
    if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
        return Err(TensorError::DimensionMismatch(format!(
            "conv2d expects x [b, c, h, w], w [co, ci, k, k], b [co]; got {xs:?}, {ws:?}, {bs:?}"
        )));
    }
    if ws[2] != ws[3] {
        return Err(TensorError::DimensionMismatch(format!(
            "conv2d kernel must be square, got {}x{}",
            ws[2], ws[3]
        )));
    }
    if xs[1] != ws[1] {
        return Err(TensorError::DimensionMismatch(format!(
            "conv2d: input has {} channels, kernel expects {}",
            xs[1], ws[1]
        )));
    }
    if bs[0] != ws[0] {
        return Err(TensorError::DimensionMismatch(format!(
            "conv2d: bias has {} channels, kernel produces {}",
            bs[0], ws[0]
        )));
    }
    if stride == 0 {
        return Err(TensorError::DimensionMismatch("conv2d: stride must be positive".into()));
    }
    let (h, w_ext, k) = (xs[2], xs[3], ws[2]);
    if k > h + 2 * pad || k > w_ext + 2 * pad {
        return Err(TensorError::KernelTooLarge { k, h, w: w_ext });
    }
    Ok(ConvDims {
        batch: xs[0],
        c_in: xs[1],
        h,
        w: w_ext,
        c_out: ws[0],
        k,
        h_out: (h + 2 * pad - k) / stride + 1,
        w_out: (w_ext + 2 * pad - k) / stride + 1,
    })
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    tape: Option<&Tape>,
) -> Result<Tensor, TensorError> {
    let d = conv_shapes(x, w, b, stride, pad)?;
    let mut out = vec![0f32; d.batch * d.c_out * d.h_out * d.w_out];
    {
        let (xv, wv, bv) = (x.data(), w.data(), b.data());
        for bi in 0..d.batch {
            for co in 0..d.c_out {
                let bias = bv[co];
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        let mut acc = bias;
                        for ci in 0..d.c_in {
                            let xplane = bi * d.c_in * d.h * d.w + ci * d.h * d.w;
                            let wplane = co * d.c_in * d.k * d.k + ci * d.k * d.k;
                            for ky in 0..d.k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let xrow = xplane + iy as usize * d.w;
                                let wrow = wplane + ky * d.k;
                                for kx in 0..d.k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += xv[xrow + ix as usize] * wv[wrow + kx];
                                }
                            }
                        }
                        out[bi * d.c_out * d.h_out * d.w_out
                            + co * d.h_out * d.w_out
                            + oy * d.w_out
                            + ox] = acc;
                    }
                }
            }
        }
    }
    let recorded = track(tape, &[x, w, b]);
    let y = Tensor::from_parts(vec![d.batch, d.c_out, d.h_out, d.w_out], out, recorded);
    if recorded {
        let (x, w, b, y2) = (x.clone(), w.clone(), b.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let want_gx = x.grad_enabled();
            let want_gw = w.grad_enabled();
            let want_gb = b.grad_enabled();
            let mut gx = if want_gx { vec![0f32; x.numel()] } else { Vec::new() };
            let mut gw = if want_gw { vec![0f32; w.numel()] } else { Vec::new() };
            let mut gb = if want_gb { vec![0f32; d.c_out] } else { Vec::new() };
            {
                let xv = x.data();
                let wv = w.data();
                for bi in 0..d.batch {
                    for co in 0..d.c_out {
                        for oy in 0..d.h_out {
                            for ox in 0..d.w_out {
                                let g = gy[bi * d.c_out * d.h_out * d.w_out
                                    + co * d.h_out * d.w_out
                                    + oy * d.w_out
                                    + ox];
                                if want_gb {
                                    gb[co] += g;
                                }
                                if !want_gx && !want_gw {
                                    continue;
                                }
                                for ci in 0..d.c_in {
                                    let xplane = bi * d.c_in * d.h * d.w + ci * d.h * d.w;
                                    let wplane = co * d.c_in * d.k * d.k + ci * d.k * d.k;
                                    for ky in 0..d.k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= d.h as isize {
                                            continue;
                                        }
                                        let xrow = xplane + iy as usize * d.w;
                                        let wrow = wplane + ky * d.k;
                                        for kx in 0..d.k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= d.w as isize {
                                                continue;
                                            }
                                            if want_gx {
                                                gx[xrow + ix as usize] += g * wv[wrow + kx];
                                            }
                                            if want_gw {
                                                gw[wrow + kx] += g * xv[xrow + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if want_gx {
                x.accumulate_grad(&gx);
            }
            if want_gw {
                w.accumulate_grad(&gw);
            }
            if want_gb {
                b.accumulate_grad(&gb);
            }
        }));
    }
    Ok(y)
}

/// Elementwise `max(0, x)`. The subgradient at exactly 0 is 0.
pub fn relu(x: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    let out: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
    let recorded = track(tape, &[x]);
    let y = Tensor::from_parts(x.shape().to_vec(), out, recorded);
    if recorded {
        let (x, y2) = (x.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let xv = x.data();
            let gx: Vec<f32> = gy
                .iter()
                .zip(xv.iter())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            drop(xv);
            x.accumulate_grad(&gx);
        }));
    }
    Ok(y)
}

/// Inverted dropout: in train mode each element survives with probability
/// `1 - p` and is scaled by `1/(1 - p)`; eval mode is the identity.
pub fn dropout<R: Rng>(
    x: &Tensor,
    p: f32,
    mode: Mode,
    rng: &mut R,
    tape: Option<&Tape>,
) -> Result<Tensor, TensorError> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidDropout(p));
    }
    let recorded = track(tape, &[x]);
    if mode == Mode::Eval || p == 0.0 {
        let y = Tensor::from_parts(x.shape().to_vec(), x.to_vec(), recorded);
        if recorded {
            let (x, y2) = (x.clone(), y.clone());
            tape.unwrap().record(&y, Box::new(move || {
                let Some(gy) = y2.grad() else { return };
                x.accumulate_grad(&gy);
            }));
        }
        return Ok(y);
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.numel())
        .map(|_| if rng.gen::<f32>() < p { 0.0 } else { scale })
        .collect();
    let out: Vec<f32> = x.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
    let y = Tensor::from_parts(x.shape().to_vec(), out, recorded);
    if recorded {
        let (x, y2) = (x.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let gx: Vec<f32> = gy.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
            x.accumulate_grad(&gx);
        }));
    }
    Ok(y)
}

/// 2x2 max pooling with stride 2. Gradient routes to the argmax element;
/// ties go to the first element in window scan order.
pub fn max_pool2d(x: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(TensorError::DimensionMismatch(format!(
            "max_pool2d expects [b, c, h, w], got {xs:?}"
        )));
    }
    let (batch, chans, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h < 2 || w < 2 {
        return Err(TensorError::DimensionMismatch(format!(
            "max_pool2d: spatial extent {h}x{w} smaller than 2x2 window"
        )));
    }
    let (h_out, w_out) = (h / 2, w / 2);
    let mut out = vec![0f32; batch * chans * h_out * w_out];
    let mut argmax = vec![0usize; out.len()];
    {
        let xv = x.data();
        let mut oi = 0;
        for bi in 0..batch {
            for c in 0..chans {
                let plane = bi * chans * h * w + c * h * w;
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let idx = plane + (oy * 2 + ky) * w + ox * 2 + kx;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
    }
    let recorded = track(tape, &[x]);
    let y = Tensor::from_parts(vec![batch, chans, h_out, w_out], out, recorded);
    if recorded {
        let (x, y2) = (x.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let mut gx = vec![0f32; x.numel()];
            for (g, &idx) in gy.iter().zip(argmax.iter()) {
                gx[idx] += g;
            }
            x.accumulate_grad(&gx);
        }));
    }
    Ok(y)
}

/// Mean over spatial positions: `[b, c, h, w] -> [b, c]`.
pub fn global_avg_pool(x: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(TensorError::DimensionMismatch(format!(
            "global_avg_pool expects [b, c, h, w], got {xs:?}"
        )));
    }
    let (batch, chans, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let area = h * w;
    let mut out = vec![0f32; batch * chans];
    {
        let xv = x.data();
        for (o, plane) in out.iter_mut().zip(xv.chunks_exact(area)) {
            let s: f64 = plane.iter().map(|&v| v as f64).sum();
            *o = (s / area as f64) as f32;
        }
    }
    let recorded = track(tape, &[x]);
    let y = Tensor::from_parts(vec![batch, chans], out, recorded);
    if recorded {
        let (x, y2) = (x.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let mut gx = vec![0f32; x.numel()];
            for (chunk, &g) in gx.chunks_exact_mut(area).zip(gy.iter()) {
                let share = g / area as f32;
                chunk.fill(share);
            }
            x.accumulate_grad(&gx);
        }));
    }
    Ok(y)
}

/// Row-wise log-softmax over the last axis of `[batch, n]`, stabilized by
/// subtracting the row maximum.
pub fn log_softmax(x: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    if xs.len() != 2 || xs[1] < 2 {
        return Err(TensorError::DimensionMismatch(format!(
            "log_softmax expects [batch, n] with n >= 2, got {xs:?}"
        )));
    }
    let (batch, n) = (xs[0], xs[1]);
    let mut out = vec![0f32; batch * n];
    {
        let xv = x.data();
        for i in 0..batch {
            let row = &xv[i * n..(i + 1) * n];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let s: f64 = row.iter().map(|&v| ((v - m) as f64).exp()).sum();
            let log_s = s.ln() as f32;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - m - log_s;
            }
        }
    }
    let recorded = track(tape, &[x]);
    let y = Tensor::from_parts(vec![batch, n], out, recorded);
    if recorded {
        let (x, y2) = (x.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            let yv = y2.data();
            let mut gx = vec![0f32; batch * n];
            for i in 0..batch {
                let grow = &gy[i * n..(i + 1) * n];
                let yrow = &yv[i * n..(i + 1) * n];
                let gsum: f32 = grow.iter().sum();
                for ((d, &g), &lsm) in gx[i * n..(i + 1) * n].iter_mut().zip(grow).zip(yrow) {
                    *d = g - lsm.exp() * gsum;
                }
            }
            drop(yv);
            x.accumulate_grad(&gx);
        }));
    }
    Ok(y)
}

/// Concatenates two `[batch, width]` blocks along the feature axis.
pub fn concat_features(a: &Tensor, b: &Tensor, tape: Option<&Tape>) -> Result<Tensor, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(TensorError::DimensionMismatch(format!(
            "concat_features expects two [batch, width] blocks, got {sa:?}, {sb:?}"
        )));
    }
    if sa[0] != sb[0] {
        return Err(TensorError::DimensionMismatch(format!(
            "concat_features: batch extents differ ({} vs {})",
            sa[0], sb[0]
        )));
    }
    let (batch, wa, wb) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0f32; batch * (wa + wb)];
    {
        let (av, bv) = (a.data(), b.data());
        for i in 0..batch {
            out[i * (wa + wb)..i * (wa + wb) + wa].copy_from_slice(&av[i * wa..(i + 1) * wa]);
            out[i * (wa + wb) + wa..(i + 1) * (wa + wb)].copy_from_slice(&bv[i * wb..(i + 1) * wb]);
        }
    }
    let recorded = track(tape, &[a, b]);
    let y = Tensor::from_parts(vec![batch, wa + wb], out, recorded);
    if recorded {
        let (a, b, y2) = (a.clone(), b.clone(), y.clone());
        tape.unwrap().record(&y, Box::new(move || {
            let Some(gy) = y2.grad() else { return };
            if a.grad_enabled() {
                let mut ga = vec![0f32; batch * wa];
                for i in 0..batch {
                    ga[i * wa..(i + 1) * wa]
                        .copy_from_slice(&gy[i * (wa + wb)..i * (wa + wb) + wa]);
                }
                a.accumulate_grad(&ga);
            }
            if b.grad_enabled() {
                let mut gb = vec![0f32; batch * wb];
                for i in 0..batch {
                    gb[i * wb..(i + 1) * wb]
                        .copy_from_slice(&gy[i * (wa + wb) + wa..(i + 1) * (wa + wb)]);
                }
                b.accumulate_grad(&gb);
            }
        }));
    }
    Ok(y)
}
