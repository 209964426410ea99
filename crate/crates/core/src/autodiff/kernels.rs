//! Forward/backward numeric kernels shared by the tape and by the
//! allocation-light inference path.

/// `out (m×n) = a (m×k) · b (k×n)`, overwriting `out`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m×n) += aᵀ · b` with `a (k×m)`, `b (k×n)`.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (m×k) += a (m×n) · bᵀ` with `b (k×n)`.
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y − 1) = y + ln(1 − e^{−y})
    y + (-(-y).exp()).ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place log-sum-exp softmax over one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v = (*v - lse).exp();
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.height + 1 - self.kernel
    }
    pub fn out_w(&self) -> usize {
        self.width + 1 - self.kernel
    }
}

/// Valid (no padding), stride-1 cross-correlation.
pub(crate) fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    d: ConvDims,
    out: &mut [f64],
) {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.kernel);
    for b in 0..d.batch {
        for oc in 0..d.out_ch {
            let obase = ((b * d.out_ch) + oc) * oh * ow;
            let oplane = &mut out[obase..obase + oh * ow];
            oplane.iter_mut().for_each(|v| *v = bias[oc]);
            for ic in 0..d.in_ch {
                let ibase = ((b * d.in_ch) + ic) * d.height * d.width;
                let kbase = ((oc * d.in_ch) + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let kv = kernel[kbase + ky * k + kx];
                        for y in 0..oh {
                            let irow = ibase + (y + ky) * d.width + kx;
                            let orow = &mut oplane[y * ow..(y + 1) * ow];
                            for (o, &iv) in orow.iter_mut().zip(&input[irow..irow + ow]) {
                                *o += kv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients of a [`conv2d_forward`] call. `grad_input` is
/// skipped when `None` (constant inputs such as raw images).
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: ConvDims,
    grad_input: Option<&mut [f64]>,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
) {
    let (oh, ow, k) = (d.out_h(), d.out_w(), d.kernel);
    for b in 0..d.batch {
        for oc in 0..d.out_ch {
            let obase = ((b * d.out_ch) + oc) * oh * ow;
            let gplane = &grad_out[obase..obase + oh * ow];
            grad_bias[oc] += gplane.iter().sum::<f64>();
            for ic in 0..d.in_ch {
                let ibase = ((b * d.in_ch) + ic) * d.height * d.width;
                let kbase = ((oc * d.in_ch) + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let irow = ibase + (y + ky) * d.width + kx;
                            acc += gplane[y * ow..(y + 1) * ow]
                                .iter()
                                .zip(&input[irow..irow + ow])
                                .map(|(g, i)| g * i)
                                .sum::<f64>();
                        }
                        grad_kernel[kbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_input {
        for b in 0..d.batch {
            for oc in 0..d.out_ch {
                let obase = ((b * d.out_ch) + oc) * oh * ow;
                let gplane = &grad_out[obase..obase + oh * ow];
                for ic in 0..d.in_ch {
                    let ibase = ((b * d.in_ch) + ic) * d.height * d.width;
                    let kbase = ((oc * d.in_ch) + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let kv = kernel[kbase + ky * k + kx];
                            for y in 0..oh {
                                let irow = ibase + (y + ky) * d.width + kx;
                                for (g, &go) in gi[irow..irow + ow]
                                    .iter_mut()
                                    .zip(&gplane[y * ow..(y + 1) * ow])
                                {
                                    *g += kv * go;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping `size×size` max-pool (floor). Returns the flat input index
/// chosen for every output cell.
pub(crate) fn maxpool_forward(
    input: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    size: usize,
    out: &mut [f64],
) -> Vec<usize> {
    let (oh, ow) = (height / size, width / size);
    let mut argmax = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let ibase = p * height * width;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = ibase + y * size * width + x * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = ibase + (y * size + dy) * width + x * size + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = p * oh * ow + y * ow + x;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    argmax
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_known_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus_inv(softplus(0.3)) - 0.3).abs() < 1e-14);
        assert!((softplus(softplus_inv(1.0 - 1e-6)) - (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn softmax_extreme_logits() {
        let mut r = [1000.0, 0.0];
        softmax_in_place(&mut r);
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((r[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conv_matches_naive() {
        let d = ConvDims {
            batch: 2,
            in_ch: 2,
            height: 5,
            width: 4,
            out_ch: 3,
            kernel: 3,
        };
        let input: Vec<f64> = (0..d.batch * d.in_ch * 20).map(|i| (i as f64 * 0.37).sin()).collect();
        let kernel: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias = [0.1, -0.2, 0.3];
        let mut out = vec![0.0; 2 * 3 * 3 * 2];
        conv2d_forward(&input, &kernel, &bias, d, &mut out);
        for b in 0..2 {
            for oc in 0..3 {
                for y in 0..3 {
                    for x in 0..2 {
                        let mut s = bias[oc];
                        for ic in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    s += kernel[((oc * 2 + ic) * 3 + ky) * 3 + kx]
                                        * input[((b * 2 + ic) * 5 + y + ky) * 4 + x + kx];
                                }
                            }
                        }
                        let got = out[((b * 3 + oc) * 3 + y) * 2 + x];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
