//! Direct convolution kernels and their adjoints.
//!
//! Stride is fixed at 1 with same padding, kernel extents 1 and 3; the
//! adjoint loops mirror the forward loops exactly, so every read in the
//! forward pass becomes one accumulate in the backward pass.

use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Supported square kernel extents.
pub const CONV_KERNEL_SIZES: [usize; 2] = [1, 3];

/// Forward convolution: input `[N,Cin,H,W]`, kernel `[Cout,Cin,k,k]`,
/// output `[N,Cout,H,W]`.
pub fn conv2d_raw<S: Scalar>(input: &TensorBase<S>, kernel: &TensorBase<S>) -> TensorBase<S> {
    let (n, cin, h, w) = dims4(input);
    let (cout, kcin, k, _) = dims4(kernel);
    debug_assert_eq!(cin, kcin);
    let mut out = TensorBase::zeros(&[n, cout, h, w]);
    if k == 1 {
        conv1x1(input.data(), kernel.data(), out.data_mut(), n, cin, cout, h * w);
        return out;
    }
    let pad = k / 2;
    let xd = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * h * w;
            for ci in 0..cin {
                let ibase = (b * cin + ci) * h * w;
                let kbase = (co * cin + ci) * k * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let kv = kd[kbase + dy * k + dx];
                        if kv == S::zero() {
                            continue;
                        }
                        // Output rows y for which y+dy-pad is in bounds.
                        let ylo = pad.saturating_sub(dy);
                        let yhi = (h + pad - dy).min(h);
                        let xlo = pad.saturating_sub(dx);
                        let xhi = (w + pad - dx).min(w);
                        for y in ylo..yhi {
                            let irow = ibase + (y + dy - pad) * w;
                            let orow = obase + y * w;
                            for x in xlo..xhi {
                                od[orow + x] += kv * xd[irow + x + dx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d_raw` with respect to input and kernel, given
/// the output cotangent.
pub fn conv2d_adjoints<S: Scalar>(
    input: &TensorBase<S>,
    kernel: &TensorBase<S>,
    grad_out: &TensorBase<S>,
) -> (TensorBase<S>, TensorBase<S>) {
    let (n, cin, h, w) = dims4(input);
    let (cout, _, k, _) = dims4(kernel);
    let mut d_input = TensorBase::zeros(input.shape());
    let mut d_kernel = TensorBase::zeros(kernel.shape());
    let xd = input.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let dxd = d_input.data_mut();
    let dkd = d_kernel.data_mut();
    if k == 1 {
        conv1x1_adjoints(xd, kd, gd, dxd, dkd, n, cin, cout, h * w);
        return (d_input, d_kernel);
    }
    let pad = k / 2;
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * h * w;
            for ci in 0..cin {
                let ibase = (b * cin + ci) * h * w;
                let kbase = (co * cin + ci) * k * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let kv = kd[kbase + dy * k + dx];
                        let mut kacc = S::zero();
                        let ylo = pad.saturating_sub(dy);
                        let yhi = (h + pad - dy).min(h);
                        let xlo = pad.saturating_sub(dx);
                        let xhi = (w + pad - dx).min(w);
                        for y in ylo..yhi {
                            let irow = ibase + (y + dy - pad) * w;
                            let orow = obase + y * w;
                            for x in xlo..xhi {
                                let g = gd[orow + x];
                                dxd[irow + x + dx - pad] += kv * g;
                                kacc += g * xd[irow + x + dx - pad];
                            }
                        }
                        dkd[kbase + dy * k + dx] += kacc;
                    }
                }
            }
        }
    }
    (d_input, d_kernel)
}

fn conv1x1<S: Scalar>(
    xd: &[S],
    kd: &[S],
    od: &mut [S],
    n: usize,
    cin: usize,
    cout: usize,
    hw: usize,
) {
    for b in 0..n {
        for co in 0..cout {
            let orow = (b * cout + co) * hw;
            for ci in 0..cin {
                let kv = kd[co * cin + ci];
                if kv == S::zero() {
                    continue;
                }
                let irow = (b * cin + ci) * hw;
                for p in 0..hw {
                    od[orow + p] += kv * xd[irow + p];
                }
            }
        }
    }
}

fn conv1x1_adjoints<S: Scalar>(
    xd: &[S],
    kd: &[S],
    gd: &[S],
    dxd: &mut [S],
    dkd: &mut [S],
    n: usize,
    cin: usize,
    cout: usize,
    hw: usize,
) {
    for b in 0..n {
        for co in 0..cout {
            let orow = (b * cout + co) * hw;
            for ci in 0..cin {
                let kv = kd[co * cin + ci];
                let irow = (b * cin + ci) * hw;
                let mut kacc = S::zero();
                for p in 0..hw {
                    let g = gd[orow + p];
                    dxd[irow + p] += kv * g;
                    kacc += g * xd[irow + p];
                }
                dkd[co * cin + ci] += kacc;
            }
        }
    }
}

fn dims4<S: Scalar>(t: &TensorBase<S>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4);
    (s[0], s[1], s[2], s[3])
}
