//! Direct (loop-based) 3D cross-correlation with zero padding, forward and
//! backward. Input layout [N, Cin, D, H, W], kernel [Cout, Cin, kd, kh, kw].

use std::collections::HashMap;

use super::{make_result, numel_of, Op, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    cout: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    sd: usize,
    sh: usize,
    sw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

pub(crate) struct SavedConv {
    pub(crate) input: Tensor,
    pub(crate) kernel: Tensor,
    dims: Dims,
}

fn out_extent(in_extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_extent + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn resolve_dims(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Dims> {
    let is = input.shape();
    let ks = kernel.shape();
    let shape_err = || {
        Error::shape(
            "input [N, Cin, D, H, W] with kernel [Cout, Cin, kd, kh, kw] fitting the padded input"
                .to_string(),
            format!(
                "input {:?}, kernel {:?}, stride {:?}, padding {:?}",
                is, ks, stride, padding
            ),
        )
    };
    if is.len() != 5 || ks.len() != 5 || is[1] != ks[1] {
        return Err(shape_err());
    }
    if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
        return Err(shape_err());
    }
    let od = out_extent(is[2], ks[2], stride.0, padding.0).ok_or_else(shape_err)?;
    let oh = out_extent(is[3], ks[3], stride.1, padding.1).ok_or_else(shape_err)?;
    let ow = out_extent(is[4], ks[4], stride.2, padding.2).ok_or_else(shape_err)?;
    if od == 0 || oh == 0 || ow == 0 {
        return Err(shape_err());
    }
    Ok(Dims {
        n: is[0],
        cin: is[1],
        d: is[2],
        h: is[3],
        w: is[4],
        cout: ks[0],
        kd: ks[2],
        kh: ks[3],
        kw: ks[4],
        sd: stride.0,
        sh: stride.1,
        sw: stride.2,
        pd: padding.0,
        ph: padding.1,
        pw: padding.2,
        od,
        oh,
        ow,
    })
}

/// Valid kernel tap range for one output coordinate: taps k with
/// 0 <= o*stride + k - pad < extent.
#[inline]
fn tap_range(o: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    // Input coordinate of tap t is o*stride + t - pad; keep 0 <= coord < extent.
    let base = o * stride;
    let lo = pad.saturating_sub(base);
    let hi = k.min((extent + pad).saturating_sub(base));
    (lo, hi)
}

/// 3D cross-correlation (no kernel flip) with zero padding.
pub fn conv3d(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Tensor> {
    let dims = resolve_dims(input, kernel, stride, padding)?;
    let out_shape = vec![dims.n, dims.cout, dims.od, dims.oh, dims.ow];
    let mut out = vec![0.0; numel_of(&out_shape)];
    {
        let x = input.values();
        let k = kernel.values();
        forward_into(&x, &k, dims, &mut out);
    }
    let parents_need = input.needs_grad() || kernel.needs_grad();
    Ok(make_result(
        out_shape,
        out,
        Op::Conv3d(SavedConv {
            input: input.clone(),
            kernel: kernel.clone(),
            dims,
        }),
        parents_need,
    ))
}

fn forward_into(x: &[f64], k: &[f64], dims: Dims, out: &mut [f64]) {
    let Dims {
        n,
        cin,
        d,
        h,
        w,
        cout,
        kd,
        kh,
        kw,
        sd,
        sh,
        sw,
        pd,
        ph,
        pw,
        od,
        oh,
        ow,
    } = dims;
    let in_chan = d * h * w;
    let ker_chan = kd * kh * kw;
    let mut oi = 0;
    for ni in 0..n {
        let in_batch = ni * cin * in_chan;
        for co in 0..cout {
            let ker_base_co = co * cin * ker_chan;
            for odi in 0..od {
                let (kd_lo, kd_hi) = tap_range(odi, sd, pd, kd, d);
                let id0 = odi * sd;
                for ohi in 0..oh {
                    let (kh_lo, kh_hi) = tap_range(ohi, sh, ph, kh, h);
                    let ih0 = ohi * sh;
                    for owi in 0..ow {
                        let (kw_lo, kw_hi) = tap_range(owi, sw, pw, kw, w);
                        let iw0 = owi * sw;
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            let in_c = in_batch + ci * in_chan;
                            let ker_c = ker_base_co + ci * ker_chan;
                            for kdi in kd_lo..kd_hi {
                                let id = id0 + kdi - pd;
                                for khi in kh_lo..kh_hi {
                                    let ih = ih0 + khi - ph;
                                    // kw_lo >= pw - iw0, so this cannot underflow.
                                    let col0 = iw0 + kw_lo - pw;
                                    let in_row = in_c + (id * h + ih) * w + col0;
                                    let ker_row = ker_c + (kdi * kh + khi) * kw + kw_lo;
                                    for t in 0..kw_hi - kw_lo {
                                        acc += x[in_row + t] * k[ker_row + t];
                                    }
                                }
                            }
                        }
                        out[oi] = acc;
                        oi += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_backward(saved: &SavedConv, g: &[f64], flowing: &mut HashMap<u64, Vec<f64>>) {
    let dims = saved.dims;
    if saved.input.needs_grad() {
        let k = saved.kernel.values();
        let buf = flowing
            .entry(saved.input.id())
            .or_insert_with(|| vec![0.0; saved.input.numel()]);
        input_grad_into(&k, g, dims, buf);
    }
    if saved.kernel.needs_grad() {
        let x = saved.input.values();
        let buf = flowing
            .entry(saved.kernel.id())
            .or_insert_with(|| vec![0.0; saved.kernel.numel()]);
        kernel_grad_into(&x, g, dims, buf);
    }
}

fn input_grad_into(k: &[f64], g: &[f64], dims: Dims, din: &mut [f64]) {
    let Dims {
        n,
        cin,
        d,
        h,
        w,
        cout,
        kd,
        kh,
        kw,
        sd,
        sh,
        sw,
        pd,
        ph,
        pw,
        od,
        oh,
        ow,
    } = dims;
    let in_chan = d * h * w;
    let ker_chan = kd * kh * kw;
    let mut oi = 0;
    for ni in 0..n {
        let in_batch = ni * cin * in_chan;
        for co in 0..cout {
            let ker_base_co = co * cin * ker_chan;
            for odi in 0..od {
                let (kd_lo, kd_hi) = tap_range(odi, sd, pd, kd, d);
                let id0 = odi * sd;
                for ohi in 0..oh {
                    let (kh_lo, kh_hi) = tap_range(ohi, sh, ph, kh, h);
                    let ih0 = ohi * sh;
                    for owi in 0..ow {
                        let (kw_lo, kw_hi) = tap_range(owi, sw, pw, kw, w);
                        let iw0 = owi * sw;
                        let go = g[oi];
                        oi += 1;
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            let in_c = in_batch + ci * in_chan;
                            let ker_c = ker_base_co + ci * ker_chan;
                            for kdi in kd_lo..kd_hi {
                                let id = id0 + kdi - pd;
                                for khi in kh_lo..kh_hi {
                                    let ih = ih0 + khi - ph;
                                    let col0 = iw0 + kw_lo - pw;
                                    let in_row = in_c + (id * h + ih) * w + col0;
                                    let ker_row = ker_c + (kdi * kh + khi) * kw + kw_lo;
                                    for t in 0..kw_hi - kw_lo {
                                        din[in_row + t] += go * k[ker_row + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn kernel_grad_into(x: &[f64], g: &[f64], dims: Dims, dker: &mut [f64]) {
    let Dims {
        n,
        cin,
        d,
        h,
        w,
        cout,
        kd,
        kh,
        kw,
        sd,
        sh,
        sw,
        pd,
        ph,
        pw,
        od,
        oh,
        ow,
    } = dims;
    let in_chan = d * h * w;
    let ker_chan = kd * kh * kw;
    let mut oi = 0;
    for ni in 0..n {
        let in_batch = ni * cin * in_chan;
        for co in 0..cout {
            let ker_base_co = co * cin * ker_chan;
            for odi in 0..od {
                let (kd_lo, kd_hi) = tap_range(odi, sd, pd, kd, d);
                let id0 = odi * sd;
                for ohi in 0..oh {
                    let (kh_lo, kh_hi) = tap_range(ohi, sh, ph, kh, h);
                    let ih0 = ohi * sh;
                    for owi in 0..ow {
                        let (kw_lo, kw_hi) = tap_range(owi, sw, pw, kw, w);
                        let iw0 = owi * sw;
                        let go = g[oi];
                        oi += 1;
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            let in_c = in_batch + ci * in_chan;
                            let ker_c = ker_base_co + ci * ker_chan;
                            for kdi in kd_lo..kd_hi {
                                let id = id0 + kdi - pd;
                                for khi in kh_lo..kh_hi {
                                    let ih = ih0 + khi - ph;
                                    let col0 = iw0 + kw_lo - pw;
                                    let in_row = in_c + (id * h + ih) * w + col0;
                                    let ker_row = ker_c + (kdi * kh + khi) * kw + kw_lo;
                                    for t in 0..kw_hi - kw_lo {
                                        dker[ker_row + t] += go * x[in_row + t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
