//! Loop-nest reference implementations of the network kernels.

use steganalysis_core::nn::ops::Window;
use steganalysis_core::nn::Tensor4;

pub fn conv(x: &Tensor4<f64>, weight: &[f64], c_out: usize, win: Window) -> Tensor4<f64> {
    let [b, c, h, w] = x.shape();
    let k = win.kernel;
    let (oh, ow) = (win.out_dim(h), win.out_dim(w));
    let mut y = Tensor4::zeros([b, c_out, oh, ow]);
    for i in 0..b {
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                                let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += weight[((o * c + ci) * k + ky) * k + kx] * x[[i, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[i, o, oy, ox]] = acc;
                }
            }
        }
    }
    y
}

/// 3x3 stride-2 mean over the window, zero padding counted.
pub fn avg_pool(x: &Tensor4<f64>) -> Tensor4<f64> {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
    let mut y = Tensor4::zeros([b, c, oh, ow]);
    for i in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (iy, ix) = ((2 * oy + dy) as isize - 1, (2 * ox + dx) as isize - 1);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x[[i, ch, iy as usize, ix as usize]];
                            }
                        }
                    }
                    y[[i, ch, oy, ox]] = acc / 9.0;
                }
            }
        }
    }
    y
}
