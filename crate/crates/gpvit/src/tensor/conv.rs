//! Convolution primitives over token maps laid out `[Ht*Wt, C]` row-major.

use super::Tensor;
use crate::scalar::{s, Scalar};

/// Patch extraction for full convolutions: output row `(r, c)` holds the
/// zero-padded `k x k x Cin` neighborhood around stride position `(r, c)`,
/// ordered `(kr, kc, cin)`. Convolution is then a matmul against a
/// `[k*k*Cin, Cout]` weight.
pub fn im2col<E: Scalar>(
    x: &Tensor<E>,
    grid: (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let (h, w) = grid;
    let cin = x.cols();
    assert_eq!(x.rows(), h * w, "im2col: {} rows vs grid {}x{}", x.rows(), h, w);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let patch = k * k * cin;
    let mut data = vec![E::zero(); ho * wo * patch];
    let src = x.data();
    for ro in 0..ho {
        for co in 0..wo {
            let base = (ro * wo + co) * patch;
            for kr in 0..k {
                for kc in 0..k {
                    let ri = (ro * stride + kr) as isize - pad as isize;
                    let ci = (co * stride + kc) as isize - pad as isize;
                    if ri < 0 || ri >= h as isize || ci < 0 || ci >= w as isize {
                        continue;
                    }
                    let srow = (ri as usize * w + ci as usize) * cin;
                    let drow = base + (kr * k + kc) * cin;
                    data[drow..drow + cin].copy_from_slice(&src[srow..srow + cin]);
                }
            }
        }
    }
    Tensor::op(
        vec![ho * wo, patch],
        data,
        vec![x.clone()],
        Box::new(move |g, parents, store| {
            let dx = store.slot_mut(&parents[0]);
            for ro in 0..ho {
                for co in 0..wo {
                    let base = (ro * wo + co) * patch;
                    for kr in 0..k {
                        for kc in 0..k {
                            let ri = (ro * stride + kr) as isize - pad as isize;
                            let ci = (co * stride + kc) as isize - pad as isize;
                            if ri < 0 || ri >= h as isize || ci < 0 || ci >= w as isize {
                                continue;
                            }
                            let srow = (ri as usize * w + ci as usize) * cin;
                            let grow = base + (kr * k + kc) * cin;
                            for j in 0..cin {
                                dx[srow + j] += g[grow + j];
                            }
                        }
                    }
                }
            }
        }),
    )
}

/// Depth-wise convolution with odd kernel size and same-size zero padding.
/// Channel `c` of the output depends only on channel `c` of the input.
pub fn depthwise_conv2d<E: Scalar>(
    x: &Tensor<E>,
    grid: (usize, usize),
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
) -> Tensor<E> {
    let (h, w) = grid;
    let c = x.cols();
    assert_eq!(x.rows(), h * w, "depthwise_conv2d: {} rows vs grid {}x{}", x.rows(), h, w);
    let kshape = kernel.shape();
    assert_eq!(kshape.len(), 3, "depthwise kernel must be [k, k, C], got {:?}", kshape);
    let k = kshape[0];
    assert_eq!(kshape[1], k, "depthwise kernel must be square, got {:?}", kshape);
    assert_eq!(kshape[2], c, "depthwise kernel has {} channels, input has {}", kshape[2], c);
    assert!(k % 2 == 1, "depthwise kernel size must be odd, got {k}");
    assert_eq!(bias.numel(), c, "depthwise bias length {} vs {} channels", bias.numel(), c);
    let pad = (k - 1) / 2;

    let src = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let mut data = vec![E::zero(); h * w * c];
    for r in 0..h {
        for cc in 0..w {
            let orow = (r * w + cc) * c;
            data[orow..orow + c].copy_from_slice(bd);
            for kr in 0..k {
                for kc in 0..k {
                    let ri = (r + kr) as isize - pad as isize;
                    let ci = (cc + kc) as isize - pad as isize;
                    if ri < 0 || ri >= h as isize || ci < 0 || ci >= w as isize {
                        continue;
                    }
                    let srow = (ri as usize * w + ci as usize) * c;
                    let krow = (kr * k + kc) * c;
                    for j in 0..c {
                        data[orow + j] += src[srow + j] * kd[krow + j];
                    }
                }
            }
        }
    }
    Tensor::op(
        vec![h * w, c],
        data,
        vec![x.clone(), kernel.clone(), bias.clone()],
        Box::new(move |g, parents, store| {
            let src = parents[0].data();
            let kd = parents[1].data();
            // dX: correlate gradient with the flipped kernel.
            {
                let dx = store.slot_mut(&parents[0]);
                for r in 0..h {
                    for cc in 0..w {
                        let grow = (r * w + cc) * c;
                        for kr in 0..k {
                            for kc in 0..k {
                                let ri = (r + kr) as isize - pad as isize;
                                let ci = (cc + kc) as isize - pad as isize;
                                if ri < 0 || ri >= h as isize || ci < 0 || ci >= w as isize {
                                    continue;
                                }
                                let srow = (ri as usize * w + ci as usize) * c;
                                let krow = (kr * k + kc) * c;
                                for j in 0..c {
                                    dx[srow + j] += g[grow + j] * kd[krow + j];
                                }
                            }
                        }
                    }
                }
            }
            // dK
            {
                let dk = store.slot_mut(&parents[1]);
                for r in 0..h {
                    for cc in 0..w {
                        let grow = (r * w + cc) * c;
                        for kr in 0..k {
                            for kc in 0..k {
                                let ri = (r + kr) as isize - pad as isize;
                                let ci = (cc + kc) as isize - pad as isize;
                                if ri < 0 || ri >= h as isize || ci < 0 || ci >= w as isize {
                                    continue;
                                }
                                let srow = (ri as usize * w + ci as usize) * c;
                                let krow = (kr * k + kc) * c;
                                for j in 0..c {
                                    dk[krow + j] += g[grow + j] * src[srow + j];
                                }
                            }
                        }
                    }
                }
            }
            // dB
            {
                let db = store.slot_mut(&parents[2]);
                for row in g.chunks(c) {
                    for j in 0..c {
                        db[j] += row[j];
                    }
                }
            }
        }),
    )
}

/// Non-overlapping average pooling over the grid (used by the patch-16
/// baseline stem). Grid extents must be divisible by `window`.
pub fn avg_pool2d<E: Scalar>(x: &Tensor<E>, grid: (usize, usize), window: usize) -> Tensor<E> {
    let (h, w) = grid;
    let c = x.cols();
    assert_eq!(x.rows(), h * w, "avg_pool2d: {} rows vs grid {}x{}", x.rows(), h, w);
    assert!(
        h % window == 0 && w % window == 0,
        "avg_pool2d: grid {h}x{w} not divisible by window {window}"
    );
    let (ho, wo) = (h / window, w / window);
    let inv: E = s(1.0 / (window * window) as f64);
    let src = x.data();
    let mut data = vec![E::zero(); ho * wo * c];
    for ro in 0..ho {
        for co in 0..wo {
            let orow = (ro * wo + co) * c;
            for dr in 0..window {
                for dc in 0..window {
                    let srow = ((ro * window + dr) * w + co * window + dc) * c;
                    for j in 0..c {
                        data[orow + j] += src[srow + j] * inv;
                    }
                }
            }
        }
    }
    Tensor::op(
        vec![ho * wo, c],
        data,
        vec![x.clone()],
        Box::new(move |g, parents, store| {
            let dx = store.slot_mut(&parents[0]);
            for ro in 0..ho {
                for co in 0..wo {
                    let grow = (ro * wo + co) * c;
                    for dr in 0..window {
                        for dc in 0..window {
                            let srow = ((ro * window + dr) * w + co * window + dc) * c;
                            for j in 0..c {
                                dx[srow + j] += g[grow + j] * inv;
                            }
                        }
                    }
                }
            }
        }),
    )
}
