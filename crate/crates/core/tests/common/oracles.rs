#![allow(clippy::needless_range_loop)]

use mhex_core::saliency::{final_weights, WeightFilterConfig};
use mhex_core::Tensor;

pub fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [c, h, w] = *x.shape() else { panic!() };
    let [o, _, kh, kw] = *k.shape() else { panic!() };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([o, ho, wo]);
    for oc in 0..o {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = 0.0;
                for ic in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (xx * stride + j) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.data()[(ic * h + iy as usize) * w + ix as usize]
                                    * k.data()[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                }
                out.data_mut()[(oc * ho + y) * wo + xx] = acc;
            }
        }
    }
    out
}

pub fn cam_oracle(w: &[f64], f: &Tensor) -> Vec<f64> {
    let (c, h, wd) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = vec![0.0; h * wd];
    for y in 0..h {
        for x in 0..wd {
            for k in 0..c {
                out[y * wd + x] += w[k] * f.data()[(k * h + y) * wd + x];
            }
        }
    }
    out
}

pub fn token_oracle(
    weqs: &[Tensor],
    acts: &[Tensor],
    class: usize,
    c: &WeightFilterConfig,
) -> Vec<f64> {
    let t = acts[0].shape()[0];
    let d = acts[0].shape()[1];
    let mut out = vec![0.0; t];
    for l in 0..c.layers {
        let fw = final_weights(&weqs[l], c).unwrap();
        for j in 0..t {
            let mut s = 0.0;
            for k in 0..d {
                s += fw.row(class)[k] * acts[l].data()[j * d + k];
            }
            out[j] += c.layer_decay.powi(l as i32 + 1) * s;
        }
    }
    out
}
