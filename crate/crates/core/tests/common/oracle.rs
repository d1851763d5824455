//! Naive direct convolution, written from the definition
//! `O[n,o,y,x] = b[o] + sum_{i,u,v} I[n, g*icg + i, y*s - p + u*d, x*s - p + v*d] * K[o,i,u,v]`
//! with zeros outside the input. Seven plain loops, f64 accumulation.

use lkconv::{ConvSpec, Shape, Tensor};

pub fn naive_conv(x: &Tensor, spec: &ConvSpec) -> Tensor {
    let s = x.shape();
    assert_eq!(s.c, spec.in_channels, "channel mismatch");
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let oh = (s.h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
    let ow = (s.w + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
    let xin = x.data();
    let k = spec.weight.data();
    let mut out = vec![0f32; s.n * spec.out_channels * oh * ow];
    for n in 0..s.n {
        for o in 0..spec.out_channels {
            let g = o / ocg;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = spec.bias.as_ref().map_or(0.0, |b| b[o] as f64);
                    for i in 0..icg {
                        let c = g * icg + i;
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (y * sh + u * dh) as isize - ph as isize;
                                let ix = (xx * sw + v * dw) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xi = ((n * s.c + c) * s.h + iy as usize) * s.w + ix as usize;
                                let ki = ((o * icg + i) * kh + u) * kw + v;
                                acc += xin[xi] as f64 * k[ki] as f64;
                            }
                        }
                    }
                    out[((n * spec.out_channels + o) * oh + y) * ow + xx] = acc as f32;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, spec.out_channels, oh, ow).unwrap(), out).unwrap()
}
