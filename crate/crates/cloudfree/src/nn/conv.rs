//! The two convolution shapes the network needs: pointwise (1×1) and
//! depthwise 3×3. Nothing more general is required, so nothing more general
//! is implemented.

use super::{init, key, Feat, Params, Scalar};
use crate::par;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayViewMut2};
use rand_chacha::ChaCha8Rng;

/// 1×1 convolution: an `in → out` linear map applied at every pixel.
///
/// Each sample's `(C, H·W)` plane is one GEMM; samples are distributed across
/// threads, parameter-gradient accumulation stays in sample order so results
/// do not depend on the thread count.
pub struct Conv1x1<F> {
    pub w: Array2<F>, // (out, in)
    pub b: Array1<F>,
    gw: Array2<F>,
    gb: Array1<F>,
    cache_x: Option<Feat<F>>,
}

impl<F: Scalar> Conv1x1<F> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Array2::zeros((out_ch, in_ch));
        let mut b = Array1::zeros(out_ch);
        init::uniform_fan_in(w.as_slice_mut().unwrap(), in_ch, rng);
        init::uniform_fan_in(b.as_slice_mut().unwrap(), in_ch, rng);
        Self {
            w,
            b,
            gw: Array2::zeros((out_ch, in_ch)),
            gb: Array1::zeros(out_ch),
            cache_x: None,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.w.nrows()
    }

    fn run(&self, x: &Feat<F>) -> Feat<F> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.w.ncols(), "Conv1x1: channel mismatch");
        let hw = h * w;
        let cout = self.out_ch();
        let mut y = Array4::zeros((n, cout, h, w));
        par::zip_chunks_mut(
            y.as_slice_mut().unwrap(),
            cout * hw,
            x.as_slice().unwrap(),
            cin * hw,
            |_, yp, xp| {
                let xm = ArrayView2::from_shape((cin, hw), xp).unwrap();
                let mut ym = ArrayViewMut2::from_shape((cout, hw), yp).unwrap();
                general_mat_mul(F::one(), &self.w, &xm, F::zero(), &mut ym);
                for (mut row, &b) in ym.outer_iter_mut().zip(self.b.iter()) {
                    row.mapv_inplace(|v| v + b);
                }
            },
        );
        y
    }

    pub fn forward_t(&mut self, x: &Feat<F>) -> Feat<F> {
        let y = self.run(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn forward_e(&self, x: &Feat<F>) -> Feat<F> {
        self.run(x)
    }

    pub fn backward(&mut self, gy: &Feat<F>) -> Feat<F> {
        let x = self.cache_x.take().expect("Conv1x1::backward before forward_t");
        let (n, cin, h, w) = x.dim();
        let hw = h * w;
        let cout = self.out_ch();
        let gys = gy.as_slice().unwrap();
        let xs = x.as_slice().unwrap();

        // Weight/bias grads accumulate sample by sample in a fixed order.
        for i in 0..n {
            let gym = ArrayView2::from_shape((cout, hw), &gys[i * cout * hw..(i + 1) * cout * hw])
                .unwrap();
            let xm =
                ArrayView2::from_shape((cin, hw), &xs[i * cin * hw..(i + 1) * cin * hw]).unwrap();
            general_mat_mul(F::one(), &gym, &xm.t(), F::one(), &mut self.gw);
        }
        let gb_add: Vec<F> = par::map_collect(cout, |c| {
            par::sum_with(n * hw, |j| {
                let (i, p) = (j / hw, j % hw);
                gys[(i * cout + c) * hw + p]
            })
        });
        for (gb, add) in self.gb.iter_mut().zip(gb_add) {
            *gb = *gb + add;
        }

        let mut gx = Array4::zeros(x.dim());
        par::zip_chunks_mut(gx.as_slice_mut().unwrap(), cin * hw, gys, cout * hw, |_, gxp, gyp| {
            let gym = ArrayView2::from_shape((cout, hw), gyp).unwrap();
            let mut gxm = ArrayViewMut2::from_shape((cin, hw), gxp).unwrap();
            general_mat_mul(F::one(), &self.w.t(), &gym, F::zero(), &mut gxm);
        });
        gx
    }
}

impl<F: Scalar> Params<F> for Conv1x1<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f(
            &key(prefix, "weight"),
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        f(
            &key(prefix, "bias"),
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}

/// Depthwise 3×3 convolution, stride 1, zero padding 1 (shape-preserving).
pub struct DwConv3x3<F> {
    pub k: Array3<F>, // (C, 3, 3)
    pub b: Array1<F>,
    gk: Array3<F>,
    gb: Array1<F>,
    cache_x: Option<Feat<F>>,
}

impl<F: Scalar> DwConv3x3<F> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut k = Array3::zeros((channels, 3, 3));
        let mut b = Array1::zeros(channels);
        // Depthwise fan-in is the kernel footprint, not the channel count.
        init::uniform_fan_in(k.as_slice_mut().unwrap(), 9, rng);
        init::uniform_fan_in(b.as_slice_mut().unwrap(), 9, rng);
        Self {
            k,
            b,
            gk: Array3::zeros((channels, 3, 3)),
            gb: Array1::zeros(channels),
            cache_x: None,
        }
    }

    fn run(&self, x: &Feat<F>) -> Feat<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.k.dim().0, "DwConv3x3: channel mismatch");
        let hw = h * w;
        let mut y = Array4::zeros((n, c, h, w));
        let ks = self.k.as_slice().unwrap();
        par::zip_chunks_mut(
            y.as_slice_mut().unwrap(),
            hw,
            x.as_slice().unwrap(),
            hw,
            |plane, yp, xp| {
                let ch = plane % c;
                let k = &ks[ch * 9..ch * 9 + 9];
                let bias = self.b[ch];
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bias;
                        for (j, krow) in k.chunks(3).enumerate() {
                            let iy = oy as isize + j as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for (i, &kv) in krow.iter().enumerate() {
                                let ix = ox as isize + i as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + kv * xp[iy as usize * w + ix as usize];
                            }
                        }
                        yp[oy * w + ox] = acc;
                    }
                }
            },
        );
        y
    }

    pub fn forward_t(&mut self, x: &Feat<F>) -> Feat<F> {
        let y = self.run(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn forward_e(&self, x: &Feat<F>) -> Feat<F> {
        self.run(x)
    }

    pub fn backward(&mut self, gy: &Feat<F>) -> Feat<F> {
        let x = self.cache_x.take().expect("DwConv3x3::backward before forward_t");
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let xs = x.as_slice().unwrap();
        let gys = gy.as_slice().unwrap();
        let ks = self.k.as_slice().unwrap();

        // Input gradient: correlate the output gradient with the flipped kernel.
        let mut gx = Array4::zeros(x.dim());
        par::zip_chunks_mut(gx.as_slice_mut().unwrap(), hw, gys, hw, |plane, gxp, gyp| {
            let ch = plane % c;
            let k = &ks[ch * 9..ch * 9 + 9];
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = F::zero();
                    for (j, krow) in k.chunks(3).enumerate() {
                        let oy = iy as isize - (j as isize - 1);
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        for (i, &kv) in krow.iter().enumerate() {
                            let ox = ix as isize - (i as isize - 1);
                            if ox < 0 || ox >= w as isize {
                                continue;
                            }
                            acc = acc + kv * gyp[oy as usize * w + ox as usize];
                        }
                    }
                    gxp[iy * w + ix] = acc;
                }
            }
        });

        // Kernel/bias grads: channels are independent, so parallelise across
        // channels and keep the (sample, pixel) order inside each fixed.
        let per_channel: Vec<([F; 9], F)> = par::map_collect(c, |ch| {
            let mut gk = [F::zero(); 9];
            let mut gb = F::zero();
            for s in 0..n {
                let xp = &xs[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                let gyp = &gys[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for oy in 0..h {
                    for ox in 0..w {
                        let g = gyp[oy * w + ox];
                        gb = gb + g;
                        for j in 0..3usize {
                            let iy = oy as isize + j as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for i in 0..3usize {
                                let ix = ox as isize + i as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gk[j * 3 + i] =
                                    gk[j * 3 + i] + g * xp[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
            (gk, gb)
        });
        let gks = self.gk.as_slice_mut().unwrap();
        for (ch, (gk, gb)) in per_channel.into_iter().enumerate() {
            for (dst, add) in gks[ch * 9..ch * 9 + 9].iter_mut().zip(gk) {
                *dst = *dst + add;
            }
            self.gb[ch] = self.gb[ch] + gb;
        }
        gx
    }
}

impl<F: Scalar> Params<F> for DwConv3x3<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f(
            &key(prefix, "weight"),
            self.k.as_slice_mut().unwrap(),
            self.gk.as_slice_mut().unwrap(),
        );
        f(
            &key(prefix, "bias"),
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;

    #[test]
    fn conv1x1_matches_per_pixel_matmul() {
        let mut rng = gradcheck::rng(21);
        let conv = Conv1x1::<f64>::new(3, 2, &mut rng);
        let x = gradcheck::rand_feat(&mut rng, (2, 3, 4, 5));
        let y = conv.forward_e(&x);
        for n in 0..2 {
            for h in 0..4 {
                for w in 0..5 {
                    for o in 0..2 {
                        let want: f64 = (0..3).map(|i| conv.w[[o, i]] * x[[n, i, h, w]]).sum::<f64>()
                            + conv.b[o];
                        assert!((y[[n, o, h, w]] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv1x1_gradients() {
        let mut rng = gradcheck::rng(22);
        let mut conv = Conv1x1::<f64>::new(3, 4, &mut rng);
        let x = gradcheck::rand_feat(&mut rng, (2, 3, 3, 3));
        gradcheck::check_input_grad(&mut conv, &x, |l, x| l.forward_t(x), |l, g| l.backward(g));
        gradcheck::check_param_grads(
            &mut conv,
            &x,
            |l, x| l.forward_t(x),
            |l, g| {
                l.backward(g);
            },
        );
    }

    #[test]
    fn dwconv_is_identity_with_center_one_kernel() {
        let mut rng = gradcheck::rng(23);
        let mut conv = DwConv3x3::<f64>::new(2, &mut rng);
        conv.k.fill(0.0);
        conv.b.fill(0.0);
        conv.k[[0, 1, 1]] = 1.0;
        conv.k[[1, 1, 1]] = 1.0;
        let x = gradcheck::rand_feat(&mut rng, (1, 2, 5, 5));
        assert_eq!(conv.forward_e(&x), x);
    }

    #[test]
    fn dwconv_zero_pads_the_border() {
        let mut rng = gradcheck::rng(24);
        let mut conv = DwConv3x3::<f64>::new(1, &mut rng);
        conv.k.fill(1.0); // 3×3 box sum
        conv.b.fill(0.0);
        let x = Array4::from_elem((1, 1, 3, 3), 1.0);
        let y = conv.forward_e(&x);
        assert_eq!(y[[0, 0, 1, 1]], 9.0); // full neighbourhood
        assert_eq!(y[[0, 0, 0, 0]], 4.0); // corner: 2×2 survives padding
        assert_eq!(y[[0, 0, 0, 1]], 6.0); // edge: 2×3
    }

    #[test]
    fn dwconv_gradients() {
        let mut rng = gradcheck::rng(25);
        let mut conv = DwConv3x3::<f64>::new(3, &mut rng);
        let x = gradcheck::rand_feat(&mut rng, (2, 3, 4, 4));
        gradcheck::check_input_grad(&mut conv, &x, |l, x| l.forward_t(x), |l, g| l.backward(g));
        gradcheck::check_param_grads(
            &mut conv,
            &x,
            |l, x| l.forward_t(x),
            |l, g| {
                l.backward(g);
            },
        );
    }
}
