//! Direct 3-D convolution on `[C×D×H×W]` volumes and its exact adjoint.

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stride, zero-padding and dilation, shared by all three spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        ConvSpec {
            stride,
            pad,
            dilation: 1,
        }
    }

    pub const fn dilated(dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: dilation,
            dilation,
        }
    }

    /// Output extent of the forward convolution along one axis.
    pub fn out_len(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Geometry resolved from input and weight shapes.
#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    cout: usize,
    k: usize,
    inp: [usize; 3],
    out: [usize; 3],
    spec: ConvSpec,
}

impl Geom {
    /// `[lo, hi)` of output indices whose tap `kk` lands inside the input.
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize, isize) {
        let off = (kk * self.spec.dilation) as isize - self.spec.pad as isize;
        let s = self.spec.stride as isize;
        let n_in = self.inp[axis] as isize;
        let n_out = self.out[axis] as isize;
        // o*s + off >= 0  and  o*s + off <= n_in - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if n_in - 1 - off < 0 {
            0
        } else {
            ((n_in - 1 - off) / s + 1).min(n_out)
        };
        (lo as usize, (hi.max(lo)) as usize, off)
    }

    /// Visit every (output row, input row) pair for each weight tap. The
    /// callback gets the flat weight index, the output row offset, the input
    /// row offset and the valid output-column range along W.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
        let [id, ih, iw] = self.inp;
        let [od, oh, ow] = self.out;
        let k = self.k;
        let s = self.spec.stride;
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for kd in 0..k {
                    let (d_lo, d_hi, d_off) = self.valid(0, kd);
                    for kh in 0..k {
                        let (h_lo, h_hi, h_off) = self.valid(1, kh);
                        for kw in 0..k {
                            let (w_lo, w_hi, w_off) = self.valid(2, kw);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let widx = (((co * self.cin + ci) * k + kd) * k + kh) * k + kw;
                            for o_d in d_lo..d_hi {
                                let i_d = (o_d * s) as isize + d_off;
                                for o_h in h_lo..h_hi {
                                    let i_h = (o_h * s) as isize + h_off;
                                    let out_row = ((co * od + o_d) * oh + o_h) * ow;
                                    let in_row = ((ci * id + i_d as usize) * ih + i_h as usize) * iw;
                                    f(widx, out_row, in_row, w_lo, w_hi, w_off);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    spec: ConvSpec,
    transposed: Option<Option<[usize; 3]>>,
) -> Result<Geom> {
    if x_shape.len() != 4 || w_shape.len() != 5 {
        return Err(Error::dim("conv3d", x_shape, w_shape));
    }
    let k = w_shape[2];
    if w_shape[3] != k || w_shape[4] != k || spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::dim("conv3d kernel", x_shape, w_shape));
    }
    let (cout, cin) = (w_shape[0], w_shape[1]);
    if let Some(target) = transposed {
        if x_shape[0] != cout {
            return Err(Error::dim("conv_transpose3d", x_shape, w_shape));
        }
        let small = [x_shape[1], x_shape[2], x_shape[3]];
        let span = spec.dilation * (k - 1) + 1;
        let mut big = [0usize; 3];
        for a in 0..3 {
            let full = (small[a] - 1) * spec.stride + span;
            if full <= 2 * spec.pad {
                return Err(Error::dim("conv_transpose3d", x_shape, w_shape));
            }
            big[a] = full - 2 * spec.pad;
        }
        if let Some(t) = target {
            for a in 0..3 {
                if spec.out_len(t[a], k) != Some(small[a]) {
                    return Err(Error::dim("conv_transpose3d target", x_shape, &t));
                }
            }
            big = t;
        }
        Ok(Geom {
            cin,
            cout,
            k,
            inp: big,
            out: small,
            spec,
        })
    } else {
        if x_shape[0] != cin {
            return Err(Error::dim("conv3d", x_shape, w_shape));
        }
        let inp = [x_shape[1], x_shape[2], x_shape[3]];
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = spec
                .out_len(inp[a], k)
                .ok_or_else(|| Error::dim("conv3d kernel larger than padded input", x_shape, w_shape))?;
        }
        Ok(Geom {
            cin,
            cout,
            k,
            inp,
            out,
            spec,
        })
    }
}

fn conv_fwd(g: &Geom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; g.cout * g.out.iter().product::<usize>()];
    let s = g.spec.stride;
    g.for_each_row(|widx, orow, irow, lo, hi, off| {
        let wv = w[widx];
        if wv == 0.0 {
            return;
        }
        for o in lo..hi {
            let i = (o * s) as isize + off;
            y[orow + o] += wv * x[irow + i as usize];
        }
    });
    y
}

fn conv_bwd_data(g: &Geom, gy: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; g.cin * g.inp.iter().product::<usize>()];
    let s = g.spec.stride;
    g.for_each_row(|widx, orow, irow, lo, hi, off| {
        let wv = w[widx];
        if wv == 0.0 {
            return;
        }
        for o in lo..hi {
            let i = (o * s) as isize + off;
            gx[irow + i as usize] += wv * gy[orow + o];
        }
    });
    gx
}

fn conv_bwd_weight(g: &Geom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let mut gw = vec![0.0; g.cout * g.cin * g.k * g.k * g.k];
    let s = g.spec.stride;
    g.for_each_row(|widx, orow, irow, lo, hi, off| {
        let mut acc = 0.0;
        for o in lo..hi {
            let i = (o * s) as isize + off;
            acc += gy[orow + o] * x[irow + i as usize];
        }
        gw[widx] += acc;
    });
    gw
}

impl<'t> Var<'t> {
    /// Convolution of `[C_in×D×H×W]` with weights `[C_out×C_in×k×k×k]`.
    pub fn conv3d(self, weight: Var<'t>, spec: ConvSpec) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let g = geometry(x.shape(), w.shape(), spec, None)?;
        let y = conv_fwd(&g, x.data(), w.data());
        let shape = vec![g.cout, g.out[0], g.out[1], g.out[2]];
        Ok(self.tape().op(
            "conv3d",
            &[self, weight],
            Tensor::from_parts(shape, y),
            Box::new(move |inp, _, gy| {
                vec![
                    Some(conv_bwd_data(&g, gy, inp[1].data())),
                    Some(conv_bwd_weight(&g, inp[0].data(), gy)),
                ]
            }),
        ))
    }

    /// Adjoint of [`Var::conv3d`] with the same weight layout: maps
    /// `[C_out×d×h×w]` back to `[C_in×D×H×W]`, where `D` is the smallest
    /// extent the forward convolution would have mapped to `d`.
    pub fn conv_transpose3d(self, weight: Var<'t>, spec: ConvSpec) -> Result<Var<'t>> {
        self.conv_transpose3d_to(weight, spec, None)
    }

    /// [`Var::conv_transpose3d`] with an explicit output extent, needed when
    /// a strided forward convolution floors several input sizes to one.
    pub fn conv_transpose3d_to(
        self,
        weight: Var<'t>,
        spec: ConvSpec,
        extents: Option<[usize; 3]>,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let g = geometry(x.shape(), w.shape(), spec, Some(extents))?;
        let y = conv_bwd_data(&g, x.data(), w.data());
        let shape = vec![g.cin, g.inp[0], g.inp[1], g.inp[2]];
        Ok(self.tape().op(
            "conv_transpose3d",
            &[self, weight],
            Tensor::from_parts(shape, y),
            Box::new(move |inp, _, gy| {
                vec![
                    Some(conv_fwd(&g, gy, inp[1].data())),
                    Some(conv_bwd_weight(&g, gy, inp[0].data())),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 3, 4, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
        let y = tape.constant(x.clone()).conv3d(w, ConvSpec::new(1, 0)).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn mean_kernel_preserves_constant_interior() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 5, 5, 5], 2.5));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0 / 27.0));
        let y = x.conv3d(w, ConvSpec::new(1, 1)).unwrap().value();
        assert_eq!(y.shape(), &[1, 5, 5, 5]);
        // interior voxels see no padding
        for d in 1..4 {
            for h in 1..4 {
                for w in 1..4 {
                    let v = y.data()[(d * 5 + h) * 5 + w];
                    assert!((v - 2.5).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (spec, k) in [
            (ConvSpec::new(1, 1), 3),
            (ConvSpec::new(2, 1), 3),
            (ConvSpec::new(2, 0), 2),
            (ConvSpec::dilated(2), 3),
        ] {
            let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 2, k, k, k], 1.0, &mut rng);
            let tape = Tape::new();
            let wv = tape.constant(w);
            let cx = tape.constant(x.clone()).conv3d(wv, spec).unwrap().value();
            let y = Tensor::randn(cx.shape(), 1.0, &mut rng);
            let cty = tape
                .constant(y.clone())
                .conv_transpose3d_to(wv, spec, Some([4, 4, 4]))
                .unwrap()
                .value();
            assert_eq!(cty.shape(), x.shape(), "{spec:?}");
            let lhs = cx.dot(&y);
            let rhs = x.dot(&cty);
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{spec:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let w = tape.constant(Tensor::ones(&[1, 1, 5, 5, 5]));
        assert!(matches!(
            x.conv3d(w, ConvSpec::new(1, 0)),
            Err(Error::Dimension { .. })
        ));
        let w = tape.constant(Tensor::ones(&[1, 2, 1, 1, 1]));
        assert!(x.conv3d(w, ConvSpec::new(1, 0)).is_err());
    }

    #[test]
    fn strided_halving() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 32, 32, 32]));
        let w = tape.constant(Tensor::ones(&[4, 1, 3, 3, 3]));
        let y = x.conv3d(w, ConvSpec::new(2, 1)).unwrap();
        assert_eq!(y.shape(), vec![4, 16, 16, 16]);
        let w2 = tape.constant(Tensor::ones(&[4, 1, 2, 2, 2]));
        let up = y.conv_transpose3d(w2, ConvSpec::new(2, 0)).unwrap();
        assert_eq!(up.shape(), vec![1, 32, 32, 32]);
    }
}
