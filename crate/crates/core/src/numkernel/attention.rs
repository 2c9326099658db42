use super::ops::softmax_in_place;
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Query/key row ranges attending to each other.
#[derive(Clone, Debug)]
struct Block {
    q: (usize, usize),
    k: (usize, usize),
}

fn blocks(nq: usize, nk: usize, window: Option<usize>) -> Result<Vec<Block>> {
    match window {
        Some(w) if w < nq.max(nk) => {
            if nq != nk || w == 0 {
                return Err(Error::Parameter(format!(
                    "windowed attention needs equal lengths and window > 0 (q={nq}, k={nk}, w={w})"
                )));
            }
            Ok((0..nq)
                .step_by(w)
                .map(|s| {
                    let e = (s + w).min(nq);
                    Block { q: (s, e), k: (s, e) }
                })
                .collect())
        }
        _ => Ok(vec![Block {
            q: (0, nq),
            k: (0, nk),
        }]),
    }
}

impl<'t> Var<'t> {
    /// Scaled dot-product attention `softmax(QKᵀ/√d)·V` with `self` as
    /// `Q[Nq×d]`. With `window = Some(w)` and equal lengths, rows attend only
    /// within consecutive blocks of `w` positions.
    pub fn attention(self, k: Var<'t>, v: Var<'t>, window: Option<usize>) -> Result<Var<'t>> {
        let (qt, kt, vt) = (self.value(), k.value(), v.value());
        if qt.rank() != 2 || kt.rank() != 2 || vt.rank() != 2 {
            return Err(Error::dim("attention", qt.shape(), kt.shape()));
        }
        let (nq, d) = (qt.shape()[0], qt.shape()[1]);
        let (nk, dk) = (kt.shape()[0], kt.shape()[1]);
        let (nv, dv) = (vt.shape()[0], vt.shape()[1]);
        if d != dk || nk != nv {
            return Err(Error::dim("attention", qt.shape(), kt.shape()));
        }
        let blocks = blocks(nq, nk, window)?;
        let scale = 1.0 / (d as f64).sqrt();
        let (q, kk, vv) = (qt.data(), kt.data(), vt.data());
        let mut out = vec![0.0; nq * dv];
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(blocks.len());
        for b in &blocks {
            let (q0, q1) = b.q;
            let (k0, k1) = b.k;
            let width = k1 - k0;
            let mut p = vec![0.0; (q1 - q0) * width];
            for (qi, prow) in (q0..q1).zip(p.chunks_mut(width)) {
                let qrow = &q[qi * d..(qi + 1) * d];
                for (kj, pv) in (k0..k1).zip(prow.iter_mut()) {
                    let krow = &kk[kj * d..(kj + 1) * d];
                    *pv = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(prow);
                let orow = &mut out[qi * dv..(qi + 1) * dv];
                for (kj, &pv) in (k0..k1).zip(prow.iter()) {
                    let vrow = &vv[kj * dv..(kj + 1) * dv];
                    orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += pv * x);
                }
            }
            probs.push(p);
        }
        Ok(self.tape().op(
            "attention",
            &[self, k, v],
            Tensor::from_parts(vec![nq, dv], out),
            Box::new(move |inp, _, g| {
                let (q, kk, vv) = (inp[0].data(), inp[1].data(), inp[2].data());
                let mut gq = vec![0.0; nq * d];
                let mut gk = vec![0.0; nk * d];
                let mut gv = vec![0.0; nk * dv];
                for (b, p) in blocks.iter().zip(&probs) {
                    let (q0, q1) = b.q;
                    let (k0, k1) = b.k;
                    let width = k1 - k0;
                    for (qi, prow) in (q0..q1).zip(p.chunks(width)) {
                        let grow = &g[qi * dv..(qi + 1) * dv];
                        // dP = dO · Vᵀ, dS = P ⊙ (dP − ⟨dP, P⟩)
                        let mut gs = vec![0.0; width];
                        for (j, kj) in (k0..k1).enumerate() {
                            let vrow = &vv[kj * dv..(kj + 1) * dv];
                            gs[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            let gvrow = &mut gv[kj * dv..(kj + 1) * dv];
                            gvrow.iter_mut().zip(grow).for_each(|(o, x)| *o += prow[j] * x);
                        }
                        let dot: f64 = gs.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (gsv, pv) in gs.iter_mut().zip(prow) {
                            *gsv = pv * (*gsv - dot) * scale;
                        }
                        let qrow = &q[qi * d..(qi + 1) * d];
                        let gqrow = &mut gq[qi * d..(qi + 1) * d];
                        for (j, kj) in (k0..k1).enumerate() {
                            let krow = &kk[kj * d..(kj + 1) * d];
                            gqrow.iter_mut().zip(krow).for_each(|(o, x)| *o += gs[j] * x);
                            let gkrow = &mut gk[kj * d..(kj + 1) * d];
                            gkrow.iter_mut().zip(qrow).for_each(|(o, x)| *o += gs[j] * x);
                        }
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        ))
    }
}
