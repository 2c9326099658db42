//! Central finite-difference verification of tape gradients.
//!
//! The scalar probed is `⟨f(θ), R⟩` for a fixed Gaussian projection `R`, so
//! every output element contributes. Per tensor the error is
//! `max|g_ad − g_fd| / max(max|g_ad|, max|g_fd|, floor)` over the probed
//! coordinates; large tensors are probed at a random subset.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Ctx, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub max_coords: usize,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            max_coords: 12,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub coords: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn probe(f_value: &Tensor, proj: &Tensor) -> Result<f64> {
    if f_value.shape() != proj.shape() {
        return Err(Error::Contract("gradcheck target changed output shape".into()));
    }
    Ok(f_value.dot(proj))
}

fn rel_err(ad: &[f64], fd: &[f64], floor: f64) -> f64 {
    let diff = ad.iter().zip(fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = ad
        .iter()
        .chain(fd)
        .fold(floor, |m, v| m.max(v.abs()));
    diff / scale
}

/// Check gradients of `f` with respect to every parameter in `store` and
/// every tensor in `inputs`.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(Ctx<'a>, &[Var<'a>]) -> Result<Var<'a>>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(ctx, &vars)?;
        Ok((*out.value()).clone())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (ad_params, ad_inputs, proj) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(ctx, &vars)?;
        let proj = Tensor::randn(&out.shape(), 1.0, &mut rng);
        let loss = out.mul(tape.constant(proj.clone()))?.sum();
        let grads = tape.backward(loss)?;
        let ad_inputs: Vec<Tensor> = vars.iter().map(|&v| grads.wrt_or_zero(v)).collect();
        let ad_params: Vec<Tensor> = store
            .iter()
            .map(|(id, p)| {
                let var = ctx.p(id);
                grads.wrt(var).unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect();
        (ad_params, ad_inputs, proj)
    };

    let mut report = GradCheckReport::default();
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, opts.max_coords).into_vec();
            v.sort_unstable();
            v
        }
    };

    let mut work = store.clone();
    for (k, (id, p)) in store.iter().enumerate() {
        let coords = pick(p.value.numel(), &mut rng);
        let mut ad = Vec::with_capacity(coords.len());
        let mut fd = Vec::with_capacity(coords.len());
        for &i in &coords {
            let base = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = base + opts.h;
            let up = probe(&eval(&work, inputs)?, &proj)?;
            work.get_mut(id).value.data_mut()[i] = base - opts.h;
            let down = probe(&eval(&work, inputs)?, &proj)?;
            work.get_mut(id).value.data_mut()[i] = base;
            fd.push((up - down) / (2.0 * opts.h));
            ad.push(ad_params[k].data()[i]);
        }
        report.tensors.push(TensorCheck {
            name: p.name.clone(),
            rel_err: rel_err(&ad, &fd, opts.floor),
            coords: coords.len(),
        });
    }

    let mut work_inputs = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let coords = pick(input.numel(), &mut rng);
        let mut ad = Vec::with_capacity(coords.len());
        let mut fd = Vec::with_capacity(coords.len());
        for &i in &coords {
            let base = input.data()[i];
            work_inputs[k].data_mut()[i] = base + opts.h;
            let up = probe(&eval(store, &work_inputs)?, &proj)?;
            work_inputs[k].data_mut()[i] = base - opts.h;
            let down = probe(&eval(store, &work_inputs)?, &proj)?;
            work_inputs[k].data_mut()[i] = base;
            fd.push((up - down) / (2.0 * opts.h));
            ad.push(ad_inputs[k].data()[i]);
        }
        report.tensors.push(TensorCheck {
            name: format!("input{k}"),
            rel_err: rel_err(&ad, &fd, opts.floor),
            coords: coords.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::Init;

    #[test]
    fn three_layer_mlp() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 5);
        let dims = [6, 8, 8, 3];
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let wt = init.fan_in(&format!("w{i}"), &[w[0], w[1]], w[0]).unwrap();
            let b = init.normal(&format!("b{i}"), &[w[1]], 0.1).unwrap();
            layers.push((wt, b));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let report = check_gradients(
            &store,
            &[x],
            |ctx, v| {
                let mut h = v[0];
                for (i, &(w, b)) in layers.iter().enumerate() {
                    h = h.matmul(ctx.p(w))?.add_row_bias(ctx.p(b))?;
                    if i + 1 < layers.len() {
                        h = h.tanh();
                    }
                }
                Ok(h)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.tensors.len(), 7);
        assert!(report.max_rel_err() <= 1e-5, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let report = check_gradients(
            &store,
            &[x],
            |_, v| {
                let x = v[0];
                let value = x.value().map(|a| a * a);
                Ok(x.tape().op(
                    "bad_square",
                    &[x],
                    value,
                    Box::new(|v, _, g| vec![Some(v[0].data().iter().zip(g).map(|(a, g)| a * g).collect())]),
                ))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() > 0.4);
    }
}
