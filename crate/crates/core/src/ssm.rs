//! Selective state-space scan.
//!
//! Per channel `c` and state `s`, with step `Δ_t[c] > 0` and `A[c,s] < 0`:
//!
//! ```text
//! h_t[c,s] = exp(Δ_t[c]·A[c,s]) · h_{t-1}[c,s] + Δ_t[c]·B_t[s]·x_t[c]
//! y_t[c]   = Σ_s C_t[s]·h_t[c,s] + D[c]·x_t[c]
//! ```
//!
//! `B_t`, `C_t` and `Δ_t` are linear functions of the input token, with `Δ`
//! passed through softplus; `A = -exp(log_a)`. The recurrence is evaluated
//! either step by step or chunk by chunk, where each chunk composes the
//! affine maps `h ↦ a·h + b` of its steps and applies the result to the
//! carried state.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::init::Init;
use crate::numkernel::{Ctx, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Chunked(usize),
}

/// Borrowed operands of one scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a> {
    /// `[L×d]`
    pub x: &'a [f64],
    /// `[L×d]`, positive
    pub delta: &'a [f64],
    /// `[d×n]`, negative
    pub a: &'a [f64],
    /// `[L×n]`
    pub b: &'a [f64],
    /// `[L×n]`
    pub c: &'a [f64],
    /// `[d]`
    pub d: &'a [f64],
    pub len: usize,
    pub d_model: usize,
    pub d_state: usize,
}

/// Scan output plus every hidden state `h_t` (`[L×d×n]`) for the backward
/// pass.
pub struct ScanOutput {
    pub y: Vec<f64>,
    pub states: Vec<f64>,
}

impl ScanInputs<'_> {
    fn validate(&self) -> Result<()> {
        let (l, d, n) = (self.len, self.d_model, self.d_state);
        if l == 0 {
            return Err(Error::Parameter("selective scan needs L >= 1".into()));
        }
        let ok = self.x.len() == l * d
            && self.delta.len() == l * d
            && self.a.len() == d * n
            && self.b.len() == l * n
            && self.c.len() == l * n
            && self.d.len() == d;
        if !ok {
            return Err(Error::dim("selective_scan", &[l, d, n], &[self.x.len(), self.b.len()]));
        }
        Ok(())
    }

    fn emit(&self, t: usize, h: &[f64], y: &mut [f64]) -> Result<()> {
        let (d, n) = (self.d_model, self.d_state);
        let ct = &self.c[t * n..(t + 1) * n];
        for ch in 0..d {
            let hs = &h[ch * n..(ch + 1) * n];
            let v = hs.iter().zip(ct).map(|(h, c)| h * c).sum::<f64>() + self.d[ch] * self.x[t * d + ch];
            if !v.is_finite() {
                return Err(Error::Numeric(format!("selective scan produced a non-finite output at t={t}")));
            }
            y[t * d + ch] = v;
        }
        Ok(())
    }

    /// Decay `a_t` and input `b_t` of step `t` for one (channel, state).
    #[inline]
    fn step(&self, t: usize, ch: usize, s: usize) -> (f64, f64) {
        let (d, n) = (self.d_model, self.d_state);
        let dt = self.delta[t * d + ch];
        (
            (dt * self.a[ch * n + s]).exp(),
            dt * self.b[t * n + s] * self.x[t * d + ch],
        )
    }
}

pub fn scan_sequential(inp: &ScanInputs<'_>) -> Result<ScanOutput> {
    inp.validate()?;
    let (l, d, n) = (inp.len, inp.d_model, inp.d_state);
    let mut y = vec![0.0; l * d];
    let mut states = vec![0.0; l * d * n];
    let mut h = vec![0.0; d * n];
    for t in 0..l {
        for ch in 0..d {
            for s in 0..n {
                let (a, b) = inp.step(t, ch, s);
                h[ch * n + s] = a * h[ch * n + s] + b;
            }
        }
        inp.emit(t, &h, &mut y)?;
        states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
    }
    Ok(ScanOutput { y, states })
}

/// Affine map `h ↦ a·h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(self, first: Affine) -> Affine {
        Affine {
            a: self.a * first.a,
            b: self.a * first.b + self.b,
        }
    }

    pub fn apply(self, h: f64) -> f64 {
        self.a * h + self.b
    }
}

pub fn scan_chunked(inp: &ScanInputs<'_>, chunk: usize) -> Result<ScanOutput> {
    if chunk == 0 {
        return Err(Error::Parameter("scan chunk must be >= 1".into()));
    }
    inp.validate()?;
    let (l, d, n) = (inp.len, inp.d_model, inp.d_state);
    let mut y = vec![0.0; l * d];
    let mut states = vec![0.0; l * d * n];
    let mut carry = vec![0.0; d * n];
    let mut maps = vec![Affine::IDENTITY; d * n];
    let mut h = vec![0.0; d * n];
    for start in (0..l).step_by(chunk) {
        let end = (start + chunk).min(l);
        maps.iter_mut().for_each(|m| *m = Affine::IDENTITY);
        for t in start..end {
            for ch in 0..d {
                for s in 0..n {
                    let (a, b) = inp.step(t, ch, s);
                    let k = ch * n + s;
                    maps[k] = Affine { a, b }.after(maps[k]);
                    h[k] = maps[k].apply(carry[k]);
                }
            }
            inp.emit(t, &h, &mut y)?;
            states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
        }
        carry.copy_from_slice(&h);
    }
    Ok(ScanOutput { y, states })
}

fn scan_backward(inp: &ScanInputs<'_>, states: &[f64], gy: &[f64]) -> [Vec<f64>; 6] {
    let (l, d, n) = (inp.len, inp.d_model, inp.d_state);
    let mut gx = vec![0.0; l * d];
    let mut gdelta = vec![0.0; l * d];
    let mut ga = vec![0.0; d * n];
    let mut gb = vec![0.0; l * n];
    let mut gc = vec![0.0; l * n];
    let mut gd = vec![0.0; d];
    // carry = a_{t+1} ⊙ ∂L/∂h_{t+1}
    let mut carry = vec![0.0; d * n];
    for t in (0..l).rev() {
        let h = &states[t * d * n..(t + 1) * d * n];
        for ch in 0..d {
            let g = gy[t * d + ch];
            let xt = inp.x[t * d + ch];
            let dt = inp.delta[t * d + ch];
            gd[ch] += g * xt;
            gx[t * d + ch] += g * inp.d[ch];
            for s in 0..n {
                let k = ch * n + s;
                gc[t * n + s] += g * h[k];
                let gh = g * inp.c[t * n + s] + carry[k];
                let av = inp.a[k];
                let decay = (dt * av).exp();
                let h_prev = if t > 0 { states[(t - 1) * d * n + k] } else { 0.0 };
                let g_decay = gh * h_prev * decay;
                let bt = inp.b[t * n + s];
                gdelta[t * d + ch] += g_decay * av + gh * bt * xt;
                ga[k] += g_decay * dt;
                gb[t * n + s] += gh * dt * xt;
                gx[t * d + ch] += gh * dt * bt;
                carry[k] = decay * gh;
            }
        }
    }
    [gx, gdelta, ga, gb, gc, gd]
}

impl<'t> Var<'t> {
    /// Fused selective scan over `self = x[L×d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        self,
        delta: Var<'t>,
        a: Var<'t>,
        b: Var<'t>,
        c: Var<'t>,
        d: Var<'t>,
        mode: ScanMode,
    ) -> Result<Var<'t>> {
        let (xv, dv, av, bv, cv, skip) = (
            self.value(),
            delta.value(),
            a.value(),
            b.value(),
            c.value(),
            d.value(),
        );
        if xv.rank() != 2 || av.rank() != 2 || dv.shape() != xv.shape() {
            return Err(Error::dim("selective_scan", xv.shape(), av.shape()));
        }
        let (len, d_model) = (xv.shape()[0], xv.shape()[1]);
        let d_state = av.shape()[1];
        let inp = ScanInputs {
            x: xv.data(),
            delta: dv.data(),
            a: av.data(),
            b: bv.data(),
            c: cv.data(),
            d: skip.data(),
            len,
            d_model,
            d_state,
        };
        let out = match mode {
            ScanMode::Sequential => scan_sequential(&inp)?,
            ScanMode::Chunked(k) => scan_chunked(&inp, k)?,
        };
        let states = Rc::new(out.states);
        Ok(self.tape().op(
            "selective_scan",
            &[self, delta, a, b, c, d],
            Tensor::from_parts(vec![len, d_model], out.y),
            Box::new(move |v, _, g| {
                let inp = ScanInputs {
                    x: v[0].data(),
                    delta: v[1].data(),
                    a: v[2].data(),
                    b: v[3].data(),
                    c: v[4].data(),
                    d: v[5].data(),
                    len,
                    d_model,
                    d_state,
                };
                scan_backward(&inp, &states, g).into_iter().map(Some).collect()
            }),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub mode: ScanMode,
}

/// Learnable parameters of one selective SSM layer.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub cfg: SsmConfig,
    /// `[d×n]`, `A = -exp(log_a)`
    pub log_a: ParamId,
    /// `[d×n]` input → `B_t`
    pub proj_b: ParamId,
    /// `[d×n]` input → `C_t`
    pub proj_c: ParamId,
    /// `[d×d]` input → pre-softplus `Δ_t`
    pub proj_delta: ParamId,
    pub delta_bias: ParamId,
    pub skip: ParamId,
}

impl SsmParams {
    pub fn new(init: &mut Init<'_>, cfg: SsmConfig) -> Result<Self> {
        let (d, n) = (cfg.d_model, cfg.d_state);
        if d == 0 || n == 0 {
            return Err(Error::Parameter("ssm needs d_model > 0 and d_state > 0".into()));
        }
        // A = -(1..=n) per channel; Δ starts in roughly [0.01, 0.1].
        let log_a = Tensor::from_fn(&[d, n], |i| ((i % n) as f64 + 1.0).ln());
        let delta0 = Tensor::from_fn(&[d], |i| {
            let dt = 0.01 * 10f64.powf(i as f64 / d.max(2).saturating_sub(1) as f64);
            (dt.exp() - 1.0).ln()
        });
        Ok(SsmParams {
            cfg,
            log_a: init.tensor("log_a", log_a)?,
            proj_b: init.fan_in("proj_b", &[d, n], d)?,
            proj_c: init.fan_in("proj_c", &[d, n], d)?,
            proj_delta: init.normal("proj_delta", &[d, d], 0.1 / (d as f64).sqrt())?,
            delta_bias: init.tensor("delta_bias", delta0)?,
            skip: init.full("skip", &[d], 1.0)?,
        })
    }

    /// `u[L×d] → y[L×d]`.
    pub fn forward<'a>(&self, ctx: Ctx<'a>, u: Var<'a>) -> Result<Var<'a>> {
        let delta = u
            .matmul(ctx.p(self.proj_delta))?
            .add_row_bias(ctx.p(self.delta_bias))?
            .softplus();
        let b = u.matmul(ctx.p(self.proj_b))?;
        let c = u.matmul(ctx.p(self.proj_c))?;
        let a = ctx.p(self.log_a).exp().neg();
        u.selective_scan(delta, a, b, c, ctx.p(self.skip), self.cfg.mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{ParamStore, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Case {
        x: Vec<f64>,
        delta: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
        l: usize,
        dm: usize,
        n: usize,
    }

    impl Case {
        fn random(rng: &mut ChaCha8Rng, l: usize, dm: usize, n: usize) -> Case {
            let mut v = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
            Case {
                x: v(l * dm, -1.0, 1.0),
                delta: v(l * dm, 0.01, 0.5),
                a: v(dm * n, -2.0, -0.1),
                b: v(l * n, -1.0, 1.0),
                c: v(l * n, -1.0, 1.0),
                d: v(dm, -1.0, 1.0),
                l,
                dm,
                n,
            }
        }

        fn inputs(&self) -> ScanInputs<'_> {
            ScanInputs {
                x: &self.x,
                delta: &self.delta,
                a: &self.a,
                b: &self.b,
                c: &self.c,
                d: &self.d,
                len: self.l,
                d_model: self.dm,
                d_state: self.n,
            }
        }

        /// Independent per-timestep loop, written from the recurrence.
        fn oracle(&self) -> Vec<f64> {
            let mut h = vec![vec![0.0; self.n]; self.dm];
            let mut y = Vec::new();
            for t in 0..self.l {
                for ch in 0..self.dm {
                    let dt = self.delta[t * self.dm + ch];
                    let xt = self.x[t * self.dm + ch];
                    let mut acc = 0.0;
                    for s in 0..self.n {
                        let abar = (dt * self.a[ch * self.n + s]).exp();
                        let bbar = dt * self.b[t * self.n + s];
                        h[ch][s] = abar * h[ch][s] + bbar * xt;
                        acc += self.c[t * self.n + s] * h[ch][s];
                    }
                    y.push(acc + self.d[ch] * xt);
                }
            }
            y
        }
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn sequential_matches_independent_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let case = Case::random(&mut rng, 64, 3, 4);
        let y = scan_sequential(&case.inputs()).unwrap().y;
        assert!(max_diff(&y, &case.oracle()) <= 1e-12);
    }

    #[test]
    fn single_step_hand_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let case = Case::random(&mut rng, 1, 2, 3);
        let y = scan_sequential(&case.inputs()).unwrap().y;
        for ch in 0..2 {
            let dt = case.delta[ch];
            let x = case.x[ch];
            let expect: f64 = (0..3).map(|s| case.c[s] * dt * case.b[s] * x).sum::<f64>() + case.d[ch] * x;
            assert!((y[ch] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_projection_with_unit_skip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut case = Case::random(&mut rng, 10, 3, 4);
        case.b.iter_mut().for_each(|v| *v = 0.0);
        case.d.iter_mut().for_each(|v| *v = 1.0);
        let y = scan_sequential(&case.inputs()).unwrap().y;
        assert_eq!(y, case.x);
    }

    #[test]
    fn chunked_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let case = Case::random(&mut rng, 64, 3, 5);
        let seq = scan_sequential(&case.inputs()).unwrap();
        for chunk in [1, 7, 64, 100] {
            let ch = scan_chunked(&case.inputs(), chunk).unwrap();
            assert!(max_diff(&seq.y, &ch.y) <= 1e-12, "chunk {chunk}");
            assert!(max_diff(&seq.states, &ch.states) <= 1e-12, "chunk {chunk}");
        }
        assert!(scan_chunked(&case.inputs(), 0).is_err());
    }

    #[test]
    fn causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut case = Case::random(&mut rng, 20, 2, 3);
        let y0 = scan_sequential(&case.inputs()).unwrap().y;
        case.x[12 * 2] += 1.0;
        let y1 = scan_sequential(&case.inputs()).unwrap().y;
        assert_eq!(y0[..12 * 2], y1[..12 * 2]);
        assert_ne!(y0[12 * 2], y1[12 * 2]);
    }

    #[test]
    fn empty_sequence_rejected() {
        let case = Case {
            x: vec![],
            delta: vec![],
            a: vec![-1.0],
            b: vec![],
            c: vec![],
            d: vec![1.0],
            l: 0,
            dm: 1,
            n: 1,
        };
        assert!(matches!(scan_sequential(&case.inputs()), Err(Error::Parameter(_))));
    }

    #[test]
    fn stays_bounded_over_long_sequences() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 3);
        let cfg = SsmConfig {
            d_model: 4,
            d_state: 8,
            mode: ScanMode::Sequential,
        };
        let ssm = SsmParams::new(&mut init, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Tensor::uniform(&[4096, 4], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let y = ssm.forward(ctx, tape.constant(u)).unwrap().value();
        assert!(y.is_finite());
        assert!(y.max_abs() < 1e3);
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        use crate::numkernel::gradcheck::{check_gradients, GradCheckOptions};
        for (seed, mode) in [(0, ScanMode::Sequential), (1, ScanMode::Chunked(3))] {
            let mut store = ParamStore::new();
            let mut init = Init::new(&mut store, seed);
            let cfg = SsmConfig {
                d_model: 3,
                d_state: 4,
                mode,
            };
            let ssm = SsmParams::new(&mut init, cfg).unwrap();
            for id in [ssm.proj_delta, ssm.proj_b, ssm.proj_c] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
                let shape = store.get(id).value.shape().to_vec();
                store.set(id, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
            let u = Tensor::randn(&[11, 3], 1.0, &mut rng);
            let opts = GradCheckOptions {
                seed,
                ..Default::default()
            };
            let report = check_gradients(&store, &[u], |ctx, v| ssm.forward(ctx, v[0]), opts).unwrap();
            assert!(report.max_rel_err() <= 1e-4, "{report:?}");
        }
    }
}
