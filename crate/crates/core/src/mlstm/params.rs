use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::cell::{self, HeadState};
use crate::nn::{Binding, Init, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Plain-tensor weights of one multi-head cell layer.
///
/// Projections are stored input-major (`[in, out]`). The input and forget
/// gates are scalar per head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlstmParams<S> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_i: Tensor<S>,
    pub b_i: Tensor<S>,
    pub w_f: Tensor<S>,
    pub b_f: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_o: Tensor<S>,
    pub num_heads: usize,
    pub head_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlstmState<S> {
    pub heads: Vec<HeadState<S>>,
}

impl<S: Scalar> MlstmState<S> {
    pub fn new(num_heads: usize, head_dim: usize) -> Self {
        Self {
            heads: vec![HeadState::new(head_dim); num_heads],
        }
    }
}

/// Forget-gate bias per head: `ln σ(b)` for `b` evenly spaced in `[3, 6]`,
/// so every head starts close to full retention with a spread of horizons.
pub fn forget_bias_init(num_heads: usize) -> Vec<f64> {
    (0..num_heads)
        .map(|h| {
            let b = if num_heads == 1 { 3.0 } else { 3.0 + 3.0 * h as f64 / (num_heads - 1) as f64 };
            -Float::ln_1p(Float::exp(-b))
        })
        .collect()
}

impl<S: Scalar> MlstmParams<S> {
    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Random weights, keyed on `seed`.
    pub fn init(seed: u64, num_heads: usize, head_dim: usize) -> Self {
        let mut store = ParamStore::new(seed);
        let layer = MlstmLayer::new(&mut store, "cell", num_heads * head_dim, num_heads, head_dim);
        layer.params(&store)
    }

    fn validate(&self) -> Result<()> {
        let d = self.model_dim();
        let h = self.num_heads;
        let want: [(&str, &Tensor<S>, &[usize]); 9] = [
            ("w_q", &self.w_q, &[d, d]),
            ("w_k", &self.w_k, &[d, d]),
            ("w_v", &self.w_v, &[d, d]),
            ("w_i", &self.w_i, &[d, h]),
            ("b_i", &self.b_i, &[h]),
            ("w_f", &self.w_f, &[d, h]),
            ("b_f", &self.b_f, &[h]),
            ("w_o", &self.w_o, &[d, d]),
            ("b_o", &self.b_o, &[d]),
        ];
        for (name, t, shape) in want {
            if t.shape() != shape {
                return Err(Error::Parameter(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Parameter(format!("{name} is not finite")));
            }
        }
        Ok(())
    }
}

struct Projected<S> {
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    ig: Vec<S>,
    fg: Vec<S>,
    o: Vec<S>,
}

fn affine<S: Scalar>(x: &[S], t: usize, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Vec<S> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![S::zero(); t * dout];
    for r in 0..t {
        let row = &mut out[r * dout..(r + 1) * dout];
        if let Some(b) = b {
            row.copy_from_slice(b.data());
        }
        for i in 0..din {
            let xv = x[r * din + i];
            for (o, &wv) in row.iter_mut().zip(&w.data()[i * dout..(i + 1) * dout]) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn project<S: Scalar>(p: &MlstmParams<S>, x: &[S], t: usize) -> Projected<S> {
    let scale = S::one() / S::lit(p.head_dim as f64).sqrt();
    let mut k = affine(x, t, &p.w_k, None);
    k.iter_mut().for_each(|v| *v *= scale);
    let mut o = affine(x, t, &p.w_o, Some(&p.b_o));
    o.iter_mut().for_each(|v| *v = S::one() / (S::one() + (-*v).exp()));
    Projected {
        q: affine(x, t, &p.w_q, None),
        k,
        v: affine(x, t, &p.w_v, None),
        ig: affine(x, t, &p.w_i, Some(&p.b_i)),
        fg: affine(x, t, &p.w_f, Some(&p.b_f)),
        o,
    }
}

fn head_slice<S: Scalar>(src: &[S], t: usize, width: usize, off: usize, d: usize) -> Vec<S> {
    (0..t).flat_map(|r| src[r * width + off..r * width + off + d].iter().copied()).collect()
}

fn check_tokens<S: Scalar>(p: &MlstmParams<S>, x: &Tensor<S>) -> Result<usize> {
    p.validate()?;
    let d = p.model_dim();
    match *x.shape() {
        [t, dm] if dm == d => Ok(t),
        _ => Err(Error::dim("mlstm_sequence", format!("expected [T, {d}], got {:?}", x.shape()))),
    }
}

fn first_non_finite<S: Scalar>(x: &[S], d: usize) -> Option<usize> {
    x.chunks(d).position(|row| !row.iter().all(|v| v.is_finite()))
}

fn run<S: Scalar>(p: &MlstmParams<S>, x: &Tensor<S>, reverse: bool, chunk: Option<usize>) -> Result<Tensor<S>> {
    let t = check_tokens(p, x)?;
    let d = p.model_dim();
    let mut data = x.data().to_vec();
    if let Some(tok) = first_non_finite(&data, d) {
        return Err(Error::NonFiniteToken { token: tok });
    }
    if reverse {
        reverse_rows(&mut data, d);
    }
    let pr = project(p, &data, t);
    let hd = p.head_dim;
    let mut out = vec![S::zero(); t * d];
    for h in 0..p.num_heads {
        let q = head_slice(&pr.q, t, d, h * hd, hd);
        let k = head_slice(&pr.k, t, d, h * hd, hd);
        let v = head_slice(&pr.v, t, d, h * hd, hd);
        let ig = head_slice(&pr.ig, t, p.num_heads, h, 1);
        let fg = head_slice(&pr.fg, t, p.num_heads, h, 1);
        let mut st = HeadState::new(hd);
        let ht = match chunk {
            None => cell::head_sequence(&q, &k, &v, &ig, &fg, &mut st)?,
            Some(c) => cell::head_sequence_chunked(&q, &k, &v, &ig, &fg, c, &mut st)?,
        };
        for r in 0..t {
            for j in 0..hd {
                let idx = r * d + h * hd + j;
                out[idx] = pr.o[idx] * ht[r * hd + j];
            }
        }
    }
    if reverse {
        reverse_rows(&mut out, d);
    }
    Tensor::new(&[t, d], out)
}

fn reverse_rows<S: Copy>(data: &mut [S], d: usize) {
    let t = data.len() / d;
    for r in 0..t / 2 {
        for j in 0..d {
            data.swap(r * d + j, (t - 1 - r) * d + j);
        }
    }
}

/// One token through the layer: returns `h_t` and the advanced state.
pub fn mlstm_step<S: Scalar>(params: &MlstmParams<S>, state: &MlstmState<S>, x_t: &Tensor<S>) -> Result<(Tensor<S>, MlstmState<S>)> {
    params.validate()?;
    let d = params.model_dim();
    if x_t.shape() != [d] {
        return Err(Error::dim("mlstm_step", format!("expected [{d}], got {:?}", x_t.shape())));
    }
    if state.heads.len() != params.num_heads || state.heads.iter().any(|h| h.head_dim() != params.head_dim) {
        return Err(Error::dim("mlstm_step", "state does not match the head layout"));
    }
    if !x_t.is_finite() {
        return Err(Error::NonFiniteToken { token: 0 });
    }
    let pr = project(params, x_t.data(), 1);
    let hd = params.head_dim;
    let mut next = state.clone();
    let mut out = vec![S::zero(); d];
    for (h, st) in next.heads.iter_mut().enumerate() {
        let r = h * hd..(h + 1) * hd;
        let ht = cell::head_step(st, &pr.q[r.clone()], &pr.k[r.clone()], &pr.v[r.clone()], pr.ig[h], pr.fg[h]);
        for j in 0..hd {
            out[h * hd + j] = pr.o[h * hd + j] * ht[j];
        }
    }
    if !out.iter().all(|v| v.is_finite()) || next.heads.iter().any(|h| !h.c.iter().chain(&h.n).all(|v| v.is_finite())) {
        return Err(Error::NonFiniteToken { token: 0 });
    }
    Ok((Tensor::new(&[d], out)?, next))
}

/// Sequential fold over `x[T, D]` from the initial state.
pub fn mlstm_sequence<S: Scalar>(params: &MlstmParams<S>, x: &Tensor<S>, reverse: bool) -> Result<Tensor<S>> {
    run(params, x, reverse, None)
}

/// Same result as [`mlstm_sequence`], evaluated chunk by chunk.
pub fn mlstm_sequence_chunked<S: Scalar>(params: &MlstmParams<S>, x: &Tensor<S>, reverse: bool, chunk: usize) -> Result<Tensor<S>> {
    run(params, x, reverse, Some(chunk))
}

/// The cell layer as tape parameters.
#[derive(Clone, Copy, Debug)]
pub struct MlstmLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub i: Linear,
    pub f: Linear,
    pub o: Linear,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl MlstmLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, num_heads: usize, head_dim: usize) -> Self {
        let proj = Init::Normal {
            std: 1.0 / Float::sqrt(dim as f64),
        };
        let gate = Init::Normal {
            std: 0.1 / Float::sqrt(dim as f64),
        };
        let layer = Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, proj.clone()),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, proj.clone()),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, proj.clone()),
            i: Linear::new(store, &format!("{name}.igate"), dim, num_heads, true, gate.clone()),
            f: Linear::new(store, &format!("{name}.fgate"), dim, num_heads, true, gate),
            o: Linear::new(store, &format!("{name}.ogate"), dim, dim, true, proj),
            num_heads,
            head_dim,
        };
        let fb = layer.f.bias.expect("forget gate has a bias");
        let values = forget_bias_init(num_heads);
        for (dst, v) in store.get_mut(fb).data_mut().iter_mut().zip(values) {
            *dst = S::lit(v);
        }
        layer
    }

    pub fn numel(&self) -> usize {
        [self.q, self.k, self.v, self.i, self.f, self.o].iter().map(Linear::numel).sum()
    }

    /// `x[B, T, D] -> h[B, T, D]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, bind, x)?;
        let k = self.k.forward(tape, bind, x)?;
        let k = tape.scale(k, S::one() / S::lit(self.head_dim as f64).sqrt())?;
        let v = self.v.forward(tape, bind, x)?;
        let ig = self.i.forward(tape, bind, x)?;
        let fg = self.f.forward(tape, bind, x)?;
        let o = self.o.forward(tape, bind, x)?;
        let o = tape.sigmoid(o)?;
        let h = tape.mlstm_cell(q, k, v, ig, fg, self.num_heads)?;
        tape.mul(o, h)
    }

    /// Copies the weights out into a standalone [`MlstmParams`].
    pub fn params<S: Scalar>(&self, store: &ParamStore<S>) -> MlstmParams<S> {
        let b = |l: &Linear| store.get(l.bias.expect("gate bias")).clone();
        MlstmParams {
            w_q: store.get(self.q.weight).clone(),
            w_k: store.get(self.k.weight).clone(),
            w_v: store.get(self.v.weight).clone(),
            w_i: store.get(self.i.weight).clone(),
            b_i: b(&self.i),
            w_f: store.get(self.f.weight).clone(),
            b_f: b(&self.f),
            w_o: store.get(self.o.weight).clone(),
            b_o: b(&self.o),
            num_heads: self.num_heads,
            head_dim: self.head_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tokens(seed: u64, t: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[t, d], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forget_bias_spans_expected_range() {
        let b = forget_bias_init(4);
        assert!((b[0] - (1.0 / (1.0 + (-3.0f64).exp())).ln()).abs() < 1e-15);
        assert!((b[3] - (1.0 / (1.0 + (-6.0f64).exp())).ln()).abs() < 1e-15);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_token_sequence_equals_step() {
        let p = MlstmParams::<f64>::init(1, 2, 4);
        let x = tokens(2, 1, 8);
        let seq = mlstm_sequence(&p, &x, false).unwrap();
        let (h, _) = mlstm_step(&p, &MlstmState::new(2, 4), &x.reshape(&[8]).unwrap()).unwrap();
        assert_eq!(seq.data(), h.data());
    }

    #[test]
    fn folded_steps_equal_sequence() {
        let p = MlstmParams::<f64>::init(4, 2, 3);
        let x = tokens(5, 9, 6);
        let seq = mlstm_sequence(&p, &x, false).unwrap();
        let mut st = MlstmState::new(2, 3);
        for t in 0..9 {
            let xt = Tensor::new(&[6], x.data()[t * 6..(t + 1) * 6].to_vec()).unwrap();
            let (h, next) = mlstm_step(&p, &st, &xt).unwrap();
            assert_eq!(h.data(), &seq.data()[t * 6..(t + 1) * 6]);
            st = next;
        }
    }

    #[test]
    fn reverse_is_flip_of_forward_on_flipped() {
        let p = MlstmParams::<f64>::init(3, 2, 2);
        let x = tokens(6, 7, 4);
        let mut flipped = x.data().to_vec();
        reverse_rows(&mut flipped, 4);
        let fwd = mlstm_sequence(&p, &Tensor::new(&[7, 4], flipped).unwrap(), false).unwrap();
        let mut want = fwd.into_data();
        reverse_rows(&mut want, 4);
        assert_eq!(mlstm_sequence(&p, &x, true).unwrap().data(), want.as_slice());
    }

    #[test]
    fn chunked_layer_matches_sequential() {
        let p = MlstmParams::<f64>::init(8, 2, 4);
        let x = tokens(9, 16, 8);
        let a = mlstm_sequence(&p, &x, false).unwrap();
        let b = mlstm_sequence_chunked(&p, &x, false, 4).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn errors() {
        let p = MlstmParams::<f64>::init(0, 1, 2);
        assert!(matches!(
            mlstm_sequence(&p, &Tensor::new(&[2, 3], vec![0.0; 6]).unwrap(), false),
            Err(Error::Dimension { .. })
        ));
        let mut x = tokens(0, 4, 2);
        x.data_mut()[5] = f64::NAN;
        assert_eq!(mlstm_sequence(&p, &x, false), Err(Error::NonFiniteToken { token: 2 }));
        assert_eq!(
            cell::head_sequence::<f64>(&[], &[], &[], &[], &[], &mut HeadState::new(2)),
            Err(Error::EmptySequence)
        );
    }

    #[test]
    fn tape_layer_matches_standalone() {
        let mut store = ParamStore::<f64>::new(21);
        let layer = MlstmLayer::new(&mut store, "cell", 6, 3, 2);
        let x = tokens(4, 5, 6);
        let mut tape = Tape::inference();
        let bind = store.bind_frozen(&mut tape);
        let xv = tape.constant(&x.reshape(&[1, 5, 6]).unwrap());
        let y = layer.forward(&mut tape, &bind, xv).unwrap();
        let want = mlstm_sequence(&layer.params(&store), &x, false).unwrap();
        for (a, b) in tape.value(y).iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
