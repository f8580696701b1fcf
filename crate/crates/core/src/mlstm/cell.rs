//! Stabilized matrix-memory recurrence for a single head.
//!
//! Gates are exponential. The literal state is
//! `C_t = f_t C_{t-1} + i_t v_t k_tᵀ`, `n_t = f_t n_{t-1} + i_t k_t` with
//! readout `C_t q_t / max(|n_tᵀ q_t|, 1)`. The stored state is scaled by
//! `exp(-m_t)` where `m_t = max(f̃_t + m_{t-1}, ĩ_t)`, which keeps both
//! gates in `(0, 1]`. Under that scaling the readout lower bound of 1 becomes
//! `exp(-m_t)`, so the stabilized readout equals the literal one.
//!
//! The readout does not depend on the stabilizer sequence, so the backward
//! pass treats `m` as a constant.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Grads, Op, Tape, Var};
use crate::{Error, Result, Scalar};

/// Stand-in for the `-∞` initial stabilizer.
pub const STABILIZER_INIT: f64 = -1e30;

/// Recurrent state of one head: `c` is `d × d` row-major with value rows and
/// key columns, so `c · q` is value-shaped.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadState<S> {
    pub c: Vec<S>,
    pub n: Vec<S>,
    pub m: S,
}

impl<S: Scalar> HeadState<S> {
    pub fn new(head_dim: usize) -> Self {
        Self {
            c: vec![S::zero(); head_dim * head_dim],
            n: vec![S::zero(); head_dim],
            m: S::lit(STABILIZER_INIT),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.n.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct StepAux<S> {
    pub f_act: S,
    pub i_act: S,
    pub s: S,
    pub den: S,
    /// `|nᵀq|` won the max in the denominator.
    pub active: bool,
}

#[inline]
fn readout_floor<S: Scalar>(m: S) -> S {
    (-m).min(S::max_value().ln()).exp()
}

/// Advances `st` by one token and writes the normalized readout `h̃` to `out`.
pub(crate) fn step<S: Scalar>(st: &mut HeadState<S>, q: &[S], k: &[S], v: &[S], ig: S, fg: S, out: &mut [S]) -> StepAux<S> {
    let d = q.len();
    let a = fg + st.m;
    let m = a.max(ig);
    let f_act = (a - m).min(S::zero()).exp();
    let i_act = (ig - m).min(S::zero()).exp();
    for r in 0..d {
        let iv = i_act * v[r];
        let row = &mut st.c[r * d..(r + 1) * d];
        for (cv, &kv) in row.iter_mut().zip(k) {
            *cv = f_act * *cv + iv * kv;
        }
    }
    for (nv, &kv) in st.n.iter_mut().zip(k) {
        *nv = f_act * *nv + i_act * kv;
    }
    st.m = m;
    let s: S = st.n.iter().zip(q).map(|(&a, &b)| a * b).sum();
    let floor = readout_floor(m);
    let active = s.abs() >= floor;
    let den = if active { s.abs() } else { floor };
    for r in 0..d {
        let num: S = st.c[r * d..(r + 1) * d].iter().zip(q).map(|(&a, &b)| a * b).sum();
        out[r] = num / den;
    }
    StepAux {
        f_act,
        i_act,
        s,
        den,
        active,
    }
}

/// Single public step: returns `h̃` for one token.
pub fn head_step<S: Scalar>(st: &mut HeadState<S>, q: &[S], k: &[S], v: &[S], ig: S, fg: S) -> Vec<S> {
    let mut out = vec![S::zero(); q.len()];
    step(st, q, k, v, ig, fg, &mut out);
    out
}

/// Sequential fold over `T` tokens; `q`, `k`, `v` are `T × d` row-major.
pub fn head_sequence<S: Scalar>(q: &[S], k: &[S], v: &[S], ig: &[S], fg: &[S], state: &mut HeadState<S>) -> Result<Vec<S>> {
    let d = state.head_dim();
    let t = ig.len();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    let mut out = vec![S::zero(); t * d];
    for tt in 0..t {
        let r = tt * d..(tt + 1) * d;
        step(state, &q[r.clone()], &k[r.clone()], &v[r.clone()], ig[tt], fg[tt], &mut out[r.clone()]);
        if !out[r].iter().all(|x| x.is_finite()) || !state.m.is_finite() {
            return Err(Error::NonFiniteToken { token: tt });
        }
    }
    Ok(out)
}

/// Chunkwise evaluation: inside each chunk the readout is computed in
/// closed form from the carried state and the chunk's tokens, then the
/// state is advanced to the chunk end. Matches [`head_sequence`].
pub fn head_sequence_chunked<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    ig: &[S],
    fg: &[S],
    chunk: usize,
    state: &mut HeadState<S>,
) -> Result<Vec<S>> {
    let d = state.head_dim();
    let t = ig.len();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if chunk == 0 {
        return Err(Error::Parameter("chunk size must be >= 1".into()));
    }
    let mut out = vec![S::zero(); t * d];
    let mut start = 0;
    while start < t {
        let len = chunk.min(t - start);
        // cum[j] = Σ_{r<=j} f̃_r within the chunk
        let mut cum = Vec::with_capacity(len);
        let mut acc = S::zero();
        for j in 0..len {
            acc += fg[start + j];
            cum.push(acc);
        }
        let m0 = state.m;
        let mut logw = vec![S::zero(); len];
        let mut m_last = m0;
        let mut carry_last = S::zero();
        for j in 0..len {
            let carry = cum[j] + m0;
            let mut m = carry;
            for s in 0..=j {
                logw[s] = cum[j] - cum[s] + ig[start + s];
                m = m.max(logw[s]);
            }
            let qj = &q[(start + j) * d..(start + j + 1) * d];
            let wc = (carry - m).min(S::zero()).exp();
            let mut num = vec![S::zero(); d];
            let mut sden = S::zero();
            for r in 0..d {
                num[r] = wc * state.c[r * d..(r + 1) * d].iter().zip(qj).map(|(&a, &b)| a * b).sum::<S>();
            }
            sden += wc * state.n.iter().zip(qj).map(|(&a, &b)| a * b).sum::<S>();
            for s in 0..=j {
                let w = (logw[s] - m).min(S::zero()).exp();
                let ks = &k[(start + s) * d..(start + s + 1) * d];
                let vs = &v[(start + s) * d..(start + s + 1) * d];
                let kq: S = ks.iter().zip(qj).map(|(&a, &b)| a * b).sum();
                let coef = w * kq;
                for r in 0..d {
                    num[r] += coef * vs[r];
                }
                sden += coef;
            }
            let floor = readout_floor(m);
            let den = if sden.abs() >= floor { sden.abs() } else { floor };
            for r in 0..d {
                out[(start + j) * d + r] = num[r] / den;
            }
            if !out[(start + j) * d..(start + j + 1) * d].iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteToken { token: start + j });
            }
            m_last = m;
            carry_last = carry;
        }
        // advance state to the end of the chunk
        let j = len - 1;
        let wc = (carry_last - m_last).min(S::zero()).exp();
        state.c.iter_mut().for_each(|c| *c *= wc);
        state.n.iter_mut().for_each(|n| *n *= wc);
        for s in 0..len {
            let w = (cum[j] - cum[s] + ig[start + s] - m_last).min(S::zero()).exp();
            let ks = &k[(start + s) * d..(start + s + 1) * d];
            let vs = &v[(start + s) * d..(start + s + 1) * d];
            for r in 0..d {
                let wv = w * vs[r];
                for c in 0..d {
                    state.c[r * d + c] += wv * ks[c];
                }
            }
            for c in 0..d {
                state.n[c] += w * ks[c];
            }
        }
        state.m = m_last;
        start += len;
    }
    Ok(out)
}

/// Saved forward quantities of one (batch, head) lane.
pub(crate) struct CellTrace<S> {
    /// States `C_0 .. C_T`, each `d × d`.
    c: Vec<S>,
    /// States `n_0 .. n_T`.
    n: Vec<S>,
    aux: Vec<StepAux<S>>,
}

impl<S> CellTrace<S> {
    pub(crate) fn active_flags(&self) -> impl Iterator<Item = bool> + '_ {
        self.aux.iter().map(|a| a.active)
    }
}

fn gather<S: Scalar>(src: &[S], b: usize, t: usize, width: usize, off: usize, d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(t * d);
    for tt in 0..t {
        let base = (b * t + tt) * width + off;
        out.extend_from_slice(&src[base..base + d]);
    }
    out
}

fn scatter_add<S: Scalar>(dst: &mut [S], src: &[S], b: usize, t: usize, width: usize, off: usize, d: usize) {
    for tt in 0..t {
        let base = (b * t + tt) * width + off;
        for r in 0..d {
            dst[base + r] += src[tt * d + r];
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// Multi-head cell over `[B, T, D]` queries, keys and values with
    /// `[B, T, H]` input/forget gate pre-activations. Returns `h̃` as
    /// `[B, T, D]`, each head starting from the initial state.
    pub fn mlstm_cell(&mut self, q: Var, k: Var, v: Var, ig: Var, fg: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let [b, t, dm] = match *shape.as_slice() {
            [a, b, c] => [a, b, c],
            _ => return Err(Error::dim("mlstm_cell", alloc::format!("expected [B,T,D], got {shape:?}"))),
        };
        if heads == 0 || dm % heads != 0 {
            return Err(Error::dim("mlstm_cell", alloc::format!("{dm} channels over {heads} heads")));
        }
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim(
                "mlstm_cell",
                alloc::format!("q {:?}, k {:?}, v {:?}", shape, self.shape(k), self.shape(v)),
            ));
        }
        let gshape = [b, t, heads];
        if self.shape(ig) != gshape || self.shape(fg) != gshape {
            return Err(Error::dim(
                "mlstm_cell",
                alloc::format!("gates {:?}/{:?}, expected {gshape:?}", self.shape(ig), self.shape(fg)),
            ));
        }
        let d = dm / heads;
        let keep = self.any_grad(&[q, k, v, ig, fg]);
        let mut out = vec![S::zero(); b * t * dm];
        let mut traces = Vec::new();
        for bi in 0..b {
            for h in 0..heads {
                let qh = gather(self.value(q), bi, t, dm, h * d, d);
                let kh = gather(self.value(k), bi, t, dm, h * d, d);
                let vh = gather(self.value(v), bi, t, dm, h * d, d);
                let igh = gather(self.value(ig), bi, t, heads, h, 1);
                let fgh = gather(self.value(fg), bi, t, heads, h, 1);
                let mut st = HeadState::new(d);
                let mut trace = keep.then(|| CellTrace {
                    c: st.c.clone(),
                    n: st.n.clone(),
                    aux: Vec::with_capacity(t),
                });
                let mut hbuf = vec![S::zero(); d];
                for tt in 0..t {
                    let r = tt * d..(tt + 1) * d;
                    let aux = step(&mut st, &qh[r.clone()], &kh[r.clone()], &vh[r.clone()], igh[tt], fgh[tt], &mut hbuf);
                    if !hbuf.iter().all(|x| x.is_finite()) {
                        return Err(Error::NonFiniteToken { token: tt });
                    }
                    let base = (bi * t + tt) * dm + h * d;
                    out[base..base + d].copy_from_slice(&hbuf);
                    if let Some(tr) = trace.as_mut() {
                        tr.c.extend_from_slice(&st.c);
                        tr.n.extend_from_slice(&st.n);
                        tr.aux.push(aux);
                    }
                }
                traces.extend(trace);
            }
        }
        self.push(
            "mlstm_cell",
            shape,
            out,
            Op::Mlstm {
                q,
                k,
                v,
                ig,
                fg,
                heads,
                traces,
            },
            &[q, k, v, ig, fg],
        )
    }
}

pub(crate) fn backward_tape<S: Scalar>(ctx: &mut Grads<'_, S>, inputs: [Var; 5], heads: usize, traces: &[CellTrace<S>], g: &[S]) {
    let [q, k, v, ig, fg] = inputs;
    let shape = ctx.shape(q);
    let (b, t, dm) = (shape[0], shape[1], shape[2]);
    let d = dm / heads;
    let dd = d * d;
    let (qv, kv, vv) = (ctx.value(q), ctx.value(k), ctx.value(v));
    let mut gq = vec![S::zero(); qv.len()];
    let mut gk = vec![S::zero(); qv.len()];
    let mut gv = vec![S::zero(); qv.len()];
    let mut gi = vec![S::zero(); b * t * heads];
    let mut gf = vec![S::zero(); b * t * heads];
    for bi in 0..b {
        for h in 0..heads {
            let tr = &traces[bi * heads + h];
            let qh = gather(qv, bi, t, dm, h * d, d);
            let kh = gather(kv, bi, t, dm, h * d, d);
            let vh = gather(vv, bi, t, dm, h * d, d);
            let gh = gather(g, bi, t, dm, h * d, d);
            let (mut lq, mut lk, mut lv) = (vec![S::zero(); t * d], vec![S::zero(); t * d], vec![S::zero(); t * d]);
            let mut dc = vec![S::zero(); dd];
            let mut dn = vec![S::zero(); d];
            let mut dnum = vec![S::zero(); d];
            let mut dck = vec![S::zero(); d];
            for tt in (0..t).rev() {
                let aux = tr.aux[tt];
                let ct = &tr.c[(tt + 1) * dd..(tt + 2) * dd];
                let nt = &tr.n[(tt + 1) * d..(tt + 2) * d];
                let cp = &tr.c[tt * dd..(tt + 1) * dd];
                let np = &tr.n[tt * d..(tt + 1) * d];
                let qt = &qh[tt * d..(tt + 1) * d];
                let kt = &kh[tt * d..(tt + 1) * d];
                let vt = &vh[tt * d..(tt + 1) * d];
                let gt = &gh[tt * d..(tt + 1) * d];

                // readout h = (C q) / den
                let mut g_dot_num = S::zero();
                for r in 0..d {
                    let num: S = ct[r * d..(r + 1) * d].iter().zip(qt).map(|(&a, &b)| a * b).sum();
                    g_dot_num += gt[r] * num;
                    dnum[r] = gt[r] / aux.den;
                }
                let ds = if aux.active {
                    let sign = if aux.s >= S::zero() { S::one() } else { -S::one() };
                    -g_dot_num / (aux.den * aux.den) * sign
                } else {
                    S::zero()
                };
                let dq = &mut lq[tt * d..(tt + 1) * d];
                for r in 0..d {
                    for c in 0..d {
                        dc[r * d + c] += dnum[r] * qt[c];
                        dq[c] += ct[r * d + c] * dnum[r];
                    }
                }
                for c in 0..d {
                    dq[c] += ds * nt[c];
                    dn[c] += ds * qt[c];
                }

                // update C = f C_prev + i v kᵀ, n = f n_prev + i k
                let mut di = S::zero();
                let mut df = S::zero();
                for r in 0..d {
                    dck[r] = dc[r * d..(r + 1) * d].iter().zip(kt).map(|(&a, &b)| a * b).sum();
                    di += vt[r] * dck[r];
                    lv[tt * d + r] += aux.i_act * dck[r];
                }
                for c in 0..d {
                    let mut acc = S::zero();
                    for r in 0..d {
                        acc += dc[r * d + c] * vt[r];
                    }
                    lk[tt * d + c] += aux.i_act * (acc + dn[c]);
                    di += dn[c] * kt[c];
                    df += dn[c] * np[c];
                }
                for (x, &y) in dc.iter().zip(cp) {
                    df += *x * y;
                }
                gi[(bi * t + tt) * heads + h] += di * aux.i_act;
                gf[(bi * t + tt) * heads + h] += df * aux.f_act;
                dc.iter_mut().for_each(|x| *x *= aux.f_act);
                dn.iter_mut().for_each(|x| *x *= aux.f_act);
            }
            scatter_add(&mut gq, &lq, bi, t, dm, h * d, d);
            scatter_add(&mut gk, &lk, bi, t, dm, h * d, d);
            scatter_add(&mut gv, &lv, bi, t, dm, h * d, d);
        }
    }
    ctx.add(q, &gq);
    ctx.add(k, &gk);
    ctx.add(v, &gv);
    ctx.add(ig, &gi);
    ctx.add(fg, &gf);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{self, GradCheckConfig};
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal exponential-gate recurrence with no stabilizer.
    fn literal(q: &[f64], k: &[f64], v: &[f64], ig: &[f64], fg: &[f64], d: usize) -> Vec<f64> {
        let t = ig.len();
        let mut c = vec![0.0; d * d];
        let mut n = vec![0.0; d];
        let mut out = vec![0.0; t * d];
        for tt in 0..t {
            let (i, f) = (ig[tt].exp(), fg[tt].exp());
            let (qt, kt, vt) = (&q[tt * d..][..d], &k[tt * d..][..d], &v[tt * d..][..d]);
            for r in 0..d {
                for cc in 0..d {
                    c[r * d + cc] = f * c[r * d + cc] + i * vt[r] * kt[cc];
                }
            }
            for cc in 0..d {
                n[cc] = f * n[cc] + i * kt[cc];
            }
            let s: f64 = (0..d).map(|j| n[j] * qt[j]).sum();
            let den = s.abs().max(1.0);
            for r in 0..d {
                out[tt * d + r] = (0..d).map(|j| c[r * d + j] * qt[j]).sum::<f64>() / den;
            }
        }
        out
    }

    fn random_inputs(rng: &mut ChaCha8Rng, t: usize, d: usize) -> [Vec<f64>; 5] {
        let mut u = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        [u(t * d, -1.0, 1.0), u(t * d, -1.0, 1.0), u(t * d, -1.0, 1.0), u(t, -5.0, 5.0), u(t, -5.0, 5.0)]
    }

    #[test]
    fn first_token_with_large_input_gate_returns_signed_value() {
        // d = 1: h = i v k q / max(|i k q|, 1) = v sign(kq) when i|kq| >= 1.
        for (kq_sign, k) in [(1.0, 0.5), (-1.0, -0.5)] {
            let mut st = HeadState::<f64>::new(1);
            let h = head_step(&mut st, &[0.8], &[k], &[1.7], 3.0, 0.2);
            assert!((3.0f64.exp() * 0.4 >= 1.0));
            assert!((h[0] - 1.7 * kq_sign).abs() < 1e-14, "{h:?}");
        }
    }

    #[test]
    fn small_normalizer_divides_by_one() {
        // ĩ = 0 on the first token gives m = 0 so the floor is exactly 1.
        let mut st = HeadState::<f64>::new(2);
        let q = [0.3, -0.2];
        let k = [0.5, 0.25];
        let v = [2.0, -1.0];
        let h = head_step(&mut st, &q, &k, &v, 0.0, 0.0);
        let kq: f64 = 0.5 * 0.3 + 0.25 * -0.2;
        assert!(kq.abs() < 1.0);
        assert_eq!(h, vec![2.0 * kq, -kq]);
    }

    #[test]
    fn stabilized_matches_literal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let [q, k, v, ig, fg] = random_inputs(&mut rng, 24, 4);
            let mut st = HeadState::new(4);
            let got = head_sequence(&q, &k, &v, &ig, &fg, &mut st).unwrap();
            let want = literal(&q, &k, &v, &ig, &fg, 4);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn chunked_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for chunk in [1, 3, 4, 16, 40] {
            let [q, k, v, ig, fg] = random_inputs(&mut rng, 16, 4);
            let mut s1 = HeadState::new(4);
            let mut s2 = HeadState::new(4);
            let a = head_sequence(&q, &k, &v, &ig, &fg, &mut s1).unwrap();
            let b = head_sequence_chunked(&q, &k, &v, &ig, &fg, chunk, &mut s2).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
            assert!((s1.m - s2.m).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_input_gate_with_unit_forget_freezes_readout() {
        let mut st = HeadState::<f64>::new(3);
        let q = [0.4, -0.1, 0.9];
        head_step(&mut st, &q, &[0.2, 0.7, -0.3], &[1.0, 2.0, 3.0], 1.0, 0.0);
        head_step(&mut st, &q, &[-0.6, 0.1, 0.5], &[0.5, -1.0, 0.0], 0.5, 0.0);
        let zero = [0.0; 3];
        let reference = head_step(&mut st, &q, &zero, &zero, -1e4, 0.0);
        for _ in 0..50 {
            assert_eq!(head_step(&mut st, &q, &zero, &zero, -1e4, 0.0), reference);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut st = HeadState::<f64>::new(2);
        assert_eq!(head_sequence(&[], &[], &[], &[], &[], &mut st), Err(Error::EmptySequence));
    }

    #[test]
    fn tape_cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, t, dm, h) = (2, 7, 6, 2);
        let mut mk = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.random_range(lo..hi));
        let inputs = [
            mk(&[b, t, dm], -1.0, 1.0),
            mk(&[b, t, dm], -1.0, 1.0),
            mk(&[b, t, dm], -1.0, 1.0),
            mk(&[b, t, h], -3.0, 3.0),
            mk(&[b, t, h], -3.0, 3.0),
            mk(&[b, t, dm], -1.0, 1.0),
        ];
        let coords: Vec<(usize, usize)> = (0..5)
            .flat_map(|i| (0..inputs[i].numel()).map(move |j| (i, j)))
            .collect();
        // closed gates leave some entries with gradients at the difference
        // quotient's rounding level, hence the raised floor
        let cfg = GradCheckConfig { floor: 1e-6, ..Default::default() };
        let report = gradcheck::check(&inputs, &coords, cfg, |tape, v| {
            let y = tape.mlstm_cell(v[0], v[1], v[2], v[3], v[4], h)?;
            let w = tape.mul(y, v[5])?;
            tape.sum(w)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn tape_cell_matches_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let [q, k, v, ig, fg] = random_inputs(&mut rng, 10, 3);
        let mut tape = Tape::<f64>::new();
        let vq = tape.constant(&Tensor::new(&[1, 10, 3], q.clone()).unwrap());
        let vk = tape.constant(&Tensor::new(&[1, 10, 3], k.clone()).unwrap());
        let vv = tape.constant(&Tensor::new(&[1, 10, 3], v.clone()).unwrap());
        let vi = tape.constant(&Tensor::new(&[1, 10, 1], ig.clone()).unwrap());
        let vf = tape.constant(&Tensor::new(&[1, 10, 1], fg.clone()).unwrap());
        let y = tape.mlstm_cell(vq, vk, vv, vi, vf, 1).unwrap();
        let mut st = HeadState::new(3);
        let want = head_sequence(&q, &k, &v, &ig, &fg, &mut st).unwrap();
        assert_eq!(tape.value(y), want.as_slice());
    }
}
