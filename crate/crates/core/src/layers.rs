//! Transformer building blocks: affine and time-affine layers, multi-head
//! self-attention, the position-wise FFN, and the vanilla residual block.
//!
//! Layers hold only [`ParamId`]s. Values come from the vector returned by
//! [`Tape::bind`], so the same layer can be evaluated many times per pass.
//! Inputs are `d x n` where `n` is a whole number of sequences of `span`
//! columns each; attention never mixes columns across sequences.

use rand::Rng;

use crate::autodiff::{AutodiffError, ParamId, ParameterSet, Result, Tape, Tensor, Var};

fn init_weight<R: Rng + ?Sized>(rng: &mut R, out_dim: usize, in_dim: usize) -> Tensor {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_vec(out_dim, in_dim, data).expect("shape")
}

/// `x ↦ A x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AffineLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: params.insert(format!("{name}.weight"), init_weight(rng, out_dim, in_dim))?,
            bias: params.insert(format!("{name}.bias"), Tensor::zeros(out_dim, 1))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        tape.affine(bound[self.weight.index()], x, bound[self.bias.index()], None)
    }
}

/// `x ↦ A x + b + c t`, the concatenation form of a time-dependent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeAffineLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub time: ParamId,
}

impl TimeAffineLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let AffineLayer { weight, bias } = AffineLayer::new(params, name, in_dim, out_dim, rng)?;
        Ok(Self {
            weight,
            bias,
            time: params.insert(format!("{name}.time"), Tensor::zeros(out_dim, 1))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &[Var], x: Var, t: f64) -> Result<Var> {
        tape.affine(
            bound[self.weight.index()],
            x,
            bound[self.bias.index()],
            Some((bound[self.time.index()], t)),
        )
    }

    /// The time-independent layer sharing `A` and `b`.
    pub fn without_time(&self) -> AffineLayer {
        AffineLayer {
            weight: self.weight,
            bias: self.bias,
        }
    }
}

/// Either flavour of trainable affine map.
#[derive(Debug, Clone, PartialEq)]
pub enum Dense {
    Fixed(AffineLayer),
    Timed(TimeAffineLayer),
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        time_dependent: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(if time_dependent {
            Dense::Timed(TimeAffineLayer::new(params, name, in_dim, out_dim, rng)?)
        } else {
            Dense::Fixed(AffineLayer::new(params, name, in_dim, out_dim, rng)?)
        })
    }

    /// `t` is ignored by time-independent layers.
    pub fn apply(&self, tape: &mut Tape, bound: &[Var], x: Var, t: f64) -> Result<Var> {
        match self {
            Dense::Fixed(l) => l.apply(tape, bound, x),
            Dense::Timed(l) => l.apply(tape, bound, x, t),
        }
    }

    pub fn weight(&self) -> ParamId {
        match self {
            Dense::Fixed(l) => l.weight,
            Dense::Timed(l) => l.weight,
        }
    }

    pub fn bias(&self) -> ParamId {
        match self {
            Dense::Fixed(l) => l.bias,
            Dense::Timed(l) => l.bias,
        }
    }

    pub fn time(&self) -> Option<ParamId> {
        match self {
            Dense::Fixed(_) => None,
            Dense::Timed(l) => Some(l.time),
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, Dense::Timed(_))
    }

    /// Value-level evaluation without a tape.
    pub fn eval(&self, params: &ParameterSet, x: &Tensor, t: f64) -> Tensor {
        let mut out = params.value(self.weight()).matmul(x).expect("dense shape");
        let b = params.value(self.bias());
        let c = self.time().map(|id| params.value(id));
        let cols = out.cols();
        for r in 0..out.rows() {
            let shift = b.data()[r] + c.map_or(0.0, |c| c.data()[r] * t);
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v += shift;
            }
        }
        out
    }
}

/// Multi-head self-attention with `d / 2` heads of width 2.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaModule {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub time_dependent: bool,
}

impl MhsaModule {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        d: usize,
        time_dependent: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if d < 2 || !d.is_multiple_of(2) {
            return Err(AutodiffError::Invalid {
                op: "mhsa",
                msg: format!("embedding dimension {d} must be even and at least 2"),
            });
        }
        let mut dense = |part: &str| Dense::new(params, &format!("{name}.{part}"), d, d, time_dependent, rng);
        Ok(Self {
            query: dense("query")?,
            key: dense("key")?,
            value: dense("value")?,
            output: dense("output")?,
            heads: d / 2,
            time_dependent,
        })
    }

    pub fn head_dim(&self) -> usize {
        2
    }

    pub fn layers(&self) -> [&Dense; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    /// No causal mask: every column attends to every column of its own sequence.
    pub fn apply(&self, tape: &mut Tape, bound: &[Var], x: Var, t: f64, span: usize) -> Result<Var> {
        let q = self.query.apply(tape, bound, x, t)?;
        let k = self.key.apply(tape, bound, x, t)?;
        let v = self.value.apply(tape, bound, x, t)?;
        let heads = tape.attention(q, k, v, self.heads, span)?;
        self.output.apply(tape, bound, heads, t)
    }

    /// Per-head attention weights for a single sequence `x` (column `j` holds the
    /// distribution of query `j` over keys).
    pub fn attention_weights(&self, params: &ParameterSet, x: &Tensor, t: f64) -> Vec<Tensor> {
        let q = self.query.eval(params, x, t);
        let k = self.key.eval(params, x, t);
        let n = x.cols();
        let dh = self.head_dim();
        (0..self.heads)
            .map(|h| {
                let mut s = Tensor::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let dot: f64 = (h * dh..(h + 1) * dh).map(|r| k.get(r, i) * q.get(r, j)).sum();
                        s.set(i, j, dot / (dh as f64).sqrt());
                    }
                }
                let mut tape = Tape::new();
                let sv = tape.constant(s).expect("finite scores");
                let w = tape.softmax_columns(sv).expect("finite weights");
                tape.value(w).clone()
            })
            .collect()
    }
}

/// Position-wise network with one dimension-preserving ReLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnModule {
    pub hidden: Dense,
    pub output: Dense,
}

impl FfnModule {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        d: usize,
        time_dependent: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Dense::new(params, &format!("{name}.hidden"), d, d, time_dependent, rng)?,
            output: Dense::new(params, &format!("{name}.output"), d, d, time_dependent, rng)?,
        })
    }

    pub fn layers(&self) -> [&Dense; 2] {
        [&self.hidden, &self.output]
    }

    pub fn apply(&self, tape: &mut Tape, bound: &[Var], x: Var, t: f64) -> Result<Var> {
        let h = self.hidden.apply(tape, bound, x, t)?;
        let h = tape.relu(h)?;
        self.output.apply(tape, bound, h, t)
    }
}

/// `Y = X + MHSA(X); out = Y + FFN(Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaBlock {
    pub mhsa: MhsaModule,
    pub ffn: FfnModule,
}

impl VanillaBlock {
    pub fn new<R: Rng + ?Sized>(params: &mut ParameterSet, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mhsa: MhsaModule::new(params, &format!("{name}.mhsa"), d, false, rng)?,
            ffn: FfnModule::new(params, &format!("{name}.ffn"), d, false, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &[Var], x: Var, span: usize) -> Result<Var> {
        let m = self.mhsa.apply(tape, bound, x, 0.0, span)?;
        let y = tape.add(x, m)?;
        let f = self.ffn.apply(tape, bound, y, 0.0)?;
        tape.add(y, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Fills every parameter (including biases and time vectors) with random values.
    fn randomize(params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        for p in params.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }

    fn run<F>(params: &ParameterSet, x: &Tensor, f: F) -> Tensor
    where
        F: FnOnce(&mut Tape, &[Var], Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let bound = tape.bind(params).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = f(&mut tape, &bound, xv).unwrap();
        tape.value(out).clone()
    }

    fn permute_columns(x: &Tensor, perm: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            for (j, &p) in perm.iter().enumerate() {
                out.set(r, j, x.get(r, p));
            }
        }
        out
    }

    /// Straight-line MHSA: materializes Q, K, V and every head's score matrix
    /// from raw parameter values, without the fused attention kernel.
    fn mhsa_oracle(m: &MhsaModule, params: &ParameterSet, x: &Tensor, t: f64) -> Tensor {
        let affine = |layer: &Dense, input: &Tensor| {
            let a = params.value(layer.weight());
            let b = params.value(layer.bias());
            let c = layer.time().map(|id| params.value(id).clone());
            let mut out = Tensor::zeros(a.rows(), input.cols());
            for i in 0..a.rows() {
                for j in 0..input.cols() {
                    let mut acc = b.get(i, 0) + c.as_ref().map_or(0.0, |c| c.get(i, 0) * t);
                    for k in 0..a.cols() {
                        acc += a.get(i, k) * input.get(k, j);
                    }
                    out.set(i, j, acc);
                }
            }
            out
        };
        let q = affine(&m.query, x);
        let k = affine(&m.key, x);
        let v = affine(&m.value, x);
        let n = x.cols();
        let d = x.rows();
        let mut concat = Tensor::zeros(d, n);
        for h in 0..m.heads {
            let rows = [2 * h, 2 * h + 1];
            for j in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|i| rows.iter().map(|&r| k.get(r, i) * q.get(r, j)).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for &r in &rows {
                    let val: f64 = (0..n).map(|i| v.get(r, i) * exps[i] / total).sum();
                    concat.set(r, j, val);
                }
            }
        }
        affine(&m.output, &concat)
    }

    #[test]
    fn time_affine_reduces_to_affine_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParameterSet::new();
        let layer = TimeAffineLayer::new(&mut params, "l", 3, 4, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let x = random_tensor(&mut rng, 3, 5);
        let timed = run(&params, &x, |tape, b, x| layer.apply(tape, b, x, 0.0));
        let plain = run(&params, &x, |tape, b, x| layer.without_time().apply(tape, b, x));
        assert_eq!(timed, plain);
    }

    #[test]
    fn time_affine_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParameterSet::new();
        let layer = TimeAffineLayer::new(&mut params, "l", 3, 3, &mut rng).unwrap();
        *params.value_mut(layer.weight) = Tensor::zeros(3, 3);
        *params.value_mut(layer.time) = Tensor::filled(3, 1, 1.0);
        let x = random_tensor(&mut rng, 3, 4);
        let out = run(&params, &x, |tape, b, x| layer.apply(tape, b, x, 0.5));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn time_affine_is_affine_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParameterSet::new();
        let layer = TimeAffineLayer::new(&mut params, "l", 4, 4, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let x = random_tensor(&mut rng, 4, 3);
        let c = params.value(layer.time).clone();
        let at = |t| run(&params, &x, |tape, b, x| layer.apply(tape, b, x, t));
        for (t1, t2) in [(1.0, 0.0), (0.75, 0.25), (0.3, 0.9)] {
            let (o1, o2) = (at(t1), at(t2));
            for r in 0..4 {
                for j in 0..3 {
                    let diff = o1.get(r, j) - o2.get(r, j);
                    assert!((diff - c.get(r, 0) * (t1 - t2)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn time_affine_rejects_row_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ParameterSet::new();
        let layer = TimeAffineLayer::new(&mut params, "l", 3, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params).unwrap();
        let x = tape.constant(Tensor::zeros(4, 2)).unwrap();
        assert!(matches!(
            layer.apply(&mut tape, &bound, x, 0.0),
            Err(AutodiffError::Shape { op: "affine", .. })
        ));
    }

    #[test]
    fn init_follows_fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParameterSet::new();
        let layer = TimeAffineLayer::new(&mut params, "l", 16, 8, &mut rng).unwrap();
        let bound = 0.25;
        assert!(params.value(layer.weight).data().iter().all(|v| v.abs() <= bound));
        assert!(params.value(layer.bias).data().iter().all(|&v| v == 0.0));
        assert!(params.value(layer.time).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mhsa_rejects_odd_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ParameterSet::new();
        assert!(MhsaModule::new(&mut params, "m", 5, false, &mut rng).is_err());
        let m = MhsaModule::new(&mut params, "m", 6, true, &mut rng).unwrap();
        assert_eq!(m.heads, 3);
        assert_eq!(m.head_dim(), 2);
    }

    #[test]
    fn mhsa_single_token_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParameterSet::new();
        let m = MhsaModule::new(&mut params, "m", 4, false, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let x = random_tensor(&mut rng, 4, 1);
        let out = run(&params, &x, |tape, b, x| m.apply(tape, b, x, 0.0, 1));
        let expected = m.output.eval(&params, &m.value.eval(&params, &x, 0.0), 0.0);
        assert!(out.max_abs_diff(&expected) < 1e-14);
        for w in m.attention_weights(&params, &x, 0.0) {
            assert_eq!(w.data(), &[1.0]);
        }
    }

    #[test]
    fn mhsa_identical_columns_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParameterSet::new();
        let m = MhsaModule::new(&mut params, "m", 6, true, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let col = random_tensor(&mut rng, 6, 1);
        let mut x = random_tensor(&mut rng, 6, 3);
        for r in 0..6 {
            x.set(r, 0, col.get(r, 0));
            x.set(r, 2, col.get(r, 0));
        }
        let out = run(&params, &x, |tape, b, x| m.apply(tape, b, x, 0.4, 3));
        for r in 0..6 {
            assert_eq!(out.get(r, 0), out.get(r, 2));
        }
    }

    #[test]
    fn mhsa_matches_unsliced_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for time_dependent in [false, true] {
            let mut params = ParameterSet::new();
            let m = MhsaModule::new(&mut params, "m", 4, time_dependent, &mut rng).unwrap();
            randomize(&mut params, &mut rng);
            let x = random_tensor(&mut rng, 4, 2);
            let out = run(&params, &x, |tape, b, x| m.apply(tape, b, x, 0.6, 2));
            let expected = mhsa_oracle(&m, &params, &x, 0.6);
            for (a, e) in out.data().iter().zip(expected.data()) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mhsa_batched_segments_match_individual_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = ParameterSet::new();
        let m = MhsaModule::new(&mut params, "m", 4, false, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let a = random_tensor(&mut rng, 4, 3);
        let b = random_tensor(&mut rng, 4, 3);
        let mut both = Tensor::zeros(4, 6);
        for r in 0..4 {
            for j in 0..3 {
                both.set(r, j, a.get(r, j));
                both.set(r, j + 3, b.get(r, j));
            }
        }
        let joint = run(&params, &both, |tape, bd, x| m.apply(tape, bd, x, 0.0, 3));
        let oa = run(&params, &a, |tape, bd, x| m.apply(tape, bd, x, 0.0, 3));
        let ob = run(&params, &b, |tape, bd, x| m.apply(tape, bd, x, 0.0, 3));
        for r in 0..4 {
            for j in 0..3 {
                assert!((joint.get(r, j) - oa.get(r, j)).abs() < 1e-14);
                assert!((joint.get(r, j + 3) - ob.get(r, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ffn_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParameterSet::new();
        let f = FfnModule::new(&mut params, "f", 4, true, &mut rng).unwrap();
        for p in params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_tensor(&mut rng, 4, 3);
        let out = run(&params, &x, |tape, b, x| f.apply(tape, b, x, 0.7));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ParameterSet::new();
        let f = FfnModule::new(&mut params, "f", 4, true, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let x = random_tensor(&mut rng, 4, 2);
        let loss_of = |params: &ParameterSet, x: &Tensor| {
            let mut tape = Tape::new();
            let bound = tape.bind(params).unwrap();
            let xv = tape.var(x.clone()).unwrap();
            let out = f.apply(&mut tape, &bound, xv, 0.3).unwrap();
            let loss = tape.frobenius_sq(out).unwrap();
            (tape, xv, loss)
        };
        let (tape, xv, loss) = loss_of(&params, &x);
        let grads = tape.backward(loss).unwrap();
        let mut p = params.clone();
        grads.accumulate(&tape, &mut p);
        let eps = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-4, "{analytic} vs {numeric}");
        };
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let (tp, _, lp) = loss_of(&params, &xp);
            let (tm, _, lm) = loss_of(&params, &xm);
            let numeric = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * eps);
            check(grads.get(xv).unwrap().data()[i], numeric);
        }
        let flat = params.flatten();
        let analytic = p.flatten_grads();
        for i in 0..flat.len() {
            let mut q = params.clone();
            let mut v = flat.clone();
            v[i] += eps;
            q.load_flat(&v).unwrap();
            let (tp, _, lp) = loss_of(&q, &x);
            v[i] -= 2.0 * eps;
            q.load_flat(&v).unwrap();
            let (tm, _, lm) = loss_of(&q, &x);
            check(analytic[i], (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * eps));
        }
    }

    #[test]
    fn vanilla_block_with_zero_sublayers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ParameterSet::new();
        let blk = VanillaBlock::new(&mut params, "b", 4, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        for layer in [&blk.mhsa.output, &blk.ffn.output] {
            *params.value_mut(layer.weight()) = Tensor::zeros(4, 4);
            *params.value_mut(layer.bias()) = Tensor::zeros(4, 1);
        }
        let x = random_tensor(&mut rng, 4, 3);
        let out = run(&params, &x, |tape, b, x| blk.apply(tape, b, x, 3));
        assert_eq!(out, x);
    }

    #[test]
    fn vanilla_block_matches_two_stage_and_compact_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = ParameterSet::new();
        let blk = VanillaBlock::new(&mut params, "b", 4, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let x = random_tensor(&mut rng, 4, 3);
        let out = run(&params, &x, |tape, b, x| blk.apply(tape, b, x, 3));

        // Y first, then Y + FFN(Y), each evaluated on its own tape.
        let m = run(&params, &x, |tape, b, x| blk.mhsa.apply(tape, b, x, 0.0, 3));
        let mut y = x.clone();
        for (a, b) in y.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
        let f = run(&params, &y, |tape, b, y| blk.ffn.apply(tape, b, y, 0.0));
        let mut staged = y.clone();
        for (a, b) in staged.data_mut().iter_mut().zip(f.data()) {
            *a += b;
        }
        assert!(out.max_abs_diff(&staged) <= 1e-12);

        // X + MHSA(X) + FFN(X + MHSA(X))
        let compact = run(&params, &x, |tape, b, xv| {
            let m = blk.mhsa.apply(tape, b, xv, 0.0, 3)?;
            let y = tape.add(xv, m)?;
            let f = blk.ffn.apply(tape, b, y, 0.0)?;
            tape.lincomb(&[(xv, 1.0), (m, 1.0), (f, 1.0)])
        });
        assert!(out.max_abs_diff(&compact) <= 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mhsa_and_ffn_are_permutation_equivariant(seed in any::<u64>(), len in 2usize..6, t in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParameterSet::new();
            let m = MhsaModule::new(&mut params, "m", 4, true, &mut rng).unwrap();
            let f = FfnModule::new(&mut params, "f", 4, true, &mut rng).unwrap();
            randomize(&mut params, &mut rng);
            let x = random_tensor(&mut rng, 4, len);
            let mut perm: Vec<usize> = (0..len).collect();
            perm.rotate_left(1);
            perm.swap(0, len - 1);
            let px = permute_columns(&x, &perm);

            let base_m = run(&params, &x, |tape, b, x| m.apply(tape, b, x, t, len));
            let perm_m = run(&params, &px, |tape, b, x| m.apply(tape, b, x, t, len));
            prop_assert!(permute_columns(&base_m, &perm).max_abs_diff(&perm_m) <= 1e-12);

            let base_f = run(&params, &x, |tape, b, x| f.apply(tape, b, x, t));
            let perm_f = run(&params, &px, |tape, b, x| f.apply(tape, b, x, t));
            prop_assert!(permute_columns(&base_f, &perm).max_abs_diff(&perm_f) <= 1e-12);
        }

        #[test]
        fn attention_weight_columns_sum_to_one(seed in any::<u64>(), len in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParameterSet::new();
            let m = MhsaModule::new(&mut params, "m", 6, false, &mut rng).unwrap();
            randomize(&mut params, &mut rng);
            let x = random_tensor(&mut rng, 6, len);
            for w in m.attention_weights(&params, &x, 0.0) {
                for j in 0..len {
                    let s: f64 = (0..len).map(|i| w.get(i, j)).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
