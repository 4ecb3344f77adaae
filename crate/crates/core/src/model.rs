//! The encoder-classifier used for PARITY: token embedding, `N` vanilla or
//! neural-ODE Transformer blocks, and a small classifier head that reads the
//! final hidden state of the start-of-sequence token.
//!
//! A batch is a set of equal-length token sequences laid side by side as a
//! `d x (B · span)` matrix; column `b · span` holds sequence `b`'s SOS token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::layers::{AffineLayer, FfnModule, MhsaModule, VanillaBlock};
use crate::odeint::{
    loglog_slope, solve_adaptive, solve_euler_fixed, solve_rk_fixed, OdeRhs, OrderFit, SolveError, SolveStats,
    SolverConfig,
};

pub const VOCAB_SIZE: usize = 3;
pub const SOS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Vanilla,
    Node,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Vanilla => "vanilla",
            Architecture::Node => "node",
        }
    }
}

/// Right-hand side of a neural-ODE block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsVariant {
    /// `FFN_t(MHSA_t(X))`
    Basic,
    /// `FFN_t(X + MHSA_t(X))`
    MhsaSkip,
    /// `MHSA_t(X) + FFN_t(X + MHSA_t(X))`
    EulerAnalogue,
}

impl RhsVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            RhsVariant::Basic => "basic",
            RhsVariant::MhsaSkip => "mhsa_skip",
            RhsVariant::EulerAnalogue => "euler_analogue",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_blocks: usize,
    pub architecture: Architecture,
    pub mhsa_time_dependent: bool,
    pub rhs_variant: RhsVariant,
    pub final_time: f64,
    pub solver: SolverConfig,
}

impl ModelConfig {
    pub fn vanilla(d: usize, n_blocks: usize) -> Self {
        Self {
            d,
            n_blocks,
            architecture: Architecture::Vanilla,
            mhsa_time_dependent: false,
            rhs_variant: RhsVariant::Basic,
            final_time: 1.0,
            solver: SolverConfig::default(),
        }
    }

    /// Neural-ODE encoder with time-independent attention and no skip connection.
    pub fn node(d: usize, n_blocks: usize) -> Self {
        Self {
            architecture: Architecture::Node,
            ..Self::vanilla(d, n_blocks)
        }
    }

    pub fn with_variant(mut self, variant: RhsVariant, mhsa_time_dependent: bool) -> Self {
        self.rhs_variant = variant;
        self.mhsa_time_dependent = mhsa_time_dependent;
        self
    }

    /// Skip-connection flag of the chained system: 1 exactly for [`RhsVariant::MhsaSkip`].
    pub fn alpha(&self) -> u8 {
        u8::from(self.rhs_variant == RhsVariant::MhsaSkip)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return fail(format!("d = {} must be even and at least 2", self.d));
        }
        if self.n_blocks == 0 {
            return fail("at least one block is required".into());
        }
        if self.architecture == Architecture::Node {
            if !(self.final_time > 0.0) {
                return fail(format!("final time {} must be positive", self.final_time));
            }
            self.solver.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("block {block}: {source}")]
    Solver {
        block: usize,
        #[source]
        source: SolveError,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// One learned `d`-vector per token, stored as the columns of a `d x 3` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
}

/// Attention and feed-forward modules of one neural-ODE block. The FFN is always
/// time-dependent; the attention is time-dependent only when configured.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBlock {
    pub mhsa: MhsaModule,
    pub ffn: FfnModule,
}

impl NodeBlock {
    pub fn rhs(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        t: f64,
        span: usize,
        variant: RhsVariant,
    ) -> autodiff::Result<Var> {
        let m = self.mhsa.apply(tape, bound, x, t, span)?;
        match variant {
            RhsVariant::Basic => self.ffn.apply(tape, bound, m, t),
            RhsVariant::MhsaSkip => {
                let y = tape.add(x, m)?;
                self.ffn.apply(tape, bound, y, t)
            }
            RhsVariant::EulerAnalogue => {
                let y = tape.add(x, m)?;
                let f = self.ffn.apply(tape, bound, y, t)?;
                tape.add(m, f)
            }
        }
    }

    /// The vanilla block that shares this block's weights (time terms vanish at t = 0).
    pub fn as_vanilla(&self) -> VanillaBlock {
        VanillaBlock {
            mhsa: self.mhsa.clone(),
            ffn: self.ffn.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Vanilla(Vec<VanillaBlock>),
    Node(Vec<NodeBlock>),
}

/// Two dimension-preserving layers with a ReLU between, then a 2-way logit layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub first: AffineLayer,
    pub second: AffineLayer,
    pub logits: AffineLayer,
}

impl ClassifierHead {
    pub fn apply(&self, tape: &mut Tape, bound: &[Var], sos: Var) -> autodiff::Result<Var> {
        let h = self.first.apply(tape, bound, sos)?;
        let h = tape.relu(h)?;
        let h = self.second.apply(tape, bound, h)?;
        self.logits.apply(tape, bound, h)
    }
}

/// Right-hand side of block `index`, with the arclength density
/// `weight · ‖F‖²_F` attached.
struct BlockRhs<'a> {
    block: &'a NodeBlock,
    bound: &'a [Var],
    variant: RhsVariant,
    span: usize,
    density_weight: f64,
}

impl OdeRhs for BlockRhs<'_> {
    fn eval(&self, tape: &mut Tape, x: Var, t: f64) -> autodiff::Result<Var> {
        self.block.rhs(tape, self.bound, x, t, self.span, self.variant)
    }

    fn density(&self, tape: &mut Tape, _x: Var, _t: f64, fx: Var) -> autodiff::Result<Option<Var>> {
        let sq = tape.frobenius_sq(fx)?;
        tape.scale(sq, self.density_weight).map(Some)
    }
}

/// How neural-ODE blocks are integrated during a pass.
#[derive(Debug, Clone, Copy)]
pub enum Integration<'a> {
    Adaptive,
    /// Fixed RKF4(5) steps on the given grid for each block.
    Frozen(&'a [Vec<f64>]),
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final hidden state, `d x (B · span)`.
    pub hidden: Var,
    /// Sum over blocks of `∫ ‖X'‖²_F dt / (2 L)`, averaged over the batch.
    pub reg_total: Var,
    /// Embedded input followed by each block's terminal state.
    pub states: Vec<Var>,
    pub block_stats: Vec<SolveStats>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: Var,
    pub cross_entropy: f64,
    pub reg_total: f64,
    pub logits: Var,
    pub block_stats: Vec<SolveStats>,
}

/// Validated batch of equal-length sequences starting with SOS.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub span: usize,
    pub count: usize,
    ids: Vec<usize>,
}

impl SequenceBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self, ModelError> {
        let first = seqs.first().ok_or_else(|| ModelError::Input("empty batch".into()))?;
        let span = first.as_ref().len();
        if span < 2 {
            return Err(ModelError::Input("a sequence needs SOS plus at least one token".into()));
        }
        let mut ids = Vec::with_capacity(span * seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.len() != span {
                return Err(ModelError::Input(format!(
                    "mixed lengths {} and {span} in one batch",
                    s.len()
                )));
            }
            if s[0] != SOS || s[1..].iter().any(|&t| t > 1) {
                return Err(ModelError::Input(format!(
                    "sequence {s:?} must be SOS followed by bits"
                )));
            }
            ids.extend_from_slice(s);
        }
        Ok(Self {
            span,
            count: seqs.len(),
            ids,
        })
    }

    /// Sequence length excluding SOS.
    pub fn seq_len(&self) -> usize {
        self.span - 1
    }

    pub fn sos_columns(&self) -> Vec<usize> {
        (0..self.count).map(|b| b * self.span).collect()
    }
}

/// Result of [`Model::residual_decay_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualProbe {
    /// `(n_steps, max residual over all steps of all blocks)`.
    pub rows: Vec<(usize, f64)>,
    pub fit: Option<OrderFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub embedding: Embedding,
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Model {
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d;
        let mut params = ParameterSet::new();
        let table: Vec<f64> = (0..d * VOCAB_SIZE)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let embedding = Embedding {
            table: params.insert("embedding", Tensor::from_vec(d, VOCAB_SIZE, table)?)?,
        };
        let encoder = match config.architecture {
            Architecture::Vanilla => Encoder::Vanilla(
                (0..config.n_blocks)
                    .map(|i| VanillaBlock::new(&mut params, &format!("block{i}"), d, rng))
                    .collect::<autodiff::Result<_>>()?,
            ),
            Architecture::Node => Encoder::Node(
                (0..config.n_blocks)
                    .map(|i| {
                        Ok(NodeBlock {
                            mhsa: MhsaModule::new(
                                &mut params,
                                &format!("block{i}.mhsa"),
                                d,
                                config.mhsa_time_dependent,
                                rng,
                            )?,
                            ffn: FfnModule::new(&mut params, &format!("block{i}.ffn"), d, true, rng)?,
                        })
                    })
                    .collect::<autodiff::Result<_>>()?,
            ),
        };
        let head = ClassifierHead {
            first: AffineLayer::new(&mut params, "head.first", d, d, rng)?,
            second: AffineLayer::new(&mut params, "head.second", d, d, rng)?,
            logits: AffineLayer::new(&mut params, "head.logits", d, 2, rng)?,
        };
        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn node_blocks(&self) -> &[NodeBlock] {
        match &self.encoder {
            Encoder::Node(b) => b,
            Encoder::Vanilla(_) => &[],
        }
    }

    /// `X_0`: embedding columns selected by token id (one-hot product).
    pub fn embed(&self, tape: &mut Tape, bound: &[Var], batch: &SequenceBatch) -> Result<Var, ModelError> {
        let n = batch.ids.len();
        let mut onehot = Tensor::zeros(VOCAB_SIZE, n);
        for (j, &id) in batch.ids.iter().enumerate() {
            onehot.set(id, j, 1.0);
        }
        let onehot = tape.constant(onehot)?;
        Ok(tape.matmul(bound[self.embedding.table.index()], onehot)?)
    }

    /// Right-hand side of node block `block` at `(x, t)`.
    pub fn rhs_eval(
        &self,
        block: usize,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        t: f64,
        span: usize,
    ) -> Result<Var, ModelError> {
        let blk = self
            .node_blocks()
            .get(block)
            .ok_or_else(|| ModelError::Input(format!("no node block {block}")))?;
        Ok(blk.rhs(tape, bound, x, t, span, self.config.rhs_variant)?)
    }

    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &SequenceBatch,
        integration: Integration<'_>,
    ) -> Result<Encoded, ModelError> {
        let x0 = self.embed(tape, bound, batch)?;
        let mut states = vec![x0];
        let mut x = x0;
        match &self.encoder {
            Encoder::Vanilla(blocks) => {
                for blk in blocks {
                    x = blk.apply(tape, bound, x, batch.span)?;
                    states.push(x);
                }
                let reg_total = tape.constant(Tensor::scalar(0.0))?;
                Ok(Encoded {
                    hidden: x,
                    reg_total,
                    states,
                    block_stats: Vec::new(),
                })
            }
            Encoder::Node(blocks) => {
                let weight = 1.0 / (2.0 * batch.seq_len() as f64 * batch.count as f64);
                let mut integrals = Vec::with_capacity(blocks.len());
                let mut block_stats = Vec::with_capacity(blocks.len());
                for (i, blk) in blocks.iter().enumerate() {
                    let rhs = BlockRhs {
                        block: blk,
                        bound,
                        variant: self.config.rhs_variant,
                        span: batch.span,
                        density_weight: weight,
                    };
                    let sol = match integration {
                        Integration::Adaptive => {
                            solve_adaptive(tape, &rhs, x, 0.0, self.config.final_time, &self.config.solver)
                        }
                        Integration::Frozen(grids) => match grids.get(i) {
                            Some(times) => solve_rk_fixed(tape, &rhs, x, times),
                            None => Err(SolveError::Config(format!("no frozen grid for block {i}"))),
                        },
                    }
                    .map_err(|source| ModelError::Solver { block: i, source })?;
                    x = sol.state;
                    states.push(x);
                    integrals.push((sol.integral, 1.0));
                    block_stats.push(sol.stats);
                }
                let reg_total = tape.lincomb(&integrals)?;
                Ok(Encoded {
                    hidden: x,
                    reg_total,
                    states,
                    block_stats,
                })
            }
        }
    }

    /// Final hidden state of one sequence, with the unweighted regularization total.
    pub fn encode(&self, tokens: &[usize]) -> Result<(Tensor, f64, Vec<SolveStats>), ModelError> {
        let batch = SequenceBatch::new(&[tokens])?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params)?;
        let enc = self.encode_batch(&mut tape, &bound, &batch, Integration::Adaptive)?;
        Ok((
            tape.value(enc.hidden).clone(),
            tape.scalar(enc.reg_total),
            enc.block_stats,
        ))
    }

    /// Logits (`2 x B`) from the SOS columns of `hidden`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        hidden: Var,
        batch: &SequenceBatch,
    ) -> Result<Var, ModelError> {
        let sos = tape.select_columns(hidden, &batch.sos_columns())?;
        Ok(self.head.apply(tape, bound, sos)?)
    }

    /// `(P(even), P(odd))` from column 0 of a final hidden state.
    pub fn classify(&self, hidden: &Tensor) -> Result<(f64, f64), ModelError> {
        if hidden.cols() == 0 {
            return Err(ModelError::Input("hidden state has no columns".into()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params)?;
        let h = tape.constant(hidden.clone())?;
        let sos = tape.select_columns(h, &[0])?;
        let logits = self.head.apply(&mut tape, &bound, sos)?;
        let p = tape.softmax_columns(logits)?;
        let p = tape.value(p);
        Ok((p.get(0, 0), p.get(1, 0)))
    }

    /// Mean cross-entropy plus `lambda` times the regularization total.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &SequenceBatch,
        labels: &[usize],
        lambda: f64,
        integration: Integration<'_>,
    ) -> Result<LossOutput, ModelError> {
        let enc = self.encode_batch(tape, bound, batch, integration)?;
        let logits = self.logits(tape, bound, enc.hidden, batch)?;
        let ce = tape.cross_entropy(logits, labels)?;
        let loss = if lambda != 0.0 {
            tape.lincomb(&[(ce, 1.0), (enc.reg_total, lambda)])?
        } else {
            ce
        };
        Ok(LossOutput {
            loss,
            cross_entropy: tape.scalar(ce),
            reg_total: tape.scalar(enc.reg_total),
            logits,
            block_stats: enc.block_stats,
        })
    }

    /// `lambda · ‖F(X, t)‖²_F / (2 L)` for node block `block` on one sequence `x`.
    pub fn regularization_density(
        &self,
        block: usize,
        x: &Tensor,
        t: f64,
        lambda: f64,
        seq_len: usize,
    ) -> Result<f64, ModelError> {
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params)?;
        let xv = tape.constant(x.clone())?;
        let f = self.rhs_eval(block, &mut tape, &bound, xv, t, x.cols())?;
        Ok(lambda * tape.value(f).frobenius_sq() / (2.0 * seq_len as f64))
    }

    /// Accepted step counts per block, solving every sequence on its own.
    pub fn steps_per_input<S: AsRef<[usize]>>(&self, seqs: &[S]) -> Result<Vec<Vec<usize>>, ModelError> {
        seqs.iter()
            .map(|s| {
                let (_, _, stats) = self.encode(s.as_ref())?;
                Ok(stats.iter().map(|st| st.accepted_steps).collect())
            })
            .collect()
    }

    /// Runs every node block with `n` uniform forward-Euler steps for each `n` in
    /// `step_counts` and records the largest residual `‖(T/n) F(X_k, t_k)‖_F`.
    pub fn residual_decay_probe(&self, tokens: &[usize], step_counts: &[usize]) -> Result<ResidualProbe, ModelError> {
        if self.config.architecture != Architecture::Node {
            return Err(ModelError::Config("the residual probe needs a neural-ODE model".into()));
        }
        let batch = SequenceBatch::new(&[tokens])?;
        let mut rows = Vec::with_capacity(step_counts.len());
        for &n in step_counts {
            let mut tape = Tape::new();
            let bound = tape.bind(&self.params)?;
            let mut x = self.embed(&mut tape, &bound, &batch)?;
            let mut max_residual = 0.0f64;
            for (i, blk) in self.node_blocks().iter().enumerate() {
                let rhs = BlockRhs {
                    block: blk,
                    bound: &bound,
                    variant: self.config.rhs_variant,
                    span: batch.span,
                    density_weight: 0.0,
                };
                let sol = solve_euler_fixed(&mut tape, &rhs, x, 0.0, self.config.final_time, n)
                    .map_err(|source| ModelError::Solver { block: i, source })?;
                max_residual = sol.residual_norms.iter().cloned().fold(max_residual, f64::max);
                x = sol.state;
            }
            rows.push((n, max_residual));
        }
        let fit = if rows.len() < 2 {
            None
        } else {
            let points: Vec<(f64, f64)> = rows.iter().map(|&(n, r)| (n as f64, r)).collect();
            Some(match loglog_slope(&points) {
                Some(s) if rows.iter().all(|r| r.1 > 0.0) => OrderFit::Slope(s),
                _ => OrderFit::Degenerate,
            })
        };
        Ok(ResidualProbe { rows, fit })
    }
}
