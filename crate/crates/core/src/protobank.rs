//! Staining-pattern prototype dictionary.
//!
//! Style vectors are softly assigned to `K` unit-norm prototypes by entropic
//! optimal transport (a few Sinkhorn balancing rounds), quantised as the
//! assignment-weighted prototype mixture, and the prototypes drift towards
//! the mean of the styles assigned to them with a momentum update. At
//! inference, where no reference image exists, an aggregator predicts the
//! assignment from content features alone.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamSet};
use crate::tensor::{Tensor, Var};

/// Width of style vectors and prototypes.
pub const STYLE_DIM: usize = 8;
/// Balancing rounds used during training.
pub const SINKHORN_ROUNDS: usize = 3;
/// Hidden width of the aggregator perceptron.
pub const AGGREGATOR_HIDDEN: usize = 64;

/// Soft assignment of a batch of styles to the prototypes, `[B, K]`.
///
/// Rows are the L2-normalised styles scored against the prototypes by
/// cosine similarity (the transport cost is its negative). The kernel
/// `exp(score / tau)` is alternately rescaled so columns carry `1/K` and rows
/// `1/B`, `rounds` times, then each row is rescaled to sum to one. The
/// result is differentiable with respect to both styles and prototypes.
pub fn sinkhorn_assign<'t>(
    styles: Var<'t>,
    prototypes: Var<'t>,
    tau: f64,
    rounds: usize,
) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let s = styles.value();
    let (_, d) = s.dims2("sinkhorn_assign")?;
    let (_, pd) = prototypes.value().dims2("sinkhorn_assign")?;
    if d != pd {
        return Err(Error::Argument(format!(
            "styles have width {d}, prototypes {pd}"
        )));
    }
    for (row, chunk) in s.data().chunks(d).enumerate() {
        if chunk.iter().all(|&v| v == 0.0) {
            return Err(Error::Normalization(format!("style row {row} has zero norm")));
        }
    }
    let unit = styles.l2_normalize_rows(0.0)?;
    // Balancing runs on log-kernels so sharp temperatures cannot underflow a
    // whole row or column. Constant marginal offsets cancel and are dropped.
    let mut log_q = unit.matmul(prototypes.transpose()?)?.mul_scalar(1.0 / tau);
    for _ in 0..rounds {
        log_q = log_q.transpose()?.log_softmax().transpose()?;
        log_q = log_q.log_softmax();
    }
    Ok(log_q.softmax())
}

/// `alpha [B, K] x P [K, 8]`: the quantised style of each row.
pub fn quantize<'t>(alpha: Var<'t>, prototypes: Var<'t>) -> Result<Var<'t>> {
    Ok(alpha.matmul(prototypes)?)
}

/// What the inference-time aggregator predicts from content features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregatorHead {
    /// Softmax weights over the prototypes, mixed into a style.
    Mixture,
    /// A style vector regressed directly (used when no bank is trained).
    Direct,
}

/// `g_theta`: global average pool, a two-layer perceptron, then either a
/// softmax over the prototypes or a direct style regression.
#[derive(Clone, Debug)]
pub struct Aggregator {
    head: AggregatorHead,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Aggregator {
    fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        channels: usize,
        outputs: usize,
        head: AggregatorHead,
        rng: &mut R,
    ) -> Self {
        let w1 = set.add(
            "agg.w1",
            Tensor::randn(&[channels, AGGREGATOR_HIDDEN], (2.0 / channels as f64).sqrt(), rng),
        );
        let b1 = set.add("agg.b1", Tensor::zeros(&[1, AGGREGATOR_HIDDEN]));
        let w2 = set.add(
            "agg.w2",
            Tensor::randn(&[AGGREGATOR_HIDDEN, outputs], (1.0 / AGGREGATOR_HIDDEN as f64).sqrt(), rng),
        );
        let b2 = set.add("agg.b2", Tensor::zeros(&[1, outputs]));
        Self { head, w1, b1, w2, b2 }
    }

    pub fn head(&self) -> AggregatorHead {
        self.head
    }

    /// Raw head output `[N, K]` (logits) or `[N, 8]` (direct style).
    pub fn logits<'t>(&self, p: &Bound<'t>, content: Var<'t>) -> Result<Var<'t>> {
        let pooled = content.global_avg_pool()?;
        let hidden = pooled
            .matmul(p.var(self.w1))?
            .add(p.var(self.b1))?
            .relu();
        Ok(hidden.matmul(p.var(self.w2))?.add(p.var(self.b2))?)
    }

    pub fn zero_weights(&self, set: &mut ParamSet) {
        for id in [self.w1, self.b1, self.w2, self.b2] {
            let shape = set.get(id).shape().to_vec();
            set.set(id, Tensor::zeros(&shape));
        }
    }
}

/// Prototype matrix plus (optionally) the aggregator, in one parameter set
/// named `P`, `agg.w1`, `agg.b1`, `agg.w2`, `agg.b2`.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    params: ParamSet,
    prototypes: ParamId,
    aggregator: Option<Aggregator>,
    pub momentum: f64,
    pub tau: f64,
}

impl PrototypeBank {
    /// `k` prototypes drawn from a standard normal and projected to the unit
    /// sphere. The aggregator is absent until [`Self::init_aggregator`].
    pub fn new<R: Rng + ?Sized>(k: usize, tau: f64, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("prototype count must be at least 1".into()));
        }
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        let raw = Tensor::randn(&[k, STYLE_DIM], 1.0, rng);
        Self::from_prototypes(normalize_rows(&raw)?, tau)
    }

    /// Bank with the given prototype rows (normalised on entry).
    pub fn from_prototypes(prototypes: Tensor, tau: f64) -> Result<Self> {
        let (k, d) = prototypes.dims2("PrototypeBank")?;
        if k == 0 || d != STYLE_DIM {
            return Err(Error::Parameter(format!(
                "prototypes must be K x {STYLE_DIM}, got {:?}",
                prototypes.shape()
            )));
        }
        let mut params = ParamSet::new();
        let prototypes = params.add("P", normalize_rows(&prototypes)?);
        Ok(Self {
            params,
            prototypes,
            aggregator: None,
            momentum: 0.9,
            tau,
        })
    }

    pub fn init_aggregator<R: Rng + ?Sized>(
        &mut self,
        channels: usize,
        head: AggregatorHead,
        rng: &mut R,
    ) {
        let outputs = match head {
            AggregatorHead::Mixture => self.k(),
            AggregatorHead::Direct => STYLE_DIM,
        };
        self.aggregator = Some(Aggregator::new(&mut self.params, channels, outputs, head, rng));
    }

    pub fn k(&self) -> usize {
        self.params.get(self.prototypes).shape()[0]
    }

    pub fn prototypes(&self) -> &Tensor {
        self.params.get(self.prototypes)
    }

    pub fn prototype_id(&self) -> ParamId {
        self.prototypes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn aggregator(&self) -> Option<&Aggregator> {
        self.aggregator.as_ref()
    }

    pub fn zero_aggregator(&mut self) -> Result<()> {
        let agg = self
            .aggregator
            .clone()
            .ok_or_else(|| Error::State("aggregator is not initialised".into()))?;
        agg.zero_weights(&mut self.params);
        Ok(())
    }

    /// Assignment of `styles` to this bank's prototypes.
    pub fn assign<'t>(&self, p: &Bound<'t>, styles: Var<'t>) -> Result<Var<'t>> {
        sinkhorn_assign(styles, p.var(self.prototypes), self.tau, SINKHORN_ROUNDS)
    }

    /// Style predicted from content features, `[N, 8]`, plus the predicted
    /// prototype weights when the head is a mixture.
    pub fn aggregate<'t>(
        &self,
        p: &Bound<'t>,
        content: Var<'t>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let agg = self
            .aggregator
            .as_ref()
            .ok_or_else(|| Error::State("aggregator is not initialised".into()))?;
        let logits = agg.logits(p, content)?;
        match agg.head {
            AggregatorHead::Mixture => {
                let weights = logits.softmax();
                Ok((quantize(weights, p.var(self.prototypes))?, Some(weights)))
            }
            AggregatorHead::Direct => Ok((logits, None)),
        }
    }

    /// Moves each prototype towards the mean of the (unit-normalised) style
    /// rows whose largest assignment weight it holds:
    /// `p_k <- normalise(m p_k + (1 - m) mean_k)`. Prototypes that own no
    /// row are left bit-for-bit unchanged.
    pub fn momentum_update(&mut self, styles: &Tensor, alpha: &Tensor) -> Result<()> {
        let (b, d) = styles.dims2("momentum_update")?;
        let (ab, k) = alpha.dims2("momentum_update")?;
        if ab != b || d != STYLE_DIM || k != self.k() {
            return Err(Error::Argument(format!(
                "styles {:?} / assignment {:?} do not fit a bank of {} prototypes",
                styles.shape(),
                alpha.shape(),
                self.k()
            )));
        }
        let mut sums = vec![[0.0f64; STYLE_DIM]; k];
        let mut counts = vec![0usize; k];
        for (row, weights) in styles.data().chunks(d).zip(alpha.data().chunks(k)) {
            let owner = argmax(weights);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Normalization("zero-norm style row".into()));
            }
            for (acc, &v) in sums[owner].iter_mut().zip(row) {
                *acc += v / norm;
            }
            counts[owner] += 1;
        }
        let mut data = self.prototypes().to_vec();
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let row = &mut data[j * d..(j + 1) * d];
            for (p, s) in row.iter_mut().zip(&sums[j]) {
                *p = self.momentum * *p + (1.0 - self.momentum) * s / counts[j] as f64;
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        self.params
            .set(self.prototypes, Tensor::new(&[k, d], data)?);
        Ok(())
    }

    /// Re-projects every prototype onto the unit sphere (after a gradient
    /// step has moved them).
    pub fn renormalize(&mut self) -> Result<()> {
        let p = normalize_rows(self.prototypes())?;
        self.params.set(self.prototypes, p);
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let (m, n) = t.dims2("normalize_rows")?;
    let mut data = t.to_vec();
    for (i, row) in data.chunks_mut(n).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Normalization(format!("row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Tensor::new(&[m, n], data)?)
}
