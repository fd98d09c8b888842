//! Permutation-equivariant Q-network.
//!
//! Four stages map an `N × 3` observation to one action value per row:
//!
//! 1. LFE: a per-row affine map to `n` features followed by ReLU.
//! 2. GRE: min, max and mean of every feature over all rows.
//! 3. Concatenation of each row's features with the pooled `3n` vector.
//! 4. RS: a per-row affine map of the `4n` features followed by tanh.
//!
//! Gradients are written out by hand. Min and max route their gradient to
//! the first row attaining the extremum; the ReLU subgradient at zero is zero.

use std::io::{self, BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::fmt_f64;
use crate::rng::seeded_rng;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "peq-qnet-checkpoint";

#[derive(Debug, Error)]
pub enum QNetError {
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("observation has no rows")]
    EmptyInput,
    #[error("trace was produced with different parameters")]
    StaleTrace,
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub n_features: usize,
    pub item_count: usize,
    pub input_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_features: 32,
            item_count: 128,
            input_dim: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), QNetError> {
        if self.n_features == 0 {
            return Err(QNetError::InvalidConfig(
                "n_features must be at least 1".into(),
            ));
        }
        if self.item_count == 0 {
            return Err(QNetError::InvalidConfig(
                "item_count must be at least 1".into(),
            ));
        }
        if self.input_dim != 3 {
            return Err(QNetError::InvalidConfig("input_dim must be 3".into()));
        }
        Ok(())
    }

    pub fn enhanced_width(&self) -> usize {
        4 * self.n_features
    }
}

/// All weights in one flat vector: theta1 (`n × 3`, row-major), xi1 (`n`),
/// theta2 (`4n`, ordered features, min, max, mean) and xi2.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetworkParams {
    n: usize,
    values: Vec<f64>,
}

impl QNetworkParams {
    pub fn len_for(n: usize) -> usize {
        8 * n + 1
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; Self::len_for(n)],
        }
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self, QNetError> {
        if values.len() != Self::len_for(n) {
            return Err(QNetError::ShapeMismatch {
                expected: Self::len_for(n),
                found: values.len(),
            });
        }
        Ok(Self { n, values })
    }

    pub fn n_features(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn theta1(&self) -> &[f64] {
        &self.values[..3 * self.n]
    }

    pub fn theta1_mut(&mut self) -> &mut [f64] {
        &mut self.values[..3 * self.n]
    }

    pub fn xi1(&self) -> &[f64] {
        &self.values[3 * self.n..4 * self.n]
    }

    pub fn xi1_mut(&mut self) -> &mut [f64] {
        let n = self.n;
        &mut self.values[3 * n..4 * n]
    }

    pub fn theta2(&self) -> &[f64] {
        &self.values[4 * self.n..8 * self.n]
    }

    pub fn theta2_mut(&mut self) -> &mut [f64] {
        let n = self.n;
        &mut self.values[4 * n..8 * n]
    }

    pub fn xi2(&self) -> f64 {
        self.values[8 * self.n]
    }

    pub fn set_xi2(&mut self, v: f64) {
        self.values[8 * self.n] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a hash of the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn write_checkpoint<W: Write>(&self, item_count: usize, mut out: W) -> io::Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(out, "n {}", self.n)?;
        writeln!(out, "item_count {item_count}")?;
        writeln!(out, "values {}", self.values.len())?;
        for v in &self.values {
            writeln!(out, "{}", fmt_f64(*v))?;
        }
        Ok(())
    }

    /// Reads a checkpoint; returns the parameters and the stored item count.
    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(Self, usize), QNetError> {
        let bad = |m: String| QNetError::Checkpoint(m);
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String, QNetError> {
            match lines.next() {
                Some(l) => Ok(l?),
                None => Err(QNetError::Checkpoint(format!("missing {what}"))),
            }
        };
        let header = next("header")?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad(format!("unrecognized header {header:?}")))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!("unsupported version {version}")));
        }
        let field = |line: String, key: &str| -> Result<usize, QNetError> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| {
                    QNetError::Checkpoint(format!("expected `{key} <int>`, found {line:?}"))
                })
        };
        let n = field(next("n")?, "n ")?;
        let item_count = field(next("item_count")?, "item_count ")?;
        let count = field(next("values")?, "values ")?;
        if n == 0 || count != Self::len_for(n) {
            return Err(bad(format!("{count} values do not fit n = {n}")));
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let line = next("value")?;
            let v: f64 = line
                .trim()
                .parse()
                .map_err(|_| bad(format!("value {i} is not a number: {line:?}")))?;
            values.push(v);
        }
        Ok((Self { n, values }, item_count))
    }
}

/// Seeded uniform initialization in ±sqrt(1/fan_in) per layer.
pub fn init_params(config: &NetworkConfig, seed: u64) -> QNetworkParams {
    let n = config.n_features;
    let mut rng = seeded_rng(seed);
    let mut p = QNetworkParams::zeros(n);
    let b1 = (1.0 / config.input_dim as f64).sqrt();
    let b2 = (1.0 / config.enhanced_width() as f64).sqrt();
    for v in &mut p.values[..4 * n] {
        *v = rng.gen_range(-b1..b1);
    }
    for v in &mut p.values[4 * n..] {
        *v = rng.gen_range(-b2..b2);
    }
    p
}

fn check_input(x: &[f64]) -> Result<usize, QNetError> {
    if x.is_empty() {
        return Err(QNetError::EmptyInput);
    }
    if !x.len().is_multiple_of(3) {
        return Err(QNetError::ShapeMismatch {
            expected: x.len() / 3 * 3 + 3,
            found: x.len(),
        });
    }
    Ok(x.len() / 3)
}

/// Per-row features before and after ReLU, both `rows × n`.
pub fn lfe_forward(x: &[f64], params: &QNetworkParams) -> Result<(Vec<f64>, Vec<f64>), QNetError> {
    let rows = check_input(x)?;
    let n = params.n;
    let (t1, xi1) = (params.theta1(), params.xi1());
    let mut pre = vec![0.0; rows * n];
    for i in 0..rows {
        let xi = &x[3 * i..3 * i + 3];
        for c in 0..n {
            pre[i * n + c] = unit(
                xi1[c],
                t1[3 * c],
                t1[3 * c + 1],
                t1[3 * c + 2],
                xi[0],
                xi[1],
                xi[2],
            );
        }
    }
    let post = pre.iter().map(|&p| relu(p)).collect();
    Ok((pre, post))
}

/// Pre-activation of one LFE unit. Every code path uses this exact
/// evaluation order so that recomputed values match bit for bit.
#[inline(always)]
fn unit(bias: f64, w0: f64, w1: f64, w2: f64, x0: f64, x1: f64, x2: f64) -> f64 {
    bias + w0 * x0 + w1 * x1 + w2 * x2
}

#[inline(always)]
fn relu(p: f64) -> f64 {
    if p > 0.0 {
        p
    } else {
        0.0
    }
}

/// Pooled features with the rows attaining each extremum.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeatures {
    /// `[min; max; mean]`, each `n` long.
    pub values: Vec<f64>,
    pub argmin: Vec<usize>,
    pub argmax: Vec<usize>,
}

pub fn gre_forward(lf: &[f64], n: usize) -> Result<GlobalFeatures, QNetError> {
    if lf.is_empty() || n == 0 {
        return Err(QNetError::EmptyInput);
    }
    if !lf.len().is_multiple_of(n) {
        return Err(QNetError::ShapeMismatch {
            expected: lf.len() / n * n + n,
            found: lf.len(),
        });
    }
    let rows = lf.len() / n;
    let mut mn = lf[..n].to_vec();
    let mut mx = lf[..n].to_vec();
    let mut sum = vec![0.0; n];
    let mut argmin = vec![0; n];
    let mut argmax = vec![0; n];
    for i in 0..rows {
        for c in 0..n {
            let v = lf[i * n + c];
            if v < mn[c] {
                mn[c] = v;
                argmin[c] = i;
            }
            if v > mx[c] {
                mx[c] = v;
                argmax[c] = i;
            }
            sum[c] += v;
        }
    }
    let mut values = mn;
    values.extend(mx);
    values.extend(sum.iter().map(|s| s / rows as f64));
    Ok(GlobalFeatures {
        values,
        argmin,
        argmax,
    })
}

/// Appends the pooled vector to every row: `rows × 4n`.
pub fn concat_features(lf: &[f64], gc: &[f64], n: usize) -> Result<Vec<f64>, QNetError> {
    if gc.len() != 3 * n {
        return Err(QNetError::ShapeMismatch {
            expected: 3 * n,
            found: gc.len(),
        });
    }
    if n == 0 || !lf.len().is_multiple_of(n) {
        return Err(QNetError::ShapeMismatch {
            expected: n,
            found: lf.len(),
        });
    }
    let rows = lf.len() / n;
    let mut ef = Vec::with_capacity(rows * 4 * n);
    for i in 0..rows {
        ef.extend_from_slice(&lf[i * n..(i + 1) * n]);
        ef.extend_from_slice(gc);
    }
    Ok(ef)
}

/// Per-row scores before and after tanh.
pub fn rs_forward(ef: &[f64], params: &QNetworkParams) -> Result<(Vec<f64>, Vec<f64>), QNetError> {
    let w = 4 * params.n;
    if ef.is_empty() || !ef.len().is_multiple_of(w) {
        return Err(QNetError::ShapeMismatch {
            expected: w,
            found: ef.len(),
        });
    }
    let t2 = params.theta2();
    let pre: Vec<f64> = ef
        .chunks_exact(w)
        .map(|row| params.xi2() + row.iter().zip(t2).map(|(e, t)| e * t).sum::<f64>())
        .collect();
    let q = pre.iter().map(|p| p.tanh()).collect();
    Ok((pre, q))
}

/// Everything backward needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub rows: usize,
    pub n: usize,
    pub x: Vec<f64>,
    pub lf_pre: Vec<f64>,
    pub lf: Vec<f64>,
    pub gc: GlobalFeatures,
    pub ef: Vec<f64>,
    pub q_pre: Vec<f64>,
    pub q: Vec<f64>,
    fingerprint: u64,
}

pub fn forward(x: &[f64], params: &QNetworkParams) -> Result<(Vec<f64>, ForwardTrace), QNetError> {
    let n = params.n;
    let (lf_pre, lf) = lfe_forward(x, params)?;
    let gc = gre_forward(&lf, n)?;
    let ef = concat_features(&lf, &gc.values, n)?;
    let (q_pre, q) = rs_forward(&ef, params)?;
    let trace = ForwardTrace {
        rows: x.len() / 3,
        n,
        x: x.to_vec(),
        lf_pre,
        lf,
        gc,
        ef,
        q_pre,
        q: q.clone(),
        fingerprint: params.fingerprint(),
    };
    Ok((q, trace))
}

/// Gradient of `Σ_i dl_dq[i]·q[i]` with respect to every parameter.
pub fn backward(
    params: &QNetworkParams,
    trace: &ForwardTrace,
    dl_dq: &[f64],
) -> Result<QNetworkParams, QNetError> {
    if params.fingerprint() != trace.fingerprint || params.n != trace.n {
        return Err(QNetError::StaleTrace);
    }
    let (rows, n) = (trace.rows, trace.n);
    if dl_dq.len() != rows {
        return Err(QNetError::ShapeMismatch {
            expected: rows,
            found: dl_dq.len(),
        });
    }
    let mut grad = QNetworkParams::zeros(n);
    let t2 = params.theta2().to_vec();
    let ds: Vec<f64> = dl_dq
        .iter()
        .zip(&trace.q)
        .map(|(d, q)| d * (1.0 - q * q))
        .collect();
    let w = 4 * n;
    {
        let g2 = grad.theta2_mut();
        for (i, &d) in ds.iter().enumerate() {
            for (g, e) in g2.iter_mut().zip(&trace.ef[i * w..(i + 1) * w]) {
                *g += d * e;
            }
        }
    }
    let ds_sum: f64 = ds.iter().sum();
    grad.set_xi2(ds_sum);

    // gradient reaching LF, direct path plus the three pooled paths
    let mut dlf = vec![0.0; rows * n];
    for i in 0..rows {
        for c in 0..n {
            dlf[i * n + c] = ds[i] * t2[c] + ds_sum * t2[3 * n + c] / rows as f64;
        }
    }
    for c in 0..n {
        dlf[trace.gc.argmin[c] * n + c] += ds_sum * t2[n + c];
        dlf[trace.gc.argmax[c] * n + c] += ds_sum * t2[2 * n + c];
    }
    let mut g1 = vec![0.0; 3 * n];
    let mut gx1 = vec![0.0; n];
    for i in 0..rows {
        for c in 0..n {
            if trace.lf_pre[i * n + c] > 0.0 {
                let d = dlf[i * n + c];
                gx1[c] += d;
                for j in 0..3 {
                    g1[3 * c + j] += d * trace.x[3 * i + j];
                }
            }
        }
    }
    grad.theta1_mut().copy_from_slice(&g1);
    grad.xi1_mut().copy_from_slice(&gx1);
    Ok(grad)
}

const LANES: usize = 8;
type Lane = [f64; LANES];

/// Reusable buffers for the fast paths. Features are processed in blocks
/// of eight; the last block is zero-padded, which keeps padded units dead.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    /// Per block: theta1 columns x, y, z, then xi1, then the LF part of theta2.
    weights: Vec<[Lane; 5]>,
    mn: Vec<Lane>,
    mx: Vec<Lane>,
    argmax: Vec<Lane>,
    sum: Vec<Lane>,
    active_x: Vec<[Lane; 3]>,
    active_count: Vec<Lane>,
    row_acc: Vec<Lane>,
}

#[inline(always)]
fn lane(v: &[Lane], c: usize) -> f64 {
    v[c / LANES][c % LANES]
}

impl Scratch {
    fn load(&mut self, params: &QNetworkParams) {
        let n = params.n;
        let blocks = n.div_ceil(LANES);
        let (t1, xi1, t2) = (params.theta1(), params.xi1(), params.theta2());
        self.weights.clear();
        self.weights.resize(blocks, [[0.0; LANES]; 5]);
        for c in 0..n {
            let w = &mut self.weights[c / LANES];
            let k = c % LANES;
            w[0][k] = t1[3 * c];
            w[1][k] = t1[3 * c + 1];
            w[2][k] = t1[3 * c + 2];
            w[3][k] = xi1[c];
            w[4][k] = t2[c];
        }
    }

    /// Min, max (with first arg-max row) and sum of every feature over the
    /// rows. `TRACK` also sums inputs of active units; `LOGITS` accumulates
    /// the per-row LF contribution to the score in `row_acc`.
    fn pool<const TRACK: bool, const LOGITS: bool>(
        &mut self,
        params: &QNetworkParams,
        x: &[f64],
        rows: usize,
    ) {
        self.load(params);
        let blocks = self.weights.len();
        for v in [
            &mut self.mn,
            &mut self.mx,
            &mut self.argmax,
            &mut self.sum,
            &mut self.active_count,
        ] {
            v.clear();
            v.resize(blocks, [0.0; LANES]);
        }
        self.active_x.clear();
        self.active_x.resize(blocks, [[0.0; LANES]; 3]);
        if LOGITS {
            self.row_acc.clear();
            self.row_acc.resize(rows, [0.0; LANES]);
        }
        for b in 0..blocks {
            let [w0, w1, w2, bias, t2] = self.weights[b];
            let mut mn = [f64::INFINITY; LANES];
            let mut mx = [f64::NEG_INFINITY; LANES];
            let mut amx = [0.0; LANES];
            let mut sm = [0.0; LANES];
            let mut a0 = [0.0; LANES];
            let mut a1 = [0.0; LANES];
            let mut a2 = [0.0; LANES];
            let mut cnt = [0.0; LANES];
            for i in 0..rows {
                let (x0, x1, x2) = (x[3 * i], x[3 * i + 1], x[3 * i + 2]);
                let fi = i as f64;
                let mut v = [0.0; LANES];
                for k in 0..LANES {
                    let p = unit(bias[k], w0[k], w1[k], w2[k], x0, x1, x2);
                    v[k] = relu(p);
                    mn[k] = if v[k] < mn[k] { v[k] } else { mn[k] };
                    let gt = v[k] > mx[k];
                    amx[k] = if gt { fi } else { amx[k] };
                    mx[k] = if gt { v[k] } else { mx[k] };
                    sm[k] += v[k];
                    if TRACK {
                        let on = if p > 0.0 { 1.0 } else { 0.0 };
                        a0[k] += on * x0;
                        a1[k] += on * x1;
                        a2[k] += on * x2;
                        cnt[k] += on;
                    }
                }
                if LOGITS {
                    let acc = &mut self.row_acc[i];
                    for k in 0..LANES {
                        acc[k] += t2[k] * v[k];
                    }
                }
            }
            self.mn[b] = mn;
            self.mx[b] = mx;
            self.argmax[b] = amx;
            self.sum[b] = sm;
            self.active_x[b] = [a0, a1, a2];
            self.active_count[b] = cnt;
        }
    }

    /// Contribution of the pooled features to every row's score.
    fn pooled_logit(&self, params: &QNetworkParams, rows: usize) -> f64 {
        let n = params.n;
        let t2 = params.theta2();
        let inv = 1.0 / rows as f64;
        let mut acc = params.xi2();
        for c in 0..n {
            acc += t2[n + c] * lane(&self.mn, c)
                + t2[2 * n + c] * lane(&self.mx, c)
                + t2[3 * n + c] * (lane(&self.sum, c) * inv);
        }
        acc
    }

    /// LF of one row, in block layout.
    fn row_features(&self, x: &[f64], row: usize) -> Vec<Lane> {
        let (x0, x1, x2) = (x[3 * row], x[3 * row + 1], x[3 * row + 2]);
        self.weights
            .iter()
            .map(|[w0, w1, w2, bias, _]| {
                let mut v = [0.0; LANES];
                for k in 0..LANES {
                    v[k] = relu(unit(bias[k], w0[k], w1[k], w2[k], x0, x1, x2));
                }
                v
            })
            .collect()
    }

    /// Sums the lanes of a per-row accumulator in a fixed order.
    fn finish_row(acc: &Lane) -> f64 {
        acc.iter().sum()
    }

    fn row_logit(&self, lf: &[Lane]) -> f64 {
        let mut acc = [0.0; LANES];
        for (w, v) in self.weights.iter().zip(lf) {
            for k in 0..LANES {
                acc[k] += w[4][k] * v[k];
            }
        }
        Self::finish_row(&acc)
    }

    /// First row attaining the minimum of feature `c`.
    fn argmin(&self, x: &[f64], rows: usize, c: usize) -> usize {
        let [w0, w1, w2, bias, _] = self.weights[c / LANES];
        let k = c % LANES;
        let target = lane(&self.mn, c);
        (0..rows)
            .find(|&i| {
                relu(unit(
                    bias[k],
                    w0[k],
                    w1[k],
                    w2[k],
                    x[3 * i],
                    x[3 * i + 1],
                    x[3 * i + 2],
                )) == target
            })
            .unwrap_or(0)
    }
}

/// Action values for every row without keeping a trace.
pub fn q_values(
    params: &QNetworkParams,
    x: &[f64],
    scratch: &mut Scratch,
    out: &mut Vec<f64>,
) -> Result<(), QNetError> {
    let rows = check_input(x)?;
    scratch.pool::<false, true>(params, x, rows);
    let base = scratch.pooled_logit(params, rows);
    out.clear();
    out.extend(
        scratch
            .row_acc
            .iter()
            .map(|acc| (base + Scratch::finish_row(acc)).tanh()),
    );
    Ok(())
}

/// Forward pass for a single action followed by its gradient.
///
/// `dl_dq` receives `q[action]` and returns the loss derivative at that
/// entry; the resulting parameter gradient is added into `grad`. Returns
/// `q[action]`.
pub fn accumulate_action_grad(
    params: &QNetworkParams,
    x: &[f64],
    action: usize,
    dl_dq: impl FnOnce(f64) -> f64,
    scratch: &mut Scratch,
    grad: &mut [f64],
) -> Result<f64, QNetError> {
    let rows = check_input(x)?;
    let n = params.n;
    if action >= rows {
        return Err(QNetError::ShapeMismatch {
            expected: rows,
            found: action + 1,
        });
    }
    if grad.len() != params.values.len() {
        return Err(QNetError::ShapeMismatch {
            expected: params.values.len(),
            found: grad.len(),
        });
    }
    scratch.pool::<true, false>(params, x, rows);
    let lf_a = scratch.row_features(x, action);
    let q = (scratch.pooled_logit(params, rows) + scratch.row_logit(&lf_a)).tanh();
    let ds = dl_dq(q) * (1.0 - q * q);
    if ds == 0.0 {
        return Ok(q);
    }
    let inv = 1.0 / rows as f64;
    let t2 = params.theta2();
    let (g1, rest) = grad.split_at_mut(3 * n);
    let (gx1, rest) = rest.split_at_mut(n);
    let (g2, gx2) = rest.split_at_mut(4 * n);
    gx2[0] += ds;
    let xa = &x[3 * action..3 * action + 3];
    for c in 0..n {
        let (lf, mn, mx, sum) = (
            lane(&lf_a, c),
            lane(&scratch.mn, c),
            lane(&scratch.mx, c),
            lane(&scratch.sum, c),
        );
        g2[c] += ds * lf;
        g2[n + c] += ds * mn;
        g2[2 * n + c] += ds * mx;
        g2[3 * n + c] += ds * sum * inv;
        // mean path reaches every active row
        let dm = ds * t2[3 * n + c] * inv;
        let (b, k) = (c / LANES, c % LANES);
        let mut gb = dm * scratch.active_count[b][k];
        let mut gw = [
            dm * scratch.active_x[b][0][k],
            dm * scratch.active_x[b][1][k],
            dm * scratch.active_x[b][2][k],
        ];
        if lf > 0.0 {
            let d = ds * t2[c];
            gb += d;
            for j in 0..3 {
                gw[j] += d * xa[j];
            }
        }
        if mn > 0.0 {
            let d = ds * t2[n + c];
            let r = scratch.argmin(x, rows, c);
            gb += d;
            for j in 0..3 {
                gw[j] += d * x[3 * r + j];
            }
        }
        if mx > 0.0 {
            let d = ds * t2[2 * n + c];
            let r = scratch.argmax[b][k] as usize;
            gb += d;
            for j in 0..3 {
                gw[j] += d * x[3 * r + j];
            }
        }
        gx1[c] += gb;
        for j in 0..3 {
            g1[3 * c + j] += gw[j];
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::lattice_value;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_x(rows: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        (0..3 * rows).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn lattice_x(rows: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        let mut cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..rows).map(|r| lattice_value(r, rows)).collect())
            .collect();
        for c in &mut cols {
            c.shuffle(&mut rng);
        }
        (0..rows)
            .flat_map(|i| [cols[0][i], cols[1][i], cols[2][i]])
            .collect()
    }

    #[test]
    fn same_seed_same_params() {
        let c = NetworkConfig::default();
        assert_eq!(init_params(&c, 3), init_params(&c, 3));
        assert_ne!(init_params(&c, 3), init_params(&c, 4));
    }

    #[test]
    fn zero_params_give_tanh_of_bias() {
        let mut p = QNetworkParams::zeros(8);
        let x = random_x(128, 1);
        assert!(forward(&x, &p).unwrap().0.iter().all(|&q| q == 0.0));
        p.set_xi2(0.7);
        assert!(forward(&x, &p)
            .unwrap()
            .0
            .iter()
            .all(|&q| q == 0.7f64.tanh()));
    }

    #[test]
    fn init_keeps_logits_small() {
        let c = NetworkConfig::default();
        let mut worst_random = 0.0f64;
        let mut worst_lattice = 0.0f64;
        for seed in 0..100 {
            let p = init_params(&c, seed);
            let (_, t) = forward(&random_x(128, 1000 + seed), &p).unwrap();
            worst_random = t.q_pre.iter().fold(worst_random, |m, v| m.max(v.abs()));
            let (q, _) = forward(&lattice_x(128, 2000 + seed), &p).unwrap();
            worst_lattice = q.iter().fold(worst_lattice, |m, v| m.max(v.abs()));
        }
        assert!(worst_random < 3.0, "max |pre-tanh| = {worst_random}");
        assert!(worst_lattice < 0.9, "max |q| on lattice = {worst_lattice}");
    }

    #[test]
    fn lfe_examples() {
        let mut p = QNetworkParams::zeros(4);
        p.xi1_mut().fill(1.0);
        let x = random_x(5, 2);
        assert!(lfe_forward(&x, &p).unwrap().1.iter().all(|&v| v == 1.0));
        p.xi1_mut().fill(-1.0);
        assert!(lfe_forward(&x, &p).unwrap().1.iter().all(|&v| v == 0.0));
        assert!(matches!(
            lfe_forward(&x[..4], &p),
            Err(QNetError::ShapeMismatch { .. })
        ));
        assert!(matches!(lfe_forward(&[], &p), Err(QNetError::EmptyInput)));
    }

    #[test]
    fn gre_examples() {
        let n = 3;
        let lf = vec![2.5; 5 * n];
        let g = gre_forward(&lf, n).unwrap();
        assert!(g.values.iter().all(|&v| v == 2.5));
        assert_eq!(g.argmin, vec![0; n]);
        assert_eq!(g.argmax, vec![0; n]);
        // one dominant row wins the max wherever it sits
        for pos in 0..5 {
            let mut lf = vec![0.5; 5 * n];
            lf[pos * n..(pos + 1) * n].fill(9.0);
            let g = gre_forward(&lf, n).unwrap();
            assert_eq!(&g.values[n..2 * n], &[9.0; 3]);
            assert_eq!(g.argmax, vec![pos; n]);
        }
    }

    #[test]
    fn concat_layout() {
        let n = 2;
        let lf = vec![1.0, 2.0, 3.0, 4.0];
        let gc = vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let ef = concat_features(&lf, &gc, n).unwrap();
        assert_eq!(ef.len(), 2 * 4 * n);
        assert_eq!(&ef[..8], &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(&ef[8..], &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        assert!(concat_features(&lf, &gc[..5], n).is_err());
    }

    #[test]
    fn rs_saturates_and_stays_in_range() {
        let mut p = QNetworkParams::zeros(2);
        p.set_xi2(40.0);
        let ef = vec![0.0; 8];
        let (_, q) = rs_forward(&ef, &p).unwrap();
        assert_eq!(q, vec![1.0]);
        let p = init_params(&NetworkConfig::default(), 9);
        let (q, _) = forward(&random_x(128, 9), &p).unwrap();
        assert!(q.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn permutation_equivariance() {
        let p = init_params(&NetworkConfig::default(), 5);
        let x = random_x(128, 5);
        let (q, _) = forward(&x, &p).unwrap();
        let mut rng = seeded_rng(77);
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..128).collect();
            perm.shuffle(&mut rng);
            let px: Vec<f64> = perm
                .iter()
                .flat_map(|&i| x[3 * i..3 * i + 3].to_vec())
                .collect();
            let (pq, _) = forward(&px, &p).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                assert!((pq[k] - q[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_rows_share_values() {
        let p = init_params(&NetworkConfig::default(), 6);
        let mut x = random_x(128, 6);
        let dup: Vec<f64> = x[30..33].to_vec();
        x[300..303].copy_from_slice(&dup);
        let (q, _) = forward(&x, &p).unwrap();
        assert_eq!(q[10], q[100]);
    }

    #[test]
    fn backward_zero_and_bias_identity() {
        let p = init_params(&NetworkConfig::default(), 7);
        let x = random_x(128, 7);
        let (q, trace) = forward(&x, &p).unwrap();
        let g = backward(&p, &trace, &vec![0.0; 128]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        let dq = random_x(128, 8)[..128].to_vec();
        let g = backward(&p, &trace, &dq).unwrap();
        let expected: f64 = dq.iter().zip(&q).map(|(d, q)| d * (1.0 - q * q)).sum();
        assert!((g.xi2() - expected).abs() < 1e-12);
    }

    #[test]
    fn stale_trace_rejected() {
        let mut p = init_params(&NetworkConfig::default(), 7);
        let (_, trace) = forward(&random_x(128, 7), &p).unwrap();
        p.values_mut()[0] += 1e-3;
        assert!(matches!(
            backward(&p, &trace, &[0.0; 128]),
            Err(QNetError::StaleTrace)
        ));
    }

    #[test]
    fn fast_q_matches_forward() {
        let p = init_params(&NetworkConfig::default(), 11);
        let x = lattice_x(128, 11);
        let (q, _) = forward(&x, &p).unwrap();
        let mut s = Scratch::default();
        let mut fast = Vec::new();
        q_values(&p, &x, &mut s, &mut fast).unwrap();
        for (a, b) in q.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    fn check_action_grad(p: &QNetworkParams, x: &[f64], action: usize) {
        let (q, trace) = forward(x, p).unwrap();
        let mut dq = vec![0.0; x.len() / 3];
        dq[action] = 0.37;
        let reference = backward(p, &trace, &dq).unwrap();
        let mut grad = vec![0.0; p.values().len()];
        let mut s = Scratch::default();
        let qa = accumulate_action_grad(p, x, action, |_| 0.37, &mut s, &mut grad).unwrap();
        assert!((qa - q[action]).abs() < 1e-13);
        for (k, (a, b)) in grad.iter().zip(reference.values()).enumerate() {
            assert!(
                (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                "param {k}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn fused_gradient_matches_backward() {
        let c = NetworkConfig::default();
        for seed in 0..10 {
            let p = init_params(&c, seed);
            check_action_grad(&p, &lattice_x(128, seed), (seed as usize * 37) % 128);
            check_action_grad(&p, &random_x(128, 50 + seed), (seed as usize * 11) % 128);
        }
        // all-dead features exercise the zero-minimum branch
        let mut p = init_params(&c, 3);
        p.xi1_mut()[..8].fill(-10.0);
        check_action_grad(&p, &random_x(128, 3), 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = init_params(&NetworkConfig::default(), 12);
        p.values_mut()[3] = 1.0 / 3.0;
        p.values_mut()[4] = -2.2250738585072014e-308;
        let mut buf = Vec::new();
        p.write_checkpoint(128, &mut buf).unwrap();
        let (back, items) = QNetworkParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(items, 128);
        assert_eq!(back.n_features(), 32);
        for (a, b) in back.values().iter().zip(p.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut again = Vec::new();
        back.write_checkpoint(128, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(QNetworkParams::read_checkpoint(&b"nonsense\n"[..]).is_err());
        let text = "peq-qnet-checkpoint 1\nn 1\nitem_count 128\nvalues 9\n0\n";
        assert!(matches!(
            QNetworkParams::read_checkpoint(text.as_bytes()),
            Err(QNetError::Checkpoint(_))
        ));
        let text = "peq-qnet-checkpoint 1\nn 1\nitem_count 128\nvalues 8\n";
        assert!(QNetworkParams::read_checkpoint(text.as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gre_is_permutation_invariant(seed in 0u64..1000, rows in 1usize..40) {
            let n = 5;
            let lf: Vec<f64> = random_x(rows * n, seed).into_iter().take(rows * n).map(f64::abs).collect();
            let g = gre_forward(&lf, n).unwrap();
            let mut perm: Vec<usize> = (0..rows).collect();
            perm.shuffle(&mut seeded_rng(seed + 1));
            let plf: Vec<f64> = perm.iter().flat_map(|&i| lf[i * n..(i + 1) * n].to_vec()).collect();
            let pg = gre_forward(&plf, n).unwrap();
            prop_assert_eq!(&g.values[..2 * n], &pg.values[..2 * n]);
            for (a, b) in g.values[2 * n..].iter().zip(&pg.values[2 * n..]) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn q_in_open_interval(seed in 0u64..1000, rows in 1usize..64) {
            let p = init_params(&NetworkConfig::default(), seed);
            let (q, _) = forward(&random_x(rows, seed), &p).unwrap();
            prop_assert!(q.iter().all(|v| v.abs() < 1.0 && v.is_finite()));
        }
    }
}
