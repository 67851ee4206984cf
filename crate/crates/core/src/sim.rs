//! Closed-loop simulation: dithered quantization of the Kalman innovation,
//! prefix-free transport, certainty-equivalent control.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::codec::{BitReader, BitWriter, CodeKind, Codebook, ConditionalPmfModel, FinitePmf};
use crate::control::PlantModel;
use crate::error::{Error, Result};
use crate::invariant::{invariant_codebooks_with, invariant_density_series, ChainParams, InvariantCodebooks};
use crate::quantizer::{noise_rng, quantize_scalar, DitherStream};
use crate::rdf::RdfSolution;
use crate::stats::{autocorrelation, KahanSum};

/// `1/2 log2(2 pi e / 12)`: entropy gap between Gaussian and uniform noise
/// of equal variance.
pub fn space_filling_loss() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E / 12.0).log2()
}

/// Standard deviations kept on each side by the Gaussian models; the tail
/// beyond is below 2^-40.
const TAIL_SIGMAS: f64 = 7.3;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x * std::f64::consts::FRAC_1_SQRT_2)
}

/// `Phi(b) - Phi(a)` without cancellation in either tail.
fn normal_interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        upper_tail(a) - upper_tail(b)
    } else if b <= 0.0 {
        upper_tail(-b) - upper_tail(-a)
    } else {
        1.0 - upper_tail(-a) - upper_tail(b)
    }
}

/// `phi(x) - x Q(x)` for `x >= 0`; second differences of this give the
/// Gaussian-convolved-with-uniform cell masses.
fn psi_tail(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp() - x * upper_tail(x)
}

/// `P[q = k | d]` when the quantizer input is `z + d`, `z ~ N(0, sigma2)`.
pub fn gaussian_conditional_pmf(sigma2: f64, d: f64, delta: f64) -> FinitePmf {
    if !(sigma2 > 0.0) {
        return FinitePmf::new(vec![quantize_scalar(d, delta)], vec![1.0], 0.0).unwrap();
    }
    let s = sigma2.sqrt();
    let kmin = ((d - TAIL_SIGMAS * s) / delta - 0.5).ceil() as i64;
    let kmax = ((d + TAIL_SIGMAS * s) / delta + 0.5).floor() as i64;
    let edge = |k: i64| (k as f64 * delta - 0.5 * delta - d) / s;
    let cells: Vec<i64> = (kmin..=kmax).collect();
    let probs: Vec<f64> = cells.iter().map(|&k| normal_interval(edge(k), edge(k + 1))).collect();
    let tail = upper_tail(-edge(kmin)) + upper_tail(edge(kmax + 1));
    FinitePmf::from_weights_with_escape(&cells, &probs, tail).unwrap()
}

/// `P[q = k]` with the dither averaged out, `z ~ N(0, sigma2)`.
pub fn gaussian_marginal_pmf(sigma2: f64, delta: f64) -> FinitePmf {
    if !(sigma2 > 0.0) {
        return FinitePmf::new(vec![0], vec![1.0], 0.0).unwrap();
    }
    let sigma = sigma2.sqrt();
    let r = delta / sigma;
    let kmax = (TAIL_SIGMAS * sigma / delta + 1.0).ceil() as i64;
    let second = |k: i64| {
        let k = k as f64;
        (psi_tail(r * (k + 1.0)) - 2.0 * psi_tail(r * k) + psi_tail(r * (k - 1.0))) / r
    };
    let p0 = 1.0 + 2.0 / r * (psi_tail(r) - INV_SQRT_2PI);
    let mut cells = Vec::with_capacity(2 * kmax as usize + 1);
    let mut probs = Vec::with_capacity(2 * kmax as usize + 1);
    for k in -kmax..=kmax {
        cells.push(k);
        probs.push(if k == 0 { p0 } else { second(k.abs()) }.max(0.0));
    }
    let kf = kmax as f64;
    let tail = 2.0 * (psi_tail(r * kf) - psi_tail(r * (kf + 1.0))) / r;
    FinitePmf::from_weights_with_escape(&cells, &probs, tail.max(0.0)).unwrap()
}

/// Gaussian innovation model as a dither-indexed family.
#[derive(Debug, Clone, Copy)]
pub struct GaussianConditional {
    pub sigma2: f64,
    pub delta: f64,
}

impl ConditionalPmfModel for GaussianConditional {
    fn pmf_given(&self, d: f64) -> FinitePmf {
        gaussian_conditional_pmf(self.sigma2, d, self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CodecMode {
    #[serde(rename = "tv-si")]
    TvSi,
    #[serde(rename = "tv-nosi")]
    TvNosi,
    #[serde(rename = "ti-si")]
    TiSi,
    #[serde(rename = "ti-nosi")]
    TiNosi,
}

impl CodecMode {
    pub const ALL: [CodecMode; 4] = [CodecMode::TvSi, CodecMode::TvNosi, CodecMode::TiSi, CodecMode::TiNosi];

    pub fn side_info(self) -> bool {
        matches!(self, CodecMode::TvSi | CodecMode::TiSi)
    }

    pub fn time_invariant(self) -> bool {
        matches!(self, CodecMode::TiSi | CodecMode::TiNosi)
    }

    /// Code family each mode's length bound is stated for.
    pub fn default_kind(self) -> CodeKind {
        match self {
            CodecMode::TiSi => CodeKind::Fano,
            _ => CodeKind::ShannonSorted,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CodecMode::TvSi => "tv-si",
            CodecMode::TvNosi => "tv-nosi",
            CodecMode::TiSi => "ti-si",
            CodecMode::TiNosi => "ti-nosi",
        }
    }
}

impl fmt::Display for CodecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CodecMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown codec mode '{s}'")))
    }
}

/// Length bound for `mode` with `kind` codes over `m` separately coded
/// components: `R + m c + [no SI] m + per-word overhead`, overhead 1 for
/// Shannon-sorted and 2 for Fano.
pub fn length_bound(rate: f64, m: usize, mode: CodecMode, kind: CodeKind) -> f64 {
    let m = m as f64;
    let per_word = match kind {
        CodeKind::ShannonSorted => 1.0,
        CodeKind::Fano => 2.0,
    };
    let si_loss = if mode.side_info() { 0.0 } else { m };
    rate + m * space_filling_loss() + si_loss + m * per_word
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub plant: PlantModel,
    pub rdf: RdfSolution,
    pub mode: CodecMode,
    pub kind: CodeKind,
    pub horizon: usize,
    pub seed: u64,
    pub trials: usize,
    /// Keep the per-step trace of trial 0.
    pub record_trace: bool,
}

impl LoopConfig {
    pub fn new(plant: PlantModel, rdf: RdfSolution, mode: CodecMode) -> Self {
        Self { plant, rdf, mode, kind: mode.default_kind(), horizon: 1000, seed: 0, trials: 1, record_trace: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.mode.time_invariant() && self.plant.state_dim() != 1 {
            return Err(Error::InvalidConfig(format!(
                "{} codecs are only defined for scalar plants (state dimension {})",
                self.mode,
                self.plant.state_dim()
            )));
        }
        if self.rdf.phat.nrows() != self.plant.state_dim() {
            return Err(Error::InvalidConfig("solution does not match plant dimension".into()));
        }
        Ok(())
    }
}

/// Per-step record in flat arrays (`x` is `horizon * m`, etc.).
#[derive(Debug, Clone, Default)]
pub struct LoopTrace {
    pub state_dim: usize,
    pub input_dim: usize,
    /// State before the step.
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub q: Vec<i64>,
    pub len: Vec<u32>,
    /// `x_{t+1}' Q x_{t+1} + u_t' R u_t`.
    pub cost: Vec<f64>,
    /// Concatenated codewords.
    pub stream: BitWriter,
}

impl LoopTrace {
    pub fn steps(&self) -> usize {
        self.len.len()
    }

    /// Codeword bits of step `t` as a `0`/`1` string.
    pub fn bits(&self, t: usize) -> String {
        let start: usize = self.len[..t].iter().map(|&l| l as usize).sum();
        let mut r = BitReader::at(self.stream.as_bytes(), self.stream.len(), start);
        (0..self.len[t]).map(|_| if r.read(1).unwrap() == 1 { '1' } else { '0' }).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let (m, p) = (self.state_dim, self.input_dim);
        let names = |prefix: &str, n: usize| -> Vec<String> {
            if n == 1 {
                vec![prefix.to_string()]
            } else {
                (0..n).map(|i| format!("{prefix}{i}")).collect()
            }
        };
        let mut header = vec!["t".to_string()];
        header.extend(names("x", m));
        header.extend(names("u", p));
        header.extend(names("q", m));
        header.push("len".into());
        header.push("cost".into());
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.steps() {
            write!(w, "{t}")?;
            for v in &self.x[t * m..(t + 1) * m] {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            for v in &self.u[t * p..(t + 1) * p] {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            for v in &self.q[t * m..(t + 1) * m] {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{}", self.len[t], fmt_f64(self.cost[t]))?;
        }
        Ok(())
    }
}

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub avg_cost: f64,
    pub avg_bits: f64,
    /// Average of `-log2` model probability of the sent symbols.
    pub avg_model_bits: f64,
    pub sync_ok: bool,
    /// Time average of each innovation component squared.
    pub innovation_second_moment: Vec<f64>,
    /// Lag 1..=10 autocorrelation of the first reconstruction-error component.
    pub recon_autocorr: Vec<f64>,
    pub recon_variance: f64,
    /// Batch-means standard error of `avg_cost`.
    pub cost_stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoopSummary {
    pub mode: CodecMode,
    pub code: &'static str,
    pub trials: usize,
    pub horizon: usize,
    pub avg_cost: f64,
    pub avg_bits: f64,
    pub avg_model_bits: f64,
    pub bound_bits: f64,
    pub rate_lower: f64,
    pub gamma: f64,
    /// `Tr(SW) + Tr(Theta Phat)`.
    pub expected_cost: f64,
    pub cost_stderr: f64,
    /// Average cost within the budget plus a 4-sigma Monte Carlo band.
    pub cost_pass: bool,
    pub bits_pass: bool,
    pub sync_ok: bool,
    pub per_trial: Vec<TrialSummary>,
}

pub fn kind_name(kind: CodeKind) -> &'static str {
    match kind {
        CodeKind::Fano => "fano",
        CodeKind::ShannonSorted => "shannon-sorted",
    }
}

/// Row-major dense matrix for allocation-free inner loops.
#[derive(Debug, Clone)]
struct Flat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Flat {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    /// `out = self * x`
    #[inline]
    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `out += self * x`
    #[inline]
    fn mul_add(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `x' self x`
    #[inline]
    fn quad(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            s += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    }
}

/// Symmetric PSD square root.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Filter state kept separately by each side of the channel.
#[derive(Debug, Clone)]
struct Filter {
    prior: Vec<f64>,
    post: Vec<f64>,
    u: Vec<f64>,
    qtilde: Vec<f64>,
}

impl Filter {
    fn new(m: usize, p: usize) -> Self {
        Self { prior: vec![0.0; m], post: vec![0.0; m], u: vec![0.0; p], qtilde: vec![0.0; m] }
    }

    /// Measurement update from received cells, then control and time update.
    fn step(&mut self, ctx: &Context, q: &[i64], d: &[f64]) {
        let m = self.prior.len();
        self.post.copy_from_slice(&self.prior);
        if let Some(ch) = &ctx.channel {
            for i in 0..m {
                self.qtilde[i] = q[i] as f64 * ch.delta - d[i];
            }
            ch.j.mul_add(&self.qtilde, &mut self.post);
        }
        ctx.k.mul(&self.post, &mut self.u);
        ctx.a.mul(&self.post, &mut self.prior);
        ctx.b.mul_add(&self.u, &mut self.prior);
    }

    fn same_bits(&self, other: &Filter) -> bool {
        let eq = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        eq(&self.prior, &other.prior) && eq(&self.post, &other.post) && eq(&self.u, &other.u)
    }
}

#[derive(Debug, Clone)]
struct ChannelCtx {
    c: Flat,
    j: Flat,
    delta: f64,
    /// Innovation covariance sequence inputs.
    rcl: DMatrix<f64>,
    lvl: DMatrix<f64>,
    cmat: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct Context {
    m: usize,
    p: usize,
    a: Flat,
    b: Flat,
    k: Flat,
    q: Flat,
    r: Flat,
    w_sqrt: Flat,
    x0_sqrt: Flat,
    x0: DMatrix<f64>,
    w: DMatrix<f64>,
    channel: Option<ChannelCtx>,
    mode: CodecMode,
    kind: CodeKind,
    invariant: Option<InvariantCodebooks>,
}

impl Context {
    fn new(cfg: &LoopConfig) -> Result<Self> {
        let plant = &cfg.plant;
        let channel = cfg.rdf.channel.as_ref().map(|g| ChannelCtx {
            c: Flat::from(&g.c),
            j: Flat::from(&g.j),
            delta: g.delta(),
            rcl: g.rcl.clone(),
            lvl: &g.l * g.l.transpose() * g.v,
            cmat: g.c.clone(),
        });
        let invariant = match (&cfg.rdf.channel, cfg.mode.time_invariant()) {
            (Some(_), true) => {
                let chain = ChainParams::from_solution(plant, &cfg.rdf)?;
                let grid = invariant_density_series(&chain, crate::invariant::DEFAULT_SERIES_TOL)?;
                Some(invariant_codebooks_with(&grid, &chain, cfg.kind))
            }
            _ => None,
        };
        Ok(Self {
            m: plant.state_dim(),
            p: plant.input_dim(),
            a: Flat::from(&plant.a),
            b: Flat::from(&plant.b),
            k: Flat::from(&cfg.rdf.control.k),
            q: Flat::from(&plant.q),
            r: Flat::from(&plant.r),
            w_sqrt: Flat::from(&psd_sqrt(&plant.w)),
            x0_sqrt: Flat::from(&psd_sqrt(&plant.x0)),
            x0: plant.x0.clone(),
            w: plant.w.clone(),
            channel,
            mode: cfg.mode,
            kind: cfg.kind,
            invariant,
        })
    }
}

/// Selects the codebook for each component at each step. Both sides call it
/// with the same public arguments (step covariance and dither), so one call
/// serves encoder and decoder alike.
struct CodecSelector {
    /// Prediction-error covariance under the fixed-gain filter.
    p: DMatrix<f64>,
    p_fixed: bool,
    cache: Vec<Option<(u64, Codebook, FinitePmf)>>,
}

impl CodecSelector {
    fn new(ctx: &Context) -> Self {
        Self { p: ctx.x0.clone(), p_fixed: false, cache: vec![None; ctx.m] }
    }

    fn sigma2(&self, ch: &ChannelCtx, i: usize) -> f64 {
        let ci = ch.cmat.row(i);
        (ci * &self.p * ci.transpose())[(0, 0)].max(0.0)
    }

    /// Returns the codebook and the model probability of `q` (for the
    /// ideal-length statistic; pass `None` to skip it).
    fn book<'a>(&'a mut self, ctx: &'a Context, i: usize, d: f64, scratch: &'a mut Option<Codebook>) -> (&'a Codebook, Option<FinitePmf>) {
        let ch = ctx.channel.as_ref().unwrap();
        match ctx.mode {
            CodecMode::TiNosi => {
                let inv = ctx.invariant.as_ref().unwrap();
                (&inv.marginal_book, None)
            }
            CodecMode::TiSi => {
                let pmf = ctx.invariant.as_ref().unwrap().conditional.pmf_given(d);
                *scratch = Some(Codebook::build(&pmf, ctx.kind));
                (scratch.as_ref().unwrap(), Some(pmf))
            }
            CodecMode::TvSi => {
                let pmf = gaussian_conditional_pmf(self.sigma2(ch, i), d, ch.delta);
                *scratch = Some(Codebook::build(&pmf, ctx.kind));
                (scratch.as_ref().unwrap(), Some(pmf))
            }
            CodecMode::TvNosi => {
                let s2 = self.sigma2(ch, i);
                let hit = matches!(&self.cache[i], Some((bits, _, _)) if *bits == s2.to_bits());
                if !hit {
                    let pmf = gaussian_marginal_pmf(s2, ch.delta);
                    self.cache[i] = Some((s2.to_bits(), Codebook::build(&pmf, ctx.kind), pmf));
                }
                let (_, book, _) = self.cache[i].as_ref().unwrap();
                (book, None)
            }
        }
    }

    fn marginal_prob(&self, ctx: &Context, i: usize, q: i64) -> f64 {
        match ctx.mode {
            CodecMode::TiNosi => model_prob(&ctx.invariant.as_ref().unwrap().marginal_pmf, q),
            CodecMode::TvNosi => model_prob(&self.cache[i].as_ref().unwrap().2, q),
            _ => unreachable!(),
        }
    }

    fn advance(&mut self, ctx: &Context) {
        if self.p_fixed || ctx.mode.time_invariant() {
            return;
        }
        let ch = ctx.channel.as_ref().unwrap();
        let next = &ch.rcl * &self.p * ch.rcl.transpose() + &ch.lvl + &ctx.w;
        let next = (&next + next.transpose()) * 0.5;
        if next == self.p {
            self.p_fixed = true;
        }
        self.p = next;
    }
}

fn model_prob(pmf: &FinitePmf, q: i64) -> f64 {
    let p = pmf.prob(q);
    if p > 0.0 {
        p
    } else {
        pmf.escape_mass()
    }
}

const COST_BATCHES: usize = 50;

fn run_trial(ctx: &Context, horizon: usize, seed: u64, record: bool) -> Result<(TrialSummary, Option<LoopTrace>)> {
    let (m, p) = (ctx.m, ctx.p);
    let mut noise = noise_rng(seed);
    let mut gauss = |out: &mut [f64], sqrt: &Flat, tmp: &mut [f64]| {
        for v in tmp.iter_mut() {
            *v = StandardNormal.sample(&mut noise);
        }
        sqrt.mul(tmp, out);
    };
    let mut tmp = vec![0.0; m];
    let mut x = vec![0.0; m];
    gauss(&mut x, &ctx.x0_sqrt, &mut tmp);
    let mut w = vec![0.0; m];
    let mut x_next = vec![0.0; m];

    let delta = ctx.channel.as_ref().map(|c| c.delta).unwrap_or(1.0);
    let dither = DitherStream::new(seed, delta, m);
    let mut cursor = dither.cursor(0);
    let mut d = vec![0.0; m];
    let mut z = vec![0.0; m];
    let mut q = vec![0i64; m];
    let mut q_dec = vec![0i64; m];

    let mut enc = Filter::new(m, p);
    let mut dec = Filter::new(m, p);
    let mut selector = ctx.channel.as_ref().map(|_| CodecSelector::new(ctx));
    let mut stream = BitWriter::new();
    let mut read_pos = 0usize;
    let mut scratch: Option<Codebook> = None;

    let mut cost_sum = KahanSum::new();
    let mut bits_total: u64 = 0;
    let mut model_bits = KahanSum::new();
    let mut innov2 = vec![KahanSum::new(); m];
    let mut recon = Vec::with_capacity(if ctx.channel.is_some() { horizon } else { 0 });
    let batch_len = (horizon / COST_BATCHES).max(1);
    let mut batch = KahanSum::new();
    let mut batch_means = Vec::with_capacity(COST_BATCHES + 1);

    let mut trace = record.then(|| LoopTrace {
        state_dim: m,
        input_dim: p,
        x: Vec::with_capacity(horizon * m),
        u: Vec::with_capacity(horizon * p),
        q: Vec::with_capacity(horizon * m),
        len: Vec::with_capacity(horizon),
        cost: Vec::with_capacity(horizon),
        stream: BitWriter::new(),
    });

    for t in 0..horizon {
        let mut len_t = 0u32;
        if let (Some(ch), Some(sel)) = (ctx.channel.as_ref(), selector.as_mut()) {
            cursor.next_into(&mut d);
            // encoder: centred measurement of its own prediction error
            for i in 0..m {
                tmp[i] = x[i] - enc.prior[i];
            }
            ch.c.mul(&tmp, &mut z);
            for i in 0..m {
                q[i] = quantize_scalar(z[i] + d[i], ch.delta);
                innov2[i].add(z[i] * z[i]);
            }
            recon.push(q[0] as f64 * ch.delta - d[0] - z[0]);
            for i in 0..m {
                let (book, pmf) = sel.book(ctx, i, d[i], &mut scratch);
                len_t += book.encode_into(q[i], &mut stream)?;
                let mut r = BitReader::at(stream.as_bytes(), stream.len(), read_pos);
                q_dec[i] = book.decode(&mut r).map_err(|_| Error::SyncLoss(t))?;
                read_pos = r.position();
                let prob = match pmf {
                    Some(pmf) => model_prob(&pmf, q[i]),
                    None => sel.marginal_prob(ctx, i, q[i]),
                };
                model_bits.add(-prob.log2());
            }
            if q_dec != q || read_pos != stream.len() {
                return Err(Error::SyncLoss(t));
            }
            sel.advance(ctx);
        }
        enc.step(ctx, &q, &d);
        dec.step(ctx, &q_dec, &d);
        if !enc.same_bits(&dec) {
            return Err(Error::SyncLoss(t));
        }

        gauss(&mut w, &ctx.w_sqrt, &mut tmp);
        ctx.a.mul(&x, &mut x_next);
        ctx.b.mul_add(&dec.u, &mut x_next);
        for i in 0..m {
            x_next[i] += w[i];
        }
        let cost = ctx.q.quad(&x_next) + ctx.r.quad(&dec.u);
        cost_sum.add(cost);
        batch.add(cost);
        if (t + 1) % batch_len == 0 {
            batch_means.push(batch.value() / batch_len as f64);
            batch = KahanSum::new();
        }
        bits_total += len_t as u64;

        if let Some(tr) = trace.as_mut() {
            tr.x.extend_from_slice(&x);
            tr.u.extend_from_slice(&dec.u);
            tr.q.extend_from_slice(if ctx.channel.is_some() { &q } else { &q_dec });
            tr.len.push(len_t);
            tr.cost.push(cost);
        }
        std::mem::swap(&mut x, &mut x_next);

        // keep the live stream short when no trace is kept
        if trace.is_none() && stream.len() >= 1 << 16 && read_pos == stream.len() {
            stream = BitWriter::new();
            read_pos = 0;
        }
    }
    if let Some(tr) = trace.as_mut() {
        tr.stream = stream;
    }

    let n = horizon as f64;
    let cost_stderr = if batch_means.len() >= 2 {
        crate::stats::variance(&batch_means).sqrt() / (batch_means.len() as f64).sqrt()
    } else {
        f64::NAN
    };
    let summary = TrialSummary {
        seed,
        avg_cost: cost_sum.value() / n,
        avg_bits: bits_total as f64 / n,
        avg_model_bits: model_bits.value() / n,
        sync_ok: true,
        innovation_second_moment: innov2.iter().map(|s| s.value() / n).collect(),
        recon_autocorr: if recon.len() > 10 { autocorrelation(&recon, 10) } else { Vec::new() },
        recon_variance: if recon.len() > 1 { crate::stats::variance(&recon) } else { f64::NAN },
        cost_stderr,
    };
    Ok((summary, trace))
}

/// Runs `cfg.trials` independent loops (seeds `seed + i`).
pub fn run_loop(cfg: &LoopConfig) -> Result<(LoopSummary, Option<LoopTrace>)> {
    cfg.validate()?;
    let ctx = Context::new(cfg)?;
    let results: Vec<Result<(TrialSummary, Option<LoopTrace>)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| run_trial(&ctx, cfg.horizon, cfg.seed.wrapping_add(i as u64), cfg.record_trace && i == 0))
        .collect();
    let mut per_trial = Vec::with_capacity(cfg.trials);
    let mut trace = None;
    for r in results {
        let (s, t) = r?;
        if t.is_some() {
            trace = t;
        }
        per_trial.push(s);
    }
    let k = per_trial.len() as f64;
    let avg = |f: fn(&TrialSummary) -> f64| per_trial.iter().map(f).collect::<KahanSum>().value() / k;
    let avg_cost = avg(|s| s.avg_cost);
    let avg_bits = avg(|s| s.avg_bits);
    let avg_model_bits = avg(|s| s.avg_model_bits);
    let cost_stderr = if per_trial.len() >= 2 {
        let costs: Vec<f64> = per_trial.iter().map(|s| s.avg_cost).collect();
        crate::stats::variance(&costs).sqrt() / k.sqrt()
    } else {
        per_trial[0].cost_stderr
    };
    let rate = cfg.rdf.rate_bits;
    let (bound_bits, rate_lower) = if cfg.rdf.channel.is_some() {
        (length_bound(rate, ctx.m, cfg.mode, cfg.kind), rate)
    } else {
        (0.0, 0.0)
    };
    let summary = LoopSummary {
        mode: cfg.mode,
        code: kind_name(cfg.kind),
        trials: cfg.trials,
        horizon: cfg.horizon,
        avg_cost,
        avg_bits,
        avg_model_bits,
        bound_bits,
        rate_lower,
        gamma: cfg.plant.gamma,
        expected_cost: cfg.rdf.control_cost(),
        cost_stderr,
        cost_pass: avg_cost <= cfg.plant.gamma + 4.0 * cost_stderr,
        bits_pass: avg_bits <= bound_bits,
        sync_ok: per_trial.iter().all(|s| s.sync_ok),
        per_trial,
    };
    Ok((summary, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdf::{solve_rdf_siso, DEFAULT_V};

    fn ref1() -> (PlantModel, RdfSolution) {
        let plant = PlantModel::scalar(2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.6068884).unwrap();
        let rdf = solve_rdf_siso(&plant, DEFAULT_V).unwrap();
        (plant, rdf)
    }

    #[test]
    fn space_filling_constant() {
        // h(N(0, 1/12)) - h(U[-1/2, 1/2)) with h(U) = 0
        let gauss = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E / 12.0).log2();
        assert_eq!(space_filling_loss(), gauss);
        assert!((space_filling_loss() - 0.2546).abs() < 5e-5);
    }

    #[test]
    fn conditional_pmf_normalised_and_symmetric() {
        let delta = 12f64.sqrt();
        let p = gaussian_conditional_pmf(13.0, 0.0, delta);
        for k in 1..5 {
            assert!((p.prob(k) - p.prob(-k)).abs() < 1e-15);
        }
        for d in [-delta / 2.0, -0.3, 0.0, 1.1, delta / 2.0 - 1e-9] {
            let p = gaussian_conditional_pmf(13.0, d, delta);
            let total: f64 = p.probs().iter().sum::<f64>() + p.escape_mass();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(p.escape_mass() <= 2f64.powi(-40));
        }
    }

    #[test]
    fn conditional_pmf_concentrates() {
        let p = gaussian_conditional_pmf(1e-10, 0.0, 1.0);
        assert!(p.prob(0) > 1.0 - 1e-12);
        let p = gaussian_conditional_pmf(0.0, 0.3, 1.0);
        assert_eq!(p.prob(0), 1.0);
    }

    #[test]
    fn marginal_pmf_matches_numeric_average() {
        let (s2, delta) = (2.0, 1.3);
        let p = gaussian_marginal_pmf(s2, delta);
        let n = 4000;
        for k in [-3i64, 0, 1, 4] {
            let avg: f64 = (0..n)
                .map(|j| {
                    let d = -delta / 2.0 + (j as f64 + 0.5) * delta / n as f64;
                    gaussian_conditional_pmf(s2, d, delta).prob(k)
                })
                .sum::<f64>()
                / n as f64;
            assert!((p.prob(k) - avg).abs() < 1e-7, "k={k}");
            assert!((p.prob(k) - p.prob(-k)).abs() < 1e-15);
        }
    }

    #[test]
    fn coarse_quantizer_single_cell() {
        // side cells carry about phi(0)/delta each, vanishing as delta grows
        let p = gaussian_marginal_pmf(1.0, 1e6);
        assert!(p.prob(0) > 1.0 - 1e-6);
        assert!(p.entropy_bits() < 1e-4);
        let q = gaussian_marginal_pmf(1.0, 1e12);
        assert!(q.entropy_bits() < 1e-9);
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in CodecMode::ALL {
            assert_eq!(m.as_str().parse::<CodecMode>().unwrap(), m);
        }
        assert!("tv".parse::<CodecMode>().is_err());
    }

    #[test]
    fn ref1_bounds() {
        let r = 0.5 * 14f64.log2();
        let b = |mode| length_bound(r, 1, mode, mode.default_kind());
        assert!((b(CodecMode::TvNosi) - 4.1583).abs() < 1e-4);
        assert!((b(CodecMode::TvSi) - 3.1583).abs() < 1e-4);
        assert!((b(CodecMode::TiNosi) - 4.1583).abs() < 1e-4);
        assert!((b(CodecMode::TiSi) - 4.1583).abs() < 1e-4);
    }

    #[test]
    fn short_loop_stays_in_sync() {
        let (plant, rdf) = ref1();
        for mode in CodecMode::ALL {
            let mut cfg = LoopConfig::new(plant.clone(), rdf.clone(), mode);
            cfg.horizon = 2000;
            cfg.seed = 3;
            cfg.record_trace = true;
            let (s, tr) = run_loop(&cfg).unwrap();
            assert!(s.sync_ok);
            let tr = tr.unwrap();
            assert_eq!(tr.steps(), 2000);
            assert_eq!(tr.len.iter().map(|&l| l as usize).sum::<usize>(), tr.stream.len());
            assert_eq!(tr.bits(0).len(), tr.len[0] as usize);
        }
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let (plant, rdf) = ref1();
        let mut cfg = LoopConfig::new(plant, rdf, CodecMode::TvSi);
        cfg.horizon = 500;
        cfg.record_trace = true;
        let (_, a) = run_loop(&cfg).unwrap();
        let (_, b) = run_loop(&cfg).unwrap();
        let (a, b) = (a.unwrap(), b.unwrap());
        assert_eq!(a.stream, b.stream);
        assert_eq!(a.cost, b.cost);
    }

    #[test]
    fn zero_rate_sends_nothing() {
        let plant = PlantModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 100.0).unwrap();
        let rdf = solve_rdf_siso(&plant, DEFAULT_V).unwrap();
        assert!(rdf.channel.is_none());
        let mut cfg = LoopConfig::new(plant, rdf, CodecMode::TvNosi);
        cfg.horizon = 20_000;
        let (s, _) = run_loop(&cfg).unwrap();
        assert_eq!(s.avg_bits, 0.0);
        // x_{t+1} = w_t, so the stage cost averages Tr(QW) = 1
        assert!((s.avg_cost - 1.0).abs() < 0.05);
    }

    #[test]
    fn csv_header() {
        let (plant, rdf) = ref1();
        let mut cfg = LoopConfig::new(plant, rdf, CodecMode::TvNosi);
        cfg.horizon = 3;
        cfg.record_trace = true;
        let (_, tr) = run_loop(&cfg).unwrap();
        let mut out = Vec::new();
        tr.unwrap().write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x,u,q,len,cost");
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn ti_modes_reject_mimo() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.5]);
        let i2 = DMatrix::identity(2, 2);
        let plant = PlantModel::new(a, i2.clone(), i2.clone(), i2.clone(), i2.clone(), i2.clone(), 10.0).unwrap();
        let rdf = crate::rdf::solve_rdf_mimo(&plant, DEFAULT_V).unwrap();
        let cfg = LoopConfig::new(plant, rdf, CodecMode::TiNosi);
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
