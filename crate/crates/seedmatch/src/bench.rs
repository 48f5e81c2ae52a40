//! Analytic cost accounting and the wall-clock benchmark harness.
//!
//! [`CostModel`] gives exact closed-form multiply-add and attention-memory
//! figures for both network variants, validated elsewhere against the
//! eager engine's instrumented counter. [`bench_run`] measures the same
//! two variants end to end — median of repeated timed forwards, with and
//! without the Sinkhorn phase — and writes a [`BenchReport`] that
//! serializes to CSV (the rows) and JSON (rows plus config echo).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assignment::sinkhorn_log_generic;
use crate::baseline::{dense_block_generic, DenseLayerWeights};
use crate::error::{Error, Result};
use crate::seeding::{default_seed_count, KeypointSet};
use crate::sgnn::net::{embed_generic, AttnShape, ForwardConfig, PhaseTimings};
use crate::sgnn::{forward, ModelShape, ModelWeights};
use crate::tensorcore::engine::{Eager, Engine};
use crate::tensorcore::matrix::Matrix;
use crate::training::trainer::splitmix64;
use crate::training::{synth_pair, SynthConfig};

pub mod alloc_gauge;

/// Current schema of [`BenchReport`] serializations.
pub const BENCH_SCHEMA_VERSION: u32 = 1;

/// Exact closed-form cost accounting for one pair size.
///
/// Every figure counts matmul multiply-adds (the same quantity the eager
/// engine instruments), so the closed forms can be checked against a real
/// forward pass to the last operation. FLOPs are 2× multiply-adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    /// Keypoints in image A.
    pub n: usize,
    /// Keypoints in image B.
    pub m: usize,
    /// Seeds per stage.
    pub k: usize,
    /// Feature width.
    pub d: usize,
    /// Attention heads. Multi-head splitting never changes matmul counts
    /// (h slices of p×(d/h)×s sum to p×d×s), but the field is kept so a
    /// model is a complete description of a benchmarked configuration.
    pub heads: usize,
    /// Total processing units of the seeded variant (both stages).
    pub seeded_units: usize,
    /// Layers of the dense variant.
    pub dense_layers: usize,
}

/// Multiply-adds of the seeded forward, by term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededMadds {
    /// Positional-embedding MLPs: (n+m)(d² + 2d).
    pub embed: u128,
    /// Q/K/V projections over all attention sites (p + 2s rows at d²
    /// each): per unit, pooling (k+2n) + (k+2m), filtering 4·3k,
    /// unpooling (n+2k) + (m+2k).
    pub projections: u128,
    /// Pooling score+apply products: 2·k·n·d + 2·k·m·d per unit.
    pub pool_scores: u128,
    /// Filtering score+apply products: 4 sites × 2k²d per unit.
    pub filter_scores: u128,
    /// Unpooling score+apply products: 2·n·k·d + 2·m·k·d per unit.
    pub unpool_scores: u128,
    /// Residual-attention MLPs 6·rows·d² per site, the fusion MLP 8kd²,
    /// and the CN branch 4kd² + kd, per unit.
    pub mlps: u128,
    /// Score-matrix correlations F_A F_Bᵀ: n·m·d per stage, two stages.
    pub correlations: u128,
}

impl SeededMadds {
    pub fn total(&self) -> u128 {
        self.embed
            + self.projections
            + self.pool_scores
            + self.filter_scores
            + self.unpool_scores
            + self.mlps
            + self.correlations
    }

    /// The attention score terms alone (the part that is O(nk) here and
    /// O(n²) densely).
    pub fn scores(&self) -> u128 {
        self.pool_scores + self.filter_scores + self.unpool_scores
    }
}

/// Multiply-adds of the dense forward, by term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseMadds {
    /// Positional-embedding MLPs: (n+m)(d² + 2d).
    pub embed: u128,
    /// Q/K/V projections: per layer, self (3n+3m)d², cross (3n+3m)d².
    pub projections: u128,
    /// Self-attention score+apply products: 2n²d + 2m²d per layer.
    pub self_scores: u128,
    /// Cross-attention score+apply products: 2·2·n·m·d per layer.
    pub cross_scores: u128,
    /// Residual-attention MLPs: 6·rows·d² per site.
    pub mlps: u128,
    /// Final correlation F_A F_Bᵀ: n·m·d (one assignment stage).
    pub correlation: u128,
}

impl DenseMadds {
    pub fn total(&self) -> u128 {
        self.embed + self.projections + self.self_scores + self.cross_scores + self.mlps + self.correlation
    }

    pub fn scores(&self) -> u128 {
        self.self_scores + self.cross_scores
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0
            || self.m == 0
            || self.k == 0
            || self.d == 0
            || self.heads == 0
            || self.seeded_units == 0
            || self.dense_layers == 0
        {
            return Err(Error::Config(format!("cost model needs positive counts, got {self:?}")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide feature width {}",
                self.heads, self.d
            )));
        }
        Ok(())
    }

    /// Seeded-variant multiply-adds, term by term. One attention site with
    /// p query rows and s source rows costs pd² (Q) + 2sd² (K, V) +
    /// 2psd (scores + apply) + 6pd² (residual MLP on p×2d).
    pub fn seeded_madds(&self) -> SeededMadds {
        let (n, m, k, d) = (self.n as u128, self.m as u128, self.k as u128, self.d as u128);
        let u = self.seeded_units as u128;
        let d2 = d * d;
        SeededMadds {
            embed: (n + m) * (d2 + 2 * d),
            // Pooling queries k over sources n/m, filtering 4 sites of k
            // over k, unpooling queries n/m over sources k.
            projections: u * d2 * ((k + 2 * n) + (k + 2 * m) + 12 * k + (n + 2 * k) + (m + 2 * k)),
            pool_scores: u * 2 * k * (n + m) * d,
            filter_scores: u * 8 * k * k * d,
            unpool_scores: u * 2 * k * (n + m) * d,
            // Six residual MLPs (pool k,k; self k,k; cross k,k; unpool n,m)
            // at 6·rows·d², the fusion MLP 8kd², the CN branch 4kd² + kd.
            mlps: u * (d2 * (6 * (2 * k) + 6 * (2 * k) + 6 * (2 * k) + 6 * (n + m) + 8 * k + 4 * k) + k * d),
            correlations: 2 * n * m * d,
        }
    }

    /// Dense-variant multiply-adds, term by term (same per-site cost
    /// formula; the graph is all-to-all instead of seed-bottlenecked).
    pub fn dense_madds(&self) -> DenseMadds {
        let (n, m, d) = (self.n as u128, self.m as u128, self.d as u128);
        let l = self.dense_layers as u128;
        let d2 = d * d;
        DenseMadds {
            embed: (n + m) * (d2 + 2 * d),
            projections: l * d2 * 6 * (n + m),
            self_scores: l * 2 * (n * n + m * m) * d,
            cross_scores: l * 4 * n * m * d,
            mlps: l * d2 * 12 * (n + m),
            correlation: n * m * d,
        }
    }

    /// Total FLOPs of the seeded forward (2 per multiply-add).
    pub fn flops_seeded(&self) -> u128 {
        2 * self.seeded_madds().total()
    }

    /// Total FLOPs of the dense forward (2 per multiply-add).
    pub fn flops_dense(&self) -> u128 {
        2 * self.dense_madds().total()
    }

    /// Attention score-matrix entries computed per seeded processing unit:
    /// pooling k·n + k·m, filtering 4·k², unpooling n·k + m·k — the
    /// Θ(nk + mk + k²) footprint. Heads run sequentially, so the largest
    /// single matrix alive at once is max(kn, km, k²).
    pub fn score_entries_seeded_per_unit(&self) -> u128 {
        let (n, m, k) = (self.n as u128, self.m as u128, self.k as u128);
        2 * k * (n + m) + 4 * k * k
    }

    /// Attention score-matrix entries per dense layer: self n² + m²,
    /// cross 2·n·m — the Θ(n² + m² + nm) footprint.
    pub fn score_entries_dense_per_layer(&self) -> u128 {
        let (n, m) = (self.n as u128, self.m as u128);
        n * n + m * m + 2 * n * m
    }

    /// The per-unit score entries as f64 bytes.
    pub fn score_bytes_seeded_per_unit(&self) -> u128 {
        8 * self.score_entries_seeded_per_unit()
    }

    /// The per-layer score entries as f64 bytes.
    pub fn score_bytes_dense_per_layer(&self) -> u128 {
        8 * self.score_entries_dense_per_layer()
    }
}

/// Total FLOPs of a seeded forward (free-function form of
/// [`CostModel::flops_seeded`]; `blocks` counts processing units across
/// both stages).
pub fn flops_seeded(n: usize, m: usize, k: usize, d: usize, h: usize, blocks: usize) -> Result<u128> {
    let model = CostModel { n, m, k, d, heads: h, seeded_units: blocks, dense_layers: 1 };
    model.validate()?;
    Ok(model.flops_seeded())
}

/// Total FLOPs of a dense forward of `blocks` layers.
pub fn flops_dense(n: usize, m: usize, d: usize, h: usize, blocks: usize) -> Result<u128> {
    let model = CostModel { n, m, k: 1, d, heads: h, seeded_units: 1, dense_layers: blocks };
    model.validate()?;
    Ok(model.flops_dense())
}

/// How many seeds a benchmark configuration requests per pair size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// The same k at every n.
    Fixed(usize),
    /// The pipeline's default count: 128 seeds per 2000 keypoints,
    /// floored at 8.
    Proportional,
}

impl SeedPolicy {
    pub fn k_for(&self, n: usize, m: usize) -> usize {
        match self {
            SeedPolicy::Fixed(k) => *k,
            SeedPolicy::Proportional => default_seed_count(n.min(m)),
        }
    }
}

/// Benchmark sweep configuration. `n_values` are pair sizes (m = n).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_values: Vec<usize>,
    pub seed_policy: SeedPolicy,
    pub d: usize,
    pub heads: usize,
    pub initial_units: usize,
    pub refine_units: usize,
    pub dense_layers: usize,
    /// Timed runs per variant; the median is only meaningful from 5 up.
    pub runs: usize,
    /// Untimed warmup runs per variant.
    pub warmup: usize,
    pub sinkhorn_reseed: usize,
    pub sinkhorn_final: usize,
    /// Descriptor noise of the synthetic benchmark pairs.
    pub desc_noise: f64,
    /// Skip (with annotation) any variant whose analytic score bytes
    /// exceed this.
    pub memory_budget_bytes: Option<u64>,
    /// Pin the process to one logical core during timed runs (Linux;
    /// best-effort elsewhere).
    pub pin_core: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_values: vec![512, 1024, 2048, 4096],
            seed_policy: SeedPolicy::Fixed(128),
            d: 64,
            heads: 4,
            initial_units: 6,
            refine_units: 3,
            dense_layers: 6,
            runs: 5,
            warmup: 1,
            sinkhorn_reseed: 10,
            sinkhorn_final: 100,
            desc_noise: 0.02,
            memory_budget_bytes: None,
            pin_core: true,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::Config("bench: n_values must be non-empty and positive".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("bench: runs must be >= 1".into()));
        }
        if self.sinkhorn_reseed == 0 || self.sinkhorn_final == 0 {
            return Err(Error::Config("bench: sinkhorn iteration counts must be >= 1".into()));
        }
        if !(self.desc_noise.is_finite() && self.desc_noise >= 0.0) {
            return Err(Error::Config(format!(
                "bench: desc_noise must be finite and >= 0, got {}",
                self.desc_noise
            )));
        }
        if let SeedPolicy::Fixed(0) = self.seed_policy {
            return Err(Error::Config("bench: fixed seed count must be >= 1".into()));
        }
        // Shape constraints (d, heads, unit counts) ride on ModelShape.
        self.model_shape().validate()
    }

    fn model_shape(&self) -> ModelShape {
        ModelShape {
            d: self.d,
            heads: self.heads,
            initial_units: self.initial_units,
            refine_units: self.refine_units,
        }
    }

    fn cost_model(&self, n: usize, m: usize, k: usize) -> CostModel {
        CostModel {
            n,
            m,
            k,
            d: self.d,
            heads: self.heads,
            seeded_units: self.initial_units + self.refine_units,
            dense_layers: self.dense_layers,
        }
    }
}

/// Which arm a report row measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Seeded,
    Dense,
}

/// One measured configuration. Analytic columns are exact functions of
/// (n, m, k, d, units); timing columns and `peak_alloc_bytes` vary run to
/// run and machine to machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub variant: Variant,
    pub runs: usize,
    pub analytic_flops: u64,
    /// Attention score entries per unit (seeded) / per layer (dense).
    pub score_entries: u64,
    pub score_bytes: u64,
    /// Median wall time of one full forward, seconds.
    pub median_s: f64,
    /// max − min over the timed runs, seconds.
    pub spread_s: f64,
    /// Median wall time with the Sinkhorn phase subtracted.
    pub median_excl_sinkhorn_s: f64,
    pub spread_excl_sinkhorn_s: f64,
    /// Allocator high-water mark across the timed runs, when the counting
    /// allocator is installed (see [`alloc_gauge`]).
    pub peak_alloc_bytes: Option<u64>,
    /// Set when the configuration was skipped (memory budget), with the
    /// reason; timed columns are zero then.
    pub skipped: Option<String>,
}

/// Output of [`bench_run`]: the config echo plus one row per
/// (pair size, variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: BenchReport = serde_json::from_str(s)?;
        if report.schema_version != BENCH_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported bench report schema {}, want {BENCH_SCHEMA_VERSION}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// The rows as a CSV table (header + one line per row).
    pub fn rows_to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(format!("bench csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("bench csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("bench csv: {e}")))
    }

    /// Parses rows written by [`BenchReport::rows_to_csv`].
    pub fn rows_from_csv(s: &str) -> Result<Vec<BenchRow>> {
        let mut r = csv::Reader::from_reader(s.as_bytes());
        let mut rows = Vec::new();
        for record in r.deserialize() {
            rows.push(record.map_err(|e| Error::Format(format!("bench csv: {e}")))?);
        }
        Ok(rows)
    }
}

/// Result of one dense-arm forward: embedding, `layers` dense blocks, one
/// correlation + dustbin, and a Sinkhorn assignment.
pub struct DenseForwardOutput {
    /// Log-domain assignment (n+1)×(m+1).
    pub log_m: Matrix,
    pub timings: PhaseTimings,
    pub attn_shapes: Vec<AttnShape>,
    /// Matmul multiply-adds spent (cost-model validation).
    pub madds: u128,
}

/// Runs the dense comparison pipeline eagerly. The embedding MLP and
/// dustbin score come from `model`, so both benchmark arms share those
/// costs exactly; the layers supply the attention weights.
pub fn dense_forward(
    a: &KeypointSet,
    b: &KeypointSet,
    model: &ModelWeights,
    layers: &[DenseLayerWeights],
    sinkhorn_iters: usize,
) -> Result<DenseForwardOutput> {
    if layers.is_empty() {
        return Err(Error::Config("dense forward needs at least one layer".into()));
    }
    if sinkhorn_iters == 0 {
        return Err(Error::Config("sinkhorn iteration count must be >= 1".into()));
    }
    let d = model.shape.d;
    if a.descriptor_width() != d || b.descriptor_width() != d {
        return Err(Error::Config(format!(
            "descriptor width {}/{} does not match model feature width {d}",
            a.descriptor_width(),
            b.descriptor_width()
        )));
    }
    if let Some(layer) = layers.iter().find(|l| l.d != d) {
        return Err(Error::Config(format!(
            "dense layer width {} does not match model feature width {d}",
            layer.d
        )));
    }

    let mut timings = PhaseTimings::default();
    let mut madds: u128 = 0;
    let mut log = Vec::new();

    let t = Instant::now();
    let (mut f_a, mut f_b) = {
        let mut eng = Eager::new(&model.params);
        let fa = embed_generic(&mut eng, &model.layout.embed, a);
        let fb = embed_generic(&mut eng, &model.layout.embed, b);
        madds += eng.madds;
        (fa, fb)
    };
    for layer in layers {
        let mut eng = Eager::new(&layer.params);
        let (na, nb) = dense_block_generic(&mut eng, layer, &f_a, &f_b, true, &mut log);
        f_a = na;
        f_b = nb;
        madds += eng.madds;
    }
    let mut eng = Eager::new(&model.params);
    let f_b_t = eng.transpose(&f_b);
    let corr = eng.matmul(&f_a, &f_b_t);
    let z = eng.param(model.layout.z);
    let c_hat = eng.augment_dustbin(&corr, &z);
    timings.network += t.elapsed().as_secs_f64();

    let t = Instant::now();
    let log_m = sinkhorn_log_generic(&mut eng, &c_hat, sinkhorn_iters);
    timings.sinkhorn += t.elapsed().as_secs_f64();
    madds += eng.madds;

    Ok(DenseForwardOutput { log_m, timings, attn_shapes: log, madds })
}

/// Median of an unsorted sample (mean of the middle two when even).
fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

fn spread(samples: &[f64]) -> f64 {
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// (total seconds, sinkhorn seconds) of one timed forward.
type TimedRun = (f64, f64);

fn skipped_row(n: usize, k: usize, variant: Variant, cost: &CostModel, reason: String) -> BenchRow {
    let (flops, entries, bytes) = analytic_columns(variant, cost);
    BenchRow {
        n,
        m: n,
        k,
        variant,
        runs: 0,
        analytic_flops: flops,
        score_entries: entries,
        score_bytes: bytes,
        median_s: 0.0,
        spread_s: 0.0,
        median_excl_sinkhorn_s: 0.0,
        spread_excl_sinkhorn_s: 0.0,
        peak_alloc_bytes: None,
        skipped: Some(reason),
    }
}

fn analytic_columns(variant: Variant, cost: &CostModel) -> (u64, u64, u64) {
    let narrow = |x: u128| u64::try_from(x).expect("analytic figure fits u64");
    match variant {
        Variant::Seeded => (
            narrow(cost.flops_seeded()),
            narrow(cost.score_entries_seeded_per_unit()),
            narrow(cost.score_bytes_seeded_per_unit()),
        ),
        Variant::Dense => (
            narrow(cost.flops_dense()),
            narrow(cost.score_entries_dense_per_layer()),
            narrow(cost.score_bytes_dense_per_layer()),
        ),
    }
}

/// Runs the configured sweep: per pair size, warmup + `runs` timed
/// forwards of the seeded and dense variants on identical data, one
/// report row each. A variant whose analytic score bytes exceed the
/// memory budget is recorded as skipped, not failed.
pub fn bench_run(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let _pin = config.pin_core.then(PinGuard::engage);

    let shape = config.model_shape();
    let model = ModelWeights::new(shape, config.seed)?;
    let layers: Vec<DenseLayerWeights> = (0..config.dense_layers)
        .map(|i| DenseLayerWeights::new(config.d, config.heads, splitmix64(config.seed, 0x6a3e + i as u64)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(config.n_values.len() * 2);
    for &n in &config.n_values {
        let k = config.seed_policy.k_for(n, n);
        let cost = config.cost_model(n, n, k);
        cost.validate()?;

        let synth = SynthConfig {
            n_points: n,
            descriptor_dim: config.d,
            overlap: 1.0,
            desc_noise: config.desc_noise,
            seed: splitmix64(config.seed, n as u64),
            ..SynthConfig::default()
        };
        let (a, b, _) = synth_pair(&synth)?;
        let fwd = ForwardConfig {
            seed_count: Some(k),
            sinkhorn_reseed: config.sinkhorn_reseed,
            sinkhorn_final: config.sinkhorn_final,
            ..ForwardConfig::default()
        };

        for variant in [Variant::Seeded, Variant::Dense] {
            let bytes = match variant {
                Variant::Seeded => cost.score_bytes_seeded_per_unit(),
                Variant::Dense => cost.score_bytes_dense_per_layer(),
            };
            if let Some(budget) = config.memory_budget_bytes {
                if bytes > budget as u128 {
                    rows.push(skipped_row(
                        n,
                        k,
                        variant,
                        &cost,
                        format!("analytic score bytes {bytes} exceed budget {budget}"),
                    ));
                    continue;
                }
            }

            let run_one = || -> Result<TimedRun> {
                let t = Instant::now();
                let sinkhorn = match variant {
                    Variant::Seeded => forward(&a, &b, &model, &fwd)?.timings.sinkhorn,
                    Variant::Dense => {
                        dense_forward(&a, &b, &model, &layers, config.sinkhorn_final)?.timings.sinkhorn
                    }
                };
                Ok((t.elapsed().as_secs_f64(), sinkhorn))
            };

            for _ in 0..config.warmup {
                run_one()?;
            }
            alloc_gauge::reset_peak();
            let mut totals = Vec::with_capacity(config.runs);
            let mut excluded = Vec::with_capacity(config.runs);
            for _ in 0..config.runs {
                let (total, sinkhorn) = run_one()?;
                totals.push(total);
                excluded.push(total - sinkhorn);
            }
            let peak_alloc_bytes = alloc_gauge::peak_bytes();

            let (flops, entries, bytes) = analytic_columns(variant, &cost);
            rows.push(BenchRow {
                n,
                m: n,
                k,
                variant,
                runs: config.runs,
                analytic_flops: flops,
                score_entries: entries,
                score_bytes: bytes,
                median_s: median(&totals),
                spread_s: spread(&totals),
                median_excl_sinkhorn_s: median(&excluded),
                spread_excl_sinkhorn_s: spread(&excluded),
                peak_alloc_bytes,
                skipped: None,
            });
        }
    }

    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        config: config.clone(),
        rows,
    })
}

/// Pins the process to the first allowed logical core for the guard's
/// lifetime, restoring the previous affinity on drop. Stabilizes timing
/// medians against migration; best-effort (`None` when unsupported).
#[cfg(target_os = "linux")]
struct PinGuard {
    old: libc::cpu_set_t,
}

#[cfg(target_os = "linux")]
impl PinGuard {
    fn engage() -> Option<Self> {
        let set_size = std::mem::size_of::<libc::cpu_set_t>();
        unsafe {
            let mut old: libc::cpu_set_t = std::mem::zeroed();
            if libc::sched_getaffinity(0, set_size, &mut old) != 0 {
                return None;
            }
            let first = (0..libc::CPU_SETSIZE as usize).find(|&c| libc::CPU_ISSET(c, &old))?;
            let mut pinned: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(first, &mut pinned);
            (libc::sched_setaffinity(0, set_size, &pinned) == 0).then_some(PinGuard { old })
        }
    }
}

#[cfg(target_os = "linux")]
impl Drop for PinGuard {
    fn drop(&mut self) {
        unsafe {
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &self.old);
        }
    }
}

#[cfg(not(target_os = "linux"))]
struct PinGuard;

#[cfg(not(target_os = "linux"))]
impl PinGuard {
    fn engage() -> Option<Self> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::SeedSet;

    fn tiny_cost(n: usize, m: usize, k: usize) -> CostModel {
        CostModel { n, m, k, d: 8, heads: 2, seeded_units: 1, dense_layers: 1 }
    }

    #[test]
    fn breakdowns_sum_to_totals_and_validate() {
        let cost = CostModel { n: 30, m: 20, k: 5, d: 16, heads: 4, seeded_units: 3, dense_layers: 2 };
        cost.validate().unwrap();
        let s = cost.seeded_madds();
        assert_eq!(
            s.total(),
            s.embed + s.projections + s.scores() + s.mlps + s.correlations
        );
        let d = cost.dense_madds();
        assert_eq!(d.total(), d.embed + d.projections + d.scores() + d.mlps + d.correlation);
        assert!(matches!(tiny_cost(0, 1, 1).validate(), Err(Error::Config(_))));
        let bad_heads = CostModel { heads: 3, ..cost };
        assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_flops_match_madds_counter_exactly() {
        // A real 10-point forward with pinned seeds (so both stages run
        // exactly k seeds) must hit the closed form to the last
        // multiply-add — and in particular within the 1% contract.
        let (n, m, k, d) = (10usize, 10usize, 4usize, 8usize);
        let shape = ModelShape { d, heads: 2, initial_units: 2, refine_units: 1 };
        let model = ModelWeights::new(shape, 5).unwrap();
        let synth = SynthConfig {
            n_points: n,
            descriptor_dim: d,
            overlap: 1.0,
            desc_noise: 0.05,
            seed: 9,
            ..SynthConfig::default()
        };
        let (a, b, _) = synth_pair(&synth).unwrap();
        let seeds = SeedSet::new(vec![0, 3, 5, 7], vec![1, 2, 8, 9], vec![1.0, 0.9, 0.8, 0.7], n, m).unwrap();
        let fwd = ForwardConfig { seed_override: Some(seeds), sinkhorn_reseed: 3, sinkhorn_final: 5, ..ForwardConfig::default() };
        let out = forward(&a, &b, &model, &fwd).unwrap();

        let cost = CostModel { n, m, k, d, heads: 2, seeded_units: 3, dense_layers: 1 };
        assert_eq!(cost.seeded_madds().total(), out.madds);
        assert_eq!(cost.flops_seeded(), 2 * out.madds);
        let rel = (cost.seeded_madds().total() as f64 - out.madds as f64).abs() / out.madds as f64;
        assert!(rel < 0.01);
    }

    #[test]
    fn dense_flops_match_madds_counter_exactly() {
        let (n, m, d) = (10usize, 7usize, 8usize);
        let shape = ModelShape { d, heads: 2, initial_units: 1, refine_units: 1 };
        let model = ModelWeights::new(shape, 6).unwrap();
        let layers: Vec<DenseLayerWeights> =
            (0..2).map(|i| DenseLayerWeights::new(d, 2, i).unwrap()).collect();
        let synth = SynthConfig {
            n_points: n,
            descriptor_dim: d,
            overlap: 1.0,
            seed: 10,
            ..SynthConfig::default()
        };
        let (a, full_b, _) = synth_pair(&synth).unwrap();
        let front: Vec<usize> = (0..m).collect();
        let b = KeypointSet::new(
            full_b.coords().select_rows(&front).unwrap(),
            full_b.descriptors().select_rows(&front).unwrap(),
        )
        .unwrap();
        let out = dense_forward(&a, &b, &model, &layers, 4).unwrap();

        let cost = CostModel { n, m, k: 1, d, heads: 2, seeded_units: 1, dense_layers: 2 };
        assert_eq!(cost.dense_madds().total(), out.madds);
        assert_eq!(cost.flops_dense(), 2 * out.madds);
        // Shapes are dense by construction: n×n, m×m, n×m, m×n per head
        // and layer.
        assert_eq!(out.attn_shapes.len(), 2 * 4 * 2);
        assert!(out.attn_shapes.iter().all(|s| (s.rows == n || s.rows == m) && (s.cols == n || s.cols == m)));
    }

    #[test]
    fn dense_n1_matches_hand_sum() {
        // n = m = 1, d = 4, one layer, worked by hand:
        //   embed  2·(2·4 + 4·4)                 = 48
        //   4 attention sites, each 16·3 (QKV) + 4 (scores+apply)
        //     + 64 + 32 (MLP)                    = 608
        //   correlation 1·1·4                    = 4
        let cost = CostModel { n: 1, m: 1, k: 1, d: 4, heads: 2, seeded_units: 1, dense_layers: 1 };
        assert_eq!(cost.dense_madds().total(), 48 + 608 + 4);
        assert_eq!(flops_dense(1, 1, 4, 2, 1).unwrap(), 2 * 660);
    }

    #[test]
    fn doubling_k_scales_pool_and_unpool_score_terms_linearly() {
        let base = CostModel { n: 100, m: 80, k: 8, d: 16, heads: 4, seeded_units: 2, dense_layers: 1 };
        let doubled = CostModel { k: 16, ..base };
        let (s1, s2) = (base.seeded_madds(), doubled.seeded_madds());
        assert_eq!(s2.pool_scores, 2 * s1.pool_scores);
        assert_eq!(s2.unpool_scores, 2 * s1.unpool_scores);
        // The k² filtering term is the quadratic exception.
        assert_eq!(s2.filter_scores, 4 * s1.filter_scores);
    }

    #[test]
    fn doubling_n_scales_dense_self_scores_quadratically() {
        let base = CostModel { n: 20, m: 20, k: 1, d: 16, heads: 4, seeded_units: 1, dense_layers: 3 };
        let doubled = CostModel { n: 40, m: 40, ..base };
        let (d1, d2) = (base.dense_madds(), doubled.dense_madds());
        assert_eq!(d2.self_scores, 4 * d1.self_scores);
        assert_eq!(d2.cross_scores, 4 * d1.cross_scores);
    }

    #[test]
    fn seeded_score_flops_over_dense_is_roughly_k_over_n() {
        // n = m = 2000, k = 128, d = 128: per-block score-FLOP ratio is
        // exactly k(n+k)/n² ≈ k/n = 0.064.
        let cost = CostModel { n: 2000, m: 2000, k: 128, d: 128, heads: 4, seeded_units: 1, dense_layers: 1 };
        let seeded = cost.seeded_madds().scores();
        let dense = cost.dense_madds().scores();
        // Exact rational identity seeded/dense = k(n+k)/n².
        assert_eq!(seeded * 2000 * 2000, dense * 128 * (2000 + 128));
        let ratio = seeded as f64 / dense as f64;
        assert!((ratio - 0.064).abs() < 0.005, "ratio {ratio}");
    }

    #[test]
    fn k_equals_n_is_within_a_small_constant_of_dense() {
        let cost = CostModel { n: 32, m: 32, k: 32, d: 16, heads: 2, seeded_units: 1, dense_layers: 1 };
        let seeded = cost.seeded_madds().total() as f64;
        let dense = cost.dense_madds().total() as f64;
        let ratio = seeded / dense;
        assert!(ratio > 1.0 && ratio < 3.0, "ratio {ratio}");
    }

    #[test]
    fn score_entry_forms_match_hand_expansion_on_three_configs() {
        // (n, m, k) = (2, 3, 1): seeded 2·1·5 + 4·1 = 14; dense 4 + 9 + 12 = 25.
        assert_eq!(tiny_cost(2, 3, 1).score_entries_seeded_per_unit(), 14);
        assert_eq!(tiny_cost(2, 3, 1).score_entries_dense_per_layer(), 25);
        // (1, 1, 1): seeded 2·2 + 4 = 8; dense 1 + 1 + 2 = 4.
        assert_eq!(tiny_cost(1, 1, 1).score_entries_seeded_per_unit(), 8);
        assert_eq!(tiny_cost(1, 1, 1).score_entries_dense_per_layer(), 4);
        // (4, 2, 2): seeded 2·2·6 + 4·4 = 40; dense 16 + 4 + 16 = 36.
        assert_eq!(tiny_cost(4, 2, 2).score_entries_seeded_per_unit(), 40);
        assert_eq!(tiny_cost(4, 2, 2).score_entries_dense_per_layer(), 36);
        // Bytes are 8 per f64 entry.
        assert_eq!(tiny_cost(4, 2, 2).score_bytes_seeded_per_unit(), 320);
    }

    fn tiny_bench_config() -> BenchConfig {
        BenchConfig {
            n_values: vec![12, 20],
            seed_policy: SeedPolicy::Fixed(4),
            d: 8,
            heads: 2,
            initial_units: 1,
            refine_units: 1,
            dense_layers: 1,
            runs: 2,
            warmup: 0,
            sinkhorn_reseed: 2,
            sinkhorn_final: 2,
            desc_noise: 0.02,
            memory_budget_bytes: None,
            pin_core: false,
            seed: 3,
        }
    }

    #[test]
    fn bench_rows_cover_the_sweep_and_respect_sinkhorn_ordering() {
        let report = bench_run(&tiny_bench_config()).unwrap();
        assert_eq!(report.rows.len(), 4);
        for row in &report.rows {
            assert!(row.skipped.is_none());
            assert_eq!(row.runs, 2);
            assert!(row.median_s > 0.0);
            // Pointwise total_i − sinkhorn_i ≤ total_i carries to medians.
            assert!(row.median_excl_sinkhorn_s <= row.median_s);
        }
        let seeded: Vec<_> = report.rows.iter().filter(|r| r.variant == Variant::Seeded).collect();
        let dense: Vec<_> = report.rows.iter().filter(|r| r.variant == Variant::Dense).collect();
        assert_eq!(seeded.len(), 2);
        assert_eq!(dense.len(), 2);
        // Analytic FLOPs grow with n within each variant.
        assert!(seeded[1].analytic_flops > seeded[0].analytic_flops);
        assert!(dense[1].analytic_flops > dense[0].analytic_flops);
    }

    #[test]
    fn run_count_never_changes_analytic_columns() {
        let once = bench_run(&BenchConfig { runs: 1, ..tiny_bench_config() }).unwrap();
        let nine = bench_run(&BenchConfig { runs: 9, ..tiny_bench_config() }).unwrap();
        assert_eq!(once.rows.len(), nine.rows.len());
        for (a, b) in once.rows.iter().zip(&nine.rows) {
            assert_eq!((a.n, a.m, a.k, a.variant), (b.n, b.m, b.k, b.variant));
            assert_eq!(a.analytic_flops, b.analytic_flops);
            assert_eq!(a.score_entries, b.score_entries);
            assert_eq!(a.score_bytes, b.score_bytes);
            assert_eq!((a.runs, b.runs), (1, 9));
        }
    }

    #[test]
    fn memory_budget_skips_with_annotation_instead_of_failing() {
        let config = BenchConfig { memory_budget_bytes: Some(1), ..tiny_bench_config() };
        let report = bench_run(&config).unwrap();
        assert_eq!(report.rows.len(), 4);
        for row in &report.rows {
            let reason = row.skipped.as_ref().expect("skipped");
            assert!(reason.contains("budget"));
            assert_eq!(row.runs, 0);
            assert_eq!(row.median_s, 0.0);
            // Analytic columns are still filled in.
            assert!(row.analytic_flops > 0);
        }
    }

    #[test]
    fn report_round_trips_through_csv_and_json() {
        let mut report = bench_run(&tiny_bench_config()).unwrap();
        // Exercise the optional columns: a skipped row and a fake peak.
        report.rows[1].peak_alloc_bytes = Some(123_456);
        report.rows.push(skipped_row(
            64,
            4,
            Variant::Dense,
            &tiny_cost(64, 64, 4),
            "analytic score bytes 131072 exceed budget 1".into(),
        ));

        let csv_text = report.rows_to_csv().unwrap();
        let parsed = BenchReport::rows_from_csv(&csv_text).unwrap();
        assert_eq!(parsed, report.rows);

        let json_text = report.to_json().unwrap();
        let parsed = BenchReport::from_json(&json_text).unwrap();
        assert_eq!(parsed, report);

        let mut wrong = report.clone();
        wrong.schema_version = 99;
        let bad = BenchReport::from_json(&wrong.to_json().unwrap());
        assert!(matches!(bad, Err(Error::Format(_))));
    }

    #[test]
    fn dense_over_seeded_time_ratio_grows_with_n() {
        // The dense arm is quadratic in n, the seeded arm linear at fixed
        // k, so the wall-time ratio must grow across a 8× size step.
        let config = BenchConfig {
            n_values: vec![128, 1024],
            seed_policy: SeedPolicy::Fixed(16),
            d: 16,
            heads: 2,
            initial_units: 1,
            refine_units: 1,
            dense_layers: 1,
            runs: 3,
            warmup: 1,
            sinkhorn_reseed: 1,
            sinkhorn_final: 1,
            desc_noise: 0.02,
            memory_budget_bytes: None,
            pin_core: false,
            seed: 4,
        };
        let report = bench_run(&config).unwrap();
        let time = |n: usize, v: Variant| {
            report
                .rows
                .iter()
                .find(|r| r.n == n && r.variant == v)
                .map(|r| r.median_excl_sinkhorn_s)
                .unwrap()
        };
        let small = time(128, Variant::Dense) / time(128, Variant::Seeded);
        let large = time(1024, Variant::Dense) / time(1024, Variant::Seeded);
        assert!(large > small, "ratio did not grow: {small} -> {large}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(
            bench_run(&BenchConfig { n_values: vec![], ..tiny_bench_config() }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            bench_run(&BenchConfig { runs: 0, ..tiny_bench_config() }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            bench_run(&BenchConfig { heads: 3, ..tiny_bench_config() }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            bench_run(&BenchConfig { seed_policy: SeedPolicy::Fixed(0), ..tiny_bench_config() }),
            Err(Error::Config(_))
        ));
        assert!(matches!(flops_seeded(0, 1, 1, 4, 2, 1), Err(Error::Config(_))));
        assert!(matches!(flops_dense(1, 1, 5, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn proportional_seed_policy_tracks_pair_size() {
        assert_eq!(SeedPolicy::Fixed(37).k_for(4096, 4096), 37);
        assert_eq!(SeedPolicy::Proportional.k_for(2000, 2000), 128);
        // Floored for tiny inputs, proportional at scale.
        assert!(SeedPolicy::Proportional.k_for(50, 50) >= 8);
        assert_eq!(SeedPolicy::Proportional.k_for(4000, 4000), 256);
    }
}
