//! Sparse attacks on a differentiable map in standardized input space.
//!
//! An attack replaces at most `k` coordinates of a clean input with values
//! in `[-1, 1]` (one training standard deviation) and scores the result by
//! the relative change of the output,
//! `||f(b_adv) - f(b_clean)|| / ||f(b_clean)||`.
//!
//! The main engine is differential evolution over a genome of `k`
//! (index, value) pairs. Random sampling and sign-gradient PGD serve as
//! baselines.

use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::StealthMetrics;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::numcore::norm2;
use crate::operators::DifferentiableMap;

/// Success thresholds on the relative output error.
pub const THRESHOLDS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

/// Largest batch scored in one call; bounds the memory held by outputs.
const SCORE_CHUNK: usize = 256;

/// `(zeta, delta)` pairs: a continuous index gene and a replacement value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub pairs: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// `index = clamp(round(zeta), 0, d - 1)`, `value = clamp(delta, -1, 1)`.
pub fn decode_pair(zeta: f64, delta: f64, d: usize) -> (usize, f64) {
    let idx = zeta.round().clamp(0.0, (d - 1) as f64);
    let idx = if idx.is_nan() { 0 } else { idx as usize };
    let val = if delta.is_nan() { 0.0 } else { delta.clamp(-1.0, 1.0) };
    (idx, val)
}

impl Genome {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn from_flat(x: &[f64]) -> Self {
        Self {
            pairs: x.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.pairs.iter().flatten().copied().collect()
    }

    /// Genome whose pairs decode exactly to `(indices, values)`.
    pub fn from_decoded(indices: &[usize], values: &[f64]) -> Self {
        Self {
            pairs: indices.iter().zip(values).map(|(&i, &v)| [i as f64, v]).collect(),
        }
    }

    /// Decoded pairs in genome order; duplicates are kept.
    pub fn decode(&self, d: usize) -> Decoded {
        let (indices, values) = self.pairs.iter().map(|p| decode_pair(p[0], p[1], d)).unzip();
        Decoded { indices, values }
    }

    /// Same perturbation expressed with exactly `k` pairs: extra pairs
    /// repeat the first one, which leaves the decoded input unchanged.
    pub fn padded(&self, k: usize) -> Option<Self> {
        // Dropping pairs would change the perturbation.
        if k < self.k() {
            return None;
        }
        let first = *self.pairs.first()?;
        let mut pairs = self.pairs.clone();
        pairs.resize(k, first);
        Some(Self { pairs })
    }
}

/// Writes `values` over `b_clean` at `indices`, in order, so the last
/// write to a repeated index wins.
pub fn apply(b_clean: &[f64], indices: &[usize], values: &[f64]) -> Result<Vec<f64>> {
    if indices.len() != values.len() {
        return Err(Error::InvalidInput(format!(
            "{} indices but {} values",
            indices.len(),
            values.len()
        )));
    }
    let mut b = b_clean.to_vec();
    for (&i, &v) in indices.iter().zip(values) {
        *b.get_mut(i)
            .ok_or_else(|| Error::InvalidInput(format!("index {i} outside [0, {})", b_clean.len())))? = v;
    }
    Ok(b)
}

/// Coordinates where `b_adv` differs from `b_clean`, ascending.
pub fn effective_support(b_clean: &[f64], b_adv: &[f64]) -> Vec<usize> {
    (0..b_clean.len()).filter(|&i| b_adv[i] != b_clean[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    De,
    Random,
    Pgd,
}

impl AttackMethod {
    pub fn tag(self) -> &'static str {
        match self {
            AttackMethod::De => "de",
            AttackMethod::Random => "random",
            AttackMethod::Pgd => "pgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: usize,
    pub model: String,
    pub method: AttackMethod,
    pub k: usize,
    pub seed: u64,
    /// False when a model evaluation failed; `error` then says why.
    pub valid: bool,
    pub error: Option<String>,
    pub genome: Option<Genome>,
    /// Distinct decoded indices, ascending, with their final values.
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    /// Coordinates where `b_adv` actually differs from the clean input.
    pub support: Vec<usize>,
    pub b_adv: Vec<f64>,
    /// Relative output error of `b_adv`.
    pub fitness: f64,
    pub thresholds: Vec<f64>,
    /// `fitness > tau` for each threshold.
    pub success: Vec<bool>,
    pub generations: usize,
    pub evaluations: usize,
    /// Best fitness after initialization and after every generation.
    pub trajectory: Vec<f64>,
    pub stealth: Option<StealthMetrics>,
}

impl AttackRecord {
    fn new(method: AttackMethod, sample_id: usize, model: &str, k: usize, seed: u64, thresholds: &[f64]) -> Self {
        Self {
            sample_id,
            model: model.to_string(),
            method,
            k,
            seed,
            valid: true,
            error: None,
            genome: None,
            indices: Vec::new(),
            values: Vec::new(),
            support: Vec::new(),
            b_adv: Vec::new(),
            fitness: 0.0,
            thresholds: thresholds.to_vec(),
            success: vec![false; thresholds.len()],
            generations: 0,
            evaluations: 0,
            trajectory: Vec::new(),
            stealth: None,
        }
    }

    fn finish(&mut self, b_clean: &[f64], b_adv: Vec<f64>, fitness: f64, perturbed: &[usize]) {
        let mut idx = perturbed.to_vec();
        idx.sort_unstable();
        idx.dedup();
        self.values = idx.iter().map(|&i| b_adv[i]).collect();
        self.indices = idx;
        self.support = effective_support(b_clean, &b_adv);
        self.b_adv = b_adv;
        self.fitness = fitness;
        self.success = self.thresholds.iter().map(|&t| fitness > t).collect();
        debug_assert!(self.support.iter().all(|i| self.indices.contains(i)));
    }

    fn invalid(mut self, b_clean: &[f64], err: Error) -> Self {
        self.valid = false;
        self.error = Some(err.to_string());
        self.b_adv = b_clean.to_vec();
        self.fitness = 0.0;
        self.success = vec![false; self.thresholds.len()];
        self
    }

    /// `fitness > tau` for any threshold, recorded or not.
    pub fn succeeded(&self, tau: f64) -> bool {
        self.valid && self.fitness > tau
    }
}

/// Relative output error against a fixed clean output.
pub struct Objective<'a, M: ?Sized> {
    map: &'a M,
    f_clean: Vec<f64>,
    f_norm: f64,
    pub evaluations: usize,
}

impl<'a, M: DifferentiableMap + ?Sized> Objective<'a, M> {
    pub fn new(map: &'a M, b_clean: &[f64]) -> Result<Self> {
        let f_clean = map.eval(b_clean)?;
        let f_norm = norm2(&f_clean);
        if f_norm == 0.0 {
            return Err(Error::ZeroReference);
        }
        Ok(Self {
            map,
            f_clean,
            f_norm,
            evaluations: 0,
        })
    }

    pub fn f_clean(&self) -> &[f64] {
        &self.f_clean
    }

    fn error_of(&self, out: &[f64]) -> f64 {
        let num: f64 = out.iter().zip(&self.f_clean).map(|(a, b)| (a - b) * (a - b)).sum();
        num.sqrt() / self.f_norm
    }

    pub fn score(&mut self, b: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        Ok(self.error_of(&self.map.eval(b)?))
    }

    pub fn score_many(&mut self, bs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(bs.len());
        for chunk in bs.chunks(SCORE_CHUNK) {
            self.evaluations += chunk.len();
            out.extend(self.map.eval_many(chunk)?.iter().map(|f| self.error_of(f)));
        }
        Ok(out)
    }

    /// Fitness and its gradient with respect to `b`.
    pub fn score_and_gradient(&mut self, b: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluations += 1;
        let out = self.map.eval(b)?;
        let diff: Vec<f64> = out.iter().zip(&self.f_clean).map(|(a, c)| a - c).collect();
        let dn = norm2(&diff);
        if dn == 0.0 {
            return Ok((0.0, vec![0.0; b.len()]));
        }
        let seed: Vec<f64> = diff.iter().map(|v| v / (dn * self.f_norm)).collect();
        Ok((dn / self.f_norm, self.map.vjp(b, &seed)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DEConfig {
    /// Population size is `pop_per_gene * 2k`.
    pub pop_per_gene: usize,
    /// Mutation scale drawn from `U(f_min, f_max)` once per generation.
    pub f_min: f64,
    pub f_max: f64,
    pub crossover: f64,
    pub max_gen: usize,
    /// Window for the stall test.
    pub stall_gen: usize,
    /// Stop once the best fitness improved by less than this relative
    /// amount over the last `stall_gen` generations.
    pub tol: f64,
    pub polish: bool,
    /// Model evaluations the value-only polish may spend.
    pub polish_iters: usize,
    pub seed: u64,
}

impl Default for DEConfig {
    fn default() -> Self {
        Self {
            pop_per_gene: 20,
            f_min: 0.5,
            f_max: 1.0,
            crossover: 1.0,
            max_gen: 150,
            stall_gen: 30,
            tol: 0.01,
            polish: true,
            polish_iters: 50,
            seed: 0,
        }
    }
}

impl DEConfig {
    pub fn pop_size(&self, k: usize) -> usize {
        self.pop_per_gene * 2 * k
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Config("sparsity budget k must be at least 1".into()));
        }
        if self.pop_size(k) < 4 {
            return Err(Error::Config(format!(
                "population {} too small for best1bin (need >= 4)",
                self.pop_size(k)
            )));
        }
        if !(self.f_min > 0.0 && self.f_min <= self.f_max && self.f_max <= 2.0) {
            return Err(Error::Config(format!(
                "mutation range [{}, {}] invalid",
                self.f_min, self.f_max
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return Err(Error::Config("crossover probability must lie in [0, 1]".into()));
        }
        if self.max_gen == 0 || self.stall_gen == 0 || !(self.tol >= 0.0) {
            return Err(Error::Config("max_gen and stall_gen must be >= 1 and tol >= 0".into()));
        }
        Ok(())
    }
}

/// `n` stratified points in `[lo, hi]^dim`: every coordinate hits each of
/// the `n` equal strata exactly once.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, lo: &[f64], hi: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; lo.len()]; n];
    for j in 0..lo.len() {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            strata.swap(i, rng.random_range(0..=i));
        }
        for (pt, s) in pts.iter_mut().zip(strata) {
            let u = (s as f64 + rng.random::<f64>()) / n as f64;
            pt[j] = lo[j] + u * (hi[j] - lo[j]);
        }
    }
    pts
}

fn gene_bounds(k: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let lo = (0..2 * k).map(|j| if j % 2 == 0 { 0.0 } else { -1.0 }).collect();
    let hi = (0..2 * k)
        .map(|j| if j % 2 == 0 { (d - 1) as f64 } else { 1.0 })
        .collect();
    (lo, hi)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn genome_input(b_clean: &[f64], x: &[f64]) -> Vec<f64> {
    let dec = Genome::from_flat(x).decode(b_clean.len());
    apply(b_clean, &dec.indices, &dec.values).expect("decoded indices are in range")
}

/// Differential-evolution `k`-sparse attack (best1bin, binomial crossover,
/// greedy selection), optionally seeded with a known genome and finished
/// by a value-only golden-section polish.
///
/// Each generation builds every trial from the population as it stood at
/// the start of the generation, scores them as one batch and then selects
/// in population order, so batching never changes the result.
#[allow(clippy::too_many_arguments)]
pub fn de_attack<M: DifferentiableMap + ?Sized>(
    map: &M,
    model: &str,
    sample_id: usize,
    b_clean: &[f64],
    k: usize,
    cfg: &DEConfig,
    thresholds: &[f64],
    warm_start: Option<&Genome>,
) -> Result<AttackRecord> {
    cfg.validate(k)?;
    let d = b_clean.len();
    if d != map.input_dim() {
        return Err(Error::ModelMismatch(format!(
            "map takes {} inputs, sample has {d}",
            map.input_dim()
        )));
    }
    let rec = AttackRecord::new(AttackMethod::De, sample_id, model, k, cfg.seed, thresholds);
    match run_de(map, b_clean, k, cfg, warm_start, rec.clone()) {
        Ok(r) => Ok(r),
        Err(e) => Ok(rec.invalid(b_clean, e)),
    }
}

fn run_de<M: DifferentiableMap + ?Sized>(
    map: &M,
    b_clean: &[f64],
    k: usize,
    cfg: &DEConfig,
    warm_start: Option<&Genome>,
    mut rec: AttackRecord,
) -> Result<AttackRecord> {
    let d = b_clean.len();
    let np = cfg.pop_size(k);
    let dim = 2 * k;
    let (lo, hi) = gene_bounds(k, d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut obj = Objective::new(map, b_clean)?;

    let mut pop = latin_hypercube(np, &lo, &hi, &mut rng);
    if let Some(g) = warm_start.and_then(|g| g.padded(k)) {
        pop[0] = g
            .to_flat()
            .iter()
            .enumerate()
            .map(|(j, v)| v.clamp(lo[j], hi[j]))
            .collect();
    }
    let inputs: Vec<Vec<f64>> = pop.iter().map(|x| genome_input(b_clean, x)).collect();
    let mut fit = obj.score_many(&inputs)?;
    let mut best = argmax(&fit);
    let mut trajectory = vec![fit[best]];

    let mut gen = 0;
    while gen < cfg.max_gen {
        let f = rng.random_range(cfg.f_min..=cfg.f_max);
        let mut trials = Vec::with_capacity(np);
        for i in 0..np {
            let r1 = loop {
                let r = rng.random_range(0..np);
                if r != i {
                    break r;
                }
            };
            let r2 = loop {
                let r = rng.random_range(0..np);
                if r != i && r != r1 {
                    break r;
                }
            };
            let forced = rng.random_range(0..dim);
            let trial: Vec<f64> = (0..dim)
                .map(|j| {
                    let take = rng.random::<f64>() < cfg.crossover || j == forced;
                    if take {
                        (pop[best][j] + f * (pop[r1][j] - pop[r2][j])).clamp(lo[j], hi[j])
                    } else {
                        pop[i][j]
                    }
                })
                .collect();
            trials.push(trial);
        }
        let inputs: Vec<Vec<f64>> = trials.iter().map(|x| genome_input(b_clean, x)).collect();
        let tf = obj.score_many(&inputs)?;
        for (i, (trial, t)) in trials.into_iter().zip(tf).enumerate() {
            if t >= fit[i] {
                pop[i] = trial;
                fit[i] = t;
            }
        }
        best = argmax(&fit);
        gen += 1;
        trajectory.push(fit[best]);
        if gen >= cfg.stall_gen {
            let old = trajectory[gen - cfg.stall_gen];
            let now = trajectory[gen];
            if (now - old) / now.max(1e-12) < cfg.tol {
                break;
            }
        }
    }

    let mut genome = Genome::from_flat(&pop[best]);
    let mut fitness = fit[best];
    if cfg.polish && cfg.polish_iters > 0 {
        let (g, f) = polish_values(&mut obj, b_clean, &genome, fitness, cfg.polish_iters)?;
        genome = g;
        fitness = f;
    }
    let dec = genome.decode(d);
    let b_adv = apply(b_clean, &dec.indices, &dec.values)?;
    rec.genome = Some(genome);
    rec.generations = gen;
    rec.evaluations = obj.evaluations;
    rec.trajectory = trajectory;
    rec.finish(b_clean, b_adv, fitness, &dec.indices);
    Ok(rec)
}

/// Golden-section coordinate ascent over the replacement values with the
/// decoded indices frozen. Each coordinate gets an equal share of `budget`
/// evaluations: the two bounds first, then golden-section steps inside
/// `[-1, 1]`. A coordinate only moves when a probe beats the current best,
/// so the fitness never drops.
fn polish_values<M: DifferentiableMap + ?Sized>(
    obj: &mut Objective<'_, M>,
    b_clean: &[f64],
    genome: &Genome,
    fitness: f64,
    budget: usize,
) -> Result<(Genome, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let d = b_clean.len();
    let dec = genome.decode(d);
    let mut coords: Vec<usize> = dec.indices.clone();
    coords.sort_unstable();
    coords.dedup();
    let mut b = apply(b_clean, &dec.indices, &dec.values)?;
    let mut best = fitness;
    let share = budget / coords.len();
    let mut spent = 0;
    for (n, &i) in coords.iter().enumerate() {
        // Leftover evaluations go to the last coordinates.
        let mut left = if n + 1 == coords.len() { budget - spent } else { share };
        let mut probe = |v: f64, b: &mut Vec<f64>, left: &mut usize, best: &mut f64| -> Result<f64> {
            *left -= 1;
            spent += 1;
            let keep = b[i];
            b[i] = v;
            let f = obj.score(b)?;
            if f > *best {
                *best = f;
            } else {
                b[i] = keep;
            }
            Ok(f)
        };
        for v in [-1.0, 1.0] {
            if left > 0 {
                probe(v, &mut b, &mut left, &mut best)?;
            }
        }
        if left >= 2 {
            let (mut a, mut c) = (-1.0, 1.0);
            let mut x1 = c - INV_PHI * (c - a);
            let mut x2 = a + INV_PHI * (c - a);
            let mut f1 = probe(x1, &mut b, &mut left, &mut best)?;
            let mut f2 = probe(x2, &mut b, &mut left, &mut best)?;
            while left > 0 {
                if f1 >= f2 {
                    c = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = c - INV_PHI * (c - a);
                    f1 = probe(x1, &mut b, &mut left, &mut best)?;
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + INV_PHI * (c - a);
                    f2 = probe(x2, &mut b, &mut left, &mut best)?;
                }
            }
        }
    }
    let pairs = genome
        .pairs
        .iter()
        .zip(&dec.indices)
        .map(|(p, &i)| [p[0], b[i]])
        .collect();
    Ok((Genome { pairs }, best))
}

/// Best of `n_trials` random `k`-sparse replacements: `k` distinct indices
/// drawn uniformly, values uniform in `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn random_attack<M: DifferentiableMap + ?Sized>(
    map: &M,
    model: &str,
    sample_id: usize,
    b_clean: &[f64],
    k: usize,
    n_trials: usize,
    seed: u64,
    thresholds: &[f64],
) -> Result<AttackRecord> {
    let d = b_clean.len();
    if k == 0 || k > d {
        return Err(Error::Config(format!("k = {k} outside [1, {d}]")));
    }
    let mut rec = AttackRecord::new(AttackMethod::Random, sample_id, model, k, seed, thresholds);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(Vec<usize>, Vec<f64>)> = (0..n_trials)
        .map(|_| {
            let idx = sample_indices(&mut rng, d, k).into_vec();
            let vals = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
            (idx, vals)
        })
        .collect();
    let result = (|| -> Result<(usize, f64, usize)> {
        let mut obj = Objective::new(map, b_clean)?;
        let mut best = (usize::MAX, 0.0);
        for (c, chunk) in draws.chunks(SCORE_CHUNK).enumerate() {
            let inputs: Vec<Vec<f64>> = chunk
                .iter()
                .map(|(i, v)| apply(b_clean, i, v).expect("indices sampled in range"))
                .collect();
            for (j, f) in obj.score_many(&inputs)?.into_iter().enumerate() {
                if best.0 == usize::MAX || f > best.1 {
                    best = (c * SCORE_CHUNK + j, f);
                }
            }
        }
        Ok((best.0, best.1, obj.evaluations))
    })();
    match result {
        Err(e) => Ok(rec.invalid(b_clean, e)),
        Ok((_, _, evals)) if n_trials == 0 => {
            rec.evaluations = evals;
            rec.finish(b_clean, b_clean.to_vec(), 0.0, &[]);
            Ok(rec)
        }
        Ok((bi, f, evals)) => {
            let (idx, vals) = &draws[bi];
            rec.genome = Some(Genome::from_decoded(idx, vals));
            rec.evaluations = evals;
            rec.finish(b_clean, apply(b_clean, idx, vals)?, f, idx);
            Ok(rec)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    pub iters: usize,
    pub step: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            step: 1e-2,
            restarts: 3,
            seed: 0,
        }
    }
}

/// Keeps the `k` coordinates that moved furthest from `b_clean` (ties to
/// the lower index), resets the rest and clamps the kept ones to `[-1, 1]`.
/// Returns the kept coordinates.
fn project_sparse(b: &mut [f64], b_clean: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&x, &y| (b[y] - b_clean[y]).abs().total_cmp(&(b[x] - b_clean[x]).abs()));
    let mut keep: Vec<usize> = order.into_iter().take(k).filter(|&i| b[i] != b_clean[i]).collect();
    keep.sort_unstable();
    for i in 0..b.len() {
        if keep.binary_search(&i).is_ok() {
            b[i] = b[i].clamp(-1.0, 1.0);
        } else {
            b[i] = b_clean[i];
        }
    }
    keep
}

/// Sign-gradient ascent on the relative output error with projection onto
/// the `k`-sparse feasible set after every step. Each restart begins one
/// step away from `b_clean` in a random direction (the error gradient
/// vanishes at the clean input). The best iterate over all restarts is
/// kept.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack<M: DifferentiableMap + ?Sized>(
    map: &M,
    model: &str,
    sample_id: usize,
    b_clean: &[f64],
    k: usize,
    cfg: &PgdConfig,
    thresholds: &[f64],
) -> Result<AttackRecord> {
    let d = b_clean.len();
    if k == 0 || k > d {
        return Err(Error::Config(format!("k = {k} outside [1, {d}]")));
    }
    if !(cfg.step >= 0.0) || cfg.restarts == 0 {
        return Err(Error::Config("PGD needs step >= 0 and at least one restart".into()));
    }
    let mut rec = AttackRecord::new(AttackMethod::Pgd, sample_id, model, k, cfg.seed, thresholds);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let result = (|| -> Result<(Vec<f64>, f64, Vec<usize>, usize, Vec<f64>)> {
        let mut obj = Objective::new(map, b_clean)?;
        let mut best = (b_clean.to_vec(), 0.0, Vec::new());
        let mut trajectory = Vec::new();
        for _ in 0..cfg.restarts {
            let mut b: Vec<f64> = b_clean
                .iter()
                .map(|v| v + cfg.step * rng.random_range(-1.0..=1.0))
                .collect();
            let mut support = project_sparse(&mut b, b_clean, k);
            for it in 0..=cfg.iters {
                let (f, g) = obj.score_and_gradient(&b)?;
                if f > best.1 {
                    best = (b.clone(), f, support.clone());
                }
                trajectory.push(best.1);
                if it == cfg.iters {
                    break;
                }
                for (x, gi) in b.iter_mut().zip(&g) {
                    if *gi != 0.0 {
                        *x += cfg.step * gi.signum();
                    }
                }
                support = project_sparse(&mut b, b_clean, k);
            }
        }
        Ok((best.0, best.1, best.2, obj.evaluations, trajectory))
    })();
    match result {
        Err(e) => Ok(rec.invalid(b_clean, e)),
        Ok((b_adv, f, support, evals, trajectory)) => {
            rec.evaluations = evals;
            rec.generations = cfg.iters;
            rec.trajectory = trajectory;
            let values: Vec<f64> = support.iter().map(|&i| b_adv[i]).collect();
            if !support.is_empty() {
                rec.genome = Some(Genome::from_decoded(&support, &values));
            }
            rec.finish(b_clean, b_adv, f, &support);
            Ok(rec)
        }
    }
}

/// Settings for a DE sweep over samples and sparsity budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub ks: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub de: DEConfig,
    /// Seed each budget's population with the best genome found at the
    /// previous (smaller) budget for the same sample.
    pub warm_start: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 3, 5, 10],
            thresholds: THRESHOLDS.to_vec(),
            de: DEConfig::default(),
            warm_start: true,
        }
    }
}

/// Seed of one DE run, derived from the campaign seed.
pub fn attack_seed(seed: u64, method: AttackMethod, sample_id: usize, k: usize) -> u64 {
    derive_seed(seed, &format!("{}/{sample_id}/{k}", method.tag()))
}

/// DE attacks on every `(sample, k)` pair. Samples run in parallel; the
/// budgets of one sample run in increasing order. Records come back
/// ordered by sample, then `k`.
pub fn de_campaign<M: DifferentiableMap + ?Sized>(
    map: &M,
    model: &str,
    samples: &[(usize, Vec<f64>)],
    cfg: &CampaignConfig,
) -> Result<Vec<AttackRecord>> {
    let mut ks = cfg.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        cfg.de.validate(k)?;
    }
    let per_sample: Vec<Result<Vec<AttackRecord>>> = samples
        .par_iter()
        .map(|(id, b)| {
            let mut out: Vec<AttackRecord> = Vec::with_capacity(ks.len());
            for &k in &ks {
                let de = DEConfig {
                    seed: attack_seed(cfg.de.seed, AttackMethod::De, *id, k),
                    ..cfg.de.clone()
                };
                let warm = if cfg.warm_start {
                    out.iter().rev().find(|r| r.valid).and_then(|r| r.genome.as_ref())
                } else {
                    None
                };
                let rec = de_attack(map, model, *id, b, k, &de, &cfg.thresholds, warm)?;
                log::debug!(
                    "{model} sample {id} k={k}: fitness {:.4} after {} gens",
                    rec.fitness,
                    rec.generations
                );
                out.push(rec);
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_sample {
        records.extend(r?);
    }
    Ok(records)
}

/// Random baseline over every `(sample, k)` pair, ordered like
/// [`de_campaign`].
pub fn random_campaign<M: DifferentiableMap + ?Sized>(
    map: &M,
    model: &str,
    samples: &[(usize, Vec<f64>)],
    ks: &[usize],
    n_trials: usize,
    seed: u64,
    thresholds: &[f64],
) -> Result<Vec<AttackRecord>> {
    baseline_campaign(samples, ks, |id, b, k| {
        random_attack(
            map,
            model,
            id,
            b,
            k,
            n_trials,
            attack_seed(seed, AttackMethod::Random, id, k),
            thresholds,
        )
    })
}

/// PGD baseline over every `(sample, k)` pair, ordered like [`de_campaign`].
pub fn pgd_campaign<M: DifferentiableMap + ?Sized>(
    map: &M,
    model: &str,
    samples: &[(usize, Vec<f64>)],
    ks: &[usize],
    cfg: &PgdConfig,
    thresholds: &[f64],
) -> Result<Vec<AttackRecord>> {
    baseline_campaign(samples, ks, |id, b, k| {
        let run = PgdConfig {
            seed: attack_seed(cfg.seed, AttackMethod::Pgd, id, k),
            ..cfg.clone()
        };
        pgd_attack(map, model, id, b, k, &run, thresholds)
    })
}

fn baseline_campaign<F>(samples: &[(usize, Vec<f64>)], ks: &[usize], run: F) -> Result<Vec<AttackRecord>>
where
    F: Fn(usize, &[f64], usize) -> Result<AttackRecord> + Sync,
{
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let per_sample: Vec<Result<Vec<AttackRecord>>> = samples
        .par_iter()
        .map(|(id, b)| ks.iter().map(|&k| run(*id, b, k)).collect())
        .collect();
    let mut records = Vec::new();
    for r in per_sample {
        records.extend(r?);
    }
    Ok(records)
}

/// One JSON record per line.
pub fn write_records<W: Write>(records: &[AttackRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<AttackRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
