use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::netvlad::{netvlad_init, NetVladParams};
use super::triplet::{mine_semi_hard, Triplet};
use crate::codebook::Codebook;
use crate::corpus::EntityId;
use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::scalar::{dot, l2_norm, squared_distance, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Entities per minibatch; `None` trains on the whole set every step.
    pub batch_size: Option<usize>,
    /// Sharpness of the codebook-based initialization.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            learning_rate: 1e-2,
            epochs: 5,
            batch_size: Some(8),
            alpha: 10.0,
            seed: 0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::InvalidConfig("margin must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("alpha must be positive".into()));
        }
        if self.batch_size.is_some_and(|b| b < 4) {
            return Err(Error::InvalidConfig("batch size must be at least 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Mean triplet loss over the steps of each epoch, measured before the
    /// update of each step.
    pub epoch_loss: Vec<f64>,
    pub epoch_triplets: Vec<usize>,
}

/// Global descriptor of one entity before power normalization: the l2-normalized
/// sum of l2-normalized soft encodings. Also returns the norm of the sum.
pub fn entity_forward<T: Scalar>(params: &NetVladParams<T>, xs: &LocalDescriptorSet<T>) -> Result<(Vec<T>, T)> {
    let mut s = super::vlad::pooled_sum(params, xs)?;
    let norm = l2_norm(&s);
    if norm == T::zero() {
        return Err(Error::ZeroVector);
    }
    for v in s.iter_mut() {
        *v /= norm;
    }
    Ok((s, norm))
}

/// Accumulates into `grad` the gradient of `g·G(xs)` with respect to the
/// parameters, where `G` is the output of [`entity_forward`].
fn entity_backward<T: Scalar>(
    params: &NetVladParams<T>,
    xs: &LocalDescriptorSet<T>,
    out: &[T],
    norm: T,
    g: &[T],
    grad: &mut NetVladParams<T>,
) {
    let (kc, dim) = (params.n_clusters, params.dim);
    // through the final normalization
    let proj = dot(out, g);
    let gs: Vec<T> = g.iter().zip(out).map(|(&gi, &oi)| (gi - oi * proj) / norm).collect();

    let mut a = Vec::with_capacity(kc);
    let mut u = vec![T::zero(); kc * dim];
    let mut da = vec![T::zero(); kc];
    for x in xs.rows() {
        params.soft_assign_into(x, &mut a);
        for k in 0..kc {
            let c = params.center(k);
            for d in 0..dim {
                u[k * dim + d] = a[k] * (x[d] - c[d]);
            }
        }
        let n = l2_norm(&u);
        if n == T::zero() {
            continue;
        }
        // e = u / n; q = (gs - e (e·gs)) / n
        let eg = dot(&u, &gs) / n;
        let mut mix = T::zero();
        for k in 0..kc {
            let c = params.center(k);
            let mut dak = T::zero();
            for d in 0..dim {
                let q = (gs[k * dim + d] - u[k * dim + d] / n * eg) / n;
                dak += q * (x[d] - c[d]);
                grad.centers[k * dim + d] -= a[k] * q;
            }
            da[k] = dak;
            mix += a[k] * dak;
        }
        for k in 0..kc {
            let dz = a[k] * (da[k] - mix);
            for d in 0..dim {
                grad.weights[k * dim + d] += dz * x[d];
            }
            grad.biases[k] += dz;
        }
    }
}

/// Mean triplet loss over `triplets` (indices into `sets`) and its gradient
/// with respect to every parameter.
pub fn triplet_objective<T: Scalar>(
    params: &NetVladParams<T>,
    sets: &[&LocalDescriptorSet<T>],
    triplets: &[Triplet],
    margin: T,
) -> Result<(T, NetVladParams<T>)> {
    if triplets.is_empty() {
        return Err(Error::NoValidTriplets);
    }
    let forward: Vec<(Vec<T>, T)> = sets.par_iter().map(|xs| entity_forward(params, xs)).collect::<Result<_>>()?;
    let len = params.n_clusters * params.dim;
    let mut upstream: Vec<Option<Vec<T>>> = vec![None; sets.len()];
    let scale = T::one() / T::from_usize_lossy(triplets.len());
    let mut loss = T::zero();
    for &(a, p, n) in triplets {
        let (ga, gp, gn) = (&forward[a].0, &forward[p].0, &forward[n].0);
        let dp = squared_distance(ga, gp).sqrt();
        let dn = squared_distance(ga, gn).sqrt();
        let h = dp - dn + margin;
        if h <= T::zero() {
            continue;
        }
        loss += h * scale;
        let mut add = |idx: usize, dir: &[T], coef: T| {
            let slot = upstream[idx].get_or_insert_with(|| vec![T::zero(); len]);
            for (s, &v) in slot.iter_mut().zip(dir) {
                *s += coef * v;
            }
        };
        if dp > T::zero() {
            let diff: Vec<T> = ga.iter().zip(gp).map(|(&x, &y)| (x - y) / dp).collect();
            add(a, &diff, scale);
            add(p, &diff, -scale);
        }
        if dn > T::zero() {
            let diff: Vec<T> = ga.iter().zip(gn).map(|(&x, &y)| (x - y) / dn).collect();
            add(a, &diff, -scale);
            add(n, &diff, scale);
        }
    }
    let partial: Vec<NetVladParams<T>> = upstream
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
        .map(|(i, g)| {
            let mut grad = NetVladParams::zeros(params.n_clusters, params.dim);
            entity_backward(params, sets[i], &forward[i].0, forward[i].1, g, &mut grad);
            grad
        })
        .collect();
    let mut grad = NetVladParams::zeros(params.n_clusters, params.dim);
    for p in &partial {
        grad.add_scaled(p, T::one());
    }
    Ok((loss, grad))
}

/// Writer-balanced minibatches: two entities from each of `batch / 2`
/// randomly chosen writers. Writers with a single entity are never drawn.
fn draw_batches(labels: &[&str], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_writer: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_writer.entry(l).or_default().push(i);
    }
    let steps = labels.len().div_ceil(batch).max(1);
    let writers: Vec<&Vec<usize>> = by_writer.values().filter(|v| v.len() >= 2).collect();
    let per = (batch / 2).max(2).min(writers.len());
    let mut out = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..writers.len()).collect();
    for _ in 0..steps {
        order.shuffle(rng);
        let mut b = Vec::with_capacity(batch);
        for &w in order.iter().take(per) {
            let picks = rand::seq::index::sample(rng, writers[w].len(), 2);
            b.extend(picks.iter().map(|j| writers[w][j]));
        }
        b.sort_unstable();
        out.push(b);
    }
    out
}

/// Trains soft-assignment parameters with the writer of each entity as label.
///
/// Starts from `netvlad_init(cb, cfg.alpha)`; each step mines triplets on the
/// current batch descriptors and takes one gradient step.
pub fn netvlad_train<T: Scalar>(
    entities: &BTreeMap<EntityId, LocalDescriptorSet<T>>,
    cfg: &TripletConfig,
    cb: &Codebook<T>,
) -> Result<(NetVladParams<T>, TrainTrace)> {
    cfg.validate()?;
    let mut params = netvlad_init(cb, T::lit(cfg.alpha))?;
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        return Ok((params, trace));
    }
    let usable: Vec<(&EntityId, &LocalDescriptorSet<T>)> = entities.iter().filter(|(_, s)| !s.is_empty()).collect();
    for (_, s) in &usable {
        if s.dim() != cb.dim() {
            return Err(Error::DimMismatch {
                expected: cb.dim(),
                got: s.dim(),
            });
        }
    }
    let labels: Vec<&str> = usable.iter().map(|(id, _)| id.writer()).collect();
    let mut distinct = labels.clone();
    distinct.dedup();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientCorpus("training needs at least two writers".into()));
    }
    let sets: Vec<&LocalDescriptorSet<T>> = usable.iter().map(|(_, s)| *s).collect();
    let margin = T::lit(cfg.margin);
    let lr = T::lit(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut any = false;
    for _ in 0..cfg.epochs {
        let batches = match cfg.batch_size {
            None => vec![(0..sets.len()).collect::<Vec<_>>()],
            Some(b) => draw_batches(&labels, b, &mut rng),
        };
        let (mut total, mut steps, mut count) = (0.0, 0usize, 0usize);
        for batch in batches {
            let bsets: Vec<&LocalDescriptorSet<T>> = batch.iter().map(|&i| sets[i]).collect();
            let blabels: Vec<&str> = batch.iter().map(|&i| labels[i]).collect();
            let globals: Vec<Vec<T>> = bsets
                .par_iter()
                .map(|s| entity_forward(&params, s).map(|(g, _)| g))
                .collect::<Result<_>>()?;
            let triplets = match mine_semi_hard(&globals, &blabels, margin) {
                Ok(t) => t,
                Err(Error::NoValidTriplets) => continue,
                Err(e) => return Err(e),
            };
            let (loss, grad) = triplet_objective(&params, &bsets, &triplets, margin)?;
            params.add_scaled(&grad, -lr);
            total += loss.to_f64().unwrap_or(f64::NAN);
            steps += 1;
            count += triplets.len();
            any = true;
        }
        trace.epoch_loss.push(if steps > 0 { total / steps as f64 } else { 0.0 });
        trace.epoch_triplets.push(count);
    }
    if !any {
        return Err(Error::NoValidTriplets);
    }
    Ok((params, trace))
}

/// Relative disagreement used by the gradient check:
/// `|a - f| / max(|a|, |f|)`, or zero when both are below `floor`.
pub fn gradient_rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}
