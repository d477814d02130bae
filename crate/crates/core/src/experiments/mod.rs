//! Study protocols at page, line and word granularity on top of artifacts
//! fitted once on the training split.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

pub use self::report::{CurvePoint, ExperimentReport, MetricRow};

use crate::aggregation::{finalize, fit_whitening, GlobalDescriptor, WhiteningTransform};
use crate::codebook::{train_codebook, Codebook, KMeansOptions};
use crate::config::{canonical_text, config_hash, EncoderKind, ExperimentConfig, ExperimentKind, Granularity, PipelineSettings, QueryMode};
use crate::corpus::{Corpus, EntityId, PageUnits, Split};
use crate::descriptors::{describe, LocalDescriptorSet, SIFT_DIM};
use crate::encoding::{netvlad_train, pooled_sum, Encoder, NetVladParams, TripletConfig};
use crate::error::{Error, Result};
use crate::retrieval::{evaluate_queries, EvalResult, DEFAULT_TOP_X};
use crate::sampling::{budget_indices, budget_keypoints, contour_keypoints, entity_seed, Keypoint};

type Sums = BTreeMap<EntityId, Vec<f64>>;

/// Encoder used to turn local descriptors into residual encodings.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedEncoder {
    Vlad(Codebook<f64>),
    NetVlad(NetVladParams<f64>),
}

impl Encoder<f64> for FittedEncoder {
    fn n_clusters(&self) -> usize {
        match self {
            FittedEncoder::Vlad(c) => Encoder::n_clusters(c),
            FittedEncoder::NetVlad(p) => Encoder::n_clusters(p),
        }
    }

    fn dim(&self) -> usize {
        match self {
            FittedEncoder::Vlad(c) => Encoder::dim(c),
            FittedEncoder::NetVlad(p) => Encoder::dim(p),
        }
    }

    fn accumulate_normalized(&self, x: &[f64], acc: &mut [f64], scratch: &mut Vec<f64>) -> bool {
        match self {
            FittedEncoder::Vlad(c) => c.accumulate_normalized(x, acc, scratch),
            FittedEncoder::NetVlad(p) => p.accumulate_normalized(x, acc, scratch),
        }
    }
}

/// Subsampling seed for one budget, so every sweep point draws afresh.
fn budget_seed(seed: u64, budget: usize) -> u64 {
    seed ^ (budget as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Lines of a page, or the page itself when it has no line entities.
fn units(page: &PageUnits) -> Vec<EntityId> {
    if page.lines.is_empty() {
        vec![page.id.clone()]
    } else {
        page.lines.clone()
    }
}

fn sum_in_order<'a>(parts: impl IntoIterator<Item = &'a Vec<f64>>) -> Option<Vec<f64>> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?.clone();
    for p in it {
        for (a, &b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    Some(acc)
}

/// Local descriptors per entity: RootSIFT at contour points of the corpus
/// images, or rows of an external descriptor file keyed by entity.
#[derive(Clone, Copy)]
pub struct DescriptorSource<'a> {
    corpus: &'a Corpus,
    external: Option<&'a BTreeMap<EntityId, LocalDescriptorSet<f64>>>,
    seed: u64,
}

impl<'a> DescriptorSource<'a> {
    pub fn new(corpus: &'a Corpus, external: Option<&'a BTreeMap<EntityId, LocalDescriptorSet<f64>>>, seed: u64) -> Self {
        Self { corpus, external, seed }
    }

    pub fn corpus(&self) -> &'a Corpus {
        self.corpus
    }

    pub fn is_external(&self) -> bool {
        self.external.is_some()
    }

    pub fn dim(&self) -> Result<usize> {
        match self.external {
            None => Ok(SIFT_DIM),
            Some(map) => map
                .values()
                .map(|s| s.dim())
                .next()
                .ok_or_else(|| Error::InsufficientCorpus("external descriptor file is empty".into())),
        }
    }

    /// Budgeted contour keypoints of a corpus image; empty for unknown ids.
    pub fn keypoints(&self, id: &EntityId, budget: usize) -> Vec<Keypoint> {
        let seed = entity_seed(budget_seed(self.seed, budget), id);
        match self.corpus.image(id) {
            Some(img) => budget_keypoints(&contour_keypoints(img), budget, seed),
            None => Vec::new(),
        }
    }

    /// Descriptors of one entity, subsampled to at most `budget` with a seed
    /// derived from the entity id and the budget.
    pub fn descriptors(&self, id: &EntityId, budget: usize) -> LocalDescriptorSet<f64> {
        let seed = entity_seed(budget_seed(self.seed, budget), id);
        match self.external {
            Some(map) => match map.get(id) {
                Some(s) => s.select(&budget_indices(s.len(), budget, seed)),
                None => LocalDescriptorSet::new(id.clone(), self.dim().unwrap_or(SIFT_DIM)),
            },
            None => match self.corpus.image(id) {
                Some(img) => describe(id, img, &self.keypoints(id, budget)),
                None => LocalDescriptorSet::new(id.clone(), SIFT_DIM),
            },
        }
    }
}

/// Lines (or line-less pages) of the training split.
pub fn training_units(corpus: &Corpus) -> Vec<EntityId> {
    corpus.pages(Split::Train).iter().flat_map(units).collect()
}

fn require_training(corpus: &Corpus) -> Result<Vec<EntityId>> {
    let train = training_units(corpus);
    if train.is_empty() {
        return Err(Error::InsufficientCorpus("no training entities".into()));
    }
    Ok(train)
}

/// k-means vocabulary on at most `kmeans_sample` training descriptors, drawn
/// evenly across training units.
pub fn fit_codebook(src: &DescriptorSource<'_>, settings: &PipelineSettings) -> Result<Codebook<f64>> {
    settings.validate()?;
    let train = require_training(src.corpus)?;
    let dim = src.dim()?;
    let per_unit = settings_share(settings.kmeans_sample, train.len()).min(settings.line_budget);
    let sets: Vec<LocalDescriptorSet<f64>> = train.par_iter().map(|id| src.descriptors(id, per_unit)).collect();
    let mut data = Vec::new();
    for s in &sets {
        data.extend_from_slice(s.as_flat());
    }
    drop(sets);
    let opts = KMeansOptions {
        n_clusters: settings.n_clusters,
        max_iters: settings.kmeans_max_iters,
        tol: settings.kmeans_tol,
        seed: settings.seed,
    };
    Ok(train_codebook(&data, dim, &opts)?.0)
}

/// The codebook itself for VLAD; trained parameters for NetVLAD.
pub fn fit_encoder(src: &DescriptorSource<'_>, settings: &PipelineSettings, codebook: &Codebook<f64>) -> Result<FittedEncoder> {
    match settings.encoder {
        EncoderKind::Vlad => Ok(FittedEncoder::Vlad(codebook.clone())),
        EncoderKind::NetVlad => {
            let train = require_training(src.corpus)?;
            let budget = settings.netvlad_descriptors;
            let sets: Vec<LocalDescriptorSet<f64>> = train.par_iter().map(|id| src.descriptors(id, budget)).collect();
            let map: BTreeMap<EntityId, LocalDescriptorSet<f64>> =
                train.iter().cloned().zip(sets).filter(|(_, s)| !s.is_empty()).collect();
            let cfg = TripletConfig {
                seed: settings.triplet.seed.wrapping_add(settings.seed),
                ..settings.triplet.clone()
            };
            Ok(FittedEncoder::NetVlad(netvlad_train(&map, &cfg, codebook)?.0))
        }
    }
}

/// PCA whitening fitted on training lines at the line budget. The output
/// dimension is capped by the number of training vectors minus one.
pub fn fit_train_whitening(
    src: &DescriptorSource<'_>,
    settings: &PipelineSettings,
    encoder: &FittedEncoder,
) -> Result<WhiteningTransform<f64>> {
    let train = require_training(src.corpus)?;
    let budget = settings.line_budget;
    let vectors: Vec<Vec<f64>> = train
        .par_iter()
        .map(|id| pooled_sum(encoder, &src.descriptors(id, budget)).and_then(|s| finalize(&s, None)))
        .filter_map(|r| match r {
            Err(Error::ZeroVector) => None,
            other => Some(other),
        })
        .collect::<Result<_>>()?;
    if vectors.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: vectors.len(),
        });
    }
    let out_dim = settings.out_dim.min(vectors.len() - 1).min(vectors[0].len());
    fit_whitening(&vectors, out_dim, settings.epsilon)
}

/// Descriptor source plus fitted codebook, encoder and whitening. All
/// experiment runs share these artifacts.
pub struct Workbench<'a> {
    source: DescriptorSource<'a>,
    settings: PipelineSettings,
    codebook: Codebook<f64>,
    encoder: FittedEncoder,
    whitening: Option<WhiteningTransform<f64>>,
    line_cache: Mutex<Option<Arc<Sums>>>,
}

impl<'a> Workbench<'a> {
    /// Fits codebook, encoder and whitening on the training split.
    ///
    /// Descriptors come from `external` when given (keyed by entity),
    /// otherwise RootSIFT is computed at contour points of the corpus images.
    pub fn fit(
        corpus: &'a Corpus,
        external: Option<&'a BTreeMap<EntityId, LocalDescriptorSet<f64>>>,
        settings: PipelineSettings,
    ) -> Result<Self> {
        let src = DescriptorSource::new(corpus, external, settings.seed);
        let codebook = fit_codebook(&src, &settings)?;
        let encoder = fit_encoder(&src, &settings, &codebook)?;
        let whitening = if settings.whiten {
            Some(fit_train_whitening(&src, &settings, &encoder)?)
        } else {
            None
        };
        Self::from_parts(corpus, external, settings, codebook, encoder, whitening)
    }

    /// Assembles a workbench from previously fitted artifacts.
    pub fn from_parts(
        corpus: &'a Corpus,
        external: Option<&'a BTreeMap<EntityId, LocalDescriptorSet<f64>>>,
        settings: PipelineSettings,
        codebook: Codebook<f64>,
        encoder: FittedEncoder,
        whitening: Option<WhiteningTransform<f64>>,
    ) -> Result<Self> {
        settings.validate()?;
        if Encoder::dim(&encoder) != codebook.dim() {
            return Err(Error::DimMismatch {
                expected: codebook.dim(),
                got: Encoder::dim(&encoder),
            });
        }
        if let Some(w) = &whitening {
            if w.in_dim != encoder.output_len() {
                return Err(Error::DimMismatch {
                    expected: encoder.output_len(),
                    got: w.in_dim,
                });
            }
        }
        let source = DescriptorSource::new(corpus, external, settings.seed);
        Ok(Self {
            source,
            settings,
            codebook,
            encoder,
            whitening,
            line_cache: Mutex::new(None),
        })
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn codebook(&self) -> &Codebook<f64> {
        &self.codebook
    }

    pub fn encoder(&self) -> &FittedEncoder {
        &self.encoder
    }

    pub fn whitening(&self) -> Option<&WhiteningTransform<f64>> {
        self.whitening.as_ref()
    }

    pub fn corpus(&self) -> &Corpus {
        self.source.corpus
    }

    pub fn descriptors(&self, id: &EntityId, budget: usize) -> LocalDescriptorSet<f64> {
        self.source.descriptors(id, budget)
    }

    /// Sum of l2-normalized per-descriptor encodings of one entity.
    pub fn pooled(&self, id: &EntityId, budget: usize) -> Result<Vec<f64>> {
        pooled_sum(&self.encoder, &self.descriptors(id, budget))
    }

    /// Retrieval vector from a pooled sum.
    pub fn finalize(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        finalize(pooled, self.whitening.as_ref())
    }

    /// Pooled sums of every test line (or line-less page) at `budget`.
    fn line_sums(&self, budget: usize) -> Result<Arc<Sums>> {
        let cacheable = budget == self.settings.line_budget;
        if cacheable {
            if let Some(c) = self.line_cache.lock().expect("cache lock").as_ref() {
                return Ok(c.clone());
            }
        }
        let ids: Vec<EntityId> = self.source.corpus.pages(Split::Test).iter().flat_map(units).collect();
        let sums: Vec<Vec<f64>> = ids.par_iter().map(|id| self.pooled(id, budget)).collect::<Result<_>>()?;
        let map = Arc::new(ids.into_iter().zip(sums).collect::<Sums>());
        if cacheable {
            *self.line_cache.lock().expect("cache lock") = Some(map.clone());
        }
        Ok(map)
    }

    /// Finalizes `(id, pooled)` pairs, dropping entities whose vector is zero.
    fn globals(&self, items: Vec<(EntityId, Vec<f64>)>) -> Result<Vec<GlobalDescriptor<f64>>> {
        let out: Vec<Option<GlobalDescriptor<f64>>> = items
            .into_par_iter()
            .map(|(entity, s)| match self.finalize(&s) {
                Ok(values) => Ok(Some(GlobalDescriptor { entity, values })),
                Err(Error::ZeroVector) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        Ok(out.into_iter().flatten().collect())
    }

    /// Global descriptors of all test pages, each the sum of its line sums.
    pub fn page_globals(&self, budget: usize) -> Result<Vec<GlobalDescriptor<f64>>> {
        let sums = self.line_sums(budget)?;
        let items = self
            .source
            .corpus
            .pages(Split::Test)
            .iter()
            .filter_map(|p| sum_in_order(units(p).iter().map(|u| &sums[u])).map(|s| (p.id.clone(), s)))
            .collect();
        self.globals(items)
    }

    /// Global descriptors of all test lines.
    pub fn line_globals(&self, budget: usize) -> Result<Vec<GlobalDescriptor<f64>>> {
        let sums = self.line_sums(budget)?;
        let items = self
            .source
            .corpus
            .pages(Split::Test)
            .iter()
            .flat_map(|p| p.lines.iter().map(|l| (l.clone(), sums[l].clone())).collect::<Vec<_>>())
            .collect();
        self.globals(items)
    }

    /// Global descriptors of test words (punctuation removed) with their
    /// transcriptions.
    pub fn word_globals(&self, budget: usize) -> Result<(Vec<GlobalDescriptor<f64>>, BTreeMap<EntityId, Option<String>>)> {
        let words = self.source.corpus.words(Split::Test);
        let sums: Vec<Vec<f64>> = words.par_iter().map(|(id, _)| self.pooled(id, budget)).collect::<Result<_>>()?;
        let items = words.iter().map(|(id, _)| id.clone()).zip(sums).collect();
        Ok((self.globals(items)?, words.into_iter().collect()))
    }

    fn report(&self, exp: &ExperimentConfig) -> ExperimentReport {
        let external = self.source.is_external();
        ExperimentReport::new(
            exp.kind,
            config_hash(&self.settings, external, exp),
            self.settings.seed,
            canonical_text(&self.settings, external, exp),
        )
    }

    fn line_budget(&self, exp: &ExperimentConfig) -> usize {
        exp.features_per_unit.unwrap_or(self.settings.line_budget)
    }

    /// Dispatches on `exp.kind`.
    pub fn run(&self, exp: &ExperimentConfig) -> Result<ExperimentReport> {
        exp.validate()?;
        match exp.kind {
            ExperimentKind::Page => self.run_page_level(exp),
            ExperimentKind::Line => self.run_line_level(exp),
            ExperimentKind::LineMerge => self.run_line_merge(exp),
            ExperimentKind::ShortQuery => self.run_short_query(exp),
            ExperimentKind::Word => self.run_word_level(exp),
            ExperimentKind::WordSpecific => self.run_word_specific(exp),
            ExperimentKind::Sweep => self.run_feature_sweep(exp),
        }
    }

    fn check_pages(&self) -> Result<()> {
        let mut per_writer: BTreeMap<String, usize> = BTreeMap::new();
        for p in self.source.corpus.pages(Split::Test) {
            *per_writer.entry(p.id.writer().to_string()).or_default() += 1;
        }
        if per_writer.values().filter(|&&n| n >= 2).count() < 2 {
            return Err(Error::InsufficientCorpus(
                "need at least two test writers with two or more pages".into(),
            ));
        }
        Ok(())
    }

    /// Leave-one-out retrieval of test pages.
    pub fn run_page_level(&self, exp: &ExperimentConfig) -> Result<ExperimentReport> {
        self.check_pages()?;
        let g = self.page_globals(self.line_budget(exp))?;
        let (eval, _) = evaluate_queries(&g, &g, |_, _| false, &DEFAULT_TOP_X)?;
        let mut r = self.report(exp);
        push_eval(&mut r, &eval, "page");
        r.eval = Some(eval);
        Ok(r)
    }

    /// Leave-one-out retrieval of test lines.
    pub fn run_line_level(&self, exp: &ExperimentConfig) -> Result<ExperimentReport> {
        if self.source.corpus.pages(Split::Test).iter().all(|p| p.lines.is_empty()) {
            return Err(Error::InsufficientCorpus("no line entities in the test split".into()));
        }
        let g = self.line_globals(self.line_budget(exp))?;
        let (eval, _) = evaluate_queries(&g, &g, |_, _| false, &DEFAULT_TOP_X)?;
        let mut r = self.report(exp);
        push_eval(&mut r, &eval, "line");
        r.eval = Some(eval);
        Ok(r)
    }

    /// Consecutive groups of `n` lines per page as entities; incomplete
    /// trailing groups are dropped. Also reports the ratio to page-level mAP.
    pub fn run_line_merge(&self, exp: &ExperimentConfig) -> Result<ExperimentReport> {
        let n = exp
            .merge_n
            .ok_or_else(|| Error::InvalidConfig("line-merge needs merge_n".into()))?;
        if n == 0 {
            return Err(Error::InvalidConfig("merge_n must be at least 1".into()));
        }
        let budget = self.line_budget(exp);
        let sums = self.line_sums(budget)?;
        let pages = self.source.corpus.pages(Split::Test);
        let mut items = Vec::new();
        for p in &pages {
            for group in p.lines.chunks_exact(n) {
                let s = sum_in_order(group.iter().map(|l| &sums[l])).expect("non-empty group");
                items.push((group[0].clone(), s));
            }
        }
        if items.is_empty() {
            return Err(Error::EmptyAfterMerge(n));
        }
        let g = self.globals(items)?;
        let (eval, _) = evaluate_queries(&g, &g, |_, _| false, &DEFAULT_TOP_X)?;
        let pg = self.page_globals(budget)?;
        let (page_eval, _) = evaluate_queries(&pg, &pg, |_, _| false, &DEFAULT_TOP_X)?;

        let gran = format!("lines-{n}");
        let mut r = self.report(exp);
        push_eval(&mut r, &eval, &gran);
        r.push("mAP_page", "page", page_eval.map);
        r.push("mAP_normalized", &gran, eval.map / page_eval.map);
        let total = pages.len() as f64;
        let below = pages.iter().filter(|p| p.lines.len() < n).count() as f64;
        r.push("docs_below_n_pct", &gran, 100.0 * below / total);
        let max_lines = pages.iter().map(|p| p.lines.len()).max().unwrap_or(0);
        for x in 1..=max_lines + 1 {
            let c = pages.iter().filter(|p| p.lines.len() < x).count() as f64;
            r.point("docs_below_n_pct", x as f64, 100.0 * c / total);
        }
        r.eval = Some(eval);
        Ok(r)
    }

    /// Short queries (one line, half page, full page) against a gallery of
    /// full pages, excluding each query's own page.
    pub fn run_short_query(&self, exp: &ExperimentConfig) -> Result<ExperimentReport> {
        if exp.query_mode == QueryMode::Full {
            let mut r = self.run_page_level(exp)?;
            r.notes.push("full-page queries: identical to page-level retrieval".into());
            return Ok(r);
        }
        self.check_pages()?;
        let budget = self.line_budget(exp);
        let sums = self.line_sums(budget)?;
        let gallery = self.page_globals(budget)?;
        let mut items = Vec::new();
        for p in self.source.corpus.pages(Split::Test) {
            let us = units(&p);
            let parts: Vec<&[EntityId]> = match exp.query_mode {
                QueryMode::OneLine => us.chunks(1).collect(),
                QueryMode::HalfPage => {
                    let (a, b) = us.split_at(us.len().div_ceil(2));
                    [a, b].into_iter().filter(|h| !h.is_empty()).collect()
                }
                QueryMode::Full => unreachable!("handled above"),
            };
            for part in parts {
                let s = sum_in_order(part.iter().map(|u| &sums[u])).expect("non-empty part");
                items.push((part[0].clone(), s));
            }
        }
        let queries = self.globals(items)?;
        let (eval, _) = evaluate_queries(&queries, &gallery, |q, g| q.page_id() == g.page_id(), &DEFAULT_TOP_X)?;
        let gran = exp.query_mode.to_string();
        let mut r = self.report(exp);
        push_eval(&mut r, &eval, &gran);
        // alternative averaging: per page first, then over pages
        let mut per_page: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
        for (q, ap) in &eval.per_query_ap {
            per_page.entry(q.page_id()).or_default().push(*ap);
        }
        let page_means: Vec<f64> = per_page.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        r.push("mAP_page_averaged", &gran, page_means.iter().sum::<f64>() / page_means.len() as f64);
        r.notes.push("mAP pools all fragment queries; mAP_page_averaged averages per page first".into());
        r.eval = Some(eval);
        Ok(r)
    }

    fn word_budget(&self, exp: &ExperimentConfig) -> usize {
        exp.features_per_unit.unwrap_or(self.settings.word_budget)
    }

    /// Leave-one-out retrieval of all test words.
    pub fn run_word_level(&self, exp: &ExperimentConfig) -> Result<ExperimentReport> {
        let (g, _) = self.word_globals(self.word_budget(exp))?;
        if g.len() < 2 {
            return Err(Error::InsufficientCorpus("fewer than two usable word entities".into()));
        }
        let (eval, _) = evaluate_queries(&g, &g, |_, _| false, &DEFAULT_TOP_X)?;
        let mut r = self.report(exp);
        push_eval(&mut r, &eval, "word");
        r.eval = Some(eval);
        Ok(r)
    }

    /// Transcribed test words by instance count, most common first; ties in
    /// lexicographic order.
    pub fn common_words(&self, k: usize) -> Vec<(String, usize)> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (_, t) in self.source.corpus.words(Split::Test) {
            if let Some(t) = t {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut v: Vec<(String, usize)> = counts.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }

    /// Retrieval restricted to instances of one word (or of each of the most
    /// common words), next to the AP the same instances reach when all words
    /// form the gallery.
    pub fn run_word_specific(&self, exp: &ExperimentConfig) -> Result<ExperimentReport> {
        let (g, words) = self.word_globals(self.word_budget(exp))?;
        let targets: Vec<String> = match &exp.word_filter {
            Some(w) => vec![w.clone()],
            None => self.common_words(exp.top_words).into_iter().map(|(w, _)| w).collect(),
        };
        let (all_eval, _) = evaluate_queries(&g, &g, |_, _| false, &[])?;
        let mut r = self.report(exp);
        for w in &targets {
            let subset: Vec<GlobalDescriptor<f64>> = g
                .iter()
                .filter(|d| words.get(&d.entity).and_then(|t| t.as_deref()) == Some(w.as_str()))
                .cloned()
                .collect();
            let eval = match word_eval(w, &subset) {
                Ok(e) => e,
                Err(Error::WordTooRare(_)) if exp.word_filter.is_none() => {
                    r.notes.push(format!("skipped {w:?}: too rare"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let base: Vec<f64> = eval
                .per_query_ap
                .keys()
                .filter_map(|q| all_eval.per_query_ap.get(q))
                .copied()
                .collect();
            r.per_word.insert(w.clone(), eval.map);
            if !base.is_empty() {
                r.per_word_baseline.insert(w.clone(), base.iter().sum::<f64>() / base.len() as f64);
            }
            if exp.word_filter.is_some() {
                r.eval = Some(eval);
            }
        }
        if r.per_word.is_empty() {
            return Err(Error::WordTooRare(targets.join(" ")));
        }
        let specific: Vec<f64> = r.per_word.values().copied().collect();
        let shared: Vec<(&String, &f64)> = r.per_word.iter().filter(|(w, _)| r.per_word_baseline.contains_key(*w)).collect();
        let macro_specific = specific.iter().sum::<f64>() / specific.len() as f64;
        let macro_base = if shared.is_empty() {
            f64::NAN
        } else {
            shared.iter().map(|(w, _)| r.per_word_baseline[*w]).sum::<f64>() / shared.len() as f64
        };
        r.push("mAP", "word-specific", macro_specific);
        r.push("mAP_all_words", "word-specific", macro_base);
        r.push("words", "word-specific", specific.len() as f64);
        Ok(r)
    }

    /// Page- or line-level mAP for each per-line feature budget.
    pub fn run_feature_sweep(&self, exp: &ExperimentConfig) -> Result<ExperimentReport> {
        let mut r = self.report(exp);
        let gran = exp.granularity;
        for &b in &exp.sweep {
            let g = match gran {
                Granularity::Page => self.page_globals(b)?,
                Granularity::Line => self.line_globals(b)?,
                Granularity::Word => return Err(Error::InvalidConfig("sweeps run at page or line granularity".into())),
            };
            let (eval, _) = evaluate_queries(&g, &g, |_, _| false, &[1])?;
            r.push(format!("mAP@{b}"), gran.to_string(), eval.map);
            r.point("features_per_line", b as f64, eval.map);
        }
        Ok(r)
    }
}

fn settings_share(total: usize, parts: usize) -> usize {
    total.div_ceil(parts.max(1)).max(1)
}

fn word_eval(w: &str, subset: &[GlobalDescriptor<f64>]) -> Result<EvalResult> {
    let writers: BTreeSet<&str> = subset.iter().map(|d| d.entity.writer()).collect();
    if writers.len() < 2 {
        return Err(Error::WordTooRare(w.to_string()));
    }
    match evaluate_queries(subset, subset, |_, _| false, &DEFAULT_TOP_X) {
        Ok((e, _)) => Ok(e),
        Err(Error::NoQueries) => Err(Error::WordTooRare(w.to_string())),
        Err(e) => Err(e),
    }
}

fn push_eval(r: &mut ExperimentReport, eval: &EvalResult, gran: &str) {
    r.push("mAP", gran, eval.map);
    for (x, v) in &eval.top_x {
        r.push(format!("top-{x}"), gran, *v);
    }
    r.push("queries", gran, eval.per_query_ap.len() as f64);
    r.push("gallery", gran, eval.gallery_size as f64);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};

    fn small() -> Corpus {
        let cfg = SynthConfig {
            writers: 4,
            train_writers: 3,
            pages_per_writer: 2,
            lines_per_page: 3,
            words_per_line: 2,
            seed: 3,
            ..SynthConfig::default()
        };
        Corpus::from_synth(&generate_synthetic_corpus(&cfg).unwrap()).unwrap()
    }

    fn settings() -> PipelineSettings {
        PipelineSettings {
            n_clusters: 8,
            kmeans_sample: 4000,
            line_budget: 300,
            word_budget: 100,
            out_dim: 16,
            ..PipelineSettings::default()
        }
    }

    #[test]
    fn merge_of_one_equals_line_level() {
        let c = small();
        let wb = Workbench::fit(&c, None, settings()).unwrap();
        let line = wb.run(&ExperimentConfig::of_kind(ExperimentKind::Line)).unwrap();
        let merge = wb
            .run(&ExperimentConfig {
                merge_n: Some(1),
                ..ExperimentConfig::of_kind(ExperimentKind::LineMerge)
            })
            .unwrap();
        assert_eq!(line.eval.as_ref().unwrap().per_query_ap, merge.eval.as_ref().unwrap().per_query_ap);
        assert_eq!(line.metric("mAP"), merge.metric("mAP"));
        let page = wb.run(&ExperimentConfig::of_kind(ExperimentKind::Page)).unwrap();
        let fp = wb.run(&ExperimentConfig::of_kind(ExperimentKind::ShortQuery)).unwrap();
        assert_eq!(page.rows, fp.rows);
    }

    #[test]
    fn merge_drops_remainders() {
        let c = small();
        let wb = Workbench::fit(&c, None, settings()).unwrap();
        let exp = ExperimentConfig {
            merge_n: Some(2),
            ..ExperimentConfig::of_kind(ExperimentKind::LineMerge)
        };
        let r = wb.run(&exp).unwrap();
        // 8 pages of 3 lines: one group each
        assert_eq!(r.eval.as_ref().unwrap().relevant.len(), 8);
        let too_big = ExperimentConfig {
            merge_n: Some(4),
            ..exp
        };
        assert!(matches!(wb.run(&too_big), Err(Error::EmptyAfterMerge(4))));
    }

    #[test]
    fn rare_word_is_rejected() {
        let c = small();
        let wb = Workbench::fit(&c, None, settings()).unwrap();
        let exp = ExperimentConfig {
            word_filter: Some("no-such-word".into()),
            ..ExperimentConfig::of_kind(ExperimentKind::WordSpecific)
        };
        assert!(matches!(wb.run(&exp), Err(Error::WordTooRare(_))));
    }

    #[test]
    fn common_words_are_sorted() {
        let c = small();
        let wb = Workbench::fit(&c, None, settings()).unwrap();
        let w = wb.common_words(5);
        for pair in w.windows(2) {
            assert!(pair[0].1 > pair[1].1 || (pair[0].1 == pair[1].1 && pair[0].0 < pair[1].0));
        }
    }

    #[test]
    fn large_budget_equals_unbudgeted() {
        let c = small();
        let wb = Workbench::fit(&c, None, settings()).unwrap();
        let a = wb.page_globals(1_000_000).unwrap();
        let b = wb.page_globals(10_000_000).unwrap();
        assert_eq!(a, b);
    }
}
