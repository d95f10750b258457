use crate::error::{Error, Result};
use crate::losses::{fit, FitOutcome};
use crate::merge::{backfill_curve, transform_query, MergeInputs, SliceEval};
use crate::metrics::{evaluate, BackfillCurve, EvalReport, GalleryLabels};
use crate::nn::Matrix;
use crate::retrieval::{rank_queries, DistanceKind};
use crate::store::{EmbeddingPairSet, LabeledEmbeddings};
use crate::synthetic::{generate, self_test, Benchmark, Side};

use super::config::{ExperimentConfig, Method};

/// Benchmark data and model self-tests of one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub benchmark: Benchmark,
    /// `M(φ^old(Q), φ^old(G))`.
    pub old_selftest: EvalReport,
    /// `M(φ^new(Q), φ^new(G))`.
    pub new_selftest: EvalReport,
}

pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let benchmark = generate(&config.scenario(seed)).map_err(|e| e.at_stage(format!("seed {seed}: generate")))?;
    let tag = |e: Error| e.at_stage(format!("seed {seed}: self-test"));
    let old_selftest = self_test(Side::Old, &benchmark.query, &benchmark.gallery, config.distance).map_err(tag)?;
    let new_selftest = self_test(Side::New, &benchmark.query, &benchmark.gallery, config.distance).map_err(tag)?;
    Ok(SeedData {
        seed,
        benchmark,
        old_selftest,
        new_selftest,
    })
}

/// Trains the transforms a method needs; `None` for `rm_naive`.
pub fn train_method(config: &ExperimentConfig, data: &SeedData, method: Method) -> Result<Option<FitOutcome>> {
    let Some(kind) = method.loss() else {
        return Ok(None);
    };
    fit(kind, &data.benchmark.train, &config.train(data.seed), config.distance)
        .map(Some)
        .map_err(|e| e.at_stage(format!("seed {}: train {method}", data.seed)))
}

/// Per-query model invocations made while embedding the query set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Extractions {
    pub old_model: usize,
    pub new_model: usize,
}

/// Hands out query features one model invocation at a time and counts them.
struct QueryEncoder<'a> {
    query: &'a EmbeddingPairSet,
    counts: Extractions,
}

impl<'a> QueryEncoder<'a> {
    fn old_model(&mut self, i: usize) -> &'a [f32] {
        self.counts.old_model += 1;
        self.query.old_side().row(i)
    }

    fn new_model(&mut self, i: usize) -> &'a [f32] {
        self.counts.new_model += 1;
        self.query.new_side().row(i)
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub curve: BackfillCurve,
    pub slices: Vec<SliceEval>,
    pub extractions: Extractions,
    /// Self-test of the backward system: its queries against `φ^old(G)`.
    pub backward_selftest: EvalReport,
    /// Self-test of the new system: its queries against its own gallery.
    pub new_system_selftest: EvalReport,
}

/// Embeds the queries the way `method` would online and evaluates the
/// merge over the backfill grid.
pub fn evaluate_method(
    config: &ExperimentConfig,
    data: &SeedData,
    method: Method,
    trained: Option<&FitOutcome>,
) -> Result<MethodRun> {
    let tag = |e: Error| e.at_stage(format!("seed {}: evaluate {method}", data.seed));
    if method.loss().is_some() != trained.is_some() {
        return Err(tag(Error::invalid("trained transforms do not match the method")));
    }
    let query = &data.benchmark.query;
    let gallery = &data.benchmark.gallery;
    let mut encoder = QueryEncoder {
        query,
        counts: Extractions::default(),
    };
    let d_old = gallery.old_side().dim();
    let d_new = query.new_side().dim();
    let mut backward = Vec::with_capacity(query.len() * d_old);
    let mut new_side = Vec::with_capacity(query.len() * d_new);
    let new_gallery = match trained {
        None => {
            for i in 0..query.len() {
                backward.extend_from_slice(encoder.old_model(i));
                new_side.extend_from_slice(encoder.new_model(i));
            }
            gallery.new_side().clone()
        }
        Some(out) => {
            for i in 0..query.len() {
                let q = encoder.new_model(i);
                let (b, n) = transform_query(q, &out.psi, out.rho.as_ref()).map_err(tag)?;
                backward.extend(b);
                new_side.extend(n);
            }
            match &out.rho {
                Some(rho) => {
                    let g = Matrix::from_f32_rows(d_new, gallery.new_side().vectors()).map_err(tag)?;
                    let g = rho.infer(&g).map_err(tag)?;
                    gallery.new_side().with_vectors(g.cols(), g.to_f32()).map_err(tag)?
                }
                None => gallery.new_side().clone(),
            }
        }
    };
    let backward_queries = query.old_side().with_vectors(d_old, backward).map_err(tag)?;
    let new_queries = query.new_side().with_vectors(new_gallery.dim(), new_side).map_err(tag)?;
    let inputs = MergeInputs {
        backward_queries: &backward_queries,
        new_queries: &new_queries,
        old_gallery: gallery.old_side(),
        new_gallery: &new_gallery,
    };
    let (curve, slices) = backfill_curve(
        &inputs,
        config.distance,
        data.seed,
        &data.old_selftest.top1_correct,
    )
    .map_err(tag)?;
    let backward_selftest =
        system_selftest(&backward_queries, gallery.old_side(), config.distance).map_err(tag)?;
    let new_system_selftest = system_selftest(&new_queries, &new_gallery, config.distance).map_err(tag)?;
    Ok(MethodRun {
        method,
        curve,
        slices,
        extractions: encoder.counts,
        backward_selftest,
        new_system_selftest,
    })
}

fn system_selftest(queries: &LabeledEmbeddings, gallery: &LabeledEmbeddings, kind: DistanceKind) -> Result<EvalReport> {
    let rankings = rank_queries(queries, gallery, kind)?;
    evaluate(
        rankings.iter().map(|r| r.ids()),
        queries.labels(),
        &GalleryLabels::new(gallery),
    )
}
