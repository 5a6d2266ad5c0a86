//! Streams an ordered dataset through an engine and scores the result.

use crate::engine::{Engine, EngineConfig, TriggerEvent};
use crate::error::{OcfError, Result};
use crate::eval::{evaluate, majority_vote_f1, EvalReport, MetricsRow, PointRow};
use crate::gaussian::Vector;
use crate::stream::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Relabel everything seen so far after each trigger and record its F1.
    pub score_every_trigger: bool,
    /// Keep per-observation labels in the returned events.
    pub keep_labels: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            score_every_trigger: true,
            keep_labels: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub events: Vec<TriggerEvent>,
    pub metrics: Vec<MetricsRow>,
    /// Final-model label for every observation of the stream, in stream order.
    pub predictions: Vec<usize>,
    pub engine: Engine,
}

impl RunResult {
    pub fn final_f1(&self, stream: &[Observation]) -> Result<f64> {
        let truth: Vec<Option<u32>> = stream.iter().map(|o| o.label).collect();
        Ok(majority_vote_f1(&self.predictions, &truth)?.macro_f1)
    }

    pub fn report(&self, stream: &[Observation]) -> Result<EvalReport> {
        let points = stream
            .iter()
            .zip(&self.predictions)
            .map(|(o, &pred)| PointRow {
                id: o.id.clone(),
                x: o.easting,
                y: o.northing,
                truth: o.label,
                pred,
            })
            .collect();
        evaluate(points, self.metrics.clone())
    }
}

pub fn run_stream(stream: &[Observation], config: &EngineConfig, opts: RunOptions) -> Result<RunResult> {
    run_engine(Engine::new(config.clone())?, stream, opts)
}

/// Continues `engine` over `stream`. Observations left in the buffer at the
/// end are labeled by the final model without a trigger.
pub fn run_engine(mut engine: Engine, stream: &[Observation], opts: RunOptions) -> Result<RunResult> {
    let features: Vec<Vector> = stream.iter().map(|o| Vector::from_column_slice(&o.feature)).collect();
    let truth: Vec<Option<u32>> = stream.iter().map(|o| o.label).collect();
    let labeled = truth.iter().any(Option::is_some);
    let mut events = Vec::new();
    let mut metrics = Vec::new();
    for (i, obs) in stream.iter().enumerate() {
        let Some(mut ev) = engine.ingest(obs)? else {
            continue;
        };
        let seen = i + 1;
        let f1 = if opts.score_every_trigger && labeled && truth[..seen].iter().any(Option::is_some) {
            let pred = engine.infer_batch(&features[..seen])?;
            Some(majority_vote_f1(&pred, &truth[..seen])?.macro_f1)
        } else {
            None
        };
        metrics.push(MetricsRow {
            trigger_index: ev.trigger_index,
            cumulative: ev.cumulative_count,
            n_clusters: ev.n_clusters_after,
            f1,
            wall_time_ms: ev.wall_time_ms,
        });
        if !opts.keep_labels {
            ev.labels_emitted = Vec::new();
        }
        events.push(ev);
    }
    if engine.trigger_index() == 0 {
        return Err(OcfError::InvalidParameter(format!(
            "stream of {} observations never filled a batch of {}",
            stream.len(),
            engine.config().batch_size
        )));
    }
    let predictions = engine.infer_batch(&features)?;
    Ok(RunResult {
        events,
        metrics,
        predictions,
        engine,
    })
}
