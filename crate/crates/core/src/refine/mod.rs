//! The generate → critique → refine loop.
//!
//! One run starts from the task's initial context, generates `y0`, and then
//! for each iteration `i < max_iterations`:
//!
//! 1. engages the selected ensemble members to critique `y_i`,
//! 2. stops if the task predicate is satisfied,
//! 3. folds the non-ok critiques into a refined prompt and generates `y_{i+1}`.
//!
//! A run that never satisfies the predicate ends with `max_iterations + 1`
//! records, the last one uncritiqued.

pub mod prompt;
mod types;

use std::sync::Arc;
use std::time::Instant;

use futures::future::join_all;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::Backend;
use crate::error::ConfigError;
use crate::tasks::TaskAdapter;
use crate::text::CanonicalWriter;

pub use prompt::parse_verdict;
pub use types::{
    CotMode, Critique, CritiqueSet, EnsembleSpec, FewShotExample, GenerationParams, IterationRecord,
    LoopConfig, PromptContext, RefinementTrace, StopReason, StopVariant, Verdict,
    STEP_BY_STEP_SUFFIX,
};

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input must be non-empty")]
    EmptyInput,
    #[error("every critique is ok; there is nothing to refine")]
    NothingToRefine,
}

/// Members engaged at one iteration, in ensemble order.
///
/// With `subset_size < full size` a seeded subset is drawn per iteration; the
/// chosen members keep their relative ensemble order.
pub fn select_members(ensemble: &EnsembleSpec, selection_seed: u64) -> Vec<Arc<dyn Backend>> {
    let members = ensemble.members();
    let t = ensemble.effective_subset_size().min(members.len());
    if t >= members.len() {
        return members;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(selection_seed);
    let mut picked = index::sample(&mut rng, members.len(), t).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| Arc::clone(&members[i])).collect()
}

/// Seed for member selection at `iteration` of example `example_id`.
pub fn selection_seed(seed: u64, example_id: &str, iteration: u32) -> u64 {
    let digest = CanonicalWriter::new()
        .field("member-selection")
        .field(&seed.to_string())
        .field(example_id)
        .field(&iteration.to_string())
        .digest_hex();
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Queries every selected member concurrently; results keep ensemble order.
/// A failing member yields an `unparseable` critique describing the failure.
pub async fn collect_critiques(
    context: &PromptContext,
    output: &str,
    members: &[Arc<dyn Backend>],
    task: &TaskAdapter,
    params: &GenerationParams,
    iteration: u32,
) -> CritiqueSet {
    let critique_ctx = task.build_critique_prompt(context, output);
    let messages = critique_ctx.to_messages();
    let calls = members.iter().map(|m| {
        let messages = &messages;
        async move { (m.id().to_owned(), m.complete(messages, params).await) }
    });
    let mut failures = 0;
    let critiques = join_all(calls)
        .await
        .into_iter()
        .map(|(critic_id, result)| match result {
            Ok(body) => Critique {
                verdict: parse_verdict(&body),
                critic_id,
                body,
                iteration,
            },
            Err(e) => {
                failures += 1;
                Critique {
                    critic_id,
                    verdict: Verdict::Unparseable,
                    body: format!("critic failure: {e}"),
                    iteration,
                }
            }
        })
        .collect();
    if failures > 0 {
        tracing::warn!(iteration, failures, "critics failed; continuing with partial feedback");
    }
    CritiqueSet::new(iteration, critiques)
}

/// Task predicate applied to the latest record.
pub fn is_satisfactory(
    critiques: &CritiqueSet,
    task: &TaskAdapter,
    records: &[IterationRecord],
) -> Option<StopReason> {
    if critiques.is_empty() || records.is_empty() {
        return None;
    }
    task.check_stop(critiques, records)
}

/// Feedback text: the previous output, then every non-ok critique verbatim,
/// labeled `Critic k (<id>):` with k its 1-based position in the set.
pub fn feedback_block(output: &str, critiques: &CritiqueSet) -> String {
    let mut block = String::new();
    block.push_str("=== PREVIOUS OUTPUT ===\n");
    block.push_str(output);
    block.push_str("\n=== FEEDBACK ===");
    let mut any = false;
    for (k, c) in critiques.iter().enumerate() {
        if c.verdict.is_ok() {
            continue;
        }
        any = true;
        block.push_str(&format!("\nCritic {} ({}):\n", k + 1, c.critic_id));
        block.push_str(&c.body);
        block.push('\n');
    }
    if !any {
        block.push_str(
            "\nNo critic raised a specific issue, but the output does not yet meet the task requirement.\n",
        );
    }
    block
}

/// Refined prompt x′ built from the task's refine template.
///
/// Rejects a set in which every critique is ok.
pub fn refine_prompt(
    context: &PromptContext,
    output: &str,
    critiques: &CritiqueSet,
    task: &TaskAdapter,
) -> Result<PromptContext, RefineError> {
    if critiques.all_ok() {
        return Err(RefineError::NothingToRefine);
    }
    Ok(task.build_refine_prompt(context, feedback_block(output, critiques)))
}

/// Runs the loop for one input. Configuration problems are returned as errors
/// before any backend call; backend failures end the run with a
/// `backend_error` stop reason and whatever records completed.
pub async fn run_refinement(
    example_id: &str,
    input: &str,
    seed: u64,
    task: &TaskAdapter,
    ensemble: &EnsembleSpec,
    config: &LoopConfig,
) -> Result<RefinementTrace, RefineError> {
    if input.trim().is_empty() {
        return Err(RefineError::EmptyInput);
    }
    ensemble.validate()?;
    config.validate()?;
    task.check_runnable()?;

    let started = Instant::now();
    let context = task.build_initial_prompt(input);
    let mut records = Vec::new();
    let stop_reason = 'run: {
        let first = match generate(&context, ensemble, task, config, 0).await {
            Ok(record) => record,
            Err(record) => {
                let reason = StopReason::new(
                    StopVariant::BackendError,
                    record.error.clone().unwrap_or_default(),
                );
                records.push(record);
                break 'run reason;
            }
        };
        records.push(first);

        for i in 0..config.max_iterations {
            let members = select_members(ensemble, selection_seed(seed, example_id, i));
            let output = records[i as usize].output.clone();
            let critiques =
                collect_critiques(&context, &output, &members, task, &config.critic_params, i).await;
            let stop = is_satisfactory(&critiques, task, &records);
            let refined = match refine_prompt(&context, &output, &critiques, task) {
                Ok(ctx) => ctx,
                Err(_) => task.build_refine_prompt(&context, feedback_block(&output, &critiques)),
            };
            records[i as usize].critiques = Some(critiques);
            if let Some(reason) = stop {
                break 'run reason;
            }
            match generate(&refined, ensemble, task, config, i + 1).await {
                Ok(record) => records.push(record),
                Err(record) => {
                    break 'run StopReason::new(
                        StopVariant::BackendError,
                        record.error.unwrap_or_default(),
                    );
                }
            }
        }
        StopReason::new(
            StopVariant::MaxIterations,
            format!("reached {} refinement iterations", config.max_iterations),
        )
    };

    let final_output = records.last().map(|r| r.output.clone()).unwrap_or_default();
    Ok(RefinementTrace {
        example_id: example_id.to_owned(),
        task_name: task.name().to_owned(),
        input: input.to_owned(),
        references: None,
        seed,
        stop_reason,
        final_output,
        records,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}

/// Runs the generator on `context`. On failure the returned record carries
/// the error marker and an empty output.
async fn generate(
    context: &PromptContext,
    ensemble: &EnsembleSpec,
    task: &TaskAdapter,
    config: &LoopConfig,
    index: u32,
) -> Result<IterationRecord, IterationRecord> {
    let messages = context.to_messages();
    let prompt_digest = types::messages_digest(&messages);
    let failed = |error: String| IterationRecord {
        index,
        prompt_digest: prompt_digest.clone(),
        output: String::new(),
        task_score: None,
        extracted_answer: None,
        critiques: None,
        error: Some(error),
    };
    match ensemble.generator.complete(&messages, &config.params).await {
        Ok(output) if output.trim().is_empty() => Err(failed(format!(
            "generator `{}` returned an empty completion",
            ensemble.generator.id()
        ))),
        Ok(output) => {
            let (task_score, extracted_answer) = task.annotate(&output).await;
            Ok(IterationRecord {
                index,
                prompt_digest: prompt_digest.clone(),
                output,
                task_score,
                extracted_answer,
                critiques: None,
                error: None,
            })
        }
        Err(e) => Err(failed(e.to_string())),
    }
}

/// A single generation with no critique loop (the vanilla baseline).
pub async fn run_vanilla(
    example_id: &str,
    input: &str,
    seed: u64,
    task: &TaskAdapter,
    generator: &Arc<dyn Backend>,
    params: &GenerationParams,
) -> Result<RefinementTrace, RefineError> {
    if input.trim().is_empty() {
        return Err(RefineError::EmptyInput);
    }
    params.validate()?;
    task.check_runnable()?;
    let started = Instant::now();
    let ensemble = EnsembleSpec::new(Arc::clone(generator), Vec::new());
    let config = LoopConfig {
        params: params.clone(),
        ..LoopConfig::default()
    };
    let context = task.build_initial_prompt(input);
    let (record, stop_reason) = match generate(&context, &ensemble, task, &config, 0).await {
        Ok(r) => (
            r,
            StopReason::new(StopVariant::MaxIterations, "vanilla generation; no refinement"),
        ),
        Err(r) => {
            let reason = StopReason::new(StopVariant::BackendError, r.error.clone().unwrap_or_default());
            (r, reason)
        }
    };
    Ok(RefinementTrace {
        example_id: example_id.to_owned(),
        task_name: task.name().to_owned(),
        input: input.to_owned(),
        references: None,
        seed,
        stop_reason,
        final_output: record.output.clone(),
        records: vec![record],
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, BackendErrorKind, ChatMessage, FnBackend, ScriptedBackend};
    use crate::tasks::Satisfaction;
    use crate::toxicity::{ScoreProvider, ScorerError, ToxicityScore, ToxicityScorer};
    use async_trait::async_trait;
    use proptest::prelude::*;
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    struct TableScorer(HashMap<String, f64>);

    #[async_trait]
    impl ToxicityScorer for TableScorer {
        fn provider(&self) -> ScoreProvider {
            ScoreProvider::Lexicon
        }
        async fn score(&self, text: &str) -> Result<ToxicityScore, ScorerError> {
            self.0
                .get(text)
                .map(|&value| ToxicityScore { value, provider: ScoreProvider::Lexicon })
                .ok_or_else(|| ScorerError::Malformed(text.to_owned()))
        }
    }

    struct Delayed {
        id: String,
        delay_ms: u64,
    }

    #[async_trait]
    impl Backend for Delayed {
        fn id(&self) -> &str {
            &self.id
        }
        fn model_name(&self) -> &str {
            "delayed"
        }
        async fn complete(&self, _: &[ChatMessage], _: &GenerationParams) -> Result<String, BackendError> {
            tokio::time::sleep(Duration::from_millis(self.delay_ms)).await;
            Ok(format!("VERDICT: ISSUES\nfrom {}", self.id))
        }
    }

    fn sequence(id: &str, outputs: &[&str]) -> Arc<FnBackend> {
        let outputs: Vec<String> = outputs.iter().map(|s| s.to_string()).collect();
        let n = AtomicUsize::new(0);
        Arc::new(FnBackend::new(id, move |_, _| {
            let i = n.fetch_add(1, Ordering::SeqCst);
            Ok(outputs[i.min(outputs.len() - 1)].clone())
        }))
    }

    fn issues(id: &str) -> Arc<dyn Backend> {
        Arc::new(ScriptedBackend::new(id, format!("VERDICT: ISSUES\n{id} objects")))
    }

    fn set(verdicts: &[(&str, Verdict, &str)]) -> CritiqueSet {
        CritiqueSet::new(
            0,
            verdicts
                .iter()
                .map(|(id, v, body)| Critique {
                    critic_id: id.to_string(),
                    verdict: *v,
                    body: body.to_string(),
                    iteration: 0,
                })
                .collect(),
        )
    }

    #[tokio::test]
    async fn toxicity_stops_once_strictly_below_threshold() {
        let outs = ["t30", "t20", "t10", "t00", "never"];
        let table = [("t30", 0.30), ("t20", 0.20), ("t10", 0.10), ("t00", 0.0), ("never", 0.5)]
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        let task = TaskAdapter::toxicity(Arc::new(TableScorer(table)));
        let ens = EnsembleSpec::new(sequence("gen", &outs), vec![issues("c1")]).with_generator_as_critic(false);
        let trace = run_refinement("e", "some prompt", 1, &task, &ens, &LoopConfig::default())
            .await
            .unwrap();
        assert_eq!(trace.stop_reason.variant, StopVariant::Satisfied);
        assert_eq!(trace.records.len(), 4);
        assert_eq!(trace.final_output, "t00");
        assert!(trace.records.iter().all(|r| r.critiques.is_some()));
    }

    #[tokio::test]
    async fn qa_stops_on_stable_answer() {
        let outs = ["The answer is London.", "The answer is Paris.", "So the answer is paris", "x"];
        let task = TaskAdapter::factual_qa();
        let ens = EnsembleSpec::new(sequence("gen", &outs), vec![issues("c1")]).with_generator_as_critic(false);
        let trace = run_refinement("q", "Capital of France?", 1, &task, &ens, &LoopConfig::default())
            .await
            .unwrap();
        assert_eq!(trace.stop_reason.variant, StopVariant::StableAnswer);
        assert_eq!(trace.records.len(), 3);
        let answers: Vec<_> = trace.records.iter().map(|r| r.extracted_answer.clone().unwrap()).collect();
        assert_eq!(answers, ["london", "paris", "paris"]);
    }

    #[tokio::test]
    async fn never_satisfied_runs_to_the_bound() {
        let ens = EnsembleSpec::new(Arc::new(ScriptedBackend::new("gen", "draft")), vec![issues("c1")])
            .with_generator_as_critic(false);
        let trace = run_refinement("g", "write", 1, &TaskAdapter::generic(), &ens, &LoopConfig::default())
            .await
            .unwrap();
        assert_eq!(trace.stop_reason.variant, StopVariant::MaxIterations);
        assert_eq!(trace.records.len(), 5);
        assert!(trace.records[..4].iter().all(|r| r.critiques.is_some()));
        assert!(trace.records[4].critiques.is_none());
        let indices: Vec<u32> = trace.records.iter().map(|r| r.index).collect();
        assert_eq!(indices, [0, 1, 2, 3, 4]);
    }

    #[tokio::test]
    async fn unanimous_ok_short_circuits() {
        let gen = Arc::new(ScriptedBackend::new("gen", "VERDICT: OK"));
        let ens = EnsembleSpec::new(gen.clone(), vec![Arc::new(ScriptedBackend::new("c", "VERDICT: ok"))]);
        let trace = run_refinement("g", "write", 1, &TaskAdapter::generic(), &ens, &LoopConfig::default())
            .await
            .unwrap();
        assert_eq!(trace.stop_reason.variant, StopVariant::Satisfied);
        assert_eq!(trace.records.len(), 1);
        // one generation plus the generator's own critique
        assert_eq!(gen.call_count(), 2);
    }

    #[test]
    fn feedback_is_verbatim_ordered_and_skips_ok() {
        let cs = set(&[
            ("a", Verdict::Issues, "VERDICT: ISSUES\nfirst {output} body"),
            ("b", Verdict::Ok, "VERDICT: OK\nfine"),
            ("c", Verdict::Unparseable, "rambling"),
        ]);
        let block = feedback_block("prev", &cs);
        assert_eq!(
            block,
            "=== PREVIOUS OUTPUT ===\nprev\n=== FEEDBACK ===\nCritic 1 (a):\nVERDICT: ISSUES\nfirst {output} body\n\nCritic 3 (c):\nrambling\n"
        );
        let task = TaskAdapter::generic();
        let ctx = task.build_initial_prompt("in");
        let refined = refine_prompt(&ctx, "prev", &cs, &task).unwrap();
        let rendered = refined.render_user();
        assert!(rendered.contains("first {output} body"));
        assert!(!rendered.contains("fine"));
    }

    #[test]
    fn all_ok_set_is_rejected() {
        let task = TaskAdapter::generic();
        let ctx = task.build_initial_prompt("in");
        let cs = set(&[("a", Verdict::Ok, "VERDICT: OK")]);
        assert_eq!(refine_prompt(&ctx, "o", &cs, &task), Err(RefineError::NothingToRefine));
    }

    #[tokio::test]
    async fn critique_order_survives_uneven_latency() {
        let members: Vec<Arc<dyn Backend>> = (0..5)
            .map(|i| Arc::new(Delayed { id: format!("c{i}"), delay_ms: 50 - 10 * i }) as Arc<dyn Backend>)
            .collect();
        let task = TaskAdapter::generic();
        let ctx = task.build_initial_prompt("in");
        let cs = collect_critiques(&ctx, "out", &members, &task, &GenerationParams::default(), 2).await;
        let ids: Vec<_> = cs.iter().map(|c| c.critic_id.as_str()).collect();
        assert_eq!(ids, ["c0", "c1", "c2", "c3", "c4"]);
        assert!(cs.iter().all(|c| c.iteration == 2 && c.verdict == Verdict::Issues));
    }

    #[tokio::test]
    async fn failing_critic_becomes_unparseable() {
        let bad: Arc<dyn Backend> = Arc::new(FnBackend::new("bad", |_, _| Err("boom".into())));
        let task = TaskAdapter::generic();
        let ctx = task.build_initial_prompt("in");
        let members = vec![issues("ok"), bad];
        let cs = collect_critiques(&ctx, "out", &members, &task, &GenerationParams::default(), 0).await;
        assert_eq!(cs.len(), 2);
        assert_eq!(cs.critiques[1].verdict, Verdict::Unparseable);
        assert!(cs.critiques[1].body.contains("boom"));
    }

    #[tokio::test]
    async fn invalid_config_fails_before_any_call() {
        let gen = Arc::new(ScriptedBackend::new("gen", "x"));
        let ens = EnsembleSpec::new(gen.clone(), vec![issues("c")]).with_subset_size(3);
        let err = run_refinement("g", "in", 1, &TaskAdapter::generic(), &ens, &LoopConfig::default())
            .await
            .unwrap_err();
        assert!(matches!(err, RefineError::Config(_)));
        let ens = EnsembleSpec::new(gen.clone(), vec![]);
        let err = run_refinement("g", "  ", 1, &TaskAdapter::generic(), &ens, &LoopConfig::default())
            .await
            .unwrap_err();
        assert_eq!(err, RefineError::EmptyInput);
        assert_eq!(gen.call_count(), 0);
    }

    #[tokio::test]
    async fn toxicity_without_scorer_is_a_config_error() {
        let task = TaskAdapter::generic()
            .with_satisfaction(Satisfaction::ToxicityBelow { threshold: 0.1 })
            .unwrap();
        let ens = EnsembleSpec::new(Arc::new(ScriptedBackend::new("gen", "x")), vec![]);
        let err = run_refinement("g", "in", 1, &task, &ens, &LoopConfig::default()).await.unwrap_err();
        assert!(matches!(err, RefineError::Config(_)));
    }

    #[tokio::test]
    async fn generator_failure_ends_with_backend_error() {
        let n = AtomicUsize::new(0);
        let gen: Arc<dyn Backend> = Arc::new(FnBackend::new("gen", move |_, _| {
            match n.fetch_add(1, Ordering::SeqCst) {
                0 => Ok("draft".into()),
                1 => Err("down".into()),
                _ => Ok("VERDICT: ISSUES".into()),
            }
        }));
        let ens = EnsembleSpec::new(gen, vec![issues("c")]).with_generator_as_critic(false);
        let trace = run_refinement("g", "in", 1, &TaskAdapter::generic(), &ens, &LoopConfig::default())
            .await
            .unwrap();
        assert_eq!(trace.stop_reason.variant, StopVariant::BackendError);
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.final_output, "draft");

        let dead: Arc<dyn Backend> = Arc::new(FnBackend::new("gen", |_, _| Err("down".into())));
        let ens = EnsembleSpec::new(dead, vec![]);
        let trace = run_refinement("g", "in", 1, &TaskAdapter::generic(), &ens, &LoopConfig::default())
            .await
            .unwrap();
        assert_eq!(trace.stop_reason.variant, StopVariant::BackendError);
        assert_eq!(trace.records.len(), 1);
        assert!(trace.records[0].error.is_some());
    }

    #[tokio::test]
    async fn empty_completion_counts_as_failure() {
        let ens = EnsembleSpec::new(Arc::new(ScriptedBackend::new("gen", "  ")), vec![]);
        let trace = run_refinement("g", "in", 1, &TaskAdapter::generic(), &ens, &LoopConfig::default())
            .await
            .unwrap();
        assert_eq!(trace.stop_reason.variant, StopVariant::BackendError);
    }

    #[test]
    fn subset_selection_is_seeded_sized_and_ordered() {
        let gen = Arc::new(ScriptedBackend::new("m", "x"));
        let critics = (1..=5).map(|i| issues(&format!("l{i}"))).collect();
        let ens = EnsembleSpec::new(gen, critics).with_subset_size(3);
        let ids = |seed| -> Vec<String> {
            select_members(&ens, seed).iter().map(|b| b.id().to_owned()).collect()
        };
        let order = ["m", "l1", "l2", "l3", "l4", "l5"];
        let mut distinct = std::collections::HashSet::new();
        for seed in 0..50 {
            let picked = ids(seed);
            assert_eq!(picked, ids(seed));
            assert_eq!(picked.len(), 3);
            let pos: Vec<usize> = picked.iter().map(|p| order.iter().position(|o| o == p).unwrap()).collect();
            assert!(pos.windows(2).all(|w| w[0] < w[1]));
            distinct.insert(picked);
        }
        assert!(distinct.len() > 1);
        assert_ne!(selection_seed(1, "a", 0), selection_seed(1, "a", 1));
        assert_ne!(selection_seed(1, "a", 0), selection_seed(1, "b", 0));
    }

    #[tokio::test]
    async fn vanilla_is_one_record() {
        let gen: Arc<dyn Backend> = Arc::new(ScriptedBackend::new("gen", "draft"));
        let trace = run_vanilla("v", "in", 0, &TaskAdapter::generic(), &gen, &GenerationParams::default())
            .await
            .unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.stop_reason.variant, StopVariant::MaxIterations);
    }

    #[tokio::test]
    async fn reruns_are_identical_apart_from_timing() {
        let make = || {
            let critics = (1..=4).map(|i| issues(&format!("l{i}"))).collect();
            EnsembleSpec::new(Arc::new(ScriptedBackend::new("m", "draft")), critics).with_subset_size(2)
        };
        let run = |ens: EnsembleSpec| async move {
            let mut t = run_refinement("d", "in", 9, &TaskAdapter::generic(), &ens, &LoopConfig::default())
                .await
                .unwrap();
            t.wall_time_ms = 0;
            t.to_json_line()
        };
        assert_eq!(run(make()).await, run(make()).await);
    }

    #[test]
    fn backend_error_kind_display_is_stable() {
        let e = BackendError::new("x", 2, BackendErrorKind::Failed("y".into()));
        assert!(e.to_string().contains('x'));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn records_never_exceed_bound(max in 1u32..7, critics in 0usize..4, ok_after in 0usize..10) {
            let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
            let n = AtomicUsize::new(0);
            let critic: Arc<dyn Backend> = Arc::new(FnBackend::new("c", move |_, _| {
                let k = n.fetch_add(1, Ordering::SeqCst);
                Ok(if k >= ok_after { "VERDICT: OK" } else { "VERDICT: ISSUES\nno" }.into())
            }));
            let crit = vec![critic; critics];
            let ens = EnsembleSpec::new(Arc::new(ScriptedBackend::new("m", "VERDICT: OK")), crit);
            let cfg = LoopConfig::default().with_max_iterations(max);
            let trace = rt
                .block_on(run_refinement("p", "in", 0, &TaskAdapter::generic(), &ens, &cfg))
                .unwrap();
            prop_assert!(trace.records.len() <= max as usize + 1);
            if trace.stop_reason.variant == StopVariant::MaxIterations {
                prop_assert_eq!(trace.records.len(), max as usize + 1);
            }
        }
    }
}
