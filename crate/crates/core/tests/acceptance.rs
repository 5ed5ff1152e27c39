//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use itertools::Itertools;
use metaeval::analysis::{CorrelationKind, MetaEvalResult};
use metaeval::datasets::DatasetLoader;
use metaeval::evaluators::geval::BRIEF_PROMPT;
use metaeval::evaluators::{bert_score, bleu_precision, rouge_l, rouge_n, tokenize, FixedEmbedder, GEvalJudge, Prf};
use metaeval::generation::build_ladders;
use metaeval::generation::perturb::{default_template, NOTE_GENERATION_PROMPT};
use metaeval::model::{
    experiment_key, DatasetSpec, ExperimentConfig, FieldMap, GenerationSteps, ModelSpec, PerturbationSettings,
    PromptTemplate, ProviderKind, ScoreRecord, TokenLogprob, TopAlternative, EVALUATOR_KINDS,
};
use metaeval::orchestrator::{model_load_count, plan_schedule, FixedClock, Project, Runtime, MANIFEST_FILE};
use metaeval::pipeline::{self, PipelineConfig, RunOptions, Stage};
use metaeval::provider::{
    Gateway, GenerationRequest, GenerationResult, MockProvider, ProviderError, RetryPolicy, ScriptedProvider,
    ScriptedResponse, TextGenerator,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fixed_clock() -> Arc<FixedClock> {
    Arc::new(FixedClock(chrono::DateTime::UNIX_EPOCH))
}

fn main() {
    let checks: [Check; 8] = [
        ("metric oracles", metric_oracles),
        ("hand-derived fixtures", hand_fixtures),
        ("g-eval weighting", geval_weighting),
        ("meta-evaluation exactness", meta_exactness),
        ("scheduler optimality", scheduler_optimality),
        ("crash/resume", crash_resume),
        ("end-to-end shape", end_to_end_shape),
        ("live reproduction recipe", live_recipe),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.2}s]");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- oracles

fn count<'a>(grams: &[&'a [&'a str]], g: &[&str]) -> usize {
    grams.iter().filter(|x| **x == g).count()
}

/// Brute-force clipped overlap and the two n-gram totals.
fn oracle_overlap(cand: &[&str], reference: &[&str], n: usize) -> (usize, usize, usize) {
    let c: Vec<&[&str]> = if cand.len() >= n { cand.windows(n).collect() } else { vec![] };
    let r: Vec<&[&str]> = if reference.len() >= n { reference.windows(n).collect() } else { vec![] };
    let distinct: Vec<&[&str]> = c.iter().copied().unique().collect();
    let overlap = distinct.iter().map(|g| count(&c, g).min(count(&r, g))).sum();
    (overlap, c.len(), r.len())
}

fn oracle_prf(overlap: usize, cand_total: usize, ref_total: usize) -> (f64, f64, f64) {
    let p = if cand_total == 0 { 0.0 } else { overlap as f64 / cand_total as f64 };
    let r = if ref_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

fn oracle_bleu(cand: &[&str], reference: &[&str], max_n: usize) -> f64 {
    let logs: Vec<f64> = (1..=max_n)
        .filter_map(|n| {
            let (overlap, total, _) = oracle_overlap(cand, reference, n);
            (total > 0).then(|| (if overlap == 0 { 1e-9 } else { overlap as f64 } / total as f64).ln())
        })
        .collect();
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// Longest common subsequence by enumerating every subsequence of `cand`.
fn oracle_lcs(cand: &[&str], reference: &[&str]) -> usize {
    (0u32..1 << cand.len())
        .filter(|mask| {
            let mut it = reference.iter();
            (0..cand.len()).filter(|i| mask & (1 << i) != 0).all(|i| it.any(|t| *t == cand[i]))
        })
        .map(|mask| mask.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

fn same_prf(got: Prf, want: (f64, f64, f64)) -> bool {
    close(got.precision, want.0, 1e-9) && close(got.recall, want.1, 1e-9) && close(got.f1, want.2, 1e-9)
}

fn random_tokens<'a>(rng: &mut ChaCha8Rng, vocab: &[&'a str]) -> Vec<&'a str> {
    (0..rng.gen_range(1..=12)).map(|_| vocab[rng.gen_range(0..vocab.len())]).collect()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let vocab = ["a", "b", "c", "d", "e"];
    let mut disjoint = 0;
    for trial in 0..500 {
        let cand = random_tokens(&mut rng, &vocab);
        let reference = random_tokens(&mut rng, &vocab);
        let (c, r) = (cand.join(" "), reference.join(" "));
        let ctx = || format!("trial {trial}: {c:?} vs {r:?}");

        let bleu = bleu_precision(&c, &r, 4).value;
        ensure(close(bleu, oracle_bleu(&cand, &reference, 4), 1e-9), || format!("bleu {bleu} ({})", ctx()))?;
        for n in [1, 2] {
            let (o, ct, rt) = oracle_overlap(&cand, &reference, n);
            ensure(same_prf(rouge_n(&c, &r, n), oracle_prf(o, ct, rt)), || format!("rouge_{n} ({})", ctx()))?;
            if n == 2 && o == 0 && ct > 0 && rt > 0 {
                disjoint += 1;
                ensure(rouge_n(&c, &r, 2).f1 == 0.0, || format!("disjoint bigrams not 0.0 ({})", ctx()))?;
            }
        }
        let lcs = oracle_lcs(&cand, &reference);
        ensure(same_prf(rouge_l(&c, &r), oracle_prf(lcs, cand.len(), reference.len())), || {
            format!("rouge_l ({})", ctx())
        })?;

        ensure(bleu_precision(&c, &c, 4).value == 1.0, || format!("bleu identity ({})", ctx()))?;
        ensure(rouge_n(&c, &c, 1).f1 == 1.0 && rouge_l(&c, &c).f1 == 1.0, || format!("rouge identity ({})", ctx()))?;
        if cand.len() >= 2 {
            ensure(rouge_n(&c, &c, 2).f1 == 1.0, || format!("rouge_2 identity ({})", ctx()))?;
        }
    }
    let spec_disjoint = rouge_n("a b c", "x y z", 2);
    ensure(spec_disjoint.f1 == 0.0 && spec_disjoint.precision == 0.0, || {
        "\"a b c\" vs \"x y z\" rouge_2 not 0".into()
    })?;
    ensure(disjoint > 0, || "no disjoint-bigram pairs were generated".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("500 pairs within 1e-9, identity 1.0, {disjoint} disjoint-bigram pairs at 0.0"))
}

fn hand_fixtures() -> Outcome {
    let clipped = bleu_precision("the the the the", "the cat", 4);
    ensure(clipped.precisions[0] == Some(0.25), || format!("clipped unigram {:?}", clipped.precisions))?;
    ensure(bleu_precision("the the the the", "the cat", 1).value == 0.25, || "bleu max_n=1 not 0.25".into())?;
    let l = rouge_l("a b c d", "a c b d");
    ensure(l.precision == 0.75 && l.recall == 0.75 && l.f1 == 0.75, || format!("rouge_l {l:?}"))?;
    let r1 = rouge_n("a b c", "a x c", 1);
    ensure(close(r1.f1, 2.0 / 3.0, 1e-12), || format!("rouge_1 {r1:?}"))?;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let embedder = FixedEmbedder::new([
        ("e1".to_string(), vec![1.0, 0.0]),
        ("e2".to_string(), vec![0.0, 1.0]),
        ("c1".to_string(), vec![1.0, 0.0]),
        ("c2".to_string(), vec![h, h]),
    ]);
    let bs = bert_score("c1 c2", "e1 e2", &embedder)?;
    let want = (1.0 + h) / 2.0;
    ensure(close(bs.recall, want, 1e-6), || format!("bert_score recall {} want {want}", bs.recall))?;
    Ok(format!("clipped 0.25, lcs 0.75, bert_score recall {:.4}", bs.recall))
}

// ---------------------------------------------------------------- g-eval

fn scripted_judge(gateway: &mut Gateway, name: &str, prompt: &str, responses: Vec<ScriptedResponse>) -> ModelSpec {
    let provider = ScriptedProvider::default();
    provider.insert_many(None, prompt, responses);
    gateway.register(name, Arc::new(provider));
    ModelSpec { provider: ProviderKind::Scripted, ..ModelSpec::mock(name) }
}

fn geval_weighting() -> Outcome {
    let (source, candidate) = ("Doctor: any pain? Patient: none.", "Patient denies pain.");
    let mut gateway = Gateway::new(RetryPolicy::default(), 1);
    let prompt_for =
        |client, judge| GEvalJudge { client, judge, prompt: BRIEF_PROMPT, scale: (1, 5), fallback_samples: 10 };
    let placeholder = ModelSpec::mock("placeholder");
    let probe_client = gateway.client(&placeholder).map_err(|e| e.to_string())?;
    let prompt = prompt_for(&probe_client, &placeholder).render(source, candidate)?;

    let half = 0.5f64.ln();
    let weighted = ScriptedResponse {
        text: "4".into(),
        token_logprobs: Some(vec![TokenLogprob {
            token: "4".into(),
            logprob: half,
            top_alternatives: vec![
                TopAlternative { token: "4".into(), logprob: half },
                TopAlternative { token: "5".into(), logprob: half },
            ],
        }]),
    };
    let lp_judge = scripted_judge(&mut gateway, "judge-logprobs", &prompt, vec![weighted]);
    let sampled_judge = scripted_judge(&mut gateway, "judge-text", &prompt, vec![ScriptedResponse::text("5"); 10]);

    let lp_client = gateway.client(&lp_judge).map_err(|e| e.to_string())?;
    let lp = prompt_for(&lp_client, &lp_judge).score(source, candidate)?;
    ensure(lp.score == 0.875, || format!("logprob-weighted score {} ({})", lp.score, lp.method))?;

    let text_client = gateway.client(&sampled_judge).map_err(|e| e.to_string())?;
    let sampled = prompt_for(&text_client, &sampled_judge).score(source, candidate)?;
    ensure(sampled.score == 1.0, || format!("sampled score {}", sampled.score))?;
    ensure(sampled.sampled_ratings.len() == 10, || format!("{} samples drawn", sampled.sampled_ratings.len()))?;
    Ok(format!("{{4: 0.5, 5: 0.5}} -> {}, 10 samples of \"5\" -> {}", lp.score, sampled.score))
}

// ---------------------------------------------------------------- meta-evaluation

/// One synthetic encounter with the facts a faithful note must keep and
/// the wrong values used by the perturbed variants.
struct Encounter {
    id: &'static str,
    age: &'static str,
    side: &'static str,
    weeks: &'static str,
    med: &'static str,
    dose: &'static str,
    wrong_age: &'static str,
    wrong_weeks: &'static str,
    wrong_dose: &'static str,
}

const ENCOUNTERS: [Encounter; 5] = [
    Encounter {
        id: "enc-1",
        age: "58",
        side: "left",
        weeks: "three",
        med: "lisinopril",
        dose: "10",
        wrong_age: "85",
        wrong_weeks: "nine",
        wrong_dose: "20",
    },
    Encounter {
        id: "enc-2",
        age: "42",
        side: "right",
        weeks: "six",
        med: "metformin",
        dose: "500",
        wrong_age: "24",
        wrong_weeks: "one",
        wrong_dose: "850",
    },
    Encounter {
        id: "enc-3",
        age: "67",
        side: "left",
        weeks: "eight",
        med: "atorvastatin",
        dose: "40",
        wrong_age: "76",
        wrong_weeks: "two",
        wrong_dose: "80",
    },
    Encounter {
        id: "enc-4",
        age: "35",
        side: "right",
        weeks: "four",
        med: "sertraline",
        dose: "50",
        wrong_age: "53",
        wrong_weeks: "ten",
        wrong_dose: "100",
    },
    Encounter {
        id: "enc-5",
        age: "71",
        side: "left",
        weeks: "five",
        med: "amlodipine",
        dose: "5",
        wrong_age: "17",
        wrong_weeks: "seven",
        wrong_dose: "15",
    },
];

impl Encounter {
    fn dialogue(&self) -> String {
        format!(
            "Doctor: What brings you in? Patient: I am {} and my {} knee has ached for {} weeks. \
             Doctor: Any medicines? Patient: {} {} mg every morning.",
            self.age, self.side, self.weeks, self.med, self.dose
        )
    }

    fn reference(&self) -> String {
        format!(
            "{} year old patient with {} knee pain for {} weeks. Takes {} {} mg daily. \
             Plan: continue {}, knee exercises, review in a month.",
            self.age, self.side, self.weeks, self.med, self.dose, self.med
        )
    }

    fn note(&self, age: &str, side: &str, weeks: &str, dose: &str) -> String {
        format!(
            "{age} year old patient with {side} knee pain for {weeks} weeks. Takes {} {dose} mg daily. \
             Plan: continue {} and review in a month.",
            self.med, self.med
        )
    }

    /// Level 0 is faithful, level 1 a faithful paraphrase, level 2 changes
    /// one fact and level 3 three facts.
    fn variant(&self, level: u8) -> String {
        let other_side = if self.side == "left" { "right" } else { "left" };
        match level {
            0 => self.note(self.age, self.side, self.weeks, self.dose),
            1 => format!(
                "Aged {}, this person describes an aching {} knee lasting {} weeks; medication consists of {} at {} \
                 milligrams each morning. We will keep {} unchanged and see them again next month.",
                self.age, self.side, self.weeks, self.med, self.dose, self.med
            ),
            2 => self.note(self.age, self.side, self.weeks, self.wrong_dose),
            _ => self.note(self.wrong_age, other_side, self.wrong_weeks, self.dose),
        }
    }

    fn facts(&self) -> [&str; 5] {
        [self.age, self.side, self.weeks, self.med, self.dose]
    }
}

/// Writes the note fixtures and drives generation and perturbation from them.
fn note_writer() -> impl TextGenerator {
    let prefixes: Vec<(u8, String)> =
        (1..=3).map(|l| (l, default_template(l).user_text.split("{prompt}").next().unwrap().to_string())).collect();
    move |r: &GenerationRequest| {
        if let Some((level, _)) = prefixes.iter().find(|(_, p)| r.user.starts_with(p.as_str())) {
            let e = ENCOUNTERS.iter().find(|e| r.user.contains(&e.variant(0)));
            return e
                .map(|e| GenerationResult::text(e.variant(*level)))
                .ok_or_else(|| ProviderError::UnknownPrompt("perturbation of an unknown note".into()));
        }
        ENCOUNTERS
            .iter()
            .find(|e| r.user.contains(&e.dialogue()))
            .map(|e| GenerationResult::text(e.variant(0)))
            .ok_or_else(|| ProviderError::UnknownPrompt("unknown encounter".into()))
    }
}

/// A judge that rates 5 minus the number of dialogue facts missing from
/// the note, with 20% of its probability one point lower.
fn fact_checking_judge() -> impl TextGenerator {
    |r: &GenerationRequest| {
        let e = ENCOUNTERS
            .iter()
            .find(|e| r.user.contains(&e.dialogue()))
            .ok_or_else(|| ProviderError::UnknownPrompt("unknown source".into()))?;
        let note = r.user.split("**Clinical Note:**").nth(1).unwrap_or("").trim_start();
        let note = note.split("\n\n").next().unwrap_or("");
        let tokens = tokenize(note);
        let missing = e.facts().iter().filter(|f| !tokens.iter().any(|t| t == *f)).count() as i32;
        let rating = (5 - missing).max(1);
        let mut alternatives = vec![TopAlternative { token: rating.to_string(), logprob: 0.8f64.ln() }];
        if rating > 1 {
            alternatives.push(TopAlternative { token: (rating - 1).to_string(), logprob: 0.2f64.ln() });
        }
        Ok(GenerationResult {
            token_logprobs: Some(vec![TokenLogprob {
                token: rating.to_string(),
                logprob: alternatives[0].logprob,
                top_alternatives: alternatives,
            }]),
            ..GenerationResult::text(rating.to_string())
        })
    }
}

const FIXTURE_CONFIG: &str = "
project: project
datasets:
  - name: knees
    version: '1'
    source: knees.jsonl
    split: test
    field_map: {id_field: id, input_field: dialogue, reference_field: note}
generations:
  - {name: note, template: note_generation}
models:
  - {alias: writer, provider: mock, model_name: fixture-writer}
  - {alias: judge, provider: mock, model_name: fixture-judge}
evaluators:
  - bleu_precision
  - rouge_1
  - rouge_2
  - rouge_l
  - bert_score
  - {kind: g_eval, variant: brief, judge: judge}
batch:
  models: [writer]
  perturbation_levels: [0, 1, 2, 3]
";

fn fixture_project(dir: &Path) -> Result<PathBuf, String> {
    let rows: String = ENCOUNTERS
        .iter()
        .map(|e| serde_json::json!({"id": e.id, "dialogue": e.dialogue(), "note": e.reference()}).to_string() + "\n")
        .collect();
    std::fs::write(dir.join("knees.jsonl"), rows).map_err(|e| e.to_string())?;
    let config = pipeline::parse_config(FIXTURE_CONFIG, dir).map_err(|e| e.to_string())?;
    let mut gateway = Gateway::new(RetryPolicy { max_attempts: 1, ..Default::default() }, 4);
    gateway.register("fixture-writer", Arc::new(note_writer()));
    gateway.register("fixture-judge", Arc::new(fact_checking_judge()));
    let runtime =
        Runtime::new(gateway, DatasetLoader::new(dir.join("cache")).with_base_dir(dir)).with_clock(fixed_clock());
    let root = dir.join("project");
    let report =
        pipeline::run_stage(&config, &root, Stage::Run, &RunOptions::default(), &runtime).map_err(|e| e.to_string())?;
    ensure(report.all_succeeded(), || format!("fixture run did not fully succeed: {report:?}"))?;
    Ok(root)
}

/// Adds externally produced metrics to every ladder of the project.
fn add_external_scores(root: &Path) -> Result<(), String> {
    let project = Project::open(root).map_err(|e| e.to_string())?;
    let source = project
        .manifest()
        .experiments
        .iter()
        .find(|(_, e)| e.config.perturbation_level == 0)
        .map(|(k, _)| k.clone())
        .ok_or("no level-0 experiment")?;
    let set = build_ladders(&project, &source).map_err(|e| e.to_string())?;
    let partial = [0.9, 0.95, 0.4, 0.3];
    for ladder in &set.ladders {
        for (&level, key) in &set.level_keys {
            for (metric, value) in
                [("monotone", 1.0 - 0.2 * level as f64), ("constant", 0.5), ("partial", partial[level as usize])]
            {
                let record = ScoreRecord {
                    experiment_key: key.clone(),
                    sample_id: ladder.sample_id.clone(),
                    metric_name: metric.into(),
                    value,
                    sub_values: BTreeMap::new(),
                    artifacts: BTreeMap::new(),
                    flags: vec![],
                };
                project.append_score(&record).map_err(|e| e.to_string())?;
            }
        }
    }
    Ok(())
}

fn find<'a>(results: &'a [MetaEvalResult], metric: &str) -> Result<&'a MetaEvalResult, String> {
    results.iter().find(|r| r.metric_name == metric).ok_or_else(|| format!("metric {metric} missing from meta results"))
}

fn meta_exactness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = fixture_project(dir.path())?;
    add_external_scores(&root)?;
    let report = pipeline::meta(&root, CorrelationKind::Spearman, None).map_err(|e| e.to_string())?;
    let r = &report.results;

    let monotone = find(r, "monotone")?;
    ensure(monotone.avg_correlation == Some(1.0) && monotone.n_samples == 5, || format!("monotone {monotone:?}"))?;
    let constant = find(r, "constant")?;
    ensure(constant.is_degenerate() && constant.n_degenerate == 5, || format!("constant {constant:?}"))?;
    let partial = find(r, "partial")?;
    ensure(partial.avg_correlation.is_some_and(|v| close(v, 0.8, 1e-9)), || format!("partial {partial:?}"))?;

    let judge = find(r, "g_eval_brief_judge")?.avg_correlation.ok_or("judge metric degenerate")?;
    let mut best_ngram = f64::NEG_INFINITY;
    for m in ["bleu_precision", "rouge_1", "rouge_2", "rouge_l"] {
        let v = find(r, m)?.avg_correlation.unwrap_or(f64::NEG_INFINITY);
        ensure(judge > v, || format!("judge {judge:.3} not above {m} {v:.3}"))?;
        best_ngram = best_ngram.max(v);
    }
    let bert = find(r, "bert_score_f1")?.avg_correlation.unwrap_or(f64::NAN);
    Ok(format!(
        "monotone 1.000, constant degenerate, partial {:.3}; judge {judge:.3} > best n-gram {best_ngram:.3} (bert_score {bert:.3})",
        partial.avg_correlation.unwrap()
    ))
}

// ---------------------------------------------------------------- scheduler

fn toy_config(model: &str, level: u8, perturber: Option<&str>) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec {
            name: "toy".into(),
            version: "1".into(),
            source: "toy.jsonl".into(),
            checksum: None,
            split: "test".into(),
            field_map: FieldMap { id_field: "id".into(), input_field: "text".into(), reference_field: None },
        },
        preprocessor: "identity".into(),
        generation: GenerationSteps {
            name: "echo".into(),
            template: PromptTemplate::user_only("echo", "{input_text}"),
            postprocess: Default::default(),
        },
        model: ModelSpec::mock(model),
        evaluators: vec![],
        perturbation_level: level,
        perturbation: PerturbationSettings { model: perturber.map(ModelSpec::mock), ..Default::default() },
    }
}

/// Whether `order` runs every level-0 experiment before the perturbation
/// runs of its outputs.
fn respects_sources(order: &[usize], configs: &[ExperimentConfig], keys: &[String], sources: &[String]) -> bool {
    order.iter().enumerate().all(|(pos, &i)| {
        configs[i].perturbation_level == 0
            || order[pos..].iter().all(|&j| !(configs[j].perturbation_level == 0 && keys[j] == sources[i]))
    })
}

fn scheduler_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let models = ["m0", "m1", "m2", "m3"];
    let mut constrained = 0;
    for trial in 0..200 {
        let n = rng.gen_range(1..=6);
        let configs: Vec<ExperimentConfig> = (0..n)
            .map(|_| {
                let model = models[rng.gen_range(0..models.len())];
                let level = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(1..=3) };
                let perturber = (level > 0 && rng.gen_bool(0.6)).then(|| models[rng.gen_range(0..models.len())]);
                toy_config(model, level, perturber)
            })
            .collect();
        let keys: Vec<String> = configs.iter().map(experiment_key).collect();
        let sources: Vec<String> = configs.iter().map(|c| experiment_key(&c.source_config())).collect();
        let producers: Vec<String> = configs.iter().map(|c| c.producing_model().identity()).collect();
        let loads = |order: &[usize]| model_load_count(order.iter().map(|&i| producers[i].as_str()));

        let best = (0..n)
            .permutations(n)
            .filter(|p| respects_sources(p, &configs, &keys, &sources))
            .map(|p| loads(&p))
            .min()
            .ok_or_else(|| format!("trial {trial}: no valid order"))?;
        if best > producers.iter().unique().count() {
            constrained += 1;
        }
        let plan = plan_schedule(&configs);
        let mut sorted = plan.indices.clone();
        sorted.sort();
        ensure(sorted == (0..n).collect::<Vec<_>>(), || format!("trial {trial}: not a permutation"))?;
        ensure(respects_sources(&plan.indices, &configs, &keys, &sources), || {
            format!("trial {trial}: plan runs a perturbation before its source")
        })?;
        ensure(plan.model_load_count == loads(&plan.indices) && plan.model_load_count == best, || {
            format!("trial {trial}: plan loads {} but minimum is {best}", plan.model_load_count)
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("200 trials at the exhaustive minimum ({constrained} needed a model reloaded)"))
}

// ---------------------------------------------------------------- crash/resume

/// Counts completed provider calls and panics when a chosen call starts,
/// standing in for the process being killed. Each call is logged with the
/// number of record bytes persisted when it started.
#[derive(Default)]
struct Tripwire {
    completed: AtomicUsize,
    kill_at: Mutex<Option<usize>>,
    calls: Mutex<Vec<(u64, String)>>,
}

impl Tripwire {
    fn requests(&self) -> Vec<String> {
        self.calls.lock().unwrap().iter().map(|(_, r)| r.clone()).sorted().collect()
    }
}

fn demo_config(max_in_flight: usize) -> Result<PipelineConfig, String> {
    let dir = configs_dir();
    let text = std::fs::read_to_string(dir.join("demo.yaml")).map_err(|e| e.to_string())?;
    let patched = text.replace("runtime: {max_in_flight: 4}", &format!("runtime: {{max_in_flight: {max_in_flight}}}"));
    ensure(patched != text || max_in_flight == 4, || "demo.yaml runtime line changed".into())?;
    pipeline::parse_config(&patched, &dir).map_err(|e| e.to_string())
}

fn wired_runtime(config: &PipelineConfig, root: &Path, wire: &Arc<Tripwire>) -> Runtime {
    let mut runtime = pipeline::runtime_for(config, root).with_clock(fixed_clock());
    for (_, spec) in &config.models {
        let mock = MockProvider::new(spec.clone());
        let wire = wire.clone();
        let name = spec.model_name.clone();
        let root = root.to_path_buf();
        runtime.gateway.register(
            spec.model_name.clone(),
            Arc::new(move |r: &GenerationRequest| {
                if *wire.kill_at.lock().unwrap() == Some(wire.completed.load(Ordering::SeqCst)) {
                    panic!("simulated crash");
                }
                let persisted = persisted_bytes(&root);
                let out = mock.generate(r);
                wire.calls.lock().unwrap().push((persisted, format!("{name} {}", serde_json::to_string(r).unwrap())));
                wire.completed.fetch_add(1, Ordering::SeqCst);
                out
            }),
        );
    }
    runtime
}

fn record_files(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            if rel.starts_with("cache") || rel.starts_with("analysis") {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "jsonl") {
                out.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn persisted_bytes(root: &Path) -> u64 {
    record_files(root).map(|files| files.values().map(|b| b.len() as u64).sum()).unwrap_or(0)
}

fn crash_resume() -> Outcome {
    let config = demo_config(1)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let resume = RunOptions { resume: true, ..Default::default() };

    let clean_root = dir.path().join("clean");
    let clean = Arc::new(Tripwire::default());
    let report =
        pipeline::run_stage(&config, &clean_root, Stage::Run, &resume, &wired_runtime(&config, &clean_root, &clean))
            .map_err(|e| e.to_string())?;
    ensure(report.all_succeeded(), || "uninterrupted run did not succeed".into())?;
    let total = clean.completed.load(Ordering::SeqCst);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kill_points: Vec<usize> = rand::seq::index::sample(&mut rng, total, 10).into_iter().sorted().collect();
    let root = dir.path().join("crashed");
    let wire = Arc::new(Tripwire::default());
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut survived = None;
    // calls whose sample had not been persisted when the run was killed
    let mut unfinished: Vec<String> = Vec::new();
    for &k in &kill_points {
        *wire.kill_at.lock().unwrap() = Some(k);
        let before = wire.calls.lock().unwrap().len();
        let runtime = wired_runtime(&config, &root, &wire);
        let attempt = panic::catch_unwind(AssertUnwindSafe(|| {
            pipeline::run_stage(&config, &root, Stage::Run, &resume, &runtime)
        }));
        if attempt.is_ok() {
            survived = Some(k);
            break;
        }
        let persisted = persisted_bytes(&root);
        let calls = wire.calls.lock().unwrap();
        unfinished.extend(calls[before..].iter().filter(|(w, _)| *w == persisted).map(|(_, r)| r.clone()));
    }
    panic::set_hook(hook);
    ensure(survived.is_none(), || format!("run was not interrupted at call {}", survived.unwrap()))?;
    *wire.kill_at.lock().unwrap() = None;
    let report = pipeline::run_stage(&config, &root, Stage::Run, &resume, &wired_runtime(&config, &root, &wire))
        .map_err(|e| e.to_string())?;
    ensure(report.all_succeeded(), || "resumed run did not succeed".into())?;

    let done = wire.completed.load(Ordering::SeqCst);
    ensure(done == total + unfinished.len(), || {
        format!("{done} provider calls across crashes, {total} uninterrupted, {} unfinished at kills", unfinished.len())
    })?;
    let mut expected = clean.requests();
    expected.extend(unfinished.iter().cloned());
    expected.sort();
    ensure(wire.requests() == expected, || "calls beyond the unfinished samples were repeated".into())?;

    let (want, got) = (record_files(&clean_root)?, record_files(&root)?);
    ensure(want.keys().eq(got.keys()), || format!("record files differ: {:?} vs {:?}", want.keys(), got.keys()))?;
    for (path, bytes) in &want {
        ensure(got[path] == *bytes, || format!("{} is not byte-identical", path.display()))?;
    }
    ensure(root.join(MANIFEST_FILE).is_file(), || "manifest missing".into())?;
    Ok(format!(
        "10 kills over {total} calls, {} record files byte-identical, only the {} calls of unfinished samples redone",
        want.len(),
        unfinished.len()
    ))
}

// ---------------------------------------------------------------- end to end

fn csv_header(path: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().next().unwrap_or("").split(',').map(String::from).collect())
}

fn end_to_end_shape() -> Outcome {
    let start = Instant::now();
    let config = demo_config(4)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("project");
    let runtime = pipeline::runtime_for(&config, &root).with_clock(fixed_clock());
    let report =
        pipeline::run_stage(&config, &root, Stage::Run, &RunOptions::default(), &runtime).map_err(|e| e.to_string())?;
    ensure(report.all_succeeded() && report.experiments.len() == 8, || format!("run report {report:?}"))?;
    let analysis = pipeline::analyse(&root, CorrelationKind::Spearman).map_err(|e| e.to_string())?;
    let meta = pipeline::meta(&root, CorrelationKind::Spearman, None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;

    let metrics: Vec<String> = config.experiments[0].evaluators.iter().map(|e| e.metric_name()).collect();
    let kinds: Vec<&str> = config.experiments[0]
        .evaluators
        .iter()
        .map(|e| serde_json::to_value(e).unwrap()["kind"].as_str().unwrap().to_string())
        .unique()
        .map(|k| EVALUATOR_KINDS.iter().find(|x| **x == k).copied().unwrap_or("?"))
        .collect();
    ensure(kinds.len() == EVALUATOR_KINDS.len(), || format!("families covered: {kinds:?}"))?;

    let analysis_dir = root.join("analysis");
    let header = csv_header(&analysis_dir.join("results.csv"))?;
    ensure(header[..5] == ["experiment_key", "dataset", "model", "generation", "perturbation_level"], || {
        format!("results.csv header {header:?}")
    })?;
    for m in &metrics {
        for col in [m.clone(), format!("{m}_n"), format!("{m}_rank")] {
            ensure(header.contains(&col), || format!("results.csv lacks column {col}"))?;
        }
    }
    ensure(analysis.results.rows.len() == 2, || {
        format!("{} result rows, want one per model", analysis.results.rows.len())
    })?;
    let judges: Vec<&String> =
        header.iter().filter(|h| h.starts_with("g_eval_") && !h.ends_with("_n") && !h.ends_with("_rank")).collect();
    ensure(judges.len() == 2, || format!("g-eval columns {judges:?}"))?;
    let text = analysis.results.to_text();
    ensure(text.contains("**"), || "results text has no rank-1 marks".into())?;

    let meta_header = csv_header(&analysis_dir.join("meta_eval.csv"))?;
    ensure(meta_header == ["metric", "avg_correlation", "n_samples", "n_degenerate"], || {
        format!("meta_eval.csv header {meta_header:?}")
    })?;
    ensure(meta.results.len() == metrics.len(), || format!("{} meta rows", meta.results.len()))?;
    let values: Vec<f64> = meta.results.iter().filter_map(|r| r.avg_correlation).collect();
    ensure(values.windows(2).all(|w| w[0] >= w[1]), || "meta rows not ranked".into())?;
    let meta_text = meta.table().to_text();
    ensure(meta_text.contains("**") && meta_text.contains('_'), || {
        format!("meta text lacks rank marks:\n{meta_text}")
    })?;
    for f in ["results.json", "meta_eval.json", "metric_correlation.csv", "metric_correlation.json"] {
        ensure(analysis_dir.join(f).is_file(), || format!("missing analysis/{f}"))?;
    }
    Ok(format!("8 experiments, {} metrics, 2 g-eval judge columns, ranked meta table in {elapsed:.1?}", metrics.len()))
}

// ---------------------------------------------------------------- live recipe

fn live_recipe() -> Outcome {
    let path = configs_dir().join("live_recipe.yaml");
    let config = pipeline::load_config(&path).map_err(|e| e.to_string())?;
    ensure(config.models.len() == 6, || format!("{} models", config.models.len()))?;
    for (alias, m) in &config.models {
        ensure(m.temperature == 0.7 && m.top_p == 0.95 && m.seed == Some(42), || format!("{alias} sampling {m:?}"))?;
        ensure(m.provider == ProviderKind::OpenaiCompatible, || format!("{alias} is not an HTTP model"))?;
    }
    ensure(config.experiments.len() == 24, || format!("{} experiments", config.experiments.len()))?;
    let mut evaluators: HashMap<String, usize> = HashMap::new();
    for c in &config.experiments {
        ensure(c.dataset.split == "test", || "dataset split is not test".into())?;
        ensure(c.generation.template.user_text == NOTE_GENERATION_PROMPT, || "generation prompt differs".into())?;
        if c.perturbation_level > 0 {
            ensure(c.perturbation_template() == Some(default_template(c.perturbation_level)), || {
                format!("level {} uses a non-default perturbation prompt", c.perturbation_level)
            })?;
        }
        for e in &c.evaluators {
            *evaluators.entry(e.metric_name()).or_default() += 1;
        }
    }
    ensure(evaluators.len() == 13, || format!("{} evaluator variants", evaluators.len()))?;
    let levels: Vec<u8> = config.experiments.iter().map(|c| c.perturbation_level).unique().sorted().collect();
    ensure(levels == [0, 1, 2, 3], || format!("levels {levels:?}"))?;
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    ensure(text.contains("0.92") && text.contains("0.45"), || "expected outcomes not stated".into())?;
    Ok("recipe validated (6 models, 13 evaluators, levels 0-3); live run not executed".into())
}
