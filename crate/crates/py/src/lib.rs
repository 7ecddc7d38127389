//! Python bindings. Structured values cross the boundary as JSON text, so Python callers
//! use `json.loads` on results and `json.dumps` on arguments.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde_json::Value;

use sopbench_core::eval::{self, EvalReport, MatchConfig};
use sopbench_core::ingest::{self, ParseOptions};
use sopbench_core::policy::{prepare_episode, OraclePolicy, Policy, RandomPolicy, ReplayMode, RuleSopPolicy};
use sopbench_core::prompt::{self, DatasetOptions};
use sopbench_core::remote::{RemoteEndpoint, RemotePolicy};
use sopbench_core::structured::{self, DetectorConfig, ResponseStrategy, UserResponseScript};
use sopbench_core::synthetic::{self, SyntheticTemplate};
use sopbench_core::{CanonicalAction, GroundingConfig, RawAction, SopPipeline, UiElement, Variant};

create_exception!(sopbench, SopbenchError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    SopbenchError::new_err(e.to_string())
}

fn from_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| err(format!("{what}: {e}")))
}

fn to_json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

fn grounding(cfg: Option<&str>) -> PyResult<GroundingConfig> {
    let g: GroundingConfig = cfg.map(|c| from_json("grounding", c)).transpose()?.unwrap_or_default();
    g.validate().map_err(err)?;
    Ok(g)
}

fn variant(v: &str) -> PyResult<Variant> {
    v.parse().map_err(err)
}

/// A line-delimited episode corpus.
#[pyclass(module = "sopbench", name = "Corpus", frozen)]
struct PyCorpus {
    inner: ingest::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (text, lenient = false))]
    fn from_jsonl(text: &str, lenient: bool) -> PyResult<Self> {
        let parsed = ingest::parse_corpus_str(text, ParseOptions { lenient }).map_err(err)?;
        Ok(Self { inner: parsed.corpus })
    }

    #[staticmethod]
    #[pyo3(signature = (path, lenient = false))]
    fn load(path: &str, lenient: bool) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(err)?;
        Self::from_jsonl(&text, lenient)
    }

    fn to_jsonl(&self) -> String {
        ingest::corpus_to_string(&self.inner)
    }

    fn episode_ids(&self) -> Vec<String> {
        self.inner.episodes.iter().map(|e| e.episode_id.clone()).collect()
    }

    fn manifest_json(&self) -> PyResult<String> {
        to_json(&self.inner.manifest)
    }

    /// Returns `(train, val, test)`.
    fn split(&self, fractions: [f64; 3], seed: u64) -> PyResult<(Self, Self, Self)> {
        let s = ingest::split_corpus(&self.inner, fractions, seed).map_err(err)?;
        Ok((Self { inner: s.train }, Self { inner: s.val }, Self { inner: s.test }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Corpus(episodes={})", self.inner.len())
    }
}

/// An ordered table of subtask rules.
#[pyclass(module = "sopbench", name = "RuleSet", frozen)]
struct PyRuleSet {
    inner: sopbench_core::RuleSet,
}

#[pymethods]
impl PyRuleSet {
    /// A bundled name (`aitw`, `aia_medical`) or a path to a rule file.
    #[new]
    #[pyo3(signature = (name_or_path = "aitw"))]
    fn new(name_or_path: &str) -> PyResult<Self> {
        Ok(Self { inner: sopbench_core::RuleSet::resolve(name_or_path).map_err(err)? })
    }

    #[staticmethod]
    fn from_jsonl(name: &str, text: &str) -> PyResult<Self> {
        Ok(Self { inner: sopbench_core::RuleSet::from_jsonl(name, text).map_err(err)? })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    fn classify_click_text(&self, text: &str) -> String {
        sopbench_core::sop::classify_click_text(text, &self.inner)
    }

    /// The subtask description of a canonical action, or `None` when it is excluded.
    fn classify_action(&self, action_json: &str) -> PyResult<Option<String>> {
        let a: CanonicalAction = from_json("action", action_json)?;
        Ok(match sopbench_core::classify_action(&a, &self.inner) {
            sopbench_core::sop::Classification::Subtask(s) => Some(s),
            sopbench_core::sop::Classification::Excluded => None,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.rules().len()
    }
}

/// Grounds one raw gesture on its screen; returns `{"action": ..., "grounded": bool}`.
#[pyfunction]
#[pyo3(signature = (raw_json, screen_json, grounding_json = None))]
fn canonicalize(raw_json: &str, screen_json: &str, grounding_json: Option<&str>) -> PyResult<String> {
    let raw: RawAction = from_json("raw action", raw_json)?;
    let screen: Vec<UiElement> = from_json("screen", screen_json)?;
    to_json(&sopbench_core::canonicalize(&raw, &screen, &grounding(grounding_json)?))
}

/// Gold actions and SOP pipeline of every episode, as a JSON list.
#[pyfunction]
#[pyo3(signature = (corpus, rules, grounding_json = None))]
fn annotate(corpus: &PyCorpus, rules: &PyRuleSet, grounding_json: Option<&str>) -> PyResult<String> {
    let g = grounding(grounding_json)?;
    let rows: Vec<Value> = corpus
        .inner
        .episodes
        .iter()
        .map(|e| {
            let p = prepare_episode(e, &rules.inner, &g);
            serde_json::json!({
                "episode_id": e.episode_id,
                "subset": e.subset,
                "pipeline": p.pipeline,
                "actions": p.gold_actions(),
            })
        })
        .collect();
    to_json(&rows)
}

/// Prompt/response samples as a JSON list.
#[pyfunction]
#[pyo3(signature = (corpus, rules, variant_name = "base", mix = false))]
fn build_prompts(
    py: Python<'_>,
    corpus: &PyCorpus,
    rules: &PyRuleSet,
    variant_name: &str,
    mix: bool,
) -> PyResult<String> {
    let v = variant(variant_name)?;
    let opts = DatasetOptions { mix, ..Default::default() };
    let data = py.detach(|| prompt::build_dataset(&corpus.inner, &rules.inner, &GroundingConfig::default(), v, opts));
    to_json(&data.samples)
}

#[pyfunction]
#[pyo3(signature = (action_json, variant_name = "base", pipeline_json = None, step = 0))]
fn render_response(
    action_json: &str,
    variant_name: &str,
    pipeline_json: Option<&str>,
    step: usize,
) -> PyResult<String> {
    let a: CanonicalAction = from_json("action", action_json)?;
    let p: Option<SopPipeline> = pipeline_json.map(|s| from_json("pipeline", s)).transpose()?;
    prompt::render_response(&a, p.as_ref(), step, variant(variant_name)?).map_err(err)
}

/// Parses a model response into `{"action": ..., "plan": [...] | null}`.
#[pyfunction]
fn parse_response(text: &str) -> PyResult<String> {
    let parsed = prompt::parse_response(text).map_err(|e| err(e.0))?;
    to_json(&parsed)
}

#[pyfunction]
#[pyo3(signature = (count, seed = 0, templates = None, rules = None))]
fn generate_synthetic(
    count: usize,
    seed: u64,
    templates: Option<Vec<String>>,
    rules: Option<&PyRuleSet>,
) -> PyResult<PyCorpus> {
    let templates = match templates {
        Some(names) => {
            names.iter().map(|n| SyntheticTemplate::resolve(n)).collect::<Result<Vec<_>, _>>().map_err(err)?
        }
        None => synthetic::bundled_templates(),
    };
    let default_rules;
    let rules = match rules {
        Some(r) => &r.inner,
        None => {
            default_rules = sopbench_core::RuleSet::bundled("aitw").map_err(err)?;
            &default_rules
        }
    };
    Ok(PyCorpus { inner: synthetic::generate_mixed(&templates, rules, count, seed).map_err(err)? })
}

/// Teacher-forced evaluation. `policy` is `oracle`, `rule_sop`, `random` or `remote`
/// (which needs `endpoint`). Returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (corpus, rules, policy = "oracle", seed = 0, endpoint = None, variant_name = "base", match_json = None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    corpus: &PyCorpus,
    rules: &PyRuleSet,
    policy: &str,
    seed: u64,
    endpoint: Option<String>,
    variant_name: &str,
    match_json: Option<&str>,
) -> PyResult<String> {
    let cfg: MatchConfig = match_json.map(|s| from_json("match config", s)).transpose()?.unwrap_or_default();
    let pol: Box<dyn Policy> = match policy {
        "oracle" => Box::new(OraclePolicy),
        "rule_sop" => Box::new(RuleSopPolicy { rules: rules.inner.clone() }),
        "random" => Box::new(RandomPolicy { seed }),
        "remote" => {
            let url = endpoint.ok_or_else(|| err("the remote policy needs an endpoint"))?;
            Box::new(RemotePolicy::new(RemoteEndpoint::new(url), variant(variant_name)?).map_err(err)?)
        }
        other => return Err(err(format!("unknown policy {other:?}"))),
    };
    let report = py.detach(|| {
        eval::evaluate_corpus(
            &corpus.inner,
            &rules.inner,
            &GroundingConfig::default(),
            pol.as_ref(),
            ReplayMode::TeacherForced,
            &cfg,
        )
    });
    to_json(&report)
}

/// Unweighted mean of subset scores, rounded to two decimals.
#[pyfunction]
fn aggregate_subsets(scores: Vec<f64>) -> PyResult<f64> {
    eval::overall_from_subsets(&scores).map(eval::round2).ok_or_else(|| err("no subset scores"))
}

#[pyfunction]
fn render_table(reports_json: Vec<String>) -> PyResult<String> {
    let reports = reports_json.iter().map(|r| from_json::<EvalReport>("report", r)).collect::<PyResult<Vec<_>>>()?;
    Ok(eval::render_table(&reports))
}

/// Detects a structured page and extracts its payload; `None` on ordinary screens.
#[pyfunction]
fn extract_structured(screen_json: &str) -> PyResult<Option<String>> {
    let screen: Vec<UiElement> = from_json("screen", screen_json)?;
    let cfg = DetectorConfig::default();
    match structured::detect_structured_page(&screen, &cfg) {
        None => Ok(None),
        Some(kind) => to_json(&structured::extract_payload(&screen, kind, &cfg).map_err(err)?).map(Some),
    }
}

/// Answers a structured page with its first affirmative option and returns the click as JSON.
#[pyfunction]
fn answer_structured(screen_json: &str) -> PyResult<String> {
    let screen: Vec<UiElement> = from_json("screen", screen_json)?;
    let cfg = DetectorConfig::default();
    let kind = structured::detect_structured_page(&screen, &cfg).ok_or_else(|| err("not a structured page"))?;
    let payload = structured::extract_payload(&screen, kind, &cfg).map_err(err)?;
    let label = structured::apply_user_script(&payload, &UserResponseScript::new(ResponseStrategy::FirstAffirmative))
        .map_err(err)?;
    let click =
        structured::click_for_option(&screen, &label).ok_or_else(|| err(format!("no element for {label:?}")))?;
    to_json(&click)
}

#[pymodule]
fn sopbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SopbenchError", m.py().get_type::<SopbenchError>())?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyRuleSet>()?;
    m.add_function(wrap_pyfunction!(canonicalize, m)?)?;
    m.add_function(wrap_pyfunction!(annotate, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(render_response, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_subsets, m)?)?;
    m.add_function(wrap_pyfunction!(render_table, m)?)?;
    m.add_function(wrap_pyfunction!(extract_structured, m)?)?;
    m.add_function(wrap_pyfunction!(answer_structured, m)?)?;
    Ok(())
}
