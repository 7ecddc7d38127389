//! Template-driven synthetic episodes.
//!
//! A template names an ordered list of subtask descriptions (its skeleton) and pools of
//! screen elements. Each generated episode acts out the skeleton one entry at a time, so
//! annotating its gold actions with the same rule set gives back the skeleton.
//!
//! `{name}` slots in the instruction or skeleton are filled with the text of a random
//! element from the pool `name`, once per episode. Pools used as slots never appear on
//! screen; every other pool feeds the rendered screens.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{ActionKind, BBox, CanonicalAction, Episode, Point, RawAction, UiElement};
use crate::ingest::Corpus;
use crate::sop::{classify_action, Classification, KindPattern, RuleSet, TYPE_SLOT};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PoolElement {
    pub text: String,
    pub ui_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTemplate {
    pub name: String,
    pub subset: String,
    pub instruction_pattern: String,
    pub sop_skeleton: Vec<String>,
    pub element_pools: BTreeMap<String, Vec<PoolElement>>,
    /// Upper bound on consecutive steps spent on one scroll or generic-click entry.
    #[serde(default = "one")]
    pub max_repeats: usize,
}

fn one() -> usize {
    1
}

const BUNDLED: [(&str, &str); 5] = [
    ("amazon_headphones", include_str!("../data/templates/amazon_headphones.json")),
    ("browser_search", include_str!("../data/templates/browser_search.json")),
    ("install_app", include_str!("../data/templates/install_app.json")),
    ("settings_page", include_str!("../data/templates/settings_page.json")),
    ("add_to_cart", include_str!("../data/templates/add_to_cart.json")),
];

/// Names of the templates compiled into the library.
pub fn bundled_template_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

/// Every bundled template, one per standard subset.
pub fn bundled_templates() -> Vec<SyntheticTemplate> {
    BUNDLED.iter().map(|(n, _)| SyntheticTemplate::bundled(n).expect("bundled templates parse")).collect()
}

impl SyntheticTemplate {
    pub fn bundled(name: &str) -> Result<Self, Error> {
        let (_, src) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidTemplate(format!("no bundled template named {name:?}")))?;
        Self::from_json(src)
    }

    pub fn from_json(src: &str) -> Result<Self, Error> {
        serde_json::from_str(src).map_err(|e| Error::InvalidTemplate(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A bundled name, or otherwise a path to a template file.
    pub fn resolve(name_or_path: &str) -> Result<Self, Error> {
        if bundled_template_names().contains(&name_or_path) {
            Self::bundled(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    fn slot_names(&self) -> Result<BTreeSet<String>, Error> {
        let mut names = BTreeSet::new();
        for s in std::iter::once(&self.instruction_pattern).chain(&self.sop_skeleton) {
            for name in slots_in(s)? {
                if !self.element_pools.get(&name).is_some_and(|p| !p.is_empty()) {
                    return Err(Error::InvalidTemplate(format!("slot {{{name}}} has no non-empty pool")));
                }
                names.insert(name);
            }
        }
        Ok(names)
    }

    fn check_shape(&self) -> Result<(), Error> {
        if self.sop_skeleton.is_empty() {
            return Err(Error::InvalidTemplate(format!("template {:?} has an empty skeleton", self.name)));
        }
        if self.max_repeats == 0 {
            return Err(Error::InvalidTemplate("max_repeats must be at least 1".into()));
        }
        Ok(())
    }
}

fn slots_in(s: &str) -> Result<Vec<String>, Error> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| Error::InvalidTemplate(format!("unclosed slot in {s:?}")))?;
        out.push(after[..close].to_string());
        rest = &after[close + 1..];
    }
    Ok(out)
}

fn fill(s: &str, values: &BTreeMap<String, String>) -> String {
    values.iter().fold(s.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

/// How one skeleton entry is acted out.
#[derive(Debug, Clone)]
enum Plan {
    Type(String),
    Status(ActionKind),
    Click(Vec<PoolElement>),
    Press(ActionKind),
    Scroll,
}

fn type_text<'d>(rules: &RuleSet, desc: &'d str) -> Option<&'d str> {
    let (prefix, suffix) = rules.kind_description(KindPattern::Type)?.split_once(TYPE_SLOT)?;
    desc.strip_prefix(prefix)?.strip_suffix(suffix)
}

fn classify_element(el: &PoolElement, rules: &RuleSet) -> Classification {
    classify_action(
        &CanonicalAction::Click { element_id: 0, text: el.text.clone(), ui_type: el.ui_type.clone() },
        rules,
    )
}

/// Mirrors the order in which the rule-inverting policy tries each realization.
fn plan_entry(desc: &str, screen_pool: &[PoolElement], rules: &RuleSet) -> Result<Plan, Error> {
    if let Some(text) = type_text(rules, desc) {
        return Ok(Plan::Type(text.to_string()));
    }
    if rules.kind_description(KindPattern::StatusComplete) == Some(desc) {
        return Ok(Plan::Status(ActionKind::StatusTaskComplete));
    }
    let wanted = Classification::Subtask(desc.to_string());
    let targets: Vec<PoolElement> =
        screen_pool.iter().filter(|el| classify_element(el, rules) == wanted).cloned().collect();
    if !targets.is_empty() {
        return Ok(Plan::Click(targets));
    }
    let presses = [
        (KindPattern::PressHome, ActionKind::PressHome),
        (KindPattern::PressEnter, ActionKind::PressEnter),
        (KindPattern::PressBack, ActionKind::PressBack),
    ];
    for (kind, action) in presses {
        if rules.kind_description(kind) == Some(desc) {
            return Ok(Plan::Press(action));
        }
    }
    if rules.kind_description(KindPattern::StatusImpossible) == Some(desc) {
        return Ok(Plan::Status(ActionKind::StatusTaskImpossible));
    }
    if rules.kind_description(KindPattern::Scroll) == Some(desc) {
        return Ok(Plan::Scroll);
    }
    Err(Error::UnrealizableTemplate(desc.to_string()))
}

/// Lays elements out as full-width rows separated by gaps wide enough that even the
/// enlarged boxes stay disjoint. Ids follow row order.
fn layout(elements: Vec<PoolElement>, rng: &mut ChaCha8Rng) -> Vec<UiElement> {
    let rows = elements.len().max(1) as f64;
    let h = 0.9 / rows;
    let round = |v: f64| (v * 10_000.0).round() / 10_000.0;
    elements
        .into_iter()
        .enumerate()
        .map(|(i, el)| {
            let y0 = 0.05 + i as f64 * h;
            let bbox = BBox::new(
                round(rng.gen_range(0.02..0.3)),
                round(y0),
                round(rng.gen_range(0.6..0.98)),
                round(y0 + 0.8 * h),
            );
            UiElement::new(i as u32, el.text, el.ui_type, bbox)
        })
        .collect()
}

fn screen_for(target: Option<&PoolElement>, distractors: &[PoolElement], rng: &mut ChaCha8Rng) -> Vec<UiElement> {
    let k = rng.gen_range(2..=4).min(distractors.len());
    let mut items: Vec<PoolElement> = distractors.choose_multiple(rng, k).cloned().collect();
    items.extend(target.cloned());
    items.shuffle(rng);
    layout(items, rng)
}

fn generate_episode(
    t: &SyntheticTemplate,
    rules: &RuleSet,
    slot_names: &BTreeSet<String>,
    episode_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, Error> {
    let values: BTreeMap<String, String> = slot_names
        .iter()
        .map(|n| {
            let pool = &t.element_pools[n];
            (n.clone(), pool[rng.gen_range(0..pool.len())].text.clone())
        })
        .collect();
    let skeleton: Vec<String> = t.sop_skeleton.iter().map(|s| fill(s, &values)).collect();
    if let Some(w) = skeleton.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidTemplate(format!("consecutive skeleton entries {:?} would merge", w[0])));
    }
    let complete = rules.kind_description(KindPattern::StatusComplete);
    if skeleton[..skeleton.len() - 1].iter().any(|d| Some(d.as_str()) == complete) {
        return Err(Error::InvalidTemplate("a completion entry may only come last".into()));
    }

    let screen_pool: Vec<PoolElement> = t
        .element_pools
        .iter()
        .filter(|(name, _)| !slot_names.contains(*name))
        .flat_map(|(_, pool)| pool.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let generic_click = rules.kind_description(KindPattern::Click);

    let mut pairs = Vec::new();
    for desc in &skeleton {
        let plan = plan_entry(desc, &screen_pool, rules)?;
        let wanted = Classification::Subtask(desc.clone());
        let distractors: Vec<PoolElement> =
            screen_pool.iter().filter(|el| classify_element(el, rules) != wanted).cloned().collect();
        let repeatable =
            matches!(plan, Plan::Scroll) || (matches!(plan, Plan::Click(_)) && generic_click == Some(desc));
        let times = if repeatable { rng.gen_range(1..=t.max_repeats) } else { 1 };
        for _ in 0..times {
            let (screen, action) = match &plan {
                Plan::Click(targets) => {
                    let target = targets.choose(rng).expect("non-empty targets");
                    let screen = screen_for(Some(target), &distractors, rng);
                    let el = screen
                        .iter()
                        .find(|e| e.text == target.text && e.ui_type == target.ui_type)
                        .expect("target is on screen");
                    let at = el.bbox.center();
                    (screen, RawAction::tap(at))
                }
                Plan::Type(text) => (screen_for(None, &distractors, rng), RawAction::typed(text.clone())),
                Plan::Status(kind) | Plan::Press(kind) => {
                    (screen_for(None, &distractors, rng), RawAction::simple(*kind))
                }
                Plan::Scroll => (
                    screen_for(None, &distractors, rng),
                    RawAction::dual_point(Point::new(0.5, 0.3), Point::new(0.5, 0.8)),
                ),
            };
            pairs.push((screen, action));
        }
    }
    Ok(Episode::from_pairs(episode_id, t.subset.clone(), fill(&t.instruction_pattern, &values), pairs))
}

/// Generates `n` episodes from one template. Identical `(t, rules, n, seed)` give
/// identical corpora.
pub fn generate_synthetic(t: &SyntheticTemplate, rules: &RuleSet, n: usize, seed: u64) -> Result<Corpus, Error> {
    generate_mixed(std::slice::from_ref(t), rules, n, seed)
}

/// Generates `n` episodes cycling through `templates` in order.
pub fn generate_mixed(templates: &[SyntheticTemplate], rules: &RuleSet, n: usize, seed: u64) -> Result<Corpus, Error> {
    if n == 0 {
        return Err(Error::InvalidTemplate("episode count must be at least 1".into()));
    }
    if templates.is_empty() {
        return Err(Error::InvalidTemplate("no templates given".into()));
    }
    let mut prepared = Vec::with_capacity(templates.len());
    for t in templates {
        t.check_shape()?;
        prepared.push((t, t.slot_names()?));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes = (0..n)
        .map(|i| {
            let (t, slots) = &prepared[i % prepared.len()];
            generate_episode(t, rules, slots, format!("{}-s{seed}-{i:04}", t.name), &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::new(episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::validate_episode;
    use crate::grounding::{canonicalize, GroundingConfig};
    use crate::sop::build_pipeline;

    fn aitw() -> RuleSet {
        RuleSet::bundled("aitw").unwrap()
    }

    fn annotate(e: &Episode, rules: &RuleSet) -> Vec<String> {
        let cfg = GroundingConfig::default();
        let canon: Vec<_> = e.steps.iter().map(|s| canonicalize(&s.action, &s.screen, &cfg).action).collect();
        build_pipeline(e, &canon, rules).unwrap().descriptions().into_iter().map(String::from).collect()
    }

    fn fits(pattern: &str, s: &str) -> bool {
        match pattern.split_once('{') {
            None => pattern == s,
            Some((prefix, rest)) => {
                let suffix = rest.split_once('}').unwrap().1;
                s.len() > prefix.len() + suffix.len() && s.starts_with(prefix) && s.ends_with(suffix)
            }
        }
    }

    #[test]
    fn every_bundled_template_round_trips() {
        let rules = aitw();
        for t in bundled_templates() {
            let c = generate_synthetic(&t, &rules, 20, 3).unwrap();
            for e in &c.episodes {
                assert!(validate_episode(e).is_empty(), "{}: {:?}", e.episode_id, validate_episode(e));
                let got = annotate(e, &rules);
                assert_eq!(got.len(), t.sop_skeleton.len(), "{}: {got:?}", e.episode_id);
                for (pattern, desc) in t.sop_skeleton.iter().zip(&got) {
                    assert!(fits(pattern, desc), "{}: {desc:?} does not fit {pattern:?}", e.episode_id);
                }
            }
        }
    }

    #[test]
    fn amazon_skeleton_is_recovered() {
        let rules = aitw();
        let t = SyntheticTemplate::bundled("amazon_headphones").unwrap();
        let c = generate_synthetic(&t, &rules, 1, 0).unwrap();
        let e = &c.episodes[0];
        let got = annotate(e, &rules);
        assert_eq!(got[0], "search on the website");
        assert_eq!(got[1], "view and click page content");
        assert!(got[2].starts_with("type '"));
        assert_eq!(got[3], "view and click page content");
        assert_eq!(got[4], "task complete");
    }

    #[test]
    fn deterministic_per_seed() {
        let rules = aitw();
        let ts = bundled_templates();
        let a = generate_mixed(&ts, &rules, 15, 11).unwrap();
        let b = generate_mixed(&ts, &rules, 15, 11).unwrap();
        let c = generate_mixed(&ts, &rules, 15, 12).unwrap();
        assert_eq!(a.episodes, b.episodes);
        assert_ne!(a.episodes, c.episodes);
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let t = SyntheticTemplate::bundled("amazon_headphones").unwrap();
        assert!(generate_synthetic(&t, &aitw(), 0, 0).is_err());
    }

    #[test]
    fn unrealizable_entry_is_reported() {
        let mut t = SyntheticTemplate::bundled("amazon_headphones").unwrap();
        t.sop_skeleton.insert(0, "fly to the moon".into());
        match generate_synthetic(&t, &aitw(), 1, 0) {
            Err(Error::UnrealizableTemplate(d)) => assert_eq!(d, "fly to the moon"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_templates() {
        let mut t = SyntheticTemplate::bundled("amazon_headphones").unwrap();
        t.instruction_pattern = "Search {query".into();
        assert!(matches!(generate_synthetic(&t, &aitw(), 1, 0), Err(Error::InvalidTemplate(_))));
        let mut t = SyntheticTemplate::bundled("amazon_headphones").unwrap();
        t.sop_skeleton.insert(0, "task complete".into());
        assert!(matches!(generate_synthetic(&t, &aitw(), 1, 0), Err(Error::InvalidTemplate(_))));
        assert!(SyntheticTemplate::from_json(r#"{"name":"x"}"#).is_err());
    }
}
