//! Pairing derived triplets into chosen/rejected preference instances and
//! summarizing turn statistics of the result.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{LanguagePack, Triplet};
use crate::corpus::{loss_mask, CorpusError, Difficulty, Lesson, PairRecord};
use crate::dialogue::{
    render_states, state_string, turn_count, validate_trajectory_with, CorpusRecord, DialogueError,
    DialogueState, Message, QueryType, TargetCall, ValidationOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairingError {
    #[error("pattern {pattern} cannot be built from seed {seed_id}: {reason}")]
    PatternUnsatisfiable {
        pattern: String,
        seed_id: String,
        reason: String,
    },
    #[error("stratum {stratum} needs {needed} triplets but only {available} are available")]
    InsufficientSeeds {
        stratum: Difficulty,
        needed: usize,
        available: usize,
    },
    #[error("pair {pair_id} failed the pattern audit: expected {expected}, got {actual}")]
    PatternAudit {
        pair_id: String,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
}

/// One row of the composition table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairPattern {
    EasyT1Redundant,
    EasyT1Accept,
    EasyT2Hallucination,
    EasyT2Accept,
    HardT1RedundantN,
    HardT1RedundantM,
    HardT1Accept,
    HardT2Hallucination,
    HardT2HallucinationM,
    HardT2Accept,
    HardT3RejectDirect,
    HardT3RejectSlots,
}

impl PairPattern {
    pub const ALL: [PairPattern; 12] = [
        PairPattern::EasyT1Redundant,
        PairPattern::EasyT1Accept,
        PairPattern::EasyT2Hallucination,
        PairPattern::EasyT2Accept,
        PairPattern::HardT1RedundantN,
        PairPattern::HardT1RedundantM,
        PairPattern::HardT1Accept,
        PairPattern::HardT2Hallucination,
        PairPattern::HardT2HallucinationM,
        PairPattern::HardT2Accept,
        PairPattern::HardT3RejectDirect,
        PairPattern::HardT3RejectSlots,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PairPattern::EasyT1Redundant => "easy-t1-redundant",
            PairPattern::EasyT1Accept => "easy-t1-accept",
            PairPattern::EasyT2Hallucination => "easy-t2-hallucination",
            PairPattern::EasyT2Accept => "easy-t2-accept",
            PairPattern::HardT1RedundantN => "hard-t1-redundant-n",
            PairPattern::HardT1RedundantM => "hard-t1-redundant-m",
            PairPattern::HardT1Accept => "hard-t1-accept",
            PairPattern::HardT2Hallucination => "hard-t2-hallucination",
            PairPattern::HardT2HallucinationM => "hard-t2-hallucination-m",
            PairPattern::HardT2Accept => "hard-t2-accept",
            PairPattern::HardT3RejectDirect => "hard-t3-reject-direct",
            PairPattern::HardT3RejectSlots => "hard-t3-reject-slots",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.id() == id)
    }

    pub fn difficulty(self) -> Difficulty {
        match self {
            PairPattern::EasyT1Redundant
            | PairPattern::EasyT1Accept
            | PairPattern::EasyT2Hallucination
            | PairPattern::EasyT2Accept => Difficulty::Easy,
            _ => Difficulty::Hard,
        }
    }

    pub fn query_type(self) -> QueryType {
        use PairPattern::*;
        match self {
            EasyT1Redundant | EasyT1Accept | HardT1RedundantN | HardT1RedundantM | HardT1Accept => {
                QueryType::Type1
            }
            EasyT2Hallucination | EasyT2Accept | HardT2Hallucination | HardT2HallucinationM
            | HardT2Accept => QueryType::Type2,
            HardT3RejectDirect | HardT3RejectSlots => QueryType::Type3,
        }
    }

    pub fn lesson(self) -> Lesson {
        use PairPattern::*;
        match self {
            EasyT1Redundant | HardT1RedundantN | HardT1RedundantM => {
                Lesson::PreventRedundantSlotFilling
            }
            EasyT1Accept | EasyT2Accept | HardT1Accept | HardT2Accept => Lesson::ToolCallAccept,
            EasyT2Hallucination | HardT2Hallucination | HardT2HallucinationM => {
                Lesson::PreventSlotHallucination
            }
            HardT3RejectDirect | HardT3RejectSlots => Lesson::ToolCallReject,
        }
    }

    /// Symbolic chosen/rejected patterns as printed in the composition table.
    pub fn labels(self) -> (&'static str, &'static str) {
        use PairPattern::*;
        match self {
            EasyT1Redundant => ("1→3→4→5", "1→2→3→4→5"),
            EasyT1Accept | HardT1Accept => ("1→3→4→5", "1→1"),
            EasyT2Hallucination => ("1→2→3→4→5", "1→3→4→5"),
            EasyT2Accept => ("1→2→3→4→5", "1→1"),
            HardT1RedundantN => ("1→3→4→5", "1→(2*N)→3→4→5"),
            HardT1RedundantM => ("1→3→4→5", "1→(2*M)→3→4→5"),
            HardT2Hallucination => ("1→(2*N)→3→4→5", "1→3→4→5"),
            HardT2HallucinationM => ("1→(2*N)→3→4→5", "1→(2*M)→3→4→5"),
            HardT2Accept => ("1→(2*N)→3→4→5", "1→1"),
            HardT3RejectDirect => ("1→1", "1→3→4"),
            HardT3RejectSlots => ("1→1", "1→(2*N)→3→4"),
        }
    }

    pub fn uses_m(self) -> bool {
        matches!(self, PairPattern::HardT1RedundantM | PairPattern::HardT2HallucinationM)
    }

    /// Composition-table counts.
    pub fn default_count(self) -> usize {
        use PairPattern::*;
        match self {
            EasyT1Redundant | EasyT2Hallucination | EasyT2Accept => 2089,
            EasyT1Accept => 2090,
            HardT1RedundantM | HardT2HallucinationM => 2530,
            HardT3RejectDirect => 567,
            HardT1RedundantN | HardT1Accept | HardT2Hallucination | HardT2Accept
            | HardT3RejectSlots => 562,
        }
    }
}

impl fmt::Display for PairPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Concrete state strings for a pattern with `n` triplet exchanges and `m` subset size.
pub fn expected_state_strings(pattern: PairPattern, n: usize, m: usize) -> (String, String) {
    use DialogueState::*;
    let slots = |k: usize| std::iter::repeat_n(ToolSelectedIncomplete, k);
    let call = [ToolSelectedComplete, WaitForToolResponse];
    let full = |k: usize| -> Vec<DialogueState> {
        slots(k).chain(call).chain([Complete]).collect()
    };
    let reject = vec![Initial];
    let (chosen, rejected) = match pattern.query_type() {
        QueryType::Type1 => (
            full(0),
            match pattern {
                PairPattern::EasyT1Redundant | PairPattern::HardT1RedundantN => full(n),
                PairPattern::HardT1RedundantM => full(m),
                _ => reject,
            },
        ),
        QueryType::Type2 => (
            full(n),
            match pattern {
                PairPattern::EasyT2Hallucination | PairPattern::HardT2Hallucination => full(0),
                PairPattern::HardT2HallucinationM => full(m),
                _ => reject,
            },
        ),
        QueryType::Type3 => (
            reject,
            match pattern {
                PairPattern::HardT3RejectDirect => call.to_vec(),
                _ => slots(n).chain(call).collect(),
            },
        ),
    };
    (render_states(&chosen), render_states(&rejected))
}

fn call_index(record: &CorpusRecord) -> Option<usize> {
    record.first_tool_call().map(|(i, _)| i)
}

/// The chosen trajectory of a pattern.
pub fn chosen_for(triplet: &Triplet, pattern: PairPattern) -> &CorpusRecord {
    match pattern.query_type() {
        QueryType::Type1 => &triplet.t1,
        QueryType::Type2 => &triplet.t2,
        QueryType::Type3 => match pattern {
            PairPattern::HardT3RejectDirect => &triplet.t3_from_t1,
            _ => &triplet.t3_from_t2,
        },
    }
}

/// Builds the rejected trajectory of `pattern` from a triplet. `m` is the
/// number of slot exchanges kept by the subset patterns.
pub fn make_rejected(
    triplet: &Triplet,
    pattern: PairPattern,
    m: Option<usize>,
    lang: &LanguagePack,
) -> Result<CorpusRecord, PairingError> {
    let unsatisfiable = |reason: &str| PairingError::PatternUnsatisfiable {
        pattern: pattern.id().to_string(),
        seed_id: triplet.seed_id.clone(),
        reason: reason.to_string(),
    };
    if pattern.difficulty() != triplet.difficulty {
        return Err(unsatisfiable("difficulty mismatch"));
    }
    let n = triplet.n_exchanges;
    let m = if pattern.uses_m() {
        let m = m.ok_or_else(|| unsatisfiable("subset size not given"))?;
        if !(m > 1 && m < n) {
            return Err(unsatisfiable("subset size must satisfy N > M > 1"));
        }
        m
    } else {
        0
    };
    let (t1, t2) = (&triplet.t1, &triplet.t2);
    let c1 = call_index(t1).ok_or_else(|| unsatisfiable("Type 1 side has no call"))?;
    let c2 = call_index(t2).ok_or_else(|| unsatisfiable("Type 2 side has no call"))?;
    if c2 != 1 + 2 * n {
        return Err(unsatisfiable("Type 2 side does not have N slot exchanges"));
    }
    let qa = |k: usize| t2.messages[1..1 + 2 * k].iter().cloned();
    let tool = TargetCall::of(t1)
        .and_then(|t| t1.tool(&t.name).cloned())
        .ok_or_else(|| unsatisfiable("target tool missing"))?;
    let reject = || Message::assistant(lang.reject_text(&tool));

    let with = |head: &CorpusRecord, messages: Vec<Message>| CorpusRecord {
        messages,
        tools: head.tools.clone(),
        extra: head.extra.clone(),
    };
    let head1 = t1.messages[0].clone();
    let head2 = t2.messages[0].clone();
    use PairPattern::*;
    Ok(match pattern {
        EasyT1Redundant | HardT1RedundantN | HardT1RedundantM => {
            let k = if pattern == HardT1RedundantM { m } else { n };
            let messages = std::iter::once(head1)
                .chain(qa(k))
                .chain(t1.messages[c1..].iter().cloned())
                .collect();
            with(t1, messages)
        }
        EasyT1Accept | HardT1Accept => with(t1, vec![head1, reject()]),
        EasyT2Hallucination | HardT2Hallucination | HardT2HallucinationM => {
            let k = if pattern == HardT2HallucinationM { m } else { 0 };
            let messages = std::iter::once(head2)
                .chain(qa(k))
                .chain(t2.messages[c2..].iter().cloned())
                .collect();
            with(t2, messages)
        }
        EasyT2Accept | HardT2Accept => with(t2, vec![head2, reject()]),
        // Truncated right after the call: the removed tool never answers.
        HardT3RejectDirect => with(&triplet.t3_from_t1, vec![head1, t1.messages[c1].clone()]),
        HardT3RejectSlots => {
            let messages = std::iter::once(head2)
                .chain(qa(n))
                .chain(std::iter::once(t2.messages[c2].clone()))
                .collect();
            with(&triplet.t3_from_t2, messages)
        }
    })
}

/// Target pair counts per pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionConfig {
    pub counts: BTreeMap<PairPattern, usize>,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            counts: PairPattern::ALL
                .into_iter()
                .map(|p| (p, p.default_count()))
                .collect(),
        }
    }
}

impl CompositionConfig {
    pub fn uniform(count: usize) -> Self {
        Self {
            counts: PairPattern::ALL.into_iter().map(|p| (p, count)).collect(),
        }
    }

    pub fn count(&self, p: PairPattern) -> usize {
        self.counts.get(&p).copied().unwrap_or(0)
    }

    pub fn total(&self, difficulty: Option<Difficulty>) -> usize {
        self.counts
            .iter()
            .filter(|(p, _)| difficulty.is_none_or(|d| p.difficulty() == d))
            .map(|(_, c)| c)
            .sum()
    }

    /// Largest single-pattern demand in a stratum; each pattern draws distinct triplets.
    pub fn demand(&self, difficulty: Difficulty) -> usize {
        self.counts
            .iter()
            .filter(|(p, _)| p.difficulty() == difficulty)
            .map(|(_, c)| *c)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BuildReport {
    pub requested: BTreeMap<String, usize>,
    pub emitted: BTreeMap<String, usize>,
    pub available: BTreeMap<String, usize>,
    /// Per-stratum scale factor applied when triplets were scarce.
    pub scale: BTreeMap<String, f64>,
    pub total: usize,
    pub stats: StatsReport,
}

fn pattern_rng(seed: u64, pattern: PairPattern) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pattern as u64 + 1);
    rng
}

/// Checks a built pair against its pattern and the dataset invariants.
pub fn audit_pair(pair: &PairRecord, expected: &(String, String)) -> Result<(), PairingError> {
    pair.check_invariants()?;
    let actual = (state_string(&pair.chosen)?, state_string(&pair.rejected)?);
    if &actual != expected || pair.chosen.tools != pair.rejected.tools {
        return Err(PairingError::PatternAudit {
            pair_id: pair.pair_id.clone(),
            expected: format!("{} vs {}", expected.0, expected.1),
            actual: format!("{} vs {}", actual.0, actual.1),
        });
    }
    let lenient = ValidationOptions {
        allow_unknown_tools: pair.query_type == QueryType::Type3,
    };
    for side in [&pair.chosen, &pair.rejected] {
        let report = validate_trajectory_with(side, lenient);
        if !report.ok {
            return Err(PairingError::PatternAudit {
                pair_id: pair.pair_id.clone(),
                expected: "valid trajectory".into(),
                actual: format!("{:?}", report.violations),
            });
        }
    }
    Ok(())
}

pub fn make_pair(
    triplet: &Triplet,
    pattern: PairPattern,
    m: Option<usize>,
    lang: &LanguagePack,
) -> Result<PairRecord, PairingError> {
    let rejected = make_rejected(triplet, pattern, m, lang)?;
    let chosen = chosen_for(triplet, pattern).clone();
    let pair = PairRecord {
        pair_id: format!("{}-{}", pattern.id(), triplet.seed_id),
        query_type: pattern.query_type(),
        difficulty: pattern.difficulty(),
        lesson: pattern.lesson(),
        pattern: format!("{} vs {}", pattern.labels().0, pattern.labels().1),
        loss_mask_chosen: loss_mask(&chosen),
        loss_mask_rejected: loss_mask(&rejected),
        chosen,
        rejected,
    };
    audit_pair(
        &pair,
        &expected_state_strings(pattern, triplet.n_exchanges, m.unwrap_or(0)),
    )?;
    Ok(pair)
}

/// Samples distinct triplets per pattern and builds every pair. Output is
/// sorted by `pair_id`.
pub fn build_pairs(
    triplets: &[Triplet],
    config: &CompositionConfig,
    seed: u64,
    strict: bool,
    lang: &LanguagePack,
) -> Result<(Vec<PairRecord>, BuildReport), PairingError> {
    let mut report = BuildReport::default();
    let mut strata: BTreeMap<Difficulty, Vec<&Triplet>> = BTreeMap::new();
    for t in triplets {
        strata.entry(t.difficulty).or_default().push(t);
    }
    for d in [Difficulty::Easy, Difficulty::Hard] {
        let available = strata.get(&d).map_or(0, Vec::len);
        let demand = config.demand(d);
        report.available.insert(d.to_string(), available);
        let scale = if demand == 0 || available >= demand {
            1.0
        } else if strict {
            return Err(PairingError::InsufficientSeeds {
                stratum: d,
                needed: demand,
                available,
            });
        } else {
            available as f64 / demand as f64
        };
        report.scale.insert(d.to_string(), scale);
    }

    let mut jobs: Vec<(&Triplet, PairPattern, Option<usize>)> = Vec::new();
    for pattern in PairPattern::ALL {
        let requested = config.count(pattern);
        report.requested.insert(pattern.id().into(), requested);
        let d = pattern.difficulty();
        let pool = strata.get(&d).map(Vec::as_slice).unwrap_or(&[]);
        let count = ((requested as f64) * report.scale[&d.to_string()]).floor() as usize;
        let count = count.min(pool.len());
        let mut rng = pattern_rng(seed, pattern);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order[..count] {
            let t = pool[i];
            let m = pattern
                .uses_m()
                .then(|| rng.gen_range(2..t.n_exchanges.max(3)));
            jobs.push((t, pattern, m));
        }
        report.emitted.insert(pattern.id().into(), count);
    }

    let mut pairs = jobs
        .par_iter()
        .map(|(t, p, m)| make_pair(t, *p, *m, lang))
        .collect::<Result<Vec<_>, _>>()?;
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    report.total = pairs.len();
    report.stats = dataset_stats(&pairs);
    Ok((pairs, report))
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TurnStats {
    pub pairs: usize,
    pub chosen_mean: f64,
    pub rejected_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StatsReport {
    /// difficulty ("easy", "hard", "all") → task ("slot", "relevance") → stats.
    pub tasks: BTreeMap<String, BTreeMap<String, TurnStats>>,
    /// difficulty → lesson tag → stats, covering every pair.
    pub lessons: BTreeMap<String, BTreeMap<String, TurnStats>>,
}

impl StatsReport {
    pub fn get(&self, difficulty: &str, task: &str) -> Option<&TurnStats> {
        self.tasks.get(difficulty)?.get(task)
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty() && self.lessons.is_empty()
    }
}

/// Task a lesson counts toward in the turn statistics.
pub fn lesson_task(lesson: Lesson) -> Option<&'static str> {
    match lesson {
        Lesson::PreventSlotHallucination => Some("slot"),
        Lesson::ToolCallReject => Some("relevance"),
        _ => None,
    }
}

#[derive(Default)]
struct Acc {
    n: usize,
    chosen: usize,
    rejected: usize,
}

impl Acc {
    fn finish(&self) -> TurnStats {
        TurnStats {
            pairs: self.n,
            chosen_mean: self.chosen as f64 / self.n as f64,
            rejected_mean: self.rejected as f64 / self.n as f64,
        }
    }
}

pub fn dataset_stats(pairs: &[PairRecord]) -> StatsReport {
    let mut tasks: BTreeMap<(String, String), Acc> = BTreeMap::new();
    let mut lessons: BTreeMap<(String, String), Acc> = BTreeMap::new();
    for p in pairs {
        let (c, r) = (turn_count(&p.chosen), turn_count(&p.rejected));
        for d in [p.difficulty.to_string(), "all".to_string()] {
            let bump = |map: &mut BTreeMap<(String, String), Acc>, key: String| {
                let acc = map.entry((d.clone(), key)).or_default();
                acc.n += 1;
                acc.chosen += c;
                acc.rejected += r;
            };
            if let Some(task) = lesson_task(p.lesson) {
                bump(&mut tasks, task.to_string());
            }
            bump(&mut lessons, p.lesson.as_str().to_string());
        }
    }
    let nest = |flat: BTreeMap<(String, String), Acc>| {
        let mut out: BTreeMap<String, BTreeMap<String, TurnStats>> = BTreeMap::new();
        for ((d, k), acc) in flat {
            out.entry(d).or_default().insert(k, acc.finish());
        }
        out
    };
    StatsReport {
        tasks: nest(tasks),
        lessons: nest(lessons),
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::augment::fixtures::translate_type1;
    use crate::augment::{build_triplets, AugmentConfig};
    use crate::dialogue::fixtures::bmi_type1;

    /// One pair per applicable pattern from an Easy (BMI) and a Hard (translate) seed.
    pub fn sample_pairs() -> Vec<PairRecord> {
        let lang = LanguagePack::default();
        let seeds = vec![bmi_type1(), translate_type1()];
        let triplets = build_triplets(&seeds, &AugmentConfig::default(), &lang, None).0;
        let mut out = Vec::new();
        for t in &triplets {
            for p in PairPattern::ALL.into_iter().filter(|p| p.difficulty() == t.difficulty) {
                let m = p.uses_m().then_some(2);
                out.push(make_pair(t, p, m, &lang).expect("fixture pair"));
            }
        }
        out
    }
}
