use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::InferError;
use crate::data::{simulator_answer, EncodedRecord, SimulatorAnswer, SymptomVocab};
use crate::net::{Diaformer, ModelInput};
use crate::tensor::{softmax, Float};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Stop when `p(END)` exceeds this.
    pub rho_e: Float,
    /// Stop when the next candidate's probability falls below this.
    pub rho_p: Float,
    pub max_turns: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            rho_e: 0.9,
            rho_p: 0.01,
            max_turns: 20,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        if !(self.rho_p > 0.0 && self.rho_p <= self.rho_e && self.rho_e <= 1.0) {
            return Err(InferError::Config(format!(
                "need 0 < rho_p <= rho_e <= 1, got rho_p {} rho_e {}",
                self.rho_p, self.rho_e
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StopReason {
    EndSymbol,
    LowProbability,
    TurnBudget,
    Exhausted,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EndSymbol => "EndSymbol",
            Self::LowProbability => "LowProbability",
            Self::TurnBudget => "TurnBudget",
            Self::Exhausted => "Exhausted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inquiry {
    pub symptom: usize,
    pub answer: SimulatorAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub disease: usize,
    pub probability: Float,
    pub distribution: Vec<Float>,
}

impl Diagnosis {
    pub fn from_distribution(distribution: Vec<Float>) -> Self {
        let (disease, &probability) = distribution
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty distribution");
        Self {
            disease,
            probability,
            distribution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DialogueState {
    pub explicit: Vec<(usize, bool)>,
    /// Symptoms answered True or False, in inquiry order.
    pub acquired: Vec<(usize, bool)>,
    /// Every inquired symptom, including NotSure ones.
    pub inquired: BTreeSet<usize>,
    pub history: Vec<Inquiry>,
    pub turns: usize,
    pub stop_reason: Option<StopReason>,
    pub diagnosis: Option<Diagnosis>,
}

impl DialogueState {
    pub fn new(explicit: Vec<(usize, bool)>) -> Self {
        Self {
            explicit,
            ..Self::default()
        }
    }

    /// Explicit symptoms followed by acquired ones.
    pub fn known(&self) -> impl Iterator<Item = &(usize, bool)> {
        self.explicit.iter().chain(&self.acquired)
    }

    pub fn is_finished(&self) -> bool {
        self.stop_reason.is_some()
    }
}

fn check_ids(state: &DialogueState, vocab: &SymptomVocab) -> Result<(), InferError> {
    let size = vocab.n_symptoms();
    match state.known().find(|&&(s, _)| s >= size) {
        Some(&(id, _)) => Err(InferError::UnknownSymptom { id, size }),
        None => Ok(()),
    }
}

/// Softmax over the inquiry classes at a trailing `[S]`.
pub fn next_inquiry_distribution(
    state: &DialogueState,
    model: &Diaformer,
    vocab: &SymptomVocab,
) -> Result<Vec<Float>, InferError> {
    check_ids(state, vocab)?;
    let input = ModelInput::for_inquiry(&state.explicit, &state.acquired, vocab);
    let (s, _) = model.logits(&input)?;
    Ok(softmax(&s[0]))
}

/// Disease distribution given everything answered so far.
pub fn diagnose(
    state: &DialogueState,
    model: &Diaformer,
    vocab: &SymptomVocab,
) -> Result<Diagnosis, InferError> {
    check_ids(state, vocab)?;
    let input = ModelInput::for_diagnosis(&state.explicit, &state.acquired, vocab);
    let (_, d) = model.logits(&input)?;
    let d = d.expect("diagnosis layout has a [D] position");
    Ok(Diagnosis::from_distribution(softmax(&d)))
}

/// Supplies answers to inquiries.
pub trait AnswerSource {
    fn answer(&mut self, symptom: usize) -> SimulatorAnswer;
}

impl<F: FnMut(usize) -> SimulatorAnswer> AnswerSource for F {
    fn answer(&mut self, symptom: usize) -> SimulatorAnswer {
        self(symptom)
    }
}

/// Answers from a record's goal symptoms.
#[derive(Debug, Clone, Copy)]
pub struct RecordSimulator<'a>(pub &'a EncodedRecord);

impl AnswerSource for RecordSimulator<'_> {
    fn answer(&mut self, symptom: usize) -> SimulatorAnswer {
        simulator_answer(self.0, symptom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Ask(usize),
    Finished(StopReason),
}

/// Step-wise inquiry loop. Call [`Dialogue::advance`] to get the first
/// question, then [`Dialogue::answer`] for each reply.
#[derive(Debug, Clone)]
pub struct Dialogue {
    pub state: DialogueState,
    config: InferenceConfig,
    /// Current distribution, kept across NotSure replies.
    dist: Option<Vec<Float>>,
    pending: Option<usize>,
}

impl Dialogue {
    pub fn new(explicit: Vec<(usize, bool)>, config: InferenceConfig) -> Result<Self, InferError> {
        config.validate()?;
        Ok(Self {
            state: DialogueState::new(explicit),
            config,
            dist: None,
            pending: None,
        })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    pub fn pending(&self) -> Option<usize> {
        self.pending
    }

    /// Picks the next question, or stops and diagnoses.
    pub fn advance(&mut self, model: &Diaformer, vocab: &SymptomVocab) -> Result<Step, InferError> {
        if let Some(reason) = self.state.stop_reason {
            return Ok(Step::Finished(reason));
        }
        if let Some(s) = self.pending {
            return Ok(Step::Ask(s));
        }
        let reason = self.select(model, vocab)?;
        match reason {
            None => Ok(Step::Ask(self.pending.expect("selected"))),
            Some(r) => {
                self.state.stop_reason = Some(r);
                self.state.diagnosis = Some(diagnose(&self.state, model, vocab)?);
                Ok(Step::Finished(r))
            }
        }
    }

    fn select(&mut self, model: &Diaformer, vocab: &SymptomVocab) -> Result<Option<StopReason>, InferError> {
        if self.state.turns >= self.config.max_turns {
            return Ok(Some(StopReason::TurnBudget));
        }
        let dist = match self.dist.take() {
            Some(d) => d,
            None => {
                let d = next_inquiry_distribution(&self.state, model, vocab)?;
                if d[vocab.end_class()] > self.config.rho_e {
                    return Ok(Some(StopReason::EndSymbol));
                }
                d
            }
        };
        let known: BTreeSet<usize> = self.state.explicit.iter().map(|&(s, _)| s).collect();
        let best = (0..vocab.n_symptoms())
            .filter(|s| !self.state.inquired.contains(s) && !known.contains(s))
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
        let Some(candidate) = best else {
            return Ok(Some(StopReason::Exhausted));
        };
        if dist[candidate] < self.config.rho_p {
            return Ok(Some(StopReason::LowProbability));
        }
        self.dist = Some(dist);
        self.pending = Some(candidate);
        Ok(None)
    }

    /// Records the reply to the pending question and returns the next step.
    pub fn answer(
        &mut self,
        model: &Diaformer,
        vocab: &SymptomVocab,
        answer: SimulatorAnswer,
    ) -> Result<Step, InferError> {
        if self.state.is_finished() {
            return Err(InferError::Finished);
        }
        let symptom = self.pending.take().ok_or(InferError::NoPendingQuestion)?;
        self.state.turns += 1;
        self.state.inquired.insert(symptom);
        self.state.history.push(Inquiry { symptom, answer });
        if let Some(v) = answer.polarity() {
            self.state.acquired.push((symptom, v));
            self.dist = None;
        }
        self.advance(model, vocab)
    }
}

/// Runs the inquiry loop to completion against `source`.
pub fn run_dialogue(
    explicit: &[(usize, bool)],
    source: &mut dyn AnswerSource,
    model: &Diaformer,
    vocab: &SymptomVocab,
    config: &InferenceConfig,
) -> Result<DialogueState, InferError> {
    let mut dialogue = Dialogue::new(explicit.to_vec(), *config)?;
    let mut step = dialogue.advance(model, vocab)?;
    while let Step::Ask(s) = step {
        let reply = source.answer(s);
        step = dialogue.answer(model, vocab, reply)?;
    }
    Ok(dialogue.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n_sym: usize, n_dis: usize) -> (Diaformer, SymptomVocab) {
        let vocab = SymptomVocab::from_names(
            (0..n_sym).map(|i| format!("s{i}")).collect(),
            (0..n_dis).map(|i| format!("d{i}")).collect(),
        );
        let cfg = ModelConfig::small(&vocab, 1, 8, 2);
        let model = Diaformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (model, vocab)
    }

    fn bias_sym(model: &mut Diaformer, class: usize, value: Float) {
        let id = model.params().find("head.b_sym").unwrap();
        model.params_mut().get_mut(id).tensor.data_mut()[class] = value;
    }

    fn record(explicit: &[(usize, bool)], implicit: &[(usize, bool)]) -> EncodedRecord {
        EncodedRecord {
            explicit: explicit.to_vec(),
            implicit: implicit.to_vec(),
            disease: 0,
        }
    }

    #[test]
    fn config_bounds() {
        assert!(InferenceConfig::default().validate().is_ok());
        let c = InferenceConfig { rho_e: 1.0, rho_p: 1.0, max_turns: 3 };
        assert!(c.validate().is_ok());
        for (e, p) in [(0.9, 0.0), (0.5, 0.6), (1.1, 0.1)] {
            let c = InferenceConfig { rho_e: e, rho_p: p, max_turns: 3 };
            assert!(c.validate().is_err(), "{e} {p}");
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let (model, vocab) = setup(6, 3);
        let mut st = DialogueState::new(vec![(0, true)]);
        st.acquired.push((3, false));
        let d = next_inquiry_distribution(&st, &model, &vocab).unwrap();
        assert_eq!(d.len(), vocab.c_inq());
        assert!((d.iter().sum::<Float>() - 1.0).abs() < 1e-6);
        let dx = diagnose(&st, &model, &vocab).unwrap();
        assert!((dx.distribution.iter().sum::<Float>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unknown_symptom_is_error() {
        let (model, vocab) = setup(4, 2);
        let st = DialogueState::new(vec![(9, true)]);
        assert!(matches!(
            next_inquiry_distribution(&st, &model, &vocab),
            Err(InferError::UnknownSymptom { id: 9, .. })
        ));
    }

    #[test]
    fn forced_end_stops_without_turns() {
        let (mut model, vocab) = setup(5, 2);
        bias_sym(&mut model, vocab.end_class(), 50.0);
        let r = record(&[(0, true)], &[(1, true), (2, true)]);
        let st = run_dialogue(&r.explicit, &mut RecordSimulator(&r), &model, &vocab, &InferenceConfig::default()).unwrap();
        assert_eq!(st.turns, 0);
        assert_eq!(st.stop_reason, Some(StopReason::EndSymbol));
        assert!(st.diagnosis.is_some());
    }

    #[test]
    fn threshold_of_one_stops_immediately() {
        let (model, vocab) = setup(5, 2);
        let r = record(&[(0, true)], &[]);
        let cfg = InferenceConfig { rho_e: 1.0, rho_p: 1.0, max_turns: 20 };
        let st = run_dialogue(&r.explicit, &mut RecordSimulator(&r), &model, &vocab, &cfg).unwrap();
        assert_eq!(st.turns, 0);
        assert_eq!(st.stop_reason, Some(StopReason::LowProbability));
    }

    #[test]
    fn not_sure_keeps_scanning_same_distribution() {
        let (mut model, vocab) = setup(5, 2);
        // ranking 4 > 3 > 2 > 1
        for (s, b) in [(1, 1.0), (2, 2.0), (3, 3.0), (4, 4.0)] {
            bias_sym(&mut model, s, b);
        }
        bias_sym(&mut model, vocab.end_class(), -50.0);
        let cfg = InferenceConfig { rho_e: 0.9, rho_p: 1e-12, max_turns: 20 };
        let mut calls = Vec::new();
        let mut source = |s: usize| {
            calls.push(s);
            SimulatorAnswer::NotSure
        };
        let st = run_dialogue(&[(0, true)], &mut source, &model, &vocab, &cfg).unwrap();
        assert_eq!(st.stop_reason, Some(StopReason::Exhausted));
        assert_eq!(st.turns, 4);
        assert!(st.acquired.is_empty());
        assert_eq!(st.inquired.len(), 4);
        assert!(!calls.contains(&0));
    }

    #[test]
    fn turn_budget_caps_inquiries() {
        let (mut model, vocab) = setup(8, 2);
        bias_sym(&mut model, vocab.end_class(), -50.0);
        let cfg = InferenceConfig { rho_e: 0.9, rho_p: 1e-12, max_turns: 3 };
        let st = run_dialogue(&[(0, true)], &mut |_| SimulatorAnswer::True, &model, &vocab, &cfg).unwrap();
        assert_eq!(st.turns, 3);
        assert_eq!(st.acquired.len(), 3);
        assert_eq!(st.stop_reason, Some(StopReason::TurnBudget));
    }

    #[test]
    fn never_asks_twice_and_is_deterministic() {
        let (mut model, vocab) = setup(10, 3);
        bias_sym(&mut model, vocab.end_class(), -50.0);
        let r = record(&[(2, true)], &[(5, true), (7, false), (1, true)]);
        let cfg = InferenceConfig { rho_e: 0.9, rho_p: 1e-12, max_turns: 20 };
        let a = run_dialogue(&r.explicit, &mut RecordSimulator(&r), &model, &vocab, &cfg).unwrap();
        let b = run_dialogue(&r.explicit, &mut RecordSimulator(&r), &model, &vocab, &cfg).unwrap();
        assert_eq!(a, b);
        let asked: Vec<usize> = a.history.iter().map(|q| q.symptom).collect();
        let unique: BTreeSet<usize> = asked.iter().copied().collect();
        assert_eq!(unique.len(), asked.len());
        assert_eq!(a.turns, asked.len());
        assert_eq!(a.stop_reason, Some(StopReason::Exhausted));
        assert_eq!(a.acquired.len(), 3);
    }

    #[test]
    fn not_sure_does_not_change_diagnosis() {
        let (model, vocab) = setup(6, 3);
        let st = DialogueState::new(vec![(0, true)]);
        let mut with_miss = st.clone();
        with_miss.inquired.insert(4);
        with_miss.turns = 1;
        with_miss.history.push(Inquiry { symptom: 4, answer: SimulatorAnswer::NotSure });
        assert_eq!(
            diagnose(&st, &model, &vocab).unwrap(),
            diagnose(&with_miss, &model, &vocab).unwrap()
        );
    }

    #[test]
    fn single_disease_vocab_is_certain() {
        let (model, vocab) = setup(4, 1);
        let d = diagnose(&DialogueState::new(vec![(1, false)]), &model, &vocab).unwrap();
        assert_eq!(d.disease, 0);
        assert!((d.probability - 1.0).abs() < 1e-12);
    }

    #[test]
    fn answer_without_question_is_error() {
        let (model, vocab) = setup(4, 2);
        let mut d = Dialogue::new(vec![(0, true)], InferenceConfig::default()).unwrap();
        assert!(matches!(
            d.answer(&model, &vocab, SimulatorAnswer::True),
            Err(InferError::NoPendingQuestion)
        ));
    }
}
