//! Input assembly and the symptom attention mask.
//!
//! A training sequence is laid out as
//!
//! ```text
//! [exp x m] [imp x n] [S]_1 .. [S]_{n+1} [segment]_1 .. [segment]_R [D]
//! ```
//!
//! where each repeated segment interleaves the first `n - 1` symptoms of a
//! fresh permutation with prediction tokens `[S]'_2 .. [S]'_n`. Visibility is
//! derived from each position's [`Slot`] alone.

use serde::{Deserialize, Serialize};

use super::NetError;
use crate::data::{EncodedRecord, SymptomVocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateId {
    True = 0,
    False = 1,
    None = 2,
}

impl StateId {
    pub const COUNT: usize = 3;

    pub fn from_polarity(v: bool) -> Self {
        if v {
            Self::True
        } else {
            Self::False
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TypeId {
    Exp = 0,
    Imp = 1,
    Spec = 2,
}

impl TypeId {
    pub const COUNT: usize = 3;
}

/// Role of a position in the layout. Indices are 1-based, matching the
/// generation step they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Explicit,
    /// i-th implicit symptom of the generation order.
    Implicit(usize),
    /// `[S]_i`, predicting the i-th symptom (or END when `i = n + 1`).
    Predict(usize),
    /// i-th symptom of a repeated segment's permutation.
    RepeatSymptom { segment: usize, index: usize },
    /// `[S]'_k` of a repeated segment, predicting its k-th symptom.
    RepeatPredict { segment: usize, index: usize },
    Diagnose,
    /// Batch padding.
    Pad,
}

impl Slot {
    pub fn is_predict(self) -> bool {
        matches!(self, Slot::Predict(_) | Slot::RepeatPredict { .. })
    }

    /// Whether a query in this slot may attend to a key in `key`. The
    /// diagonal is handled by the caller.
    pub fn sees(self, key: Slot) -> bool {
        use Slot::*;
        match (self, key) {
            (Pad, _) | (_, Pad) => false,
            (_, Predict(_) | RepeatPredict { .. } | Diagnose) => false,
            (_, Explicit) => true,
            (Explicit, _) => false,
            (Implicit(i), Implicit(j)) => j <= i,
            (Predict(i), Implicit(j)) => j < i,
            (Diagnose, Implicit(_)) => true,
            (
                RepeatSymptom { segment: s, index: i },
                RepeatSymptom { segment: t, index: j },
            ) => s == t && j <= i,
            (
                RepeatPredict { segment: s, index: k },
                RepeatSymptom { segment: t, index: j },
            ) => s == t && j < k,
            _ => false,
        }
    }
}

/// Model input for one sequence: ids, roles and the visibility matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub token_ids: Vec<usize>,
    pub state_ids: Vec<StateId>,
    pub type_ids: Vec<TypeId>,
    pub slots: Vec<Slot>,
    /// Row-major `len x len`; `visibility[q * len + k]`.
    pub visibility: Vec<bool>,
    /// Positions of every `[S]`, originals first, then segments in order.
    pub s_positions: Vec<usize>,
    pub d_position: Option<usize>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn visible(&self, query: usize, key: usize) -> bool {
        self.visibility[query * self.len() + key]
    }

    /// Key positions visible from `query`.
    pub fn visible_keys(&self, query: usize) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.visible(query, k)).collect()
    }

    fn push(&mut self, token: usize, state: StateId, ty: TypeId, slot: Slot) -> usize {
        self.token_ids.push(token);
        self.state_ids.push(state);
        self.type_ids.push(ty);
        self.slots.push(slot);
        self.token_ids.len() - 1
    }

    fn with_capacity(n: usize) -> Self {
        Self {
            token_ids: Vec::with_capacity(n),
            state_ids: Vec::with_capacity(n),
            type_ids: Vec::with_capacity(n),
            slots: Vec::with_capacity(n),
            visibility: Vec::new(),
            s_positions: Vec::new(),
            d_position: None,
        }
    }

    fn finish(mut self) -> Self {
        self.visibility = build_attention_mask(&self.slots);
        self
    }

    /// Inference layout for the next inquiry: `[explicit, acquired, [S]]`.
    pub fn for_inquiry(
        explicit: &[(usize, bool)],
        acquired: &[(usize, bool)],
        vocab: &SymptomVocab,
    ) -> Self {
        let mut input = Self::symptom_prefix(explicit, acquired);
        let pos = input.push(
            vocab.s_token(),
            StateId::None,
            TypeId::Spec,
            Slot::Predict(acquired.len() + 1),
        );
        input.s_positions.push(pos);
        input.finish()
    }

    /// Inference layout for diagnosis: `[explicit, acquired, [D]]`.
    pub fn for_diagnosis(
        explicit: &[(usize, bool)],
        acquired: &[(usize, bool)],
        vocab: &SymptomVocab,
    ) -> Self {
        let mut input = Self::symptom_prefix(explicit, acquired);
        let pos = input.push(vocab.d_token(), StateId::None, TypeId::Spec, Slot::Diagnose);
        input.d_position = Some(pos);
        input.finish()
    }

    fn symptom_prefix(explicit: &[(usize, bool)], acquired: &[(usize, bool)]) -> Self {
        let mut input = Self::with_capacity(explicit.len() + acquired.len() + 1);
        for &(s, v) in explicit {
            input.push(s, StateId::from_polarity(v), TypeId::Exp, Slot::Explicit);
        }
        for (i, &(s, v)) in acquired.iter().enumerate() {
            input.push(s, StateId::from_polarity(v), TypeId::Imp, Slot::Implicit(i + 1));
        }
        input
    }
}

/// Visibility matrix for a slot layout. Every position sees itself.
pub fn build_attention_mask(slots: &[Slot]) -> Vec<bool> {
    let n = slots.len();
    let mut vis = vec![false; n * n];
    for (q, &qs) in slots.iter().enumerate() {
        for (k, &ks) in slots.iter().enumerate() {
            vis[q * n + k] = q == k || qs.sees(ks);
        }
    }
    vis
}

/// How `[S]` label sets are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    /// Every not-yet-generated symptom is a target.
    Synchronous,
    /// Only the next symptom in the order is a target.
    NextOnly,
}

/// A model input together with its training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub input: ModelInput,
    /// One inquiry-class set per entry of `input.s_positions`.
    pub s_labels: Vec<Vec<usize>>,
    pub disease_label: usize,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// Label sets for `[S]_1 .. [S]_{n+1}` given the generation order of symptom
/// ids.
pub fn sync_labels(order: &[usize], mode: LabelMode, end_class: usize) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = (0..order.len())
        .map(|i| match mode {
            LabelMode::Synchronous => order[i..].to_vec(),
            LabelMode::NextOnly => vec![order[i]],
        })
        .collect();
    sets.push(vec![end_class]);
    sets
}

/// Label sets for `[S]'_2 .. [S]'_n` of one repeated segment.
pub fn segment_labels(perm: &[usize], mode: LabelMode) -> Vec<Vec<usize>> {
    (1..perm.len())
        .map(|k| match mode {
            LabelMode::Synchronous => perm[k..].to_vec(),
            LabelMode::NextOnly => vec![perm[k]],
        })
        .collect()
}

/// Assembles a training sequence.
///
/// `imp_order` permutes indices into `record.implicit`. Each entry of
/// `segments` is another permutation of those indices; only the first
/// `n - 1` symptoms of each appear as tokens.
pub fn build_input(
    record: &EncodedRecord,
    imp_order: &[usize],
    segments: &[Vec<usize>],
    mode: LabelMode,
    vocab: &SymptomVocab,
) -> Result<TrainingSequence, NetError> {
    if vocab.n_symptoms() == 0 {
        return Err(NetError::Config("vocabulary has no symptoms".into()));
    }
    let n = record.implicit.len();
    check_permutation(imp_order, n)?;
    if n <= 1 && !segments.is_empty() {
        return Err(NetError::Layout(format!(
            "repeated segments need at least 2 implicit symptoms, got {n}"
        )));
    }
    for seg in segments {
        check_permutation(seg, n)?;
    }
    let m = record.explicit.len();
    let seg_len = 2 * n.saturating_sub(1);
    let mut input = ModelInput::with_capacity(m + 2 * n + 2 + segments.len() * seg_len);

    for &(s, v) in &record.explicit {
        input.push(s, StateId::from_polarity(v), TypeId::Exp, Slot::Explicit);
    }
    let order: Vec<(usize, bool)> = imp_order.iter().map(|&i| record.implicit[i]).collect();
    for (i, &(s, v)) in order.iter().enumerate() {
        input.push(s, StateId::from_polarity(v), TypeId::Imp, Slot::Implicit(i + 1));
    }
    for i in 1..=n + 1 {
        let pos = input.push(vocab.s_token(), StateId::None, TypeId::Spec, Slot::Predict(i));
        input.s_positions.push(pos);
    }
    let order_ids: Vec<usize> = order.iter().map(|&(s, _)| s).collect();
    let mut s_labels = sync_labels(&order_ids, mode, vocab.end_class());

    for (segment, seg) in segments.iter().enumerate() {
        let perm: Vec<(usize, bool)> = seg.iter().map(|&i| record.implicit[i]).collect();
        for k in 1..n {
            let (s, v) = perm[k - 1];
            input.push(
                s,
                StateId::from_polarity(v),
                TypeId::Imp,
                Slot::RepeatSymptom { segment, index: k },
            );
            let pos = input.push(
                vocab.s_token(),
                StateId::None,
                TypeId::Spec,
                Slot::RepeatPredict {
                    segment,
                    index: k + 1,
                },
            );
            input.s_positions.push(pos);
        }
        let perm_ids: Vec<usize> = perm.iter().map(|&(s, _)| s).collect();
        s_labels.extend(segment_labels(&perm_ids, mode));
    }
    let pos = input.push(vocab.d_token(), StateId::None, TypeId::Spec, Slot::Diagnose);
    input.d_position = Some(pos);

    Ok(TrainingSequence {
        input: input.finish(),
        s_labels,
        disease_label: record.disease,
    })
}

fn check_permutation(order: &[usize], n: usize) -> Result<(), NetError> {
    let mut seen = vec![false; n];
    let ok = order.len() == n
        && order
            .iter()
            .all(|&i| i < n && !std::mem::replace(&mut seen[i], true));
    if ok {
        Ok(())
    } else {
        Err(NetError::Layout(format!(
            "{order:?} is not a permutation of 0..{n}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2 explicit (ids 0, 1) and 3 implicit (ids 2, 3, 4) symptoms.
    pub(crate) fn fig2_record() -> (EncodedRecord, SymptomVocab) {
        let vocab = SymptomVocab::from_names(
            (1..=6).map(|i| format!("Sym{i}")).collect(),
            vec!["Dis".into()],
        );
        let record = EncodedRecord {
            explicit: vec![(0, true), (1, true)],
            implicit: vec![(2, true), (3, false), (4, true)],
            disease: 0,
        };
        (record, vocab)
    }

    #[test]
    fn figure_layout_without_repeats() {
        let (r, v) = fig2_record();
        let seq = build_input(&r, &[0, 1, 2], &[], LabelMode::Synchronous, &v).unwrap();
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.input.s_positions, vec![5, 6, 7, 8]);
        assert_eq!(seq.input.d_position, Some(9));
        assert_eq!(
            seq.s_labels,
            vec![vec![2, 3, 4], vec![3, 4], vec![4], vec![v.end_class()]]
        );
        assert_eq!(seq.input.state_ids[3], StateId::False);
        assert_eq!(seq.input.type_ids[0], TypeId::Exp);
        assert_eq!(seq.input.type_ids[2], TypeId::Imp);
        assert_eq!(seq.input.type_ids[5], TypeId::Spec);
        assert_eq!(seq.input.token_ids[9], v.d_token());
    }

    #[test]
    fn figure_visibility_rows() {
        let (r, v) = fig2_record();
        let seq = build_input(&r, &[0, 1, 2], &[], LabelMode::Synchronous, &v).unwrap();
        // imp_2 at position 3; [S]_2 at position 6
        assert_eq!(seq.input.visible_keys(3), vec![0, 1, 2, 3]);
        assert_eq!(seq.input.visible_keys(6), vec![0, 1, 2, 6]);
        assert_eq!(seq.input.visible_keys(0), vec![0, 1]);
        assert_eq!(seq.input.visible_keys(9), vec![0, 1, 2, 3, 4, 9]);
        for q in 0..seq.len() {
            assert!(seq.input.visible(q, q));
        }
    }

    #[test]
    fn no_implicit_symptoms() {
        let (mut r, v) = fig2_record();
        r.implicit.clear();
        let seq = build_input(&r, &[], &[], LabelMode::Synchronous, &v).unwrap();
        assert_eq!(seq.input.slots, vec![Slot::Explicit, Slot::Explicit, Slot::Predict(1), Slot::Diagnose]);
        assert_eq!(seq.s_labels, vec![vec![v.end_class()]]);
    }

    #[test]
    fn one_repeated_segment() {
        let (r, v) = fig2_record();
        let seq = build_input(&r, &[0, 1, 2], &[vec![2, 1, 0]], LabelMode::Synchronous, &v).unwrap();
        assert_eq!(seq.len(), 10 + 4);
        // segment: Sym5', [S]'_2, Sym4', [S]'_3
        assert_eq!(&seq.input.token_ids[9..13], &[4, v.s_token(), 3, v.s_token()]);
        assert_eq!(&seq.s_labels[4..], &[vec![3, 2], vec![2]]);
        // [S]'_3 sees exp + Sym5' + Sym4' + itself
        assert_eq!(seq.input.visible_keys(12), vec![0, 1, 9, 11, 12]);
        // [D] does not see the segment
        assert_eq!(seq.input.visible_keys(13), vec![0, 1, 2, 3, 4, 13]);
    }

    #[test]
    fn next_only_labels() {
        let (r, v) = fig2_record();
        let seq = build_input(&r, &[0, 1, 2], &[], LabelMode::NextOnly, &v).unwrap();
        assert_eq!(seq.s_labels, vec![vec![2], vec![3], vec![4], vec![v.end_class()]]);
    }

    #[test]
    fn rejects_bad_orders() {
        let (r, v) = fig2_record();
        assert!(build_input(&r, &[0, 0, 1], &[], LabelMode::Synchronous, &v).is_err());
        assert!(build_input(&r, &[0, 1], &[], LabelMode::Synchronous, &v).is_err());
        let (mut r1, _) = fig2_record();
        r1.implicit.truncate(1);
        assert!(build_input(&r1, &[0], &[vec![0]], LabelMode::Synchronous, &v).is_err());
    }

    #[test]
    fn empty_vocab_is_config_error() {
        let (r, _) = fig2_record();
        let empty = SymptomVocab::from_names(vec![], vec!["d".into()]);
        assert!(matches!(
            build_input(&r, &[0, 1, 2], &[], LabelMode::Synchronous, &empty),
            Err(NetError::Config(_))
        ));
    }

    #[test]
    fn inference_layouts_match_training_rows() {
        let (r, v) = fig2_record();
        let acquired = &r.implicit[..2];
        let inq = ModelInput::for_inquiry(&r.explicit, acquired, &v);
        assert_eq!(inq.visible_keys(4), vec![0, 1, 2, 3, 4]);
        assert_eq!(inq.slots[4], Slot::Predict(3));
        let dia = ModelInput::for_diagnosis(&r.explicit, acquired, &v);
        assert_eq!(dia.visible_keys(4), vec![0, 1, 2, 3, 4]);
        assert_eq!(dia.d_position, Some(4));
    }
}
