use crate::data::EncodedRecord;
use crate::tensor::{Adam, Float, Graph, ParamId, ParamStore, Tensor};

/// Multinomial logistic regression over a symptom bag: +1 for a true
/// symptom, -1 for a false one, 0 when absent.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    n_features: usize,
    params: ParamStore,
    w: ParamId,
    b: ParamId,
}

const EPOCHS: usize = 300;
const LR: Float = 0.05;

impl LinearClassifier {
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        let mut params = ParamStore::new();
        let w = params.add("w", Tensor::zeros(&[n_features, n_classes]));
        let b = params.add("b", Tensor::zeros(&[n_classes]));
        Self { n_features, params, w, b }
    }

    pub fn features(&self, symptoms: &[(usize, bool)]) -> Vec<Float> {
        let mut x = vec![0.0; self.n_features];
        for &(s, v) in symptoms {
            x[s] = if v { 1.0 } else { -1.0 };
        }
        x
    }

    /// Full-batch Adam on mean cross-entropy.
    pub fn fit(&mut self, xs: &[Vec<Float>], labels: &[usize], epochs: usize, lr: Float) {
        if xs.is_empty() {
            return;
        }
        let x = Tensor::from_rows(xs).expect("rectangular features");
        let weights = vec![1.0 / xs.len() as Float; xs.len()];
        let opt = Adam::with_lr(lr);
        for _ in 0..epochs {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let w = g.param(&self.params, self.w);
            let b = g.param(&self.params, self.b);
            let z = g.matmul(xv, w).expect("shapes");
            let z = g.add(z, b).expect("shapes");
            let loss = g.cross_entropy_rows(z, labels, &weights).expect("labels in range");
            g.backward_into(loss, &mut self.params).expect("scalar loss");
            opt.step(&mut self.params);
        }
    }

    pub fn predict(&self, x: &[Float]) -> usize {
        let w = self.params.tensor(self.w);
        let b = self.params.tensor(self.b).data();
        let classes = b.len();
        let scores: Vec<Float> = (0..classes)
            .map(|c| b[c] + (0..self.n_features).map(|f| x[f] * w.data()[f * classes + c]).sum::<Float>())
            .collect();
        (0..classes)
            .max_by(|&a, &c| scores[a].total_cmp(&scores[c]).then(c.cmp(&a)))
            .unwrap_or(0)
    }

    fn accuracy(&self, xs: &[Vec<Float>], labels: &[usize]) -> Float {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        hits as Float / xs.len() as Float
    }
}

fn fit_and_score(
    train: &[EncodedRecord],
    test: &[EncodedRecord],
    n_symptoms: usize,
    n_diseases: usize,
    view: impl Fn(&EncodedRecord) -> Vec<(usize, bool)>,
) -> Float {
    let mut clf = LinearClassifier::new(n_symptoms, n_diseases);
    let enc = |rs: &[EncodedRecord]| -> (Vec<Vec<Float>>, Vec<usize>) {
        rs.iter().map(|r| (clf.features(&view(r)), r.disease)).unzip()
    };
    let (xtr, ytr) = enc(train);
    let (xte, yte) = enc(test);
    clf.fit(&xtr, &ytr, EPOCHS, LR);
    clf.accuracy(&xte, &yte)
}

/// Test DAcc of a classifier that sees only the self-report.
pub fn explicit_only_baseline(
    train: &[EncodedRecord],
    test: &[EncodedRecord],
    n_symptoms: usize,
    n_diseases: usize,
) -> Float {
    fit_and_score(train, test, n_symptoms, n_diseases, |r| r.explicit.clone())
}

/// Test DAcc of the same classifier given every explicit and implicit
/// symptom, as if all inquiries had been answered.
pub fn full_information_oracle(
    train: &[EncodedRecord],
    test: &[EncodedRecord],
    n_symptoms: usize,
    n_diseases: usize,
) -> Float {
    fit_and_score(train, test, n_symptoms, n_diseases, |r| {
        r.explicit.iter().chain(&r.implicit).copied().collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(explicit: &[(usize, bool)], disease: usize) -> EncodedRecord {
        EncodedRecord { explicit: explicit.to_vec(), implicit: vec![], disease }
    }

    #[test]
    fn separable_toy_is_perfect() {
        let train: Vec<_> = (0..30)
            .map(|i| rec(&[(i % 3, true), (3, i % 2 == 0)], i % 3))
            .collect();
        assert_eq!(explicit_only_baseline(&train, &train, 4, 3), 1.0);
    }

    #[test]
    fn oracle_uses_implicit() {
        let mk = |d: usize| EncodedRecord {
            explicit: vec![(0, true)],
            implicit: vec![(1 + d, true)],
            disease: d,
        };
        let data: Vec<_> = (0..20).map(|i| mk(i % 2)).collect();
        assert_eq!(full_information_oracle(&data, &data, 3, 2), 1.0);
        assert_eq!(explicit_only_baseline(&data, &data, 3, 2), 0.5);
    }
}
