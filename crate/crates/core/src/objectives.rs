//! Training objectives: cosine margin loss with optional semantic
//! regularisation, and the double-margin triplet loss.
//!
//! Every loss exists twice: a graph builder used by the trainer and the
//! gradient checker, and a value-level wrapper that evaluates the same graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_into, Graph, Var};
use crate::embedding::JointEmbedding;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Margin of the negative branch of the cosine loss.
    pub cos_margin: f64,
    /// Weight of the semantic cross-entropy terms.
    pub lambda: f64,
    pub triplet_margin: f64,
    /// Quadratic vs. linear mix of each hinge.
    pub beta: f64,
    /// Weight of the semantic triplet relative to the sample triplet.
    pub gamma: f64,
    pub num_classes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cos_margin: 0.1,
            lambda: 0.02,
            triplet_margin: 0.3,
            beta: 0.1,
            gamma: 0.3,
            num_classes: 20,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        };
        check(
            (-1.0..=1.0).contains(&self.cos_margin),
            "loss.cos_margin",
            "must lie in [-1, 1]",
        )?;
        check(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "loss.lambda",
            "must be finite and >= 0",
        )?;
        check(
            (0.0..=2.0).contains(&self.triplet_margin),
            "loss.triplet_margin",
            "must lie in [0, 2]",
        )?;
        check(
            (0.0..=1.0).contains(&self.beta),
            "loss.beta",
            "must lie in [0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.gamma),
            "loss.gamma",
            "must lie in [0, 1]",
        )?;
        check(
            self.num_classes >= 1,
            "loss.num_classes",
            "must be at least 1",
        )
    }
}

/// One text/image pair with its label (`+1` matching, `-1` not).
#[derive(Debug, Clone)]
pub struct PairSample<T> {
    pub query: JointEmbedding<T>,
    pub document: JointEmbedding<T>,
    pub label: i32,
    pub text_class: usize,
    pub image_class: usize,
}

impl<T: Scalar> PairSample<T> {
    pub fn validate(&self) -> Result<()> {
        check_label(self.label)?;
        if self.label == 1 && self.text_class != self.image_class {
            return Err(Error::InvalidTriplet(format!(
                "positive pair with classes {} and {}",
                self.text_class, self.image_class
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TripletSample<T> {
    pub query: JointEmbedding<T>,
    /// True match of the query.
    pub positive: JointEmbedding<T>,
    pub negative: JointEmbedding<T>,
    /// Same class as the query, but not its true match.
    pub semantic_positive: JointEmbedding<T>,
    /// Different class from the query.
    pub semantic_negative: JointEmbedding<T>,
    pub query_class: usize,
    pub semantic_positive_class: usize,
    pub semantic_negative_class: usize,
}

impl<T: Scalar> TripletSample<T> {
    pub fn validate(&self) -> Result<()> {
        check_triplet_classes(
            self.query_class,
            self.semantic_positive_class,
            self.semantic_negative_class,
        )?;
        if self.semantic_positive.id == self.positive.id {
            return Err(Error::InvalidTriplet(
                "semantic positive is the true match".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_triplet_classes(query: usize, sem_pos: usize, sem_neg: usize) -> Result<()> {
    if sem_pos != query {
        return Err(Error::InvalidTriplet(format!(
            "semantic positive has class {sem_pos}, query has {query}"
        )));
    }
    if sem_neg == query {
        return Err(Error::InvalidTriplet(format!(
            "semantic negative shares class {query}"
        )));
    }
    Ok(())
}

fn check_label(label: i32) -> Result<()> {
    if label == 1 || label == -1 {
        Ok(())
    } else {
        Err(Error::InvalidLabel(label))
    }
}

fn check_class(class: usize, num_classes: usize) -> Result<()> {
    if class < num_classes {
        Ok(())
    } else {
        Err(Error::ClassOutOfRange { class, num_classes })
    }
}

/// Semantic classifier shared by both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `e × C`
    pub w: ParamId,
    /// `1 × C`
    pub b: ParamId,
}

impl ClassifierParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        e: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.insert(
                "classifier.w",
                ParamGroup::Classifier,
                Matrix::xavier(e, num_classes, rng),
            ),
            b: store.insert(
                "classifier.b",
                ParamGroup::Classifier,
                Matrix::zeros(1, num_classes),
            ),
        }
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        Ok(Self {
            w: crate::text_encoder::lookup(store, "classifier.w")?,
            b: crate::text_encoder::lookup(store, "classifier.b")?,
        })
    }

    pub fn num_classes<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.w).cols()
    }
}

pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

fn graph_cosine<T: Scalar>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let zero = |g: &Graph<'_, T>, v| g.value(v).as_slice().iter().all(|x: &T| *x == T::zero());
    if zero(g, a) || zero(g, b) {
        return Err(Error::ZeroNorm);
    }
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "cosine of {:?} and {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(g.cosine(a, b))
}

fn graph_hinge<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    g.relu(x)
}

/// `1 − cos` for `label = +1`, `max(0, cos − margin)` for `label = −1`.
pub fn cosine_margin_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    d: Var,
    label: i32,
    margin: T,
) -> Result<Var> {
    check_label(label)?;
    let cos = graph_cosine(g, q, d)?;
    Ok(if label == 1 {
        let neg = g.scale(cos, -T::one());
        g.add_const(neg, T::one())
    } else {
        let shifted = g.add_const(cos, -margin);
        graph_hinge(g, shifted)
    })
}

/// Logits `φ · W + b` as a `1 × C` node.
pub fn classifier_logits_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    phi: Var,
    clf: &ClassifierParams,
) -> Var {
    let (w, b) = (g.param(clf.w), g.param(clf.b));
    let logits = g.matmul(phi, w);
    g.add_row(logits, b)
}

#[allow(clippy::too_many_arguments)]
pub fn regularized_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    d: Var,
    label: i32,
    text_class: usize,
    image_class: usize,
    clf: &ClassifierParams,
    cfg: &LossConfig,
) -> Result<Var> {
    let classes = clf.num_classes(g.store());
    check_class(text_class, classes)?;
    check_class(image_class, classes)?;
    let cos = cosine_margin_graph(g, q, d, label, T::lit(cfg.cos_margin))?;
    let lq = classifier_logits_graph(g, q, clf);
    let ld = classifier_logits_graph(g, d, clf);
    let ce_q = g.cross_entropy(lq, text_class);
    let ce_d = g.cross_entropy(ld, image_class);
    let ce = g.add(ce_q, ce_d);
    let reg = g.scale(ce, T::lit(cfg.lambda));
    Ok(g.add(cos, reg))
}

/// Node handles for one triplet; all rows are `1 × e`.
#[derive(Debug, Clone, Copy)]
pub struct TripletVars {
    pub query: Var,
    pub positive: Var,
    pub negative: Var,
    pub semantic_positive: Var,
    pub semantic_negative: Var,
}

fn mixed_hinge<T: Scalar>(
    g: &mut Graph<'_, T>,
    anchor: Var,
    pos: Var,
    neg: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let cp = graph_cosine(g, anchor, pos)?;
    let cn = graph_cosine(g, anchor, neg)?;
    let diff = g.sub(cn, cp);
    let shifted = g.add_const(diff, T::lit(cfg.triplet_margin));
    let h = graph_hinge(g, shifted);
    let sq = g.mul(h, h);
    let quad = g.scale(sq, T::lit(cfg.beta));
    let lin = g.scale(h, T::lit(1.0 - cfg.beta));
    Ok(g.add(quad, lin))
}

pub fn triplet_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    t: TripletVars,
    cfg: &LossConfig,
) -> Result<Var> {
    let sample = mixed_hinge(g, t.query, t.positive, t.negative, cfg)?;
    let semantic = mixed_hinge(g, t.query, t.semantic_positive, t.semantic_negative, cfg)?;
    let semantic = g.scale(semantic, T::lit(cfg.gamma));
    Ok(g.add(sample, semantic))
}

fn row<T: Scalar>(g: &mut Graph<'_, T>, e: &JointEmbedding<T>) -> Var {
    g.input(Matrix::row_vector(e.vector.clone()))
}

pub fn cosine_margin_loss<T: Scalar>(s: &PairSample<T>, margin: T) -> Result<T> {
    s.validate()?;
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let (q, d) = (row(&mut g, &s.query), row(&mut g, &s.document));
    let loss = cosine_margin_graph(&mut g, q, d, s.label, margin)?;
    Ok(g.scalar(loss))
}

/// Class probabilities for an embedding.
pub fn classify_semantic<T: Scalar>(
    phi: &[T],
    store: &ParamStore<T>,
    clf: &ClassifierParams,
) -> Result<Vec<T>> {
    let w = store.value(clf.w);
    if w.rows() != phi.len() {
        return Err(Error::Shape(format!(
            "embedding length {} does not match classifier input {}",
            phi.len(),
            w.rows()
        )));
    }
    let logits = Matrix::row_vector(phi.to_vec()).matmul(w);
    let logits: Vec<T> = logits
        .as_slice()
        .iter()
        .zip(store.value(clf.b).as_slice())
        .map(|(&l, &b)| l + b)
        .collect();
    let mut probs = vec![T::zero(); logits.len()];
    softmax_into(&logits, None, &mut probs);
    Ok(probs)
}

pub fn regularized_loss<T: Scalar>(
    s: &PairSample<T>,
    store: &ParamStore<T>,
    clf: &ClassifierParams,
    cfg: &LossConfig,
) -> Result<T> {
    s.validate()?;
    let mut g = Graph::inference(store);
    let (q, d) = (row(&mut g, &s.query), row(&mut g, &s.document));
    let loss = regularized_graph(&mut g, q, d, s.label, s.text_class, s.image_class, clf, cfg)?;
    Ok(g.scalar(loss))
}

pub fn triplet_loss<T: Scalar>(t: &TripletSample<T>, cfg: &LossConfig) -> Result<T> {
    t.validate()?;
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let vars = TripletVars {
        query: row(&mut g, &t.query),
        positive: row(&mut g, &t.positive),
        negative: row(&mut g, &t.negative),
        semantic_positive: row(&mut g, &t.semantic_positive),
        semantic_negative: row(&mut g, &t.semantic_negative),
    };
    let loss = triplet_graph(&mut g, vars, cfg)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Modality;
    use proptest::prelude::*;

    fn emb(id: &str, modality: Modality, v: Vec<f64>) -> JointEmbedding<f64> {
        JointEmbedding {
            id: id.into(),
            modality,
            vector: v,
            degenerate: false,
        }
    }

    fn unit_at_angle(cos: f64) -> Vec<f64> {
        vec![cos, (1.0 - cos * cos).sqrt()]
    }

    fn pair(q: Vec<f64>, d: Vec<f64>, label: i32, cr: usize, cv: usize) -> PairSample<f64> {
        PairSample {
            query: emb("q", Modality::Text, q),
            document: emb("d", Modality::Image, d),
            label,
            text_class: cr,
            image_class: cv,
        }
    }

    fn triplet(pos: f64, neg: f64, sem_pos: f64, sem_neg: f64) -> TripletSample<f64> {
        TripletSample {
            query: emb("q", Modality::Text, vec![1.0, 0.0]),
            positive: emb("q", Modality::Image, unit_at_angle(pos)),
            negative: emb("n", Modality::Image, unit_at_angle(neg)),
            semantic_positive: emb("sp", Modality::Image, unit_at_angle(sem_pos)),
            semantic_negative: emb("sn", Modality::Image, unit_at_angle(sem_neg)),
            query_class: 0,
            semantic_positive_class: 0,
            semantic_negative_class: 1,
        }
    }

    #[test]
    fn cosine_basics() {
        let v = [0.3f64, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn cosine_margin_cases() {
        let q = vec![1.0, 0.0];
        assert_eq!(
            cosine_margin_loss(&pair(q.clone(), q.clone(), 1, 0, 0), 0.1).unwrap(),
            0.0
        );
        let at_margin =
            cosine_margin_loss(&pair(q.clone(), unit_at_angle(0.1), -1, 0, 1), 0.1).unwrap();
        assert!(at_margin.abs() < 1e-15);
        let l = cosine_margin_loss(&pair(q.clone(), unit_at_angle(0.5), -1, 0, 1), 0.1).unwrap();
        assert!((l - 0.4).abs() < 1e-12);
        assert!(matches!(
            cosine_margin_loss(&pair(q.clone(), q, 0, 0, 0), 0.1),
            Err(Error::InvalidLabel(0))
        ));
    }

    fn classifier_with_bias(bias: Vec<f64>, e: usize) -> (ParamStore<f64>, ClassifierParams) {
        let mut store = ParamStore::new();
        let c = bias.len();
        let clf = ClassifierParams {
            w: store.insert("classifier.w", ParamGroup::Classifier, Matrix::zeros(e, c)),
            b: store.insert(
                "classifier.b",
                ParamGroup::Classifier,
                Matrix::row_vector(bias),
            ),
        };
        (store, clf)
    }

    #[test]
    fn classifier_probabilities() {
        let (store, clf) = classifier_with_bias(vec![0.0; 4], 2);
        let p = classify_semantic(&[0.3, 0.4], &store, &clf).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let (s1, c1) = classifier_with_bias(vec![0.1, 2.0, -1.0], 2);
        let (s2, c2) = classifier_with_bias(vec![5.1, 7.0, 4.0], 2);
        let p1 = classify_semantic(&[0.3, 0.4], &s1, &c1).unwrap();
        let p2 = classify_semantic(&[0.3, 0.4], &s2, &c2).unwrap();
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn regularized_hand_value() {
        // bias = log-probabilities, so the cross entropies are exactly 0.7 and 0.9
        let (p0, p1) = ((-0.7f64).exp(), (-0.9f64).exp());
        let (store, clf) = classifier_with_bias(vec![p0.ln(), p1.ln(), (1.0 - p0 - p1).ln()], 2);
        let cfg = LossConfig {
            lambda: 0.02,
            cos_margin: 0.1,
            num_classes: 3,
            ..LossConfig::default()
        };
        let s = pair(vec![1.0, 0.0], unit_at_angle(0.4), -1, 0, 1);
        let l = regularized_loss(&s, &store, &clf, &cfg).unwrap();
        assert!((l - 0.332).abs() < 1e-12, "{l}");

        let plain = cosine_margin_loss(&s, 0.1).unwrap();
        let zero = LossConfig {
            lambda: 0.0,
            ..cfg.clone()
        };
        assert_eq!(regularized_loss(&s, &store, &clf, &zero).unwrap(), plain);

        let bad = pair(vec![1.0, 0.0], unit_at_angle(0.4), -1, 0, 3);
        assert!(matches!(
            regularized_loss(&bad, &store, &clf, &cfg),
            Err(Error::ClassOutOfRange { class: 3, .. })
        ));
    }

    #[test]
    fn regularized_vanishes_for_perfect_pair() {
        let (store, clf) = classifier_with_bias(vec![0.0, -1e4], 2);
        let s = pair(vec![0.6, 0.8], vec![0.6, 0.8], 1, 0, 0);
        let l = regularized_loss(&s, &store, &clf, &LossConfig::default()).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn triplet_hand_values() {
        let cfg = LossConfig::default();
        assert_eq!(
            triplet_loss(&triplet(1.0, 0.0, 1.0, 0.0), &cfg).unwrap(),
            0.0
        );
        let l = triplet_loss(&triplet(0.5, 0.6, 1.0, 0.0), &cfg).unwrap();
        assert!((l - 0.376).abs() < 1e-12, "{l}");
        let no_sem = LossConfig { gamma: 0.0, ..cfg };
        let a = triplet_loss(&triplet(0.5, 0.6, 0.0, 0.9), &no_sem).unwrap();
        let b = triplet_loss(&triplet(0.5, 0.6, 1.0, 0.0), &no_sem).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triplet_class_checks() {
        let cfg = LossConfig::default();
        let mut t = triplet(0.5, 0.6, 1.0, 0.0);
        t.semantic_negative_class = 0;
        assert!(matches!(
            triplet_loss(&t, &cfg),
            Err(Error::InvalidTriplet(_))
        ));
        let mut t = triplet(0.5, 0.6, 1.0, 0.0);
        t.semantic_positive_class = 2;
        assert!(triplet_loss(&t, &cfg).is_err());
        let mut t = triplet(0.5, 0.6, 1.0, 0.0);
        t.semantic_positive.id = "q".into();
        assert!(triplet_loss(&t, &cfg).is_err());
    }

    #[test]
    fn config_validation_names_key() {
        let bad = LossConfig {
            beta: 1.5,
            ..LossConfig::default()
        };
        match bad.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "loss.beta"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn triplet_monotone_in_negative(pos in -1.0f64..1.0, n1 in -1.0f64..1.0, n2 in -1.0f64..1.0,
                                        sp in -1.0f64..1.0, sn in -1.0f64..1.0) {
            let cfg = LossConfig::default();
            let (lo, hi) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
            let a = triplet_loss(&triplet(pos, lo, sp, sn), &cfg).unwrap();
            let b = triplet_loss(&triplet(pos, hi, sp, sn), &cfg).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!(b + 1e-12 >= a);
        }

        #[test]
        fn negative_pair_zero_below_margin(c in -1.0f64..0.1) {
            let l = cosine_margin_loss(&pair(vec![1.0, 0.0], unit_at_angle(c), -1, 0, 1), 0.1).unwrap();
            prop_assert!(l.abs() < 1e-12);
        }
    }
}
