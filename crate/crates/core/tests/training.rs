use recipe_retrieval::corpus::{
    generate_synthetic_corpus, preprocess, select, GeneratorSpec, SyntheticCorpus,
};
use recipe_retrieval::model::ModelConfig;
use recipe_retrieval::objectives::LossConfig;
use recipe_retrieval::params::ParamStore;
use recipe_retrieval::text_encoder::ShapeConfig;
use recipe_retrieval::trainer::{train, Objective, Stage, TrainConfig, TrainSummary, TrainingData};
use recipe_retrieval::{Model32, Model64};

struct Small {
    corpus: SyntheticCorpus,
    pre: recipe_retrieval::corpus::Preprocessed,
}

fn small() -> Small {
    let spec = GeneratorSpec {
        num_classes: 4,
        recipes_per_class: 15,
        ..GeneratorSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, 5).unwrap();
    let pre = preprocess(&corpus.recipes, 1, ShapeConfig::desk().p).unwrap();
    Small { corpus, pre }
}

fn config(s: &Small) -> ModelConfig {
    ModelConfig {
        shape: ShapeConfig::desk(),
        feature_dim: s.corpus.spec.feature_dim,
        num_classes: 4,
    }
}

fn loss() -> LossConfig {
    LossConfig {
        num_classes: 4,
        ..LossConfig::default()
    }
}

fn run(s: &Small, cfg: &TrainConfig) -> (Model64, TrainSummary) {
    let train_set = select(&s.pre.recipes, &s.corpus.split.train).unwrap();
    let val = select(&s.pre.recipes, &s.corpus.split.validation).unwrap();
    let data = TrainingData {
        train: &train_set,
        validation: &val,
        features: &s.corpus.features,
    };
    let mut model = Model64::new(config(s), s.pre.vocab.clone(), 2).unwrap();
    let mut ignore = |_: &_, _: &ParamStore<f64>| {};
    let summary = train(&mut model, data, cfg, &loss(), &mut ignore).unwrap();
    (model, summary)
}

#[test]
fn identical_runs_give_bit_identical_parameters() {
    let s = small();
    let cfg = TrainConfig {
        lr0: 1e-3,
        switches: 2,
        max_stage_epochs: 2,
        batch_size: 8,
        objective: Objective::Triplet,
        ..TrainConfig::default()
    };
    let (a, sa) = run(&s, &cfg);
    let (b, sb) = run(&s, &cfg);
    assert_eq!(sa.log.len(), sb.log.len());
    for (x, y) in sa.log.iter().zip(&sb.log) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
    for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
    }
}

#[test]
fn zero_switches_runs_text_then_joint() {
    let s = small();
    let cfg = TrainConfig {
        switches: 0,
        patience: 1,
        max_stage_epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (_, summary) = run(&s, &cfg);
    let stages: Vec<Stage> = summary.log.iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec![Stage::TextOnly, Stage::Joint]);
    assert_eq!(summary.switches_done, 0);
}

#[test]
fn trained_model_survives_checkpoint_and_cast() {
    let s = small();
    let cfg = TrainConfig {
        lr0: 1e-3,
        switches: 1,
        max_stage_epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (model, _) = run(&s, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    let back = Model64::load(&path).unwrap();
    let r = &s.pre.recipes[0];
    assert_eq!(
        model.encode_recipe(r).unwrap().vector,
        back.encode_recipe(r).unwrap().vector
    );

    let single: Model32 = model.cast();
    let e32 = single.encode_recipe(r).unwrap().vector;
    let e64 = model.encode_recipe(r).unwrap().vector;
    for (a, b) in e32.iter().zip(&e64) {
        assert!((f64::from(*a) - b).abs() < 1e-4);
    }
}
