//! Desk-profile training runs. Each takes many minutes on one core, so they
//! are ignored by default: `cargo test --test desk -- --ignored`.

mod common;

use common::*;

use triplet_core::backbone::{init_model, HeadKind, ModelWeights, StageTag};
use triplet_core::config::desk_config;
use triplet_core::data::synth::SynthSpec;
use triplet_core::pipeline::{run_ssl_stage, verify_handoff, Experiment, Run};

#[test]
#[ignore = "desk scale, several minutes"]
fn fifty_ssl_iterations_lower_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = desk_config();
    c.ssl.iterations = 50;
    c.synth = SynthSpec {
        unlabeled_count: 256,
        task_count: 0,
        target_count: 15,
        ..SynthSpec::desk()
    };
    let data = synth_data_roles(&mut c, dir.path(), true, false);
    let unlabeled: Vec<_> = data.unlabeled.iter().collect();
    let mut run = Run::create(&dir.path().join("run"), false).unwrap();
    let curve = run_ssl_stage(&c, &mut run, &unlabeled).unwrap().result.loss_curve;
    assert_eq!(curve.len(), 50);
    assert!(curve.iter().all(|l| l.is_finite()), "{curve:?}");
    // per-batch losses swing widely, so compare 10-step window means
    let window = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let (head, tail) = (window(&curve[..10]), window(&curve[40..]));
    eprintln!("ssl loss, mean of first 10 {head:.3}, of last 10 {tail:.3}");
    assert!(tail < head, "{curve:?}");
}

#[test]
#[ignore = "desk scale, about an hour"]
fn distilled_student_beats_chance_and_is_a_better_start_than_random() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = desk_config();
    c.synth = SynthSpec {
        unlabeled_count: 0,
        ..SynthSpec::desk()
    };
    let data = synth_data_roles(&mut c, dir.path(), false, true);
    let (e, h) = init_model(&c, HeadKind::Ssl, &mut seeded(4)).unwrap();
    let teacher = ModelWeights::capture(StageTag::ThetaPrime, c.seed, &e, Some(&h));
    let run = Run::create(&dir.path().join("run"), false).unwrap();
    let mut exp = Experiment::new(&c, &data, run).unwrap();

    let student = verify_handoff(&exp.distill_from(&teacher).unwrap().result).unwrap();
    let holdout = exp.score_holdout(&student, None).unwrap().expect("task holdout");
    eprintln!("student task-holdout BAcc {:.3}", holdout.balanced_accuracy);
    assert!(holdout.balanced_accuracy > 1.0 / 3.0);

    let hyper = c.finetune.clone();
    let (_, from_student, _) = exp.finetune_folds("from_student", Some((&student, true)), &hyper, Some(0)).unwrap();
    let (_, from_random, _) = exp.finetune_folds("from_random", None, &hyper, Some(0)).unwrap();
    let best = |r: &[triplet_core::pipeline::StageResult]| r[0].best_validation_bacc.expect("validated");
    let (s, r) = (best(&from_student), best(&from_random));
    eprintln!("fold 0 best validation BAcc: student init {s:.3}, random init {r:.3}");
    assert!(s >= r);
}
