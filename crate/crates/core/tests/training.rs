use gradweave::experiment::{ablate, evaluate, run, Mode, RunConfig, ABLATION_HEADER};
use gradweave::gradsurgery::{batch_gradients, training_step, StepConfig};
use gradweave::network::{Group, Stream};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick(mode: Mode) -> RunConfig {
    RunConfig {
        mode,
        eta: 1.0,
        epochs: 4,
        train_samples: 16,
        eval_samples: 8,
        batch_size: 4,
        seed: 3,
        ..RunConfig::default()
    }
}

#[test]
fn training_beats_the_untrained_model_on_its_own_split() {
    let cfg = quick(Mode::Full);
    let train = cfg.train_set().unwrap();
    let untrained = evaluate(&cfg.init_model().unwrap(), &train).unwrap();
    let out = run(&cfg).unwrap();
    let trained = evaluate(&out.model, &train).unwrap();
    assert!(trained.mae < untrained.mae, "{} vs {}", trained.mae, untrained.mae);
}

#[test]
fn modes_switch_mechanisms() {
    let base = run(&quick(Mode::Baseline)).unwrap();
    assert!(base.records.iter().all(|r| r.conflicts == 0));
    // Only the fusion stream drives the baseline update.
    assert!(base.reports.iter().all(|r| (r.decoder_alignment - 1.0).abs() < 1e-12));
    let dec = run(&quick(Mode::Deconflict)).unwrap();
    assert!(dec.records.iter().any(|r| r.conflicts > 0));
    let uni = run(&quick(Mode::Unimodal)).unwrap();
    assert!(uni.records.iter().all(|r| r.conflicts == 0));
    assert_ne!(uni.model.trainable, base.model.trainable);
}

#[test]
fn baseline_step_moves_only_along_the_fusion_gradient() {
    let cfg = quick(Mode::Baseline);
    let batch = &cfg.train_set().unwrap()[..3];
    let model = cfg.init_model().unwrap();
    let (gs, _, _, _) = batch_gradients(batch, &model).unwrap();
    let mut stepped = model.clone();
    let step = StepConfig { unimodal: false, deconflict: false, eta: 0.5, shuffle_projections: false };
    training_step(batch, &mut stepped, &step, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for group in Group::ALL {
        let before = model.group_vector(group);
        let after = stepped.group_vector(group);
        let g = gs.get(Stream::F, group).unwrap();
        for ((a, b), gi) in before.iter().zip(&after).zip(g) {
            assert!((b - (a - 0.5 * gi)).abs() < 1e-12);
        }
    }
}

#[test]
fn ablation_table_has_four_rows_in_fixed_order() {
    let cfg = RunConfig { epochs: 1, train_samples: 4, eval_samples: 2, ..quick(Mode::Full) };
    let ab = ablate(&cfg, 1).unwrap();
    let csv = ab.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], ABLATION_HEADER);
    let arms: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(arms, ["baseline", "+unimodal+deconflict", "+decoupled", "full"]);
    assert!(ablate(&cfg, 0).is_err());
}

#[test]
fn runs_reproduce_exactly() {
    let a = run(&quick(Mode::Deconflict)).unwrap();
    let b = run(&quick(Mode::Deconflict)).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.eval.per_sample, b.eval.per_sample);
}
