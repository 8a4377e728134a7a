use semicap_core::losses::Variant;
use semicap_core::models::{read_checkpoint, write_checkpoint};
use semicap_core::pseudo::pool_size;
use semicap_core::trainer::{run_experiment, ExperimentConfig, Trainer};

fn small(variant: Variant) -> ExperimentConfig {
    let mut c = ExperimentConfig { variant, epochs: 2, steps_per_epoch: 4, batch_size: 16, pretrain_steps: 3, ..Default::default() };
    c.data.total = 3000;
    c.data.test_size = 100;
    c.retrieval_pool = 50;
    c.probe_count = 40;
    c
}

#[test]
fn steps_alternate_between_parameter_groups() {
    for v in [Variant::Ver1, Variant::Final, Variant::FinalConcept, Variant::CycleGan] {
        let mut t = Trainer::new(small(v)).unwrap();
        for _ in 0..3 {
            let (_, tr) = t.train_step_traced().unwrap();
            assert_eq!(tr.generator[0], tr.generator[1], "{v}: discriminator step moved the generator");
            assert_ne!(tr.discriminator[0], tr.discriminator[1], "{v}: discriminator did not move");
            assert_ne!(tr.generator[1], tr.generator[2], "{v}: generator did not move");
            assert_eq!(tr.discriminator[1], tr.discriminator[2], "{v}: generator step moved the discriminator");
        }
    }
}

#[test]
fn paired_only_has_no_discriminator_step() {
    let mut t = Trainer::new(small(Variant::PairedOnly)).unwrap();
    let (l, tr) = t.train_step_traced().unwrap();
    assert_eq!(tr.generator[0], tr.generator[1]);
    assert_eq!(tr.discriminator, [tr.discriminator[0]; 3]);
    assert_eq!((l.u, l.reg, l.triplet, l.disc_evals), (0.0, 0.0, 0.0, [0, 0]));
}

#[test]
fn zero_pretraining_leaves_parameters_unchanged() {
    let mut t = Trainer::new(small(Variant::Ver1)).unwrap();
    let before = write_checkpoint(&t.model);
    assert!(t.pretrain_discriminator(0).unwrap().is_empty());
    assert_eq!(write_checkpoint(&t.model), before);
    assert_eq!(t.pretrain_discriminator(2).unwrap().len(), 2);
    assert_ne!(write_checkpoint(&t.model), before);
}

#[test]
fn pretraining_is_skipped_without_the_pair_discriminator() {
    for v in [Variant::PairedOnly, Variant::CycleGan] {
        let mut t = Trainer::new(small(v)).unwrap();
        let before = write_checkpoint(&t.model);
        assert!(t.pretrain_discriminator(5).unwrap().is_empty());
        assert_eq!(write_checkpoint(&t.model), before);
    }
}

#[test]
fn evaluation_count_is_batch_times_pool_per_direction() {
    let c = small(Variant::Final);
    let mut t = Trainer::new(c.clone()).unwrap();
    let n_img = t.splits().unpaired_images.len();
    let n_cap = t.splits().unpaired_captions.len();
    let l = t.train_step().unwrap();
    let b = c.batch_size as u64;
    assert_eq!(l.disc_evals, [b * pool_size(n_cap, c.pool_fraction) as u64, b * pool_size(n_img, c.pool_fraction) as u64]);
}

#[test]
fn identical_config_gives_identical_outputs() {
    let c = small(Variant::Final);
    let a = run_experiment(&c).unwrap();
    let b = run_experiment(&c).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(write_checkpoint(&a.model), write_checkpoint(&b.model));
    let other = run_experiment(&ExperimentConfig { seed: 1, ..c }).unwrap();
    assert_ne!(write_checkpoint(&a.model), write_checkpoint(&other.model));
}

#[test]
fn log_has_one_row_per_epoch() {
    let out = run_experiment(&small(Variant::Ver2)).unwrap();
    assert_eq!(out.log.rows.len(), 2);
    assert_eq!(out.pretrain_trace.len(), 3);
    for (i, r) in out.log.rows.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert!(r.bleu.iter().all(|b| (0.0..=1.0).contains(b)));
        assert!(r.recall_at_1 <= r.recall_at_5);
        assert!((0.0..=1.0).contains(&r.pseudo_acc));
        assert!(r.disc_evals > 0);
    }
    assert_eq!(out.log.to_csv().lines().count(), 3);
}

#[test]
fn checkpoint_round_trip_preserves_the_trained_model() {
    let out = run_experiment(&small(Variant::FinalConcept)).unwrap();
    let bytes = write_checkpoint(&out.model);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(write_checkpoint(&back), bytes);
    let x = semicap_core::autodiff::Tensor::full(&[2, out.model.dims.feature_dim], 0.3);
    assert_eq!(out.model.infer_images(&x).unwrap(), back.infer_images(&x).unwrap());
}

#[test]
fn every_variant_completes() {
    for v in Variant::ALL {
        let out = run_experiment(&small(v)).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.loss_cap.is_finite(), "{v}");
        assert_eq!(last.disc_evals > 0, v.flags().pseudo, "{v}");
    }
}

#[test]
fn purely_unpaired_cycle_baseline_runs() {
    let c = ExperimentConfig { paired_ce: false, ..small(Variant::CycleGan) };
    let out = run_experiment(&c).unwrap();
    assert_eq!(out.log.last().unwrap().loss_cap, 0.0);
}
