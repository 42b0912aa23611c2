use vcfes_core::gradcheck::{check_instance, random_instance, run_gradcheck, GradcheckOptions, TOLERANCE};
use vcfes_core::training::{IdLossMode, TrainConfig};

#[test]
fn analytic_gradients_match_finite_differences() {
    let opts = GradcheckOptions::default();
    for mode in [IdLossMode::ArcfaceCe, IdLossMode::SoftminDistance] {
        let report = run_gradcheck(&opts, mode).unwrap();
        println!("{report:?}");
        assert!(report.passed(), "{report:?}");
        assert!(report.stats.checked > report.stats.excluded);
    }
}

#[test]
fn gradients_match_with_wide_margin_and_no_bias() {
    let opts = GradcheckOptions {
        trials: 3,
        seed: 17,
        ..Default::default()
    };
    for mode in [IdLossMode::ArcfaceCe, IdLossMode::SoftminDistance] {
        for seed in 0..3 {
            let (mut model, batch, protos) = random_instance(&opts, 500 + seed).unwrap();
            let shape = model.shape();
            // Drop the biases to exercise the bias-free head variant.
            let mut heads = model.heads.clone();
            for h in heads.heads_mut().iter_mut() {
                h.bias.fill(0.0);
            }
            model.heads =
                vcfes_core::HeadParameters::new(shape.input_dim, shape.embed_dim, false, heads.heads_mut().clone())
                    .unwrap();
            let config = TrainConfig {
                id_loss: mode,
                triplet_margin: 1.5,
                lambda_id: 0.5,
                lambda_triplet: 2.0,
                ..Default::default()
            };
            let stats = check_instance(&batch, &model, &config, Some(&protos), 1e-5).unwrap();
            println!("{mode:?} {stats:?}");
            assert!(stats.max_rel_error < TOLERANCE, "{stats:?}");
        }
    }
}
