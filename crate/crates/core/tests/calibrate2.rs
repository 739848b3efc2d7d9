//! Stage-2 knob probe; run with
//! `cargo test -p hdprior-core --test calibrate2 -- --ignored --nocapture`.

use hdprior_core::classify::LabeledPatch;
use hdprior_core::corpus::{
    cap_patch_set, labeled_underwater_patches, partition_corpus, pretrain_crops, split_train_heldout,
    synth_corpus, CorpusOptions,
};
use hdprior_core::extractor::{
    pretrain_extractor, seeded_conv, ExtractorConfig, ExtractorWeights, PretrainOptions,
};
use hdprior_core::imaging::SceneOptions;
use hdprior_core::partition::Aggregation;
use hdprior_core::rftm::{init_rftm, rftm_forward, RftmConfig, RftmInit};
use hdprior_core::tensor::Tensor;
use hdprior_core::training::{finetune, train_rftm, HeadParams, TrainConfig, TrainReport};
use hdprior_core::util::{seeded_rng, smoothed_head, smoothed_tail};
use hdprior_core::extractor::ps0_forward;
use hdprior_core::partition::PatchResolver;

fn acc_of(r: &TrainReport) -> f64 {
    r.metrics
        .iter()
        .find(|(k, _)| k == "heldout_accuracy")
        .unwrap()
        .1
        .parse()
        .unwrap()
}

#[test]
#[ignore]
fn probe_stage2_knobs() {
    let seed = 7u64;
    let opts = CorpusOptions {
        scene_count: 160,
        height: 192,
        width: 192,
        scene: SceneOptions {
            speckle_period: Some(3),
            ..SceneOptions::default()
        },
        t_low: 0.15,
        t_high: 0.95,
        airlight: [0.75, 0.85, 0.9],
        friendly_fraction: 0.5,
    };
    let corpus = synth_corpus(seed, &opts).unwrap();
    let parts = partition_corpus(&corpus, 0.5, 64, 64, Aggregation::Mean, None).unwrap();
    let hd_u = cap_patch_set(parts.hd_u, 200);
    let hd_f = cap_patch_set(parts.hd_f, 200);
    println!("hd_u={} hd_f={}", hd_u.len(), hd_f.len());
    let store = corpus.image_store();

    let crops = pretrain_crops(&corpus, 32).unwrap();
    let (pre_w, pre_rep) = pretrain_extractor(
        &crops,
        &ExtractorConfig::default(),
        &PretrainOptions::default(),
        seed,
    )
    .unwrap();
    println!("pretrain acc {:.3}", pre_rep.train_accuracy);

    let labeled = labeled_underwater_patches(&corpus, 64, 64).unwrap();
    let subset: Vec<LabeledPatch> = labeled.into_iter().take(320).collect();
    let class_count = subset.iter().map(|p| p.class_id).max().unwrap() + 1;
    let mut hist = vec![0usize; class_count];
    for p in &subset {
        hist[p.class_id] += 1;
    }
    println!("label histogram {hist:?}");

    for (cmid, temp) in [(32usize, 1.0f32), (8, 1.0), (32, 2.0), (8, 2.0)] {
        let rcfg = RftmConfig {
            c0: pre_w.c0(),
            cmid,
            c1: pre_w.c1(),
        };
        let p0 = init_rftm(&rcfg, seed, RftmInit::ZeroResidual).unwrap();
        let cfg = TrainConfig {
            seed,
            temperature: temp,
            ..TrainConfig::default()
        };
        let (trained, rep) = train_rftm(&hd_u, &hd_f, &store, &pre_w, p0.clone(), &cfg).unwrap();
        let ratio = smoothed_tail(&rep.loss_trace, 50) / smoothed_head(&rep.loss_trace, 50);

        // Residual magnitude diagnostics on a few patches.
        let mut res_norm = 0.0f64;
        let mut base_norm = 0.0f64;
        for patch in hd_u.patches.iter().take(10) {
            let pixels = store.pixels(patch).unwrap();
            let f0 = ps0_forward(&pixels, &pre_w).unwrap();
            let skip = hdprior_core::extractor::ps1_forward(&f0, &pre_w).unwrap();
            let delta = rftm_forward(&f0, &trained).unwrap();
            let norm = |t: &Tensor| -> f64 {
                t.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
            };
            res_norm += norm(&delta);
            base_norm += norm(&skip);
        }
        println!(
            "cmid={cmid} temp={temp}: stage1 ratio {ratio:.4}, |residual|/|skip| {:.4}",
            res_norm / base_norm
        );

        for (lr, batch, iters) in [(0.002f32, 2usize, 300usize), (0.01, 4, 300)] {
            let mut wins = 0;
            let mut line = String::new();
            for rep_i in 0..3u64 {
                let (train_set, heldout) = split_train_heldout(subset.clone(), 0.25, seed + rep_i);
                let mut rng = seeded_rng(seed + 100 + rep_i);
                let fs0 = seeded_conv(pre_w.c1(), pre_w.c1(), 3, &mut rng);
                let head0 = HeadParams::seeded(pre_w.c1(), class_count, &mut rng);
                let ft_cfg = TrainConfig {
                    seed: seed + 200 + rep_i,
                    learning_rate: lr,
                    batch_size: batch,
                    stage2_iterations: iters,
                    ..TrainConfig::default()
                };
                let (_, _, r_t) = finetune(
                    &train_set,
                    &heldout,
                    &pre_w,
                    &trained,
                    fs0.clone(),
                    head0.clone(),
                    &ft_cfg,
                )
                .unwrap();
                let (_, _, r_c) =
                    finetune(&train_set, &heldout, &pre_w, &p0, fs0, head0, &ft_cfg).unwrap();
                let (at, ac) = (acc_of(&r_t), acc_of(&r_c));
                if at >= ac {
                    wins += 1;
                }
                line.push_str(&format!(" [{at:.3} vs {ac:.3}]"));
            }
            println!("  ft lr={lr} batch={batch} iters={iters}: wins {wins}/3 {line}");
        }
    }
}
