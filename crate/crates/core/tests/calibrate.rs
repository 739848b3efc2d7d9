//! Scratch calibration for the reference experiment; run manually with
//! `cargo test -p hdprior-core --test calibrate -- --ignored --nocapture`.

use std::time::Instant;

use hdprior_core::analysis::{
    gap_reduction_permutation_test, median_heuristic_bandwidth, mmd2, pool_features, CloudTag,
};
use hdprior_core::classify::LabeledPatch;
use hdprior_core::config::PipelineConfig;
use hdprior_core::corpus::{
    cap_patch_set, labeled_underwater_patches, partition_corpus, pretrain_crops,
    split_train_heldout, synth_corpus, CorpusOptions,
};
use hdprior_core::extractor::{
    pretrain_extractor, seeded_conv, ExtractorConfig, ExtractorWeights, PretrainOptions,
};
use hdprior_core::imaging::SceneOptions;
use hdprior_core::partition::Aggregation;
use hdprior_core::rftm::{init_rftm, RftmConfig, RftmInit};
use hdprior_core::training::{finetune, train_rftm, HeadParams, TrainConfig};
use hdprior_core::util::{seeded_rng, smoothed_head, smoothed_tail};

#[test]
#[ignore]
fn calibrate_reference_experiment() {
    let seed = 7u64;
    let t0 = Instant::now();
    let opts = CorpusOptions {
        scene_count: 160,
        height: 192,
        width: 192,
        scene: SceneOptions::default(),
        t_low: 0.15,
        t_high: 0.95,
        airlight: [0.75, 0.85, 0.9],
        friendly_fraction: 0.5,
    };
    let corpus = synth_corpus(seed, &opts).unwrap();
    println!("synth: {:?}", t0.elapsed());

    // HD counts across thresholds.
    for t in [0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
        let parts = partition_corpus(&corpus, t, 64, 64, Aggregation::Mean, None).unwrap();
        println!(
            "T={t}: hd_u={} hd_f={} ld_u={} ld_f={}",
            parts.hd_u.len(),
            parts.hd_f.len(),
            parts.ld_u.len(),
            parts.ld_f.len()
        );
    }

    let parts = partition_corpus(&corpus, 0.5, 64, 64, Aggregation::Mean, None).unwrap();
    let hd_u = cap_patch_set(parts.hd_u, 200);
    let hd_f = cap_patch_set(parts.hd_f, 200);
    println!("capped: hd_u={} hd_f={}", hd_u.len(), hd_f.len());
    let store = corpus.image_store();

    let weights =
        ExtractorWeights::seeded_init(&ExtractorConfig::default(), seed).unwrap();
    let p0 = init_rftm(&RftmConfig::for_extractor(&weights), seed, RftmInit::ZeroResidual)
        .unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let (trained, report) = train_rftm(&hd_u, &hd_f, &store, &weights, p0, &cfg).unwrap();
    let head = smoothed_head(&report.loss_trace, 50);
    let tail = smoothed_tail(&report.loss_trace, 50);
    println!(
        "stage1: {:?}  initial {:.6} final {:.6} smoothed {:.6} -> {:.6} ratio {:.4}",
        t1.elapsed(),
        report.initial_loss,
        report.final_loss,
        head,
        tail,
        tail / head
    );

    let t2 = Instant::now();
    let cloud_u = pool_features(&hd_u, &store, &weights, None, CloudTag::HdU).unwrap();
    let cloud_tu = pool_features(&hd_u, &store, &weights, Some(&trained), CloudTag::HdTu).unwrap();
    let cloud_f = pool_features(&hd_f, &store, &weights, None, CloudTag::HdF).unwrap();
    let bw = median_heuristic_bandwidth(&[&cloud_u, &cloud_tu, &cloud_f]).unwrap();
    let m_uf = mmd2(&cloud_u, &cloud_f, Some(bw)).unwrap().value;
    let m_tuf = mmd2(&cloud_tu, &cloud_f, Some(bw)).unwrap().value;
    println!("pool+mmd: {:?}  mmd(u,f)={m_uf:.6} mmd(tu,f)={m_tuf:.6}", t2.elapsed());
    let t3 = Instant::now();
    let gap = gap_reduction_permutation_test(&cloud_u, &cloud_tu, &cloud_f, 200, seed).unwrap();
    println!(
        "perm: {:?}  observed {:.6} pct95 {:.6} significant {}",
        t3.elapsed(),
        gap.observed,
        gap.percentile95,
        gap.significant
    );

    // Pretraining for the stage-2 proxy.
    let t4 = Instant::now();
    let crops = pretrain_crops(&corpus, 32).unwrap();
    println!("crops: {} in {:?}", crops.len(), t4.elapsed());
    let t5 = Instant::now();
    let (pre_w, pre_report) = pretrain_extractor(
        &crops,
        &ExtractorConfig::default(),
        &PretrainOptions::default(),
        seed,
    )
    .unwrap();
    println!(
        "pretrain: {:?} acc {:.3} classes {}",
        t5.elapsed(),
        pre_report.train_accuracy,
        pre_report.class_count
    );

    // Stage 1 against the pretrained extractor (the arm criterion 6 uses).
    let p0 = init_rftm(&RftmConfig::for_extractor(&pre_w), seed, RftmInit::ZeroResidual).unwrap();
    let t6 = Instant::now();
    let (trained_pre, rep_pre) =
        train_rftm(&hd_u, &hd_f, &store, &pre_w, p0.clone(), &cfg).unwrap();
    println!(
        "stage1(pretrained extractor): {:?} ratio {:.4}",
        t6.elapsed(),
        smoothed_tail(&rep_pre.loss_trace, 50) / smoothed_head(&rep_pre.loss_trace, 50)
    );

    let labeled = labeled_underwater_patches(&corpus, 64, 64).unwrap();
    println!("labeled u patches: {}", labeled.len());
    let subset: Vec<LabeledPatch> = labeled.into_iter().take(320).collect();
    let class_count = subset.iter().map(|p| p.class_id).max().unwrap() + 1;

    for rep in 0..3u64 {
        let (train_set, heldout) = split_train_heldout(subset.clone(), 0.25, seed + rep);
        let mut rng = seeded_rng(seed + 100 + rep);
        let fs0 = seeded_conv(pre_w.c1(), pre_w.c1(), 3, &mut rng);
        let head0 = HeadParams::seeded(pre_w.c1(), class_count, &mut rng);
        let ft_cfg = TrainConfig {
            seed: seed + 200 + rep,
            learning_rate: 0.02,
            batch_size: 8,
            stage2_iterations: 300,
            ..TrainConfig::default()
        };
        let t7 = Instant::now();
        let (_, _, r_trained) = finetune(
            &train_set,
            &heldout,
            &pre_w,
            &trained_pre,
            fs0.clone(),
            head0.clone(),
            &ft_cfg,
        )
        .unwrap();
        let (_, _, r_control) = finetune(
            &train_set,
            &heldout,
            &pre_w,
            &p0,
            fs0,
            head0,
            &ft_cfg,
        )
        .unwrap();
        let acc = |r: &hdprior_core::training::TrainReport| -> f64 {
            r.metrics
                .iter()
                .find(|(k, _)| k == "heldout_accuracy")
                .unwrap()
                .1
                .parse()
                .unwrap()
        };
        println!(
            "rep {rep}: trained {:.4} control {:.4} ({:?})",
            acc(&r_trained),
            acc(&r_control),
            t7.elapsed()
        );
    }
    println!("total {:?}", t0.elapsed());
    let _ = PipelineConfig::default();
    let _ = (m_uf, m_tuf);
}
