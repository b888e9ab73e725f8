//! Temporary tuning harness; prints end-to-end diagnostics.

use std::time::Instant;

use egodisc_core::association::build_matches;
use egodisc_core::pipeline::{run_experiment, PipelineConfig};
use egodisc_core::scenesim::{build_dataset, generate_world, WorldConfig};

fn agreement(config: &PipelineConfig) -> (f64, usize, f64) {
    let mut world_cfg = config.world.clone();
    world_cfg.seed = 99;
    let world = generate_world(&world_cfg, 1).unwrap();
    let frames = build_dataset(&world, &world_cfg, 2);
    let t0 = Instant::now();
    let matches = build_matches(
        &frames,
        &config.neighborhood(),
        config.association.iou_threshold,
        config.association.min_points,
    );
    let dt = t0.elapsed().as_secs_f64();
    let mut same = 0usize;
    for m in &matches {
        let fa = frames.iter().find(|f| f.id == m.a.frame_id).unwrap();
        let fb = frames.iter().find(|f| f.id == m.b.frame_id).unwrap();
        let la = fa.proposals[m.a.index].gt_label;
        let lb = fb.proposals[m.b.index].gt_label;
        if la.is_some() && la == lb {
            same += 1;
        } else {
            println!(
                "  wrong pair: {:?} vs {:?} iou {:.3} (frames {} -> {})",
                la, lb, m.iou_score, m.a.frame_id, m.b.frame_id
            );
        }
    }
    (
        if matches.is_empty() {
            0.0
        } else {
            same as f64 / matches.len() as f64
        },
        matches.len(),
        dt,
    )
}

#[test]
#[ignore]
fn diagnostics() {
    // Association: noise-free.
    let mut clean = PipelineConfig::default();
    clean.world.depth_noise = 0.0;
    clean.world.box_jitter = 0.0;
    clean.world.false_positive_rate = 0.0;
    let (agree, n, dt) = agreement(&clean);
    println!("noise-free association: {n} pairs, agreement {agree:.4}, {dt:.1}s");

    let noisy = PipelineConfig::default();
    let (agree, n, dt) = agreement(&noisy);
    println!("default-noise association: {n} pairs, agreement {agree:.4}, {dt:.1}s");

    // Full default experiment.
    let mut config = PipelineConfig::default();
    config.seed = 42;
    let t0 = Instant::now();
    let exp = run_experiment(&config).unwrap();
    println!(
        "experiment: {} train frames, {} matches, {} skipped steps, {:.1}s",
        exp.train_frames.len(),
        exp.matches.len(),
        exp.outcome.skipped_steps,
        t0.elapsed().as_secs_f64()
    );
    let trace = &exp.outcome.trace;
    let window = |lo: usize, hi: usize| -> (f64, f64) {
        let rows = &trace[lo..hi];
        let loss: f64 = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        let tl: f64 = rows.iter().map(|r| r.triplets_in_batch as f64).sum::<f64>()
            / rows.len() as f64;
        (loss, tl)
    };
    for (lo, hi) in [(0, 100), (100, 200), (400, 500), (900, 1000), (1900, 2000)] {
        let (l, t) = window(lo, hi);
        println!("steps {lo}..{hi}: mean loss {l:.2}, mean triplets {t:.0}");
    }
    let (intra, inter) = exp.separation();
    println!("separation: intra {intra:.3}, inter {inter:.3}, ratio {:.3}", intra / inter);

    let t0 = Instant::now();
    let (sweep, best, clusters, report) = exp.discovery().unwrap();
    println!("discovery {:.1}s", t0.elapsed().as_secs_f64());
    for row in &sweep {
        println!(
            "  bw {:.1}: P {:.3} R {:.3} clusters {}",
            row.bandwidth, row.avg_precision, row.avg_recall, row.n_clusters
        );
    }
    println!(
        "  best idx {best}, report P {:.3} R {:.3}, excluded {:?}",
        report.average_precision, report.average_recall, report.excluded_instances
    );

    // Composition of each instance's dominant cluster.
    let labels = egodisc_core::pipeline::proposal_gt_labels(&exp.train_frames);
    let n_labeled = labels.iter().filter(|l| l.is_some()).count();
    println!("  {} labeled proposals of {}", n_labeled, labels.len());
    for inst in &report.per_instance {
        if inst.precision >= 0.9 {
            continue;
        }
        let Some(cid) = inst.dominant_cluster_id else {
            println!("  instance {}: no dominant cluster", inst.instance_id);
            continue;
        };
        let cluster = clusters.iter().find(|c| c.id == cid).unwrap();
        let mut same = 0;
        let mut unlabeled = 0;
        let mut others: std::collections::BTreeMap<u32, usize> = Default::default();
        for &m in &cluster.members {
            match labels[m] {
                Some(l) if l == inst.instance_id => same += 1,
                Some(l) => *others.entry(l).or_default() += 1,
                None => unlabeled += 1,
            }
        }
        println!(
            "  instance {} dominant cluster {} size {}: same {same}, unlabeled {unlabeled}, others {others:?} (P {:.2} R {:.2})",
            inst.instance_id, cid, cluster.members.len(), inst.precision, inst.recall
        );
    }

    let t0 = Instant::now();
    for n in [1usize, 3, 5, 10] {
        let (emb, raw) = exp.few_shot_eval(n).unwrap();
        println!("few-shot n={n}: embedding {emb:.3}, raw {raw:.3}");
    }
    let cl = exp.cluster_labeled_eval(&clusters).unwrap();
    println!("cluster-labeled mAP {cl:.3} ({:.1}s)", t0.elapsed().as_secs_f64());
}
