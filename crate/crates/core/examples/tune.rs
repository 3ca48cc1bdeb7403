// Scratch experiment runner used while calibrating defaults; not part of
// the shipped surface.

use std::time::Instant;

use setnet::aggregator::AggregatorModel;
use setnet::eval::{
    build_bench_indexes, evaluate_strategy, gram_diff, model_identity_descriptors,
    sample_gallery_elements, sample_query_specs, synth_stress_datasets, time_strategies,
    StressConfig, Strategy,
};
use setnet::retrieval::MatchAlgo;
use setnet::synth::gen_gallery_with_ids;
use setnet::trainer::{train, TrainConfig};
use setnet::whitening::{fit_whitening, StagedWhitening, WhitenStage};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());

    if which == "train" || which == "all" {
        train_experiment();
    }
    if which == "bench" || which == "all" {
        bench_experiment();
    }
    if which == "timing" || which == "all" {
        timing_experiment();
    }
    if which == "whiten" || which == "all" {
        whitening_experiment();
    }
    if which == "gram" || which == "all" {
        gram_experiment();
    }
    if which == "diag" {
        diag_experiment();
    }
}

fn diag_experiment() {
    use setnet::linalg::dot;
    use setnet::retrieval::pipeline_aggregate;
    use setnet::trainer::build_batch;

    let gallery = gen_gallery_with_ids::<f64>(500, 64, 1, 0).unwrap();
    let config = TrainConfig::default();
    let outcome = train(&gallery, &config).unwrap();
    let model = &outcome.model;

    let batch = build_batch(&gallery, &config, 777).unwrap();
    let set_descs: Vec<Vec<f64>> = batch
        .sets
        .iter()
        .map(|s| pipeline_aggregate(s, model, None).unwrap())
        .collect();
    let query_descs: Vec<Vec<f64>> = batch
        .queries
        .iter()
        .map(|q| pipeline_aggregate(std::slice::from_ref(q), model, None).unwrap())
        .collect();

    let mut set_cos = Vec::new();
    for i in 0..set_descs.len() {
        for j in (i + 1)..set_descs.len() {
            set_cos.push(dot(&set_descs[i], &set_descs[j]));
        }
    }
    set_cos.sort_by(f64::total_cmp);
    println!(
        "set-set cosine: min {:.3} med {:.3} max {:.3}",
        set_cos[0],
        set_cos[set_cos.len() / 2],
        set_cos[set_cos.len() - 1]
    );

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (s, sd) in set_descs.iter().enumerate() {
        for (f, qd) in query_descs.iter().enumerate() {
            let d = dot(qd, sd);
            if batch.labels[s][f] {
                pos.push(d);
            } else {
                neg.push(d);
            }
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    println!(
        "train-batch dots: pos min {:.3} med {:.3} max {:.3} | neg min {:.3} med {:.3} max {:.3}",
        pos[0], pos[pos.len() / 2], pos[pos.len() - 1],
        neg[0], neg[neg.len() / 2], neg[neg.len() - 1]
    );

    // Fresh identities vs sets from the bench path.
    let pool = gen_gallery_with_ids::<f64>(200, 64, 2, 1_000_000).unwrap();
    let cfg = StressConfig { n_sets: 500, repeats: 1, ..StressConfig::default() };
    let bench = synth_stress_datasets(&gallery, &pool, &cfg).unwrap();
    let specs = sample_query_specs(&gallery, &bench.queries, 1, cfg.noise_sigma, 7).unwrap();
    let base_sets = &bench.datasets[0].sets;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (qi, spec) in specs.iter().enumerate().take(20) {
        let qdescs =
            setnet::retrieval::make_query_descriptors(spec, model, None, true).unwrap();
        for set in base_sets.iter().take(300) {
            let elements: Vec<Vec<f64>> = set.elements.iter().map(|e| e.vector.clone()).collect();
            let sd = pipeline_aggregate(&elements, model, None).unwrap();
            let rel = bench.judgments.queries[qi].relevance(&set.id);
            for qd in &qdescs {
                let d = dot(qd, &sd);
                if rel > 0 {
                    pos.push(d);
                } else {
                    neg.push(d);
                }
            }
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    println!(
        "bench dots (rel>0 vs rel=0): pos med {:.3} (n={}) | neg med {:.3} p99 {:.3} (n={})",
        pos[pos.len() / 2],
        pos.len(),
        neg[neg.len() / 2],
        neg[(neg.len() as f64 * 0.99) as usize],
        neg.len()
    );
}

fn train_experiment() {
    let gallery = gen_gallery_with_ids::<f64>(500, 64, 1, 0).unwrap();
    let config = TrainConfig::default();
    let t0 = Instant::now();
    let outcome = train(&gallery, &config).unwrap();
    println!("train: {:?}", t0.elapsed());
    for log in &outcome.log {
        println!("  epoch {:>2} loss {:>9.4} lr {}", log.epoch, log.loss, log.lr);
    }
    println!("  head: w={:.3} b={:.3}", outcome.model.head.weight, outcome.model.head.bias);
}

fn bench_experiment() {
    let gallery = gen_gallery_with_ids::<f64>(500, 64, 1, 0).unwrap();
    let pool = gen_gallery_with_ids::<f64>(200, 64, 2, 1_000_000).unwrap();
    let cfg = StressConfig { n_sets: 8000, repeats: 3, ..StressConfig::default() };
    let t0 = Instant::now();
    let bench = synth_stress_datasets(&gallery, &pool, &cfg).unwrap();
    println!("bench synth: {:?}", t0.elapsed());

    let baseline = AggregatorModel::average_baseline(64);
    let t0 = Instant::now();
    let outcome = train(&gallery, &TrainConfig::default()).unwrap();
    println!("train: {:?}", t0.elapsed());

    for (label, model) in [("baseline", &baseline), ("netvlad", &outcome.model)] {
        let t0 = Instant::now();
        let indexes = build_bench_indexes(&bench, model, None).unwrap();
        let scores = evaluate_strategy(
            Strategy::DescPerSet { query_agg: false },
            &indexes,
            &bench,
            &gallery,
            model,
            None,
            None,
            1,
            cfg.repeats,
            cfg.noise_sigma,
            42,
        )
        .unwrap();
        println!("{label}: ({:?})", t0.elapsed());
        for s in &scores {
            println!("  d={} nDCG@10 {:.2} nDCG@30 {:.2}", s.distractors, s.ndcg10, s.ndcg30);
        }
    }
}

fn timing_experiment() {
    let gallery = gen_gallery_with_ids::<f64>(500, 64, 1, 0).unwrap();
    let pool = gen_gallery_with_ids::<f64>(200, 64, 2, 1_000_000).unwrap();
    let cfg = StressConfig {
        n_sets: 50_000,
        distractor_counts: vec![1],
        n_queries: 50,
        repeats: 1,
        ..StressConfig::default()
    };
    let bench = synth_stress_datasets(&gallery, &pool, &cfg).unwrap();
    let outcome = train(&gallery, &TrainConfig { epochs: 6, warmup_epochs: 1, ..TrainConfig::default() }).unwrap();
    let t0 = Instant::now();
    let indexes = build_bench_indexes(&bench, &outcome.model, None).unwrap();
    println!("index build (50k, F=3): {:?}", t0.elapsed());
    let specs = sample_query_specs(&gallery, &bench.queries, 1, cfg.noise_sigma, 7).unwrap();
    let rows = time_strategies(
        &indexes[0],
        &outcome.model,
        None,
        &specs,
        &[
            Strategy::DescPerSet { query_agg: false },
            Strategy::DescPerSet { query_agg: true },
            Strategy::Rerank { n_r: 12_500, query_agg: false },
            Strategy::DescPerElement { algo: MatchAlgo::Optimal },
        ],
        None,
        3,
        100,
    )
    .unwrap();
    for row in rows {
        println!(
            "  {:<28} {:>10.6}s  speedup {:>6.2}x",
            row.strategy, row.mean_seconds, row.speedup_vs_element
        );
    }
}

fn whitening_experiment() {
    for seed in 0..5u64 {
        let gallery = gen_gallery_with_ids::<f64>(500, 64, 100 + seed, 0).unwrap();
        let pool = gen_gallery_with_ids::<f64>(200, 64, 200 + seed, 1_000_000).unwrap();
        let cfg = StressConfig {
            n_sets: 4000,
            repeats: 3,
            seed: 300 + seed,
            ..StressConfig::default()
        };
        let bench = synth_stress_datasets(&gallery, &pool, &cfg).unwrap();
        let baseline = AggregatorModel::average_baseline(64);
        let sample = sample_gallery_elements(&gallery, 20, cfg.noise_sigma, 400 + seed).unwrap();
        let whitening = StagedWhitening {
            stage: WhitenStage::BeforeAggregation,
            transform: fit_whitening(&sample, None).unwrap(),
        };
        let mut line = format!("seed {seed}:");
        for (label, w) in [("plain", None), ("whitened", Some(&whitening))] {
            let indexes = build_bench_indexes(&bench, &baseline, w).unwrap();
            let scores = evaluate_strategy(
                Strategy::DescPerSet { query_agg: false },
                &indexes,
                &bench,
                &gallery,
                &baseline,
                w,
                None,
                1,
                cfg.repeats,
                cfg.noise_sigma,
                500 + seed,
            )
            .unwrap();
            for s in &scores {
                line += &format!("  {label} d{} {:.2}", s.distractors, s.ndcg10);
            }
        }
        println!("{line}");
    }
}

fn gram_experiment() {
    for seed in 0..3u64 {
        let gallery = gen_gallery_with_ids::<f64>(300, 64, 700 + seed, 0).unwrap();
        let baseline = AggregatorModel::average_baseline(64);
        let sample = sample_gallery_elements(&gallery, 20, 0.25, 800 + seed).unwrap();
        let whitening = StagedWhitening {
            stage: WhitenStage::BeforeAggregation,
            transform: fit_whitening(&sample, None).unwrap(),
        };
        let config = TrainConfig {
            set_dim: 64,
            epochs: 12,
            seed: 900 + seed,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let outcome = train(&gallery, &config).unwrap();
        let descs = |model: &AggregatorModel<f64>, w: Option<&StagedWhitening<f64>>| {
            let d = model_identity_descriptors(model, w, &gallery, 100, 0.25, 1000 + seed).unwrap();
            gram_diff(&d).unwrap()
        };
        println!(
            "seed {seed}: baseline {:.2}  baseline+W {:.2}  trained(D=64) {:.2}  trained+W {:.2}  ({:?})",
            descs(&baseline, None),
            descs(&baseline, Some(&whitening)),
            descs(&outcome.model, None),
            descs(&outcome.model, Some(&whitening)),
            t0.elapsed(),
        );
    }
}
