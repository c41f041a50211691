use onpro::stream::{make_synthetic_stream, SyntheticConfig};
use onpro::trainer::{run_er_baseline, run_stream, MethodConfig};

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let spc: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let jitter: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let mask: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);

    let stream_cfg = SyntheticConfig {
        num_tasks: 5,
        classes_per_task: 2,
        samples_per_class: spc,
        dim: 20,
        class_separation: sep,
        seed: 7,
    };
    let mut onpro_cfg = MethodConfig::onpro();
    onpro_cfg.augment.jitter_sigma = jitter;
    onpro_cfg.augment.mask_prob = mask;
    let mut er_cfg = MethodConfig::er();
    er_cfg.augment = onpro_cfg.augment;
    let mut no_ope = onpro_cfg.clone();
    no_ope.use_ope_new = false;
    no_ope.use_ope_seen = false;
    let mut random_mix = onpro_cfg.clone();
    random_mix.alpha = 0.0;

    // single-task accuracy check (task 0 only)
    let single_cfg = SyntheticConfig { num_tasks: 1, ..stream_cfg.clone() };
    let mut single_accs = Vec::new();
    for seed in 0..3u64 {
        let (stream, tests) = make_synthetic_stream(&single_cfg, 10).unwrap();
        let stream = stream.with_shuffle_seed(seed);
        let out = run_stream(stream, &tests, &onpro_cfg, seed).unwrap();
        single_accs.push(out.matrix.rows[0][0]);
    }
    println!("single-task acc (onpro): {:?}", single_accs);

    for (name, cfg, er) in [
        ("onpro", &onpro_cfg, false),
        ("er", &er_cfg, true),
        ("no_ope", &no_ope, false),
        ("random_mix", &random_mix, false),
    ] {
        let mut accs = Vec::new();
        let mut forgets = Vec::new();
        let t0 = std::time::Instant::now();
        for seed in 0..seeds {
            let (stream, tests) = make_synthetic_stream(&stream_cfg, 10).unwrap();
            let stream = stream.with_shuffle_seed(seed);
            let out = if er {
                run_er_baseline(stream, &tests, cfg, seed).unwrap()
            } else {
                run_stream(stream, &tests, cfg, seed).unwrap()
            };
            accs.push(out.matrix.average_accuracy().unwrap());
            forgets.push(out.matrix.average_forgetting().unwrap());
        }
        let (am, asd) = mean_std(&accs);
        let (fm, fsd) = mean_std(&forgets);
        println!(
            "{name:>11}: acc {:.1} +- {:.1}  forget {:.1} +- {:.1}   ({:.1?})",
            100.0 * am,
            100.0 * asd,
            100.0 * fm,
            100.0 * fsd,
            t0.elapsed() / seeds as u32
        );
    }
}
