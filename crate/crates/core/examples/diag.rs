use onpro::stream::{make_synthetic_stream, SyntheticConfig};
use onpro::trainer::{run_stream, MethodConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map(String::as_str).unwrap_or("full");

    let stream_cfg = SyntheticConfig {
        num_tasks: 1,
        classes_per_task: 2,
        samples_per_class: 500,
        dim: 20,
        class_separation: 4.0,
        seed: 7,
    };
    let mut cfg = MethodConfig::onpro();
    match variant {
        "full" => {}
        "no_ins" => cfg.use_ins = false,
        "no_ope" => {
            cfg.use_ope_new = false;
            cfg.use_ope_seen = false;
        }
        "no_mixup" => cfg.use_apf = false,
        "sharp_mixup" => cfg.mixup_concentration = 0.2,
        "alpha0" => cfg.alpha = 0.0,
        "ce_only" => {
            cfg.use_ins = false;
            cfg.use_ope_new = false;
            cfg.use_ope_seen = false;
            cfg.use_apf = false;
        }
        "jitter3" => cfg.augment.jitter_sigma = 0.3,
        "jitter5" => cfg.augment.jitter_sigma = 0.5,
        "jitter10" => cfg.augment.jitter_sigma = 1.0,
        "jitter5mask3" => {
            cfg.augment.jitter_sigma = 0.5;
            cfg.augment.mask_prob = 0.3;
        }
        other => panic!("unknown variant {other}"),
    }
    cfg.per_step_eval = true;
    for seed in 0..3u64 {
        let (stream, tests) = make_synthetic_stream(&stream_cfg, 10).unwrap();
        let stream = stream.with_shuffle_seed(seed);
        let out = run_stream(stream, &tests, &cfg, seed).unwrap();
        let accs: Vec<String> = out
            .diagnostics
            .incremental_accuracy
            .iter()
            .step_by(10)
            .map(|r| format!("{:.2}", r.mean_accuracy))
            .collect();
        let losses = &out.diagnostics.loss_series;
        let last = losses.last().unwrap();
        println!(
            "variant={variant} seed={seed} acc_curve={accs:?} final_acc={:.3} ncm_acc={:.3} last_losses: ope_new={:.3} ope_seen={:.3} ins={:.3} ce={:.3}",
            out.matrix.rows[0][0],
            ncm_accuracy(&out.params, &tests[0]),
            last.losses.l_ope_new,
            last.losses.l_ope_seen,
            last.losses.l_ins,
            last.losses.l_ce
        );
    }
}

/// Nearest-class-mean accuracy in embedding space: means from even-indexed
/// test samples, evaluation on odd-indexed ones.
fn ncm_accuracy(params: &onpro::model::ModelParams, test: &[onpro::stream::Sample]) -> f64 {
    use onpro::numerics::Tensor2;
    use std::collections::BTreeMap;
    let rows: Vec<Vec<f64>> = test.iter().map(|s| s.features.clone()).collect();
    let z = params.embed(&Tensor2::from_rows(&rows).unwrap()).unwrap();
    let mut means: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, s) in test.iter().enumerate().step_by(2) {
        let e = means.entry(s.label).or_insert((vec![0.0; z.cols()], 0));
        for (a, b) in e.0.iter_mut().zip(z.row(i)) {
            *a += b;
        }
        e.1 += 1;
    }
    let mut correct = 0;
    let mut total = 0;
    for (i, s) in test.iter().enumerate().skip(1).step_by(2) {
        let mut best = (f64::INFINITY, 0usize);
        for (label, (sum, n)) in &means {
            let d2: f64 = sum
                .iter()
                .zip(z.row(i))
                .map(|(m, v)| (m / *n as f64 - v) * (m / *n as f64 - v))
                .sum();
            if d2 < best.0 {
                best = (d2, *label);
            }
        }
        if best.1 == s.label {
            correct += 1;
        }
        total += 1;
    }
    correct as f64 / total as f64
}
