//! Scratch probe: baseline vs dask trajectories on the standard benchmark.
use dask_core::dataset_io::generate_benchmark;
use dask_core::lifelong::{run_sequence, Variant, VariantSpec};
use dask_core::rehearser::RehearserConfig;
use dask_core::reid::TrainConfig;
use dask_core::BenchmarkConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let epochs_scale: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let variants: Vec<&str> = args.get(3).map(|s| s.split(',').collect()).unwrap_or(vec!["baseline", "dask"]);

    let bench_cfg = BenchmarkConfig::default();
    let data = generate_benchmark(&bench_cfg, seed).unwrap();
    let naive = std::env::var("NAIVE").is_ok();
    let cfg = TrainConfig {
        epochs_first: (80.0 * epochs_scale) as usize,
        epochs_later: (60.0 * epochs_scale) as usize,
        alpha: if naive { 0.0 } else { 1.0 },
        lambda_ema: if naive { 0.0 } else { 0.5 },
        ..Default::default()
    };
    let reh_cfg = RehearserConfig {
        epochs: (50.0 * epochs_scale) as usize,
        ..Default::default()
    };
    for name in variants {
        let spec = VariantSpec::new(Variant::parse(name).unwrap());
        let t0 = std::time::Instant::now();
        let out = run_sequence(&data.seen, &data.unseen, &cfg, &reh_cfg, &spec, 1, seed).unwrap();
        print!("{name:11} seed={seed} ");
        for d in &out.evaluation.seen {
            print!("d{}={:.3} ", d.domain, d.map);
        }
        println!(
            "seen_avg={:.4} unseen_avg={:.4}  ({:.0?})",
            out.evaluation.seen_avg.map, out.evaluation.unseen_avg.map, t0.elapsed()
        );
        for s in &out.history {
            let row: Vec<String> = s.seen.iter().map(|d| format!("d{}={:.3}", d.domain, d.map)).collect();
            println!("    step {}: {}", s.step, row.join(" "));
        }
    }
}
