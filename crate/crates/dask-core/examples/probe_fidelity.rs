//! Scratch probe: does a trained rehearser pull other-domain images toward
//! its own domain's statistics?
use dask_core::dataset_io::generate_benchmark;
use dask_core::image::{channel_stats, domain_stats};
use dask_core::rehearser::{train_rehearser, RehearserConfig};
use dask_core::synthbench::Split;
use dask_core::BenchmarkConfig;

fn main() {
    let data = generate_benchmark(&BenchmarkConfig::default(), 0).unwrap();
    let d0 = &data.seen[0];
    let d1 = &data.seen[1];
    let (train0, _) = d0.images_of(Split::Train);
    let imgs0: Vec<_> = train0.into_iter().cloned().collect();

    let ds0 = domain_stats(&imgs0).unwrap();
    println!("domain0 sigma_of_mu {:?}", ds0.sigma_of_mu);
    println!("domain0 sigma_of_sigma {:?}", ds0.sigma_of_sigma);

    // Mean stats of domain 0.
    let mean_stats = |imgs: &[dask_core::image::Image]| {
        let mut mu = [0.0; 3];
        let mut sg = [0.0; 3];
        for img in imgs {
            let s = channel_stats(img);
            for c in 0..3 { mu[c] += s.mu[c]; sg[c] += s.sigma[c]; }
        }
        for c in 0..3 { mu[c] /= imgs.len() as f64; sg[c] /= imgs.len() as f64; }
        (mu, sg)
    };
    let (mu0, sg0) = mean_stats(&imgs0);
    let (train1, _) = d1.images_of(Split::Train);
    let imgs1: Vec<_> = train1.into_iter().cloned().collect();
    let (mu1, sg1) = mean_stats(&imgs1);
    println!("d0 mean mu {mu0:?} sigma {sg0:?}");
    println!("d1 mean mu {mu1:?} sigma {sg1:?}");

    let lr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let cfg = RehearserConfig { learning_rate: lr, ..Default::default() };
    let mut rng = dask_core::rng::stream(0, "probe-drl", 0);
    let kernel_net = train_rehearser(&imgs0, &cfg, &mut rng).unwrap();
    let mut rng2 = dask_core::rng::stream(0, "probe-drl-stats", 0);
    let stats_net = dask_core::rehearser::train_stats_predictor(&imgs0, &cfg, &mut rng2).unwrap();

    let dist = |img: &dask_core::image::Image| {
        let s = channel_stats(img);
        let mut acc = 0.0;
        for c in 0..3 {
            acc += (s.mu[c] - mu0[c]).powi(2) + (s.sigma[c] - sg0[c]).powi(2);
        }
        acc.sqrt()
    };
    for (name, f) in [
        ("kernel", Box::new(|img: &dask_core::image::Image| kernel_net.transfer(img).unwrap())
            as Box<dyn Fn(&dask_core::image::Image) -> dask_core::image::Image>),
        ("stats", Box::new(|img: &dask_core::image::Image| stats_net.transfer(img).unwrap())),
    ] {
        let mut improved = 0;
        let mut raw_total = 0.0;
        let mut reh_total = 0.0;
        for img in imgs1.iter().take(40) {
            let raw = dist(img);
            let t = f(img).clipped();
            let reh = dist(&t);
            raw_total += raw;
            reh_total += reh;
            if reh < raw { improved += 1; }
        }
        println!("{name}: lr={lr:.0e} d1->d0 raw {:.4} -> rehearsed {:.4}, improved {}/40",
            raw_total / 40.0, reh_total / 40.0, improved);
    }
}
