//! Scratch probe: after restyling new-domain images toward the old domain,
//! how close do their features (under the old model) sit to true old-domain
//! features?
use dask_core::dataset_io::generate_benchmark;
use dask_core::lifelong::{run_step, LifelongState, Variant, VariantSpec};
use dask_core::rehearser::{train_rehearser, train_stats_predictor, RehearserConfig};
use dask_core::reid::{extract_features, TrainConfig};
use dask_core::synthbench::Split;
use dask_core::BenchmarkConfig;

fn main() {
    let lr: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(3e-4);
    let data = generate_benchmark(&BenchmarkConfig::default(), 0).unwrap();
    let d0 = &data.seen[0];
    let d1 = &data.seen[1];

    // M_1: train one step on domain 0 only.
    let cfg = TrainConfig::default();
    let reh_cfg = RehearserConfig { learning_rate: lr, ..Default::default() };
    let state = LifelongState::new(1).unwrap();
    let state = run_step(state, d0, &cfg, &reh_cfg, &VariantSpec::new(Variant::Baseline), 0).unwrap();
    let model = state.model.as_ref().unwrap();

    let (d0_imgs, d0_labels) = d0.images_of(Split::Gallery);
    let f_true = extract_features(model, &d0_imgs, &d0_labels).unwrap();

    let (train0, _) = d0.images_of(Split::Train);
    let imgs0: Vec<_> = train0.into_iter().cloned().collect();
    let mut r1 = dask_core::rng::stream(0, "po-drl", 0);
    let kernel_net = train_rehearser(&imgs0, &reh_cfg, &mut r1).unwrap();
    let mut r2 = dask_core::rng::stream(0, "po-drl-s", 0);
    let stats_net = train_stats_predictor(&imgs0, &reh_cfg, &mut r2).unwrap();

    let (d1_imgs, d1_labels) = d1.images_of(Split::Gallery);
    let mean_feat = |fb: &dask_core::reid::FeatureBatch| -> Vec<f64> {
        let d = fb.dim();
        let mut m = vec![0.0; d];
        for i in 0..fb.len() {
            for (mv, &v) in m.iter_mut().zip(fb.row(i)) { *mv += v; }
        }
        for mv in m.iter_mut() { *mv /= fb.len() as f64; }
        m
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let m_true = mean_feat(&f_true);

    let eval = |name: &str, images: Vec<dask_core::image::Image>| {
        let refs: Vec<&dask_core::image::Image> = images.iter().collect();
        let fb = extract_features(model, &refs, &d1_labels).unwrap();
        let m = mean_feat(&fb);
        // Identity separability: mean inter-id centroid distance over mean
        // intra-id spread, under the old model.
        let mut ids: Vec<usize> = d1_labels.clone();
        ids.sort_unstable();
        ids.dedup();
        let centroid = |id: usize| -> Vec<f64> {
            let rows: Vec<usize> = (0..fb.len()).filter(|&i| fb.labels()[i] == id).collect();
            let mut c = vec![0.0; fb.dim()];
            for &r in &rows {
                for (cv, &v) in c.iter_mut().zip(fb.row(r)) { *cv += v; }
            }
            for cv in c.iter_mut() { *cv /= rows.len() as f64; }
            c
        };
        let cents: Vec<Vec<f64>> = ids.iter().map(|&id| centroid(id)).collect();
        let mut inter = 0.0;
        let mut n_inter = 0;
        for i in 0..cents.len() {
            for j in (i + 1)..cents.len() {
                inter += dist(&cents[i], &cents[j]);
                n_inter += 1;
            }
        }
        inter /= n_inter as f64;
        let mut intra = 0.0;
        for (k, &id) in ids.iter().enumerate() {
            let rows: Vec<usize> = (0..fb.len()).filter(|&i| fb.labels()[i] == id).collect();
            let mut acc = 0.0;
            for &r in &rows { acc += dist(fb.row(r), &cents[k]); }
            intra += acc / rows.len() as f64;
        }
        intra /= ids.len() as f64;
        println!("{name:18} centroid-to-d0 {:.4}  separability {:.3}", dist(&m, &m_true), inter / intra);
    };
    eval("raw d1", d1_imgs.iter().map(|i| (*i).clone()).collect());
    eval("kernel-rehearsed", d1_imgs.iter().map(|i| kernel_net.transfer(i).unwrap().clipped()).collect());
    eval("stats-rehearsed", d1_imgs.iter().map(|i| stats_net.transfer(i).unwrap().clipped()).collect());
}
