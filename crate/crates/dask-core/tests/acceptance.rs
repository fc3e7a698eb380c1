//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//! Run with `cargo test -p dask-core --test acceptance -- --nocapture` to see
//! every line; heavier criteria are grouped so training runs are shared.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use dask_core::dataset_io::generate_benchmark;
use dask_core::image::{
    apply_transfer_kernel, augment_distribution, channel_stats, cop_transfer, domain_stats,
    AugmentForm, Image, TransferKernel, CHANNELS,
};
use dask_core::lifelong::{
    geometric_augment, pk_batches, run_sequence, Variant, VariantSpec,
};
use dask_core::rehearser::{
    perturb_for_reconstruction, reconstruction_loss, train_rehearser, ReconstructionNorm,
    RehearserConfig,
};
use dask_core::reid::{
    similarity_matrix, skd_loss_var, triplet_loss, FeatureBatch, ReidModel,
    SimilarityMatrix, TrainConfig,
};
use dask_core::rng::stream;
use dask_core::synthbench::{compute_map_rank1, generate_domain, DomainStyle, Split};
use dask_core::tensor::{pull_grads, AdamState, Tape, Tensor, Var};
use dask_core::BenchmarkConfig;

fn announce(criterion: &str, detail: &str) {
    println!("[PASS] {criterion}: {detail}");
}

// ── Criterion 1: gradient correctness ───────────────────────────────────

/// Central finite differences against the tape's analytic gradients. The
/// closure receives parameter handles in order and must return a scalar loss.
fn gradcheck(build: &dyn Fn(&mut Tape, &[Var]) -> Var, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let eval = |delta: f64| -> f64 {
                let mut copies: Vec<Tensor> = params.to_vec();
                copies[pi].data_mut()[ei] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = copies.into_iter().map(|c| t.leaf(c)).collect();
                let l = build(&mut t, &vs);
                t.value(l).item().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let ana = analytic[pi][ei];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..numel).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Random values kept away from zero, for kinked ops (relu, abs).
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..numel)
            .map(|_| {
                let mag = rng.random_range(0.05..1.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let tol = 1e-4;
    let mut worst: (f64, &str) = (0.0, "none");
    let mut track = |err: f64, name: &'static str| {
        if err > worst.0 {
            worst = (err, name);
        }
        assert!(err < tol, "{name}: relative error {err}");
    };

    for seed in 0..20u64 {
        let mut rng = stream(seed, "gradcheck", 0);

        let x = rand_tensor(&mut rng, vec![1, 2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3], -0.6, 0.6);
        let b = rand_tensor(&mut rng, vec![3], -0.3, 0.3);
        track(
            gradcheck(
                &|t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], 1).unwrap();
                    t.mean(y).unwrap()
                },
                &[x.clone(), w.clone(), b.clone()],
            ),
            "conv2d stride 1",
        );
        let x5 = rand_tensor(&mut rng, vec![1, 2, 5, 4], -1.0, 1.0);
        track(
            gradcheck(
                &|t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], 2).unwrap();
                    let a = t.abs(y).unwrap();
                    t.mean(a).unwrap()
                },
                &[x5, w, b],
            ),
            "conv2d stride 2",
        );

        let lx = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
        let lw = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let lb = rand_tensor(&mut rng, vec![4], -0.5, 0.5);
        track(
            gradcheck(
                &|t, v| {
                    let y = t.linear(v[0], v[1], v[2]).unwrap();
                    let s = t.mul(y, y).unwrap();
                    t.mean(s).unwrap()
                },
                &[lx, lw, lb],
            ),
            "linear",
        );

        let rx = rand_tensor_off_kink(&mut rng, vec![2, 6]);
        track(
            gradcheck(
                &|t, v| {
                    let y = t.relu(v[0]).unwrap();
                    t.sum(y).unwrap()
                },
                &[rx.clone()],
            ),
            "relu",
        );
        track(
            gradcheck(
                &|t, v| {
                    let y = t.abs(v[0]).unwrap();
                    t.mean(y).unwrap()
                },
                &[rx],
            ),
            "abs",
        );

        let gx = rand_tensor(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0);
        track(
            gradcheck(
                &|t, v| {
                    let y = t.global_avg_pool(v[0]).unwrap();
                    let sq = t.mul(y, y).unwrap();
                    t.sum(sq).unwrap()
                },
                &[gx.clone()],
            ),
            "global_avg_pool",
        );

        let ea = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
        let eb = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
        track(
            gradcheck(
                &|t, v| {
                    let s = t.add(v[0], v[1]).unwrap();
                    let d = t.sub(s, v[1]).unwrap();
                    let m = t.mul(d, v[1]).unwrap();
                    let sc = t.scale(m, 1.7).unwrap();
                    t.sum(sc).unwrap()
                },
                &[ea, eb],
            ),
            "add/sub/mul/scale",
        );

        let nx = rand_tensor_off_kink(&mut rng, vec![3, 4]);
        let weights = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        track(
            gradcheck(
                &|t, v| {
                    let n = t.row_normalize(v[0]).unwrap();
                    let w = t.mul(n, v[1]).unwrap();
                    t.sum(w).unwrap()
                },
                &[nx, weights.clone()],
            ),
            "row_normalize",
        );

        let ma = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
        let mb = rand_tensor(&mut rng, vec![3, 2], -1.0, 1.0);
        track(
            gradcheck(
                &|t, v| {
                    let y = t.matmul(v[0], v[1]).unwrap();
                    let yt = t.transpose(y).unwrap();
                    let m = t.mul(y, yt).unwrap();
                    t.sum(m).unwrap()
                },
                &[ma, mb],
            ),
            "matmul/transpose",
        );

        let sx = rand_tensor(&mut rng, vec![2, 4], -2.0, 2.0);
        track(
            gradcheck(
                &|t, v| {
                    let s = t.softmax_rows(v[0]).unwrap();
                    let w = t.mul(s, v[1]).unwrap();
                    t.sum(w).unwrap()
                },
                &[sx.clone(), rand_tensor(&mut rng, vec![2, 4], -1.0, 1.0)],
            ),
            "softmax_rows",
        );
        let px = rand_tensor(&mut rng, vec![2, 3], 0.1, 2.0);
        track(
            gradcheck(
                &|t, v| {
                    let y = t.log(v[0]).unwrap();
                    t.sum(y).unwrap()
                },
                &[px],
            ),
            "log",
        );

        let slice_src = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        track(
            gradcheck(
                &|t, v| {
                    let row = t.slice_row(v[0], 1).unwrap();
                    let part = t.narrow(row, 1, 2).unwrap();
                    let sq = t.mul(part, part).unwrap();
                    t.sum(sq).unwrap()
                },
                &[slice_src],
            ),
            "slice_row/narrow",
        );

        let rs = rand_tensor(&mut rng, vec![2, 6], -1.0, 1.0);
        track(
            gradcheck(
                &|t, v| {
                    let r = t.reshape(v[0], vec![3, 4]).unwrap();
                    let m = t.mul(r, r).unwrap();
                    t.mean(m).unwrap()
                },
                &[rs],
            ),
            "reshape",
        );

        let cx = rand_tensor(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0);
        let cs = rand_tensor(&mut rng, vec![3], 0.2, 1.5);
        let co = rand_tensor(&mut rng, vec![3], -0.5, 0.5);
        track(
            gradcheck(
                &|t, v| {
                    let m = t.mul_channel(v[0], v[1]).unwrap();
                    let a = t.add_channel(m, v[2]).unwrap();
                    let sq = t.mul(a, a).unwrap();
                    t.mean(sq).unwrap()
                },
                &[cx, cs, co],
            ),
            "mul_channel/add_channel",
        );

        let logits = rand_tensor(&mut rng, vec![3, 4], -1.5, 1.5);
        track(
            gradcheck(
                &|t, v| t.cross_entropy(v[0], &[0, 2, 3]).unwrap(),
                &[logits],
            ),
            "cross_entropy",
        );

        let feats = rand_tensor(&mut rng, vec![6, 3], -1.0, 1.0);
        track(
            gradcheck(
                &|t, v| t.batch_hard_triplet(v[0], &[0, 0, 1, 1, 2, 2], 0.3).unwrap(),
                &[feats],
            ),
            "batch_hard_triplet",
        );

        // KL of softmaxed similarity rows against a frozen matrix: the
        // distillation composition on a random 4x4 instance.
        let s_new = rand_tensor(&mut rng, vec![4, 4], -1.0, 1.0);
        let s_old_vals: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s_old = SimilarityMatrix::from_raw(s_old_vals, 4).unwrap();
        track(
            gradcheck(
                &|t, v| skd_loss_var(t, &s_old, v[0], 1.0).unwrap(),
                &[s_new],
            ),
            "skd (KL of softmaxed rows)",
        );

        // The rehearser graph pattern: kernel weights sliced out of a
        // predicted row and applied as a convolution.
        let row = rand_tensor(&mut rng, vec![1, 84], -0.4, 0.4);
        let img = rand_tensor(&mut rng, vec![1, 3, 4, 4], 0.0, 1.0);
        track(
            gradcheck(
                &|t, v| {
                    let r = t.slice_row(v[0], 0).unwrap();
                    let wflat = t.narrow(r, 0, 81).unwrap();
                    let w = t.reshape(wflat, vec![3, 3, 3, 3]).unwrap();
                    let b = t.narrow(r, 81, 3).unwrap();
                    let x = t.leaf(img.clone());
                    let y = t.conv2d(x, w, b, 1).unwrap();
                    let a = t.abs(y).unwrap();
                    t.mean(a).unwrap()
                },
                &[row],
            ),
            "predicted-kernel conv graph",
        );
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradient checks took {elapsed:?}, budget is one minute"
    );
    announce(
        "criterion 1 (gradient correctness)",
        &format!(
            "all ops within rel. err 1e-4 over 20 seeds; worst {:.2e} ({}); {:?}",
            worst.0, worst.1, elapsed
        ),
    );
}

// ── Criterion 2: augmentation statistics contract ───────────────────────

#[test]
fn criterion_02_augmentation_statistics_contract() {
    let mut rng = stream(2025, "criterion2", 0);
    let ds = dask_core::image::DomainStats {
        sigma_of_mu: [0.08, 0.12, 0.05],
        sigma_of_sigma: [0.05, 0.03, 0.08],
    };
    let mut checked = 0;
    for i in 0..100 {
        let img = Image::new(
            8,
            8,
            (0..8 * 8 * CHANNELS).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let source = channel_stats(&img);
        for form in [AugmentForm::ShiftScale, AugmentForm::Adain] {
            let (out, mu_s, sigma_s) = augment_distribution(&img, &ds, &mut rng, form);
            let got = channel_stats(&out);
            for c in 0..3 {
                assert!(
                    (got.sigma[c] - sigma_s[c]).abs() < 1e-10,
                    "image {i} {form:?} channel {c}: std {} vs sampled {}",
                    got.sigma[c],
                    sigma_s[c]
                );
                let want_mean = match form {
                    AugmentForm::Adain => mu_s[c],
                    AugmentForm::ShiftScale => mu_s[c] * sigma_s[c] / source.sigma[c].max(1e-4),
                };
                assert!(
                    (got.mu[c] - want_mean).abs() < 1e-10,
                    "image {i} {form:?} channel {c}: mean {} vs {}",
                    got.mu[c],
                    want_mean
                );
            }
        }
        checked += 1;
    }
    announce(
        "criterion 2 (augmentation statistics contract)",
        &format!("{checked} random images, both forms, stds and means to 1e-10"),
    );
}

// ── Criterion 3: affine transfer is a special case of the kernel ────────

#[test]
fn criterion_03_affine_is_center_tap_kernel_special_case() {
    let mut rng = stream(2025, "criterion3", 0);
    for _ in 0..100 {
        let img = Image::new(
            6,
            5,
            (0..6 * 5 * CHANNELS).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let scale = [0.0; 3].map(|_| rng.random_range(-1.5..1.5));
        let shift = [0.0; 3].map(|_| rng.random_range(-0.8..0.8));
        let via_cop = cop_transfer(&img, scale, shift);
        let via_kernel =
            apply_transfer_kernel(&img, &TransferKernel::from_affine(scale, shift, 3)).unwrap();
        for (a, b) in via_cop.pixels().iter().zip(via_kernel.pixels()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
    announce(
        "criterion 3 (affine = center-tap kernel)",
        "100 random (image, scale, shift) triples agree to 1e-12",
    );
}

// ── Criterion 4: brute-force oracles ────────────────────────────────────

#[test]
fn criterion_04_brute_force_oracles() {
    let mut rng = stream(2025, "criterion4", 0);

    // conv2d_same against a quadruple-loop oracle.
    for _ in 0..50 {
        let (cin, cout, h, w) = (2usize, 3usize, 4usize, 5usize);
        let k = 3usize;
        let x = rand_tensor(&mut rng, vec![1, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, vec![cout, cin, k, k], -1.0, 1.0);
        let bt = rand_tensor(&mut rng, vec![cout], -0.5, 0.5);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.leaf(x.clone()),
            tape.leaf(wt.clone()),
            tape.leaf(bt.clone()),
        );
        let y = tape.conv2d(xv, wv, bv, 1).unwrap();
        let out = tape.value(y).data();

        let r = (k / 2) as i64;
        for co in 0..cout {
            for oy in 0..h as i64 {
                for ox in 0..w as i64 {
                    let mut acc = bt.data()[co];
                    for ci in 0..cin {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let sy = (oy + dy).clamp(0, h as i64 - 1) as usize;
                                let sx = (ox + dx).clamp(0, w as i64 - 1) as usize;
                                let wv = wt.data()[((co * cin + ci) * k + (dy + r) as usize) * k
                                    + (dx + r) as usize];
                                acc += wv * x.data()[(ci * h + sy) * w + sx];
                            }
                        }
                    }
                    let got = out[(co * h + oy as usize) * w + ox as usize];
                    assert!((acc - got).abs() <= 1e-12);
                }
            }
        }
    }

    // similarity_matrix against pairwise cosine.
    for _ in 0..50 {
        let (b, d) = (6usize, 5usize);
        let feats: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fb = FeatureBatch::new(feats.clone(), d, vec![0; b]).unwrap();
        let s = similarity_matrix(&fb).unwrap();
        for i in 0..b {
            for j in 0..b {
                let fi = &feats[i * d..(i + 1) * d];
                let fj = &feats[j * d..(j + 1) * d];
                let dot: f64 = fi.iter().zip(fj).map(|(a, b)| a * b).sum();
                let ni = fi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj = fj.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((s.get(i, j) - dot / (ni * nj)).abs() <= 1e-12);
            }
        }
    }

    // triplet_loss against an exhaustive batch-hard loop.
    let mut triplet_checked = 0;
    while triplet_checked < 50 {
        let (b, d) = (8usize, 4usize);
        let feats: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let valid = (0..b).any(|a| {
            labels.iter().enumerate().any(|(j, &l)| j != a && l == labels[a])
                && labels.iter().any(|&l| l != labels[a])
        });
        if !valid {
            continue;
        }
        let fb = FeatureBatch::new(feats.clone(), d, labels.clone()).unwrap();
        let got = triplet_loss(&fb, 0.3).unwrap();

        let dist = |i: usize, j: usize| -> f64 {
            feats[i * d..(i + 1) * d]
                .iter()
                .zip(&feats[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut total = 0.0;
        let mut anchors = 0;
        for a in 0..b {
            let mut dp: Option<f64> = None;
            let mut dn: Option<f64> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    dp = Some(dp.map_or(dist(a, j), |v: f64| v.max(dist(a, j))));
                } else {
                    dn = Some(dn.map_or(dist(a, j), |v: f64| v.min(dist(a, j))));
                }
            }
            if let (Some(dp), Some(dn)) = (dp, dn) {
                total += (dp - dn + 0.3).max(0.0);
                anchors += 1;
            }
        }
        assert!((got - total / anchors as f64).abs() <= 1e-12);
        triplet_checked += 1;
    }

    // Average precision against an exhaustive loop, plus the hand case.
    for _ in 0..50 {
        let d = 4usize;
        let (nq, ng) = (5usize, 12usize);
        let qf: Vec<f64> = (0..nq * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gf: Vec<f64> = (0..ng * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ql: Vec<usize> = (0..nq).map(|i| i % 3).collect();
        let gl: Vec<usize> = (0..ng).map(|i| i % 3).collect();
        let (map, rank1) = compute_map_rank1(
            &FeatureBatch::new(qf.clone(), d, ql.clone()).unwrap(),
            &FeatureBatch::new(gf.clone(), d, gl.clone()).unwrap(),
        )
        .unwrap();

        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|v| v * v).sum::<f64>().sqrt()
                * b.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let mut ap_sum = 0.0;
        let mut r1 = 0usize;
        for qi in 0..nq {
            let mut order: Vec<usize> = (0..ng).collect();
            let sims: Vec<f64> = (0..ng)
                .map(|gi| cos(&qf[qi * d..(qi + 1) * d], &gf[gi * d..(gi + 1) * d]))
                .collect();
            order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
            let total: usize = gl.iter().filter(|&&l| l == ql[qi]).count();
            let mut hits = 0;
            let mut psum = 0.0;
            for (rank, &gi) in order.iter().enumerate() {
                if gl[gi] == ql[qi] {
                    hits += 1;
                    psum += hits as f64 / (rank + 1) as f64;
                }
            }
            ap_sum += psum / total as f64;
            if gl[order[0]] == ql[qi] {
                r1 += 1;
            }
        }
        assert!((map - ap_sum / nq as f64).abs() <= 1e-12);
        assert!((rank1 - r1 as f64 / nq as f64).abs() <= 1e-12);
    }

    // Hand case: relevant at ranks 1 and 3 of a 4-gallery.
    let query = FeatureBatch::new(vec![1.0, 0.0], 2, vec![7]).unwrap();
    let gallery = FeatureBatch::new(
        vec![1.0, 0.0, 0.8, 0.6, 0.6, 0.8, 0.4, 0.9],
        2,
        vec![7, 3, 7, 3],
    )
    .unwrap();
    let (map, _) = compute_map_rank1(&query, &gallery).unwrap();
    assert!(
        (map - (1.0 + 2.0 / 3.0) / 2.0).abs() <= 1e-15,
        "AP hand case: {map}"
    );

    announce(
        "criterion 4 (brute-force oracles)",
        "conv2d, similarity, triplet, AP each match oracles on 50 instances to 1e-12; AP hand case exact",
    );
}

// ── Criteria 5 and 6: rehearser efficacy and fidelity ───────────────────

struct DrlOutcome {
    ratios: Vec<f64>,
    fidelity_fractions: Vec<f64>,
}

fn drl_outcome() -> &'static DrlOutcome {
    static CELL: OnceLock<DrlOutcome> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut ratios = Vec::new();
        let mut fidelity_fractions = Vec::new();
        for seed in 0..3u64 {
            let style = DomainStyle::from_seed(derive(seed, 100));
            let ds = generate_domain(derive(seed, 200), &style, 20, 8, 64, 32).unwrap();
            let (train_imgs, _) = ds.images_of(Split::Train);
            let train: Vec<Image> = train_imgs.into_iter().cloned().collect();
            let cfg = RehearserConfig::default();
            let mut rng = stream(seed, "acc-drl", 0);
            let net = train_rehearser(&train, &cfg, &mut rng).unwrap();

            // Held-out images: the domain's evaluation split.
            let (q, _) = ds.images_of(Split::Query);
            let (g, _) = ds.images_of(Split::Gallery);
            let held: Vec<&Image> = q.into_iter().chain(g).collect();
            let stats = domain_stats(&train).unwrap();

            let mut eval_rng = stream(seed, "acc-drl-eval", 0);
            let mut trained_total = 0.0;
            let mut identity_total = 0.0;
            let mut improved = 0usize;
            for img in &held {
                let perturbed =
                    perturb_for_reconstruction(img, &stats, &cfg, &mut eval_rng).unwrap();
                let restored = net.transfer(&perturbed).unwrap();
                trained_total +=
                    reconstruction_loss(img, &restored, ReconstructionNorm::L1).unwrap();
                identity_total +=
                    reconstruction_loss(img, &perturbed, ReconstructionNorm::L1).unwrap();

                let d_perturbed = channel_stats(&perturbed).distance(&channel_stats(img));
                let d_restored = channel_stats(&restored).distance(&channel_stats(img));
                if d_restored < d_perturbed {
                    improved += 1;
                }
            }
            ratios.push(trained_total / identity_total);
            fidelity_fractions.push(improved as f64 / held.len() as f64);
        }
        DrlOutcome {
            ratios,
            fidelity_fractions,
        }
    })
}

fn derive(seed: u64, salt: u64) -> u64 {
    dask_core::rng::derive_seed(seed, "acceptance-domain", salt)
}

#[test]
fn criterion_05_rehearser_reconstruction_efficacy() {
    let start = Instant::now();
    let outcome = drl_outcome();
    for (seed, ratio) in outcome.ratios.iter().enumerate() {
        assert!(
            *ratio <= 0.5,
            "seed {seed}: trained/identity reconstruction ratio {ratio:.3} exceeds 0.5"
        );
    }
    assert!(start.elapsed().as_secs() < 600, "over the 10 minute budget");
    announce(
        "criterion 5 (rehearser efficacy)",
        &format!(
            "held-out reconstruction ratios {:?} all <= 0.5 on 3/3 seeds",
            outcome
                .ratios
                .iter()
                .map(|r| format!("{r:.3}"))
                .collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_06_rehearsal_statistics_fidelity() {
    let outcome = drl_outcome();
    for (seed, frac) in outcome.fidelity_fractions.iter().enumerate() {
        assert!(
            *frac >= 0.9,
            "seed {seed}: rehearsal improved channel stats for only {:.1}% of held-out images",
            frac * 100.0
        );
    }
    announce(
        "criterion 6 (rehearsal fidelity)",
        &format!(
            "stats distance reduced for {:?} of held-out augmented images (>= 90%)",
            outcome
                .fidelity_fractions
                .iter()
                .map(|f| format!("{:.0}%", f * 100.0))
                .collect::<Vec<_>>()
        ),
    );
}

// ── Criterion 9: degenerate-weight equivalences ─────────────────────────

fn tiny_domains(seed: u64) -> Vec<dask_core::synthbench::DomainDataset> {
    (0..2)
        .map(|i| {
            let style = DomainStyle::from_seed(derive(seed, 300 + i));
            let mut ds = generate_domain(derive(seed, 400 + i), &style, 4, 4, 32, 16).unwrap();
            ds.domain_id = i as usize;
            ds
        })
        .collect()
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        epochs_first: 3,
        epochs_later: 2,
        identities_per_batch: 2,
        instances_per_identity: 2,
        passes_per_epoch: 1,
        embed_dim: 16,
        ..Default::default()
    }
}

fn tiny_reh_cfg() -> RehearserConfig {
    RehearserConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    }
}

#[test]
fn criterion_09_degenerate_weight_equivalences() {
    let seen = tiny_domains(11);
    let reh_cfg = tiny_reh_cfg();

    // beta = 0: the dask trajectory is bit-identical to baseline.
    let mut cfg = tiny_train_cfg();
    cfg.beta = 0.0;
    let run = |spec: VariantSpec| {
        run_sequence(&seen, &[], &cfg, &reh_cfg, &spec, 1, 77).unwrap()
    };
    let dask = run(VariantSpec::new(Variant::Dask));
    let base = run(VariantSpec::new(Variant::Baseline));
    for (a, b) in dask
        .state
        .model
        .as_ref()
        .unwrap()
        .params()
        .iter()
        .zip(base.state.model.as_ref().unwrap().params())
    {
        assert_eq!(a.data(), b.data(), "beta=0 trajectories must be bit-identical");
    }

    // alpha = beta = 0 and lambda = 0: the pipeline equals a plain
    // sequential fine-tuning loop written independently here.
    let mut naive_cfg = tiny_train_cfg();
    naive_cfg.alpha = 0.0;
    naive_cfg.beta = 0.0;
    naive_cfg.lambda_ema = 0.0;
    let pipeline = run_sequence(
        &seen,
        &[],
        &naive_cfg,
        &reh_cfg,
        &VariantSpec::new(Variant::Dask),
        1,
        78,
    )
    .unwrap();
    let naive = naive_finetune(&seen, &naive_cfg, 78);
    for (a, b) in pipeline
        .state
        .model
        .as_ref()
        .unwrap()
        .params()
        .iter()
        .zip(naive.params())
    {
        assert_eq!(
            a.data(),
            b.data(),
            "alpha=beta=lambda=0 must equal naive fine-tuning bit-exactly"
        );
    }

    announce(
        "criterion 9 (degenerate weights)",
        "beta=0 equals baseline bit-exactly; alpha=beta=lambda=0 equals naive fine-tuning bit-exactly",
    );
}

/// Plain sequential fine-tuning: fresh classifier per domain, triplet plus
/// cross-entropy only, no distillation, no fusion, no rehearsal. Mirrors the
/// pipeline's rng stream discipline.
fn naive_finetune(
    seen: &[dask_core::synthbench::DomainDataset],
    cfg: &TrainConfig,
    seed: u64,
) -> ReidModel {
    let mut model: Option<ReidModel> = None;
    for (idx, ds) in seen.iter().enumerate() {
        let t = (idx + 1) as u64;
        let mut rng = stream(seed, "step-model", t);
        let n_ids = ds.train_id_count();
        let m = match &model {
            Some(prev) => prev.with_fresh_classifier(n_ids, &mut rng),
            None => ReidModel::new(cfg.embed_dim, n_ids, &mut rng),
        };
        let mut m = m;
        let train_idx = ds.indices_of(Split::Train);
        let mut per_id: Vec<Vec<usize>> = vec![Vec::new(); n_ids];
        for &i in &train_idx {
            per_id[ds.labels[i]].push(i);
        }
        let epochs = if t == 1 { cfg.epochs_first } else { cfg.epochs_later };
        let mut adam = AdamState::new(cfg.learning_rate);
        for _ in 0..epochs {
            let mut batches = Vec::new();
            for _ in 0..cfg.passes_per_epoch {
                batches.extend(pk_batches(
                    &per_id,
                    cfg.identities_per_batch,
                    cfg.instances_per_identity,
                    &mut rng,
                ));
            }
            for batch in batches {
                let real: Vec<Image> = batch
                    .indices
                    .iter()
                    .map(|&i| geometric_augment(&ds.images[i], &mut rng))
                    .collect();
                let refs: Vec<&Image> = real.iter().collect();
                let mut tape = Tape::new();
                let mut bind = Vec::new();
                let bound = m.bind(&mut tape, &mut bind);
                let x = tape
                    .leaf(dask_core::image::batch_to_tensor(&refs, true).unwrap());
                let feats = bound.extractor.forward(&mut tape, x).unwrap();
                let logits = bound.logits(&mut tape, feats).unwrap();
                let tri = tape
                    .batch_hard_triplet(feats, &batch.labels, cfg.margin)
                    .unwrap();
                let ce = tape.cross_entropy(logits, &batch.labels).unwrap();
                let total = tape.add(tri, ce).unwrap();
                tape.backward(total).unwrap();
                let mut params = m.params_mut();
                pull_grads(&tape, &bind, &mut params).unwrap();
                adam.step(&mut params).unwrap();
            }
            m.assert_finite().unwrap();
        }
        model = Some(m);
    }
    model.unwrap()
}

// ── Criterion 10: determinism and persistence ───────────────────────────

#[test]
fn criterion_10_determinism_and_persistence() {
    let seen = tiny_domains(13);
    let cfg = tiny_train_cfg();
    let reh_cfg = tiny_reh_cfg();
    let spec = VariantSpec::new(Variant::Dask);
    let run = || {
        let out = run_sequence(&seen, &[], &cfg, &reh_cfg, &spec, 1, 5).unwrap();
        serde_json::to_string(&(
            &out.evaluation.seen,
            &out.evaluation.seen_avg,
            &out.history,
        ))
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "identical config+seed must give byte-identical metrics");

    // Checkpoint round trips are bit-exact.
    let mut rng = stream(5, "acc-ckpt", 0);
    let model = ReidModel::new(24, 5, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    dask_core::checkpoint::save_reid_model(&model, "hash", &path).unwrap();
    let back = dask_core::checkpoint::load_reid_model(&path).unwrap();
    for (x, y) in model.params().iter().zip(back.params()) {
        assert_eq!(x.data(), y.data());
    }

    announce(
        "criterion 10 (determinism and persistence)",
        "repeated runs serialize byte-identically; checkpoint round trip bit-exact",
    );
}

// ── Criteria 7, 8, 11: directional reproductions ────────────────────────

#[derive(Clone)]
struct GridResult {
    seen_avg_map: f64,
    early_domain_map: f64,
}

struct Grid {
    results: std::collections::BTreeMap<(String, u64), GridResult>,
}

static GRID: OnceLock<Mutex<Option<Grid>>> = OnceLock::new();

fn grid() -> std::sync::MutexGuard<'static, Option<Grid>> {
    let cell = GRID.get_or_init(|| Mutex::new(None));
    let mut guard = cell.lock().unwrap();
    if guard.is_none() {
        *guard = Some(compute_grid());
    }
    guard
}

fn grid_configs() -> Vec<(String, VariantSpec, RehearserConfig)> {
    let base_reh = RehearserConfig::default();
    let mut rows = vec![
        (
            "baseline".to_string(),
            VariantSpec::new(Variant::Baseline),
            base_reh.clone(),
        ),
        (
            "stats_pred".to_string(),
            VariantSpec::new(Variant::StatsPred),
            base_reh.clone(),
        ),
        (
            "dask".to_string(),
            VariantSpec::new(Variant::Dask),
            base_reh.clone(),
        ),
        (
            "dask_reid_only".to_string(),
            VariantSpec {
                variant: Variant::Dask,
                use_rehearsed_reid_loss: true,
                use_rehearsed_skd_loss: false,
            },
            base_reh.clone(),
        ),
        (
            "dask_skd_only".to_string(),
            VariantSpec {
                variant: Variant::Dask,
                use_rehearsed_reid_loss: false,
                use_rehearsed_skd_loss: true,
            },
            base_reh.clone(),
        ),
    ];
    let mut nk3 = base_reh;
    nk3.kernels_per_image = 3;
    rows.push(("dask_nk3".to_string(), VariantSpec::new(Variant::Dask), nk3));
    rows
}

fn compute_grid() -> Grid {
    let bench_cfg = BenchmarkConfig::default();
    let train_cfg = TrainConfig::default();
    let mut results = std::collections::BTreeMap::new();
    for seed in 0..3u64 {
        let data = generate_benchmark(&bench_cfg, seed).unwrap();
        for (label, spec, reh_cfg) in grid_configs() {
            let out =
                run_sequence(&data.seen, &data.unseen, &train_cfg, &reh_cfg, &spec, 1, seed)
                    .unwrap();
            let final_seen: Vec<f64> = out.evaluation.seen.iter().map(|d| d.map).collect();
            let t = final_seen.len();
            let early = final_seen[..t - 1].iter().sum::<f64>() / (t - 1) as f64;
            eprintln!(
                "[grid] {label} seed {seed}: seen {:?} avg {:.4}",
                final_seen
                    .iter()
                    .map(|m| format!("{m:.3}"))
                    .collect::<Vec<_>>(),
                out.evaluation.seen_avg.map
            );
            results.insert(
                (label, seed),
                GridResult {
                    seen_avg_map: out.evaluation.seen_avg.map,
                    early_domain_map: early,
                },
            );
        }
    }
    Grid { results }
}

fn mean_over_seeds(grid: &Grid, label: &str, f: impl Fn(&GridResult) -> f64) -> f64 {
    let vals: Vec<f64> = (0..3u64)
        .map(|s| f(&grid.results[&(label.to_string(), s)]))
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn criterion_07_input_data_ablation_ordering() {
    let start = Instant::now();
    let guard = grid();
    let grid = guard.as_ref().unwrap();
    let base = mean_over_seeds(grid, "baseline", |r| r.seen_avg_map);
    let stats = mean_over_seeds(grid, "stats_pred", |r| r.seen_avg_map);
    let dask = mean_over_seeds(grid, "dask", |r| r.seen_avg_map);
    assert!(
        dask > stats && stats >= base,
        "seen-avg ordering violated: dask {dask:.4}, stats_pred {stats:.4}, baseline {base:.4}"
    );

    let base_early = mean_over_seeds(grid, "baseline", |r| r.early_domain_map);
    let dask_early = mean_over_seeds(grid, "dask", |r| r.early_domain_map);
    assert!(
        dask_early - base_early >= 0.05,
        "early-domain gap {:.4} below 5 mAP points (dask {dask_early:.4} vs baseline {base_early:.4})",
        dask_early - base_early
    );
    announce(
        "criterion 7 (input-data ablation ordering)",
        &format!(
            "seen-avg mAP baseline {base:.3} <= stats_pred {stats:.3} < dask {dask:.3}; early-domain gap {:.3} (elapsed {:?})",
            dask_early - base_early,
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_08_loss_ablation_ordering() {
    let guard = grid();
    let grid = guard.as_ref().unwrap();
    let base = mean_over_seeds(grid, "baseline", |r| r.seen_avg_map);
    let reid_only = mean_over_seeds(grid, "dask_reid_only", |r| r.seen_avg_map);
    let skd_only = mean_over_seeds(grid, "dask_skd_only", |r| r.seen_avg_map);
    let full = mean_over_seeds(grid, "dask", |r| r.seen_avg_map);
    assert!(
        reid_only > base,
        "adding the rehearsed id loss alone must improve the baseline: {reid_only:.4} vs {base:.4}"
    );
    assert!(
        full >= base && full >= reid_only && full >= skd_only,
        "full configuration must lead all four rows: full {full:.4}, reid* {reid_only:.4}, skd* {skd_only:.4}, baseline {base:.4}"
    );
    announce(
        "criterion 8 (loss ablation ordering)",
        &format!(
            "seen-avg mAP baseline {base:.3}, +reid* {reid_only:.3}, +skd* {skd_only:.3}, full {full:.3}"
        ),
    );
}

#[test]
fn criterion_11_kernel_count_ordering() {
    let guard = grid();
    let grid = guard.as_ref().unwrap();
    let nk1 = mean_over_seeds(grid, "dask", |r| r.seen_avg_map);
    let nk3 = mean_over_seeds(grid, "dask_nk3", |r| r.seen_avg_map);
    assert!(
        nk1 >= nk3,
        "single-kernel configuration must not lose to three kernels: {nk1:.4} vs {nk3:.4}"
    );
    announce(
        "criterion 11 (kernel count)",
        &format!("seen-avg mAP single kernel {nk1:.3} >= three kernels {nk3:.3}"),
    );
}
