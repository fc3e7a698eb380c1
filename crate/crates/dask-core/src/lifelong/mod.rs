//! The lifelong training loop: per-step training that mixes real new-domain
//! batches with old-style batches generated by the retained rehearser,
//! similarity distillation against the frozen previous model, per-epoch
//! parameter fusion, and the multi-step sequence driver.

mod sampler;

pub use sampler::{pk_batches, PkBatch};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, hflip, random_erase, random_translate, Image};
use crate::rehearser::{
    perturb_for_reconstruction, train_rehearser, train_shared_kernel, train_stats_predictor,
    Rehearser, RehearserConfig,
};
use crate::reid::{
    extract_features, similarity_matrix, similarity_matrix_var, skd_loss_var, ema_fuse,
    ReidModel, TrainConfig,
};
use crate::rng::stream;
use crate::synthbench::{
    evaluate_model, AvgMetrics, DomainDataset, Evaluation, Split, StepMetrics,
};
use crate::tensor::{pull_grads, AdamState, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    StyleAug,
    SharedConv,
    StatsPred,
    Dask,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::StyleAug => "style_aug",
            Variant::SharedConv => "shared_conv",
            Variant::StatsPred => "stats_pred",
            Variant::Dask => "dask",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "style_aug" => Ok(Variant::StyleAug),
            "shared_conv" => Ok(Variant::SharedConv),
            "stats_pred" => Ok(Variant::StatsPred),
            "dask" => Ok(Variant::Dask),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantSpec {
    pub variant: Variant,
    pub use_rehearsed_reid_loss: bool,
    pub use_rehearsed_skd_loss: bool,
}

impl Default for VariantSpec {
    fn default() -> Self {
        VariantSpec::new(Variant::Dask)
    }
}

impl VariantSpec {
    /// Baseline has no rehearsed stream; the other variants default to both
    /// rehearsed loss terms enabled.
    pub fn new(variant: Variant) -> Self {
        let rehearsed = variant != Variant::Baseline;
        VariantSpec {
            variant,
            use_rehearsed_reid_loss: rehearsed,
            use_rehearsed_skd_loss: rehearsed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Baseline
            && (self.use_rehearsed_reid_loss || self.use_rehearsed_skd_loss)
        {
            return Err(Error::Config(
                "baseline variant cannot enable rehearsed losses".into(),
            ));
        }
        Ok(())
    }
}

/// Cross-step state: the current model, the bounded list of retained style
/// rehearsers, and the completed-step counter.
pub struct LifelongState {
    pub step: usize,
    pub model: Option<ReidModel>,
    pub retained: Vec<Rehearser>,
    pub retained_capacity: usize,
}

impl LifelongState {
    pub fn new(retained_capacity: usize) -> Result<Self> {
        if retained_capacity == 0 {
            return Err(Error::Config("retained capacity must be >= 1".into()));
        }
        Ok(LifelongState {
            step: 0,
            model: None,
            retained: Vec::new(),
            retained_capacity,
        })
    }
}

/// Restyles a batch toward an old domain using one uniformly chosen retained
/// rehearser; labels are copied and outputs are clipped for the extractor.
pub fn generate_old_style(
    rehearsers: &[Rehearser],
    images: &[&Image],
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Image>, Vec<usize>)> {
    if rehearsers.is_empty() {
        return Err(Error::EmptyInput("no retained rehearser".into()));
    }
    let pick = if rehearsers.len() == 1 {
        0
    } else {
        rng.random_range(0..rehearsers.len())
    };
    let chosen = &rehearsers[pick];
    let out: Vec<Image> = images
        .iter()
        .map(|img| chosen.transfer(img).map(|t| t.clipped()))
        .collect::<Result<_>>()?;
    Ok((out, labels.to_vec()))
}

/// Standard geometric augmentation for training batches: translation jitter,
/// horizontal flip, random erasing.
pub fn geometric_augment(img: &Image, rng: &mut ChaCha8Rng) -> Image {
    let mut out = random_translate(img, rng, 2);
    if rng.random::<f64>() < 0.5 {
        out = hflip(&out);
    }
    if rng.random::<f64>() < 0.5 {
        random_erase(&mut out, rng, 0.15);
    }
    out
}

/// One lifelong training step: train the new model on the domain (with
/// distillation and rehearsed batches when an old model exists), fuse per
/// epoch, then train this domain's own rehearser and retain it.
pub fn run_step(
    mut state: LifelongState,
    dataset: &DomainDataset,
    cfg: &TrainConfig,
    reh_cfg: &RehearserConfig,
    spec: &VariantSpec,
    seed: u64,
) -> Result<LifelongState> {
    cfg.validate()?;
    reh_cfg.validate()?;
    spec.validate()?;
    let t = state.step + 1;
    let train_indices = dataset.indices_of(Split::Train);
    if train_indices.is_empty() {
        return Err(Error::EmptyInput(format!(
            "domain {} has no train split",
            dataset.domain_id
        )));
    }
    let n_ids = dataset.train_id_count();
    let mut per_id: Vec<Vec<usize>> = vec![Vec::new(); n_ids];
    for &i in &train_indices {
        per_id[dataset.labels[i]].push(i);
    }

    let mut model_rng = stream(seed, "step-model", t as u64);
    let mut drl_rng = stream(seed, "step-drl", t as u64);

    let old_model = state.model.take();
    let mut model = match &old_model {
        Some(m) => m.with_fresh_classifier(n_ids, &mut model_rng),
        None => ReidModel::new(cfg.embed_dim, n_ids, &mut model_rng),
    };

    let epochs = if t == 1 {
        cfg.epochs_first
    } else {
        cfg.epochs_later
    };
    let skd_active = old_model.is_some() && cfg.alpha != 0.0;
    let wants_rehearsal = spec.variant != Variant::Baseline
        && (spec.use_rehearsed_reid_loss || spec.use_rehearsed_skd_loss);
    let rehearse_active = old_model.is_some() && cfg.beta != 0.0 && wants_rehearsal;
    if rehearse_active && spec.variant != Variant::StyleAug && state.retained.is_empty() {
        return Err(Error::InvalidArgument(
            "rehearsed stream requested but no rehearser retained".into(),
        ));
    }
    let style_aug_stats = if rehearse_active && spec.variant == Variant::StyleAug {
        let train_images: Vec<Image> = train_indices
            .iter()
            .map(|&i| dataset.images[i].clone())
            .collect();
        Some(crate::image::domain_stats(&train_images)?)
    } else {
        None
    };

    let mut adam = AdamState::new(cfg.learning_rate);
    for _epoch in 0..epochs {
        let mut batches = Vec::new();
        for _ in 0..cfg.passes_per_epoch {
            batches.extend(pk_batches(
                &per_id,
                cfg.identities_per_batch,
                cfg.instances_per_identity,
                &mut model_rng,
            ));
        }
        for batch in batches {
            let raw: Vec<&Image> = batch.indices.iter().map(|&i| &dataset.images[i]).collect();
            let real: Vec<Image> = raw
                .iter()
                .map(|img| geometric_augment(img, &mut model_rng))
                .collect();
            let real_refs: Vec<&Image> = real.iter().collect();

            let rehearsed: Option<Vec<Image>> = if rehearse_active {
                let styled: Vec<Image> = match spec.variant {
                    Variant::StyleAug => {
                        let ds = style_aug_stats.as_ref().unwrap();
                        raw.iter()
                            .map(|img| {
                                perturb_for_reconstruction(img, ds, reh_cfg, &mut model_rng)
                                    .map(|p| p.clipped())
                            })
                            .collect::<Result<_>>()?
                    }
                    _ => {
                        generate_old_style(&state.retained, &raw, &batch.labels, &mut model_rng)?
                            .0
                    }
                };
                Some(
                    styled
                        .iter()
                        .map(|img| geometric_augment(img, &mut model_rng))
                        .collect(),
                )
            } else {
                None
            };

            let mut tape = Tape::new();
            let mut bind = Vec::new();
            let bound = model.bind(&mut tape, &mut bind);

            let x_real = tape.leaf(batch_to_tensor(&real_refs, true)?);
            let feats = bound.extractor.forward(&mut tape, x_real)?;
            let logits = bound.logits(&mut tape, feats)?;
            let l_tri = tape.batch_hard_triplet(feats, &batch.labels, cfg.margin)?;
            let l_ce = tape.cross_entropy(logits, &batch.labels)?;
            let mut total = tape.add(l_tri, l_ce)?;

            if skd_active {
                let old = old_model.as_ref().unwrap();
                let old_fb = extract_features(old, &real_refs, &batch.labels)?;
                let s_old = similarity_matrix(&old_fb)?;
                let s_new = similarity_matrix_var(&mut tape, feats)?;
                let l_skd = skd_loss_var(&mut tape, &s_old, s_new, cfg.tau)?;
                let weighted = tape.scale(l_skd, cfg.alpha)?;
                total = tape.add(total, weighted)?;
            }

            if let Some(reh_images) = &rehearsed {
                let reh_refs: Vec<&Image> = reh_images.iter().collect();
                let x_reh = tape.leaf(batch_to_tensor(&reh_refs, true)?);
                let feats_r = bound.extractor.forward(&mut tape, x_reh)?;
                let mut group: Option<Var> = None;
                if spec.use_rehearsed_reid_loss {
                    let logits_r = bound.logits(&mut tape, feats_r)?;
                    let tri_r = tape.batch_hard_triplet(feats_r, &batch.labels, cfg.margin)?;
                    let ce_r = tape.cross_entropy(logits_r, &batch.labels)?;
                    group = Some(tape.add(tri_r, ce_r)?);
                }
                if spec.use_rehearsed_skd_loss && skd_active {
                    let old = old_model.as_ref().unwrap();
                    let old_fb = extract_features(old, &reh_refs, &batch.labels)?;
                    let s_old = similarity_matrix(&old_fb)?;
                    let s_new = similarity_matrix_var(&mut tape, feats_r)?;
                    let l_skd = skd_loss_var(&mut tape, &s_old, s_new, cfg.tau)?;
                    let weighted = tape.scale(l_skd, cfg.alpha)?;
                    group = Some(match group {
                        None => weighted,
                        Some(g) => tape.add(g, weighted)?,
                    });
                }
                if let Some(g) = group {
                    let weighted = tape.scale(g, cfg.beta)?;
                    total = tape.add(total, weighted)?;
                }
            }

            tape.backward(total)?;
            let mut params = model.params_mut();
            pull_grads(&tape, &bind, &mut params)?;
            adam.step(&mut params)?;
        }

        model.assert_finite()?;
    }

    // Fuse once per step: training runs at full plasticity, then the old
    // parameters are blended back in. Fusing every epoch at lambda 0.5 anchors
    // the model so hard it cannot learn the new domain.
    if let Some(old) = &old_model {
        if cfg.lambda_ema != 0.0 {
            model = ema_fuse(old, &model, cfg.lambda_ema)?;
        }
    }

    // The frozen old model must be untouched by the step.
    debug_assert!(old_model
        .as_ref()
        .map_or(true, |m| m.params().iter().all(|t| t.is_finite())));

    // This domain's own rehearser, trained after the step's model training.
    let train_images: Vec<Image> = train_indices
        .iter()
        .map(|&i| dataset.images[i].clone())
        .collect();
    let new_rehearser = match spec.variant {
        Variant::SharedConv => Some(Rehearser::Shared(train_shared_kernel(
            &train_images,
            reh_cfg,
            &mut drl_rng,
        )?)),
        Variant::StatsPred => Some(Rehearser::Stats(train_stats_predictor(
            &train_images,
            reh_cfg,
            &mut drl_rng,
        )?)),
        Variant::Dask => Some(Rehearser::Kernel(train_rehearser(
            &train_images,
            reh_cfg,
            &mut drl_rng,
        )?)),
        Variant::Baseline | Variant::StyleAug => None,
    };
    if let Some(r) = new_rehearser {
        state.retained.push(r);
        while state.retained.len() > state.retained_capacity {
            state.retained.remove(0);
        }
    }

    Ok(LifelongState {
        step: t,
        model: Some(model),
        retained: state.retained,
        retained_capacity: state.retained_capacity,
    })
}

/// Outcome of a full sequence: final state, final-model evaluation, and the
/// per-step seen-domain history.
pub struct SequenceOutcome {
    pub state: LifelongState,
    pub evaluation: Evaluation,
    pub history: Vec<StepMetrics>,
}

/// Runs the step loop over the seen domains and evaluates the final model on
/// every seen test split and every unseen domain.
pub fn run_sequence(
    seen: &[DomainDataset],
    unseen: &[DomainDataset],
    cfg: &TrainConfig,
    reh_cfg: &RehearserConfig,
    spec: &VariantSpec,
    retained_capacity: usize,
    seed: u64,
) -> Result<SequenceOutcome> {
    run_sequence_with(
        seen,
        unseen,
        cfg,
        reh_cfg,
        spec,
        retained_capacity,
        seed,
        |_| Ok(()),
    )
}

/// [`run_sequence`] with a hook invoked after every completed step, e.g. for
/// per-step checkpointing.
#[allow(clippy::too_many_arguments)]
pub fn run_sequence_with(
    seen: &[DomainDataset],
    unseen: &[DomainDataset],
    cfg: &TrainConfig,
    reh_cfg: &RehearserConfig,
    spec: &VariantSpec,
    retained_capacity: usize,
    seed: u64,
    mut on_step: impl FnMut(&LifelongState) -> Result<()>,
) -> Result<SequenceOutcome> {
    if seen.is_empty() {
        return Err(Error::EmptyInput("no seen domains".into()));
    }
    let mut state = LifelongState::new(retained_capacity)?;
    let mut history = Vec::with_capacity(seen.len());
    for (idx, dataset) in seen.iter().enumerate() {
        state = run_step(state, dataset, cfg, reh_cfg, spec, seed)?;
        on_step(&state)?;
        let eval_so_far = evaluate_model(
            state.model.as_ref().unwrap(),
            &seen[..=idx],
            &[],
        )?;
        history.push(StepMetrics {
            step: idx + 1,
            seen: eval_so_far.seen,
            seen_avg: eval_so_far.seen_avg,
        });
    }
    let evaluation = evaluate_model(state.model.as_ref().unwrap(), seen, unseen)?;
    Ok(SequenceOutcome {
        state,
        evaluation,
        history,
    })
}

/// One ablation row: a label, the loss-flag configuration, and the rehearser
/// settings (kernel count sweeps override these per row).
pub struct AblationRow {
    pub label: String,
    pub spec: VariantSpec,
    pub rehearser: RehearserConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub seen_avg: AvgMetrics,
    pub unseen_avg: AvgMetrics,
}

/// Runs every row against the same datasets and seed.
pub fn run_ablation(
    rows: &[AblationRow],
    seen: &[DomainDataset],
    unseen: &[DomainDataset],
    cfg: &TrainConfig,
    retained_capacity: usize,
    seed: u64,
) -> Result<Vec<AblationEntry>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("empty ablation suite".into()));
    }
    rows.iter()
        .map(|row| {
            let outcome = run_sequence(
                seen,
                unseen,
                cfg,
                &row.rehearser,
                &row.spec,
                retained_capacity,
                seed,
            )?;
            Ok(AblationEntry {
                label: row.label.clone(),
                seen_avg: outcome.evaluation.seen_avg,
                unseen_avg: outcome.evaluation.unseen_avg,
            })
        })
        .collect()
}
