//! Identity-balanced batch sampling: each batch holds P identities with K
//! instances each. Every epoch shuffles the identity order and walks it in
//! chunks, wrapping the last chunk so all identities appear.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub struct PkBatch {
    /// Dataset image indices.
    pub indices: Vec<usize>,
    /// Train labels aligned with `indices`.
    pub labels: Vec<usize>,
}

/// `per_id[l]` lists the dataset indices of train images with label `l`.
pub fn pk_batches(
    per_id: &[Vec<usize>],
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PkBatch> {
    let n_ids = per_id.len();
    let mut id_order: Vec<usize> = (0..n_ids).collect();
    id_order.shuffle(rng);

    let n_batches = n_ids.div_ceil(p);
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut indices = Vec::with_capacity(p * k);
        let mut labels = Vec::with_capacity(p * k);
        for slot in 0..p {
            let id = id_order[(b * p + slot) % n_ids];
            let mut views = per_id[id].clone();
            views.shuffle(rng);
            for inst in 0..k {
                indices.push(views[inst % views.len()]);
                labels.push(id);
            }
        }
        batches.push(PkBatch { indices, labels });
    }
    batches
}
