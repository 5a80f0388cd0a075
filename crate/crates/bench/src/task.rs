use enm_core::{Condition, GaussianMixture, Latent};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// One `(source sample, source condition, target condition)` triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTask {
    pub task_id: usize,
    pub seed: u64,
    /// Class the source sample was drawn from.
    pub class_src: Condition,
    /// Condition used for inversion and reconstruction.
    pub cond_src: Condition,
    pub cond_tgt: Condition,
    pub z0: Latent,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the stream belonging to `task_id` under `master`.
pub fn task_seed(master: u64, task_id: usize) -> u64 {
    splitmix64(splitmix64(master) ^ task_id as u64)
}

/// Deterministic task list: sources cycle through the classes, each edited
/// towards the next class.
pub fn generate_tasks(
    gmm: &GaussianMixture,
    count: usize,
    master_seed: u64,
    null_source: bool,
) -> Result<Vec<EditTask>> {
    let classes = gmm.class_ids();
    if classes.len() < 2 {
        return Err(BenchError::Config("editing tasks need at least two classes".into()));
    }
    (0..count)
        .map(|task_id| {
            let seed = task_seed(master_seed, task_id);
            let class_src = Condition::Class(classes[task_id % classes.len()]);
            let cond_tgt = Condition::Class(classes[(task_id + 1) % classes.len()]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = gmm.sample(class_src, &mut rng)?;
            Ok(EditTask {
                task_id,
                seed,
                class_src,
                cond_src: if null_source {
                    Condition::Unconditional
                } else {
                    class_src
                },
                cond_tgt,
                z0: Latent::new(z0, 0),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BenchConfig;

    #[test]
    fn tasks_are_reproducible_and_paired() {
        let gmm = BenchConfig::default().load_mixture().unwrap();
        let a = generate_tasks(&gmm, 10, 7, false).unwrap();
        let b = generate_tasks(&gmm, 10, 7, false).unwrap();
        assert_eq!(a, b);
        let c = generate_tasks(&gmm, 10, 8, false).unwrap();
        assert_ne!(a[0].z0, c[0].z0);
        for t in &a {
            assert_ne!(t.cond_src, t.cond_tgt);
        }
        let null = generate_tasks(&gmm, 10, 7, true).unwrap();
        for (x, y) in a.iter().zip(&null) {
            assert_eq!(x.z0, y.z0);
            assert_eq!(y.cond_src, Condition::Unconditional);
        }
        // prefix property: task i does not depend on the task count
        let longer = generate_tasks(&gmm, 20, 7, false).unwrap();
        assert_eq!(&longer[..10], &a[..]);
    }
}
