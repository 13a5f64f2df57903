//! Portable JSON checkpoints: every parameter array as shape plus
//! row-major 64-bit values, optimizer moments, and the frozen reference
//! policy when one exists. Floats serialize in shortest round-trip form,
//! so save → load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::Discriminator;
use crate::diffcore::AdamState;
use crate::flow::VectorField;
use crate::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub policy: VectorField,
    pub policy_opt: AdamState,
    #[serde(default)]
    pub policy_ref: Option<VectorField>,
    #[serde(default)]
    pub disc: Option<Discriminator>,
    #[serde(default)]
    pub disc_opt: Option<AdamState>,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let body = serde_json::to_string(ckpt)?;
    std::fs::write(path, body)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let body = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&body)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{param_fingerprint, Activation, AdamHyper};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = VectorField::init(2, &[7, 5], Activation::Tanh, 2, 4, 4, &mut rng);
        let mut opt = AdamState::new(&policy.flatten(), AdamHyper::with_lr(1e-3));
        // make the moments non-trivial
        for m in &mut opt.m {
            for v in &mut m.data {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        opt.step = 17;
        let ckpt = Checkpoint {
            step: 42,
            policy: policy.clone(),
            policy_opt: opt.clone(),
            policy_ref: Some(policy.clone()),
            disc: None,
            disc_opt: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.policy_opt.step, 17);
        assert_eq!(
            param_fingerprint(&ckpt.policy.flatten()),
            param_fingerprint(&loaded.policy.flatten())
        );
        assert_eq!(
            param_fingerprint(&ckpt.policy_opt.m),
            param_fingerprint(&loaded.policy_opt.m)
        );
    }
}
