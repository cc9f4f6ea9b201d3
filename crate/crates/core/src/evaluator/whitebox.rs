//! Accuracy under attacks generated against the evaluated model.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_pyramid_attack, Differentiable, PixelSpec};
use crate::backbone::DropRealization;
use crate::dataio::SplitData;
use crate::error::Result;
use crate::evaluator::accumulate;
use crate::pyramid::{PyramidSpec, RandomMode, TargetMode};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteboxRow {
    pub attack: String,
    pub accuracy: f64,
}

impl WhiteboxRow {
    pub const CSV_HEADER: &'static str = "attack,accuracy";
}

/// Five-step pixel PGD at 4/255 and five-step desk pyramid PGD.
pub fn default_whitebox_attacks() -> Vec<(String, PyramidSpec)> {
    vec![
        ("pixel_pgd".into(), PixelSpec::default().to_pyramid()),
        ("pyramid_pgd".into(), PyramidSpec::desk_default()),
    ]
}

/// Untargeted (true-label ascent) PGD with dropout disabled. The target and
/// random modes of the given specs are overridden.
pub fn whitebox_eval<M: Differentiable<f32> + ?Sized>(
    model: &M,
    split: &SplitData,
    attacks: &[(String, PyramidSpec)],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<WhiteboxRow>> {
    let mut rows = Vec::with_capacity(attacks.len());
    for (name, spec) in attacks {
        let spec = PyramidSpec {
            target_mode: TargetMode::Untargeted,
            random_mode: RandomMode::Adversarial,
            ..spec.clone()
        };
        let acc = accumulate(model, split, batch_size, |start, b| {
            let r = pgd_pyramid_attack(model, &DropRealization::disabled(), &b, &spec, rng::derive(seed, &[start as u64]))?;
            Ok(r.perturbed)
        })?;
        rows.push(WhiteboxRow {
            attack: name.clone(),
            accuracy: acc.fraction(),
        });
    }
    Ok(rows)
}
