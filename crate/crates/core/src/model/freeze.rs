use serde::{Deserialize, Serialize};

use super::{BackboneModel, Param, SideModel};

/// Which backbone parameters train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneTraining {
    /// Every parameter.
    Full,
    /// Layernorm scale/shift and the output head `W_B` only.
    NormAndHead,
    /// Nothing.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub backbone: BackboneTraining,
    /// Side network (and the distillation modules attached to it) train.
    pub side: bool,
}

impl FreezePolicy {
    pub const MDPD: FreezePolicy = FreezePolicy { backbone: BackboneTraining::NormAndHead, side: true };
    pub const FULL_FT: FreezePolicy = FreezePolicy { backbone: BackboneTraining::Full, side: false };
    pub const PARTIAL: FreezePolicy = FreezePolicy { backbone: BackboneTraining::NormAndHead, side: false };
    pub const SIDE_ONLY: FreezePolicy = FreezePolicy { backbone: BackboneTraining::Frozen, side: true };

    pub fn backbone_trains(&self, model: &BackboneModel, param: &Param) -> bool {
        match self.backbone {
            BackboneTraining::Full => true,
            BackboneTraining::NormAndHead => param.kind.is_norm() || param.name == model.head.name,
            BackboneTraining::Frozen => false,
        }
    }
}

/// Sets `requires_grad` on every backbone and side parameter per `policy`.
pub fn apply_freeze(backbone: &mut BackboneModel, side: Option<&mut SideModel>, policy: FreezePolicy) {
    let head = backbone.head.name.clone();
    for p in backbone.params_mut() {
        p.requires_grad = match policy.backbone {
            BackboneTraining::Full => true,
            BackboneTraining::NormAndHead => p.kind.is_norm() || p.name == head,
            BackboneTraining::Frozen => false,
        };
    }
    if let Some(side) = side {
        for p in side.params_mut() {
            p.requires_grad = policy.side;
        }
    }
}

/// Backbone parameters that must never change under `policy`.
pub fn frozen_backbone_params<'a>(backbone: &'a BackboneModel, policy: &FreezePolicy) -> Vec<&'a Param> {
    backbone.params().into_iter().filter(|p| !policy.backbone_trains(backbone, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_backbone, build_side, ArchSpec};

    #[test]
    fn mdpd_policy_trains_norms_and_head_only() {
        let spec = ArchSpec::default();
        let mut bb = build_backbone(&spec, 1).unwrap();
        let mut side = build_side(&spec, 2).unwrap();
        apply_freeze(&mut bb, Some(&mut side), FreezePolicy::MDPD);
        assert!(!bb.layers[0].query.weight.requires_grad);
        assert!(!bb.embed.weight.requires_grad);
        assert!(bb.layers[0].norm1.scale.requires_grad);
        assert!(bb.layers[2].norm2.shift.requires_grad);
        assert!(bb.head.requires_grad);
        let trainable: Vec<_> = bb.params().into_iter().filter(|p| p.requires_grad).collect();
        assert_eq!(trainable.len(), 4 * spec.layers + 1);
        assert!(side.params().iter().all(|p| p.requires_grad));
    }

    #[test]
    fn side_only_freezes_whole_backbone() {
        let spec = ArchSpec::default();
        let mut bb = build_backbone(&spec, 1).unwrap();
        let mut side = build_side(&spec, 2).unwrap();
        apply_freeze(&mut bb, Some(&mut side), FreezePolicy::SIDE_ONLY);
        assert!(bb.params().iter().all(|p| !p.requires_grad));
        assert!(side.params().iter().all(|p| p.requires_grad));
    }

    #[test]
    fn frozen_subset_matches_flags() {
        let spec = ArchSpec::default();
        let mut bb = build_backbone(&spec, 1).unwrap();
        apply_freeze(&mut bb, None, FreezePolicy::PARTIAL);
        let frozen = frozen_backbone_params(&bb, &FreezePolicy::PARTIAL);
        assert!(frozen.iter().all(|p| !p.requires_grad));
        assert_eq!(frozen.len() + 4 * spec.layers + 1, bb.params().len());
    }
}
