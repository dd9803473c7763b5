use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape of the backbone/side pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Encoder layer count `L`.
    pub layers: usize,
    /// Tokens per example `N`.
    pub tokens: usize,
    /// Backbone hidden width `D_B`.
    pub hidden: usize,
    /// Side-network reduction factor `r`; the side width is `D_B / r`.
    pub reduction: usize,
    /// Width of the raw input tokens.
    pub input_dim: usize,
    /// Output width of both heads.
    pub out_dim: usize,
    /// MLP hidden width is `mlp_ratio · D`.
    pub mlp_ratio: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec { layers: 4, tokens: 8, hidden: 32, reduction: 2, input_dim: 8, out_dim: 4, mlp_ratio: 2 }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidSpec { field, reason: reason.into() }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers < 2 {
            return Err(invalid("layers", format!("need at least 2 layers, got {}", self.layers)));
        }
        if self.tokens < 4 {
            return Err(invalid("tokens", format!("need at least 4 tokens, got {}", self.tokens)));
        }
        if self.reduction < 2 {
            return Err(invalid("reduction", format!("must be at least 2, got {}", self.reduction)));
        }
        self.check_structure()
    }

    /// Structural checks only; admits degenerate shapes (one layer, `r = 1`)
    /// used when comparing graphs buffer by buffer.
    pub(crate) fn check_structure(&self) -> Result<(), ModelError> {
        if self.layers == 0 {
            return Err(invalid("layers", "must be positive"));
        }
        if self.tokens == 0 {
            return Err(invalid("tokens", "must be positive"));
        }
        if self.hidden == 0 {
            return Err(invalid("hidden", "must be positive"));
        }
        if self.reduction == 0 || !self.hidden.is_multiple_of(self.reduction) {
            return Err(invalid(
                "reduction",
                format!("must divide hidden width {} exactly, got {}", self.hidden, self.reduction),
            ));
        }
        if self.input_dim == 0 {
            return Err(invalid("input_dim", "must be positive"));
        }
        if self.out_dim == 0 {
            return Err(invalid("out_dim", "must be positive"));
        }
        if self.mlp_ratio == 0 {
            return Err(invalid("mlp_ratio", "must be positive"));
        }
        Ok(())
    }

    pub fn side_hidden(&self) -> usize {
        self.hidden / self.reduction
    }

    /// Last shallow layer (1-based); layers above it are deep.
    pub fn boundary(&self) -> usize {
        self.layers / 2
    }

    /// 1-based indices of the shallow layers.
    pub fn shallow_layers(&self) -> Vec<usize> {
        (1..=self.boundary()).collect()
    }

    /// 1-based indices of the deep layers.
    pub fn deep_layers(&self) -> Vec<usize> {
        (self.boundary() + 1..=self.layers).collect()
    }

    pub fn is_deep(&self, layer: usize) -> bool {
        layer > self.boundary()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ArchSpec::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_reduction() {
        let spec = ArchSpec { hidden: 30, reduction: 4, ..ArchSpec::default() };
        let err = spec.validate().unwrap_err();
        assert!(matches!(err, ModelError::InvalidSpec { field: "reduction", .. }));
    }

    #[test]
    fn rejects_small_fields_by_name() {
        for (spec, field) in [
            (ArchSpec { layers: 1, ..ArchSpec::default() }, "layers"),
            (ArchSpec { tokens: 3, ..ArchSpec::default() }, "tokens"),
            (ArchSpec { reduction: 1, ..ArchSpec::default() }, "reduction"),
            (ArchSpec { mlp_ratio: 0, ..ArchSpec::default() }, "mlp_ratio"),
        ] {
            match spec.validate() {
                Err(ModelError::InvalidSpec { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected {field} error, got {other:?}"),
            }
        }
    }

    #[test]
    fn shallow_and_deep_partition_layers() {
        for layers in 2..9 {
            let spec = ArchSpec { layers, ..ArchSpec::default() };
            let b = spec.boundary();
            assert!(b >= 1 && b < layers);
            let mut all = spec.shallow_layers();
            all.extend(spec.deep_layers());
            assert_eq!(all, (1..=layers).collect::<Vec<_>>());
        }
    }
}
