//! Backpropagation memory accounting and forward FLOP counts.
//!
//! Memory is counted in stored scalars. The analytic model enumerates the
//! pre-activations of the layer recipe; [`reconcile`] checks it against the
//! buffers a tape actually retains.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{MemoryLedger, Segment, Tape, Tensor};
use crate::distill::{task_loss_node, DistillConfig, DistillError};
use crate::model::{apply_freeze, ArchSpec, BackboneModel, FreezePolicy, LeafBinder, ModelError, SideModel};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("ledger has no stored scalars in segment `{0}`")]
    MissingSegment(Segment),
    #[error("reduction factor must be positive")]
    ZeroReduction,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyticMemoryReport {
    pub reduction: usize,
    /// Saved layer inputs over all backbone layers.
    pub a_total: u64,
    /// Saved nonlinearity derivatives over all backbone layers.
    pub sigma_total: u64,
    pub full_ft: u64,
    /// Parameter-efficient tuning still keeps every derivative buffer.
    pub petl_lower_bound: u64,
    pub side_network: u64,
    /// Attention-probability buffers (`L·N²`), outside the sums above since they
    /// do not scale with width.
    pub softmax_excluded: u64,
}

impl AnalyticMemoryReport {
    pub fn from_totals(a_total: u64, sigma_total: u64, reduction: usize) -> Result<Self, MemoryError> {
        if reduction == 0 {
            return Err(MemoryError::ZeroReduction);
        }
        let full_ft = a_total + sigma_total;
        Ok(AnalyticMemoryReport {
            reduction,
            a_total,
            sigma_total,
            full_ft,
            petl_lower_bound: full_ft / 2,
            side_network: full_ft / reduction as u64,
            softmax_excluded: 0,
        })
    }

    pub fn ratio_analytic(&self) -> f64 {
        1.0 / self.reduction as f64
    }
}

/// Per layer the recipe has three pre-activations feeding a nonlinearity:
/// the two layernorm inputs (`N×D` each) and the MLP relu input (`N×ratio·D`).
pub fn analytic_memory(spec: &ArchSpec) -> Result<AnalyticMemoryReport, MemoryError> {
    spec.check_structure()?;
    let (l, n, d) = (spec.layers as u64, spec.tokens as u64, spec.hidden as u64);
    let per_layer = 2 * n * d + n * spec.mlp_ratio as u64 * d;
    let mut report = AnalyticMemoryReport::from_totals(l * per_layer, l * per_layer, spec.reduction)?;
    report.softmax_excluded = l * n * n;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub ratio_empirical: f64,
    pub ratio_analytic: f64,
    pub side_stored: usize,
    pub backbone_stored: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Compares side-segment storage of a side-only pass with backbone-segment
/// storage of a full fine-tuning pass of the same spec.
pub fn reconcile(
    side_pass: &MemoryLedger,
    full_ft_pass: &MemoryLedger,
    report: &AnalyticMemoryReport,
    tol: f64,
) -> Result<Reconciliation, MemoryError> {
    let side_stored = side_pass.segment(Segment::Side).total();
    let backbone_stored = full_ft_pass.segment(Segment::Backbone).total();
    if side_stored == 0 {
        return Err(MemoryError::MissingSegment(Segment::Side));
    }
    if backbone_stored == 0 {
        return Err(MemoryError::MissingSegment(Segment::Backbone));
    }
    let ratio_empirical = side_stored as f64 / backbone_stored as f64;
    let ratio_analytic = report.ratio_analytic();
    Ok(Reconciliation {
        ratio_empirical,
        ratio_analytic,
        side_stored,
        backbone_stored,
        tol,
        pass: (ratio_empirical - ratio_analytic).abs() <= tol,
    })
}

fn probe_input(spec: &ArchSpec) -> Array2<f64> {
    Array2::from_shape_fn((spec.tokens, spec.input_dim), |(i, j)| ((i * spec.input_dim + j) as f64 * 0.37).sin())
}

/// Ledger of one example through a fully trainable backbone, taken just before backward.
pub fn measure_full_ft(spec: &ArchSpec, seed: u64) -> Result<MemoryLedger, MemoryError> {
    spec.check_structure()?;
    let mut backbone = BackboneModel::build_unchecked(spec, seed);
    apply_freeze(&mut backbone, None, FreezePolicy::FULL_FT);
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, &mut LeafBinder::new());
    let x = tape.input(probe_input(spec).into_dyn());
    let trace = bound.forward(&mut tape, x)?;
    tape.set_segment(Segment::Loss);
    task_loss_node(&mut tape, trace.logits, 0)?;
    Ok(tape.ledger_snapshot())
}

/// Ledger of one example through a frozen backbone and a trainable side network.
pub fn measure_side_only(spec: &ArchSpec, seed: u64) -> Result<MemoryLedger, MemoryError> {
    spec.check_structure()?;
    let mut backbone = BackboneModel::build_unchecked(spec, seed);
    let mut side = SideModel::build_unchecked(spec, seed.wrapping_add(1));
    apply_freeze(&mut backbone, Some(&mut side), FreezePolicy::SIDE_ONLY);
    let mut tape = Tape::new();
    let mut binder = LeafBinder::new();
    let bb = backbone.bind(&mut tape, &mut binder);
    let sb = side.bind(&mut tape, &mut binder);
    let x = tape.input(probe_input(spec).into_dyn());
    let trace = bb.forward(&mut tape, x)?;
    let feats = trace.features.iter().map(|&f| tape.detach(f)).collect::<Result<Vec<Tensor>, _>>().map_err(ModelError::from)?;
    let st = sb.forward(&mut tape, &feats)?;
    tape.set_segment(Segment::Loss);
    task_loss_node(&mut tape, st.logits, 0)?;
    Ok(tape.ledger_snapshot())
}

/// Runs both passes and reconciles them against the analytic model.
pub fn reconcile_spec(spec: &ArchSpec, seed: u64, tol: f64) -> Result<(AnalyticMemoryReport, Reconciliation), MemoryError> {
    let report = analytic_memory(spec)?;
    let side = measure_side_only(spec, seed)?;
    let full = measure_full_ft(spec, seed)?;
    let rec = reconcile(&side, &full, &report, tol)?;
    Ok((report, rec))
}

/// Per-example forward FLOPs (2 per multiply-add) of matmuls and convolutions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    /// Embedding, encoder layers and head of the backbone.
    pub backbone_forward: u64,
    /// Side encoder layers and head.
    pub side_forward: u64,
    /// Fusion gates and down-projections, plus distillation modules when counted.
    pub projectors: u64,
    pub faded_total: u64,
    pub training_total: u64,
    /// Layer-internal weight matmuls only.
    pub backbone_weight_matmuls: u64,
    pub side_weight_matmuls: u64,
    /// `QKᵀ` and `A·V` matmuls.
    pub backbone_attention: u64,
    pub side_attention: u64,
}

struct EncoderFlops {
    weights: u64,
    attention: u64,
}

fn encoder_flops(layers: u64, n: u64, d: u64, mlp_ratio: u64) -> EncoderFlops {
    // q, k, v, output: 4 · 2ND²; MLP in and out: 2 · 2N·D·ratio·D
    let weights = layers * (8 * n * d * d + 4 * n * d * mlp_ratio * d);
    let attention = layers * (4 * n * n * d);
    EncoderFlops { weights, attention }
}

/// Closed-form FLOPs of an assisted forward; `faded` zeroes the side and projector segments.
pub fn count_flops(spec: &ArchSpec, faded: bool) -> Result<FlopReport, MemoryError> {
    count_flops_with(spec, None, faded)
}

/// Like [`count_flops`], also counting the distillation modules of `distill`
/// (feature projectors, mask substitution, generation blocks and the logits
/// projector) under the projector segment.
pub fn count_flops_with(spec: &ArchSpec, distill: Option<&DistillConfig>, faded: bool) -> Result<FlopReport, MemoryError> {
    spec.check_structure()?;
    let (l, n, d, c) = (spec.layers as u64, spec.tokens as u64, spec.hidden as u64, spec.out_dim as u64);
    let ds = spec.side_hidden() as u64;
    let ratio = spec.mlp_ratio as u64;

    let bb = encoder_flops(l, n, d, ratio);
    let backbone_forward = 2 * n * spec.input_dim as u64 * d + bb.weights + bb.attention + 2 * d * c;
    let sd = encoder_flops(l, n, ds, ratio);
    let mut side_forward = sd.weights + sd.attention + 2 * ds * c;
    // gate: [α]·[1 0] then two column picks, 4 FLOPs each; down-projection 2N·D·D_S
    let mut projectors = l * (12 + 2 * n * d * ds);
    if let Some(cfg) = distill {
        let rank = cfg.rank as u64;
        let per_projector = 2 * n * ds * rank + 2 * n * rank * d;
        projectors += (cfg.shallow_layers.len() + cfg.deep_layers.len()) as u64 * per_projector;
        if cfg.generation {
            // mask token fill m·f_mask, then two convolutions with 3·D taps
            projectors += cfg.deep_layers.len() as u64 * (2 * n * d + 2 * (2 * n * 3 * d * d));
        }
        // square identity projector on the logits: two 1×C·C×C matmuls
        projectors += 4 * c * c;
    }
    let (side_weight_matmuls, side_attention) = if faded { (0, 0) } else { (sd.weights, sd.attention) };
    if faded {
        side_forward = 0;
        projectors = 0;
    }
    Ok(FlopReport {
        backbone_forward,
        side_forward,
        projectors,
        faded_total: backbone_forward,
        training_total: backbone_forward + side_forward + projectors,
        backbone_weight_matmuls: bb.weights,
        side_weight_matmuls,
        backbone_attention: bb.attention,
        side_attention,
    })
}

/// One `mem-report` line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemReportRecord {
    pub spec: ArchSpec,
    pub a_total: u64,
    pub sigma_total: u64,
    pub full_ft: u64,
    pub petl_lower_bound: u64,
    pub side_network: u64,
    pub softmax_excluded: u64,
    pub ratio_empirical: f64,
    pub ratio_analytic: f64,
    pub pass: bool,
}

pub fn mem_report(spec: &ArchSpec, seed: u64, tol: f64) -> Result<MemReportRecord, MemoryError> {
    let (report, rec) = reconcile_spec(spec, seed, tol)?;
    Ok(MemReportRecord {
        spec: spec.clone(),
        a_total: report.a_total,
        sigma_total: report.sigma_total,
        full_ft: report.full_ft,
        petl_lower_bound: report.petl_lower_bound,
        side_network: report.side_network,
        softmax_excluded: report.softmax_excluded,
        ratio_empirical: rec.ratio_empirical,
        ratio_analytic: rec.ratio_analytic,
        pass: rec.pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_backbone, faded_forward_counted};
    use ndarray::Array3;

    fn spec(d: usize, r: usize) -> ArchSpec {
        ArchSpec { layers: 4, tokens: 16, hidden: d, reduction: r, input_dim: 8, out_dim: 4, mlp_ratio: 2 }
    }

    #[test]
    fn toy_division() {
        let r = AnalyticMemoryReport::from_totals(500, 500, 4).unwrap();
        assert_eq!(r.side_network, 250);
        assert_eq!(r.petl_lower_bound, 500);
    }

    #[test]
    fn side_versus_petl_bound() {
        let r2 = analytic_memory(&spec(64, 2)).unwrap();
        assert_eq!(r2.side_network, r2.petl_lower_bound);
        let r4 = analytic_memory(&spec(64, 4)).unwrap();
        assert_eq!(r4.side_network * 2, r4.petl_lower_bound);
        assert_eq!(r4.a_total, r4.sigma_total);
        assert_eq!(r4.softmax_excluded, 4 * 16 * 16);
    }

    #[test]
    fn unit_reduction_gives_ratio_one() {
        let s = spec(32, 1);
        let (_, rec) = reconcile_spec(&s, 0, 0.0).unwrap();
        assert_eq!(rec.ratio_empirical, 1.0);
        assert!(rec.pass);
    }

    #[test]
    fn missing_segment_is_rejected() {
        let report = analytic_memory(&spec(32, 2)).unwrap();
        let empty = MemoryLedger::default();
        assert!(matches!(reconcile(&empty, &empty, &report, 0.1), Err(MemoryError::MissingSegment(Segment::Side))));
    }

    #[test]
    fn faded_report_matches_tape_counter() {
        let s = spec(32, 2);
        let flops = count_flops(&s, true).unwrap();
        let bb = build_backbone(&s, 0).unwrap();
        let (_, counted) = faded_forward_counted(&bb, &Array3::zeros((1, 16, 8))).unwrap();
        assert_eq!(flops.faded_total, counted);
        assert_eq!(flops.training_total, flops.faded_total);
    }

    #[test]
    fn side_weight_flops_scale_with_square() {
        let f = count_flops(&spec(64, 4), false).unwrap();
        assert_eq!(f.side_weight_matmuls * 16, f.backbone_weight_matmuls);
        assert_eq!(f.training_total - f.faded_total, f.side_forward + f.projectors);
        assert!(f.faded_total < f.training_total);
    }
}
