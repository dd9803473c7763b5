use ndarray::{array, Array2, Ix2};

use crate::autodiff::{AutodiffError, Segment, Tape, Tensor};

use super::layers::{BoundEncoderLayer, EncoderLayer};
use super::param::{scalar_param, ConstBinder, Initializer, Param, ParamBinder, ParamKind};
use super::{ArchSpec, ModelError};

/// Width-reduced parallel encoder fed by gated backbone features.
#[derive(Clone, Debug, PartialEq)]
pub struct SideModel {
    pub spec: ArchSpec,
    /// Per-layer fusion gate `α_l` (1×1); the mixing weight is `sigmoid(α_l)`.
    pub gates: Vec<Param>,
    /// Per-layer down-projection `P_l`, `D_B×D_S`.
    pub down: Vec<Param>,
    pub layers: Vec<EncoderLayer>,
    /// `W_S`, `D_S×D_out`.
    pub head: Param,
}

pub fn build_side(spec: &ArchSpec, seed: u64) -> Result<SideModel, ModelError> {
    spec.validate()?;
    Ok(SideModel::build_unchecked(spec, seed))
}

impl SideModel {
    pub(crate) fn build_unchecked(spec: &ArchSpec, seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let ds = spec.side_hidden();
        let mut gates = Vec::with_capacity(spec.layers);
        let mut down = Vec::with_capacity(spec.layers);
        let mut layers = Vec::with_capacity(spec.layers);
        for i in 0..spec.layers {
            gates.push(scalar_param(format!("side.fuse.{i}.gate"), 0.0, ParamKind::Gate));
            down.push(init.weight(format!("side.fuse.{i}.down"), spec.hidden, ds, spec.hidden));
            layers.push(EncoderLayer::new(&mut init, &format!("side.layers.{i}"), ds, spec.mlp_ratio));
        }
        let head = init.weight("side.head.weight", ds, spec.out_dim, ds);
        SideModel { spec: spec.clone(), gates, down, layers, head }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for i in 0..self.layers.len() {
            v.push(&self.gates[i]);
            v.push(&self.down[i]);
            v.extend(self.layers[i].params());
        }
        v.push(&self.head);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for ((g, p), l) in self.gates.iter_mut().zip(self.down.iter_mut()).zip(self.layers.iter_mut()) {
            v.push(g);
            v.push(p);
            v.extend(l.params_mut());
        }
        v.push(&mut self.head);
        v
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut dyn ParamBinder) -> BoundSide {
        BoundSide {
            gates: self.gates.iter().map(|g| binder.bind(tape, g)).collect(),
            down: self.down.iter().map(|p| binder.bind(tape, p)).collect(),
            layers: self.layers.iter().map(|l| l.bind(tape, binder)).collect(),
            head: binder.bind(tape, &self.head),
        }
    }
}

/// `sigmoid(α)` and `1 − sigmoid(α)` as 1×1 tensors, built from a two-way
/// row softmax over `[α, 0]`.
fn gate_weights(tape: &mut Tape, gate: Tensor) -> Result<(Tensor, Tensor), AutodiffError> {
    let spread = tape.input(array![[1.0, 0.0]].into_dyn());
    let pair = tape.matmul(gate, spread)?;
    let weights = tape.softmax_rows(pair)?;
    let pick_first = tape.input(array![[1.0], [0.0]].into_dyn());
    let pick_second = tape.input(array![[0.0], [1.0]].into_dyn());
    let keep = tape.matmul(weights, pick_first)?;
    let rest = tape.matmul(weights, pick_second)?;
    Ok((keep, rest))
}

/// `z_l = P_l( sigmoid(α_l)·b^l + (1 − sigmoid(α_l))·b^L )`.
pub fn fuse_inputs(
    tape: &mut Tape,
    b_l: Tensor,
    b_last: Tensor,
    gate: Tensor,
    proj: Tensor,
) -> Result<Tensor, AutodiffError> {
    let (keep, rest) = gate_weights(tape, gate)?;
    let a = tape.mul(b_l, keep)?;
    let b = tape.mul(b_last, rest)?;
    let mixed = tape.add(a, b)?;
    tape.matmul(mixed, proj)
}

/// Evaluates [`fuse_inputs`] on plain arrays.
pub fn fuse_values(b_l: &Array2<f64>, b_last: &Array2<f64>, alpha: f64, proj: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
    let mut tape = Tape::new();
    let b = tape.input(b_l.clone().into_dyn());
    let last = tape.input(b_last.clone().into_dyn());
    let g = tape.input(array![[alpha]].into_dyn());
    let p = tape.input(proj.clone().into_dyn());
    let z = fuse_inputs(&mut tape, b, last, g, p)?;
    Ok(tape.value(z)?.view().into_dimensionality::<Ix2>().expect("2-D").to_owned())
}

#[derive(Clone, Debug)]
pub struct SideTrace {
    /// `s^1..s^L`, each `N×D_S`.
    pub features: Vec<Tensor>,
    /// `Y^S = GAP(s^L)·W_S`, `1×D_out`.
    pub logits: Tensor,
}

pub struct BoundSide {
    gates: Vec<Tensor>,
    down: Vec<Tensor>,
    layers: Vec<BoundEncoderLayer>,
    head: Tensor,
}

impl BoundSide {
    /// `backbone_feats` must be constants on this tape (detached from the backbone).
    pub fn forward(&self, tape: &mut Tape, backbone_feats: &[Tensor]) -> Result<SideTrace, ModelError> {
        let layers = self.layers.len();
        if backbone_feats.len() != layers {
            return Err(ModelError::MissingFeatures { expected: layers, got: backbone_feats.len() });
        }
        let prev = tape.segment();
        let last = backbone_feats[layers - 1];
        let mut state: Option<Tensor> = None;
        let mut features = Vec::with_capacity(layers);
        for (l, layer) in self.layers.iter().enumerate() {
            tape.set_segment(Segment::Projectors);
            let z = fuse_inputs(tape, backbone_feats[l], last, self.gates[l], self.down[l])?;
            // s^0 = 0, so the first layer sees the fused input alone
            let input = match state {
                Some(s) => tape.add(s, z)?,
                None => z,
            };
            tape.set_segment(Segment::Side);
            let s = layer.forward(tape, input)?;
            features.push(s);
            state = Some(s);
        }
        tape.set_segment(Segment::Heads);
        let pooled = tape.gap(state.expect("at least one layer"))?;
        let logits = tape.matmul(pooled, self.head)?;
        tape.set_segment(prev);
        Ok(SideTrace { features, logits })
    }
}

/// Materialized side-network outputs for one example given its backbone features.
pub fn side_forward(side: &SideModel, backbone_feats: &[Array2<f64>]) -> Result<(Vec<Array2<f64>>, Vec<f64>), ModelError> {
    let mut tape = Tape::new();
    let bound = side.bind(&mut tape, &mut ConstBinder);
    let feats: Vec<Tensor> = backbone_feats.iter().map(|f| tape.input(f.clone().into_dyn())).collect();
    let trace = bound.forward(&mut tape, &feats)?;
    let to2 = |t: Tensor, tape: &Tape| -> Result<Array2<f64>, ModelError> {
        Ok(tape.value(t)?.view().into_dimensionality::<Ix2>().expect("2-D").to_owned())
    };
    let features = trace.features.iter().map(|&f| to2(f, &tape)).collect::<Result<Vec<_>, _>>()?;
    let logits = to2(trace.logits, &tape)?.row(0).to_vec();
    Ok((features, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::{backbone_forward, build_backbone};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn saturated_gate_selects_layer_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, last, p) = (rand2(&mut rng, 5, 8), rand2(&mut rng, 5, 8), rand2(&mut rng, 8, 4));
        let z = fuse_values(&b, &last, 20.0, &p).unwrap();
        let expect = b.dot(&p);
        for (a, e) in z.iter().zip(expect.iter()) {
            assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn zero_gate_mixes_equally() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, last, p) = (rand2(&mut rng, 5, 8), rand2(&mut rng, 5, 8), rand2(&mut rng, 8, 4));
        let z = fuse_values(&b, &last, 0.0, &p).unwrap();
        let expect = (&b * 0.5 + &last * 0.5).dot(&p);
        for (a, e) in z.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_inputs_ignore_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, p) = (rand2(&mut rng, 5, 8), rand2(&mut rng, 8, 4));
        for alpha in [-3.0, 0.0, 0.7, 12.0] {
            let z = fuse_values(&b, &b, alpha, &p).unwrap();
            for (a, e) in z.iter().zip(b.dot(&p).iter()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn side_shapes_and_reduction() {
        let spec = ArchSpec { layers: 4, tokens: 16, hidden: 64, reduction: 2, input_dim: 8, out_dim: 4, mlp_ratio: 2 };
        let bb = build_backbone(&spec, 1).unwrap();
        let side = build_side(&spec, 2).unwrap();
        let x = ndarray::Array3::from_elem((1, 16, 8), 0.3);
        let out = backbone_forward(&bb, &x).unwrap();
        let (feats, logits) = side_forward(&side, &out[0].features).unwrap();
        assert_eq!(feats.len(), 4);
        for f in &feats {
            assert_eq!(f.dim(), (16, 32));
        }
        assert_eq!(logits.len(), 4);
        for (bl, sl) in bb.layers.iter().zip(&side.layers) {
            assert_eq!(sl.matmul_weight_count() * 4, bl.matmul_weight_count());
        }
    }

    #[test]
    fn missing_features_are_rejected() {
        let spec = ArchSpec::default();
        let side = build_side(&spec, 2).unwrap();
        let f = vec![Array2::<f64>::zeros((spec.tokens, spec.hidden)); spec.layers - 1];
        assert!(matches!(side_forward(&side, &f), Err(ModelError::MissingFeatures { .. })));
    }

    #[test]
    fn single_layer_sees_fused_last_feature() {
        let spec = ArchSpec { layers: 1, tokens: 4, hidden: 8, reduction: 2, input_dim: 3, out_dim: 2, mlp_ratio: 2 };
        let side = SideModel::build_unchecked(&spec, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b1 = rand2(&mut rng, 4, 8);
        let (feats, _) = side_forward(&side, std::slice::from_ref(&b1)).unwrap();
        let p = side.down[0].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let z = fuse_values(&b1, &b1, 0.0, &p).unwrap();
        let mut tape = Tape::new();
        let bound = side.layers[0].bind(&mut tape, &mut ConstBinder);
        let zt = tape.input(z.into_dyn());
        let s = bound.forward(&mut tape, zt).unwrap();
        assert_eq!(tape.value(s).unwrap(), &feats[0].clone().into_dyn());
    }

    #[test]
    fn residual_only_side_accumulates_fused_projections() {
        let spec = ArchSpec { layers: 3, tokens: 4, hidden: 8, reduction: 2, input_dim: 3, out_dim: 2, mlp_ratio: 2 };
        let mut side = SideModel::build_unchecked(&spec, 6);
        for layer in &mut side.layers {
            for p in layer.params_mut() {
                if !p.kind.is_norm() {
                    p.value.fill(0.0);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats: Vec<Array2<f64>> = (0..3).map(|_| rand2(&mut rng, 4, 8)).collect();
        let (s, _) = side_forward(&side, &feats).unwrap();
        let mut acc = Array2::<f64>::zeros((4, 4));
        for l in 0..3 {
            let p = side.down[l].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            acc = acc + fuse_values(&feats[l], &feats[2], 0.0, &p).unwrap();
            for (a, e) in s[l].iter().zip(acc.iter()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
