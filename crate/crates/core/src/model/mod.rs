//! Frame encoder, tracklet aggregator, identity and camera classifiers, and
//! the gradient reversal layer between the encoder and the camera branch.

mod checkpoint;

use rand::Rng;

use crate::diffcore::{ksum, softmax, NodeId, ParamId, Primitive, Tape, Tensor2};
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

/// Fully connected layer, `y = x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`
    pub weight: Tensor2,
    /// `1 × fan_out`
    pub bias: Tensor2,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor2::zeros(fan_in, fan_out),
            bias: Tensor2::zeros(1, fan_out),
        }
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        Self {
            weight: Tensor2::from_fn(fan_in, fan_out, |_, _| draw()),
            bias: Tensor2::from_fn(1, fan_out, |_, _| draw()),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

/// Frame encoder `f`: dense layers with `tanh` between them. The last layer is
/// linear, so a single layer is an affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                Dense::init(d_in, d_hidden, rng),
                Dense::init(d_hidden, d_out, rng),
            ],
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    /// Output width, `F`.
    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, Dense::fan_out)
    }

    /// Encodes every row of `frames`.
    pub fn encode_frames(&self, frames: &Tensor2) -> Result<Tensor2> {
        if frames.cols() != self.d_in() {
            return Err(Error::shape("encode_frames", self.d_in(), frames.cols()));
        }
        let mut h = frames.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if k + 1 < self.layers.len() {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }

    pub fn encode_frame(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encode_frame input"));
        }
        let row = Tensor2::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.encode_frames(&row)?.into_data())
    }
}

/// Identity head `θ_I`: `F × N_I` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityClassifier {
    pub head: Dense,
}

impl IdentityClassifier {
    pub fn n_classes(&self) -> usize {
        self.head.fan_out()
    }

    pub fn logits(&self, reps: &Tensor2) -> Result<Tensor2> {
        self.head.forward(reps)
    }
}

/// Camera head `θ_c`, reached through the gradient reversal layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraClassifier {
    pub head: Dense,
    pub grl_scale: f64,
}

impl CameraClassifier {
    pub fn n_cameras(&self) -> usize {
        self.head.fan_out()
    }

    pub fn scores(&self, reps: &Tensor2) -> Result<Tensor2> {
        self.head.forward(reps)
    }

    /// Softmax over camera scores for one representation.
    pub fn camera_probs(&self, g: &[f64]) -> Result<Vec<f64>> {
        let row = Tensor2::from_vec(1, g.len(), g.to_vec())?;
        softmax(self.scores(&row)?.data())
    }
}

/// Mean of frame encodings.
pub fn aggregate<V: AsRef<[f64]>>(frames: &[V]) -> Result<Vec<f64>> {
    let first = frames.first().ok_or(Error::EmptyTracklet)?.as_ref();
    let dim = first.len();
    if let Some(bad) = frames.iter().find(|f| f.as_ref().len() != dim) {
        return Err(Error::shape("aggregate", dim, bad.as_ref().len()));
    }
    let n = frames.len() as f64;
    Ok((0..dim)
        .map(|j| ksum(frames.iter().map(|f| f.as_ref()[j])) / n)
        .collect())
}

/// Gradient reversal: identity forward, `-scale · grad` backward.
#[derive(Debug, Clone, Copy)]
pub struct GradReverse {
    pub scale: f64,
}

impl Primitive for GradReverse {
    fn name(&self) -> &'static str {
        "grad_reverse"
    }

    fn forward(&self, inputs: &[&Tensor2]) -> Result<Tensor2> {
        Ok(inputs[0].clone())
    }

    fn backward(&self, _: &[&Tensor2], _: &Tensor2, g: &Tensor2) -> Vec<Option<Tensor2>> {
        vec![Some(g.scale(-self.scale))]
    }
}

pub fn grl_forward(g: &[f64]) -> Vec<f64> {
    g.to_vec()
}

pub fn grl_backward(grad: &[f64], scale: f64) -> Vec<f64> {
    grad.iter().map(|v| -scale * v).collect()
}

/// Dimensions of a freshly initialised model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub n_identities: usize,
    pub n_cameras: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_hidden: 32,
            d_out: 16,
            n_identities: 32,
            n_cameras: 3,
        }
    }
}

/// Everything trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub identity: IdentityClassifier,
    pub camera: CameraClassifier,
}

/// Node handles for one model bound into a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub identity: (NodeId, NodeId),
    pub camera: (NodeId, NodeId),
    pub grl_scale: f64,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.n_cameras < 2 {
            return Err(Error::BadConfig(
                "camera classifier needs at least 2 cameras".into(),
            ));
        }
        if dims.n_identities == 0 || dims.d_in == 0 || dims.d_hidden == 0 || dims.d_out == 0 {
            return Err(Error::BadConfig(format!(
                "degenerate model dimensions {dims:?}"
            )));
        }
        let encoder = EncoderParams::init(dims.d_in, dims.d_hidden, dims.d_out, rng);
        let identity = IdentityClassifier {
            head: Dense::init(dims.d_out, dims.n_identities, rng),
        };
        let camera = CameraClassifier {
            head: Dense::init(dims.d_out, dims.n_cameras, rng),
            grl_scale: 1.0,
        };
        Ok(Self {
            encoder,
            identity,
            camera,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.d_out()
    }

    /// Parameters in [`ParamId`] order: encoder layers (weight, bias), then
    /// the identity head, then the camera head.
    pub fn params(&self) -> Vec<&Tensor2> {
        let mut out = Vec::new();
        for l in &self.encoder.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([
            &self.identity.head.weight,
            &self.identity.head.bias,
            &self.camera.head.weight,
            &self.camera.head.bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([
            &mut self.identity.head.weight,
            &mut self.identity.head.bias,
            &mut self.camera.head.weight,
            &mut self.camera.head.bias,
        ]);
        out
    }

    pub fn identity_param_ids(&self) -> [ParamId; 2] {
        let base = 2 * self.encoder.layers.len();
        [ParamId(base), ParamId(base + 1)]
    }

    pub fn camera_param_ids(&self) -> [ParamId; 2] {
        let base = 2 * self.encoder.layers.len() + 2;
        [ParamId(base), ParamId(base + 1)]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut id = 0;
        let mut next = |tape: &mut Tape, t: &Tensor2| {
            let node = tape.param(ParamId(id), t.clone());
            id += 1;
            node
        };
        let encoder = self
            .encoder
            .layers
            .iter()
            .map(|l| (next(tape, &l.weight), next(tape, &l.bias)))
            .collect();
        let identity = (
            next(tape, &self.identity.head.weight),
            next(tape, &self.identity.head.bias),
        );
        let camera = (
            next(tape, &self.camera.head.weight),
            next(tape, &self.camera.head.bias),
        );
        BoundModel {
            encoder,
            identity,
            camera,
            grl_scale: self.camera.grl_scale,
        }
    }

    /// Tracklet (or clip) representations, one per input sample.
    pub fn represent<V: AsRef<[f64]>>(&self, frames: &[V]) -> Result<Vec<f64>> {
        let x = Tensor2::from_rows(frames)?;
        if x.rows() == 0 {
            return Err(Error::EmptyTracklet);
        }
        let enc = self.encoder.encode_frames(&x)?;
        aggregate(&enc.row_iter().collect::<Vec<_>>())
    }
}

impl BoundModel {
    /// Encodes `frames` (rows grouped in consecutive blocks of
    /// `frames_per_sample`) and mean-pools each block.
    pub fn represent(
        &self,
        tape: &mut Tape,
        frames: NodeId,
        frames_per_sample: usize,
    ) -> Result<NodeId> {
        let mut h = frames;
        for (k, &(w, b)) in self.encoder.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if k + 1 < self.encoder.len() {
                h = tape.tanh(h)?;
            }
        }
        tape.mean_groups(h, frames_per_sample)
    }

    pub fn identity_logits(&self, tape: &mut Tape, reps: NodeId) -> Result<NodeId> {
        let z = tape.matmul(reps, self.identity.0)?;
        tape.add_bias(z, self.identity.1)
    }

    /// Camera scores behind the gradient reversal layer.
    pub fn camera_scores(&self, tape: &mut Tape, reps: NodeId) -> Result<NodeId> {
        let r = tape.apply(
            GradReverse {
                scale: self.grl_scale,
            },
            &[reps],
        )?;
        self.camera_scores_no_grl(tape, r)
    }

    pub fn camera_scores_no_grl(&self, tape: &mut Tape, reps: NodeId) -> Result<NodeId> {
        let z = tape.matmul(reps, self.camera.0)?;
        tape.add_bias(z, self.camera.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_encoder_outputs_zero() {
        let enc = EncoderParams {
            layers: vec![Dense::zeros(4, 8), Dense::zeros(8, 3)],
        };
        assert_eq!(
            enc.encode_frame(&[1.0, -2.0, 3.0, 0.5]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn identity_single_layer_passes_through() {
        let enc = EncoderParams {
            layers: vec![Dense {
                weight: Tensor2::identity(3),
                bias: Tensor2::zeros(1, 3),
            }],
        };
        let x = [0.5, 1.5, 2.0];
        assert_eq!(enc.encode_frame(&x).unwrap(), x.to_vec());
        assert!(matches!(
            enc.encode_frame(&[1.0, 2.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, -1.0];
        assert_eq!(aggregate(&[a.clone()]).unwrap(), a);
        assert_eq!(aggregate(&[a.clone(), a.clone()]).unwrap(), a);
        assert_eq!(
            aggregate(&[a.clone(), b.clone()]).unwrap(),
            aggregate(&[b, a]).unwrap()
        );
        assert!(matches!(
            aggregate::<Vec<f64>>(&[]),
            Err(Error::EmptyTracklet)
        ));
    }

    #[test]
    fn grl_examples() {
        assert_eq!(grl_forward(&[1.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(grl_backward(&[1.0, 1.0], 1.0), vec![-1.0, -1.0]);
    }

    #[test]
    fn uniform_camera_probs_with_zero_params() {
        for n in [2, 4] {
            let cam = CameraClassifier {
                head: Dense::zeros(5, n),
                grl_scale: 1.0,
            };
            let p = cam.camera_probs(&[0.3, 1.0, -2.0, 0.0, 4.0]).unwrap();
            for v in p {
                assert!((v - 1.0 / n as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(ModelDims::default(), &mut rng).unwrap();
        let bound = 1.0 / 16f64.sqrt();
        assert!(m.encoder.layers[0].weight.max_abs() <= bound);
        assert_eq!(m.params().len(), 8);
        assert_eq!(m.identity_param_ids(), [ParamId(4), ParamId(5)]);
        assert_eq!(m.camera_param_ids(), [ParamId(6), ParamId(7)]);
        let dims = ModelDims {
            n_cameras: 1,
            ..ModelDims::default()
        };
        assert!(Model::init(dims, &mut rng).is_err());
    }

    #[test]
    fn tape_representation_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = ModelDims {
            d_in: 4,
            d_hidden: 5,
            d_out: 3,
            n_identities: 2,
            n_cameras: 2,
        };
        let m = Model::init(dims, &mut rng).unwrap();
        let frames: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let x = tape.constant(Tensor2::from_rows(&frames).unwrap());
        let reps = bound.represent(&mut tape, x, 3).unwrap();
        for s in 0..2 {
            let plain = m.represent(&frames[3 * s..3 * s + 3]).unwrap();
            for (a, b) in plain.iter().zip(tape.value(reps).row(s)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
