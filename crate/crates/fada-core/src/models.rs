//! Network definitions: the shared embedding `g`, the softmax predictor `h`,
//! the four-way domain-class discriminator, and a fully connected embedding
//! variant for precomputed feature vectors.
//!
//! One embedding instance serves both domains (weight sharing). Activations
//! are ReLU throughout, including after the final embedding layer.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{IMAGE_SIDE, NUM_CLASSES};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tape, Tensor, Var};

pub const EMBED_DIM: usize = 84;
pub const DCD_HIDDEN: usize = 64;

/// Uniform init with bound `sqrt(6 / (fan_in + fan_out))`; draws are made in
/// f64 and cast, so every precision sees identical values.
fn glorot_uniform<E: Scalar>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64(rng.random_range(-bound..bound)))
}

// ---------------------------------------------------------------------------
// Convolutional embedding g
// ---------------------------------------------------------------------------

/// Two 5x5 conv layers (6 then 16 filters) with 2x2 max pooling, then fully
/// connected 16 -> 120 -> 84. On 16x16 inputs the spatial chain is
/// 16 -> 12 -> 6 -> 2 -> 1, flattening to 16 features.
#[derive(Clone, Debug)]
pub struct EmbeddingNet<E> {
    pub conv1_k: Parameter<E>,
    pub conv1_b: Parameter<E>,
    pub conv2_k: Parameter<E>,
    pub conv2_b: Parameter<E>,
    pub fc1_w: Parameter<E>,
    pub fc1_b: Parameter<E>,
    pub fc2_w: Parameter<E>,
    pub fc2_b: Parameter<E>,
}

pub struct BoundEmbedding {
    vars: [Var; 8],
}

impl<E: Scalar> EmbeddingNet<E> {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "embedding"));
        EmbeddingNet {
            conv1_k: Parameter::new("g.conv1.k", glorot_uniform(vec![6, 1, 5, 5], 25, 150, &mut rng)),
            conv1_b: Parameter::new("g.conv1.b", Tensor::zeros(vec![6])),
            conv2_k: Parameter::new("g.conv2.k", glorot_uniform(vec![16, 6, 5, 5], 150, 400, &mut rng)),
            conv2_b: Parameter::new("g.conv2.b", Tensor::zeros(vec![16])),
            fc1_w: Parameter::new("g.fc1.w", glorot_uniform(vec![16, 120], 16, 120, &mut rng)),
            fc1_b: Parameter::new("g.fc1.b", Tensor::zeros(vec![120])),
            fc2_w: Parameter::new("g.fc2.w", glorot_uniform(vec![120, 84], 120, 84, &mut rng)),
            fc2_b: Parameter::new("g.fc2.b", Tensor::zeros(vec![84])),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        vec![
            &self.conv1_k, &self.conv1_b, &self.conv2_k, &self.conv2_b,
            &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![
            &mut self.conv1_k, &mut self.conv1_b, &mut self.conv2_k, &mut self.conv2_b,
            &mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b,
        ]
    }

    /// Trainable scalar count per layer: conv1 156, conv2 2416, fc1 2040,
    /// fc2 10164.
    pub fn param_counts(&self) -> [usize; 4] {
        [
            self.conv1_k.value().numel() + self.conv1_b.value().numel(),
            self.conv2_k.value().numel() + self.conv2_b.value().numel(),
            self.fc1_w.value().numel() + self.fc1_b.value().numel(),
            self.fc2_w.value().numel() + self.fc2_b.value().numel(),
        ]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> BoundEmbedding {
        BoundEmbedding {
            vars: [
                tape.param(&self.conv1_k),
                tape.param(&self.conv1_b),
                tape.param(&self.conv2_k),
                tape.param(&self.conv2_b),
                tape.param(&self.fc1_w),
                tape.param(&self.fc1_b),
                tape.param(&self.fc2_w),
                tape.param(&self.fc2_b),
            ],
        }
    }

    pub fn write_grads(&mut self, tape: &Tape<E>, bound: &BoundEmbedding) {
        for (p, v) in self.params_mut().into_iter().zip(bound.vars) {
            p.set_grad(tape.grad_of(v));
        }
    }
}

impl BoundEmbedding {
    /// `images [B,1,16,16] -> embeddings [B,84]`
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, images: Var) -> Result<Var> {
        let shape = tape.value_of(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != IMAGE_SIDE || shape[3] != IMAGE_SIDE {
            return Err(Error::shape(
                "embed",
                format!("expected [B,1,{0},{0}] images, got {shape:?}", IMAGE_SIDE),
            ));
        }
        let [k1, b1, k2, b2, w1, c1, w2, c2] = self.vars;
        let x = tape.conv2d(images, k1, b1)?;
        let x = tape.relu(x);
        let x = tape.maxpool2(x)?;
        let x = tape.conv2d(x, k2, b2)?;
        let x = tape.relu(x);
        let x = tape.maxpool2(x)?;
        let b = tape.value_of(x).shape()[0];
        let x = tape.reshape(x, vec![b, 16])?;
        let x = tape.linear(x, w1, c1)?;
        let x = tape.relu(x);
        let x = tape.linear(x, w2, c2)?;
        Ok(tape.relu(x))
    }
}

// ---------------------------------------------------------------------------
// Fully connected embedding for vector data
// ---------------------------------------------------------------------------

/// Two ReLU layers `d -> h1 -> h2` over precomputed feature vectors.
#[derive(Clone, Debug)]
pub struct VectorEmbeddingNet<E> {
    pub fc1_w: Parameter<E>,
    pub fc1_b: Parameter<E>,
    pub fc2_w: Parameter<E>,
    pub fc2_b: Parameter<E>,
}

pub struct BoundVectorEmbedding {
    vars: [Var; 4],
}

impl<E: Scalar> VectorEmbeddingNet<E> {
    pub fn init(seed: u64, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "vector-embedding"));
        VectorEmbeddingNet {
            fc1_w: Parameter::new("g.fc1.w", glorot_uniform(vec![in_dim, hidden], in_dim, hidden, &mut rng)),
            fc1_b: Parameter::new("g.fc1.b", Tensor::zeros(vec![hidden])),
            fc2_w: Parameter::new("g.fc2.w", glorot_uniform(vec![hidden, out_dim], hidden, out_dim, &mut rng)),
            fc2_b: Parameter::new("g.fc2.b", Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1_w.value().shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.fc1_w.value().shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.fc2_w.value().shape()[1]
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        vec![&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> BoundVectorEmbedding {
        BoundVectorEmbedding {
            vars: [
                tape.param(&self.fc1_w),
                tape.param(&self.fc1_b),
                tape.param(&self.fc2_w),
                tape.param(&self.fc2_b),
            ],
        }
    }

    pub fn write_grads(&mut self, tape: &Tape<E>, bound: &BoundVectorEmbedding) {
        for (p, v) in self.params_mut().into_iter().zip(bound.vars) {
            p.set_grad(tape.grad_of(v));
        }
    }
}

impl BoundVectorEmbedding {
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, features: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.vars;
        let x = tape.linear(features, w1, b1)?;
        let x = tape.relu(x);
        let x = tape.linear(x, w2, b2)?;
        Ok(tape.relu(x))
    }
}

// ---------------------------------------------------------------------------
// Either embedding behind one handle
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum Encoder<E> {
    Conv(EmbeddingNet<E>),
    Vector(VectorEmbeddingNet<E>),
}

pub enum BoundEncoder {
    Conv(BoundEmbedding),
    Vector(BoundVectorEmbedding),
}

impl<E: Scalar> Encoder<E> {
    pub fn out_dim(&self) -> usize {
        match self {
            Encoder::Conv(_) => EMBED_DIM,
            Encoder::Vector(v) => v.out_dim(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> BoundEncoder {
        match self {
            Encoder::Conv(g) => BoundEncoder::Conv(g.bind(tape)),
            Encoder::Vector(g) => BoundEncoder::Vector(g.bind(tape)),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        match self {
            Encoder::Conv(g) => g.params(),
            Encoder::Vector(g) => g.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        match self {
            Encoder::Conv(g) => g.params_mut(),
            Encoder::Vector(g) => g.params_mut(),
        }
    }

    pub fn write_grads(&mut self, tape: &Tape<E>, bound: &BoundEncoder) {
        match (self, bound) {
            (Encoder::Conv(g), BoundEncoder::Conv(b)) => g.write_grads(tape, b),
            (Encoder::Vector(g), BoundEncoder::Vector(b)) => g.write_grads(tape, b),
            _ => unreachable!("bound encoder kind mismatch"),
        }
    }
}

impl BoundEncoder {
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, batch: Var) -> Result<Var> {
        match self {
            BoundEncoder::Conv(g) => g.forward(tape, batch),
            BoundEncoder::Vector(g) => g.forward(tape, batch),
        }
    }
}

// ---------------------------------------------------------------------------
// Predictor h
// ---------------------------------------------------------------------------

/// One fully connected layer with softmax output.
#[derive(Clone, Debug)]
pub struct PredictorHead<E> {
    pub w: Parameter<E>,
    pub b: Parameter<E>,
}

pub struct BoundPredictor {
    w: Var,
    b: Var,
}

impl<E: Scalar> PredictorHead<E> {
    pub fn init(seed: u64, in_dim: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "predictor"));
        PredictorHead {
            w: Parameter::new("h.w", glorot_uniform(vec![in_dim, classes], in_dim, classes, &mut rng)),
            b: Parameter::new("h.b", Tensor::zeros(vec![classes])),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.value().shape()[1]
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> BoundPredictor {
        BoundPredictor { w: tape.param(&self.w), b: tape.param(&self.b) }
    }

    pub fn write_grads(&mut self, tape: &Tape<E>, bound: &BoundPredictor) {
        self.w.set_grad(tape.grad_of(bound.w));
        self.b.set_grad(tape.grad_of(bound.b));
    }
}

impl BoundPredictor {
    /// `embeddings [B,d] -> class distribution [B,K]` (softmax rows).
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, z: Var) -> Result<Var> {
        let logits = tape.linear(z, self.w, self.b)?;
        tape.softmax(logits)
    }
}

// ---------------------------------------------------------------------------
// Domain-class discriminator
// ---------------------------------------------------------------------------

/// Two fully connected layers (hidden 64, output 4) over concatenated pair
/// embeddings; input width is exactly twice the embedding width.
#[derive(Clone, Debug)]
pub struct DomainClassDiscriminator<E> {
    pub fc1_w: Parameter<E>,
    pub fc1_b: Parameter<E>,
    pub fc2_w: Parameter<E>,
    pub fc2_b: Parameter<E>,
}

pub struct BoundDcd {
    vars: [Var; 4],
}

impl<E: Scalar> DomainClassDiscriminator<E> {
    pub fn init(seed: u64, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dcd"));
        let in_dim = 2 * embed_dim;
        DomainClassDiscriminator {
            fc1_w: Parameter::new("dcd.fc1.w", glorot_uniform(vec![in_dim, DCD_HIDDEN], in_dim, DCD_HIDDEN, &mut rng)),
            fc1_b: Parameter::new("dcd.fc1.b", Tensor::zeros(vec![DCD_HIDDEN])),
            fc2_w: Parameter::new("dcd.fc2.w", glorot_uniform(vec![DCD_HIDDEN, 4], DCD_HIDDEN, 4, &mut rng)),
            fc2_b: Parameter::new("dcd.fc2.b", Tensor::zeros(vec![4])),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.fc1_w.value().shape()[0] / 2
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        vec![&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> BoundDcd {
        BoundDcd {
            vars: [
                tape.param(&self.fc1_w),
                tape.param(&self.fc1_b),
                tape.param(&self.fc2_w),
                tape.param(&self.fc2_b),
            ],
        }
    }

    pub fn write_grads(&mut self, tape: &Tape<E>, bound: &BoundDcd) {
        for (p, v) in self.params_mut().into_iter().zip(bound.vars) {
            p.set_grad(tape.grad_of(v));
        }
    }
}

impl BoundDcd {
    /// Group distribution for pairs: slot-one embeddings `za`, slot-two
    /// embeddings `zb`, concatenated in that order.
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, za: Var, zb: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.vars;
        let phi = tape.concat(za, zb)?;
        let x = tape.linear(phi, w1, b1)?;
        let x = tape.relu(x);
        let logits = tape.linear(x, w2, b2)?;
        tape.softmax(logits)
    }
}

// ---------------------------------------------------------------------------
// Binary domain head for the adversarial UDA baseline
// ---------------------------------------------------------------------------

/// Fully connected `d -> 64 -> 2` softmax head over single embeddings.
#[derive(Clone, Debug)]
pub struct BinaryDomainHead<E> {
    pub fc1_w: Parameter<E>,
    pub fc1_b: Parameter<E>,
    pub fc2_w: Parameter<E>,
    pub fc2_b: Parameter<E>,
}

pub struct BoundBinaryHead {
    vars: [Var; 4],
}

impl<E: Scalar> BinaryDomainHead<E> {
    pub fn init(seed: u64, embed_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "binary-domain"));
        BinaryDomainHead {
            fc1_w: Parameter::new("dbin.fc1.w", glorot_uniform(vec![embed_dim, DCD_HIDDEN], embed_dim, DCD_HIDDEN, &mut rng)),
            fc1_b: Parameter::new("dbin.fc1.b", Tensor::zeros(vec![DCD_HIDDEN])),
            fc2_w: Parameter::new("dbin.fc2.w", glorot_uniform(vec![DCD_HIDDEN, 2], DCD_HIDDEN, 2, &mut rng)),
            fc2_b: Parameter::new("dbin.fc2.b", Tensor::zeros(vec![2])),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        vec![&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> BoundBinaryHead {
        BoundBinaryHead {
            vars: [
                tape.param(&self.fc1_w),
                tape.param(&self.fc1_b),
                tape.param(&self.fc2_w),
                tape.param(&self.fc2_b),
            ],
        }
    }

    pub fn write_grads(&mut self, tape: &Tape<E>, bound: &BoundBinaryHead) {
        for (p, v) in self.params_mut().into_iter().zip(bound.vars) {
            p.set_grad(tape.grad_of(v));
        }
    }
}

impl BoundBinaryHead {
    pub fn forward<E: Scalar>(&self, tape: &mut Tape<E>, z: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.vars;
        let x = tape.linear(z, w1, b1)?;
        let x = tape.relu(x);
        let logits = tape.linear(x, w2, b2)?;
        tape.softmax(logits)
    }
}

// ---------------------------------------------------------------------------
// Bundle and checkpoints
// ---------------------------------------------------------------------------

pub const DIGIT_ARCH: &str = "conv16x16-6-16-120-84";

/// Embedding, predictor, and discriminator travelling together.
#[derive(Clone, Debug)]
pub struct ModelBundle<E> {
    pub encoder: Encoder<E>,
    pub predictor: PredictorHead<E>,
    pub dcd: DomainClassDiscriminator<E>,
    pub arch: String,
    pub seed: u64,
}

/// Fresh digit-architecture models, deterministically seeded.
pub fn init_models<E: Scalar>(seed: u64) -> ModelBundle<E> {
    ModelBundle {
        encoder: Encoder::Conv(EmbeddingNet::init(seed)),
        predictor: PredictorHead::init(seed, EMBED_DIM, NUM_CLASSES),
        dcd: DomainClassDiscriminator::init(seed, EMBED_DIM),
        arch: DIGIT_ARCH.to_string(),
        seed,
    }
}

/// Fresh vector-mode models for `in_dim` features.
pub fn init_vector_models<E: Scalar>(
    seed: u64,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    classes: usize,
) -> ModelBundle<E> {
    ModelBundle {
        encoder: Encoder::Vector(VectorEmbeddingNet::init(seed, in_dim, hidden, out_dim)),
        predictor: PredictorHead::init(seed, out_dim, classes),
        dcd: DomainClassDiscriminator::init(seed, out_dim),
        arch: format!("vector-{in_dim}-{hidden}-{out_dim}-{classes}"),
        seed,
    }
}

impl<E: Scalar> ModelBundle<E> {
    pub fn all_params(&self) -> Vec<&Parameter<E>> {
        let mut p = self.encoder.params();
        p.extend(self.predictor.params());
        p.extend(self.dcd.params());
        p
    }

    fn all_params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.predictor.params_mut());
        p.extend(self.dcd.params_mut());
        p
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FADC";
const CHECKPOINT_VERSION: u8 = 0x01;

fn write_str(out: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    out.write_all(&(bytes.len() as u16).to_le_bytes())?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_str(input: &mut impl Read) -> Result<String> {
    let mut len = [0u8; 2];
    input.read_exact(&mut len)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf8: {e}")))
}

impl ModelBundle<f32> {
    /// Writes every named parameter tensor plus a manifest (architecture id,
    /// init seed, stage tag).
    pub fn save_checkpoint(&self, path: &Path, stage: &str) -> Result<()> {
        let mut out = Vec::new();
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&[CHECKPOINT_VERSION])?;
        write_str(&mut out, &self.arch)?;
        write_str(&mut out, stage)?;
        out.write_all(&self.seed.to_le_bytes())?;
        let params = self.all_params();
        out.write_all(&(params.len() as u32).to_le_bytes())?;
        for p in params {
            write_str(&mut out, p.name())?;
            let shape = p.value().shape();
            out.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.value().data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Restores a checkpoint, returning the bundle and its stage tag.
    pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle<f32>, String)> {
        let bytes = std::fs::read(path)?;
        let input = &mut bytes.as_slice();
        let mut head = [0u8; 5];
        input.read_exact(&mut head)?;
        if &head[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", &head[0..4])));
        }
        if head[4] != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", head[4])));
        }
        let arch = read_str(input)?;
        let stage = read_str(input)?;
        let mut seed_bytes = [0u8; 8];
        input.read_exact(&mut seed_bytes)?;
        let seed = u64::from_le_bytes(seed_bytes);

        let mut bundle: ModelBundle<f32> = if arch == DIGIT_ARCH {
            init_models(seed)
        } else if let Some(rest) = arch.strip_prefix("vector-") {
            let dims: Vec<usize> = rest
                .split('-')
                .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad arch id {arch}"))))
                .collect::<Result<_>>()?;
            if dims.len() != 4 {
                return Err(Error::Checkpoint(format!("bad arch id {arch}")));
            }
            init_vector_models(seed, dims[0], dims[1], dims[2], dims[3])
        } else {
            return Err(Error::Checkpoint(format!("unknown architecture {arch}")));
        };

        let mut count_bytes = [0u8; 4];
        input.read_exact(&mut count_bytes)?;
        let count = u32::from_le_bytes(count_bytes) as usize;
        let mut params = bundle.all_params_mut();
        if count != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, architecture needs {}",
                params.len()
            )));
        }
        for _ in 0..count {
            let name = read_str(input)?;
            let mut nd = [0u8; 4];
            input.read_exact(&mut nd)?;
            let ndim = u32::from_le_bytes(nd) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut d = [0u8; 4];
                input.read_exact(&mut d)?;
                shape.push(u32::from_le_bytes(d) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            input.read_exact(&mut raw)?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let p = params
                .iter_mut()
                .find(|p| p.name() == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if p.value().shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} vs expected {:?}",
                    shape,
                    p.value().shape()
                )));
            }
            p.value_mut().data_mut().copy_from_slice(&data);
        }
        Ok((bundle, stage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params_checksum;

    fn zero_params<E: Scalar>(params: Vec<&mut Parameter<E>>) {
        for p in params {
            for v in p.value_mut().data_mut() {
                *v = E::zero();
            }
        }
    }

    #[test]
    fn layer_param_counts_match_architecture() {
        let g: EmbeddingNet<f32> = EmbeddingNet::init(0);
        assert_eq!(g.param_counts(), [156, 2416, 2040, 10164]);
        assert_eq!(g.param_counts().iter().sum::<usize>(), 14776);
    }

    #[test]
    fn embed_maps_batch_to_84() {
        let g: EmbeddingNet<f32> = EmbeddingNet::init(3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![5, 1, 16, 16], |i| ((i % 256) as f32) / 255.0));
        let bound = g.bind(&mut tape);
        let z = bound.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value_of(z).shape(), &[5, EMBED_DIM]);
        assert!(tape.value_of(z).all_finite());
    }

    #[test]
    fn embed_rejects_wrong_input_shape() {
        let g: EmbeddingNet<f32> = EmbeddingNet::init(3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 1, 28, 28]));
        let bound = g.bind(&mut tape);
        assert!(bound.forward(&mut tape, x).is_err());
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        // biases start at zero, so a zero image stays zero through every layer
        let g: EmbeddingNet<f32> = EmbeddingNet::init(11);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 1, 16, 16]));
        let bound = g.bind(&mut tape);
        let z = bound.forward(&mut tape, x).unwrap();
        assert!(tape.value_of(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_bit_deterministic_across_runs() {
        let run = || {
            let g: EmbeddingNet<f32> = EmbeddingNet::init(42);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_fn(vec![3, 1, 16, 16], |i| ((i * 7 % 256) as f32) / 255.0));
            let bound = g.bind(&mut tape);
            let z = bound.forward(&mut tape, x).unwrap();
            tape.value_of(z).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn predictor_uniform_at_zero_weights() {
        let mut h: PredictorHead<f32> = PredictorHead::init(0, EMBED_DIM, NUM_CLASSES);
        zero_params(h.params_mut());
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_fn(vec![3, EMBED_DIM], |i| (i as f32).cos()));
        let bound = h.bind(&mut tape);
        let p = bound.forward(&mut tape, z).unwrap();
        for &v in tape.value_of(p).data() {
            assert!((v - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn predictor_rows_are_distributions() {
        let h: PredictorHead<f32> = PredictorHead::init(2, EMBED_DIM, NUM_CLASSES);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_fn(vec![4, EMBED_DIM], |i| (i as f32 * 0.1).sin().abs()));
        let bound = h.bind(&mut tape);
        let p = bound.forward(&mut tape, z).unwrap();
        let v = tape.value_of(p);
        for r in 0..4 {
            let s: f32 = v.data()[r * 10..(r + 1) * 10].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn predictor_rejects_wrong_width() {
        let h: PredictorHead<f32> = PredictorHead::init(2, EMBED_DIM, NUM_CLASSES);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(vec![4, 50]));
        let bound = h.bind(&mut tape);
        assert!(bound.forward(&mut tape, z).is_err());
    }

    #[test]
    fn dcd_uniform_at_zero_weights() {
        let mut d: DomainClassDiscriminator<f32> = DomainClassDiscriminator::init(0, EMBED_DIM);
        zero_params(d.params_mut());
        let mut tape = Tape::new();
        let za = tape.leaf(Tensor::from_fn(vec![2, EMBED_DIM], |i| i as f32));
        let zb = tape.leaf(Tensor::from_fn(vec![2, EMBED_DIM], |i| (i as f32).sqrt()));
        let bound = d.bind(&mut tape);
        let p = bound.forward(&mut tape, za, zb).unwrap();
        for &v in tape.value_of(p).data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn dcd_is_order_sensitive() {
        let d: DomainClassDiscriminator<f32> = DomainClassDiscriminator::init(7, EMBED_DIM);
        let za_t = Tensor::from_fn(vec![1, EMBED_DIM], |i| ((i % 13) as f32) / 13.0);
        let zb_t = Tensor::from_fn(vec![1, EMBED_DIM], |i| ((i % 5) as f32) / 5.0);

        let mut tape = Tape::new();
        let (za, zb) = (tape.leaf(za_t.clone()), tape.leaf(zb_t.clone()));
        let bound = d.bind(&mut tape);
        let fwd = bound.forward(&mut tape, za, zb).unwrap();
        let fwd_vals = tape.value_of(fwd).data().to_vec();

        let mut tape = Tape::new();
        let (za, zb) = (tape.leaf(za_t), tape.leaf(zb_t));
        let bound = d.bind(&mut tape);
        let rev = bound.forward(&mut tape, zb, za).unwrap();
        let rev_vals = tape.value_of(rev).data().to_vec();

        assert_ne!(fwd_vals, rev_vals);
        let sum: f32 = fwd_vals.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dcd_input_width_is_twice_embedding() {
        let d: DomainClassDiscriminator<f32> = DomainClassDiscriminator::init(0, EMBED_DIM);
        assert_eq!(d.fc1_w.value().shape(), &[168, DCD_HIDDEN]);
        assert_eq!(d.embed_dim(), EMBED_DIM);
        let mut tape = Tape::new();
        let za = tape.leaf(Tensor::zeros(vec![1, 40]));
        let zb = tape.leaf(Tensor::zeros(vec![1, 40]));
        let bound = d.bind(&mut tape);
        assert!(bound.forward(&mut tape, za, zb).is_err());
    }

    #[test]
    fn init_models_is_seed_deterministic() {
        let a: ModelBundle<f32> = init_models(9);
        let b: ModelBundle<f32> = init_models(9);
        let c: ModelBundle<f32> = init_models(10);
        assert_eq!(params_checksum(&a.all_params()), params_checksum(&b.all_params()));
        assert_ne!(params_checksum(&a.all_params()), params_checksum(&c.all_params()));
    }

    #[test]
    fn init_models_shapes_are_declared() {
        let m: ModelBundle<f64> = init_models(0);
        let shapes: Vec<Vec<usize>> =
            m.all_params().iter().map(|p| p.value().shape().to_vec()).collect();
        assert!(shapes.contains(&vec![6, 1, 5, 5]));
        assert!(shapes.contains(&vec![16, 6, 5, 5]));
        assert!(shapes.contains(&vec![16, 120]));
        assert!(shapes.contains(&vec![120, 84]));
        assert!(shapes.contains(&vec![84, 10]));
        assert!(shapes.contains(&vec![168, 64]));
        assert!(shapes.contains(&vec![64, 4]));
    }

    #[test]
    fn vector_models_wire_widths_consistently() {
        let m: ModelBundle<f32> = init_vector_models(1, 32, 20, 12, 5);
        assert_eq!(m.encoder.out_dim(), 12);
        assert_eq!(m.dcd.fc1_w.value().shape(), &[24, DCD_HIDDEN]);
        assert_eq!(m.predictor.w.value().shape(), &[12, 5]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![3, 32], |i| (i as f32) * 0.01));
        let enc = m.encoder.bind(&mut tape);
        let z = enc.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value_of(z).shape(), &[3, 12]);
        let h = m.predictor.bind(&mut tape);
        let p = h.forward(&mut tape, z).unwrap();
        assert_eq!(tape.value_of(p).shape(), &[3, 5]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bundle: ModelBundle<f32> = init_models(77);
        bundle.save_checkpoint(&path, "pretrain").unwrap();
        let (back, stage) = ModelBundle::load_checkpoint(&path).unwrap();
        assert_eq!(stage, "pretrain");
        assert_eq!(back.arch, bundle.arch);
        assert_eq!(params_checksum(&back.all_params()), params_checksum(&bundle.all_params()));
    }

    #[test]
    fn checkpoint_roundtrip_vector_arch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let bundle: ModelBundle<f32> = init_vector_models(3, 16, 10, 8, 4);
        bundle.save_checkpoint(&path, "final").unwrap();
        let (back, _) = ModelBundle::load_checkpoint(&path).unwrap();
        assert_eq!(back.arch, "vector-16-10-8-4");
        assert_eq!(params_checksum(&back.all_params()), params_checksum(&bundle.all_params()));
    }

    #[test]
    fn checkpoint_rejects_corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bundle: ModelBundle<f32> = init_models(0);
        bundle.save_checkpoint(&path, "x").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        assert!(ModelBundle::load_checkpoint(&path).is_err());
    }
}
