//! The networks: image encoder F, caption encoder G, decoder H, feature
//! transformers T_vc / T_cv, pair discriminator D, concept head R, and the
//! two modality discriminators used only by the cycle baseline.
//!
//! Parameter names start with `gen.` or `disc.`, which is how the trainer
//! splits the generator and discriminator optimizer groups.

mod checkpoint;
mod decode;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{tensor, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::toyworld;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use decode::{DecodeConfig, DecodeMode, Decoded};

pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "disc.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    /// Width of F's two hidden layers; the second is R's input.
    pub hidden: usize,
    /// Shared latent width d of z^x and z^y.
    pub latent: usize,
    pub vocab: usize,
    pub embed: usize,
    pub dec_hidden: usize,
    pub concept: usize,
    /// Width of D's hidden layers.
    pub disc_hidden: usize,
    /// Most tokens a decode may emit, `<end>` included.
    pub max_decode: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            feature_dim: toyworld::FEATURE_DIM,
            hidden: 64,
            latent: 32,
            vocab: toyworld::VOCAB_SIZE,
            embed: 16,
            dec_hidden: 64,
            concept: toyworld::CONCEPT_DIM,
            disc_hidden: 64,
            max_decode: toyworld::MAX_CAPTION_LEN - 1,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.feature_dim,
            self.hidden,
            self.latent,
            self.vocab,
            self.embed,
            self.dec_hidden,
            self.concept,
            self.disc_hidden,
            self.max_decode,
        ];
        if all.contains(&0) {
            return Err(Error::InvalidArgument(format!("model dimensions must be positive: {self:?}")));
        }
        if self.vocab <= toyworld::START {
            return Err(Error::InvalidArgument("vocabulary must hold <end> and <start>".into()));
        }
        Ok(())
    }
}

fn glorot(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a);
    let data = (0..rows * cols).map(|_| u.sample(rng)).collect();
    store.add(name, Tensor::matrix(rows, cols, data).expect("sized above"))
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let w = glorot(store, format!("{name}.w"), inputs, outputs, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them and none after the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Output and the activation feeding the last layer.
    pub fn forward_with_hidden(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<(NodeId, NodeId)> {
        check_width(g, x, self.input_dim(), "mlp")?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let pre = l.forward(g, store, h)?;
            if i == last {
                return Ok((pre, h));
            }
            h = g.relu(pre);
        }
        unreachable!("an mlp has at least one layer")
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_with_hidden(g, store, x)?.0)
    }

    /// Identity weights and zero biases. Square layers only; the map is the
    /// identity on nonnegative inputs since the ReLUs pass them unchanged.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        for l in &self.layers {
            if l.inputs != l.outputs {
                return Err(Error::InvalidArgument("identity init needs square layers".into()));
            }
            *store.get_mut(l.w) = Tensor::identity(l.inputs);
            *store.get_mut(l.b) = Tensor::zeros(&[1, l.outputs]);
        }
        Ok(())
    }

    pub fn set_zero(&self, store: &mut ParamStore) {
        for l in &self.layers {
            store.get_mut(l.w).data_mut().fill(0.0);
            store.get_mut(l.b).data_mut().fill(0.0);
        }
    }
}

fn check_width(g: &Graph, x: NodeId, want: usize, op: &'static str) -> Result<()> {
    let shape = g.value(x).shape();
    if shape.len() != 2 || shape[1] != want {
        return Err(Error::ShapeMismatch { op, lhs: shape.to_vec(), rhs: vec![0, want] });
    }
    Ok(())
}

/// Elman encoder over token embeddings; the final state is `z^y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionEncoder {
    pub emb: ParamId,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

/// Elman decoder whose initial state is `tanh(z^x W_z + b_z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionDecoder {
    pub emb: ParamId,
    pub wz: ParamId,
    pub bz: ParamId,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Outputs of F on a batch.
#[derive(Debug, Clone, Copy)]
pub struct ImageCode {
    pub z: NodeId,
    /// F's last hidden layer, the input to R.
    pub penultimate: NodeId,
}

/// Teacher-forced decoder likelihoods, one row per sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceNll {
    /// `-sum_t log p(y_t | y_<t, x)`: negative sequence log-likelihood.
    pub sum: NodeId,
    /// The same divided by the number of predicted tokens.
    pub mean: NodeId,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub f: Mlp,
    pub g: CaptionEncoder,
    pub h: CaptionDecoder,
    pub t_vc: Mlp,
    pub t_cv: Mlp,
    pub d: Mlp,
    pub r: Mlp,
    /// Modality discriminators of the cycle baseline.
    pub d_x: Option<Mlp>,
    pub d_y: Option<Mlp>,
}

impl ModelBundle {
    pub fn new(dims: ModelDims, modality_discriminators: bool, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let s = &mut ParamStore::new();
        let ModelDims { feature_dim, hidden, latent: d, vocab, embed, dec_hidden, concept, disc_hidden, .. } = dims;
        let f = Mlp::new(s, "gen.f", &[feature_dim, hidden, hidden, d], rng);
        let g = CaptionEncoder {
            emb: glorot(s, "gen.g.emb".into(), vocab, embed, rng),
            wx: glorot(s, "gen.g.wx".into(), embed, d, rng),
            wh: glorot(s, "gen.g.wh".into(), d, d, rng),
            b: s.add("gen.g.b", Tensor::zeros(&[1, d])),
        };
        let h = CaptionDecoder {
            emb: glorot(s, "gen.h.emb".into(), vocab, embed, rng),
            wz: glorot(s, "gen.h.wz".into(), d, dec_hidden, rng),
            bz: s.add("gen.h.bz", Tensor::zeros(&[1, dec_hidden])),
            wx: glorot(s, "gen.h.wx".into(), embed, dec_hidden, rng),
            wh: glorot(s, "gen.h.wh".into(), dec_hidden, dec_hidden, rng),
            b: s.add("gen.h.b", Tensor::zeros(&[1, dec_hidden])),
            wo: glorot(s, "gen.h.wo".into(), dec_hidden, vocab, rng),
            bo: s.add("gen.h.bo", Tensor::zeros(&[1, vocab])),
        };
        let t_vc = Mlp::new(s, "gen.t_vc", &[d; 5], rng);
        let t_cv = Mlp::new(s, "gen.t_cv", &[d; 5], rng);
        let r = Mlp::new(s, "gen.r", &[hidden, hidden / 2, concept], rng);
        let dd = Mlp::new(s, "disc.d", &[2 * d, disc_hidden, disc_hidden, disc_hidden, 1], rng);
        let (d_x, d_y) = if modality_discriminators {
            (
                Some(Mlp::new(s, "disc.dx", &[d, disc_hidden, disc_hidden, 1], rng)),
                Some(Mlp::new(s, "disc.dy", &[d, disc_hidden, disc_hidden, 1], rng)),
            )
        } else {
            (None, None)
        };
        Ok(Self { dims, store: std::mem::take(s), f, g, h, t_vc, t_cv, d: dd, r, d_x, d_y })
    }

    pub fn has_modality_discriminators(&self) -> bool {
        self.d_x.is_some()
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.store.with_prefix(GEN_PREFIX)
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.store.with_prefix(DISC_PREFIX)
    }

    /// F on a `[B, feature_dim]` batch.
    pub fn encode_images(&self, g: &mut Graph, features: NodeId) -> Result<ImageCode> {
        check_width(g, features, self.dims.feature_dim, "encode_image")?;
        let (z, penultimate) = self.f.forward_with_hidden(g, &self.store, features)?;
        Ok(ImageCode { z, penultimate })
    }

    fn check_tokens(&self, seqs: &[&[usize]]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch("captions"));
        }
        for s in seqs {
            if s.is_empty() {
                return Err(Error::InvalidArgument("empty token sequence".into()));
            }
            if let Some(t) = s.iter().find(|t| **t >= self.dims.vocab) {
                return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {}", self.dims.vocab)));
            }
        }
        Ok(())
    }

    /// G on a batch of token sequences; returns `[B, d]` final states.
    /// Shorter sequences hold their state once exhausted.
    pub fn encode_captions(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<NodeId> {
        self.check_tokens(seqs)?;
        let p = &self.store;
        let enc = self.g;
        let emb = g.param(p, enc.emb);
        let wx = g.param(p, enc.wx);
        let wh = g.param(p, enc.wh);
        let bias = g.param(p, enc.b);
        // Project the whole embedding table once; each step gathers rows.
        let table = g.matmul(emb, wx)?;
        let n = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut h = g.constant(Tensor::zeros(&[n, self.dims.latent]));
        for t in 0..steps {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let x = g.gather(table, &ids)?;
            let r = g.matmul(h, wh)?;
            let pre = g.add(x, r)?;
            let pre = g.add_row(pre, bias)?;
            let next = g.tanh(pre);
            if seqs.iter().all(|s| t < s.len()) {
                h = next;
            } else {
                // mask * next + (1 - mask) * h reproduces either side exactly.
                let live: Vec<f64> = seqs.iter().map(|s| if t < s.len() { 1.0 } else { 0.0 }).collect();
                let held = g.constant(Tensor::column(live.iter().map(|m| 1.0 - m).collect()));
                let live = g.constant(Tensor::column(live));
                let a = g.mul_col(next, live)?;
                let b = g.mul_col(h, held)?;
                h = g.add(a, b)?;
            }
        }
        Ok(h)
    }

    /// Teacher-forced H: each full sequence `<start> w1 .. <end>` predicts
    /// its own tokens after `<start>`.
    pub fn decode_teacher(&self, g: &mut Graph, z: NodeId, seqs: &[&[usize]]) -> Result<SequenceNll> {
        self.check_tokens(seqs)?;
        check_width(g, z, self.dims.latent, "decode_caption")?;
        let n = seqs.len();
        if g.value(z).rows() != n {
            return Err(Error::ShapeMismatch { op: "decode_caption", lhs: g.value(z).shape().to_vec(), rhs: vec![n] });
        }
        if let Some(s) = seqs.iter().find(|s| s.len() < 2) {
            return Err(Error::InvalidArgument(format!("teacher forcing needs at least two tokens, got {s:?}")));
        }
        let p = &self.store;
        let dec = self.h;
        let h0 = {
            let wz = g.param(p, dec.wz);
            let bz = g.param(p, dec.bz);
            let a = g.matmul(z, wz)?;
            let a = g.add_row(a, bz)?;
            g.tanh(a)
        };
        let emb = g.param(p, dec.emb);
        let wx = g.param(p, dec.wx);
        let wh = g.param(p, dec.wh);
        let bias = g.param(p, dec.b);
        let wo = g.param(p, dec.wo);
        let bo = g.param(p, dec.bo);
        let table = g.matmul(emb, wx)?;
        let steps = seqs.iter().map(|s| s.len() - 1).max().unwrap_or(0);
        let mut h = h0;
        let mut total: Option<NodeId> = None;
        for t in 0..steps {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let targets: Vec<usize> = seqs.iter().map(|s| s.get(t + 1).copied().unwrap_or(0)).collect();
            let x = g.gather(table, &ids)?;
            let r = g.matmul(h, wh)?;
            let pre = g.add(x, r)?;
            let pre = g.add_row(pre, bias)?;
            h = g.tanh(pre);
            let logits = g.matmul(h, wo)?;
            let logits = g.add_row(logits, bo)?;
            let mut ce = g.softmax_cross_entropy(logits, &targets)?;
            if seqs.iter().any(|s| t + 1 >= s.len()) {
                let mask = Tensor::column(seqs.iter().map(|s| if t + 1 < s.len() { 1.0 } else { 0.0 }).collect());
                let mask = g.constant(mask);
                ce = g.mul_col(ce, mask)?;
            }
            total = Some(match total {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
        }
        let sum = total.expect("at least one step");
        let inv = g.constant(Tensor::column(seqs.iter().map(|s| 1.0 / (s.len() - 1) as f64).collect()));
        let mean = g.mul_col(sum, inv)?;
        Ok(SequenceNll { sum, mean })
    }

    pub fn transform_vc(&self, g: &mut Graph, zx: NodeId) -> Result<NodeId> {
        self.t_vc.forward(g, &self.store, zx)
    }

    pub fn transform_cv(&self, g: &mut Graph, zy: NodeId) -> Result<NodeId> {
        self.t_cv.forward(g, &self.store, zy)
    }

    /// Pre-sigmoid discriminator output, `[B, 1]`.
    pub fn discriminator_logits(&self, g: &mut Graph, zx: NodeId, zy: NodeId) -> Result<NodeId> {
        check_width(g, zx, self.dims.latent, "discriminate")?;
        check_width(g, zy, self.dims.latent, "discriminate")?;
        let pair = g.concat_cols(&[zx, zy])?;
        self.d.forward(g, &self.store, pair)
    }

    pub fn concept_regress(&self, g: &mut Graph, penultimate: NodeId) -> Result<NodeId> {
        check_width(g, penultimate, self.dims.hidden, "concept_regress")?;
        self.r.forward(g, &self.store, penultimate)
    }

    /// Modality discriminator logits; `image_side` picks D_x over D_y.
    pub fn modality_logits(&self, g: &mut Graph, z: NodeId, image_side: bool) -> Result<NodeId> {
        let m = if image_side { &self.d_x } else { &self.d_y };
        let m = m.as_ref().ok_or_else(|| Error::InvalidArgument("model has no modality discriminators".into()))?;
        check_width(g, z, self.dims.latent, "modality_discriminator")?;
        m.forward(g, &self.store, z)
    }

    /// Latent codes and penultimate activations for a feature batch.
    pub fn infer_images(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let code = self.encode_images(&mut g, x)?;
        Ok((g.value(code.z).clone(), g.value(code.penultimate).clone()))
    }

    pub fn infer_captions(&self, seqs: &[&[usize]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = self.encode_captions(&mut g, seqs)?;
        Ok(g.value(z).clone())
    }

    /// `D(z^x_i, z^y_i)` for each row pair, strictly inside `(0, 1)`.
    pub fn score_rows(&self, zx: &Tensor, zy: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let a = g.constant(zx.clone());
        let b = g.constant(zy.clone());
        let l = self.discriminator_logits(&mut g, a, b)?;
        Ok(g.value(l).data().iter().map(|&v| probability(v)).collect())
    }

    /// Single-pair discriminator score.
    pub fn discriminate(&self, zx: &[f64], zy: &[f64]) -> Result<f64> {
        Ok(self.score_rows(&Tensor::row(zx.to_vec()), &Tensor::row(zy.to_vec()))?[0])
    }

    pub fn decode(&self, z: &[f64], cfg: &DecodeConfig) -> Result<Decoded> {
        decode::decode(self, z, cfg)
    }

    /// Sum of log-probabilities H assigns to `tokens` (no `<start>`).
    pub fn sequence_log_prob(&self, z: &[f64], tokens: &[usize]) -> Result<f64> {
        decode::sequence_log_prob(self, z, tokens)
    }
}

/// Sigmoid kept strictly inside `(0, 1)` even where `f64` would round.
pub fn probability(logit: f64) -> f64 {
    tensor::sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(seed: u64) -> ModelBundle {
        ModelBundle::new(ModelDims::default(), true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn features(n: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = ModelDims::default().feature_dim;
        Tensor::matrix(n, d, (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn parameter_groups_partition_the_store() {
        let b = bundle(0);
        assert_eq!(b.generator_ids().len() + b.discriminator_ids().len(), b.store.len());
        assert!(b.discriminator_ids().iter().all(|&id| b.store.name(id).starts_with("disc.")));
    }

    #[test]
    fn zero_encoder_gives_zero_code() {
        let mut b = bundle(1);
        b.f.set_zero(&mut b.store);
        let (z, _) = b.infer_images(&features(3, 0)).unwrap();
        assert_eq!(z.shape(), &[3, 32]);
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let b = bundle(1);
        assert!(b.infer_images(&Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn caption_encoder_contract() {
        let b = bundle(2);
        let one = b.infer_captions(&[&[5]]).unwrap();
        assert_eq!(one.shape(), &[1, 32]);
        // One step from the zero state: tanh(emb[5] W_x + b).
        let mut g = Graph::new();
        let e = g.param(&b.store, b.g.emb);
        let row = g.gather(e, &[5]).unwrap();
        let w = g.param(&b.store, b.g.wx);
        let x = g.matmul(row, w).unwrap();
        let x = g.tanh(x);
        assert!(g.value(x).max_abs_diff(&one) < 1e-15);
        let ab = b.infer_captions(&[&[4, 7, 9]]).unwrap();
        let ba = b.infer_captions(&[&[9, 7, 4]]).unwrap();
        assert!(ab.max_abs_diff(&ba) > 1e-6);
        assert!(b.infer_captions(&[&[]]).is_err());
        assert!(b.infer_captions(&[&[99]]).is_err());
    }

    #[test]
    fn ragged_batches_match_single_sequences() {
        let b = bundle(3);
        let short: &[usize] = &[1, 2, 5, 0];
        let long: &[usize] = &[1, 2, 4, 7, 12, 3, 2, 5, 8, 13, 0];
        let both = b.infer_captions(&[short, long]).unwrap();
        let s = b.infer_captions(&[short]).unwrap();
        let l = b.infer_captions(&[long]).unwrap();
        assert_eq!(both.row_slice(0), s.row_slice(0));
        assert_eq!(both.row_slice(1), l.row_slice(0));
    }

    #[test]
    fn transformer_identity_init() {
        let b = bundle(4);
        let mut s = b.store.clone();
        b.t_vc.set_identity(&mut s).unwrap();
        let b = ModelBundle { store: s, ..b };
        let z = Tensor::matrix(2, 32, (0..64).map(|i| i as f64 * 0.1).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(z.clone());
        let y = b.transform_vc(&mut g, x).unwrap();
        assert_eq!(g.value(y), &z);
    }

    #[test]
    fn discriminator_scores_open_interval() {
        let mut b = bundle(5);
        b.d.set_zero(&mut b.store);
        assert_eq!(b.discriminate(&[0.3; 32], &[-0.2; 32]).unwrap(), 0.5);
        assert!(probability(800.0) < 1.0);
        assert!(probability(-800.0) > 0.0);
        assert!(b.discriminate(&[0.0; 31], &[0.0; 32]).is_err());
    }

    #[test]
    fn concept_head_contract() {
        let mut b = bundle(6);
        let (_, pen) = b.infer_images(&features(2, 1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(pen.clone());
        let v = b.concept_regress(&mut g, x).unwrap();
        assert_eq!(g.value(v).shape(), &[2, 13]);
        b.r.set_zero(&mut b.store);
        let mut g = Graph::new();
        let x = g.constant(pen);
        let v = b.concept_regress(&mut g, x).unwrap();
        assert!(g.value(v).data().iter().all(|v| *v == 0.0));
    }

    fn check(b: &ModelBundle, ids: Vec<ParamId>, loss: impl Fn(&ModelBundle, &mut Graph) -> Result<NodeId>) {
        let proto = b.clone();
        let mut store = b.store.clone();
        let err = grad_check(&mut store, &ids, GradCheckOptions { eps: 1e-5, max_entries_per_tensor: Some(6) }, |g, s| {
            let m = ModelBundle { store: s.clone(), ..proto.clone() };
            loss(&m, g)
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let b = bundle(7);
        let feats = features(3, 2);
        let f_ids = b.f.param_ids();
        check(&b, f_ids, |m, g| {
            let x = g.constant(feats.clone());
            let c = m.encode_images(g, x)?;
            Ok(g.squared_norm(c.z))
        });
        let t_ids = b.t_vc.param_ids();
        check(&b, t_ids, |m, g| {
            let x = g.constant(feats.clone());
            let c = m.encode_images(g, x)?;
            let t = m.transform_vc(g, c.z)?;
            Ok(g.squared_norm(t))
        });
        let r_ids = b.r.param_ids();
        check(&b, r_ids, |m, g| {
            let x = g.constant(feats.clone());
            let c = m.encode_images(g, x)?;
            let v = m.concept_regress(g, c.penultimate)?;
            Ok(g.squared_norm(v))
        });
        let h_ids = b.store.with_prefix("gen.h.");
        let g_ids = b.store.with_prefix("gen.g.");
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 5, 7, 13, 0], vec![1, 2, 4, 6, 12, 3, 2, 5, 9, 16, 0]];
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        check(&b, [h_ids, g_ids].concat(), |m, g| {
            let zy = m.encode_captions(g, &refs)?;
            let nll = m.decode_teacher(g, zy, &refs)?;
            g.mean(nll.mean)
        });
    }
}
