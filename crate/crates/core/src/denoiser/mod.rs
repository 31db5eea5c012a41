//! The learnable denoising network `f(x_t, S, t)`: sentence encoding, span
//! representation, span encoder, boundary pointers and entity classifier.

mod checkpoint;
pub mod encoder;
pub mod layers;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use encoder::{EncoderAdapter, FeatureStore, TokenVocab};
pub use params::{GradStore, ParamSet, Session};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::Var;
use crate::corpus::{EntitySet, LabelVocab, Sentence, SpanCodec};
use crate::error::{Error, Result};
use layers::{sinusoidal_embedding, AttentionBlock, Linear};
use params::Init;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width `h` (even; attention uses up to 8 heads).
    pub hidden: usize,
    /// Self-attention blocks in the toy encoder.
    pub encoder_blocks: usize,
    /// Feed-forward inner width as a multiple of `hidden`.
    pub ff_mult: usize,
    /// Hidden width of the boundary-pointer perceptrons.
    pub pointer_hidden: usize,
    /// Number of real entity types `C`; the classifier adds one no-entity
    /// class on top.
    pub num_types: usize,
    /// Nonlinearity used in the perceptrons (recorded for the checkpoint).
    pub activation: String,
}

impl ModelConfig {
    pub fn toy_default(num_types: usize) -> Self {
        Self {
            hidden: 128,
            encoder_blocks: 2,
            ff_mult: 2,
            pointer_hidden: 128,
            num_types,
            activation: "gelu".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be an even number >= 2",
                self.hidden
            )));
        }
        if self.ff_mult == 0 || self.pointer_hidden == 0 {
            return Err(Error::Config("ff_mult and pointer_hidden must be >= 1".into()));
        }
        if self.num_types == 0 {
            return Err(Error::Config("model needs at least one entity type".into()));
        }
        if self.activation != "gelu" {
            return Err(Error::Config(format!(
                "unsupported activation {:?} (this build provides \"gelu\")",
                self.activation
            )));
        }
        Ok(())
    }

    /// Classifier output width: real types plus the no-entity class.
    pub fn num_classes(&self) -> usize {
        self.num_types + 1
    }
}

/// `M x h` sentence encoding, computed once per sentence and reused across
/// all reverse-diffusion timesteps.
#[derive(Debug, Clone)]
pub struct SentenceEncoding {
    pub h_s: Array2<f64>,
}

impl SentenceEncoding {
    pub fn m(&self) -> usize {
        self.h_s.nrows()
    }

    pub fn width(&self) -> usize {
        self.h_s.ncols()
    }
}

/// Per-span network outputs at one timestep.
///
/// `p_left`/`p_right` are independent per-word sigmoid probabilities
/// (`K x M`, rows do not sum to 1); `p_class` is a `K x (C+1)` softmax;
/// `x0_hat` re-encodes the argmax boundary indices into signal space.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub p_left: Array2<f64>,
    pub p_right: Array2<f64>,
    pub p_class: Array2<f64>,
    pub x0_hat: Array2<f64>,
}

impl DenoiserOutput {
    pub fn k(&self) -> usize {
        self.p_left.nrows()
    }
}

/// Tape-level outputs of one denoiser forward pass, used to assemble the
/// training loss. The spans are the discretized word-index pairs the pass
/// pooled over; the raw pointer logits back the numerically stable
/// background term of the training objective.
pub struct TracedDenoise {
    pub p_left: Var,
    pub p_right: Var,
    pub p_class: Var,
    pub left_logits: Var,
    pub right_logits: Var,
    pub spans: Vec<(usize, usize)>,
}

/// Anything that can play the reverse-process denoiser role.
pub trait BoundaryDenoiser: Sync {
    fn denoise(
        &self,
        x_t: &Array2<f64>,
        enc: &SentenceEncoding,
        t: usize,
        codec: &SpanCodec,
    ) -> Result<DenoiserOutput>;

    fn num_types(&self) -> usize;
}

struct PointerHead {
    w_sentence: Linear,
    w_span: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

impl PointerHead {
    fn new(params: &mut ParamSet, init: &mut Init, name: &str, h: usize, mlp_hidden: usize) -> Self {
        Self {
            w_sentence: Linear::new(params, init, &format!("{name}.ws"), h, h, false),
            w_span: Linear::new(params, init, &format!("{name}.wx"), h, h, false),
            mlp1: Linear::new(params, init, &format!("{name}.mlp1"), h, mlp_hidden, true),
            mlp2: Linear::new(params, init, &format!("{name}.mlp2"), mlp_hidden, 1, true),
        }
    }

    /// Fusion of sentence and span projections, two-layer perceptron;
    /// returns (sigmoid probabilities, raw logits), both `K x M`.
    fn forward(&self, s: &mut Session, h_s: Var, h_bar: Var) -> (Var, Var) {
        let m = s.tape.value(h_s).nrows();
        let k = s.tape.value(h_bar).nrows();
        let sent = self.w_sentence.forward(s, h_s);
        let span = self.w_span.forward(s, h_bar);
        let fused = s.tape.outer_broadcast_add(sent, span); // (K*M) x h
        let hid = self.mlp1.forward(s, fused);
        let hid = s.tape.gelu(hid);
        let logit = self.mlp2.forward(s, hid); // (K*M) x 1
        let logit = s.tape.reshape(logit, k, m);
        (s.tape.sigmoid(logit), logit)
    }
}

struct SpanDecoder {
    span_self: AttentionBlock,
    span_cross: AttentionBlock,
    ptr_left: PointerHead,
    ptr_right: PointerHead,
    cls1: Linear,
    cls2: Linear,
}

/// The full denoising network plus its encoder adapter and vocabularies.
pub struct Denoiser {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub token_vocab: TokenVocab,
    pub label_vocab: LabelVocab,
    toy: encoder::ToyEncoder,
    decoder: SpanDecoder,
    adapter: EncoderAdapter,
    encoder_calls: AtomicU64,
}

impl Denoiser {
    pub fn new(
        cfg: ModelConfig,
        token_vocab: TokenVocab,
        label_vocab: LabelVocab,
        adapter: EncoderAdapter,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if label_vocab.len() != cfg.num_types {
            return Err(Error::Config(format!(
                "label vocabulary has {} types but model config says {}",
                label_vocab.len(),
                cfg.num_types
            )));
        }
        let mut params = ParamSet::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let h = cfg.hidden;
        let ff_inner = h * cfg.ff_mult;
        let toy = encoder::ToyEncoder::new(
            &mut params,
            &mut init,
            token_vocab.len().max(1),
            h,
            cfg.encoder_blocks,
            ff_inner,
        );
        let decoder = SpanDecoder {
            span_self: AttentionBlock::new(&mut params, &mut init, "decoder.span_self", h, ff_inner),
            span_cross: AttentionBlock::new(&mut params, &mut init, "decoder.span_cross", h, ff_inner),
            ptr_left: PointerHead::new(&mut params, &mut init, "decoder.pointer_left", h, cfg.pointer_hidden),
            ptr_right: PointerHead::new(&mut params, &mut init, "decoder.pointer_right", h, cfg.pointer_hidden),
            cls1: Linear::new(&mut params, &mut init, "decoder.classifier.mlp1", h, h, true),
            cls2: Linear::new(&mut params, &mut init, "decoder.classifier.mlp2", h, cfg.num_classes(), true),
        };
        Ok(Self {
            cfg,
            params,
            token_vocab,
            label_vocab,
            toy,
            decoder,
            adapter,
            encoder_calls: AtomicU64::new(0),
        })
    }

    pub fn adapter(&self) -> &EncoderAdapter {
        &self.adapter
    }

    pub fn set_adapter(&mut self, adapter: EncoderAdapter) {
        self.adapter = adapter;
    }

    /// Number of sentence-encoder invocations since the last reset.
    pub fn encoder_call_count(&self) -> u64 {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_encoder_call_count(&self) {
        self.encoder_calls.store(0, Ordering::Relaxed);
    }

    /// Encode a sentence once; callers cache the result across timesteps.
    pub fn encode_sentence(&self, sentence: &Sentence) -> Result<SentenceEncoding> {
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        match &self.adapter {
            EncoderAdapter::Toy => {
                let mut s = Session::new(&self.params, false, false);
                let out = self.toy.forward(&mut s, &self.token_vocab, sentence);
                Ok(SentenceEncoding { h_s: s.tape.value(out).clone() })
            }
            EncoderAdapter::External(store) => Ok(SentenceEncoding {
                h_s: store.encode(sentence, self.cfg.hidden)?,
            }),
        }
    }

    /// Encoder forward on an existing session so gradients reach the encoder
    /// parameters during training. External features enter as constants.
    pub fn traced_encode(&self, s: &mut Session, sentence: &Sentence) -> Result<Var> {
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        match &self.adapter {
            EncoderAdapter::Toy => Ok(self.toy.forward(s, &self.token_vocab, sentence)),
            EncoderAdapter::External(store) => {
                Ok(s.tape.constant(store.encode(sentence, self.cfg.hidden)?))
            }
        }
    }

    /// Decoder forward over noisy spans at timestep `t`, on an existing
    /// session. `h_s` is the sentence encoding var.
    pub fn decode_traced(
        &self,
        s: &mut Session,
        h_s: Var,
        x_t: &Array2<f64>,
        t: usize,
        codec: &SpanCodec,
    ) -> Result<TracedDenoise> {
        let m = s.tape.value(h_s).nrows();
        if codec.m != m {
            return Err(Error::Shape(format!(
                "codec is for sentence length {} but encoding has {m} rows",
                codec.m
            )));
        }
        let spans = codec.discretize(&x_t.view())?;
        let pool = s.tape.constant(pooling_matrix(&spans, m));
        let h_x = s.tape.matmul(pool, h_s);

        let d = &self.decoder;
        let x = d.span_self.forward(s, h_x, h_x);
        let x = d.span_cross.forward(s, x, h_s);
        let e_t = s.tape.constant(sinusoidal_embedding(t, self.cfg.hidden));
        let h_bar = s.tape.add_row_broadcast(x, e_t);

        let (p_left, left_logits) = d.ptr_left.forward(s, h_s, h_bar);
        let (p_right, right_logits) = d.ptr_right.forward(s, h_s, h_bar);
        let logits = d.cls1.forward(s, h_bar);
        let logits = s.tape.gelu(logits);
        let logits = d.cls2.forward(s, logits);
        let p_class = s.tape.softmax_rows(logits);
        Ok(TracedDenoise { p_left, p_right, p_class, left_logits, right_logits, spans })
    }

    /// Extract plain-value outputs (including `x0_hat`) from a traced pass.
    pub fn output_from_traced(
        &self,
        s: &Session,
        traced: &TracedDenoise,
        codec: &SpanCodec,
    ) -> DenoiserOutput {
        let p_left = s.tape.value(traced.p_left).clone();
        let p_right = s.tape.value(traced.p_right).clone();
        let p_class = s.tape.value(traced.p_class).clone();
        let k = p_left.nrows();
        let mut x0_hat = Array2::zeros((k, 2));
        for i in 0..k {
            let l = argmax_row(&p_left, i);
            let r = argmax_row(&p_right, i);
            x0_hat[[i, 0]] = codec.encode_index(l);
            x0_hat[[i, 1]] = codec.encode_index(r);
        }
        DenoiserOutput { p_left, p_right, p_class, x0_hat }
    }

    /// Value-level span encoder (self-attention, cross-attention, timestep
    /// embedding), exposed for direct probing.
    pub fn span_encoder(&self, h_s: &Array2<f64>, h_x: &Array2<f64>, t: usize) -> Array2<f64> {
        let mut s = Session::new(&self.params, false, false);
        let h_s = s.tape.constant(h_s.clone());
        let h_x = s.tape.constant(h_x.clone());
        let x = self.decoder.span_self.forward(&mut s, h_x, h_x);
        let x = self.decoder.span_cross.forward(&mut s, x, h_s);
        let e_t = s.tape.constant(sinusoidal_embedding(t, self.cfg.hidden));
        let out = s.tape.add_row_broadcast(x, e_t);
        s.tape.value(out).clone()
    }

    /// Value-level boundary pointer for one side.
    pub fn boundary_pointer(
        &self,
        h_s: &Array2<f64>,
        h_bar: &Array2<f64>,
        side: PointerSide,
    ) -> Array2<f64> {
        let mut s = Session::new(&self.params, false, false);
        let h_s = s.tape.constant(h_s.clone());
        let h_bar = s.tape.constant(h_bar.clone());
        let head = match side {
            PointerSide::Left => &self.decoder.ptr_left,
            PointerSide::Right => &self.decoder.ptr_right,
        };
        let (out, _) = head.forward(&mut s, h_s, h_bar);
        s.tape.value(out).clone()
    }

    /// Value-level classifier over span representations.
    pub fn classify_spans(&self, h_bar: &Array2<f64>) -> Array2<f64> {
        let mut s = Session::new(&self.params, false, false);
        let h_bar = s.tape.constant(h_bar.clone());
        let logits = self.decoder.cls1.forward(&mut s, h_bar);
        let logits = s.tape.gelu(logits);
        let logits = self.decoder.cls2.forward(&mut s, logits);
        let out = s.tape.softmax_rows(logits);
        s.tape.value(out).clone()
    }
}

impl BoundaryDenoiser for Denoiser {
    fn denoise(
        &self,
        x_t: &Array2<f64>,
        enc: &SentenceEncoding,
        t: usize,
        codec: &SpanCodec,
    ) -> Result<DenoiserOutput> {
        let mut s = Session::new(&self.params, false, false);
        let h_s = s.tape.constant(enc.h_s.clone());
        let traced = self.decode_traced(&mut s, h_s, x_t, t, codec)?;
        Ok(self.output_from_traced(&s, &traced, codec))
    }

    fn num_types(&self) -> usize {
        self.cfg.num_types
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointerSide {
    Left,
    Right,
}

/// Mean pooling over the inner-span words: row `k` of the result averages
/// `h_s` rows `l_k ..= r_k`.
pub fn pool_span_reps(h_s: &Array2<f64>, spans: &[(usize, usize)]) -> Result<Array2<f64>> {
    let m = h_s.nrows();
    for &(l, r) in spans {
        if l > r || r >= m {
            return Err(Error::Validation(format!(
                "span ({l}, {r}) invalid for sentence length {m}"
            )));
        }
    }
    Ok(pooling_matrix(spans, m).dot(h_s))
}

fn pooling_matrix(spans: &[(usize, usize)], m: usize) -> Array2<f64> {
    let mut p = Array2::zeros((spans.len(), m));
    for (k, &(l, r)) in spans.iter().enumerate() {
        let w = 1.0 / (r - l + 1) as f64;
        for j in l..=r {
            p[[k, j]] = w;
        }
    }
    p
}

/// Sinusoidal timestep embedding (spec-level name for the shared helper).
pub fn timestep_embedding(t: usize, h: usize) -> Array2<f64> {
    sinusoidal_embedding(t, h)
}

fn argmax_row(a: &Array2<f64>, row: usize) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, &v) in a.row(row).iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Reference denoiser that emits the gold targets with probability one,
/// mapping span `k` to gold entity `k mod N`. With an empty gold set every
/// row points at the no-entity class.
pub struct OracleDenoiser {
    gold: EntitySet,
    num_types: usize,
    codec: SpanCodec,
}

impl OracleDenoiser {
    pub fn new(gold: EntitySet, num_types: usize, codec: SpanCodec) -> Self {
        Self { gold, num_types, codec }
    }
}

impl BoundaryDenoiser for OracleDenoiser {
    fn denoise(
        &self,
        x_t: &Array2<f64>,
        enc: &SentenceEncoding,
        _t: usize,
        _codec: &SpanCodec,
    ) -> Result<DenoiserOutput> {
        let k = x_t.nrows();
        let m = enc.m();
        let classes = self.num_types + 1;
        let mut p_left = Array2::zeros((k, m));
        let mut p_right = Array2::zeros((k, m));
        let mut p_class = Array2::zeros((k, classes));
        let mut x0_hat = Array2::zeros((k, 2));
        for i in 0..k {
            if self.gold.is_empty() {
                p_left[[i, 0]] = 1.0;
                p_right[[i, 0]] = 1.0;
                p_class[[i, self.num_types]] = 1.0;
                continue;
            }
            let g = &self.gold.entities[i % self.gold.len()];
            p_left[[i, g.left]] = 1.0;
            p_right[[i, g.right]] = 1.0;
            p_class[[i, g.label]] = 1.0;
            x0_hat[[i, 0]] = self.codec.encode_index(g.left);
            x0_hat[[i, 1]] = self.codec.encode_index(g.right);
        }
        Ok(DenoiserOutput { p_left, p_right, p_class, x0_hat })
    }

    fn num_types(&self) -> usize {
        self.num_types
    }
}
