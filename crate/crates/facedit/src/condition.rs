//! Condition streams: templated captions over a closed vocabulary, the text
//! embedding table, and the image-embedding projection network. The frozen
//! vision encoder that feeds the projection lives in [`crate::vision`].

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{linear_backward, linear_forward, silu, silu_backward, Param2};

/// Fixed caption length; shorter captions are padded.
pub const CAPTION_LEN: usize = 16;
/// Width of both condition embeddings.
pub const D_COND: usize = 64;
/// Number of image tokens produced by the projection network.
pub const IMAGE_TOKENS: usize = 4;
/// Dimension of the frozen vision feature consumed by the projection.
pub const VISION_FEATURE_DIM: usize = 128;

/// The canonical word list; position defines the token id.
pub const VOCAB_WORDS: &[&str] = &[
    "<pad>", "chubby", "young", "old", "person_a", "person_b", "black", "blonde", "pink", "blue",
    "hair", "glasses", "beard", "smiling", "neutral", "sad",
];

/// Closed vocabulary over the attribute lexicon; id 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            words: VOCAB_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }
}

impl Vocabulary {
    pub const PAD: usize = 0;

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::UnknownToken(id))
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }

    /// One token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if words.is_empty() || words[0] != "<pad>" {
            return Err(Error::invalid("vocabulary must start with <pad>"));
        }
        Ok(Self { words })
    }

    /// Stable digest of the word list.
    pub fn digest(&self) -> String {
        crate::run::sha256_hex(self.to_file_string().as_bytes())
    }
}

/// A caption as token ids, padded to exactly [`CAPTION_LEN`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CaptionTokens {
    tokens: [usize; CAPTION_LEN],
}

impl CaptionTokens {
    pub fn from_words(words: &[&str], vocab: &Vocabulary) -> Result<Self> {
        if words.len() > CAPTION_LEN {
            return Err(Error::invalid(format!(
                "caption too long: {} words (max {CAPTION_LEN})",
                words.len()
            )));
        }
        let mut tokens = [Vocabulary::PAD; CAPTION_LEN];
        for (i, w) in words.iter().enumerate() {
            tokens[i] = vocab.id(w)?;
        }
        Ok(Self { tokens })
    }

    pub fn from_ids(ids: &[usize], vocab: &Vocabulary) -> Result<Self> {
        if ids.len() > CAPTION_LEN {
            return Err(Error::invalid("too many token ids"));
        }
        let mut tokens = [Vocabulary::PAD; CAPTION_LEN];
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab.len() {
                return Err(Error::UnknownToken(id));
            }
            tokens[i] = id;
        }
        Ok(Self { tokens })
    }

    pub fn ids(&self) -> &[usize; CAPTION_LEN] {
        &self.tokens
    }

    /// Ids before the first padding token.
    pub fn content_ids(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .take_while(|&&t| t != Vocabulary::PAD)
            .cloned()
            .collect()
    }

    /// Whitespace-separated serialized form (padding omitted).
    pub fn to_text(&self, vocab: &Vocabulary) -> Result<String> {
        let words: Result<Vec<&str>> = self.content_ids().iter().map(|&id| vocab.word(id)).collect();
        Ok(words?.join(" "))
    }

    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        Self::from_words(&words, vocab)
    }
}

/// Text embedding `C`: one row per caption slot.
pub type TextEmbedding = Array2<f64>;
/// Image embedding `C'`: [`IMAGE_TOKENS`] rows of width [`D_COND`].
pub type ImageEmbedding = Array2<f64>;

/// The all-zeros image embedding used as the negative-branch condition.
pub fn zero_image_embedding() -> ImageEmbedding {
    Array2::zeros((IMAGE_TOKENS, D_COND))
}

/// One (text, image, scale) condition triple fed to the noise predictor.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub text: TextEmbedding,
    pub image: ImageEmbedding,
    pub k: f64,
}

impl ConditionBundle {
    pub fn new(text: TextEmbedding, image: ImageEmbedding, k: f64) -> Result<Self> {
        if !k.is_finite() || !(0.0..=1.0).contains(&k) {
            return Err(Error::invalid(format!("k must lie in [0, 1], got {k}")));
        }
        if image.dim() != (IMAGE_TOKENS, D_COND) {
            return Err(Error::ShapeMismatch {
                expected: format!("({IMAGE_TOKENS}, {D_COND})"),
                got: format!("{:?}", image.dim()),
            });
        }
        Ok(Self { text, image, k })
    }

    /// Same text and scale with the image branch zeroed.
    pub fn with_zero_image(&self) -> Self {
        Self {
            text: self.text.clone(),
            image: zero_image_embedding(),
            k: self.k,
        }
    }
}

/// Learned token-embedding table with additive positional rows.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    /// (vocab_size, D_COND)
    pub table: Param2,
    /// (CAPTION_LEN, D_COND)
    pub positional: Param2,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: Param2::randn(vocab_size, D_COND, 0.02, rng),
            positional: Param2::randn(CAPTION_LEN, D_COND, 0.02, rng),
        }
    }

    /// Row i of the output is `table[token_i] + positional[i]`; padding maps
    /// through the table like any other token.
    pub fn encode(&self, tokens: &CaptionTokens) -> Result<TextEmbedding> {
        let vocab_size = self.table.v.nrows();
        let mut out = Array2::zeros((CAPTION_LEN, D_COND));
        for (i, &id) in tokens.ids().iter().enumerate() {
            if id >= vocab_size {
                return Err(Error::UnknownToken(id));
            }
            for j in 0..D_COND {
                out[[i, j]] = self.table.v[[id, j]] + self.positional.v[[i, j]];
            }
        }
        Ok(out)
    }

    /// Scatter-adds the embedding gradient back into the tables.
    pub fn encode_backward(&mut self, tokens: &CaptionTokens, d_out: &Array2<f64>) {
        for (i, &id) in tokens.ids().iter().enumerate() {
            for j in 0..D_COND {
                self.table.g[[id, j]] += d_out[[i, j]];
                self.positional.g[[i, j]] += d_out[[i, j]];
            }
        }
    }
}

/// Two-layer perceptron mapping the frozen vision feature to the image
/// embedding tokens. Lives in the adapter partition.
#[derive(Debug, Clone)]
pub struct ProjectionNetwork {
    pub fc1: Param2,
    pub b1: crate::nn::Param1,
    pub fc2: Param2,
    pub b2: crate::nn::Param1,
    pub hidden: usize,
}

/// Cached activations for the projection backward pass.
pub struct ProjectionCtx {
    input: Array2<f64>,
    pre1: Array2<f64>,
}

impl ProjectionNetwork {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let out_dim = IMAGE_TOKENS * D_COND;
        Self {
            fc1: Param2::kaiming(VISION_FEATURE_DIM, hidden, rng),
            b1: crate::nn::Param1::zeros(hidden),
            fc2: Param2::kaiming(hidden, out_dim, rng),
            b2: crate::nn::Param1::zeros(out_dim),
            hidden,
        }
    }

    /// Maps a feature vector to the (IMAGE_TOKENS, D_COND) embedding.
    pub fn project(&self, features: &Array1<f64>) -> Result<ImageEmbedding> {
        Ok(self.forward(features)?.0)
    }

    pub fn forward(&self, features: &Array1<f64>) -> Result<(ImageEmbedding, ProjectionCtx)> {
        if features.len() != VISION_FEATURE_DIM {
            return Err(Error::ShapeMismatch {
                expected: format!("({VISION_FEATURE_DIM},)"),
                got: format!("({},)", features.len()),
            });
        }
        let x = features.view().insert_axis(ndarray::Axis(0)).to_owned();
        let pre1 = linear_forward(&x, &self.fc1.v, Some(&self.b1.v));
        let h = silu(&pre1);
        let out = linear_forward(&h, &self.fc2.v, Some(&self.b2.v));
        let emb = out
            .into_shape_with_order((IMAGE_TOKENS, D_COND))
            .expect("projection output reshapes to token grid");
        Ok((emb, ProjectionCtx { input: x, pre1 }))
    }

    /// Accumulates parameter gradients; the vision feature is frozen
    /// upstream so its gradient is dropped.
    pub fn backward(&mut self, ctx: &ProjectionCtx, d_emb: &Array2<f64>) {
        let d_out = d_emb
            .to_owned()
            .into_shape_with_order((1, IMAGE_TOKENS * D_COND))
            .expect("gradient reshapes to row");
        let h = silu(&ctx.pre1);
        let (d_h, d_w2, d_b2) = linear_backward(&h, &self.fc2.v, &d_out);
        self.fc2.g += &d_w2;
        self.b2.g += &d_b2;
        let d_pre1 = silu_backward(&ctx.pre1, &d_h);
        let (_d_x, d_w1, d_b1) = linear_backward(&ctx.input, &self.fc1.v, &d_pre1);
        self.fc1.g += &d_w1;
        self.b1.g += &d_b1;
    }
}
