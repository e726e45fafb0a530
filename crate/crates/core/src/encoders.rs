//! Feature encoders: a linear projector for region features and a
//! bidirectional GRU over token embeddings for captions.
//!
//! Both map raw inputs into the shared d-dim space the matching
//! pipeline works in. Parameters are immutable during encoding; all
//! linear maps are stored `[input-dim × output-dim]` and applied as
//! `x.dot(w)`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::correspondence::fan_in_uniform;
use crate::data::{RegionSet, SentenceSet};
use crate::error::{Error, Result};

/// Default token embedding width.
pub const DEFAULT_EMBED_DIM: usize = 300;

/// Linear region projector: raw region features to d-dim rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageProjector {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl ImageProjector {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::config(format!(
                "projector weight maps to {} dims but bias has {}",
                weight.ncols(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite projector parameter"));
        }
        Ok(ImageProjector { weight, bias })
    }

    pub fn init(d_raw: usize, d: usize, rng: &mut impl Rng) -> Self {
        ImageProjector {
            weight: fan_in_uniform((d_raw, d), rng),
            bias: Array1::zeros(d),
        }
    }

    pub fn d_raw(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d(&self) -> usize {
        self.weight.ncols()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// Project all regions of one image: [K × d_raw] -> [K × d].
    pub fn encode_image(&self, regions: &RegionSet) -> Result<Array2<f64>> {
        if regions.d_raw() != self.d_raw() {
            return Err(Error::config(format!(
                "projector expects {}-dim raw features, image {} has {}",
                self.d_raw(),
                regions.image_id(),
                regions.d_raw()
            )));
        }
        let mut out = regions.features_f64().dot(&self.weight);
        for mut row in out.outer_iter_mut() {
            row += &self.bias;
        }
        Ok(out)
    }
}

/// One direction of a GRU: three gates, each with input and hidden maps.
///
/// Cell update for input x and state h:
/// reset r = sigmoid(x·w_ir + b_ir + h·w_hr + b_hr), update
/// z = sigmoid(x·w_iz + b_iz + h·w_hz + b_hz), candidate
/// n = tanh(x·w_in + b_in + r ⊙ (h·w_hn + b_hn)), next state
/// h' = (1 − z) ⊙ n + z ⊙ h.
#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection {
    pub w_ir: Array2<f64>,
    pub w_iz: Array2<f64>,
    pub w_in: Array2<f64>,
    pub w_hr: Array2<f64>,
    pub w_hz: Array2<f64>,
    pub w_hn: Array2<f64>,
    pub b_ir: Array1<f64>,
    pub b_iz: Array1<f64>,
    pub b_in: Array1<f64>,
    pub b_hr: Array1<f64>,
    pub b_hz: Array1<f64>,
    pub b_hn: Array1<f64>,
}

impl GruDirection {
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruDirection {
            w_ir: fan_in_uniform((input, hidden), rng),
            w_iz: fan_in_uniform((input, hidden), rng),
            w_in: fan_in_uniform((input, hidden), rng),
            w_hr: fan_in_uniform((hidden, hidden), rng),
            w_hz: fan_in_uniform((hidden, hidden), rng),
            w_hn: fan_in_uniform((hidden, hidden), rng),
            b_ir: Array1::zeros(hidden),
            b_iz: Array1::zeros(hidden),
            b_in: Array1::zeros(hidden),
            b_hr: Array1::zeros(hidden),
            b_hz: Array1::zeros(hidden),
            b_hn: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hr.nrows()
    }

    pub fn input(&self) -> usize {
        self.w_ir.nrows()
    }

    fn step(&self, x: ArrayView1<f64>, h: &Array1<f64>) -> Array1<f64> {
        let mut r = x.dot(&self.w_ir) + &self.b_ir + &h.dot(&self.w_hr) + &self.b_hr;
        r.mapv_inplace(sigmoid);
        let mut z = x.dot(&self.w_iz) + &self.b_iz + &h.dot(&self.w_hz) + &self.b_hz;
        z.mapv_inplace(sigmoid);
        let hn = h.dot(&self.w_hn) + &self.b_hn;
        let mut n = x.dot(&self.w_in) + &self.b_in;
        for (c, v) in n.iter_mut().enumerate() {
            *v = (*v + r[c] * hn[c]).tanh();
        }
        let mut out = Array1::zeros(h.len());
        for c in 0..h.len() {
            out[c] = (1.0 - z[c]) * n[c] + z[c] * h[c];
        }
        out
    }

    /// Hidden states over the whole sequence, starting from zeros.
    fn run(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let hidden = self.hidden();
        let mut h = Array1::<f64>::zeros(hidden);
        let mut states = Array2::<f64>::zeros((inputs.nrows(), hidden));
        for (j, x) in inputs.outer_iter().enumerate() {
            h = self.step(x, &h);
            states.row_mut(j).assign(&h);
        }
        states
    }
}

/// Caption encoder: embedding lookup followed by a bidirectional GRU.
/// The word feature at position j is the arithmetic mean of the forward
/// and backward hidden states at j.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    embedding: Array2<f64>,
    forward: GruDirection,
    backward: GruDirection,
}

impl TextEncoder {
    pub fn new(
        embedding: Array2<f64>,
        forward: GruDirection,
        backward: GruDirection,
    ) -> Result<Self> {
        if forward.input() != embedding.ncols() || backward.input() != embedding.ncols() {
            return Err(Error::config(
                "GRU input width does not match embedding width",
            ));
        }
        if forward.hidden() != backward.hidden() {
            return Err(Error::config("GRU directions disagree on hidden size"));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite embedding entry"));
        }
        Ok(TextEncoder {
            embedding,
            forward,
            backward,
        })
    }

    pub fn init(vocab: usize, embed_dim: usize, d: usize, rng: &mut impl Rng) -> Self {
        TextEncoder {
            embedding: fan_in_uniform((vocab, embed_dim), rng),
            forward: GruDirection::init(embed_dim, d, rng),
            backward: GruDirection::init(embed_dim, d, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn d(&self) -> usize {
        self.forward.hidden()
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn forward_params(&self) -> &GruDirection {
        &self.forward
    }

    pub fn backward_params(&self) -> &GruDirection {
        &self.backward
    }

    /// Word features [len × d] for a sentence, sentinels included.
    pub fn encode_text(&self, sentence: &SentenceSet) -> Result<Array2<f64>> {
        Ok(self.encode_text_with_states(sentence)?.0)
    }

    /// Word features plus the per-direction hidden states they average.
    pub fn encode_text_with_states(
        &self,
        sentence: &SentenceSet,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let len = sentence.len();
        let mut embedded = Array2::<f64>::zeros((len, self.embedding.ncols()));
        for (j, id) in sentence.token_ids().iter().enumerate() {
            let id = *id as usize;
            if id >= self.embedding.nrows() {
                return Err(Error::data(format!(
                    "sentence {}: token id {id} outside vocabulary of {}",
                    sentence.caption_id(),
                    self.embedding.nrows()
                )));
            }
            embedded.row_mut(j).assign(&self.embedding.row(id));
        }

        let fwd_states = self.forward.run(&embedded);

        let mut reversed = Array2::<f64>::zeros(embedded.dim());
        for j in 0..len {
            reversed.row_mut(j).assign(&embedded.row(len - 1 - j));
        }
        let bwd_reversed = self.backward.run(&reversed);
        let mut bwd_states = Array2::<f64>::zeros(bwd_reversed.dim());
        for j in 0..len {
            bwd_states.row_mut(j).assign(&bwd_reversed.row(len - 1 - j));
        }

        let mut mean = Array2::<f64>::zeros(fwd_states.dim());
        for j in 0..len {
            for c in 0..self.d() {
                mean[[j, c]] = 0.5 * (fwd_states[[j, c]] + bwd_states[[j, c]]);
            }
        }
        Ok((mean, fwd_states, bwd_states))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
