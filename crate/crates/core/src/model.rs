//! The dual encoder.
//!
//! Text units (a question, a column name, a cell) are encoded as the mean of
//! their word vectors, optionally concatenated with the mean of per-token
//! character-LSTM states. A column is `MLP(act(W[name ∥ mean(cells)] + b))`
//! and a table is the L2-normalized mean of its columns. A question is a
//! bag-of-words MLP or a word LSTM, optionally combined with its character
//! encoding through one dense layer, then L2-normalized.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{column_views, ColumnView, SplitData, Table, REAL_TOKEN};
use crate::embed_store::{EmbeddingStore, TokenSlot};
use crate::error::{Error, Result};
use crate::nn::{self, Dense, Lstm, LstmStep, Mlp, MlpCache, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionEncoderKind {
    Bow,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub use_char: bool,
    pub question_encoder: QuestionEncoderKind,
    pub column_intermediate_dim: usize,
    pub mlp_hidden_dims: Vec<usize>,
    pub question_mlp_dims: Vec<usize>,
    pub word_lstm_dim: usize,
    pub margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 500,
            char_dim: 200,
            use_char: false,
            question_encoder: QuestionEncoderKind::Bow,
            column_intermediate_dim: 1000,
            mlp_hidden_dims: vec![750, 500],
            question_mlp_dims: vec![500, 500],
            word_lstm_dim: 500,
            margin: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn out_dim(&self) -> usize {
        self.mlp_hidden_dims.last().copied().unwrap_or(0)
    }

    /// Width of a text-unit encoding: word part plus optional char part.
    pub fn unit_dim(&self) -> usize {
        self.word_dim + if self.use_char { self.char_dim } else { 0 }
    }

    /// Width of the question's word-level encoding.
    pub fn question_word_dim(&self) -> usize {
        match self.question_encoder {
            QuestionEncoderKind::Bow => self.question_mlp_dims.last().copied().unwrap_or(0),
            QuestionEncoderKind::Lstm => self.word_lstm_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.word_dim == 0 || (self.use_char && self.char_dim == 0) {
            return bad("word_dim and char_dim must be positive".into());
        }
        if self.mlp_hidden_dims.is_empty() || self.mlp_hidden_dims.contains(&0) {
            return bad("mlp_hidden_dims must be nonempty and positive".into());
        }
        if self.use_char && self.column_intermediate_dim == 0 {
            return bad("column_intermediate_dim must be positive".into());
        }
        match self.question_encoder {
            QuestionEncoderKind::Bow => {
                if self.question_mlp_dims.is_empty() || self.question_mlp_dims.contains(&0) {
                    return bad("question_mlp_dims must be nonempty and positive".into());
                }
            }
            QuestionEncoderKind::Lstm => {
                if self.word_lstm_dim == 0 {
                    return bad("word_lstm_dim must be positive".into());
                }
            }
        }
        if !self.use_char && self.question_word_dim() != self.out_dim() {
            return bad(format!(
                "without chars the question encoding ({}) must match the table encoding ({})",
                self.question_word_dim(),
                self.out_dim()
            ));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive".into());
        }
        Ok(())
    }
}

/// Character index space. Index 0 is the unknown character.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for Alphabet {
    fn from(chars: Vec<char>) -> Self {
        Alphabet::from_chars(chars)
    }
}

impl From<Alphabet> for Vec<char> {
    fn from(a: Alphabet) -> Self {
        a.chars
    }
}

impl Alphabet {
    /// Sorted, deduplicated alphabet.
    pub fn from_chars<I: IntoIterator<Item = char>>(chars: I) -> Self {
        let chars: Vec<char> = chars.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Alphabet { chars, index }
    }

    /// Every character of every token in the split's questions, column
    /// names, and text cells.
    pub fn build(split: &SplitData) -> Self {
        let mut set = BTreeSet::new();
        let mut add = |tokens: &[String]| {
            for t in tokens.iter().filter(|t| *t != REAL_TOKEN) {
                set.extend(t.chars());
            }
        };
        for q in &split.questions {
            add(&q.tokens);
        }
        for t in &split.tables {
            for view in column_views(t) {
                add(&view.name_tokens);
                view.value_tokens.iter().for_each(|v| add(v));
            }
        }
        Alphabet::from_chars(set)
    }

    pub fn index_of(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(0)
    }

    /// Rows needed in the character embedding, including the unknown row.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharParams {
    pub embedding: Tensor,
    pub lstm: Lstm,
    /// Stand-in for the char-LSTM state of reserved tokens.
    pub special: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuestionWordParams {
    Bow(Mlp),
    Lstm(Lstm),
}

/// Every trainable tensor. Pretrained word vectors live in the
/// [`EmbeddingStore`] and are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub word_unk: Tensor,
    pub word_real: Tensor,
    pub chars: Option<CharParams>,
    pub column_dense: Option<Dense>,
    pub column_mlp: Mlp,
    pub question_word: QuestionWordParams,
    pub question_combine: Option<Dense>,
}

fn push_dense<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, d: &'a Dense) {
    out.push((format!("{prefix}.weight"), &d.weight));
    out.push((format!("{prefix}.bias"), &d.bias));
}

fn push_dense_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, d: &'a mut Dense) {
    out.push((format!("{prefix}.weight"), &mut d.weight));
    out.push((format!("{prefix}.bias"), &mut d.bias));
}

fn push_lstm<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, l: &'a Lstm) {
    out.push((format!("{prefix}.w_input"), &l.w_input));
    out.push((format!("{prefix}.w_hidden"), &l.w_hidden));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn push_lstm_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, l: &'a mut Lstm) {
    out.push((format!("{prefix}.w_input"), &mut l.w_input));
    out.push((format!("{prefix}.w_hidden"), &mut l.w_hidden));
    out.push((format!("{prefix}.bias"), &mut l.bias));
}

impl ModelParams {
    /// All-zero parameters with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig, alphabet_size: usize) -> Self {
        let (dw, dc) = (config.word_dim, config.char_dim);
        let chars = config.use_char.then(|| CharParams {
            embedding: Tensor::zeros(&[alphabet_size, dc]),
            lstm: Lstm::zeros(dc, dc),
            special: Tensor::zeros(&[dc]),
        });
        let column_in = 2 * config.unit_dim();
        let column_dense = config
            .use_char
            .then(|| Dense::zeros(column_in, config.column_intermediate_dim));
        let mlp_in = if config.use_char {
            config.column_intermediate_dim
        } else {
            column_in
        };
        let question_word = match config.question_encoder {
            QuestionEncoderKind::Bow => QuestionWordParams::Bow(Mlp::zeros(dw, &config.question_mlp_dims)),
            QuestionEncoderKind::Lstm => QuestionWordParams::Lstm(Lstm::zeros(dw, config.word_lstm_dim)),
        };
        let question_combine = config
            .use_char
            .then(|| Dense::zeros(config.question_word_dim() + dc, config.out_dim()));
        ModelParams {
            word_unk: Tensor::zeros(&[dw]),
            word_real: Tensor::zeros(&[dw]),
            chars,
            column_dense,
            column_mlp: Mlp::zeros(mlp_in, &config.mlp_hidden_dims),
            question_word,
            question_combine,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Named tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("word.unk".to_string(), &self.word_unk));
        out.push(("word.real".to_string(), &self.word_real));
        if let Some(c) = &self.chars {
            out.push(("char.embedding".to_string(), &c.embedding));
            push_lstm(&mut out, "char.lstm", &c.lstm);
            out.push(("char.special".to_string(), &c.special));
        }
        if let Some(d) = &self.column_dense {
            push_dense(&mut out, "column.dense", d);
        }
        for (k, l) in self.column_mlp.layers.iter().enumerate() {
            push_dense(&mut out, &format!("column.mlp.{k}"), l);
        }
        match &self.question_word {
            QuestionWordParams::Bow(mlp) => {
                for (k, l) in mlp.layers.iter().enumerate() {
                    push_dense(&mut out, &format!("question.mlp.{k}"), l);
                }
            }
            QuestionWordParams::Lstm(l) => push_lstm(&mut out, "question.lstm", l),
        }
        if let Some(d) = &self.question_combine {
            push_dense(&mut out, "question.combine", d);
        }
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.push(("word.unk".to_string(), &mut self.word_unk));
        out.push(("word.real".to_string(), &mut self.word_real));
        if let Some(c) = &mut self.chars {
            out.push(("char.embedding".to_string(), &mut c.embedding));
            push_lstm_mut(&mut out, "char.lstm", &mut c.lstm);
            out.push(("char.special".to_string(), &mut c.special));
        }
        if let Some(d) = &mut self.column_dense {
            push_dense_mut(&mut out, "column.dense", d);
        }
        for (k, l) in self.column_mlp.layers.iter_mut().enumerate() {
            push_dense_mut(&mut out, &format!("column.mlp.{k}"), l);
        }
        match &mut self.question_word {
            QuestionWordParams::Bow(mlp) => {
                for (k, l) in mlp.layers.iter_mut().enumerate() {
                    push_dense_mut(&mut out, &format!("question.mlp.{k}"), l);
                }
            }
            QuestionWordParams::Lstm(l) => push_lstm_mut(&mut out, "question.lstm", l),
        }
        if let Some(d) = &mut self.question_combine {
            push_dense_mut(&mut out, "question.combine", d);
        }
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Accumulates `other` into `self`; both must share a layout.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            nn::add_into(&mut a.data, &b.data);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Snaps every value to the nearest f32, the storage precision of
    /// checkpoints.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Deterministic initialization: Glorot-uniform matrices, zero biases except
/// LSTM forget gates (1.0), character embeddings and the reserved-token char
/// vector uniform in ±0.05, zero UNK/REAL word rows. Values are rounded to
/// f32.
pub fn init_params(config: &ModelConfig, alphabet_size: usize, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(config, alphabet_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.tensors_mut() {
        if name.starts_with("word.") {
            continue;
        } else if name == "char.embedding" || name == "char.special" {
            t.fill_uniform(&mut rng, 0.05);
        } else if name.ends_with(".weight") || name.ends_with(".w_input") || name.ends_with(".w_hidden") {
            t.fill_glorot(&mut rng);
        } else if name.ends_with("lstm.bias") {
            let h = t.len() / 4;
            t.data[h..2 * h].fill(1.0);
        }
    }
    params.round_to_f32();
    params
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub alphabet: Alphabet,
    pub params: ModelParams,
}

enum CharToken {
    Special,
    Seq { ids: Vec<usize>, steps: Vec<LstmStep> },
}

struct UnitCache {
    slots: Vec<TokenSlot>,
    chars: Vec<CharToken>,
}

struct ColumnCache {
    name: UnitCache,
    cells: Vec<UnitCache>,
    x: Vec<f64>,
    dense_pre: Option<Vec<f64>>,
    mlp: MlpCache,
}

pub(crate) struct TableCache {
    columns: Vec<ColumnCache>,
    y: Vec<f64>,
    norm: f64,
}

impl TableCache {
    /// ReLU masks of every column, in column order.
    pub(crate) fn relu_pattern(&self, out: &mut Vec<bool>) {
        for c in &self.columns {
            if let Some(pre) = &c.dense_pre {
                out.extend(pre.iter().map(|&v| v > 0.0));
            }
            c.mlp.relu_pattern(out);
        }
    }
}

enum QuestionWordCache {
    Bow(MlpCache),
    Lstm(Vec<LstmStep>),
}

pub(crate) struct QuestionCache {
    slots: Vec<TokenSlot>,
    word: QuestionWordCache,
    chars: Vec<CharToken>,
    combine_in: Option<Vec<f64>>,
    y: Vec<f64>,
    norm: f64,
}

impl QuestionCache {
    pub(crate) fn relu_pattern(&self, out: &mut Vec<bool>) {
        if let QuestionWordCache::Bow(mc) = &self.word {
            mc.relu_pattern(out);
        }
    }
}

impl Model {
    pub fn init(config: ModelConfig, alphabet: Alphabet, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, alphabet.size(), seed);
        Ok(Model {
            config,
            alphabet,
            params,
        })
    }

    pub fn check_store(&self, store: &EmbeddingStore) -> Result<()> {
        if store.dim() != self.config.word_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.word_dim,
                found: store.dim(),
                context: "word vectors vs model word_dim".into(),
            });
        }
        Ok(())
    }

    fn word_vector(&self, store: &EmbeddingStore, slot: TokenSlot) -> Vec<f64> {
        match slot {
            TokenSlot::Pretrained(i) => store.row(i).iter().map(|&v| f64::from(v)).collect(),
            TokenSlot::Unk => self.params.word_unk.data.clone(),
            TokenSlot::Real => self.params.word_real.data.clone(),
        }
    }

    fn word_grad(grads: &mut ModelParams, slot: TokenSlot, g: &[f64], scale: f64) {
        match slot {
            TokenSlot::Pretrained(_) => {}
            TokenSlot::Unk => nn::add_scaled_into(&mut grads.word_unk.data, g, scale),
            TokenSlot::Real => nn::add_scaled_into(&mut grads.word_real.data, g, scale),
        }
    }

    fn char_params(&self) -> &CharParams {
        self.params
            .chars
            .as_ref()
            .expect("char parameters present when use_char")
    }

    /// Mean over tokens of the final char-LSTM state (or the reserved-token
    /// vector). Zero for an empty token list.
    fn char_mean_forward(&self, tokens: &[String]) -> (Vec<f64>, Vec<CharToken>) {
        let cp = self.char_params();
        let mut mean = vec![0.0; self.config.char_dim];
        let mut cache = Vec::with_capacity(tokens.len());
        for t in tokens {
            if t == REAL_TOKEN {
                nn::add_into(&mut mean, &cp.special.data);
                cache.push(CharToken::Special);
            } else {
                let ids: Vec<usize> = t.chars().map(|c| self.alphabet.index_of(c)).collect();
                let (h, steps) = cp.lstm.run(ids.iter().map(|&i| cp.embedding.row(i)));
                nn::add_into(&mut mean, &h);
                cache.push(CharToken::Seq { ids, steps });
            }
        }
        if !tokens.is_empty() {
            let n = tokens.len() as f64;
            mean.iter_mut().for_each(|v| *v /= n);
        }
        (mean, cache)
    }

    fn char_mean_backward(&self, cache: &[CharToken], d: &[f64], grads: &mut ModelParams) {
        if cache.is_empty() {
            return;
        }
        let cp = self.char_params();
        let scale = 1.0 / cache.len() as f64;
        let d: Vec<f64> = d.iter().map(|v| v * scale).collect();
        let gc = grads.chars.as_mut().expect("char grads present");
        for tok in cache {
            match tok {
                CharToken::Special => nn::add_into(&mut gc.special.data, &d),
                CharToken::Seq { ids, steps } => {
                    let dxs = cp.lstm.backward(steps, &d, &mut gc.lstm);
                    for (&id, dx) in ids.iter().zip(&dxs) {
                        nn::add_into(gc.embedding.row_mut(id), dx);
                    }
                }
            }
        }
    }

    /// Character encoding of a token list: mean of per-token final LSTM states.
    pub fn char_encode(&self, tokens: &[String]) -> Result<Vec<f64>> {
        if !self.config.use_char {
            return Err(Error::Config("model has no character encoder".into()));
        }
        if tokens.is_empty() {
            return Err(Error::Empty("char_encode over no tokens".into()));
        }
        Ok(self.char_mean_forward(tokens).0)
    }

    fn unit_forward(&self, store: &EmbeddingStore, tokens: &[String]) -> (Vec<f64>, UnitCache) {
        let dw = self.config.word_dim;
        let slots: Vec<TokenSlot> = tokens.iter().map(|t| store.resolve(t)).collect();
        let mut out = vec![0.0; self.config.unit_dim()];
        for &s in &slots {
            nn::add_into(&mut out[..dw], &self.word_vector(store, s));
        }
        if !slots.is_empty() {
            let n = slots.len() as f64;
            out[..dw].iter_mut().for_each(|v| *v /= n);
        }
        let chars = if self.config.use_char {
            let (mean, cache) = self.char_mean_forward(tokens);
            out[dw..].copy_from_slice(&mean);
            cache
        } else {
            Vec::new()
        };
        (out, UnitCache { slots, chars })
    }

    fn unit_backward(&self, cache: &UnitCache, d: &[f64], grads: &mut ModelParams) {
        if cache.slots.is_empty() {
            return;
        }
        let dw = self.config.word_dim;
        let scale = 1.0 / cache.slots.len() as f64;
        for &s in &cache.slots {
            Self::word_grad(grads, s, &d[..dw], scale);
        }
        if self.config.use_char {
            self.char_mean_backward(&cache.chars, &d[dw..], grads);
        }
    }

    fn column_forward(&self, store: &EmbeddingStore, view: &ColumnView) -> (Vec<f64>, ColumnCache) {
        let u = self.config.unit_dim();
        let (name_vec, name) = self.unit_forward(store, &view.name_tokens);
        let mut x = vec![0.0; 2 * u];
        x[..u].copy_from_slice(&name_vec);
        let mut cells = Vec::with_capacity(view.value_tokens.len());
        for tokens in &view.value_tokens {
            let (v, c) = self.unit_forward(store, tokens);
            nn::add_into(&mut x[u..], &v);
            cells.push(c);
        }
        if !cells.is_empty() {
            let m = cells.len() as f64;
            x[u..].iter_mut().for_each(|v| *v /= m);
        }
        let (e, dense_pre) = match &self.params.column_dense {
            Some(dense) => {
                let pre = dense.forward(&x);
                (pre.iter().map(|v| v.max(0.0)).collect(), Some(pre))
            }
            None => (x.clone(), None),
        };
        let (out, mlp) = self.params.column_mlp.forward(&e);
        (
            out,
            ColumnCache {
                name,
                cells,
                x,
                dense_pre,
                mlp,
            },
        )
    }

    fn column_backward(&self, cache: &ColumnCache, d: &[f64], grads: &mut ModelParams) {
        let u = self.config.unit_dim();
        let de = self.params.column_mlp.backward(&cache.mlp, d, &mut grads.column_mlp);
        let dx = match (&self.params.column_dense, &cache.dense_pre) {
            (Some(dense), Some(pre)) => {
                let dpre: Vec<f64> = de
                    .iter()
                    .zip(pre)
                    .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
                    .collect();
                dense.backward(&cache.x, &dpre, grads.column_dense.as_mut().expect("dense grads"))
            }
            _ => de,
        };
        self.unit_backward(&cache.name, &dx[..u], grads);
        if !cache.cells.is_empty() {
            let scale = 1.0 / cache.cells.len() as f64;
            let dcell: Vec<f64> = dx[u..].iter().map(|v| v * scale).collect();
            for c in &cache.cells {
                self.unit_backward(c, &dcell, grads);
            }
        }
    }

    /// Column embedding before table-level averaging.
    pub fn encode_column(&self, store: &EmbeddingStore, view: &ColumnView) -> Vec<f64> {
        self.column_forward(store, view).0
    }

    pub(crate) fn table_forward(&self, store: &EmbeddingStore, table: &Table) -> Result<(Vec<f64>, TableCache)> {
        let views = column_views(table);
        let mut mean = vec![0.0; self.config.out_dim()];
        let mut columns = Vec::with_capacity(views.len());
        for v in &views {
            let (out, cache) = self.column_forward(store, v);
            nn::add_into(&mut mean, &out);
            columns.push(cache);
        }
        let n = views.len() as f64;
        mean.iter_mut().for_each(|v| *v /= n);
        let (y, norm) = nn::l2_normalize(&mean).ok_or_else(|| Error::ZeroNorm(format!("table `{}`", table.id)))?;
        Ok((y.clone(), TableCache { columns, y, norm }))
    }

    pub(crate) fn table_backward(&self, cache: &TableCache, d: &[f64], grads: &mut ModelParams) {
        let dmean = nn::l2_normalize_backward(&cache.y, cache.norm, d);
        let scale = 1.0 / cache.columns.len() as f64;
        let dcol: Vec<f64> = dmean.iter().map(|v| v * scale).collect();
        for c in &cache.columns {
            self.column_backward(c, &dcol, grads);
        }
    }

    /// Unit-norm table embedding.
    pub fn encode_table(&self, store: &EmbeddingStore, table: &Table) -> Result<Vec<f64>> {
        self.table_forward(store, table).map(|(y, _)| y)
    }

    pub(crate) fn question_forward(
        &self,
        store: &EmbeddingStore,
        tokens: &[String],
    ) -> Result<(Vec<f64>, QuestionCache)> {
        if tokens.is_empty() {
            return Err(Error::Empty("question has no tokens".into()));
        }
        let slots: Vec<TokenSlot> = tokens.iter().map(|t| store.resolve(t)).collect();
        let words: Vec<Vec<f64>> = slots.iter().map(|&s| self.word_vector(store, s)).collect();
        let (word_out, word) = match &self.params.question_word {
            QuestionWordParams::Bow(mlp) => {
                let mut mean = vec![0.0; self.config.word_dim];
                words.iter().for_each(|w| nn::add_into(&mut mean, w));
                let n = words.len() as f64;
                mean.iter_mut().for_each(|v| *v /= n);
                let (out, cache) = mlp.forward(&mean);
                (out, QuestionWordCache::Bow(cache))
            }
            QuestionWordParams::Lstm(lstm) => {
                let (h, steps) = lstm.run(words.iter().map(Vec::as_slice));
                (h, QuestionWordCache::Lstm(steps))
            }
        };
        let (z, chars, combine_in) = match &self.params.question_combine {
            Some(dense) => {
                let (cm, chars) = self.char_mean_forward(tokens);
                let mut input = word_out;
                input.extend_from_slice(&cm);
                (dense.forward(&input), chars, Some(input))
            }
            None => (word_out, Vec::new(), None),
        };
        let (y, norm) = nn::l2_normalize(&z).ok_or_else(|| Error::ZeroNorm("question".into()))?;
        Ok((
            y.clone(),
            QuestionCache {
                slots,
                word,
                chars,
                combine_in,
                y,
                norm,
            },
        ))
    }

    pub(crate) fn question_backward(&self, cache: &QuestionCache, d: &[f64], grads: &mut ModelParams) {
        let dz = nn::l2_normalize_backward(&cache.y, cache.norm, d);
        let dword = match (&self.params.question_combine, &cache.combine_in) {
            (Some(dense), Some(input)) => {
                let din = dense.backward(input, &dz, grads.question_combine.as_mut().expect("combine grads"));
                let wd = self.config.question_word_dim();
                self.char_mean_backward(&cache.chars, &din[wd..], grads);
                din[..wd].to_vec()
            }
            _ => dz,
        };
        match (&self.params.question_word, &cache.word, &mut grads.question_word) {
            (QuestionWordParams::Bow(mlp), QuestionWordCache::Bow(mc), QuestionWordParams::Bow(gm)) => {
                let dmean = mlp.backward(mc, &dword, gm);
                let scale = 1.0 / cache.slots.len() as f64;
                for &s in &cache.slots {
                    Self::word_grad(grads, s, &dmean, scale);
                }
            }
            (QuestionWordParams::Lstm(lstm), QuestionWordCache::Lstm(steps), QuestionWordParams::Lstm(gl)) => {
                let dxs = lstm.backward(steps, &dword, gl);
                for (&s, dx) in cache.slots.iter().zip(&dxs) {
                    Self::word_grad(grads, s, dx, 1.0);
                }
            }
            _ => unreachable!("question encoder layout mismatch"),
        }
    }

    /// Unit-norm question embedding.
    pub fn encode_question(&self, store: &EmbeddingStore, tokens: &[String]) -> Result<Vec<f64>> {
        self.question_forward(store, tokens).map(|(y, _)| y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, ColumnType};

    fn store() -> EmbeddingStore {
        let words = ["city", "york", "paris", "score", "who", "won", "team", "a", "b", "c"];
        EmbeddingStore::from_vectors(
            4,
            words.iter().enumerate().map(|(i, w)| {
                let v: Vec<f32> = (0..4).map(|k| ((i * 7 + k * 3) % 11) as f32 / 5.0 - 1.0).collect();
                (*w, v)
            }),
        )
        .unwrap()
    }

    fn config(use_char: bool, kind: QuestionEncoderKind) -> ModelConfig {
        ModelConfig {
            word_dim: 4,
            char_dim: 3,
            use_char,
            question_encoder: kind,
            column_intermediate_dim: 6,
            mlp_hidden_dims: vec![5, 4],
            question_mlp_dims: vec![4, 4],
            word_lstm_dim: 4,
            margin: 0.5,
        }
    }

    fn alphabet() -> Alphabet {
        Alphabet::from_chars("abcdefghijklmnopqrstuvwxyz0123456789?".chars())
    }

    fn table() -> Table {
        Table {
            id: "t".into(),
            column_names: vec!["City".into(), "Score".into(), "Team".into()],
            column_types: vec![ColumnType::Text, ColumnType::Real, ColumnType::Text],
            rows: vec![
                vec!["York".into(), "3".into(), "a b".into()],
                vec!["Paris".into(), "10".into(), "c zz".into()],
            ],
        }
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig {
            use_char: true,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(2 * cfg.unit_dim(), 1400);
        assert_eq!(cfg.question_word_dim() + cfg.char_dim, 700);
        let p = ModelParams::zeros(&cfg, 40);
        assert_eq!(p.column_dense.as_ref().unwrap().weight.shape, vec![1400, 1000]);
        assert_eq!(p.column_mlp.layers[0].weight.shape, vec![1000, 750]);
        assert_eq!(p.question_combine.as_ref().unwrap().weight.shape, vec![700, 500]);

        let no_char = ModelParams::zeros(&ModelConfig::default(), 40);
        assert!(no_char.question_combine.is_none() && no_char.chars.is_none());
        assert!(no_char.tensors().iter().all(|(n, _)| !n.starts_with("char.")));
    }

    #[test]
    fn init_is_deterministic_and_follows_scheme() {
        let cfg = config(true, QuestionEncoderKind::Lstm);
        let a = init_params(&cfg, 10, 5);
        assert_eq!(a, init_params(&cfg, 10, 5));
        assert_ne!(a, init_params(&cfg, 10, 6));
        let lstm_bias = &a.chars.as_ref().unwrap().lstm.bias.data;
        assert_eq!(&lstm_bias[..3], &[0.0; 3]);
        assert_eq!(&lstm_bias[3..6], &[1.0; 3]);
        assert!(a.word_unk.data.iter().all(|&v| v == 0.0));
        assert!(a.chars.as_ref().unwrap().embedding.data.iter().all(|v| v.abs() <= 0.05));
        assert!(a
            .tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|&v| f64::from(v as f32) == v)));
        let names: Vec<String> = a.tensors().into_iter().map(|(n, _)| n).collect();
        let mut b = a.clone();
        let names_mut: Vec<String> = b.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(false, QuestionEncoderKind::Bow);
        cfg.question_mlp_dims = vec![4, 7];
        assert!(cfg.validate().is_err());
        cfg.use_char = true;
        cfg.validate().unwrap();
        cfg.margin = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_char_params_give_zero_char_encoding() {
        let mut model = Model::init(config(true, QuestionEncoderKind::Bow), alphabet(), 1).unwrap();
        let cp = model.params.chars.as_mut().unwrap();
        cp.embedding.data.fill(0.0);
        cp.lstm = Lstm::zeros(3, 3);
        assert_eq!(model.char_encode(&["x".into()]).unwrap(), vec![0.0; 3]);
        assert!(model.char_encode(&[]).is_err());
    }

    #[test]
    fn char_encode_mean_and_unknown_chars() {
        let model = Model::init(config(true, QuestionEncoderKind::Bow), alphabet(), 1).unwrap();
        let one = model.char_encode(&["ab".into()]).unwrap();
        let two = model.char_encode(&["ab".into(), "ab".into()]).unwrap();
        for (x, y) in one.iter().zip(&two) {
            assert!((x - y).abs() < 1e-15);
        }
        let unk = model.char_encode(&["ü€".into()]).unwrap();
        assert!(unk.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoders_are_unit_norm_and_invariant() {
        let s = store();
        for use_char in [false, true] {
            let model = Model::init(config(use_char, QuestionEncoderKind::Bow), alphabet(), 3).unwrap();
            let t = table();
            let e = model.encode_table(&s, &t).unwrap();
            assert!((nn::dot(&e, &e).sqrt() - 1.0).abs() < 1e-12);

            let mut rows_rev = t.clone();
            rows_rev.rows.reverse();
            let e2 = model.encode_table(&s, &rows_rev).unwrap();
            assert!(e.iter().zip(&e2).all(|(a, b)| (a - b).abs() < 1e-12));

            let mut cols = t.clone();
            let perm = [2, 0, 1];
            cols.column_names = perm.iter().map(|&i| t.column_names[i].clone()).collect();
            cols.column_types = perm.iter().map(|&i| t.column_types[i]).collect();
            cols.rows = t
                .rows
                .iter()
                .map(|r| perm.iter().map(|&i| r[i].clone()).collect())
                .collect();
            let e3 = model.encode_table(&s, &cols).unwrap();
            assert!(e.iter().zip(&e3).all(|(a, b)| (a - b).abs() < 1e-12));

            let q = model.encode_question(&s, &tokenize("who won city ?")).unwrap();
            let q2 = model.encode_question(&s, &tokenize("? city won who")).unwrap();
            assert!(q.iter().zip(&q2).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!((nn::dot(&q, &q).sqrt() - 1.0).abs() < 1e-12);
            assert!(model.encode_question(&s, &[]).is_err());
        }
    }

    #[test]
    fn real_column_ignores_numbers_and_empty_column_is_finite() {
        let s = store();
        let model = Model::init(config(true, QuestionEncoderKind::Bow), alphabet(), 4).unwrap();
        let mut t = table();
        let a = model.encode_table(&s, &t).unwrap();
        t.rows[0][1] = "123456".into();
        t.rows[1][1] = "-7.5".into();
        assert_eq!(a, model.encode_table(&s, &t).unwrap());

        let view = ColumnView {
            name_tokens: vec!["city".into()],
            value_tokens: vec![],
        };
        assert!(model.encode_column(&s, &view).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_column_table_is_normalized_column() {
        let s = store();
        let model = Model::init(config(false, QuestionEncoderKind::Bow), alphabet(), 9).unwrap();
        let t = Table {
            id: "one".into(),
            column_names: vec!["City".into()],
            column_types: vec![ColumnType::Text],
            rows: vec![vec!["york".into()]],
        };
        let col = model.encode_column(&s, &column_views(&t)[0]);
        let (expected, _) = nn::l2_normalize(&col).unwrap();
        assert_eq!(model.encode_table(&s, &t).unwrap(), expected);
    }

    #[test]
    fn lstm_question_is_order_sensitive() {
        let s = store();
        let model = Model::init(config(false, QuestionEncoderKind::Lstm), alphabet(), 2).unwrap();
        let q = model.encode_question(&s, &tokenize("who won york")).unwrap();
        let q2 = model.encode_question(&s, &tokenize("york won who")).unwrap();
        assert!((nn::dot(&q, &q).sqrt() - 1.0).abs() < 1e-12);
        assert!(q.iter().zip(&q2).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn zero_params_table_is_an_error() {
        let s = store();
        let mut model = Model::init(config(false, QuestionEncoderKind::Bow), alphabet(), 2).unwrap();
        model.params = model.params.zeros_like();
        assert!(matches!(model.encode_table(&s, &table()), Err(Error::ZeroNorm(_))));
    }
}
