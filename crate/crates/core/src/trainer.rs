//! Contrastive training with Adam, plus a finite-difference gradient audit.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{ColumnType, Corpus, Question, Split, SplitData, Table};
use crate::embed_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::metrics::mean_reciprocal_rank;
use crate::model::{Alphabet, Model, ModelConfig, ModelParams, QuestionEncoderKind};
use crate::nn;
use crate::sampler::{Label, Provenance, TrainTuple};

/// Positive: `½d²`. Negative: `½·max(0, m − d²)`.
pub fn contrastive_loss(distance: f64, label: Label, margin: f64) -> f64 {
    let d2 = distance * distance;
    match label {
        Label::Positive => 0.5 * d2,
        Label::Negative => 0.5 * (margin - d2).max(0.0),
    }
}

/// Loss and its gradient w.r.t. the table and question embeddings.
/// At the margin kink the subgradient 0 is used.
fn pair_loss_grad(table: &[f64], question: &[f64], label: Label, margin: f64) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = table.iter().zip(question).map(|(t, q)| t - q).collect();
    let d2 = nn::dot(&diff, &diff);
    match label {
        Label::Positive => (0.5 * d2, diff),
        Label::Negative if margin - d2 > 0.0 => (0.5 * (margin - d2), diff.iter().map(|v| -v).collect()),
        Label::Negative => (0.0, vec![0.0; diff.len()]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Evaluate on dev every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 0,
            patience: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("learning_rate must be > 0 and batch_size >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon.is_nan()
            || self.epsilon <= 0.0
        {
            return Err(Error::Config("adam betas must be in [0, 1) and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Flat training configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub use_char: bool,
    pub question_encoder: QuestionEncoderKind,
    pub column_intermediate_dim: usize,
    pub mlp_hidden_dims: Vec<usize>,
    /// Defaults to `[out, out]` where `out` is the last MLP width.
    pub question_mlp_dims: Option<Vec<usize>>,
    /// Defaults to the last MLP width.
    pub word_lstm_dim: Option<usize>,
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let h = TrainHyper::default();
        TrainConfig {
            word_dim: m.word_dim,
            char_dim: m.char_dim,
            use_char: m.use_char,
            question_encoder: m.question_encoder,
            column_intermediate_dim: m.column_intermediate_dim,
            mlp_hidden_dims: m.mlp_hidden_dims,
            question_mlp_dims: None,
            word_lstm_dim: None,
            margin: m.margin,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            max_epochs: h.max_epochs,
            eval_every: h.eval_every,
            seed: h.seed,
            beta1: h.beta1,
            beta2: h.beta2,
            epsilon: h.epsilon,
            patience: h.patience,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn model_config(&self) -> ModelConfig {
        let out = self.mlp_hidden_dims.last().copied().unwrap_or(0);
        ModelConfig {
            word_dim: self.word_dim,
            char_dim: self.char_dim,
            use_char: self.use_char,
            question_encoder: self.question_encoder,
            column_intermediate_dim: self.column_intermediate_dim,
            mlp_hidden_dims: self.mlp_hidden_dims.clone(),
            question_mlp_dims: self.question_mlp_dims.clone().unwrap_or_else(|| vec![out, out]),
            word_lstm_dim: self.word_lstm_dim.unwrap_or(out),
            margin: self.margin,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            seed: self.seed,
            eval_every: self.eval_every,
            patience: self.patience,
        }
    }
}

/// Per-tensor Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update. Rejects non-finite gradients before touching
/// any state.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    hyper: &TrainHyper,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if let Some(index) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: name, index });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = hyper.beta1 * m.data[i] + (1.0 - hyper.beta1) * gi;
            v.data[i] = hyper.beta2 * v.data[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            p.data[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

fn resolve<'a>(data: &'a SplitData, tuple: &TrainTuple) -> Result<(&'a Question, &'a Table)> {
    let q = data
        .question(&tuple.question_id)
        .ok_or_else(|| Error::UnknownId(tuple.question_id.clone()))?;
    let t = data
        .table(&tuple.table_id)
        .ok_or_else(|| Error::UnknownId(tuple.table_id.clone()))?;
    Ok((q, t))
}

/// Tuples per parallel work unit. Fixed so the reduction order does not
/// depend on the thread count.
const CHUNK: usize = 8;

/// Mean contrastive loss over `batch` and its gradient w.r.t. every
/// trainable tensor.
pub fn batch_loss_and_grads(
    model: &Model,
    store: &EmbeddingStore,
    data: &SplitData,
    batch: &[TrainTuple],
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let resolved = batch
        .iter()
        .map(|t| resolve(data, t).map(|(q, tab)| (q, tab, t.label)))
        .collect::<Result<Vec<_>>>()?;
    let margin = model.config.margin;
    let partials = resolved
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = model.params.zeros_like();
            let mut loss = 0.0;
            for &(q, t, label) in chunk {
                let (et, tcache) = model.table_forward(store, t)?;
                let (eq, qcache) = model.question_forward(store, &q.tokens)?;
                let (l, d_et) = pair_loss_grad(&et, &eq, label, margin);
                loss += l;
                if d_et.iter().any(|&v| v != 0.0) {
                    let d_eq: Vec<f64> = d_et.iter().map(|v| -v).collect();
                    model.table_backward(&tcache, &d_et, &mut grads);
                    model.question_backward(&qcache, &d_eq, &mut grads);
                }
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((loss * scale, grads))
}

/// Mean contrastive loss only.
pub fn batch_loss(model: &Model, store: &EmbeddingStore, data: &SplitData, batch: &[TrainTuple]) -> Result<f64> {
    let mut total = 0.0;
    for tuple in batch {
        let (q, t) = resolve(data, tuple)?;
        let et = model.encode_table(store, t)?;
        let eq = model.encode_question(store, &q.tokens)?;
        total += pair_loss_grad(&et, &eq, tuple.label, model.config.margin).0;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevPoint {
    pub step: usize,
    pub epoch: usize,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub dev_mrr: Vec<DevPoint>,
    pub best_step: usize,
    pub best_dev_mrr: f64,
    pub steps: usize,
    pub checkpoint: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Parameters with the best dev MRR.
    pub best: Checkpoint,
}

/// Trains from seeded initial parameters, evaluating dev MRR at step 0 and
/// then every `eval_every` steps (or once per epoch). The checkpoint at
/// `checkpoint_path` is rewritten only when dev MRR strictly improves.
pub fn train(
    corpus: &Corpus,
    tuples: &[TrainTuple],
    store: &EmbeddingStore,
    config: &ModelConfig,
    hyper: &TrainHyper,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if tuples.is_empty() {
        return Err(Error::Empty("no training tuples".into()));
    }
    for t in tuples {
        resolve(&corpus.train, t)?;
    }
    let mut model = Model::init(config.clone(), Alphabet::build(&corpus.train), hyper.seed)?;
    model.check_store(store)?;
    let corpus_fingerprint = corpus.fingerprint(Split::Train);

    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..tuples.len()).collect();

    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        dev_mrr: Vec::new(),
        best_step: 0,
        best_dev_mrr: f64::NEG_INFINITY,
        steps: 0,
        checkpoint: checkpoint_path.map(Path::to_path_buf),
    };
    let mut best = Checkpoint {
        model: model.clone(),
        corpus_fingerprint: corpus_fingerprint.clone(),
    };
    let mut since_improvement = 0usize;

    let mut evaluate = |model: &Model, step: usize, epoch: usize, report: &mut TrainReport| -> Result<bool> {
        let mrr = mean_reciprocal_rank(model, store, &corpus.dev)?;
        log::info!("step {step} epoch {epoch}: dev MRR {mrr:.4}");
        report.dev_mrr.push(DevPoint { step, epoch, mrr });
        if mrr > report.best_dev_mrr {
            report.best_dev_mrr = mrr;
            report.best_step = step;
            best.model = model.clone();
            if let Some(path) = checkpoint_path {
                best.write(path)?;
            }
            return Ok(true);
        }
        Ok(false)
    };

    evaluate(&model, 0, 0, &mut report)?;
    let mut step = 0;
    'epochs: for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<TrainTuple> = chunk.iter().map(|&i| tuples[i].clone()).collect();
            let (loss, grads) = batch_loss_and_grads(&model, store, &corpus.train, &batch)?;
            adam_step(&mut model.params, &grads, &mut adam, hyper)?;
            model.params.round_to_f32();
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            if hyper.eval_every > 0 && step % hyper.eval_every == 0 {
                since_improvement = if evaluate(&model, step, epoch, &mut report)? {
                    0
                } else {
                    since_improvement + 1
                };
            }
        }
        report.epoch_losses.push(epoch_loss / tuples.len() as f64);
        log::info!("epoch {epoch}: mean loss {:.6}", epoch_loss / tuples.len() as f64);
        if hyper.eval_every == 0 {
            since_improvement = if evaluate(&model, step, epoch, &mut report)? {
                0
            } else {
                since_improvement + 1
            };
        }
        if hyper.patience.is_some_and(|p| since_improvement >= p) {
            log::info!("no dev improvement in {since_improvement} evaluations, stopping");
            break 'epochs;
        }
    }
    report.steps = step;
    Ok(TrainOutcome { report, best })
}

/// Mean loss plus the on/off state of every ReLU and margin hinge the batch
/// passes through.
fn loss_and_pattern(
    model: &Model,
    store: &EmbeddingStore,
    data: &SplitData,
    batch: &[TrainTuple],
) -> Result<(f64, Vec<bool>)> {
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for tuple in batch {
        let (q, t) = resolve(data, tuple)?;
        let (et, tcache) = model.table_forward(store, t)?;
        let (eq, qcache) = model.question_forward(store, &q.tokens)?;
        tcache.relu_pattern(&mut pattern);
        qcache.relu_pattern(&mut pattern);
        let (l, _) = pair_loss_grad(&et, &eq, tuple.label, model.config.margin);
        if tuple.label == Label::Negative {
            let d2: f64 = et.iter().zip(&eq).map(|(a, b)| (a - b) * (a - b)).sum();
            pattern.push(model.config.margin - d2 > 0.0);
        }
        total += l;
    }
    Ok((total / batch.len() as f64, pattern))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MicroBatch {
    /// Positives and negatives.
    Mixed,
    /// Negatives only; with a tiny margin every term is zero.
    NegativesOnly,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub batch: MicroBatch,
    /// Test hook: perturb the analytic gradient of this tensor.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            tolerance: 1e-4,
            batch: MicroBatch::Mixed,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_tensor: Vec<(String, f64)>,
    pub loss: f64,
    pub n_scalars: usize,
    /// Coordinates whose `±h` probes switched a ReLU or hinge. The loss is
    /// not differentiable on that interval, so they are left out of the
    /// error.
    pub kink_skipped: usize,
    pub passed: bool,
}

/// Tiny synthetic corpus for gradient checks: text and real columns, an
/// empty cell, and out-of-vocabulary tokens so every trainable row is hit.
pub fn micro_corpus(word_dim: usize, seed: u64) -> Result<(SplitData, EmbeddingStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let words = [
        "city", "team", "score", "york", "paris", "lions", "who", "won", "what", "year", "name",
    ];
    let store = EmbeddingStore::from_vectors(
        word_dim,
        words.iter().map(|w| {
            (
                *w,
                (0..word_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<f32>>(),
            )
        }),
    )?;
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let tables = vec![
        Table {
            id: "t0".into(),
            column_names: s(&["City", "Score"]),
            column_types: vec![ColumnType::Text, ColumnType::Real],
            rows: vec![s(&["York", "3"]), s(&["Paris qqz", "10"])],
        },
        Table {
            id: "t1".into(),
            column_names: s(&["Team name", "Year"]),
            column_types: vec![ColumnType::Text, ColumnType::Real],
            rows: vec![s(&["Lions", "1999"]), s(&["", "2001"])],
        },
        Table {
            id: "t2".into(),
            column_names: s(&["Winner"]),
            column_types: vec![ColumnType::Text],
            rows: vec![s(&["york lions"])],
        },
    ];
    let question = |id: &str, text: &str, table: &str| Question {
        id: id.into(),
        raw_text: text.into(),
        tokens: crate::corpus::tokenize(text),
        table_id: table.into(),
        split: Split::Train,
    };
    let questions = vec![
        question("q0", "What city scored 3 ?", "t0"),
        question("q1", "Who won in year zzk?", "t1"),
        question("q2", "name the winner", "t2"),
    ];
    Ok((SplitData::new(tables, questions)?, store))
}

fn micro_batch(kind: &MicroBatch) -> Vec<TrainTuple> {
    let tuple = |q: &str, t: &str, label, provenance| TrainTuple {
        question_id: q.into(),
        table_id: t.into(),
        label,
        provenance,
    };
    match kind {
        MicroBatch::Mixed => vec![
            tuple("q0", "t0", Label::Positive, Provenance::Gold),
            tuple("q1", "t0", Label::Negative, Provenance::Hard),
            tuple("q1", "t1", Label::Positive, Provenance::Gold),
            tuple("q2", "t1", Label::Negative, Provenance::Random),
            tuple("q0", "t2", Label::Negative, Provenance::Hard),
        ],
        MicroBatch::NegativesOnly => vec![
            tuple("q1", "t0", Label::Negative, Provenance::Hard),
            tuple("q0", "t2", Label::Negative, Provenance::Random),
        ],
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = nn::dot(analytic, analytic).sqrt().max(nn::dot(numeric, numeric).sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares analytic gradients with central differences on a micro-corpus.
///
/// The error for a tensor is `‖a − n‖ / max(‖a‖, ‖n‖)` (absolute when both
/// norms vanish); the report's maximum is over all tensors. Coordinates whose
/// probes cross a kink are excluded and counted. Parameters are randomly
/// initialized from `seed` and, unlike training, are not rounded to f32
/// while perturbed.
pub fn finite_diff_check(config: &ModelConfig, seed: u64, options: &GradCheckOptions) -> Result<GradCheckReport> {
    config.validate()?;
    let (data, store) = micro_corpus(config.word_dim, seed)?;
    let mut model = Model::init(config.clone(), Alphabet::build(&data), seed)?;
    // Move the reserved rows off zero so their gradients are not trivially
    // symmetric.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    model.params.word_unk.fill_uniform(&mut rng, 0.5);
    model.params.word_real.fill_uniform(&mut rng, 0.5);
    let batch = micro_batch(&options.batch);
    let (loss, mut analytic) = batch_loss_and_grads(&model, &store, &data, &batch)?;

    if let Some(name) = &options.corrupt {
        let (_, t) = analytic
            .tensors_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownId(name.clone()))?;
        // Every entry moves, so skipped coordinates cannot hide the fault.
        for v in t.data.iter_mut() {
            *v = 1.1 * *v + 1e-2;
        }
    }

    let (_, base_pattern) = loss_and_pattern(&model, &store, &data, &batch)?;
    let mut kink_skipped = 0;
    let h = options.step;
    let n_tensors = model.params.tensors().len();
    let mut per_tensor = Vec::with_capacity(n_tensors);
    for ti in 0..n_tensors {
        let (name, len) = {
            let (n, t) = &model.params.tensors()[ti];
            (n.clone(), t.len())
        };
        let mut numeric = Vec::with_capacity(len);
        let mut kept = Vec::with_capacity(len);
        for i in 0..len {
            let original = model.params.tensors()[ti].1.data[i];
            model.params.tensors_mut()[ti].1.data[i] = original + h;
            let (plus, p_plus) = loss_and_pattern(&model, &store, &data, &batch)?;
            model.params.tensors_mut()[ti].1.data[i] = original - h;
            let (minus, p_minus) = loss_and_pattern(&model, &store, &data, &batch)?;
            model.params.tensors_mut()[ti].1.data[i] = original;
            if p_plus != base_pattern || p_minus != base_pattern {
                kink_skipped += 1;
                continue;
            }
            numeric.push((plus - minus) / (2.0 * h));
            kept.push(analytic.tensors()[ti].1.data[i]);
        }
        let err = relative_error(&kept, &numeric);
        per_tensor.push((name, err));
    }
    let max_relative_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_tensor,
        loss,
        n_scalars: model.params.n_scalars(),
        kink_skipped,
        passed: max_relative_error <= options.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_table() {
        assert_eq!(contrastive_loss(0.0, Label::Positive, 0.5), 0.0);
        assert_eq!(contrastive_loss(0.6f64.sqrt(), Label::Negative, 0.5), 0.0);
        assert_eq!(contrastive_loss(0.0, Label::Negative, 0.5), 0.25);
        assert!((contrastive_loss(0.4, Label::Positive, 0.5) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn loss_is_continuous_at_margin() {
        let m = 0.5f64;
        let d = m.sqrt();
        assert_eq!(contrastive_loss(d, Label::Negative, m), 0.0);
        assert!(contrastive_loss(d - 1e-9, Label::Negative, m) < 1e-8);
        let (l, g) = pair_loss_grad(&[d, 0.0], &[0.0, 0.0], Label::Negative, m);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    fn tiny(use_char: bool, kind: QuestionEncoderKind, margin: f64) -> ModelConfig {
        ModelConfig {
            word_dim: 8,
            char_dim: 6,
            use_char,
            question_encoder: kind,
            column_intermediate_dim: 10,
            mlp_hidden_dims: vec![12, 8],
            question_mlp_dims: vec![8, 8],
            word_lstm_dim: 8,
            margin,
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = tiny(true, QuestionEncoderKind::Lstm, 0.5);
        let mut params = crate::model::init_params(&cfg, 5, 1);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let zeros = params.zeros_like();
        adam_step(&mut params, &zeros, &mut state, &TrainHyper::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_is_sign_of_gradient() {
        let cfg = tiny(false, QuestionEncoderKind::Bow, 0.5);
        let mut params = crate::model::init_params(&cfg, 5, 1);
        let before = params.clone();
        let mut grads = params.zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, t) in grads.tensors_mut() {
            t.fill_uniform(&mut rng, 2.0);
        }
        let hyper = TrainHyper::default();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        for (((_, p), (_, b)), (_, g)) in params.tensors().iter().zip(before.tensors()).zip(grads.tensors()) {
            for i in 0..p.len() {
                let expected = -hyper.learning_rate * g.data[i].signum();
                let tol = hyper.learning_rate * hyper.epsilon / g.data[i].abs() + 1e-15;
                assert!((p.data[i] - b.data[i] - expected).abs() <= tol);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let cfg = tiny(false, QuestionEncoderKind::Bow, 0.5);
        let mut params = crate::model::init_params(&cfg, 5, 1);
        let mut grads = params.zeros_like();
        grads.column_mlp.layers[1].bias.data[2] = f64::NAN;
        let mut state = AdamState::new(&params);
        let err = adam_step(&mut params, &grads, &mut state, &TrainHyper::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient { tensor, index: 2 }) if tensor == "column.mlp.1.bias"));
    }

    #[test]
    fn batch_loss_is_mean_of_tuple_losses() {
        let cfg = tiny(true, QuestionEncoderKind::Bow, 4.0);
        let (data, store) = micro_corpus(8, 3).unwrap();
        let model = Model::init(cfg, Alphabet::build(&data), 3).unwrap();
        let batch = micro_batch(&MicroBatch::Mixed);
        let (loss, _) = batch_loss_and_grads(&model, &store, &data, &batch).unwrap();
        let singles: f64 = batch
            .iter()
            .map(|t| {
                batch_loss_and_grads(&model, &store, &data, std::slice::from_ref(t))
                    .unwrap()
                    .0
            })
            .sum();
        assert!((loss - singles / batch.len() as f64).abs() < 1e-12);
        assert!((loss - batch_loss(&model, &store, &data, &batch).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unknown_ids_are_errors() {
        let (data, store) = micro_corpus(8, 3).unwrap();
        let model = Model::init(tiny(false, QuestionEncoderKind::Bow, 0.5), Alphabet::build(&data), 3).unwrap();
        let bad = TrainTuple {
            question_id: "nope".into(),
            table_id: "t0".into(),
            label: Label::Positive,
            provenance: Provenance::Gold,
        };
        assert!(matches!(
            batch_loss_and_grads(&model, &store, &data, &[bad]),
            Err(Error::UnknownId(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for use_char in [false, true] {
            for kind in [QuestionEncoderKind::Bow, QuestionEncoderKind::Lstm] {
                for margin in [0.5, 4.0] {
                    let r = finite_diff_check(&tiny(use_char, kind, margin), 7, &GradCheckOptions::default()).unwrap();
                    assert!(r.passed, "char={use_char} {kind:?} m={margin}: {:?}", r.per_tensor);
                }
            }
        }
    }

    #[test]
    fn zero_loss_batch_has_zero_error() {
        let r = finite_diff_check(
            &tiny(true, QuestionEncoderKind::Bow, 1e-6),
            7,
            &GradCheckOptions {
                batch: MicroBatch::NegativesOnly,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let r = finite_diff_check(
            &tiny(false, QuestionEncoderKind::Bow, 4.0),
            7,
            &GradCheckOptions {
                corrupt: Some("column.mlp.0.weight".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_relative_error > 1e-4);
    }

    #[test]
    fn probes_across_a_relu_kink_are_skipped() {
        let mut cfg = tiny(true, QuestionEncoderKind::Bow, 0.5);
        cfg.column_intermediate_dim = 16;
        // At this seed a column-dense unit sits within 1e-3 of zero.
        let coarse = finite_diff_check(&cfg, 7, &GradCheckOptions::default()).unwrap();
        assert!(coarse.kink_skipped > 0);
        assert!(coarse.kink_skipped * 20 < coarse.n_scalars);
        assert!(coarse.passed, "{}", coarse.max_relative_error);
        let fine = finite_diff_check(
            &cfg,
            7,
            &GradCheckOptions {
                step: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fine.kink_skipped, 0);
        assert!(fine.passed, "{}", fine.max_relative_error);
    }

    #[test]
    fn train_config_defaults_and_unknown_keys() {
        let c = TrainConfig::from_json(r#"{"word_dim": 8, "mlp_hidden_dims": [12, 8]}"#).unwrap();
        let m = c.model_config();
        assert_eq!(m.question_mlp_dims, vec![8, 8]);
        assert_eq!(m.word_lstm_dim, 8);
        assert_eq!(c.hyper().learning_rate, 1e-4);
        assert_eq!(c.hyper().batch_size, 128);
        assert!(TrainConfig::from_json(r#"{"wrod_dim": 8}"#).is_err());
    }
}
